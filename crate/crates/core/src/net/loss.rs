//! Reconstruction-error training objective.
//!
//! For a patch with hazy input `I`, clean `J`, ground-truth `t′`, `A′` and
//! predictions `t_p`, `A_p`, three reconstructions of `I` are compared:
//!
//! * `L1 = |I − J·t′ − (1 − t′)·A_p|` (true transmittance, predicted illumination)
//! * `L2 = |I − J·t_p − (1 − t_p)·A′|` (predicted transmittance, true illumination)
//! * `L3 = |I − J·t_p − (1 − t_p)·A_p|` (both predicted)
//!
//! Residuals are summed over the colour channels and the per-pixel total
//! `η·L1 + L2 + η·L3` is averaged over pixels. `η(t′)` down-weights the terms
//! that use the predicted illumination where haze is thin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorMap, Image, ScalarMap};
use crate::nn::Real;

pub const DEFAULT_GAMMA: f64 = 15.0;

/// `η(t) = 1 − (e^{γt} − 1)/(e^{γ} − 1)`.
pub fn eta(t: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be at least 1, got {gamma}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("transmittance {t} outside [0, 1]")));
    }
    Ok(1.0 - (gamma * t).exp_m1() / gamma.exp_m1())
}

/// `γ` and the enabled reconstruction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: DEFAULT_GAMMA,
            l1: true,
            l2: true,
            l3: true,
        }
    }
}

impl LossWeights {
    pub fn with_terms(l1: bool, l2: bool, l3: bool) -> Self {
        LossWeights {
            l1,
            l2,
            l3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be at least 1, got {}", self.gamma)));
        }
        if !(self.l1 || self.l2 || self.l3) {
            return Err(Error::invalid("at least one loss term must be enabled"));
        }
        Ok(())
    }
}

/// What the network is trained to minimise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Weighted sum of the enabled reconstruction terms.
    Reconstruction(LossWeights),
    /// Plain squared error on the maps, `(t_p − t′)² + Σ_c (A_p − A′)²` per pixel.
    MapMse,
}

impl Default for Objective {
    fn default() -> Self {
        Objective::Reconstruction(LossWeights::default())
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Reconstruction(w) => w.validate(),
            Objective::MapMse => Ok(()),
        }
    }

    /// Parses `mse` or a comma-separated subset of `l1,l2,l3`.
    pub fn parse(text: &str, gamma: f64) -> Result<Self> {
        let text = text.trim().to_ascii_lowercase();
        if text == "mse" {
            return Ok(Objective::MapMse);
        }
        let mut w = LossWeights {
            gamma,
            l1: false,
            l2: false,
            l3: false,
        };
        for term in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match term {
                "l1" => w.l1 = true,
                "l2" => w.l2 = true,
                "l3" => w.l3 = true,
                other => return Err(Error::invalid(format!("unknown loss term {other:?}"))),
            }
        }
        w.validate()?;
        Ok(Objective::Reconstruction(w))
    }

    pub fn label(&self) -> String {
        match self {
            Objective::MapMse => "mse".into(),
            Objective::Reconstruction(w) => [("l1", w.l1), ("l2", w.l2), ("l3", w.l3)]
                .iter()
                .filter(|(_, on)| *on)
                .map(|(n, _)| *n)
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

/// Ground truth of one patch in planar layout (`3×P` colour planes, `P` transmittance values).
#[derive(Debug, Clone, Copy)]
pub struct PatchTargets<'a, T> {
    pub hazy: &'a [T],
    pub clean: &'a [T],
    pub t_true: &'a [T],
    pub a_true: &'a [T],
}

/// Per-term means over pixels, reported alongside the total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Evaluates the objective on one planar patch and adds `scale·∂L/∂prediction`
/// into `grad_t` and `grad_a`.
pub fn patch_loss<T: Real>(
    targets: PatchTargets<'_, T>,
    t_pred: &[T],
    a_pred: &[T],
    objective: &Objective,
    scale: T,
    grad_t: &mut [T],
    grad_a: &mut [T],
) -> LossTerms {
    let n = targets.t_true.len();
    debug_assert!(
        targets.hazy.len() == 3 * n
            && targets.clean.len() == 3 * n
            && targets.a_true.len() == 3 * n
            && t_pred.len() == n
            && a_pred.len() == 3 * n
    );
    let inv_n = T::one() / T::from_usize(n).expect("pixel count");
    let g = scale * inv_n;
    let mut terms = LossTerms::default();
    match objective {
        Objective::MapMse => {
            let two = T::lit(2.0);
            for x in 0..n {
                let dt = t_pred[x] - targets.t_true[x];
                terms.total += (dt * dt).to_f64().unwrap();
                grad_t[x] += g * two * dt;
                for c in 0..3 {
                    let i = c * n + x;
                    let da = a_pred[i] - targets.a_true[i];
                    terms.total += (da * da).to_f64().unwrap();
                    grad_a[i] += g * two * da;
                }
            }
        }
        Objective::Reconstruction(w) => {
            let exp_gamma = w.gamma.exp_m1();
            for x in 0..n {
                let tt = targets.t_true[x];
                let tp = t_pred[x];
                let eta = T::lit(1.0 - (w.gamma * tt.to_f64().unwrap()).exp_m1() / exp_gamma);
                for c in 0..3 {
                    let i = c * n + x;
                    let (hz, j, at, ap) = (targets.hazy[i], targets.clean[i], targets.a_true[i], a_pred[i]);
                    if w.l1 {
                        let r = hz - j * tt - (T::one() - tt) * ap;
                        terms.l1 += r.abs().to_f64().unwrap();
                        terms.total += (eta * r.abs()).to_f64().unwrap();
                        grad_a[i] += g * eta * sign(r) * -(T::one() - tt);
                    }
                    if w.l2 {
                        let r = hz - j * tp - (T::one() - tp) * at;
                        terms.l2 += r.abs().to_f64().unwrap();
                        terms.total += r.abs().to_f64().unwrap();
                        grad_t[x] += g * sign(r) * (at - j);
                    }
                    if w.l3 {
                        let r = hz - j * tp - (T::one() - tp) * ap;
                        terms.l3 += r.abs().to_f64().unwrap();
                        terms.total += (eta * r.abs()).to_f64().unwrap();
                        let s = g * eta * sign(r);
                        grad_t[x] += s * (ap - j);
                        grad_a[i] += s * -(T::one() - tp);
                    }
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    terms.total *= inv;
    terms.l1 *= inv;
    terms.l2 *= inv;
    terms.l3 *= inv;
    terms
}

/// One training example: an ω×ω hazy patch with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub hazy: Image,
    pub clean: Image,
    pub t: ScalarMap,
    /// Illumination, constant over the patch.
    pub airlight: [f32; 3],
}

impl TrainSample {
    pub fn new(hazy: Image, clean: Image, t: ScalarMap, airlight: [f32; 3]) -> Result<Self> {
        if hazy.dims() != clean.dims() || hazy.dims() != t.dims() {
            return Err(Error::invalid("train sample maps must share dimensions"));
        }
        if hazy.height() != hazy.width() {
            return Err(Error::invalid("train samples must be square patches"));
        }
        if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("airlight outside [0, 1]"));
        }
        Ok(TrainSample {
            hazy,
            clean,
            t,
            airlight,
        })
    }

    pub fn side(&self) -> usize {
        self.hazy.height()
    }

    pub fn airlight_map(&self) -> ColorMap {
        let (h, w) = self.hazy.dims();
        ColorMap::filled(h, w, self.airlight).expect("validated airlight")
    }

    /// Planar copies `(hazy, clean, t, A)` used by the training loop.
    pub fn planar(&self) -> [Vec<f32>; 4] {
        use super::network::image_to_planar;
        let p = self.hazy.pixel_count();
        let a = self.airlight.iter().flat_map(|&v| std::iter::repeat_n(v, p)).collect();
        [
            image_to_planar(&self.hazy),
            image_to_planar(&self.clean),
            self.t.as_slice().to_vec(),
            a,
        ]
    }
}

/// Loss value with gradients laid out like the predicted maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub terms: LossTerms,
    /// `∂L/∂t_p`, one value per pixel.
    pub grad_t: Vec<f64>,
    /// `∂L/∂A_p`, channel-interleaved.
    pub grad_a: Vec<f64>,
}

/// Evaluates the objective of `sample` for predicted maps `t_pred`, `a_pred`.
pub fn total_loss(sample: &TrainSample, t_pred: &ScalarMap, a_pred: &ColorMap, objective: &Objective) -> Result<LossEvaluation> {
    objective.validate()?;
    if t_pred.dims() != sample.hazy.dims() || a_pred.dims() != sample.hazy.dims() {
        return Err(Error::invalid("predicted maps must match the sample dimensions"));
    }
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let [hazy, clean, t_true, a_true] = sample.planar().map(|v| to64(&v));
    let tp = to64(t_pred.as_slice());
    let ap = to64(&super::network::image_to_planar(a_pred));
    let n = tp.len();
    let mut grad_t = vec![0.0; n];
    let mut grad_a = vec![0.0; 3 * n];
    let terms = patch_loss(
        PatchTargets {
            hazy: &hazy,
            clean: &clean,
            t_true: &t_true,
            a_true: &a_true,
        },
        &tp,
        &ap,
        objective,
        1.0,
        &mut grad_t,
        &mut grad_a,
    );
    let grad_a = (0..n).flat_map(|x| (0..3).map(move |c| (x, c))).map(|(x, c)| grad_a[c * n + x]).collect();
    Ok(LossEvaluation { terms, grad_t, grad_a })
}
