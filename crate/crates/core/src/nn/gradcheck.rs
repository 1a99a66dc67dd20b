//! Central finite-difference checks of analytic gradients, in `f64`.
//!
//! Every check reduces the output to the scalar `f = Σ r ⊙ y` for a fixed
//! random `r`, perturbs one input or parameter entry at a time by `±h` and
//! compares `(f(+h) - f(-h)) / 2h` with the back-propagated gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, Mode};
use super::tensor::Tensor4;
use crate::error::Result;
use crate::net::{patch_loss, DehazeNet, Objective, PatchTargets};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Entry with the largest error.
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_relative_error || self.worst.is_empty() {
            self.max_relative_error = self.max_relative_error.max(e);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }

    pub fn merge(mut self, other: GradCheck) -> GradCheck {
        self.checked += other.checked;
        if other.max_relative_error >= self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst;
        }
        self
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error <= tolerance
    }
}

fn weighted_sum(r: &[f64], y: &[f64]) -> f64 {
    r.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Indices to probe: all of them, or `limit` distinct random ones.
fn probe(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks input and parameter gradients of one layer on `input` (training mode).
pub fn check_layer<L: Layer<f64>>(layer: &mut L, input: &Tensor4<f64>, step: f64, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(input, Mode::Train)?;
    let r = Tensor4::uniform(y.dims(), 1.0, &mut rng);
    for (_, p) in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&r)?;
    let analytic_params: Vec<Vec<f64>> = layer.params().iter().map(|(_, p)| p.grad.clone()).collect();

    let f = |layer: &mut L, x: &Tensor4<f64>| -> Result<f64> {
        let y = layer.forward(x, Mode::Train)?;
        Ok(weighted_sum(r.as_slice(), y.as_slice()))
    };
    let mut report = GradCheck::default();
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + step;
        let up = f(layer, &x)?;
        x.as_mut_slice()[i] = orig - step;
        let down = f(layer, &x)?;
        x.as_mut_slice()[i] = orig;
        report.record(|| format!("input[{i}]"), dx.as_slice()[i], (up - down) / (2.0 * step));
    }
    let names: Vec<&'static str> = layer.params().iter().map(|(n, _)| *n).collect();
    for (k, name) in names.iter().enumerate() {
        let len = analytic_params[k].len();
        for i in 0..len {
            let nudge = |layer: &mut L, v: f64| layer.params_mut()[k].1.value[i] = v;
            let orig = layer.params()[k].1.value[i];
            nudge(layer, orig + step);
            let up = f(layer, input)?;
            nudge(layer, orig - step);
            let down = f(layer, input)?;
            nudge(layer, orig);
            report.record(|| format!("{name}[{i}]"), analytic_params[k][i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks a whole network's input and parameter gradients, probing at most
/// `per_tensor` entries of each parameter tensor and of the input.
pub fn check_network(
    net: &mut DehazeNet<f64>,
    input: &Tensor4<f64>,
    step: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = net.forward(input, Mode::Train)?;
    let rt = Tensor4::uniform(out.t.dims(), 1.0, &mut rng);
    let ra = Tensor4::uniform(out.a.dims(), 1.0, &mut rng);
    net.zero_grad();
    let dx = net.backward(&rt, &ra)?;
    let analytic: Vec<(String, Vec<f64>)> = net.params().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();

    let f = |net: &mut DehazeNet<f64>, x: &Tensor4<f64>| -> Result<f64> {
        let o = net.forward(x, Mode::Train)?;
        Ok(weighted_sum(rt.as_slice(), o.t.as_slice()) + weighted_sum(ra.as_slice(), o.a.as_slice()))
    };
    let mut report = GradCheck::default();
    let mut x = input.clone();
    for i in probe(x.len(), per_tensor, &mut rng) {
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + step;
        let up = f(net, &x)?;
        x.as_mut_slice()[i] = orig - step;
        let down = f(net, &x)?;
        x.as_mut_slice()[i] = orig;
        report.record(|| format!("input[{i}]"), dx.as_slice()[i], (up - down) / (2.0 * step));
    }
    for (k, (name, grad)) in analytic.iter().enumerate() {
        for i in probe(grad.len(), per_tensor, &mut rng) {
            let orig = net.params()[k].1.value[i];
            net.params_mut()[k].1.value[i] = orig + step;
            let up = f(net, input)?;
            net.params_mut()[k].1.value[i] = orig - step;
            let down = f(net, input)?;
            net.params_mut()[k].1.value[i] = orig;
            report.record(|| format!("{name}[{i}]"), grad[i], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks the loss gradients with respect to the predicted maps on a random
/// `side`×`side` patch with predictions and targets inside (0, 1).
pub fn check_loss(objective: &Objective, side: usize, step: f64, seed: u64) -> Result<GradCheck> {
    objective.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    let mut unit = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(0.05..0.95)).collect() };
    let (clean, t_true, a_true, t_pred, a_pred) = (unit(3 * n), unit(n), unit(3 * n), unit(n), unit(3 * n));
    let hazy: Vec<f64> = (0..3 * n)
        .map(|i| clean[i] * t_true[i % n] + (1.0 - t_true[i % n]) * a_true[i])
        .collect();
    let targets = PatchTargets {
        hazy: &hazy,
        clean: &clean,
        t_true: &t_true,
        a_true: &a_true,
    };
    let eval = |tp: &[f64], ap: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut gt = vec![0.0; n];
        let mut ga = vec![0.0; 3 * n];
        let terms = patch_loss(targets, tp, ap, objective, 1.0, &mut gt, &mut ga);
        (terms.total, gt, ga)
    };
    let (_, gt, ga) = eval(&t_pred, &a_pred);
    let mut report = GradCheck::default();
    let mut tp = t_pred.clone();
    for i in 0..n {
        tp[i] = t_pred[i] + step;
        let up = eval(&tp, &a_pred).0;
        tp[i] = t_pred[i] - step;
        let down = eval(&tp, &a_pred).0;
        tp[i] = t_pred[i];
        report.record(|| format!("t[{i}]"), gt[i], (up - down) / (2.0 * step));
    }
    let mut ap = a_pred.clone();
    for i in 0..3 * n {
        ap[i] = a_pred[i] + step;
        let up = eval(&t_pred, &ap).0;
        ap[i] = a_pred[i] - step;
        let down = eval(&t_pred, &ap).0;
        ap[i] = a_pred[i];
        report.record(|| format!("A[{i}]"), ga[i], (up - down) / (2.0 * step));
    }
    Ok(report)
}
