//! Full-image estimation of t and A from a patch network.
//!
//! Level `i` (1-based) tiles the image with overlapping squares of side
//! `P / 2^(i-1)`, `P = min(H, W)`, skips smooth squares, resizes each to the
//! network's ω×ω input and maps the predictions back. Overlaps within a level
//! are averaged; levels are combined by a masked weighted average.

use crate::error::{Error, Result};
use crate::imaging::{ColorMap, Image, ScalarMap};
use crate::net::DehazeNet;
use crate::synth::{grid_positions, passes_variance_gate, patch_variance, DEFAULT_VARIANCE_THRESHOLD};

/// Anything that maps ω×ω hazy patches to `(t, A)` patches.
pub trait PatchEstimator {
    fn patch_size(&self) -> usize;
    fn estimate(&self, patches: &[Image]) -> Result<Vec<(ScalarMap, ColorMap)>>;
}

impl PatchEstimator for DehazeNet<f32> {
    fn patch_size(&self) -> usize {
        DehazeNet::patch_size(self)
    }

    fn estimate(&self, patches: &[Image]) -> Result<Vec<(ScalarMap, ColorMap)>> {
        self.predict(patches)
    }
}

/// Number of pyramid levels: `floor(log2(min(H, W)) - log2(ω) + 1)`.
pub fn level_count(height: usize, width: usize, omega: usize) -> Result<usize> {
    let p = height.min(width);
    if omega == 0 || p < omega {
        return Err(Error::invalid(format!(
            "image {height}x{width} is smaller than the {omega}px network input"
        )));
    }
    // Largest m with ω·2^(m-1) <= P, in exact integer arithmetic.
    let mut m = 1;
    while omega.checked_shl(m as u32).is_some_and(|s| s <= p) {
        m += 1;
    }
    Ok(m)
}

/// Side of the level-`level` patches for an image whose short side is `p`.
pub fn level_patch_size(p: usize, level: usize) -> usize {
    p >> (level.max(1) - 1)
}

/// Grid positions with the given stride plus a final window flush with the
/// far edge, so every pixel is inside at least one window.
pub fn covering_positions(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut pos = grid_positions(extent, size, stride, 0);
    if let Some(&last) = pos.last() {
        if last + size < extent {
            pos.push(extent - size);
        }
    }
    pos
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelConfig {
    pub variance_threshold: f64,
    /// Tiling stride is the level patch size divided by this.
    pub stride_divisor: usize,
    pub weights: AggregationWeights,
}

impl Default for MultilevelConfig {
    fn default() -> Self {
        MultilevelConfig {
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            stride_divisor: 2,
            weights: AggregationWeights::default(),
        }
    }
}

/// Full-size maps from one level. Uncovered pixels hold 0 and are masked off.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEstimate {
    pub level: usize,
    pub patch_size: usize,
    pub t: ScalarMap,
    pub a: ColorMap,
    pub mask: Vec<bool>,
}

impl LevelEstimate {
    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

const BATCH: usize = 32;

/// Runs `estimator` over the textured patches of one level.
pub fn estimate_level(
    image: &Image,
    level: usize,
    estimator: &impl PatchEstimator,
    variance_threshold: f64,
    stride_divisor: usize,
) -> Result<LevelEstimate> {
    let (h, w) = image.dims();
    let omega = estimator.patch_size();
    let levels = level_count(h, w, omega)?;
    if level == 0 || level > levels {
        return Err(Error::invalid(format!("level {level} outside 1..={levels}")));
    }
    if stride_divisor == 0 {
        return Err(Error::invalid("stride divisor must be positive"));
    }
    let size = level_patch_size(h.min(w), level);
    let stride = (size / stride_divisor).max(1);

    let mut windows = Vec::new();
    let mut inputs = Vec::new();
    for y in covering_positions(h, size, stride) {
        for x in covering_positions(w, size, stride) {
            let patch = image.crop(y, x, size, size)?;
            if passes_variance_gate(patch_variance(&patch), variance_threshold) {
                inputs.push(patch.resize_bilinear(omega, omega)?);
                windows.push((y, x));
            }
        }
    }

    let n = h * w;
    let mut t_sum = vec![0.0f64; n];
    let mut a_sum = vec![0.0f64; 3 * n];
    let mut count = vec![0u32; n];
    for (wins, batch) in windows.chunks(BATCH).zip(inputs.chunks(BATCH)) {
        let preds = estimator.estimate(batch)?;
        if preds.len() != batch.len() {
            return Err(Error::State(format!(
                "estimator returned {} predictions for {} patches",
                preds.len(),
                batch.len()
            )));
        }
        for (&(y0, x0), (tp, ap)) in wins.iter().zip(preds) {
            if tp.dims() != (omega, omega) || ap.dims() != (omega, omega) {
                return Err(Error::State("estimator returned maps of the wrong size".into()));
            }
            let tp = tp.resize_bilinear(size, size)?;
            let ap = ap.resize_bilinear(size, size)?;
            let (ts, as_) = (tp.as_slice(), ap.as_slice());
            for dy in 0..size {
                for dx in 0..size {
                    let p = (y0 + dy) * w + x0 + dx;
                    let q = dy * size + dx;
                    t_sum[p] += ts[q] as f64;
                    for c in 0..3 {
                        a_sum[3 * p + c] += as_[3 * q + c] as f64;
                    }
                    count[p] += 1;
                }
            }
        }
    }

    let mask: Vec<bool> = count.iter().map(|&c| c > 0).collect();
    let avg = |sum: f64, c: u32| if c > 0 { (sum / c as f64) as f32 } else { 0.0 };
    let t = (0..n).map(|p| avg(t_sum[p], count[p])).collect();
    let a = (0..3 * n).map(|i| avg(a_sum[i], count[i / 3])).collect();
    Ok(LevelEstimate {
        level,
        patch_size: size,
        t: ScalarMap::from_clamped(h, w, t)?,
        a: ColorMap::from_clamped(h, w, a)?,
        mask,
    })
}

/// Per-level weights for t and A. Levels beyond the vectors weigh 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregationWeights {
    pub t: Vec<f64>,
    pub a: Vec<f64>,
}

impl AggregationWeights {
    pub fn uniform(levels: usize) -> Self {
        AggregationWeights {
            t: vec![1.0; levels],
            a: vec![1.0; levels],
        }
    }

    fn get(weights: &[f64], level: usize) -> f64 {
        level.checked_sub(1).and_then(|i| weights.get(i)).copied().unwrap_or(1.0)
    }

    pub fn t_weight(&self, level: usize) -> f64 {
        Self::get(&self.t, level)
    }

    pub fn a_weight(&self, level: usize) -> f64 {
        Self::get(&self.a, level)
    }

    pub fn validate(&self, levels: &[usize]) -> Result<()> {
        for (name, w) in [("t", &self.t), ("A", &self.a)] {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!("{name} level weights must be finite and nonnegative")));
            }
            if !levels.iter().any(|&l| Self::get(w, l) > 0.0) {
                return Err(Error::invalid(format!("{name} level weights are all zero")));
            }
        }
        Ok(())
    }
}

/// Combined maps. `mask` marks pixels with at least one positively weighted
/// estimate; the rest carry 0 and must be filled by the regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub t: ScalarMap,
    pub a: ColorMap,
    pub t_mask: Vec<bool>,
    pub a_mask: Vec<bool>,
}

impl Aggregate {
    /// Union of the t and A masks.
    pub fn mask(&self) -> Vec<bool> {
        self.t_mask.iter().zip(&self.a_mask).map(|(&a, &b)| a || b).collect()
    }
}

/// Masked weighted average over levels.
pub fn aggregate_levels(estimates: &[LevelEstimate], weights: &AggregationWeights) -> Result<Aggregate> {
    let first = estimates.first().ok_or_else(|| Error::invalid("no level estimates to aggregate"))?;
    let (h, w) = first.t.dims();
    if estimates
        .iter()
        .any(|e| e.t.dims() != (h, w) || e.a.dims() != (h, w) || e.mask.len() != h * w)
    {
        return Err(Error::invalid("level estimates differ in size"));
    }
    weights.validate(&estimates.iter().map(|e| e.level).collect::<Vec<_>>())?;
    let n = h * w;
    let mut t_num = vec![0.0f64; n];
    let mut t_den = vec![0.0f64; n];
    let mut a_num = vec![0.0f64; 3 * n];
    let mut a_den = vec![0.0f64; n];
    for e in estimates {
        let (wt, wa) = (weights.t_weight(e.level), weights.a_weight(e.level));
        let (ts, as_) = (e.t.as_slice(), e.a.as_slice());
        for p in (0..n).filter(|&p| e.mask[p]) {
            t_num[p] += wt * ts[p] as f64;
            t_den[p] += wt;
            for c in 0..3 {
                a_num[3 * p + c] += wa * as_[3 * p + c] as f64;
            }
            a_den[p] += wa;
        }
    }
    let div = |num: f64, den: f64| if den > 0.0 { (num / den) as f32 } else { 0.0 };
    let t = (0..n).map(|p| div(t_num[p], t_den[p])).collect();
    let a = (0..3 * n).map(|i| div(a_num[i], a_den[i / 3])).collect();
    Ok(Aggregate {
        t: ScalarMap::from_clamped(h, w, t)?,
        a: ColorMap::from_clamped(h, w, a)?,
        t_mask: t_den.iter().map(|&d| d > 0.0).collect(),
        a_mask: a_den.iter().map(|&d| d > 0.0).collect(),
    })
}

/// Every level's estimate plus their aggregate.
pub fn estimate_multilevel(
    image: &Image,
    estimator: &impl PatchEstimator,
    config: &MultilevelConfig,
) -> Result<(Vec<LevelEstimate>, Aggregate)> {
    let (h, w) = image.dims();
    let levels = level_count(h, w, estimator.patch_size())?;
    let estimates = (1..=levels)
        .map(|i| estimate_level(image, i, estimator, config.variance_threshold, config.stride_divisor))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_levels(&estimates, &config.weights)?;
    Ok((estimates, agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Mutex;

    /// Returns constant maps whose t value is taken from a queue, one per patch.
    struct Scripted {
        omega: usize,
        values: Mutex<Vec<f32>>,
        seen: Mutex<Vec<Image>>,
    }

    impl Scripted {
        fn new(omega: usize, mut values: Vec<f32>) -> Self {
            values.reverse();
            Scripted { omega, values: Mutex::new(values), seen: Mutex::new(Vec::new()) }
        }
    }

    impl PatchEstimator for Scripted {
        fn patch_size(&self) -> usize {
            self.omega
        }
        fn estimate(&self, patches: &[Image]) -> Result<Vec<(ScalarMap, ColorMap)>> {
            self.seen.lock().unwrap().extend_from_slice(patches);
            let mut q = self.values.lock().unwrap();
            patches
                .iter()
                .map(|_| {
                    let v = q.pop().unwrap_or(0.5);
                    Ok((ScalarMap::filled(self.omega, self.omega, [v])?, ColorMap::filled(self.omega, self.omega, [v; 3])?))
                })
                .collect()
        }
    }

    fn checker(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| [if (y / 2 + x / 2) % 2 == 0 { 0.0 } else { 1.0 }; 3]).unwrap()
    }

    #[test]
    fn level_counts() {
        assert_eq!(level_count(512, 512, 64).unwrap(), 4);
        assert_eq!(level_count(480, 640, 64).unwrap(), 3);
        assert_eq!(level_count(64, 64, 64).unwrap(), 1);
        assert_eq!(level_count(127, 300, 64).unwrap(), 1);
        assert_eq!(level_count(128, 300, 64).unwrap(), 2);
        assert!(level_count(63, 640, 64).is_err());
    }

    proptest! {
        #[test]
        fn level_count_matches_formula_and_is_monotone(p in 16usize..5000, omega in 1usize..200) {
            prop_assume!(p >= omega);
            let m = level_count(p, p + 7, omega).unwrap();
            let formula = ((p as f64).log2() - (omega as f64).log2() + 1.0 + 1e-12).floor() as usize;
            prop_assert_eq!(m, formula);
            prop_assert!(level_count(p + 1, p + 1, omega).unwrap() >= m);
            if omega < p {
                prop_assert!(level_count(p, p, omega + 1).unwrap() <= m);
            }
        }
    }

    #[test]
    fn smooth_image_has_empty_mask() {
        let img = Image::filled(96, 128, [0.4, 0.5, 0.6]).unwrap();
        let est = Scripted::new(32, vec![]);
        let lvl = estimate_level(&img, 1, &est, 0.08, 2).unwrap();
        assert_eq!(lvl.covered(), 0);
        assert!(est.seen.lock().unwrap().is_empty());
    }

    #[test]
    fn omega_sized_image_is_a_single_unresized_patch() {
        let img = checker(32, 32);
        let est = Scripted::new(32, vec![0.3]);
        let lvl = estimate_level(&img, 1, &est, 0.08, 2).unwrap();
        assert!(lvl.mask.iter().all(|&m| m));
        assert_eq!(est.seen.lock().unwrap().as_slice(), &[img]);
        assert!(lvl.t.as_slice().iter().all(|&t| t == 0.3));
    }

    #[test]
    fn overlapping_patches_are_averaged() {
        // 32x48 at ω=32: windows at x=0 and x=16 overlap on columns 16..32.
        let img = checker(32, 48);
        let est = Scripted::new(32, vec![0.4, 0.6]);
        let lvl = estimate_level(&img, 1, &est, 0.08, 2).unwrap();
        assert_abs_diff_eq!(lvl.t.pixel(5, 8)[0], 0.4);
        assert_abs_diff_eq!(lvl.t.pixel(5, 24)[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(lvl.t.pixel(5, 40)[0], 0.6);
    }

    #[test]
    fn covering_reaches_far_edge() {
        assert_eq!(covering_positions(100, 64, 32), vec![0, 32, 36]);
        assert_eq!(covering_positions(128, 64, 32), vec![0, 32, 64]);
        assert_eq!(covering_positions(64, 64, 32), vec![0]);
    }

    #[test]
    fn second_level_uses_half_size_patches() {
        let img = checker(128, 160);
        let est = Scripted::new(32, vec![]);
        let lvl = estimate_level(&img, 2, &est, 0.08, 2).unwrap();
        assert_eq!(lvl.patch_size, 64);
        assert!(lvl.mask.iter().all(|&m| m));
        assert!(estimate_level(&img, 4, &est, 0.08, 2).is_err());
    }

    fn level(level: usize, t: f32, mask: Vec<bool>) -> LevelEstimate {
        // uncovered pixels hold 0, as estimate_level leaves them
        let n = mask.len();
        let v: Vec<f32> = mask.iter().map(|&m| if m { t } else { 0.0 }).collect();
        LevelEstimate {
            level,
            patch_size: 1,
            t: ScalarMap::new(1, n, v.clone()).unwrap(),
            a: ColorMap::new(1, n, v.iter().flat_map(|&x| [x; 3]).collect()).unwrap(),
            mask,
        }
    }

    #[test]
    fn aggregation_examples() {
        let one = level(1, 0.4, vec![true, false]);
        let agg = aggregate_levels(&[one.clone()], &AggregationWeights::default()).unwrap();
        assert_eq!(agg.t, one.t);
        assert_eq!(agg.a, one.a);
        assert_eq!(agg.t_mask, vec![true, false]);

        let two = level(2, 0.6, vec![true, true]);
        let agg = aggregate_levels(&[one.clone(), two.clone()], &AggregationWeights::default()).unwrap();
        assert_abs_diff_eq!(agg.t.as_slice()[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(agg.a.as_slice()[0], 0.5, epsilon = 1e-7);
        // only level 2 covers pixel 1, whatever level 1 weighs
        let heavy = AggregationWeights { t: vec![100.0, 1.0], a: vec![100.0, 1.0] };
        let agg = aggregate_levels(&[one, two], &heavy).unwrap();
        assert_eq!(agg.t.as_slice()[1], 0.6);
        assert_eq!(agg.mask(), vec![true, true]);

        assert!(aggregate_levels(&[], &AggregationWeights::default()).is_err());
        let zero = AggregationWeights { t: vec![0.0], a: vec![1.0] };
        assert!(aggregate_levels(&[level(1, 0.2, vec![true])], &zero).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_stays_within_contributing_values(
            vals in prop::collection::vec((0.0f32..=1.0, 0.0f64..5.0, any::<bool>()), 1..5),
        ) {
            let ests: Vec<_> = vals.iter().enumerate().map(|(i, &(v, _, m))| level(i + 1, v, vec![m, true])).collect();
            let weights: Vec<f64> = vals.iter().map(|&(_, w, _)| w + 0.01).collect();
            let agg = aggregate_levels(&ests, &AggregationWeights { t: weights.clone(), a: weights }).unwrap();
            let lo = vals.iter().map(|v| v.0).fold(1.0f32, f32::min);
            let hi = vals.iter().map(|v| v.0).fold(0.0f32, f32::max);
            let t = agg.t.as_slice()[1];
            prop_assert!(t >= lo - 1e-6 && t <= hi + 1e-6);
        }

        #[test]
        fn equal_levels_aggregate_to_themselves(v in 0.0f32..=1.0, w in prop::collection::vec(0.01f64..10.0, 1..5)) {
            let ests: Vec<_> = (0..w.len()).map(|i| level(i + 1, v, vec![true; 3])).collect();
            let agg = aggregate_levels(&ests, &AggregationWeights { t: w.clone(), a: w }).unwrap();
            for &t in agg.t.as_slice() {
                prop_assert!((t - v).abs() <= 1e-6);
            }
        }
    }
}
