use std::time::Instant;

use hazefork::regularize::{build_system, energy, solve_cg, CgOptions, EnergyProblem};
use hazefork::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Thomas algorithm for the stationarity conditions of the energy on a
/// 1×n strip: s_i(a_i − â_i) + λ Σ_j w_ij (a_i − a_j) = 0.
fn path_oracle(colors: &[[f32; 3]], observed: &[f32], mask: &[bool], lambda: f64, eps: f64) -> Vec<f64> {
    let n = colors.len();
    let w: Vec<f64> = (0..n - 1)
        .map(|i| {
            let d2: f64 = (0..3).map(|c| (colors[i][c] as f64 - colors[i + 1][c] as f64).powi(2)).sum();
            lambda / (d2 + eps)
        })
        .collect();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        if mask[i] {
            diag[i] += 1.0;
            rhs[i] += observed[i] as f64;
        }
        if i > 0 {
            diag[i] += w[i - 1];
            lower[i] = -w[i - 1];
        }
        if i + 1 < n {
            diag[i] += w[i];
            upper[i] = -w[i];
        }
    }
    for i in 1..n {
        let m = lower[i] / diag[i - 1];
        diag[i] -= m * upper[i - 1];
        rhs[i] -= m * rhs[i - 1];
    }
    let mut x = vec![0.0; n];
    x[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = (rhs[i] - upper[i] * x[i + 1]) / diag[i];
    }
    x
}

fn tight() -> CgOptions {
    CgOptions {
        tolerance: 1e-12,
        ..CgOptions::default()
    }
}

#[test]
fn strip_with_pinned_ends_matches_tridiagonal_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 40;
    let colors: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let guide = Image::new(1, n, colors.iter().flatten().copied().collect()).unwrap();
    let mut observed = vec![0.0f32; n];
    observed[n - 1] = 1.0;
    let mask: Vec<bool> = (0..n).map(|i| i == 0 || i == n - 1).collect();
    let problem = EnergyProblem {
        guide: &guide,
        observed: &observed,
        mask: &mask,
        lambda: 1.0,
        epsilon: 1e-3,
    };
    let sol = solve_cg(&build_system(&problem).unwrap(), None, &tight()).unwrap();
    let oracle = path_oracle(&colors, &observed, &mask, 1.0, 1e-3);
    for (u, v) in sol.x.iter().zip(&oracle) {
        assert!((u - v).abs() <= 1e-6, "{u} vs {v}");
    }
    // interior values interpolate monotonically between the pinned ends
    assert!(sol.x.windows(2).all(|w| w[1] >= w[0] - 1e-9));
}

#[test]
fn textured_64x64_converges_quickly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let guide = Image::from_fn(64, 64, |y, x| {
        let v = if (y / 8 + x / 8) % 2 == 0 { 0.2 } else { 0.8 };
        [v, v * 0.9, 1.0 - v]
    })
    .unwrap();
    let observed: Vec<f32> = (0..64 * 64).map(|_| rng.gen()).collect();
    let mask: Vec<bool> = (0..64 * 64).map(|_| rng.gen_bool(0.3)).collect();
    let problem = EnergyProblem {
        guide: &guide,
        observed: &observed,
        mask: &mask,
        lambda: 1.0,
        epsilon: 1e-3,
    };
    let start = Instant::now();
    let sol = solve_cg(&build_system(&problem).unwrap(), None, &CgOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.relative_residual <= 1e-6);
    assert!(start.elapsed().as_secs_f64() < 5.0);
    // stationary point: no coordinate perturbation lowers the energy
    let e0 = energy(&problem, &sol.x).unwrap();
    for p in [0, 100, 2047, 4095] {
        for d in [-1e-3, 1e-3] {
            let mut x = sol.x.clone();
            x[p] += d;
            assert!(energy(&problem, &x).unwrap() >= e0 - 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn solution_stays_within_observed_range(
        h in 2usize..14,
        w in 2usize..14,
        seed in any::<u64>(),
        density in 0.05f64..0.9,
        lambda in 0.1f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let guide = Image::new(h, w, (0..3 * n).map(|_| rng.gen()).collect()).unwrap();
        let observed: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        mask[rng.gen_range(0..n)] = true;
        let problem = EnergyProblem { guide: &guide, observed: &observed, mask: &mask, lambda, epsilon: 1e-3 };
        let sol = solve_cg(&build_system(&problem).unwrap(), None, &CgOptions::default()).unwrap();
        prop_assert!(sol.converged);
        let known = (0..n).filter(|&p| mask[p]).map(|p| observed[p] as f64);
        let lo = known.clone().fold(f64::INFINITY, f64::min);
        let hi = known.fold(f64::NEG_INFINITY, f64::max);
        for &v in &sol.x {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "{v} outside [{lo}, {hi}]");
        }
    }
}
