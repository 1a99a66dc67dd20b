//! Edge-aware interpolation and smoothing of sparse map estimates.
//!
//! Minimises
//! `E(a) = Σ_x s(x)(a(x) - â(x))² + λ Σ_{x~y} (a(x) - a(y))² / (‖I(x) - I(y)‖² + ε)`
//! over a 4-connected pixel grid, each unordered neighbour pair counted once.
//! The normal equations are a sparse SPD system solved by Jacobi-preconditioned
//! conjugate gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{ColorMap, Image, ScalarMap};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_CG_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 20_000;

/// One channel's regularisation problem.
#[derive(Debug, Clone, Copy)]
pub struct EnergyProblem<'a> {
    pub guide: &'a Image,
    pub observed: &'a [f32],
    pub mask: &'a [bool],
    pub lambda: f64,
    pub epsilon: f64,
}

impl EnergyProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.guide.pixel_count();
        if self.observed.len() != n || self.mask.len() != n {
            return Err(Error::invalid(format!(
                "guide has {n} pixels, map {} and mask {}",
                self.observed.len(),
                self.mask.len()
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }

    /// Weight of the edge between pixels `p` and `q`.
    fn edge_weight(&self, p: usize, q: usize) -> f64 {
        let g = self.guide.as_slice();
        let d2: f64 = (0..3).map(|c| (g[3 * p + c] as f64 - g[3 * q + c] as f64).powi(2)).sum();
        1.0 / (d2 + self.epsilon)
    }

    /// Calls `f(p, q)` once per unordered 4-neighbour pair.
    fn for_each_edge(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w) = self.guide.dims();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    f(p, p + 1);
                }
                if y + 1 < h {
                    f(p, p + w);
                }
            }
        }
    }
}

/// Symmetric sparse matrix in CSR form with its right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.row(i).find(|&(j, _)| j == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// Builds a CSR matrix from rows of `(column, value)` pairs.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>, rhs: Vec<f64>) -> Result<Self> {
        if rows.len() != rhs.len() {
            return Err(Error::invalid("row count differs from right-hand side length"));
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            for (j, v) in row {
                if j >= rhs.len() {
                    return Err(Error::invalid(format!("column {j} outside a {}-row system", rhs.len())));
                }
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseSystem { row_ptr, col_idx, values, rhs })
    }
}

/// Assembles the normal equations of the energy.
pub fn build_system(problem: &EnergyProblem) -> Result<SparseSystem> {
    problem.validate()?;
    if !problem.mask.iter().any(|&m| m) {
        // The grid is connected, so the system is singular exactly when no pixel anchors it.
        return Err(Error::Singular("mask is empty: nothing to interpolate".into()));
    }
    let n = problem.mask.len();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|p| vec![(p, if problem.mask[p] { 1.0 } else { 0.0 })])
        .collect();
    problem.for_each_edge(|p, q| {
        let w = problem.lambda * problem.edge_weight(p, q);
        rows[p][0].1 += w;
        rows[q][0].1 += w;
        rows[p].push((q, -w));
        rows[q].push((p, -w));
    });
    let rhs = (0..n)
        .map(|p| if problem.mask[p] { problem.observed[p] as f64 } else { 0.0 })
        .collect();
    SparseSystem::from_rows(rows, rhs)
}

/// Value of the energy at `a`.
pub fn energy(problem: &EnergyProblem, a: &[f64]) -> Result<f64> {
    problem.validate()?;
    if a.len() != problem.mask.len() {
        return Err(Error::invalid("solution length differs from the problem size"));
    }
    let mut data = 0.0;
    for p in 0..a.len() {
        if problem.mask[p] {
            data += (a[p] - problem.observed[p] as f64).powi(2);
        }
    }
    let mut smooth = 0.0;
    problem.for_each_edge(|p, q| smooth += (a[p] - a[q]).powi(2) * problem.edge_weight(p, q));
    Ok(data + problem.lambda * smooth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Iterations without a new lowest residual before giving up as divergent.
    /// The residual norm of preconditioned CG is not monotone; on large grids
    /// with sparse observations it can plateau for several hundred iterations.
    pub stall_window: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tolerance: DEFAULT_CG_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            stall_window: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖b - Ax‖ / ‖b‖` at exit.
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients from `x0` (zero if absent).
pub fn solve_cg(system: &SparseSystem, x0: Option<&[f64]>, options: &CgOptions) -> Result<CgSolution> {
    let n = system.dim();
    if !(options.tolerance > 0.0) {
        return Err(Error::invalid("CG tolerance must be positive"));
    }
    let diag = system.diagonal();
    if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Singular(format!("zero diagonal at unknown {i}")));
    }
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(_) => return Err(Error::invalid("initial guess has the wrong length")),
        None => vec![0.0; n],
    };
    let b_norm = dot(&system.rhs, &system.rhs).sqrt();
    if b_norm == 0.0 {
        return Ok(CgSolution { x: vec![0.0; n], iterations: 0, relative_residual: 0.0, converged: true });
    }
    let mut ax = vec![0.0; n];
    system.mul_vec(&x, &mut ax);
    let mut r: Vec<f64> = system.rhs.iter().zip(&ax).map(|(b, v)| b - v).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = dot(&r, &r).sqrt() / b_norm;
    let mut best = rel;
    let mut since_best = 0;
    let mut it = 0;
    while rel > options.tolerance && it < options.max_iterations {
        system.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!("CG breakdown at iteration {it}: pᵀAp = {pap}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] / diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
        rel = dot(&r, &r).sqrt() / b_norm;
        if !rel.is_finite() {
            return Err(Error::Numerical(format!("CG residual became {rel} at iteration {it}")));
        }
        if rel < best {
            best = rel;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= options.stall_window {
                return Err(Error::Numerical(format!(
                    "CG diverging: no residual decrease in {} iterations (at {rel:.3e})",
                    options.stall_window
                )));
            }
        }
    }
    let converged = rel <= options.tolerance;
    if !converged {
        log::warn!("CG stopped after {it} iterations at relative residual {rel:.3e}");
    }
    Ok(CgSolution { x, iterations: it, relative_residual: rel, converged })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerParams {
    pub lambda: f64,
    pub epsilon: f64,
    pub cg: CgOptions,
}

impl Default for RegularizerParams {
    fn default() -> Self {
        RegularizerParams {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            cg: CgOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularized {
    pub t: ScalarMap,
    pub a: ColorMap,
    /// Solver statistics for t, then A's red, green and blue channels.
    pub solves: Vec<(usize, f64, bool)>,
}

/// Smooths and fills t and each channel of A independently, guided by the
/// hazy image. Outputs are clamped to [0, 1].
pub fn regularize_maps(
    t: &ScalarMap,
    a: &ColorMap,
    t_mask: &[bool],
    a_mask: &[bool],
    guide: &Image,
    params: &RegularizerParams,
) -> Result<Regularized> {
    let (h, w) = guide.dims();
    if t.dims() != (h, w) || a.dims() != (h, w) {
        return Err(Error::invalid(format!(
            "maps {:?}/{:?} do not match the {h}x{w} guide",
            t.dims(),
            a.dims()
        )));
    }
    let channels = [t.channel(0), a.channel(0), a.channel(1), a.channel(2)];
    let solved = (0..4)
        .into_par_iter()
        .map(|k| {
            let mask = if k == 0 { t_mask } else { a_mask };
            let problem = EnergyProblem {
                guide,
                observed: &channels[k],
                mask,
                lambda: params.lambda,
                epsilon: params.epsilon,
            };
            let system = build_system(&problem)?;
            // Warm start: observations where known, their mean elsewhere.
            let known: Vec<f64> = (0..mask.len()).filter(|&p| mask[p]).map(|p| channels[k][p] as f64).collect();
            let mean = known.iter().sum::<f64>() / known.len() as f64;
            let x0: Vec<f64> = (0..mask.len())
                .map(|p| if mask[p] { channels[k][p] as f64 } else { mean })
                .collect();
            solve_cg(&system, Some(&x0), &params.cg)
        })
        .collect::<Result<Vec<_>>>()?;
    let clamp = |v: f64| v.clamp(0.0, 1.0) as f32;
    let t_out = ScalarMap::new(h, w, solved[0].x.iter().map(|&v| clamp(v)).collect())?;
    let a_out = ColorMap::new(
        h,
        w,
        (0..h * w).flat_map(|p| (1..4).map(move |k| (k, p))).map(|(k, p)| clamp(solved[k].x[p])).collect(),
    )?;
    Ok(Regularized {
        t: t_out,
        a: a_out,
        solves: solved.iter().map(|s| (s.iterations, s.relative_residual, s.converged)).collect(),
    })
}
