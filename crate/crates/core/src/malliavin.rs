//! Malliavin derivatives of the Euler solution and covariance matrices.
//!
//! `D_{t_j} X(tau)` is the linearized scheme started at `t_j` from
//! `L_j sigma(t_j)`, i.e. `Pi_n Y_tau Y_j^{-1} L_j sigma_j`. For the covariance
//! all of them are needed at once; the row block `W_i = Pi_n Y_tau Y_i^{-1}`
//! satisfies `W_i = W_{i+1} (I + L_{i+1} M_i)`, so one backward sweep gives
//! every `D_{t_i} X(tau) = W_i L_i sigma_i`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{sigma_matrix, CoefficientField, Gradient, State, Which};
use crate::error::{Error, Result};
use crate::flow::{brownian_noise, propagate_from, solve_sde, SolutionBundle};
use crate::path::{norm2, GridPath};
use crate::rng;
use crate::timegrid::{neumaier_sum, TimeGrid};

/// Default number of Malliavin times per window.
pub const DEFAULT_TIMES: usize = 64;

/// `n x d` derivative `D_r X(tau)` for grid times `r`, `tau`.
pub fn malliavin_derivative(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    r: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    let g = &bundle.grid;
    let j = g.require_index(r)?;
    let ti = g.require_index(tau)?;
    malliavin_derivative_idx(field, bundle, j, ti)
}

pub fn malliavin_derivative_idx(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    j: usize,
    ti: usize,
) -> Result<Vec<f64>> {
    let (n, d) = field.dims();
    let mut out = vec![0.0; n * d];
    if j > ti {
        return Ok(out);
    }
    let sig = sigma_at(field, bundle, j);
    for k in 0..d {
        let v: Vec<f64> = (0..n).map(|i| sig[i * d + k]).collect();
        let xi = propagate_from(field, bundle, j, &v, true)?;
        for i in 0..n {
            out[i * d + k] = xi.at(ti)[i];
        }
    }
    Ok(out)
}

fn sigma_at(field: &dyn CoefficientField, bundle: &SolutionBundle, j: usize) -> Vec<f64> {
    let g = &bundle.grid;
    let path = bundle.state_path(j, field.metadata().reads_future_slots);
    sigma_matrix(field, &State { grid: g, t: g.t(j), step: j, path: &path, value: bundle.x.at(j) })
}

fn mat_mul_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, scale: f64) {
    for r in 0..n {
        for c in 0..n {
            let s: f64 = (0..n).map(|k| a[r * n + k] * b[k * n + c]).sum();
            out[r * n + c] += scale * s;
        }
    }
}

/// Backward sweep `W_i = W_{i+1} (I + L_{i+1} M_i)` from `W_tau = Pi_n`.
/// Calls `visit(i, K_i, B_i, state)` for `i = tau, tau-1, ..., 0` with
/// `K_i = W_i L_{i+1}` and `B_i` the slot-`i` block of `W_i`, so that
/// `W_i L_i = K_i + B_i`. Returns `W_0` as (slot blocks, point block).
pub fn adjoint_sweep(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    ti: usize,
    mut visit: impl FnMut(usize, &[f64], &[f64], &State) -> Result<()>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = field.dims();
    let g = &bundle.grid;
    let full = field.metadata().reads_future_slots;
    let nn = n * n;
    let mut slots = vec![0.0; g.len() * nn];
    let mut point = vec![0.0; nn];
    for i in 0..n {
        point[i * n + i] = 1.0;
    }
    let mut suffix = vec![0.0; nn];
    {
        let path = bundle.state_path(ti, full);
        let st = State { grid: g, t: g.t(ti), step: ti, path: &path, value: bundle.x.at(ti) };
        visit(ti, &point, &slots[ti * nn..(ti + 1) * nn], &st)?;
    }
    let mut c = vec![0.0; nn];
    for i in (0..ti).rev() {
        let path = bundle.state_path(i, full);
        let st = State { grid: g, t: g.t(i), step: i, path: &path, value: bundle.x.at(i) };
        for (o, (s, p)) in c.iter_mut().zip(suffix.iter().zip(&point)) {
            *o = s + p;
        }
        let grad = |w: Which| {
            field
                .gradient(w, &st)
                .ok_or_else(|| Error::Config(format!("field `{}` has no derivative oracle", field.metadata().name)))
        };
        let mut parts: Vec<(f64, Gradient)> = Vec::with_capacity(d + 1);
        parts.push((g.dt(i), grad(Which::Drift)?));
        for k in 0..d {
            parts.push((bundle.noise.at(i)[k], grad(Which::Diffusion(k))?));
        }
        for (w, gr) in &parts {
            if *w == 0.0 {
                continue;
            }
            for (k, &q) in gr.slots().iter().enumerate() {
                let blk = gr.block(k);
                mat_mul_acc(&mut slots[q * nn..(q + 1) * nn], &c, blk, n, *w);
                if q > i {
                    mat_mul_acc(&mut suffix, &c, blk, n, *w);
                }
            }
            mat_mul_acc(&mut point, &c, gr.point(), n, *w);
        }
        for (o, (s, p)) in c.iter_mut().zip(suffix.iter().zip(&point)) {
            *o = s + p;
        }
        visit(i, &c, &slots[i * nn..(i + 1) * nn], &st)?;
        for k in 0..nn {
            suffix[k] += slots[i * nn + k];
        }
    }
    Ok((slots, point))
}

/// `D_{t_i} X(tau)` for every `i <= tau` by the backward sweep. Requires
/// analytic gradients.
pub fn derivatives_adjoint(field: &dyn CoefficientField, bundle: &SolutionBundle, ti: usize) -> Result<Vec<Vec<f64>>> {
    let (n, d) = field.dims();
    let mut out = vec![Vec::new(); ti + 1];
    adjoint_sweep(field, bundle, ti, |i, k, b, st| {
        let sig = sigma_matrix(field, st);
        let mut dm = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                dm[r * d + c] = (0..n).map(|m| (k[r * n + m] + b[r * n + m]) * sig[m * d + c]).sum();
            }
        }
        out[i] = dm;
        Ok(())
    })?;
    Ok(out)
}

/// Malliavin times and their Lebesgue weights in `[t_{i0}, t_{i1})`: every
/// point if there are at most `r` of them, otherwise every `k`-th with the
/// weights of its cell summed.
pub fn subgrid(grid: &TimeGrid, i0: usize, i1: usize, r: usize) -> Vec<(usize, f64)> {
    let count = i1.saturating_sub(i0);
    if count == 0 {
        return Vec::new();
    }
    let k = count.div_ceil(r.max(1));
    let w = grid.lebesgue_weights();
    (i0..i1).step_by(k).map(|j| (j, neumaier_sum(w[j..(j + k).min(i1)].iter().copied()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalliavinReport {
    pub tau: f64,
    pub tau0: f64,
    pub n: usize,
    pub d: usize,
    /// Malliavin times `r` with their quadrature weights.
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    /// `D_r X(tau)`, `n x d` row-major, per Malliavin time.
    pub derivatives: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_min0: f64,
}

pub fn lambda_min(m: &[f64], n: usize) -> f64 {
    let mat = DMatrix::from_row_slice(n, n, m);
    let sym = (&mat + mat.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

fn accumulate(gamma: &mut [f64], dm: &[f64], w: f64, n: usize, d: usize) {
    for a in 0..n {
        for b in 0..n {
            let s: f64 = (0..d).map(|k| dm[a * d + k] * dm[b * d + k]).sum();
            gamma[a * n + b] += w * s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceOptions {
    /// Malliavin times per window.
    pub times: usize,
    /// Use the backward sweep when the field has analytic gradients.
    pub adjoint: bool,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions { times: DEFAULT_TIMES, adjoint: true }
    }
}

/// `gamma_tau` over `[0, tau]` and `gamma0_tau` over `[tau0, tau]`. The
/// first is assembled as `gamma0` plus the contributions before `tau0`, so
/// the ordering `gamma0 <= gamma` holds term by term.
pub fn covariance(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    tau: f64,
    tau0: f64,
    opts: CovarianceOptions,
) -> Result<MalliavinReport> {
    let g = &bundle.grid;
    if !(tau0 >= 0.0 && tau0 < tau && tau <= g.horizon() + crate::timegrid::TIME_TOL) {
        return Err(Error::domain(format!("window [{tau0}, {tau}] is not inside [0, {}]", g.horizon())));
    }
    let ti = g.require_index(tau)?;
    let t0 = g.require_index(tau0)?;
    let (n, d) = field.dims();
    let late = subgrid(g, t0, ti, opts.times);
    let early = subgrid(g, 0, t0, opts.times);

    let has_oracle = {
        let path = bundle.state_path(0, field.metadata().reads_future_slots);
        let st = State { grid: g, t: 0.0, step: 0, path: &path, value: bundle.x.at(0) };
        field.gradient(Which::Drift, &st).is_some()
    };
    let derivative = |list: &[(usize, f64)], all: &Option<Vec<Vec<f64>>>| -> Result<Vec<Vec<f64>>> {
        list.iter()
            .map(|&(j, _)| match all {
                Some(a) => Ok(a[j].clone()),
                None => malliavin_derivative_idx(field, bundle, j, ti),
            })
            .collect()
    };
    let all = if opts.adjoint && has_oracle { Some(derivatives_adjoint(field, bundle, ti)?) } else { None };
    let d_late = derivative(&late, &all)?;
    let d_early = derivative(&early, &all)?;

    let mut gamma0 = vec![0.0; n * n];
    for ((_, w), dm) in late.iter().zip(&d_late) {
        accumulate(&mut gamma0, dm, *w, n, d);
    }
    let mut rest = vec![0.0; n * n];
    for ((_, w), dm) in early.iter().zip(&d_early) {
        accumulate(&mut rest, dm, *w, n, d);
    }
    let gamma: Vec<f64> = gamma0.iter().zip(&rest).map(|(a, b)| a + b).collect();
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Malliavin covariance".into()));
    }
    let times = early.iter().chain(&late).map(|&(j, _)| g.t(j)).collect();
    let weights = early.iter().chain(&late).map(|&(_, w)| w).collect();
    let derivatives = d_early.into_iter().chain(d_late).collect();
    Ok(MalliavinReport {
        tau,
        tau0,
        n,
        d,
        times,
        weights,
        derivatives,
        lambda_min: lambda_min(&gamma, n),
        lambda_min0: lambda_min(&gamma0, n),
        gamma,
        gamma0,
    })
}

/// Covariance over a single window `[a, tau]`.
pub fn covariance_window(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    a: f64,
    tau: f64,
    opts: CovarianceOptions,
) -> Result<Vec<f64>> {
    Ok(covariance(field, bundle, tau, a, opts)?.gamma0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub bump: Vec<f64>,
    pub malliavin: Vec<f64>,
    pub relative_gap: f64,
}

/// Bumps `dB^i_j` by `eps`, re-solves, and compares the difference quotient
/// of `X(tau)` with column `i` of `D_{t_j} X(tau)`.
pub fn fd_consistency(
    field: &dyn CoefficientField,
    x0: &[f64],
    noise: &GridPath,
    grid: &TimeGrid,
    j: usize,
    i: usize,
    eps: f64,
    tau: f64,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::domain(format!("bump size {eps} must be positive")));
    }
    let ti = grid.require_index(tau)?;
    if j >= ti || i >= noise.dim() {
        return Err(Error::domain("bumped increment must lie before tau"));
    }
    let base = solve_sde(field, x0, noise, grid)?;
    let mut bumped = noise.clone();
    bumped.at_mut(j)[i] += eps;
    let other = solve_sde(field, x0, &bumped, grid)?;
    let bump: Vec<f64> = (0..x0.len()).map(|c| (other.x.at(ti)[c] - base.x.at(ti)[c]) / eps).collect();
    let dm = malliavin_derivative_idx(field, &base, j, ti)?;
    let d = noise.dim();
    let malliavin: Vec<f64> = (0..x0.len()).map(|c| dm[c * d + i]).collect();
    let diff: Vec<f64> = bump.iter().zip(&malliavin).map(|(a, b)| a - b).collect();
    let scale = norm2(&malliavin).max(f64::MIN_POSITIVE);
    Ok(FdReport { relative_gap: norm2(&diff) / scale, bump, malliavin })
}

/// Noise increments of Monte Carlo sample `m`.
pub fn sample_noise(grid: &TimeGrid, d: usize, seed: u64, m: u64) -> GridPath {
    brownian_noise(grid, d, seed, rng::stream_id(&[rng::tag::SAMPLE, m]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub samples: usize,
    pub epsilons: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub lambda_mins: Vec<f64>,
    /// Weighted least-squares slope of `log P` against `log eps` over the
    /// levels with `P > 0`, with binomial variances.
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    /// `slope - 1.96 se`.
    pub slope_lower: Option<f64>,
}

/// `lambda_min(gamma0_tau)` per sample, in sample order.
pub fn sample_lambda_min0(
    field: &dyn CoefficientField,
    x0: &[f64],
    grid: &TimeGrid,
    tau: f64,
    tau0: f64,
    seed: u64,
    samples: usize,
    opts: CovarianceOptions,
) -> Result<Vec<f64>> {
    let d = field.dims().1;
    (0..samples as u64)
        .into_par_iter()
        .map(|m| {
            let noise = sample_noise(grid, d, seed, m);
            let b = solve_sde(field, x0, &noise, grid)?;
            Ok(covariance(field, &b, tau, tau0, opts)?.lambda_min0)
        })
        .collect()
}

pub fn tail_estimate(
    field: &dyn CoefficientField,
    x0: &[f64],
    grid: &TimeGrid,
    tau: f64,
    tau0: f64,
    seed: u64,
    samples: usize,
    epsilons: &[f64],
    opts: CovarianceOptions,
) -> Result<TailReport> {
    if samples < 100 {
        return Err(Error::domain(format!("tail estimate needs at least 100 samples, got {samples}")));
    }
    let lambdas = sample_lambda_min0(field, x0, grid, tau, tau0, seed, samples, opts)?;
    Ok(tail_from_samples(lambdas, epsilons))
}

pub fn tail_from_samples(lambdas: Vec<f64>, epsilons: &[f64]) -> TailReport {
    let m = lambdas.len() as f64;
    let probabilities: Vec<f64> =
        epsilons.iter().map(|&e| lambdas.iter().filter(|&&l| l <= e).count() as f64 / m).collect();
    let pts: Vec<(f64, f64, f64)> = epsilons
        .iter()
        .zip(&probabilities)
        .filter(|(_, &p)| p > 0.0 && p < 1.0)
        .map(|(&e, &p)| (e.ln(), p.ln(), m * p / (1.0 - p)))
        .collect();
    let (slope, slope_se) = if pts.len() >= 2 {
        let sw: f64 = pts.iter().map(|p| p.2).sum();
        let xm = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
        let ym = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - xm).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - xm) * (p.1 - ym)).sum();
        (Some(sxy / sxx), Some((1.0 / sxx).sqrt()))
    } else {
        (None, None)
    };
    TailReport {
        samples: lambdas.len(),
        epsilons: epsilons.to_vec(),
        probabilities,
        lambda_mins: lambdas,
        slope,
        slope_se,
        slope_lower: slope.zip(slope_se).map(|(s, e)| s - 1.96 * e),
    }
}

/// Log-spaced levels `10^a .. 10^b`.
pub fn log_levels(a: f64, b: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| 10f64.powf(a + (b - a) * k as f64 / (count - 1).max(1) as f64)).collect()
}
