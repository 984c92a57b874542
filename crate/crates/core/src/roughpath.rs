//! Brownian rough paths over a time grid.
//!
//! The second level is stored per adjacent interval. Distant pairs are
//! composed with Chen's relation
//!
//! ```text
//! BB_{s,t} = BB_{s,u} + BB_{u,t} + dB_{s,u} (x) dB_{u,t}
//! ```
//!
//! and `BB^{ij}_{s,t}` means `int_s^t (B^i_r - B^i_s) dB^j_r`. Itô and
//! Stratonovich lifts differ by `(t-s)/2 * I`; the correction is kept as a
//! counter on top of the raw data so converting back and forth is exact.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::GridPath;
use crate::rng::{self, NormalStream};
use crate::timegrid::{holder_by_index, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    Ito,
    Stratonovich,
}

/// Brownian path with `B_0 = 0` and independent `N(0, dt)` increments.
/// Variate `j * d + i` of the stream drives component `i` on interval `j`.
pub fn sample_brownian(grid: &TimeGrid, d: usize, seed: u64, stream: u64) -> GridPath {
    let mut s = NormalStream::new(seed, stream);
    let mut b = GridPath::zeros(d, grid.len());
    for j in 0..grid.steps() {
        let h = grid.dt(j).sqrt();
        for i in 0..d {
            let z = s.next_normal();
            let prev = b.at(j)[i];
            b.at_mut(j + 1)[i] = prev + h * z;
        }
    }
    b
}

/// Per-interval increments `B_{j+1} - B_j`.
pub fn increments(b: &GridPath) -> GridPath {
    let d = b.dim();
    let mut out = GridPath::zeros(d, b.len() - 1);
    for j in 0..b.len() - 1 {
        for i in 0..d {
            out.at_mut(j)[i] = b.at(j + 1)[i] - b.at(j)[i];
        }
    }
    out
}

/// Brownian path refined by midpoint (bridge) insertion, so grids at
/// successive levels are nested and share the coarse values exactly.
#[derive(Debug, Clone)]
pub struct BrownianTree {
    base: TimeGrid,
    d: usize,
    seed: u64,
    stream: u64,
}

impl BrownianTree {
    pub fn new(base: TimeGrid, d: usize, seed: u64, stream: u64) -> Self {
        BrownianTree { base, d, seed, stream }
    }

    pub fn grid(&self, level: usize) -> TimeGrid {
        let mut g = self.base.clone();
        for _ in 0..level {
            g = refine(&g);
        }
        g
    }

    pub fn sample(&self, level: usize) -> (TimeGrid, GridPath) {
        let mut g = self.base.clone();
        let mut b = sample_brownian(&g, self.d, self.seed, self.stream);
        for l in 1..=level {
            let mut s = NormalStream::new(self.seed, rng::stream_id(&[self.stream, rng::tag::BRIDGE, l as u64]));
            let fine = refine(&g);
            let mut nb = GridPath::zeros(self.d, fine.len());
            for j in 0..g.steps() {
                nb.at_mut(2 * j).copy_from_slice(b.at(j));
                let q = (g.dt(j) / 4.0).sqrt();
                for i in 0..self.d {
                    let mid = 0.5 * (b.at(j)[i] + b.at(j + 1)[i]) + q * s.next_normal();
                    nb.at_mut(2 * j + 1)[i] = mid;
                }
            }
            nb.at_mut(fine.len() - 1).copy_from_slice(b.at(g.len() - 1));
            g = fine;
            b = nb;
        }
        (g, b)
    }
}

/// Grid with every interval split at its midpoint; atoms are kept.
pub fn refine(grid: &TimeGrid) -> TimeGrid {
    let mut pts = Vec::with_capacity(2 * grid.len() - 1);
    for j in 0..grid.steps() {
        pts.push(grid.t(j));
        pts.push(0.5 * (grid.t(j) + grid.t(j + 1)));
    }
    pts.push(grid.horizon());
    TimeGrid::from_points(pts, &grid.atoms()).expect("refinement of a valid grid is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughPath {
    grid: TimeGrid,
    d: usize,
    path: GridPath,
    raw: Vec<f64>,
    shift: i32,
    convention: Convention,
}

impl RoughPath {
    /// Assembles a rough path from a path and per-interval second levels.
    pub fn from_parts(grid: TimeGrid, path: GridPath, second: Vec<f64>, convention: Convention) -> Result<Self> {
        let d = path.dim();
        if path.len() != grid.len() || second.len() != grid.steps() * d * d {
            return Err(Error::domain("rough path components do not match the grid"));
        }
        Ok(RoughPath { grid, d, path, raw: second, shift: 0, convention })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn path(&self) -> &GridPath {
        &self.path
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn increment(&self, s: usize, t: usize) -> Vec<f64> {
        (0..self.d).map(|i| self.path.at(t)[i] - self.path.at(s)[i]).collect()
    }

    /// Second level over the adjacent interval `[t_j, t_{j+1}]`.
    pub fn interval_area(&self, j: usize) -> Vec<f64> {
        let d2 = self.d * self.d;
        let mut a = self.raw[j * d2..(j + 1) * d2].to_vec();
        if self.shift != 0 {
            let c = 0.5 * self.shift as f64 * self.grid.dt(j);
            for i in 0..self.d {
                a[i * self.d + i] += c;
            }
        }
        a
    }

    /// Mutable access to the raw per-interval data (testing corruptions).
    pub fn raw_area_mut(&mut self, j: usize) -> &mut [f64] {
        let d2 = self.d * self.d;
        &mut self.raw[j * d2..(j + 1) * d2]
    }

    /// `BB_{s,t}` for grid indices `s <= t`, composed with Chen's relation.
    pub fn area(&self, s: usize, t: usize) -> Vec<f64> {
        let d = self.d;
        let mut acc = vec![0.0; d * d];
        for j in s..t {
            self.chen_step(&mut acc, s, j);
        }
        acc
    }

    fn chen_step(&self, acc: &mut [f64], s: usize, j: usize) {
        let d = self.d;
        let a = self.interval_area(j);
        for i in 0..d {
            let x = self.path.at(j)[i] - self.path.at(s)[i];
            for k in 0..d {
                let y = self.path.at(j + 1)[k] - self.path.at(j)[k];
                acc[i * d + k] += a[i * d + k] + x * y;
            }
        }
    }

    /// All `BB_{s,t}` for `s < t`, row `s` holding `t = s+1..=N`.
    pub fn area_table(&self) -> Vec<Vec<f64>> {
        let n = self.grid.len();
        let d2 = self.d * self.d;
        let mut rows = Vec::with_capacity(n);
        for s in 0..n {
            let mut row = Vec::with_capacity((n - 1 - s) * d2);
            let mut acc = vec![0.0; d2];
            for j in s..n - 1 {
                self.chen_step(&mut acc, s, j);
                row.extend_from_slice(&acc);
            }
            rows.push(row);
        }
        rows
    }

    /// `||B||_alpha + ||BB||_{2 alpha}` over grid pairs in `[i0, i1]`.
    pub fn homogeneous_norm(&self, alpha: f64, i0: usize, i1: usize) -> f64 {
        let times = self.grid.points();
        let b = holder_by_index(times, i0, i1, alpha, |s, t| self.path.increment_norm(s, t));
        let d2 = self.d * self.d;
        let mut bb = 0.0f64;
        for s in i0..i1 {
            let mut acc = vec![0.0; d2];
            for j in s..i1 {
                self.chen_step(&mut acc, s, j);
                let nrm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
                bb = bb.max(nrm / (times[j + 1] - times[s]).powf(2.0 * alpha));
            }
        }
        b + bb
    }
}

/// Itô lift on the `kappa`-coarsened grid from left-point sums on the fine grid.
pub fn lift(fine: &GridPath, fine_grid: &TimeGrid, kappa: usize) -> Result<RoughPath> {
    if fine.len() != fine_grid.len() {
        return Err(Error::domain("path and grid lengths differ"));
    }
    let grid = fine_grid.coarsen(kappa)?;
    let d = fine.dim();
    let mut raw = vec![0.0; grid.steps() * d * d];
    for c in 0..grid.steps() {
        let s = c * kappa;
        let a = &mut raw[c * d * d..(c + 1) * d * d];
        for l in s..s + kappa {
            for i in 0..d {
                let x = fine.at(l)[i] - fine.at(s)[i];
                for k in 0..d {
                    a[i * d + k] += x * (fine.at(l + 1)[k] - fine.at(l)[k]);
                }
            }
        }
    }
    let path = GridPath::from_fn(d, grid.len(), |j, v| v.copy_from_slice(fine.at(j * kappa)));
    RoughPath::from_parts(grid, path, raw, Convention::Ito)
}

/// Stratonovich lift of the piecewise-linear interpolation: `dB (x) dB / 2`
/// per interval.
pub fn lift_piecewise_linear(b: &GridPath, grid: &TimeGrid) -> Result<RoughPath> {
    let d = b.dim();
    let mut raw = vec![0.0; grid.steps() * d * d];
    for j in 0..grid.steps() {
        for i in 0..d {
            let x = b.at(j + 1)[i] - b.at(j)[i];
            for k in 0..d {
                raw[j * d * d + i * d + k] = 0.5 * x * (b.at(j + 1)[k] - b.at(j)[k]);
            }
        }
    }
    RoughPath::from_parts(grid.clone(), b.clone(), raw, Convention::Stratonovich)
}

pub fn strat_from_ito(rp: &RoughPath) -> Result<RoughPath> {
    if rp.convention != Convention::Ito {
        return Err(Error::contract("rough path is already Stratonovich"));
    }
    let mut out = rp.clone();
    out.shift += 1;
    out.convention = Convention::Stratonovich;
    Ok(out)
}

pub fn ito_from_strat(rp: &RoughPath) -> Result<RoughPath> {
    if rp.convention != Convention::Stratonovich {
        return Err(Error::contract("rough path is already Itô"));
    }
    let mut out = rp.clone();
    out.shift -= 1;
    out.convention = Convention::Ito;
    Ok(out)
}

fn triple(rp: &RoughPath, s: f64, u: f64, t: f64) -> Result<(usize, usize, usize)> {
    let g = rp.grid();
    let (s, u, t) = (g.require_index(s)?, g.require_index(u)?, g.require_index(t)?);
    if !(s <= u && u <= t) {
        return Err(Error::domain("expected s <= u <= t"));
    }
    Ok((s, u, t))
}

/// `BB_{s,t} - BB_{s,u} - BB_{u,t} - dB_{s,u} (x) dB_{u,t}` at grid times.
pub fn chen_defect(rp: &RoughPath, s: f64, u: f64, t: f64) -> Result<Vec<f64>> {
    let (s, u, t) = triple(rp, s, u, t)?;
    Ok(chen_defect_idx(rp, s, u, t))
}

pub fn chen_defect_idx(rp: &RoughPath, s: usize, u: usize, t: usize) -> Vec<f64> {
    let d = rp.dim();
    let (st, su, ut) = (rp.area(s, t), rp.area(s, u), rp.area(u, t));
    let (x, y) = (rp.increment(s, u), rp.increment(u, t));
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            out[i * d + k] = st[i * d + k] - su[i * d + k] - ut[i * d + k] - x[i] * y[k];
        }
    }
    out
}

/// Largest Chen defect over all grid triples, relative to the size of the
/// terms involved.
pub fn max_relative_chen_defect(rp: &RoughPath) -> f64 {
    let table = rp.area_table();
    let n = rp.grid().len();
    let d = rp.dim();
    let d2 = d * d;
    let at = |s: usize, t: usize| &table[s][(t - s - 1) * d2..(t - s) * d2];
    let mut worst = 0.0f64;
    for s in 0..n {
        for u in s + 1..n {
            let x = rp.increment(s, u);
            for t in u + 1..n {
                let (st, su, ut) = (at(s, t), at(s, u), at(u, t));
                let mut num = 0.0f64;
                let mut den = f64::MIN_POSITIVE;
                for i in 0..d {
                    for k in 0..d {
                        let y = rp.path.at(t)[k] - rp.path.at(u)[k];
                        let c = i * d + k;
                        let xy = x[i] * y;
                        num = num.max((st[c] - su[c] - ut[c] - xy).abs());
                        den = den.max(st[c].abs()).max(su[c].abs()).max(ut[c].abs()).max(xy.abs());
                    }
                }
                worst = worst.max(num / den);
            }
        }
    }
    worst
}

/// `2 Sym(BB_{s,t}) - dB_{s,t} (x) dB_{s,t}` for grid indices.
pub fn geometric_defect(rp: &RoughPath, s: usize, t: usize) -> Vec<f64> {
    let d = rp.dim();
    let a = rp.area(s, t);
    let x = rp.increment(s, t);
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            out[i * d + k] = (a[i * d + k] + a[k * d + i]) - x[i] * x[k];
        }
    }
    out
}

/// Root-mean-square of the per-interval geometric defect entries.
pub fn geometric_defect_rms(rp: &RoughPath) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for j in 0..rp.grid().steps() {
        for v in geometric_defect(rp, j, j + 1) {
            acc += v * v;
            count += 1;
        }
    }
    (acc / count as f64).sqrt()
}

/// Controlled path `(U, U')` with values in `R^w` and `U'_s: R^d -> R^w`
/// stored row-major as a `w x d` matrix per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledPath {
    pub values: GridPath,
    pub gubinelli: GridPath,
    pub d: usize,
}

impl ControlledPath {
    pub fn new(values: GridPath, gubinelli: GridPath, d: usize) -> Result<Self> {
        if gubinelli.dim() != values.dim() * d || gubinelli.len() != values.len() {
            return Err(Error::domain("Gubinelli derivative has the wrong shape"));
        }
        Ok(ControlledPath { values, gubinelli, d })
    }

    pub fn value_dim(&self) -> usize {
        self.values.dim()
    }

    /// `R^U_{s,t} = dU_{s,t} - U'_s dB_{s,t}`.
    pub fn remainder(&self, rp: &RoughPath, s: usize, t: usize) -> Vec<f64> {
        let w = self.value_dim();
        let d = self.d;
        let x = rp.increment(s, t);
        let g = self.gubinelli.at(s);
        (0..w)
            .map(|a| {
                let lin: f64 = (0..d).map(|i| g[a * d + i] * x[i]).sum();
                self.values.at(t)[a] - self.values.at(s)[a] - lin
            })
            .collect()
    }
}

fn check_shared(len: usize, rp: &RoughPath) -> Result<()> {
    if len != rp.grid().len() {
        return Err(Error::domain("controlled path and rough path live on different grids"));
    }
    Ok(())
}

/// Grid-path integral together with the difference between the sums on the
/// working mesh and on the mesh of doubled step.
#[derive(Debug, Clone)]
pub struct IntegralResult {
    pub start: usize,
    pub values: GridPath,
    pub refinement_estimate: f64,
}

/// Compensated Riemann sums `sum (U_s dB_{s,t} + U'_s BB_{s,t})` from `a`.
///
/// `U` takes values in `L(R^d, R^m)` flattened as `m x d` (`w = m d`); the
/// Gubinelli term contracts `U'_s[(a, j), i]` with `BB^{ij}`.
pub fn rough_integral(u: &ControlledPath, rp: &RoughPath, window: (f64, f64)) -> Result<IntegralResult> {
    check_shared(u.values.len(), rp)?;
    let d = rp.dim();
    if u.d != d || !u.value_dim().is_multiple_of(d) {
        return Err(Error::domain("integrand must take values in L(R^d, R^m)"));
    }
    let m = u.value_dim() / d;
    let (i0, i1) = rp.grid().window(window.0, window.1)?;
    let local = |s: usize, t: usize| -> Vec<f64> {
        let x = rp.increment(s, t);
        let a = rp.area(s, t);
        let v = u.values.at(s);
        let g = u.gubinelli.at(s);
        (0..m)
            .map(|c| {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += v[c * d + j] * x[j];
                    for i in 0..d {
                        acc += g[(c * d + j) * d + i] * a[i * d + j];
                    }
                }
                acc
            })
            .collect()
    };
    let values = accumulate(m, i0, i1, &local);
    let coarse = accumulate_coarse(m, i0, i1, &local);
    Ok(IntegralResult { start: i0, refinement_estimate: coarse_gap(&values, &coarse), values })
}

fn accumulate(m: usize, i0: usize, i1: usize, local: &dyn Fn(usize, usize) -> Vec<f64>) -> GridPath {
    let mut out = GridPath::zeros(m, i1 - i0 + 1);
    for j in i0..i1 {
        let inc = local(j, j + 1);
        let k = j - i0;
        for c in 0..m {
            out.at_mut(k + 1)[c] = out.at(k)[c] + inc[c];
        }
    }
    out
}

fn accumulate_coarse(m: usize, i0: usize, i1: usize, local: &dyn Fn(usize, usize) -> Vec<f64>) -> GridPath {
    let mut out = GridPath::zeros(m, i1 - i0 + 1);
    let mut j = i0;
    while j < i1 {
        let e = (j + 2).min(i1);
        let inc = local(j, e);
        for c in 0..m {
            out.at_mut(e - i0)[c] = out.at(j - i0)[c] + inc[c];
        }
        if e == j + 2 {
            for c in 0..m {
                out.at_mut(j + 1 - i0)[c] = f64::NAN;
            }
        }
        j = e;
    }
    out
}

fn coarse_gap(fine: &GridPath, coarse: &GridPath) -> f64 {
    let mut gap = 0.0f64;
    for k in 0..fine.len() {
        for c in 0..fine.dim() {
            let v = coarse.at(k)[c];
            if v.is_finite() {
                gap = gap.max((fine.at(k)[c] - v).abs());
            }
        }
    }
    gap
}

/// Left-point sums `sum f(s_j) (x) (g_{j+1} - g_j)` from `a`; output entries
/// are indexed `a * dim(g) + b`.
pub fn young_integral(f: &GridPath, g: &GridPath, grid: &TimeGrid, window: (f64, f64)) -> Result<IntegralResult> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(Error::domain("integrand, integrator and grid lengths differ"));
    }
    let (i0, i1) = grid.window(window.0, window.1)?;
    let (m, k) = (f.dim(), g.dim());
    let local = |s: usize, t: usize| -> Vec<f64> {
        let mut out = vec![0.0; m * k];
        for a in 0..m {
            for b in 0..k {
                out[a * k + b] = f.at(s)[a] * (g.at(t)[b] - g.at(s)[b]);
            }
        }
        out
    };
    let values = accumulate(m * k, i0, i1, &local);
    let coarse = accumulate_coarse(m * k, i0, i1, &local);
    Ok(IntegralResult { start: i0, refinement_estimate: coarse_gap(&values, &coarse), values })
}

/// The integrator `s -> 1_[s,T]` as a grid path of `L_p` grid functions.
pub fn indicator_integrator(grid: &TimeGrid) -> GridPath {
    let n = grid.len();
    GridPath::from_fn(n, n, |j, v| {
        for r in j..n {
            v[r] = 1.0;
        }
    })
}

/// `||R^U||_{2 alpha}` over grid pairs in the window.
pub fn controlled_remainder(u: &ControlledPath, rp: &RoughPath, alpha: f64, window: (f64, f64)) -> Result<f64> {
    check_shared(u.values.len(), rp)?;
    let (i0, i1) = rp.grid().window(window.0, window.1)?;
    Ok(holder_by_index(rp.grid().points(), i0, i1, 2.0 * alpha, |s, t| crate::path::norm2(&u.remainder(rp, s, t))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughnessReport {
    pub theta: f64,
    pub l_theta: f64,
    pub epsilon_set: Vec<f64>,
    pub direction_samples: usize,
}

/// Probe scales `{4, 8, 16, 32} * mesh`.
pub fn default_scales(grid: &TimeGrid) -> Vec<f64> {
    [4.0, 8.0, 16.0, 32.0].iter().map(|k| k * grid.mesh()).collect()
}

/// Estimator of the modulus of theta-Hölder roughness,
///
/// ```text
/// L = min_{eps, s, phi} max_{|t - s| <= eps} |<phi, B_t - B_s>| / eps^theta
/// ```
///
/// with `phi` ranging over `probes` seeded random unit vectors plus, for
/// each anchor and scale, the least-squares direction (smallest eigenvector
/// of the increment scatter matrix).
pub fn holder_roughness(
    b: &GridPath,
    grid: &TimeGrid,
    theta: f64,
    alpha: f64,
    probes: usize,
    scales: &[f64],
    seed: u64,
) -> Result<RoughnessReport> {
    if scales.is_empty() {
        return Err(Error::domain("no probe scales given"));
    }
    if !(theta > 0.5 && theta < 2.0 * alpha) {
        return Err(Error::domain(format!("theta = {theta} must lie in (1/2, 2 alpha)")));
    }
    if b.len() != grid.len() {
        return Err(Error::domain("path and grid lengths differ"));
    }
    let d = b.dim();
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(probes);
    let mut s = NormalStream::new(seed, rng::stream_id(&[rng::tag::DIRECTIONS, d as u64]));
    for _ in 0..probes {
        let mut v: Vec<f64> = (0..d).map(|_| s.next_normal()).collect();
        let nrm = crate::path::norm2(&v);
        v.iter_mut().for_each(|x| *x /= nrm);
        dirs.push(v);
    }
    let pts = grid.points();
    let n = grid.len();
    let mut best = f64::INFINITY;
    for &eps in scales {
        let scale = eps.powf(theta);
        let tol = 1e-12 * eps;
        for a in 0..n {
            let mut lo = a;
            while lo > 0 && pts[a] - pts[lo - 1] <= eps + tol {
                lo -= 1;
            }
            let mut hi = a;
            while hi + 1 < n && pts[hi + 1] - pts[a] <= eps + tol {
                hi += 1;
            }
            if lo == a && hi == a {
                continue;
            }
            let incs: Vec<Vec<f64>> =
                (lo..=hi).filter(|&t| t != a).map(|t| (0..d).map(|i| b.at(t)[i] - b.at(a)[i]).collect()).collect();
            let mut eval = |phi: &[f64]| {
                let m =
                    incs.iter().map(|v| v.iter().zip(phi).map(|(x, y)| x * y).sum::<f64>().abs()).fold(0.0, f64::max);
                best = best.min(m / scale);
            };
            for phi in &dirs {
                eval(phi);
            }
            if d >= 2 {
                let mut scatter = DMatrix::<f64>::zeros(d, d);
                for v in &incs {
                    for i in 0..d {
                        for k in 0..d {
                            scatter[(i, k)] += v[i] * v[k];
                        }
                    }
                }
                let eig = SymmetricEigen::new(scatter);
                let imin = eig.eigenvalues.imin();
                let phi: Vec<f64> = eig.eigenvectors.column(imin).iter().copied().collect();
                eval(&phi);
            } else {
                eval(&[1.0]);
            }
        }
    }
    Ok(RoughnessReport {
        theta,
        l_theta: if best.is_finite() { best } else { 0.0 },
        epsilon_set: scales.to_vec(),
        direction_samples: probes,
    })
}
