//! Finite-dimensional lift of SDEs with discrete delays.
//!
//! For delays `0 < h_1 < ... < h_m < T` the solution is complemented by the
//! lagged copies `X(t - h)` for every sum `h` of base delays below `T`. Block
//! `k` of the lifted state is `X(t - h_k)` (block 0 is `X(t)` itself), driven
//! by the shifted noise `B^{h_k}` and frozen at `x0` until `t = h_k`.

use serde::{Deserialize, Serialize};

use crate::coeffs::{CoefficientField, FieldMetadata, Gradient, State, Which};
use crate::error::{Error, Result};
use crate::hormander::{span_check_state, HormanderReport, SpanOptions};
use crate::path::GridPath;
use crate::roughpath::{lift as rough_lift, RoughPath};
use crate::timegrid::{TimeGrid, TIME_TOL};

/// Largest number of composite delays produced by the closure.
pub const MAX_COMPOSITE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySystem {
    pub horizon: f64,
    pub n: usize,
    /// Base delays `h_1 < ... < h_m`.
    pub base: Vec<f64>,
    /// Shift of every block: `0`, the base delays, then the sorted composite
    /// delays.
    pub delays: Vec<f64>,
    /// `wiring[k][i]` is the block holding `X(t - h_k - h_i)`, or `None` when
    /// that argument is `x0` on the whole horizon.
    pub wiring: Vec<Vec<Option<usize>>>,
}

impl DelaySystem {
    pub fn blocks(&self) -> usize {
        self.delays.len()
    }

    /// `N = L n`.
    pub fn dim(&self) -> usize {
        self.blocks() * self.n
    }

    pub fn composite(&self) -> &[f64] {
        &self.delays[1 + self.base.len()..]
    }

    fn validate(&self) -> Result<()> {
        let l = self.blocks();
        if self.delays.first() != Some(&0.0) {
            return Err(Error::Config("block 0 must have shift 0".into()));
        }
        if self.wiring.len() != l || self.wiring.iter().any(|w| w.len() != self.base.len()) {
            return Err(Error::Config("wiring table does not match the blocks".into()));
        }
        for (k, w) in self.wiring.iter().enumerate() {
            if let Some(q) = w.iter().flatten().find(|&&q| q >= l) {
                return Err(Error::Config(format!("block {k} refers to missing block {q}")));
            }
        }
        Ok(())
    }
}

fn tol(horizon: f64) -> f64 {
    TIME_TOL * horizon.max(1.0)
}

fn find(v: &[f64], x: f64, eps: f64) -> Option<usize> {
    v.iter().position(|&y| (y - x).abs() <= eps)
}

/// Breadth-first closure of delay sums below `horizon`.
pub fn build_lift(delays: &[f64], horizon: f64, n: usize) -> Result<DelaySystem> {
    let eps = tol(horizon);
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::domain("horizon must be positive"));
    }
    for (i, &h) in delays.iter().enumerate() {
        if !(h > eps && h < horizon - eps) {
            return Err(Error::domain(format!("delay {h} outside (0, {horizon})")));
        }
        if i > 0 && h <= delays[i - 1] + eps {
            return Err(Error::domain("delays must be strictly increasing"));
        }
    }
    let mut all: Vec<f64> = std::iter::once(0.0).chain(delays.iter().copied()).collect();
    let mut composite = Vec::new();
    let mut frontier: Vec<f64> = delays.to_vec();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &s in &frontier {
            for &h in delays {
                let c = s + h;
                if c < horizon - eps && find(&all, c, eps).is_none() {
                    all.push(c);
                    composite.push(c);
                    next.push(c);
                }
            }
        }
        if composite.len() > MAX_COMPOSITE {
            return Err(Error::Resource(format!("more than {MAX_COMPOSITE} composite delays")));
        }
        frontier = next;
    }
    composite.sort_by(f64::total_cmp);
    let delays_all: Vec<f64> = std::iter::once(0.0).chain(delays.iter().copied()).chain(composite).collect();
    let wiring = delays_all
        .iter()
        .map(|&s| {
            delays.iter().map(|&h| if s + h < horizon - eps { find(&delays_all, s + h, eps) } else { None }).collect()
        })
        .collect();
    Ok(DelaySystem { horizon, n, base: delays.to_vec(), delays: delays_all, wiring })
}

/// Coefficients `A(t, x(t), x(t - h_1), ..., x(t - h_m))` of a discrete-delay
/// equation. `args[0]` is the present value and `args[i]` the value lagged by
/// `h_i`.
pub trait DelayCoefficients: Send + Sync {
    /// `(n, d)`.
    fn dims(&self) -> (usize, usize);

    fn delays(&self) -> &[f64];

    fn eval(&self, which: Which, t: f64, args: &[&[f64]], out: &mut [f64]);

    /// Row-major `n x n` partial derivative in `args[i]`, if known.
    fn arg_gradient(&self, _which: Which, _t: f64, _args: &[&[f64]], _i: usize) -> Option<Vec<f64>> {
        None
    }

    fn name(&self) -> &str {
        "delay"
    }
}

/// `b = sum_i A_i x(t - h_i) + a`, `sigma_k = sum_i S_{k,i} x(t - h_i) + c_k`
/// with `h_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDelay {
    pub n: usize,
    pub d: usize,
    pub delays: Vec<f64>,
    /// `m + 1` matrices `n x n`.
    pub drift: Vec<Vec<f64>>,
    #[serde(default)]
    pub drift_const: Vec<f64>,
    /// `d` lists of `m + 1` matrices.
    pub diffusion: Vec<Vec<Vec<f64>>>,
    /// `n x d`, row-major.
    #[serde(default)]
    pub diffusion_const: Vec<f64>,
}

impl LinearDelay {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.delays.len());
        let sq = |v: &Vec<Vec<f64>>| v.len() == m + 1 && v.iter().all(|a| a.len() == n * n);
        let ok = sq(&self.drift)
            && self.diffusion.len() == self.d
            && self.diffusion.iter().all(sq)
            && (self.drift_const.is_empty() || self.drift_const.len() == n)
            && (self.diffusion_const.is_empty() || self.diffusion_const.len() == n * self.d);
        if ok {
            Ok(())
        } else {
            Err(Error::validation("field.params", "linear delay matrices have inconsistent shapes"))
        }
    }

    fn mats(&self, which: Which) -> &[Vec<f64>] {
        match which {
            Which::Drift => &self.drift,
            Which::Diffusion(k) => &self.diffusion[k],
        }
    }
}

impl DelayCoefficients for LinearDelay {
    fn dims(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn delays(&self) -> &[f64] {
        &self.delays
    }

    fn eval(&self, which: Which, _t: f64, args: &[&[f64]], out: &mut [f64]) {
        let n = self.n;
        for (r, o) in out.iter_mut().enumerate() {
            *o = match which {
                Which::Drift => self.drift_const.get(r).copied().unwrap_or(0.0),
                Which::Diffusion(k) => self.diffusion_const.get(r * self.d + k).copied().unwrap_or(0.0),
            };
        }
        for (m, a) in self.mats(which).iter().zip(args) {
            for r in 0..n {
                out[r] += (0..n).map(|c| m[r * n + c] * a[c]).sum::<f64>();
            }
        }
    }

    fn arg_gradient(&self, which: Which, _t: f64, _args: &[&[f64]], i: usize) -> Option<Vec<f64>> {
        Some(self.mats(which)[i].clone())
    }

    fn name(&self) -> &str {
        "linear_delay"
    }
}

/// Checks that every lag of every grid time is a grid point, so that shifted
/// paths are exact re-indexings.
pub fn check_alignment(grid: &TimeGrid, delays: &[f64]) -> Result<Vec<usize>> {
    let eps = tol(grid.horizon());
    delays
        .iter()
        .map(|&h| {
            if h.abs() <= eps {
                return Ok(0);
            }
            let s = grid.index_of(h).ok_or_else(|| Error::domain(format!("delay {h} is not a grid point")))?;
            for j in s..grid.len() {
                if (grid.t(j) - h - grid.t(j - s)).abs() > eps {
                    return Err(Error::domain(format!("delay {h} is not a multiple of the mesh at t = {}", grid.t(j))));
                }
            }
            Ok(s)
        })
        .collect()
}

/// The delay equation as a path-dependent field on the original grid: lagged
/// arguments are read from the stopped path, `x0` (slot 0) before time 0.
#[derive(Debug, Clone)]
pub struct DiscreteDelay<D> {
    pub coeffs: D,
}

impl<D: DelayCoefficients> DiscreteDelay<D> {
    fn lag_slots(&self, x: &State) -> Option<Vec<usize>> {
        let eps = tol(x.grid.horizon());
        self.coeffs
            .delays()
            .iter()
            .map(|&h| {
                let t = x.t - h;
                if t <= eps {
                    Some(0)
                } else {
                    x.grid.index_of(t)
                }
            })
            .collect()
    }
}

impl<D: DelayCoefficients> CoefficientField for DiscreteDelay<D> {
    fn dims(&self) -> (usize, usize) {
        self.coeffs.dims()
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let Some(slots) = self.lag_slots(x) else {
            out.fill(f64::NAN);
            return;
        };
        let args: Vec<&[f64]> = std::iter::once(x.value).chain(slots.iter().map(|&j| x.slot(j))).collect();
        self.coeffs.eval(which, x.t, &args, out)
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let slots = self.lag_slots(x)?;
        let args: Vec<&[f64]> = std::iter::once(x.value).chain(slots.iter().map(|&j| x.slot(j))).collect();
        let n = x.n();
        let mut g = Gradient::from_point(n, n, self.coeffs.arg_gradient(which, x.t, &args, 0)?);
        for (i, &j) in slots.iter().enumerate() {
            let m = self.coeffs.arg_gradient(which, x.t, &args, i + 1)?;
            for (o, v) in g.slot_mut(j).iter_mut().zip(&m) {
                *o += v;
            }
        }
        Some(g)
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { smooth_in_time: false, ..FieldMetadata::new(self.coeffs.name()) }
    }
}

fn delay_increment(
    coeffs: &dyn DelayCoefficients,
    t: f64,
    args: &[&[f64]],
    dt: f64,
    db: &[f64],
    col: &mut [f64],
    inc: &mut [f64],
) {
    coeffs.eval(Which::Drift, t, args, col);
    for (o, c) in inc.iter_mut().zip(col.iter()) {
        *o = c * dt;
    }
    for (k, &w) in db.iter().enumerate() {
        coeffs.eval(Which::Diffusion(k), t, args, col);
        for (o, c) in inc.iter_mut().zip(col.iter()) {
            *o += c * w;
        }
    }
}

fn check_system(system: &DelaySystem, coeffs: &dyn DelayCoefficients) -> Result<()> {
    system.validate()?;
    let eps = tol(system.horizon);
    let same = coeffs.delays().len() == system.base.len()
        && coeffs.delays().iter().zip(&system.base).all(|(a, b)| (a - b).abs() <= eps);
    if !same || coeffs.dims().0 != system.n {
        return Err(Error::Config("coefficients do not match the delay system".into()));
    }
    Ok(())
}

/// Block-wise Euler scheme for the lifted system: block `k` steps with the
/// coefficients at `t - h_k`, the noise increment shifted by `h_k`, and stays
/// at `x0` before `t = h_k`. Returns the `L n`-dimensional path.
pub fn solve_lifted(
    system: &DelaySystem,
    coeffs: &dyn DelayCoefficients,
    x0: &[f64],
    noise: &GridPath,
    grid: &TimeGrid,
) -> Result<GridPath> {
    check_system(system, coeffs)?;
    let (n, d) = coeffs.dims();
    if x0.len() != n || noise.dim() != d || noise.len() != grid.steps() {
        return Err(Error::domain("initial value or noise does not match the coefficients"));
    }
    if (grid.horizon() - system.horizon).abs() > tol(system.horizon) {
        return Err(Error::domain("grid horizon differs from the delay system"));
    }
    let shifts = check_alignment(grid, &system.delays)?;
    let l = system.blocks();
    let start: Vec<f64> = std::iter::repeat_n(x0, l).flatten().copied().collect();
    let mut buf = GridPath::constant(&start, grid.len()).into_vec();
    let mut col = vec![0.0; n];
    let mut inc = vec![0.0; n];
    for j in 0..grid.steps() {
        let (head, tail) = buf.split_at_mut((j + 1) * l * n);
        let now = &head[j * l * n..(j + 1) * l * n];
        let next = &mut tail[..l * n];
        next.copy_from_slice(now);
        for k in 0..l {
            if j < shifts[k] {
                continue;
            }
            let jj = j - shifts[k];
            let args: Vec<&[f64]> = std::iter::once(&now[k * n..(k + 1) * n])
                .chain(system.wiring[k].iter().map(|w| match w {
                    Some(q) => &now[q * n..(q + 1) * n],
                    None => x0,
                }))
                .collect();
            delay_increment(coeffs, grid.t(jj), &args, grid.dt(jj), noise.at(jj), &mut col, &mut inc);
            for i in 0..n {
                next[k * n + i] += inc[i];
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: j + 1, message: "non-finite lifted state".into() });
        }
    }
    Ok(GridPath::from_vec(l * n, buf))
}

/// `B^h_t = B_{t-h}` for `t >= h`, zero before.
pub fn shifted_brownian(b: &GridPath, grid: &TimeGrid, h: f64) -> Result<GridPath> {
    if b.len() != grid.len() {
        return Err(Error::domain("path and grid lengths differ"));
    }
    if h < 0.0 {
        return Err(Error::domain("delay must be nonnegative"));
    }
    let s = check_alignment(grid, &[h])?[0];
    let d = b.dim();
    Ok(GridPath::from_fn(d, grid.len(), |j, v| {
        if j >= s {
            v.copy_from_slice(b.at(j - s))
        }
    }))
}

/// Second-order blocks between `B^h` and `B` over `[s, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossArea {
    /// `[i * d + j] = int (B^i_{r-h} - B^i_{s-h}) dB^j_r`, left-point sums.
    pub forward: Vec<f64>,
    /// `[j * d + i] = dB^j_{s,t} B^i_{t-h} - int B^i_{r-h} dB^j_r - 1{i = j, h = 0} (t - s)`.
    pub companion: Vec<f64>,
}

/// Delayed cross-areas on the grid of `b` (a fine mesh when used as a lift).
pub fn delayed_cross_area(b: &GridPath, grid: &TimeGrid, h: f64, s: f64, t: f64) -> Result<CrossArea> {
    let bh = shifted_brownian(b, grid, h)?;
    let (si, ti) = (grid.require_index(s)?, grid.require_index(t)?);
    if si > ti {
        return Err(Error::domain("expected s <= t"));
    }
    let d = b.dim();
    let zero_lag = h.abs() <= tol(grid.horizon());
    let mut forward = vec![0.0; d * d];
    let mut plain = vec![0.0; d * d];
    for r in si..ti {
        for i in 0..d {
            let x = bh.at(r)[i] - bh.at(si)[i];
            for j in 0..d {
                let db = b.at(r + 1)[j] - b.at(r)[j];
                forward[i * d + j] += x * db;
                plain[i * d + j] += bh.at(r)[i] * db;
            }
        }
    }
    let mut companion = vec![0.0; d * d];
    for j in 0..d {
        let dbj = b.at(ti)[j] - b.at(si)[j];
        for i in 0..d {
            let mut v = dbj * bh.at(ti)[i] - plain[i * d + j];
            if zero_lag && i == j {
                v -= grid.t(ti) - grid.t(si);
            }
            companion[j * d + i] = v;
        }
    }
    Ok(CrossArea { forward, companion })
}

/// Path of `(B, B^{h_1}, ..., B^{h_{L-1}})` with `L d` components.
pub fn extended_path(b: &GridPath, grid: &TimeGrid, system: &DelaySystem) -> Result<GridPath> {
    let d = b.dim();
    let l = system.blocks();
    let shifted: Vec<GridPath> = system.delays.iter().map(|&h| shifted_brownian(b, grid, h)).collect::<Result<_>>()?;
    Ok(GridPath::from_fn(l * d, grid.len(), |j, v| {
        for (k, p) in shifted.iter().enumerate() {
            v[k * d..(k + 1) * d].copy_from_slice(p.at(j));
        }
    }))
}

/// Itô lift of the extended path from a fine path, `kappa` fine steps per
/// coarse step.
pub fn extended_lift(fine: &GridPath, fine_grid: &TimeGrid, system: &DelaySystem, kappa: usize) -> Result<RoughPath> {
    rough_lift(&extended_path(fine, fine_grid, system)?, fine_grid, kappa)
}

/// The lifted system as a state-dependent field on `R^{L n}` driven by the
/// `L d`-dimensional extended noise, so flows and brackets apply unchanged.
pub struct LiftedDelayField<'a> {
    pub system: &'a DelaySystem,
    pub coeffs: &'a dyn DelayCoefficients,
    pub x0: Vec<f64>,
}

impl LiftedDelayField<'_> {
    fn block_args<'b>(&'b self, value: &'b [f64], k: usize) -> Vec<&'b [f64]> {
        let n = self.system.n;
        std::iter::once(&value[k * n..(k + 1) * n])
            .chain(self.system.wiring[k].iter().map(|w| match w {
                Some(q) => &value[q * n..(q + 1) * n],
                None => &self.x0[..],
            }))
            .collect()
    }

    fn active(&self, t: f64, k: usize) -> bool {
        t >= self.system.delays[k] - tol(self.system.horizon)
    }
}

impl CoefficientField for LiftedDelayField<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.system.dim(), self.system.blocks() * self.coeffs.dims().1)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let n = self.system.n;
        let d = self.coeffs.dims().1;
        out.fill(0.0);
        match which {
            Which::Drift => {
                for k in 0..self.system.blocks() {
                    if self.active(x.t, k) {
                        let args = self.block_args(x.value, k);
                        let t = x.t - self.system.delays[k];
                        self.coeffs.eval(Which::Drift, t, &args, &mut out[k * n..(k + 1) * n]);
                    }
                }
            }
            Which::Diffusion(c) => {
                let (k, kk) = (c / d, c % d);
                if self.active(x.t, k) {
                    let args = self.block_args(x.value, k);
                    let t = x.t - self.system.delays[k];
                    self.coeffs.eval(Which::Diffusion(kk), t, &args, &mut out[k * n..(k + 1) * n]);
                }
            }
        }
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let n = self.system.n;
        let big = self.system.dim();
        let d = self.coeffs.dims().1;
        let mut g = vec![0.0; big * big];
        let blocks: Vec<(usize, Which)> = match which {
            Which::Drift => (0..self.system.blocks()).map(|k| (k, Which::Drift)).collect(),
            Which::Diffusion(c) => vec![(c / d, Which::Diffusion(c % d))],
        };
        for (k, w) in blocks {
            if !self.active(x.t, k) {
                continue;
            }
            let args = self.block_args(x.value, k);
            let t = x.t - self.system.delays[k];
            let cols = std::iter::once(Some(k)).chain(self.system.wiring[k].iter().copied());
            for (i, q) in cols.enumerate() {
                let Some(q) = q else { continue };
                let m = self.coeffs.arg_gradient(w, t, &args, i)?;
                for r in 0..n {
                    for c in 0..n {
                        g[(k * n + r) * big + q * n + c] += m[r * n + c];
                    }
                }
            }
        }
        Some(Gradient::from_point(big, big, g))
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { state_dependent: true, smooth_in_time: false, ..FieldMetadata::new("lifted_delay") }
    }
}

/// Noise increments of the extended path on `grid`.
pub fn extended_noise(noise: &GridPath, grid: &TimeGrid, system: &DelaySystem) -> Result<GridPath> {
    let shifts = check_alignment(grid, &system.delays)?;
    let d = noise.dim();
    let l = system.blocks();
    Ok(GridPath::from_fn(l * d, grid.steps(), |j, v| {
        for (k, &s) in shifts.iter().enumerate() {
            if j >= s {
                v[k * d..(k + 1) * d].copy_from_slice(noise.at(j - s));
            }
        }
    }))
}

/// Coefficients with lagged arguments fixed, as a field of the present value.
struct Pinned<'a> {
    coeffs: &'a dyn DelayCoefficients,
    t: f64,
    lags: Vec<Vec<f64>>,
}

impl CoefficientField for Pinned<'_> {
    fn dims(&self) -> (usize, usize) {
        self.coeffs.dims()
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let args: Vec<&[f64]> = std::iter::once(x.value).chain(self.lags.iter().map(|v| &v[..])).collect();
        self.coeffs.eval(which, self.t, &args, out)
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let args: Vec<&[f64]> = std::iter::once(x.value).chain(self.lags.iter().map(|v| &v[..])).collect();
        let n = x.n();
        Some(Gradient::from_point(n, n, self.coeffs.arg_gradient(which, self.t, &args, 0)?))
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { state_dependent: true, ..FieldMetadata::new("pinned_delay") }
    }
}

/// Bracket condition at `tau` with the lags `h_l >= tau` pinned to `x0` and
/// the remaining lagged values taken from `lagged` (in delay order).
/// Brackets differentiate in the present value only.
pub fn delayed_span_check(
    coeffs: &dyn DelayCoefficients,
    tau: f64,
    x0: &[f64],
    value: &[f64],
    lagged: &[Vec<f64>],
    grid: &TimeGrid,
    opts: SpanOptions,
) -> Result<HormanderReport> {
    let eps = tol(grid.horizon());
    let delays = coeffs.delays();
    let free = delays.iter().filter(|&&h| h < tau - eps).count();
    if lagged.len() != free {
        return Err(Error::domain(format!("expected {free} lagged values at tau = {tau}")));
    }
    let lags = delays.iter().enumerate().map(|(i, _)| if i < free { lagged[i].clone() } else { x0.to_vec() }).collect();
    let field = Pinned { coeffs, t: tau, lags };
    let x = State { grid, t: tau, step: 0, path: value, value };
    span_check_state(&field, &x, opts)
}

/// Exact solution of `x' = c x(t - h)` with `x = x0` on `[-h, 0]`, one
/// polynomial per interval `[k h, (k + 1) h]`.
pub fn method_of_steps(c: f64, h: f64, x0: f64, t: f64) -> f64 {
    // coefficients in u = t - k h
    let mut piece = vec![x0, c * x0];
    let mut k = 0usize;
    let eval = |p: &[f64], u: f64| p.iter().rev().fold(0.0, |a, &q| a * u + q);
    while t > (k as f64 + 1.0) * h {
        let start = eval(&piece, h);
        let mut next = vec![start];
        next.extend(piece.iter().enumerate().map(|(i, &q)| c * q / (i as f64 + 1.0)));
        piece = next;
        k += 1;
    }
    eval(&piece, t - k as f64 * h)
}
