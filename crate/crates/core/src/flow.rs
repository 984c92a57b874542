//! Euler scheme for path-dependent SDEs, the lift of the solution, and the
//! Jacobian and inverse flows on the discretized lift space.
//!
//! With `L_j u = (1_{[t_j,T]} u, u)`, one Euler step of the lifted equation
//! is `X_{j+1} = X_j + L_{j+1}(b dt + sigma dB)`: the increment over
//! `[t_j, t_{j+1}]` enters the path slots from `t_{j+1}` on, which keeps the
//! lifted state equal to the stopped solution. Linearizing gives
//!
//! ```text
//! Y_{j+1} = (I + L_{j+1} M_j) Y_j,        M_j = db dt + sum_k dsigma_k dB^k,
//! Z_{j+1} = Z_j (I - L_{j+1} N_j),
//! ```
//!
//! where `N_j = (db - sum_k (dsigma_k L_{j+1}) dsigma_k) dt + sum_k dsigma_k dB^k`
//! is the Euler step of the inverse equation. The exact discrete inverse
//! uses `N_j = (I + M_j L_{j+1})^{-1} M_j` instead.
//!
//! Operators are stored as `I + E S_A`: `A` collects the columns any `M_j`
//! or `N_j` reads, so `E` is `D x |A|` rather than `D x D`.

use std::borrow::Cow;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeffs::{
    component, directional_fd, gradient_or_fd, CoefficientField, Gradient, LiftedVector, State, Which,
};
use crate::error::{Error, Result};
use crate::path::GridPath;
use crate::roughpath;
use crate::timegrid::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionBundle {
    pub grid: TimeGrid,
    pub x: GridPath,
    /// Per-interval increments `B_{t_{j+1}} - B_{t_j}`.
    pub noise: GridPath,
    pub lifted_states: Option<Vec<LiftedVector>>,
}

impl SolutionBundle {
    pub fn n(&self) -> usize {
        self.x.dim()
    }

    pub fn d(&self) -> usize {
        self.noise.dim()
    }

    /// Dimension `n (N + 1) + n` of the discretized lift space.
    pub fn lift_dim(&self) -> usize {
        self.n() * (self.grid.len() + 1)
    }

    /// Path argument for evaluating a field at step `j`. Fields that do not
    /// read past the present can use the whole solution.
    pub fn state_path(&self, j: usize, reads_future: bool) -> Cow<'_, [f64]> {
        if reads_future {
            Cow::Owned(self.x.stopped(j).into_vec())
        } else {
            Cow::Borrowed(self.x.as_slice())
        }
    }

    pub fn with_lifted_states(mut self) -> Self {
        self.lifted_states = Some(lift_solution(&self));
        self
    }
}

/// Increments of a sampled Brownian path on `grid`.
pub fn brownian_noise(grid: &TimeGrid, d: usize, seed: u64, stream: u64) -> GridPath {
    roughpath::increments(&roughpath::sample_brownian(grid, d, seed, stream))
}

fn euler_increment(field: &dyn CoefficientField, st: &State, dt: f64, db: &[f64], col: &mut [f64], inc: &mut [f64]) {
    field.eval(Which::Drift, st, col);
    for (o, c) in inc.iter_mut().zip(col.iter()) {
        *o = c * dt;
    }
    for (k, &w) in db.iter().enumerate() {
        field.eval(Which::Diffusion(k), st, col);
        for (o, c) in inc.iter_mut().zip(col.iter()) {
            *o += c * w;
        }
    }
}

fn check_inputs(field: &dyn CoefficientField, x0: &[f64], noise: &GridPath, grid: &TimeGrid) -> Result<()> {
    let (n, d) = field.dims();
    if x0.len() != n {
        return Err(Error::domain(format!("initial value has dimension {}, field expects {n}", x0.len())));
    }
    if noise.dim() != d || noise.len() != grid.steps() {
        return Err(Error::domain(format!(
            "noise is {} x {}, grid needs {} increments of dimension {d}",
            noise.len(),
            noise.dim(),
            grid.steps()
        )));
    }
    Ok(())
}

/// Left-point Euler scheme `X_{j+1} = X_j + b dt + sigma dB`.
pub fn solve_sde(
    field: &dyn CoefficientField,
    x0: &[f64],
    noise: &GridPath,
    grid: &TimeGrid,
) -> Result<SolutionBundle> {
    check_inputs(field, x0, noise, grid)?;
    let n = x0.len();
    let full = field.metadata().reads_future_slots;
    let mut buf = GridPath::constant(x0, grid.len()).into_vec();
    let mut col = vec![0.0; n];
    let mut inc = vec![0.0; n];
    let mut value = x0.to_vec();
    for j in 0..grid.steps() {
        let st = State { grid, t: grid.t(j), step: j, path: &buf, value: &value };
        euler_increment(field, &st, grid.dt(j), noise.at(j), &mut col, &mut inc);
        for i in 0..n {
            value[i] += inc[i];
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: j + 1, message: "non-finite state".into() });
        }
        let hi = if full { grid.len() } else { j + 2 };
        for r in j + 1..hi {
            buf[r * n..(r + 1) * n].copy_from_slice(&value);
        }
    }
    Ok(SolutionBundle { grid: grid.clone(), x: GridPath::from_vec(n, buf), noise: noise.clone(), lifted_states: None })
}

/// Lifted states `(X^{t_j}, X(t_j))`.
pub fn lift_solution(bundle: &SolutionBundle) -> Vec<LiftedVector> {
    (0..bundle.grid.len())
        .map(|j| LiftedVector { path_part: bundle.x.stopped(j), point_part: bundle.x.at(j).to_vec() })
        .collect()
}

/// Solves the lifted equation on the discretized lift space directly:
/// every path slot `r` receives the increment weighted by `1_{[t_{j+1},T]}(r)`.
pub fn direct_lifted_solve(
    field: &dyn CoefficientField,
    x0: &[f64],
    noise: &GridPath,
    grid: &TimeGrid,
) -> Result<Vec<LiftedVector>> {
    check_inputs(field, x0, noise, grid)?;
    let n = x0.len();
    let mut path = GridPath::constant(x0, grid.len()).into_vec();
    let mut point = x0.to_vec();
    let mut col = vec![0.0; n];
    let mut inc = vec![0.0; n];
    let mut out = Vec::with_capacity(grid.len());
    out.push(LiftedVector { path_part: GridPath::from_vec(n, path.clone()), point_part: point.clone() });
    for j in 0..grid.steps() {
        let st = State { grid, t: grid.t(j), step: j, path: &path, value: &point };
        euler_increment(field, &st, grid.dt(j), noise.at(j), &mut col, &mut inc);
        for r in j + 1..grid.len() {
            for i in 0..n {
                path[r * n + i] += inc[i];
            }
        }
        for i in 0..n {
            point[i] += inc[i];
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: j + 1, message: "non-finite state".into() });
        }
        out.push(LiftedVector { path_part: GridPath::from_vec(n, path.clone()), point_part: point.clone() });
    }
    Ok(out)
}

/// `w <- (I + L_{from} G) w` for a flat lift-space vector.
pub fn apply_lifted_step(g: &Gradient, from: usize, w: &mut [f64], path_len: usize, sign: f64) {
    let n = g.n();
    let mut r = vec![0.0; n];
    g.apply_flat(w, path_len, &mut r);
    for s in from..=path_len {
        for i in 0..n {
            w[s * n + i] += sign * r[i];
        }
    }
}

/// Per-step derivative data along a solution.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub n: usize,
    pub d: usize,
    pub path_len: usize,
    /// `d b` at `t_j`, `j < N`.
    pub db: Vec<Gradient>,
    /// `d sigma_k` at `t_j`, `j < N`.
    pub dsigma: Vec<Vec<Gradient>>,
    /// `M_j`.
    pub m: Vec<Gradient>,
    /// `sigma(t_j)`, `n x d` row-major, for `j <= N`.
    pub sigma: Vec<Vec<f64>>,
}

pub fn linearize(field: &dyn CoefficientField, bundle: &SolutionBundle, allow_fd: bool) -> Result<Linearization> {
    let (n, d) = field.dims();
    let g = &bundle.grid;
    let full = field.metadata().reads_future_slots;
    let mut db = Vec::with_capacity(g.steps());
    let mut dsigma = Vec::with_capacity(g.steps());
    let mut m = Vec::with_capacity(g.steps());
    let mut sigma = Vec::with_capacity(g.len());
    for j in 0..g.len() {
        let path = bundle.state_path(j, full);
        let st = State { grid: g, t: g.t(j), step: j, path: &path, value: bundle.x.at(j) };
        sigma.push(crate::coeffs::sigma_matrix(field, &st));
        if j == g.steps() {
            break;
        }
        let gb = gradient_or_fd(field, Which::Drift, &st, allow_fd)?;
        let gs: Vec<Gradient> =
            (0..d).map(|k| gradient_or_fd(field, Which::Diffusion(k), &st, allow_fd)).collect::<Result<_>>()?;
        let mut parts = vec![(g.dt(j), &gb)];
        for (k, gk) in gs.iter().enumerate() {
            parts.push((bundle.noise.at(j)[k], gk));
        }
        m.push(Gradient::combine(&parts));
        db.push(gb);
        dsigma.push(gs);
    }
    Ok(Linearization { n, d, path_len: g.len(), db, dsigma, m, sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InverseScheme {
    /// Euler step of the inverse equation.
    #[default]
    Euler,
    /// Exact inverse of each Jacobian factor.
    Exact,
}

impl Linearization {
    pub fn steps(&self) -> usize {
        self.m.len()
    }

    /// `varsigma_j = db - sum_k (dsigma_k L_{j+1}) dsigma_k`.
    pub fn varsigma(&self, j: usize) -> Gradient {
        let n = self.n;
        let mut parts: Vec<(f64, Gradient)> = vec![(1.0, self.db[j].clone())];
        for gk in &self.dsigma[j] {
            let c = gk.apply_lift(j + 1);
            parts.push((-1.0, gk.left_mul(&c, n)));
        }
        let refs: Vec<(f64, &Gradient)> = parts.iter().map(|(c, g)| (*c, g)).collect();
        Gradient::combine(&refs)
    }

    /// Factor `N_j` of the inverse flow.
    pub fn inverse_factor(&self, j: usize, dt: f64, db: &[f64], scheme: InverseScheme) -> Gradient {
        inverse_factor_from(self.n, j, &self.db[j], &self.dsigma[j], &self.m[j], dt, db, scheme)
    }

    pub fn inverse_factors(&self, grid: &TimeGrid, noise: &GridPath, scheme: InverseScheme) -> Vec<Gradient> {
        (0..self.steps()).map(|j| self.inverse_factor(j, grid.dt(j), noise.at(j), scheme)).collect()
    }

    /// `sigma_0 = b - 1/2 sum_k dsigma_k L_j sigma_k` at `t_j` (point part),
    /// given `b(t_j)`.
    pub fn sigma0_point(&self, j: usize, b: &[f64]) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut out = b.to_vec();
        for k in 0..d {
            let c = self.dsigma[j][k].apply_lift(j);
            for r in 0..n {
                let s: f64 = (0..n).map(|i| c[r * n + i] * self.sigma[j][i * d + k]).sum();
                out[r] -= 0.5 * s;
            }
        }
        out
    }
}

/// `N_j` from the step-`j` gradients; `m` is `M_j`.
#[allow(clippy::too_many_arguments)]
pub fn inverse_factor_from(
    n: usize,
    j: usize,
    db: &Gradient,
    dsigma: &[Gradient],
    m: &Gradient,
    dt: f64,
    dbn: &[f64],
    scheme: InverseScheme,
) -> Gradient {
    match scheme {
        InverseScheme::Euler => {
            let mut owned: Vec<(f64, Gradient)> = Vec::with_capacity(dsigma.len());
            for gk in dsigma {
                let c = gk.apply_lift(j + 1);
                owned.push((-dt, gk.left_mul(&c, n)));
            }
            let mut parts: Vec<(f64, &Gradient)> = vec![(dt, db)];
            parts.extend(owned.iter().map(|(c, g)| (*c, g)));
            for (k, gk) in dsigma.iter().enumerate() {
                parts.push((dbn[k], gk));
            }
            Gradient::combine(&parts)
        }
        InverseScheme::Exact => {
            let ml = m.apply_lift(j + 1);
            let k = DMatrix::from_row_slice(n, n, &ml) + DMatrix::identity(n, n);
            let inv = k.try_inverse().expect("Jacobian factor is singular");
            let rows: Vec<f64> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| inv[(r, c)]).collect();
            m.left_mul(&rows, n)
        }
    }
}

/// Jacobian and inverse flows on the discretized lift space.
#[derive(Debug, Clone)]
pub struct FlowOperators {
    pub n: usize,
    pub path_len: usize,
    pub dim: usize,
    /// Columns read by any factor, ascending.
    pub active: Vec<usize>,
    pub snapshots: Vec<usize>,
    pub scheme: InverseScheme,
    y: Option<Vec<Vec<f64>>>,
    z: Option<Vec<Vec<f64>>>,
    /// Point part of `Y_j v` at every step for each tracked direction.
    pub tracked: Vec<GridPath>,
    /// `varsigma_j` per step.
    pub varsigma_cache: Vec<Gradient>,
    /// Point part of `sigma_0(t_j)` per step.
    pub sigma0_cache: Vec<Vec<f64>>,
    pub lin: Linearization,
    pub inverse: Vec<Gradient>,
}

#[derive(Debug, Clone, Default)]
pub struct FlowRequest {
    pub snapshots: Vec<usize>,
    pub jacobian: bool,
    pub inverse: bool,
    pub scheme: InverseScheme,
    pub allow_fd: bool,
    /// Flat lift-space vectors whose image under `Y_j` is recorded.
    pub track: Vec<Vec<f64>>,
}

fn column_of(g: &Gradient, path_len: usize) -> impl Iterator<Item = usize> + '_ {
    let n = g.n();
    g.slots().iter().flat_map(move |&s| (0..n).map(move |i| s * n + i)).chain((0..n).map(move |i| path_len * n + i))
}

/// `G (I + E S_A)` restricted to the active columns: `n x |A|`, row-major.
fn times_operator(g: &Gradient, e: &[f64], active: &[usize], pos: &[usize], path_len: usize) -> Vec<f64> {
    let n = g.n();
    let na = active.len();
    let mut out = vec![0.0; n * na];
    let mut add_block = |blk: &[f64], base: usize| {
        for i in 0..n {
            let col = base + i;
            let a = pos[col];
            let row_e = &e[col * na..(col + 1) * na];
            for r in 0..n {
                let c = blk[r * n + i];
                if c == 0.0 {
                    continue;
                }
                out[r * na + a] += c;
                for (o, v) in out[r * na..(r + 1) * na].iter_mut().zip(row_e) {
                    *o += c * v;
                }
            }
        }
    };
    for (k, &s) in g.slots().iter().enumerate() {
        add_block(g.block(k), s * n);
    }
    add_block(g.point(), path_len * n);
    out
}

pub fn flow_operators(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    req: &FlowRequest,
) -> Result<FlowOperators> {
    let lin = linearize(field, bundle, req.allow_fd)?;
    let grid = &bundle.grid;
    let (n, path_len) = (lin.n, lin.path_len);
    let dim = n * (path_len + 1);
    for &k in &req.snapshots {
        if k >= grid.len() {
            return Err(Error::domain(format!("snapshot index {k} outside the grid")));
        }
    }
    let inverse = lin.inverse_factors(grid, &bundle.noise, req.scheme);
    let mut active: Vec<usize> = lin.m.iter().chain(&inverse).flat_map(|g| column_of(g, path_len)).collect();
    active.sort_unstable();
    active.dedup();
    let mut pos = vec![usize::MAX; dim];
    for (a, &c) in active.iter().enumerate() {
        pos[c] = a;
    }
    let na = active.len();
    let snap = |j: usize| req.snapshots.contains(&j);

    let mut y_snaps = Vec::new();
    let mut tracked: Vec<GridPath> = req.track.iter().map(|_| GridPath::zeros(n, grid.len())).collect();
    if req.jacobian || !req.track.is_empty() {
        let mut e = vec![0.0; dim * na];
        for j in 0..grid.len() {
            if snap(j) {
                y_snaps.push(e.clone());
            }
            for (v, out) in req.track.iter().zip(tracked.iter_mut()) {
                let pt = out.at_mut(j);
                for i in 0..n {
                    let row = (path_len * n + i) * na;
                    pt[i] = v[path_len * n + i] + (0..na).map(|a| e[row + a] * v[active[a]]).sum::<f64>();
                }
            }
            if j == grid.steps() {
                break;
            }
            let r = times_operator(&lin.m[j], &e, &active, &pos, path_len);
            for s in j + 1..=path_len {
                for i in 0..n {
                    let row = (s * n + i) * na;
                    for (o, v) in e[row..row + na].iter_mut().zip(&r[i * na..(i + 1) * na]) {
                        *o += v;
                    }
                }
            }
        }
    }

    let mut z_snaps = Vec::new();
    if req.inverse {
        let mut f = vec![0.0; dim * na];
        let mut p = vec![0.0; dim * n];
        for j in 0..grid.len() {
            if snap(j) {
                z_snaps.push(f.clone());
            }
            if j == grid.steps() {
                break;
            }
            // P = Z_j L_{j+1}
            p.iter_mut().for_each(|x| *x = 0.0);
            for s in j + 1..=path_len {
                for i in 0..n {
                    p[(s * n + i) * n + i] = 1.0;
                }
            }
            for (a, &c) in active.iter().enumerate() {
                if c / n > j {
                    let i = c % n;
                    for row in 0..dim {
                        p[row * n + i] += f[row * na + a];
                    }
                }
            }
            let nj = &inverse[j];
            let mut sub = |blk: &[f64], base: usize| {
                for i in 0..n {
                    let a = pos[base + i];
                    for row in 0..dim {
                        let s: f64 = (0..n).map(|r| p[row * n + r] * blk[r * n + i]).sum();
                        f[row * na + a] -= s;
                    }
                }
            };
            for (k, &s) in nj.slots().iter().enumerate() {
                sub(nj.block(k), s * n);
            }
            sub(nj.point(), path_len * n);
        }
    }

    let varsigma_cache = (0..lin.steps()).map(|j| lin.varsigma(j)).collect();
    let full = field.metadata().reads_future_slots;
    let sigma0_cache = (0..lin.steps())
        .map(|j| {
            let path = bundle.state_path(j, full);
            let st = State { grid, t: grid.t(j), step: j, path: &path, value: bundle.x.at(j) };
            lin.sigma0_point(j, &crate::coeffs::drift(field, &st))
        })
        .collect();
    Ok(FlowOperators {
        n,
        path_len,
        dim,
        active,
        snapshots: req.snapshots.clone(),
        scheme: req.scheme,
        y: req.jacobian.then_some(y_snaps),
        z: req.inverse.then_some(z_snaps),
        tracked,
        varsigma_cache,
        sigma0_cache,
        lin,
        inverse,
    })
}

/// Jacobian flow only.
pub fn jacobian_grid(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    snapshots: &[usize],
) -> Result<FlowOperators> {
    let req = FlowRequest { snapshots: snapshots.to_vec(), jacobian: true, ..Default::default() };
    flow_operators(field, bundle, &req)
}

/// Inverse flow only.
pub fn inverse_grid(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    snapshots: &[usize],
    scheme: InverseScheme,
) -> Result<FlowOperators> {
    let req = FlowRequest { snapshots: snapshots.to_vec(), inverse: true, scheme, ..Default::default() };
    flow_operators(field, bundle, &req)
}

impl FlowOperators {
    fn slot_of(&self, j: usize) -> Result<usize> {
        self.snapshots
            .iter()
            .position(|&s| s == j)
            .ok_or_else(|| Error::domain(format!("no operator snapshot at index {j}")))
    }

    fn factor<'a>(&'a self, which: &'a Option<Vec<Vec<f64>>>, j: usize) -> Result<&'a [f64]> {
        let k = self.slot_of(j)?;
        which.as_ref().map(|v| v[k].as_slice()).ok_or_else(|| Error::contract("operator was not computed"))
    }

    fn dense(&self, e: &[f64]) -> DMatrix<f64> {
        let na = self.active.len();
        let mut m = DMatrix::identity(self.dim, self.dim);
        for row in 0..self.dim {
            for (a, &c) in self.active.iter().enumerate() {
                m[(row, c)] += e[row * na + a];
            }
        }
        m
    }

    /// Dense `Y_{t_j}`.
    pub fn y(&self, j: usize) -> Result<DMatrix<f64>> {
        Ok(self.dense(self.factor(&self.y, j)?))
    }

    /// Dense `Z_{t_j}`.
    pub fn z(&self, j: usize) -> Result<DMatrix<f64>> {
        Ok(self.dense(self.factor(&self.z, j)?))
    }

    fn apply(&self, e: &[f64], v: &[f64]) -> Vec<f64> {
        let na = self.active.len();
        let va: Vec<f64> = self.active.iter().map(|&c| v[c]).collect();
        (0..self.dim)
            .map(|row| v[row] + e[row * na..(row + 1) * na].iter().zip(&va).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn apply_y(&self, j: usize, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(self.factor(&self.y, j)?, v))
    }

    pub fn apply_z(&self, j: usize, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(self.factor(&self.z, j)?, v))
    }

    /// `|| A B - I ||` in the max-row-sum norm for `A = I + E S_A`,
    /// `B = I + F S_A`.
    fn product_residual(&self, e: &[f64], f: &[f64]) -> f64 {
        let na = self.active.len();
        let mut worst = 0.0f64;
        for row in 0..self.dim {
            let er = &e[row * na..(row + 1) * na];
            let mut sum = 0.0;
            for b in 0..na {
                let mut v = er[b] + f[row * na + b];
                for (a, &c) in self.active.iter().enumerate() {
                    v += er[a] * f[c * na + b];
                }
                sum += v.abs();
            }
            worst = worst.max(sum);
        }
        worst
    }

    /// `|| Z_j Y_j - I ||` (discretized operator norm, max row sum).
    pub fn inverse_residual(&self, j: usize) -> Result<f64> {
        Ok(self.product_residual(self.factor(&self.z, j)?, self.factor(&self.y, j)?))
    }

    /// `|| Y_j Z_j - I ||`.
    pub fn forward_residual(&self, j: usize) -> Result<f64> {
        Ok(self.product_residual(self.factor(&self.y, j)?, self.factor(&self.z, j)?))
    }

    /// `J_{tau,s} v = Pi_n Y_tau Z_s v` through the stored operators.
    pub fn j_tau_s(&self, tau: usize, s: usize, v: &LiftedVector) -> Result<Vec<f64>> {
        let w = self.apply_z(s, &v.to_flat())?;
        let u = self.apply_y(tau, &w)?;
        Ok(u[self.path_len * self.n..].to_vec())
    }

    /// The same through the factors, without stored operators.
    pub fn j_tau_s_directional(&self, tau: usize, s: usize, v: &LiftedVector) -> Vec<f64> {
        j_tau_s_factors(&self.lin, &self.inverse, tau, s, &v.to_flat())
    }
}

/// `Pi_n Y_tau Z_s v` by applying the step factors to one vector.
pub fn j_tau_s_factors(lin: &Linearization, inverse: &[Gradient], tau: usize, s: usize, v: &[f64]) -> Vec<f64> {
    let (n, pl) = (lin.n, lin.path_len);
    let mut w = v.to_vec();
    for i in (0..s).rev() {
        apply_lifted_step(&inverse[i], i + 1, &mut w, pl, -1.0);
    }
    for i in 0..tau {
        apply_lifted_step(&lin.m[i], i + 1, &mut w, pl, 1.0);
    }
    w[pl * n..].to_vec()
}

/// `G` applied to the lifted vector whose path part is the stopped path
/// `xi` at step `i` (slots after `i` equal `xi(i)`) and whose point part
/// is `xi(i)`.
pub fn apply_stopped(g: &Gradient, xi: &GridPath, i: usize, out: &mut [f64]) {
    let n = g.n();
    let cur = xi.at(i);
    let mut acc = vec![0.0; n];
    crate::coeffs::matvec(g.point(), g.rows(), n, cur, out, false);
    for (k, &s) in g.slots().iter().enumerate() {
        let v = xi.at(s.min(i));
        crate::coeffs::matvec(g.block(k), g.rows(), n, v, &mut acc, false);
        for (o, a) in out.iter_mut().zip(&acc) {
            *o += a;
        }
    }
}

/// Linearized Euler scheme started at `t_s` from `L_s v`; returns
/// `xi(t_j)` for all `j` (zero before `s`). Coefficient derivatives are
/// taken along the accumulated perturbation; finite differences are used
/// when a field has no oracle and `allow_fd` is set.
pub fn propagate_from(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    s: usize,
    v: &[f64],
    allow_fd: bool,
) -> Result<GridPath> {
    let (n, d) = field.dims();
    let g = &bundle.grid;
    let full = field.metadata().reads_future_slots;
    let mut xi = GridPath::zeros(n, g.len());
    if s >= g.len() {
        return Err(Error::domain(format!("start index {s} outside the grid")));
    }
    xi.at_mut(s).copy_from_slice(v);
    let mut r = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for i in s..g.steps() {
        let path = bundle.state_path(i, full);
        let st = State { grid: g, t: g.t(i), step: i, path: &path, value: bundle.x.at(i) };
        let db = bundle.noise.at(i);
        let oracle = field.gradient(Which::Drift, &st);
        if let Some(gb) = oracle {
            apply_stopped(&gb, &xi, i, &mut r);
            r.iter_mut().for_each(|x| *x *= g.dt(i));
            for k in 0..d {
                let gk = field
                    .gradient(Which::Diffusion(k), &st)
                    .ok_or_else(|| Error::Config("drift has an oracle but a diffusion column does not".into()))?;
                apply_stopped(&gk, &xi, i, &mut tmp);
                for (o, t) in r.iter_mut().zip(&tmp) {
                    *o += db[k] * t;
                }
            }
        } else {
            if !allow_fd {
                return Err(Error::Config(format!(
                    "field `{}` has no derivative oracle and finite differences are disabled",
                    field.metadata().name
                )));
            }
            let dpath = xi.stopped(i).into_vec();
            let dv = xi.at(i).to_vec();
            let fb = directional_fd(&component(field, Which::Drift), &st, &dpath, &dv, 0)?;
            for (o, t) in r.iter_mut().zip(&fb) {
                *o = g.dt(i) * t;
            }
            for k in 0..d {
                let fk = directional_fd(&component(field, Which::Diffusion(k)), &st, &dpath, &dv, 0)?;
                for (o, t) in r.iter_mut().zip(&fk) {
                    *o += db[k] * t;
                }
            }
        }
        for c in 0..n {
            let prev = xi.at(i)[c];
            xi.at_mut(i + 1)[c] = prev + r[c];
        }
    }
    Ok(xi)
}

/// `propagate_from` at a grid time `s`, returning the values on `[s, T]`.
pub fn propagate_variation(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    s: f64,
    v: &[f64],
) -> Result<GridPath> {
    let j = bundle.grid.require_index(s)?;
    let xi = propagate_from(field, bundle, j, v, true)?;
    Ok(GridPath::from_fn(xi.dim(), xi.len() - j, |k, out| out.copy_from_slice(xi.at(j + k))))
}

/// Projected Jacobian `Pi_n Y_t L_0 v` along the whole grid.
pub fn projected_jacobian(field: &dyn CoefficientField, bundle: &SolutionBundle, v: &[f64]) -> Result<GridPath> {
    propagate_from(field, bundle, 0, v, true)
}
