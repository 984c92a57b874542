//! Rough Itô formula and master equation checks on the grid, and the
//! quantities entering the Norris-type estimate.
//!
//! Brackets follow `[s, V] = dV s - ds V` here (the order produced by moving
//! the inverse flow through `V`), i.e. `lie_bracket(V, s)`.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{
    component, lift, sigma_matrix, time_derivative_of, vertical_derivative_of, CoefficientField, Frozen, Gradient,
    LiftedVector, State, VectorField, Which,
};
use crate::error::{Error, Result};
use crate::flow::{flow_operators, inverse_factor_from, solve_sde, FlowRequest, InverseScheme, SolutionBundle};
use crate::hormander::lie_bracket;
use crate::malliavin::adjoint_sweep;
use crate::path::{norm2, GridPath};
use crate::rng;
use crate::roughpath::{
    holder_roughness, increments, indicator_integrator, lift as rough_lift, lift_piecewise_linear, strat_from_ito,
    young_integral, BrownianTree, Convention, RoughPath,
};
use crate::timegrid::{TimeGrid, TIME_TOL};

/// `p` of the lift space; `alpha = 1 / (2p) = 0.4`.
pub const DEFAULT_P: f64 = 1.25;
pub const DEFAULT_THETA: f64 = 0.6;
/// Largest lift dimension for which dense operator norms are formed.
pub const DENSE_LIFT_CAP: usize = 2400;
/// Pairs for Hölder norms are taken over at most this many grid points.
pub const HOLDER_POINTS: usize = 256;

fn nan_on_err(r: Result<Vec<f64>>, out: &mut [f64]) {
    match r {
        Ok(v) => out.copy_from_slice(&v),
        Err(_) => out.fill(f64::NAN),
    }
}

fn finite(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("non-finite {what}")))
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    m.chunks(n).map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Point part of `sigma_0 = b - 1/2 sum_k d sigma_k sigma_k` at `x`.
pub fn sigma0_point(field: &dyn CoefficientField, x: &State) -> Result<Vec<f64>> {
    let (n, d) = field.dims();
    let mut out = vec![0.0; n];
    field.eval(Which::Drift, x, &mut out);
    let sig = sigma_matrix(field, x);
    for k in 0..d {
        let ds = vertical_derivative_of(&component(field, Which::Diffusion(k)), x, 0)?;
        let col: Vec<f64> = (0..n).map(|i| sig[i * d + k]).collect();
        for (o, v) in out.iter_mut().zip(mat_vec(&ds, &col)) {
            *o -= 0.5 * v;
        }
    }
    finite(out, "sigma_0")
}

/// `sigma_0` at `(t, x_t)`, lifted.
pub fn sigma0_hat(
    field: &dyn CoefficientField,
    grid: &TimeGrid,
    t: f64,
    path: &GridPath,
    value: &[f64],
) -> Result<LiftedVector> {
    let fr = Frozen::new(grid, t, path, value)?;
    let p = sigma0_point(field, &fr.state(grid))?;
    Ok(lift(&p, t, grid))
}

struct Sigma0Field<'a>(&'a dyn CoefficientField);

impl VectorField for Sigma0Field<'_> {
    fn dim(&self) -> usize {
        self.0.dims().0
    }

    fn eval(&self, x: &State, out: &mut [f64]) {
        nan_on_err(sigma0_point(self.0, x), out)
    }
}

/// `[a, b] = da b - db a` as a vector field.
pub struct BracketField<'a> {
    pub a: &'a dyn VectorField,
    pub b: &'a dyn VectorField,
    pub level: u32,
}

impl VectorField for BracketField<'_> {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn eval(&self, x: &State, out: &mut [f64]) {
        nan_on_err(lie_bracket(self.a, self.b, x, self.level), out)
    }
}

/// `dV w`.
struct DirField<'a> {
    v: &'a dyn VectorField,
    w: &'a dyn VectorField,
    level: u32,
}

impl VectorField for DirField<'_> {
    fn dim(&self) -> usize {
        self.v.dim()
    }

    fn eval(&self, x: &State, out: &mut [f64]) {
        let mut w = vec![0.0; self.w.dim()];
        self.w.eval(x, &mut w);
        let r = vertical_derivative_of(self.v, x, self.level).map(|dv| mat_vec(&dv, &w));
        nan_on_err(r, out)
    }
}

/// `V(t, x) = x(t)`.
pub struct IdentityField(pub usize);

impl VectorField for IdentityField {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &State, out: &mut [f64]) {
        out.copy_from_slice(x.value)
    }

    fn gradient(&self, _x: &State) -> Option<Gradient> {
        let n = self.0;
        Some(Gradient::from_point(n, n, (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()))
    }

    fn time_derivative(&self, _x: &State) -> Option<Vec<f64>> {
        Some(vec![0.0; self.0])
    }
}

/// Choice of the map `V` fed into the checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VChoice {
    /// The present value.
    Identity,
    /// `sigma_k`.
    Sigma(usize),
    /// `[sigma_k, sigma_l]` in the hormander convention.
    Bracket(usize, usize),
}

/// Runs `f` with the vector field selected by `choice`.
pub fn with_v<R>(
    field: &dyn CoefficientField,
    choice: VChoice,
    f: impl FnOnce(&dyn VectorField) -> Result<R>,
) -> Result<R> {
    let (n, d) = field.dims();
    let check = |k: usize| {
        if k < d {
            Ok(())
        } else {
            Err(Error::domain(format!("diffusion index {k} out of range (d = {d})")))
        }
    };
    match choice {
        VChoice::Identity => f(&IdentityField(n)),
        VChoice::Sigma(k) => {
            check(k)?;
            f(&component(field, Which::Diffusion(k)))
        }
        VChoice::Bracket(k, l) => {
            check(k)?;
            check(l)?;
            let a = component(field, Which::Diffusion(k));
            let b = component(field, Which::Diffusion(l));
            f(&BracketField { a: &a, b: &b, level: 0 })
        }
    }
}

/// Grid, per-interval increments and a rough path over the same points.
#[derive(Debug, Clone)]
pub struct RoughNoise {
    pub grid: TimeGrid,
    pub noise: GridPath,
    pub rough: RoughPath,
}

impl RoughNoise {
    /// Level `level` of a Brownian tree with the Stratonovich lift built from
    /// `kappa` (a power of two) finer bridge levels.
    pub fn from_tree(tree: &BrownianTree, level: usize, kappa: usize) -> Result<Self> {
        if !kappa.is_power_of_two() {
            return Err(Error::domain(format!("kappa = {kappa} must be a power of two")));
        }
        let extra = kappa.trailing_zeros() as usize;
        let (fine_grid, fine) = tree.sample(level + extra);
        let rough = strat_from_ito(&rough_lift(&fine, &fine_grid, kappa)?)?;
        let grid = rough.grid().clone();
        let noise = increments(rough.path());
        Ok(RoughNoise { grid, noise, rough })
    }

    /// Piecewise-linear Stratonovich lift of given increments.
    pub fn piecewise_linear(grid: &TimeGrid, noise: &GridPath) -> Result<Self> {
        let d = noise.dim();
        let mut path = GridPath::zeros(d, grid.len());
        for j in 0..grid.steps() {
            for i in 0..d {
                path.at_mut(j + 1)[i] = path.at(j)[i] + noise.at(j)[i];
            }
        }
        let rough = lift_piecewise_linear(&path, grid)?;
        Ok(RoughNoise { grid: grid.clone(), noise: noise.clone(), rough })
    }
}

fn check_rough(bundle: &SolutionBundle, rough: &RoughPath) -> Result<()> {
    let g = &bundle.grid;
    let r = rough.grid();
    let tol = TIME_TOL * g.horizon().max(1.0);
    if r.len() != g.len() || r.points().iter().zip(g.points()).any(|(a, b)| (a - b).abs() > tol) {
        return Err(Error::domain("rough path and solution live on different grids"));
    }
    if rough.dim() != bundle.d() {
        return Err(Error::domain("rough path dimension differs from the noise dimension"));
    }
    Ok(())
}

/// Second level over `[t_j, t_{j+1}]` in the Stratonovich convention.
fn strat_area(rough: &RoughPath, j: usize) -> Vec<f64> {
    let mut a = rough.interval_area(j);
    if rough.convention() == Convention::Ito {
        let d = rough.dim();
        let h = 0.5 * rough.grid().dt(j);
        for k in 0..d {
            a[k * d + k] += h;
        }
    }
    a
}

fn state_path<'a>(bundle: &'a SolutionBundle, j: usize, full: bool) -> Cow<'a, [f64]> {
    if full {
        bundle.state_path(j, true)
    } else {
        Cow::Borrowed(&bundle.x.as_slice()[..(j + 1) * bundle.n()])
    }
}

fn window_indices(grid: &TimeGrid, window: (f64, f64)) -> Result<(usize, usize)> {
    let (a, b) = window;
    if !(a <= b) {
        return Err(Error::domain(format!("window [{a}, {b}] is empty")));
    }
    Ok((grid.require_index(a)?, grid.require_index(b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoReport {
    pub mesh: f64,
    pub p: f64,
    /// `sup_t` of the residual in the lift-space norm.
    pub residual_sup: f64,
    /// Residual norm per grid time in the window.
    pub residuals: Vec<f64>,
    /// `sup_t` of the point residual.
    pub point_sup: f64,
    pub young_sup: f64,
    pub ds_sup: f64,
    pub rough_sup: f64,
}

/// Residual of the rough Itô formula for `V_hat(t, X_t)` on the grid.
///
/// Increments over `[t_j, t_{j+1}]` enter the path part through
/// `1_[t_{j+1}, T]`, so slot `m` of the residual at `t_J` is the point
/// residual at `t_{min(m, J)}` (zero before `tau0`).
pub fn rough_ito_check(
    field: &dyn CoefficientField,
    v: &dyn VectorField,
    bundle: &SolutionBundle,
    rough: &RoughPath,
    window: (f64, f64),
    p: f64,
) -> Result<ItoReport> {
    check_rough(bundle, rough)?;
    let g = &bundle.grid;
    let (j0, ti) = window_indices(g, window)?;
    let (n, d) = field.dims();
    let full = field.metadata().reads_future_slots;
    let sig_fields: Vec<_> = (0..d).map(|k| component(field, Which::Diffusion(k))).collect();
    let s0 = Sigma0Field(field);
    let dirs: Vec<DirField> = sig_fields.iter().map(|s| DirField { v, w: s, level: 1 }).collect();

    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(ti - j0 + 1);
    let mut incs: Vec<[Vec<f64>; 3]> = Vec::with_capacity(ti - j0);
    for j in j0..=ti {
        let path = state_path(bundle, j, full);
        let x = State { grid: g, t: g.t(j), step: j, path: &path, value: bundle.x.at(j) };
        let mut vj = vec![0.0; n];
        v.eval(&x, &mut vj);
        vals.push(finite(vj, "V")?);
        if j == ti {
            break;
        }
        let dt = g.dt(j);
        let db = bundle.noise.at(j);
        let area = strat_area(rough, j);
        let dv = vertical_derivative_of(v, &x, 0)?;
        let mut s0v = vec![0.0; n];
        s0.eval(&x, &mut s0v);
        let mut ds = time_derivative_of(v, &x)?.value;
        for (o, w) in ds.iter_mut().zip(mat_vec(&dv, &s0v)) {
            *o = (*o + w) * dt;
        }
        let mut rough_part = vec![0.0; n];
        let sig = sigma_matrix(field, &x);
        for k in 0..d {
            let col: Vec<f64> = (0..n).map(|i| sig[i * d + k]).collect();
            for (o, w) in rough_part.iter_mut().zip(mat_vec(&dv, &col)) {
                *o += w * db[k];
            }
            let du = vertical_derivative_of(&dirs[k], &x, 0)?;
            for l in 0..d {
                let coll: Vec<f64> = (0..n).map(|i| sig[i * d + l]).collect();
                for (o, w) in rough_part.iter_mut().zip(mat_vec(&du, &coll)) {
                    *o += w * area[l * d + k];
                }
            }
        }
        incs.push([finite(ds, "ds term")?, finite(rough_part, "rough term")?, Vec::new()]);
    }

    // e(J) = V_J - V_{j0} - sum_{j < J} inc_j, with running term sums
    let len = ti - j0 + 1;
    let mut e = vec![vec![0.0; n]; len];
    let mut acc_ds = vec![0.0; n];
    let mut acc_rough = vec![0.0; n];
    let (mut ds_sup, mut rough_sup) = (0.0f64, 0.0f64);
    for k in 1..len {
        for i in 0..n {
            acc_ds[i] += incs[k - 1][0][i];
            acc_rough[i] += incs[k - 1][1][i];
        }
        ds_sup = ds_sup.max(norm2(&acc_ds));
        rough_sup = rough_sup.max(norm2(&acc_rough));
        for i in 0..n {
            e[k][i] = vals[k][i] - vals[0][i] - acc_ds[i] - acc_rough[i];
        }
    }

    let w = g.weights();
    let tail: Vec<f64> = {
        let mut t = vec![0.0; g.len() + 1];
        for m in (0..g.len()).rev() {
            t[m] = t[m + 1] + w[m];
        }
        t
    };
    let mut residuals = Vec::with_capacity(len);
    let (mut pre_res, mut pre_young) = (0.0f64, 0.0f64);
    let (mut point_sup, mut young_sup) = (0.0f64, 0.0f64);
    for k in 0..len {
        let big_j = j0 + k;
        let ek = norm2(&e[k]);
        let lp = (pre_res + tail[big_j] * ek.powf(p)).powf(1.0 / p);
        residuals.push((lp * lp + ek * ek).sqrt());
        point_sup = point_sup.max(ek);
        young_sup = young_sup.max(pre_young.powf(1.0 / p));
        pre_res += w[big_j] * ek.powf(p);
        pre_young += w[big_j] * norm2(&vals[k]).powf(p);
    }
    Ok(ItoReport {
        mesh: g.mesh(),
        p,
        residual_sup: residuals.iter().copied().fold(0.0, f64::max),
        residuals,
        point_sup,
        young_sup,
        ds_sup,
        rough_sup,
    })
}

/// Young integral of `V(s, X_s)` against `s -> 1_[s,T]` from `tau0` by
/// left-point sums, as an `n x (N+1)` grid function per time.
pub fn young_indicator_term(values: &GridPath, grid: &TimeGrid, window: (f64, f64)) -> Result<GridPath> {
    if grid.len() > 1025 {
        return Err(Error::Resource("indicator Young sums are limited to 1024 steps".into()));
    }
    Ok(young_integral(values, &indicator_integrator(grid), grid, window)?.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermMagnitudes {
    pub initial: f64,
    pub young: f64,
    pub drift_bracket: f64,
    pub rough_bracket: f64,
}

/// Scalar decomposition `I = I_0 + int A dB + int C ds + int D dphi` of
/// `(z, J_{tau,t} V_hat(t, X_t))`, one entry per grid time in the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NorrisDecomposition {
    pub start: usize,
    pub i: Vec<f64>,
    /// `d` entries per time.
    pub a: Vec<Vec<f64>>,
    /// `d x d` per time, `[k * d + l]` is the derivative of `A_k` along `B^l`.
    pub a_prime: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    /// Coefficients of the functional `D_s` on grid functions, per time.
    pub d: Vec<Vec<f64>>,
}

impl NorrisDecomposition {
    pub fn scaled(&self, c: f64) -> Self {
        let sv = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|x| c * x).collect()).collect();
        NorrisDecomposition {
            start: self.start,
            i: self.i.iter().map(|x| c * x).collect(),
            a: sv(&self.a),
            a_prime: sv(&self.a_prime),
            c: self.c.iter().map(|x| c * x).collect(),
            d: sv(&self.d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterEqReport {
    pub mesh: f64,
    pub residual_sup: f64,
    /// Residual norm per grid time in the window.
    pub residuals: Vec<f64>,
    pub terms: TermMagnitudes,
    pub refinement_rate: Option<f64>,
    pub decomposition: Option<NorrisDecomposition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterOptions {
    pub scheme: InverseScheme,
    /// Unit vector `z` for the scalar decomposition.
    pub direction: Option<Vec<f64>>,
}

impl Default for MasterOptions {
    fn default() -> Self {
        MasterOptions { scheme: InverseScheme::Euler, direction: None }
    }
}

fn step_gradients(field: &dyn CoefficientField, x: &State) -> Result<(Gradient, Vec<Gradient>)> {
    let d = field.dims().1;
    let get = |w: Which| {
        field
            .gradient(w, x)
            .ok_or_else(|| Error::Config(format!("field `{}` has no derivative oracle", field.metadata().name)))
    };
    let db = get(Which::Drift)?;
    let ds = (0..d).map(|k| get(Which::Diffusion(k))).collect::<Result<_>>()?;
    Ok((db, ds))
}

fn mat_mul_sub(out: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    for r in 0..n {
        for c in 0..n {
            let s: f64 = (0..n).map(|k| a[r * n + k] * b[k * n + c]).sum();
            out[r * n + c] -= s;
        }
    }
}

/// Residual of the master equation for `V` on `[tau0, tau]`.
///
/// `J_{tau,t} = Pi_n Y_tau Z_t` with `Pi_n Y_tau` from the backward sweep and
/// `Z` from the selected inverse scheme. Writing `K_j = J_{tau,t_j} L_{j+1}`
/// and `B_j` for the slot-`j` block, the left side is `(K_J + B_J) V_J`, the
/// Young term is `-sum B_j V_j` and the remaining integrals are rough sums
/// `sum K_j inc_j`.
pub fn master_equation_residual(
    field: &dyn CoefficientField,
    v: &dyn VectorField,
    bundle: &SolutionBundle,
    rough: &RoughPath,
    window: (f64, f64),
    opts: &MasterOptions,
) -> Result<MasterEqReport> {
    check_rough(bundle, rough)?;
    let g = &bundle.grid;
    let (j0, ti) = window_indices(g, window)?;
    let (n, d) = field.dims();
    let nn = n * n;
    let full = field.metadata().reads_future_slots;
    if let Some(z) = &opts.direction {
        if z.len() != n || (norm2(z) - 1.0).abs() > 1e-9 {
            return Err(Error::domain("decomposition direction must be a unit vector in R^n"));
        }
        if g.len() > 1025 {
            return Err(Error::Resource("the scalar decomposition is limited to 1024 steps".into()));
        }
    }

    let (w_slots, w_point) = adjoint_sweep(field, bundle, ti, |_, _, _, _| Ok(()))?;
    let mut w = w_slots;
    let mut wp = w_point;
    let mut suffix = vec![0.0; nn];
    for q in 1..g.len() {
        for k in 0..nn {
            suffix[k] += w[q * nn + k];
        }
    }

    let sig_fields: Vec<_> = (0..d).map(|k| component(field, Which::Diffusion(k))).collect();
    let s0 = Sigma0Field(field);
    let inner: Vec<BracketField> = sig_fields.iter().map(|s| BracketField { a: v, b: s, level: 1 }).collect();

    let len = ti - j0 + 1;
    let mut kb: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(len);
    let mut vals = Vec::with_capacity(len);
    let mut drift_inc = Vec::with_capacity(len);
    let mut rough_inc = Vec::with_capacity(len);
    let mut dec = opts.direction.as_ref().map(|_| NorrisDecomposition {
        start: j0,
        i: Vec::new(),
        a: Vec::new(),
        a_prime: Vec::new(),
        c: Vec::new(),
        d: Vec::new(),
    });
    for j in 0..=ti {
        let path = state_path(bundle, j, full);
        let x = State { grid: g, t: g.t(j), step: j, path: &path, value: bundle.x.at(j) };
        let kj: Vec<f64> = (0..nn).map(|k| suffix[k] + wp[k]).collect();
        if j >= j0 {
            let bj = w[j * nn..(j + 1) * nn].to_vec();
            let mut vj = vec![0.0; n];
            v.eval(&x, &mut vj);
            let vj = finite(vj, "V")?;
            if j < ti {
                let dt = g.dt(j);
                let db = bundle.noise.at(j);
                let area = strat_area(rough, j);
                let mut dr = time_derivative_of(v, &x)?.value;
                let b0 = lie_bracket(v, &s0, &x, 0)?;
                for (o, b) in dr.iter_mut().zip(&b0) {
                    *o += b;
                }
                let mut brackets = Vec::with_capacity(d);
                let mut seconds = Vec::with_capacity(d * d);
                let mut ro = vec![0.0; n];
                for k in 0..d {
                    let bk = lie_bracket(v, &sig_fields[k], &x, 0)?;
                    for (o, b) in ro.iter_mut().zip(&bk) {
                        *o += b * db[k];
                    }
                    for l in 0..d {
                        let s = lie_bracket(&inner[k], &sig_fields[l], &x, 0)?;
                        for (o, b) in ro.iter_mut().zip(&s) {
                            *o += b * area[l * d + k];
                        }
                        seconds.push(s);
                    }
                    brackets.push(bk);
                }
                if let (Some(dec), Some(z)) = (dec.as_mut(), opts.direction.as_ref()) {
                    let zk: Vec<f64> = (0..n).map(|c| (0..n).map(|r| z[r] * kj[r * n + c]).sum()).collect();
                    let dot = |u: &[f64]| zk.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
                    dec.a.push(brackets.iter().map(|b| dot(b)).collect());
                    dec.a_prime.push(seconds.iter().map(|s| dot(s)).collect());
                    dec.c.push(dot(&dr));
                }
                drift_inc.push(finite(dr.iter().map(|x| x * dt).collect(), "drift bracket")?);
                rough_inc.push(finite(ro, "rough bracket")?);
            }
            if let (Some(dec), Some(z)) = (dec.as_mut(), opts.direction.as_ref()) {
                let lhs: Vec<f64> =
                    (0..n).map(|r| (0..n).map(|c| (kj[r * n + c] + bj[r * n + c]) * vj[c]).sum()).collect();
                dec.i.push(z.iter().zip(&lhs).map(|(a, b)| a * b).sum());
                let coef = (0..g.len())
                    .map(|q| {
                        let blk = &w[q * nn..(q + 1) * nn];
                        (0..n).map(|r| z[r] * (0..n).map(|c| blk[r * n + c] * vj[c]).sum::<f64>()).sum()
                    })
                    .collect();
                dec.d.push(coef);
            }
            kb.push((kj.clone(), bj));
            vals.push(vj);
        }
        if j == ti {
            break;
        }
        // W_{j+1} = W_j - (W_j L_{j+1}) N_j
        let (gb, gs) = step_gradients(field, &x)?;
        let mut parts: Vec<(f64, &Gradient)> = vec![(g.dt(j), &gb)];
        for (k, gk) in gs.iter().enumerate() {
            parts.push((bundle.noise.at(j)[k], gk));
        }
        let m = Gradient::combine(&parts);
        let nf = inverse_factor_from(n, j, &gb, &gs, &m, g.dt(j), bundle.noise.at(j), opts.scheme);
        for (k, &q) in nf.slots().iter().enumerate() {
            let blk = nf.block(k);
            mat_mul_sub(&mut w[q * nn..(q + 1) * nn], &kj, blk, n);
            if q > j {
                mat_mul_sub(&mut suffix, &kj, blk, n);
            }
        }
        mat_mul_sub(&mut wp, &kj, nf.point(), n);
        for k in 0..nn {
            suffix[k] -= w[(j + 1) * nn + k];
        }
    }

    let apply = |m: &[f64], u: &[f64]| mat_vec(m, u);
    let lhs = |k: usize| -> Vec<f64> {
        let (kk, bb) = &kb[k];
        let s: Vec<f64> = kk.iter().zip(bb).map(|(a, b)| a + b).collect();
        apply(&s, &vals[k])
    };
    let l0 = lhs(0);
    let mut residuals = vec![0.0];
    let mut young = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut rough_acc = vec![0.0; n];
    let mut terms = TermMagnitudes { initial: norm2(&l0), young: 0.0, drift_bracket: 0.0, rough_bracket: 0.0 };
    for k in 1..len {
        let (kk, bb) = &kb[k - 1];
        for (o, x) in young.iter_mut().zip(apply(bb, &vals[k - 1])) {
            *o -= x;
        }
        for (o, x) in drift.iter_mut().zip(apply(kk, &drift_inc[k - 1])) {
            *o += x;
        }
        for (o, x) in rough_acc.iter_mut().zip(apply(kk, &rough_inc[k - 1])) {
            *o += x;
        }
        terms.young = terms.young.max(norm2(&young));
        terms.drift_bracket = terms.drift_bracket.max(norm2(&drift));
        terms.rough_bracket = terms.rough_bracket.max(norm2(&rough_acc));
        let lk = lhs(k);
        let r: Vec<f64> = (0..n).map(|i| lk[i] - l0[i] - young[i] - drift[i] - rough_acc[i]).collect();
        residuals.push(norm2(&r));
    }
    Ok(MasterEqReport {
        mesh: g.mesh(),
        residual_sup: residuals.iter().copied().fold(0.0, f64::max),
        residuals,
        terms,
        refinement_rate: None,
        decomposition: dec,
    })
}

/// Least-squares slope of `-log2(residual)` against `log2(N)`.
pub fn refinement_rate(meshes: &[usize], residuals: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = meshes
        .iter()
        .zip(residuals)
        .filter(|(_, &r)| r > 0.0 && r.is_finite())
        .map(|(&m, &r)| ((m as f64).log2(), r.log2()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    Some(-sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Ito,
    Master,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub check: Check,
    pub steps: Vec<usize>,
    /// Mean over seeds of the residual sup, per mesh.
    pub residuals: Vec<f64>,
    pub per_seed: Vec<Vec<f64>>,
    pub rate: Option<f64>,
}

/// Brownian tree of seed `seed` over `base`, as used by the refinement studies.
pub fn study_tree(base: &TimeGrid, d: usize, seed: u64) -> BrownianTree {
    BrownianTree::new(base.clone(), d, seed, rng::stream_id(&[rng::tag::BROWNIAN, 0]))
}

/// Residual sups over `levels + 1` nested meshes from `base`, averaged over
/// seeds, with the fitted decay rate.
#[allow(clippy::too_many_arguments)]
pub fn refinement_study(
    field: &dyn CoefficientField,
    choice: VChoice,
    check: Check,
    x0: &[f64],
    base: &TimeGrid,
    levels: usize,
    kappa: usize,
    seeds: &[u64],
    window: (f64, f64),
) -> Result<RefinementStudy> {
    let d = field.dims().1;
    let per_seed: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let tree = study_tree(base, d, seed);
            (0..=levels)
                .map(|lv| {
                    let rn = RoughNoise::from_tree(&tree, lv, kappa)?;
                    let b = solve_sde(field, x0, &rn.noise, &rn.grid)?;
                    with_v(field, choice, |v| match check {
                        Check::Ito => Ok(rough_ito_check(field, v, &b, &rn.rough, window, DEFAULT_P)?.residual_sup),
                        Check::Master => {
                            Ok(master_equation_residual(field, v, &b, &rn.rough, window, &MasterOptions::default())?
                                .residual_sup)
                        }
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let steps: Vec<usize> = (0..=levels).map(|l| base.steps() << l).collect();
    let residuals: Vec<f64> =
        (0..=levels).map(|l| per_seed.iter().map(|r| r[l]).sum::<f64>() / seeds.len().max(1) as f64).collect();
    Ok(RefinementStudy { check, rate: refinement_rate(&steps, &residuals), steps, residuals, per_seed })
}

fn subsample(i0: usize, i1: usize, max: usize) -> Vec<usize> {
    let count = i1 - i0 + 1;
    if count <= max {
        return (i0..=i1).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|k| i0 + k * (count - 1) / (max - 1)).collect();
    out.dedup();
    out
}

fn holder_pairs(idx: &[usize], times: &[f64], alpha: f64, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
    let mut best = 0.0f64;
    for (a, &s) in idx.iter().enumerate() {
        for &t in &idx[a + 1..] {
            let h = times[t] - times[s];
            if h > 0.0 {
                best = best.max(f(s, t) / h.powf(alpha));
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NorrisQuantities {
    pub norm_i_sup: f64,
    pub norm_a_sup: f64,
    pub controlled_norm_a: f64,
    pub norm_c: f64,
    pub norm_d: f64,
    pub norm_phi_2alpha: f64,
    pub l_theta: f64,
    pub rough_norm: f64,
    /// `|I_tau0| + 1/L_theta + ||B||_alpha + ||(A, A')|| + ||C|| + ||D|| + ||phi||`.
    pub script_r_bar: f64,
    /// `script_R` of the underlying solution when computed alongside.
    pub script_r: Option<f64>,
}

fn dual_norm(c: &[f64], weights: &[f64], p: f64) -> f64 {
    let q = p / (p - 1.0);
    let s: f64 = c.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(x, &w)| w.powf(1.0 - q) * x.abs().powf(q)).sum();
    s.powf(1.0 / q)
}

/// Norms of a scalar decomposition over its window. Hölder norms use at most
/// `HOLDER_POINTS` grid points.
pub fn norris_quantities(
    dec: &NorrisDecomposition,
    rough: &RoughPath,
    theta: f64,
    p: f64,
    seed: u64,
) -> Result<NorrisQuantities> {
    let g = rough.grid();
    let alpha = 1.0 / (2.0 * p);
    let j0 = dec.start;
    let ti = j0 + dec.i.len() - 1;
    if dec.a.len() + 1 != dec.i.len() {
        return Err(Error::domain("decomposition arrays have inconsistent lengths"));
    }
    let times = g.points();
    let d = rough.dim();
    let last = ti.saturating_sub(1).max(j0);
    let idx = subsample(j0, last, HOLDER_POINTS);
    let k = |j: usize| j - j0;
    let (a0, ap0) = if dec.a.is_empty() { (0.0, 0.0) } else { (norm2(&dec.a[0]), norm2(&dec.a_prime[0])) };
    let ap_holder = if dec.a.is_empty() {
        0.0
    } else {
        holder_pairs(&idx, times, alpha, |s, t| {
            let diff: Vec<f64> = dec.a_prime[k(t)].iter().zip(&dec.a_prime[k(s)]).map(|(a, b)| a - b).collect();
            norm2(&diff)
        })
    };
    let ra = if dec.a.is_empty() {
        0.0
    } else {
        holder_pairs(&idx, times, 2.0 * alpha, |s, t| {
            let db = rough.increment(s, t);
            let r: Vec<f64> = (0..d)
                .map(|kk| {
                    let lin: f64 = (0..d).map(|l| dec.a_prime[k(s)][kk * d + l] * db[l]).sum();
                    dec.a[k(t)][kk] - dec.a[k(s)][kk] - lin
                })
                .collect();
            norm2(&r)
        })
    };
    let c_sup = dec.c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let c_holder = holder_pairs(&idx, times, alpha, |s, t| (dec.c[k(t)] - dec.c[k(s)]).abs());
    let w = g.weights();
    let d_sup = dec.d.iter().fold(0.0f64, |m, c| m.max(dual_norm(c, w, p)));
    let d_holder = holder_pairs(&idx, times, alpha, |s, t| {
        let diff: Vec<f64> = dec.d[k(t)].iter().zip(&dec.d[k(s)]).map(|(a, b)| a - b).collect();
        dual_norm(&diff, w, p)
    });
    let full_idx = subsample(j0, ti, HOLDER_POINTS);
    let phi = holder_pairs(&full_idx, times, 2.0 * alpha, |s, t| w[s..t].iter().sum::<f64>().powf(1.0 / p));
    let l_theta =
        holder_roughness(rough.path(), g, theta, alpha, 16, &crate::roughpath::default_scales(g), seed)?.l_theta;
    let rough_norm = rough.homogeneous_norm(alpha, j0, ti);
    let controlled = a0 + ap0 + ap_holder + ra;
    let norm_c = c_sup + c_holder;
    let norm_d = d_sup + d_holder;
    let inv_l = if l_theta > 0.0 { 1.0 / l_theta } else { f64::INFINITY };
    Ok(NorrisQuantities {
        norm_i_sup: dec.i.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        norm_a_sup: dec.a.iter().fold(0.0f64, |m, a| m.max(norm2(a))),
        controlled_norm_a: controlled,
        norm_c,
        norm_d,
        norm_phi_2alpha: phi,
        l_theta,
        rough_norm,
        script_r_bar: dec.i[0].abs() + inv_l + rough_norm + controlled + norm_c + norm_d + phi,
        script_r: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptROptions {
    pub p: f64,
    pub theta: f64,
    pub include_l_theta: bool,
    /// Snapshot times for the operator norms of `Z`.
    pub snapshots: usize,
    pub scheme: InverseScheme,
    pub seed: u64,
}

impl Default for ScriptROptions {
    fn default() -> Self {
        ScriptROptions {
            p: DEFAULT_P,
            theta: DEFAULT_THETA,
            include_l_theta: true,
            snapshots: 17,
            scheme: InverseScheme::Euler,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptR {
    pub total: f64,
    pub x0: f64,
    pub inv_l_theta: f64,
    pub y_tau: f64,
    pub rough_norm: f64,
    pub x_alpha: f64,
    pub z_alpha: f64,
    pub rx_2alpha: f64,
    pub rz_2alpha: f64,
}

fn inf_norm(m: &nalgebra::DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|r| m.row(r).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `script_R = 2 + |x0| + 1/L_theta + ||Y_tau|| + ||(B, BB)||_alpha + ||X||_alpha
/// + ||Z||_alpha + ||R^X||_{2 alpha} + ||R^Z||_{2 alpha}` with operator norms
/// taken as maximum row sums on the lift coordinates, the `Z` norms over
/// `snapshots` equally spaced times, and the path norms over at most
/// `HOLDER_POINTS` grid points.
pub fn script_r(
    field: &dyn CoefficientField,
    bundle: &SolutionBundle,
    rough: &RoughPath,
    window: (f64, f64),
    opts: &ScriptROptions,
) -> Result<ScriptR> {
    check_rough(bundle, rough)?;
    let g = &bundle.grid;
    let (j0, ti) = window_indices(g, window)?;
    let dim = bundle.lift_dim();
    if dim > DENSE_LIFT_CAP {
        return Err(Error::Resource(format!("lift dimension {dim} exceeds the dense cap {DENSE_LIFT_CAP}")));
    }
    let alpha = 1.0 / (2.0 * opts.p);
    let n = bundle.n();
    let d = bundle.d();
    let times = g.points();
    let nsteps = g.steps();
    let mut snaps = subsample(0, nsteps, opts.snapshots.max(2));
    let win_snaps = subsample(j0, ti, opts.snapshots.max(2));
    snaps.extend(&win_snaps);
    snaps.push(ti);
    snaps.sort_unstable();
    snaps.dedup();
    let req = FlowRequest {
        snapshots: snaps.clone(),
        jacobian: true,
        inverse: true,
        scheme: opts.scheme,
        allow_fd: true,
        track: Vec::new(),
    };
    let ops = flow_operators(field, bundle, &req)?;
    let y_tau = inf_norm(&ops.y(ti)?);
    let zs: Vec<nalgebra::DMatrix<f64>> = snaps.iter().map(|&j| ops.z(j)).collect::<Result<_>>()?;
    let pos = |j: usize| snaps.binary_search(&j).unwrap();
    let z_alpha = holder_pairs(&snaps, times, alpha, |s, t| inf_norm(&(&zs[pos(t)] - &zs[pos(s)])));
    let path_len = g.len();
    let rz = holder_pairs(&win_snaps, times, 2.0 * alpha, |s, t| {
        let zs_ = &zs[pos(s)];
        let mut r = &zs[pos(t)] - zs_;
        let path = bundle.state_path(s, field.metadata().reads_future_slots);
        let x = State { grid: g, t: g.t(s), step: s, path: &path, value: bundle.x.at(s) };
        let db = rough.increment(s, t);
        // Z_s L_s
        let mut zl = nalgebra::DMatrix::<f64>::zeros(zs_.nrows(), n);
        for i in 0..n {
            let mut col = zs_.column(path_len * n + i).into_owned();
            for q in s..path_len {
                col += zs_.column(q * n + i);
            }
            zl.set_column(i, &col);
        }
        for k in 0..d {
            if let Ok(gk) = crate::coeffs::gradient_or_fd(field, Which::Diffusion(k), &x, true) {
                let dense = nalgebra::DMatrix::from_row_slice(n, dim, &gk.to_dense(path_len));
                r += (&zl * dense) * db[k];
            }
        }
        inf_norm(&r)
    });

    let idx_all = subsample(0, nsteps, HOLDER_POINTS);
    let w = g.weights();
    let lifted_diff = |s: usize, t: usize, shift: &[f64]| -> f64 {
        let mut acc = 0.0;
        let mut buf = vec![0.0; n];
        for u in s..path_len {
            let src = bundle.x.at(u.min(t));
            for i in 0..n {
                buf[i] = src[i] - bundle.x.at(s)[i] - shift[i];
            }
            acc += w[u] * norm2(&buf).powf(opts.p);
        }
        let point: Vec<f64> = (0..n).map(|i| bundle.x.at(t)[i] - bundle.x.at(s)[i] - shift[i]).collect();
        let lp = acc.powf(1.0 / opts.p);
        (lp * lp + norm2(&point).powi(2)).sqrt()
    };
    let zero = vec![0.0; n];
    let x_alpha = holder_pairs(&idx_all, times, alpha, |s, t| lifted_diff(s, t, &zero));
    let idx_win = subsample(j0, ti, HOLDER_POINTS);
    let rx = holder_pairs(&idx_win, times, 2.0 * alpha, |s, t| {
        let path = bundle.state_path(s, field.metadata().reads_future_slots);
        let x = State { grid: g, t: g.t(s), step: s, path: &path, value: bundle.x.at(s) };
        let sig = sigma_matrix(field, &x);
        let db = rough.increment(s, t);
        let shift: Vec<f64> = (0..n).map(|i| (0..d).map(|k| sig[i * d + k] * db[k]).sum()).collect();
        lifted_diff(s, t, &shift)
    });
    let rough_norm = rough.homogeneous_norm(alpha, 0, nsteps);
    let inv_l_theta = if opts.include_l_theta {
        let l =
            holder_roughness(rough.path(), g, opts.theta, alpha, 16, &crate::roughpath::default_scales(g), opts.seed)?
                .l_theta;
        if l > 0.0 {
            1.0 / l
        } else {
            f64::INFINITY
        }
    } else {
        0.0
    };
    let x0 = norm2(bundle.x.at(0));
    let total = 2.0 + x0 + inv_l_theta + y_tau + rough_norm + x_alpha + z_alpha + rx + rz;
    Ok(ScriptR { total, x0, inv_l_theta, y_tau, rough_norm, x_alpha, z_alpha, rx_2alpha: rx, rz_2alpha: rz })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NorrisSample {
    pub seed: u64,
    pub quantities: NorrisQuantities,
}

/// One draw of the scalar decomposition along `z` on `grid`, with Stratonovich
/// tree noise (`kappa = 16`) and, when `with_script_r`, the value of `script_R`.
#[allow(clippy::too_many_arguments)]
pub fn norris_sample(
    field: &dyn CoefficientField,
    choice: VChoice,
    x0: &[f64],
    grid: &TimeGrid,
    seed: u64,
    z: &[f64],
    window: (f64, f64),
    with_script_r: bool,
) -> Result<NorrisSample> {
    let tree = study_tree(grid, field.dims().1, seed);
    let rn = RoughNoise::from_tree(&tree, 0, 16)?;
    let b = solve_sde(field, x0, &rn.noise, &rn.grid)?;
    let opts = MasterOptions { direction: Some(z.to_vec()), ..Default::default() };
    let rep = with_v(field, choice, |v| master_equation_residual(field, v, &b, &rn.rough, window, &opts))?;
    let dec = rep.decomposition.expect("direction was given");
    let mut quantities = norris_quantities(&dec, &rn.rough, DEFAULT_THETA, DEFAULT_P, seed)?;
    if with_script_r {
        let r = script_r(field, &b, &rn.rough, window, &ScriptROptions { seed, ..Default::default() })?;
        quantities.script_r = Some(r.total);
    }
    Ok(NorrisSample { seed, quantities })
}

/// Median of `||A||_inf` within each decile of `||I||_inf`.
pub fn decile_medians(samples: &[NorrisSample]) -> Vec<f64> {
    let mut pairs: Vec<(f64, f64)> =
        samples.iter().map(|s| (s.quantities.norm_i_sup, s.quantities.norm_a_sup)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = pairs.len();
    (0..10)
        .filter_map(|k| {
            let mut a: Vec<f64> = pairs[k * m / 10..(k + 1) * m / 10].iter().map(|p| p.1).collect();
            if a.is_empty() {
                return None;
            }
            a.sort_by(f64::total_cmp);
            let h = a.len() / 2;
            Some(if a.len() % 2 == 1 { a[h] } else { 0.5 * (a[h - 1] + a[h]) })
        })
        .collect()
}

#[cfg(test)]
mod tests;
