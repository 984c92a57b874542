//! Non-anticipative coefficient fields on the grid and their derivatives.
//!
//! A field is evaluated at a [`State`]: a time `t`, the stopped path on the
//! whole grid (slot `j` holds `x(t_j ^ t)`) and the current value. Linear
//! functionals on the discretized lift space are [`Gradient`]s; column
//! `j * n + i` is path slot `j`, component `i`, and the last `n` columns are
//! the point part.

pub mod families;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::GridPath;
use crate::timegrid::{TimeGrid, TIME_TOL};

pub use families::*;

/// Relative finite-difference step.
pub const FD_REL: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct State<'a> {
    pub grid: &'a TimeGrid,
    pub t: f64,
    /// Index of the last grid point not after `t`.
    pub step: usize,
    pub path: &'a [f64],
    pub value: &'a [f64],
}

impl<'a> State<'a> {
    pub fn n(&self) -> usize {
        self.value.len()
    }

    pub fn slot(&self, j: usize) -> &'a [f64] {
        let n = self.n();
        &self.path[j * n..(j + 1) * n]
    }

    pub fn with_time(&self, t: f64) -> State<'a> {
        State { t, step: self.grid.floor_index(t), ..*self }
    }
}

/// An owned stopped state, built from a full path and a time.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub t: f64,
    pub step: usize,
    pub path: Vec<f64>,
    pub value: Vec<f64>,
}

impl Frozen {
    /// Stops `path` at `t`: slots after `t` are set to `value`.
    pub fn new(grid: &TimeGrid, t: f64, path: &GridPath, value: &[f64]) -> Result<Self> {
        let tol = TIME_TOL * grid.horizon().max(1.0);
        if !(t >= -tol && t <= grid.horizon() + tol) {
            return Err(Error::domain(format!("time {t} lies outside [0, {}]", grid.horizon())));
        }
        if path.len() != grid.len() || path.dim() != value.len() {
            return Err(Error::domain("path does not match the grid or the state dimension"));
        }
        let step = grid.floor_index(t);
        let n = value.len();
        let mut buf = path.as_slice().to_vec();
        for j in step + 1..grid.len() {
            buf[j * n..(j + 1) * n].copy_from_slice(value);
        }
        Ok(Frozen { t, step, path: buf, value: value.to_vec() })
    }

    /// State of the path stopped at grid index `j`, with `value = x(t_j)`.
    pub fn at_index(grid: &TimeGrid, path: &GridPath, j: usize) -> Self {
        let value = path.at(j).to_vec();
        let n = value.len();
        let mut buf = path.as_slice().to_vec();
        for k in j + 1..grid.len() {
            buf[k * n..(k + 1) * n].copy_from_slice(&value);
        }
        Frozen { t: grid.t(j), step: j, path: buf, value }
    }

    pub fn state<'a>(&'a self, grid: &'a TimeGrid) -> State<'a> {
        State { grid, t: self.t, step: self.step, path: &self.path, value: &self.value }
    }
}

/// Sparse linear map from the discretized lift space to `R^rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    rows: usize,
    n: usize,
    point: Vec<f64>,
    slots: Vec<usize>,
    blocks: Vec<f64>,
}

impl Gradient {
    pub fn zeros(rows: usize, n: usize) -> Self {
        Gradient { rows, n, point: vec![0.0; rows * n], slots: Vec::new(), blocks: Vec::new() }
    }

    pub fn from_point(rows: usize, n: usize, point: Vec<f64>) -> Self {
        assert_eq!(point.len(), rows * n);
        Gradient { rows, n, point, slots: Vec::new(), blocks: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `rows x n` block acting on the point part.
    pub fn point(&self) -> &[f64] {
        &self.point
    }

    pub fn point_mut(&mut self) -> &mut [f64] {
        &mut self.point
    }

    /// Path slots with a (possibly zero) block, ascending.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn block(&self, k: usize) -> &[f64] {
        let b = self.rows * self.n;
        &self.blocks[k * b..(k + 1) * b]
    }

    /// Block for `slot`, inserted as zeros if absent.
    pub fn slot_mut(&mut self, slot: usize) -> &mut [f64] {
        let b = self.rows * self.n;
        let k = match self.slots.binary_search(&slot) {
            Ok(k) => k,
            Err(k) => {
                self.slots.insert(k, slot);
                self.blocks.splice(k * b..k * b, std::iter::repeat_n(0.0, b));
                k
            }
        };
        &mut self.blocks[k * b..(k + 1) * b]
    }

    /// `G (path, value)`.
    pub fn apply(&self, path: &[f64], value: &[f64], out: &mut [f64]) {
        let n = self.n;
        matvec(&self.point, self.rows, n, value, out, false);
        for (k, &s) in self.slots.iter().enumerate() {
            matvec(self.block(k), self.rows, n, &path[s * n..(s + 1) * n], out, true);
        }
    }

    /// `G` applied to a flat lift-space vector with `path_len` slots.
    pub fn apply_flat(&self, v: &[f64], path_len: usize, out: &mut [f64]) {
        let n = self.n;
        self.apply(&v[..path_len * n], &v[path_len * n..], out)
    }

    /// `G L_from` as a `rows x n` matrix, where `L_from u` is the lift
    /// `(1_{[t_from, T]} u, u)`.
    pub fn apply_lift(&self, from: usize) -> Vec<f64> {
        let mut out = self.point.clone();
        for (k, &s) in self.slots.iter().enumerate() {
            if s >= from {
                for (o, b) in out.iter_mut().zip(self.block(k)) {
                    *o += b;
                }
            }
        }
        out
    }

    /// `sum c_i G_i` over gradients of equal shape.
    pub fn combine(parts: &[(f64, &Gradient)]) -> Gradient {
        let (rows, n) = (parts[0].1.rows, parts[0].1.n);
        let mut out = Gradient::zeros(rows, n);
        let mut slots: Vec<usize> = parts.iter().flat_map(|(_, g)| g.slots.iter().copied()).collect();
        slots.sort_unstable();
        slots.dedup();
        let b = rows * n;
        out.blocks = vec![0.0; slots.len() * b];
        for (c, g) in parts {
            assert!(g.rows == rows && g.n == n, "gradient shapes differ");
            for (o, v) in out.point.iter_mut().zip(&g.point) {
                *o += c * v;
            }
            for (k, s) in g.slots.iter().enumerate() {
                let pos = slots.binary_search(s).unwrap();
                for (o, v) in out.blocks[pos * b..(pos + 1) * b].iter_mut().zip(g.block(k)) {
                    *o += c * v;
                }
            }
        }
        out.slots = slots;
        out
    }

    /// `M G` for a row-major `m_rows x rows` matrix `M`.
    pub fn left_mul(&self, m: &[f64], m_rows: usize) -> Gradient {
        let n = self.n;
        let mul = |blk: &[f64]| {
            let mut out = vec![0.0; m_rows * n];
            for a in 0..m_rows {
                for r in 0..self.rows {
                    let c = m[a * self.rows + r];
                    if c != 0.0 {
                        for i in 0..n {
                            out[a * n + i] += c * blk[r * n + i];
                        }
                    }
                }
            }
            out
        };
        let point = mul(&self.point);
        let mut blocks = Vec::with_capacity(self.slots.len() * m_rows * n);
        for k in 0..self.slots.len() {
            blocks.extend(mul(self.block(k)));
        }
        Gradient { rows: m_rows, n, point, slots: self.slots.clone(), blocks }
    }

    /// Dense `rows x D` matrix with `D = n (path_len + 1)`.
    pub fn to_dense(&self, path_len: usize) -> Vec<f64> {
        let n = self.n;
        let dim = n * (path_len + 1);
        let mut out = vec![0.0; self.rows * dim];
        for r in 0..self.rows {
            for i in 0..n {
                out[r * dim + path_len * n + i] = self.point[r * n + i];
            }
            for (k, &s) in self.slots.iter().enumerate() {
                for i in 0..n {
                    out[r * dim + s * n + i] += self.block(k)[r * n + i];
                }
            }
        }
        out
    }
}

pub(crate) fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64], accumulate: bool) {
    for r in 0..rows {
        let s: f64 = (0..cols).map(|c| m[r * cols + c] * v[c]).sum();
        if accumulate {
            out[r] += s;
        } else {
            out[r] = s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Which {
    Drift,
    Diffusion(usize),
}

/// Declared hypotheses. Growth exponents are carried for documentation and
/// spot checks only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMetadata {
    pub name: String,
    pub growth_exponents: Vec<f64>,
    pub smooth_in_time: bool,
    /// Depends on `(t, value)` only.
    pub state_dependent: bool,
    /// May read stopped-path slots after the current step. Such fields need
    /// the full stopped path at every step; all provided families read
    /// only slots up to the current one.
    pub reads_future_slots: bool,
}

impl FieldMetadata {
    pub fn new(name: &str) -> Self {
        FieldMetadata {
            name: name.to_string(),
            growth_exponents: vec![1.0],
            smooth_in_time: true,
            state_dependent: false,
            reads_future_slots: false,
        }
    }
}

/// Drift `b` and diffusion columns `sigma_k` of a path-dependent SDE.
pub trait CoefficientField: Send + Sync {
    /// `(n, d)`.
    fn dims(&self) -> (usize, usize);

    fn eval(&self, which: Which, x: &State, out: &mut [f64]);

    /// Analytic gradient on the lift space, if known.
    fn gradient(&self, _which: Which, _x: &State) -> Option<Gradient> {
        None
    }

    /// Analytic time derivative with the path frozen, if known.
    fn time_derivative(&self, _which: Which, _x: &State) -> Option<Vec<f64>> {
        None
    }

    fn metadata(&self) -> FieldMetadata;

    /// Closed-form lower bound for the bracket Gram matrix at a state.
    fn theta_lower(&self, _x: &State) -> Option<f64> {
        None
    }
}

/// `n x d` diffusion matrix, row-major.
pub fn sigma_matrix(field: &dyn CoefficientField, x: &State) -> Vec<f64> {
    let (n, d) = field.dims();
    let mut out = vec![0.0; n * d];
    let mut col = vec![0.0; n];
    for k in 0..d {
        field.eval(Which::Diffusion(k), x, &mut col);
        for i in 0..n {
            out[i * d + k] = col[i];
        }
    }
    out
}

pub fn drift(field: &dyn CoefficientField, x: &State) -> Vec<f64> {
    let mut out = vec![0.0; field.dims().0];
    field.eval(Which::Drift, x, &mut out);
    out
}

pub fn eval_sigma(
    field: &dyn CoefficientField,
    grid: &TimeGrid,
    t: f64,
    path: &GridPath,
    value: &[f64],
) -> Result<Vec<f64>> {
    let f = Frozen::new(grid, t, path, value)?;
    finite(sigma_matrix(field, &f.state(grid)), "diffusion")
}

pub fn eval_b(
    field: &dyn CoefficientField,
    grid: &TimeGrid,
    t: f64,
    path: &GridPath,
    value: &[f64],
) -> Result<Vec<f64>> {
    let f = Frozen::new(grid, t, path, value)?;
    finite(drift(field, &f.state(grid)), "drift")
}

fn finite(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("non-finite {what} value")))
    }
}

/// An `R^n`-valued non-anticipative map, such as a coefficient column or a
/// bracket of them.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &State, out: &mut [f64]);
    fn gradient(&self, _x: &State) -> Option<Gradient> {
        None
    }
    fn time_derivative(&self, _x: &State) -> Option<Vec<f64>> {
        None
    }
}

/// One column of a coefficient field.
#[derive(Clone, Copy)]
pub struct Component<'a> {
    pub field: &'a dyn CoefficientField,
    pub which: Which,
}

pub fn component(field: &dyn CoefficientField, which: Which) -> Component<'_> {
    Component { field, which }
}

impl VectorField for Component<'_> {
    fn dim(&self) -> usize {
        self.field.dims().0
    }

    fn eval(&self, x: &State, out: &mut [f64]) {
        self.field.eval(self.which, x, out)
    }

    fn gradient(&self, x: &State) -> Option<Gradient> {
        self.field.gradient(self.which, x)
    }

    fn time_derivative(&self, x: &State) -> Option<Vec<f64>> {
        self.field.time_derivative(self.which, x)
    }
}

/// A vector field given by a closure, without derivative oracles.
pub struct FnField<F> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&State, &mut [f64]) + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &State, out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// `h = 1e-5 max(1, |state|)`, halved per nesting level.
pub fn fd_step(x: &State, level: u32) -> f64 {
    FD_REL * crate::path::norm2(x.value).max(1.0) * 0.5f64.powi(level as i32)
}

fn eval_owned(v: &dyn VectorField, x: &State, path: &[f64], value: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.dim()];
    v.eval(&State { path, value, ..*x }, &mut out);
    out
}

fn quotient(plus: Vec<f64>, minus: Vec<f64>, h: f64) -> Result<Vec<f64>> {
    let out: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    finite(out, "finite-difference quotient")
}

/// `d V` along the vertical direction `(1_{[t,T]} e_i, e_i)`, as an
/// `n x n` row-major matrix. Uses the analytic gradient when present.
pub fn vertical_derivative_of(v: &dyn VectorField, x: &State, level: u32) -> Result<Vec<f64>> {
    if let Some(g) = v.gradient(x) {
        return Ok(g.apply_lift(x.step));
    }
    vertical_fd(v, x, level)
}

/// Finite-difference vertical derivative, ignoring any oracle.
pub fn vertical_fd(v: &dyn VectorField, x: &State, level: u32) -> Result<Vec<f64>> {
    let n = x.n();
    let m = v.dim();
    let h = fd_step(x, level);
    let slots = x.path.len() / n;
    let mut path = x.path.to_vec();
    let mut value = x.value.to_vec();
    let mut out = vec![0.0; m * n];
    for i in 0..n {
        let bump = |delta: f64, path: &mut [f64], value: &mut [f64]| {
            for j in x.step..slots {
                path[j * n + i] = x.path[j * n + i] + delta;
            }
            value[i] = x.value[i] + delta;
        };
        bump(h, &mut path, &mut value);
        let plus = eval_owned(v, x, &path, &value);
        bump(-h, &mut path, &mut value);
        let minus = eval_owned(v, x, &path, &value);
        bump(0.0, &mut path, &mut value);
        let col = quotient(plus, minus, h)?;
        for r in 0..m {
            out[r * n + i] = col[r];
        }
    }
    Ok(out)
}

/// `d V (dpath, dvalue)`; analytic gradient preferred.
pub fn directional_derivative_of(v: &dyn VectorField, x: &State, dpath: &[f64], dvalue: &[f64]) -> Result<Vec<f64>> {
    if let Some(g) = v.gradient(x) {
        let mut out = vec![0.0; v.dim()];
        g.apply(dpath, dvalue, &mut out);
        return Ok(out);
    }
    directional_fd(v, x, dpath, dvalue, 0)
}

pub fn directional_fd(v: &dyn VectorField, x: &State, dpath: &[f64], dvalue: &[f64], level: u32) -> Result<Vec<f64>> {
    let scale = dpath.iter().chain(dvalue).fold(0.0f64, |a, b| a.max(b.abs()));
    if scale == 0.0 {
        return Ok(vec![0.0; v.dim()]);
    }
    let h = fd_step(x, level) / scale;
    let shifted = |c: f64| {
        let p: Vec<f64> = x.path.iter().zip(dpath).map(|(a, b)| a + c * b).collect();
        let q: Vec<f64> = x.value.iter().zip(dvalue).map(|(a, b)| a + c * b).collect();
        (p, q)
    };
    let (p, q) = shifted(h);
    let plus = eval_owned(v, x, &p, &q);
    let (p, q) = shifted(-h);
    let minus = eval_owned(v, x, &p, &q);
    quotient(plus, minus, h)
}

/// Gradient by central differences over the point part and the path slots
/// in `slots`.
pub fn fd_gradient(v: &dyn VectorField, x: &State, slots: std::ops::Range<usize>) -> Result<Gradient> {
    let n = x.n();
    let m = v.dim();
    let h = fd_step(x, 0);
    let mut g = Gradient::zeros(m, n);
    let mut path = x.path.to_vec();
    let mut value = x.value.to_vec();
    for i in 0..n {
        value[i] = x.value[i] + h;
        let plus = eval_owned(v, x, &path, &value);
        value[i] = x.value[i] - h;
        let minus = eval_owned(v, x, &path, &value);
        value[i] = x.value[i];
        let col = quotient(plus, minus, h)?;
        for r in 0..m {
            g.point[r * n + i] = col[r];
        }
    }
    for s in slots {
        for i in 0..n {
            let c = s * n + i;
            path[c] = x.path[c] + h;
            let plus = eval_owned(v, x, &path, &value);
            path[c] = x.path[c] - h;
            let minus = eval_owned(v, x, &path, &value);
            path[c] = x.path[c];
            let col = quotient(plus, minus, h)?;
            if col.iter().any(|&c| c != 0.0) {
                let blk = g.slot_mut(s);
                for r in 0..m {
                    blk[r * n + i] = col[r];
                }
            }
        }
    }
    Ok(g)
}

/// Analytic gradient, or a finite-difference one when allowed. Fields that
/// do not read past the present only need the slots up to `step`.
pub fn gradient_or_fd(field: &dyn CoefficientField, which: Which, x: &State, allow_fd: bool) -> Result<Gradient> {
    if let Some(g) = field.gradient(which, x) {
        return Ok(g);
    }
    let meta = field.metadata();
    if !allow_fd {
        return Err(Error::Config(format!(
            "field `{}` has no derivative oracle and finite differences are disabled",
            meta.name
        )));
    }
    let slots = x.path.len() / x.n();
    let upto = if meta.reads_future_slots { slots } else { (x.step + 1).min(slots) };
    fd_gradient(&component(field, which), x, 0..upto)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeDerivative {
    pub value: Vec<f64>,
    /// Set when `t` sits at an end of the grid and a one-sided quotient was used.
    pub one_sided: bool,
}

/// `d/dt V` with the path frozen as its stop at `t`. Central difference at
/// half the adjacent mesh; one-sided at the ends of the grid.
pub fn time_derivative_of(v: &dyn VectorField, x: &State) -> Result<TimeDerivative> {
    if let Some(d) = v.time_derivative(x) {
        return Ok(TimeDerivative { value: d, one_sided: false });
    }
    time_fd(v, x)
}

pub fn time_fd(v: &dyn VectorField, x: &State) -> Result<TimeDerivative> {
    let g = x.grid;
    let j = x.step;
    let left = if j > 0 { Some(x.t - g.t(j - 1)) } else { None };
    let right = if j + 1 < g.len() { Some(g.t(j + 1) - x.t) } else { None };
    let at = |t: f64| eval_owned(v, &x.with_time(t), x.path, x.value);
    let (plus, minus, span, one_sided) = match (left, right) {
        (Some(l), Some(r)) => {
            let dl = 0.5 * l.min(r);
            (at(x.t + dl), at(x.t - dl), 2.0 * dl, false)
        }
        (None, Some(r)) => (at(x.t + 0.5 * r), at(x.t), 0.5 * r, true),
        (Some(l), None) => (at(x.t), at(x.t - 0.5 * l), 0.5 * l, true),
        (None, None) => return Err(Error::domain("grid has a single point")),
    };
    let value = quotient(plus, minus, 0.5 * span)?;
    Ok(TimeDerivative { value, one_sided })
}

fn frozen_for(grid: &TimeGrid, t: f64, path: &GridPath, value: &[f64]) -> Result<Frozen> {
    Frozen::new(grid, t, path, value)
}

pub fn vertical_derivative(
    field: &dyn CoefficientField,
    which: Which,
    grid: &TimeGrid,
    t: f64,
    path: &GridPath,
    value: &[f64],
) -> Result<Vec<f64>> {
    let f = frozen_for(grid, t, path, value)?;
    vertical_derivative_of(&component(field, which), &f.state(grid), 0)
}

pub fn directional_derivative(
    field: &dyn CoefficientField,
    which: Which,
    grid: &TimeGrid,
    t: f64,
    path: &GridPath,
    value: &[f64],
    dpath: &GridPath,
    dvalue: &[f64],
) -> Result<Vec<f64>> {
    let f = frozen_for(grid, t, path, value)?;
    directional_derivative_of(&component(field, which), &f.state(grid), dpath.as_slice(), dvalue)
}

pub fn time_derivative(
    field: &dyn CoefficientField,
    which: Which,
    grid: &TimeGrid,
    t: f64,
    path: &GridPath,
    value: &[f64],
) -> Result<TimeDerivative> {
    let f = frozen_for(grid, t, path, value)?;
    time_derivative_of(&component(field, which), &f.state(grid))
}

/// `(1_{[t,T]} V, V)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedVector {
    pub path_part: GridPath,
    pub point_part: Vec<f64>,
}

impl LiftedVector {
    pub fn zeros(n: usize, grid: &TimeGrid) -> Self {
        LiftedVector { path_part: GridPath::zeros(n, grid.len()), point_part: vec![0.0; n] }
    }

    /// Flat vector of length `n (N + 2)`: path slots, then the point part.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.path_part.as_slice().to_vec();
        v.extend_from_slice(&self.point_part);
        v
    }

    pub fn from_flat(n: usize, flat: &[f64]) -> Self {
        let k = flat.len() - n;
        LiftedVector { path_part: GridPath::from_vec(n, flat[..k].to_vec()), point_part: flat[k..].to_vec() }
    }

    pub fn norm(&self, grid: &TimeGrid, p: f64) -> Result<f64> {
        crate::timegrid::lifted_norm(&self.path_part, &self.point_part, grid, p)
    }
}

pub fn lift(v: &[f64], t: f64, grid: &TimeGrid) -> LiftedVector {
    let tol = TIME_TOL * grid.horizon().max(1.0);
    let n = v.len();
    let path = GridPath::from_fn(n, grid.len(), |j, out| {
        if grid.t(j) >= t - tol {
            out.copy_from_slice(v);
        }
    });
    LiftedVector { path_part: path, point_part: v.to_vec() }
}

/// `(1_{[t_j,T]} v, v)` as a flat vector.
pub fn lift_flat(v: &[f64], j: usize, path_len: usize) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n * (path_len + 1)];
    for s in j..=path_len {
        out[s * n..(s + 1) * n].copy_from_slice(v);
    }
    out
}

#[cfg(test)]
mod tests;
