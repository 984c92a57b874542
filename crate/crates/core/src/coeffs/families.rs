//! Example coefficient families with analytic derivative oracles.

use serde::{Deserialize, Serialize};

use super::{CoefficientField, FieldMetadata, Gradient, State, Which};
use crate::timegrid::TIME_TOL;

/// Number of grid points strictly before `t`.
pub fn points_before(x: &State) -> usize {
    let tol = TIME_TOL * x.grid.horizon().max(1.0);
    if (x.grid.t(x.step) - x.t).abs() <= tol {
        x.step
    } else {
        x.step + 1
    }
}

fn column(d: usize, which: Which) -> usize {
    match which {
        Which::Diffusion(k) => {
            assert!(k < d, "diffusion index {k} out of range");
            k
        }
        Which::Drift => usize::MAX,
    }
}

/// `b` and `sigma` independent of time and state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub n: usize,
    pub d: usize,
    pub drift: Vec<f64>,
    /// `n x d`, row-major.
    pub sigma: Vec<f64>,
}

impl Constant {
    pub fn new(drift: Vec<f64>, sigma: Vec<f64>, d: usize) -> Self {
        let n = drift.len();
        assert_eq!(sigma.len(), n * d);
        Constant { n, d, drift, sigma }
    }

    /// `b = 0`, `sigma = I_n`.
    pub fn brownian(n: usize) -> Self {
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            s[i * n + i] = 1.0;
        }
        Constant::new(vec![0.0; n], s, n)
    }
}

impl CoefficientField for Constant {
    fn dims(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn eval(&self, which: Which, _x: &State, out: &mut [f64]) {
        match which {
            Which::Drift => out.copy_from_slice(&self.drift),
            w => {
                let k = column(self.d, w);
                for i in 0..self.n {
                    out[i] = self.sigma[i * self.d + k];
                }
            }
        }
    }

    fn gradient(&self, _which: Which, _x: &State) -> Option<Gradient> {
        Some(Gradient::zeros(self.n, self.n))
    }

    fn time_derivative(&self, _which: Which, _x: &State) -> Option<Vec<f64>> {
        Some(vec![0.0; self.n])
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { growth_exponents: vec![0.0], state_dependent: true, ..FieldMetadata::new("constant") }
    }
}

/// `b = A y + b0`, `sigma_k = S_k y + c_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub n: usize,
    pub d: usize,
    pub a: Vec<f64>,
    #[serde(default)]
    pub b0: Vec<f64>,
    /// One `n x n` matrix per noise component.
    pub s: Vec<Vec<f64>>,
    /// `n x d`, row-major.
    #[serde(default)]
    pub c: Vec<f64>,
}

impl Linear {
    pub fn new(n: usize, d: usize, a: Vec<f64>, s: Vec<Vec<f64>>, c: Vec<f64>) -> Self {
        assert!(a.len() == n * n && s.len() == d && c.len() == n * d);
        Linear { n, d, a, b0: vec![0.0; n], s, c }
    }

    /// Scalar `dX = mu X dt + sigma X dB`.
    pub fn geometric(mu: f64, sigma: f64) -> Self {
        Linear::new(1, 1, vec![mu], vec![vec![sigma]], vec![0.0])
    }

    fn normalized(&self) -> (Vec<f64>, Vec<f64>) {
        let b0 = if self.b0.is_empty() { vec![0.0; self.n] } else { self.b0.clone() };
        let c = if self.c.is_empty() { vec![0.0; self.n * self.d] } else { self.c.clone() };
        (b0, c)
    }
}

impl CoefficientField for Linear {
    fn dims(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let n = self.n;
        let (b0, c) = self.normalized();
        let (m, off): (&[f64], Vec<f64>) = match which {
            Which::Drift => (&self.a, b0),
            w => {
                let k = column(self.d, w);
                (&self.s[k], (0..n).map(|i| c[i * self.d + k]).collect())
            }
        };
        super::matvec(m, n, n, x.value, out, false);
        for i in 0..n {
            out[i] += off[i];
        }
    }

    fn gradient(&self, which: Which, _x: &State) -> Option<Gradient> {
        let m = match which {
            Which::Drift => self.a.clone(),
            w => self.s[column(self.d, w)].clone(),
        };
        Some(Gradient::from_point(self.n, self.n, m))
    }

    fn time_derivative(&self, _which: Which, _x: &State) -> Option<Vec<f64>> {
        Some(vec![0.0; self.n])
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { state_dependent: true, ..FieldMetadata::new("linear") }
    }
}

/// Scalar equation with `sigma = 1` and `b = -x(t)` for `t <= switch`,
/// `b = -x(switch)` afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntroExample {
    #[serde(default = "one")]
    pub switch: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for IntroExample {
    fn default() -> Self {
        IntroExample { switch: 1.0 }
    }
}

impl IntroExample {
    fn frozen_slot(&self, x: &State) -> Option<usize> {
        let tol = TIME_TOL * x.grid.horizon().max(1.0);
        (x.t > self.switch + tol).then(|| x.grid.floor_index(self.switch))
    }
}

impl CoefficientField for IntroExample {
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        out[0] = match which {
            Which::Drift => match self.frozen_slot(x) {
                Some(j) => -x.slot(j)[0],
                None => -x.value[0],
            },
            _ => 1.0,
        };
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let mut g = Gradient::zeros(1, 1);
        if which == Which::Drift {
            match self.frozen_slot(x) {
                Some(j) => g.slot_mut(j)[0] = -1.0,
                None => g.point_mut()[0] = -1.0,
            }
        }
        Some(g)
    }

    fn time_derivative(&self, _which: Which, _x: &State) -> Option<Vec<f64>> {
        Some(vec![0.0])
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { smooth_in_time: false, ..FieldMetadata::new("intro_example") }
    }
}

/// Scalar field driven by `I(t, x) = int_[0,t) x(s) ds` (grid quadrature):
/// `b = a y + c I`, `sigma = s0 + s1 sin I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralCoefficient {
    pub a: f64,
    pub c: f64,
    pub s0: f64,
    pub s1: f64,
}

impl Default for IntegralCoefficient {
    fn default() -> Self {
        IntegralCoefficient { a: -0.5, c: 1.0, s0: 0.6, s1: 0.3 }
    }
}

impl IntegralCoefficient {
    pub fn integral(x: &State) -> f64 {
        let w = x.grid.lebesgue_weights();
        (0..points_before(x)).map(|j| w[j] * x.slot(j)[0]).sum()
    }
}

impl CoefficientField for IntegralCoefficient {
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let i = Self::integral(x);
        out[0] = match which {
            Which::Drift => self.a * x.value[0] + self.c * i,
            _ => self.s0 + self.s1 * i.sin(),
        };
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let (pt, coef) = match which {
            Which::Drift => (self.a, self.c),
            _ => (0.0, self.s1 * Self::integral(x).cos()),
        };
        let mut g = Gradient::from_point(1, 1, vec![pt]);
        if coef != 0.0 {
            let w = x.grid.lebesgue_weights();
            for j in 0..points_before(x) {
                g.slot_mut(j)[0] = coef * w[j];
            }
        }
        Some(g)
    }

    /// `d/dt I = x(t)`.
    fn time_derivative(&self, which: Which, x: &State) -> Option<Vec<f64>> {
        let di = x.value[0];
        Some(vec![match which {
            Which::Drift => self.c * di,
            _ => self.s1 * Self::integral(x).cos() * di,
        }])
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata::new("integral_coefficient")
    }
}

const GL_NODES: [f64; 4] =
    [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
const GL_WEIGHTS: [f64; 4] =
    [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];

fn gauss(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (m, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    GL_NODES.iter().zip(GL_WEIGHTS).map(|(u, w)| w * f(m + r * u)).sum::<f64>() * r
}

/// Scalar field driven by the continuous-delay functional
///
/// ```text
/// zeta(t, x) = int_{t-T}^{t} Phi(u, x(u)) rho(u - t) du,
/// Phi(u, x) = (1 + u/2) sin x,   rho(s) = s^2,
/// ```
///
/// with `x` read as a left-continuous step function on the grid and
/// `x(u) = x(0)` for `u < 0`: `b = -a y + c zeta`, `sigma = s0 + s1 tanh zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDelay {
    pub a: f64,
    pub c: f64,
    pub s0: f64,
    pub s1: f64,
}

impl Default for ContinuousDelay {
    fn default() -> Self {
        ContinuousDelay { a: 0.5, c: 1.0, s0: 0.6, s1: 0.3 }
    }
}

fn phi(u: f64, x: f64) -> f64 {
    (1.0 + 0.5 * u) * x.sin()
}

fn phi_x(u: f64, x: f64) -> f64 {
    (1.0 + 0.5 * u) * x.cos()
}

fn rho(s: f64) -> f64 {
    s * s
}

fn rho_prime(s: f64) -> f64 {
    2.0 * s
}

pub struct DelayFunctional {
    pub zeta: f64,
    /// `(slot, d zeta / d x_slot)`.
    pub slots: Vec<(usize, f64)>,
    pub dt: f64,
}

impl ContinuousDelay {
    /// The functional, its slot gradient and its time derivative.
    pub fn functional(x: &State) -> DelayFunctional {
        let g = x.grid;
        let t = x.t;
        let lo_all = t - g.horizon();
        let mut zeta = 0.0;
        let mut dt = 0.0;
        let mut slots = Vec::new();
        let x0 = x.slot(0)[0];
        if lo_all < 0.0 {
            let hi = t.min(0.0);
            zeta += gauss(lo_all, hi, |u| phi(u, x0) * rho(u - t));
            dt -= gauss(lo_all, hi, |u| phi(u, x0) * rho_prime(u - t));
            slots.push((0, gauss(lo_all, hi, |u| phi_x(u, x0) * rho(u - t))));
        }
        for j in 0..=x.step.min(g.len() - 1) {
            let lo = g.t(j).max(lo_all);
            let hi = if j + 1 < g.len() { g.t(j + 1).min(t) } else { t };
            if hi <= lo {
                continue;
            }
            let xj = x.slot(j)[0];
            zeta += gauss(lo, hi, |u| phi(u, xj) * rho(u - t));
            dt -= gauss(lo, hi, |u| phi(u, xj) * rho_prime(u - t));
            let gj = gauss(lo, hi, |u| phi_x(u, xj) * rho(u - t));
            match slots.last_mut() {
                Some((s, v)) if *s == j => *v += gj,
                _ => slots.push((j, gj)),
            }
        }
        // boundary terms of the moving window
        let lower = if lo_all < 0.0 { x0 } else { x.slot(g.floor_index(lo_all))[0] };
        dt += phi(t, x.value[0]) * rho(0.0) - phi(lo_all, lower) * rho(-g.horizon());
        DelayFunctional { zeta, slots, dt }
    }
}

impl CoefficientField for ContinuousDelay {
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let z = Self::functional(x).zeta;
        out[0] = match which {
            Which::Drift => -self.a * x.value[0] + self.c * z,
            _ => self.s0 + self.s1 * z.tanh(),
        };
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let f = Self::functional(x);
        let (pt, coef) = match which {
            Which::Drift => (-self.a, self.c),
            _ => (0.0, self.s1 * (1.0 - f.zeta.tanh().powi(2))),
        };
        let mut g = Gradient::from_point(1, 1, vec![pt]);
        for (s, v) in f.slots {
            g.slot_mut(s)[0] += coef * v;
        }
        Some(g)
    }

    fn time_derivative(&self, which: Which, x: &State) -> Option<Vec<f64>> {
        let f = Self::functional(x);
        Some(vec![match which {
            Which::Drift => self.c * f.dt,
            _ => self.s1 * (1.0 - f.zeta.tanh().powi(2)) * f.dt,
        }])
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata::new("continuous_delay")
    }
}

/// Scalar field reading the path at fixed times `t_i <= t`:
/// `b = -a y`, `sigma = s0 + s1 tanh(sum_i c_i x(t_i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePoints {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    pub a: f64,
    pub s0: f64,
    pub s1: f64,
}

impl DiscretePoints {
    fn read(&self, x: &State) -> Vec<(usize, f64)> {
        let tol = TIME_TOL * x.grid.horizon().max(1.0);
        self.times
            .iter()
            .zip(&self.weights)
            .filter(|(&ti, _)| ti <= x.t + tol)
            .map(|(&ti, &c)| (x.grid.floor_index(ti), c))
            .collect()
    }

    fn arg(&self, x: &State) -> f64 {
        self.read(x).iter().map(|&(j, c)| c * x.slot(j)[0]).sum()
    }
}

impl CoefficientField for DiscretePoints {
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        out[0] = match which {
            Which::Drift => -self.a * x.value[0],
            _ => self.s0 + self.s1 * self.arg(x).tanh(),
        };
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        match which {
            Which::Drift => Some(Gradient::from_point(1, 1, vec![-self.a])),
            _ => {
                let sech2 = 1.0 - self.arg(x).tanh().powi(2);
                let mut g = Gradient::zeros(1, 1);
                for (j, c) in self.read(x) {
                    g.slot_mut(j)[0] += self.s1 * sech2 * c;
                }
                Some(g)
            }
        }
    }

    fn time_derivative(&self, _which: Which, _x: &State) -> Option<Vec<f64>> {
        Some(vec![0.0])
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { smooth_in_time: false, ..FieldMetadata::new("discrete_points") }
    }
}

/// Three-dimensional hypoelliptic example with zero drift,
///
/// ```text
/// A1 = (1, 0, 0),   A2 = (0, a + sin y_2, y_1),
/// ```
///
/// (components numbered from 1) where `a = zeta(x)` is a bounded path
/// functional in `[a_min, a_max]` built from `int_[0, t ^ t_a) x_1(s) ds`,
/// or a fixed constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HormanderExample3D {
    pub a_min: f64,
    pub a_max: f64,
    /// End of the window the functional integrates over.
    pub window_end: f64,
    #[serde(default)]
    pub fixed_a: Option<f64>,
}

impl Default for HormanderExample3D {
    fn default() -> Self {
        HormanderExample3D { a_min: 2.0, a_max: 3.0, window_end: 0.25, fixed_a: None }
    }
}

impl HormanderExample3D {
    pub fn with_fixed(a: f64) -> Self {
        HormanderExample3D { a_min: a, a_max: a, window_end: 0.0, fixed_a: Some(a) }
    }

    fn window_points(&self, x: &State) -> usize {
        let tol = TIME_TOL * x.grid.horizon().max(1.0);
        let k = x.grid.points().iter().take_while(|&&p| p < self.window_end - tol).count();
        k.min(points_before(x))
    }

    /// `(a, da/dI, number of slots read)`.
    fn param(&self, x: &State) -> (f64, f64, usize) {
        if let Some(a) = self.fixed_a {
            return (a, 0.0, 0);
        }
        let k = self.window_points(x);
        let w = x.grid.lebesgue_weights();
        let i: f64 = (0..k).map(|j| w[j] * x.slot(j)[0]).sum();
        let th = i.tanh();
        let span = self.a_max - self.a_min;
        (self.a_min + 0.5 * span * (1.0 + th), 0.5 * span * (1.0 - th * th), k)
    }

    pub fn a(&self, x: &State) -> f64 {
        self.param(x).0
    }
}

impl CoefficientField for HormanderExample3D {
    fn dims(&self) -> (usize, usize) {
        (3, 2)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let y = x.value;
        match which {
            Which::Drift => out.fill(0.0),
            Which::Diffusion(0) => out.copy_from_slice(&[1.0, 0.0, 0.0]),
            Which::Diffusion(1) => {
                let a = self.a(x);
                out.copy_from_slice(&[0.0, a + y[1].sin(), y[0]]);
            }
            Which::Diffusion(k) => panic!("diffusion index {k} out of range"),
        }
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let mut g = Gradient::zeros(3, 3);
        if which == Which::Diffusion(1) {
            let (_, da, k) = self.param(x);
            let p = g.point_mut();
            p[4] = x.value[1].cos();
            p[6] = 1.0;
            if da != 0.0 {
                let w = x.grid.lebesgue_weights();
                for j in 0..k {
                    g.slot_mut(j)[3] = da * w[j];
                }
            }
        }
        Some(g)
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata {
            growth_exponents: vec![1.0, 1.0],
            state_dependent: self.fixed_a.is_some(),
            ..FieldMetadata::new("hormander_3d")
        }
    }

    fn theta_lower(&self, x: &State) -> Option<f64> {
        Some(closed_form_lambda_min(self.a(x), x.value))
    }
}

/// `1 ^ 2 s^2 / (s^2 + y_1^2 + 1 + sqrt((s^2 + y_1^2 + 1)^2 - 4 s^2))` with
/// `s = a + sin y_2`: the smallest eigenvalue of `A1 A1' + A2 A2' + B B'`
/// for `B = [A1, A2]`.
pub fn closed_form_lambda_min(a: f64, y: &[f64]) -> f64 {
    let s2 = (a + y[1].sin()).powi(2);
    let tr = s2 + y[0] * y[0] + 1.0;
    let disc = (tr * tr - 4.0 * s2).max(0.0).sqrt();
    (2.0 * s2 / (tr + disc)).min(1.0)
}

/// Two diffusion fields along `e_1`, so the bracket span never leaves the
/// first axis and `X_2` stays at its initial value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DegeneratePair;

impl CoefficientField for DegeneratePair {
    fn dims(&self) -> (usize, usize) {
        (2, 2)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        let y = x.value[0];
        let v = match which {
            Which::Drift => -y,
            Which::Diffusion(0) => 1.0 + 0.5 * y.sin(),
            Which::Diffusion(1) => 0.5 + 0.25 * y.cos(),
            Which::Diffusion(k) => panic!("diffusion index {k} out of range"),
        };
        out.copy_from_slice(&[v, 0.0]);
    }

    fn gradient(&self, which: Which, x: &State) -> Option<Gradient> {
        let y = x.value[0];
        let dv = match which {
            Which::Drift => -1.0,
            Which::Diffusion(0) => 0.5 * y.cos(),
            _ => -0.25 * y.sin(),
        };
        Some(Gradient::from_point(2, 2, vec![dv, 0.0, 0.0, 0.0]))
    }

    fn time_derivative(&self, _which: Which, _x: &State) -> Option<Vec<f64>> {
        Some(vec![0.0, 0.0])
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata { state_dependent: true, ..FieldMetadata::new("degenerate_pair") }
    }
}

pub type FieldFn = dyn Fn(Which, &State, &mut [f64]) + Send + Sync;

/// Field given by a user closure; derivatives by finite differences.
pub struct UserField {
    pub n: usize,
    pub d: usize,
    pub f: Box<FieldFn>,
    pub meta: FieldMetadata,
}

impl UserField {
    pub fn new(n: usize, d: usize, f: impl Fn(Which, &State, &mut [f64]) + Send + Sync + 'static) -> Self {
        let meta = FieldMetadata { reads_future_slots: true, ..FieldMetadata::new("user") };
        UserField { n, d, f: Box::new(f), meta }
    }
}

impl CoefficientField for UserField {
    fn dims(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    fn eval(&self, which: Which, x: &State, out: &mut [f64]) {
        (self.f)(which, x, out)
    }

    fn metadata(&self) -> FieldMetadata {
        self.meta.clone()
    }
}
