//! The measure `mu = lambda + atoms` on `[0,T]`, its time grid and the norms
//! of the lift space `L_p(mu) (+) R^n`.
//!
//! Quadrature is left-endpoint: point `t_j` carries `t_{j+1} - t_j` of
//! Lebesgue mass (zero at `T`) plus the weight of an atom sitting at `t_j`.
//! With this choice `mu[t_j, t_k)` is a finite sum of weights, so indicator
//! distances are exact on the grid:
//!
//! ```text
//! || 1_[t,T] - 1_[t+dt,T] ||_{L_p(mu)} = mu[t, t+dt)^(1/p)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{norm2, GridPath};

/// Relative tolerance used to identify a time with a grid point.
pub const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub horizon: f64,
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
}

impl MeasureSpec {
    pub fn lebesgue(horizon: f64) -> Self {
        MeasureSpec { horizon, atoms: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::validation("measure.horizon", "horizon must be positive and finite"));
        }
        let mut prev = f64::NEG_INFINITY;
        for &(t, w) in &self.atoms {
            if !(0.0..=self.horizon).contains(&t) {
                return Err(Error::validation("measure.atoms", format!("atom time {t} outside [0, T]")));
            }
            if t <= prev {
                return Err(Error::validation("measure.atoms", "atom times must be strictly increasing"));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::validation("measure.atoms", format!("atom weight {w} must be positive")));
            }
            prev = t;
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.horizon + self.atoms.iter().map(|a| a.1).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    lebesgue: Vec<f64>,
    atom: Vec<bool>,
}

impl TimeGrid {
    /// Grid from explicit points; atoms are matched to points by time.
    pub fn from_points(points: Vec<f64>, atoms: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::domain("a grid needs at least two points"));
        }
        if points[0] != 0.0 || points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("grid points must start at 0 and increase strictly"));
        }
        let n = points.len();
        let mut lebesgue = vec![0.0; n];
        for j in 0..n - 1 {
            lebesgue[j] = points[j + 1] - points[j];
        }
        let mut weights = lebesgue.clone();
        let mut atom = vec![false; n];
        let horizon = points[n - 1];
        for &(t, w) in atoms {
            let j =
                locate(&points, t, horizon).ok_or_else(|| Error::domain(format!("atom at {t} is not a grid point")))?;
            weights[j] += w;
            atom[j] = true;
        }
        Ok(TimeGrid { points, weights, lebesgue, atom })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Left-endpoint Lebesgue weights only (atoms excluded).
    pub fn lebesgue_weights(&self) -> &[f64] {
        &self.lebesgue
    }

    pub fn is_atom(&self, j: usize) -> bool {
        self.atom[j]
    }

    pub fn atoms(&self) -> Vec<(f64, f64)> {
        (0..self.len())
            .filter(|&j| self.atom[j])
            .map(|j| (self.points[j], self.weights[j] - self.lebesgue[j]))
            .collect()
    }

    /// Number of points, `N + 1`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn t(&self, j: usize) -> f64 {
        self.points[j]
    }

    pub fn dt(&self, j: usize) -> f64 {
        self.lebesgue[j]
    }

    pub fn mesh(&self) -> f64 {
        self.lebesgue.iter().cloned().fold(0.0, f64::max)
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        locate(&self.points, t, self.horizon())
    }

    pub fn require_index(&self, t: f64) -> Result<usize> {
        self.index_of(t).ok_or_else(|| Error::domain(format!("time {t} is not a grid point")))
    }

    /// Index of the last grid point not after `t`.
    pub fn floor_index(&self, t: f64) -> usize {
        if let Some(j) = self.index_of(t) {
            return j;
        }
        match self.points.binary_search_by(|p| p.partial_cmp(&t).unwrap()) {
            Ok(j) => j,
            Err(0) => 0,
            Err(j) => j - 1,
        }
    }

    /// Whether all intervals have the same length up to rounding.
    pub fn is_uniform(&self) -> bool {
        let h = self.horizon() / self.steps() as f64;
        self.lebesgue[..self.steps()].iter().all(|d| (d - h).abs() <= 1e-9 * h)
    }

    /// `mu[t_i, t_k)` as a compensated sum of weights.
    pub fn mass_between(&self, i: usize, k: usize) -> f64 {
        neumaier_sum(self.weights[i.min(k)..i.max(k)].iter().copied())
    }

    /// `mu[t_i, T]`.
    pub fn mass_from(&self, i: usize) -> f64 {
        neumaier_sum(self.weights[i..].iter().copied())
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_from(0)
    }

    /// Every `k`-th point, with weights summed over each coarse cell so that
    /// `mu` of half-open coarse intervals is preserved.
    pub fn coarsen(&self, k: usize) -> Result<TimeGrid> {
        if k == 0 || !self.steps().is_multiple_of(k) {
            return Err(Error::domain(format!(
                "grid with {} intervals is not divisible by coarsening factor {k}",
                self.steps()
            )));
        }
        for j in 0..self.len() {
            if self.atom[j] && j % k != 0 {
                return Err(Error::domain("an atom falls strictly inside a coarse interval"));
            }
        }
        let points: Vec<f64> = self.points.iter().step_by(k).copied().collect();
        let atoms: Vec<(f64, f64)> = self.atoms();
        TimeGrid::from_points(points, &atoms)
    }

    /// Indices of the grid points inside `[a, b]`.
    pub fn window(&self, a: f64, b: f64) -> Result<(usize, usize)> {
        if !(a <= b) {
            return Err(Error::domain(format!("empty window [{a}, {b}]")));
        }
        let tol = TIME_TOL * self.horizon().max(1.0);
        let i0 = self.points.iter().position(|&p| p >= a - tol);
        let i1 = self.points.iter().rposition(|&p| p <= b + tol);
        match (i0, i1) {
            (Some(i0), Some(i1)) if i0 < i1 => Ok((i0, i1)),
            _ => Err(Error::domain(format!("window [{a}, {b}] contains fewer than two grid points"))),
        }
    }
}

fn locate(points: &[f64], t: f64, horizon: f64) -> Option<usize> {
    let tol = TIME_TOL * horizon.max(1.0);
    let j = match points.binary_search_by(|p| p.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
        Ok(j) => return Some(j),
        Err(j) => j,
    };
    [j.wrapping_sub(1), j].into_iter().filter(|&k| k < points.len()).find(|&k| (points[k] - t).abs() <= tol)
}

/// Compensated summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Uniform grid of `n_steps` intervals merged with the atoms and the
/// required points. A required point within `TIME_TOL * T` of a uniform point
/// replaces it, so every atom and required time appears exactly once.
pub fn build_grid(measure: &MeasureSpec, n_steps: usize, required: &[f64]) -> Result<TimeGrid> {
    measure.validate()?;
    if n_steps == 0 {
        return Err(Error::domain("n_steps must be at least 1"));
    }
    let horizon = measure.horizon;
    let mut special: Vec<f64> = required.to_vec();
    special.extend(measure.atoms.iter().map(|a| a.0));
    for &r in &special {
        if !(0.0..=horizon).contains(&r) {
            return Err(Error::domain(format!("required point {r} outside [0, {horizon}]")));
        }
    }
    let tol = TIME_TOL * horizon.max(1.0);
    let mut points: Vec<f64> = (0..=n_steps).map(|k| horizon * (k as f64 / n_steps as f64)).collect();
    for &r in &special {
        match points.iter().position(|&p| (p - r).abs() <= tol) {
            Some(j) => {
                if j != 0 && j != n_steps {
                    points[j] = r;
                }
            }
            None => points.push(r),
        }
    }
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    TimeGrid::from_points(points, &measure.atoms)
}

fn default_p() -> f64 {
    1.4
}

/// Standing parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default = "default_p")]
    pub p: f64,
    pub tau: f64,
    #[serde(default)]
    pub tau0: f64,
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
}

impl Config {
    pub fn alpha(&self) -> f64 {
        1.0 / (2.0 * self.p)
    }

    pub fn validate(&self, measure: &MeasureSpec) -> Result<()> {
        measure.validate()?;
        if !(self.p > 1.0 && self.p < 1.5) {
            return Err(Error::validation("config.p", format!("p = {} must lie in (1, 3/2)", self.p)));
        }
        if !(self.tau > 0.0 && self.tau <= measure.horizon) {
            return Err(Error::validation("config.tau", format!("tau = {} must lie in (0, T]", self.tau)));
        }
        if !(self.tau0 >= 0.0 && self.tau0 < self.tau) {
            return Err(Error::validation("config.tau0", format!("tau0 = {} must lie in [0, tau)", self.tau0)));
        }
        if self.steps == 0 {
            return Err(Error::validation("config.steps", "steps must be at least 1"));
        }
        if let Some(a) = measure.atoms.iter().find(|a| a.0 >= self.tau0 && a.0 < self.tau) {
            return Err(Error::validation(
                "config.tau0",
                format!("(A2) violated: atom at {} lies in [tau0, tau) = [{}, {})", a.0, self.tau0, self.tau),
            ));
        }
        Ok(())
    }

    /// The working grid: uniform `steps` intervals plus atoms, `tau0`, `tau`.
    pub fn grid(&self, measure: &MeasureSpec) -> Result<TimeGrid> {
        self.validate(measure)?;
        build_grid(measure, self.steps, &[self.tau0, self.tau])
    }
}

fn check_len(path: &GridPath, grid: &TimeGrid) -> Result<()> {
    if path.len() != grid.len() {
        return Err(Error::domain(format!("path has {} points, grid has {}", path.len(), grid.len())));
    }
    Ok(())
}

/// `(sum_j w_j |x_j|^p)^(1/p)`.
pub fn lp_norm(path: &GridPath, grid: &TimeGrid, p: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::domain(format!("p = {p} must exceed 1")));
    }
    check_len(path, grid)?;
    Ok(lp_norm_unchecked(path.as_slice(), path.dim(), grid, p))
}

pub(crate) fn lp_norm_unchecked(data: &[f64], dim: usize, grid: &TimeGrid, p: f64) -> f64 {
    let s =
        neumaier_sum(grid.weights().iter().enumerate().map(|(j, w)| w * norm2(&data[j * dim..(j + 1) * dim]).powf(p)));
    s.powf(1.0 / p)
}

/// Norm of `(x, y)` in the lift space: `(||x||_{E_p}^2 + |y|^2)^(1/2)`.
pub fn lifted_norm(path: &GridPath, point: &[f64], grid: &TimeGrid, p: f64) -> Result<f64> {
    let x = lp_norm(path, grid, p)?;
    Ok((x * x + point.iter().map(|v| v * v).sum::<f64>()).sqrt())
}

/// `|| 1_[t,T] - 1_[t+dt,T] ||_{L_p(mu)}` for grid-aligned endpoints.
pub fn indicator_distance(t: f64, dt: f64, grid: &TimeGrid, p: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::domain(format!("p = {p} must exceed 1")));
    }
    let i = grid.index_of(t).ok_or_else(|| Error::contract(format!("t = {t} is not a grid point")))?;
    let k = grid.index_of(t + dt).ok_or_else(|| Error::contract(format!("t + dt = {} is not a grid point", t + dt)))?;
    Ok(grid.mass_between(i, k).powf(1.0 / p))
}

/// Squared Hilbert-Schmidt norm of `S(t): R^n -> L_2(mu) (+) R^n`,
/// `n (mu[t,T] + 1)`.
pub fn hs_norm_s(t: f64, grid: &TimeGrid, n: usize) -> Result<f64> {
    let j = grid.require_index(t)?;
    Ok(n as f64 * (grid.mass_from(j) + 1.0))
}

/// `max_{s != t in [a,b]} |v_t - v_s| / |t - s|^alpha` over grid pairs.
pub fn holder_seminorm(values: &GridPath, grid: &TimeGrid, alpha: f64, window: (f64, f64)) -> Result<f64> {
    check_len(values, grid)?;
    let (i0, i1) = grid.window(window.0, window.1)?;
    Ok(holder_by_index(grid.points(), i0, i1, alpha, |s, t| values.increment_norm(s, t)))
}

/// Hölder quotient maximised over index pairs in `[i0, i1]` for an arbitrary
/// increment-size function.
pub fn holder_by_index(
    times: &[f64],
    i0: usize,
    i1: usize,
    alpha: f64,
    mut incr: impl FnMut(usize, usize) -> f64,
) -> f64 {
    let mut best = 0.0f64;
    for s in i0..i1 {
        for t in s + 1..=i1 {
            let q = incr(s, t) / (times[t] - times[s]).powf(alpha);
            if q > best {
                best = q;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> TimeGrid {
        build_grid(&MeasureSpec::lebesgue(1.0), n, &[]).unwrap()
    }

    #[test]
    fn build_grid_examples() {
        let g = unit_grid(4);
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.total_mass(), 1.0);

        let m = MeasureSpec { horizon: 2.0, atoms: vec![(0.0, 1.0)] };
        let g = build_grid(&m, 2, &[]).unwrap();
        assert_eq!(g.total_mass(), 3.0);

        let m = MeasureSpec { horizon: 1.0, atoms: vec![(0.3, 0.5)] };
        let g = build_grid(&m, 4, &[0.3]).unwrap();
        assert_eq!(g.points().iter().filter(|&&p| p == 0.3).count(), 1);
        assert!((g.total_mass() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_point_rejected() {
        assert!(matches!(build_grid(&MeasureSpec::lebesgue(1.0), 4, &[1.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn lp_norm_examples() {
        let g = unit_grid(10);
        let one = GridPath::constant(&[1.0], g.len());
        assert!((lp_norm(&one, &g, 1.3).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(lp_norm(&GridPath::zeros(1, g.len()), &g, 1.3).unwrap(), 0.0);
        let m = MeasureSpec { horizon: 2.0, atoms: vec![(0.0, 1.0)] };
        let g = build_grid(&m, 8, &[]).unwrap();
        let one = GridPath::constant(&[1.0], g.len());
        let p = 1.4;
        assert!((lp_norm(&one, &g, p).unwrap() - 3f64.powf(1.0 / p)).abs() < 1e-14);
        assert!(matches!(lp_norm(&one, &g, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn indicator_examples() {
        let g = unit_grid(4);
        let d = indicator_distance(0.25, 0.25, &g, 1.25).unwrap();
        assert!((d - 0.25f64.powf(0.8)).abs() < 1e-15);
        assert_eq!(indicator_distance(0.25, 0.0, &g, 1.25).unwrap(), 0.0);
        let m = MeasureSpec { horizon: 1.0, atoms: vec![(0.5, 0.2)] };
        let g = build_grid(&m, 4, &[]).unwrap();
        let d = indicator_distance(0.5, 0.25, &g, 1.25).unwrap();
        assert!((d - 0.45f64.powf(0.8)).abs() < 1e-15);
        assert!(matches!(indicator_distance(0.3, 0.1, &g, 1.25), Err(Error::Contract(_))));
    }

    #[test]
    fn hs_norm_examples() {
        let g = unit_grid(16);
        assert_eq!(hs_norm_s(0.0, &g, 1).unwrap(), 2.0);
        assert_eq!(hs_norm_s(0.0, &g, 0).unwrap(), 0.0);
        let m = MeasureSpec { horizon: 1.0, atoms: vec![(1.0, 0.7)] };
        let g = build_grid(&m, 16, &[]).unwrap();
        let wn = g.weights()[g.len() - 1];
        assert_eq!(hs_norm_s(1.0, &g, 2).unwrap(), 2.0 * (wn + 1.0));
        assert!(hs_norm_s(0.01, &g, 1).is_err());
    }

    #[test]
    fn holder_examples() {
        let g = unit_grid(64);
        let c = GridPath::constant(&[3.0], g.len());
        assert_eq!(holder_seminorm(&c, &g, 0.5, (0.0, 1.0)).unwrap(), 0.0);
        let lin = GridPath::from_fn(1, g.len(), |j, v| v[0] = g.t(j));
        assert!((holder_seminorm(&lin, &g, 0.5, (0.0, 1.0)).unwrap() - 1.0).abs() < 1e-14);
        let h1 = holder_seminorm(&lin, &g, 0.4, (0.0, 1.0)).unwrap();
        let h2 = holder_seminorm(&lin.scaled(-2.5), &g, 0.4, (0.0, 1.0)).unwrap();
        assert!((h2 - 2.5 * h1).abs() < 1e-14);
        assert!(holder_seminorm(&lin, &g, 0.5, (0.5, 0.5)).is_err());
    }

    #[test]
    fn config_rejects_atom_in_window() {
        let m = MeasureSpec { horizon: 1.0, atoms: vec![(0.6, 1.0)] };
        let c = Config { p: 1.4, tau: 1.0, tau0: 0.5, seed: 0, steps: 10 };
        match c.validate(&m) {
            Err(Error::Validation { message, .. }) => assert!(message.contains("(A2)")),
            other => panic!("unexpected {other:?}"),
        }
        let c = Config { tau0: 0.7, ..c };
        assert!(c.validate(&m).is_ok());
        assert!((c.alpha() - 1.0 / 2.8).abs() < 1e-16);
    }

    #[test]
    fn coarsen_preserves_mass() {
        let m = MeasureSpec { horizon: 1.0, atoms: vec![(0.5, 0.3)] };
        let g = build_grid(&m, 64, &[]).unwrap();
        let c = g.coarsen(8).unwrap();
        assert_eq!(c.steps(), 8);
        assert!((c.total_mass() - 1.3).abs() < 1e-14);
        assert!(g.coarsen(7).is_err());
    }
}
