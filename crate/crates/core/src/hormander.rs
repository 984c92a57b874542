//! Lie brackets of path-dependent vector fields and bracket spanning checks.
//!
//! Brackets are evaluated numerically at a state. With
//! `[V1, V2] = dV1 V2 - dV2 V1` (vertical derivatives), the bracket of the
//! two diffusion fields of the 3D example is `(0, 0, -1)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{
    closed_form_lambda_min, component, vertical_derivative_of, CoefficientField, Frozen, Gradient, State, VectorField,
    Which,
};
use crate::error::{Error, Result};
use crate::flow::solve_sde;
use crate::malliavin::sample_noise;
use crate::path::GridPath;
use crate::timegrid::TimeGrid;

pub const DEFAULT_MAX_DEPTH: usize = 3;
pub const DEFAULT_NODE_CAP: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-8;

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    m.chunks(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// `dV1 V2 - dV2 V1` at `x`, finite differences at nesting `level`.
pub fn lie_bracket(v1: &dyn VectorField, v2: &dyn VectorField, x: &State, level: u32) -> Result<Vec<f64>> {
    let n = x.n();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    v1.eval(x, &mut a);
    v2.eval(x, &mut b);
    let d1 = vertical_derivative_of(v1, x, level)?;
    let d2 = vertical_derivative_of(v2, x, level)?;
    let out: Vec<f64> = matvec(&d1, &b).iter().zip(matvec(&d2, &a)).map(|(p, q)| p - q).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Lie bracket".into()));
    }
    Ok(out)
}

/// `[s_{k_0}, [s_{k_1}, ... s_{k_j}]]`, stored as its leaf indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BracketNode {
    pub leaves: Vec<usize>,
}

impl BracketNode {
    pub fn leaf(k: usize) -> Self {
        BracketNode { leaves: vec![k] }
    }

    pub fn depth(&self) -> usize {
        self.leaves.len() - 1
    }

    /// Innermost pair in increasing order. Leaves count as canonical.
    pub fn canonical(&self) -> bool {
        match self.leaves.len() {
            1 => true,
            l => self.leaves[l - 2] < self.leaves[l - 1],
        }
    }

    pub fn label(&self) -> String {
        let mut s = format!("s{}", self.leaves[self.leaves.len() - 1] + 1);
        for k in self.leaves.iter().rev().skip(1) {
            s = format!("[s{},{s}]", k + 1);
        }
        s
    }

    pub fn eval(&self, field: &dyn CoefficientField, x: &State) -> Result<Vec<f64>> {
        let mut out = vec![0.0; field.dims().0];
        NodeField { field, leaves: &self.leaves }.eval(x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("bracket {} is not finite", self.label())));
        }
        Ok(out)
    }
}

struct NodeField<'a> {
    field: &'a dyn CoefficientField,
    leaves: &'a [usize],
}

impl VectorField for NodeField<'_> {
    fn dim(&self) -> usize {
        self.field.dims().0
    }

    fn eval(&self, x: &State, out: &mut [f64]) {
        let k = self.leaves[0];
        if self.leaves.len() == 1 {
            self.field.eval(Which::Diffusion(k), x, out);
            return;
        }
        let inner = NodeField { field: self.field, leaves: &self.leaves[1..] };
        let level = (self.leaves.len() - 1) as u32;
        match lie_bracket(&component(self.field, Which::Diffusion(k)), &inner, x, level) {
            Ok(v) => out.copy_from_slice(&v),
            Err(_) => out.fill(f64::NAN),
        }
    }

    fn gradient(&self, x: &State) -> Option<Gradient> {
        match self.leaves {
            [k] => self.field.gradient(Which::Diffusion(*k), x),
            _ => None,
        }
    }
}

/// `Sigma_0, ..., Sigma_J` with `Sigma_j = { [s_k, V] : V in Sigma_{j-1} }`.
pub fn generate_sigma_sets(d: usize, max_depth: usize, cap: usize) -> Result<Vec<Vec<BracketNode>>> {
    let cost = (max_depth.max(1) as f64) * (d as f64).powi(max_depth as i32 + 1);
    if cost > cap as f64 {
        return Err(Error::Resource(format!(
            "bracket sets up to depth {max_depth} with {d} fields exceed the cap of {cap} nodes"
        )));
    }
    let mut sets = vec![(0..d).map(BracketNode::leaf).collect::<Vec<_>>()];
    for _ in 0..max_depth {
        let prev = sets.last().unwrap();
        let next = (0..d)
            .flat_map(|k| {
                prev.iter().map(move |v| {
                    let mut leaves = vec![k];
                    leaves.extend_from_slice(&v.leaves);
                    BracketNode { leaves }
                })
            })
            .collect();
        sets.push(next);
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSelection {
    /// Every node of every `Sigma_j`.
    #[default]
    All,
    /// Drops nodes whose innermost pair is `[s_k, s_l]` with `k >= l`.
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanOptions {
    pub max_depth: usize,
    /// Relative to the Gram trace.
    pub tol: f64,
    pub cap: usize,
    pub nodes: NodeSelection,
}

impl Default for SpanOptions {
    fn default() -> Self {
        SpanOptions { max_depth: DEFAULT_MAX_DEPTH, tol: DEFAULT_TOL, cap: DEFAULT_NODE_CAP, nodes: NodeSelection::All }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HormanderReport {
    pub lambda_min: f64,
    pub spanning_depth: Option<usize>,
    pub theta_lower: Option<f64>,
    /// Smallest Gram eigenvalue after adding each depth.
    pub lambda_by_depth: Vec<f64>,
    pub trace: f64,
}

fn sym_lambda_min(g: &[f64], n: usize) -> f64 {
    SymmetricEigen::new(DMatrix::from_row_slice(n, n, g)).eigenvalues.min()
}

pub fn span_check_state(field: &dyn CoefficientField, x: &State, opts: SpanOptions) -> Result<HormanderReport> {
    let (n, d) = field.dims();
    let sets = generate_sigma_sets(d, opts.max_depth, opts.cap)?;
    let mut gram = vec![0.0; n * n];
    let mut lambda_by_depth = Vec::with_capacity(sets.len());
    let mut spanning_depth = None;
    let mut trace = 0.0;
    for (depth, set) in sets.iter().enumerate() {
        for node in set {
            if opts.nodes == NodeSelection::Canonical && !node.canonical() {
                continue;
            }
            let v = node.eval(field, x)?;
            for a in 0..n {
                for b in 0..n {
                    gram[a * n + b] += v[a] * v[b];
                }
            }
        }
        let lam = sym_lambda_min(&gram, n).max(0.0);
        trace = (0..n).map(|i| gram[i * n + i]).sum();
        if spanning_depth.is_none() && trace > 0.0 && lam > opts.tol * trace {
            spanning_depth = Some(depth);
        }
        lambda_by_depth.push(lam);
    }
    Ok(HormanderReport {
        lambda_min: *lambda_by_depth.last().unwrap(),
        spanning_depth,
        theta_lower: field.theta_lower(x),
        lambda_by_depth,
        trace,
    })
}

/// Span check at `(t, x_t)` with the path frozen after `t`.
pub fn span_check(
    field: &dyn CoefficientField,
    grid: &TimeGrid,
    t: f64,
    path: &GridPath,
    value: &[f64],
    opts: SpanOptions,
) -> Result<HormanderReport> {
    let frozen = Frozen::new(grid, t, path, value)?;
    span_check_state(field, &frozen.state(grid), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example3D {
    pub bracket: [f64; 3],
    pub det: f64,
    pub lambda_min: f64,
}

/// Closed forms for `A1 = e_1`, `A2 = (0, a + sin y_2, y_1)`.
pub fn closed_form_3d(a: f64, y: &[f64; 3]) -> Result<Example3D> {
    if !(a >= 2.0) || !a.is_finite() {
        return Err(Error::domain(format!("a = {a} must be at least 2")));
    }
    Ok(Example3D { bracket: [0.0, 0.0, -1.0], det: -(a + y[1].sin()), lambda_min: closed_form_lambda_min(a, y) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A5Certificate {
    /// Monte Carlo surrogate: covers only the sampled states.
    pub surrogate: bool,
    pub tau: f64,
    pub reports: Vec<HormanderReport>,
    pub lambda_min_min: f64,
    pub lambda_min_median: f64,
    /// `(q, E[lambda_min^-q])`; `None` when some sample has `lambda_min = 0`.
    pub inverse_moments: Vec<(u32, Option<f64>)>,
    pub passed: bool,
}

/// Span checks at `X_tau` over `samples` solution paths.
pub fn a5_certificate(
    field: &dyn CoefficientField,
    x0: &[f64],
    grid: &TimeGrid,
    tau: f64,
    seed: u64,
    samples: usize,
    opts: SpanOptions,
) -> Result<A5Certificate> {
    let ti = grid.require_index(tau)?;
    let d = field.dims().1;
    let reports: Vec<HormanderReport> = (0..samples as u64)
        .into_par_iter()
        .map(|m| {
            let noise = sample_noise(grid, d, seed, m);
            let b = solve_sde(field, x0, &noise, grid)?;
            let frozen = Frozen::at_index(grid, &b.x, ti);
            span_check_state(field, &frozen.state(grid), opts)
        })
        .collect::<Result<_>>()?;
    let mut lams: Vec<f64> = reports.iter().map(|r| r.lambda_min).collect();
    lams.sort_by(f64::total_cmp);
    let median = match lams.len() {
        0 => f64::NAN,
        l if l % 2 == 1 => lams[l / 2],
        l => 0.5 * (lams[l / 2 - 1] + lams[l / 2]),
    };
    let inverse_moments = [1u32, 2, 4]
        .iter()
        .map(|&q| {
            let ok = lams.iter().all(|&l| l > 0.0);
            (q, ok.then(|| lams.iter().map(|l| l.powi(-(q as i32))).sum::<f64>() / lams.len() as f64))
        })
        .collect();
    Ok(A5Certificate {
        surrogate: true,
        tau,
        passed: !reports.is_empty() && reports.iter().all(|r| r.spanning_depth.is_some()),
        lambda_min_min: lams.first().copied().unwrap_or(f64::NAN),
        lambda_min_median: median,
        reports,
        inverse_moments,
    })
}
