//! Scenario files and the commands run on them.
//!
//! A scenario is one JSON document:
//!
//! ```json
//! {
//!   "field": { "family": "intro_example", "params": {} },
//!   "measure": { "horizon": 2.0, "atoms": [] },
//!   "config": { "p": 1.25, "tau": 2.0, "tau0": 1.0, "seed": 7, "steps": 2000 },
//!   "x0": [1.0],
//!   "options": {}
//! }
//! ```
//!
//! Every command returns its artifacts in memory; writing them is left to the
//! caller so that output is serialized and independent of the worker count.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coeffs::{
    CoefficientField, Constant, ContinuousDelay, DegeneratePair, DiscretePoints, HormanderExample3D,
    IntegralCoefficient, IntroExample, Linear,
};
use crate::delay::{build_lift, check_alignment, extended_lift, solve_lifted, DiscreteDelay, LinearDelay};
use crate::density::{density_report, log_radii, sample_terminal, DensityOptions};
use crate::error::{Error, Result};
use crate::flow::{brownian_noise, projected_jacobian, solve_sde, SolutionBundle};
use crate::hormander::{a5_certificate, closed_form_3d, span_check, NodeSelection, SpanOptions};
use crate::malliavin::{covariance, fd_consistency, log_levels, tail_estimate, CovarianceOptions};
use crate::mastereq::{refinement_study, script_r, study_tree, Check, RoughNoise, ScriptROptions, VChoice};
use crate::rng;
use crate::roughpath::{chen_defect_idx, BrownianTree};
use crate::timegrid::{Config, MeasureSpec, TimeGrid};

pub const FAMILIES: &[&str] = &[
    "constant",
    "linear",
    "geometric",
    "intro_example",
    "integral_coefficient",
    "continuous_delay",
    "discrete_points",
    "hormander_3d",
    "degenerate_pair",
    "linear_delay",
];

pub const COMMANDS: &[&str] =
    &["simulate", "malliavin", "hormander", "master-check", "rough-check", "delay-lift", "density"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub family: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    /// Monte Carlo sample count.
    pub samples: Option<usize>,
    /// Map fed to the master-equation and Itô checks.
    pub v: Option<VChoice>,
    /// Unit vector for the scalar decomposition.
    pub direction: Option<Vec<f64>>,
    pub max_depth: Option<usize>,
    pub tol: Option<f64>,
    pub node_cap: Option<usize>,
    pub nodes: Option<NodeSelection>,
    /// Levels for the small-eigenvalue tail.
    pub epsilons: Option<Vec<f64>>,
    /// Malliavin sub-grid size.
    pub malliavin_times: Option<usize>,
    /// Finite-difference bump of the noise at this grid time.
    pub bump_time: Option<f64>,
    pub bump_eps: Option<f64>,
    /// Fine steps per coarse step for rough lifts.
    pub kappa: Option<usize>,
    /// Number of seeds in refinement studies, starting at `config.seed`.
    pub seeds: Option<usize>,
    /// Charfn radii in standard deviations.
    pub radii: Option<Vec<f64>>,
    pub lattice_points: Option<usize>,
    pub lattice_width: Option<f64>,
    /// Direction `v` of the projected Jacobian `Pi_n Y_t L_0 v`.
    pub jacobian_direction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub field: FieldEntry,
    pub measure: MeasureSpec,
    pub config: Config,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub options: Options,
}

fn with_defaults<T: DeserializeOwned + Serialize + Default>(params: &Value) -> Result<T> {
    let mut base = serde_json::to_value(T::default()).expect("defaults serialize");
    match params {
        Value::Null => {}
        Value::Object(m) => {
            let obj = base.as_object_mut().expect("families serialize to objects");
            for (k, v) in m {
                obj.insert(k.clone(), v.clone());
            }
        }
        _ => return Err(Error::validation("field.params", "params must be an object")),
    }
    serde_json::from_value(base).map_err(|e| Error::validation("field.params", e.to_string()))
}

fn strict<T: DeserializeOwned>(params: &Value) -> Result<T> {
    serde_json::from_value(params.clone()).map_err(|e| Error::validation("field.params", e.to_string()))
}

#[derive(Deserialize)]
struct GeometricParams {
    mu: f64,
    sigma: f64,
}

/// Field built from a registry entry.
pub enum Field {
    Plain(Box<dyn CoefficientField>),
    Delay(DiscreteDelay<LinearDelay>),
}

impl Field {
    pub fn as_dyn(&self) -> &dyn CoefficientField {
        match self {
            Field::Plain(b) => b.as_ref(),
            Field::Delay(d) => d,
        }
    }
}

pub fn build_field(entry: &FieldEntry) -> Result<Field> {
    let p = &entry.params;
    let boxed: Box<dyn CoefficientField> = match entry.family.as_str() {
        "constant" => {
            let c: Constant = strict(p)?;
            if c.sigma.len() != c.n * c.d || c.drift.len() != c.n {
                return Err(Error::validation("field.params", "constant: drift has n entries, sigma n x d"));
            }
            Box::new(c)
        }
        "linear" => {
            let mut l: Linear = strict(p)?;
            if l.b0.is_empty() {
                l.b0 = vec![0.0; l.n];
            }
            if l.a.len() != l.n * l.n || l.s.len() != l.d || l.s.iter().any(|s| s.len() != l.n * l.n) {
                return Err(Error::validation("field.params", "linear: a is n x n, s holds d matrices n x n"));
            }
            Box::new(l)
        }
        "geometric" => {
            let g: GeometricParams = strict(p)?;
            Box::new(Linear::geometric(g.mu, g.sigma))
        }
        "intro_example" => Box::new(with_defaults::<IntroExample>(p)?),
        "integral_coefficient" => Box::new(with_defaults::<IntegralCoefficient>(p)?),
        "continuous_delay" => Box::new(with_defaults::<ContinuousDelay>(p)?),
        "discrete_points" => {
            let f: DiscretePoints = strict(p)?;
            if f.times.len() != f.weights.len() {
                return Err(Error::validation("field.params", "discrete_points: times and weights differ in length"));
            }
            Box::new(f)
        }
        "hormander_3d" => Box::new(with_defaults::<HormanderExample3D>(p)?),
        "degenerate_pair" => Box::new(DegeneratePair),
        "linear_delay" => {
            let f: LinearDelay = strict(p)?;
            f.validate()?;
            return Ok(Field::Delay(DiscreteDelay { coeffs: f }));
        }
        other => {
            return Err(Error::validation(
                "field.family",
                format!("unknown family `{other}`; known: {}", FAMILIES.join(", ")),
            ))
        }
    };
    Ok(Field::Plain(boxed))
}

/// Parsed and validated scenario with its hash.
pub struct Loaded {
    pub scenario: Scenario,
    pub hash: String,
    pub field: Field,
    pub grid: TimeGrid,
}

pub fn scenario_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn load(bytes: &[u8]) -> Result<Loaded> {
    let scenario: Scenario = serde_json::from_slice(bytes).map_err(|e| {
        let msg = e.to_string();
        let key = ["field", "measure", "config", "x0", "options"]
            .into_iter()
            .find(|k| msg.contains(&format!("`{k}`")))
            .unwrap_or("scenario");
        Error::validation(key, msg)
    })?;
    scenario.config.validate(&scenario.measure)?;
    let field = build_field(&scenario.field)?;
    let n = field.as_dyn().dims().0;
    if scenario.x0.len() != n {
        return Err(Error::validation("x0", format!("expected {n} components, got {}", scenario.x0.len())));
    }
    if scenario.x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("x0", "initial value must be finite"));
    }
    let grid = scenario.config.grid(&scenario.measure)?;
    Ok(Loaded { scenario, hash: scenario_hash(bytes), field, grid })
}

/// One output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary_line: String,
    pub artifacts: Vec<Artifact>,
}

struct Csv {
    text: String,
}

impl Csv {
    fn new(hash: &str, seed: u64, columns: &[String]) -> Self {
        let mut text = format!("# scenario_hash={hash} seed={seed}\n");
        text.push_str(&columns.join(","));
        text.push('\n');
        Csv { text }
    }

    fn row(&mut self, values: impl IntoIterator<Item = String>) {
        let v: Vec<String> = values.into_iter().collect();
        self.text.push_str(&v.join(","));
        self.text.push('\n');
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn cols(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn summary(hash: &str, seed: u64, command: &str, result: Value) -> Artifact {
    // serde_json sorts object keys; the header fields are written by hand so they come first
    let body = serde_json::to_string_pretty(&result).expect("json");
    let contents = format!(
        "{{\n  \"scenario_hash\": \"{hash}\",\n  \"seed\": {seed},\n  \"command\": \"{command}\",\n  \"result\": {}\n}}\n",
        body.replace('\n', "\n  ")
    );
    Artifact { name: "summary.json".into(), contents }
}

fn require_finite(v: &Value, what: &str) -> Result<()> {
    fn walk(v: &Value) -> bool {
        match v {
            Value::Null => false,
            Value::Array(a) => a.iter().all(walk),
            Value::Object(m) => m.values().all(walk),
            _ => true,
        }
    }
    if walk(v) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} contains non-finite values")))
    }
}

/// Solution on the scenario grid driven by the seed's Brownian stream.
pub fn simulate(l: &Loaded) -> Result<SolutionBundle> {
    let f = l.field.as_dyn();
    let d = f.dims().1;
    let noise = brownian_noise(&l.grid, d, l.scenario.config.seed, rng::stream_id(&[rng::tag::BROWNIAN, 0]));
    solve_sde(f, &l.scenario.x0, &noise, &l.grid)
}

fn span_options(o: &Options) -> SpanOptions {
    let d = SpanOptions::default();
    SpanOptions {
        max_depth: o.max_depth.unwrap_or(d.max_depth),
        tol: o.tol.unwrap_or(d.tol),
        cap: o.node_cap.unwrap_or(d.cap),
        nodes: o.nodes.unwrap_or(d.nodes),
    }
}

/// Runs `command` on a loaded scenario. `mesh_doubling` is the number of
/// halvings used by the refinement commands.
pub fn run(command: &str, l: &Loaded, mesh_doubling: usize) -> Result<RunOutput> {
    match command {
        "simulate" => cmd_simulate(l),
        "malliavin" => cmd_malliavin(l),
        "hormander" => cmd_hormander(l),
        "master-check" => cmd_refine(l, Check::Master, mesh_doubling),
        "rough-check" => cmd_refine(l, Check::Ito, mesh_doubling),
        "delay-lift" => cmd_delay(l),
        "density" => cmd_density(l),
        other => {
            Err(Error::validation("command", format!("unknown command `{other}`; known: {}", COMMANDS.join(", "))))
        }
    }
}

fn cmd_simulate(l: &Loaded) -> Result<RunOutput> {
    let (hash, seed) = (&l.hash, l.scenario.config.seed);
    let f = l.field.as_dyn();
    let n = f.dims().0;
    let b = simulate(l)?;
    let v = match &l.scenario.options.jacobian_direction {
        Some(v) if v.len() == n => v.clone(),
        Some(_) => return Err(Error::validation("options.jacobian_direction", format!("expected {n} components"))),
        None => (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
    };
    let jac = projected_jacobian(f, &b, &v)?;
    let mut head = vec!["t".to_string()];
    head.extend(cols("x", n));
    head.extend(cols("jac", n));
    let mut csv = Csv::new(hash, seed, &head);
    for j in 0..l.grid.len() {
        csv.row(
            std::iter::once(num(l.grid.t(j)))
                .chain(b.x.at(j).iter().map(|&x| num(x)))
                .chain(jac.at(j).iter().map(|&x| num(x))),
        );
    }
    let last = l.grid.len() - 1;
    let result = json!({
        "steps": l.grid.steps(),
        "terminal_state": b.x.at(last),
        "terminal_jacobian": jac.at(last),
    });
    require_finite(&result, "simulation")?;
    Ok(RunOutput {
        summary_line: format!("simulate: {} steps, |jac(T)| = {:e}", l.grid.steps(), crate::path::norm2(jac.at(last))),
        artifacts: vec![
            Artifact { name: "path.csv".into(), contents: csv.text },
            summary(hash, seed, "simulate", result),
        ],
    })
}

fn cmd_malliavin(l: &Loaded) -> Result<RunOutput> {
    let (hash, seed) = (&l.hash, l.scenario.config.seed);
    let o = &l.scenario.options;
    let c = &l.scenario.config;
    let f = l.field.as_dyn();
    let (n, d) = f.dims();
    let b = simulate(l)?;
    let mut copts = CovarianceOptions::default();
    if let Some(t) = o.malliavin_times {
        copts.times = t;
    }
    let rep = covariance(f, &b, c.tau, c.tau0, copts)?;
    let mut head = vec!["r".to_string(), "weight".to_string()];
    head.extend((0..n).flat_map(|i| (0..d).map(move |k| format!("d{}_{}", i + 1, k + 1))));
    let mut csv = Csv::new(hash, seed, &head);
    for (k, r) in rep.times.iter().enumerate() {
        csv.row([num(*r), num(rep.weights[k])].into_iter().chain(rep.derivatives[k].iter().map(|&x| num(x))));
    }
    let mut artifacts = vec![Artifact { name: "derivatives.csv".into(), contents: csv.text }];
    let mut result = json!({
        "gamma": rep.gamma,
        "gamma0": rep.gamma0,
        "lambda_min": rep.lambda_min,
        "lambda_min0": rep.lambda_min0,
    });
    if let Some(t) = o.bump_time {
        let j = l.grid.require_index(t)?;
        let fd = fd_consistency(f, &l.scenario.x0, &b.noise, &l.grid, j, 0, o.bump_eps.unwrap_or(1e-4), c.tau)?;
        result["fd_relative_gap"] = json!(fd.relative_gap);
    }
    if let Some(m) = o.samples {
        let eps = o.epsilons.clone().unwrap_or_else(|| log_levels(-6.0, -2.0, 9));
        let tail = tail_estimate(f, &l.scenario.x0, &l.grid, c.tau, c.tau0, seed, m, &eps, copts)?;
        let mut t = Csv::new(hash, seed, &["epsilon".into(), "probability".into()]);
        for (e, p) in tail.epsilons.iter().zip(&tail.probabilities) {
            t.row([num(*e), num(*p)]);
        }
        artifacts.push(Artifact { name: "tail.csv".into(), contents: t.text });
        result["tail"] = json!({
            "samples": tail.samples,
            "slope": tail.slope,
            "slope_se": tail.slope_se,
            "slope_lower": tail.slope_lower,
        });
    }
    let line = format!("malliavin: lambda_min = {:e}, lambda_min0 = {:e}", rep.lambda_min, rep.lambda_min0);
    artifacts.push(summary(hash, seed, "malliavin", result));
    Ok(RunOutput { summary_line: line, artifacts })
}

fn cmd_hormander(l: &Loaded) -> Result<RunOutput> {
    let (hash, seed) = (&l.hash, l.scenario.config.seed);
    let o = &l.scenario.options;
    let c = &l.scenario.config;
    let f = l.field.as_dyn();
    let b = simulate(l)?;
    let ti = l.grid.require_index(c.tau)?;
    let mut opts = span_options(o);
    if l.scenario.field.family == "hormander_3d" && o.nodes.is_none() {
        opts.nodes = NodeSelection::Canonical;
    }
    let rep = span_check(f, &l.grid, c.tau, &b.x, b.x.at(ti), opts)?;
    let mut csv = Csv::new(hash, seed, &["depth".into(), "lambda_min".into()]);
    for (k, lam) in rep.lambda_by_depth.iter().enumerate() {
        csv.row([(k + 1).to_string(), num(*lam)]);
    }
    let mut result = json!({
        "tau": c.tau,
        "state": b.x.at(ti),
        "lambda_min": rep.lambda_min,
        "spanning_depth": rep.spanning_depth,
        "lambda_by_depth": rep.lambda_by_depth,
        "trace": rep.trace,
    });
    if l.scenario.field.family == "hormander_3d" {
        let h: HormanderExample3D = with_defaults(&l.scenario.field.params)?;
        let path = b.x.stopped(ti);
        let st = crate::coeffs::State { grid: &l.grid, t: c.tau, step: ti, path: path.as_slice(), value: b.x.at(ti) };
        let y = b.x.at(ti);
        let ex = closed_form_3d(h.a(&st), &[y[0], y[1], y[2]])?;
        result["closed_form"] = json!({ "bracket": ex.bracket, "det": ex.det, "lambda_min": ex.lambda_min });
    }
    if let Some(m) = o.samples {
        let cert = a5_certificate(f, &l.scenario.x0, &l.grid, c.tau, seed, m, opts)?;
        result["certificate"] = json!({
            "surrogate": cert.surrogate,
            "lambda_min_min": cert.lambda_min_min,
            "lambda_min_median": cert.lambda_min_median,
            "inverse_moments": cert.inverse_moments,
            "passed": cert.passed,
        });
    }
    Ok(RunOutput {
        summary_line: format!("hormander: lambda_min = {:e}, spanning depth {:?}", rep.lambda_min, rep.spanning_depth),
        artifacts: vec![
            Artifact { name: "depths.csv".into(), contents: csv.text },
            summary(hash, seed, "hormander", result),
        ],
    })
}

fn cmd_refine(l: &Loaded, check: Check, levels: usize) -> Result<RunOutput> {
    let (hash, seed) = (&l.hash, l.scenario.config.seed);
    let o = &l.scenario.options;
    let c = &l.scenario.config;
    let f = l.field.as_dyn();
    let choice = o.v.unwrap_or(VChoice::Sigma(0));
    let kappa = o.kappa.unwrap_or(16);
    let seeds: Vec<u64> = (0..o.seeds.unwrap_or(1) as u64).map(|k| seed.wrapping_add(k)).collect();
    let window = (c.tau0, c.tau);
    let study = refinement_study(f, choice, check, &l.scenario.x0, &l.grid, levels, kappa, &seeds, window)?;
    let mut csv = Csv::new(hash, seed, &["steps".into(), "seed".into(), "residual_sup".into()]);
    for (si, s) in seeds.iter().enumerate() {
        for (k, steps) in study.steps.iter().enumerate() {
            csv.row([steps.to_string(), s.to_string(), num(study.per_seed[si][k])]);
        }
    }
    let name = if check == Check::Master { "master-check" } else { "rough-check" };
    let mut result = json!({
        "v": choice,
        "steps": study.steps,
        "mean_residual_sup": study.residuals,
        "refinement_rate": study.rate,
    });
    // script_R on the coarsest mesh when the dense operators fit
    let tree = study_tree(&l.grid, f.dims().1, seed);
    let rn = RoughNoise::from_tree(&tree, 0, kappa)?;
    let b = solve_sde(f, &l.scenario.x0, &rn.noise, &rn.grid)?;
    result["script_r"] = match script_r(f, &b, &rn.rough, window, &ScriptROptions { seed, ..Default::default() }) {
        Ok(r) => serde_json::to_value(r).expect("json"),
        Err(Error::Resource(_)) => Value::Null,
        Err(e) => return Err(e),
    };
    if let Some(z) = &o.direction {
        let s = crate::mastereq::norris_sample(f, choice, &l.scenario.x0, &l.grid, seed, z, window, false)?;
        result["norris"] = serde_json::to_value(s.quantities).expect("json");
    }
    let worst = study.residuals.iter().copied().fold(0.0, f64::max);
    if !worst.is_finite() {
        return Err(Error::Numerical("residual is not finite".into()));
    }
    Ok(RunOutput {
        summary_line: format!(
            "{name}: residual sup {:e} .. {:e}, rate {:?}",
            study.residuals[0], study.residuals[levels], study.rate
        ),
        artifacts: vec![
            Artifact { name: "refinement.csv".into(), contents: csv.text },
            summary(hash, seed, name, result),
        ],
    })
}

fn cmd_delay(l: &Loaded) -> Result<RunOutput> {
    let (hash, seed) = (&l.hash, l.scenario.config.seed);
    let Field::Delay(df) = &l.field else {
        return Err(Error::validation("field.family", "delay-lift needs the `linear_delay` family"));
    };
    let coeffs = &df.coeffs;
    let sys = build_lift(&coeffs.delays, l.scenario.measure.horizon, coeffs.n)?;
    check_alignment(&l.grid, &sys.delays)?;
    let b = simulate(l)?;
    let lifted = solve_lifted(&sys, coeffs, &l.scenario.x0, &b.noise, &l.grid)?;
    let n = coeffs.n;
    let gap = (0..l.grid.len())
        .map(|j| (0..n).map(|i| (lifted.at(j)[i] - b.x.at(j)[i]).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let mut head = vec!["t".to_string()];
    for k in 0..sys.blocks() {
        head.extend((1..=n).map(|i| format!("block{k}_x{i}")));
    }
    let mut csv = Csv::new(hash, seed, &head);
    for j in 0..l.grid.len() {
        csv.row(std::iter::once(num(l.grid.t(j))).chain(lifted.at(j).iter().map(|&x| num(x))));
    }
    // Chen check of the extended lift from a fine tree
    let kappa = l.scenario.options.kappa.unwrap_or(16);
    let chen = if kappa.is_power_of_two() && l.grid.steps() * kappa <= 1 << 16 {
        let tree = BrownianTree::new(l.grid.clone(), coeffs.d, seed, rng::stream_id(&[rng::tag::BROWNIAN, 1]));
        let (fg, fine) = tree.sample(kappa.trailing_zeros() as usize);
        let rp = extended_lift(&fine, &fg, &sys, kappa)?;
        let len = rp.grid().len();
        let stride = (len / 48).max(1);
        let mut worst = 0.0f64;
        for s in (0..len).step_by(stride) {
            for u in (s..len).step_by(stride) {
                for t in (u..len).step_by(stride) {
                    worst = chen_defect_idx(&rp, s, u, t).iter().fold(worst, |m, x| m.max(x.abs()));
                }
            }
        }
        Some(worst)
    } else {
        None
    };
    let result = json!({
        "blocks": sys.blocks(),
        "dimension": sys.dim(),
        "delays": sys.delays,
        "composite": sys.composite(),
        "block0_max_gap": gap,
        "extended_lift_chen_defect": chen,
    });
    Ok(RunOutput {
        summary_line: format!("delay-lift: L = {}, block-0 gap {gap:e}", sys.blocks()),
        artifacts: vec![
            Artifact { name: "lifted.csv".into(), contents: csv.text },
            summary(hash, seed, "delay-lift", result),
        ],
    })
}

fn cmd_density(l: &Loaded) -> Result<RunOutput> {
    let (hash, seed) = (&l.hash, l.scenario.config.seed);
    let o = &l.scenario.options;
    let f = l.field.as_dyn();
    let n = f.dims().0;
    let m = o.samples.unwrap_or(10_000);
    let samples = sample_terminal(f, &l.scenario.x0, &l.grid, l.scenario.config.tau, seed, m)?;
    let d = DensityOptions::default();
    let opts = DensityOptions {
        width: o.lattice_width.unwrap_or(d.width),
        points: o.lattice_points.unwrap_or(if n == 1 { d.points } else { 11 }),
        radii: o.radii.clone().unwrap_or_else(|| log_radii(0.25, 40.0, 24)),
    };
    let rep = density_report(&samples, &opts)?;
    let mut head = cols("x", n);
    head.push("density".into());
    let mut kde_csv = Csv::new(hash, seed, &head);
    for k in 0..rep.lattice.len() {
        kde_csv.row(rep.lattice.point(k).into_iter().map(num).chain(std::iter::once(num(rep.kde[k]))));
    }
    let mut cf = Csv::new(hash, seed, &["axis".into(), "frequency".into(), "modulus".into()]);
    for dd in &rep.directions {
        for (fr, md) in dd.frequencies.iter().zip(&dd.modulus) {
            cf.row([(dd.axis + 1).to_string(), num(*fr), num(*md)]);
        }
    }
    let result = json!({
        "samples": rep.samples,
        "bandwidth": rep.bandwidth,
        "mass": rep.mass,
        "decay_slopes": rep.directions.iter().map(|d| d.slope).collect::<Vec<_>>(),
        "flat_axes": rep.flat_axes.iter().map(|a| a + 1).collect::<Vec<_>>(),
    });
    Ok(RunOutput {
        summary_line: format!("density: M = {m}, mass {:.6}, flat axes {:?}", rep.mass, rep.flat_axes),
        artifacts: vec![
            Artifact { name: "kde.csv".into(), contents: kde_csv.text },
            Artifact { name: "charfn.csv".into(), contents: cf.text },
            summary(hash, seed, "density", result),
        ],
    })
}

/// Writes artifacts into `dir` in order.
pub fn write_artifacts(dir: &std::path::Path, artifacts: &[Artifact]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for a in artifacts {
        std::fs::write(dir.join(&a.name), &a.contents)?;
    }
    Ok(())
}
