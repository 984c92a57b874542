//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach stdout.

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use pathdens::coeffs::{
    component, CoefficientField, Constant, ContinuousDelay, DegeneratePair, Frozen, HormanderExample3D,
    IntegralCoefficient, IntroExample, Linear, State, VectorField, Which,
};
use pathdens::delay::{build_lift, extended_lift, method_of_steps, solve_lifted, DiscreteDelay, LinearDelay};
use pathdens::density::{density_report, sample_terminal, DensityOptions};
use pathdens::flow::{brownian_noise, flow_operators, projected_jacobian, solve_sde, FlowRequest};
use pathdens::hormander::{closed_form_3d, lie_bracket, span_check_state, BracketNode, NodeSelection, SpanOptions};
use pathdens::malliavin::{covariance, fd_consistency, lambda_min, log_levels, tail_estimate, CovarianceOptions};
use pathdens::mastereq::{
    master_equation_residual, refinement_rate, refinement_study, study_tree, with_v, Check, MasterOptions, RoughNoise,
    VChoice,
};
use pathdens::roughpath::{
    geometric_defect_rms, increments, ito_from_strat, lift, rough_integral, strat_from_ito, BrownianTree,
    ControlledPath, RoughPath,
};
use pathdens::timegrid::{build_grid, hs_norm_s, indicator_distance, MeasureSpec, TimeGrid};
use pathdens::GridPath;

type Outcome = (bool, String);

fn grid(t: f64, n: usize) -> TimeGrid {
    build_grid(&MeasureSpec::lebesgue(t), n, &[]).unwrap()
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len() as f64;
    let (xm, ym) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let sxx: f64 = x.iter().map(|a| (a - xm).powi(2)).sum();
    sxy / sxx
}

fn intro_jacobian() -> Outcome {
    let start = Instant::now();
    let g = grid(2.0, 2000);
    let f = IntroExample::default();
    let b = solve_sde(&f, &[1.0], &brownian_noise(&g, 1, 7, 0), &g).unwrap();
    let jac = projected_jacobian(&f, &b, &[1.0]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let sup = (1000..=2000).map(|j| (jac.at(j)[0] - (-1f64).exp() * (2.0 - g.t(j))).abs()).fold(0.0, f64::max);
    let end = jac.at(2000)[0].abs();
    (sup <= 0.05 && end <= 0.02 && secs < 1.0, format!("sup error {sup:.3e}, |J(2)| {end:.3e}, {secs:.3}s"))
}

fn indicator_distance_exact() -> Outcome {
    let p = 1.25;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grids = [grid(1.0, 256), grid(3.0, 1000)];
    let mut worst = 0.0f64;
    for k in 0..100 {
        let g = &grids[k % 2];
        let i = rng.random_range(0..g.steps());
        let j = rng.random_range(i + 1..=g.steps());
        let (t, dt) = (g.t(i), g.t(j) - g.t(i));
        let got = indicator_distance(t, dt, g, p).unwrap();
        let want = dt.powf(1.0 / p);
        worst = worst.max((got - want).abs() / want);
    }
    (worst <= 8.0 * f64::EPSILON, format!("max relative gap {worst:.2e} over 100 pairs"))
}

fn hs_norm() -> Outcome {
    // dyadic grids, so both sides are exact in floating point
    let cases = [
        (MeasureSpec::lebesgue(1.0), 64),
        (MeasureSpec { horizon: 2.0, atoms: vec![(0.5, 0.25), (1.0, 1.5), (2.0, 0.125)] }, 128),
    ];
    let mut ok = true;
    let mut checked = 0;
    for (m, steps) in &cases {
        let g = build_grid(m, *steps, &[]).unwrap();
        for j in 0..g.len() {
            let t = g.t(j);
            let atoms: f64 = m.atoms.iter().filter(|a| a.0 >= t).map(|a| a.1).sum();
            for n in 1..4 {
                let want = n as f64 * ((m.horizon - t) + atoms + 1.0);
                ok &= hs_norm_s(t, &g, n).unwrap() == want;
                checked += 1;
            }
        }
    }
    (ok, format!("{checked} exact comparisons, with and without atoms"))
}

fn max_chen(rp: &RoughPath) -> f64 {
    let table = rp.area_table();
    let n = rp.grid().len();
    let d = rp.dim();
    let d2 = d * d;
    let at = |s: usize, t: usize| &table[s][(t - s - 1) * d2..(t - s) * d2];
    let p = rp.path();
    let mut worst = 0.0f64;
    for s in 0..n {
        for u in s + 1..n {
            for t in u + 1..n {
                let (st, su, ut) = (at(s, t), at(s, u), at(u, t));
                for i in 0..d {
                    let x = p.at(u)[i] - p.at(s)[i];
                    for k in 0..d {
                        let y = p.at(t)[k] - p.at(u)[k];
                        worst = worst.max((st[i * d + k] - su[i * d + k] - ut[i * d + k] - x * y).abs());
                    }
                }
            }
        }
    }
    worst
}

fn chen_and_geometric() -> Outcome {
    let start = Instant::now();
    let base = grid(1.0, 256);
    let trees: Vec<BrownianTree> = (0..20).map(|s| BrownianTree::new(base.clone(), 3, s, 4)).collect();
    let per: Vec<(f64, bool, [f64; 3])> = trees
        .par_iter()
        .map(|tree| {
            let (fg, fine) = tree.sample(2);
            let ito = lift(&fine, &fg, 4).unwrap();
            let chen = max_chen(&ito);
            let strat = strat_from_ito(&ito).unwrap();
            let mut exact = ito_from_strat(&strat).unwrap() == ito;
            for j in 0..ito.grid().steps() {
                let (a, c) = (ito.interval_area(j), strat.interval_area(j));
                let h = ito.grid().dt(j);
                for i in 0..3 {
                    for k in 0..3 {
                        let want = if i == k { a[i * 3 + k] + h / 2.0 } else { a[i * 3 + k] };
                        exact &= c[i * 3 + k] == want;
                    }
                }
            }
            let mut rms = [0.0; 3];
            for (slot, level) in [2usize, 4, 6].into_iter().enumerate() {
                let (fg, fine) = tree.sample(level);
                let rp = strat_from_ito(&lift(&fine, &fg, 1 << level).unwrap()).unwrap();
                rms[slot] = geometric_defect_rms(&rp);
            }
            (chen, exact, rms)
        })
        .collect();
    let chen = per.iter().map(|p| p.0).fold(0.0, f64::max);
    let exact = per.iter().all(|p| p.1);
    let rms: Vec<f64> = (0..3).map(|k| per.iter().map(|p| p.2[k]).sum::<f64>() / per.len() as f64).collect();
    let slope = ls_slope(&[4f64.ln(), 16f64.ln(), 64f64.ln()], &rms.iter().map(|r| r.ln()).collect::<Vec<_>>());
    let secs = start.elapsed().as_secs_f64();
    let ok = chen <= 1e-12 && exact && (slope + 0.5).abs() <= 0.1 && secs < 30.0;
    (ok, format!("Chen max {chen:.2e}, correction exact {exact}, RMS slope in kappa {slope:.3}, {secs:.1}s"))
}

fn rough_vs_ito() -> Outcome {
    let base = grid(1.0, 64);
    let kappas = [4usize, 8, 16, 32];
    let seeds = 32u64;
    let errs: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let tree = BrownianTree::new(base.clone(), 1, seed, 5);
            kappas
                .iter()
                .map(|&k| {
                    let (fg, fine) = tree.sample(k.trailing_zeros() as usize);
                    let rp = lift(&fine, &fg, k).unwrap();
                    let b = rp.path().clone();
                    let u = ControlledPath::new(b.clone(), GridPath::constant(&[1.0], b.len()), 1).unwrap();
                    let r = rough_integral(&u, &rp, (0.0, 1.0)).unwrap();
                    (0..b.len())
                        .map(|j| (r.values.at(j)[0] - (b.at(j)[0].powi(2) - base.t(j)) / 2.0).abs())
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();
    let mean: Vec<f64> = (0..kappas.len()).map(|k| errs.iter().map(|e| e[k]).sum::<f64>() / seeds as f64).collect();
    let rate = -ls_slope(
        &kappas.iter().map(|&k| (k as f64).log2()).collect::<Vec<_>>(),
        &mean.iter().map(|e| e.log2()).collect::<Vec<_>>(),
    );
    (rate >= 0.4, format!("mean sup errors {}, rate {rate:.3}", sci(&mean)))
}

fn inverse_flow() -> Outcome {
    let f = Linear::geometric(0.1, 0.4);
    let base = grid(1.0, 512);
    let per: Vec<Vec<f64>> = (0..8u64)
        .into_par_iter()
        .map(|seed| {
            let tree = BrownianTree::new(base.clone(), 1, seed, 6);
            (0..4)
                .map(|lv| {
                    let (g, b) = tree.sample(lv);
                    let bundle = solve_sde(&f, &[1.0], &increments(&b), &g).unwrap();
                    let last = g.steps();
                    let req =
                        FlowRequest { snapshots: vec![last], jacobian: true, inverse: true, ..Default::default() };
                    flow_operators(&f, &bundle, &req).unwrap().inverse_residual(last).unwrap()
                })
                .collect()
        })
        .collect();
    let steps = [512usize, 1024, 2048, 4096];
    let mean: Vec<f64> = (0..4).map(|k| per.iter().map(|r| r[k]).sum::<f64>() / per.len() as f64).collect();
    let rate = refinement_rate(&steps, &mean).unwrap_or(f64::NAN);

    let g = grid(1.0, 64);
    let fields: Vec<(Box<dyn CoefficientField>, Vec<f64>)> = vec![
        (Box::new(IntroExample::default()), vec![1.0]),
        (Box::new(IntegralCoefficient::default()), vec![0.5]),
        (Box::new(ContinuousDelay::default()), vec![0.2]),
        (Box::new(HormanderExample3D::default()), vec![0.1, -0.2, 0.3]),
    ];
    let mut gap = 0.0f64;
    for (field, x0) in &fields {
        let (n, d) = field.dims();
        let b = solve_sde(field.as_ref(), x0, &brownian_noise(&g, d, 3, 0), &g).unwrap();
        let req = FlowRequest { snapshots: vec![16, 40, 64], jacobian: true, inverse: true, ..Default::default() };
        let ops = flow_operators(field.as_ref(), &b, &req).unwrap();
        for (tau, s) in [(64, 16), (64, 40), (40, 16)] {
            let v = pathdens::coeffs::lift(&vec![1.0; n], g.t(s), &g);
            let a = ops.j_tau_s(tau, s, &v).unwrap();
            let c = ops.j_tau_s_directional(tau, s, &v);
            for (x, y) in a.iter().zip(&c) {
                gap = gap.max((x - y).abs() / x.abs().max(1.0));
            }
        }
    }
    (
        rate >= 0.45 && gap <= 1e-8,
        format!("||ZY - I|| at T {}, rate {rate:.3}; directional vs operator gap {gap:.1e}", sci(&mean)),
    )
}

fn malliavin_checks() -> Outcome {
    let g = grid(1.0, 4096);
    let cases: Vec<(&str, Box<dyn CoefficientField>, Vec<f64>)> = vec![
        ("intro", Box::new(IntroExample::default()), vec![1.0]),
        ("geometric", Box::new(Linear::geometric(0.1, 0.4)), vec![1.0]),
        ("integral", Box::new(IntegralCoefficient::default()), vec![0.5]),
        ("delay", Box::new(ContinuousDelay::default()), vec![0.2]),
    ];
    let mut worst_fd = 0.0f64;
    for (_, f, x0) in &cases {
        let noise = brownian_noise(&g, 1, 4, 1);
        for j in [1, 1024, 2048, 3000] {
            let r = fd_consistency(f.as_ref(), x0, &noise, &g, j, 0, 1e-4, 1.0).unwrap();
            worst_fd = worst_fd.max(r.relative_gap);
        }
    }
    let gs = grid(1.0, 256);
    let mut order = f64::INFINITY;
    let ordered: Vec<(Box<dyn CoefficientField>, Vec<f64>)> = vec![
        (Box::new(HormanderExample3D::default()), vec![0.0; 3]),
        (Box::new(IntegralCoefficient::default()), vec![0.5]),
        (Box::new(Linear::geometric(0.1, 0.4)), vec![1.0]),
        (Box::new(DegeneratePair), vec![0.3, 0.1]),
    ];
    for (f, x0) in &ordered {
        let (n, d) = f.dims();
        for seed in 0..5 {
            let b = solve_sde(f.as_ref(), x0, &brownian_noise(&gs, d, seed, 0), &gs).unwrap();
            let r = covariance(f.as_ref(), &b, 1.0, 0.5, CovarianceOptions::default()).unwrap();
            let diff: Vec<f64> = r.gamma.iter().zip(&r.gamma0).map(|(a, c)| a - c).collect();
            let scale = r.gamma.iter().map(|x| x.abs()).fold(1e-300, f64::max);
            order = order.min(lambda_min(&diff, n) / scale);
        }
    }
    let f = Constant::brownian(2);
    let b = solve_sde(&f, &[0.0, 0.0], &brownian_noise(&gs, 2, 1, 0), &gs).unwrap();
    let tau = 0.75;
    let r = covariance(&f, &b, tau, 0.25, CovarianceOptions::default()).unwrap();
    let id = r.gamma.iter().zip([tau, 0.0, 0.0, tau]).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
    (
        worst_fd <= 0.05 && order >= -1e-12 && id <= 1e-12,
        format!(
            "max FD gap {:.2}%, min eig(gamma - gamma0)/|gamma| {order:.1e}, |gamma - tau I| {id:.1e}",
            100.0 * worst_fd
        ),
    )
}

struct NoOracle<'a>(&'a dyn VectorField);

impl VectorField for NoOracle<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &State, out: &mut [f64]) {
        self.0.eval(x, out)
    }
}

fn hormander_example() -> Outcome {
    let start = Instant::now();
    let g = grid(1.0, 16);
    let mut fd_gap = 0.0f64;
    let mut oracle_exact = true;
    let mut lam_gap = 0.0f64;
    let mut det_exact = true;
    let axis = |k: usize, lo: f64, hi: f64| lo + (hi - lo) * k as f64 / 9.0;
    for ia in 0..10 {
        let a = axis(ia, 2.0, 3.0);
        let f = HormanderExample3D::with_fixed(a);
        for i1 in 0..10 {
            for i2 in 0..10 {
                let y = [axis(i1, -3.0, 3.0), axis(i2, -3.0, 3.0), 0.4];
                let path = GridPath::constant(&y, g.len());
                let fr = Frozen::new(&g, 0.5, &path, &y).unwrap();
                let x = fr.state(&g);
                let (c1, c2) = (component(&f, Which::Diffusion(0)), component(&f, Which::Diffusion(1)));
                let fd = lie_bracket(&NoOracle(&c1), &NoOracle(&c2), &x, 0).unwrap();
                fd_gap = fd.iter().zip([0.0, 0.0, -1.0]).map(|(u, e)| (u - e).abs()).fold(fd_gap, f64::max);
                oracle_exact &= BracketNode { leaves: vec![0, 1] }.eval(&f, &x).unwrap() == vec![0.0, 0.0, -1.0];
                let opts = SpanOptions { max_depth: 1, nodes: NodeSelection::Canonical, ..Default::default() };
                let rep = span_check_state(&f, &x, opts).unwrap();
                let closed = closed_form_3d(a, &y).unwrap();
                lam_gap = lam_gap.max((rep.lambda_min - closed.lambda_min).abs());
                // det of the columns (s1, s2, [s1, s2]) by cofactors along s1 = e1
                let mut s2 = [0.0; 3];
                c2.eval(&x, &mut s2);
                let br = BracketNode { leaves: vec![0, 1] }.eval(&f, &x).unwrap();
                let det = s2[1] * br[2] - s2[2] * br[1];
                det_exact &= det == closed.det && closed.det == -(a + y[1].sin());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        fd_gap <= 1e-6 && oracle_exact && lam_gap <= 1e-8 && det_exact && secs < 5.0,
        format!("FD bracket gap {fd_gap:.1e}, oracle exact {oracle_exact}, lambda gap {lam_gap:.1e}, det exact {det_exact}, {secs:.2}s"),
    )
}

fn tail() -> Outcome {
    let start = Instant::now();
    let g = grid(1.0, 512);
    // tenth-decade levels: at this M only the top decade holds any samples
    let eps = log_levels(-6.0, -2.0, 41);
    let h = tail_estimate(
        &HormanderExample3D::default(),
        &[0.0; 3],
        &g,
        1.0,
        0.5,
        1,
        10_000,
        &eps,
        CovarianceOptions::default(),
    )
    .unwrap();
    let gd = grid(1.0, 128);
    let dp = tail_estimate(&DegeneratePair, &[0.3, 0.1], &gd, 1.0, 0.5, 1, 1000, &[1e-8], CovarianceOptions::default())
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (slope, lower) = (h.slope.unwrap_or(f64::NAN), h.slope_lower.unwrap_or(f64::NAN));
    (
        slope >= 1.0 && lower > 0.0 && dp.probabilities[0] == 1.0 && secs < 600.0,
        format!(
            "P(1e-2) {:.2e}, levels with P > 0: {}, slope {slope:.2} (lower {lower:.2}), degenerate P(1e-8) {}, {secs:.0}s",
            h.probabilities[40],
            h.probabilities.iter().filter(|&&p| p > 0.0).count(),
            dp.probabilities[0]
        ),
    )
}

fn master_equation() -> Outcome {
    let start = Instant::now();
    let f = Constant::new(vec![0.0, 0.0], vec![1.0, 0.5, -0.2, 2.0], 2);
    let tree = study_tree(&grid(1.0, 64), 2, 3);
    let rn = RoughNoise::from_tree(&tree, 1, 16).unwrap();
    let b = solve_sde(&f, &[0.1, 0.2], &rn.noise, &rn.grid).unwrap();
    let constant = with_v(&f, VChoice::Sigma(0), |v| {
        master_equation_residual(&f, v, &b, &rn.rough, (0.25, 1.0), &MasterOptions::default())
    })
    .unwrap();

    let h = HormanderExample3D::default();
    let x0 = [0.1, -0.2, 0.3];
    let tree = study_tree(&grid(1.0, 128), h.dims().1, 5);
    let rn = RoughNoise::from_tree(&tree, 0, 16).unwrap();
    let b = solve_sde(&h, &x0, &rn.noise, &rn.grid).unwrap();
    let mut at_start = 0.0f64;
    for choice in [VChoice::Sigma(0), VChoice::Sigma(1), VChoice::Identity] {
        let r = with_v(&h, choice, |v| {
            master_equation_residual(&h, v, &b, &rn.rough, (0.5, 1.0), &MasterOptions::default())
        })
        .unwrap();
        at_start = at_start.max(r.residuals[0].abs());
    }

    let seeds: Vec<u64> = (0..8).collect();
    let lin = refinement_study(
        &Linear::geometric(0.1, 0.5),
        VChoice::Sigma(0),
        Check::Master,
        &[1.0],
        &grid(1.0, 512),
        3,
        16,
        &seeds,
        (0.5, 1.0),
    )
    .unwrap();
    let hor = refinement_study(&h, VChoice::Sigma(0), Check::Master, &x0, &grid(1.0, 512), 3, 16, &seeds, (0.5, 1.0))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let lin_rate = lin.rate.unwrap_or(f64::NAN);
    // with V = s1 = e1 the discrete identity holds exactly, so there is nothing left to decay
    let hor_exact = hor.per_seed.iter().flatten().all(|&r| r <= 1e-12);
    let hor_ok = hor_exact || hor.rate.is_some_and(|r| r >= 0.4);
    let hor_note = match (hor_exact, hor.rate) {
        (true, _) => format!("hormander s1 residual <= 1e-12 on every mesh ({})", sci(&hor.residuals)),
        (false, r) => format!("hormander s1 rate {r:?}"),
    };
    (
        at_start == 0.0 && constant.residual_sup <= 1e-12 && lin_rate >= 0.4 && hor_ok && secs < 300.0,
        format!(
            "start residual {at_start}, constant {:.1e}, linear rate {lin_rate:.3}, {hor_note}, {secs:.0}s",
            constant.residual_sup
        ),
    )
}

fn delay_lift() -> Outcome {
    let g = grid(1.0, 600);
    let hs = [0.2, 0.35];
    let f = LinearDelay {
        n: 1,
        d: 1,
        delays: hs.to_vec(),
        drift: vec![vec![-0.4], vec![0.7], vec![0.1]],
        drift_const: vec![0.0],
        diffusion: vec![vec![vec![0.0], vec![0.5], vec![0.0]]],
        diffusion_const: vec![0.3],
    };
    let sys = build_lift(&hs, 1.0, 1).unwrap();
    let mut exact = true;
    for seed in 0..5 {
        let noise = brownian_noise(&g, 1, seed, 0);
        let lifted = solve_lifted(&sys, &f, &[0.8], &noise, &g).unwrap();
        let direct = solve_sde(&DiscreteDelay { coeffs: f.clone() }, &[0.8], &noise, &g).unwrap();
        exact &= (0..g.len()).all(|j| lifted.at(j)[0] == direct.x.at(j)[0]);
    }

    let h = 0.25;
    let det = LinearDelay {
        n: 1,
        d: 1,
        delays: vec![h],
        drift: vec![vec![0.0], vec![-1.0]],
        drift_const: vec![0.0],
        diffusion: vec![vec![vec![0.0], vec![0.0]]],
        diffusion_const: vec![0.0],
    };
    let dsys = build_lift(&[h], 1.0, 1).unwrap();
    let mut scaled = Vec::new();
    for n in [200, 400, 800, 1600] {
        let g = grid(1.0, n);
        let x = solve_lifted(&dsys, &det, &[1.0], &GridPath::zeros(1, n), &g).unwrap();
        let e = (0..g.len()).map(|j| (x.at(j)[0] - method_of_steps(-1.0, h, 1.0, g.t(j))).abs()).fold(0.0, f64::max);
        scaled.push(e * n as f64);
    }
    let bounded = scaled.iter().all(|&e| e <= 1.0) && scaled[3] <= 1.1 * scaled[0];

    let gb = grid(1.0, 128);
    let tree = BrownianTree::new(gb.clone(), 2, 8, 0);
    let (fg, fine) = tree.sample(4);
    let csys = build_lift(&[0.25, 0.375], 1.0, 2).unwrap();
    let rp = extended_lift(&fine, &fg, &csys, 16).unwrap();
    let chen = max_chen(&rp);
    (
        exact && bounded && chen <= 1e-12,
        format!("block 0 bit-exact {exact}, method-of-steps error x N {scaled:.3?}, extended-lift Chen {chen:.1e}"),
    )
}

fn normal_pdf(x: f64) -> f64 {
    (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn density() -> Outcome {
    let g = grid(1.0, 512);
    let s = sample_terminal(&Constant::brownian(1), &[0.0], &g, 1.0, 11, 100_000).unwrap();
    let rep = density_report(&s, &DensityOptions::default()).unwrap();
    let kde =
        (0..rep.lattice.len()).map(|k| (rep.kde[k] - normal_pdf(rep.lattice.point(k)[0])).abs()).fold(0.0, f64::max);
    let slope = rep.directions[0].slope.unwrap_or(f64::NAN);

    let g = grid(1.0, 128);
    let opts = DensityOptions { points: 11, ..Default::default() };
    let dp =
        density_report(&sample_terminal(&DegeneratePair, &[0.0, 0.3], &g, 1.0, 1, 10_000).unwrap(), &opts).unwrap();
    let hx = sample_terminal(&HormanderExample3D::default(), &[0.1, 0.2, 0.3], &g, 1.0, 1, 10_000).unwrap();
    let hr = density_report(&hx, &opts).unwrap();
    (
        kde <= 0.02 && (slope - 2.0).abs() <= 0.1 && !dp.flat_axes.is_empty() && hr.flat_axes.is_empty(),
        format!(
            "Gaussian KDE sup error {kde:.4}, charfn slope {slope:.3}, flat axes degenerate {:?} / hormander {:?}",
            dp.flat_axes, hr.flat_axes
        ),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let h3 = json!({
        "field": { "family": "hormander_3d", "params": {} },
        "measure": { "horizon": 1.0 },
        "config": { "tau": 1.0, "tau0": 0.5, "seed": 3, "steps": 64 },
        "x0": [0.1, 0.2, 0.3],
        "options": { "samples": 200, "seeds": 4 }
    });
    let intro = json!({
        "field": { "family": "intro_example", "params": {} },
        "measure": { "horizon": 2.0 },
        "config": { "tau": 2.0, "tau0": 1.0, "seed": 7, "steps": 256 },
        "x0": [1.0],
        "options": { "samples": 200, "bump_time": 1.5 }
    });
    let delay = json!({
        "field": { "family": "linear_delay", "params": {
            "n": 1, "d": 1, "delays": [0.25], "drift": [[-0.4], [0.7]], "drift_const": [0.0],
            "diffusion": [[[0.0], [0.5]]], "diffusion_const": [0.3] } },
        "measure": { "horizon": 1.0 },
        "config": { "tau": 1.0, "tau0": 0.5, "seed": 5, "steps": 64 },
        "x0": [0.8]
    });
    let runs = [
        ("simulate", &intro),
        ("malliavin", &intro),
        ("hormander", &h3),
        ("master-check", &h3),
        ("rough-check", &h3),
        ("delay-lift", &delay),
        ("density", &h3),
    ];
    let mut differing = Vec::new();
    for (cmd, sc) in runs {
        let path = dir.path().join(format!("{cmd}.json"));
        std::fs::write(&path, serde_json::to_vec(sc).unwrap()).unwrap();
        let mut outputs = Vec::new();
        for k in ["1", "4", "8"] {
            let out = dir.path().join(format!("{cmd}-{k}"));
            let status = Command::new(env!("CARGO_BIN_EXE_pathdens"))
                .args([cmd, "--workers", k, "--mesh-doubling", "2", "--scenario"])
                .arg(&path)
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap();
            let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
                .map(|rd| {
                    rd.map(|e| {
                        let e = e.unwrap();
                        (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
                    })
                    .collect()
                })
                .unwrap_or_default();
            files.sort();
            outputs.push((status.status.code(), files, status.stdout));
        }
        if outputs[0].0 != Some(0) || outputs.windows(2).any(|w| w[0] != w[1]) {
            differing.push(cmd);
        }
    }
    (differing.is_empty(), format!("7 commands x workers {{1,4,8}}, differing: {differing:?}"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 13] = [
        ("intro-example Jacobian", intro_jacobian),
        ("indicator Hölder distance", indicator_distance_exact),
        ("hs_norm_S", hs_norm),
        ("Chen, Itô/Stratonovich, geometric defect", chen_and_geometric),
        ("rough vs Itô integral", rough_vs_ito),
        ("inverse flow", inverse_flow),
        ("Malliavin consistency", malliavin_checks),
        ("Hörmander example", hormander_example),
        ("tail estimate", tail),
        ("master equation", master_equation),
        ("delay lift", delay_lift),
        ("density dichotomy", density),
        ("reproducibility", reproducibility),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let (ok, detail) = check();
        if !ok {
            failed += 1;
        }
        println!("criterion {:>2} {}: {name}: {detail}", k + 1, if ok { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
