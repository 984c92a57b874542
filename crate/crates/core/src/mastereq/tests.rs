use super::*;
use crate::coeffs::{Constant, HormanderExample3D, IntroExample, Linear};
use crate::flow::brownian_noise;
use crate::roughpath::ito_from_strat;
use crate::timegrid::{build_grid, MeasureSpec};

fn grid(t: f64, n: usize) -> TimeGrid {
    build_grid(&MeasureSpec::lebesgue(t), n, &[]).unwrap()
}

fn frozen_state<'a>(g: &'a TimeGrid, path: &'a GridPath, v: &'a [f64]) -> State<'a> {
    State { grid: g, t: 0.5, step: 2, path: path.as_slice(), value: v }
}

#[test]
fn sigma0_examples() {
    let g = grid(1.0, 4);
    let path = GridPath::constant(&[0.7], 5);
    let x = frozen_state(&g, &path, &[0.7]);
    let c = Constant::new(vec![0.3], vec![2.0], 1);
    assert_eq!(sigma0_point(&c, &x).unwrap(), vec![0.3]);
    let geo = Linear::geometric(0.0, 1.0);
    assert!((sigma0_point(&geo, &x).unwrap()[0] + 0.35).abs() <= 1e-12);
    let add = Linear::new(2, 1, vec![1.0, 2.0, -1.0, 0.5], vec![vec![0.0; 4]], vec![1.0, 1.0]);
    let p2 = GridPath::constant(&[1.0, -2.0], 5);
    let x2 = frozen_state(&g, &p2, &[1.0, -2.0]);
    assert_eq!(sigma0_point(&add, &x2).unwrap(), vec![-3.0, -2.0]);
    let hat = sigma0_hat(&c, &g, 0.5, &path, &[0.7]).unwrap();
    assert_eq!(hat.point_part, vec![0.3]);
}

fn tree_noise(field: &dyn CoefficientField, base: usize, level: usize, seed: u64) -> RoughNoise {
    let tree = study_tree(&grid(1.0, base), field.dims().1, seed);
    RoughNoise::from_tree(&tree, level, 16).unwrap()
}

#[test]
fn constant_case_is_exact() {
    let f = Constant::new(vec![0.0, 0.0], vec![1.0, 0.5, -0.2, 2.0], 2);
    let rn = tree_noise(&f, 64, 1, 3);
    let b = solve_sde(&f, &[0.1, 0.2], &rn.noise, &rn.grid).unwrap();
    with_v(&f, VChoice::Sigma(0), |v| {
        let m = master_equation_residual(&f, v, &b, &rn.rough, (0.25, 1.0), &MasterOptions::default())?;
        assert!(m.residual_sup <= 1e-12);
        assert_eq!(m.terms.drift_bracket, 0.0);
        assert_eq!(m.terms.rough_bracket, 0.0);
        let i = rough_ito_check(&f, v, &b, &rn.rough, (0.25, 1.0), DEFAULT_P)?;
        assert!(i.residual_sup <= 1e-12);
        assert!(i.young_sup > 0.0);
        Ok(())
    })
    .unwrap();
}

#[test]
fn residual_vanishes_at_start() {
    let f = HormanderExample3D::default();
    let rn = tree_noise(&f, 128, 0, 5);
    let b = solve_sde(&f, &[0.1, -0.2, 0.3], &rn.noise, &rn.grid).unwrap();
    for choice in [VChoice::Sigma(0), VChoice::Bracket(0, 1), VChoice::Identity] {
        with_v(&f, choice, |v| {
            let m = master_equation_residual(&f, v, &b, &rn.rough, (0.5, 1.0), &MasterOptions::default())?;
            assert_eq!(m.residuals[0], 0.0);
            assert_eq!(m.residuals.len(), 65);
            assert!(m.residual_sup.is_finite());
            let t = [m.terms.initial, m.terms.young, m.terms.drift_bracket, m.terms.rough_bracket];
            assert!(t.iter().all(|x| x.is_finite() && *x >= 0.0));
            Ok(())
        })
        .unwrap();
    }
    assert!(with_v(&f, VChoice::Sigma(2), |_| Ok(())).is_err());
    let short = tree_noise(&f, 64, 0, 5);
    let v = IdentityField(3);
    assert!(master_equation_residual(&f, &v, &b, &short.rough, (0.5, 1.0), &MasterOptions::default()).is_err());
    assert!(rough_ito_check(&f, &v, &b, &short.rough, (0.5, 1.0), DEFAULT_P).is_err());
}

#[test]
fn ito_and_stratonovich_lifts_agree() {
    let f = HormanderExample3D::default();
    let rn = tree_noise(&f, 128, 0, 7);
    let b = solve_sde(&f, &[0.1, -0.2, 0.3], &rn.noise, &rn.grid).unwrap();
    let ito = ito_from_strat(&rn.rough).unwrap();
    with_v(&f, VChoice::Sigma(0), |v| {
        let a = master_equation_residual(&f, v, &b, &rn.rough, (0.5, 1.0), &MasterOptions::default())?;
        let c = master_equation_residual(&f, v, &b, &ito, (0.5, 1.0), &MasterOptions::default())?;
        for (x, y) in a.residuals.iter().zip(&c.residuals) {
            assert!((x - y).abs() <= 1e-10);
        }
        let a = rough_ito_check(&f, v, &b, &rn.rough, (0.5, 1.0), DEFAULT_P)?;
        let c = rough_ito_check(&f, v, &b, &ito, (0.5, 1.0), DEFAULT_P)?;
        for (x, y) in a.residuals.iter().zip(&c.residuals) {
            assert!((x - y).abs() <= 1e-10);
        }
        Ok(())
    })
    .unwrap();
}

#[test]
fn young_closed_form() {
    let g = grid(1.0, 64);
    let f = IntroExample::default();
    let noise = brownian_noise(&g, 1, 11, 0);
    let b = solve_sde(&f, &[0.3], &noise, &g).unwrap();
    let (j0, ti) = (16, 64);
    let r = young_indicator_term(&b.x, &g, (g.t(j0), g.t(ti))).unwrap();
    let w = g.weights();
    let mut worst = 0.0f64;
    let mut sup = 0.0f64;
    for big_j in j0..=ti {
        let row = r.at(big_j - j0);
        let mut acc = 0.0;
        for m in 0..g.len() {
            let want = if m >= j0 && m < big_j { -b.x.at(m)[0] } else { 0.0 };
            worst = worst.max((row[m] - want).abs());
            acc += w[m] * row[m].abs().powf(DEFAULT_P);
        }
        sup = sup.max(acc.powf(1.0 / DEFAULT_P));
    }
    assert!(worst <= 1e-12);
    let v = IdentityField(1);
    let rn = RoughNoise::piecewise_linear(&g, &noise).unwrap();
    let rep = rough_ito_check(&f, &v, &b, &rn.rough, (g.t(j0), g.t(ti)), DEFAULT_P).unwrap();
    assert!((rep.young_sup - sup).abs() <= 1e-12);
}

#[test]
fn linear_master_equation_converges() {
    let f = Linear::geometric(0.1, 0.5);
    let seeds: Vec<u64> = (0..8).collect();
    let s = refinement_study(&f, VChoice::Sigma(0), Check::Master, &[1.0], &grid(1.0, 512), 3, 16, &seeds, (0.5, 1.0))
        .unwrap();
    assert!(s.rate.unwrap() >= 0.4, "{s:?}");
}

#[test]
fn ito_formula_converges() {
    let f = Linear::new(
        2,
        2,
        vec![-0.5, 0.2, 0.0, -0.3],
        vec![vec![0.2, 0.0, 0.1, 0.0], vec![0.0, 0.1, 0.0, 0.2]],
        vec![1.0, 0.0, 0.0, 1.0],
    );
    let seeds: Vec<u64> = (0..4).collect();
    let s =
        refinement_study(&f, VChoice::Identity, Check::Ito, &[0.5, -0.5], &grid(1.0, 256), 3, 16, &seeds, (0.0, 1.0))
            .unwrap();
    assert!(s.rate.unwrap() >= 0.4, "{s:?}");
}

#[test]
fn norris_basic_norms() {
    let g = grid(1.0, 64);
    let noise = brownian_noise(&g, 2, 3, 0);
    let rn = RoughNoise::piecewise_linear(&g, &noise).unwrap();
    let len = 33;
    let dec = NorrisDecomposition {
        start: 32,
        i: (0..len).map(|k| (k as f64 * 0.1).sin()).collect(),
        a: vec![vec![0.6, -0.8]; len - 1],
        a_prime: vec![vec![0.0; 4]; len - 1],
        c: vec![0.0; len - 1],
        d: vec![vec![0.0; 65]; len],
    };
    let q = norris_quantities(&dec, &rn.rough, DEFAULT_THETA, DEFAULT_P, 1).unwrap();
    assert_eq!(q.norm_a_sup, 1.0);
    assert_eq!(q.norm_c, 0.0);
    assert_eq!(q.norm_d, 0.0);
    let s = norris_quantities(&dec.scaled(-2.5), &rn.rough, DEFAULT_THETA, DEFAULT_P, 1).unwrap();
    assert!((s.norm_a_sup - 2.5).abs() <= 1e-15);
    assert!((s.norm_i_sup - 2.5 * q.norm_i_sup).abs() <= 1e-15);
    assert!(q.norm_phi_2alpha > 0.0 && q.l_theta > 0.0);
}

#[test]
fn script_r_floor_and_zero_noise() {
    let g = grid(1.0, 32);
    let f = Constant::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], 2);
    let noise = GridPath::zeros(2, 32);
    let rn = RoughNoise::piecewise_linear(&g, &noise).unwrap();
    let b = solve_sde(&f, &[3.0, 4.0], &rn.noise, &g).unwrap();
    let opts = ScriptROptions { include_l_theta: false, ..Default::default() };
    let r = script_r(&f, &b, &rn.rough, (0.5, 1.0), &opts).unwrap();
    // the operator norm of the identity flow counts once
    assert_eq!(r.total, 2.0 + 5.0 + 1.0);
    assert_eq!((r.x_alpha, r.z_alpha, r.rx_2alpha, r.rz_2alpha, r.rough_norm), (0.0, 0.0, 0.0, 0.0, 0.0));

    let h = HormanderExample3D::default();
    let rn = tree_noise(&h, 32, 0, 2);
    let b = solve_sde(&h, &[0.1, 0.2, 0.3], &rn.noise, &rn.grid).unwrap();
    let r = script_r(&h, &b, &rn.rough, (0.5, 1.0), &ScriptROptions::default()).unwrap();
    assert!(r.total >= 2.0 && r.total.is_finite());
    let again = script_r(&h, &b, &rn.rough, (0.5, 1.0), &ScriptROptions::default()).unwrap();
    assert_eq!(r, again);
}

#[test]
fn hormander_first_field_is_exact() {
    let h = HormanderExample3D::default();
    let seeds = [0, 1];
    let s = refinement_study(
        &h,
        VChoice::Sigma(0),
        Check::Master,
        &[0.1, -0.2, 0.3],
        &grid(1.0, 128),
        2,
        16,
        &seeds,
        (0.5, 1.0),
    )
    .unwrap();
    assert!(s.residuals.iter().all(|&r| r <= 1e-12), "{s:?}");
}

#[test]
fn norris_deciles_and_script_r_moments() {
    let h = HormanderExample3D::default();
    let g = grid(1.0, 64);
    let z = [1.0 / 3f64.sqrt(); 3];
    let samples: Vec<NorrisSample> = (0..100u64)
        .into_par_iter()
        .map(|s| norris_sample(&h, VChoice::Sigma(0), &[0.1, -0.2, 0.3], &g, s, &z, (0.5, 1.0), true))
        .collect::<Result<_>>()
        .unwrap();
    for s in &samples {
        let q = &s.quantities;
        for x in
            [q.norm_i_sup, q.norm_a_sup, q.controlled_norm_a, q.norm_c, q.norm_d, q.norm_phi_2alpha, q.script_r_bar]
        {
            assert!(x.is_finite() && x >= 0.0);
        }
        assert!(q.script_r.unwrap() >= 2.0);
    }
    let med = decile_medians(&samples);
    assert!(med.windows(2).all(|w| w[0] <= w[1]), "{med:?}");
    let r: Vec<f64> = samples.iter().map(|s| s.quantities.script_r.unwrap()).collect();
    for q in [2, 4, 8] {
        let m = r.iter().map(|x| x.powi(q)).sum::<f64>() / r.len() as f64;
        assert!(m.is_finite());
    }
}
