use super::*;
use crate::rng::NormalStream;
use crate::timegrid::{build_grid, lp_norm, MeasureSpec};

fn grid(n: usize) -> TimeGrid {
    build_grid(&MeasureSpec::lebesgue(1.0), n, &[]).unwrap()
}

fn random_path(n: usize, len: usize, seed: u64) -> GridPath {
    let mut s = NormalStream::new(seed, 77);
    let mut acc = vec![0.3; n];
    GridPath::from_fn(n, len, |_, v| {
        for a in acc.iter_mut() {
            *a += 0.2 * s.next_normal();
        }
        v.copy_from_slice(&acc);
    })
}

fn families() -> Vec<Box<dyn CoefficientField>> {
    vec![
        Box::new(Constant::brownian(2)),
        Box::new(Linear::new(2, 1, vec![-1.0, 0.5, 0.2, -0.3], vec![vec![0.3, 0.1, 0.0, 0.4]], vec![1.0, 0.5])),
        Box::new(IntroExample::default()),
        Box::new(IntegralCoefficient::default()),
        Box::new(ContinuousDelay::default()),
        Box::new(DiscretePoints { times: vec![0.25, 0.5], weights: vec![1.0, -0.5], a: 0.3, s0: 0.7, s1: 0.2 }),
        Box::new(HormanderExample3D::default()),
        Box::new(DegeneratePair),
    ]
}

fn whiches(field: &dyn CoefficientField) -> Vec<Which> {
    let d = field.dims().1;
    std::iter::once(Which::Drift).chain((0..d).map(Which::Diffusion)).collect()
}

#[test]
fn eval_examples() {
    let g = grid(8);
    let c = Constant::new(vec![1.0], vec![2.0, 3.0], 2);
    let p = random_path(1, g.len(), 1);
    assert_eq!(eval_sigma(&c, &g, 0.5, &p, &[4.0]).unwrap(), vec![2.0, 3.0]);

    let g = build_grid(&MeasureSpec::lebesgue(2.0), 2000, &[]).unwrap();
    let lin = GridPath::from_fn(1, g.len(), |j, v| v[0] = g.t(j));
    let b = eval_b(&IntroExample::default(), &g, 1.5, &lin, &[1.5]).unwrap();
    assert_eq!(b, vec![-1.0]);
    let b = eval_b(&IntroExample::default(), &g, 0.5, &lin, &[0.5]).unwrap();
    assert_eq!(b, vec![-0.5]);

    let g = grid(1000);
    let lin = GridPath::from_fn(1, g.len(), |j, v| v[0] = g.t(j));
    let f = IntegralCoefficient { a: 0.0, c: 1.0, s0: 0.0, s1: 0.0 };
    let b = eval_b(&f, &g, 1.0, &lin, &[1.0]).unwrap()[0];
    assert!((b - 0.5).abs() <= g.mesh());
    assert!(eval_b(&f, &g, 1.5, &lin, &[1.0]).is_err());
}

#[test]
fn vertical_examples() {
    let g = grid(16);
    let p = random_path(3, g.len(), 2);
    let y = p.at(5).to_vec();
    let a = vec![1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 0.0, 0.0, 2.0];
    let lin = Linear::new(3, 1, vec![0.0; 9], vec![a.clone()], vec![0.0; 3]);
    let t = g.t(5);
    assert_eq!(vertical_derivative(&lin, Which::Diffusion(0), &g, t, &p, &y).unwrap(), a);
    let f = Frozen::new(&g, t, &p, &y).unwrap();
    let fd = vertical_fd(&component(&lin, Which::Diffusion(0)), &f.state(&g), 0).unwrap();
    for (x, e) in fd.iter().zip(&a) {
        assert!((x - e).abs() < 1e-9);
    }

    let h = HormanderExample3D::with_fixed(2.5);
    let v = vertical_derivative(&h, Which::Diffusion(1), &g, t, &p, &y).unwrap();
    let mut expect = vec![0.0; 9];
    expect[4] = y[1].cos();
    expect[6] = 1.0;
    assert_eq!(v, expect);

    let ic = IntegralCoefficient { a: 0.0, c: 1.0, s0: 0.0, s1: 0.0 };
    let p1 = random_path(1, g.len(), 3);
    let f = Frozen::new(&g, t, &p1, p1.at(5)).unwrap();
    let fd = vertical_fd(&component(&ic, Which::Drift), &f.state(&g), 0).unwrap();
    assert_eq!(fd, vec![0.0]);
}

#[test]
fn directional_examples() {
    let g = build_grid(&MeasureSpec { horizon: 1.0, atoms: vec![(0.5, 0.25)] }, 16, &[]).unwrap();
    let p = random_path(1, g.len(), 4);
    let f = Frozen::new(&g, 1.0, &p, p.at(g.len() - 1)).unwrap();
    let lin_fun = UserField::new(1, 1, |w, x, out| {
        out[0] = match w {
            Which::Drift => x.grid.weights().iter().enumerate().map(|(j, w)| w * x.slot(j)[0]).sum(),
            _ => 0.0,
        }
    });
    let dp = random_path(1, g.len(), 5);
    let c = component(&lin_fun, Which::Drift);
    let d = directional_derivative_of(&c, &f.state(&g), dp.as_slice(), &[0.7]).unwrap();
    let expect: f64 = g.weights().iter().enumerate().map(|(j, w)| w * dp.at(j)[0]).sum();
    assert!((d[0] - expect).abs() < 1e-9 * expect.abs().max(1.0));
    let z = directional_derivative_of(&c, &f.state(&g), &vec![0.0; g.len()], &[0.0]).unwrap();
    assert_eq!(z, vec![0.0]);
}

#[test]
fn delay_directional_matches_oracle() {
    let g = grid(64);
    let cd = ContinuousDelay::default();
    for seed in 0..5 {
        let p = random_path(1, g.len(), 10 + seed);
        let j = 20 + 7 * seed as usize;
        let f = Frozen::at_index(&g, &p, j);
        let dp = random_path(1, g.len(), 100 + seed);
        for w in whiches(&cd) {
            let c = component(&cd, w);
            let st = f.state(&g);
            let exact = directional_derivative_of(&c, &st, dp.as_slice(), &[0.4]).unwrap();
            let fd = directional_fd(&c, &st, dp.as_slice(), &[0.4], 0).unwrap();
            assert!((exact[0] - fd[0]).abs() <= 1e-6 * exact[0].abs().max(1.0), "{exact:?} {fd:?}");
        }
    }
}

#[test]
fn time_derivative_examples() {
    let g = grid(32);
    let p = random_path(2, g.len(), 6);
    let lin = Linear::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![vec![0.0; 4]], vec![0.0; 2]);
    let f = Frozen::at_index(&g, &p, 7);
    let d = time_fd(&component(&lin, Which::Drift), &f.state(&g)).unwrap();
    assert_eq!(d.value, vec![0.0, 0.0]);
    assert!(!d.one_sided);

    let ty = UserField::new(1, 1, |w, x, out| {
        out[0] = match w {
            Which::Drift => 0.0,
            _ => x.t * x.value[0],
        }
    });
    let p1 = random_path(1, g.len(), 7);
    let f = Frozen::at_index(&g, &p1, 9);
    let d = time_derivative_of(&component(&ty, Which::Diffusion(0)), &f.state(&g)).unwrap();
    assert!((d.value[0] - p1.at(9)[0]).abs() < 1e-12);
    let f = Frozen::at_index(&g, &p1, 0);
    let d = time_derivative_of(&component(&ty, Which::Diffusion(0)), &f.state(&g)).unwrap();
    assert!(d.one_sided);
    assert!((d.value[0] - p1.at(0)[0]).abs() < 1e-12);
}

#[test]
fn delay_time_derivative_matches_oracle() {
    let g = grid(256);
    let cd = ContinuousDelay::default();
    for seed in 0..4 {
        let p = random_path(1, g.len(), 20 + seed);
        for j in [1usize, 17, 128, 255] {
            let f = Frozen::at_index(&g, &p, j);
            for w in whiches(&cd) {
                let c = component(&cd, w);
                let exact = c.time_derivative(&f.state(&g)).unwrap()[0];
                let fd = time_fd(&c, &f.state(&g)).unwrap().value[0];
                assert!((exact - fd).abs() <= 1e-5 * exact.abs().max(1.0), "{j}: {exact} {fd}");
            }
        }
    }
}

#[test]
fn oracles_agree_with_finite_differences() {
    let g = grid(40);
    for field in families() {
        let (n, _) = field.dims();
        let p = random_path(n, g.len(), 8);
        let dp = random_path(n, g.len(), 9);
        for j in [0usize, 3, 11, 20, 33] {
            let f = Frozen::at_index(&g, &p, j);
            let st = f.state(&g);
            for w in whiches(field.as_ref()) {
                let c = component(field.as_ref(), w);
                let name = field.metadata().name;
                let exact = vertical_derivative_of(&c, &st, 0).unwrap();
                let fd = vertical_fd(&c, &st, 0).unwrap();
                for (a, b) in exact.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{name} vertical {a} {b}");
                }
                let dv: Vec<f64> = (0..n).map(|i| 0.3 - 0.1 * i as f64).collect();
                let exact = directional_derivative_of(&c, &st, dp.as_slice(), &dv).unwrap();
                let fd = directional_fd(&c, &st, dp.as_slice(), &dv, 0).unwrap();
                for (a, b) in exact.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{name} directional {a} {b}");
                }
            }
        }
    }
}

#[test]
fn non_anticipative_under_tail_perturbation() {
    let g = grid(24);
    let mut s = NormalStream::new(3, 3);
    for field in families() {
        let (n, _) = field.dims();
        let p = random_path(n, g.len(), 11);
        for trial in 0..1000 {
            let j = trial % g.len();
            let f = Frozen::at_index(&g, &p, j);
            let mut q = f.clone();
            for v in &mut q.path[(j + 1) * n..] {
                *v += s.next_normal();
            }
            for w in whiches(field.as_ref()) {
                let mut a = vec![0.0; n];
                let mut b = vec![0.0; n];
                field.eval(w, &f.state(&g), &mut a);
                field.eval(w, &q.state(&g), &mut b);
                assert_eq!(a, b, "{}", field.metadata().name);
            }
        }
    }
}

#[test]
fn lift_examples() {
    let g = build_grid(&MeasureSpec { horizon: 1.0, atoms: vec![(0.75, 0.5)] }, 8, &[]).unwrap();
    let z = lift(&[0.0, 0.0], 0.5, &g);
    assert_eq!(z, LiftedVector::zeros(2, &g));
    let l = lift(&[1.0, 2.0], 0.0, &g);
    assert!((0..g.len()).all(|j| l.path_part.at(j) == [1.0, 2.0]));
    let p = 1.4;
    for t in [0.0, 0.25, 0.5, 0.875, 1.0] {
        let j = g.require_index(t).unwrap();
        let l = lift(&[1.0], t, &g);
        assert_eq!(l.point_part, vec![1.0]);
        for k in 0..g.len() {
            assert_eq!(l.path_part.at(k)[0], if k >= j { 1.0 } else { 0.0 });
        }
        let m = g.mass_from(j);
        let expect = (m.powf(2.0 / p) + 1.0).sqrt();
        assert!((l.norm(&g, p).unwrap() - expect).abs() < 1e-12);
        assert!((lp_norm(&l.path_part, &g, p).unwrap() - m.powf(1.0 / p)).abs() < 1e-12);
        assert_eq!(LiftedVector::from_flat(1, &l.to_flat()), l);
    }
}

#[test]
fn gradient_algebra() {
    let mut a = Gradient::from_point(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    a.slot_mut(3)[1] = 2.0;
    let mut b = Gradient::zeros(2, 2);
    b.slot_mut(1)[0] = 1.0;
    b.slot_mut(3)[1] = 1.0;
    let c = Gradient::combine(&[(1.0, &a), (-2.0, &b)]);
    assert_eq!(c.slots(), &[1, 3]);
    assert_eq!(c.block(1), &[0.0, 0.0, 0.0, 0.0]);
    assert_eq!(c.apply_lift(2), vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(c.apply_lift(0), vec![-1.0, 0.0, 0.0, 1.0]);
    let dense = c.to_dense(5);
    let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let mut out = [0.0; 2];
    c.apply_flat(&v, 5, &mut out);
    for r in 0..2 {
        let e: f64 = (0..12).map(|k| dense[r * 12 + k] * v[k]).sum();
        assert_eq!(out[r], e);
    }
    let l = c.left_mul(&[0.0, 1.0, 1.0, 0.0], 2);
    assert_eq!(l.point(), &[0.0, 1.0, 1.0, 0.0]);
}
