use super::*;
use crate::coeffs::{Constant, DegeneratePair, HormanderExample3D};
use crate::timegrid::{build_grid, MeasureSpec};

fn grid(t: f64, n: usize) -> TimeGrid {
    build_grid(&MeasureSpec::lebesgue(t), n, &[]).unwrap()
}

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

#[test]
fn sampling_basics() {
    let g = grid(1.0, 64);
    let f = Constant::brownian(2);
    let s = sample_terminal(&f, &[0.5, -1.0], &g, 1.0, 3, 4000).unwrap();
    let (mean, _) = moments(&s);
    for (m, x) in mean.iter().zip([0.5, -1.0]) {
        assert!((m - x).abs() <= 3.0 * (1.0f64 / 4000.0).sqrt());
    }
    assert_eq!(s, sample_terminal(&f, &[0.5, -1.0], &g, 1.0, 3, 4000).unwrap());
    let z = Constant::new(vec![0.0], vec![0.0], 1);
    assert_eq!(sample_terminal(&z, &[0.25], &g, 1.0, 0, 1).unwrap(), vec![vec![0.25]]);
    assert!(sample_terminal(&f, &[0.0, 0.0], &g, 0.3, 0, 1).is_err());
}

#[test]
fn gaussian_oracle() {
    let g = grid(1.0, 512);
    let f = Constant::brownian(1);
    let s = sample_terminal(&f, &[0.0], &g, 1.0, 11, 100_000).unwrap();
    let rep = density_report(&s, &DensityOptions::default()).unwrap();
    let worst = (0..rep.lattice.len())
        .map(|k| (rep.kde[k] - normal_pdf(rep.lattice.point(k)[0], 1.0)).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.02, "{worst}");
    assert!((rep.mass - 1.0).abs() <= 1e-3, "{}", rep.mass);
    assert!(rep.kde.iter().all(|&v| v >= 0.0));
    let slope = rep.directions[0].slope.unwrap();
    assert!((slope - 2.0).abs() <= 0.1, "{slope}");
    assert!(rep.flat_axes.is_empty());
    assert_eq!(charfn_modulus(&s, 0, 0.0), 1.0);
}

#[test]
fn kde_translation_and_symmetry() {
    let g = grid(1.0, 32);
    let f = Constant::brownian(1);
    let s = sample_terminal(&f, &[0.0], &g, 1.0, 5, 2000).unwrap();
    let lat = Lattice { axes: vec![(0..21).map(|k| -2.0 + 0.2 * k as f64).collect()] };
    let (a, h) = kde(&s, None, &lat).unwrap();
    let shifted: Vec<Vec<f64>> = s.iter().map(|x| vec![x[0] + 0.75]).collect();
    let lat2 = Lattice { axes: vec![lat.axes[0].iter().map(|x| x + 0.75).collect()] };
    let (b, _) = kde(&shifted, Some(&h), &lat2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
    // symmetric law around 0: mirrored values agree up to Monte Carlo noise
    let asym = (0..21).map(|k| (a[k] - a[20 - k]).abs()).fold(0.0, f64::max);
    assert!(asym <= 4.0 / (2000f64).sqrt());
    assert!(kde(&s[..1], None, &lat).is_err());
}

#[test]
fn dichotomy() {
    let g = grid(1.0, 128);
    let opts = DensityOptions { points: 11, ..Default::default() };
    let s = sample_terminal(&DegeneratePair, &[0.0, 0.3], &g, 1.0, 1, 10_000).unwrap();
    assert_eq!(density_report(&s, &opts).unwrap().flat_axes, vec![1]);
    let s = sample_terminal(&HormanderExample3D::default(), &[0.1, 0.2, 0.3], &g, 1.0, 1, 10_000).unwrap();
    let rep = density_report(&s, &opts).unwrap();
    assert!(rep.flat_axes.is_empty(), "{:?}", rep.directions.iter().map(|d| d.modulus.clone()).collect::<Vec<_>>());
}
