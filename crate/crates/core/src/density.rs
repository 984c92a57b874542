//! Terminal-law sampling, kernel density estimates and characteristic-function
//! decay as a smoothness diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::flow::solve_sde;
use crate::malliavin::sample_noise;
use crate::timegrid::TimeGrid;

/// `|phi|` below `FLOOR_FACTOR / sqrt(M)` is treated as noise.
pub const FLOOR_FACTOR: f64 = 3.0;
/// A direction whose `|phi|` never drops below this is reported as flat.
pub const FLAT_LEVEL: f64 = 0.5;

/// `M` draws of `X(tau)`, sample `m` driven by its own noise stream.
pub fn sample_terminal(
    field: &dyn CoefficientField,
    x0: &[f64],
    grid: &TimeGrid,
    tau: f64,
    seed: u64,
    samples: usize,
) -> Result<Vec<Vec<f64>>> {
    let ti = grid.require_index(tau)?;
    let d = field.dims().1;
    (0..samples as u64)
        .into_par_iter()
        .map(|m| {
            let b = solve_sde(field, x0, &sample_noise(grid, d, seed, m), grid)?;
            Ok(b.x.at(ti).to_vec())
        })
        .collect()
}

fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples[0].len();
    let m = samples.len() as f64;
    let mean: Vec<f64> = (0..n).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / m).collect();
    let sd = (0..n)
        .map(|i| (samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt())
        .collect();
    (mean, sd)
}

fn check_samples(samples: &[Vec<f64>]) -> Result<usize> {
    let n = samples.first().map(|s| s.len()).unwrap_or(0);
    if n == 0 || samples.iter().any(|s| s.len() != n) {
        return Err(Error::domain("samples must be nonempty vectors of equal dimension"));
    }
    Ok(n)
}

/// Silverman's rule per coordinate, `(4 / (n + 2))^{1/(n+4)} sd M^{-1/(n+4)}`.
pub fn silverman_bandwidth(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_samples(samples)?;
    if samples.len() < 2 {
        return Err(Error::domain("bandwidth needs at least two samples"));
    }
    let (_, sd) = moments(samples);
    let k = n as f64;
    let c = (4.0 / (k + 2.0)).powf(1.0 / (k + 4.0)) * (samples.len() as f64).powf(-1.0 / (k + 4.0));
    Ok(sd.iter().map(|s| c * s).collect())
}

/// Product lattice, one axis per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub axes: Vec<Vec<f64>>,
}

impl Lattice {
    /// `points` equally spaced values per axis over `mean +- width sd`.
    pub fn covering(samples: &[Vec<f64>], width: f64, points: usize) -> Result<Self> {
        check_samples(samples)?;
        if points < 2 {
            return Err(Error::domain("a lattice axis needs at least two points"));
        }
        let (mean, sd) = moments(samples);
        let axes = mean
            .iter()
            .zip(&sd)
            .map(|(&m, &s)| {
                let s = if s > 0.0 { s } else { 1.0 };
                (0..points).map(|k| m - width * s + 2.0 * width * s * k as f64 / (points - 1) as f64).collect()
            })
            .collect();
        Ok(Lattice { axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `k` in row-major order (last axis fastest).
    pub fn point(&self, mut k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (i, a) in self.axes.iter().enumerate().rev() {
            out[i] = a[k % a.len()];
            k /= a.len();
        }
        out
    }

    /// Volume of a cell for evenly spaced axes.
    pub fn cell_volume(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| if a.len() > 1 { (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64 } else { 1.0 })
            .product()
    }
}

/// Gaussian product-kernel density estimate on a lattice; Silverman bandwidth
/// when none is given.
pub fn kde(samples: &[Vec<f64>], bandwidth: Option<&[f64]>, lattice: &Lattice) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = check_samples(samples)?;
    if samples.len() < 2 {
        return Err(Error::domain(format!("density estimate needs at least two samples, got {}", samples.len())));
    }
    if lattice.axes.len() != n {
        return Err(Error::domain("lattice dimension differs from the samples"));
    }
    let h = match bandwidth {
        Some(h) => {
            if h.len() != n || h.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::domain("bandwidth must be positive per coordinate"));
            }
            h.to_vec()
        }
        None => silverman_bandwidth(samples)?,
    };
    if h.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::domain("samples are degenerate in some coordinate; give a bandwidth"));
    }
    let norm = h.iter().map(|x| x * (2.0 * std::f64::consts::PI).sqrt()).product::<f64>() * samples.len() as f64;
    let values = (0..lattice.len())
        .into_par_iter()
        .map(|k| {
            let p = lattice.point(k);
            let s: f64 = samples
                .iter()
                .map(|x| {
                    let q: f64 = (0..n).map(|i| ((p[i] - x[i]) / h[i]).powi(2)).sum();
                    (-0.5 * q).exp()
                })
                .sum();
            s / norm
        })
        .collect();
    Ok((values, h))
}

/// `|phi|` along one coordinate ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionDecay {
    pub axis: usize,
    pub frequencies: Vec<f64>,
    pub modulus: Vec<f64>,
    /// Slope of `log(-log |phi|)` against `log |xi|` over frequencies with
    /// `floor < |phi| < 1`.
    pub slope: Option<f64>,
    /// `|phi|` stays above `FLAT_LEVEL` over the whole lattice.
    pub flat: bool,
}

/// `|M^{-1} sum exp(i xi x_j)|` for `xi = f e_axis`.
pub fn charfn_modulus(samples: &[Vec<f64>], axis: usize, f: f64) -> f64 {
    let (mut c, mut s) = (0.0, 0.0);
    for x in samples {
        let a = f * x[axis];
        c += a.cos();
        s += a.sin();
    }
    let m = samples.len() as f64;
    (c * c + s * s).sqrt() / m
}

/// Decay of the empirical characteristic function along every coordinate ray.
/// Frequencies on axis `i` are `radii / sd_i` (or `radii` when `sd_i = 0`).
pub fn charfn_decay(samples: &[Vec<f64>], radii: &[f64]) -> Result<Vec<DirectionDecay>> {
    let n = check_samples(samples)?;
    let (_, sd) = moments(samples);
    let floor = FLOOR_FACTOR / (samples.len() as f64).sqrt();
    Ok((0..n)
        .map(|axis| {
            let scale = if sd[axis] > 0.0 { 1.0 / sd[axis] } else { 1.0 };
            let frequencies: Vec<f64> = radii.iter().map(|r| r * scale).collect();
            let modulus: Vec<f64> = frequencies.iter().map(|&f| charfn_modulus(samples, axis, f)).collect();
            let pts: Vec<(f64, f64)> = frequencies
                .iter()
                .zip(&modulus)
                .filter(|(&f, &m)| f > 0.0 && m > floor && m < 1.0)
                .map(|(&f, &m)| (f.ln(), (-m.ln()).ln()))
                .collect();
            let slope = ls_slope(&pts);
            let flat = modulus.iter().zip(&frequencies).filter(|(_, &f)| f > 0.0).all(|(&m, _)| m >= FLAT_LEVEL);
            DirectionDecay { axis, frequencies, modulus, slope, flat }
        })
        .collect())
}

fn ls_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum::<f64>() / sxx)
}

/// Log-spaced radii from `a` to `b`.
pub fn log_radii(a: f64, b: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![a];
    }
    (0..count).map(|k| a * (b / a).powf(k as f64 / (count - 1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub samples: usize,
    pub bandwidth: Vec<f64>,
    pub lattice: Lattice,
    pub kde: Vec<f64>,
    /// Riemann sum of the estimate over the lattice.
    pub mass: f64,
    pub directions: Vec<DirectionDecay>,
    /// Axes with no decay beyond the noise floor.
    pub flat_axes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityOptions {
    /// Half-width of the lattice in standard deviations.
    pub width: f64,
    pub points: usize,
    pub radii: Vec<f64>,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions { width: 6.0, points: 41, radii: log_radii(0.25, 40.0, 24) }
    }
}

pub fn density_report(samples: &[Vec<f64>], opts: &DensityOptions) -> Result<DensityReport> {
    let lattice = Lattice::covering(samples, opts.width, opts.points)?;
    let sd = moments(samples).1;
    // flat coordinates get a unit bandwidth so the estimate stays finite
    let mut h = silverman_bandwidth(samples)?;
    for (x, s) in h.iter_mut().zip(&sd) {
        if !(*s > 0.0) {
            *x = 1.0;
        }
    }
    let (values, bandwidth) = kde(samples, Some(&h), &lattice)?;
    let mass = values.iter().sum::<f64>() * lattice.cell_volume();
    let directions = charfn_decay(samples, &opts.radii)?;
    let flat_axes = directions.iter().filter(|d| d.flat).map(|d| d.axis).collect();
    Ok(DensityReport { samples: samples.len(), bandwidth, lattice, kde: values, mass, directions, flat_axes })
}

#[cfg(test)]
mod tests;
