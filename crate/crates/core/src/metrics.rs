//! MSI quality indices (PSNR, SSIM, SAM, ERGAS) and the synthetic
//! dictionary-recovery score.

use crate::dictionary::DictionaryPair;
use crate::error::{LtdlError, Result};
use crate::grouping::Msi;
use crate::tensor::{kron, Matrix};

/// PSNR is capped here; identical inputs report exactly this value.
pub const PSNR_CAP_DB: f64 = 100.0;

/// The four indices, in the conventional reporting order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Spectral angle mapper, radians.
    pub sam: f64,
    pub ergas: f64,
}

impl MetricReport {
    pub fn compute(reference: &Msi, test: &Msi) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, test)?,
            ssim: ssim(reference, test)?,
            sam: sam(reference, test)?,
            ergas: ergas(reference, test, 1.0)?,
        })
    }

    pub fn csv_header() -> &'static str {
        "psnr,ssim,sam,ergas"
    }

    pub fn to_csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6}", self.psnr, self.ssim, self.sam, self.ergas)
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:>10} {:>10} {:>10} {:>10}\n{:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            "PSNR", "SSIM", "SAM", "ERGAS", self.psnr, self.ssim, self.sam, self.ergas
        )
    }
}

fn check_dims(reference: &Msi, test: &Msi) -> Result<()> {
    if reference.dims() != test.dims() {
        return Err(LtdlError::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over the whole cube, peak value 1.0, in dB.
pub fn psnr(reference: &Msi, test: &Msi) -> Result<f64> {
    check_dims(reference, test)?;
    let n = reference.cube.numel() as f64;
    let mse = reference
        .cube
        .as_slice()
        .iter()
        .zip(test.cube.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// 11x11 Gaussian window, sigma 1.5, normalized to sum 1.
fn ssim_window() -> [f64; 11] {
    let sigma = 1.5;
    let mut w = [0.0; 11];
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        total += *v;
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_DYNAMIC_RANGE: f64 = 1.0;

fn ssim_value(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Single-scale SSIM per band (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1.0), averaged over bands. Bands smaller than
/// the window fall back to plane-wide statistics.
pub fn ssim(reference: &Msi, test: &Msi) -> Result<f64> {
    check_dims(reference, test)?;
    let (l, w, h) = reference.dims();
    let win = ssim_window();
    let mut band_scores = Vec::with_capacity(h);
    for b in 0..h {
        if l < 11 || w < 11 {
            // Plane-wide statistics fallback.
            let n = (l * w) as f64;
            let (mut mx, mut my) = (0.0, 0.0);
            for j in 0..w {
                for i in 0..l {
                    mx += reference.cube.get(i, j, b);
                    my += test.cube.get(i, j, b);
                }
            }
            mx /= n;
            my /= n;
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..w {
                for i in 0..l {
                    let dx = reference.cube.get(i, j, b) - mx;
                    let dy = test.cube.get(i, j, b) - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
            }
            band_scores.push(ssim_value(mx, my, vx / n, vy / n, cov / n));
            continue;
        }
        // Valid-region Gaussian-weighted local statistics.
        let mut total = 0.0;
        let mut count = 0usize;
        for cj in 5..w - 5 {
            for ci in 5..l - 5 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dj, &wj) in win.iter().enumerate() {
                    for (di, &wi) in win.iter().enumerate() {
                        let wt = wi * wj;
                        let x = reference.cube.get(ci + di - 5, cj + dj - 5, b);
                        let y = test.cube.get(ci + di - 5, cj + dj - 5, b);
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ssim_value(mx, my, vx, vy, cov);
                count += 1;
            }
        }
        band_scores.push(total / count as f64);
    }
    Ok(band_scores.iter().sum::<f64>() / h as f64)
}

/// Spectral angle mapper: mean over spatial positions of the angle between
/// reference and test spectral vectors, in radians. Returns the count of
/// positions skipped because either vector had zero norm.
pub fn sam_with_diagnostics(reference: &Msi, test: &Msi) -> Result<(f64, usize)> {
    check_dims(reference, test)?;
    let (l, w, h) = reference.dims();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for j in 0..w {
        for i in 0..l {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for b in 0..h {
                let x = reference.cube.get(i, j, b);
                let y = test.cube.get(i, j, b);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na <= 0.0 || nb <= 0.0 {
                skipped += 1;
                continue;
            }
            // Exact parallel/antiparallel checks before acos: sqrt rounding
            // would otherwise turn sam(a, a) into ~1e-8 instead of 0.
            let angle = if dot >= 0.0 && dot * dot >= na * nb {
                0.0
            } else if dot <= 0.0 && dot * dot >= na * nb {
                std::f64::consts::PI
            } else {
                (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0).acos()
            };
            total += angle;
            counted += 1;
        }
    }
    let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok((mean, skipped))
}

pub fn sam(reference: &Msi, test: &Msi) -> Result<f64> {
    sam_with_diagnostics(reference, test).map(|(v, _)| v)
}

/// Reporting unit for the spectral angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamUnit {
    Radians,
    Degrees,
}

pub fn sam_in(reference: &Msi, test: &Msi, unit: SamUnit) -> Result<f64> {
    let radians = sam(reference, test)?;
    Ok(match unit {
        SamUnit::Radians => radians,
        SamUnit::Degrees => radians.to_degrees(),
    })
}

/// ERGAS: `100 * scale_ratio * sqrt(mean_b(RMSE_b^2 / mean_b^2))` over bands
/// with nonzero reference mean; excluded bands are counted in the
/// diagnostics. Not symmetric: normalization uses the reference band means.
pub fn ergas_with_diagnostics(
    reference: &Msi,
    test: &Msi,
    scale_ratio: f64,
) -> Result<(f64, usize)> {
    check_dims(reference, test)?;
    let (l, w, h) = reference.dims();
    let n = (l * w) as f64;
    let mut acc = 0.0;
    let mut included = 0usize;
    for b in 0..h {
        let (mut mean, mut sq) = (0.0, 0.0);
        for j in 0..w {
            for i in 0..l {
                let x = reference.cube.get(i, j, b);
                let d = x - test.cube.get(i, j, b);
                mean += x;
                sq += d * d;
            }
        }
        mean /= n;
        if mean == 0.0 {
            continue;
        }
        let rmse2 = sq / n;
        acc += rmse2 / (mean * mean);
        included += 1;
    }
    let value = if included == 0 {
        0.0
    } else {
        100.0 * scale_ratio * (acc / included as f64).sqrt()
    };
    Ok((value, h - included))
}

pub fn ergas(reference: &Msi, test: &Msi, scale_ratio: f64) -> Result<f64> {
    ergas_with_diagnostics(reference, test, scale_ratio).map(|(v, _)| v)
}

/// How learned atoms are matched to ground-truth atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomMatching {
    /// Best pairs first, without replacement (the plain reading of "find the
    /// most close pair").
    Greedy,
    /// Minimum-total-distance assignment, for sensitivity checks.
    Optimal,
}

/// Distance threshold under which an atom counts as recovered.
pub const RECOVERY_THRESHOLD: f64 = 0.1;

fn equivalent_dictionary(pair: &DictionaryPair) -> Matrix {
    let mut k = kron(&pair.d_e, &pair.d_a);
    for c in 0..k.ncols() {
        let norm = k.column(c).norm();
        if norm > 0.0 {
            let col = k.column(c) / norm;
            k.set_column(c, &col);
        }
    }
    k
}

/// Classic O(n^3) Hungarian algorithm with potentials; returns for each row
/// the assigned column of the square cost matrix.
fn hungarian(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of ground-truth atoms recovered by the learned pair, compared on
/// the equivalent Kronecker dictionaries with distance `1 - |d^T d_hat|` and
/// threshold 0.1.
pub fn dictionary_recovery_ratio_with(
    truth: &DictionaryPair,
    learned: &DictionaryPair,
    matching: AtomMatching,
) -> Result<f64> {
    if truth.d_a.shape() != learned.d_a.shape() || truth.d_e.shape() != learned.d_e.shape() {
        return Err(LtdlError::Shape(format!(
            "dictionary shapes differ: spatial {:?} vs {:?}, spectral {:?} vs {:?}",
            truth.d_a.shape(),
            learned.d_a.shape(),
            truth.d_e.shape(),
            learned.d_e.shape()
        )));
    }
    let kt = equivalent_dictionary(truth);
    let kl = equivalent_dictionary(learned);
    let n = kt.ncols();
    let mut dist = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = kt.column(i).dot(&kl.column(j));
            dist[(i, j)] = 1.0 - dot.abs();
        }
    }
    let mut hits = 0usize;
    match matching {
        AtomMatching::Greedy => {
            let mut pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .collect();
            pairs.sort_by(|a, b| dist[(a.0, a.1)].total_cmp(&dist[(b.0, b.1)]));
            let mut used_true = vec![false; n];
            let mut used_learned = vec![false; n];
            for (i, j) in pairs {
                if used_true[i] || used_learned[j] {
                    continue;
                }
                used_true[i] = true;
                used_learned[j] = true;
                if dist[(i, j)] < RECOVERY_THRESHOLD {
                    hits += 1;
                }
            }
        }
        AtomMatching::Optimal => {
            for (i, j) in hungarian(&dist).into_iter().enumerate() {
                if dist[(i, j)] < RECOVERY_THRESHOLD {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / n as f64)
}

pub fn dictionary_recovery_ratio(truth: &DictionaryPair, learned: &DictionaryPair) -> Result<f64> {
    dictionary_recovery_ratio_with(truth, learned, AtomMatching::Greedy)
}
