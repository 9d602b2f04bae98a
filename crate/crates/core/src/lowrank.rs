//! Tucker low-multilinear-rank machinery: HOSVD initialization, HOOI
//! refinement, a noise-aware rank heuristic, and the standalone nearly
//! low-rank denoiser (fidelity + Frobenius-penalized distance to a Tucker
//! approximation, solved by alternating updates).

use nalgebra::SymmetricEigen;

use crate::error::{LtdlError, Result};
use crate::tensor::{Matrix, Tensor3};

/// Default HOOI stopping parameters when used as an inner solver.
pub const HOOI_DEFAULT_MAX_ITER: usize = 50;
pub const HOOI_DEFAULT_TOL: f64 = 1e-6;

/// Target multilinear rank, one entry per mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankTriple {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
}

impl RankTriple {
    pub fn new(r1: usize, r2: usize, r3: usize) -> Self {
        Self { r1, r2, r3 }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.r1, self.r2, self.r3]
    }

    /// Checks `1 <= Rn <= In` against the given tensor dimensions.
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        let dims = [dims.0, dims.1, dims.2];
        for (n, (&r, &d)) in self.as_array().iter().zip(dims.iter()).enumerate() {
            if r == 0 || r > d {
                return Err(LtdlError::Argument(format!(
                    "rank {} for mode {} must lie in [1, {}]",
                    r,
                    n + 1,
                    d
                )));
            }
        }
        Ok(())
    }
}

/// Tucker factors: a core tensor and one orthonormal-column factor per mode.
#[derive(Debug, Clone)]
pub struct TuckerFactors {
    pub core: Tensor3,
    pub u1: Matrix,
    pub u2: Matrix,
    pub u3: Matrix,
}

impl TuckerFactors {
    pub fn factor(&self, mode: usize) -> &Matrix {
        match mode {
            1 => &self.u1,
            2 => &self.u2,
            3 => &self.u3,
            _ => panic!("mode must be 1, 2 or 3"),
        }
    }
}

/// Top-`r` eigenvectors of the Gram matrix `m * m^T`, i.e. the leading left
/// singular vectors of `m` (any orthonormal basis of the invariant subspace
/// under ties).
fn top_left_singular_vectors(m: &Matrix, r: usize) -> Matrix {
    let gram = m * m.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut u = Matrix::zeros(m.nrows(), r);
    for (j, &idx) in order.iter().take(r).enumerate() {
        u.set_column(j, &eig.eigenvectors.column(idx));
    }
    u
}

/// Singular values of `m` in descending order. Uses a full SVD rather than
/// the Gram spectrum so that values near the machine floor stay accurate
/// (the Gram route cannot resolve anything below sqrt(eps) * sigma_1).
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let svd = m.clone().svd(false, false);
    let mut vals: Vec<f64> = svd.singular_values.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

/// Higher-order SVD: per mode the top-`Rn` left singular vectors of the
/// mode-n unfolding; core is the projection of `t` onto those bases.
pub fn hosvd(t: &Tensor3, ranks: &RankTriple) -> Result<TuckerFactors> {
    ranks.validate(t.dims())?;
    let u1 = top_left_singular_vectors(&t.unfold(1)?, ranks.r1);
    let u2 = top_left_singular_vectors(&t.unfold(2)?, ranks.r2);
    let u3 = top_left_singular_vectors(&t.unfold(3)?, ranks.r3);
    let core = t
        .mode_product(&u1.transpose(), 1)?
        .mode_product(&u2.transpose(), 2)?
        .mode_product(&u3.transpose(), 3)?;
    Ok(TuckerFactors { core, u1, u2, u3 })
}

/// Higher-order orthogonal iteration initialized from HOSVD. Each sweep
/// replaces every factor with the leading singular vectors of the tensor
/// projected onto the other modes' current bases, so the fit is
/// non-decreasing; stops once the relative fit improvement drops below `tol`.
pub fn hooi(t: &Tensor3, ranks: &RankTriple, max_iter: usize, tol: f64) -> Result<TuckerFactors> {
    hooi_with_fits(t, ranks, max_iter, tol).map(|(f, _)| f)
}

/// As [`hooi`], additionally returning the fit `||core||_F / ||t||_F` after
/// every sweep.
pub fn hooi_with_fits(
    t: &Tensor3,
    ranks: &RankTriple,
    max_iter: usize,
    tol: f64,
) -> Result<(TuckerFactors, Vec<f64>)> {
    if max_iter == 0 {
        return Err(LtdlError::Argument("hooi needs max_iter >= 1".into()));
    }
    let mut f = hosvd(t, ranks)?;
    let norm_t = t.frobenius();
    if norm_t == 0.0 {
        return Ok((f, vec![]));
    }
    let mut fits = Vec::new();
    let mut prev_fit = f.core.frobenius() / norm_t;
    for _ in 0..max_iter {
        for mode in 1..=3 {
            let mut w = t.clone();
            for other in 1..=3 {
                if other != mode {
                    w = w.mode_product(&f.factor(other).transpose(), other)?;
                }
            }
            let rank = ranks.as_array()[mode - 1];
            let u = top_left_singular_vectors(&w.unfold(mode)?, rank);
            match mode {
                1 => f.u1 = u,
                2 => f.u2 = u,
                3 => f.u3 = u,
                _ => unreachable!(),
            }
        }
        f.core = t
            .mode_product(&f.u1.transpose(), 1)?
            .mode_product(&f.u2.transpose(), 2)?
            .mode_product(&f.u3.transpose(), 3)?;
        let fit = f.core.frobenius() / norm_t;
        fits.push(fit);
        if (fit - prev_fit).abs() < tol * fit.max(f64::MIN_POSITIVE) {
            break;
        }
        prev_fit = fit;
    }
    Ok((f, fits))
}

/// Expands Tucker factors back to a full tensor via three chained mode
/// products.
pub fn tucker_reconstruct(f: &TuckerFactors) -> Result<Tensor3> {
    let (r1, r2, r3) = f.core.dims();
    if f.u1.ncols() != r1 || f.u2.ncols() != r2 || f.u3.ncols() != r3 {
        return Err(LtdlError::Shape(format!(
            "factor column counts ({}, {}, {}) do not match core dims {:?}",
            f.u1.ncols(),
            f.u2.ncols(),
            f.u3.ncols(),
            f.core.dims()
        )));
    }
    f.core
        .mode_product(&f.u1, 1)?
        .mode_product(&f.u2, 2)?
        .mode_product(&f.u3, 3)
}

/// Noise-aware multilinear rank heuristic: per mode, the smallest rank whose
/// leading squared singular values capture `energy_frac` of the total squared
/// singular-value mass after subtracting an estimated per-value noise floor
/// of `noise_sigma^2 * (#columns of the unfolding)`. Ranks are clamped to
/// `[1, In - 1]` whenever `In > 1`, so groups are never approximated at full
/// rank.
pub fn estimate_ranks(t: &Tensor3, noise_sigma: f64, energy_frac: f64) -> Result<RankTriple> {
    if !(energy_frac > 0.0 && energy_frac <= 1.0) {
        return Err(LtdlError::Argument(format!(
            "energy_frac must lie in (0, 1], got {energy_frac}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(LtdlError::Argument(format!(
            "noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let mut ranks = [1usize; 3];
    for mode in 1..=3 {
        let unfolding = t.unfold(mode)?;
        let n = unfolding.nrows();
        let cols = unfolding.ncols() as f64;
        let floor = noise_sigma * noise_sigma * cols;
        let mass: Vec<f64> = singular_values(&unfolding)
            .iter()
            .map(|s| (s * s - floor).max(0.0))
            .collect();
        let total: f64 = mass.iter().sum();
        let mut r = 1;
        if total > 0.0 {
            let target = energy_frac * total;
            let mut cum = 0.0;
            for (i, m) in mass.iter().enumerate() {
                cum += m;
                // Slack absorbs rounding when energy_frac = 1.
                if cum >= target - 1e-12 * total {
                    r = i + 1;
                    break;
                }
                r = i + 1;
            }
        }
        if n > 1 {
            r = r.min(n - 1);
        }
        ranks[mode - 1] = r.max(1);
    }
    Ok(RankTriple::new(ranks[0], ranks[1], ranks[2]))
}

/// Nearly-low-rank denoiser: alternates the Tucker target
/// `T <- HOOI(x_hat, ranks)` with the exact fidelity step
/// `x_hat <- (x + lambda_r * T) / (1 + lambda_r)`, starting from `x_hat = x`.
/// Unlike a hard Tucker truncation this keeps (shrunken) tail singular
/// values, which carry texture.
pub fn nearly_lowrank_denoise(
    x: &Tensor3,
    lambda_r: f64,
    ranks: &RankTriple,
    iters: usize,
) -> Result<Tensor3> {
    if lambda_r <= 0.0 {
        return Err(LtdlError::Argument(format!(
            "lambda_r must be positive, got {lambda_r}"
        )));
    }
    if iters == 0 {
        return Err(LtdlError::Argument("iters must be >= 1".into()));
    }
    ranks.validate(x.dims())?;
    let mut x_hat = x.clone();
    for _ in 0..iters {
        let f = hooi(&x_hat, ranks, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL)?;
        let t = tucker_reconstruct(&f)?;
        x_hat = x.lin_comb(1.0 / (1.0 + lambda_r), &t, lambda_r / (1.0 + lambda_r))?;
    }
    Ok(x_hat)
}

/// Objective of the nearly-low-rank model:
/// `||x - x_hat||_F^2 + lambda_r * ||x_hat - T||_F^2` with `T` the best
/// Tucker approximation of `x_hat` at the given ranks.
pub fn nearly_lowrank_objective(
    x: &Tensor3,
    x_hat: &Tensor3,
    lambda_r: f64,
    ranks: &RankTriple,
) -> Result<f64> {
    let f = hooi(x_hat, ranks, HOOI_DEFAULT_MAX_ITER, HOOI_DEFAULT_TOL)?;
    let t = tucker_reconstruct(&f)?;
    let fidelity = x.lin_comb(1.0, x_hat, -1.0)?.frobenius().powi(2);
    let residual = x_hat.lin_comb(1.0, &t, -1.0)?.frobenius().powi(2);
    Ok(fidelity + lambda_r * residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn random_tensor(dims: (usize, usize, usize), seed: u64) -> Tensor3 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Matrix {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        m.qr().q()
    }

    /// Random tensor with exact multilinear rank given by `ranks`.
    fn planted_tucker(dims: (usize, usize, usize), ranks: &RankTriple, seed: u64) -> Tensor3 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let core = Tensor3::from_fn((ranks.r1, ranks.r2, ranks.r3), |_, _, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let u1 = random_orthonormal(dims.0, ranks.r1, &mut rng);
        let u2 = random_orthonormal(dims.1, ranks.r2, &mut rng);
        let u3 = random_orthonormal(dims.2, ranks.r3, &mut rng);
        tucker_reconstruct(&TuckerFactors { core, u1, u2, u3 }).unwrap()
    }

    fn recon_error(t: &Tensor3, f: &TuckerFactors) -> f64 {
        let rec = tucker_reconstruct(f).unwrap();
        t.lin_comb(1.0, &rec, -1.0).unwrap().frobenius()
    }

    fn orthonormality_defect(u: &Matrix) -> f64 {
        let g = u.transpose() * u;
        (&g - Matrix::identity(g.nrows(), g.ncols())).norm()
    }

    #[test]
    fn hosvd_rank_one_outer_product() {
        // Explicit construction of a rank-(1,1,1) tensor with scale 5.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let unit = |n: usize, rng: &mut ChaCha12Rng| {
            let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let (a, b, c) = (unit(4, &mut rng), unit(3, &mut rng), unit(5, &mut rng));
        let t = Tensor3::from_fn((4, 3, 5), |i, j, k| 5.0 * a[i] * b[j] * c[k]);
        let f = hosvd(&t, &RankTriple::new(1, 1, 1)).unwrap();
        assert!(recon_error(&t, &f) < 1e-10);
        assert!((f.core.get(0, 0, 0).abs() - 5.0).abs() < 1e-10);
    }

    #[test]
    fn hosvd_full_ranks_reconstructs_exactly() {
        let t = random_tensor((3, 4, 2), 1);
        let f = hosvd(&t, &RankTriple::new(3, 4, 2)).unwrap();
        assert!(recon_error(&t, &f) < 1e-10);
    }

    #[test]
    fn hosvd_zero_tensor() {
        let t = Tensor3::zeros((3, 3, 3));
        let f = hosvd(&t, &RankTriple::new(2, 2, 2)).unwrap();
        assert_eq!(f.core, Tensor3::zeros((2, 2, 2)));
        for mode in 1..=3 {
            assert!(orthonormality_defect(f.factor(mode)) < 1e-10);
        }
    }

    #[test]
    fn rank_exceeding_dimension_is_error() {
        let t = Tensor3::zeros((3, 3, 3));
        assert!(matches!(
            hosvd(&t, &RankTriple::new(4, 1, 1)),
            Err(LtdlError::Argument(_))
        ));
        assert!(matches!(
            hosvd(&t, &RankTriple::new(0, 1, 1)),
            Err(LtdlError::Argument(_))
        ));
    }

    #[test]
    fn hooi_recovers_planted_rank222() {
        let ranks = RankTriple::new(2, 2, 2);
        for seed in 0..5 {
            let t = planted_tucker((8, 7, 6), &ranks, seed);
            let f = hooi(&t, &ranks, 50, 1e-10).unwrap();
            assert!(
                recon_error(&t, &f) < 1e-8,
                "seed {seed}: error {}",
                recon_error(&t, &f)
            );
        }
    }

    #[test]
    fn hooi_full_ranks_exact() {
        let t = random_tensor((4, 3, 5), 9);
        let f = hooi(&t, &RankTriple::new(4, 3, 5), 10, 1e-9).unwrap();
        assert!(recon_error(&t, &f) < 1e-10);
    }

    #[test]
    fn hooi_fit_sequence_non_decreasing() {
        let ranks = RankTriple::new(3, 3, 3);
        for seed in 0..20 {
            let t = random_tensor((8, 8, 8), 100 + seed);
            let (_, fits) = hooi_with_fits(&t, &ranks, 20, 0.0).unwrap();
            for w in fits.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "seed {seed}: fits {fits:?}");
            }
        }
    }

    #[test]
    fn hooi_error_never_worse_than_hosvd() {
        let ranks = RankTriple::new(2, 3, 2);
        for seed in 0..10 {
            let t = random_tensor((6, 7, 5), 200 + seed);
            let h = hosvd(&t, &ranks).unwrap();
            let f = hooi(&t, &ranks, 30, 1e-9).unwrap();
            assert!(recon_error(&t, &f) <= recon_error(&t, &h) + 1e-12);
        }
    }

    #[test]
    fn hooi_factors_orthonormal_at_every_iteration() {
        let t = random_tensor((6, 6, 6), 42);
        let ranks = RankTriple::new(2, 3, 4);
        for max_iter in 1..=4 {
            let f = hooi(&t, &ranks, max_iter, 0.0).unwrap();
            for mode in 1..=3 {
                assert!(orthonormality_defect(f.factor(mode)) <= 1e-10);
            }
        }
    }

    #[test]
    fn reconstruct_identity_factors_returns_core() {
        let core = random_tensor((3, 4, 2), 5);
        let f = TuckerFactors {
            core: core.clone(),
            u1: Matrix::identity(3, 3),
            u2: Matrix::identity(4, 4),
            u3: Matrix::identity(2, 2),
        };
        assert_eq!(tucker_reconstruct(&f).unwrap(), core);
    }

    #[test]
    fn reconstruct_matches_nested_loop_sum() {
        let t = random_tensor((3, 3, 3), 6);
        let f = hosvd(&t, &RankTriple::new(2, 2, 2)).unwrap();
        let rec = tucker_reconstruct(&f).unwrap();
        // Brute-force multilinear sum over the core indices.
        let (r1, r2, r3) = f.core.dims();
        let brute = Tensor3::from_fn((3, 3, 3), |i, j, k| {
            let mut acc = 0.0;
            for a in 0..r1 {
                for b in 0..r2 {
                    for c in 0..r3 {
                        acc += f.core.get(a, b, c) * f.u1[(i, a)] * f.u2[(j, b)] * f.u3[(k, c)];
                    }
                }
            }
            acc
        });
        let diff = rec.lin_comb(1.0, &brute, -1.0).unwrap().frobenius();
        assert!(diff < 1e-12);
    }

    #[test]
    fn reconstruct_shape_mismatch_is_error() {
        let f = TuckerFactors {
            core: Tensor3::zeros((2, 2, 2)),
            u1: Matrix::zeros(3, 2),
            u2: Matrix::zeros(3, 1),
            u3: Matrix::zeros(3, 2),
        };
        assert!(matches!(tucker_reconstruct(&f), Err(LtdlError::Shape(_))));
    }

    #[test]
    fn estimate_ranks_noiseless_planted() {
        let t = planted_tucker((8, 8, 8), &RankTriple::new(2, 2, 2), 12);
        let r = estimate_ranks(&t, 0.0, 0.999).unwrap();
        assert_eq!(r, RankTriple::new(2, 2, 2));
    }

    #[test]
    fn estimate_ranks_full_rank_clamps_to_dim_minus_one() {
        let t = random_tensor((4, 5, 6), 13);
        let r = estimate_ranks(&t, 0.0, 1.0).unwrap();
        assert_eq!(r, RankTriple::new(3, 4, 5));
    }

    #[test]
    fn estimate_ranks_rank_one_plus_tiny_noise() {
        let clean = planted_tucker((6, 6, 6), &RankTriple::new(1, 1, 1), 14);
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let noisy = clean.map(|v| v + 1e-6 * rng.sample::<f64, _>(StandardNormal));
        let r = estimate_ranks(&noisy, 0.0, 0.99).unwrap();
        assert_eq!(r, RankTriple::new(1, 1, 1));
    }

    #[test]
    fn estimate_ranks_invalid_fraction_is_error() {
        let t = Tensor3::zeros((2, 2, 2));
        assert!(matches!(estimate_ranks(&t, 0.0, 0.0), Err(LtdlError::Argument(_))));
        assert!(matches!(estimate_ranks(&t, 0.0, 1.5), Err(LtdlError::Argument(_))));
        assert!(matches!(estimate_ranks(&t, -1.0, 0.5), Err(LtdlError::Argument(_))));
    }

    #[test]
    fn nearly_lowrank_tiny_lambda_is_nearly_identity() {
        let x = random_tensor((5, 5, 5), 20);
        let out = nearly_lowrank_denoise(&x, 1e-12, &RankTriple::new(2, 2, 2), 3).unwrap();
        let diff = out.lin_comb(1.0, &x, -1.0).unwrap().frobenius();
        assert!(diff < 1e-9, "diff {diff}");
    }

    #[test]
    fn nearly_lowrank_rank_one_fixed_point() {
        let x = planted_tucker((5, 4, 6), &RankTriple::new(1, 1, 1), 21);
        for lambda in [0.1, 1.0, 100.0] {
            let out = nearly_lowrank_denoise(&x, lambda, &RankTriple::new(1, 1, 1), 5).unwrap();
            let diff = out.lin_comb(1.0, &x, -1.0).unwrap().frobenius();
            assert!(diff < 1e-8, "lambda {lambda}: diff {diff}");
        }
    }

    #[test]
    fn nearly_lowrank_reduces_noise() {
        let ranks = RankTriple::new(2, 2, 2);
        for seed in 0..10 {
            let clean = planted_tucker((10, 10, 10), &ranks, 300 + seed);
            let mut rng = ChaCha12Rng::seed_from_u64(400 + seed);
            let noisy = clean.map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
            let out = nearly_lowrank_denoise(&noisy, 50.0, &ranks, 5).unwrap();
            let err_in = noisy.lin_comb(1.0, &clean, -1.0).unwrap().frobenius();
            let err_out = out.lin_comb(1.0, &clean, -1.0).unwrap().frobenius();
            assert!(err_out < err_in, "seed {seed}: {err_out} !< {err_in}");
        }
    }

    #[test]
    fn nearly_lowrank_objective_non_increasing() {
        let ranks = RankTriple::new(2, 2, 2);
        let clean = planted_tucker((8, 8, 8), &ranks, 30);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let noisy = clean.map(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal));
        let mut prev = f64::INFINITY;
        for iters in 1..=5 {
            let out = nearly_lowrank_denoise(&noisy, 10.0, &ranks, iters).unwrap();
            let obj = nearly_lowrank_objective(&noisy, &out, 10.0, &ranks).unwrap();
            assert!(obj <= prev * (1.0 + 1e-9), "iters {iters}: {obj} > {prev}");
            prev = obj;
        }
    }

    #[test]
    fn nearly_lowrank_keeps_singular_value_tail() {
        let ranks = RankTriple::new(2, 2, 2);
        let clean = planted_tucker((10, 10, 12), &ranks, 33);
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let noisy = clean.map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));

        let near = nearly_lowrank_denoise(&noisy, 20.0, &ranks, 4).unwrap();
        let hard = tucker_reconstruct(&hooi(&noisy, &ranks, 50, 1e-8).unwrap()).unwrap();

        let sv_in = singular_values(&noisy.unfold(3).unwrap());
        let sv_near = singular_values(&near.unfold(3).unwrap());
        let sv_hard = singular_values(&hard.unfold(3).unwrap());
        for i in ranks.r3..sv_in.len() {
            assert!(sv_hard[i] < 1e-10, "hard truncation tail {} = {}", i, sv_hard[i]);
            assert!(sv_near[i] > 1e-10, "nearly-low-rank tail vanished at {i}");
            assert!(sv_near[i] < sv_in[i], "tail not shrunk at {i}");
        }
    }
}
