//! Shared overcomplete dictionary pair and its constrained least-squares
//! updates.
//!
//! Both dictionary updates reduce to `min_D ||O - D A||_F^2` subject to unit
//! l2-norm columns, a QCQP solved through its Lagrange dual: maximize
//! `g(gamma) = -tr(Q (P + Gamma)^-1 Q^T) - sum(gamma)` over `gamma >= 0`
//! where `P = A A^T`, `Q = O A^T` and `Gamma = diag(gamma)`, then recover
//! `D = Q (P + Gamma)^-1`. The dual is concave; Newton ascent with
//! backtracking converges in a handful of iterations, with a per-coordinate
//! bisection sweep as a fallback when it stalls.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{LtdlError, Result};
use crate::tensor::{Matrix, Tensor3};

/// Spatial dictionary (`d_l*d_w x round(tau_a * d_l*d_w)`) and spectral
/// dictionary (`H x round(tau_e * H)`), both with unit-norm columns, shared
/// by every tensor group.
#[derive(Debug, Clone)]
pub struct DictionaryPair {
    pub d_a: Matrix,
    pub d_e: Matrix,
    pub tau_a: f64,
    pub tau_e: f64,
}

/// Tolerance on `| ||column||_2 - 1 |` for dictionary invariants.
pub const COLUMN_NORM_TOL: f64 = 1e-8;

impl DictionaryPair {
    pub fn new(d_a: Matrix, d_e: Matrix, tau_a: f64, tau_e: f64) -> Result<Self> {
        for (name, d, tau) in [("spatial", &d_a, tau_a), ("spectral", &d_e, tau_e)] {
            if tau < 1.0 {
                return Err(LtdlError::Argument(format!(
                    "{name} redundancy ratio must be >= 1, got {tau}"
                )));
            }
            let want_cols = (tau * d.nrows() as f64).round() as usize;
            if d.ncols() != want_cols {
                return Err(LtdlError::Shape(format!(
                    "{name} dictionary has {} columns, expected round({tau} * {}) = {want_cols}",
                    d.ncols(),
                    d.nrows()
                )));
            }
            for r in 0..d.ncols() {
                let norm = d.column(r).norm();
                if (norm - 1.0).abs() > COLUMN_NORM_TOL {
                    return Err(LtdlError::Argument(format!(
                        "{name} dictionary column {r} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(Self { d_a, d_e, tau_a, tau_e })
    }

    pub fn atom_counts(&self) -> (usize, usize) {
        (self.d_a.ncols(), self.d_e.ncols())
    }
}

/// Nonnegative dual variables of a unit-column solve, one per atom.
#[derive(Debug, Clone)]
pub struct DualVars {
    pub gammas: Vec<f64>,
}

/// Knobs for the dual Newton solver.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub newton_iters: usize,
    /// Tolerance on the KKT residual `| ||d_r||^2 - 1 |` of active atoms.
    pub tol: f64,
    /// Warm start for the duals (e.g. from the previous outer iteration).
    pub initial_gammas: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { newton_iters: 60, tol: 1e-12, initial_gammas: None }
    }
}

/// What happened inside a dictionary solve.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub newton_iterations: usize,
    pub converged: bool,
    pub ridge_applied: bool,
    pub bisection_fallback: bool,
    /// Columns renormalized explicitly after the dual solve (slack or dead
    /// atoms).
    pub renormalized_columns: usize,
}

/// Result of one constrained least-squares dictionary solve.
#[derive(Debug, Clone)]
pub struct DictSolve {
    pub dictionary: Matrix,
    pub duals: DualVars,
    pub diagnostics: SolveDiagnostics,
}

struct DualProblem<'a> {
    gram: &'a Matrix,
    cross: &'a Matrix,
    ridge: f64,
    ridge_applied: bool,
}

struct DualEval {
    /// `(P + Gamma)^-1 Q^T`, whose rows are the candidate atoms.
    b: Matrix,
    /// `(P + Gamma)^-1`, needed for the Hessian.
    inv: Matrix,
    /// Dual objective up to the constant `||O||_F^2`.
    value: f64,
    grad: Vec<f64>,
}

impl<'a> DualProblem<'a> {
    fn new(gram: &'a Matrix, cross: &'a Matrix) -> Self {
        Self { gram, cross, ridge: 0.0, ridge_applied: false }
    }

    fn eval(&mut self, gammas: &[f64]) -> Result<DualEval> {
        let p = self.gram.nrows();
        loop {
            let mut m = self.gram.clone();
            for r in 0..p {
                m[(r, r)] += gammas[r] + self.ridge;
            }
            if let Some(chol) = m.cholesky() {
                let b = chol.solve(&self.cross.transpose());
                let inv = chol.inverse();
                let mut value = -gammas.iter().sum::<f64>();
                for (qb, q) in b.transpose().iter().zip(self.cross.iter()) {
                    value -= qb * q;
                }
                let grad: Vec<f64> = (0..p).map(|r| b.row(r).norm_squared() - 1.0).collect();
                return Ok(DualEval { b, inv, value, grad });
            }
            // PSD gram with a zero dual on an unused atom: regularize.
            let scale = 1.0 + self.gram.trace() / p as f64;
            self.ridge = if self.ridge == 0.0 { 1e-10 * scale } else { self.ridge * 10.0 };
            self.ridge_applied = true;
            if self.ridge > scale {
                return Err(LtdlError::Numerical(
                    "dictionary normal equations remained singular after ridge escalation".into(),
                ));
            }
        }
    }
}

fn kkt_residual(gammas: &[f64], grad: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (&g, &d) in gammas.iter().zip(grad) {
        let r = if g > 0.0 { d.abs() } else { d.max(0.0) };
        worst = worst.max(r);
    }
    worst
}

/// Solves `min_D ||O - D A||_F^2` s.t. unit-norm columns of `D`, given the
/// accumulated Gram `P = A A^T` and cross matrix `Q = O A^T`.
pub fn solve_unit_column_ls_gram(
    cross: &Matrix,
    gram: &Matrix,
    opts: &SolveOptions,
) -> Result<DictSolve> {
    let p = gram.nrows();
    if gram.ncols() != p || cross.ncols() != p {
        return Err(LtdlError::Shape(format!(
            "gram must be square and cross must have matching columns (gram {}x{}, cross {}x{})",
            gram.nrows(),
            gram.ncols(),
            cross.nrows(),
            cross.ncols()
        )));
    }
    let mut problem = DualProblem::new(gram, cross);
    let diag_scale = gram.trace() / p as f64;
    let mut gammas: Vec<f64> = match &opts.initial_gammas {
        Some(init) if init.len() == p => init.iter().map(|g| g.max(0.0)).collect(),
        _ => (0..p)
            .map(|r| 0.1 * gram[(r, r)] + 1e-12 * (1.0 + diag_scale))
            .collect(),
    };
    let mut eval = problem.eval(&gammas)?;
    let mut diag = SolveDiagnostics::default();
    let mut stalls = 0usize;

    for iter in 0..opts.newton_iters {
        diag.newton_iterations = iter;
        if kkt_residual(&gammas, &eval.grad) < opts.tol {
            diag.converged = true;
            break;
        }
        // Active-set Newton: coordinates pinned at 0 whose gradient points
        // outward stay fixed; the step solves the reduced system on the
        // free set. H = -2 (B B^T) o S on the concave dual.
        let free: Vec<usize> = (0..p)
            .filter(|&r| gammas[r] > 0.0 || eval.grad[r] > 0.0)
            .collect();
        if free.is_empty() {
            diag.converged = true;
            break;
        }
        let bbt = &eval.b * eval.b.transpose();
        let h = bbt.component_mul(&eval.inv) * 2.0;
        let nf = free.len();
        let mut h_ff = Matrix::zeros(nf, nf);
        for (ii, &ri) in free.iter().enumerate() {
            for (jj, &rj) in free.iter().enumerate() {
                h_ff[(ii, jj)] = h[(ri, rj)];
            }
        }
        let h_floor = 1e-14 * (1.0 + h_ff.trace() / nf as f64);
        for r in 0..nf {
            h_ff[(r, r)] += h_floor;
        }
        let grad_f =
            nalgebra::DVector::from_iterator(nf, free.iter().map(|&r| eval.grad[r]));
        let step_f = match h_ff.cholesky() {
            Some(chol) => chol.solve(&grad_f),
            None => grad_f.clone(),
        };
        let mut step = vec![0.0; p];
        for (ii, &r) in free.iter().enumerate() {
            step[r] = step_f[ii];
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate: Vec<f64> = gammas
                .iter()
                .zip(step.iter())
                .map(|(g, s)| (g + alpha * s).max(0.0))
                .collect();
            let cand_eval = problem.eval(&candidate)?;
            if cand_eval.value > eval.value {
                gammas = candidate;
                eval = cand_eval;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            stalls += 1;
            if stalls >= 2 {
                // Per-coordinate bisection on the monotone gradient.
                diag.bisection_fallback = true;
                for _sweep in 0..2 {
                    for r in 0..p {
                        let mut lo = 0.0f64;
                        let mut probe = gammas.clone();
                        probe[r] = 0.0;
                        if problem.eval(&probe)?.grad[r] <= 0.0 {
                            gammas[r] = 0.0;
                            continue;
                        }
                        let mut hi = gammas[r].max(diag_scale.max(1.0));
                        for _ in 0..60 {
                            probe[r] = hi;
                            if problem.eval(&probe)?.grad[r] < 0.0 {
                                break;
                            }
                            hi *= 4.0;
                        }
                        for _ in 0..80 {
                            let mid = 0.5 * (lo + hi);
                            probe[r] = mid;
                            if problem.eval(&probe)?.grad[r] > 0.0 {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        gammas[r] = 0.5 * (lo + hi);
                    }
                }
                eval = problem.eval(&gammas)?;
                diag.converged = kkt_residual(&gammas, &eval.grad) < opts.tol;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    if !diag.converged {
        diag.converged = kkt_residual(&gammas, &eval.grad) < opts.tol;
    }

    let mut dictionary = eval.b.transpose();
    for r in 0..p {
        let norm = dictionary.column(r).norm();
        if (norm - 1.0).abs() > opts.tol.max(COLUMN_NORM_TOL) {
            diag.renormalized_columns += 1;
            if norm < 1e-12 {
                // Dead atom: deterministic unit replacement.
                let m = dictionary.nrows();
                let mut col = nalgebra::DVector::zeros(m);
                col[r % m] = 1.0;
                dictionary.set_column(r, &col);
            } else {
                let col = dictionary.column(r) / norm;
                dictionary.set_column(r, &col);
            }
        }
    }
    diag.ridge_applied = problem.ridge_applied;
    // Fold any ridge into the reported duals so D can be reproduced from
    // them via the closed form.
    if problem.ridge > 0.0 {
        for g in gammas.iter_mut() {
            *g += problem.ridge;
        }
    }
    Ok(DictSolve {
        dictionary,
        duals: DualVars { gammas },
        diagnostics: diag,
    })
}

/// Convenience entry point from explicit `O` (m x N) and `A` (p x N).
pub fn solve_unit_column_ls(o: &Matrix, a: &Matrix, opts: &SolveOptions) -> Result<DictSolve> {
    if o.ncols() != a.ncols() {
        return Err(LtdlError::Shape(format!(
            "O and A must share the sample dimension, got {} and {}",
            o.ncols(),
            a.ncols()
        )));
    }
    let gram = a * a.transpose();
    let cross = o * a.transpose();
    solve_unit_column_ls_gram(&cross, &gram, opts)
}

fn random_unit_column(len: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Initializes both dictionaries by sampling fibers of the data: spatial
/// atoms from mode-1 fibers, spectral atoms from mode-2 fibers, normalized
/// to unit norm. Zero or duplicate fibers are replaced by random unit
/// vectors. Deterministic per seed.
pub fn init_dictionaries(
    groups: &[Tensor3],
    tau_a: f64,
    tau_e: f64,
    seed: u64,
) -> Result<DictionaryPair> {
    if groups.is_empty() {
        return Err(LtdlError::Argument("need at least one group".into()));
    }
    let (rows_a, rows_e, _) = groups[0].dims();
    if groups.iter().any(|g| g.dims().0 != rows_a || g.dims().1 != rows_e) {
        return Err(LtdlError::Shape(
            "groups must share spatial and spectral dimensions".into(),
        ));
    }
    if tau_a < 1.0 || tau_e < 1.0 {
        return Err(LtdlError::Argument(format!(
            "redundancy ratios must be >= 1, got ({tau_a}, {tau_e})"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sample = |rows: usize, cols: usize, spatial: bool| -> Matrix {
        let mut d = Matrix::zeros(rows, cols);
        for r in 0..cols {
            let g = &groups[rng.random_range(0..groups.len())];
            let (i1, i2, i3) = g.dims();
            let fiber: Vec<f64> = if spatial {
                let (b, t) = (rng.random_range(0..i2), rng.random_range(0..i3));
                (0..i1).map(|i| g.get(i, b, t)).collect()
            } else {
                let (s, t) = (rng.random_range(0..i1), rng.random_range(0..i3));
                (0..i2).map(|j| g.get(s, j, t)).collect()
            };
            let norm = fiber.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut col: Vec<f64> = if !norm.is_finite() || norm < 1e-12 {
                random_unit_column(rows, &mut rng)
            } else {
                fiber.into_iter().map(|x| x / norm).collect()
            };
            // Replace near-duplicates of already chosen atoms.
            let is_dup = |col: &[f64], d: &Matrix, upto: usize| {
                (0..upto).any(|q| {
                    let dot: f64 = col.iter().zip(d.column(q).iter()).map(|(a, b)| a * b).sum();
                    dot.abs() > 1.0 - 1e-10
                })
            };
            while is_dup(&col, &d, r) {
                col = random_unit_column(rows, &mut rng);
            }
            d.set_column(r, &nalgebra::DVector::from_column_slice(&col));
        }
        d
    };
    let cols_a = (tau_a * rows_a as f64).round() as usize;
    let cols_e = (tau_e * rows_e as f64).round() as usize;
    let d_a = sample(rows_a, cols_a, true);
    let d_e = sample(rows_e, cols_e, false);
    DictionaryPair::new(d_a, d_e, tau_a, tau_e)
}

/// Accumulated normal equations for the spatial dictionary: per group,
/// `A^(k) = Z^(k) x2 D^e`, contributing `A_(1) A_(1)^T` and `O_(1) A_(1)^T`.
/// The stacked matrices of the formulation are never materialized.
fn accumulate_spatial(os: &[Tensor3], zs: &[Tensor3], d_e: &Matrix) -> Result<(Matrix, Matrix)> {
    let na = zs[0].dims().0;
    let m = os[0].dims().0;
    let mut gram = Matrix::zeros(na, na);
    let mut cross = Matrix::zeros(m, na);
    for (o, z) in os.iter().zip(zs) {
        let a = z.mode_product(d_e, 2)?;
        if a.dims().1 != o.dims().1 || a.dims().2 != o.dims().2 {
            return Err(LtdlError::Shape(format!(
                "group shapes {:?} (O) and {:?} (Z x2 De) do not align",
                o.dims(),
                a.dims()
            )));
        }
        let a1 = a.unfold(1)?;
        let o1 = o.unfold(1)?;
        gram += &a1 * a1.transpose();
        cross += o1 * a1.transpose();
    }
    Ok((gram, cross))
}

fn accumulate_spectral(os: &[Tensor3], zs: &[Tensor3], d_a: &Matrix) -> Result<(Matrix, Matrix)> {
    let ne = zs[0].dims().1;
    let m = os[0].dims().1;
    let mut gram = Matrix::zeros(ne, ne);
    let mut cross = Matrix::zeros(m, ne);
    for (o, z) in os.iter().zip(zs) {
        let e = z.mode_product(d_a, 1)?;
        if e.dims().0 != o.dims().0 || e.dims().2 != o.dims().2 {
            return Err(LtdlError::Shape(format!(
                "group shapes {:?} (O) and {:?} (Z x1 Da) do not align",
                o.dims(),
                e.dims()
            )));
        }
        let e2 = e.unfold(2)?;
        let o2 = o.unfold(2)?;
        gram += &e2 * e2.transpose();
        cross += o2 * e2.transpose();
    }
    Ok((gram, cross))
}

/// Updates the spatial dictionary from the per-group targets `O^(k)` and the
/// current codes `Z^(k)`, holding the spectral dictionary fixed.
pub fn update_spatial_dictionary(
    os: &[Tensor3],
    zs: &[Tensor3],
    d_e: &Matrix,
    opts: &SolveOptions,
) -> Result<DictSolve> {
    if os.is_empty() || os.len() != zs.len() {
        return Err(LtdlError::Argument(
            "need matching, non-empty O and Z group lists".into(),
        ));
    }
    let (gram, cross) = accumulate_spatial(os, zs, d_e)?;
    solve_unit_column_ls_gram(&cross, &gram, opts)
}

/// Updates the spectral dictionary symmetrically, with `E^(k) = Z^(k) x1 D^a`
/// and mode-2 unfoldings.
pub fn update_spectral_dictionary(
    os: &[Tensor3],
    zs: &[Tensor3],
    d_a: &Matrix,
    opts: &SolveOptions,
) -> Result<DictSolve> {
    if os.is_empty() || os.len() != zs.len() {
        return Err(LtdlError::Argument(
            "need matching, non-empty O and Z group lists".into(),
        ));
    }
    let (gram, cross) = accumulate_spectral(os, zs, d_a)?;
    solve_unit_column_ls_gram(&cross, &gram, opts)
}

/// Stacked least-squares objective `sum_k ||O^(k) - Z^(k) x1 Da x2 De||_F^2`.
pub fn stacked_objective(
    os: &[Tensor3],
    zs: &[Tensor3],
    d_a: &Matrix,
    d_e: &Matrix,
) -> Result<f64> {
    let mut total = 0.0;
    for (o, z) in os.iter().zip(zs) {
        let rec = z.mode_product(d_a, 1)?.mode_product(d_e, 2)?;
        total += o.lin_comb(1.0, &rec, -1.0)?.frobenius().powi(2);
    }
    Ok(total)
}
