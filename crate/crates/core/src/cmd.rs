//! Classical minimum distance estimation of the stability-restricted
//! parameters: the weighted distance between the stacked regime covariances
//! and their structure-implied counterparts is minimized by damped
//! Gauss-Newton with the analytic Jacobian, weighted by a moving-block
//! bootstrap (or closed-form Gaussian) estimate of the covariance of the
//! reduced-form moments.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::identification::{jacobian, moment_jacobian};
use crate::linalg::{vech_len, DuplicationOps, SymVec};
use crate::lm::{minimize, LmOptions};
use crate::reduced_form::ReducedFormFit;
use crate::restrictions::Restrictions;
use crate::rng::{nested_rng, task_rng};

/// Moving-block-bootstrap block length per regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockLength {
    /// `floor(T_i^{1/3})` per regime.
    Auto,
    Fixed(usize),
}

/// Per-regime estimates of the asymptotic covariance of
/// `sqrt(T_i) vech(Sigma_hat_i)`.
#[derive(Debug, Clone)]
pub struct Weighting {
    v1: DMatrix<f64>,
    v2: DMatrix<f64>,
    t1: usize,
    t2: usize,
}

impl Weighting {
    /// Closed-form Gaussian blocks `2 Dplus (Sigma (x) Sigma) Dplus'`,
    /// exact for i.i.d. Gaussian innovations and fast enough for Monte
    /// Carlo work.
    pub fn gaussian(fit: &ReducedFormFit) -> Result<Weighting> {
        let (t1, t2) = fit.regime_sizes();
        Self::gaussian_from_sigmas(fit.sigma(1), fit.sigma(2), t1, t2)
    }

    pub fn gaussian_from_sigmas(
        sigma1: &DMatrix<f64>,
        sigma2: &DMatrix<f64>,
        t1: usize,
        t2: usize,
    ) -> Result<Weighting> {
        let m = sigma1.nrows();
        if sigma2.nrows() != m || sigma1.ncols() != m || sigma2.ncols() != m {
            return Err(Error::Shape("regime covariances must be square and same size".into()));
        }
        let dplus = DuplicationOps::cached(m)?;
        let block = |s: &DMatrix<f64>| dplus.dplus() * s.kronecker(s) * dplus.dplus().transpose() * 2.0;
        Ok(Weighting { v1: block(sigma1), v2: block(sigma2), t1, t2 })
    }

    /// Moving-block bootstrap within each volatility regime: overlapping
    /// blocks of residual rows are resampled, the regime covariance is
    /// recomputed per draw, and the block is `T_i` times the sample
    /// covariance of `vech(Sigma*_i)` across draws. Blocks never span the
    /// break because each regime is resampled from its own rows only.
    pub fn mbb(
        fit: &ReducedFormFit,
        block_len: BlockLength,
        n_boot: usize,
        seed: u64,
    ) -> Result<Weighting> {
        let res1 = fit.regime_residuals(1);
        let res2 = fit.regime_residuals(2);
        Self::mbb_from_residuals(&res1, &res2, block_len, n_boot, seed)
    }

    pub fn mbb_from_residuals(
        res1: &DMatrix<f64>,
        res2: &DMatrix<f64>,
        block_len: BlockLength,
        n_boot: usize,
        seed: u64,
    ) -> Result<Weighting> {
        if n_boot < 200 {
            return Err(Error::Domain(format!(
                "the bootstrap needs at least 200 draws, got {n_boot}"
            )));
        }
        let v1 = mbb_block(res1, block_len, n_boot, seed, 0)?;
        let v2 = mbb_block(res2, block_len, n_boot, seed, 1)?;
        Ok(Weighting { v1, v2, t1: res1.nrows(), t2: res2.nrows() })
    }

    /// Raw per-regime block (scale: `avar(sqrt(T_i) vech Sigma_hat_i)`).
    pub fn regime_block(&self, regime: usize) -> &DMatrix<f64> {
        if regime <= 1 {
            &self.v1
        } else {
            &self.v2
        }
    }

    pub fn regime_sizes(&self) -> (usize, usize) {
        (self.t1, self.t2)
    }

    /// Weighting matrix on the `sqrt(T)` scale of the stacked moments:
    /// `diag(V_1 T/T_1, V_2 T/T_2)`. This is the matrix the CMD objective
    /// inverts, and what makes `T x objective` asymptotically chi-square.
    pub fn v_sigma_eta(&self) -> DMatrix<f64> {
        let q = self.v1.nrows();
        let t = (self.t1 + self.t2) as f64;
        let mut v = DMatrix::zeros(2 * q, 2 * q);
        v.view_mut((0, 0), (q, q)).copy_from(&(&self.v1 * (t / self.t1 as f64)));
        v.view_mut((q, q), (q, q)).copy_from(&(&self.v2 * (t / self.t2 as f64)));
        v
    }
}

fn mbb_block(
    res: &DMatrix<f64>,
    block_len: BlockLength,
    n_boot: usize,
    seed: u64,
    regime_tag: u64,
) -> Result<DMatrix<f64>> {
    let t_i = res.nrows();
    let m = res.ncols();
    let l = match block_len {
        BlockLength::Auto => ((t_i as f64).cbrt().floor() as usize).max(1),
        BlockLength::Fixed(l) => l,
    };
    if l < 1 || l > t_i / 4 {
        return Err(Error::Domain(format!(
            "block length {l} outside [1, T_i/4] for a regime of {t_i} residuals"
        )));
    }
    let n_starts = t_i - l + 1;
    let n_blocks = t_i.div_ceil(l);
    let q = vech_len(m);
    let mut draws = DMatrix::zeros(n_boot, q);
    for d in 0..n_boot {
        let mut rng = nested_rng(seed, regime_tag, d as u64);
        let mut acc = vec![0.0; q];
        let mut filled = 0usize;
        for _ in 0..n_blocks {
            let start = rng.random_range(0..n_starts);
            let take = l.min(t_i - filled);
            for row in start..start + take {
                let mut kidx = 0;
                for j in 0..m {
                    for i in j..m {
                        acc[kidx] += res[(row, i)] * res[(row, j)];
                        kidx += 1;
                    }
                }
            }
            filled += take;
            if filled == t_i {
                break;
            }
        }
        for (kidx, a) in acc.iter().enumerate() {
            draws[(d, kidx)] = a / t_i as f64;
        }
    }
    let mean = draws.row_mean();
    let mut centered = draws;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    Ok(centered.transpose() * &centered * (t_i as f64 / (n_boot - 1) as f64))
}

/// Everything the distance function needs: the stacked moment estimates,
/// the compiled restrictions, and the inverted weighting matrix (factorized
/// once).
#[derive(Debug, Clone)]
pub struct DistanceContext {
    sigma_hat: DVector<f64>,
    rs: Restrictions,
    v: DMatrix<f64>,
    /// lower Cholesky factor of `v`, for whitening
    l: DMatrix<f64>,
    t: usize,
}

impl DistanceContext {
    pub fn new(fit: &ReducedFormFit, rs: &Restrictions, w: &Weighting) -> Result<Self> {
        let (s1, s2) = fit.sigma_stack();
        Self::from_moments(&s1, &s2, w, rs)
    }

    /// Builds the context from raw moment estimates: `sigma_i` is
    /// `vech(Sigma_hat_i)` and `w` the per-regime weighting blocks.
    pub fn from_moments(
        sigma1: &SymVec,
        sigma2: &SymVec,
        w: &Weighting,
        rs: &Restrictions,
    ) -> Result<Self> {
        let m = rs.m();
        if sigma1.dim() != m || sigma2.dim() != m {
            return Err(Error::Shape(format!(
                "moments are for dimension {} but restrictions expect {m}",
                sigma1.dim()
            )));
        }
        let q = vech_len(m);
        if w.regime_block(1).nrows() != q {
            return Err(Error::Shape("weighting blocks do not match the system size".into()));
        }
        let mut sigma_hat = DVector::zeros(2 * q);
        sigma_hat.rows_mut(0, q).copy_from(sigma1.as_vector());
        sigma_hat.rows_mut(q, q).copy_from(sigma2.as_vector());
        let v = w.v_sigma_eta();
        let l = Cholesky::new(v.clone())
            .ok_or_else(|| Error::Degeneracy("weighting matrix is not positive definite".into()))?
            .l();
        let (t1, t2) = w.regime_sizes();
        Ok(DistanceContext { sigma_hat, rs: rs.clone(), v, l, t: t1 + t2 })
    }

    pub fn restrictions(&self) -> &Restrictions {
        &self.rs
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn sigma_hat(&self) -> &DVector<f64> {
        &self.sigma_hat
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Model-implied stacked moments `(vech(GG'); vech((G+dG) Psi (G+dG)'))`.
    pub fn implied_moments(&self, varsigma: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.rs.m();
        let (g, dg, psi_diag) = self.rs.reconstruct(varsigma)?;
        let b = &g + &dg;
        let sigma1 = &g * g.transpose();
        let mut b_psi = b.clone();
        for j in 0..m {
            b_psi.column_mut(j).scale_mut(psi_diag[j]);
        }
        let sigma2 = b_psi * b.transpose();
        let q = vech_len(m);
        let mut mu = DVector::zeros(2 * q);
        mu.rows_mut(0, q).copy_from(SymVec::vech_unchecked(&sigma1).as_vector());
        mu.rows_mut(q, q).copy_from(SymVec::vech_unchecked(&sigma2).as_vector());
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("implied moments are not finite".into()));
        }
        Ok(mu)
    }

    /// The distance residual `m = sigma_hat - mu(varsigma)` and the
    /// objective `m' V^{-1} m`.
    pub fn distance(&self, varsigma: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let m = &self.sigma_hat - self.implied_moments(varsigma)?;
        let w = self
            .l
            .solve_lower_triangular(&m)
            .ok_or_else(|| Error::Numeric("whitening solve failed".into()))?;
        Ok((m, w.norm_squared()))
    }

    fn whitened_residual(&self, varsigma: &DVector<f64>) -> Option<DVector<f64>> {
        let mu = self.implied_moments(varsigma).ok()?;
        self.l.solve_lower_triangular(&(&self.sigma_hat - mu))
    }

    fn whitened_jacobian(&self, varsigma: &DVector<f64>) -> Option<DMatrix<f64>> {
        // d residual / d varsigma = -L^{-1} dmu/dvarsigma
        let j = moment_jacobian(&self.rs, varsigma).ok()?;
        self.l.solve_lower_triangular(&j).map(|w| -w)
    }
}

/// Optimizer settings for [`estimate`].
#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub n_starts: usize,
    pub seed: u64,
    pub lm: LmOptions,
    /// Skip the rank-condition check at the starting point (the `identify`
    /// command computes it anyway).
    pub skip_identification_check: bool,
    /// Replaces the Cholesky-based first start (bootstrap draws seed here
    /// with the point estimate).
    pub initial: Option<DVector<f64>>,
}

impl EstimateOptions {
    pub fn new(seed: u64) -> Self {
        EstimateOptions {
            n_starts: 20,
            seed,
            lm: LmOptions::default(),
            skip_identification_check: false,
            initial: None,
        }
    }

    pub fn with_starts(mut self, n: usize) -> Self {
        self.n_starts = n;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StartSummary {
    pub start: usize,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceInfo {
    pub winning_start: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    pub starts: Vec<StartSummary>,
}

/// CMD estimate with its asymptotic covariance and the overidentifying
/// restrictions test.
#[derive(Debug, Clone)]
pub struct CmdFit {
    rs: Restrictions,
    varsigma: DVector<f64>,
    g: DMatrix<f64>,
    delta_g: DMatrix<f64>,
    psi_diag: DVector<f64>,
    v_varsigma: DMatrix<f64>,
    j_stat: f64,
    dof: usize,
    p_value: Option<f64>,
    t: usize,
    convergence: ConvergenceInfo,
}

impl CmdFit {
    pub fn restrictions(&self) -> &Restrictions {
        &self.rs
    }

    pub fn varsigma(&self) -> &DVector<f64> {
        &self.varsigma
    }

    /// Target-IRF parameter subvector.
    pub fn theta(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rs.theta_index().len(),
            self.rs.theta_index().iter().map(|&i| self.varsigma[i]),
        )
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn delta_g(&self) -> &DMatrix<f64> {
        &self.delta_g
    }

    pub fn psi_diag(&self) -> &DVector<f64> {
        &self.psi_diag
    }

    /// Asymptotic covariance of `sqrt(T)(varsigma_hat - varsigma0)`,
    /// `(J' V^{-1} J)^{-1}`.
    pub fn v_varsigma(&self) -> &DMatrix<f64> {
        &self.v_varsigma
    }

    /// The theta sub-block of [`CmdFit::v_varsigma`].
    pub fn v_theta(&self) -> DMatrix<f64> {
        let idx = self.rs.theta_index();
        DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.v_varsigma[(idx[i], idx[j])])
    }

    /// Standard errors on the sample scale: `sqrt(diag(V) / T)`.
    pub fn standard_errors(&self) -> DVector<f64> {
        DVector::from_fn(self.varsigma.len(), |i, _| {
            (self.v_varsigma[(i, i)] / self.t as f64).sqrt()
        })
    }

    /// `T` times the minimized objective.
    pub fn j_stat(&self) -> f64 {
        self.j_stat
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    /// Chi-square p-value of the overidentifying restrictions test; `None`
    /// when the model is exactly identified.
    pub fn p_value(&self) -> Option<f64> {
        self.p_value
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn convergence(&self) -> &ConvergenceInfo {
        &self.convergence
    }

    pub fn to_report(&self) -> CmdReport {
        CmdReport {
            parameter_names: self.rs.names().to_vec(),
            varsigma: self.varsigma.iter().copied().collect(),
            standard_errors: self.standard_errors().iter().copied().collect(),
            theta_index: self.rs.theta_index().to_vec(),
            g: matrix_rows(&self.g),
            delta_g: matrix_rows(&self.delta_g),
            psi_diag: self.psi_diag.iter().copied().collect(),
            j_stat: self.j_stat,
            dof: self.dof,
            p_value: self.p_value,
            t: self.t,
            convergence: self.convergence.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CmdReport {
    pub parameter_names: Vec<String>,
    pub varsigma: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub theta_index: Vec<usize>,
    pub g: Vec<Vec<f64>>,
    pub delta_g: Vec<Vec<f64>>,
    pub psi_diag: Vec<f64>,
    pub j_stat: f64,
    pub dof: usize,
    pub p_value: Option<f64>,
    pub t: usize,
    pub convergence: ConvergenceInfo,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Internal parametrization: free psi entries enter the optimizer in logs
/// so positivity never binds.
fn to_optimizer(rs: &Restrictions, varsigma: &DVector<f64>) -> DVector<f64> {
    let ab = rs.a() + rs.b();
    DVector::from_fn(varsigma.len(), |i, _| if i < ab { varsigma[i] } else { varsigma[i].ln() })
}

fn from_optimizer(rs: &Restrictions, x: &DVector<f64>) -> DVector<f64> {
    let ab = rs.a() + rs.b();
    DVector::from_fn(x.len(), |i, _| if i < ab { x[i] } else { x[i].exp() })
}

/// Cholesky-based starting point: free `G` cells from the factor of the
/// first-regime covariance, free shift cells from the difference of the two
/// regime factors, unit variance ratios.
fn cholesky_start(ctx: &DistanceContext) -> DVector<f64> {
    let rs = ctx.restrictions();
    let m = rs.m();
    let q = vech_len(m);
    let s1 = SymVec::from_vector(m, ctx.sigma_hat().rows(0, q).clone_owned())
        .expect("stacked moments sized by construction")
        .unvech();
    let s2 = SymVec::from_vector(m, ctx.sigma_hat().rows(q, q).clone_owned())
        .expect("stacked moments sized by construction")
        .unvech();
    let l1 = Cholesky::new(s1).map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(m, m));
    let l2 = Cholesky::new(s2).map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(m, m));
    let dl = &l2 - &l1;
    rs.read_back(&l1, &dl, &DVector::from_element(m, 1.0))
}

/// Minimizes the weighted distance over `n_starts` local searches and
/// assembles the fit: best converged start, column signs normalized so the
/// diagonal of `G` is positive (where the pattern admits a flip), asymptotic
/// covariance from the analytic Jacobian, and the J statistic with its
/// chi-square p-value when the model is overidentified.
pub fn estimate(ctx: &DistanceContext, opts: &EstimateOptions) -> Result<CmdFit> {
    let rs = ctx.restrictions();
    if rs.n_params() == 0 {
        return Err(Error::Domain("no free parameters to estimate".into()));
    }
    if !rs.order_condition_ok() {
        return Err(Error::Identification(format!(
            "order condition fails: {} free parameters exceed {} moment conditions",
            rs.n_params(),
            rs.n_moments()
        )));
    }
    let start0 = match &opts.initial {
        Some(v) if v.len() == rs.n_params() => v.clone(),
        Some(v) => {
            return Err(Error::Shape(format!(
                "initial point has length {}, expected {}",
                v.len(),
                rs.n_params()
            )))
        }
        None => cholesky_start(ctx),
    };
    if !opts.skip_identification_check {
        precheck_rank(rs, &start0, opts.seed)?;
    }

    let x0 = to_optimizer(rs, &start0);
    let residual = |x: &DVector<f64>| ctx.whitened_residual(&from_optimizer(rs, x));
    let jac = |x: &DVector<f64>| {
        let varsigma = from_optimizer(rs, x);
        let mut j = ctx.whitened_jacobian(&varsigma)?;
        // chain rule for the log-psi block
        let ab = rs.a() + rs.b();
        for c in ab..rs.n_params() {
            j.column_mut(c).scale_mut(varsigma[c]);
        }
        Some(j)
    };

    let mut starts = Vec::with_capacity(opts.n_starts);
    let mut best: Option<(usize, crate::lm::LmOutcome)> = None;
    for s in 0..opts.n_starts.max(1) {
        let x_init = if s == 0 {
            x0.clone()
        } else {
            let mut rng = task_rng(opts.seed, s as u64);
            let ab = rs.a() + rs.b();
            DVector::from_fn(x0.len(), |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if i < ab {
                    x0[i] * (1.0 + 0.2 * z)
                } else {
                    x0[i] + 0.2 * z
                }
            })
        };
        let out = minimize(x_init, &residual, &jac, &opts.lm);
        starts.push(StartSummary {
            start: s,
            converged: out.converged,
            iterations: out.iterations,
            objective: out.objective,
            grad_norm: out.grad_norm,
        });
        let better = match &best {
            Some((_, b)) => {
                (out.converged && !b.converged) || (out.converged == b.converged && out.objective < b.objective)
            }
            None => true,
        };
        if better {
            best = Some((s, out));
        }
    }
    let (winning_start, out) = best.expect("at least one start");
    if !out.converged {
        let details = starts
            .iter()
            .map(|s| {
                format!(
                    "start {}: converged={} iters={} obj={:.3e} grad={:.3e}",
                    s.start, s.converged, s.iterations, s.objective, s.grad_norm
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Optimization { details });
    }

    let mut varsigma = from_optimizer(rs, &out.x);
    normalize_column_signs(rs, &mut varsigma)?;
    let (g, delta_g, psi_diag) = rs.reconstruct(&varsigma)?;
    let (_, objective) = ctx.distance(&varsigma)?;

    // asymptotic covariance (J' V^{-1} J)^{-1} in levels of varsigma
    let j_levels = jacobian(rs, &varsigma)?;
    let whitened = ctx
        .l
        .solve_lower_triangular(j_levels.matrix())
        .ok_or_else(|| Error::Numeric("whitening solve failed".into()))?;
    let info = whitened.transpose() * &whitened;
    let v_varsigma = Cholesky::new(info)
        .ok_or_else(|| {
            Error::Identification(
                "(J' V^-1 J) is singular at the optimum; the model is not locally identified there"
                    .into(),
            )
        })?
        .inverse();

    let t = ctx.t();
    let j_stat = t as f64 * objective;
    let dof = rs.n_moments() - rs.n_params();
    let p_value = if dof > 0 {
        let chi = ChiSquared::new(dof as f64)
            .map_err(|e| Error::Numeric(format!("chi-square setup: {e}")))?;
        Some(1.0 - chi.cdf(j_stat))
    } else {
        None
    };

    Ok(CmdFit {
        rs: rs.clone(),
        varsigma,
        g,
        delta_g,
        psi_diag,
        v_varsigma,
        j_stat,
        dof,
        p_value,
        t,
        convergence: ConvergenceInfo {
            winning_start,
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            objective,
            starts,
        },
    })
}

/// The rank condition is a generic property; reject only when the Jacobian
/// is rank-deficient at the starting point and at every probe around it.
fn precheck_rank(rs: &Restrictions, varsigma: &DVector<f64>, seed: u64) -> Result<()> {
    let p = rs.n_params();
    let mut best_rank = 0;
    for probe in 0..6u64 {
        let x = if probe == 0 {
            varsigma.clone()
        } else {
            let mut rng = task_rng(seed ^ 0x9e3779b97f4a7c15, probe);
            let ab = rs.a() + rs.b();
            DVector::from_fn(p, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if i < ab {
                    varsigma[i] + 1e-2 * varsigma[i].abs().max(1.0) * z
                } else {
                    varsigma[i] * (1e-2 * z).exp()
                }
            })
        };
        if let Ok(j) = jacobian(rs, &x) {
            best_rank = best_rank.max(j.rank());
            if best_rank == p {
                return Ok(());
            }
        }
    }
    Err(Error::Identification(format!(
        "rank condition fails near the starting point (rank {best_rank} of {p}); \
         run an identification report, or override the check to proceed anyway"
    )))
}

/// Flips column signs of `G` and `Delta_G` jointly so every diagonal entry
/// of `G` is positive, wherever the pattern admits the flip (all fixed cells
/// of that column zero). The moments are invariant, so this only picks the
/// reported representative.
fn normalize_column_signs(rs: &Restrictions, varsigma: &mut DVector<f64>) -> Result<()> {
    let (mut g, mut dg, psi) = rs.reconstruct(varsigma)?;
    let m = rs.m();
    let mut flipped = false;
    for c in 0..m {
        if g[(c, c)] < 0.0 && rs.column_flip_admissible(c) {
            g.column_mut(c).neg_mut();
            dg.column_mut(c).neg_mut();
            flipped = true;
        }
    }
    if flipped {
        *varsigma = rs.read_back(&g, &dg, &psi);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restrictions::{Cell, CompileOptions, PatternMatrix};
    use approx::assert_abs_diff_eq;

    pub(crate) fn example_rs() -> Restrictions {
        let mut g = PatternMatrix::all_free(3, 3);
        g.set(0, 2, Cell::Fixed(0.0));
        g.set(1, 2, Cell::Fixed(0.0));
        let mut dg = PatternMatrix::filled(3, 3, 0.0);
        dg.set(0, 0, Cell::free());
        dg.set(1, 0, Cell::free());
        let psi = PatternMatrix::all_free(3, 1);
        Restrictions::compile(2, 1, &g, &dg, &psi, &CompileOptions::with_k(1)).unwrap()
    }

    pub(crate) fn truth() -> DVector<f64> {
        // gamma: g(1,1) g(2,1) g(3,1) g(2,2)... in vec order:
        // col1: h11, h21, phi; col2: h12, h22, ups; col3: omega
        // delta: dh11, dh21; psi: 0.25, 4.0, 1.0
        DVector::from_column_slice(&[
            1.0, 0.5, 0.5, // first column of G
            0.0, 0.8, 0.2, // second column (h12, h22, upsilon)
            0.8, // omega
            -0.4, 0.3, // shift cells
            0.25, 4.0, 1.0, // psi
        ])
    }

    pub(crate) fn population_context(rs: &Restrictions, varsigma0: &DVector<f64>) -> DistanceContext {
        let (g, dg, psi) = rs.reconstruct(varsigma0).unwrap();
        let b = &g + &dg;
        let sigma1 = &g * g.transpose();
        let sigma2 = &b * DMatrix::from_diagonal(&psi) * b.transpose();
        let w = Weighting::gaussian_from_sigmas(&sigma1, &sigma2, 50_000, 50_000).unwrap();
        DistanceContext::from_moments(
            &SymVec::vech_unchecked(&sigma1),
            &SymVec::vech_unchecked(&sigma2),
            &w,
            rs,
        )
        .unwrap()
    }

    #[test]
    fn distance_vanishes_at_truth() {
        let rs = example_rs();
        let v0 = truth();
        let ctx = population_context(&rs, &v0);
        let (m, obj) = ctx.distance(&v0).unwrap();
        assert!(m.amax() < 1e-14);
        assert!(obj < 1e-24);
    }

    #[test]
    fn distance_identity_case() {
        // G = I, Delta_G = 0, Psi = I, moments = stacked vech(I)
        let g = PatternMatrix::all_free(2, 2);
        let dg = PatternMatrix::filled(2, 2, 0.0);
        let psi = PatternMatrix::all_free(2, 1);
        let rs = Restrictions::compile(2, 0, &g, &dg, &psi, &CompileOptions::with_k(1)).unwrap();
        let varsigma = DVector::from_column_slice(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let eye = DMatrix::<f64>::identity(2, 2);
        let w = Weighting::gaussian_from_sigmas(&eye, &eye, 100, 100).unwrap();
        let ctx = DistanceContext::from_moments(
            &SymVec::vech_unchecked(&eye),
            &SymVec::vech_unchecked(&eye),
            &w,
            &rs,
        )
        .unwrap();
        let (m, obj) = ctx.distance(&varsigma).unwrap();
        assert_eq!(m.amax(), 0.0);
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn perturbed_moment_grows_objective_quadratically() {
        let rs = example_rs();
        let v0 = truth();
        let (g, dg, psi) = rs.reconstruct(&v0).unwrap();
        let b = &g + &dg;
        let sigma1 = &g * g.transpose();
        let sigma2 = &b * DMatrix::from_diagonal(&psi) * b.transpose();
        let w = Weighting::gaussian_from_sigmas(&sigma1, &sigma2, 500, 500).unwrap();
        let eps = 1e-4;
        let cell = 2; // one vech cell of the first regime block
        let mut s1 = SymVec::vech_unchecked(&sigma1).as_vector().clone();
        s1[cell] += eps;
        let ctx = DistanceContext::from_moments(
            &SymVec::from_vector(3, s1).unwrap(),
            &SymVec::vech_unchecked(&sigma2),
            &w,
            &rs,
        )
        .unwrap();
        let (_, obj) = ctx.distance(&v0).unwrap();
        let v_inv = ctx.v().clone().try_inverse().unwrap();
        assert_abs_diff_eq!(obj, eps * eps * v_inv[(cell, cell)], epsilon = 1e-18);
    }

    #[test]
    fn population_moments_recover_truth_from_neighborhood_starts() {
        let rs = example_rs();
        let v0 = truth();
        let ctx = population_context(&rs, &v0);
        for s in 0..5 {
            let mut rng = task_rng(100 + s, 0);
            let jittered = DVector::from_fn(v0.len(), |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v0[i] * (1.0 + 0.1 * z)
            });
            let x0 = to_optimizer(&rs, &jittered);
            let out = minimize(
                x0,
                |x| ctx.whitened_residual(&from_optimizer(&rs, x)),
                |x| {
                    let v = from_optimizer(&rs, x);
                    let mut j = ctx.whitened_jacobian(&v)?;
                    for c in rs.a() + rs.b()..rs.n_params() {
                        j.column_mut(c).scale_mut(v[c]);
                    }
                    Some(j)
                },
                &LmOptions::default(),
            );
            assert!(out.converged);
            let recovered = from_optimizer(&rs, &out.x);
            assert!(
                (recovered - &v0).amax() < 1e-6,
                "start {s} did not come back to the truth"
            );
        }
    }

    #[test]
    fn estimate_recovers_truth_from_population_moments() {
        let rs = example_rs();
        let v0 = truth();
        let ctx = population_context(&rs, &v0);
        let fit = estimate(&ctx, &EstimateOptions::new(7).with_starts(5)).unwrap();
        assert!((fit.varsigma() - &v0).amax() < 1e-6);
        assert_eq!(fit.dof(), 0);
        assert!(fit.p_value().is_none());
        assert!(fit.j_stat() < 1e-12);
        // impact signs are normalized
        assert!(fit.g()[(0, 0)] > 0.0 && fit.g()[(1, 1)] > 0.0 && fit.g()[(2, 2)] > 0.0);
    }

    #[test]
    fn objective_invariant_to_parameter_relabeling() {
        let rs = example_rs();
        let v0 = truth();
        let ctx = population_context(&rs, &v0);
        let fit = estimate(&ctx, &EstimateOptions::new(3).with_starts(3)).unwrap();

        // permute the gamma columns (reverse order) and re-estimate
        let perm: Vec<usize> = (0..rs.a()).rev().collect();
        let mut s_g = DMatrix::zeros(rs.s_g().nrows(), rs.a());
        let mut names = rs.names().to_vec();
        for (new, &old) in perm.iter().enumerate() {
            s_g.column_mut(new).copy_from(&rs.s_g().column(old));
            names[new] = rs.names()[old].clone();
        }
        let off_g = DVector::zeros(rs.s_g().nrows());
        let rs2 = Restrictions::from_parts(
            2,
            1,
            1,
            s_g,
            off_g,
            rs.s_dg().clone(),
            DVector::zeros(rs.s_dg().nrows()),
            rs.s_psi().clone(),
            DVector::zeros(rs.s_psi().nrows()),
            names,
            rs.blocks().to_vec(),
            rs.theta_index().to_vec(),
        );
        let ctx2 = {
            let (g, dg, psi) = rs.reconstruct(&v0).unwrap();
            let b = &g + &dg;
            let sigma1 = &g * g.transpose();
            let sigma2 = &b * DMatrix::from_diagonal(&psi) * b.transpose();
            let w = Weighting::gaussian_from_sigmas(&sigma1, &sigma2, 50_000, 50_000).unwrap();
            DistanceContext::from_moments(
                &SymVec::vech_unchecked(&sigma1),
                &SymVec::vech_unchecked(&sigma2),
                &w,
                &rs2,
            )
            .unwrap()
        };
        let fit2 = estimate(&ctx2, &EstimateOptions::new(3).with_starts(3)).unwrap();
        assert_abs_diff_eq!(fit.convergence().objective, fit2.convergence().objective, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.g(), fit2.g(), epsilon = 1e-6);
    }

    #[test]
    fn jstat_scales_exactly_with_weighting_rescale() {
        let rs = example_rs();
        let v0 = truth();
        let (g, dg, psi) = rs.reconstruct(&v0).unwrap();
        let b = &g + &dg;
        let sigma1 = &g * g.transpose();
        let mut sigma2 = &b * DMatrix::from_diagonal(&psi) * b.transpose();
        sigma2[(0, 0)] *= 1.05; // move moments off the manifold a little

        let w = Weighting::gaussian_from_sigmas(&sigma1, &sigma2, 400, 400).unwrap();
        let c = 3.7;
        let w_scaled = Weighting {
            v1: w.v1.clone() * c,
            v2: w.v2.clone() * c,
            t1: w.t1,
            t2: w.t2,
        };
        let s1 = SymVec::vech_unchecked(&sigma1);
        let s2 = SymVec::vech_unchecked(&sigma2);
        let ctx = DistanceContext::from_moments(&s1, &s2, &w, &rs).unwrap();
        let ctx_scaled = DistanceContext::from_moments(&s1, &s2, &w_scaled, &rs).unwrap();
        let opts = EstimateOptions::new(11).with_starts(3);
        let fit = estimate(&ctx, &opts).unwrap();
        let fit_scaled = estimate(&ctx_scaled, &opts).unwrap();
        // same minimizer, objective scaled by 1/c
        assert!((fit.varsigma() - fit_scaled.varsigma()).amax() < 1e-5);
        assert_abs_diff_eq!(fit.j_stat(), c * fit_scaled.j_stat(), epsilon = 1e-4);
    }

    #[test]
    fn mbb_scaling_is_fourth_order() {
        let mut rng = task_rng(5, 0);
        let res = DMatrix::from_fn(400, 2, |_, _| StandardNormal.sample(&mut rng));
        let res2 = res.clone() * 2.0;
        let w1 = Weighting::mbb_from_residuals(&res, &res, BlockLength::Fixed(1), 200, 9).unwrap();
        let w2 = Weighting::mbb_from_residuals(&res2, &res2, BlockLength::Fixed(1), 200, 9).unwrap();
        let ratio = w2.regime_block(1).clone().component_div(w1.regime_block(1));
        for v in ratio.iter() {
            assert_abs_diff_eq!(*v, 16.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn mbb_validates_inputs() {
        let res = DMatrix::zeros(100, 2);
        assert!(matches!(
            Weighting::mbb_from_residuals(&res, &res, BlockLength::Fixed(30), 300, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            Weighting::mbb_from_residuals(&res, &res, BlockLength::Fixed(1), 100, 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mbb_matches_gaussian_closed_form_iid_case() {
        let mut rng = task_rng(21, 0);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let l = Cholesky::new(sigma.clone()).unwrap().l();
        let t_i = 5000;
        let raw: DMatrix<f64> = DMatrix::from_fn(t_i, 2, |_, _| StandardNormal.sample(&mut rng));
        let res = raw * l.transpose();
        let w = Weighting::mbb_from_residuals(&res, &res, BlockLength::Fixed(1), 600, 3).unwrap();
        let sample_sigma = res.transpose() * &res / t_i as f64;
        let oracle = Weighting::gaussian_from_sigmas(&sample_sigma, &sample_sigma, t_i, t_i).unwrap();
        let diff = (w.regime_block(1) - oracle.regime_block(1)).norm() / oracle.regime_block(1).norm();
        assert!(diff < 0.15, "relative Frobenius distance {diff}");
    }

    #[test]
    fn mbb_longer_blocks_pick_up_volatility_clustering() {
        // ARCH-style residuals: variance follows an AR(1) in the squared level
        let mut rng = task_rng(33, 0);
        let t_i = 6000;
        let mut res = DMatrix::zeros(t_i, 2);
        let mut h: f64 = 1.0;
        for t in 0..t_i {
            let shock: f64 = StandardNormal.sample(&mut rng);
            h = 0.05 + 0.35 * (res[(t.saturating_sub(1), 0)] as f64).powi(2) + 0.6 * h;
            res[(t, 0)] = h.sqrt() * shock;
            let z2: f64 = StandardNormal.sample(&mut rng);
            res[(t, 1)] = z2;
        }
        let block = ((t_i as f64).powf(1.0 / 3.0)) as usize;
        let w_short = Weighting::mbb_from_residuals(&res, &res, BlockLength::Fixed(1), 400, 7).unwrap();
        let w_long =
            Weighting::mbb_from_residuals(&res, &res, BlockLength::Fixed(block), 400, 7).unwrap();
        // the (1,1) variance cell reacts to clustering in column 0
        assert!(
            w_long.regime_block(1)[(0, 0)] > w_short.regime_block(1)[(0, 0)],
            "long {} vs short {}",
            w_long.regime_block(1)[(0, 0)],
            w_short.regime_block(1)[(0, 0)]
        );
    }

    #[test]
    fn auto_block_length_is_cube_root() {
        let mut rng = task_rng(55, 0);
        let res = DMatrix::from_fn(1200, 2, |_, _| StandardNormal.sample(&mut rng));
        let auto = Weighting::mbb_from_residuals(&res, &res, BlockLength::Auto, 300, 5).unwrap();
        let fixed =
            Weighting::mbb_from_residuals(&res, &res, BlockLength::Fixed(10), 300, 5).unwrap();
        assert_abs_diff_eq!(auto.regime_block(1), fixed.regime_block(1), epsilon = 0.0);
    }
}
