//! Reduced-form estimation of the augmented system: OLS for the VAR
//! equations, deterministic-only equations for the proxies, regime-split
//! residual covariances, covariance change-point detection, and the
//! full-sample proxy covariance that ignores the break.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::data::PanelData;
use crate::error::{Error, Result};
use crate::linalg::{vech_len, CompanionMatrix, SymVec};

/// How the break date is supplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BreakSpec {
    /// 1-based index of the last observation in the first volatility regime.
    Index(usize),
    /// Run the quasi-likelihood detector first.
    Detect,
}

/// Estimation settings for the augmented VAR.
#[derive(Debug, Clone)]
pub struct VarSpec {
    /// Lag order `p >= 1`.
    pub p: usize,
    pub break_spec: BreakSpec,
    /// Pooled slopes (default) estimate one coefficient matrix for both
    /// regimes; otherwise slopes are regime-specific.
    pub pooled_slopes: bool,
    pub constant: bool,
    pub trend: bool,
    /// Project the proxies on the lagged variables first and use the
    /// residual as the instrument (for proxies not already in innovations
    /// form). Off by default.
    pub project_proxies_on_lags: bool,
}

impl VarSpec {
    pub fn new(p: usize, break_spec: BreakSpec) -> Self {
        VarSpec {
            p,
            break_spec,
            pooled_slopes: true,
            constant: true,
            trend: false,
            project_proxies_on_lags: false,
        }
    }

    fn n_deterministics(&self) -> usize {
        usize::from(self.constant) + usize::from(self.trend)
    }
}

/// Minimum number of observations each regime must contribute beyond the
/// regressor count.
const MIN_REGIME_SLACK: usize = 10;

/// Reduced-form fit of the augmented system: slope estimates per regime
/// (equal when pooled), residuals, and the two regime covariance matrices.
#[derive(Debug, Clone)]
pub struct ReducedFormFit {
    gamma1: DMatrix<f64>,
    gamma2: DMatrix<f64>,
    residuals: DMatrix<f64>,
    sigma1: DMatrix<f64>,
    sigma2: DMatrix<f64>,
    break_index: usize,
    n: usize,
    r: usize,
    p: usize,
    n_det: usize,
    t1: usize,
    t2: usize,
    regressor_names: Vec<String>,
    labels: Vec<String>,
    aic: f64,
    bic: f64,
}

impl ReducedFormFit {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn m(&self) -> usize {
        self.n + self.r
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Slope matrix of regime `i` (1 or 2): `(n+r) x ((n+r)p + d)`.
    pub fn gamma(&self, regime: usize) -> &DMatrix<f64> {
        if regime <= 1 {
            &self.gamma1
        } else {
            &self.gamma2
        }
    }

    /// Residual matrix, one row per effective observation.
    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    /// Residual rows belonging to regime `i`.
    pub fn regime_residuals(&self, regime: usize) -> DMatrix<f64> {
        if regime <= 1 {
            self.residuals.rows(0, self.t1).clone_owned()
        } else {
            self.residuals.rows(self.t1, self.t2).clone_owned()
        }
    }

    pub fn sigma(&self, regime: usize) -> &DMatrix<f64> {
        if regime <= 1 {
            &self.sigma1
        } else {
            &self.sigma2
        }
    }

    /// `(vech(Sigma_1), vech(Sigma_2))`.
    pub fn sigma_stack(&self) -> (SymVec, SymVec) {
        (
            SymVec::vech_unchecked(&self.sigma1),
            SymVec::vech_unchecked(&self.sigma2),
        )
    }

    /// 1-based index of the last first-regime observation.
    pub fn break_index(&self) -> usize {
        self.break_index
    }

    /// Effective observations in each regime (after losing `p` presample
    /// rows).
    pub fn regime_sizes(&self) -> (usize, usize) {
        (self.t1, self.t2)
    }

    pub fn t_eff(&self) -> usize {
        self.t1 + self.t2
    }

    /// Number of deterministic regressors (constant, trend).
    pub fn n_deterministics(&self) -> usize {
        self.n_det
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn regressor_names(&self) -> &[String] {
        &self.regressor_names
    }

    pub fn aic(&self) -> f64 {
        self.aic
    }

    pub fn bic(&self) -> f64 {
        self.bic
    }

    /// Companion form of the lag polynomial of regime `i` for the full
    /// augmented system (deterministic columns dropped).
    pub fn companion(&self, regime: usize) -> Result<CompanionMatrix> {
        let m = self.m();
        let slopes = self.gamma(regime).columns(0, m * self.p).clone_owned();
        CompanionMatrix::new(&slopes, m, self.p)
    }

    /// Serializable view with plain nested arrays.
    pub fn to_report(&self) -> ReducedFormReport {
        ReducedFormReport {
            n: self.n,
            r: self.r,
            p: self.p,
            break_index: self.break_index,
            regime_sizes: (self.t1, self.t2),
            labels: self.labels.clone(),
            regressor_names: self.regressor_names.clone(),
            gamma1: to_rows(&self.gamma1),
            gamma2: to_rows(&self.gamma2),
            sigma1: to_rows(&self.sigma1),
            sigma2: to_rows(&self.sigma2),
            aic: self.aic,
            bic: self.bic,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReducedFormReport {
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub break_index: usize,
    pub regime_sizes: (usize, usize),
    pub labels: Vec<String>,
    pub regressor_names: Vec<String>,
    pub gamma1: Vec<Vec<f64>>,
    pub gamma2: Vec<Vec<f64>>,
    pub sigma1: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    pub aic: f64,
    pub bic: f64,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Lagged-regressor design matrix for rows `t = p+1 ..= T` (1-based):
/// `p` lags of every panel column, then the deterministics.
fn design_matrix(data: &PanelData, spec: &VarSpec) -> (DMatrix<f64>, Vec<String>) {
    let (t, m, p) = (data.t(), data.m(), spec.p);
    let d = spec.n_deterministics();
    let rows = t - p;
    let mut x = DMatrix::zeros(rows, m * p + d);
    let w = data.w();
    for row in 0..rows {
        for lag in 1..=p {
            let src = row + p - lag;
            for c in 0..m {
                x[(row, (lag - 1) * m + c)] = w[(src, c)];
            }
        }
        let mut dc = m * p;
        if spec.constant {
            x[(row, dc)] = 1.0;
            dc += 1;
        }
        if spec.trend {
            x[(row, dc)] = (row + 1) as f64;
        }
    }
    let mut names = Vec::with_capacity(m * p + d);
    for lag in 1..=p {
        for c in 0..m {
            names.push(format!("{}.l{lag}", data.labels()[c]));
        }
    }
    if spec.constant {
        names.push("const".into());
    }
    if spec.trend {
        names.push("trend".into());
    }
    (x, names)
}

/// OLS solve with a collinearity diagnostic that names offending columns.
fn ols(x: &DMatrix<f64>, y: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    match Cholesky::new(xtx.clone()) {
        Some(chol) => Ok(chol.solve(&xty)),
        None => {
            let svd = xtx.svd(true, false);
            let smax = svd.singular_values.max();
            let u = svd.u.expect("svd requested u");
            let mut cols: Vec<String> = Vec::new();
            for (i, s) in svd.singular_values.iter().enumerate() {
                if *s <= smax * 1e-12 {
                    for j in 0..names.len() {
                        if u[(j, i)].abs() > 0.3 && !cols.contains(&names[j]) {
                            cols.push(names[j].clone());
                        }
                    }
                }
            }
            if cols.is_empty() {
                cols.push("(unidentified column combination)".into());
            }
            Err(Error::Collinearity { columns: cols })
        }
    }
}

fn check_sizes(data: &PanelData, spec: &VarSpec, break_index: usize) -> Result<()> {
    let t = data.t();
    let m = data.m();
    let d = spec.n_deterministics();
    if spec.p == 0 {
        return Err(Error::Domain("lag order must be at least 1".into()));
    }
    if t <= m * spec.p + d + MIN_REGIME_SLACK {
        return Err(Error::Domain(format!(
            "sample of length {t} is too short for {m} variables with {} lags",
            spec.p
        )));
    }
    if break_index <= 1 || break_index >= t {
        return Err(Error::Domain(format!(
            "break index {break_index} must satisfy 1 < index < T = {t}"
        )));
    }
    let min_regime = m * spec.p + MIN_REGIME_SLACK;
    let t1 = break_index.saturating_sub(spec.p);
    let t2 = t - break_index;
    if t1 < min_regime || t2 < min_regime {
        return Err(Error::Domain(format!(
            "each regime needs at least {min_regime} effective observations, \
             got {t1} and {t2}"
        )));
    }
    Ok(())
}

/// Estimates the augmented reduced form with the break resolved to a
/// concrete index (run [`detect_break`] first when the spec asks for
/// detection).
///
/// The VAR equations are estimated by OLS on the lagged panel plus
/// deterministics; the proxy equations carry zero slopes on all lags and
/// load only on the deterministics. Covariances use the maximum-likelihood
/// divisor `1/T_i` (the CMD weighting absorbs scale).
pub fn estimate_reduced_form(data: &PanelData, spec: &VarSpec) -> Result<ReducedFormFit> {
    let break_index = match spec.break_spec {
        BreakSpec::Index(i) => i,
        BreakSpec::Detect => {
            return Err(Error::Config(
                "break detection must run before estimation; call detect_break and \
                 set BreakSpec::Index"
                    .into(),
            ))
        }
    };
    check_sizes(data, spec, break_index)?;

    let data = if spec.project_proxies_on_lags && data.r() > 0 {
        &innovations_form(data, spec)?
    } else {
        data
    };

    let (n, r, m, p) = (data.n(), data.r(), data.m(), spec.p);
    let d = spec.n_deterministics();
    let (x, names) = design_matrix(data, spec);
    let rows = x.nrows();
    let t1 = break_index - p;
    let t2 = rows - t1;

    let y_all = data.w().rows(p, rows).clone_owned();
    let y_block = y_all.columns(0, n).clone_owned();
    let z_block = y_all.columns(n, r).clone_owned();
    let x_det = x.columns(m * p, d).clone_owned();
    let det_names = names[m * p..].to_vec();

    // per-regime row ranges (regime 1 first)
    let ranges: &[(usize, usize)] = &[(0, t1), (t1, t2)];
    let mut gammas: Vec<DMatrix<f64>> = Vec::new();
    let mut residuals = DMatrix::zeros(rows, m);
    let spans: &[(usize, usize)] = if spec.pooled_slopes { &[(0, rows)] } else { ranges };
    for &(start, len) in spans {
        let xs = x.rows(start, len).clone_owned();
        let ys = y_block.rows(start, len).clone_owned();
        let beta_y = ols(&xs, &ys, &names)?; // (mp + d) x n
        let beta_z = if d > 0 {
            ols(&x_det.rows(start, len).clone_owned(), &z_block.rows(start, len).clone_owned(), &det_names)?
        } else {
            DMatrix::zeros(0, r)
        };
        let mut gamma = DMatrix::zeros(m, m * p + d);
        gamma.view_mut((0, 0), (n, m * p + d)).copy_from(&beta_y.transpose());
        if d > 0 {
            gamma.view_mut((n, m * p), (r, d)).copy_from(&beta_z.transpose());
        }
        let u = &ys - &xs * &beta_y;
        residuals.view_mut((start, 0), (len, n)).copy_from(&u);
        let ze = if d > 0 {
            z_block.rows(start, len) - x_det.rows(start, len) * &beta_z
        } else {
            z_block.rows(start, len).clone_owned()
        };
        residuals.view_mut((start, n), (len, r)).copy_from(&ze);
        gammas.push(gamma);
    }
    let (gamma1, gamma2) = if spec.pooled_slopes {
        (gammas[0].clone(), gammas[0].clone())
    } else {
        (gammas[0].clone(), gammas[1].clone())
    };

    let mut sigmas = Vec::new();
    for &(start, len) in ranges {
        let block = residuals.rows(start, len);
        let s = block.transpose() * block / len as f64;
        if Cholesky::new(s.clone()).is_none() {
            return Err(Error::Degeneracy(format!(
                "regime {} residual covariance is not positive definite",
                if start == 0 { 1 } else { 2 }
            )));
        }
        sigmas.push(s);
    }

    // pooled covariance for information criteria
    let pooled = (&sigmas[0] * t1 as f64 + &sigmas[1] * t2 as f64) / rows as f64;
    let logdet = Cholesky::new(pooled)
        .map(|c| 2.0 * c.l().diagonal().map(f64::ln).sum())
        .ok_or_else(|| Error::Degeneracy("pooled residual covariance is not positive definite".into()))?;
    let n_coef = (n * (m * p + d) + r * d) as f64;
    let slope_sets = if spec.pooled_slopes { 1.0 } else { 2.0 };
    let aic = rows as f64 * logdet + 2.0 * n_coef * slope_sets;
    let bic = rows as f64 * logdet + (rows as f64).ln() * n_coef * slope_sets;

    Ok(ReducedFormFit {
        gamma1,
        gamma2,
        residuals,
        sigma1: sigmas[0].clone(),
        sigma2: sigmas[1].clone(),
        break_index,
        n,
        r,
        p,
        n_det: d,
        t1,
        t2,
        regressor_names: names,
        labels: data.labels().to_vec(),
        aic,
        bic,
    })
}

/// Replaces each proxy column by the residual of its regression on the
/// lagged panel plus deterministics.
fn innovations_form(data: &PanelData, spec: &VarSpec) -> Result<PanelData> {
    let (x, names) = design_matrix(data, spec);
    let rows = x.nrows();
    let (n, r, p) = (data.n(), data.r(), spec.p);
    let z = data.w().view((p, n), (rows, r)).clone_owned();
    let beta = ols(&x, &z, &names)?;
    let resid = &z - &x * beta;
    let mut w = data.w().rows(p, rows).clone_owned();
    w.view_mut((0, n), (rows, r)).copy_from(&resid);
    PanelData::new(w, n, r, data.labels().to_vec())
}

/// Result of the covariance change-point scan.
#[derive(Debug, Clone, Serialize)]
pub struct BreakDetection {
    /// 1-based index of the last first-regime observation at the optimum.
    pub break_index: usize,
    /// Break fraction `break_index / T`.
    pub tau_hat: f64,
    /// Split Gaussian quasi-log-likelihood per candidate index.
    pub profile: Vec<(usize, f64)>,
    pub qll_at_break: f64,
    /// Quasi-log-likelihood of the no-break (pooled covariance) fit.
    pub pooled_qll: f64,
    /// Extra parameters a split covariance spends: `m(m+1)/2`.
    pub aic_penalty: f64,
    /// Set when the best split improves on the pooled fit by less than the
    /// AIC penalty; identification should then rely on a user-supplied
    /// break date.
    pub weak_evidence: bool,
}

/// Scans candidate break dates in `[trim T, (1 - trim) T]` and maximizes the
/// split Gaussian quasi-log-likelihood
/// `-(T_1/2) log det S_1(tau) - (T_2/2) log det S_2(tau)` computed from
/// pooled-slope residuals.
pub fn detect_break(data: &PanelData, spec: &VarSpec, trim: f64) -> Result<BreakDetection> {
    if !(0.05..=0.3).contains(&trim) {
        return Err(Error::Domain(format!(
            "trim fraction must lie in [0.05, 0.3], got {trim}"
        )));
    }
    let t = data.t();
    let m = data.m();
    // pooled-slope fit; regime split is irrelevant for the residuals, so any
    // interior index works
    let mut pooled_spec = spec.clone();
    pooled_spec.pooled_slopes = true;
    pooled_spec.break_spec = BreakSpec::Index(t / 2);
    let fit = estimate_reduced_form(data, &pooled_spec)?;
    let res = fit.residuals();
    let rows = res.nrows();

    // cumulative vech outer products for O(1) candidate covariances
    let q = vech_len(m);
    let mut cum = vec![DVector::<f64>::zeros(q); rows + 1];
    for tr in 0..rows {
        let mut v = cum[tr].clone();
        let mut kidx = 0;
        for j in 0..m {
            for i in j..m {
                v[kidx] += res[(tr, i)] * res[(tr, j)];
                kidx += 1;
            }
        }
        cum[tr + 1] = v;
    }
    let logdet_of = |v: &DVector<f64>, len: usize| -> Option<f64> {
        let s = SymVec::from_vector(m, v / len as f64).ok()?.unvech();
        Cholesky::new(s).map(|c| 2.0 * c.l().diagonal().map(f64::ln).sum())
    };

    let min_regime = q + 2;
    let lo = ((trim * t as f64).ceil() as usize).max(spec.p + min_regime);
    let hi = (((1.0 - trim) * t as f64).floor() as usize).min(t - min_regime);
    if lo >= hi {
        return Err(Error::Domain(
            "trimmed candidate range is empty; sample too short for detection".into(),
        ));
    }

    let mut profile = Vec::with_capacity(hi - lo + 1);
    let mut best: Option<(usize, f64)> = None;
    for tb in lo..=hi {
        let t1 = tb - spec.p;
        let t2 = rows - t1;
        let ld1 = logdet_of(&cum[t1], t1);
        let ld2 = logdet_of(&(&cum[rows] - &cum[t1]), t2);
        let (Some(ld1), Some(ld2)) = (ld1, ld2) else {
            continue;
        };
        let qll = -0.5 * t1 as f64 * ld1 - 0.5 * t2 as f64 * ld2;
        profile.push((tb, qll));
        if best.map(|(_, b)| qll > b).unwrap_or(true) {
            best = Some((tb, qll));
        }
    }
    let (break_index, qll_at_break) = best.ok_or_else(|| {
        Error::Degeneracy("every candidate split produced a non-PD covariance".into())
    })?;

    let pooled_qll = logdet_of(&cum[rows], rows)
        .map(|ld| -0.5 * rows as f64 * ld)
        .ok_or_else(|| Error::Degeneracy("pooled covariance is not positive definite".into()))?;
    let aic_penalty = q as f64;
    let weak_evidence = qll_at_break - pooled_qll < aic_penalty;

    Ok(BreakDetection {
        break_index,
        tau_hat: break_index as f64 / t as f64,
        profile,
        qll_at_break,
        pooled_qll,
        aic_penalty,
        weak_evidence,
    })
}

/// Full-sample proxy covariance that ignores the break.
#[derive(Debug, Clone)]
pub struct NaiveProxyCov {
    /// `(1/T) sum_t u_t z_t'`, an `n x r` matrix.
    pub pooled: DMatrix<f64>,
    /// `Sigma_{u2,z} Sigma_{u1,z}^{-1}` when the target-shock count equals
    /// the proxy count; `None` otherwise.
    pub ratio: Option<DMatrix<f64>>,
}

/// The plain full-sample estimator of the proxy moment, for comparison
/// against its convex-combination probability limit under a break.
pub fn naive_proxy_covariance(fit: &ReducedFormFit, k: usize) -> Result<NaiveProxyCov> {
    let (n, r) = (fit.n(), fit.r());
    if r == 0 {
        return Err(Error::Domain("panel carries no proxies".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Domain(format!("target-shock count k = {k} must satisfy 1 <= k <= n")));
    }
    let res = fit.residuals();
    let t = res.nrows() as f64;
    let u = res.columns(0, n);
    let z = res.columns(n, r);
    let pooled = u.transpose() * z / t;
    let ratio = if k == r {
        let top = pooled.rows(0, k).clone_owned();
        let bottom = pooled.rows(k, n - k).clone_owned();
        top.clone().try_inverse().map(|inv| bottom * inv)
    } else {
        None
    };
    Ok(NaiveProxyCov { pooled, ratio })
}

/// Wald statistic for equality of the VAR slope coefficients across regimes
/// (proxy equations excluded; they carry no slopes). Returns the statistic
/// and its degrees of freedom.
pub fn slope_break_wald(data: &PanelData, spec: &VarSpec) -> Result<(f64, usize)> {
    let mut rspec = spec.clone();
    rspec.pooled_slopes = false;
    let break_index = match spec.break_spec {
        BreakSpec::Index(i) => i,
        BreakSpec::Detect => return Err(Error::Config("resolve the break index first".into())),
    };
    check_sizes(data, &rspec, break_index)?;
    let (x, names) = design_matrix(data, &rspec);
    let rows = x.nrows();
    let (n, p, m) = (data.n(), spec.p, data.m());
    let d = rspec.n_deterministics();
    let kx = m * p + d;
    let t1 = break_index - p;
    let y = data.w().view((p, 0), (rows, n)).clone_owned();

    let mut diff = DVector::zeros(n * kx);
    let mut cov = DMatrix::zeros(n * kx, n * kx);
    let mut betas = Vec::new();
    for &(start, len) in &[(0usize, t1), (t1, rows - t1)] {
        let xs = x.rows(start, len).clone_owned();
        let ys = y.rows(start, len).clone_owned();
        let beta = ols(&xs, &ys, &names)?;
        let u = &ys - &xs * &beta;
        let sigma = u.transpose() * &u / len as f64;
        let xtx_inv = Cholesky::new(xs.transpose() * &xs)
            .ok_or_else(|| Error::Collinearity { columns: names.clone() })?
            .inverse();
        cov += sigma.kronecker(&xtx_inv);
        betas.push(beta);
    }
    for eq in 0..n {
        for c in 0..kx {
            diff[eq * kx + c] = betas[0][(c, eq)] - betas[1][(c, eq)];
        }
    }
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::Degeneracy("Wald covariance is not positive definite".into()))?;
    let stat = diff.dot(&chol.solve(&diff));
    Ok((stat, n * kx))
}
