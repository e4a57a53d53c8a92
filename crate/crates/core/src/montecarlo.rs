//! Simulation designs and the estimator-comparison / test-size experiments:
//! a bivariate VAR(1) with one instrument and a mid-sample covariance break,
//! four proxy regimes (strong or local-to-zero relevance, exogenous or
//! contaminated), five competing estimation models, and the rejection
//! frequencies of the overidentifying restrictions test.
//!
//! The true impact matrices are this crate's own calibration of the stated
//! design (the originating experiments do not print theirs), so relative
//! MSE numbers are direction-and-magnitude benchmarks rather than
//! digit-level targets.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::cmd::{estimate, CmdFit, DistanceContext, EstimateOptions, Weighting};
use crate::data::PanelData;
use crate::error::{Error, Result};
use crate::irf::absolute_irf;
use crate::linalg::CompanionMatrix;
use crate::reduced_form::{estimate_reduced_form, BreakSpec, ReducedFormFit, VarSpec};
use crate::restrictions::{Cell, CompileOptions, PatternMatrix, Restrictions};
use crate::rng::task_rng;

/// Drift constant of the local-to-zero designs: the relevance cell is
/// `C / sqrt(T)`.
pub const LOCAL_TO_ZERO_C: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProxyType {
    StrongExogenous,
    LocalExogenous,
    StrongContaminated,
    LocalContaminated,
}

impl ProxyType {
    pub fn is_strong(&self) -> bool {
        matches!(self, ProxyType::StrongExogenous | ProxyType::StrongContaminated)
    }

    pub fn is_contaminated(&self) -> bool {
        matches!(self, ProxyType::StrongContaminated | ProxyType::LocalContaminated)
    }

    pub fn from_flags(strong: bool, contaminated: bool) -> Self {
        match (strong, contaminated) {
            (true, false) => ProxyType::StrongExogenous,
            (true, true) => ProxyType::StrongContaminated,
            (false, false) => ProxyType::LocalExogenous,
            (false, true) => ProxyType::LocalContaminated,
        }
    }
}

/// A fully specified data-generating process for the augmented system.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub t: usize,
    /// Fraction of observations in the first volatility regime.
    pub tau_b: f64,
    /// `n x (n p)` slope matrix of the endogenous block (the proxy rows of
    /// the augmented system are zero by construction).
    pub pi: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub delta_g: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub proxy_type: ProxyType,
    /// Target correlation between the proxy and the non-target shock.
    pub contamination_corr: f64,
    pub local_c: f64,
    pub burn_in: usize,
}

impl DgpConfig {
    /// The bivariate-VAR(1)-with-one-instrument design behind the
    /// comparison and test-size tables: mid-sample break, impact shift in
    /// the target-shock column, unit variance ratios, proxy normalized to
    /// unit variance with `corr(z, eps_1)` set by relevance and
    /// `corr(z, eps_2)` by `contamination_corr`.
    pub fn table_design(proxy_type: ProxyType, contamination_corr: f64, t: usize) -> DgpConfig {
        let n = 2;
        let r = 1;
        let pi = DMatrix::from_row_slice(n, n, &[0.4, 0.1, 0.1, 0.3]);
        let phi = if proxy_type.is_strong() {
            0.5
        } else {
            LOCAL_TO_ZERO_C / (t as f64).sqrt()
        };
        let upsilon = if proxy_type.is_contaminated() { contamination_corr } else { 0.0 };
        let omega = (1.0 - phi * phi - upsilon * upsilon).sqrt();
        let g = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0, 0.4, 0.0, //
                0.4, 0.9, 0.0, //
                phi, upsilon, omega,
            ],
        );
        // Target-column shift decomposed along the column (scale-like part,
        // which the full-sample proxy estimator turns into bias) and its
        // orthogonal complement (the shape change that constant-impact
        // models cannot absorb). The strong designs carry a sharper shape
        // change; the local designs a milder one, keeping the proxy-free
        // benchmark comparable to the stability model when the instrument
        // carries no information. The shift is the same for every
        // contamination level within a design.
        let kappa = if proxy_type.is_strong() { 0.38 } else { 0.14 };
        let unit = (1.0f64 + 0.16).sqrt();
        let d1 = -0.45 - 0.4 * kappa / unit;
        let d2 = -0.18 + kappa / unit;
        let delta_g = DMatrix::from_row_slice(
            3,
            3,
            &[
                d1, 0.0, 0.0, //
                d2, 0.0, 0.0, //
                0.0, 0.0, 0.0,
            ],
        );
        DgpConfig {
            n,
            r,
            p: 1,
            t,
            tau_b: 0.5,
            pi,
            g,
            delta_g,
            psi: DVector::from_element(3, 1.0),
            proxy_type,
            contamination_corr: upsilon,
            local_c: LOCAL_TO_ZERO_C,
            burn_in: 100,
        }
    }

    /// The documented design for the convex-combination limit of the
    /// full-sample proxy estimator: tau = 0.5, target column (1, 0.5)'
    /// shifting to (1, 1)', unit relevance, no contamination, unit-variance
    /// measurement error, constant proxy parameters across regimes.
    pub fn convex_combination_design(t: usize) -> DgpConfig {
        let n = 2;
        let pi = DMatrix::from_row_slice(n, n, &[0.5, 0.1, 0.2, 0.4]);
        let g = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0, 0.3, 0.0, //
                0.5, 0.8, 0.0, //
                1.0, 0.0, 1.0,
            ],
        );
        let mut delta_g = DMatrix::zeros(3, 3);
        delta_g[(1, 0)] = 0.5;
        DgpConfig {
            n,
            r: 1,
            p: 1,
            t,
            tau_b: 0.5,
            pi,
            g,
            delta_g,
            psi: DVector::from_element(3, 1.0),
            proxy_type: ProxyType::StrongExogenous,
            contamination_corr: 0.0,
            local_c: LOCAL_TO_ZERO_C,
            burn_in: 100,
        }
    }

    /// A well-conditioned exactly identified design (12 free parameters
    /// against 12 moments): lower-triangular impact block, target-column
    /// shift, and regime-specific proxy parameters with unit variance
    /// ratios. Pairs with [`exactly_identified_restrictions`].
    pub fn exactly_identified_design(t: usize) -> DgpConfig {
        let mut cfg = DgpConfig::table_design(ProxyType::StrongExogenous, 0.0, t);
        cfg.g = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0, 0.0, 0.0, //
                0.5, 0.9, 0.0, //
                0.65, 0.25, 0.718,
            ],
        );
        cfg.delta_g = DMatrix::zeros(3, 3);
        cfg.delta_g[(0, 0)] = -0.4;
        cfg.delta_g[(1, 0)] = 0.3;
        cfg.psi = DVector::from_element(3, 1.0);
        cfg.contamination_corr = 0.25;
        cfg
    }

    pub fn m(&self) -> usize {
        self.n + self.r
    }

    /// 1-based index of the last first-regime observation.
    pub fn break_index(&self) -> usize {
        ((self.tau_b * self.t as f64).floor() as usize).clamp(1, self.t - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.g.nrows() != m || self.g.ncols() != m || self.delta_g.nrows() != m {
            return Err(Error::Config("impact matrices do not match n + r".into()));
        }
        if self.pi.nrows() != self.n || self.pi.ncols() != self.n * self.p {
            return Err(Error::Config("slope matrix must be n x (n p)".into()));
        }
        if self.psi.len() != m || self.psi.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("variance ratios must be positive".into()));
        }
        if !(0.0 < self.tau_b && self.tau_b < 1.0) {
            return Err(Error::Config("break fraction must lie in (0, 1)".into()));
        }
        let tb = self.break_index();
        let min_regime = m * self.p + 10;
        if tb < min_regime || self.t - tb < min_regime {
            return Err(Error::Config(format!(
                "regimes of {tb} and {} observations are below the minimum {min_regime}",
                self.t - tb
            )));
        }
        let sigma1 = &self.g * self.g.transpose();
        let b = &self.g + &self.delta_g;
        let sigma2 = &b * DMatrix::from_diagonal(&self.psi) * b.transpose();
        if Cholesky::new(sigma1).is_none() || Cholesky::new(sigma2).is_none() {
            return Err(Error::Config("implied regime covariances are not positive definite".into()));
        }
        Ok(())
    }

    /// Simulates one panel (stream 0 of `seed`).
    pub fn simulate(&self, seed: u64) -> Result<PanelData> {
        Ok(self.simulate_with_shocks(seed, 0)?.0)
    }

    /// Simulates one panel on ChaCha stream `stream`, also returning the
    /// structural shock matrix `xi` (`T x (n+r)`).
    pub fn simulate_with_shocks(&self, seed: u64, stream: u64) -> Result<(PanelData, DMatrix<f64>)> {
        self.validate()?;
        let m = self.m();
        let (n, p) = (self.n, self.p);
        let total = self.t + self.burn_in;
        let tb = self.break_index();
        let b = &self.g + &self.delta_g;
        let mut b_psi_half = b.clone();
        for j in 0..m {
            b_psi_half.column_mut(j).scale_mut(self.psi[j].sqrt());
        }
        let mut rng = task_rng(seed, stream);
        let mut w = DMatrix::zeros(total, m);
        let mut shocks = DMatrix::zeros(self.t, m);
        let mut xi = DVector::zeros(m);
        for t in 0..total {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            // burn-in runs under regime 1; the kept sample switches at tb
            let kept_index = t as i64 - self.burn_in as i64;
            let eta = if kept_index >= tb as i64 {
                &b_psi_half * &xi
            } else {
                &self.g * &xi
            };
            if kept_index >= 0 {
                shocks.row_mut(kept_index as usize).copy_from(&xi.transpose());
            }
            for eq in 0..m {
                let mut val = eta[eq];
                if eq < n {
                    for lag in 1..=p {
                        if t >= lag {
                            for c in 0..n {
                                val += self.pi[(eq, (lag - 1) * n + c)] * w[(t - lag, c)];
                            }
                        }
                    }
                }
                w[(t, eq)] = val;
            }
        }
        let panel = PanelData::unlabeled(w.rows(self.burn_in, self.t).clone_owned(), self.n, self.r)?;
        Ok((panel, shocks))
    }

    /// True absolute responses of the endogenous variables to the first
    /// target shock, per regime, horizons `0..=horizon`.
    pub fn true_irfs(&self, horizon: usize) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let comp = CompanionMatrix::new(&self.pi, self.n, self.p)?;
        let props = comp.propagators(horizon);
        let impact1 = self.g.view((0, 0), (self.n, 1)).clone_owned();
        let impact2 = (&self.g + &self.delta_g).view((0, 0), (self.n, 1)).clone_owned()
            * self.psi[0].sqrt();
        let r1 = props.iter().map(|th| (th * &impact1).column(0).clone_owned()).collect();
        let r2 = props.iter().map(|th| (th * &impact2).column(0).clone_owned()).collect();
        Ok((r1, r2))
    }
}

/// Probability limit of the full-sample proxy covariance estimator under
/// the break: the convex combination of the regime impact columns (weights
/// = regime fractions) times the relevance parameters.
pub fn convex_combination_plim(cfg: &DgpConfig, k: usize) -> DMatrix<f64> {
    let tau = cfg.tau_b;
    let h1 = cfg.g.view((0, 0), (cfg.n, k)).clone_owned();
    let mut h2 = (&cfg.g + &cfg.delta_g).view((0, 0), (cfg.n, k)).clone_owned();
    for j in 0..k {
        h2.column_mut(j).scale_mut(cfg.psi[j].sqrt());
    }
    let phi = cfg.g.view((cfg.n, 0), (cfg.r, k)).clone_owned();
    (h1 * tau + h2 * (1.0 - tau)) * phi.transpose()
}

/// Probability limit of the ratio estimator for one target shock: the
/// convex combination of the two regimes' relative impacts.
pub fn convex_combination_ratio_plim(cfg: &DgpConfig) -> DVector<f64> {
    let tau = cfg.tau_b;
    let h = &cfg.g;
    let b = &cfg.g + &cfg.delta_g;
    let r1 = h.view((1, 0), (cfg.n - 1, 1)).clone_owned() / h[(0, 0)];
    let r2 = b.view((1, 0), (cfg.n - 1, 1)).clone_owned() / b[(0, 0)];
    (r1 * tau + r2 * (1.0 - tau)).column(0).clone_owned()
}

/// The five competing estimators of the target IRFs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Model {
    /// Stability restrictions, contamination left free (the benchmark).
    M1,
    /// As `M1` with the contamination cells fixed to zero.
    M2,
    /// Volatility shift only: the proxy rows are dropped entirely.
    M3,
    /// Proxy plus break with the impact shift fixed to zero (constant IRFs,
    /// variance ratios free).
    M4,
    /// Proxy only on the full sample, break ignored.
    M5,
}

pub const ALL_MODELS: [Model; 5] = [Model::M1, Model::M2, Model::M3, Model::M4, Model::M5];

/// Restriction pattern of the benchmark model for the bivariate design:
/// free `G` outside the zero block (contamination included), target-column
/// shift cells free, proxy parameters held constant across regimes (the
/// stability restriction that lets the instrument inform both regimes),
/// variance ratios pinned at one.
pub fn model1_restrictions() -> Restrictions {
    let mut g = PatternMatrix::all_free(3, 3);
    g.set(0, 2, Cell::Fixed(0.0));
    g.set(1, 2, Cell::Fixed(0.0));
    let mut dg = PatternMatrix::filled(3, 3, 0.0);
    dg.set(0, 0, Cell::named("dh11"));
    dg.set(1, 0, Cell::named("dh21"));
    let psi = PatternMatrix::filled(3, 1, 1.0);
    Restrictions::compile(2, 1, &g, &dg, &psi, &CompileOptions::with_k(1)).expect("valid pattern")
}

/// `M1` with instrument exogeneity imposed: contamination and its shift
/// fixed to zero.
pub fn model2_restrictions() -> Restrictions {
    let mut g = PatternMatrix::all_free(3, 3);
    g.set(0, 2, Cell::Fixed(0.0));
    g.set(1, 2, Cell::Fixed(0.0));
    g.set(2, 1, Cell::Fixed(0.0));
    let mut dg = PatternMatrix::filled(3, 3, 0.0);
    dg.set(0, 0, Cell::named("dh11"));
    dg.set(1, 0, Cell::named("dh21"));
    let psi = PatternMatrix::filled(3, 1, 1.0);
    Restrictions::compile(2, 1, &g, &dg, &psi, &CompileOptions::with_k(1)).expect("valid pattern")
}

/// Volatility-shift-only pattern on the endogenous block (no proxy rows):
/// the conventional identification-through-heteroskedasticity model with a
/// constant impact matrix and free variance ratios.
pub fn model3_restrictions() -> Restrictions {
    let g = PatternMatrix::all_free(2, 2);
    let dg = PatternMatrix::filled(2, 2, 0.0);
    let psi = PatternMatrix::all_free(2, 1);
    Restrictions::compile(2, 0, &g, &dg, &psi, &CompileOptions::with_k(1)).expect("valid pattern")
}

/// Constant-impact pattern: shift fixed to zero, variance ratios free.
pub fn model4_restrictions() -> Restrictions {
    let mut g = PatternMatrix::all_free(3, 3);
    g.set(0, 2, Cell::Fixed(0.0));
    g.set(1, 2, Cell::Fixed(0.0));
    let dg = PatternMatrix::filled(3, 3, 0.0);
    let psi = PatternMatrix::all_free(3, 1);
    Restrictions::compile(2, 1, &g, &dg, &psi, &CompileOptions::with_k(1)).expect("valid pattern")
}

/// Exactly identified pattern for the consistency benchmarks: free `G`
/// outside the zero block, free target-column shift, free proxy-row shift,
/// variance ratios pinned at one (12 parameters, 12 moments).
pub fn exactly_identified_restrictions() -> Restrictions {
    let mut g = PatternMatrix::all_free(3, 3);
    g.set(0, 2, Cell::Fixed(0.0));
    g.set(1, 2, Cell::Fixed(0.0));
    let mut dg = PatternMatrix::filled(3, 3, 0.0);
    dg.set(0, 0, Cell::named("dh11"));
    dg.set(1, 0, Cell::named("dh21"));
    dg.set(2, 0, Cell::named("dphi"));
    dg.set(2, 1, Cell::named("dupsilon"));
    dg.set(2, 2, Cell::named("domega"));
    let psi = PatternMatrix::filled(3, 1, 1.0);
    Restrictions::compile(2, 1, &g, &dg, &psi, &CompileOptions::with_k(1)).expect("valid pattern")
}

/// Closed-form impact column of the single-target proxy estimator:
/// `H_.1 = b / sqrt(b' Sigma_u^{-1} b)` with `b = Sigma_{u,z}`, sign set so
/// the first entry is positive.
pub fn proxy_impact_closed_form(sigma_u: &DMatrix<f64>, sigma_uz: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(sigma_u.clone())
        .ok_or_else(|| Error::Degeneracy("residual covariance is not positive definite".into()))?;
    let quad = sigma_uz.dot(&chol.solve(sigma_uz));
    if !(quad > 0.0) {
        return Err(Error::Numeric("proxy covariance is numerically zero".into()));
    }
    let mut h = sigma_uz / quad.sqrt();
    if h[0] < 0.0 {
        h.neg_mut();
    }
    Ok(h)
}

/// Squared-error accumulator over both regimes and all horizons for the
/// responses of each endogenous variable to the first shock.
fn irf_squared_errors(
    est1: &[DVector<f64>],
    est2: &[DVector<f64>],
    true1: &[DVector<f64>],
    true2: &[DVector<f64>],
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for l in 0..est1.len() {
        for var in 0..n {
            out[var] += (est1[l][var] - true1[l][var]).powi(2);
            out[var] += (est2[l][var] - true2[l][var]).powi(2);
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ModelKit {
    m1: Restrictions,
    m2: Restrictions,
    m3: Restrictions,
    m4: Restrictions,
}

impl ModelKit {
    fn new() -> Self {
        ModelKit {
            m1: model1_restrictions(),
            m2: model2_restrictions(),
            m3: model3_restrictions(),
            m4: model4_restrictions(),
        }
    }
}

/// Per-variable estimated responses of one model in one replication.
struct ModelIrfs {
    regime1: Vec<DVector<f64>>,
    regime2: Vec<DVector<f64>>,
}

fn cmd_model_irfs(
    fit: &ReducedFormFit,
    rs: &Restrictions,
    horizon: usize,
    opts: &EstimateOptions,
) -> Result<(ModelIrfs, CmdFit)> {
    let weighting = Weighting::gaussian(fit)?;
    let ctx = DistanceContext::new(fit, rs, &weighting)?;
    let cmd = estimate(&ctx, opts)?;
    let comp = fit.companion(1)?;
    let irf = absolute_irf(&cmd, &comp, None, 1, horizon)?;
    let collect = |regime: usize| {
        (0..=horizon)
            .map(|l| irf.response(regime, l).column(0).clone_owned())
            .collect::<Vec<_>>()
    };
    Ok((ModelIrfs { regime1: collect(1), regime2: collect(2) }, cmd))
}

fn estimate_model(
    model: Model,
    panel: &PanelData,
    fit: &ReducedFormFit,
    kit: &ModelKit,
    spec: &VarSpec,
    horizon: usize,
    opts: &EstimateOptions,
) -> Result<ModelIrfs> {
    match model {
        Model::M1 => Ok(cmd_model_irfs(fit, &kit.m1, horizon, opts)?.0),
        Model::M2 => Ok(cmd_model_irfs(fit, &kit.m2, horizon, opts)?.0),
        Model::M4 => Ok(cmd_model_irfs(fit, &kit.m4, horizon, opts)?.0),
        Model::M3 => {
            let y_panel = panel.endogenous_only();
            let y_fit = estimate_reduced_form(&y_panel, spec)?;
            Ok(cmd_model_irfs(&y_fit, &kit.m3, horizon, opts)?.0)
        }
        Model::M5 => {
            // pooled covariance over the full sample, break ignored
            let n = fit.n();
            let res = fit.residuals();
            let t = res.nrows() as f64;
            let u = res.columns(0, n);
            let sigma_u = (u.transpose() * u) / t;
            let z = res.column(n);
            let sigma_uz = (u.transpose() * z) / t;
            let h = proxy_impact_closed_form(&sigma_u, &sigma_uz)?;
            let comp = fit.companion(1)?;
            let props = comp.propagators(horizon);
            let mut h_aug = DVector::zeros(fit.m());
            h_aug.rows_mut(0, n).copy_from(&h);
            let resp: Vec<DVector<f64>> = props
                .iter()
                .map(|th| (th * &h_aug).rows(0, n).clone_owned())
                .collect();
            Ok(ModelIrfs { regime1: resp.clone(), regime2: resp })
        }
    }
}

/// One comparison experiment: a proxy regime, a contamination level, and a
/// sample size.
#[derive(Debug, Clone)]
pub struct ComparisonSpec {
    pub proxy_type: ProxyType,
    pub contamination: f64,
    pub t: usize,
    pub n_reps: usize,
    pub models: Vec<Model>,
    pub seed: u64,
    /// Optimizer starts per model and replication.
    pub n_starts: usize,
    /// Responses are compared over horizons `0..=horizon`.
    pub horizon: usize,
}

impl ComparisonSpec {
    pub fn new(proxy_type: ProxyType, contamination: f64, t: usize, n_reps: usize, seed: u64) -> Self {
        ComparisonSpec {
            proxy_type,
            contamination,
            t,
            n_reps,
            models: ALL_MODELS.to_vec(),
            seed,
            n_starts: 5,
            horizon: 24,
        }
    }
}

/// Comparison outcome: absolute and relative MSE per model for the
/// responses of variables 1 and 2 to the target shock.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub models: Vec<Model>,
    /// Summed squared errors averaged over kept replications, per model:
    /// `[IRF_{1,1}, IRF_{2,1}]`.
    pub mse: Vec<[f64; 2]>,
    /// MSE relative to the benchmark (first requested model, normally M1).
    pub relative: Vec<[f64; 2]>,
    pub n_requested: usize,
    pub n_used: usize,
    /// Replications dropped because at least one model failed (exclusion is
    /// symmetric across models).
    pub n_dropped: usize,
    /// Failure counts per model over the dropped replications.
    pub failures: Vec<(Model, usize)>,
    /// Set when more than 5% of replications were dropped.
    pub reliability_warning: bool,
    pub seed: u64,
}

/// Runs the estimator comparison on the standard table design.
pub fn run_comparison(spec: &ComparisonSpec) -> Result<ExperimentResult> {
    let cfg = DgpConfig::table_design(spec.proxy_type, spec.contamination, spec.t);
    run_comparison_with(spec, &cfg)
}

/// Runs the estimator comparison on an explicit data-generating process.
/// Replications are independent ChaCha streams; a replication where any
/// model fails is dropped for every model so the averages stay comparable.
pub fn run_comparison_with(spec: &ComparisonSpec, cfg: &DgpConfig) -> Result<ExperimentResult> {
    if spec.models.is_empty() {
        return Err(Error::Config("no models requested".into()));
    }
    cfg.validate()?;
    let kit = ModelKit::new();
    let var_spec = VarSpec::new(cfg.p, BreakSpec::Index(cfg.break_index()));
    let (true1, true2) = cfg.true_irfs(spec.horizon)?;

    type RepOutcome = std::result::Result<Vec<Vec<f64>>, Vec<Model>>;
    let outcomes: Vec<RepOutcome> = (0..spec.n_reps)
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<(PanelData, ReducedFormFit)> {
                let panel = cfg.simulate_with_shocks(spec.seed, rep as u64)?.0;
                let fit = estimate_reduced_form(&panel, &var_spec)?;
                Ok((panel, fit))
            };
            let (panel, fit) = match run() {
                Ok(v) => v,
                Err(_) => return Err(spec.models.clone()),
            };
            let mut errs = Vec::with_capacity(spec.models.len());
            let mut failed = Vec::new();
            for &model in &spec.models {
                let mut opts = EstimateOptions::new(
                    spec.seed ^ (rep as u64).wrapping_mul(0x9e3779b97f4a7c15),
                );
                opts.n_starts = spec.n_starts;
                opts.skip_identification_check = true;
                match estimate_model(model, &panel, &fit, &kit, &var_spec, spec.horizon, &opts) {
                    Ok(irfs) => errs.push(irf_squared_errors(
                        &irfs.regime1,
                        &irfs.regime2,
                        &true1,
                        &true2,
                        cfg.n,
                    )),
                    Err(_) => failed.push(model),
                }
            }
            if failed.is_empty() {
                Ok(errs)
            } else {
                Err(failed)
            }
        })
        .collect();

    let mut sums = vec![[0.0f64; 2]; spec.models.len()];
    let mut n_used = 0usize;
    let mut fail_counts = vec![0usize; spec.models.len()];
    for outcome in &outcomes {
        match outcome {
            Ok(errs) => {
                n_used += 1;
                for (mi, e) in errs.iter().enumerate() {
                    sums[mi][0] += e[0];
                    sums[mi][1] += e[1];
                }
            }
            Err(failed) => {
                for f in failed {
                    if let Some(pos) = spec.models.iter().position(|m| m == f) {
                        fail_counts[pos] += 1;
                    }
                }
            }
        }
    }
    if n_used == 0 {
        return Err(Error::Optimization {
            details: "every replication failed in at least one model".into(),
        });
    }
    let mse: Vec<[f64; 2]> = sums
        .iter()
        .map(|s| [s[0] / n_used as f64, s[1] / n_used as f64])
        .collect();
    let bench = mse[0];
    let relative = mse
        .iter()
        .map(|m| [m[0] / bench[0], m[1] / bench[1]])
        .collect();
    let n_dropped = spec.n_reps - n_used;
    Ok(ExperimentResult {
        models: spec.models.clone(),
        mse,
        relative,
        n_requested: spec.n_reps,
        n_used,
        n_dropped,
        failures: spec.models.iter().copied().zip(fail_counts).collect(),
        reliability_warning: (n_dropped as f64) > 0.05 * spec.n_reps as f64,
        seed: spec.seed,
    })
}

/// One cell of the rejection-frequency table.
#[derive(Debug, Clone, Serialize)]
pub struct SizePowerCell {
    pub t: usize,
    pub contamination: f64,
    pub strong: bool,
    /// Exogeneity imposed (contamination cells fixed to zero) or left free.
    pub upsilon_fixed_zero: bool,
    pub rejection_rate: f64,
    pub n_used: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone)]
pub struct SizePowerSpec {
    pub ts: Vec<usize>,
    pub contaminations: Vec<f64>,
    /// Strong and/or local relevance.
    pub strong: Vec<bool>,
    /// Exogeneity imposed and/or free.
    pub upsilon_fixed_zero: Vec<bool>,
    pub n_reps: usize,
    pub seed: u64,
    pub n_starts: usize,
    /// Nominal level of the J test.
    pub level: f64,
}

impl SizePowerSpec {
    pub fn table_grid(t: usize, n_reps: usize, seed: u64) -> Self {
        SizePowerSpec {
            ts: vec![t],
            contaminations: vec![0.0, 0.05, 0.15, 0.25],
            strong: vec![true, false],
            upsilon_fixed_zero: vec![true, false],
            n_reps,
            seed,
            n_starts: 5,
            level: 0.05,
        }
    }
}

/// Rejection frequencies of the overidentifying restrictions test across
/// the requested grid.
pub fn run_size_power(spec: &SizePowerSpec) -> Result<Vec<SizePowerCell>> {
    let kit = ModelKit::new();
    let mut cells = Vec::new();
    for &t in &spec.ts {
        for &strong in &spec.strong {
            for &contamination in &spec.contaminations {
                for &fixed in &spec.upsilon_fixed_zero {
                    let proxy = ProxyType::from_flags(strong, contamination > 0.0);
                    let cfg = DgpConfig::table_design(proxy, contamination, t);
                    cfg.validate()?;
                    let rs = if fixed { kit.m2.clone() } else { kit.m1.clone() };
                    let var_spec = VarSpec::new(cfg.p, BreakSpec::Index(cfg.break_index()));
                    // decorrelate cell seeds so grid cells do not share draws
                    let cell_seed = spec
                        .seed
                        .wrapping_add((t as u64) << 32)
                        .wrapping_add((contamination * 1000.0) as u64)
                        .wrapping_add(u64::from(strong) << 20)
                        .wrapping_add(u64::from(fixed) << 21);
                    let rejections: Vec<Option<bool>> = (0..spec.n_reps)
                        .into_par_iter()
                        .map(|rep| {
                            let one = || -> Result<bool> {
                                let panel = cfg.simulate_with_shocks(cell_seed, rep as u64)?.0;
                                let fit = estimate_reduced_form(&panel, &var_spec)?;
                                let weighting = Weighting::gaussian(&fit)?;
                                let ctx = DistanceContext::new(&fit, &rs, &weighting)?;
                                let mut opts = EstimateOptions::new(
                                    cell_seed ^ (rep as u64).wrapping_mul(0x2545f4914f6cdd1d),
                                );
                                opts.n_starts = spec.n_starts;
                                opts.skip_identification_check = true;
                                let cmd = estimate(&ctx, &opts)?;
                                let p = cmd.p_value().ok_or_else(|| {
                                    Error::Domain("J test needs an overidentified model".into())
                                })?;
                                Ok(p < spec.level)
                            };
                            one().ok()
                        })
                        .collect();
                    let n_used = rejections.iter().flatten().count();
                    let n_rej = rejections.iter().flatten().filter(|r| **r).count();
                    if n_used == 0 {
                        return Err(Error::Optimization {
                            details: "every replication failed in a size/power cell".into(),
                        });
                    }
                    cells.push(SizePowerCell {
                        t,
                        contamination,
                        strong,
                        upsilon_fixed_zero: fixed,
                        rejection_rate: n_rej as f64 / n_used as f64,
                        n_used,
                        n_failed: spec.n_reps - n_used,
                    });
                }
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample_corr(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> f64 {
        let n = a.clone().count() as f64;
        let ma = a.clone().sum::<f64>() / n;
        let mb = b.clone().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn identical_seed_reproduces_panel_bitwise() {
        let cfg = DgpConfig::table_design(ProxyType::StrongExogenous, 0.0, 300);
        let p1 = cfg.simulate(42).unwrap();
        let p2 = cfg.simulate(42).unwrap();
        assert_eq!(p1.w(), p2.w());
        let p3 = cfg.simulate(43).unwrap();
        assert_ne!(p1.w(), p3.w());
    }

    #[test]
    fn strong_design_hits_target_relevance() {
        let cfg = DgpConfig::table_design(ProxyType::StrongExogenous, 0.0, 1_000_000);
        let (panel, shocks) = cfg.simulate_with_shocks(7, 0).unwrap();
        let z = (0..panel.t()).map(|t| panel.w()[(t, 2)]);
        let e1 = (0..panel.t()).map(|t| shocks[(t, 0)]);
        let corr = sample_corr(z.clone(), e1);
        assert!((corr - 0.5).abs() < 0.01, "corr(z, eps1) = {corr}");
        // exogenous: correlation with the non-target shock vanishes
        let e2 = (0..panel.t()).map(|t| shocks[(t, 1)]);
        let corr2 = sample_corr(z, e2);
        assert!(corr2.abs() < 3.0 / (panel.t() as f64).sqrt(), "corr(z, eps2) = {corr2}");
    }

    #[test]
    fn local_design_relevance_halves_when_t_quadruples() {
        let mut corrs = Vec::new();
        for &t in &[4000usize, 16000] {
            let cfg = DgpConfig::table_design(ProxyType::LocalExogenous, 0.0, t);
            // average a few streams to tame sampling noise
            let mut acc = 0.0;
            for s in 0..20 {
                let (panel, shocks) = cfg.simulate_with_shocks(11, s).unwrap();
                let z = (0..panel.t()).map(|u| panel.w()[(u, 2)]);
                let e1 = (0..panel.t()).map(|u| shocks[(u, 0)]);
                acc += sample_corr(z, e1);
            }
            corrs.push(acc / 20.0);
        }
        let ratio = corrs[0] / corrs[1];
        assert!((ratio - 2.0).abs() < 0.35, "corrs {corrs:?}, ratio {ratio}");
    }

    #[test]
    fn contaminated_design_hits_target_contamination() {
        let cfg = DgpConfig::table_design(ProxyType::StrongContaminated, 0.25, 400_000);
        let (panel, shocks) = cfg.simulate_with_shocks(3, 0).unwrap();
        let z = (0..panel.t()).map(|t| panel.w()[(t, 2)]);
        let e2 = (0..panel.t()).map(|t| shocks[(t, 1)]);
        let corr = sample_corr(z, e2);
        assert!((corr - 0.25).abs() < 0.01, "corr(z, eps2) = {corr}");
    }

    #[test]
    fn convex_combination_plims_match_hand_values() {
        let cfg = DgpConfig::convex_combination_design(1000);
        let plim = convex_combination_plim(&cfg, 1);
        assert_abs_diff_eq!(plim[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(plim[(1, 0)], 0.75, epsilon = 1e-12);
        let ratio = convex_combination_ratio_plim(&cfg);
        assert_abs_diff_eq!(ratio[0], 0.75, epsilon = 1e-12);
        // no-shift special case degenerates to the regime-1 value
        let mut flat = cfg.clone();
        flat.delta_g = DMatrix::zeros(3, 3);
        let plim_flat = convex_combination_plim(&flat, 1);
        assert_abs_diff_eq!(plim_flat[(1, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn model_patterns_have_expected_counts() {
        let m1 = model1_restrictions();
        assert_eq!((m1.a(), m1.b(), m1.c()), (7, 2, 0));
        assert_eq!(m1.n_moments() - m1.n_params(), 3);
        let m2 = model2_restrictions();
        assert_eq!((m2.a(), m2.b(), m2.c()), (6, 2, 0));
        assert_eq!(m2.n_moments() - m2.n_params(), 4);
        let m3 = model3_restrictions();
        assert_eq!((m3.a(), m3.b(), m3.c()), (4, 0, 2));
        assert_eq!(m3.n_moments(), m3.n_params());
        let m4 = model4_restrictions();
        assert_eq!((m4.a(), m4.b(), m4.c()), (7, 0, 3));
        assert_eq!(m4.n_moments() - m4.n_params(), 2);
    }

    #[test]
    fn model_patterns_satisfy_rank_condition_at_truth() {
        use crate::identification::jacobian;
        let cfg = DgpConfig::table_design(ProxyType::StrongContaminated, 0.15, 500);
        for (rs, name) in [(model1_restrictions(), "M1"), (model2_restrictions(), "M2")] {
            // for M2 under contamination the pattern is misspecified, but
            // the Jacobian rank near the pseudo-true point is what matters
            let truth = rs.read_back(&cfg.g, &cfg.delta_g, &cfg.psi);
            let j = jacobian(&rs, &truth).unwrap();
            assert_eq!(j.rank(), rs.n_params(), "{name} rank deficient at truth");
        }
        // M3 and M4 assume constant impacts with free variance ratios; their
        // rank condition needs distinct ratios, which holds at their
        // pseudo-true points under this break but not at psi = 1
        let rs3 = model3_restrictions();
        let g_y = cfg.g.view((0, 0), (2, 2)).clone_owned();
        let psi3 = DVector::from_column_slice(&[0.5, 1.2]);
        let truth3 = rs3.read_back(&g_y, &DMatrix::zeros(2, 2), &psi3);
        let j3 = jacobian(&rs3, &truth3).unwrap();
        assert_eq!(j3.rank(), rs3.n_params(), "M3 rank deficient at generic point");
        // M4's pattern loses rank exactly when all variance ratios
        // coincide (a rotation stays unpinned), so probe it at a generic
        // psi point: its pseudo-true ratios under this DGP are distinct
        let rs4 = model4_restrictions();
        let psi4 = DVector::from_column_slice(&[0.4, 1.3, 0.9]);
        let truth4 = rs4.read_back(&cfg.g, &DMatrix::zeros(3, 3), &psi4);
        let j4 = jacobian(&rs4, &truth4).unwrap();
        assert_eq!(j4.rank(), rs4.n_params(), "M4 rank deficient at generic point");
        let degenerate = rs4.read_back(&cfg.g, &DMatrix::zeros(3, 3), &cfg.psi);
        assert!(jacobian(&rs4, &degenerate).unwrap().rank() < rs4.n_params());
    }

    #[test]
    fn proxy_closed_form_recovers_population_column() {
        let cfg = DgpConfig::table_design(ProxyType::StrongExogenous, 0.0, 500);
        let sigma_u = (cfg.g.view((0, 0), (2, 3)).clone_owned())
            * cfg.g.view((0, 0), (2, 3)).transpose();
        let phi = cfg.g[(2, 0)];
        let sigma_uz = cfg.g.view((0, 0), (2, 1)).clone_owned() * phi;
        let h = proxy_impact_closed_form(&sigma_u, &sigma_uz.column(0).clone_owned()).unwrap();
        assert_abs_diff_eq!(h[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(h[1], 0.4, epsilon = 1e-10);
    }

    #[test]
    fn comparison_runs_and_benchmarks_to_one() {
        let mut spec = ComparisonSpec::new(ProxyType::StrongExogenous, 0.0, 300, 24, 5);
        spec.n_starts = 3;
        spec.horizon = 8;
        let result = run_comparison(&spec).unwrap();
        assert_eq!(result.relative[0], [1.0, 1.0]);
        assert!(result.n_used > 0);
        // deterministic across calls
        let again = run_comparison(&spec).unwrap();
        assert_eq!(result.mse, again.mse);
    }
}
