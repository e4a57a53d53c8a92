//! Regime-dependent impulse responses: absolute responses to
//! one-standard-deviation shocks, relative (unit-impact normalized)
//! responses, peak statistics, and full-pipeline moving-block-bootstrap
//! confidence bands.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cmd::{estimate, BlockLength, CmdFit, DistanceContext, EstimateOptions, Weighting};
use crate::data::PanelData;
use crate::error::{Error, Result};
use crate::linalg::CompanionMatrix;
use crate::reduced_form::{estimate_reduced_form, ReducedFormFit, VarSpec};
use crate::restrictions::Restrictions;
use crate::rng::nested_rng;

/// Near-zero guard for the relative-IRF normalization, relative to the
/// impact-column norm.
const NORMALIZATION_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum IrfMode {
    Absolute,
    /// Shock column rescaled so `norm_var`'s impact response is one.
    Relative { norm_var: usize },
}

/// Responses of the first `n` variables to the tracked shocks, horizon by
/// horizon and regime by regime, with optional bootstrap bands.
#[derive(Debug, Clone)]
pub struct IrfSet {
    mode: IrfMode,
    n: usize,
    shocks: Vec<usize>,
    horizon: usize,
    regime1: Vec<DMatrix<f64>>,
    regime2: Vec<DMatrix<f64>>,
    unstable_warning: bool,
    bands: Option<IrfBands>,
}

/// Percentile bands per response cell, plus draw bookkeeping.
#[derive(Debug, Clone)]
pub struct IrfBands {
    pub level: f64,
    pub lower1: Vec<DMatrix<f64>>,
    pub upper1: Vec<DMatrix<f64>>,
    pub lower2: Vec<DMatrix<f64>>,
    pub upper2: Vec<DMatrix<f64>>,
    pub n_draws_used: usize,
    pub n_draws_failed: usize,
    /// Set when more than 10% of the bootstrap draws failed.
    pub reliability_warning: bool,
    /// Cells where the point estimate fell outside its own band (expected
    /// to be zero with point-seeded draws; counted, not fatal).
    pub point_coverage_violations: usize,
}

impl IrfSet {
    pub fn mode(&self) -> IrfMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Tracked shock columns of `G` (0-based).
    pub fn shocks(&self) -> &[usize] {
        &self.shocks
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Response matrix (`n x n_shocks`) of regime `i` at horizon `l`.
    pub fn response(&self, regime: usize, l: usize) -> &DMatrix<f64> {
        if regime <= 1 {
            &self.regime1[l]
        } else {
            &self.regime2[l]
        }
    }

    pub fn unstable_warning(&self) -> bool {
        self.unstable_warning
    }

    pub fn bands(&self) -> Option<&IrfBands> {
        self.bands.as_ref()
    }

    /// Flat (regime, variable, shock, horizon, point, lower, upper) rows for
    /// tabular output. Band columns repeat the point when no bands exist.
    pub fn rows(&self) -> Vec<IrfRow> {
        let mut out = Vec::new();
        for regime in [1usize, 2] {
            for (s_pos, &shock) in self.shocks.iter().enumerate() {
                for var in 0..self.n {
                    for l in 0..=self.horizon {
                        let point = self.response(regime, l)[(var, s_pos)];
                        let (lower, upper) = match &self.bands {
                            Some(b) => {
                                let (lo, up) = if regime == 1 {
                                    (&b.lower1[l], &b.upper1[l])
                                } else {
                                    (&b.lower2[l], &b.upper2[l])
                                };
                                (lo[(var, s_pos)], up[(var, s_pos)])
                            }
                            None => (point, point),
                        };
                        out.push(IrfRow { regime, variable: var, shock, horizon: l, point, lower, upper });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IrfRow {
    pub regime: usize,
    pub variable: usize,
    pub shock: usize,
    pub horizon: usize,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Peak response of one variable to one shock in one regime, sign-adjusted
/// so the impact response is positive; `horizon` is the argmax.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PeakStat {
    pub regime: usize,
    pub variable: usize,
    pub shock: usize,
    pub value: f64,
    pub horizon: usize,
}

/// Absolute responses from raw structural matrices: regime 1 uses the
/// columns of `G`, regime 2 the shifted columns scaled by the square root
/// of the matching variance ratio. `comp2` supplies regime-specific slopes
/// when they were estimated; otherwise regime 2 propagates with `comp1`.
pub fn absolute_irf_from_matrices(
    g: &DMatrix<f64>,
    delta_g: &DMatrix<f64>,
    psi_diag: &DVector<f64>,
    comp1: &CompanionMatrix,
    comp2: Option<&CompanionMatrix>,
    n: usize,
    k: usize,
    horizon: usize,
) -> Result<IrfSet> {
    let m = g.nrows();
    if k == 0 || k > n || n > m {
        return Err(Error::Domain(format!("need 1 <= k <= n <= {m}, got k = {k}, n = {n}")));
    }
    if comp1.n() != m {
        return Err(Error::Shape(format!(
            "companion is for {} variables, structural matrices for {m}",
            comp1.n()
        )));
    }
    let impact1 = g.columns(0, k).clone_owned();
    let mut impact2 = (g + delta_g).columns(0, k).clone_owned();
    for j in 0..k {
        impact2.column_mut(j).scale_mut(psi_diag[j].sqrt());
    }
    build_irf(
        IrfMode::Absolute,
        (0..k).collect(),
        &impact1,
        &impact2,
        comp1,
        comp2,
        n,
        horizon,
    )
}

/// Relative responses to shock `shock`: both regime columns are rescaled so
/// the impact response of `norm_var` equals one, which cancels the variance
/// ratios entirely.
pub fn relative_irf_from_matrices(
    g: &DMatrix<f64>,
    delta_g: &DMatrix<f64>,
    comp1: &CompanionMatrix,
    comp2: Option<&CompanionMatrix>,
    n: usize,
    shock: usize,
    norm_var: usize,
    horizon: usize,
) -> Result<IrfSet> {
    let m = g.nrows();
    if shock >= n || norm_var >= n {
        return Err(Error::Domain(format!(
            "shock {shock} and normalization variable {norm_var} must be below n = {n}"
        )));
    }
    let b = g + delta_g;
    let mut impacts = Vec::with_capacity(2);
    for (regime, mat) in [(1usize, g), (2usize, &b)] {
        let col = mat.column(shock).clone_owned();
        let scale = col.rows(0, n).norm();
        if col[norm_var].abs() <= NORMALIZATION_RTOL * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Normalization {
                regime,
                msg: format!(
                    "impact of shock {} on variable {} is numerically zero",
                    shock + 1,
                    norm_var + 1
                ),
            });
        }
        impacts.push(&col / col[norm_var]);
    }
    let impact1 = DMatrix::from_column_slice(m, 1, impacts[0].as_slice());
    let impact2 = DMatrix::from_column_slice(m, 1, impacts[1].as_slice());
    build_irf(
        IrfMode::Relative { norm_var },
        vec![shock],
        &impact1,
        &impact2,
        comp1,
        comp2,
        n,
        horizon,
    )
}

#[allow(clippy::too_many_arguments)]
fn build_irf(
    mode: IrfMode,
    shocks: Vec<usize>,
    impact1: &DMatrix<f64>,
    impact2: &DMatrix<f64>,
    comp1: &CompanionMatrix,
    comp2: Option<&CompanionMatrix>,
    n: usize,
    horizon: usize,
) -> Result<IrfSet> {
    let unstable =
        !comp1.is_stable() || comp2.map(|c| !c.is_stable()).unwrap_or(false);
    let props1 = comp1.propagators(horizon);
    let props2 = comp2.map(|c| c.propagators(horizon));
    let take = |props: &[DMatrix<f64>], impact: &DMatrix<f64>, l: usize| {
        (&props[l] * impact).rows(0, n).clone_owned()
    };
    let mut regime1 = Vec::with_capacity(horizon + 1);
    let mut regime2 = Vec::with_capacity(horizon + 1);
    for l in 0..=horizon {
        regime1.push(take(&props1, impact1, l));
        let p2 = props2.as_deref().unwrap_or(&props1);
        regime2.push(take(p2, impact2, l));
    }
    Ok(IrfSet {
        mode,
        n,
        shocks,
        horizon,
        regime1,
        regime2,
        unstable_warning: unstable,
        bands: None,
    })
}

/// Absolute IRFs from a CMD fit and the reduced-form companion(s).
pub fn absolute_irf(
    fit: &CmdFit,
    comp1: &CompanionMatrix,
    comp2: Option<&CompanionMatrix>,
    k: usize,
    horizon: usize,
) -> Result<IrfSet> {
    absolute_irf_from_matrices(
        fit.g(),
        fit.delta_g(),
        fit.psi_diag(),
        comp1,
        comp2,
        fit.restrictions().n(),
        k,
        horizon,
    )
}

/// Relative IRFs from a CMD fit; `shock` and `norm_var` are 0-based.
pub fn relative_irf(
    fit: &CmdFit,
    comp1: &CompanionMatrix,
    comp2: Option<&CompanionMatrix>,
    shock: usize,
    norm_var: usize,
    horizon: usize,
) -> Result<IrfSet> {
    relative_irf_from_matrices(
        fit.g(),
        fit.delta_g(),
        comp1,
        comp2,
        fit.restrictions().n(),
        shock,
        norm_var,
        horizon,
    )
}

/// Largest sign-adjusted response per (regime, variable, shock), with its
/// horizon.
pub fn peak_statistics(irf: &IrfSet) -> Vec<PeakStat> {
    let mut out = Vec::new();
    for regime in [1usize, 2] {
        for (s_pos, &shock) in irf.shocks().iter().enumerate() {
            for var in 0..irf.n() {
                let impact = irf.response(regime, 0)[(var, s_pos)];
                let sign = if impact < 0.0 { -1.0 } else { 1.0 };
                let mut best = f64::NEG_INFINITY;
                let mut best_l = 0;
                for l in 0..=irf.horizon() {
                    let v = sign * irf.response(regime, l)[(var, s_pos)];
                    if v > best {
                        best = v;
                        best_l = l;
                    }
                }
                out.push(PeakStat { regime, variable: var, shock, value: best, horizon: best_l });
            }
        }
    }
    out
}

/// What the bootstrap re-estimates in every draw.
#[derive(Debug, Clone, Copy)]
pub enum IrfKind {
    Absolute { k: usize },
    Relative { shock: usize, norm_var: usize },
}

/// Weighting used inside each bootstrap draw.
#[derive(Debug, Clone, Copy)]
pub enum DrawWeighting {
    /// Closed-form Gaussian blocks (fast; the desk default for bands).
    Gaussian,
    Mbb { block_len: BlockLength, n_boot: usize },
}

#[derive(Debug, Clone)]
pub struct BandOptions {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
    /// Block length for the residual resampling that rebuilds the panel.
    pub block_len: BlockLength,
    pub weighting: DrawWeighting,
    /// Optimizer starts per draw, seeded at the point estimate.
    pub starts_per_draw: usize,
}

impl BandOptions {
    pub fn new(n_boot: usize, level: f64, seed: u64) -> Self {
        BandOptions {
            n_boot,
            level,
            seed,
            block_len: BlockLength::Auto,
            weighting: DrawWeighting::Gaussian,
            starts_per_draw: 2,
        }
    }
}

/// Full-pipeline moving-block bootstrap: within each regime, residual
/// blocks are resampled and the panel rebuilt recursively from the fitted
/// slopes; the reduced form and the CMD step are re-estimated per draw
/// (starts seeded at the point estimate) and percentile bands collected per
/// response cell. Draw failures are skipped and counted; more than 10%
/// failures raises the reliability flag.
#[allow(clippy::too_many_arguments)]
pub fn irf_with_bands(
    data: &PanelData,
    spec: &VarSpec,
    rs: &Restrictions,
    reduced: &ReducedFormFit,
    point_fit: &CmdFit,
    kind: IrfKind,
    horizon: usize,
    opts: &BandOptions,
) -> Result<IrfSet> {
    if !(0.0 < opts.level && opts.level < 1.0) {
        return Err(Error::Domain(format!("band level must lie in (0,1), got {}", opts.level)));
    }
    let point = compute_kind(point_fit, reduced, kind, horizon)?;
    if opts.n_boot == 0 {
        return Ok(point);
    }

    let draws: Vec<Option<IrfSet>> = (0..opts.n_boot)
        .into_par_iter()
        .map(|d| bootstrap_draw(data, spec, rs, reduced, point_fit, kind, horizon, opts, d as u64).ok())
        .collect();

    let n_failed = draws.iter().filter(|d| d.is_none()).count();
    let used: Vec<&IrfSet> = draws.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Optimization {
            details: "every bootstrap draw failed to re-estimate".into(),
        });
    }

    let alpha = (1.0 - opts.level) / 2.0;
    let n_shocks = point.shocks().len();
    let mut bands = IrfBands {
        level: opts.level,
        lower1: vec![DMatrix::zeros(point.n(), n_shocks); horizon + 1],
        upper1: vec![DMatrix::zeros(point.n(), n_shocks); horizon + 1],
        lower2: vec![DMatrix::zeros(point.n(), n_shocks); horizon + 1],
        upper2: vec![DMatrix::zeros(point.n(), n_shocks); horizon + 1],
        n_draws_used: used.len(),
        n_draws_failed: n_failed,
        reliability_warning: (n_failed as f64) > 0.10 * opts.n_boot as f64,
        point_coverage_violations: 0,
    };
    let mut cell_values = vec![0.0f64; used.len()];
    for regime in [1usize, 2] {
        for l in 0..=horizon {
            for var in 0..point.n() {
                for s in 0..n_shocks {
                    for (i, d) in used.iter().enumerate() {
                        cell_values[i] = d.response(regime, l)[(var, s)];
                    }
                    cell_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let lo = percentile(&cell_values, alpha);
                    let hi = percentile(&cell_values, 1.0 - alpha);
                    let (lower, upper) = if regime == 1 {
                        (&mut bands.lower1, &mut bands.upper1)
                    } else {
                        (&mut bands.lower2, &mut bands.upper2)
                    };
                    lower[l][(var, s)] = lo;
                    upper[l][(var, s)] = hi;
                    let p = point.response(regime, l)[(var, s)];
                    if p < lo || p > hi {
                        bands.point_coverage_violations += 1;
                    }
                }
            }
        }
    }
    let mut out = point;
    out.bands = Some(bands);
    Ok(out)
}

fn compute_kind(
    fit: &CmdFit,
    reduced: &ReducedFormFit,
    kind: IrfKind,
    horizon: usize,
) -> Result<IrfSet> {
    let comp1 = reduced.companion(1)?;
    let comp2 = {
        let c2 = reduced.companion(2)?;
        if c2.c() == comp1.c() {
            None
        } else {
            Some(c2)
        }
    };
    match kind {
        IrfKind::Absolute { k } => absolute_irf(fit, &comp1, comp2.as_ref(), k, horizon),
        IrfKind::Relative { shock, norm_var } => {
            relative_irf(fit, &comp1, comp2.as_ref(), shock, norm_var, horizon)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bootstrap_draw(
    data: &PanelData,
    spec: &VarSpec,
    rs: &Restrictions,
    reduced: &ReducedFormFit,
    point_fit: &CmdFit,
    kind: IrfKind,
    horizon: usize,
    opts: &BandOptions,
    draw: u64,
) -> Result<IrfSet> {
    let star = resample_panel(data, spec, reduced, opts.block_len, opts.seed, draw)?;
    let fit_star = estimate_reduced_form(&star, spec)?;
    let weighting = match opts.weighting {
        DrawWeighting::Gaussian => Weighting::gaussian(&fit_star)?,
        DrawWeighting::Mbb { block_len, n_boot } => {
            Weighting::mbb(&fit_star, block_len, n_boot, nested_rng_seed(opts.seed, draw))?
        }
    };
    let ctx = DistanceContext::new(&fit_star, rs, &weighting)?;
    let mut eopts = EstimateOptions::new(opts.seed ^ draw.rotate_left(17));
    eopts.n_starts = opts.starts_per_draw.max(1);
    eopts.skip_identification_check = true;
    eopts.initial = Some(point_fit.varsigma().clone());
    let cmd_star = estimate(&ctx, &eopts)?;
    compute_kind(&cmd_star, &fit_star, kind, horizon)
}

fn nested_rng_seed(seed: u64, draw: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(draw)
}

/// Rebuilds a bootstrap panel: regime-wise moving blocks of residuals are
/// drawn and the observations regenerated recursively from the fitted
/// slopes, keeping the original presample rows.
fn resample_panel(
    data: &PanelData,
    spec: &VarSpec,
    reduced: &ReducedFormFit,
    block_len: BlockLength,
    seed: u64,
    draw: u64,
) -> Result<PanelData> {
    let (t1, t2) = reduced.regime_sizes();
    let p = reduced.p();
    let m = reduced.m();
    let rows = t1 + t2;
    let mut eta = DMatrix::zeros(rows, m);
    for (regime, (start, len)) in [(0u64, (0usize, t1)), (1, (t1, t2))] {
        let res = reduced.residuals().rows(start, len).clone_owned();
        let l = match block_len {
            BlockLength::Auto => ((len as f64).cbrt().floor() as usize).max(1),
            BlockLength::Fixed(l) => l,
        };
        if l > len {
            return Err(Error::Domain("block length exceeds regime size".into()));
        }
        let mut rng = nested_rng(seed, draw, regime);
        let n_starts = len - l + 1;
        let mut filled = 0usize;
        while filled < len {
            let s = rng.random_range(0..n_starts);
            let take = l.min(len - filled);
            eta.view_mut((start + filled, 0), (take, m))
                .copy_from(&res.view((s, 0), (take, m)));
            filled += take;
        }
    }

    let mut w = DMatrix::zeros(data.t(), m);
    w.rows_mut(0, p).copy_from(&data.w().rows(0, p));
    let d_const = spec.constant;
    let d_trend = spec.trend;
    let kx = m * p;
    for row in 0..rows {
        let t = row + p;
        let gamma = if t + 1 <= reduced.break_index() {
            reduced.gamma(1)
        } else {
            reduced.gamma(2)
        };
        for eq in 0..m {
            let mut v = eta[(row, eq)];
            for lag in 1..=p {
                for c in 0..m {
                    v += gamma[(eq, (lag - 1) * m + c)] * w[(t - lag, c)];
                }
            }
            let mut dc = kx;
            if d_const {
                v += gamma[(eq, dc)];
                dc += 1;
            }
            if d_trend {
                v += gamma[(eq, dc)] * (row + 1) as f64;
            }
            w[(t, eq)] = v;
        }
    }
    PanelData::new(w, data.n(), data.r(), data.labels().to_vec())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn static_companion(m: usize) -> CompanionMatrix {
        CompanionMatrix::new(&DMatrix::zeros(m, m), m, 1).unwrap()
    }

    #[test]
    fn static_model_has_impact_only() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.9]);
        let dg = DMatrix::zeros(2, 2);
        let psi = DVector::from_element(2, 1.0);
        let comp = static_companion(2);
        let irf = absolute_irf_from_matrices(&g, &dg, &psi, &comp, None, 2, 1, 4).unwrap();
        assert_abs_diff_eq!(irf.response(1, 0).column(0).clone_owned(), g.column(0).clone_owned(), epsilon = 0.0);
        for l in 1..=4 {
            assert_eq!(irf.response(1, l).amax(), 0.0);
            assert_eq!(irf.response(2, l).amax(), 0.0);
        }
    }

    #[test]
    fn diagonal_var_powers() {
        // Pi = diag(0.5, 0.3), impact (1,0)': horizon-2 response (0.25, 0)'
        let pi = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 0.3]));
        let comp = CompanionMatrix::new(&pi, 2, 1).unwrap();
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let irf = absolute_irf_from_matrices(
            &g,
            &DMatrix::zeros(2, 2),
            &DVector::from_element(2, 1.0),
            &comp,
            None,
            2,
            1,
            3,
        )
        .unwrap();
        assert_abs_diff_eq!(irf.response(1, 2)[(0, 0)], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(irf.response(1, 2)[(1, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn no_shift_means_equal_regimes() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.4, 0.8]);
        let comp = static_companion(2);
        let irf = absolute_irf_from_matrices(
            &g,
            &DMatrix::zeros(2, 2),
            &DVector::from_element(2, 1.0),
            &comp,
            None,
            2,
            1,
            2,
        )
        .unwrap();
        for l in 0..=2 {
            assert_abs_diff_eq!(irf.response(1, l), irf.response(2, l), epsilon = 0.0);
        }
    }

    #[test]
    fn scale_only_shift_multiplies_by_sqrt_psi() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.4, 0.8]);
        let pi = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]);
        let comp = CompanionMatrix::new(&pi, 2, 1).unwrap();
        let psi = DVector::from_column_slice(&[2.25, 0.49]);
        let irf = absolute_irf_from_matrices(&g, &DMatrix::zeros(2, 2), &psi, &comp, None, 2, 2, 6)
            .unwrap();
        for l in 0..=6 {
            for var in 0..2 {
                assert_abs_diff_eq!(
                    irf.response(2, l)[(var, 0)],
                    1.5 * irf.response(1, l)[(var, 0)],
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(
                    irf.response(2, l)[(var, 1)],
                    0.7 * irf.response(1, l)[(var, 1)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn relative_normalization_is_exact_and_ratios_match() {
        // h11 = 2, h21 = 1, dh11 = -1, dh21 = 0.5: regime ratios 0.5 and 1.5
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 1.0, 0.9]);
        let mut dg = DMatrix::zeros(2, 2);
        dg[(0, 0)] = -1.0;
        dg[(1, 0)] = 0.5;
        let comp = static_companion(2);
        let irf = relative_irf_from_matrices(&g, &dg, &comp, None, 2, 0, 0, 5).unwrap();
        assert_eq!(irf.response(1, 0)[(0, 0)], 1.0);
        assert_eq!(irf.response(2, 0)[(0, 0)], 1.0);
        assert_abs_diff_eq!(irf.response(1, 0)[(1, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(irf.response(2, 0)[(1, 0)], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn relative_irf_ignores_variance_ratios_and_sign_flips() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 1.0, 0.9]);
        let mut dg = DMatrix::zeros(2, 2);
        dg[(0, 0)] = -0.5;
        dg[(1, 0)] = 0.25;
        let pi = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.2, 0.4]);
        let comp = CompanionMatrix::new(&pi, 2, 1).unwrap();
        let base = relative_irf_from_matrices(&g, &dg, &comp, None, 2, 0, 0, 6).unwrap();
        // flipping the shock column of G and Delta_G jointly changes nothing
        let mut g2 = g.clone();
        g2.column_mut(0).neg_mut();
        let mut dg2 = dg.clone();
        dg2.column_mut(0).neg_mut();
        let flipped = relative_irf_from_matrices(&g2, &dg2, &comp, None, 2, 0, 0, 6).unwrap();
        for l in 0..=6 {
            assert_abs_diff_eq!(base.response(1, l), flipped.response(1, l), epsilon = 1e-14);
            assert_abs_diff_eq!(base.response(2, l), flipped.response(2, l), epsilon = 1e-14);
        }
    }

    #[test]
    fn near_zero_normalizer_names_the_regime() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 1.0, 0.9]);
        let mut dg = DMatrix::zeros(2, 2);
        dg[(0, 0)] = -2.0; // regime-2 impact on variable 1 is exactly zero
        let comp = static_companion(2);
        match relative_irf_from_matrices(&g, &dg, &comp, None, 2, 0, 0, 3) {
            Err(Error::Normalization { regime, .. }) => assert_eq!(regime, 2),
            other => panic!("expected normalization error, got {other:?}"),
        }
    }

    #[test]
    fn unstable_companion_warns_but_computes() {
        let pi = DMatrix::from_row_slice(1, 1, &[1.05]);
        let comp = CompanionMatrix::new(&pi, 1, 1).unwrap();
        let g = DMatrix::from_row_slice(1, 1, &[1.0]);
        let irf = absolute_irf_from_matrices(
            &g,
            &DMatrix::zeros(1, 1),
            &DVector::from_element(1, 1.0),
            &comp,
            None,
            1,
            1,
            3,
        )
        .unwrap();
        assert!(irf.unstable_warning());
        assert_abs_diff_eq!(irf.response(1, 3)[(0, 0)], 1.05f64.powi(3), epsilon = 1e-12);
    }

    #[test]
    fn peak_statistics_track_sign_adjusted_max() {
        let pi = DMatrix::from_row_slice(1, 1, &[0.5]);
        let comp = CompanionMatrix::new(&pi, 1, 1).unwrap();
        let g = DMatrix::from_row_slice(1, 1, &[-2.0]);
        let irf = absolute_irf_from_matrices(
            &g,
            &DMatrix::zeros(1, 1),
            &DVector::from_element(1, 1.0),
            &comp,
            None,
            1,
            1,
            5,
        )
        .unwrap();
        let peaks = peak_statistics(&irf);
        let p = peaks.iter().find(|p| p.regime == 1).unwrap();
        assert_eq!(p.horizon, 0);
        assert_abs_diff_eq!(p.value, 2.0, epsilon = 1e-15);
    }
}
