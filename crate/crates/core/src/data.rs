//! Observation panel for the augmented system: VAR variables first, proxies
//! last.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A `T x (n + r)` observation matrix whose first `n` columns are the
/// endogenous variables and whose last `r` columns are the external
/// instruments. `r = 0` is allowed (no proxies, volatility information
/// only).
#[derive(Debug, Clone)]
pub struct PanelData {
    w: DMatrix<f64>,
    n: usize,
    r: usize,
    labels: Vec<String>,
}

impl PanelData {
    pub fn new(w: DMatrix<f64>, n: usize, r: usize, labels: Vec<String>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("panel needs at least one endogenous variable".into()));
        }
        if w.ncols() != n + r {
            return Err(Error::Shape(format!(
                "panel has {} columns but n + r = {}",
                w.ncols(),
                n + r
            )));
        }
        if labels.len() != n + r {
            return Err(Error::Shape(format!(
                "expected {} labels, got {}",
                n + r,
                labels.len()
            )));
        }
        if let Some(pos) = w.iter().position(|x| !x.is_finite()) {
            let (rows, t) = (w.nrows(), pos % w.nrows());
            return Err(Error::Domain(format!(
                "missing or non-finite value at row {}, column {}",
                t + 1,
                labels[pos / rows]
            )));
        }
        Ok(PanelData { w, n, r, labels })
    }

    /// Panel with autogenerated labels `y1..yn, z1..zr`.
    pub fn unlabeled(w: DMatrix<f64>, n: usize, r: usize) -> Result<Self> {
        let labels = (1..=n)
            .map(|i| format!("y{i}"))
            .chain((1..=r).map(|i| format!("z{i}")))
            .collect();
        Self::new(w, n, r, labels)
    }

    /// Number of observations.
    pub fn t(&self) -> usize {
        self.w.nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Total system dimension `n + r`.
    pub fn m(&self) -> usize {
        self.n + self.r
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// The endogenous block as its own panel (drops the proxy columns).
    pub fn endogenous_only(&self) -> PanelData {
        PanelData {
            w: self.w.columns(0, self.n).clone_owned(),
            n: self.n,
            r: 0,
            labels: self.labels[..self.n].to_vec(),
        }
    }

    /// Rescales every observation by `c > 0` (used by scale-invariance
    /// checks).
    pub fn scaled(&self, c: f64) -> Result<PanelData> {
        if !(c > 0.0) {
            return Err(Error::Domain("scale factor must be positive".into()));
        }
        Ok(PanelData {
            w: &self.w * c,
            n: self.n,
            r: self.r,
            labels: self.labels.clone(),
        })
    }
}
