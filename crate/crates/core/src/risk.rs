//! Risk functionals: homogeneous maps from a spatial field to a scalar that
//! decide which days count as extreme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "site", rename_all = "snake_case")]
pub enum RiskKind {
    Max,
    Min,
    Mean,
    /// Value at one station, by index into the dataset's station list.
    Site(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskFunctional {
    pub kind: RiskKind,
    /// Order `α` in `ℓ(λy) = λ^α ℓ(y)`. Every built-in kind has `α = 1`.
    pub homogeneity_order: f64,
}

impl RiskFunctional {
    pub fn new(kind: RiskKind) -> Self {
        RiskFunctional {
            kind,
            homogeneity_order: 1.0,
        }
    }

    pub fn max() -> Self {
        Self::new(RiskKind::Max)
    }

    pub fn min() -> Self {
        Self::new(RiskKind::Min)
    }

    pub fn mean() -> Self {
        Self::new(RiskKind::Mean)
    }

    pub fn site(index: usize) -> Self {
        Self::new(RiskKind::Site(index))
    }

    /// True when `ℓ(x + c·1) = ℓ(x) + c` and `ℓ` is linear; the site and mean
    /// functionals.
    pub fn is_linear(&self) -> bool {
        matches!(self.kind, RiskKind::Mean | RiskKind::Site(_))
    }

    /// Evaluates `ℓ(field)`, skipping `NaN` (masked) entries.
    pub fn apply(&self, field: &[f64]) -> Result<f64> {
        if field.is_empty() {
            return Err(Error::InvalidInput("risk functional of an empty field".into()));
        }
        let observed = || field.iter().copied().filter(|v| !v.is_nan());
        let undefined = || Error::Domain("risk functional undefined: every entry is masked".into());
        match self.kind {
            RiskKind::Max => observed().reduce(f64::max).ok_or_else(undefined),
            RiskKind::Min => observed().reduce(f64::min).ok_or_else(undefined),
            RiskKind::Mean => {
                let (sum, count) = observed().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                if count == 0 {
                    Err(undefined())
                } else {
                    Ok(sum / count as f64)
                }
            }
            RiskKind::Site(k) => match field.get(k) {
                None => Err(Error::InvalidInput(format!(
                    "site index {k} out of range for a field of length {}",
                    field.len()
                ))),
                Some(v) if v.is_nan() => Err(Error::Domain(format!(
                    "risk functional undefined: site {k} is masked"
                ))),
                Some(v) => Ok(*v),
            },
        }
    }

    /// `∂ℓ/∂x_j` on a fully observed field. For max/min the derivative is
    /// the indicator of the (first) arg-extremum.
    pub fn partial(&self, field: &[f64], j: usize) -> f64 {
        let d = field.len();
        match self.kind {
            RiskKind::Mean => 1.0 / d as f64,
            RiskKind::Site(k) => f64::from(u8::from(j == k)),
            RiskKind::Max | RiskKind::Min => {
                let better = |a: f64, b: f64| match self.kind {
                    RiskKind::Max => a > b,
                    _ => a < b,
                };
                let mut best = 0;
                for i in 1..d {
                    if better(field[i], field[best]) {
                        best = i;
                    }
                }
                f64::from(u8::from(j == best))
            }
        }
    }
}
