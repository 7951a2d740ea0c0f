//! Publication-bias diagnostics: Rosenthal's fail-safe N, Egger's regression
//! test and funnel-plot coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Factor;
use crate::distributions::{student_t_quantile, student_t_two_tailed_p};
use crate::pooling::PooledEstimate;
use crate::transforms::NormalizedEffect;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BiasError {
    #[error("{test} needs at least {needed} effects, got {got}")]
    InsufficientData {
        test: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("Egger regression is singular: all precisions are equal")]
    SingularDesign,
    #[error("funnel plot needs at least one effect")]
    Empty,
}

/// Critical value used by the fail-safe N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NfsVariant {
    /// Two-tailed α = 0.05, z = 1.959964.
    #[default]
    #[serde(rename = "two_tailed_196")]
    TwoTailed196,
    /// One-tailed α = 0.05, z = 1.644854.
    #[serde(rename = "one_tailed_1645")]
    OneTailed1645,
}

impl NfsVariant {
    pub fn critical_value(self) -> f64 {
        match self {
            NfsVariant::TwoTailed196 => 1.959964,
            NfsVariant::OneTailed1645 => 1.644854,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NfsVariant::TwoTailed196 => "two_tailed_196",
            NfsVariant::OneTailed1645 => "one_tailed_1645",
        }
    }
}

impl fmt::Display for NfsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NfsVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "two_tailed_196" | "two_tailed" => Ok(NfsVariant::TwoTailed196),
            "one_tailed_1645" | "one_tailed" => Ok(NfsVariant::OneTailed1645),
            other => Err(format!(
                "unknown fail-safe N variant `{other}` (expected two_tailed_196 or one_tailed_1645)"
            )),
        }
    }
}

/// Sum of per-study standardized effects `zᵢ / seᵢ`.
fn stouffer_sum(effects: &[NormalizedEffect]) -> f64 {
    effects.iter().map(|e| e.z / e.se_z).sum()
}

/// Rosenthal's fail-safe N: the number of null studies needed to bring the
/// combined Stouffer test to the critical value, rounded up and clamped at 0.
pub fn failsafe_n(effects: &[NormalizedEffect], variant: NfsVariant) -> Result<u64, BiasError> {
    let k = effects.len();
    if k < 2 {
        return Err(BiasError::InsufficientData {
            test: "fail-safe N",
            needed: 2,
            got: k,
        });
    }
    let s = stouffer_sum(effects);
    let raw = s * s / variant.critical_value().powi(2) - k as f64;
    Ok(if raw > 0.0 { raw.ceil() as u64 } else { 0 })
}

/// `5k + 10`.
pub fn nfs_threshold(k: usize) -> u64 {
    5 * k as u64 + 10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EggerResult {
    pub intercept: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Signed `intercept / se`.
    pub t: f64,
    pub df: usize,
    /// Two-tailed Student t probability.
    pub p: f64,
    pub slope: f64,
}

/// Unweighted OLS of `zᵢ / seᵢ` on `1 / seᵢ`; tests the intercept against 0.
pub fn egger_test(effects: &[NormalizedEffect]) -> Result<EggerResult, BiasError> {
    let k = effects.len();
    if k < 3 {
        return Err(BiasError::InsufficientData {
            test: "Egger's test",
            needed: 3,
            got: k,
        });
    }
    let xs: Vec<f64> = effects.iter().map(|e| 1.0 / e.se_z).collect();
    let ys: Vec<f64> = effects.iter().map(|e| e.z / e.se_z).collect();

    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if hi - lo <= 1e-12 * hi.abs() {
        return Err(BiasError::SingularDesign);
    }

    let kf = k as f64;
    let x_bar = xs.iter().sum::<f64>() / kf;
    let y_bar = ys.iter().sum::<f64>() / kf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - x_bar;
        let dy = y - y_bar;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let rss = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>();

    let df = k - 2;
    let dff = df as f64;
    let scale = ys.iter().map(|y| y * y).sum::<f64>().max(syy);
    let exact_fit = rss <= 1e-26 * scale.max(f64::MIN_POSITIVE);
    let se = (rss / dff * (1.0 / kf + x_bar * x_bar / sxx)).sqrt();

    let (t, p) = if exact_fit {
        if intercept.abs() <= 1e-9 * scale.sqrt().max(1.0) {
            (0.0, 1.0)
        } else {
            (intercept.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = intercept / se;
        (t, student_t_two_tailed_p(t, dff))
    };
    let half = student_t_quantile(0.975, dff) * se;

    Ok(EggerResult {
        intercept,
        se,
        ci_low: intercept - half,
        ci_high: intercept + half,
        t,
        df,
        p,
        slope,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NoBiasIndicated,
    BiasIndicated,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::NoBiasIndicated => "no_bias_indicated",
            Verdict::BiasIndicated => "bias_indicated",
        }
    }
}

/// No bias is indicated only when both the fail-safe N clears `5k + 10` and
/// Egger's intercept is non-significant.
pub fn verdict(nfs: u64, k: usize, egger_p: f64) -> Verdict {
    if nfs >= nfs_threshold(k) && egger_p > 0.05 {
        Verdict::NoBiasIndicated
    } else {
        Verdict::BiasIndicated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDiagnostics {
    pub factor: Option<Factor>,
    pub k: usize,
    pub nfs: u64,
    pub nfs_threshold: u64,
    pub nfs_variant: NfsVariant,
    pub egger: EggerResult,
    pub verdict: Verdict,
}

pub fn bias_diagnostics(
    effects: &[NormalizedEffect],
    variant: NfsVariant,
) -> Result<BiasDiagnostics, BiasError> {
    let k = effects.len();
    let nfs = failsafe_n(effects, variant)?;
    let egger = egger_test(effects)?;
    Ok(BiasDiagnostics {
        factor: effects.first().and_then(|e| e.factor),
        k,
        nfs,
        nfs_threshold: nfs_threshold(k),
        nfs_variant: variant,
        verdict: verdict(nfs, k, egger.p),
        egger,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelPoint {
    pub study_id: String,
    pub z: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Funnel {
    pub points: Vec<FunnelPoint>,
    /// x-position of the vertical reference line.
    pub pooled_z: f64,
}

pub fn funnel_points(
    effects: &[NormalizedEffect],
    pooled: &PooledEstimate,
) -> Result<Funnel, BiasError> {
    if effects.is_empty() {
        return Err(BiasError::Empty);
    }
    Ok(Funnel {
        points: effects
            .iter()
            .map(|e| FunnelPoint {
                study_id: e.study_id.clone(),
                z: e.z,
                se: e.se_z,
            })
            .collect(),
        pooled_z: pooled.z_pooled,
    })
}
