//! Moderator analyses: categorical subgroups with a Q-between test and
//! mixed-effects meta-regression on a continuous covariate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Factor;
use crate::distributions::{chi_square_upper, normal_two_tailed_p, Z_975};
use crate::pooling::{self, PooledEstimate, PoolingError};
use crate::transforms::NormalizedEffect;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModeratorError {
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error("subgroup analysis needs at least 2 non-empty subgroups, found {found}")]
    Degenerate { found: usize },
    #[error("effect {study_id} has no value for the moderator")]
    MissingModerator { study_id: String },
    #[error("meta-regression needs at least {needed} effects, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("meta-regression design is singular (moderator is constant)")]
    SingularDesign,
    #[error("{effects} effects but {values} moderator values")]
    LengthMismatch { effects: usize, values: usize },
}

/// How τ² is handled inside subgroups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupTau {
    /// Each subgroup gets its own DerSimonian-Laird τ².
    #[default]
    PerGroup,
    /// τ² = 0 everywhere (fixed-effect weights).
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEntry {
    pub label: String,
    pub estimate: PooledEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub factor: Option<Factor>,
    pub moderator: String,
    /// Sorted by label.
    pub groups: Vec<SubgroupEntry>,
    pub q_between: f64,
    pub df_between: usize,
    pub p_between: f64,
}

/// Pools each subgroup and tests the spread of subgroup means with
/// `Q_B = Σ W_g (z̄_g − z̄_w)²`, `W_g = 1 / se_g²`.
pub fn subgroup_analysis<F>(
    effects: &[NormalizedEffect],
    moderator: &str,
    key: F,
    tau: SubgroupTau,
) -> Result<SubgroupResult, ModeratorError>
where
    F: Fn(&NormalizedEffect) -> Option<String>,
{
    let mut buckets: BTreeMap<String, Vec<NormalizedEffect>> = BTreeMap::new();
    for e in effects {
        let label = key(e).ok_or_else(|| ModeratorError::MissingModerator {
            study_id: e.study_id.clone(),
        })?;
        buckets.entry(label).or_default().push(e.clone());
    }
    if buckets.len() < 2 {
        return Err(ModeratorError::Degenerate {
            found: buckets.len(),
        });
    }

    let mut groups = Vec::with_capacity(buckets.len());
    for (label, members) in buckets {
        let estimate = match tau {
            SubgroupTau::PerGroup if members.len() > 1 => pooling::random_effects_pool(&members)?,
            _ => pooling::fixed_effect_estimate(&members)?,
        };
        groups.push(SubgroupEntry { label, estimate });
    }

    let (sw, swz) = groups.iter().fold((0.0, 0.0), |(sw, swz), g| {
        let w = 1.0 / g.estimate.se.powi(2);
        (sw + w, swz + w * g.estimate.z_pooled)
    });
    let z_w = swz / sw;
    let q_between: f64 = groups
        .iter()
        .map(|g| (g.estimate.z_pooled - z_w).powi(2) / g.estimate.se.powi(2))
        .sum();
    let df_between = groups.len() - 1;

    Ok(SubgroupResult {
        factor: effects.first().and_then(|e| e.factor),
        moderator: moderator.to_owned(),
        p_between: chi_square_upper(q_between, df_between as f64),
        groups,
        q_between,
        df_between,
    })
}

/// Subgroups by developed / developing region.
pub fn subgroup_by_region(
    effects: &[NormalizedEffect],
    tau: SubgroupTau,
) -> Result<SubgroupResult, ModeratorError> {
    subgroup_analysis(
        effects,
        "region_class",
        |e| e.region_class.map(|c| c.as_str().to_owned()),
        tau,
    )
}

/// One estimated regression coefficient with normal-theory inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z_stat: f64,
    pub p: f64,
}

impl Coefficient {
    fn new(estimate: f64, se: f64) -> Self {
        let z_stat = if se > 0.0 { estimate / se } else { 0.0 };
        Coefficient {
            estimate,
            se,
            ci_low: estimate - Z_975 * se,
            ci_high: estimate + Z_975 * se,
            z_stat,
            p: normal_two_tailed_p(z_stat),
        }
    }
}

/// Result of a weighted least-squares fit with method-of-moments τ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedFit {
    pub coefficients: Vec<Coefficient>,
    pub tau2: f64,
    /// Residual Q under fixed-effect weights.
    pub q_residual: f64,
    pub df_residual: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRegressionResult {
    pub factor: Option<Factor>,
    pub moderator: String,
    pub k: usize,
    pub intercept: Coefficient,
    pub slope: Coefficient,
    pub tau2_residual: f64,
    pub q_residual: f64,
    pub df_residual: usize,
}

/// Inverts a small symmetric positive-definite matrix by Gauss-Jordan with
/// partial pivoting. Returns `None` when a pivot vanishes.
fn invert(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let p = a.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut inv: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..p {
        let pivot_row = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot_row][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        let pivot = a[col][col];
        for j in 0..p {
            a[col][j] /= pivot;
            inv[col][j] /= pivot;
        }
        for row in 0..p {
            if row != col {
                let f = a[row][col];
                for j in 0..p {
                    a[row][j] -= f * a[col][j];
                    inv[row][j] -= f * inv[col][j];
                }
            }
        }
    }
    Some(inv)
}

struct WlsSolution {
    beta: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

fn wls(design: &[Vec<f64>], y: &[f64], w: &[f64]) -> Option<WlsSolution> {
    let p = design[0].len();
    let mut xtwx = vec![vec![0.0; p]; p];
    let mut xtwy = vec![0.0; p];
    for ((row, &yi), &wi) in design.iter().zip(y).zip(w) {
        for a in 0..p {
            xtwy[a] += wi * row[a] * yi;
            for b in 0..p {
                xtwx[a][b] += wi * row[a] * row[b];
            }
        }
    }
    let cov = invert(xtwx)?;
    let beta = (0..p)
        .map(|a| (0..p).map(|b| cov[a][b] * xtwy[b]).sum())
        .collect();
    Some(WlsSolution { beta, cov })
}

/// Mixed-effects WLS of Fisher z on `design` (one row per effect, including
/// the intercept column). τ² is the method-of-moments estimate
/// `(Q_E − (k − p)) / tr(P)` with `P = W − W X (XᵀWX)⁻¹ XᵀW`.
pub fn mixed_effects_fit(
    effects: &[NormalizedEffect],
    design: &[Vec<f64>],
) -> Result<MixedFit, ModeratorError> {
    let k = effects.len();
    if design.len() != k {
        return Err(ModeratorError::LengthMismatch {
            effects: k,
            values: design.len(),
        });
    }
    let p = design.first().map_or(1, Vec::len);
    if k <= p {
        return Err(ModeratorError::InsufficientData {
            needed: p + 1,
            got: k,
        });
    }
    let y: Vec<f64> = effects.iter().map(|e| e.z).collect();
    let w: Vec<f64> = effects.iter().map(|e| 1.0 / e.var_z).collect();

    let fe = wls(design, &y, &w).ok_or(ModeratorError::SingularDesign)?;
    let q_residual: f64 = design
        .iter()
        .zip(&y)
        .zip(&w)
        .map(|((row, yi), wi)| {
            let fit: f64 = row.iter().zip(&fe.beta).map(|(x, b)| x * b).sum();
            wi * (yi - fit).powi(2)
        })
        .sum();

    // tr(P) = Σw − tr((XᵀWX)⁻¹ XᵀW²X)
    let mut xtw2x = vec![vec![0.0; p]; p];
    for (row, &wi) in design.iter().zip(&w) {
        for a in 0..p {
            for b in 0..p {
                xtw2x[a][b] += wi * wi * row[a] * row[b];
            }
        }
    }
    let trace_correction: f64 = (0..p)
        .map(|a| (0..p).map(|b| fe.cov[a][b] * xtw2x[b][a]).sum::<f64>())
        .sum();
    let trace_p = w.iter().sum::<f64>() - trace_correction;
    let df_residual = k - p;
    let tau2 = if trace_p > 0.0 {
        ((q_residual - df_residual as f64) / trace_p).max(0.0)
    } else {
        0.0
    };

    let w_star: Vec<f64> = effects.iter().map(|e| 1.0 / (e.var_z + tau2)).collect();
    let re = wls(design, &y, &w_star).ok_or(ModeratorError::SingularDesign)?;
    let coefficients = (0..p)
        .map(|j| Coefficient::new(re.beta[j], re.cov[j][j].sqrt()))
        .collect();

    Ok(MixedFit {
        coefficients,
        tau2,
        q_residual,
        df_residual,
    })
}

/// Intercept-only mixed model; equals DerSimonian-Laird random-effects pooling.
pub fn intercept_only(effects: &[NormalizedEffect]) -> Result<MixedFit, ModeratorError> {
    if effects.is_empty() {
        return Err(PoolingError::Empty.into());
    }
    let design = vec![vec![1.0]; effects.len()];
    mixed_effects_fit(effects, &design)
}

/// Regresses Fisher z on one continuous moderator.
pub fn meta_regression(
    effects: &[NormalizedEffect],
    moderator_name: &str,
    moderator: &[f64],
) -> Result<MetaRegressionResult, ModeratorError> {
    let k = effects.len();
    if moderator.len() != k {
        return Err(ModeratorError::LengthMismatch {
            effects: k,
            values: moderator.len(),
        });
    }
    if k < 3 {
        return Err(ModeratorError::InsufficientData { needed: 3, got: k });
    }
    let (lo, hi) = moderator
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if hi - lo <= 1e-12 * hi.abs().max(lo.abs()) {
        return Err(ModeratorError::SingularDesign);
    }
    let design: Vec<Vec<f64>> = moderator.iter().map(|&x| vec![1.0, x]).collect();
    let fit = mixed_effects_fit(effects, &design)?;
    Ok(MetaRegressionResult {
        factor: effects.first().and_then(|e| e.factor),
        moderator: moderator_name.to_owned(),
        k,
        intercept: fit.coefficients[0],
        slope: fit.coefficients[1],
        tau2_residual: fit.tau2,
        q_residual: fit.q_residual,
        df_residual: fit.df_residual,
    })
}

/// Meta-regression on the percentage of male participants.
pub fn meta_regression_male_pct(
    effects: &[NormalizedEffect],
) -> Result<MetaRegressionResult, ModeratorError> {
    let x = effects
        .iter()
        .map(|e| {
            e.male_pct.ok_or_else(|| ModeratorError::MissingModerator {
                study_id: e.study_id.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    meta_regression(effects, "male_pct", &x)
}
