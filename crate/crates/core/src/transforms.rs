//! Conversions between regression beta, correlation and Fisher z, and the
//! sampling variance of z.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Factor, RegionClass, StudyEffect};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("beta {beta} converts to r = {r}, outside (-1, 1)")]
    BetaOutOfRange { beta: f64, r: f64 },
    #[error("correlation {0} is outside (-1, 1)")]
    CorrelationOutOfRange(f64),
    #[error("sample size {0} is too small; Fisher-z variance needs n > 3")]
    DegenerateSample(u32),
}

/// Additive adjustment applied to non-negative standardized betas.
pub const BETA_OFFSET: f64 = 0.05;

/// Converts a standardized regression coefficient to an approximate
/// correlation: `r = β + 0.05` for `β ≥ 0`, `r = β` otherwise.
pub fn beta_to_r(beta: f64) -> Result<f64, TransformError> {
    let r = if beta >= 0.0 { beta + BETA_OFFSET } else { beta };
    if r > -1.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(TransformError::BetaOutOfRange { beta, r })
    }
}

pub fn r_to_z(r: f64) -> Result<f64, TransformError> {
    if r > -1.0 && r < 1.0 {
        Ok(r.abs().atanh().copysign(r))
    } else {
        Err(TransformError::CorrelationOutOfRange(r))
    }
}

pub fn z_to_r(z: f64) -> f64 {
    z.tanh()
}

/// `1 / (n - 3)`.
pub fn variance_of_z(n: u32) -> Result<f64, TransformError> {
    if n <= 3 {
        return Err(TransformError::DegenerateSample(n));
    }
    Ok(1.0 / f64::from(n - 3))
}

/// Conventional strength bands for |r|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    Negligible,
    Weak,
    Moderate,
    Strong,
}

impl Magnitude {
    pub fn as_str(self) -> &'static str {
        match self {
            Magnitude::Negligible => "negligible",
            Magnitude::Weak => "weak",
            Magnitude::Moderate => "moderate",
            Magnitude::Strong => "strong",
        }
    }
}

/// Bands are half-open: `[0, 0.1)`, `[0.1, 0.3)`, `[0.3, 0.5)`, `[0.5, 1)`.
pub fn classify_magnitude(r: f64) -> Magnitude {
    let a = r.abs();
    if a < 0.1 {
        Magnitude::Negligible
    } else if a < 0.3 {
        Magnitude::Weak
    } else if a < 0.5 {
        Magnitude::Moderate
    } else {
        Magnitude::Strong
    }
}

/// An effect on the correlation and Fisher-z scales, ready for pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedEffect {
    pub study_id: String,
    pub factor: Option<Factor>,
    pub r: f64,
    pub z: f64,
    pub var_z: f64,
    pub se_z: f64,
    pub n: u32,
    pub region_class: Option<RegionClass>,
    pub male_pct: Option<f64>,
}

impl NormalizedEffect {
    /// Builds an effect from a correlation and sample size, without metadata.
    pub fn from_r(study_id: impl Into<String>, r: f64, n: u32) -> Result<Self, TransformError> {
        let z = r_to_z(r)?;
        let var_z = variance_of_z(n)?;
        Ok(NormalizedEffect {
            study_id: study_id.into(),
            factor: None,
            r,
            z,
            var_z,
            se_z: var_z.sqrt(),
            n,
            region_class: None,
            male_pct: None,
        })
    }

    /// Builds an effect directly from a Fisher z value.
    pub fn from_z(study_id: impl Into<String>, z: f64, n: u32) -> Result<Self, TransformError> {
        let var_z = variance_of_z(n)?;
        Ok(NormalizedEffect {
            study_id: study_id.into(),
            factor: None,
            r: z_to_r(z),
            z,
            var_z,
            se_z: var_z.sqrt(),
            n,
            region_class: None,
            male_pct: None,
        })
    }

    pub fn with_region(mut self, class: RegionClass) -> Self {
        self.region_class = Some(class);
        self
    }

    pub fn with_male_pct(mut self, pct: f64) -> Self {
        self.male_pct = Some(pct);
        self
    }
}

/// Converts a coded effect, carrying its metadata along.
pub fn normalize(effect: &StudyEffect) -> Result<NormalizedEffect, TransformError> {
    let r = effect.correlation()?;
    let mut out = NormalizedEffect::from_r(effect.study_id.clone(), r, effect.n)?;
    out.factor = effect.factor();
    out.region_class = Some(effect.region_class);
    out.male_pct = Some(effect.male_pct);
    Ok(out)
}

pub fn normalize_all(effects: &[StudyEffect]) -> Result<Vec<NormalizedEffect>, TransformError> {
    effects.iter().map(normalize).collect()
}
