//! Inverse-variance pooling on the Fisher-z scale.
//!
//! Fixed-effect weights are `1 / var_z`. The random-effects model adds the
//! DerSimonian-Laird between-study variance τ² to every study variance before
//! weighting. Intervals are `z ± 1.96·se`, back-transformed with `tanh`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Factor;
use crate::distributions::{chi_square_upper, normal_two_tailed_p, Z_975};
use crate::transforms::{z_to_r, NormalizedEffect};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolingError {
    #[error("no effects to pool")]
    Empty,
    #[error("heterogeneity needs at least 2 effects, got {0}")]
    Degenerate(usize),
    #[error("standard error must be positive, got {0}")]
    NonPositiveSe(f64),
    #[error("tau-squared must be finite and non-negative, got {0}")]
    InvalidTau2(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Fixed,
    Random,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::Fixed => "fixed",
            Model::Random => "random",
        }
    }
}

/// Significance level of the Q test that switches to the random-effects model.
pub const HETEROGENEITY_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityStats {
    pub q: f64,
    pub df: usize,
    pub p_q: f64,
    /// Percent, `0 ≤ I² < 100`.
    pub i2: f64,
    /// Between-study variance on the z scale.
    pub tau2: f64,
}

impl HeterogeneityStats {
    fn trivial() -> Self {
        HeterogeneityStats {
            q: 0.0,
            df: 0,
            p_q: 1.0,
            i2: 0.0,
            tau2: 0.0,
        }
    }
}

/// Weighted mean on the z scale with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMean {
    pub z: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub factor: Option<Factor>,
    pub model: Model,
    pub k: usize,
    pub n_total: u64,
    pub z_pooled: f64,
    pub se: f64,
    pub r_pooled: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z_stat: f64,
    pub p: f64,
    /// τ² that entered the weights (0 under the fixed model).
    pub tau2_used: f64,
    pub het: HeterogeneityStats,
}

fn weighted_mean(effects: &[NormalizedEffect], tau2: f64) -> Result<WeightedMean, PoolingError> {
    if effects.is_empty() {
        return Err(PoolingError::Empty);
    }
    let mut sw = 0.0;
    let mut swz = 0.0;
    for e in effects {
        let w = 1.0 / (e.var_z + tau2);
        sw += w;
        swz += w * e.z;
    }
    Ok(WeightedMean {
        z: swz / sw,
        se: (1.0 / sw).sqrt(),
    })
}

/// Inverse-variance weighted mean with `w = 1 / var_z`.
pub fn fixed_effect_pool(effects: &[NormalizedEffect]) -> Result<WeightedMean, PoolingError> {
    weighted_mean(effects, 0.0)
}

/// Q, I² and the DerSimonian-Laird τ². Requires `k ≥ 2`.
pub fn heterogeneity(effects: &[NormalizedEffect]) -> Result<HeterogeneityStats, PoolingError> {
    match effects.len() {
        0 => Err(PoolingError::Empty),
        1 => Err(PoolingError::Degenerate(1)),
        _ => Ok(heterogeneity_unchecked(effects)),
    }
}

/// Like [`heterogeneity`], but a single effect yields `Q = 0`, `τ² = 0`.
pub fn heterogeneity_permissive(
    effects: &[NormalizedEffect],
) -> Result<HeterogeneityStats, PoolingError> {
    match effects.len() {
        0 => Err(PoolingError::Empty),
        1 => Ok(HeterogeneityStats::trivial()),
        _ => Ok(heterogeneity_unchecked(effects)),
    }
}

fn heterogeneity_unchecked(effects: &[NormalizedEffect]) -> HeterogeneityStats {
    let fixed = weighted_mean(effects, 0.0).expect("non-empty");
    let mut q = 0.0;
    let mut sw = 0.0;
    let mut sw2 = 0.0;
    for e in effects {
        let w = 1.0 / e.var_z;
        q += w * (e.z - fixed.z).powi(2);
        sw += w;
        sw2 += w * w;
    }
    let df = effects.len() - 1;
    let dff = df as f64;
    let c = sw - sw2 / sw;
    let tau2 = if c > 0.0 {
        ((q - dff) / c).max(0.0)
    } else {
        0.0
    };
    let i2 = if q > 0.0 {
        ((q - dff) / q).max(0.0) * 100.0
    } else {
        0.0
    };
    HeterogeneityStats {
        q,
        df,
        p_q: chi_square_upper(q, dff),
        i2,
        tau2,
    }
}

/// `z / se` and its two-tailed normal p-value.
pub fn significance_test(z_pooled: f64, se: f64) -> Result<(f64, f64), PoolingError> {
    if se.is_nan() || se <= 0.0 {
        return Err(PoolingError::NonPositiveSe(se));
    }
    let z_stat = z_pooled / se;
    Ok((z_stat, normal_two_tailed_p(z_stat)))
}

/// Pools with an explicit τ² and labels the result with `model`.
pub fn pool_with_tau2(
    effects: &[NormalizedEffect],
    tau2: f64,
    model: Model,
) -> Result<PooledEstimate, PoolingError> {
    if !(tau2 >= 0.0 && tau2.is_finite()) {
        return Err(PoolingError::InvalidTau2(tau2));
    }
    let het = heterogeneity_permissive(effects)?;
    let mean = weighted_mean(effects, tau2)?;
    let (z_stat, p) = significance_test(mean.z, mean.se)?;
    Ok(PooledEstimate {
        factor: common_factor(effects),
        model,
        k: effects.len(),
        n_total: effects.iter().map(|e| u64::from(e.n)).sum(),
        z_pooled: mean.z,
        se: mean.se,
        r_pooled: z_to_r(mean.z),
        ci_low: z_to_r(mean.z - Z_975 * mean.se),
        ci_high: z_to_r(mean.z + Z_975 * mean.se),
        z_stat,
        p,
        tau2_used: tau2,
        het,
    })
}

fn common_factor(effects: &[NormalizedEffect]) -> Option<Factor> {
    let first = effects.first()?.factor?;
    effects
        .iter()
        .all(|e| e.factor == Some(first))
        .then_some(first)
}

pub fn fixed_effect_estimate(effects: &[NormalizedEffect]) -> Result<PooledEstimate, PoolingError> {
    pool_with_tau2(effects, 0.0, Model::Fixed)
}

/// DerSimonian-Laird random-effects pooling. A single effect falls back to
/// the fixed model.
pub fn random_effects_pool(effects: &[NormalizedEffect]) -> Result<PooledEstimate, PoolingError> {
    if effects.len() == 1 {
        log::warn!(
            "random-effects pooling of a single effect ({}); using fixed-effect passthrough",
            effects[0].study_id
        );
        return fixed_effect_estimate(effects);
    }
    let het = heterogeneity_permissive(effects)?;
    pool_with_tau2(effects, het.tau2, Model::Random)
}

pub fn pool(effects: &[NormalizedEffect], model: Model) -> Result<PooledEstimate, PoolingError> {
    match model {
        Model::Fixed => fixed_effect_estimate(effects),
        Model::Random => random_effects_pool(effects),
    }
}

/// Random effects when the Q test rejects homogeneity at 0.05, else fixed.
pub fn select_model(het: &HeterogeneityStats) -> Model {
    if het.df > 0 && het.p_q < HETEROGENEITY_ALPHA {
        Model::Random
    } else {
        Model::Fixed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eff(r: f64, n: u32) -> NormalizedEffect {
        NormalizedEffect::from_r("s", r, n).unwrap()
    }

    fn effz(z: f64, n: u32) -> NormalizedEffect {
        NormalizedEffect::from_z("s", z, n).unwrap()
    }

    #[test]
    fn single_effect_identity() {
        let m = fixed_effect_pool(&[effz(0.3, 103)]).unwrap();
        assert!((m.z - 0.3).abs() < 1e-15);
        assert!((m.se - 0.1).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair() {
        let m = fixed_effect_pool(&[effz(0.2, 50), effz(0.4, 50)]).unwrap();
        assert!((m.z - 0.3).abs() < 1e-15);
    }

    #[test]
    fn hand_weighted_mean() {
        // w = 100 and 200; z = atanh(0.3), atanh(0.5)
        let z1 = 0.309_519_604_203_111_7;
        let z2 = 0.549_306_144_334_054_8;
        let expected = (100.0 * z1 + 200.0 * z2) / 300.0;
        let m = fixed_effect_pool(&[eff(0.3, 103), eff(0.5, 203)]).unwrap();
        assert!((m.z - expected).abs() < 1e-12);
        assert!((m.se - (1.0f64 / 300.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(fixed_effect_pool(&[]), Err(PoolingError::Empty));
        assert_eq!(random_effects_pool(&[]), Err(PoolingError::Empty));
        assert_eq!(heterogeneity(&[effz(0.1, 10)]), Err(PoolingError::Degenerate(1)));
    }

    #[test]
    fn homogeneous_set() {
        let effects = vec![effz(0.25, 80); 4];
        let h = heterogeneity(&effects).unwrap();
        assert_eq!(h.q, 0.0);
        assert_eq!(h.i2, 0.0);
        assert_eq!(h.tau2, 0.0);
        assert_eq!(h.df, 3);
        assert_eq!(h.p_q, 1.0);
    }

    #[test]
    fn dl_hand_example() {
        // z = 0, 1 with n = 4 (var 1): Q = 0.5, C = 1, tau² = 0
        let h = heterogeneity(&[effz(0.0, 4), effz(1.0, 4)]).unwrap();
        assert!((h.q - 0.5).abs() < 1e-15);
        assert_eq!(h.tau2, 0.0);
        // z = 0, 3: Q = 4.5, C = 1, tau² = 3.5, I² = 3.5/4.5
        let h = heterogeneity(&[effz(0.0, 4), effz(3.0, 4)]).unwrap();
        assert!((h.q - 4.5).abs() < 1e-14);
        assert!((h.tau2 - 3.5).abs() < 1e-14);
        assert!((h.i2 - 350.0 / 4.5).abs() < 1e-12);
    }

    #[test]
    fn significance_examples() {
        assert_eq!(significance_test(0.0, 0.3).unwrap(), (0.0, 1.0));
        let (z, p) = significance_test(0.196, 0.1).unwrap();
        assert!((z - 1.96).abs() < 1e-12);
        assert!((p - 0.05).abs() < 1e-4);
        assert!(significance_test(0.1, 0.0).is_err());
        assert!(significance_test(0.1, -1.0).is_err());
    }

    #[test]
    fn single_effect_random_falls_back() {
        let p = random_effects_pool(&[effz(0.3, 103)]).unwrap();
        assert_eq!(p.model, Model::Fixed);
        assert!((p.z_pooled - 0.3).abs() < 1e-15);
    }

    #[test]
    fn random_ci_can_widen_with_larger_samples() {
        // τ² is 0 at the original sizes and positive after scaling n by 10
        let base = [eff(0.0, 4), eff(0.392_776_764_972_497_3, 26)];
        let big = [eff(0.0, 40), eff(0.392_776_764_972_497_3, 260)];
        let a = random_effects_pool(&base).unwrap();
        let b = random_effects_pool(&big).unwrap();
        assert_eq!(a.tau2_used, 0.0);
        assert!(b.tau2_used > 0.0);
        assert!(b.se > a.se);
    }

    #[test]
    fn model_rule() {
        let het = heterogeneity(&[effz(0.0, 400), effz(0.5, 400)]).unwrap();
        assert_eq!(select_model(&het), Model::Random);
        let het = heterogeneity(&[effz(0.1, 20), effz(0.11, 20)]).unwrap();
        assert_eq!(select_model(&het), Model::Fixed);
    }

    fn effects_strategy() -> impl Strategy<Value = Vec<NormalizedEffect>> {
        prop::collection::vec((-0.95f64..0.95, 4u32..5000), 2..25).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (r, n))| NormalizedEffect::from_r(format!("s{i}"), r, n).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn pooled_within_extremes(effects in effects_strategy()) {
            let lo = effects.iter().map(|e| e.z).fold(f64::INFINITY, f64::min);
            let hi = effects.iter().map(|e| e.z).fold(f64::NEG_INFINITY, f64::max);
            for p in [fixed_effect_estimate(&effects).unwrap(), random_effects_pool(&effects).unwrap()] {
                prop_assert!(p.z_pooled >= lo - 1e-12 && p.z_pooled <= hi + 1e-12);
                prop_assert!(p.ci_low < p.r_pooled && p.r_pooled < p.ci_high);
                prop_assert!((0.0..=1.0).contains(&p.p));
                prop_assert!(p.z_stat.signum() == p.r_pooled.signum() || p.r_pooled == 0.0);
            }
        }

        #[test]
        fn permutation_invariant(effects in effects_strategy(), seed in any::<u64>()) {
            let mut shuffled = effects.clone();
            let len = shuffled.len();
            let mut s = seed;
            for i in (1..len).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let a = random_effects_pool(&effects).unwrap();
            let b = random_effects_pool(&shuffled).unwrap();
            prop_assert!((a.z_pooled - b.z_pooled).abs() < 1e-12);
            prop_assert!((a.se - b.se).abs() < 1e-12);
            prop_assert!((a.het.q - b.het.q).abs() < 1e-9 * a.het.q.max(1.0));
            prop_assert!((a.het.tau2 - b.het.tau2).abs() < 1e-12);
        }

        #[test]
        fn random_ci_at_least_fixed(effects in effects_strategy()) {
            let f = fixed_effect_pool(&effects).unwrap();
            let r = random_effects_pool(&effects).unwrap();
            prop_assert!(r.se >= f.se - 1e-15);
        }

        #[test]
        fn zero_tau2_collapses_to_fixed(effects in effects_strategy()) {
            let f = fixed_effect_pool(&effects).unwrap();
            let r = pool_with_tau2(&effects, 0.0, Model::Random).unwrap();
            prop_assert_eq!(f.z, r.z_pooled);
            prop_assert_eq!(f.se, r.se);
        }

        #[test]
        fn i2_bounds_and_closed_form(effects in effects_strategy()) {
            let h = heterogeneity(&effects).unwrap();
            prop_assert!(h.q >= 0.0 && h.tau2 >= 0.0);
            prop_assert!(h.i2 >= 0.0 && h.i2 < 100.0);
            let closed = if h.q > 0.0 { ((h.q - h.df as f64) / h.q).max(0.0) * 100.0 } else { 0.0 };
            prop_assert!((h.i2 - closed).abs() < 1e-12);
        }

        #[test]
        fn larger_samples_narrow_ci(v in prop::collection::vec((-0.9f64..0.9, 4u32..2000), 2..12)) {
            let base: Vec<_> = v.iter().map(|&(r, n)| eff(r, n)).collect();
            let big: Vec<_> = v.iter().map(|&(r, n)| eff(r, n * 10)).collect();
            let a = fixed_effect_estimate(&base).unwrap();
            let b = fixed_effect_estimate(&big).unwrap();
            prop_assert!(b.ci_high - b.ci_low < a.ci_high - a.ci_low);
            if v.iter().all(|&(r, _)| r > 0.0) || v.iter().all(|&(r, _)| r < 0.0) {
                let a = random_effects_pool(&base).unwrap();
                let b = random_effects_pool(&big).unwrap();
                prop_assert_eq!(a.z_pooled.signum(), b.z_pooled.signum());
            }
        }
    }
}
