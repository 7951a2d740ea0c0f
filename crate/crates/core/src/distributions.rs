//! Thin wrappers over the reference distributions used for p-values and
//! critical values.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

/// Two-sided 95% standard-normal critical value used for every confidence
/// interval on the Fisher-z scale.
pub const Z_975: f64 = 1.96;

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

/// Φ(x).
pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Two-tailed standard-normal p-value for a z statistic.
pub fn normal_two_tailed_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    (2.0 * standard_normal().sf(z.abs())).min(1.0)
}

/// Upper-tail chi-square probability P(X ≥ q) with `df` degrees of freedom.
pub fn chi_square_upper(q: f64, df: f64) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).expect("df > 0").sf(q)
}

/// Two-tailed Student t p-value.
pub fn student_t_two_tailed_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Student t quantile.
pub fn student_t_quantile(p: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("df > 0")
        .inverse_cdf(p)
}
