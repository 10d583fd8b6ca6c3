//! Continuous Bernoulli distribution on `[0, 1]` with density
//! `C(λ) λ^x (1-λ)^(1-x)`.

use rand::Rng;

use crate::error::{NfsError, Result};
use crate::scalar::Scalar;

/// Below this `|1 - 2λ|` the normalizer and inverse CDF switch to series
/// expansions around the removable singularity at `λ = 0.5`.
const SINGULAR_BAND: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousBernoulli<T: Scalar> {
    lambda: T,
}

impl<T: Scalar> ContinuousBernoulli<T> {
    pub fn new(lambda: T) -> Result<Self> {
        if !(lambda > T::zero() && lambda < T::one()) {
            return Err(NfsError::Domain {
                op: "continuous_bernoulli",
                value: lambda.to_f64_lossy(),
                domain: "(0, 1)",
            });
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    /// `C(λ) = 2 atanh(1-2λ) / (1-2λ)`, and exactly 2 at `λ = 0.5`.
    pub fn normalizer(&self) -> T {
        let t = T::one() - T::lit(2.0) * self.lambda;
        if t == T::zero() {
            return T::lit(2.0);
        }
        if t.abs() < T::lit(SINGULAR_BAND) {
            // atanh(t)/t = 1 + t^2/3 + O(t^4)
            return T::lit(2.0) * (T::one() + t * t / T::lit(3.0));
        }
        T::lit(2.0) * t.atanh() / t
    }

    pub fn log_density(&self, x: T) -> Result<T> {
        check_unit("cb_log_density", x)?;
        let l = self.lambda;
        Ok(self.normalizer().ln() + x * l.ln() + (T::one() - x) * (T::one() - l).ln())
    }

    pub fn cdf(&self, x: T) -> Result<T> {
        check_unit("cb_cdf", x)?;
        let l = self.lambda;
        let t = T::lit(2.0) * l - T::one();
        if t.abs() < T::lit(SINGULAR_BAND) {
            return Ok(x - t * x * (T::one() - x));
        }
        Ok((l.powf(x) * (T::one() - l).powf(T::one() - x) + l - T::one()) / t)
    }

    /// Inverse-CDF transform of a uniform draw `u ∈ [0, 1)`.
    pub fn quantile(&self, u: T) -> T {
        let l = self.lambda;
        let t = T::lit(2.0) * l - T::one();
        let x = if t.abs() < T::lit(SINGULAR_BAND) {
            u + t * u * (T::one() - u)
        } else {
            (t * u / (T::one() - l)).ln_1p() / (l / (T::one() - l)).ln()
        };
        x.max(T::zero()).min(T::one())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let u: f64 = rng.random();
        self.quantile(T::lit(u))
    }
}

fn check_unit<T: Scalar>(op: &'static str, x: T) -> Result<()> {
    if x >= T::zero() && x <= T::one() {
        Ok(())
    } else {
        Err(NfsError::Domain {
            op,
            value: x.to_f64_lossy(),
            domain: "[0, 1]",
        })
    }
}

pub fn cb_normalizer<T: Scalar>(lambda: T) -> Result<T> {
    Ok(ContinuousBernoulli::new(lambda)?.normalizer())
}

pub fn cb_log_density<T: Scalar>(x: T, lambda: T) -> Result<T> {
    ContinuousBernoulli::new(lambda)?.log_density(x)
}

pub fn cb_sample<T: Scalar, R: Rng + ?Sized>(lambda: T, rng: &mut R) -> Result<T> {
    Ok(ContinuousBernoulli::new(lambda)?.sample(rng))
}
