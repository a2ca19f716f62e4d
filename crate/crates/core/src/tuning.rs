//! Step-size and local-step rules for problems with known constants.

use crate::error::{Result, ZofedError};
use crate::problems::Variant;

/// Tuned step size.
///
/// Single-level and bilevel/minimax use `sqrt(eta m / (K n^1.5 L0^3))`, where
/// `L0` is the Lipschitz constant of the (implicit) objective; two-stage uses
/// `sqrt(m / K)`.
pub fn tuned_gamma(variant: Variant, m: usize, k: u64, eta: Option<f64>, l0: Option<f64>, n: Option<usize>) -> Result<f64> {
    if m == 0 || k == 0 {
        return Err(ZofedError::config("m and K must be >= 1"));
    }
    let (m, k) = (m as f64, k as f64);
    match variant {
        Variant::TwoStage => Ok((m / k).sqrt()),
        Variant::SingleLevel | Variant::Bilevel | Variant::Minimax => {
            let eta = eta.ok_or_else(|| ZofedError::config("tuned gamma needs eta"))?;
            let l0 = l0.ok_or_else(|| ZofedError::config("tuned gamma needs the Lipschitz constant L0"))?;
            let n = n.ok_or_else(|| ZofedError::config("tuned gamma needs the dimension n"))?;
            if !(eta > 0.0) || !(l0 > 0.0) || n == 0 {
                return Err(ZofedError::config("eta, L0 and n must be positive"));
            }
            Ok((eta * m / (k * (n as f64).powf(1.5) * l0.powi(3))).sqrt())
        }
    }
}

/// `H = ceil((K / m^3)^(1/4))`.
pub fn tuned_local_steps(k: u64, m: usize) -> Result<usize> {
    if m == 0 || k == 0 {
        return Err(ZofedError::config("m and K must be >= 1"));
    }
    let ratio = k as f64 / (m as f64).powi(3);
    Ok((ratio.sqrt().sqrt().ceil() as usize).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((tuned_gamma(Variant::TwoStage, 4, 100, None, None, None).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tuned_gamma(Variant::SingleLevel, 1, 1, Some(1.0), Some(1.0), Some(1)).unwrap(), 1.0);
        assert_eq!(tuned_local_steps(16, 1).unwrap(), 2);
        assert_eq!(tuned_local_steps(81, 1).unwrap(), 3);
        assert_eq!(tuned_local_steps(1, 10).unwrap(), 1);
        assert!(tuned_gamma(Variant::Bilevel, 2, 10, Some(0.1), None, Some(3)).is_err());
    }
}
