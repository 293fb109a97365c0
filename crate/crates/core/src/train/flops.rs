//! Closed-form training compute per sample.
//!
//! Generation costs `2ND` per denoising step for `K` steps. Each policy
//! update runs a forward and backward pass (`6ND`) per ELBO evaluation;
//! coupled sampling evaluates two masks per Monte Carlo sample.

use crate::error::{domain, Result};

/// `2 (K + c mu M)` with `c = 6` coupled and `c = 3` otherwise: FLOPs per
/// sample in units of `N D`.
pub fn flops_multiplier(k: u64, mu: u64, m: u64, coupled: bool) -> Result<u64> {
    if k == 0 || mu == 0 || m == 0 {
        return Err(domain("K, mu and M must be positive"));
    }
    let c = if coupled { 6 } else { 3 };
    Ok(2 * (k + c * mu * m))
}

/// Total FLOPs per sample: `2 N D (K + c mu M)`.
pub fn flops_per_sample(n: u64, d: u64, k: u64, mu: u64, m: u64, coupled: bool) -> Result<u128> {
    if n == 0 || d == 0 {
        return Err(domain("N and D must be positive"));
    }
    Ok(n as u128 * d as u128 * flops_multiplier(k, mu, m, coupled)? as u128)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupled_doubles_only_the_update_term() {
        assert_eq!(flops_multiplier(10, 1, 1, false).unwrap(), 26);
        assert_eq!(flops_multiplier(10, 1, 1, true).unwrap(), 32);
        assert_eq!(flops_per_sample(3, 5, 10, 1, 1, true).unwrap(), 15 * 32);
        assert!(flops_multiplier(0, 1, 1, true).is_err());
    }
}
