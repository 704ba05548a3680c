//! Exact counts of the sub-array/TTD connection patterns an adaptive switch
//! network can realise.

use num_bigint::BigUint;

use crate::error::{Error, Result};

fn factorial(n: usize) -> BigUint {
    (1..=n as u64).fold(BigUint::from(1u32), |acc, i| acc * i)
}

fn binomial(n: usize, k: usize) -> BigUint {
    let k = k.min(n - k);
    (0..k as u64).fold(BigUint::from(1u32), |acc, i| acc * (n as u64 - i) / (i + 1))
}

/// Number of surjections from `n` antennas onto `l` labelled TTD outputs,
/// `L!·S(N, L) = Σ_i (-1)^i C(L, i) (L - i)^N`.
pub fn unconstrained_count(n: usize, l: usize) -> Result<BigUint> {
    if l == 0 || l > n {
        return Err(Error::InvalidParams(format!(
            "need 1 <= L <= N, got L={l}, N={n}"
        )));
    }
    let mut plus = BigUint::from(0u32);
    let mut minus = BigUint::from(0u32);
    for i in 0..=l {
        let term = binomial(l, i) * BigUint::from(l - i).pow(n as u32);
        if i % 2 == 0 {
            plus += term;
        } else {
            minus += term;
        }
    }
    Ok(plus - minus)
}

/// Number of ways to split `n` antennas into `l` unlabelled groups of equal
/// size, `N! / ((N/L)!^L · L!)`.
pub fn equal_sized_count(n: usize, l: usize) -> Result<BigUint> {
    if l == 0 || l > n || n % l != 0 {
        return Err(Error::InvalidParams(format!("L={l} must divide N={n}")));
    }
    let q = factorial(n / l);
    Ok(factorial(n) / (q.pow(l as u32) * factorial(l)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigurationCounts {
    pub unconstrained: BigUint,
    pub equal_sized: BigUint,
}

pub fn count_configurations(n: usize, l: usize) -> Result<ConfigurationCounts> {
    Ok(ConfigurationCounts {
        unconstrained: unconstrained_count(n, l)?,
        equal_sized: equal_sized_count(n, l)?,
    })
}

/// Mantissa in `[1, 10)` and decimal exponent, rounded to `digits` significant digits.
pub fn scientific(x: &BigUint, digits: usize) -> (f64, u32) {
    let s = x.to_str_radix(10);
    let exp = s.len() as u32 - 1;
    let digits = digits.max(1);
    let head: String = s.chars().take(digits + 1).collect();
    let mut mant: f64 = head.parse::<f64>().unwrap_or(0.0) / 10f64.powi(head.len() as i32 - 1);
    let scale = 10f64.powi(digits as i32 - 1);
    mant = (mant * scale).round() / scale;
    if mant >= 10.0 {
        (mant / 10.0, exp + 1)
    } else {
        (mant, exp)
    }
}

/// `3.4028e38`-style rendering with `digits` significant digits.
pub fn format_scientific(x: &BigUint, digits: usize) -> String {
    let (m, e) = scientific(x, digits);
    format!("{m:.prec$}e{e}", prec = digits.max(1) - 1)
}
