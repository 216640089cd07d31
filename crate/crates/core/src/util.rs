//! Numeric and combinatorial helpers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// log(sum(exp(xs))) computed stably. Empty input yields -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// log(exp(a) + exp(b)) computed stably.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Binomial coefficient C(n, k), or `None` on u128 overflow.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

/// Number of mask trajectories for a size schedule: the multinomial
/// coefficient L! / (s_1! ... s_T!), or `None` on overflow.
pub fn trajectory_count(sizes: &[usize]) -> Option<u128> {
    let mut remaining: usize = sizes.iter().sum();
    let mut acc: u128 = 1;
    for &s in sizes {
        acc = acc.checked_mul(binomial(remaining, s)?)?;
        remaining -= s;
    }
    Some(acc)
}

/// K^L with an overflow check.
pub fn table_size(k: usize, l: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for _ in 0..l {
        acc = acc.checked_mul(k)?;
    }
    Some(acc)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from (master seed, stream index); used to give each
/// sweep point or replica group its own disjoint stream family.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut state = master ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    splitmix64(&mut state)
}

/// Deterministic per-replica RNG stream derived by hashing
/// (master seed, stream index). Streams are independent of thread count, so
/// parallel Monte Carlo loops reproduce bit-identically given the master
/// seed.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha12Rng {
    let mut state = master ^ stream.wrapping_mul(0xA24B_AED4_963E_E407);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

/// Sample mean and standard error (sample std / sqrt(n)).
/// Returns (mean, stderr); stderr is 0 for n < 2.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_matches_direct() {
        let xs = [-1.0f64, 0.5, 2.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(logsumexp(&xs), direct, epsilon = 1e-14);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_add_exp_handles_neg_inf() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, -2.0), -2.0);
        assert_abs_diff_eq!(
            log_add_exp(-1.0, -1.0),
            (-1.0f64).exp().mul_add(2.0, 0.0).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(5, 2), Some(10));
        assert_eq!(binomial(4, 0), Some(1));
        assert_eq!(binomial(3, 5), Some(0));
        assert!(binomial(100, 50).is_some());
    }

    #[test]
    fn trajectory_count_multinomial() {
        assert_eq!(trajectory_count(&[1, 1]), Some(2));
        assert_eq!(trajectory_count(&[2, 1]), Some(3));
        assert_eq!(trajectory_count(&[2, 2]), Some(6));
        assert_eq!(trajectory_count(&[1, 1, 1, 1]), Some(24));
    }

    #[test]
    fn stream_rngs_are_stable_and_distinct() {
        use rand::RngCore;
        let mut a = stream_rng(42, 0);
        let mut a2 = stream_rng(42, 0);
        let mut b = stream_rng(42, 1);
        assert_eq!(a.next_u64(), a2.next_u64());
        let mut a3 = stream_rng(42, 0);
        assert_ne!(a3.next_u64(), b.next_u64());
    }

    #[test]
    fn mean_stderr_basic() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(m, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s, (1.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }
}
