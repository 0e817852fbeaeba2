//! Correctly rounded summation.
//!
//! Attention pooling must give bit-identical results under any permutation of
//! its inputs. A naive left-to-right sum does not; the correctly rounded sum of
//! a multiset is unique, so computing it exactly gives the invariance for free.

/// Correctly rounded sum of `values` (Shewchuk's non-overlapping partials with
/// the half-way correction used by Python's `math.fsum`).
///
/// ```
/// use hdan_tensor::exact_sum;
/// assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
/// assert_eq!(exact_sum([0.1; 10]), 1.0);
/// ```
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::with_capacity(8);
    for value in values {
        let mut x = value;
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    round_partials(&partials)
}

fn round_partials(partials: &[f64]) -> f64 {
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let y_rounded = hi - x;
        lo = y - y_rounded;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_is_zero() {
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn cancellation_is_exact() {
        assert_eq!(exact_sum([1.0, 1e-16, -1.0]), 1e-16);
        assert_eq!(exact_sum([1e16, 1.0, 1.0]), 1e16 + 2.0);
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut xs in prop::collection::vec(-1e6f64..1e6, 0..64), seed in any::<u64>()) {
            let forward = exact_sum(xs.iter().copied());
            // deterministic shuffle driven by the seed
            let mut state = seed | 1;
            for i in (1..xs.len()).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                xs.swap(i, (state % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(forward.to_bits(), exact_sum(xs.iter().copied()).to_bits());
        }

        #[test]
        fn integers_sum_exactly(xs in prop::collection::vec(-1_000_000i64..1_000_000, 0..64)) {
            let expected: i64 = xs.iter().sum();
            prop_assert_eq!(exact_sum(xs.iter().map(|&v| v as f64)), expected as f64);
        }
    }
}
