//! Small numeric kernels shared across modules.

/// Below this norm a vector is treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// Sum that does not depend on the order of its terms.
///
/// Terms are sorted by `total_cmp` and then reduced pairwise, so any permutation
/// of the same multiset gives a bit-identical result.
pub fn order_invariant_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    pairwise_sum(terms)
}

fn pairwise_sum(terms: &[f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        n if n <= 8 => terms.iter().sum(),
        n => {
            let (a, b) = terms.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax over `values`, computed in place with max subtraction.
///
/// The max and the normalizer are order-invariant, so permuting the input
/// permutes the output exactly.
pub fn softmax_in_place(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in values.iter_mut() {
        *v = (*v - max).exp();
    }
    let mut buf = values.to_vec();
    let z = order_invariant_sum(&mut buf);
    for v in values.iter_mut() {
        *v /= z;
    }
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_invariant_sum_ignores_permutation() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-3, 7.25, -2.0, 0.1, 0.2, 0.3, 1e8];
        let mut b = a.clone();
        b.reverse();
        b.swap(2, 7);
        assert_eq!(order_invariant_sum(&mut a).to_bits(), order_invariant_sum(&mut b).to_bits());
    }

    #[test]
    fn softplus_limits() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![3.0, 1.0, -2.0, 1000.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(v[3] > 0.999);
    }
}
