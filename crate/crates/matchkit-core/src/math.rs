//! Scalar type and transcendental functions.
//!
//! All float math goes through `libm` so the crate works without `std` and
//! produces the same bit patterns whether or not the host links libstd.

#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

#[cfg(not(feature = "single-precision"))]
mod shim {
    pub use libm::{cos, exp, fabs as abs, floor, log as ln, pow, sqrt, tanh};
}

#[cfg(feature = "single-precision")]
mod shim {
    pub use libm::{
        cosf as cos, expf as exp, fabsf as abs, floorf as floor, logf as ln, powf as pow,
        sqrtf as sqrt, tanhf as tanh,
    };
}

pub use shim::{abs, cos, exp, floor, ln, pow, sqrt, tanh};

pub const PI: Real = core::f64::consts::PI as Real;

/// Norm floor used by cosine similarity so zero vectors stay finite.
pub const NORM_EPS: Real = 1e-8;

/// Probability clamp applied before taking logs in the episode loss.
pub const LOG_CLAMP: Real = 1e-12;

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Euclidean norm of a slice.
pub fn l2_norm(xs: &[Real]) -> Real {
    sqrt(xs.iter().map(|&x| x * x).sum())
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Cosine similarity with both norms floored at [`NORM_EPS`].
pub fn cosine(a: &[Real], b: &[Real]) -> Real {
    let na = l2_norm(a).max(NORM_EPS);
    let nb = l2_norm(b).max(NORM_EPS);
    dot(a, b) / (na * nb)
}

/// Numerically stable softmax (max-subtracted) computed in place.
pub fn softmax_in_place(xs: &mut [Real]) {
    let max = xs.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = exp(*x - max);
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Index of the maximum element, lowest index on ties.
pub fn argmax(xs: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut xs = [0.0, 0.0];
        softmax_in_place(&mut xs);
        assert_eq!(xs, [0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut xs = [1000.0, 1000.0];
        softmax_in_place(&mut xs);
        assert!((xs[0] - 0.5).abs() < 1e-12);
        assert!((xs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
