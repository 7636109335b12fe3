//! Thin float helpers so the crate stays `no_std`.

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn floor(x: f64) -> f64 {
    libm::floor(x)
}

/// Dot product of two f32 slices with an f64 accumulator.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// Dot product of an f32 row with an f64 direction.
#[inline]
pub(crate) fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * *y;
    }
    acc
}

#[inline]
pub(crate) fn norm_f32(a: &[f32]) -> f64 {
    sqrt(dot(a, a))
}

/// ceil(log2(k)) with log of 0 and 1 taken as 0.
pub(crate) fn ceil_log2(k: u64) -> u64 {
    if k <= 1 {
        0
    } else {
        u64::from(64 - (k - 1).leading_zeros())
    }
}
