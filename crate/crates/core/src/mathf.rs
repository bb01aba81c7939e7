//! Float math shims. `no_std` has no `sqrt`/`log10`, so everything routes
//! through `libm`, which also keeps results bit-identical across platforms.

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn log10(x: f64) -> f64 {
    libm::log10(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn abs32(x: f32) -> f32 {
    libm::fabsf(x)
}

/// IEEE max ignoring NaN concerns; inputs here are always finite.
#[inline]
pub fn max32(a: f32, b: f32) -> f32 {
    if a > b {
        a
    } else {
        b
    }
}

#[inline]
pub fn min32(a: f32, b: f32) -> f32 {
    if a < b {
        a
    } else {
        b
    }
}
