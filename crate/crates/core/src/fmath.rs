//! Float transcendentals routed through `libm` so the crate builds without
//! `std`. Plain `*`/`+` stay inline in the hot kernels; only the functions
//! below need a shim.

#[inline(always)]
pub fn abs(x: f32) -> f32 {
    f32::from_bits(x.to_bits() & 0x7fff_ffff)
}

#[inline(always)]
pub fn sqrt(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[inline(always)]
pub fn exp(x: f32) -> f32 {
    libm::expf(x)
}

#[inline(always)]
pub fn ln(x: f32) -> f32 {
    libm::logf(x)
}

#[inline(always)]
pub fn log10(x: f32) -> f32 {
    libm::log10f(x)
}

#[inline(always)]
pub fn sin(x: f32) -> f32 {
    libm::sinf(x)
}

#[inline(always)]
pub fn cos(x: f32) -> f32 {
    libm::cosf(x)
}

#[inline(always)]
pub fn powf(x: f32, y: f32) -> f32 {
    libm::powf(x, y)
}

#[inline(always)]
pub fn floor(x: f32) -> f32 {
    libm::floorf(x)
}

#[inline(always)]
pub fn ceil(x: f32) -> f32 {
    libm::ceilf(x)
}

#[inline(always)]
pub fn round(x: f32) -> f32 {
    libm::roundf(x)
}

#[inline(always)]
pub fn sqrt64(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline(always)]
pub fn ln64(x: f64) -> f64 {
    libm::log(x)
}

#[inline(always)]
pub fn log10_64(x: f64) -> f64 {
    libm::log10(x)
}
