//! Projection-domain physics: slice-wise 2D parallel-beam forward projection,
//! its exact discrete adjoint, filtered backprojection, Poisson dose
//! simulation, and MLEM / OSEM reconstruction.
//!
//! Volumes are `[N, N, Z]` (slice axis contiguous), sinograms
//! `[n_angles, n_bins, Z]`. Ray geometry is shared by every slice, so the
//! innermost loops run over the contiguous slice axis.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::fmath;
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::{constraint, ShapeError, Tensor};

/// 2D parallel-beam acquisition applied slice-wise: uniformly spaced angles
/// over `[0, pi)`, `n_bins` radial bins, square `N x N` slices.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Geometry {
    pub n_angles: usize,
    pub n_bins: usize,
    pub bin_spacing: f32,
    pub image_size: usize,
}

impl Geometry {
    /// Desk default: bins cover the slice diagonal (rounded up to even),
    /// angles scale with N to stay above the parallel-beam Nyquist limit
    /// (120 at N = 64, 60 at N = 32, floor 60).
    pub fn desk_default(image_size: usize) -> Geometry {
        let diag = fmath::ceil(core::f32::consts::SQRT_2 * image_size as f32) as usize;
        let n_bins = diag + diag % 2;
        let n_angles = ((15 * image_size).div_ceil(8).div_ceil(4) * 4).max(60);
        Geometry {
            n_angles,
            n_bins,
            bin_spacing: 1.0,
            image_size,
        }
    }

    pub fn angle(&self, a: usize) -> f32 {
        core::f32::consts::PI * a as f32 / self.n_angles as f32
    }

    /// Radial coordinate of bin `b` (grid units, centred).
    pub fn bin_offset(&self, b: usize) -> f32 {
        (b as f32 - (self.n_bins as f32 - 1.0) / 2.0) * self.bin_spacing
    }

    fn check_coverage(&self) -> Result<(), ShapeError> {
        let diag = core::f32::consts::SQRT_2 * self.image_size as f32;
        if (self.n_bins as f32) * self.bin_spacing < diag {
            return Err(constraint(
                "geometry",
                alloc::format!(
                    "{} bins at spacing {} cannot cover the slice diagonal {:.1}",
                    self.n_bins,
                    self.bin_spacing,
                    diag
                ),
            ));
        }
        if self.n_angles == 0 {
            return Err(constraint("geometry", "need at least one angle"));
        }
        Ok(())
    }

    fn check_volume(&self, vol: &Tensor) -> Result<(), ShapeError> {
        if vol.rank() != 3 || vol.shape()[0] != vol.shape()[1] || vol.shape()[0] != self.image_size {
            return Err(constraint(
                "geometry",
                alloc::format!(
                    "volume {:?} does not match geometry image size {}",
                    vol.shape(),
                    self.image_size
                ),
            ));
        }
        self.check_coverage()
    }

    fn check_sino(&self, sino: &Tensor) -> Result<(), ShapeError> {
        if sino.rank() != 3 || sino.shape()[0] != self.n_angles || sino.shape()[1] != self.n_bins {
            return Err(constraint(
                "geometry",
                alloc::format!(
                    "sinogram {:?} does not match geometry {}x{}",
                    sino.shape(),
                    self.n_angles,
                    self.n_bins
                ),
            ));
        }
        self.check_coverage()
    }
}

/// Projection-domain data: nonnegative expected counts per (angle, bin, slice).
#[derive(Clone, Debug)]
pub struct Sinogram {
    pub data: Tensor,
    pub geometry: Geometry,
}

/// Ramp filter flavour for FBP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FbpFilter {
    Ramp,
    Hann,
}

// ---------------------------------------------------------------------------
// projector core
// ---------------------------------------------------------------------------

/// Bilinear taps of one sample point, shared across slices.
#[inline]
fn bilinear_taps(x: f32, y: f32, n: usize) -> [(usize, f32); 4] {
    let i0 = fmath::floor(y);
    let j0 = fmath::floor(x);
    let fy = y - i0;
    let fx = x - j0;
    let mut taps = [(0usize, 0f32); 4];
    let mut k = 0;
    for (di, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dj, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let i = i0 as i64 + di;
            let j = j0 as i64 + dj;
            let w = wy * wx;
            if i >= 0 && j >= 0 && (i as usize) < n && (j as usize) < n && w != 0.0 {
                taps[k] = ((i as usize) * n + j as usize, w);
                k += 1;
            }
        }
    }
    for t in taps.iter_mut().skip(k) {
        *t = (0, 0.0);
    }
    taps
}

fn ray_samples(geom: &Geometry, a: usize, b: usize) -> Vec<[(usize, f32); 4]> {
    let n = geom.image_size;
    let c = (n as f32 - 1.0) / 2.0;
    let theta = geom.angle(a);
    let (sin_t, cos_t) = (fmath::sin(theta), fmath::cos(theta));
    let s = geom.bin_offset(b);
    // ray through s * (cos, sin) along direction (-sin, cos), unit steps
    let half = fmath::ceil(core::f32::consts::SQRT_2 * n as f32 / 2.0) as i64 + 1;
    let mut out = Vec::with_capacity((2 * half + 1) as usize);
    for k in -half..=half {
        let t = k as f32;
        let x = s * cos_t - t * sin_t + c;
        let y = s * sin_t + t * cos_t + c;
        if x <= -1.0 || y <= -1.0 || x >= n as f32 || y >= n as f32 {
            continue;
        }
        out.push(bilinear_taps(x, y, n));
    }
    out
}

/// Forward projection of the angle subset `angles` into `sino` (preallocated
/// `[n_angles, n_bins, z]`, rows outside the subset left untouched).
fn project_subset(vol: &[f32], z: usize, geom: &Geometry, angles: &[usize], sino: &mut [f32]) {
    let bins = geom.n_bins;
    for &a in angles {
        for b in 0..bins {
            let taps = ray_samples(geom, a, b);
            let row = &mut sino[(a * bins + b) * z..(a * bins + b + 1) * z];
            row.fill(0.0);
            for tap4 in &taps {
                for &(pix, w) in tap4 {
                    if w != 0.0 {
                        let src = &vol[pix * z..(pix + 1) * z];
                        for (r, &v) in row.iter_mut().zip(src) {
                            *r += w * v;
                        }
                    }
                }
            }
        }
    }
}

/// Exact transpose of [`project_subset`]: spreads sinogram rows back along
/// the same sample taps.
fn backproject_subset(sino: &[f32], z: usize, geom: &Geometry, angles: &[usize], vol: &mut [f32]) {
    let bins = geom.n_bins;
    for &a in angles {
        for b in 0..bins {
            let taps = ray_samples(geom, a, b);
            let row = &sino[(a * bins + b) * z..(a * bins + b + 1) * z];
            for tap4 in &taps {
                for &(pix, w) in tap4 {
                    if w != 0.0 {
                        let dst = &mut vol[pix * z..(pix + 1) * z];
                        for (d, &r) in dst.iter_mut().zip(row) {
                            *d += w * r;
                        }
                    }
                }
            }
        }
    }
}

/// Slice-wise line integrals of `volume [N, N, Z]`. Linear in the input.
pub fn forward_project(volume: &Tensor, geom: &Geometry) -> Result<Sinogram, ShapeError> {
    geom.check_volume(volume)?;
    let z = volume.shape()[2];
    let angles: Vec<usize> = (0..geom.n_angles).collect();
    let mut out = vec![0f32; geom.n_angles * geom.n_bins * z];
    project_subset(volume.data(), z, geom, &angles, &mut out);
    Ok(Sinogram {
        data: Tensor::from_vec(&[geom.n_angles, geom.n_bins, z], out)?,
        geometry: geom.clone(),
    })
}

/// Exact discrete adjoint of [`forward_project`].
pub fn back_project(sino: &Sinogram) -> Result<Tensor, ShapeError> {
    let geom = &sino.geometry;
    geom.check_sino(&sino.data)?;
    let z = sino.data.shape()[2];
    let n = geom.image_size;
    let angles: Vec<usize> = (0..geom.n_angles).collect();
    let mut out = vec![0f32; n * n * z];
    backproject_subset(sino.data.data(), z, geom, &angles, &mut out);
    Tensor::from_vec(&[n, n, z], out)
}

// ---------------------------------------------------------------------------
// filtered backprojection
// ---------------------------------------------------------------------------

/// Spatial-domain filter kernel, taps for offsets `-(n_bins-1)..=n_bins-1`.
pub(crate) fn filter_kernel(filter: FbpFilter, n_bins: usize, spacing: f32) -> Vec<f32> {
    let half = n_bins - 1;
    let tau = spacing;
    match filter {
        FbpFilter::Ramp => {
            // closed-form Ram-Lak taps
            let mut k = vec![0f32; 2 * half + 1];
            for (i, kv) in k.iter_mut().enumerate() {
                let n = i as i64 - half as i64;
                *kv = if n == 0 {
                    1.0 / (4.0 * tau * tau)
                } else if n % 2 == 0 {
                    0.0
                } else {
                    let nn = n as f32;
                    -1.0 / (core::f32::consts::PI * core::f32::consts::PI * nn * nn * tau * tau)
                };
            }
            k
        }
        FbpFilter::Hann => {
            // numeric inverse DFT of the Hann-apodised ramp
            let m = (4 * n_bins).next_power_of_two();
            let mut k = vec![0f32; 2 * half + 1];
            for (i, kv) in k.iter_mut().enumerate() {
                let n = i as i64 - half as i64;
                let mut acc = 0f64;
                for j in 0..m {
                    let f = (j.min(m - j)) as f64 / m as f64; // cycles/sample in [0, 0.5]
                    let window = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * f / 0.5));
                    let h = f * window;
                    acc += h * libm::cos(2.0 * core::f64::consts::PI * j as f64 * n as f64 / m as f64);
                }
                *kv = (acc / m as f64) as f32 / (tau * tau);
            }
            k
        }
    }
}

fn filter_rows(sino: &[f32], geom: &Geometry, z: usize, kernel: &[f32]) -> Vec<f32> {
    let bins = geom.n_bins;
    let half = bins - 1;
    let tau = geom.bin_spacing;
    let mut out = vec![0f32; sino.len()];
    par::chunks_mut(&mut out, bins * z, |a, orow| {
        let srow = &sino[a * bins * z..(a + 1) * bins * z];
        for b in 0..bins {
            let dst = &mut orow[b * z..(b + 1) * z];
            for bp in 0..bins {
                let kv = kernel[(b + half - bp) as usize] * tau;
                if kv != 0.0 {
                    let src = &srow[bp * z..(bp + 1) * z];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += kv * s;
                    }
                }
            }
        }
    });
    out
}

/// Filtered backprojection: per-angle ramp filtering of each row followed by
/// backprojection scaled by `pi / n_angles`.
pub fn fbp(sino: &Sinogram, filter: FbpFilter) -> Result<Tensor, ShapeError> {
    let geom = &sino.geometry;
    geom.check_sino(&sino.data)?;
    if geom.n_angles < 2 {
        return Err(constraint("fbp", "need at least 2 angles"));
    }
    let z = sino.data.shape()[2];
    let kernel = filter_kernel(filter, geom.n_bins, geom.bin_spacing);
    let filtered = filter_rows(sino.data.data(), geom, z, &kernel);
    let filtered = Sinogram {
        data: Tensor::from_vec(sino.data.shape(), filtered)?,
        geometry: geom.clone(),
    };
    let bp = back_project(&filtered)?;
    Ok(bp.scale(core::f32::consts::PI / geom.n_angles as f32))
}

// ---------------------------------------------------------------------------
// dose simulation
// ---------------------------------------------------------------------------

/// Draws independent Poisson counts with mean
/// `dose_factor * scale_counts * s` per cell and divides by the same factor,
/// giving an unbiased estimate of the input with dose-dependent noise.
pub fn simulate_low_dose(
    sino_std: &Sinogram,
    dose_factor: f32,
    scale_counts: f32,
    seed: u64,
) -> Result<Sinogram, ShapeError> {
    if dose_factor <= 0.0 {
        return Err(constraint("simulate_low_dose", "dose_factor must be positive"));
    }
    if scale_counts <= 0.0 {
        return Err(constraint("simulate_low_dose", "scale_counts must be positive"));
    }
    if sino_std.data.min_value() < 0.0 {
        return Err(constraint("simulate_low_dose", "sinogram must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = dose_factor as f64 * scale_counts as f64;
    let data: Vec<f32> = sino_std
        .data
        .data()
        .iter()
        .map(|&s| {
            let lambda = factor * s as f64;
            if lambda <= 0.0 {
                0.0
            } else {
                let counts = Poisson::new(lambda).expect("lambda > 0").sample(&mut rng);
                (counts / factor) as f32
            }
        })
        .collect();
    Ok(Sinogram {
        data: Tensor::from_vec(sino_std.data.shape(), data)?,
        geometry: sino_std.geometry.clone(),
    })
}

// ---------------------------------------------------------------------------
// MLEM / OSEM
// ---------------------------------------------------------------------------

/// Poisson log-likelihood `sum(y ln(yhat) - yhat)` up to the y-dependent
/// constant; used to verify MLEM monotonicity.
pub fn poisson_log_likelihood(measured: &Tensor, expected: &Tensor) -> f64 {
    let mut acc = 0f64;
    for (&y, &e) in measured.data().iter().zip(expected.data()) {
        let e = (e as f64).max(1e-12);
        acc -= e;
        if y > 0.0 {
            acc += y as f64 * libm::log(e);
        }
    }
    acc
}

/// Multiplicative EM reconstruction cycled over interleaved angle subsets;
/// `subsets == 1` is exact MLEM. Starts from a uniform positive image and
/// stays nonnegative at every iteration.
pub fn mlem_osem(
    sino: &Sinogram,
    geom: &Geometry,
    iterations: usize,
    subsets: usize,
) -> Result<Tensor, ShapeError> {
    geom.check_sino(&sino.data)?;
    if sino.data.min_value() < 0.0 {
        return Err(constraint("mlem_osem", "sinogram must be nonnegative"));
    }
    if subsets == 0 || geom.n_angles % subsets != 0 {
        return Err(constraint(
            "mlem_osem",
            alloc::format!("subsets ({subsets}) must divide n_angles ({})", geom.n_angles),
        ));
    }
    let z = sino.data.shape()[2];
    let n = geom.image_size;
    let subset_angles: Vec<Vec<usize>> = (0..subsets)
        .map(|s| (s..geom.n_angles).step_by(subsets).collect())
        .collect();
    // per-subset sensitivity: backprojection of ones, clamped away from zero
    let ones = vec![1f32; geom.n_angles * geom.n_bins * z];
    let sens: Vec<Vec<f32>> = subset_angles
        .iter()
        .map(|angles| {
            let mut s = vec![0f32; n * n * z];
            backproject_subset(&ones, z, geom, angles, &mut s);
            for v in s.iter_mut() {
                *v = v.max(1e-8);
            }
            s
        })
        .collect();

    let mut img = vec![1f32; n * n * z];
    let mut proj = vec![0f32; geom.n_angles * geom.n_bins * z];
    let mut ratio = vec![0f32; geom.n_angles * geom.n_bins * z];
    let mut update = vec![0f32; n * n * z];
    let yd = sino.data.data();
    for _ in 0..iterations {
        for (angles, sens_s) in subset_angles.iter().zip(&sens) {
            project_subset(&img, z, geom, angles, &mut proj);
            for &a in angles {
                for i in (a * geom.n_bins * z)..((a + 1) * geom.n_bins * z) {
                    let p = proj[i];
                    ratio[i] = if p > 1e-12 { yd[i] / p } else { 0.0 };
                }
            }
            update.fill(0.0);
            backproject_subset(&ratio, z, geom, angles, &mut update);
            for ((x, &u), &s) in img.iter_mut().zip(&update).zip(sens_s) {
                *x *= u / s;
            }
        }
    }
    Tensor::from_vec(&[n, n, z], img)
}

// ---------------------------------------------------------------------------
// tape wrappers (linear ops: adjoints are each other)
// ---------------------------------------------------------------------------

impl Tape {
    /// Batched forward projection `[B, 1, N, N, Z] -> [B, 1, A, R, Z]`.
    pub fn radon_op(&self, x: Var, geom: &Geometry) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        if vx.rank() != 5 || vx.shape()[1] != 1 {
            return Err(constraint("radon_op", "input must be [B, 1, N, N, Z]"));
        }
        let (b, n, z) = (vx.shape()[0], vx.shape()[2], vx.shape()[4]);
        if vx.shape()[3] != n || n != geom.image_size {
            return Err(constraint("radon_op", "volume does not match geometry"));
        }
        geom.check_coverage()?;
        let angles: Vec<usize> = (0..geom.n_angles).collect();
        let vol_len = n * n * z;
        let sin_len = geom.n_angles * geom.n_bins * z;
        let mut out = vec![0f32; b * sin_len];
        for bb in 0..b {
            project_subset(
                &vx.data()[bb * vol_len..(bb + 1) * vol_len],
                z,
                geom,
                &angles,
                &mut out[bb * sin_len..(bb + 1) * sin_len],
            );
        }
        let out = Tensor::from_vec(&[b, 1, geom.n_angles, geom.n_bins, z], out)?;
        let requires = self.requires_grad(x);
        let backward = if requires {
            let geom = geom.clone();
            let ix = x.idx;
            let in_shape = vx.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let angles: Vec<usize> = (0..geom.n_angles).collect();
                let mut dx = vec![0f32; b * vol_len];
                for bb in 0..b {
                    backproject_subset(
                        &g.data()[bb * sin_len..(bb + 1) * sin_len],
                        z,
                        &geom,
                        &angles,
                        &mut dx[bb * vol_len..(bb + 1) * vol_len],
                    );
                }
                emit(ix, Tensor::from_vec(&in_shape, dx).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx], backward))
    }

    /// Batched FBP `[B, 1, A, R, Z] -> [B, 1, N, N, Z]`. Linear, so the
    /// backward pass is projection followed by the (symmetric) filter.
    pub fn fbp_op(&self, s: Var, geom: &Geometry, filter: FbpFilter) -> Result<Var, ShapeError> {
        let vs = self.value(s);
        if vs.rank() != 5 || vs.shape()[1] != 1 {
            return Err(constraint("fbp_op", "input must be [B, 1, A, R, Z]"));
        }
        let (b, z) = (vs.shape()[0], vs.shape()[4]);
        if vs.shape()[2] != geom.n_angles || vs.shape()[3] != geom.n_bins {
            return Err(constraint("fbp_op", "sinogram does not match geometry"));
        }
        geom.check_coverage()?;
        let n = geom.image_size;
        let scale = core::f32::consts::PI / geom.n_angles as f32;
        let kernel = filter_kernel(filter, geom.n_bins, geom.bin_spacing);
        let angles: Vec<usize> = (0..geom.n_angles).collect();
        let vol_len = n * n * z;
        let sin_len = geom.n_angles * geom.n_bins * z;
        let mut out = vec![0f32; b * vol_len];
        for bb in 0..b {
            let filtered = filter_rows(&vs.data()[bb * sin_len..(bb + 1) * sin_len], geom, z, &kernel);
            let dst = &mut out[bb * vol_len..(bb + 1) * vol_len];
            backproject_subset(&filtered, z, geom, &angles, dst);
            for v in dst.iter_mut() {
                *v *= scale;
            }
        }
        let out = Tensor::from_vec(&[b, 1, n, n, z], out)?;
        let requires = self.requires_grad(s);
        let backward = if requires {
            let geom = geom.clone();
            let is = s.idx;
            let in_shape = vs.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let angles: Vec<usize> = (0..geom.n_angles).collect();
                let kernel = filter_kernel(filter, geom.n_bins, geom.bin_spacing);
                let mut ds = vec![0f32; b * sin_len];
                for bb in 0..b {
                    let mut proj = vec![0f32; sin_len];
                    let mut gscaled = g.data()[bb * vol_len..(bb + 1) * vol_len].to_vec();
                    for v in gscaled.iter_mut() {
                        *v *= scale;
                    }
                    project_subset(&gscaled, z, &geom, &angles, &mut proj);
                    let filtered = filter_rows(&proj, &geom, z, &kernel);
                    ds[bb * sin_len..(bb + 1) * sin_len].copy_from_slice(&filtered);
                }
                emit(is, Tensor::from_vec(&in_shape, ds).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![s.idx], backward))
    }
}
