//! Orthonormal 3D Haar wavelet-packet analysis/synthesis.
//!
//! One level decomposes every 2x2x2 block with the separable transform built
//! from the filter pair (1/sqrt(2), 1/sqrt(2)) / (1/sqrt(2), -1/sqrt(2)),
//! yielding 8 half-extent sub-bands. The full packet tree re-decomposes all
//! eight children per level, so level `L` carries exactly `8^L` bands.
//!
//! Band order is fixed: index `b = bD*4 + bH*2 + bW` with 0 = low-pass and
//! 1 = high-pass per axis (axis order D, H, W). Stacking is band-major: in a
//! `[8^L * C, ...]` tensor, band `i` occupies channels `[i*C, (i+1)*C)`, and
//! recursion makes the most recently applied level the most significant
//! octal digit of the band index.
//!
//! The per-block 8-point matrix is symmetric orthogonal, so synthesis and
//! analysis use the same butterfly — which is also why the autodiff adjoint
//! of each transform is simply the other one.

use alloc::vec;
use alloc::vec::Vec;

use crate::tape::{Tape, Var};
use crate::tensor::{constraint, ShapeError, Tensor};

const INV_SQRT8: f32 = 0.353_553_39; // 2^(-3/2)

/// Ordered collection of `8^L` wavelet sub-bands stored channel-stacked.
#[derive(Clone, Debug)]
pub struct SubbandSet {
    pub level: usize,
    /// channel count of the source volume
    pub channels: usize,
    /// `[8^L * channels, D/2^L, H/2^L, W/2^L]`
    pub stacked: Tensor,
}

impl SubbandSet {
    pub fn band_count(&self) -> usize {
        1usize << (3 * self.level)
    }

    pub fn band_shape(&self) -> &[usize] {
        &self.stacked.shape()[1..]
    }

    /// Copy of band `i` as `[channels, d, h, w]`.
    pub fn band(&self, i: usize) -> Tensor {
        assert!(i < self.band_count());
        let spatial: usize = self.stacked.shape()[1..].iter().product();
        let c = self.channels;
        let start = i * c * spatial;
        let data = self.stacked.data()[start..start + c * spatial].to_vec();
        let mut shape = vec![c];
        shape.extend_from_slice(&self.stacked.shape()[1..]);
        Tensor::from_vec(&shape, data).unwrap()
    }

    /// Sum of squares over all bands (f64 accumulation).
    pub fn energy(&self) -> f64 {
        self.stacked.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

#[inline(always)]
fn haar_butterfly(v: [f32; 8]) -> [f32; 8] {
    // tensor-product of H = 1/sqrt(2) [[1, 1], [1, -1]] over three axes;
    // index bit order matches (dz, dy, dx)
    let mut out = [0f32; 8];
    for (b, o) in out.iter_mut().enumerate() {
        let mut acc = 0f32;
        for (i, &x) in v.iter().enumerate() {
            // sign = (-1)^(popcount(b & i)) for the sylvester-ordered transform
            let negs = (b & i).count_ones();
            if negs % 2 == 0 {
                acc += x;
            } else {
                acc -= x;
            }
        }
        *o = acc * INV_SQRT8;
    }
    out
}

/// One analysis level on `[n, d, h, w]` (leading dims folded into `n`):
/// output is band-major `[n_bands_major...]`, i.e. `[8, n?]` — callers pass
/// `n = B*C` and receive `[8 * n_per_band]` with band-major stacking handled
/// at the channel level by `level_forward`.
fn level_forward(x: &[f32], n: usize, d: usize, h: usize, w: usize) -> Vec<f32> {
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let band_vol = hd * hh * hw;
    let mut out = vec![0f32; x.len()];
    // out layout: [8, n, hd, hh, hw] band-major over the folded channels
    for ch in 0..n {
        let src = &x[ch * d * h * w..(ch + 1) * d * h * w];
        for z in 0..hd {
            for y in 0..hh {
                for xx in 0..hw {
                    let mut block = [0f32; 8];
                    for (i, bv) in block.iter_mut().enumerate() {
                        let (dz, dy, dx) = (i >> 2 & 1, i >> 1 & 1, i & 1);
                        *bv = src[((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx];
                    }
                    let bands = haar_butterfly(block);
                    let vox = (z * hh + y) * hw + xx;
                    for (b, &val) in bands.iter().enumerate() {
                        out[(b * n + ch) * band_vol + vox] = val;
                    }
                }
            }
        }
    }
    out
}

/// One synthesis level, exact inverse of [`level_forward`].
fn level_inverse(bands: &[f32], n: usize, hd: usize, hh: usize, hw: usize) -> Vec<f32> {
    let (d, h, w) = (hd * 2, hh * 2, hw * 2);
    let band_vol = hd * hh * hw;
    let mut out = vec![0f32; bands.len()];
    for ch in 0..n {
        let dst = &mut out[ch * d * h * w..(ch + 1) * d * h * w];
        for z in 0..hd {
            for y in 0..hh {
                for xx in 0..hw {
                    let vox = (z * hh + y) * hw + xx;
                    let mut coeffs = [0f32; 8];
                    for (b, cv) in coeffs.iter_mut().enumerate() {
                        *cv = bands[(b * n + ch) * band_vol + vox];
                    }
                    let block = haar_butterfly(coeffs); // symmetric orthogonal
                    for (i, &val) in block.iter().enumerate() {
                        let (dz, dy, dx) = (i >> 2 & 1, i >> 1 & 1, i & 1);
                        dst[((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx] = val;
                    }
                }
            }
        }
    }
    out
}

fn check_divisible(op: &'static str, spatial: &[usize], levels: usize) -> Result<(), ShapeError> {
    let m = 1usize << levels;
    if spatial.iter().any(|&e| e == 0 || e % m != 0) {
        return Err(constraint(
            op,
            alloc::format!("spatial extents {spatial:?} must be divisible by 2^{levels}"),
        ));
    }
    Ok(())
}

/// Full packet decomposition of `[C, D, H, W]` into `8^levels` bands.
pub fn dwt3(x: &Tensor, levels: usize) -> Result<SubbandSet, ShapeError> {
    if x.rank() != 4 {
        return Err(constraint("dwt3", "input must be [C, D, H, W]"));
    }
    if levels == 0 {
        return Err(constraint("dwt3", "levels must be >= 1"));
    }
    let c = x.shape()[0];
    let spatial = [x.shape()[1], x.shape()[2], x.shape()[3]];
    check_divisible("dwt3", &spatial, levels)?;
    let mut data = x.data().to_vec();
    let (mut n, mut d, mut h, mut w) = (c, spatial[0], spatial[1], spatial[2]);
    for _ in 0..levels {
        data = level_forward(&data, n, d, h, w);
        n *= 8;
        d /= 2;
        h /= 2;
        w /= 2;
    }
    Ok(SubbandSet {
        level: levels,
        channels: c,
        stacked: Tensor::from_vec(&[n, d, h, w], data)?,
    })
}

/// Exact inverse of [`dwt3`].
pub fn idwt3(set: &SubbandSet) -> Result<Tensor, ShapeError> {
    let sh = set.stacked.shape();
    if sh.len() != 4 {
        return Err(constraint("idwt3", "stacked bands must be [8^L * C, d, h, w]"));
    }
    let expect_n = set.band_count() * set.channels;
    if sh[0] != expect_n {
        return Err(constraint(
            "idwt3",
            alloc::format!("band tensor has {} channels, expected {}", sh[0], expect_n),
        ));
    }
    let mut data = set.stacked.data().to_vec();
    let (mut n, mut d, mut h, mut w) = (sh[0], sh[1], sh[2], sh[3]);
    for _ in 0..set.level {
        n /= 8;
        data = level_inverse(&data, n, d, h, w);
        d *= 2;
        h *= 2;
        w *= 2;
    }
    Tensor::from_vec(&[n, d, h, w], data)
}

impl Tape {
    /// One analysis level on `[B, C, D, H, W]` -> `[B, 8C, D/2, H/2, W/2]`
    /// (band-major channel stacking). Orthonormal, so the backward pass is
    /// the synthesis level.
    pub fn dwt3_level(&self, x: Var) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        if vx.rank() != 5 {
            return Err(constraint("dwt3", "input must be [B, C, D, H, W]"));
        }
        let (b, c, d, h, w) = (
            vx.shape()[0],
            vx.shape()[1],
            vx.shape()[2],
            vx.shape()[3],
            vx.shape()[4],
        );
        check_divisible("dwt3", &[d, h, w], 1)?;
        let bvol = c * d * h * w;
        let mut out = vec![0f32; vx.len()];
        for bb in 0..b {
            let o = level_forward(&vx.data()[bb * bvol..(bb + 1) * bvol], c, d, h, w);
            out[bb * bvol..(bb + 1) * bvol].copy_from_slice(&o);
        }
        let out = Tensor::from_vec(&[b, 8 * c, d / 2, h / 2, w / 2], out)?;
        let requires = self.requires_grad(x);
        let backward = if requires {
            let ix = x.idx;
            let in_shape = vx.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let mut dx = vec![0f32; g.len()];
                for bb in 0..b {
                    let o = level_inverse(&g.data()[bb * bvol..(bb + 1) * bvol], c, d / 2, h / 2, w / 2);
                    dx[bb * bvol..(bb + 1) * bvol].copy_from_slice(&o);
                }
                emit(ix, Tensor::from_vec(&in_shape, dx).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx], backward))
    }

    /// One synthesis level on `[B, 8C, d, h, w]` -> `[B, C, 2d, 2h, 2w]`.
    pub fn idwt3_level(&self, x: Var) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        if vx.rank() != 5 {
            return Err(constraint("idwt3", "input must be [B, 8C, d, h, w]"));
        }
        let (b, c8, d, h, w) = (
            vx.shape()[0],
            vx.shape()[1],
            vx.shape()[2],
            vx.shape()[3],
            vx.shape()[4],
        );
        if c8 % 8 != 0 {
            return Err(constraint("idwt3", "channel count must be divisible by 8"));
        }
        let c = c8 / 8;
        let bvol = c8 * d * h * w;
        let mut out = vec![0f32; vx.len()];
        for bb in 0..b {
            let o = level_inverse(&vx.data()[bb * bvol..(bb + 1) * bvol], c, d, h, w);
            out[bb * bvol..(bb + 1) * bvol].copy_from_slice(&o);
        }
        let out = Tensor::from_vec(&[b, c, 2 * d, 2 * h, 2 * w], out)?;
        let requires = self.requires_grad(x);
        let backward = if requires {
            let ix = x.idx;
            let in_shape = vx.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let mut dx = vec![0f32; g.len()];
                for bb in 0..b {
                    let o = level_forward(&g.data()[bb * bvol..(bb + 1) * bvol], c, 2 * d, 2 * h, 2 * w);
                    dx[bb * bvol..(bb + 1) * bvol].copy_from_slice(&o);
                }
                emit(ix, Tensor::from_vec(&in_shape, dx).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx], backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(shape: &[usize], seed: u32) -> Tensor {
        let mut state = seed | 1;
        Tensor::from_fn(shape, |_| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            (state as f32 / u32::MAX as f32) * 2.0 - 1.0
        })
    }

    #[test]
    fn constant_volume_concentrates_in_lll() {
        let c = 0.75f32;
        let set = dwt3(&Tensor::full(&[1, 4, 4, 4], c), 1).unwrap();
        let lll = set.band(0);
        let expect = 2.0 * (2f32).sqrt() * c;
        for &v in lll.data() {
            assert!((v - expect).abs() < 1e-6);
        }
        for b in 1..8 {
            assert!(set.band(b).abs_max() < 1e-6, "band {b} should vanish");
        }
    }

    #[test]
    fn parseval_energy_preserved() {
        let x = pseudo_random(&[2, 8, 8, 8], 42);
        let in_energy: f64 = x.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        for levels in 1..=3 {
            let set = dwt3(&x, levels).unwrap();
            let out_energy = set.energy();
            let rel = (out_energy - in_energy).abs() / in_energy;
            assert!(rel < 1e-4, "levels {levels}: rel energy drift {rel}");
        }
    }

    /// Explicit 8x8 orthonormal Haar matrix as the separable (Kronecker)
    /// product of H = [[1, 1], [1, -1]] / sqrt(2) over the three axes.
    fn haar_matrix() -> [[f32; 8]; 8] {
        let h = [[1.0f32, 1.0], [1.0, -1.0]];
        let s = 1.0 / (2f32).sqrt();
        let mut m = [[0f32; 8]; 8];
        for bd in 0..2 {
            for bh in 0..2 {
                for bw in 0..2 {
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m[bd * 4 + bh * 2 + bw][dz * 4 + dy * 2 + dx] =
                                    (h[bd][dz] * s) * (h[bh][dy] * s) * (h[bw][dx] * s);
                            }
                        }
                    }
                }
            }
        }
        m
    }

    #[test]
    fn two_cube_matches_matrix_oracle() {
        // 2x2x2 volume holding 0..7 in (z, y, x) raster order
        let x = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let set = dwt3(&x, 1).unwrap();
        let m = haar_matrix();
        for b in 0..8 {
            let expected: f32 = (0..8).map(|i| m[b][i] * i as f32).sum();
            let got = set.band(b).data()[0];
            assert!((got - expected).abs() < 1e-5, "band {b}: {got} vs {expected}");
        }
    }

    #[test]
    fn perfect_reconstruction() {
        for (shape, levels) in [([1usize, 8, 8, 8], 1), ([3, 8, 16, 8], 2)] {
            let x = pseudo_random(&shape, 7 + levels as u32);
            let set = dwt3(&x, levels).unwrap();
            let back = idwt3(&set).unwrap();
            assert!(x.max_abs_diff(&back) <= 1e-5);
        }
    }

    #[test]
    fn zero_bands_give_zero_volume() {
        let set = SubbandSet {
            level: 1,
            channels: 1,
            stacked: Tensor::zeros(&[8, 2, 2, 2]),
        };
        let x = idwt3(&set).unwrap();
        assert_eq!(x.shape(), &[1, 4, 4, 4]);
        assert!(x.abs_max() == 0.0);
    }

    #[test]
    fn impulse_band_synthesises_basis_element() {
        // unit impulse in band 5 (HLH) of a 2x2x2 -> matches matrix row
        let mut data = vec![0f32; 8];
        data[5] = 1.0;
        let set = SubbandSet {
            level: 1,
            channels: 1,
            stacked: Tensor::from_vec(&[8, 1, 1, 1], data).unwrap(),
        };
        let x = idwt3(&set).unwrap();
        let m = haar_matrix();
        for i in 0..8 {
            assert!((x.data()[i] - m[5][i]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_divisible_extents_error() {
        assert!(dwt3(&Tensor::zeros(&[1, 6, 4, 4]), 2).is_err());
        assert!(dwt3(&Tensor::zeros(&[1, 4, 4, 5]), 1).is_err());
    }

    #[test]
    fn linearity() {
        let a = pseudo_random(&[1, 4, 4, 4], 3);
        let b = pseudo_random(&[1, 4, 4, 4], 4);
        let sum = a.add(&b).unwrap();
        let da = dwt3(&a, 1).unwrap().stacked;
        let db = dwt3(&b, 1).unwrap().stacked;
        let dsum = dwt3(&sum, 1).unwrap().stacked;
        assert!(dsum.max_abs_diff(&da.add(&db).unwrap()) < 1e-5);
        let scaled = dwt3(&a.scale(3.0), 1).unwrap().stacked;
        assert!(scaled.max_abs_diff(&da.scale(3.0)) < 1e-5);
    }

    #[test]
    fn tape_levels_roundtrip_and_structure() {
        let tape = Tape::new();
        let xt = pseudo_random(&[2, 3, 4, 4, 4], 9);
        let x = tape.leaf(xt.clone(), true);
        let bands = tape.dwt3_level(x).unwrap();
        assert_eq!(tape.shape_of(bands), vec![2, 24, 2, 2, 2]);
        let back = tape.idwt3_level(bands).unwrap();
        assert!(tape.value(back).max_abs_diff(&xt) <= 1e-5);
        // adjoint-of-orthonormal check: grad of sum(dwt(x)) equals idwt(ones)
        let s = tape.sum(bands);
        let grads = tape.backward(s).unwrap();
        let ones = Tensor::full(&[2, 24, 2, 2, 2], 1.0);
        let tape2 = Tape::new();
        let o = tape2.leaf(ones, false);
        let expect = tape2.idwt3_level(o).unwrap();
        assert!(grads.get(x).unwrap().max_abs_diff(&tape2.value(expect)) < 1e-6);
    }
}
