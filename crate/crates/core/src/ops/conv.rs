//! 3x3x3 volumetric convolution with zero same-padding, stride 1 or 2.
//!
//! Public contract is channels-first `[B, C, D, H, W]`; internally data is
//! permuted channels-last so the inner loop is an axpy over the contiguous
//! output-channel axis. Threads own disjoint `(batch, depth)` output planes,
//! so results do not depend on the thread count.

use alloc::vec;
use alloc::vec::Vec;

use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::{constraint, ShapeError, Tensor};

#[derive(Clone, Copy)]
struct ConvDims {
    b: usize,
    d: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    od: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

fn out_extent(n: usize, stride: usize) -> usize {
    // padding 1, kernel 3
    (n + 2 - 3) / stride + 1
}

/// `[Co, Ci, 3, 3, 3]` -> `[tap][ci][co]`
fn weights_tap_ci_co(w: &[f32], co: usize, ci: usize) -> Vec<f32> {
    let mut out = vec![0f32; 27 * ci * co];
    for c_o in 0..co {
        for c_i in 0..ci {
            for tap in 0..27 {
                out[(tap * ci + c_i) * co + c_o] = w[(c_o * ci + c_i) * 27 + tap];
            }
        }
    }
    out
}

/// `[Co, Ci, 3, 3, 3]` -> `[flipped tap][co][ci]`
fn weights_flip_co_ci(w: &[f32], co: usize, ci: usize) -> Vec<f32> {
    let mut out = vec![0f32; 27 * ci * co];
    for c_o in 0..co {
        for c_i in 0..ci {
            for tap in 0..27 {
                out[((26 - tap) * co + c_o) * ci + c_i] = w[(c_o * ci + c_i) * 27 + tap];
            }
        }
    }
    out
}

/// `[Co, Ci, 3, 3, 3]` -> `[tap][co][ci]`
fn weights_tap_co_ci(w: &[f32], co: usize, ci: usize) -> Vec<f32> {
    let mut out = vec![0f32; 27 * ci * co];
    for c_o in 0..co {
        for c_i in 0..ci {
            for tap in 0..27 {
                out[(tap * co + c_o) * ci + c_i] = w[(c_o * ci + c_i) * 27 + tap];
            }
        }
    }
    out
}

#[inline(always)]
fn accumulate_taps(acc: &mut [f32], xs: &[f32], wt: &[f32]) {
    let co = acc.len();
    for (&xv, wrow) in xs.iter().zip(wt.chunks_exact(co)) {
        if xv != 0.0 {
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
    }
}

/// Channels-last forward: `x [B, D, H, W, Ci]`, `w_tco [27][Ci][Co]`.
fn conv_fwd(x: &[f32], w_tco: &[f32], bias: Option<&[f32]>, dm: ConvDims, out: &mut [f32]) {
    let (h, w, ci, co, s) = (dm.h, dm.w, dm.ci, dm.co, dm.stride);
    let x_bstride = dm.d * h * w * ci;
    let out_plane = dm.oh * dm.ow * co;
    let cico = ci * co;
    // x-offsets of the 27 taps relative to the window corner (z-1, y-1, x-1)
    let mut tap_off = [0usize; 27];
    for dz in 0..3 {
        for dy in 0..3 {
            for dx in 0..3 {
                tap_off[(dz * 3 + dy) * 3 + dx] = ((dz * h + dy) * w + dx) * ci;
            }
        }
    }
    par::chunks_mut(out, out_plane, |chunk, out_c| {
        let b = chunk / dm.od;
        let oz = chunk % dm.od;
        let xb = &x[b * x_bstride..(b + 1) * x_bstride];
        let mut acc = vec![0f32; co];
        for oy in 0..dm.oh {
            for ox in 0..dm.ow {
                let (cz, cy, cx) = (oz * s, oy * s, ox * s);
                match bias {
                    Some(bs) => acc.copy_from_slice(bs),
                    None => acc.fill(0.0),
                }
                let interior = s == 1
                    && cz >= 1
                    && cz + 1 < dm.d
                    && cy >= 1
                    && cy + 1 < h
                    && cx >= 1
                    && cx + 1 < w;
                if interior {
                    let corner = (((cz - 1) * h + (cy - 1)) * w + (cx - 1)) * ci;
                    for (tap, &toff) in tap_off.iter().enumerate() {
                        let xs = &xb[corner + toff..corner + toff + ci];
                        let wt = &w_tco[tap * cico..(tap + 1) * cico];
                        accumulate_taps(&mut acc, xs, wt);
                    }
                } else {
                    for dz in 0..3usize {
                        let z = (cz + dz).wrapping_sub(1);
                        if z >= dm.d {
                            continue;
                        }
                        for dy in 0..3usize {
                            let y = (cy + dy).wrapping_sub(1);
                            if y >= h {
                                continue;
                            }
                            for dx in 0..3usize {
                                let xx = (cx + dx).wrapping_sub(1);
                                if xx >= w {
                                    continue;
                                }
                                let tap = (dz * 3 + dy) * 3 + dx;
                                let xoff = ((z * h + y) * w + xx) * ci;
                                let xs = &xb[xoff..xoff + ci];
                                let wt = &w_tco[tap * cico..(tap + 1) * cico];
                                accumulate_taps(&mut acc, xs, wt);
                            }
                        }
                    }
                }
                let dst = ((oy * dm.ow) + ox) * co;
                out_c[dst..dst + co].copy_from_slice(&acc);
            }
        }
    });
}

/// dW accumulation: `x` channels-last input, `g` channels-last output grad.
/// Parallel over taps; each tap sums voxels in a fixed order.
fn conv_dw(x: &[f32], g: &[f32], dm: ConvDims) -> Vec<f32> {
    let (h, w, ci, co, s) = (dm.h, dm.w, dm.ci, dm.co, dm.stride);
    let x_bstride = dm.d * h * w * ci;
    let g_bstride = dm.od * dm.oh * dm.ow * co;
    let mut dw = vec![0f32; 27 * ci * co];
    par::chunks_mut(&mut dw, ci * co, |tap, dwt| {
        let dz = tap / 9;
        let dy = (tap / 3) % 3;
        let dx = tap % 3;
        for b in 0..dm.b {
            let xb = &x[b * x_bstride..(b + 1) * x_bstride];
            let gb = &g[b * g_bstride..(b + 1) * g_bstride];
            for oz in 0..dm.od {
                let z = (oz * s + dz).wrapping_sub(1);
                if z >= dm.d {
                    continue;
                }
                for oy in 0..dm.oh {
                    let y = (oy * s + dy).wrapping_sub(1);
                    if y >= h {
                        continue;
                    }
                    for ox in 0..dm.ow {
                        let xx = (ox * s + dx).wrapping_sub(1);
                        if xx >= w {
                            continue;
                        }
                        let xs = &xb[((z * h + y) * w + xx) * ci..][..ci];
                        let gs = &gb[((oz * dm.oh + oy) * dm.ow + ox) * co..][..co];
                        for (i, &xv) in xs.iter().enumerate() {
                            if xv != 0.0 {
                                let drow = &mut dwt[i * co..(i + 1) * co];
                                for (d, &gv) in drow.iter_mut().zip(gs) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dw
}

/// dX for stride 2 (stride 1 reuses `conv_fwd` with flipped weights).
/// `w_t` is `[tap][co][ci]`.
fn conv_dx_stride2(g: &[f32], w_t: &[f32], dm: ConvDims) -> Vec<f32> {
    let (h, w, ci, co) = (dm.h, dm.w, dm.ci, dm.co);
    let g_bstride = dm.od * dm.oh * dm.ow * co;
    let x_plane = h * w * ci;
    let mut dx = vec![0f32; dm.b * dm.d * x_plane];
    par::chunks_mut(&mut dx, x_plane, |chunk, dx_c| {
        let b = chunk / dm.d;
        let z = chunk % dm.d;
        let gb = &g[b * g_bstride..(b + 1) * g_bstride];
        for y in 0..h {
            for xx in 0..w {
                let acc = &mut dx_c[(y * w + xx) * ci..][..ci];
                for dz in 0..3usize {
                    if z + 1 < dz {
                        continue;
                    }
                    let tz = z + 1 - dz;
                    if tz % 2 != 0 || tz / 2 >= dm.od {
                        continue;
                    }
                    for dy in 0..3usize {
                        if y + 1 < dy {
                            continue;
                        }
                        let ty = y + 1 - dy;
                        if ty % 2 != 0 || ty / 2 >= dm.oh {
                            continue;
                        }
                        for dxk in 0..3usize {
                            if xx + 1 < dxk {
                                continue;
                            }
                            let tx = xx + 1 - dxk;
                            if tx % 2 != 0 || tx / 2 >= dm.ow {
                                continue;
                            }
                            let tap = (dz * 3 + dy) * 3 + dxk;
                            let gs = &gb[(((tz / 2) * dm.oh + ty / 2) * dm.ow + tx / 2) * co..][..co];
                            let wt = &w_t[tap * co * ci..(tap + 1) * co * ci];
                            for (&gv, wrow) in gs.iter().zip(wt.chunks_exact(ci)) {
                                if gv != 0.0 {
                                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                                        *a += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn to_channels_last(t: &Tensor) -> Tensor {
    t.permute(&[0, 2, 3, 4, 1]).unwrap()
}

fn to_channels_first(t: &Tensor) -> Tensor {
    t.permute(&[0, 4, 1, 2, 3]).unwrap()
}

impl Tape {
    /// 3D convolution: `x [B, Ci, D, H, W]`, `kernel [Co, Ci, 3, 3, 3]`,
    /// `bias [Co]`, zero same-padding. Stride 1 preserves the spatial shape;
    /// stride 2 halves it (rounding up).
    pub fn conv3(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        let vk = self.value(kernel);
        if vx.rank() != 5 {
            return Err(constraint("conv3", "input must be [B, C, D, H, W]"));
        }
        if vk.rank() != 5 || vk.shape()[2..] != [3, 3, 3] {
            return Err(constraint("conv3", "kernel must be [Co, Ci, 3, 3, 3]"));
        }
        if vk.shape()[1] != vx.shape()[1] {
            return Err(ShapeError::Mismatch {
                op: "conv3",
                expected: vec![vk.shape()[0], vx.shape()[1], 3, 3, 3],
                got: vk.shape().to_vec(),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(constraint("conv3", "stride must be 1 or 2"));
        }
        if vx.shape()[2..].iter().any(|&e| e == 0) {
            return Err(constraint("conv3", "spatial extents must be >= 1"));
        }
        let (b, ci, d, h, w) = (
            vx.shape()[0],
            vx.shape()[1],
            vx.shape()[2],
            vx.shape()[3],
            vx.shape()[4],
        );
        let co = vk.shape()[0];
        let vb = match bias {
            Some(bv) => {
                let t = self.value(bv);
                if t.shape() != [co] {
                    return Err(ShapeError::Mismatch {
                        op: "conv3",
                        expected: vec![co],
                        got: t.shape().to_vec(),
                    });
                }
                Some(t)
            }
            None => None,
        };
        let dm = ConvDims {
            b,
            d,
            h,
            w,
            ci,
            co,
            od: out_extent(d, stride),
            oh: out_extent(h, stride),
            ow: out_extent(w, stride),
            stride,
        };
        let x_cl = to_channels_last(&vx);
        let w_tco = weights_tap_ci_co(vk.data(), co, ci);
        let mut out_cl = vec![0f32; b * dm.od * dm.oh * dm.ow * co];
        conv_fwd(
            x_cl.data(),
            &w_tco,
            vb.as_ref().map(|t| t.data()),
            dm,
            &mut out_cl,
        );
        let out_cl = Tensor::from_vec(&[b, dm.od, dm.oh, dm.ow, co], out_cl)?;
        let out = to_channels_first(&out_cl);

        let mut vars = vec![x, kernel];
        if let Some(bv) = bias {
            vars.push(bv);
        }
        let requires = self.any_requires(&vars);
        let backward = if requires {
            let needs: Vec<bool> = vars.iter().map(|&v| self.requires_grad(v)).collect();
            let idxs: Vec<usize> = vars.iter().map(|v| v.idx).collect();
            let k_shape = vk.shape().to_vec();
            let kdata = vk.clone();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let g_cl = to_channels_last(g);
                if needs[0] {
                    let dx_cl = if dm.stride == 1 {
                        let w_flip = weights_flip_co_ci(kdata.data(), co, ci);
                        // same-shape correlation with flipped taps and co/ci swapped
                        let dm_back = ConvDims {
                            ci: co,
                            co: ci,
                            ..dm
                        };
                        let mut dx = vec![0f32; dm.b * d * h * w * ci];
                        conv_fwd(g_cl.data(), &w_flip, None, dm_back, &mut dx);
                        dx
                    } else {
                        let w_t = weights_tap_co_ci(kdata.data(), co, ci);
                        conv_dx_stride2(g_cl.data(), &w_t, dm)
                    };
                    let dx_cl = Tensor::from_vec(&[dm.b, d, h, w, ci], dx_cl).unwrap();
                    emit(idxs[0], to_channels_first(&dx_cl));
                }
                if needs[1] {
                    let dw_tco = conv_dw(x_cl.data(), g_cl.data(), dm);
                    // back to [Co, Ci, 3, 3, 3]
                    let mut dk = vec![0f32; co * ci * 27];
                    for c_o in 0..co {
                        for c_i in 0..ci {
                            for tap in 0..27 {
                                dk[(c_o * ci + c_i) * 27 + tap] = dw_tco[(tap * ci + c_i) * co + c_o];
                            }
                        }
                    }
                    emit(idxs[1], Tensor::from_vec(&k_shape, dk).unwrap());
                }
                if needs.len() > 2 && needs[2] {
                    let mut db = vec![0f32; co];
                    for gs in g_cl.data().chunks_exact(co) {
                        for (d, &gv) in db.iter_mut().zip(gs) {
                            *d += gv;
                        }
                    }
                    emit(idxs[2], Tensor::from_vec(&[co], db).unwrap());
                }
            }))
        } else {
            None
        };
        let input_idxs: Vec<usize> = vars.iter().map(|v| v.idx).collect();
        Ok(self.push(out, requires, input_idxs, backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn delta_kernel(c: usize) -> Tensor {
        // identity: center weight 1 on the matching channel, rest 0
        let mut k = vec![0f32; c * c * 27];
        for ch in 0..c {
            k[(ch * c + ch) * 27 + 13] = 1.0;
        }
        Tensor::from_vec(&[c, c, 3, 3, 3], k).unwrap()
    }

    /// Brute-force triple-loop convolution oracle, channels-first.
    fn conv_oracle(x: &Tensor, k: &Tensor, bias: &[f32], stride: usize) -> Tensor {
        let (b, ci, d, h, w) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
            x.shape()[4],
        );
        let co = k.shape()[0];
        let (od, oh, ow) = (
            out_extent(d, stride),
            out_extent(h, stride),
            out_extent(w, stride),
        );
        Tensor::from_fn(&[b, co, od, oh, ow], |idx| {
            let (bb, c_o, oz, oy, ox) = (idx[0], idx[1], idx[2], idx[3], idx[4]);
            let mut acc = bias[c_o] as f64;
            for c_i in 0..ci {
                for dz in 0..3usize {
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let z = (oz * stride + dz) as isize - 1;
                            let y = (oy * stride + dy) as isize - 1;
                            let xx = (ox * stride + dx) as isize - 1;
                            if z < 0 || y < 0 || xx < 0 {
                                continue;
                            }
                            let (z, y, xx) = (z as usize, y as usize, xx as usize);
                            if z >= d || y >= h || xx >= w {
                                continue;
                            }
                            let xv = x.at(&[bb, c_i, z, y, xx]) as f64;
                            let wv = k.at(&[c_o, c_i, dz, dy, dx]) as f64;
                            acc += xv * wv;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn delta_kernel_is_identity() {
        let tape = Tape::new();
        let xt = Tensor::from_fn(&[1, 2, 3, 4, 5], |idx| {
            (idx[1] * 100 + idx[2] * 20 + idx[3] * 5 + idx[4]) as f32 * 0.1 - 3.0
        });
        let x = tape.leaf(xt.clone(), false);
        let k = tape.constant(delta_kernel(2));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv3(x, k, Some(b), 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), xt.shape());
        assert_eq!(v.data(), xt.data());
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5, 5], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let y = tape.conv3(x, k, None, 1).unwrap();
        let v = tape.value(y);
        // interior voxel sums 3^3 ones
        assert_eq!(v.at(&[0, 0, 2, 2, 2]), 27.0);
        // corner voxel only sees the 2x2x2 valid part
        assert_eq!(v.at(&[0, 0, 0, 0, 0]), 8.0);
    }

    fn pseudo_random(shape: &[usize], seed: u32) -> Tensor {
        let mut state = seed;
        Tensor::from_fn(shape, |_| {
            // xorshift, mapped to [-1, 1]
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            (state as f32 / u32::MAX as f32) * 2.0 - 1.0
        })
    }

    #[test]
    fn random_case_matches_triple_loop_oracle() {
        let tape = Tape::new();
        let xt = pseudo_random(&[1, 1, 4, 4, 4], 0xdecade);
        let kt = pseudo_random(&[1, 1, 3, 3, 3], 0xbeef);
        let x = tape.constant(xt.clone());
        let k = tape.constant(kt.clone());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3(x, k, Some(b), 1).unwrap();
        let oracle = conv_oracle(&xt, &kt, &[0.0], 1);
        assert!(tape.value(y).max_abs_diff(&oracle) <= 1e-5);
    }

    #[test]
    fn multi_channel_strided_matches_oracle() {
        let tape = Tape::new();
        let xt = pseudo_random(&[2, 3, 5, 6, 7], 0x5eed);
        let kt = pseudo_random(&[4, 3, 3, 3, 3], 0xf00d);
        let bt = pseudo_random(&[4], 0x0b1a5);
        for stride in [1usize, 2] {
            let x = tape.constant(xt.clone());
            let k = tape.constant(kt.clone());
            let b = tape.constant(bt.clone());
            let y = tape.conv3(x, k, Some(b), stride).unwrap();
            let oracle = conv_oracle(&xt, &kt, bt.data(), stride);
            assert_eq!(tape.shape_of(y), oracle.shape().to_vec());
            assert!(tape.value(y).max_abs_diff(&oracle) <= 1e-4);
        }
    }

    #[test]
    fn channel_mismatch_is_structured_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
        match tape.conv3(x, k, None, 1) {
            Err(ShapeError::Mismatch { op, .. }) => assert_eq!(op, "conv3"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
