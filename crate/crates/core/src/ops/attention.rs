//! Window-based multi-head self-attention.
//!
//! Feature volumes are zero-padded up to the window grid, partitioned into
//! non-overlapping windows, and attended per window with tokens = per-voxel
//! channel vectors (+ sinusoidal position encoding along the three axes).
//! Padded tokens are masked out of the softmax and cropped afterwards.
//!
//! The attention kernel is fused: softmax probabilities are recomputed during
//! the backward pass, so no `[T, T]` map ever lives on the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::ops::shape::RowMap;
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::{constraint, ShapeError, Tensor};

const MASK_OFF: f32 = -1e30;

/// Sinusoidal encoding computed independently along each spatial axis and
/// concatenated channel-wise: `[3 * dims_per_axis, D, H, W]`. Within an axis
/// block, channel `2i` is `sin(p * w_i)` and `2i + 1` is `cos(p * w_i)` with
/// `w_i = 10000^(-2i / dims_per_axis)`; a deterministic function of shape.
pub fn position_encoding(shape: (usize, usize, usize), dims_per_axis: usize) -> Result<Tensor, ShapeError> {
    if dims_per_axis == 0 || dims_per_axis % 2 != 0 {
        return Err(constraint("position_encoding", "dims_per_axis must be positive and even"));
    }
    let (d, h, w) = shape;
    let c = 3 * dims_per_axis;
    let mut out = vec![0f32; c * d * h * w];
    let vol = d * h * w;
    for axis in 0..3 {
        for i in 0..dims_per_axis / 2 {
            let omega = fmath::powf(10000.0, -((2 * i) as f32) / dims_per_axis as f32);
            let ch_sin = axis * dims_per_axis + 2 * i;
            let ch_cos = ch_sin + 1;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let p = [z, y, x][axis] as f32;
                        let vox = (z * h + y) * w + x;
                        out[ch_sin * vol + vox] = fmath::sin(p * omega);
                        out[ch_cos * vol + vox] = fmath::cos(p * omega);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, d, h, w], out)
}

/// Precomputed windowing for one `(batch, channels, spatial)` combination:
/// pad + partition and crop + unpartition row maps, the key mask, and the
/// partitioned position-encoding tokens.
pub struct WindowPlan {
    pub b: usize,
    pub c: usize,
    pub spatial: (usize, usize, usize),
    pub window: (usize, usize, usize),
    /// windows per batch element
    pub n_windows: usize,
    /// tokens per window
    pub tokens: usize,
    partition: RowMap,
    unpartition: RowMap,
    /// additive softmax mask `[B * NW, T]`: 0 for valid keys, -1e30 for pads
    mask: Tensor,
    /// `[B * NW, T, C]` constant token encoding (zeros when disabled)
    pe_tokens: Option<Tensor>,
}

fn ceil_to(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

impl WindowPlan {
    pub fn new(
        b: usize,
        c: usize,
        spatial: (usize, usize, usize),
        window: (usize, usize, usize),
        with_position_encoding: bool,
    ) -> Result<Self, ShapeError> {
        let (d, h, w) = spatial;
        let (wd, wh, ww) = window;
        if wd == 0 || wh == 0 || ww == 0 {
            return Err(constraint("window_msa", "window extents must be positive"));
        }
        let (pd, ph, pw) = (ceil_to(d, wd), ceil_to(h, wh), ceil_to(w, ww));
        let grid = (pd / wd, ph / wh, pw / ww);
        let n_windows = grid.0 * grid.1 * grid.2;
        let tokens = wd * wh * ww;
        let vol = d * h * w;

        // partition: out row (b, win, t) -> input voxel row or -1 (padding)
        let mut part = Vec::with_capacity(b * n_windows * tokens);
        let mut mask = vec![0f32; b * n_windows * tokens];
        for bb in 0..b {
            for gz in 0..grid.0 {
                for gy in 0..grid.1 {
                    for gx in 0..grid.2 {
                        for tz in 0..wd {
                            for ty in 0..wh {
                                for tx in 0..ww {
                                    let (z, y, x) = (gz * wd + tz, gy * wh + ty, gx * ww + tx);
                                    let out_i = part.len();
                                    if z < d && y < h && x < w {
                                        part.push((bb * vol + (z * h + y) * w + x) as i64);
                                    } else {
                                        part.push(-1);
                                        mask[out_i] = MASK_OFF;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let partition = RowMap::new(part, b * vol, c, true);
        let mask = Tensor::from_vec(&[b * n_windows, tokens], mask)?;

        // unpartition: out voxel row (b, z, y, x) -> partitioned token row
        let mut unpart = Vec::with_capacity(b * vol);
        for bb in 0..b {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let (gz, tz) = (z / wd, z % wd);
                        let (gy, ty) = (y / wh, y % wh);
                        let (gx, tx) = (x / ww, x % ww);
                        let win = (gz * grid.1 + gy) * grid.2 + gx;
                        let tok = (tz * wh + ty) * ww + tx;
                        unpart.push(((bb * n_windows + win) * tokens + tok) as i64);
                    }
                }
            }
        }
        let unpartition = RowMap::new(unpart, b * n_windows * tokens, c, true);

        let pe_tokens = if with_position_encoding {
            // dims per axis: C/3 rounded down to even; remaining channels zero
            let dpa = (c / 3) & !1usize;
            let mut pe_rows = vec![0f32; b * n_windows * tokens * c];
            if dpa > 0 {
                let pe = position_encoding((pd, ph, pw), dpa)?;
                let pe_c = 3 * dpa;
                let pvol = pd * ph * pw;
                let ped = pe.data();
                for bb in 0..b {
                    for win in 0..n_windows {
                        let gz = win / (grid.1 * grid.2);
                        let gy = (win / grid.2) % grid.1;
                        let gx = win % grid.2;
                        for tok in 0..tokens {
                            let tz = tok / (wh * ww);
                            let ty = (tok / ww) % wh;
                            let tx = tok % ww;
                            let (z, y, x) = (gz * wd + tz, gy * wh + ty, gx * ww + tx);
                            let vox = (z * ph + y) * pw + x;
                            let row = ((bb * n_windows + win) * tokens + tok) * c;
                            for ch in 0..pe_c {
                                pe_rows[row + ch] = ped[ch * pvol + vox];
                            }
                        }
                    }
                }
            }
            Some(Tensor::from_vec(&[b * n_windows, tokens, c], pe_rows)?)
        } else {
            None
        };

        Ok(WindowPlan {
            b,
            c,
            spatial,
            window,
            n_windows,
            tokens,
            partition,
            unpartition,
            mask,
            pe_tokens,
        })
    }
}

/// Q/K/V/output projection parameters bound on a tape (`[C, C]` weights,
/// `[C]` biases).
#[derive(Clone, Copy)]
pub struct AttentionProjections {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn attention_window(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    mask: &[f32],
    t: usize,
    dh: usize,
    scale: f32,
    probs: &mut [f32],
    out: &mut [f32],
) {
    // probs[t1, t2] = softmax over t2 of scale * <q_t1, k_t2> + mask[t2]
    for t1 in 0..t {
        let qrow = &q[t1 * dh..(t1 + 1) * dh];
        let prow = &mut probs[t1 * t..(t1 + 1) * t];
        let mut maxv = f32::NEG_INFINITY;
        for t2 in 0..t {
            let krow = &k[t2 * dh..(t2 + 1) * dh];
            let mut dot = 0f32;
            for (a, b) in qrow.iter().zip(krow) {
                dot += a * b;
            }
            let logit = dot * scale + mask[t2];
            prow[t2] = logit;
            maxv = maxv.max(logit);
        }
        let mut sum = 0f32;
        for p in prow.iter_mut() {
            *p = fmath::exp(*p - maxv);
            sum += *p;
        }
        let inv = 1.0 / sum;
        for p in prow.iter_mut() {
            *p *= inv;
        }
    }
    for t1 in 0..t {
        let orow = &mut out[t1 * dh..(t1 + 1) * dh];
        orow.fill(0.0);
        let prow = &probs[t1 * t..(t1 + 1) * t];
        for (t2, &p) in prow.iter().enumerate() {
            if p != 0.0 {
                let vrow = &v[t2 * dh..(t2 + 1) * dh];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
}

impl Tape {
    /// Fused scaled dot-product attention over independent windows.
    /// `q, k, v: [N, heads, T, dh]`, `mask: [N, T]` additive key mask.
    pub fn attention_core(
        &self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Tensor,
        scale: f32,
    ) -> Result<Var, ShapeError> {
        let vq = self.value(q);
        let vk = self.value(k);
        let vv = self.value(v);
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || vq.rank() != 4 {
            return Err(ShapeError::Mismatch {
                op: "attention_core",
                expected: vq.shape().to_vec(),
                got: if vq.shape() != vk.shape() {
                    vk.shape().to_vec()
                } else {
                    vv.shape().to_vec()
                },
            });
        }
        let (n, heads, t, dh) = (vq.shape()[0], vq.shape()[1], vq.shape()[2], vq.shape()[3]);
        if mask.shape() != [n, t] {
            return Err(ShapeError::Mismatch {
                op: "attention_core",
                expected: vec![n, t],
                got: mask.shape().to_vec(),
            });
        }
        let win = heads * t * dh;
        let mut out = vec![0f32; vq.len()];
        {
            let (qd, kd, vd, md) = (vq.data(), vk.data(), vv.data(), mask.data());
            par::chunks_mut(&mut out, win, |nn, out_n| {
                let mrow = &md[nn * t..(nn + 1) * t];
                let mut probs = vec![0f32; t * t];
                for hh in 0..heads {
                    let base = nn * win + hh * t * dh;
                    let seg = hh * t * dh;
                    attention_window(
                        &qd[base..base + t * dh],
                        &kd[base..base + t * dh],
                        &vd[base..base + t * dh],
                        mrow,
                        t,
                        dh,
                        scale,
                        &mut probs,
                        &mut out_n[seg..seg + t * dh],
                    );
                }
            });
        }
        let out = Tensor::from_vec(vq.shape(), out)?;
        let requires = self.any_requires(&[q, k, v]);
        let backward = if requires {
            let needs = [
                self.requires_grad(q),
                self.requires_grad(k),
                self.requires_grad(v),
            ];
            let idxs = [q.idx, k.idx, v.idx];
            let mask = mask.clone();
            let shape = vq.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let (qd, kd, vd, md, gd) = (vq.data(), vk.data(), vv.data(), mask.data(), g.data());
                let mut dq = vec![0f32; qd.len()];
                let mut dk = vec![0f32; qd.len()];
                let mut dv = vec![0f32; qd.len()];
                // threads own one window triple (dq, dk, dv are sliced alike)
                let mut fused: Vec<(usize, (Vec<f32>, Vec<f32>, Vec<f32>))> = Vec::new();
                par_windows(n, |nn| {
                    let mrow = &md[nn * t..(nn + 1) * t];
                    let mut probs = vec![0f32; t * t];
                    let mut dlog = vec![0f32; t * t];
                    let mut dqw = vec![0f32; win];
                    let mut dkw = vec![0f32; win];
                    let mut dvw = vec![0f32; win];
                    for hh in 0..heads {
                        let base = nn * win + hh * t * dh;
                        let seg = hh * t * dh;
                        let (qs, ks, vs, gs) = (
                            &qd[base..base + t * dh],
                            &kd[base..base + t * dh],
                            &vd[base..base + t * dh],
                            &gd[base..base + t * dh],
                        );
                        // recompute probabilities
                        let mut scratch_out = vec![0f32; t * dh];
                        attention_window(qs, ks, vs, mrow, t, dh, scale, &mut probs, &mut scratch_out);
                        // dv[t2] += sum_t1 p[t1,t2] g[t1]; dlogits via softmax VJP
                        for t1 in 0..t {
                            let prow = &probs[t1 * t..(t1 + 1) * t];
                            let grow = &gs[t1 * dh..(t1 + 1) * dh];
                            let mut dp_dot = 0f64;
                            let drow = &mut dlog[t1 * t..(t1 + 1) * t];
                            for t2 in 0..t {
                                let p = prow[t2];
                                let vrow = &vs[t2 * dh..(t2 + 1) * dh];
                                let mut dp = 0f32;
                                for (a, b) in grow.iter().zip(vrow) {
                                    dp += a * b;
                                }
                                drow[t2] = dp;
                                dp_dot += (p * dp) as f64;
                                if p != 0.0 {
                                    let dvrow = &mut dvw[seg + t2 * dh..seg + (t2 + 1) * dh];
                                    for (dvv, &gv) in dvrow.iter_mut().zip(grow) {
                                        *dvv += p * gv;
                                    }
                                }
                            }
                            for t2 in 0..t {
                                drow[t2] = prow[t2] * (drow[t2] - dp_dot as f32);
                            }
                        }
                        // dq[t1] = scale * sum_t2 dlog[t1,t2] k[t2]
                        // dk[t2] = scale * sum_t1 dlog[t1,t2] q[t1]
                        for t1 in 0..t {
                            let drow = &dlog[t1 * t..(t1 + 1) * t];
                            let dqrow = &mut dqw[seg + t1 * dh..seg + (t1 + 1) * dh];
                            for t2 in 0..t {
                                let dl = drow[t2] * scale;
                                if dl != 0.0 {
                                    let krow = &ks[t2 * dh..(t2 + 1) * dh];
                                    for (a, &b) in dqrow.iter_mut().zip(krow) {
                                        *a += dl * b;
                                    }
                                }
                            }
                        }
                        for t2 in 0..t {
                            let dkrow = &mut dkw[seg + t2 * dh..seg + (t2 + 1) * dh];
                            for t1 in 0..t {
                                let dl = dlog[t1 * t + t2] * scale;
                                if dl != 0.0 {
                                    let qrow = &qs[t1 * dh..(t1 + 1) * dh];
                                    for (a, &b) in dkrow.iter_mut().zip(qrow) {
                                        *a += dl * b;
                                    }
                                }
                            }
                        }
                    }
                    (dqw, dkw, dvw)
                }, &mut fused);
                for (nn, (dqw, dkw, dvw)) in fused {
                    dq[nn * win..(nn + 1) * win].copy_from_slice(&dqw);
                    dk[nn * win..(nn + 1) * win].copy_from_slice(&dkw);
                    dv[nn * win..(nn + 1) * win].copy_from_slice(&dvw);
                }
                if needs[0] {
                    emit(idxs[0], Tensor::from_vec(&shape, dq).unwrap());
                }
                if needs[1] {
                    emit(idxs[1], Tensor::from_vec(&shape, dk).unwrap());
                }
                if needs[2] {
                    emit(idxs[2], Tensor::from_vec(&shape, dv).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![q.idx, k.idx, v.idx], backward))
    }

    /// Windowed multi-head self-attention over `x [B, C, D, H, W]` per the
    /// plan's window grid. Zero-pads to the grid, masks padded tokens out of
    /// the softmax, crops back; output shape equals the input shape.
    pub fn window_msa(
        &self,
        x: Var,
        heads: usize,
        plan: &WindowPlan,
        proj: &AttentionProjections,
    ) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        if vx.rank() != 5 {
            return Err(constraint("window_msa", "input must be [B, C, D, H, W]"));
        }
        let (b, c, d, h, w) = (
            vx.shape()[0],
            vx.shape()[1],
            vx.shape()[2],
            vx.shape()[3],
            vx.shape()[4],
        );
        if (b, c) != (plan.b, plan.c) || (d, h, w) != plan.spatial {
            return Err(constraint("window_msa", "plan does not match input shape"));
        }
        if heads == 0 || c % heads != 0 {
            return Err(constraint(
                "window_msa",
                alloc::format!("heads ({heads}) must divide channels ({c})"),
            ));
        }
        let dh = c / heads;
        let t = plan.tokens;
        let nw = b * plan.n_windows;

        let cl = self.permute(x, &[0, 2, 3, 4, 1])?;
        let rows = self.reshape(cl, &[b * d * h * w, c])?;
        let mut tokens = self.remap_rows(rows, &plan.partition, &[nw, t, c])?;
        if let Some(pe) = &plan.pe_tokens {
            let pe_const = self.constant(pe.clone());
            tokens = self.add(tokens, pe_const)?;
        }
        let split = |tape: &Tape, y: Var| -> Result<Var, ShapeError> {
            let y = tape.reshape(y, &[nw, t, heads, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = split(self, self.linear(tokens, proj.wq, Some(proj.bq))?)?;
        let k = split(self, self.linear(tokens, proj.wk, Some(proj.bk))?)?;
        let v = split(self, self.linear(tokens, proj.wv, Some(proj.bv))?)?;
        let scale = 1.0 / fmath::sqrt(dh as f32);
        let attn = self.attention_core(q, k, v, &plan.mask, scale)?;
        let merged = self.permute(attn, &[0, 2, 1, 3])?;
        let merged = self.reshape(merged, &[nw, t, c])?;
        let o = self.linear(merged, proj.wo, Some(proj.bo))?;
        let o_rows = self.reshape(o, &[nw * t, c])?;
        let back = self.remap_rows(o_rows, &plan.unpartition, &[b, d, h, w, c])?;
        self.permute(back, &[0, 4, 1, 2, 3])
    }
}

#[cfg(feature = "parallel")]
fn par_windows<T: Send>(
    n: usize,
    f: impl Fn(usize) -> T + Sync,
    out: &mut Vec<(usize, T)>,
) {
    use rayon::prelude::*;
    *out = (0..n).into_par_iter().map(|i| (i, f(i))).collect();
}

#[cfg(not(feature = "parallel"))]
fn par_windows<T: Send>(
    n: usize,
    f: impl Fn(usize) -> T + Sync,
    out: &mut Vec<(usize, T)>,
) {
    *out = (0..n).map(|i| (i, f(i))).collect();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(c: usize) -> Tensor {
        Tensor::from_fn(&[c, c], |idx| if idx[0] == idx[1] { 1.0 } else { 0.0 })
    }

    fn proj_from(
        tape: &Tape,
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
        c: usize,
    ) -> AttentionProjections {
        AttentionProjections {
            wq: tape.constant(wq),
            bq: tape.constant(Tensor::zeros(&[c])),
            wk: tape.constant(wk),
            bk: tape.constant(Tensor::zeros(&[c])),
            wv: tape.constant(wv),
            bv: tape.constant(Tensor::zeros(&[c])),
            wo: tape.constant(wo),
            bo: tape.constant(Tensor::zeros(&[c])),
        }
    }

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
    fn position_encoding_at_origin() {
        let pe = position_encoding((3, 3, 3), 2).unwrap();
        // at coordinate 0 along each axis: sin channel = 0, cos channel = 1
        for axis in 0..3 {
            assert_eq!(pe.at(&[axis * 2, 0, 0, 0]), 0.0);
            assert_eq!(pe.at(&[axis * 2 + 1, 0, 0, 0]), 1.0);
        }
    }

    #[test]
    fn position_encoding_is_separable() {
        let pe = position_encoding((3, 4, 5), 4).unwrap();
        // the D-axis block must be constant over H and W
        for ch in 0..4 {
            for z in 0..3 {
                let v0 = pe.at(&[ch, z, 0, 0]);
                for y in 0..4 {
                    for x in 0..5 {
                        assert_eq!(pe.at(&[ch, z, y, x]), v0);
                    }
                }
            }
        }
    }

    #[test]
    fn position_encoding_matches_closed_form() {
        let pe = position_encoding((2, 2, 2), 2).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let coords = [z, y, x];
                    for axis in 0..3 {
                        let p = coords[axis] as f32;
                        assert!((pe.at(&[axis * 2, z, y, x]) - p.sin()).abs() < 1e-6);
                        assert!((pe.at(&[axis * 2 + 1, z, y, x]) - p.cos()).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_query_key_averages_window() {
        // zero Q/K logits => uniform softmax => every voxel gets the window
        // mean channel vector (identity V and O, no position encoding)
        let c = 4;
        let tape = Tape::new();
        let xt = pseudo_random(&[1, c, 4, 4, 4], 0xabc);
        let x = tape.leaf(xt.clone(), false);
        let plan = WindowPlan::new(1, c, (4, 4, 4), (4, 4, 4), false).unwrap();
        let proj = proj_from(
            &tape,
            Tensor::zeros(&[c, c]),
            Tensor::zeros(&[c, c]),
            identity(c),
            identity(c),
            c,
        );
        let y = tape.window_msa(x, 2, &plan, &proj).unwrap();
        let v = tape.value(y);
        for ch in 0..c {
            let mut mean = 0f64;
            for z in 0..4 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        mean += xt.at(&[0, ch, z, yy, xx]) as f64;
                    }
                }
            }
            mean /= 64.0;
            for z in 0..4 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        assert!((v.at(&[0, ch, z, yy, xx]) as f64 - mean).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_window_is_identity() {
        let c = 6;
        let xt = pseudo_random(&[1, c, 2, 2, 2], 0x77);
        // without position encoding: softmax over one token, V/O identity
        let tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let plan = WindowPlan::new(1, c, (2, 2, 2), (1, 1, 1), false).unwrap();
        let proj = proj_from(
            &tape,
            pseudo_random(&[c, c], 0x1),
            pseudo_random(&[c, c], 0x2),
            identity(c),
            identity(c),
            c,
        );
        let y = tape.window_msa(x, 3, &plan, &proj).unwrap();
        assert!(tape.value(y).max_abs_diff(&xt) < 1e-6);

        // with position encoding: output = input + PE routed through V/O
        let tape2 = Tape::new();
        let x2 = tape2.leaf(xt.clone(), false);
        let plan_pe = WindowPlan::new(1, c, (2, 2, 2), (1, 1, 1), true).unwrap();
        let proj2 = proj_from(
            &tape2,
            Tensor::zeros(&[c, c]),
            Tensor::zeros(&[c, c]),
            identity(c),
            identity(c),
            c,
        );
        let y2 = tape2.window_msa(x2, 3, &plan_pe, &proj2).unwrap();
        let dpa = (c / 3) & !1usize;
        let pe = position_encoding((2, 2, 2), dpa).unwrap();
        let expect = Tensor::from_fn(xt.shape(), |idx| {
            let base = xt.at(idx);
            if idx[1] < 3 * dpa {
                base + pe.at(&[idx[1], idx[2], idx[3], idx[4]])
            } else {
                base
            }
        });
        assert!(tape2.value(y2).max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn heads_must_divide_channels() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 5, 4, 4, 4]), false);
        let plan = WindowPlan::new(1, 5, (4, 4, 4), (4, 4, 4), false).unwrap();
        let proj = proj_from(
            &tape,
            Tensor::zeros(&[5, 5]),
            Tensor::zeros(&[5, 5]),
            identity(5),
            identity(5),
            5,
        );
        assert!(tape.window_msa(x, 2, &plan, &proj).is_err());
    }

    /// Explicit softmax-attention oracle over a single window, f64 math.
    fn msa_oracle(
        x: &Tensor,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
        wo: &Tensor,
        heads: usize,
    ) -> Tensor {
        let (c, d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
        let t = d * h * w;
        let dh = c / heads;
        let tok = |ti: usize, ch: usize| -> f64 {
            let (z, rem) = (ti / (h * w), ti % (h * w));
            x.at(&[0, ch, z, rem / w, rem % w]) as f64
        };
        let lin = |wm: &Tensor, ti: usize, ch: usize| -> f64 {
            (0..c).map(|i| tok(ti, i) * wm.at(&[i, ch]) as f64).sum()
        };
        let mut attn_out = vec![0f64; t * c];
        for hh in 0..heads {
            for t1 in 0..t {
                let mut logits = vec![0f64; t];
                for t2 in 0..t {
                    let mut dot = 0f64;
                    for j in 0..dh {
                        dot += lin(wq, t1, hh * dh + j) * lin(wk, t2, hh * dh + j);
                    }
                    logits[t2] = dot / (dh as f64).sqrt();
                }
                let maxv = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - maxv).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..dh {
                    let mut acc = 0f64;
                    for t2 in 0..t {
                        acc += exps[t2] / sum * lin(wv, t2, hh * dh + j);
                    }
                    attn_out[t1 * c + hh * dh + j] = acc;
                }
            }
        }
        Tensor::from_fn(x.shape(), |idx| {
            let ti = (idx[2] * h + idx[3]) * w + idx[4];
            let mut acc = 0f64;
            for i in 0..c {
                acc += attn_out[ti * c + i] * wo.at(&[i, idx[1]]) as f64;
            }
            acc as f32
        })
    }

    #[test]
    fn random_case_matches_softmax_oracle() {
        let c = 4;
        let xt = pseudo_random(&[1, c, 4, 4, 4], 0x900d);
        let wq = pseudo_random(&[c, c], 0x11).scale(0.5);
        let wk = pseudo_random(&[c, c], 0x22).scale(0.5);
        let wv = pseudo_random(&[c, c], 0x33).scale(0.5);
        let wo = pseudo_random(&[c, c], 0x44).scale(0.5);
        let tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let plan = WindowPlan::new(1, c, (4, 4, 4), (4, 4, 4), false).unwrap();
        let proj = proj_from(&tape, wq.clone(), wk.clone(), wv.clone(), wo.clone(), c);
        let y = tape.window_msa(x, 2, &plan, &proj).unwrap();
        let oracle = msa_oracle(&xt, &wq, &wk, &wv, &wo, 2);
        let diff = tape.value(y).max_abs_diff(&oracle);
        assert!(diff <= 1e-5, "max abs diff {diff}");
    }

    #[test]
    fn padding_is_masked_and_cropped() {
        // non-divisible extents: output shape preserved, and a constant
        // volume stays constant (padding must not leak into the softmax mean)
        let c = 4;
        let tape = Tape::new();
        let xt = Tensor::full(&[1, c, 3, 5, 2], 2.5);
        let x = tape.leaf(xt.clone(), false);
        let plan = WindowPlan::new(1, c, (3, 5, 2), (4, 4, 4), false).unwrap();
        let proj = proj_from(
            &tape,
            Tensor::zeros(&[c, c]),
            Tensor::zeros(&[c, c]),
            identity(c),
            identity(c),
            c,
        );
        let y = tape.window_msa(x, 2, &plan, &proj).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), xt.shape());
        assert!(v.max_abs_diff(&xt) < 1e-5);
    }
}
