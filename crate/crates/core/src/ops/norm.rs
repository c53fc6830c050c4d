//! Batch normalisation (per channel over batch + spatial) and layer
//! normalisation (over the trailing embedding axis).

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::tape::{Tape, Var};
use crate::tensor::{constraint, ShapeError, Tensor};

fn check_affine(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<(), ShapeError> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(ShapeError::Mismatch {
            op,
            expected: vec![c],
            got: if gamma.shape() != [c] {
                gamma.shape().to_vec()
            } else {
                beta.shape().to_vec()
            },
        });
    }
    Ok(())
}

impl Tape {
    /// Training-mode batch norm over `x [B, C, ...]`. Normalises each channel
    /// with the biased batch statistics and returns them (detached) so the
    /// caller can fold them into its running estimates.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Tensor, Tensor), ShapeError> {
        let vx = self.value(x);
        if vx.rank() < 2 {
            return Err(constraint("batch_norm", "input must be [B, C, ...]"));
        }
        let (b, c) = (vx.shape()[0], vx.shape()[1]);
        let s: usize = vx.shape()[2..].iter().product();
        let n = b * s;
        if n <= 1 {
            return Err(constraint("batch_norm", "train mode needs batch*spatial > 1"));
        }
        let vg = self.value(gamma);
        let vb = self.value(beta);
        check_affine("batch_norm", c, &vg, &vb)?;

        let xd = vx.data();
        let mut mean = vec![0f32; c];
        let mut var = vec![0f32; c];
        for ch in 0..c {
            let mut acc = 0f64;
            for bb in 0..b {
                let run = &xd[(bb * c + ch) * s..][..s];
                for &v in run {
                    acc += v as f64;
                }
            }
            let mu = acc / n as f64;
            let mut vacc = 0f64;
            for bb in 0..b {
                let run = &xd[(bb * c + ch) * s..][..s];
                for &v in run {
                    let d = v as f64 - mu;
                    vacc += d * d;
                }
            }
            mean[ch] = mu as f32;
            var[ch] = (vacc / n as f64) as f32;
        }
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / fmath::sqrt(v + eps)).collect();

        let mut out = vec![0f32; vx.len()];
        for bb in 0..b {
            for ch in 0..c {
                let base = (bb * c + ch) * s;
                let (g, be, mu, is) = (vg.data()[ch], vb.data()[ch], mean[ch], invstd[ch]);
                for (o, &v) in out[base..base + s].iter_mut().zip(&xd[base..base + s]) {
                    *o = g * (v - mu) * is + be;
                }
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let mean_t = Tensor::from_vec(&[c], mean.clone())?;
        let var_t = Tensor::from_vec(&[c], var)?;

        let requires = self.any_requires(&[x, gamma, beta]);
        let backward = if requires {
            let needs = [
                self.requires_grad(x),
                self.requires_grad(gamma),
                self.requires_grad(beta),
            ];
            let idxs = [x.idx, gamma.idx, beta.idx];
            let shape = vx.shape().to_vec();
            let invstd = invstd.clone();
            let mean = mean.clone();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let gd = g.data();
                let xd = vx.data();
                // per-channel sums of g and g*xhat
                let mut sum_g = vec![0f64; c];
                let mut sum_gx = vec![0f64; c];
                for bb in 0..b {
                    for ch in 0..c {
                        let base = (bb * c + ch) * s;
                        let (mu, is) = (mean[ch] as f64, invstd[ch] as f64);
                        let mut a0 = 0f64;
                        let mut a1 = 0f64;
                        for (gv, xv) in gd[base..base + s].iter().zip(&xd[base..base + s]) {
                            let xhat = (*xv as f64 - mu) * is;
                            a0 += *gv as f64;
                            a1 += *gv as f64 * xhat;
                        }
                        sum_g[ch] += a0;
                        sum_gx[ch] += a1;
                    }
                }
                if needs[0] {
                    let mut dx = vec![0f32; xd.len()];
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = (bb * c + ch) * s;
                            let (mu, is) = (mean[ch], invstd[ch]);
                            let gam = vg.data()[ch];
                            let mg = (sum_g[ch] / n as f64) as f32;
                            let mgx = (sum_gx[ch] / n as f64) as f32;
                            for i in base..base + s {
                                let xhat = (xd[i] - mu) * is;
                                dx[i] = gam * is * (gd[i] - mg - xhat * mgx);
                            }
                        }
                    }
                    emit(idxs[0], Tensor::from_vec(&shape, dx).unwrap());
                }
                if needs[1] {
                    let dg: Vec<f32> = sum_gx.iter().map(|&v| v as f32).collect();
                    emit(idxs[1], Tensor::from_vec(&[c], dg).unwrap());
                }
                if needs[2] {
                    let db: Vec<f32> = sum_g.iter().map(|&v| v as f32).collect();
                    emit(idxs[2], Tensor::from_vec(&[c], db).unwrap());
                }
            }))
        } else {
            None
        };
        let y = self.push(out, requires, vec![x.idx, gamma.idx, beta.idx], backward);
        Ok((y, mean_t, var_t))
    }

    /// Evaluation-mode batch norm using previously captured running
    /// statistics. `stats` being `None` (no train-mode pass has happened)
    /// is an error.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&Tensor, &Tensor)>,
        eps: f32,
    ) -> Result<Var, ShapeError> {
        let (rmean, rvar) = stats.ok_or_else(|| {
            constraint(
                "batch_norm",
                "eval mode invoked before any train-mode statistics exist",
            )
        })?;
        let vx = self.value(x);
        if vx.rank() < 2 {
            return Err(constraint("batch_norm", "input must be [B, C, ...]"));
        }
        let (b, c) = (vx.shape()[0], vx.shape()[1]);
        let s: usize = vx.shape()[2..].iter().product();
        let vg = self.value(gamma);
        let vb = self.value(beta);
        check_affine("batch_norm", c, &vg, &vb)?;
        if rmean.shape() != [c] || rvar.shape() != [c] {
            return Err(constraint("batch_norm", "running stats have wrong shape"));
        }
        let invstd: Vec<f32> = rvar.data().iter().map(|&v| 1.0 / fmath::sqrt(v + eps)).collect();
        let rmean = rmean.clone();

        let xd = vx.data();
        let mut out = vec![0f32; vx.len()];
        for bb in 0..b {
            for ch in 0..c {
                let base = (bb * c + ch) * s;
                let (g, be, mu, is) = (vg.data()[ch], vb.data()[ch], rmean.data()[ch], invstd[ch]);
                for (o, &v) in out[base..base + s].iter_mut().zip(&xd[base..base + s]) {
                    *o = g * (v - mu) * is + be;
                }
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let requires = self.any_requires(&[x, gamma, beta]);
        let backward = if requires {
            let needs = [
                self.requires_grad(x),
                self.requires_grad(gamma),
                self.requires_grad(beta),
            ];
            let idxs = [x.idx, gamma.idx, beta.idx];
            let shape = vx.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let gd = g.data();
                let xd = vx.data();
                if needs[0] {
                    let mut dx = vec![0f32; xd.len()];
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = (bb * c + ch) * s;
                            let scale = vg.data()[ch] * invstd[ch];
                            for i in base..base + s {
                                dx[i] = gd[i] * scale;
                            }
                        }
                    }
                    emit(idxs[0], Tensor::from_vec(&shape, dx).unwrap());
                }
                if needs[1] {
                    let mut dgam = vec![0f64; c];
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = (bb * c + ch) * s;
                            let (mu, is) = (rmean.data()[ch], invstd[ch]);
                            for i in base..base + s {
                                dgam[ch] += (gd[i] * (xd[i] - mu) * is) as f64;
                            }
                        }
                    }
                    let dg: Vec<f32> = dgam.iter().map(|&v| v as f32).collect();
                    emit(idxs[1], Tensor::from_vec(&[c], dg).unwrap());
                }
                if needs[2] {
                    let mut db = vec![0f64; c];
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = (bb * c + ch) * s;
                            for i in base..base + s {
                                db[ch] += gd[i] as f64;
                            }
                        }
                    }
                    let db: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                    emit(idxs[2], Tensor::from_vec(&[c], db).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx, gamma.idx, beta.idx], backward))
    }

    /// Layer norm over the last axis of `x [..., E]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        if vx.rank() < 1 {
            return Err(constraint("layer_norm", "input must have rank >= 1"));
        }
        let e = *vx.shape().last().unwrap();
        if e == 0 {
            return Err(constraint("layer_norm", "embedding extent must be >= 1"));
        }
        let vg = self.value(gamma);
        let vb = self.value(beta);
        check_affine("layer_norm", e, &vg, &vb)?;
        let rows = vx.len() / e;
        let xd = vx.data();
        let mut mean = vec![0f32; rows];
        let mut invstd = vec![0f32; rows];
        let mut out = vec![0f32; vx.len()];
        for r in 0..rows {
            let row = &xd[r * e..(r + 1) * e];
            let mu = row.iter().map(|&v| v as f64).sum::<f64>() / e as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>()
                / e as f64;
            let is = 1.0 / fmath::sqrt(var as f32 + eps);
            mean[r] = mu as f32;
            invstd[r] = is;
            let orow = &mut out[r * e..(r + 1) * e];
            for (i, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
                *o = vg.data()[i] * (v - mu as f32) * is + vb.data()[i];
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let requires = self.any_requires(&[x, gamma, beta]);
        let backward = if requires {
            let needs = [
                self.requires_grad(x),
                self.requires_grad(gamma),
                self.requires_grad(beta),
            ];
            let idxs = [x.idx, gamma.idx, beta.idx];
            let shape = vx.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let gd = g.data();
                let xd = vx.data();
                if needs[0] {
                    let mut dx = vec![0f32; xd.len()];
                    for r in 0..rows {
                        let base = r * e;
                        let (mu, is) = (mean[r], invstd[r]);
                        let mut m_gg = 0f64;
                        let mut m_ggx = 0f64;
                        for i in 0..e {
                            let gg = (gd[base + i] * vg.data()[i]) as f64;
                            let xhat = ((xd[base + i] - mu) * is) as f64;
                            m_gg += gg;
                            m_ggx += gg * xhat;
                        }
                        m_gg /= e as f64;
                        m_ggx /= e as f64;
                        for i in 0..e {
                            let gg = gd[base + i] * vg.data()[i];
                            let xhat = (xd[base + i] - mu) * is;
                            dx[base + i] = is * (gg - m_gg as f32 - xhat * m_ggx as f32);
                        }
                    }
                    emit(idxs[0], Tensor::from_vec(&shape, dx).unwrap());
                }
                if needs[1] || needs[2] {
                    let mut dgam = vec![0f64; e];
                    let mut db = vec![0f64; e];
                    for r in 0..rows {
                        let base = r * e;
                        let (mu, is) = (mean[r], invstd[r]);
                        for i in 0..e {
                            let xhat = (xd[base + i] - mu) * is;
                            dgam[i] += (gd[base + i] * xhat) as f64;
                            db[i] += gd[base + i] as f64;
                        }
                    }
                    if needs[1] {
                        let dg: Vec<f32> = dgam.iter().map(|&v| v as f32).collect();
                        emit(idxs[1], Tensor::from_vec(&[e], dg).unwrap());
                    }
                    if needs[2] {
                        let db: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                        emit(idxs[2], Tensor::from_vec(&[e], db).unwrap());
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx, gamma.idx, beta.idx], backward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalises_to_beta() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4], 5.0), false);
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).abs_max() < 1e-6);
        assert_eq!(mean.data(), &[5.0, 5.0, 5.0]);
        assert!(var.abs_max() < 1e-6);
    }

    #[test]
    fn train_mode_standardises_each_channel() {
        let tape = Tape::new();
        let xt = Tensor::from_fn(&[4, 2, 8], |idx| {
            (idx[0] * 31 + idx[1] * 7 + idx[2] * 3) as f32 * 0.17 - 2.0
        });
        let x = tape.leaf(xt, false);
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let (y, _, _) = tape.batch_norm_train(x, gamma, beta, 0.0).unwrap();
        let v = tape.value(y);
        for ch in 0..2 {
            let mut acc = 0f64;
            let mut acc2 = 0f64;
            let mut n = 0usize;
            for bb in 0..4 {
                for sidx in 0..8 {
                    let val = v.at(&[bb, ch, sidx]) as f64;
                    acc += val;
                    acc2 += val * val;
                    n += 1;
                }
            }
            let mean = acc / n as f64;
            let var = acc2 / n as f64 - mean * mean;
            assert!(mean.abs() < 1e-4, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel var {var}");
        }
    }

    #[test]
    fn eval_without_stats_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4]), false);
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.batch_norm_eval(x, gamma, beta, None, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_beta() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 5], 3.0), false);
        let gamma = tape.constant(Tensor::full(&[5], 1.0));
        let beta = tape.constant(Tensor::full(&[5], 0.25));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        // x = [1, 2, 3]: mean 2, var 2/3, xhat = (x-2)/sqrt(2/3)
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, gamma, beta, 0.0).unwrap();
        let expect = (1.5f32).sqrt(); // 1/sqrt(2/3)
        let v = tape.value(y);
        assert!((v.data()[0] + expect).abs() < 1e-5);
        assert!(v.data()[1].abs() < 1e-6);
        assert!((v.data()[2] - expect).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 5.0, -2.0, 0.0, 3.0, 9.0]).unwrap(), false);
        let gamma = tape.constant(Tensor::zeros(&[3]));
        let beta = tape.constant(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let v = tape.value(y);
        assert_eq!(&v.data()[..3], &[0.5, -1.0, 2.0]);
        assert_eq!(&v.data()[3..], &[0.5, -1.0, 2.0]);
    }
}
