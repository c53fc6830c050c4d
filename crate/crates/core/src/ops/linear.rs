//! Dense projection over the last axis: `y[..., n] = sum_k x[..., k] w[k, n] + b[n]`.
//! Backs the attention Q/K/V/O projections and the transformer MLPs.

use alloc::vec;
use alloc::vec::Vec;

use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::{constraint, ShapeError, Tensor};

pub(crate) fn matmul_rows(x: &[f32], w: &[f32], b: Option<&[f32]>, t_rows: usize, k: usize, n: usize, out: &mut [f32]) {
    par::chunks_mut(out, n, |t, out_row| {
        if let Some(bias) = b {
            out_row.copy_from_slice(bias);
        } else {
            out_row.fill(0.0);
        }
        let x_row = &x[t * k..(t + 1) * k];
        for (kk, &xv) in x_row.iter().enumerate() {
            let w_row = &w[kk * n..(kk + 1) * n];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += xv * wv;
            }
        }
    });
    let _ = t_rows;
}

impl Tape {
    /// `x: [..., K]` times `w: [K, N]` plus optional `b: [N]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        let vw = self.value(w);
        if vx.rank() < 1 || vw.rank() != 2 {
            return Err(constraint("linear", "x must have rank >= 1 and w rank 2"));
        }
        let k = *vx.shape().last().unwrap();
        if vw.shape()[0] != k {
            return Err(ShapeError::Mismatch {
                op: "linear",
                expected: vec![k, vw.shape()[1]],
                got: vw.shape().to_vec(),
            });
        }
        let n = vw.shape()[1];
        let vb = match b {
            Some(bv) => {
                let t = self.value(bv);
                if t.shape() != [n] {
                    return Err(ShapeError::Mismatch {
                        op: "linear",
                        expected: vec![n],
                        got: t.shape().to_vec(),
                    });
                }
                Some(t)
            }
            None => None,
        };
        let t_rows = vx.len() / k;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0f32; t_rows * n];
        matmul_rows(vx.data(), vw.data(), vb.as_ref().map(|t| t.data()), t_rows, k, n, &mut out);
        let out = Tensor::from_vec(&out_shape, out)?;

        let mut vars = vec![x, w];
        if let Some(bv) = b {
            vars.push(bv);
        }
        let requires = self.any_requires(&vars);
        let backward = if requires {
            let needs: Vec<bool> = vars.iter().map(|&v| self.requires_grad(v)).collect();
            let idxs: Vec<usize> = vars.iter().map(|v| v.idx).collect();
            let x_shape = vx.shape().to_vec();
            let w_shape = vw.shape().to_vec();
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let gd = g.data();
                if needs[0] {
                    // dx[t,k] = sum_n g[t,n] w[k,n]
                    let mut dx = vec![0f32; t_rows * k];
                    let wd = vw.data();
                    par::chunks_mut(&mut dx, k, |t, dx_row| {
                        let g_row = &gd[t * n..(t + 1) * n];
                        for (kk, d) in dx_row.iter_mut().enumerate() {
                            let w_row = &wd[kk * n..(kk + 1) * n];
                            let mut acc = 0f32;
                            for (&gv, &wv) in g_row.iter().zip(w_row) {
                                acc += gv * wv;
                            }
                            *d = acc;
                        }
                    });
                    emit(idxs[0], Tensor::from_vec(&x_shape, dx).unwrap());
                }
                if needs[1] {
                    // dw[k,n] = sum_t x[t,k] g[t,n], fixed t order per k row
                    let mut dw = vec![0f32; k * n];
                    let xd = vx.data();
                    par::chunks_mut(&mut dw, n, |kk, dw_row| {
                        for t in 0..t_rows {
                            let xv = xd[t * k + kk];
                            if xv != 0.0 {
                                let g_row = &gd[t * n..(t + 1) * n];
                                for (d, &gv) in dw_row.iter_mut().zip(g_row) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    });
                    emit(idxs[1], Tensor::from_vec(&w_shape, dw).unwrap());
                }
                if needs.len() > 2 && needs[2] {
                    let mut db = vec![0f32; n];
                    for t in 0..t_rows {
                        let g_row = &gd[t * n..(t + 1) * n];
                        for (d, &gv) in db.iter_mut().zip(g_row) {
                            *d += gv;
                        }
                    }
                    emit(idxs[2], Tensor::from_vec(&[n], db).unwrap());
                }
            }))
        } else {
            None
        };
        let input_idxs: Vec<usize> = vars.iter().map(|v| v.idx).collect();
        Ok(self.push(out, requires, input_idxs, backward))
    }
}
