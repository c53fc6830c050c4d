//! Data-movement primitives: row remapping (the workhorse behind window
//! partitioning, zero-padding, cropping and nearest-neighbour upsampling) and
//! channel concatenation.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::{constraint, ShapeError, Tensor};

/// A precomputed row-level gather: `out_row r` copies `in_row map[r]`, or
/// zeros when `map[r] < 0`. `injective` asserts no input row is referenced
/// twice, which permits a parallel scatter in the backward pass.
#[derive(Clone)]
pub struct RowMap {
    pub map: Arc<Vec<i64>>,
    pub in_rows: usize,
    pub row_len: usize,
    pub injective: bool,
}

impl RowMap {
    pub fn new(map: Vec<i64>, in_rows: usize, row_len: usize, injective: bool) -> Self {
        debug_assert!(map.iter().all(|&m| m < in_rows as i64));
        RowMap {
            map: Arc::new(map),
            in_rows,
            row_len,
            injective,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.map.len()
    }

    pub fn apply(&self, src: &[f32], dst: &mut [f32]) {
        let row = self.row_len;
        let map = &self.map;
        par::chunks_mut(dst, row, |r, out| {
            let m = map[r];
            if m >= 0 {
                let off = m as usize * row;
                out.copy_from_slice(&src[off..off + row]);
            } else {
                out.fill(0.0);
            }
        });
    }

    /// Transposed apply: scatter-add `src` rows back through the map.
    pub fn apply_transposed(&self, src: &[f32], dst: &mut [f32]) {
        let row = self.row_len;
        if self.injective {
            // No two output rows share an input row, so a forward gather over
            // the inverse map would also work; a sequential scatter keeps the
            // code simple and is deterministic by construction.
            for (r, &m) in self.map.iter().enumerate() {
                if m >= 0 {
                    let s = &src[r * row..(r + 1) * row];
                    let d = &mut dst[m as usize * row..(m as usize + 1) * row];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += sv;
                    }
                }
            }
        } else {
            for (r, &m) in self.map.iter().enumerate() {
                if m >= 0 {
                    let s = &src[r * row..(r + 1) * row];
                    let d = &mut dst[m as usize * row..(m as usize + 1) * row];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Applies a [`RowMap`] to `x` (viewed as `[in_rows, row_len]`),
    /// producing `out_shape`. Linear; backward is the transposed scatter.
    pub fn remap_rows(&self, x: Var, rm: &RowMap, out_shape: &[usize]) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        if vx.len() != rm.in_rows * rm.row_len {
            return Err(constraint(
                "remap_rows",
                alloc::format!(
                    "input has {} elements, map expects {}x{}",
                    vx.len(),
                    rm.in_rows,
                    rm.row_len
                ),
            ));
        }
        let out_n: usize = out_shape.iter().product();
        if out_n != rm.out_rows() * rm.row_len {
            return Err(constraint("remap_rows", "output shape does not match map"));
        }
        let mut out = vec![0f32; out_n];
        rm.apply(vx.data(), &mut out);
        let out = Tensor::from_vec(out_shape, out)?;
        let requires = self.requires_grad(x);
        let backward = if requires {
            let rm = rm.clone();
            let in_shape = vx.shape().to_vec();
            let ix = x.idx;
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let mut dx = vec![0f32; rm.in_rows * rm.row_len];
                rm.apply_transposed(g.data(), &mut dx);
                emit(ix, Tensor::from_vec(&in_shape, dx).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx], backward))
    }

    /// Free reshape (shares the underlying buffer).
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        let out = vx.reshape(shape)?;
        let requires = self.requires_grad(x);
        let backward = if requires {
            let in_shape = vx.shape().to_vec();
            let ix = x.idx;
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                emit(ix, g.reshape(&in_shape).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx], backward))
    }

    /// Axis permutation; backward applies the inverse permutation.
    pub fn permute(&self, x: Var, order: &[usize]) -> Result<Var, ShapeError> {
        let vx = self.value(x);
        let out = vx.permute(order)?;
        let requires = self.requires_grad(x);
        let backward = if requires {
            let mut inverse = vec![0usize; order.len()];
            for (pos, &ax) in order.iter().enumerate() {
                inverse[ax] = pos;
            }
            let ix = x.idx;
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                emit(ix, g.permute(&inverse).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![x.idx], backward))
    }

    /// Concatenates two tensors along `axis`; all other extents must match.
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var, ShapeError> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.rank() != vb.rank() || axis >= va.rank() {
            return Err(ShapeError::Mismatch {
                op: "concat",
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        for ax in 0..va.rank() {
            if ax != axis && va.shape()[ax] != vb.shape()[ax] {
                return Err(ShapeError::Mismatch {
                    op: "concat",
                    expected: va.shape().to_vec(),
                    got: vb.shape().to_vec(),
                });
            }
        }
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] += vb.shape()[axis];
        // outer = product of extents before axis; the concat interleaves
        // contiguous (axis_len * inner) blocks from each operand.
        let outer: usize = va.shape()[..axis].iter().product();
        let inner: usize = va.shape()[axis + 1..].iter().product();
        let block_a = va.shape()[axis] * inner;
        let block_b = vb.shape()[axis] * inner;
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * block_a..(o + 1) * block_a]);
            out.extend_from_slice(&vb.data()[o * block_b..(o + 1) * block_b]);
        }
        let out = Tensor::from_vec(&out_shape, out)?;
        let requires = self.any_requires(&[a, b]);
        let backward = if requires {
            let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
            let (ia, ib) = (a.idx, b.idx);
            let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
            Some(crate::tape::boxed_backward(move |g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)| {
                let gd = g.data();
                if na {
                    let mut da = Vec::with_capacity(outer * block_a);
                    for o in 0..outer {
                        let base = o * (block_a + block_b);
                        da.extend_from_slice(&gd[base..base + block_a]);
                    }
                    emit(ia, Tensor::from_vec(&sa, da).unwrap());
                }
                if nb {
                    let mut db = Vec::with_capacity(outer * block_b);
                    for o in 0..outer {
                        let base = o * (block_a + block_b) + block_a;
                        db.extend_from_slice(&gd[base..base + block_b]);
                    }
                    emit(ib, Tensor::from_vec(&sb, db).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![a.idx, b.idx], backward))
    }
}

/// Row map for nearest-neighbour 2x upsampling of `[B, C, D, H, W]` volumes
/// (rows of length 1; used by the plain U-Net ablation).
pub fn upsample2_map(b: usize, c: usize, d: usize, h: usize, w: usize) -> RowMap {
    let (od, oh, ow) = (d * 2, h * 2, w * 2);
    let mut map = Vec::with_capacity(b * c * od * oh * ow);
    for bc in 0..b * c {
        let base = bc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let src = base + (z / 2) * h * w + (y / 2) * w + x / 2;
                    map.push(src as i64);
                }
            }
        }
    }
    RowMap::new(map, b * c * d * h * w, 1, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remap_roundtrip_with_padding() {
        // pad a length-3 row vector to 4, then crop back
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let pad = RowMap::new(vec![0, 1, 2, -1], 3, 1, true);
        let y = tape.remap_rows(x, &pad, &[4]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 0.0]);
        let crop = RowMap::new(vec![0, 1, 2], 4, 1, true);
        let z = tape.remap_rows(y, &crop, &[3]).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_axis1_and_grads() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(&[2, 2, 2], (5..13).map(|v| v as f32).collect()).unwrap(), true);
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.shape_of(c), vec![2, 3, 2]);
        let v = tape.value(c);
        assert_eq!(
            v.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn upsample_nn_doubles_each_axis() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap(), true);
        let rm = upsample2_map(1, 1, 1, 1, 2);
        let y = tape.remap_rows(x, &rm, &[1, 1, 2, 2, 4]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.data()[..4], [1.0, 1.0, 2.0, 2.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        // each input voxel feeds 8 outputs
        assert_eq!(g.get(x).unwrap().data(), &[8.0, 8.0]);
    }
}
