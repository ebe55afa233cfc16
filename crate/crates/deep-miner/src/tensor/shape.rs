//! Shape and stride arithmetic shared by the op implementations.

use crate::error::{Error, Result};

/// Row-major strides for `shape`.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Broadcast result shape: shapes are right-aligned and each axis must have
/// equal extents or an extent of 1 on one side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ea = padded_extent(a, rank, d);
        let eb = padded_extent(b, rank, d);
        out[d] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(Error::BroadcastError(a.to_vec(), b.to_vec()));
        };
    }
    Ok(out)
}

fn padded_extent(shape: &[usize], rank: usize, d: usize) -> usize {
    let pad = rank - shape.len();
    if d < pad {
        1
    } else {
        shape[d - pad]
    }
}

/// Per-axis strides of `shape` as seen from `out_shape`: 0 where the axis is
/// broadcast, the row-major stride otherwise. `shape` must broadcast to
/// `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let own = strides_for(shape);
    (0..rank)
        .map(|d| {
            if d < pad || shape[d - pad] == 1 && out_shape[d] != 1 {
                0
            } else {
                own[d - pad]
            }
        })
        .collect()
}

/// Walks `out_shape` in row-major order, yielding for each element the flat
/// offsets into two source buffers described by (possibly zero) strides.
pub struct PairWalker<'a> {
    shape: &'a [usize],
    sa: Vec<usize>,
    sb: Vec<usize>,
    idx: Vec<usize>,
    ia: usize,
    ib: usize,
    remaining: usize,
    started: bool,
}

impl<'a> PairWalker<'a> {
    pub fn new(out_shape: &'a [usize], sa: Vec<usize>, sb: Vec<usize>) -> Self {
        let n: usize = out_shape.iter().product();
        PairWalker {
            shape: out_shape,
            sa,
            sb,
            idx: vec![0; out_shape.len()],
            ia: 0,
            ib: 0,
            remaining: n,
            started: false,
        }
    }
}

impl Iterator for PairWalker<'_> {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        if self.started {
            for d in (0..self.shape.len()).rev() {
                self.idx[d] += 1;
                self.ia += self.sa[d];
                self.ib += self.sb[d];
                if self.idx[d] < self.shape[d] {
                    break;
                }
                self.ia -= self.sa[d] * self.shape[d];
                self.ib -= self.sb[d] * self.shape[d];
                self.idx[d] = 0;
            }
        }
        self.started = true;
        self.remaining -= 1;
        Some((self.ia, self.ib))
    }
}

/// Validates a reduction axis set against `rank`.
pub fn check_axes(axes: &[usize], rank: usize) -> Result<()> {
    for &a in axes {
        if a >= rank {
            return Err(Error::AxisOutOfRange { axis: a, rank });
        }
    }
    Ok(())
}
