use crate::error::{Error, Result};

use super::numel_of;

/// Boolean validity mask; `true` marks a usable entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(data: Vec<bool>, shape: &[usize]) -> Result<Mask> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "mask shape {:?} needs {} entries, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn all(shape: &[usize]) -> Mask {
        Mask {
            shape: shape.to_vec(),
            data: vec![true; numel_of(shape)],
        }
    }

    /// `[B, T]` mask with the first `len_b` entries of row `b` set.
    pub fn from_lengths(lengths: &[usize], width: usize) -> Mask {
        let mut data = vec![false; lengths.len() * width];
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len.min(width) {
                data[b * width + t] = true;
            }
        }
        Mask {
            shape: vec![lengths.len(), width],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Mask> {
        Mask::new(self.data.clone(), shape)
    }

    /// Expands to `shape` under numpy-style broadcasting (missing leading
    /// axes and size-1 axes repeat).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Vec<bool>> {
        if self.shape == shape {
            return Ok(self.data.clone());
        }
        let idx = broadcast_index(&self.shape, shape)
            .ok_or_else(|| Error::Dimension {
                op: "mask broadcast",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            })?;
        Ok(idx.into_iter().map(|i| self.data[i]).collect())
    }
}

/// Result shape of broadcasting `a` against `b`, if compatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out` (row-major), the flat index of the `src`
/// element it reads under broadcasting.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src.len() > out.len() {
        return None;
    }
    let pad = out.len() - src.len();
    let mut strides = vec![0usize; out.len()];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let d = src[i];
        let o = out[i + pad];
        if d != o && d != 1 {
            return None;
        }
        strides[i + pad] = if d == 1 { 0 } else { s };
        s *= d;
    }
    let total = numel_of(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; out.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 3]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn broadcast_index_repeats_size_one_axes() {
        let idx = broadcast_index(&[2, 1], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
        let idx = broadcast_index(&[3], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn lengths_mask() {
        let m = Mask::from_lengths(&[1, 3], 3);
        assert_eq!(m.data(), &[true, false, false, true, true, true]);
    }
}
