//! Value types shared across the pipeline: probability maps, binary masks and
//! prototype vectors. Feature maps are plain [`Tensor`]s (see `tensor`).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H×W per-pixel probability in [0, 1], stored as an H×W×1 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(pub Tensor);

impl ProbMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.c != 1 {
            return Err(Error::Shape(format!(
                "probability map must have 1 channel, got {}",
                t.c
            )));
        }
        if !t.data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Shape("probability map entries outside [0,1]".into()));
        }
        Ok(ProbMap(t))
    }

    pub fn h(&self) -> usize {
        self.0.h
    }

    pub fn w(&self) -> usize {
        self.0.w
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.at(y, x, 0)
    }
}

/// H×W mask with entries exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask data length {} != {}x{}",
                data.len(),
                h,
                w
            )));
        }
        if !data.iter().all(|&v| v <= 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { h, w, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a | b)
                .collect(),
        })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a & b)
                .collect(),
        })
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&a| 1 - a).collect(),
        }
    }

    /// Nearest-neighbor downsample to `oh`×`ow`: an output pixel is foreground
    /// iff its nearest source pixel is foreground (binarity is preserved, no
    /// averaging).
    pub fn downsample_nearest(&self, oh: usize, ow: usize) -> BinaryMask {
        let mut out = BinaryMask::zeros(oh, ow);
        for y in 0..oh {
            let sy = nearest_index(y, oh, self.h);
            for x in 0..ow {
                let sx = nearest_index(x, ow, self.w);
                out.set(y, x, self.at(sy, sx));
            }
        }
        out
    }

    /// View as an H×W×1 tensor of 0.0/1.0 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.h,
            self.w,
            1,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// Nearest source index for resampling position `i` of `out_len` onto a grid
/// of `in_len`: the source pixel containing the output pixel's center.
#[inline]
pub(crate) fn nearest_index(i: usize, out_len: usize, in_len: usize) -> usize {
    (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

/// Length-C embedding vector produced by masked average pooling or learned
/// directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype(pub Vec<f64>);

impl Prototype {
    pub fn new(values: Vec<f64>) -> Self {
        Prototype(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probmap_rejects_out_of_range() {
        assert!(ProbMap::new(Tensor::from_vec(1, 2, 1, vec![0.2, 1.1])).is_err());
        assert!(ProbMap::new(Tensor::from_vec(1, 2, 1, vec![0.0, 1.0])).is_ok());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::from_data(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn downsample_nearest_keeps_centered_block() {
        // 8x8 mask with a 4x4 foreground block at the center. At /2 the
        // output centers sit at source rows {1,3,5,7}; rows 3 and 5 fall in
        // the block, so the result is a 2x2 block of ones.
        let mut m = BinaryMask::zeros(8, 8);
        for y in 2..6 {
            for x in 2..6 {
                m.set(y, x, 1);
            }
        }
        let d = m.downsample_nearest(4, 4);
        assert_eq!(d.count_ones(), 4);
        for y in 1..3 {
            for x in 1..3 {
                assert_eq!(d.at(y, x), 1);
            }
        }
    }

    #[test]
    fn union_intersection_complement() {
        let a = BinaryMask::from_data(1, 4, vec![1, 0, 1, 0]).unwrap();
        let b = BinaryMask::from_data(1, 4, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(a.union(&b).unwrap().data, vec![1, 1, 1, 0]);
        assert_eq!(a.intersection(&b).unwrap().data, vec![1, 0, 0, 0]);
        assert_eq!(a.complement().data, vec![0, 1, 0, 1]);
    }
}
