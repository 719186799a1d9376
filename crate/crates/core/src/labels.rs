//! Per-cell class distributions over a label grid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major `height × width × classes` grid of class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f32>,
}

impl LabelMap {
    /// Validates that every cell is a distribution (within `1e-4`).
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != height * width * classes || classes == 0 {
            return Err(Error::Shape {
                shape: vec![height, width, classes],
                len: probs.len(),
            });
        }
        for (i, cell) in probs.chunks(classes).enumerate() {
            let s: f32 = cell.iter().sum();
            if (s - 1.0).abs() > 1e-4 || cell.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Validation(format!("label cell {i} is not a distribution (sum {s})")));
            }
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            probs,
        })
    }

    pub fn one_hot(height: usize, width: usize, classes: usize, ids: &[u8]) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Shape {
                shape: vec![height, width],
                len: ids.len(),
            });
        }
        let mut probs = vec![0.0; ids.len() * classes];
        for (i, &c) in ids.iter().enumerate() {
            if c as usize >= classes {
                return Err(Error::Validation(format!("class id {c} out of range for {classes} classes")));
            }
            probs[i * classes + c as usize] = 1.0;
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            probs,
        })
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        LabelMap {
            height,
            width,
            classes,
            probs: vec![1.0 / classes as f32; height * width * classes],
        }
    }

    /// Per-cell softmax of `height · width` logit rows.
    pub fn from_logits(height: usize, width: usize, classes: usize, logits: &[f32]) -> Result<Self> {
        if logits.len() != height * width * classes {
            return Err(Error::Shape {
                shape: vec![height, width, classes],
                len: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite logits".into()));
        }
        let mut probs = logits.to_vec();
        for cell in probs.chunks_mut(classes) {
            crate::graph::softmax_in_place(cell);
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.classes;
        &self.probs[i..i + self.classes]
    }

    /// Most probable class per cell (lowest index wins ties).
    pub fn argmax(&self) -> Vec<u8> {
        self.probs
            .chunks(self.classes)
            .map(|cell| {
                let mut best = 0;
                for (k, p) in cell.iter().enumerate() {
                    if *p > cell[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Circular shift to the right: `out[y][x] = self[y][(x - shift) mod w]`.
    pub fn shift_columns(&self, shift: isize) -> LabelMap {
        let w = self.width as isize;
        let mut probs = vec![0.0; self.probs.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (x as isize - shift).rem_euclid(w) as usize;
                let d = (y * self.width + x) * self.classes;
                probs[d..d + self.classes].copy_from_slice(self.cell(y, src));
            }
        }
        LabelMap { probs, ..*self }
    }

    /// Mixes every cell with the uniform distribution:
    /// `(p + eps) / (1 + K · eps)`.
    pub fn smoothed(&self, eps: f32) -> LabelMap {
        let z = 1.0 + self.classes as f32 * eps;
        LabelMap {
            probs: self.probs.iter().map(|p| (p + eps) / z).collect(),
            ..*self
        }
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_moves_columns_right() {
        let m = LabelMap::one_hot(1, 4, 4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(m.shift_columns(1).argmax(), vec![3, 0, 1, 2]);
        assert_eq!(m.shift_columns(-1).argmax(), vec![1, 2, 3, 0]);
        assert_eq!(m.shift_columns(4), m);
    }

    #[test]
    fn rejects_unnormalized_cells() {
        assert!(LabelMap::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(LabelMap::one_hot(1, 1, 2, &[2]).is_err());
    }

    #[test]
    fn smoothing_keeps_distributions() {
        let m = LabelMap::one_hot(2, 2, 4, &[0, 1, 2, 3]).unwrap().smoothed(1e-3);
        for c in m.probs().chunks(4) {
            assert!((c.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(c.iter().all(|p| *p > 0.0));
        }
    }
}
