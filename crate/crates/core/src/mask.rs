//! Square binary hand mask, row-major, 1 = hand.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub const DEFAULT_MASK_SIDE: usize = 114;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HandMask {
    side: usize,
    data: Vec<u8>,
}

impl HandMask {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return Err(Error::Shape(format!(
                "mask of side {side} needs {} cells, got {}",
                side * side,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask cells must be 0 or 1".into()));
        }
        Ok(Self { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            data: vec![0; side * side],
        }
    }

    /// Thresholds a probability map at `p >= 0.5`.
    pub fn from_probabilities<T: crate::scalar::Scalar>(side: usize, probs: &[T]) -> Result<Self> {
        let half = T::of(0.5);
        Self::new(side, probs.iter().map(|&p| u8::from(p >= half)).collect())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.side + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.side + col] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn occupancy(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Number of 4-connected hand components.
    pub fn components(&self) -> usize {
        let n = self.side;
        let mut seen = vec![false; self.data.len()];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (r, c) = (i / n, i % n);
                let mut visit = |j: usize| {
                    if self.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if r > 0 {
                    visit(i - n);
                }
                if r + 1 < n {
                    visit(i + n);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < n {
                    visit(i + 1);
                }
            }
        }
        count
    }
}
