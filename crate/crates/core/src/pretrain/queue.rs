use ndarray::{s, Array2};

use crate::error::{bail, Result};
use crate::graph::Mat;
use crate::objectives::UNIT_TOL;

/// Ring buffers of momentum text and image features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    text: Mat,
    image: Mat,
    cursor: usize,
    occupancy: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            text: Array2::zeros((capacity, dim)),
            image: Array2::zeros((capacity, dim)),
            cursor: 0,
            occupancy: 0,
        }
    }

    /// Restores a queue from its raw buffers.
    pub fn from_parts(text: Mat, image: Mat, cursor: usize, occupancy: usize) -> Result<Self> {
        let cap = text.nrows();
        if image.dim() != text.dim() || occupancy > cap || (cap > 0 && cursor >= cap) || (cap == 0 && cursor != 0) {
            bail!(InvalidState, "inconsistent queue state");
        }
        Ok(Self {
            text,
            image,
            cursor,
            occupancy,
        })
    }

    pub fn capacity(&self) -> usize {
        self.text.nrows()
    }

    pub fn dim(&self) -> usize {
        self.text.ncols()
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn raw_text(&self) -> &Mat {
        &self.text
    }

    pub fn raw_image(&self) -> &Mat {
        &self.image
    }

    /// Appends batch-aligned unit rows, overwriting the oldest entries when full.
    pub fn enqueue(&mut self, text: &Mat, image: &Mat) -> Result<()> {
        if text.dim() != image.dim() || text.ncols() != self.dim() {
            bail!(InvalidInput, "queue features must be batch-aligned with width {}", self.dim());
        }
        for m in [text, image] {
            for row in m.rows() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() > UNIT_TOL {
                    bail!(InvalidInput, "queue feature has norm {n}, expected 1");
                }
            }
        }
        let cap = self.capacity();
        if cap == 0 {
            return Ok(());
        }
        for r in 0..text.nrows() {
            self.text.row_mut(self.cursor).assign(&text.row(r));
            self.image.row_mut(self.cursor).assign(&image.row(r));
            self.cursor = (self.cursor + 1) % cap;
        }
        self.occupancy = (self.occupancy + text.nrows()).min(cap);
        Ok(())
    }

    fn ordered(&self, m: &Mat) -> Mat {
        let cap = self.capacity();
        let start = (self.cursor + cap - self.occupancy) % cap.max(1);
        let mut out = Array2::zeros((self.occupancy, self.dim()));
        for i in 0..self.occupancy {
            out.row_mut(i).assign(&m.row((start + i) % cap));
        }
        out
    }

    /// Stored text features, oldest first.
    pub fn text(&self) -> Mat {
        self.ordered(&self.text)
    }

    /// Stored image features, oldest first.
    pub fn image(&self) -> Mat {
        self.ordered(&self.image)
    }

    /// `batch` rows followed by the stored rows: the contrastive candidate set.
    pub fn candidates(batch: &Mat, stored: &Mat) -> Mat {
        let mut out = Array2::zeros((batch.nrows() + stored.nrows(), batch.ncols()));
        out.slice_mut(s![..batch.nrows(), ..]).assign(batch);
        out.slice_mut(s![batch.nrows().., ..]).assign(stored);
        out
    }
}
