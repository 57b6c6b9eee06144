//! Partition of the model width into named channel blocks.

use std::ops::Range;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const POSITION_WIDTH: usize = 8;
pub const CONTROL_WIDTH: usize = 4;
pub const MIN_DIM: usize = 16;

/// `[content | attribute | position | control]`, control always the last four dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub dim: usize,
    pub content: (usize, usize),
    pub attribute: (usize, usize),
    pub position: (usize, usize),
    pub control: (usize, usize),
}

impl Channels {
    pub fn for_dim(dim: usize) -> Result<Self> {
        if dim < MIN_DIM {
            return Err(Error::Validation(format!("model width {dim} is below the minimum {MIN_DIM}")));
        }
        let rest = dim - POSITION_WIDTH - CONTROL_WIDTH;
        let attr = rest / 2;
        let content = rest - attr;
        Ok(Self {
            dim,
            content: (0, content),
            attribute: (content, content + attr),
            position: (content + attr, content + attr + POSITION_WIDTH),
            control: (dim - CONTROL_WIDTH, dim),
        })
    }

    pub fn content(&self) -> Range<usize> {
        self.content.0..self.content.1
    }

    pub fn attribute(&self) -> Range<usize> {
        self.attribute.0..self.attribute.1
    }

    pub fn position(&self) -> Range<usize> {
        self.position.0..self.position.1
    }

    pub fn control(&self) -> Range<usize> {
        self.control.0..self.control.1
    }

    pub fn attribute_width(&self) -> usize {
        self.attribute.1 - self.attribute.0
    }

    /// Attribute slot a tag lights up. Seed-independent so a tag means the same
    /// attribute in every scene.
    pub fn tag_slot(&self, tag: &str) -> usize {
        let mut h = Sha256::new();
        h.update(b"bindattn-tag/v1");
        h.update(tag.as_bytes());
        let d = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        (u64::from_le_bytes(b) % self.attribute_width() as u64) as usize
    }

    /// Unit-norm attribute target for an instance: one-hot per tag, summed, normalized.
    pub fn attribute_vector(&self, tags: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.attribute_width()];
        for t in tags {
            v[self.tag_slot(t)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}
