use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::grad_stats::BlockId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockShape {
    /// Row-major `rows x cols` weight matrix.
    Matrix {
        rows: usize,
        cols: usize,
    },
    Vector {
        len: usize,
    },
}

impl BlockShape {
    pub fn len(&self) -> usize {
        match *self {
            BlockShape::Matrix { rows, cols } => rows * cols,
            BlockShape::Vector { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named, contiguous slice of the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub id: BlockId,
    pub shape: BlockShape,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn new(id: BlockId, shape: BlockShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(format!(
                "block `{id}` has {} values but shape {shape:?}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter block",
                index,
            });
        }
        Ok(ParamBlock { id, shape, values })
    }

    /// Convenience for a flat vector block.
    pub fn vector(id: impl Into<BlockId>, values: Vec<f64>) -> Self {
        let len = values.len();
        ParamBlock {
            id: id.into(),
            shape: BlockShape::Vector { len },
            values,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamBlock {
            id: self.id.clone(),
            shape: self.shape,
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<String> for BlockId {
    fn from(s: String) -> Self {
        BlockId(s)
    }
}

/// Ordered collection of parameter blocks with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    blocks: Vec<ParamBlock>,
}

impl Params {
    pub fn new(blocks: Vec<ParamBlock>) -> Result<Self> {
        let mut seen = HashSet::new();
        for b in &blocks {
            if !seen.insert(b.id.clone()) {
                return Err(Error::invalid(format!("duplicate block id `{}`", b.id)));
            }
        }
        Ok(Params { blocks })
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn index_of(&self, id: &BlockId) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| &b.id == id)
            .ok_or_else(|| Error::UnknownBlock(id.to_string()))
    }

    pub fn get(&self, id: &BlockId) -> Result<&ParamBlock> {
        Ok(&self.blocks[self.index_of(id)?])
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    /// Concatenation of all blocks in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    /// Same layout as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.total_len() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let values = flat[offset..offset + b.len()].to_vec();
                offset += b.len();
                ParamBlock {
                    id: b.id.clone(),
                    shape: b.shape,
                    values,
                }
            })
            .collect();
        Ok(Params { blocks })
    }
}
