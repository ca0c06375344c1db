//! Named parameter blocks.
//!
//! Models and their gradient containers expose the same ordered list of
//! blocks. The optimizer, the checkpoint codec and the finite-difference
//! oracle all work on that list and never need to know the model layout.

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct BlockRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct BlockMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

pub trait ParamBlocks {
    fn blocks(&self) -> Vec<BlockRef<'_>>;
    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            out.extend_from_slice(b.data);
        }
        out
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(Error::shape(format!(
                "flat parameter vector has {} values, model has {total}",
                values.len()
            )));
        }
        let mut offset = 0;
        for b in self.blocks_mut() {
            let n = b.data.len();
            b.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Offsets of each named block inside `flatten()`.
    fn block_ranges(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut offset = 0;
        self.blocks()
            .into_iter()
            .map(|b| {
                let r = offset..offset + b.data.len();
                offset = r.end;
                (b.name, r)
            })
            .collect()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, blocks: Vec<BlockRef<'a>>) -> Vec<BlockRef<'a>> {
    blocks
        .into_iter()
        .map(|b| BlockRef {
            name: format!("{prefix}.{}", b.name),
            ..b
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, blocks: Vec<BlockMut<'a>>) -> Vec<BlockMut<'a>> {
    blocks
        .into_iter()
        .map(|b| BlockMut {
            name: format!("{prefix}.{}", b.name),
            ..b
        })
        .collect()
}
