//! Dense block, region-aware non-local block and merging block.

mod dense;
mod merge;
mod region;

pub use dense::{dense_block, DenseBlockConfig, DenseBlockParams};
pub use merge::{merging_block, MergingConfig};
pub use region::{
    ra_block, ra_block_traced, region_partition, RABlockConfig, RABlockParams, RaTrace, RegionGrid,
};
