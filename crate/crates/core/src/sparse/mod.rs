//! Sparse pixel maps and the submanifold convolutional embedding network.

mod cnn;
mod layout;
mod pixelmap;

pub use cnn::{
    dense_block, sparse_pool, submanifold_conv, CnnConfig, DenseInput, EmbeddingCnn,
    SparseFeatureMap, INTENSITY_SCALE,
};
pub use layout::SiteLayout;
pub use pixelmap::{ActiveSiteIndex, Hit, SparsePixelMap, View, DEFAULT_CELLS, DEFAULT_PLANES};
