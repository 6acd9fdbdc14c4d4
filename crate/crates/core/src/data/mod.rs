//! Datasets, loaders and preprocessing.

mod dataset;
pub mod hyperspectral;
pub mod idx;
pub mod transform;

pub use dataset::Dataset;
pub use hyperspectral::{load_hyperspectral, load_indian_pines, CubeHeader};
pub use idx::load_idx;
pub use transform::{
    augment, min_max_normalize, standardize, stratified_indices, stratified_split, AugmentConfig,
    MinMaxScaler, SplitIndices,
};

/// Pixel statistics used to standardise Fashion-MNIST.
pub const FASHION_MNIST_MEAN: f64 = 0.286;
pub const FASHION_MNIST_STD: f64 = 0.353;
