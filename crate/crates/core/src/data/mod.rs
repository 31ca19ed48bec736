//! Images, MNIST ingestion, trigger-set generation and detector datasets.

mod features;
mod idx;
mod image;
mod triggers;

use thiserror::Error;

pub use features::{
    build_detector_dataset, mean_pixel, mean_pixel_of, preprocess, stolen_features,
    DetectorDataset, CLEAN, TRIGGER,
};
pub use idx::{
    encode_images, encode_labels, load_idx, load_mnist, mnist_paths, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use image::{Dataset, Image, Split};
pub use triggers::{
    assign_random_labels, default_delta, generate_trigger_images, min_pairwise_distance,
    trigger_file_name, TriggerFamily, TriggerManifest, TriggerSet, TriggerSource,
    ATTEMPTS_PER_IMAGE, PATCH_SIZE,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error: {0}")]
    Format(String),
    #[error("inconsistent files: {0}")]
    Consistency(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("could not place {requested} triggers at distance {delta} (accepted {accepted})")]
    Infeasible {
        requested: usize,
        accepted: usize,
        delta: f64,
    },
    #[error("distance {found} below required minimum {required}")]
    Spacing { found: f64, required: f64 },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
