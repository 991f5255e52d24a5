//! Unsupervised parcelization of echocardiogram patch features and the
//! downstream segmentation and view-classification stages.
//!
//! The pipeline runs on features exported by a frozen backbone:
//!
//! 1. [`trainer::train`] fits a small residual head ([`head`]) that maps
//!    patch features to a soft assignment over K parcels, using the
//!    correspondence objective in [`objective`].
//! 2. [`head::infer_parcel_map`] turns a frame into a per-pixel parcel map.
//! 3. [`segment::fit_interior`] picks the parcels lying inside an annotated
//!    region and [`segment::segment`] converts a parcel map into a single
//!    connected mask.
//! 4. [`knn`] classifies echo views from per-frame global descriptors.
//! 5. [`metrics`] scores masks with DICE and renders overlays.

pub mod error;
pub mod feature_store;
pub mod head;
pub mod knn;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod segment;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use feature_store::{
    read_features, read_manifest, read_mask, read_parcels, write_features, write_manifest, write_mask, write_parcels,
    BinaryMask, DatasetManifest, FeatureSequence, GrayFrame, ManifestEntry, ParcelMap, ViewLabel,
};
pub use head::{read_head, write_head, HeadParams};
pub use knn::{classify, KnnConfig, ViewIndex};
pub use metrics::{dice, Phase};
pub use pipeline::parcelize_frame;
pub use segment::{segment, SegmenterSpec};
pub use trainer::{train, Standardization, TrainConfig};
