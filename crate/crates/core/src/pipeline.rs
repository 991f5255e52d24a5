//! Glue between the stores, the head and the segmenter.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::feature_store::{FeatureSequence, ParcelMap};
use crate::head::{infer_parcel_map, HeadParams};
use crate::trainer::Standardization;

/// Standardized `[N, C]` patch matrix of frame `t`.
pub fn frame_inputs(seq: &FeatureSequence, t: usize, stats: &Standardization) -> Result<Array2<f64>> {
    if t >= seq.frames() {
        return Err(Error::InvalidValue(format!(
            "frame {t} out of range for {} ({} frames)",
            seq.seq_id,
            seq.frames()
        )));
    }
    if stats.channels() != seq.channels() {
        return Err(Error::Dimension(format!(
            "standardization has {} channels, {} has {}",
            stats.channels(),
            seq.seq_id,
            seq.channels()
        )));
    }
    let mut x = seq.frame_matrix(t);
    stats.apply(&mut x);
    Ok(x)
}

/// Parcel map of one frame at image resolution.
pub fn parcelize_frame(
    seq: &FeatureSequence,
    t: usize,
    params: &HeadParams,
    stats: &Standardization,
) -> Result<ParcelMap> {
    if params.channels() != seq.channels() {
        return Err(Error::Dimension(format!(
            "head expects C={}, {} has C={}",
            params.channels(),
            seq.seq_id,
            seq.channels()
        )));
    }
    let x = frame_inputs(seq, t, stats)?;
    let grid = x
        .into_shape_with_order((seq.grid_h(), seq.grid_w(), seq.channels()))
        .expect("frame matrix is contiguous");
    infer_parcel_map(grid.view(), params, seq.img_h, seq.img_w)
}

/// Parcel maps for every frame.
pub fn parcelize_sequence(
    seq: &FeatureSequence,
    params: &HeadParams,
    stats: &Standardization,
) -> Result<Vec<ParcelMap>> {
    (0..seq.frames())
        .map(|t| parcelize_frame(seq, t, params, stats))
        .collect()
}
