//! DICE scoring, grouped statistics and overlay rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{BinaryMask, GrayFrame, ParcelMap};

/// Annotated cardiac phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// End-systole.
    ES,
    /// End-diastole.
    ED,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::ES => "ES",
            Phase::ED => "ED",
        })
    }
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "dice of {}x{} and {}x{} masks",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRecord {
    pub seq_id: String,
    pub frame_idx: usize,
    pub region_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub region_label: String,
    /// `"ES"`, `"ED"` or `"untagged"`.
    pub phase: String,
    pub count: usize,
    pub mean: f64,
    /// Sample (n−1) standard deviation; 0 for a single record.
    pub std: f64,
    pub single_record: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins of `bin_width` over `[0, 1]`; 1.0 falls in the last bin.
    pub fn build(values: impl IntoIterator<Item = f64>, bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(Error::Config(format!("bin width {bin_width} outside (0, 1]")));
        }
        let bins = (1.0 / bin_width - 1e-9).ceil() as usize;
        let mut counts = vec![0; bins];
        for v in values {
            let i = ((v / bin_width).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Histogram { bin_width, counts })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.4},{c}\n", i as f64 * self.bin_width));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub std_convention: String,
    pub empty_masks_convention: String,
    pub groups: Vec<GroupStats>,
    pub histogram: Histogram,
    pub records: Vec<DiceRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn group(&self, region: &str, phase: &str) -> Option<&GroupStats> {
        self.groups
            .iter()
            .find(|g| g.region_label == region && g.phase == phase)
    }
}

pub const DEFAULT_BIN_WIDTH: f64 = 0.05;

/// Mean and sample standard deviation per (region, phase), plus a DICE histogram.
pub fn aggregate(records: &[DiceRecord], bin_width: f64) -> Result<EvalReport> {
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        if !(0.0..=1.0).contains(&r.dice) {
            return Err(Error::InvalidValue(format!("dice {} outside [0, 1]", r.dice)));
        }
        let phase = r.phase.map_or_else(|| "untagged".to_string(), |p| p.to_string());
        groups.entry((r.region_label.clone(), phase)).or_default().push(r.dice);
    }
    if records.is_empty() {
        let msg = "no DICE records to aggregate".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let groups = groups
        .into_iter()
        .map(|((region_label, phase), values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            GroupStats {
                region_label,
                phase,
                count: n,
                mean,
                std,
                single_record: n == 1,
            }
        })
        .collect();
    Ok(EvalReport {
        std_convention: "sample standard deviation (n-1)".into(),
        empty_masks_convention: "dice of two empty masks is 1".into(),
        groups,
        histogram: Histogram::build(records.iter().map(|r| r.dice), bin_width)?,
        records: records.to_vec(),
        warnings,
    })
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[u8; 3]>,
}

pub const PRED_COLOR: [u8; 3] = [0, 200, 0];
pub const TRUTH_COLOR: [u8; 3] = [0, 0, 255];
pub const OVERLAP_COLOR: [u8; 3] = [64, 224, 208];
pub const PARCEL_EDGE_COLOR: [u8; 3] = [255, 220, 0];

impl RgbImage {
    pub fn count_color(&self, color: [u8; 3]) -> usize {
        self.data.iter().filter(|&&p| p == color).count()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.data {
            out.extend_from_slice(px);
        }
        out
    }

    /// RGBA bytes, for canvases.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.data.iter().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Prediction-only pixels green, annotation-only blue, overlap turquoise,
/// drawn over the grayscale frame (black when absent). Parcel borders, when
/// a parcel map is given, are drawn on top.
pub fn render_overlay(
    frame: Option<&GrayFrame>,
    pred: &BinaryMask,
    truth: Option<&BinaryMask>,
    parcels: Option<&ParcelMap>,
) -> Result<RgbImage> {
    let (h, w) = (pred.height, pred.width);
    if let Some(f) = frame {
        if (f.height, f.width) != (h, w) {
            return Err(Error::Dimension("frame and prediction differ in size".into()));
        }
    }
    if let Some(t) = truth {
        if !t.same_shape(pred) {
            return Err(Error::Dimension("annotation and prediction differ in size".into()));
        }
    }
    if let Some(p) = parcels {
        if !p.same_shape(pred) {
            return Err(Error::Dimension("parcel map and prediction differ in size".into()));
        }
    }
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let p = pred.data[i];
        let t = truth.is_some_and(|m| m.data[i]);
        let px = match (p, t) {
            (true, true) => OVERLAP_COLOR,
            (true, false) => PRED_COLOR,
            (false, true) => TRUTH_COLOR,
            (false, false) => {
                let g = frame.map_or(0, |f| (f.data[i].clamp(0.0, 1.0) * 255.0).round() as u8);
                [g, g, g]
            }
        };
        data.push(px);
    }
    if let Some(map) = parcels {
        for r in 0..h {
            for c in 0..w {
                let l = map.get(r, c);
                let edge = (c + 1 < w && map.get(r, c + 1) != l) || (r + 1 < h && map.get(r + 1, c) != l);
                if edge {
                    data[r * w + c] = PARCEL_EDGE_COLOR;
                }
            }
        }
    }
    Ok(RgbImage {
        height: h,
        width: w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(dice: f64, phase: Option<Phase>) -> DiceRecord {
        DiceRecord {
            seq_id: "s".into(),
            frame_idx: 0,
            region_label: "LV".into(),
            phase,
            dice,
        }
    }

    #[test]
    fn dice_unit_values() {
        let a = BinaryMask::from_fn(2, 2, |r, _| r == 0);
        let b = BinaryMask::from_fn(2, 2, |r, _| r == 1);
        let c = BinaryMask::from_fn(2, 2, |_, col| col == 0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.5);
        let e = BinaryMask::new(2, 2);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &BinaryMask::new(3, 2)).is_err());
    }

    #[test]
    fn aggregate_hand_values() {
        let r = aggregate(&[rec(0.8, Some(Phase::ES)), rec(0.8, Some(Phase::ES))], DEFAULT_BIN_WIDTH).unwrap();
        let g = r.group("LV", "ES").unwrap();
        assert!((g.mean - 0.8).abs() < 1e-15);
        assert_eq!(g.std, 0.0);

        let r = aggregate(&[rec(0.6, Some(Phase::ED)), rec(1.0, Some(Phase::ED))], DEFAULT_BIN_WIDTH).unwrap();
        let g = r.group("LV", "ED").unwrap();
        assert!((g.mean - 0.8).abs() < 1e-15);
        assert!((g.std - (2.0f64 * 0.04).sqrt()).abs() < 1e-12);
        assert!((g.std - 0.2828).abs() < 1e-4);

        let r = aggregate(&[rec(0.7, None)], DEFAULT_BIN_WIDTH).unwrap();
        let g = r.group("LV", "untagged").unwrap();
        assert!(g.single_record && g.std == 0.0);
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::build([0.0, 0.049, 0.05, 0.99, 1.0], 0.05).unwrap();
        assert_eq!(h.counts.len(), 20);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[19], 2);
        assert!(h.to_csv().starts_with("bin_start,count\n0.0000,2\n0.0500,1\n"));
    }

    #[test]
    fn overlay_colors() {
        let m = BinaryMask::from_fn(3, 3, |r, c| r == c);
        let img = render_overlay(None, &m, Some(&m), None).unwrap();
        assert_eq!(img.count_color(OVERLAP_COLOR), 3);

        let empty = BinaryMask::new(3, 3);
        let img = render_overlay(None, &empty, Some(&m), None).unwrap();
        assert_eq!(img.count_color(TRUTH_COLOR), 3);
        assert_eq!(img.count_color(PRED_COLOR), 0);

        let pred = BinaryMask::from_fn(4, 5, |r, _| r < 2); // 10 px
        let truth = BinaryMask::from_fn(4, 5, |_, c| c < 2); // 8 px, 4 shared
        let img = render_overlay(None, &pred, Some(&truth), None).unwrap();
        assert_eq!(img.count_color(OVERLAP_COLOR), 4);
        assert_eq!(img.count_color(PRED_COLOR), 6);
        assert_eq!(img.count_color(TRUTH_COLOR), 4);
        assert_eq!(img.count_color([0, 0, 0]), 6);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(ppm.len(), 11 + 60);
    }

    #[test]
    fn overlay_parcel_edges_and_errors() {
        let pred = BinaryMask::new(2, 3);
        let map = ParcelMap::new(2, 3, 2, vec![0, 1, 1, 0, 1, 1]).unwrap();
        let img = render_overlay(None, &pred, None, Some(&map)).unwrap();
        assert_eq!(img.count_color(PARCEL_EDGE_COLOR), 2);
        assert!(render_overlay(None, &pred, Some(&BinaryMask::new(3, 3)), None).is_err());
    }
}
