//! On-disk formats: ALANFEAT patch-feature tensors, ALANMASK binary rasters,
//! ALANPMAP parcel label rasters, binary PGM frames and the TOML dataset
//! manifest.
//!
//! All binary formats are little-endian with a fixed magic and a `u16`
//! version directly after it.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Phase;

pub const FEATURE_MAGIC: &[u8; 8] = b"ALANFEAT";
pub const MASK_MAGIC: &[u8; 8] = b"ALANMASK";
pub const PARCEL_MAGIC: &[u8; 8] = b"ALANPMAP";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_GLOBAL: u16 = 1;

/// Backbone patch features of one video, `[frames, grid_h, grid_w, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub seq_id: String,
    pub patch_size: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub patches: Array4<f32>,
    /// Optional per-frame descriptor `[frames, channels]`.
    pub global: Option<Array2<f32>>,
}

impl FeatureSequence {
    pub fn new(
        seq_id: impl Into<String>,
        patch_size: usize,
        img_h: usize,
        img_w: usize,
        patches: Array4<f32>,
        global: Option<Array2<f32>>,
    ) -> Result<Self> {
        let seq = FeatureSequence {
            seq_id: seq_id.into(),
            patch_size,
            img_h,
            img_w,
            patches: patches.as_standard_layout().into_owned(),
            global: global.map(|g| g.as_standard_layout().into_owned()),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn grid_h(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn grid_w(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.patches.shape()[3]
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Patch vectors of frame `t` as an `[N, C]` matrix in 64-bit.
    pub fn frame_matrix(&self, t: usize) -> Array2<f64> {
        let frame = self.patches.index_axis(Axis(0), t);
        let n = self.patches_per_frame();
        let c = self.channels();
        Array2::from_shape_vec(
            (n, c),
            frame.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("frame is contiguous [Hp, Wp, C]")
    }

    pub fn global_vector(&self, t: usize) -> Option<Vec<f64>> {
        self.global
            .as_ref()
            .map(|g| g.row(t).iter().map(|&v| f64::from(v)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let (t, hp, wp, c) = self.patches.dim();
        if t == 0 {
            return Err(Error::Geometry("sequence has no frames".into()));
        }
        if c == 0 {
            return Err(Error::Geometry("channel count is zero".into()));
        }
        if hp * self.patch_size != self.img_h || wp * self.patch_size != self.img_w {
            return Err(Error::Geometry(format!(
                "grid {hp}x{wp} at patch size {} does not cover image {}x{}",
                self.patch_size, self.img_h, self.img_w
            )));
        }
        if self.patches.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("patches of {}", self.seq_id)));
        }
        if let Some(g) = &self.global {
            if g.dim() != (t, c) {
                return Err(Error::Dimension(format!(
                    "global block {:?} does not match [{t}, {c}]",
                    g.dim()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("global block of {}", self.seq_id)));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::SizeMismatch(format!(
                "header truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn magic(&mut self, magic: &'static [u8; 8]) -> Result<()> {
        let found = self.take(8).map_err(|_| Error::BadMagic {
            expected: std::str::from_utf8(magic).unwrap(),
        })?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: std::str::from_utf8(magic).unwrap(),
            });
        }
        Ok(())
    }

    fn version(&mut self, expected: u16) -> Result<()> {
        let found = self.u16()?;
        if found != expected {
            return Err(Error::Version { found, expected });
        }
        Ok(())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidValue(format!("{what} = {v} exceeds u32")))
}

pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let id = seq.seq_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::InvalidValue("seq_id longer than 65535 bytes".into()))?;
    let (t, hp, wp, c) = seq.patches.dim();
    let mut out = Vec::with_capacity(48 + id.len() + 4 * seq.patches.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if seq.global.is_some() { FLAG_GLOBAL } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for (v, name) in [
        (t, "T"),
        (hp, "Hp"),
        (wp, "Wp"),
        (c, "C"),
        (seq.patch_size, "patch_size"),
        (seq.img_h, "img_h"),
        (seq.img_w, "img_w"),
    ] {
        out.extend_from_slice(&u32_field(v, name)?.to_le_bytes());
    }
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    for v in seq.patches.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(g) = &seq.global {
        for v in g.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let flags = r.u16()?;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let [t, hp, wp, c, patch_size, img_h, img_w] = dims;
    let id_len = r.u16()? as usize;
    let seq_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::InvalidValue("seq_id is not UTF-8".into()))?;
    if hp * patch_size != img_h || wp * patch_size != img_w {
        return Err(Error::Geometry(format!(
            "{seq_id}: grid {hp}x{wp} at patch size {patch_size} does not cover image {img_h}x{img_w}"
        )));
    }
    let n_patch = t * hp * wp * c;
    let n_global = if flags & FLAG_GLOBAL != 0 { t * c } else { 0 };
    let expected = 4 * (n_patch + n_global);
    if r.remaining() != expected {
        return Err(Error::SizeMismatch(format!(
            "{seq_id}: payload has {} bytes, header declares {expected}",
            r.remaining()
        )));
    }
    let floats = |r: &mut Reader, n: usize| -> Result<Vec<f32>> {
        Ok(r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let patches = Array4::from_shape_vec((t, hp, wp, c), floats(&mut r, n_patch)?)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let global = if n_global > 0 {
        Some(
            Array2::from_shape_vec((t, c), floats(&mut r, n_global)?)
                .map_err(|e| Error::Dimension(e.to_string()))?,
        )
    } else {
        None
    };
    FeatureSequence::new(seq_id, patch_size, img_h, img_w, patches, global)
}

/// Writes an ALANFEAT file. Nothing is written if validation fails.
pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_features(seq)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    decode_features(&read_bytes(path.as_ref())?)
}

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// An annotation raster together with what it annotates.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    pub seq_id: String,
    pub frame_idx: usize,
    pub region_label: String,
    pub phase: Option<Phase>,
    pub mask: BinaryMask,
}

pub fn encode_mask(mask: &BinaryMask) -> Result<Vec<u8>> {
    if mask.data.len() != mask.height * mask.width {
        return Err(Error::Dimension(format!(
            "mask payload {} does not match {}x{}",
            mask.data.len(),
            mask.height,
            mask.width
        )));
    }
    let mut out = Vec::with_capacity(18 + mask.data.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(mask.height, "img_h")?.to_le_bytes());
    out.extend_from_slice(&u32_field(mask.width, "img_w")?.to_le_bytes());
    out.extend(mask.data.iter().map(|&v| u8::from(v)));
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let mut r = Reader::new(bytes);
    r.magic(MASK_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    if r.remaining() != height * width {
        return Err(Error::Dimension(format!(
            "mask payload has {} bytes, header declares {height}x{width}",
            r.remaining()
        )));
    }
    let data = r
        .take(height * width)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::InvalidValue(format!("mask value {other} not in {{0,1}}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinaryMask {
        height,
        width,
        data,
    })
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_mask(mask)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&read_bytes(path.as_ref())?)
}

/// Per-pixel parcel labels at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParcelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u16>,
}

impl ParcelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u16>) -> Result<Self> {
        let map = ParcelMap {
            height,
            width,
            classes,
            labels,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::Dimension(format!(
                "{} labels for a {}x{} map",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::InvalidValue(format!(
                "label {bad} outside [0, {})",
                self.classes
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.width + c]
    }

    pub fn same_shape(&self, mask: &BinaryMask) -> bool {
        self.height == mask.height && self.width == mask.width
    }
}

pub fn encode_parcels(map: &ParcelMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut out = Vec::with_capacity(22 + 2 * map.labels.len());
    out.extend_from_slice(PARCEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(map.classes, "K")?.to_le_bytes());
    out.extend_from_slice(&u32_field(map.height, "img_h")?.to_le_bytes());
    out.extend_from_slice(&u32_field(map.width, "img_w")?.to_le_bytes());
    for l in &map.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_parcels(bytes: &[u8]) -> Result<ParcelMap> {
    let mut r = Reader::new(bytes);
    r.magic(PARCEL_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let classes = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    if r.remaining() != 2 * height * width {
        return Err(Error::SizeMismatch(format!(
            "parcel payload has {} bytes, header declares {height}x{width} u16 labels",
            r.remaining()
        )));
    }
    let labels = r
        .take(2 * height * width)?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    ParcelMap::new(height, width, classes, labels)
}

pub fn write_parcels(map: &ParcelMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_parcels(map)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_parcels(path: impl AsRef<Path>) -> Result<ParcelMap> {
    decode_parcels(&read_bytes(path.as_ref())?)
}

/// 8-bit grayscale frame, values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayFrame {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }
}

/// Reads a binary (P5) PGM with maxval ≤ 255.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayFrame> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let parse_err = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(parse_err("only binary P5 PGM is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err("bad PGM header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(parse_err("PGM maxval must be in 1..=255"));
    }
    if bytes.len() < pos + width * height {
        return Err(parse_err("PGM payload truncated"));
    }
    let data = bytes[pos..pos + width * height]
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    Ok(GrayFrame {
        height,
        width,
        data,
    })
}

pub fn write_pgm(frame: &GrayFrame, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(
        frame
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path.as_ref(), &out)
}

/// Echo view classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewLabel {
    A2C,
    A4C,
    Plax,
    Psax,
}

impl ViewLabel {
    /// All labels in lexicographic order of their names.
    pub const ALL: [ViewLabel; 4] = [ViewLabel::A2C, ViewLabel::A4C, ViewLabel::Plax, ViewLabel::Psax];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::A2C => "A2C",
            ViewLabel::A4C => "A4C",
            ViewLabel::Plax => "PLAX",
            ViewLabel::Psax => "PSAX",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestDoc {
    #[serde(default)]
    split_tag: String,
    #[serde(default)]
    entries: Vec<EntryDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryDoc {
    seq_id: String,
    feature_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    masks: Vec<MaskRefDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskRefDoc {
    frame_idx: usize,
    region_label: String,
    mask_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRef {
    pub frame_idx: usize,
    pub region_label: String,
    pub mask_path: PathBuf,
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seq_id: String,
    pub feature_path: PathBuf,
    pub view_label: Option<ViewLabel>,
    pub masks: Vec<MaskRef>,
    /// Directory of `<frame_idx>.pgm` grayscale frames.
    pub image_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn new(seq_id: impl Into<String>, feature_path: impl Into<PathBuf>) -> Self {
        ManifestEntry {
            seq_id: seq_id.into(),
            feature_path: feature_path.into(),
            view_label: None,
            masks: Vec::new(),
            image_path: None,
        }
    }

    pub fn frame_image_path(&self, frame_idx: usize) -> Option<PathBuf> {
        self.image_path
            .as_ref()
            .map(|dir| dir.join(format!("{frame_idx}.pgm")))
            .filter(|p| p.is_file())
    }

    pub fn load_features(&self) -> Result<FeatureSequence> {
        let seq = read_features(&self.feature_path)?;
        if seq.seq_id != self.seq_id {
            log::warn!(
                "feature file {} carries seq_id {:?}, manifest says {:?}",
                self.feature_path.display(),
                seq.seq_id,
                self.seq_id
            );
        }
        Ok(seq)
    }

    /// Loads every referenced mask, checking its size against the sequence geometry.
    pub fn load_masks(&self, img_h: usize, img_w: usize) -> Result<Vec<MaskRaster>> {
        self.masks
            .iter()
            .map(|m| {
                let mask = read_mask(&m.mask_path)?;
                if mask.height != img_h || mask.width != img_w {
                    return Err(Error::Dimension(format!(
                        "mask {} is {}x{}, sequence {} is {img_h}x{img_w}",
                        m.mask_path.display(),
                        mask.height,
                        mask.width,
                        self.seq_id
                    )));
                }
                Ok(MaskRaster {
                    seq_id: self.seq_id.clone(),
                    frame_idx: m.frame_idx,
                    region_label: m.region_label.clone(),
                    phase: m.phase,
                    mask,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub split_tag: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: &Path, origin: &Path) -> Result<Self> {
        let doc: ManifestDoc = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(doc.entries.len());
        for e in doc.entries {
            if !seen.insert(e.seq_id.clone()) {
                return Err(Error::DuplicateSeqId(e.seq_id));
            }
            let view_label = e.view_label.as_deref().map(str::parse).transpose()?;
            let resolve = |p: &Path| -> Result<PathBuf> {
                let full = base_dir.join(p);
                if !full.exists() {
                    return Err(Error::MissingFile(full));
                }
                Ok(full)
            };
            let masks = e
                .masks
                .iter()
                .map(|m| {
                    Ok(MaskRef {
                        frame_idx: m.frame_idx,
                        region_label: m.region_label.clone(),
                        mask_path: resolve(&m.mask_path)?,
                        phase: m.phase,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(ManifestEntry {
                feature_path: resolve(&e.feature_path)?,
                image_path: e.image_path.as_deref().map(resolve).transpose()?,
                seq_id: e.seq_id,
                view_label,
                masks,
            });
        }
        Ok(DatasetManifest {
            split_tag: doc.split_tag,
            entries,
        })
    }

    /// Serializes with every path made relative to `base_dir` where possible.
    pub fn to_toml(&self, base_dir: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base_dir).unwrap_or(p).to_path_buf();
        let doc = ManifestDoc {
            split_tag: self.split_tag.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| EntryDoc {
                    seq_id: e.seq_id.clone(),
                    feature_path: rel(&e.feature_path),
                    view_label: e.view_label.map(|l| l.to_string()),
                    image_path: e.image_path.as_deref().map(rel),
                    masks: e
                        .masks
                        .iter()
                        .map(|m| MaskRefDoc {
                            frame_idx: m.frame_idx,
                            region_label: m.region_label.clone(),
                            mask_path: rel(&m.mask_path),
                            phase: m.phase,
                        })
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&doc).expect("manifest serializes")
    }

    pub fn entry(&self, seq_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.seq_id == seq_id)
    }
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::parse(&text, base, path)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    fs::write(path, manifest.to_toml(base)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg64;

    fn random_seq(t: usize, hp: usize, wp: usize, c: usize, global: bool) -> FeatureSequence {
        let mut rng = Pcg64::seed_from_u64(7);
        let patches = Array::from_shape_fn((t, hp, wp, c), |_| rng.random_range(-3.0f32..3.0));
        let global = global.then(|| Array::from_shape_fn((t, c), |_| rng.random_range(-1.0f32..1.0)));
        FeatureSequence::new("seq-a", 4, hp * 4, wp * 4, patches, global).unwrap()
    }

    #[test]
    fn features_round_trip_field_for_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.alanfeat");
        for global in [false, true] {
            let seq = random_seq(2, 3, 3, 4, global);
            write_features(&seq, &path).unwrap();
            assert_eq!(read_features(&path).unwrap(), seq);
        }
    }

    #[test]
    fn nan_is_rejected_and_no_file_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.alanfeat");
        let mut seq = random_seq(2, 3, 3, 4, false);
        seq.patches[[1, 2, 0, 3]] = f32::NAN;
        assert!(matches!(write_features(&seq, &path), Err(Error::NonFinite(_))));
        assert!(!path.exists());
    }

    #[test]
    fn minimal_single_value() {
        let seq = FeatureSequence::new(
            "m",
            1,
            1,
            1,
            Array4::from_elem((1, 1, 1, 1), 0.5),
            None,
        )
        .unwrap();
        let bytes = encode_features(&seq).unwrap();
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back.patches[[0, 0, 0, 0]], 0.5);
        assert_eq!(back.patches.len(), 1);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let seq = random_seq(1, 2, 2, 3, true);
        let mut bytes = encode_features(&seq).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::BadMagic { .. })));
        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_features(truncated), Err(Error::SizeMismatch(_))));
        let mut wrong_version = good.clone();
        wrong_version[8] = 2;
        assert!(matches!(decode_features(&wrong_version), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn geometry_inconsistency_rejected() {
        let seq = random_seq(1, 2, 2, 3, false);
        let mut bytes = encode_features(&seq).unwrap();
        // img_h lives after magic(8) version(2) flags(2) T Hp Wp C patch(5 x 4)
        bytes[32..36].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_features(&bytes), Err(Error::Geometry(_))));
    }

    #[test]
    fn echo_geometry_gives_28_by_28_grid() {
        let seq = FeatureSequence::new(
            "echo",
            4,
            112,
            112,
            Array4::zeros((1, 112 / 4, 112 / 4, 2)),
            None,
        )
        .unwrap();
        let back = decode_features(&encode_features(&seq).unwrap()).unwrap();
        assert_eq!((back.grid_h(), back.grid_w()), (28, 28));
    }

    #[test]
    fn masks_round_trip_and_reject_bad_values() {
        let zeros = BinaryMask::new(4, 4);
        assert_eq!(decode_mask(&encode_mask(&zeros).unwrap()).unwrap(), zeros);
        let checker = BinaryMask::from_fn(8, 8, |r, c| (r + c) % 2 == 0);
        let bytes = encode_mask(&checker).unwrap();
        assert_eq!(&bytes[18..20], &[1, 0]);
        assert_eq!(decode_mask(&bytes).unwrap(), checker);

        let mut bad = bytes.clone();
        bad[20] = 2;
        assert!(matches!(decode_mask(&bad), Err(Error::InvalidValue(_))));
        assert!(matches!(decode_mask(&bytes[..bytes.len() - 1]), Err(Error::Dimension(_))));
    }

    #[test]
    fn parcels_round_trip() {
        let map = ParcelMap::new(3, 2, 300, vec![0, 1, 299, 5, 7, 0]).unwrap();
        assert_eq!(decode_parcels(&encode_parcels(&map).unwrap()).unwrap(), map);
        assert!(ParcelMap::new(1, 1, 2, vec![2]).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = GrayFrame {
            height: 2,
            width: 3,
            data: vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8],
        };
        let path = dir.path().join("0.pgm");
        write_pgm(&frame, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in back.data.iter().zip(&frame.data) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
    }

    fn manifest_dir(entries: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let seq = random_seq(1, 2, 2, 3, false);
        write_features(&seq, dir.path().join("a.alanfeat")).unwrap();
        write_features(&seq, dir.path().join("b.alanfeat")).unwrap();
        write_mask(&BinaryMask::new(8, 8), dir.path().join("m.alanmask")).unwrap();
        let path = dir.path().join("manifest.toml");
        fs::write(&path, entries).unwrap();
        (dir, path)
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let (dir, path) = manifest_dir(
            r#"
split_tag = "val"
[[entries]]
seq_id = "a"
feature_path = "a.alanfeat"
view_label = "A4C"
[[entries.masks]]
frame_idx = 0
region_label = "LV"
mask_path = "m.alanmask"
phase = "ES"
[[entries]]
seq_id = "b"
feature_path = "b.alanfeat"
"#,
        );
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.split_tag, "val");
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].feature_path, dir.path().join("a.alanfeat"));
        assert_eq!(m.entries[0].view_label, Some(ViewLabel::A4C));
        assert_eq!(m.entries[0].masks[0].phase, Some(Phase::ES));
        let masks = m.entries[0].load_masks(8, 8).unwrap();
        assert_eq!(masks[0].region_label, "LV");
        assert!(m.entries[0].load_masks(4, 4).is_err());
        for e in &m.entries {
            e.load_features().unwrap();
        }
        // writing back and re-reading is stable
        write_manifest(&m, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn manifest_errors() {
        let (_d, p) = manifest_dir(
            "[[entries]]\nseq_id = \"a\"\nfeature_path = \"a.alanfeat\"\n[[entries]]\nseq_id = \"a\"\nfeature_path = \"b.alanfeat\"\n",
        );
        assert!(matches!(read_manifest(&p), Err(Error::DuplicateSeqId(_))));
        let (_d, p) = manifest_dir(
            "[[entries]]\nseq_id = \"a\"\nfeature_path = \"a.alanfeat\"\nview_label = \"A5C\"\n",
        );
        assert!(matches!(read_manifest(&p), Err(Error::UnknownLabel(l)) if l == "A5C"));
        let (_d, p) = manifest_dir("[[entries]]\nseq_id = \"a\"\nfeature_path = \"zz.alanfeat\"\n");
        assert!(matches!(read_manifest(&p), Err(Error::MissingFile(_))));
        let (_d, p) = manifest_dir("split_tag = \"test\"\nentries = []\n");
        assert!(read_manifest(&p).unwrap().entries.is_empty());
    }
}
