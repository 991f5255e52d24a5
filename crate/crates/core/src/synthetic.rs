//! Synthetic "pulsating chamber" sequences with known ground truth.
//!
//! Each sequence shows a disk (region 1) whose radius oscillates over time,
//! surrounded by a ring of width two patches (region 2) on a background
//! (region 0). Patch features one-hot encode the region under the patch
//! centre in channels 0..3, plus isotropic Gaussian noise on every channel.
//! Masks are the analytic disk sampled at pixel centres.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::feature_store::{
    write_features, write_manifest, write_mask, write_pgm, BinaryMask, DatasetManifest, FeatureSequence,
    GrayFrame, ManifestEntry, MaskRef, ViewLabel,
};
use crate::metrics::Phase;

pub const REGION_LABEL: &str = "LV";
const RING_WIDTH: f64 = 2.0;
const PULSE: f64 = 0.12;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub grid: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub frames: usize,
    pub noise_std: f64,
    /// Frames per heartbeat.
    pub period: f64,
    /// Spread of the per-frame view descriptors around their class centre.
    pub view_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: 16,
            patch_size: 4,
            channels: 8,
            frames: 40,
            noise_std: 0.05,
            period: 20.0,
            view_spread: 0.1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(Error::Config("synthetic data needs at least 4 channels".into()));
        }
        if self.grid < 8 || self.patch_size == 0 || self.frames == 0 {
            return Err(Error::Config("synthetic grid must be at least 8 patches wide".into()));
        }
        if !(self.noise_std >= 0.0 && self.view_spread >= 0.0 && self.period > 0.0) {
            return Err(Error::Config("synthetic noise, spread and period must be non-negative".into()));
        }
        Ok(())
    }
}

/// Geometry of one synthetic sequence, in patch units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chamber {
    pub center: [f64; 2],
    pub base_radius: f64,
    pub phase: f64,
    pub period: f64,
}

impl Chamber {
    pub fn radius(&self, t: usize) -> f64 {
        self.base_radius * (1.0 + PULSE * (2.0 * PI * t as f64 / self.period + self.phase).sin())
    }

    /// Region at a point given in patch units.
    pub fn region_at(&self, t: usize, y: f64, x: f64) -> usize {
        let d = ((y - self.center[0]).powi(2) + (x - self.center[1]).powi(2)).sqrt();
        let r = self.radius(t);
        if d < r {
            1
        } else if d < r + RING_WIDTH {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub features: FeatureSequence,
    pub chamber: Chamber,
    pub view: ViewLabel,
    /// Frame of minimum radius.
    pub es: usize,
    /// Frame of maximum radius.
    pub ed: usize,
}

impl SynthSequence {
    pub fn mask(&self, t: usize) -> BinaryMask {
        let f = &self.features;
        let ps = f.patch_size as f64;
        BinaryMask::from_fn(f.img_h, f.img_w, |r, c| {
            self.chamber.region_at(t, (r as f64 + 0.5) / ps, (c as f64 + 0.5) / ps) == 1
        })
    }

    /// Grayscale rendering: dark cavity, bright wall, mid-gray background.
    pub fn frame(&self, t: usize) -> GrayFrame {
        let f = &self.features;
        let ps = f.patch_size as f64;
        let data = (0..f.img_h * f.img_w)
            .map(|i| {
                let (r, c) = (i / f.img_w, i % f.img_w);
                match self.chamber.region_at(t, (r as f64 + 0.5) / ps, (c as f64 + 0.5) / ps) {
                    1 => 0.15,
                    2 => 0.8,
                    _ => 0.4,
                }
            })
            .collect();
        GrayFrame {
            height: f.img_h,
            width: f.img_w,
            data,
        }
    }
}

/// Centre of a view class in descriptor space: the basis vector of its index.
pub fn view_center(label: ViewLabel, channels: usize) -> Vec<f64> {
    let mut v = vec![0.0; channels];
    v[label.index() % channels] = 1.0;
    v
}

fn noisy_descriptor(label: ViewLabel, channels: usize, spread: f64, rng: &mut Pcg64) -> Vec<f64> {
    let noise = Normal::new(0.0, spread).expect("finite spread");
    view_center(label, channels)
        .into_iter()
        .map(|v| v + noise.sample(rng))
        .collect()
}

/// `per_class` noisy descriptors around each view centre.
pub fn view_clusters(per_class: usize, channels: usize, spread: f64, seed: u64) -> Vec<(Vec<f64>, ViewLabel)> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 4);
    for label in ViewLabel::ALL {
        for _ in 0..per_class {
            out.push((noisy_descriptor(label, channels, spread, &mut rng), label));
        }
    }
    out
}

pub fn synth_sequence(seq_id: &str, view: ViewLabel, cfg: &SynthConfig, seed: u64) -> Result<SynthSequence> {
    cfg.validate()?;
    let mut rng = Pcg64::seed_from_u64(seed);
    let g = cfg.grid as f64;
    let chamber = Chamber {
        center: [
            g / 2.0 + rng.random_range(-1.0..1.0),
            g / 2.0 + rng.random_range(-1.0..1.0),
        ],
        base_radius: rng.random_range(3.5..4.5) * g / 16.0,
        phase: rng.random_range(0.0..2.0 * PI),
        period: cfg.period,
    };
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise");
    let ps = cfg.patch_size;
    let (t_n, n, c) = (cfg.frames, cfg.grid, cfg.channels);
    let mut patches = Array4::<f32>::zeros((t_n, n, n, c));
    for t in 0..t_n {
        for i in 0..n {
            for j in 0..n {
                let region = chamber.region_at(t, i as f64 + 0.5, j as f64 + 0.5);
                for ch in 0..c {
                    let base = if ch == region { 1.0 } else { 0.0 };
                    patches[[t, i, j, ch]] = (base + noise.sample(&mut rng)) as f32;
                }
            }
        }
    }
    let mut global = Array2::<f32>::zeros((t_n, c));
    for t in 0..t_n {
        for (ch, v) in noisy_descriptor(view, c, cfg.view_spread, &mut rng).into_iter().enumerate() {
            global[[t, ch]] = v as f32;
        }
    }
    let features = FeatureSequence::new(seq_id, ps, n * ps, n * ps, patches, Some(global))?;
    let radii: Vec<f64> = (0..t_n).map(|t| chamber.radius(t)).collect();
    let by = |better: fn(f64, f64) -> bool| {
        (0..t_n).fold(0, |best, t| if better(radii[t], radii[best]) { t } else { best })
    };
    Ok(SynthSequence {
        features,
        chamber,
        view,
        es: by(|a, b| a < b),
        ed: by(|a, b| a > b),
    })
}

/// `count` sequences named `<prefix>-<i>`; views cycle through the four classes.
pub fn synth_dataset(prefix: &str, count: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthSequence>> {
    (0..count)
        .map(|i| {
            let view = ViewLabel::ALL[i % 4];
            let s = seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(i as u64);
            synth_sequence(&format!("{prefix}-{i:03}"), view, cfg, s)
        })
        .collect()
}

/// Writes features, ES/ED masks and (optionally) grayscale frames under
/// `dir`, plus a manifest `<split_tag>.toml`. Returns the manifest.
pub fn write_dataset(
    dir: &Path,
    split_tag: &str,
    sequences: &[SynthSequence],
    with_images: bool,
) -> Result<DatasetManifest> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let feat_dir = dir.join("features");
    let mask_dir = dir.join("masks");
    mkdir(&feat_dir)?;
    mkdir(&mask_dir)?;
    let mut entries = Vec::with_capacity(sequences.len());
    for s in sequences {
        let id = &s.features.seq_id;
        let mut entry = ManifestEntry::new(id.clone(), feat_dir.join(format!("{id}.alanfeat")));
        write_features(&s.features, &entry.feature_path)?;
        entry.view_label = Some(s.view);
        for (phase, t) in [(Phase::ES, s.es), (Phase::ED, s.ed)] {
            let path = mask_dir.join(format!("{id}_{}.alanmask", phase.to_string().to_lowercase()));
            write_mask(&s.mask(t), &path)?;
            entry.masks.push(MaskRef {
                frame_idx: t,
                region_label: REGION_LABEL.into(),
                mask_path: path,
                phase: Some(phase),
            });
        }
        if with_images {
            let img_dir = dir.join("images").join(id);
            mkdir(&img_dir)?;
            for t in [s.es, s.ed] {
                write_pgm(&s.frame(t), img_dir.join(format!("{t}.pgm")))?;
            }
            entry.image_path = Some(img_dir);
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        split_tag: split_tag.into(),
        entries,
    };
    write_manifest(&manifest, dir.join(format!("{split_tag}.toml")))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_without_noise() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            frames: 3,
            ..SynthConfig::default()
        };
        let s = synth_sequence("s", ViewLabel::A4C, &cfg, 3).unwrap();
        for v in s.features.patches.lanes(ndarray::Axis(3)) {
            assert_eq!(v.iter().take(3).sum::<f32>(), 1.0);
            assert!(v.iter().take(3).all(|&x| x == 0.0 || x == 1.0));
            assert!(v.iter().skip(3).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn es_is_smallest_and_ed_largest() {
        let s = synth_sequence("s", ViewLabel::A2C, &SynthConfig::default(), 9).unwrap();
        assert!(s.mask(s.es).count() < s.mask(s.ed).count());
        let counts: Vec<usize> = (0..40).map(|t| s.mask(t).count()).collect();
        assert!(counts.iter().all(|&c| c >= counts[s.es] && c <= counts[s.ed]));
        assert!(counts[s.es] > 100);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = SynthConfig::default();
        let a = synth_dataset("x", 2, &cfg, 5).unwrap();
        let b = synth_dataset("x", 2, &cfg, 5).unwrap();
        assert_eq!(a[1].features, b[1].features);
        assert_eq!(a[1].view, ViewLabel::A4C);
    }

    #[test]
    fn dataset_on_disk_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            frames: 4,
            ..SynthConfig::default()
        };
        let seqs = synth_dataset("d", 2, &cfg, 1).unwrap();
        write_dataset(dir.path(), "train", &seqs, true).unwrap();
        let m = crate::feature_store::read_manifest(dir.path().join("train.toml")).unwrap();
        assert_eq!(m.entries.len(), 2);
        let e = &m.entries[0];
        assert_eq!(e.load_features().unwrap(), seqs[0].features);
        let masks = e.load_masks(64, 64).unwrap();
        assert_eq!(masks[0].mask, seqs[0].mask(seqs[0].es));
        assert!(e.frame_image_path(seqs[0].ed).is_some());
    }
}
