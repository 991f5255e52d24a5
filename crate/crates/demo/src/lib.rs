//! Browser demo over the core pipeline. Three operations: train a head on
//! synthetic sequences and show its parcels, run the segmentation chain with
//! adjustable post-processing, and paint the kNN view decision map.

use alan_core::knn::{classify, KnnConfig, ViewIndex};
use alan_core::metrics::render_overlay;
use alan_core::segment::{fit_interior, segment, PostProcess, SegmenterSpec, SnakeParams, Thresholds};
use alan_core::synthetic::{synth_dataset, view_clusters, SynthConfig, SynthSequence};
use alan_core::trainer::{train, Standardization, TrainConfig};
use alan_core::{dice, parcelize_frame, HeadParams, ParcelMap};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

const VIEW_COLORS: [[u8; 3]; 4] = [[228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163]];

fn js_err(e: alan_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parcel_rgba(map: &ParcelMap, interior: &[u16]) -> Vec<u8> {
    map.labels
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = PALETTE[l as usize % PALETTE.len()];
            // interior parcels at full strength, the rest dimmed
            let a = if interior.is_empty() || interior.contains(&l) { 255 } else { 110 };
            [r, g, b, a]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    train_set: Vec<SynthSequence>,
    test_set: Vec<SynthSequence>,
    params: Option<HeadParams>,
    stats: Option<Standardization>,
    interior: Vec<u16>,
    classes: usize,
    last_dice: f64,
    last_warnings: Vec<String>,
}

#[wasm_bindgen]
impl Demo {
    /// Four training and two test sequences of `frames` frames.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, noise: f64, frames: usize) -> Result<Demo, JsError> {
        let cfg = SynthConfig {
            frames: frames.max(2),
            noise_std: noise,
            ..SynthConfig::default()
        };
        Ok(Demo {
            train_set: synth_dataset("train", 4, &cfg, seed).map_err(js_err)?,
            test_set: synth_dataset("test", 2, &cfg, seed.wrapping_add(1)).map_err(js_err)?,
            params: None,
            stats: None,
            interior: Vec::new(),
            classes: 0,
            last_dice: f64::NAN,
            last_warnings: Vec::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.train_set[0].features.img_w
    }

    pub fn height(&self) -> usize {
        self.train_set[0].features.img_h
    }

    pub fn frames(&self) -> usize {
        self.train_set[0].features.frames()
    }

    /// Trains a K-parcel head, fits the interior set on the training ES/ED
    /// frames and returns the per-epoch losses. Short clips and a larger step
    /// than the CLI defaults keep this to a couple of seconds in the browser.
    pub fn train(&mut self, epochs: usize, classes: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        let cfg = TrainConfig {
            epochs,
            classes,
            seed,
            frames_per_clip: 6,
            learning_rate: 2e-2,
            ..TrainConfig::default()
        };
        let feats: Vec<_> = self.train_set.iter().map(|s| s.features.clone()).collect();
        let out = train(&feats, &cfg).map_err(js_err)?;
        let mut samples = Vec::new();
        for s in &self.train_set {
            for t in [s.es, s.ed] {
                let map = parcelize_frame(&s.features, t, &out.params, &out.standardization).map_err(js_err)?;
                samples.push((map, s.mask(t)));
            }
        }
        let refs: Vec<_> = samples.iter().map(|(m, b)| (m, b)).collect();
        self.interior = fit_interior(&refs, classes, &Thresholds::default()).map_err(js_err)?;
        self.params = Some(out.params);
        self.stats = Some(out.standardization);
        self.classes = classes;
        Ok(out.report.epoch_losses)
    }

    pub fn interior_ids(&self) -> Vec<u16> {
        self.interior.clone()
    }

    fn test_map(&self, seq: usize, frame: usize) -> Result<(&SynthSequence, ParcelMap), JsError> {
        let (Some(params), Some(stats)) = (&self.params, &self.stats) else {
            return Err(JsError::new("train the head first"));
        };
        let s = self
            .test_set
            .get(seq)
            .ok_or_else(|| JsError::new("no such test sequence"))?;
        let map = parcelize_frame(&s.features, frame, params, stats).map_err(js_err)?;
        Ok((s, map))
    }

    /// RGBA parcel map of a test frame; interior parcels drawn opaque.
    pub fn parcels(&self, seq: usize, frame: usize) -> Result<Vec<u8>, JsError> {
        let (_, map) = self.test_map(seq, frame)?;
        Ok(parcel_rgba(&map, &self.interior))
    }

    /// RGBA overlay of the segmentation chain on a test frame: green
    /// prediction only, blue annotation only, turquoise overlap.
    pub fn segment(
        &mut self,
        seq: usize,
        frame: usize,
        enclave_cutoff: usize,
        closing_radius: usize,
        snake_iters: usize,
    ) -> Result<Vec<u8>, JsError> {
        let (s, map) = self.test_map(seq, frame)?;
        let post = PostProcess {
            enclave_cutoff,
            closing_radius,
            snake: SnakeParams {
                max_iters: snake_iters,
                ..SnakeParams::default()
            },
        };
        let spec = SegmenterSpec::new(self.classes, "LV", self.interior.clone(), Thresholds::default(), post)
            .map_err(js_err)?;
        let image = s.frame(frame);
        let truth = s.mask(frame);
        let out = segment(&map, &spec, Some(&image)).map_err(js_err)?;
        self.last_dice = dice(&out.mask, &truth).map_err(js_err)?;
        self.last_warnings = out.warnings;
        let overlay = render_overlay(Some(&image), &out.mask, Some(&truth), None).map_err(js_err)?;
        Ok(overlay.to_rgba())
    }

    pub fn last_dice(&self) -> f64 {
        self.last_dice
    }

    pub fn last_warnings(&self) -> String {
        self.last_warnings.join("; ")
    }
}

/// Decision map of the weighted kNN classifier over the plane of 2-D
/// descriptors `[-1.5, 1.5]²`, with the four view clusters placed on the
/// axes. Pixel colour is the winning view, brightness its vote share;
/// stored descriptors are drawn white.
#[wasm_bindgen]
pub fn knn_map(size: usize, k: usize, temperature: f64, spread: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    if !(spread.is_finite() && spread >= 0.0) || size == 0 {
        return Err(JsError::new("spread must be finite and non-negative, size positive"));
    }
    // four-channel clusters on the basis vectors, folded onto the plane so
    // A2C/A4C sit on +x/+y and PLAX/PSAX on -x/-y
    let bank = view_clusters(12, 4, spread, seed);
    let rows: Vec<Vec<f64>> = bank.iter().map(|(d, _)| vec![d[0] - d[2], d[1] - d[3]]).collect();
    let labels: Vec<_> = bank.iter().map(|(_, l)| *l).collect();
    let index = ViewIndex::from_rows(&rows, &labels).map_err(js_err)?;
    let cfg = KnnConfig {
        k: k.clamp(1, index.len()),
        temperature,
    };
    let to_plane = |i: usize| -1.5 + 3.0 * (i as f64 + 0.5) / size as f64;
    let mut out = vec![0u8; size * size * 4];
    for r in 0..size {
        for c in 0..size {
            let q = [to_plane(c), -to_plane(r)];
            let px = &mut out[(r * size + c) * 4..(r * size + c + 1) * 4];
            if q[0].hypot(q[1]) < 1e-9 {
                px.copy_from_slice(&[0, 0, 0, 255]);
                continue;
            }
            let p = classify(&q, &index, &cfg).map_err(js_err)?;
            let total: f64 = p.weights.iter().sum();
            let share = p.weights[p.label.index()] / total;
            let [cr, cg, cb] = VIEW_COLORS[p.label.index()];
            let shade = |v: u8| (f64::from(v) * (0.35 + 0.65 * share)).round() as u8;
            px.copy_from_slice(&[shade(cr), shade(cg), shade(cb), 255]);
        }
    }
    for row in &rows {
        let c = ((row[0] + 1.5) / 3.0 * size as f64).floor();
        let r = ((1.5 - row[1]) / 3.0 * size as f64).floor();
        if (0.0..size as f64).contains(&c) && (0.0..size as f64).contains(&r) {
            let i = (r as usize * size + c as usize) * 4;
            out[i..i + 4].copy_from_slice(&[255, 255, 255, 255]);
        }
    }
    Ok(out)
}
