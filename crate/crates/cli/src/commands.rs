use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use alan_core::feature_store::{read_pgm, ManifestEntry, MaskRaster};
use alan_core::head::{read_head, write_head};
use alan_core::knn::{classify, evaluate, ViewIndex};
use alan_core::metrics::{aggregate, dice, render_overlay, DiceRecord, OVERLAP_COLOR, PRED_COLOR, TRUTH_COLOR};
use alan_core::pipeline::parcelize_frame;
use alan_core::segment::{fit_interior, segment, SegmenterSpec};
use alan_core::synthetic::{synth_dataset, write_dataset, SynthConfig};
use alan_core::trainer::{train_manifest, Standardization};
use alan_core::{
    read_manifest, read_mask, read_parcels, write_mask, write_parcels, DatasetManifest, Error, ParcelMap, ViewLabel,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::*;
use crate::config::FileConfig;
use crate::error::{require, CliError};

type CliResult<T = ()> = Result<T, CliError>;

pub struct Context {
    pub config: FileConfig,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Context {
    fn out_dir(&self, sub: &str) -> CliResult<PathBuf> {
        let dir = if sub.is_empty() { self.out.clone() } else { self.out.join(sub) };
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.out_dir("")?.join(name);
        fs::write(&path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    require(path, "manifest")?;
    Ok(read_manifest(path)?)
}

fn frame_file(dir: &Path, seq_id: &str, t: usize, ext: &str) -> PathBuf {
    dir.join(seq_id).join(format!("{t}.{ext}"))
}

/// Frame indices present as `<dir>/<seq_id>/<t>.<ext>`, ascending.
fn frames_on_disk(dir: &Path, seq_id: &str, ext: &str) -> CliResult<Vec<usize>> {
    let seq_dir = dir.join(seq_id);
    let Ok(listing) = fs::read_dir(&seq_dir) else {
        return Ok(Vec::new());
    };
    let mut frames = BTreeSet::new();
    for item in listing {
        let path = item.map_err(|e| Error::Io {
            path: seq_dir.clone(),
            source: e,
        })?
        .path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(t) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                frames.insert(t);
            }
        }
    }
    Ok(frames.into_iter().collect())
}

pub fn train_head(ctx: &Context, a: &TrainArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    let mut cfg = ctx.config.train.clone();
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.classes = a.classes.unwrap_or(cfg.classes);
    cfg.frames_per_clip = a.frames_per_clip.unwrap_or(cfg.frames_per_clip);
    cfg.frame_stride = a.frame_stride.unwrap_or(cfg.frame_stride);
    cfg.batch_sequences = a.batch_sequences.unwrap_or(cfg.batch_sequences);
    if a.no_standardize {
        cfg.standardize_features = false;
    }
    cfg.validate()?;
    let started = Instant::now();
    let mut outcome = train_manifest(&manifest, &cfg)?;
    log::info!("training took {:.1?}", started.elapsed());
    let dir = ctx.out_dir("")?;
    write_head(&outcome.params, dir.join("head.alanhead"))?;
    outcome.standardization.write(dir.join("standardization.toml"))?;
    outcome.report.checkpoint_path = Some("head.alanhead".into());
    ctx.write_text("train_report.toml", &outcome.report.to_toml())?;
    let losses = &outcome.report.epoch_losses;
    println!(
        "trained K={} over {} epochs: loss {:.6} -> {:.6}",
        cfg.classes,
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn selected_frames(entry: &ManifestEntry, frames: usize, sel: &FrameSelector) -> CliResult<Vec<usize>> {
    let picked: Vec<usize> = match sel {
        FrameSelector::All => (0..frames).collect(),
        FrameSelector::Annotated if entry.masks.is_empty() => (0..frames).collect(),
        FrameSelector::Annotated => entry
            .masks
            .iter()
            .map(|m| m.frame_idx)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        FrameSelector::List(list) => list.clone(),
    };
    if let Some(&bad) = picked.iter().find(|&&t| t >= frames) {
        return Err(Error::InvalidValue(format!("frame {bad} out of range for {} ({frames} frames)", entry.seq_id)).into());
    }
    Ok(picked)
}

pub fn parcelize(ctx: &Context, a: &ParcelizeArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    require(&a.head, "head checkpoint")?;
    let head = read_head(&a.head)?;
    let stats_path = a
        .standardization
        .clone()
        .unwrap_or_else(|| a.head.with_file_name("standardization.toml"));
    let stats = if stats_path.exists() {
        Some(Standardization::read(&stats_path)?)
    } else if a.standardization.is_some() {
        return Err(CliError::Config(format!("standardization not found: {}", stats_path.display())));
    } else {
        log::warn!("no standardization next to the head; using raw features");
        None
    };
    let dir = ctx.out_dir("parcels")?;
    let mut written = 0;
    for entry in &manifest.entries {
        let seq = entry.load_features()?;
        let stats = stats.clone().unwrap_or_else(|| Standardization::identity(seq.channels()));
        let frames = selected_frames(entry, seq.frames(), &a.frames)?;
        let maps: Vec<ParcelMap> = frames
            .par_iter()
            .map(|&t| parcelize_frame(&seq, t, &head, &stats))
            .collect::<alan_core::Result<_>>()?;
        fs::create_dir_all(dir.join(&entry.seq_id)).map_err(|e| Error::Io {
            path: dir.join(&entry.seq_id),
            source: e,
        })?;
        for (t, map) in frames.iter().zip(&maps) {
            write_parcels(map, frame_file(&dir, &entry.seq_id, *t, "alanpmap"))?;
        }
        written += maps.len();
    }
    println!("wrote {written} parcel maps to {}", dir.display());
    Ok(())
}

fn pick_region(masks: &[MaskRaster], requested: Option<&str>) -> CliResult<String> {
    if let Some(r) = requested {
        return Ok(r.to_string());
    }
    let labels: BTreeSet<&str> = masks.iter().map(|m| m.region_label.as_str()).collect();
    match labels.len() {
        0 => Err(Error::Empty("manifest carries no masks".into()).into()),
        1 => Ok(labels.into_iter().next().unwrap().to_string()),
        _ => Err(CliError::Config(format!(
            "manifest has several regions ({}); pick one with --region",
            labels.into_iter().collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn all_masks(manifest: &DatasetManifest) -> CliResult<Vec<MaskRaster>> {
    let mut out = Vec::new();
    for entry in &manifest.entries {
        let seq = entry.load_features()?;
        out.extend(entry.load_masks(seq.img_h, seq.img_w)?);
    }
    Ok(out)
}

pub fn fit_segments(ctx: &Context, a: &FitArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    require(&a.parcels, "parcel directory")?;
    let sec = &ctx.config.segment;
    let masks = all_masks(&manifest)?;
    let region = pick_region(&masks, a.region.as_deref().or(sec.region_label.as_deref()))?;
    let mut thresholds = sec.thresholds;
    thresholds.overlap_frac = a.overlap_frac.unwrap_or(thresholds.overlap_frac);
    thresholds.hit_rate = a.hit_rate.unwrap_or(thresholds.hit_rate);
    thresholds.presence_rate = a.presence_rate.unwrap_or(thresholds.presence_rate);
    thresholds.validate()?;
    let mut post = sec.postproc;
    post.enclave_cutoff = a.enclave_cutoff.unwrap_or(post.enclave_cutoff);
    post.closing_radius = a.closing_radius.unwrap_or(post.closing_radius);
    post.snake.max_iters = a.snake_iters.unwrap_or(post.snake.max_iters);

    let mut samples = Vec::new();
    for m in masks.iter().filter(|m| m.region_label == region) {
        let path = frame_file(&a.parcels, &m.seq_id, m.frame_idx, "alanpmap");
        if !path.exists() {
            return Err(Error::MissingFile(path).into());
        }
        samples.push((read_parcels(&path)?, &m.mask));
    }
    let classes = samples
        .first()
        .map(|(p, _)| p.classes)
        .ok_or_else(|| Error::Empty(format!("no masks of region {region:?}")))?;
    let refs: Vec<_> = samples.iter().map(|(p, m)| (p, *m)).collect();
    let ids = fit_interior(&refs, classes, &thresholds)?;
    if ids.is_empty() {
        log::warn!("no parcel qualifies as interior to {region}");
    }
    let spec = SegmenterSpec::new(classes, region.clone(), ids, thresholds, post)?;
    let path = ctx.out_dir("")?.join("segmenter.toml");
    spec.write(&path)?;
    println!(
        "{region}: {} interior parcels of K={classes} from {} annotated frames: {:?}",
        spec.interior_ids.len(),
        samples.len(),
        spec.interior_ids
    );
    Ok(())
}

pub fn segment_cmd(ctx: &Context, a: &SegmentArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    require(&a.parcels, "parcel directory")?;
    require(&a.segmenter, "segmenter")?;
    let spec = SegmenterSpec::read(&a.segmenter)?;
    let dir = ctx.out_dir("masks")?;
    let mut written = 0;
    for entry in &manifest.entries {
        let frames = frames_on_disk(&a.parcels, &entry.seq_id, "alanpmap")?;
        if frames.is_empty() {
            log::warn!("no parcel maps for {}", entry.seq_id);
            continue;
        }
        let masks: Vec<_> = frames
            .par_iter()
            .map(|&t| -> alan_core::Result<_> {
                let map = read_parcels(frame_file(&a.parcels, &entry.seq_id, t, "alanpmap"))?;
                let image = entry.frame_image_path(t).map(read_pgm).transpose()?;
                let outcome = segment(&map, &spec, image.as_ref())?;
                for w in &outcome.warnings {
                    log::warn!("{} frame {t}: {w}", entry.seq_id);
                }
                Ok(outcome.mask)
            })
            .collect::<alan_core::Result<_>>()?;
        fs::create_dir_all(dir.join(&entry.seq_id)).map_err(|e| Error::Io {
            path: dir.join(&entry.seq_id),
            source: e,
        })?;
        for (t, mask) in frames.iter().zip(&masks) {
            write_mask(mask, frame_file(&dir, &entry.seq_id, *t, "alanmask"))?;
        }
        written += masks.len();
    }
    println!("wrote {written} {} masks to {}", spec.region_label, dir.display());
    Ok(())
}

pub fn eval_dice(ctx: &Context, a: &EvalArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    require(&a.pred, "prediction directory")?;
    let mut records = Vec::new();
    for m in all_masks(&manifest)? {
        if a.region.as_ref().is_some_and(|r| *r != m.region_label) {
            continue;
        }
        let path = frame_file(&a.pred, &m.seq_id, m.frame_idx, "alanmask");
        if !path.exists() {
            return Err(Error::MissingFile(path).into());
        }
        records.push(DiceRecord {
            seq_id: m.seq_id.clone(),
            frame_idx: m.frame_idx,
            region_label: m.region_label.clone(),
            phase: m.phase,
            dice: dice(&read_mask(&path)?, &m.mask)?,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("no annotated frames to score".into()).into());
    }
    let report = aggregate(&records, a.bin_width)?;
    ctx.write_text("dice_report.toml", &report.to_toml())?;
    ctx.write_text("dice_histogram.csv", &report.histogram.to_csv())?;
    for g in &report.groups {
        println!(
            "{} {}: DICE {:.4} ± {:.4} over {} frames",
            g.region_label, g.phase, g.mean, g.std, g.count
        );
    }
    Ok(())
}

/// Global descriptors of every `step`-th frame of one entry.
fn descriptors(entry: &ManifestEntry, step: usize) -> CliResult<Vec<(usize, Vec<f64>)>> {
    if step == 0 {
        return Err(CliError::Config("--frame-step must be >= 1".into()));
    }
    let seq = entry.load_features()?;
    if seq.global.is_none() {
        return Err(Error::InvalidValue(format!("{} has no global descriptor block", entry.seq_id)).into());
    }
    Ok((0..seq.frames())
        .step_by(step)
        .map(|t| (t, seq.global_vector(t).expect("global block present")))
        .collect())
}

pub fn index_views(ctx: &Context, a: &IndexArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for entry in &manifest.entries {
        let Some(label) = entry.view_label else {
            log::warn!("{} has no view label; skipped", entry.seq_id);
            continue;
        };
        for (_, d) in descriptors(entry, a.frame_step)? {
            rows.push(d);
            labels.push(label);
        }
    }
    let index = ViewIndex::from_rows(&rows, &labels)?;
    let path = ctx.out_dir("")?.join("views.alanknn");
    index.write(&path)?;
    println!("indexed {} descriptors of dimension {}", index.len(), index.channels());
    Ok(())
}

#[derive(Serialize)]
struct FramePrediction {
    seq_id: String,
    frame_idx: usize,
    label: String,
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct SequencePrediction {
    seq_id: String,
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<String>,
}

#[derive(Serialize)]
struct PredictionFile {
    k: usize,
    temperature: f64,
    sequences: Vec<SequencePrediction>,
    frames: Vec<FramePrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame_accuracy: Option<alan_core::knn::AccuracyReport>,
}

pub fn classify_views(ctx: &Context, a: &ClassifyArgs) -> CliResult {
    let manifest = load_manifest(&a.manifest)?;
    require(&a.index, "view index")?;
    let index = ViewIndex::read(&a.index)?;
    let mut cfg = ctx.config.knn;
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.temperature = a.temperature.unwrap_or(cfg.temperature);
    if cfg.k == 0 || !(cfg.temperature > 0.0) {
        return Err(CliError::Config("k must be >= 1 and temperature > 0".into()));
    }
    let mut frames = Vec::new();
    let mut sequences = Vec::new();
    let mut labelled = Vec::new();
    for entry in &manifest.entries {
        let mut total = [0.0; 4];
        for (t, d) in descriptors(entry, a.frame_step)? {
            let p = classify(&d, &index, &cfg)?;
            for (acc, w) in total.iter_mut().zip(p.weights) {
                *acc += w;
            }
            frames.push(FramePrediction {
                seq_id: entry.seq_id.clone(),
                frame_idx: t,
                label: p.label.to_string(),
                weights: p.weights.to_vec(),
            });
            if let Some(truth) = entry.view_label {
                labelled.push((d, truth));
            }
        }
        let best = alan_core::head::argmax(total.iter().copied());
        sequences.push(SequencePrediction {
            seq_id: entry.seq_id.clone(),
            label: ViewLabel::ALL[best].to_string(),
            truth: entry.view_label.map(|l| l.to_string()),
        });
    }
    let frame_accuracy = if labelled.is_empty() {
        None
    } else {
        Some(evaluate(&index, &labelled, &cfg)?)
    };
    if let Some(acc) = &frame_accuracy {
        println!(
            "frame accuracy {:.4} ({}/{}), macro {:.4}",
            acc.accuracy, acc.correct, acc.total, acc.macro_accuracy
        );
    }
    let file = PredictionFile {
        k: cfg.k,
        temperature: cfg.temperature,
        sequences,
        frames,
        frame_accuracy,
    };
    ctx.write_text(
        "view_predictions.toml",
        &toml::to_string(&file).expect("predictions serialize"),
    )?;
    Ok(())
}

pub fn render_overlay_cmd(ctx: &Context, a: &OverlayArgs) -> CliResult {
    require(&a.pred, "predicted mask")?;
    let pred = read_mask(&a.pred)?;
    let truth = a.truth.as_ref().map(|p| require(p, "annotation").and_then(|_| Ok(read_mask(p)?))).transpose()?;
    let image = a.image.as_ref().map(|p| require(p, "image").and_then(|_| Ok(read_pgm(p)?))).transpose()?;
    let parcels = a.parcels.as_ref().map(|p| require(p, "parcel map").and_then(|_| Ok(read_parcels(p)?))).transpose()?;
    let img = render_overlay(image.as_ref(), &pred, truth.as_ref(), parcels.as_ref())?;
    let path = ctx.out_dir("")?.join(&a.name);
    img.write_ppm(&path)?;
    println!(
        "{}: overlap {} px, prediction only {} px, annotation only {} px",
        path.display(),
        img.count_color(OVERLAP_COLOR),
        img.count_color(PRED_COLOR),
        img.count_color(TRUTH_COLOR)
    );
    Ok(())
}

pub fn make_synthetic(ctx: &Context, a: &SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        grid: a.grid,
        channels: a.channels,
        frames: a.frames,
        noise_std: a.noise,
        ..SynthConfig::default()
    };
    let seed = ctx.seed.unwrap_or(ctx.config.train.seed);
    let dir = ctx.out_dir("")?;
    let train = synth_dataset("train", a.train, &cfg, seed)?;
    let test = synth_dataset("test", a.test, &cfg, seed.wrapping_add(1))?;
    write_dataset(&dir, "train", &train, a.images)?;
    write_dataset(&dir, "test", &test, a.images)?;
    println!("wrote {} train and {} test sequences to {}", a.train, a.test, dir.display());
    Ok(())
}
