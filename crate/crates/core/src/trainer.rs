//! Head optimization over a set of feature sequences.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{DatasetManifest, FeatureSequence};
use crate::head::{backward_patch, forward_patch, HeadParams};
use crate::objective::{sample_pairs, total_loss, FrameInputs, FramePair, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub frames_per_clip: usize,
    /// Spacing between clip frames; 2 keeps one frame between samples.
    pub frame_stride: usize,
    /// Number of parcel classes `K`.
    pub classes: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_sequences: usize,
    pub standardize_features: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            epochs: 40,
            frames_per_clip: 16,
            frame_stride: 2,
            classes: 64,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_sequences: 2,
            standardize_features: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.frames_per_clip == 0 {
            return bad("frames_per_clip must be >= 1");
        }
        if self.frame_stride == 0 {
            return bad("frame_stride must be >= 1");
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return bad("classes must be in 2..=65535");
        }
        if self.batch_sequences < 2 {
            return bad("batch_sequences must be >= 2");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        self.loss.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<usize>,
    pub warning: Option<String>,
}

/// Picks `frames_per_clip` frames spaced `frame_stride` apart from a random
/// start. Falls back to stride 1 when the strided span does not fit, and to
/// the whole sequence when even that is too long.
pub fn sample_clip<R: Rng + ?Sized>(frames: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Clip> {
    if frames == 0 {
        return Err(Error::Empty("cannot sample a clip from an empty sequence".into()));
    }
    let n = cfg.frames_per_clip;
    if frames < n {
        let msg = format!("sequence has {frames} frames, fewer than the clip length {n}; using all of them");
        log::warn!("{msg}");
        return Ok(Clip {
            frames: (0..frames).collect(),
            warning: Some(msg),
        });
    }
    let span = |stride: usize| (n - 1) * stride + 1;
    let stride = if frames >= span(cfg.frame_stride) { cfg.frame_stride } else { 1 };
    let start = rng.random_range(0..=frames - span(stride));
    Ok(Clip {
        frames: (0..n).map(|i| start + i * stride).collect(),
        warning: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: HeadParams,
    pub v: HeadParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &HeadParams) -> Self {
        let zeros = HeadParams::zeros(like.channels(), like.classes());
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// Bias-corrected Adam update on flat parameter slices.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, h: AdamHyper) {
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

pub fn adam_step(params: &mut HeadParams, grads: &HeadParams, state: &mut AdamState, h: AdamHyper) -> Result<()> {
    if grads.channels() != params.channels() || grads.classes() != params.classes() {
        return Err(Error::Dimension("gradient shapes do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradient at Adam step {}", state.step + 1)));
    }
    state.step += 1;
    let step = state.step;
    let AdamState { m, v, .. } = state;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        adam_update(p, g, m, v, step, h);
    }
    Ok(())
}

/// Per-channel affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose spread falls below this are centred but not scaled.
pub const STD_FLOOR: f64 = 1e-12;

impl Standardization {
    pub fn identity(channels: usize) -> Self {
        Standardization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(sequences: &[FeatureSequence]) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::Empty("standardization needs at least one sequence".into()))?;
        let c = first.channels();
        if sequences.iter().any(|s| s.channels() != c) {
            return Err(Error::Dimension("sequences disagree on channel count".into()));
        }
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for s in sequences {
            for (i, &v) in s.patches.iter().enumerate() {
                sum[i % c] += f64::from(v);
            }
            count += s.patches.len() / c;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for s in sequences {
            for (i, &v) in s.patches.iter().enumerate() {
                let d = f64::from(v) - mean[i % c];
                sq[i % c] += d * d;
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v -= self.mean[j];
                if self.std[j] >= STD_FLOOR {
                    *v /= self.std[j];
                }
            }
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("standardization serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Standardization = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if s.mean.len() != s.std.len() {
            return Err(Error::Config("mean and std lengths differ".into()));
        }
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Fits per-channel statistics on `sequences` and returns them with
/// transformed copies.
pub fn standardize(sequences: &[FeatureSequence]) -> Result<(Standardization, Vec<FeatureSequence>)> {
    let stats = Standardization::fit(sequences)?;
    let c = stats.channels();
    let transformed = sequences
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for (i, v) in out.patches.iter_mut().enumerate() {
                let j = i % c;
                let mut x = f64::from(*v) - stats.mean[j];
                if stats.std[j] >= STD_FLOOR {
                    x /= stats.std[j];
                }
                *v = x as f32;
            }
            out
        })
        .collect();
    Ok((stats, transformed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean step loss for each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub checkpoint_path: Option<String>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub standardization: Standardization,
    pub report: TrainReport,
    pub warnings: Vec<String>,
}

/// Groups of `batch` distinct sequence indices covering a shuffled order.
fn epoch_groups<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut groups: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if let Some(last) = groups.last_mut() {
        while last.len() < batch.min(n) {
            let cand = rng.random_range(0..n);
            if !last.contains(&cand) {
                last.push(cand);
            }
        }
    }
    groups
}

/// Trains a head from scratch. Deterministic for a fixed `cfg.seed`.
pub fn train(sequences: &[FeatureSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = sequences.first().ok_or_else(|| Error::Empty("no training sequences".into()))?;
    let channels = first.channels();
    if sequences.iter().any(|s| s.channels() != channels) {
        return Err(Error::Dimension("sequences disagree on channel count".into()));
    }
    let params = HeadParams::init(channels, cfg.classes, cfg.seed);
    train_from(sequences, cfg, params)
}

/// Continues training from `params`.
pub fn train_from(sequences: &[FeatureSequence], cfg: &TrainConfig, mut params: HeadParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sequences.len() < 2 {
        return Err(Error::Empty(format!(
            "training needs at least 2 sequences for repulsive pairs, got {}",
            sequences.len()
        )));
    }
    let channels = params.channels();
    if sequences.iter().any(|s| s.channels() != channels) {
        return Err(Error::Dimension(format!("sequences do not all have {channels} channels")));
    }
    let standardization = if cfg.standardize_features {
        Standardization::fit(sequences)?
    } else {
        Standardization::identity(channels)
    };
    // a separate stream from the one used for initialization
    let mut rng = Pcg64::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = AdamState::new(&params);
    let hyper = AdamHyper::from(cfg);
    let batch = cfg.batch_sequences.min(sequences.len());
    let mut warnings = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        for group in epoch_groups(sequences.len(), batch, &mut rng) {
            let mut features = Vec::new();
            let mut slots: Vec<Vec<usize>> = Vec::with_capacity(group.len());
            for &si in &group {
                let seq = &sequences[si];
                let clip = sample_clip(seq.frames(), cfg, &mut rng)?;
                warnings.extend(clip.warning);
                let mut ids = Vec::with_capacity(clip.frames.len());
                for t in clip.frames {
                    let mut x = seq.frame_matrix(t);
                    standardization.apply(&mut x);
                    ids.push(features.len());
                    features.push(x);
                }
                slots.push(ids);
            }
            let mut pairs: Vec<FramePair<usize>> = Vec::new();
            for (gi, ids) in slots.iter().enumerate() {
                let partner = &slots[(gi + 1) % slots.len()];
                let sample = sample_pairs(ids, partner, &mut rng)?;
                warnings.extend(sample.warnings);
                pairs.extend(sample.pairs);
            }

            let mut forwards = Vec::with_capacity(features.len());
            for x in &features {
                forwards.push(forward_patch(x.view(), &params)?);
            }
            let inputs: Vec<FrameInputs> = features
                .iter()
                .zip(&forwards)
                .map(|(x, (p, _))| FrameInputs {
                    features: x.view(),
                    probs: p.view(),
                })
                .collect();
            let (loss, dprobs) = total_loss(&pairs, &inputs, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {}", epoch + 1)));
            }
            let mut grads = HeadParams::zeros(channels, params.classes());
            for ((_, cache), g) in forwards.iter().zip(&dprobs) {
                let (gp, _) = backward_patch(cache, &params, g.view())?;
                grads.add_assign(&gp);
            }
            adam_step(&mut params, &grads, &mut adam, hyper)?;
            losses.push(loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    log::info!("trained {} steps", adam.step);

    Ok(TrainOutcome {
        params,
        standardization,
        report: TrainReport {
            epoch_losses,
            steps: adam.step,
            checkpoint_path: None,
            config: cfg.clone(),
        },
        warnings,
    })
}

/// Loads every sequence of `manifest` and trains on them.
pub fn train_manifest(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let sequences = manifest
        .entries
        .iter()
        .map(|e| e.load_features())
        .collect::<Result<Vec<_>>>()?;
    train(&sequences, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn clip_with_forced_start() {
        let cfg = TrainConfig::default();
        let mut rng = Pcg64::seed_from_u64(0);
        let clip = sample_clip(31, &cfg, &mut rng).unwrap();
        assert_eq!(clip.frames, (0..=30).step_by(2).collect::<Vec<_>>());
    }

    #[test]
    fn clip_is_seeded() {
        let cfg = TrainConfig::default();
        let a = sample_clip(100, &cfg, &mut Pcg64::seed_from_u64(9)).unwrap();
        let b = sample_clip(100, &cfg, &mut Pcg64::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_sequences_fall_back() {
        let cfg = TrainConfig::default();
        let mut starts = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let clip = sample_clip(20, &cfg, &mut Pcg64::seed_from_u64(seed)).unwrap();
            let s = clip.frames[0];
            assert_eq!(clip.frames, (s..s + 16).collect::<Vec<_>>());
            starts.insert(s);
        }
        // valid starts for stride 1: 0..=20-16
        assert_eq!(starts.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);

        let clip = sample_clip(5, &cfg, &mut Pcg64::seed_from_u64(0)).unwrap();
        assert_eq!(clip.frames, vec![0, 1, 2, 3, 4]);
        assert!(clip.warning.is_some());
        assert!(sample_clip(0, &cfg, &mut Pcg64::seed_from_u64(0)).is_err());
    }

    #[test]
    fn adam_zero_gradient_only_advances_step() {
        let mut p = HeadParams::init(3, 2, 1);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = HeadParams::zeros(3, 2);
        let h = AdamHyper::from(&TrainConfig::default());
        adam_step(&mut p, &g, &mut st, h).unwrap();
        adam_step(&mut p, &g, &mut st, h).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let h = AdamHyper::from(&TrainConfig::default());
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, h);
        // m̂ = v̂ = 1 after bias correction
        let m_hat: f64 = ((1.0 - 0.9) * 1.0) / (1.0 - 0.9);
        let v_hat: f64 = ((1.0 - 0.999) * 1.0) / (1.0 - 0.999);
        assert_eq!(p[0], -5e-3 * m_hat / (v_hat.sqrt() + 1e-8));
        assert!((p[0] + 5e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = HeadParams::zeros(2, 2);
        let mut g = HeadParams::zeros(2, 2);
        g.b3[0] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, AdamHyper::from(&TrainConfig::default()));
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(st.step, 0);
    }

    fn seq_from(values: &[[f32; 2]]) -> FeatureSequence {
        let n = values.len();
        let flat: Vec<f32> = values.iter().flatten().copied().collect();
        FeatureSequence::new("s", 1, 1, n, Array4::from_shape_vec((1, 1, n, 2), flat).unwrap(), None).unwrap()
    }

    #[test]
    fn standardization_hand_values() {
        // channel 0 takes {1, 3}, channel 1 takes {-2, 6}
        let seq = seq_from(&[[1.0, -2.0], [3.0, 6.0]]);
        let (stats, out) = standardize(&[seq]).unwrap();
        assert_eq!(stats.mean, vec![2.0, 2.0]);
        assert_eq!(stats.std, vec![1.0, 4.0]);
        let v: Vec<f32> = out[0].patches.iter().copied().collect();
        assert_eq!(v, vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn standardization_constant_channel_and_moments() {
        let seq = seq_from(&[[5.0, 0.1], [5.0, 0.7], [5.0, -0.3], [5.0, 2.5]]);
        let stats = Standardization::fit(std::slice::from_ref(&seq)).unwrap();
        let mut x = seq.frame_matrix(0);
        stats.apply(&mut x);
        assert!(x.column(0).iter().all(|&v| v == 0.0));
        let col = x.column(1);
        let mean = col.mean().unwrap();
        let std = (col.mapv(|v| (v - mean).powi(2)).mean().unwrap()).sqrt();
        assert!(mean.abs() <= 1e-10);
        assert!((std - 1.0).abs() <= 1e-10);
        assert!(Standardization::fit(&[]).is_err());
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig { classes: 8, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("epochs = 3\n[loss]\nb_repulsive = 0.5\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.loss.b_repulsive, 0.5);
        assert_eq!(partial.learning_rate, 5e-3);
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
        assert!(TrainConfig::from_toml("nonsense = 1").is_err());
    }

    #[test]
    fn epoch_groups_are_distinct() {
        let mut rng = Pcg64::seed_from_u64(5);
        for n in 2..9 {
            let groups = epoch_groups(n, 3.min(n), &mut rng);
            let mut covered = vec![false; n];
            for g in &groups {
                let mut s = g.clone();
                s.sort();
                s.dedup();
                assert_eq!(s.len(), g.len());
                for &i in g {
                    covered[i] = true;
                }
            }
            assert!(covered.iter().all(|&c| c));
        }
    }
}
