//! Video-adapted correspondence loss.
//!
//! Each anchor frame is compared with itself (attractive), with another
//! frame of the same clip (similar) and with a frame of a different
//! sequence (repulsive). For a pair `(a, b)` the backbone correspondence
//! `F = cos(f_a, f_b)` and the head correspondence `S = cos(p_a, p_b)` give
//!
//! ```text
//! L = −sign · mean_pq (F[p,q] − shift) · max(S[p,q], 0)
//! ```

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairKind {
    /// A frame paired with itself.
    Attractive,
    /// Two distinct frames of one clip.
    Similar,
    /// Frames of two different sequences.
    Repulsive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePair<T> {
    pub a: T,
    pub b: T,
    pub kind: PairKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample<T> {
    pub pairs: Vec<FramePair<T>>,
    pub warnings: Vec<String>,
}

/// One attractive, one similar and one repulsive pair per frame of `clip_a`.
///
/// Similar pairs are skipped, with a warning, when `clip_a` has a single frame.
pub fn sample_pairs<T: Copy, R: Rng + ?Sized>(
    clip_a: &[T],
    clip_b: &[T],
    rng: &mut R,
) -> Result<PairSample<T>> {
    if clip_a.is_empty() || clip_b.is_empty() {
        return Err(Error::Empty("pair sampling needs two non-empty clips".into()));
    }
    let mut pairs = Vec::with_capacity(3 * clip_a.len());
    let mut warnings = Vec::new();
    if clip_a.len() == 1 {
        let msg = "single-frame clip: similar pairs skipped".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    for (i, &anchor) in clip_a.iter().enumerate() {
        pairs.push(FramePair {
            a: anchor,
            b: anchor,
            kind: PairKind::Attractive,
        });
        if clip_a.len() > 1 {
            let mut j = rng.random_range(0..clip_a.len() - 1);
            if j >= i {
                j += 1;
            }
            pairs.push(FramePair {
                a: anchor,
                b: clip_a[j],
                kind: PairKind::Similar,
            });
        }
        let j = rng.random_range(0..clip_b.len());
        pairs.push(FramePair {
            a: anchor,
            b: clip_b[j],
            kind: PairKind::Repulsive,
        });
    }
    Ok(PairSample { pairs, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_self: f64,
    pub lambda_similar: f64,
    pub lambda_repulsive: f64,
    pub b_self: f64,
    pub b_similar: f64,
    pub b_repulsive: f64,
    pub center_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_self: 1.0,
            lambda_similar: 1.0,
            lambda_repulsive: 1.0,
            b_self: 0.3,
            b_similar: 0.3,
            b_repulsive: 0.7,
            center_features: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_self, self.lambda_similar, self.lambda_repulsive];
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !lambdas.iter().any(|&l| l > 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if ![self.b_self, self.b_similar, self.b_repulsive].iter().all(|b| b.is_finite()) {
            return Err(Error::Config("loss shifts must be finite".into()));
        }
        Ok(())
    }

    pub fn weight(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::Attractive => self.lambda_self,
            PairKind::Similar => self.lambda_similar,
            PairKind::Repulsive => self.lambda_repulsive,
        }
    }

    pub fn shift(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::Attractive => self.b_self,
            PairKind::Similar => self.b_similar,
            PairKind::Repulsive => self.b_repulsive,
        }
    }

    /// Every kind enters with sign +1; the repulsive push comes from its larger shift.
    pub fn sign(&self, _kind: PairKind) -> f64 {
        1.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LossConfig {
            lambda_self: self.lambda_self * factor,
            lambda_similar: self.lambda_similar * factor,
            lambda_repulsive: self.lambda_repulsive * factor,
            ..*self
        }
    }
}

/// Rows scaled to unit length; zero rows stay zero. Also returns the norms.
pub fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (out, norms)
}

/// Subtracts the mean of every row.
pub fn center_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mean = row.mean().unwrap_or(0.0);
        row -= mean;
    }
}

/// Pairwise cosine similarities `[N_a, N_b]`; a zero vector has similarity 0
/// with everything.
pub fn correspondence(f_a: ArrayView2<f64>, f_b: ArrayView2<f64>, center: bool) -> Result<Array2<f64>> {
    if f_a.ncols() != f_b.ncols() {
        return Err(Error::Dimension(format!(
            "correspondence between {} and {} channels",
            f_a.ncols(),
            f_b.ncols()
        )));
    }
    if f_a.iter().chain(f_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correspondence input".into()));
    }
    let (a, _) = normalize_rows(f_a);
    let (b, _) = normalize_rows(f_b);
    let mut m = a.dot(&b.t());
    if center {
        center_rows(&mut m);
    }
    Ok(m)
}

/// Value and `dL/dS` of one signed correspondence term.
pub fn loss_term(
    f: ArrayView2<f64>,
    s: ArrayView2<f64>,
    shift: f64,
    sign: f64,
) -> Result<(f64, Array2<f64>)> {
    if f.dim() != s.dim() {
        return Err(Error::Dimension(format!(
            "feature correspondence {:?} vs segmentation correspondence {:?}",
            f.dim(),
            s.dim()
        )));
    }
    let count = f.len().max(1) as f64;
    let mut grad = Array2::zeros(s.dim());
    let mut total = 0.0;
    Zip::from(&mut grad).and(&f).and(&s).for_each(|g, &fv, &sv| {
        if sv > 0.0 {
            total += (fv - shift) * sv;
            *g = -sign * (fv - shift) / count;
        }
    });
    Ok((-sign * total / count, grad))
}

/// Backbone features and head probabilities of one frame, both at patch resolution.
#[derive(Debug, Clone, Copy)]
pub struct FrameInputs<'a> {
    pub features: ArrayView2<'a, f64>,
    pub probs: ArrayView2<'a, f64>,
}

/// Weighted sum of the correspondence terms over `pairs`, where pair
/// endpoints index into `frames`. Returns the loss and `dL/dprobs` per frame.
pub fn total_loss(
    pairs: &[FramePair<usize>],
    frames: &[FrameInputs<'_>],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let k = frames.first().map(|f| f.probs.ncols()).unwrap_or(0);
    for pair in pairs {
        for idx in [pair.a, pair.b] {
            if idx >= frames.len() {
                return Err(Error::Dimension(format!("pair references missing frame {idx}")));
            }
        }
    }
    for f in frames {
        if f.features.nrows() != f.probs.nrows() || f.probs.ncols() != k {
            return Err(Error::Dimension("frame features/probabilities disagree".into()));
        }
    }

    let normalized: Vec<_> = frames
        .iter()
        .map(|f| {
            let (feat, _) = normalize_rows(f.features);
            let (probs, norms) = normalize_rows(f.probs);
            (feat, probs, norms)
        })
        .collect();

    // gradient with respect to the row-normalized probabilities
    let mut grad_hat: Vec<Array2<f64>> = frames
        .iter()
        .map(|f| Array2::zeros(f.probs.dim()))
        .collect();
    let mut loss = 0.0;
    for pair in pairs {
        let weight = cfg.weight(pair.kind);
        if weight == 0.0 {
            continue;
        }
        let (fa, pa, _) = &normalized[pair.a];
        let (fb, pb, _) = &normalized[pair.b];
        let mut fcorr = fa.dot(&fb.t());
        if cfg.center_features {
            center_rows(&mut fcorr);
        }
        let scorr = pa.dot(&pb.t());
        let (value, mut g) = loss_term(fcorr.view(), scorr.view(), cfg.shift(pair.kind), cfg.sign(pair.kind))?;
        loss += weight * value;
        g *= weight;
        // S = P̂a P̂bᵀ
        let ga = g.dot(pb);
        let gb = g.t().dot(pa);
        grad_hat[pair.a] += &ga;
        grad_hat[pair.b] += &gb;
    }

    // through the row normalization: dL/du = (g − (g·û)û)/|u|
    let grads = grad_hat
        .into_iter()
        .zip(&normalized)
        .map(|(mut g, (_, phat, norms))| {
            for ((mut grow, prow), &n) in g.rows_mut().into_iter().zip(phat.rows()).zip(norms) {
                if n > 0.0 {
                    let dot = grow.dot(&prow);
                    Zip::from(&mut grow).and(&prow).for_each(|gv, &pv| *gv = (*gv - dot * pv) / n);
                } else {
                    grow.fill(0.0);
                }
            }
            g
        })
        .collect();
    Ok((loss, grads))
}

/// Sum of `dL/dprobs` entries, handy for logging gradient scale.
pub fn grad_l1(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.map(|v| v.abs()).sum_axis(Axis(0)).sum()).sum()
}
