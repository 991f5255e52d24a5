//! The parcelization head: a three-layer perceptron over backbone patch
//! vectors.
//!
//! ```text
//! h1     = x  + GELU(x  W1ᵀ + b1)
//! h2     = h1 + ReLU(h1 W2ᵀ + b2)
//! logits = h2 W3ᵀ + b3
//! probs  = softmax(logits)
//! ```
//!
//! Training works at patch resolution. Inference upsamples the logits to
//! image resolution before the softmax and takes a per-pixel argmax.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::feature_store::ParcelMap;

pub const HEAD_MAGIC: &[u8; 8] = b"ALANHEAD";
pub const HEAD_VERSION: u16 = 1;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Weights of the head. Layers one and two are `C×C`, layer three `K×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(channels: usize, classes: usize) -> Self {
        HeadParams {
            w1: Array2::zeros((channels, channels)),
            b1: Array1::zeros(channels),
            w2: Array2::zeros((channels, channels)),
            b2: Array1::zeros(channels),
            w3: Array2::zeros((classes, channels)),
            b3: Array1::zeros(classes),
        }
    }

    /// Uniform `±√(6/(fan_in+fan_out))` weights and zero biases.
    pub fn init(channels: usize, classes: usize, seed: u64) -> Self {
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut p = Self::zeros(channels, classes);
        for w in [&mut p.w1, &mut p.w2, &mut p.w3] {
            let (fan_out, fan_in) = w.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.w1.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w3.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let k = self.classes();
        if c == 0 {
            return Err(Error::Dimension("head has zero channels".into()));
        }
        if k < 2 {
            return Err(Error::Dimension(format!("head needs K >= 2, got {k}")));
        }
        if self.w1.dim() != (c, c)
            || self.w2.dim() != (c, c)
            || self.w3.dim() != (k, c)
            || self.b1.len() != c
            || self.b2.len() != c
            || self.b3.len() != k
        {
            return Err(Error::Dimension("inconsistent head parameter shapes".into()));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(())
    }

    /// The six tensors as flat slices, in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &HeadParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Intermediates of one forward call, consumed by [`backward_patch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    probs: Array2<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

fn check_input(x: &ArrayView2<f64>, params: &HeadParams) -> Result<()> {
    if x.ncols() != params.channels() {
        return Err(Error::Dimension(format!(
            "features have {} channels, head expects {}",
            x.ncols(),
            params.channels()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("head input features".into()));
    }
    Ok(())
}

struct Hidden {
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
}

fn hidden(x: &ArrayView2<f64>, p: &HeadParams) -> Hidden {
    let z1 = x.dot(&p.w1.t()) + &p.b1;
    let h1 = &z1.mapv(gelu) + x;
    let z2 = h1.dot(&p.w2.t()) + &p.b2;
    let h2 = &z2.mapv(|v| v.max(0.0)) + &h1;
    Hidden { z1, h1, z2, h2 }
}

/// Patch-resolution logits `[N, K]`.
pub fn logits_patch(x: ArrayView2<f64>, params: &HeadParams) -> Result<Array2<f64>> {
    check_input(&x, params)?;
    let h = hidden(&x, params);
    Ok(h.h2.dot(&params.w3.t()) + &params.b3)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn forward_patch(x: ArrayView2<f64>, params: &HeadParams) -> Result<(Array2<f64>, ForwardCache)> {
    check_input(&x, params)?;
    let Hidden { z1, h1, z2, h2 } = hidden(&x, params);
    let logits = h2.dot(&params.w3.t()) + &params.b3;
    let probs = softmax_rows(&logits);
    let cache = ForwardCache {
        x: x.to_owned(),
        z1,
        h1,
        z2,
        h2,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

/// Exact gradients of the forward map given `dL/dprobs`.
///
/// Returns `(dL/dparams, dL/dfeatures)`.
pub fn backward_patch(
    cache: &ForwardCache,
    params: &HeadParams,
    dprobs: ArrayView2<f64>,
) -> Result<(HeadParams, Array2<f64>)> {
    let (n, k) = cache.probs.dim();
    let c = cache.x.ncols();
    if dprobs.dim() != (n, k) || params.classes() != k || params.channels() != c {
        return Err(Error::Dimension(format!(
            "cache [{n}, {k}] over {c} channels does not match dprobs {:?} / head C={} K={}",
            dprobs.dim(),
            params.channels(),
            params.classes()
        )));
    }
    // softmax Jacobian: dz = p ⊙ (g − Σ g⊙p)
    let mut dlogits = Array2::zeros((n, k));
    Zip::from(dlogits.rows_mut())
        .and(cache.probs.rows())
        .and(dprobs.rows())
        .for_each(|mut out, p, g| {
            let dot = p.dot(&g);
            Zip::from(&mut out).and(&p).and(&g).for_each(|o, &pi, &gi| *o = pi * (gi - dot));
        });

    let dw3 = dlogits.t().dot(&cache.h2);
    let db3 = dlogits.sum_axis(Axis(0));
    let dh2 = dlogits.dot(&params.w3);

    let mut dz2 = dh2.clone();
    Zip::from(&mut dz2).and(&cache.z2).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    let dw2 = dz2.t().dot(&cache.h1);
    let db2 = dz2.sum_axis(Axis(0));
    let dh1 = &dh2 + &dz2.dot(&params.w2);

    let mut dz1 = dh1.clone();
    Zip::from(&mut dz1).and(&cache.z1).for_each(|d, &z| *d *= gelu_grad(z));
    let dw1 = dz1.t().dot(&cache.x);
    let db1 = dz1.sum_axis(Axis(0));
    let dx = &dh1 + &dz1.dot(&params.w1);

    Ok((
        HeadParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            w3: dw3,
            b3: db3,
        },
        dx,
    ))
}

/// Channel-wise bilinear resize of an `[H, W, K]` field with half-pixel
/// centres (`src = (i + 0.5)·in/out − 0.5`, clamped to the input).
pub fn bilinear_upsample(field: ArrayView3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (in_h, in_w, k) = field.dim();
    if in_h == 0 || in_w == 0 || k == 0 {
        return Err(Error::Dimension("cannot upsample an empty field".into()));
    }
    if out_h < in_h || out_w < in_w {
        return Err(Error::Dimension(format!(
            "output {out_h}x{out_w} smaller than input {in_h}x{in_w}"
        )));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, in_h);
    let cols = taps(out_w, in_w);
    let mut out = Array3::zeros((out_h, out_w, k));
    for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
            for ch in 0..k {
                let top = field[[y0, x0, ch]] * (1.0 - wx) + field[[y0, x1, ch]] * wx;
                let bottom = field[[y1, x0, ch]] * (1.0 - wx) + field[[y1, x1, ch]] * wx;
                out[[oy, ox, ch]] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Ok(out)
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Upsampled per-pixel class probabilities `[img_h, img_w, K]`.
pub fn infer_probabilities(
    features: ArrayView3<f64>,
    params: &HeadParams,
    img_h: usize,
    img_w: usize,
) -> Result<Array3<f64>> {
    let logits = upsampled_logits(features, params, img_h, img_w)?;
    let (h, w, k) = logits.dim();
    let flat = logits.into_shape_with_order((h * w, k)).unwrap();
    Ok(softmax_rows(&flat).into_shape_with_order((h, w, k)).unwrap())
}

fn upsampled_logits(
    features: ArrayView3<f64>,
    params: &HeadParams,
    img_h: usize,
    img_w: usize,
) -> Result<Array3<f64>> {
    let (hp, wp, c) = features.dim();
    let x = features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((hp * wp, c))
        .unwrap();
    let logits = logits_patch(x.view(), params)?;
    let field = logits
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((hp, wp, params.classes()))
        .unwrap();
    bilinear_upsample(field.view(), img_h, img_w)
}

/// Parcel map for one frame of `[Hp, Wp, C]` features.
pub fn infer_parcel_map(
    features: ArrayView3<f64>,
    params: &HeadParams,
    img_h: usize,
    img_w: usize,
) -> Result<ParcelMap> {
    let probs = infer_probabilities(features, params, img_h, img_w)?;
    let labels = probs
        .lanes(Axis(2))
        .into_iter()
        .map(|lane| argmax(lane.iter().copied()) as u16)
        .collect();
    ParcelMap::new(img_h, img_w, params.classes(), labels)
}

pub fn encode_head(params: &HeadParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out = Vec::with_capacity(18 + 8 * params.num_params());
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(params.classes() as u32).to_le_bytes());
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_head(bytes: &[u8]) -> Result<HeadParams> {
    if bytes.len() < 18 || &bytes[..8] != HEAD_MAGIC {
        return Err(Error::BadMagic { expected: "ALANHEAD" });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != HEAD_VERSION {
        return Err(Error::Version {
            found: version,
            expected: HEAD_VERSION,
        });
    }
    let c = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let mut p = HeadParams::zeros(c, k);
    let expected = 18 + 8 * p.num_params();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch(format!(
            "checkpoint has {} bytes, C={c} K={k} needs {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes[18..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    p.validate()?;
    Ok(p)
}

pub fn write_head(params: &HeadParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_head(params)?).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: impl AsRef<Path>) -> Result<HeadParams> {
    let path = path.as_ref();
    decode_head(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn random_params(c: usize, k: usize, rng: &mut Pcg64) -> HeadParams {
        let mut p = HeadParams::zeros(c, k);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        p
    }

    /// Scalar-loop re-implementation of the forward map.
    fn oracle_forward(x: &Array2<f64>, p: &HeadParams) -> Array2<f64> {
        let (n, c) = x.dim();
        let k = p.classes();
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            let mut h1 = vec![0.0; c];
            for o in 0..c {
                let mut z = p.b1[o];
                for j in 0..c {
                    z += p.w1[[o, j]] * x[[i, j]];
                }
                h1[o] = x[[i, o]] + z * 0.5 * (1.0 + libm::erf(z / 2f64.sqrt()));
            }
            let mut h2 = vec![0.0; c];
            for o in 0..c {
                let mut z = p.b2[o];
                for j in 0..c {
                    z += p.w2[[o, j]] * h1[j];
                }
                h2[o] = h1[o] + if z > 0.0 { z } else { 0.0 };
            }
            let mut logits = vec![0.0; k];
            for o in 0..k {
                logits[o] = p.b3[o];
                for j in 0..c {
                    logits[o] += p.w3[[o, j]] * h2[j];
                }
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for o in 0..k {
                out[[i, o]] = (logits[o] - m).exp() / s;
            }
        }
        out
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let p = HeadParams::zeros(5, 4);
        let x = Array::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 - 4.0);
        let (probs, _) = forward_patch(x.view(), &p).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn analytic_two_class_softmax() {
        let mut p = HeadParams::zeros(2, 2);
        p.b3 = array![2f64.ln(), 0.0];
        let x = Array2::zeros((1, 2));
        let (probs, _) = forward_patch(x.view(), &p).unwrap();
        assert!((probs[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((probs[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = Pcg64::seed_from_u64(11);
        let p = random_params(6, 3, &mut rng);
        let x = Array::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0));
        let (probs, _) = forward_patch(x.view(), &p).unwrap();
        let oracle = oracle_forward(&x, &p);
        for (a, b) in probs.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = HeadParams::zeros(4, 3);
        let x = Array2::zeros((2, 5));
        assert!(matches!(forward_patch(x.view(), &p), Err(Error::Dimension(_))));
        let x = Array2::zeros((2, 4));
        let (_, cache) = forward_patch(x.view(), &p).unwrap();
        let g = Array2::zeros((2, 2));
        assert!(backward_patch(&cache, &p, g.view()).is_err());
        let other = HeadParams::zeros(3, 3);
        let g = Array2::zeros((2, 3));
        assert!(backward_patch(&cache, &other, g.view()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Pcg64::seed_from_u64(2);
        let p = random_params(3, 2, &mut rng);
        let x = Array::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = forward_patch(x.view(), &p).unwrap();
        let (g, dx) = backward_patch(&cache, &p, Array2::zeros((4, 2)).view()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_derived_two_by_two_case() {
        // x = 0 and all weights 0: z1 = z2 = 0, GELU(0) = 0 and ReLU inactive,
        // so h1 = h2 = 0 and logits = b3. With L = probs[0,0] the gradient
        // wrt b3 is p0·(e0 − p), and every weight gradient vanishes because
        // it is multiplied by a zero activation.
        let mut p = HeadParams::zeros(2, 2);
        p.b3 = array![0.4, -0.1];
        let x = Array2::zeros((1, 2));
        let (probs, cache) = forward_patch(x.view(), &p).unwrap();
        let (p0, p1) = (probs[[0, 0]], probs[[0, 1]]);
        let up = array![[1.0, 0.0]];
        let (g, dx) = backward_patch(&cache, &p, up.view()).unwrap();
        assert!((g.b3[0] - p0 * (1.0 - p0)).abs() < 1e-15);
        assert!((g.b3[1] + p0 * p1).abs() < 1e-15);
        assert!(g.w3.iter().all(|&v| v == 0.0));
        // dL/dh2 = W3ᵀ·dz = 0, so nothing reaches x.
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    fn numeric_grad(mut f: impl FnMut(&HeadParams, &Array2<f64>) -> f64, p: &HeadParams, x: &Array2<f64>) -> (HeadParams, Array2<f64>) {
        let h = 1e-5;
        let mut gp = HeadParams::zeros(p.channels(), p.classes());
        let mut work = p.clone();
        for ti in 0..6 {
            for i in 0..p.tensors()[ti].len() {
                let orig = p.tensors()[ti][i];
                work.tensors_mut()[ti][i] = orig + h;
                let up = f(&work, x);
                work.tensors_mut()[ti][i] = orig - h;
                let down = f(&work, x);
                work.tensors_mut()[ti][i] = orig;
                gp.tensors_mut()[ti][i] = (up - down) / (2.0 * h);
            }
        }
        let mut gx = Array2::zeros(x.dim());
        let mut xw = x.clone();
        for idx in ndarray::indices(x.dim()) {
            let orig = x[idx];
            xw[idx] = orig + h;
            let up = f(p, &xw);
            xw[idx] = orig - h;
            let down = f(p, &xw);
            xw[idx] = orig;
            gx[idx] = (up - down) / (2.0 * h);
        }
        (gp, gx)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Pcg64::seed_from_u64(99);
        for _ in 0..20 {
            let c = rng.random_range(1..=6);
            let k = rng.random_range(2..=4);
            let n = rng.random_range(1..=5);
            let p = random_params(c, k, &mut rng);
            let x = Array::from_shape_fn((n, c), |_| rng.random_range(-1.5..1.5));
            let weights = Array::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
            let loss = |p: &HeadParams, x: &Array2<f64>| {
                let (probs, _) = forward_patch(x.view(), p).unwrap();
                (&probs * &weights).sum()
            };
            let (_, cache) = forward_patch(x.view(), &p).unwrap();
            let (g, dx) = backward_patch(&cache, &p, weights.view()).unwrap();
            let (ng, ndx) = numeric_grad(loss, &p, &x);
            for (a, b) in g.tensors().iter().zip(ng.tensors()) {
                for (u, v) in a.iter().zip(b) {
                    assert!(rel_err(*u, *v) <= 1e-4, "{u} vs {v}");
                }
            }
            for (u, v) in dx.iter().zip(ndx.iter()) {
                assert!(rel_err(*u, *v) <= 1e-4, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn upsample_constant_identity_and_ramp() {
        let field = Array3::from_elem((2, 3, 2), 3.7);
        let up = bilinear_upsample(field.view(), 7, 11).unwrap();
        assert!(up.iter().all(|&v| (v - 3.7).abs() < 1e-12));

        let ramp = Array3::from_shape_vec((1, 2, 1), vec![0.0, 1.0]).unwrap();
        let up = bilinear_upsample(ramp.view(), 1, 4).unwrap();
        assert_eq!(up.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.25, 0.75, 1.0]);

        let mut rng = Pcg64::seed_from_u64(5);
        let f = Array::from_shape_fn((3, 4, 2), |_| rng.random_range(-1.0..1.0));
        assert_eq!(bilinear_upsample(f.view(), 3, 4).unwrap(), f);

        assert!(bilinear_upsample(Array3::<f64>::zeros((0, 2, 1)).view(), 4, 4).is_err());
        assert!(bilinear_upsample(f.view(), 2, 4).is_err());
    }

    #[test]
    fn zero_head_maps_everything_to_class_zero() {
        let p = HeadParams::zeros(3, 5);
        let f = Array3::from_elem((2, 2, 3), 0.3);
        let map = infer_parcel_map(f.view(), &p, 8, 8).unwrap();
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn patch_size_one_equals_patch_argmax() {
        let mut rng = Pcg64::seed_from_u64(8);
        let p = random_params(4, 3, &mut rng);
        let f = Array::from_shape_fn((5, 6, 4), |_| rng.random_range(-2.0..2.0));
        let map = infer_parcel_map(f.view(), &p, 5, 6).unwrap();
        let x = f.clone().into_shape_with_order((30, 4)).unwrap();
        let logits = logits_patch(x.view(), &p).unwrap();
        for (i, row) in logits.rows().into_iter().enumerate() {
            assert_eq!(map.labels[i] as usize, argmax(row.iter().copied()));
        }
    }

    #[test]
    fn contrived_margin_region_survives_upsampling() {
        // channel 0 is +1 on the right half of the grid, -1 on the left;
        // the head routes it straight into a class-1 margin of 10.
        let mut p = HeadParams::zeros(1, 2);
        p.w3 = array![[0.0], [5.0]];
        p.b3 = array![0.0, 5.0];
        // h1 = x + GELU(0) = x, h2 = x: logit margin is 5x + 5 → +10 / 0.
        let f = Array3::from_shape_fn((4, 4, 1), |(_, j, _)| if j >= 2 { 1.0 } else { -1.0 });
        let map = infer_parcel_map(f.view(), &p, 16, 16).unwrap();
        // right-half patch interiors are class 1, left-half patch interiors class 0
        for r in 0..16 {
            for c in 10..16 {
                assert_eq!(map.get(r, c), 1);
            }
            for c in 0..6 {
                assert_eq!(map.get(r, c), 0);
            }
        }
    }

    #[test]
    fn argmax_of_softmax_equals_argmax_of_logits() {
        let mut rng = Pcg64::seed_from_u64(13);
        let p = random_params(3, 4, &mut rng);
        let f = Array::from_shape_fn((3, 3, 3), |_| rng.random_range(-2.0..2.0));
        let logits = upsampled_logits(f.view(), &p, 12, 12).unwrap();
        let map = infer_parcel_map(f.view(), &p, 12, 12).unwrap();
        for (i, lane) in logits.lanes(Axis(2)).into_iter().enumerate() {
            assert_eq!(map.labels[i] as usize, argmax(lane.iter().copied()));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = Pcg64::seed_from_u64(21);
        let p = random_params(3, 2, &mut rng);
        let bytes = encode_head(&p).unwrap();
        assert_eq!(decode_head(&bytes).unwrap(), p);
        assert!(matches!(decode_head(&bytes[..bytes.len() - 8]), Err(Error::SizeMismatch(_))));
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(decode_head(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = HeadParams::init(8, 4, 3);
        assert_eq!(a, HeadParams::init(8, 4, 3));
        assert_ne!(a, HeadParams::init(8, 4, 4));
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.w3.iter().all(|v| v.abs() <= bound));
        assert!(a.b1.iter().chain(a.b2.iter()).chain(a.b3.iter()).all(|&v| v == 0.0));
    }
}
