//! Temperature-weighted k-nearest-neighbour view classification over frame
//! descriptors. Exhaustive cosine search.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::ViewLabel;

pub const INDEX_MAGIC: &[u8; 7] = b"ALANKNN";
pub const INDEX_VERSION: u16 = 1;

const NUM_CLASSES: usize = ViewLabel::ALL.len();

/// Stored unit-norm descriptors with their labels. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewIndex {
    descriptors: Array2<f64>,
    labels: Vec<ViewLabel>,
}

fn unit(v: ArrayView1<f64>) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("descriptor".into()));
    }
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidValue("zero descriptor vector".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl ViewIndex {
    pub fn build(descriptors: &Array2<f64>, labels: &[ViewLabel]) -> Result<Self> {
        let (m, c) = descriptors.dim();
        if m != labels.len() {
            return Err(Error::Dimension(format!("{m} descriptors but {} labels", labels.len())));
        }
        if m == 0 || c == 0 {
            return Err(Error::Empty("view index needs at least one non-empty descriptor".into()));
        }
        let mut data = Vec::with_capacity(m * c);
        for row in descriptors.rows() {
            data.extend(unit(row)?);
        }
        Ok(ViewIndex {
            descriptors: Array2::from_shape_vec((m, c), data).unwrap(),
            labels: labels.to_vec(),
        })
    }

    /// [`ViewIndex::build`] from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: &[ViewLabel]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("descriptor rows differ in length".into()));
        }
        let flat = rows.iter().flatten().copied().collect();
        let m = Array2::from_shape_vec((rows.len(), c), flat).expect("rows checked");
        Self::build(&m, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn descriptors(&self) -> &Array2<f64> {
        &self.descriptors
    }

    pub fn labels(&self) -> &[ViewLabel] {
        &self.labels
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 4 * self.descriptors.len() + self.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        for v in self.descriptors.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend(self.labels.iter().map(|l| l.index() as u8));
        out
    }

    /// Descriptors are re-normalized after the f32 round trip.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..7] != INDEX_MAGIC {
            return Err(Error::BadMagic { expected: "ALANKNN" });
        }
        let version = u16::from_le_bytes([bytes[7], bytes[8]]);
        if version != INDEX_VERSION {
            return Err(Error::Version {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let m = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let expected = 17 + 4 * m * c + m;
        if bytes.len() != expected {
            return Err(Error::SizeMismatch(format!(
                "index has {} bytes, header declares {expected}",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes[17..17 + 4 * m * c]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let labels = bytes[17 + 4 * m * c..]
            .iter()
            .map(|&b| {
                ViewLabel::from_index(b as usize)
                    .ok_or_else(|| Error::UnknownLabel(format!("label code {b}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(&Array2::from_shape_vec((m, c), floats).unwrap(), &labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 2,
            temperature: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrediction {
    pub label: ViewLabel,
    /// Accumulated neighbour weight per class, indexed by [`ViewLabel::index`].
    pub weights: [f64; NUM_CLASSES],
}

/// Votes `exp(sim/τ)` from the `k` most similar stored descriptors
/// (lower index first on equal similarity). Class ties go to the
/// lexicographically first label.
pub fn classify(query: &[f64], index: &ViewIndex, cfg: &KnnConfig) -> Result<ViewPrediction> {
    if cfg.k == 0 || cfg.k > index.len() {
        return Err(Error::Config(format!("k = {} outside 1..={}", cfg.k, index.len())));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    if query.len() != index.channels() {
        return Err(Error::Dimension(format!(
            "query has {} channels, index {}",
            query.len(),
            index.channels()
        )));
    }
    let q = unit(ArrayView1::from(query))?;
    let q = ArrayView1::from(&q);
    let sims: Vec<f64> = index.descriptors.rows().into_iter().map(|r| r.dot(&q)).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut weights = [0.0; NUM_CLASSES];
    for &i in &order[..cfg.k] {
        weights[index.labels[i].index()] += (sims[i] / cfg.temperature).exp();
    }
    let best = crate::head::argmax(weights.iter().copied());
    Ok(ViewPrediction {
        label: ViewLabel::ALL[best],
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub label: String,
    pub instances: usize,
    pub correct: usize,
    /// `None` when the class is absent from the test set.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean of the per-class accuracies over classes present in the test set.
    pub macro_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub k: usize,
    pub temperature: f64,
}

pub fn evaluate(index: &ViewIndex, test: &[(Vec<f64>, ViewLabel)], cfg: &KnnConfig) -> Result<AccuracyReport> {
    if test.is_empty() {
        return Err(Error::Empty("no test descriptors".into()));
    }
    let mut instances = [0usize; NUM_CLASSES];
    let mut correct = [0usize; NUM_CLASSES];
    for (q, truth) in test {
        let pred = classify(q, index, cfg)?;
        instances[truth.index()] += 1;
        if pred.label == *truth {
            correct[truth.index()] += 1;
        }
    }
    let per_class: Vec<ClassAccuracy> = ViewLabel::ALL
        .iter()
        .map(|l| {
            let i = l.index();
            ClassAccuracy {
                label: l.to_string(),
                instances: instances[i],
                correct: correct[i],
                accuracy: (instances[i] > 0).then(|| correct[i] as f64 / instances[i] as f64),
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.accuracy).collect();
    let total_correct: usize = correct.iter().sum();
    Ok(AccuracyReport {
        total: test.len(),
        correct: total_correct,
        accuracy: total_correct as f64 / test.len() as f64,
        macro_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        k: cfg.k,
        temperature: cfg.temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn build_normalizes_and_rejects_zero() {
        let idx = ViewIndex::build(&array![[3.0, 4.0]], &[ViewLabel::A2C]).unwrap();
        assert_eq!(idx.descriptors().row(0).to_vec(), vec![0.6, 0.8]);
        assert_eq!(idx.len(), 1);
        assert!(ViewIndex::build(&array![[0.0, 0.0]], &[ViewLabel::A2C]).is_err());
        assert!(ViewIndex::build(&array![[1.0, 0.0]], &[]).is_err());
    }

    #[test]
    fn exact_match_with_k1() {
        let idx = ViewIndex::build(
            &array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            &[ViewLabel::A2C, ViewLabel::Plax, ViewLabel::Psax],
        )
        .unwrap();
        let p = classify(&[0.0, 2.0, 0.0], &idx, &KnnConfig { k: 1, temperature: 0.07 }).unwrap();
        assert_eq!(p.label, ViewLabel::Plax);
    }

    #[test]
    fn one_strong_neighbour_beats_two_weak() {
        // unit descriptors with cosine 0.9 / 0.5 / 0.5 to the query e0
        let s = |c: f64| [c, (1.0 - c * c).sqrt(), 0.0];
        let t = |c: f64| [c, 0.0, (1.0 - c * c).sqrt()];
        let d = array![
            s(0.9),
            s(0.5),
            t(0.5),
            [-1.0, 0.0, 0.0]
        ];
        let labels = [ViewLabel::Psax, ViewLabel::A2C, ViewLabel::A2C, ViewLabel::A2C];
        let idx = ViewIndex::build(&d, &labels).unwrap();
        let p = classify(&[1.0, 0.0, 0.0], &idx, &KnnConfig { k: 3, temperature: 0.07 }).unwrap();
        assert!((0.9f64 / 0.07).exp() > 2.0 * (0.5f64 / 0.07).exp());
        assert_eq!(p.label, ViewLabel::Psax);
        assert!((p.weights[ViewLabel::A2C.index()] - 2.0 * (0.5f64 / 0.07).exp()).abs() < 1e-6);
    }

    #[test]
    fn class_tie_goes_to_first_label() {
        let idx = ViewIndex::build(&array![[1.0, 1.0], [1.0, 1.0]], &[ViewLabel::Psax, ViewLabel::A4C]).unwrap();
        let p = classify(&[1.0, 1.0], &idx, &KnnConfig { k: 2, temperature: 0.07 }).unwrap();
        assert_eq!(p.label, ViewLabel::A4C);
    }

    #[test]
    fn errors() {
        let idx = ViewIndex::build(&array![[1.0, 0.0]], &[ViewLabel::A2C]).unwrap();
        assert!(classify(&[1.0, 0.0], &idx, &KnnConfig { k: 2, temperature: 0.07 }).is_err());
        assert!(classify(&[0.0, 0.0], &idx, &KnnConfig { k: 1, temperature: 0.07 }).is_err());
        assert!(classify(&[1.0], &idx, &KnnConfig { k: 1, temperature: 0.07 }).is_err());
        assert!(evaluate(&idx, &[], &KnnConfig::default()).is_err());
    }

    #[test]
    fn absent_class_is_not_applicable() {
        let idx = ViewIndex::build(&array![[1.0, 0.0], [0.0, 1.0]], &[ViewLabel::A2C, ViewLabel::A4C]).unwrap();
        let test = vec![(vec![1.0, 0.1], ViewLabel::A2C), (vec![0.1, 1.0], ViewLabel::A4C)];
        let r = evaluate(&idx, &test, &KnnConfig { k: 1, temperature: 0.07 }).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_accuracy, 1.0);
        assert_eq!(r.per_class[2].accuracy, None);
        assert_eq!(r.per_class[3].instances, 0);
    }

    #[test]
    fn index_bytes_round_trip() {
        let idx = ViewIndex::build(&array![[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]], &[ViewLabel::A4C, ViewLabel::Psax]).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..7], b"ALANKNN");
        let back = ViewIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.labels(), idx.labels());
        for (a, b) in back.descriptors().iter().zip(idx.descriptors().iter()) {
            assert!((a - b).abs() < 1e-7);
        }
        for row in back.descriptors().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(ViewIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 9;
        assert!(matches!(ViewIndex::from_bytes(&bad), Err(Error::UnknownLabel(_))));
    }
}
