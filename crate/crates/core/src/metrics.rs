//! Intent-aligned evaluation metrics and the metric time-series store.
//!
//! *Stability* is the mean similarity between every generated sample and
//! every intent-related reference crop. *Controllability* is the mean,
//! over samples, of the two-way softmax preference for the intended keyword
//! over its opposite.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("sample batch is empty")]
    EmptyBatch,
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("step {step} does not follow last recorded step {last}")]
    NonMonotonicStep { last: u64, step: u64 },
    #[error("metric log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metric log record: {0}")]
    Record(#[from] serde_json::Error),
}

/// Images generated from one prompt at one checkpoint.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub images: Vec<RgbImage>,
    pub prompt: String,
    pub checkpoint_id: String,
    pub step: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Intent-related object crops used as stability references for one concept.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub concept_name: String,
    pub crops: Vec<RgbImage>,
}

/// Image-image and image-text similarity used by the metrics.
pub trait SimilarityScorer<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    /// Closed interval the scorer's outputs lie in.
    fn range(&self) -> (T, T);
    fn sim(&self, sample: &RgbImage, reference: &RgbImage) -> Result<T, String>;
    fn sim_text(&self, sample: &RgbImage, text: &str) -> Result<T, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordPair {
    pub concept_name: String,
    pub intended: String,
    pub opposing: String,
}

impl KeywordPair {
    pub fn swapped(&self) -> KeywordPair {
        KeywordPair {
            concept_name: self.concept_name.clone(),
            intended: self.opposing.clone(),
            opposing: self.intended.clone(),
        }
    }
}

fn count<T: Scalar>(n: usize) -> T {
    T::from(n).expect("count representable in scalar type")
}

/// Mean of `sim(sample, reference)` over the full sample × reference grid.
pub fn stability_with<T, S, R, E>(
    samples: &[S],
    references: &[R],
    mut sim: impl FnMut(&S, &R) -> Result<T, E>,
) -> Result<T, MetricError>
where
    T: Scalar,
    E: ToString,
{
    if samples.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    if references.is_empty() {
        return Err(MetricError::EmptyReferences);
    }
    let mut total = T::zero();
    for s in samples {
        for r in references {
            total = total + sim(s, r).map_err(|e| MetricError::Scorer(e.to_string()))?;
        }
    }
    Ok(total / (count::<T>(samples.len()) * count::<T>(references.len())))
}

/// Softmax preference for the intended keyword given the two similarities.
///
/// Evaluated as `1 / (1 + exp(opposing - intended))`, which cannot overflow
/// for large similarities.
pub fn softmax_preference<T: Scalar>(intended: T, opposing: T) -> T {
    T::one() / (T::one() + (opposing - intended).exp())
}

/// Mean softmax preference over per-sample `(intended, opposing)` similarity pairs.
pub fn controllability_with<T: Scalar>(pairs: &[(T, T)]) -> Result<T, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    let total = pairs.iter().fold(T::zero(), |acc, &(s1, s2)| acc + softmax_preference(s1, s2));
    Ok(total / count::<T>(pairs.len()))
}

pub fn stability<T: Scalar>(
    batch: &SampleBatch,
    refs: &ReferenceSet,
    scorer: &dyn SimilarityScorer<T>,
) -> Result<T, MetricError> {
    stability_with(&batch.images, &refs.crops, |s, r| scorer.sim(s, r))
}

pub fn controllability<T: Scalar>(
    batch: &SampleBatch,
    pair: &KeywordPair,
    scorer: &dyn SimilarityScorer<T>,
) -> Result<T, MetricError> {
    let pairs = batch
        .images
        .iter()
        .map(|img| {
            let s1 = scorer.sim_text(img, &pair.intended)?;
            let s2 = scorer.sim_text(img, &pair.opposing)?;
            Ok((s1, s2))
        })
        .collect::<Result<Vec<_>, String>>()
        .map_err(MetricError::Scorer)?;
    controllability_with(&pairs)
}

/// Sorts scores high to low; equal values fall back to ascending metric name.
pub fn rank_scores<T: Scalar>(mut scores: Vec<(String, T)>) -> Vec<(String, T)> {
    scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(&b.0))
    });
    scores
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries<T> {
    pub metric_name: String,
    pub concept_name: String,
    pub points: Vec<(u64, T)>,
}

impl<T: Scalar> MetricSeries<T> {
    pub fn new(metric_name: impl Into<String>, concept_name: impl Into<String>) -> Self {
        Self { metric_name: metric_name.into(), concept_name: concept_name.into(), points: Vec::new() }
    }

    pub fn last_step(&self) -> Option<u64> {
        self.points.last().map(|p| p.0)
    }

    /// Appends a point; steps must be strictly increasing.
    pub fn append_point(&mut self, step: u64, value: T) -> Result<(), MetricError> {
        if let Some(last) = self.last_step() {
            if step <= last {
                return Err(MetricError::NonMonotonicStep { last, step });
            }
        }
        self.points.push((step, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One line of a metric JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord<T> {
    pub step: u64,
    pub value: T,
    pub metric_name: String,
    pub concept_name: String,
    pub prompt: String,
}

/// Append-only JSON-lines file holding one metric series.
#[derive(Debug, Clone)]
pub struct MetricLog {
    path: PathBuf,
}

impl MetricLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &MetricRecord<T>) -> Result<(), MetricError> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    pub fn read<T: DeserializeOwned>(&self) -> Result<Vec<MetricRecord<T>>, MetricError> {
        let f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_oracle(m: &[Vec<f64>]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for row in m {
            for v in row {
                sum += v;
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn constant_scorer_gives_constant() {
        let s = stability_with(&[0, 1, 2], &[0, 1], |_, _| Ok::<_, String>(0.37f64)).unwrap();
        assert!((s - 0.37).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_matrix() {
        let m: [[f64; 2]; 2] = [[0.5, 0.7], [0.3, 0.9]];
        let s = stability_with(&[0usize, 1], &[0usize, 1], |&i, &j| Ok::<_, String>(m[i][j])).unwrap();
        let oracle = matrix_oracle(&[vec![0.5, 0.7], vec![0.3, 0.9]]);
        assert!((s - 0.6).abs() < 1e-12);
        assert!((s - oracle).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_is_one() {
        let s = stability_with(&["x"], &["x"], |a, b| Ok::<_, String>(if a == b { 1.0f64 } else { 0.0 })).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn empty_inputs() {
        let none: [u8; 0] = [];
        assert!(matches!(
            stability_with(&none, &[1u8], |_, _| Ok::<f64, String>(1.0)),
            Err(MetricError::EmptyBatch)
        ));
        assert!(matches!(
            stability_with(&[1u8], &none, |_, _| Ok::<f64, String>(1.0)),
            Err(MetricError::EmptyReferences)
        ));
        assert!(matches!(controllability_with::<f64>(&[]), Err(MetricError::EmptyBatch)));
    }

    #[test]
    fn controllability_examples() {
        assert_eq!(controllability_with(&[(0.3f64, 0.3), (-2.0, -2.0)]).unwrap(), 0.5);
        let e = std::f64::consts::E;
        let one = controllability_with(&[(1.0f64, 0.0)]).unwrap();
        assert!((one - e / (e + 1.0)).abs() < 1e-15);
        assert!((one - 0.731059).abs() < 1e-6);
        let two = controllability_with(&[(1.0f64, 0.0), (0.0, 0.0)]).unwrap();
        assert!((two - 0.615529).abs() < 1e-6);
    }

    #[test]
    fn controllability_no_overflow() {
        let c = controllability_with(&[(1000.0f64, 0.0), (0.0, 1000.0)]).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn works_for_f32() {
        let c = controllability_with(&[(1.0f32, 0.0)]).unwrap();
        assert!((c - 0.731_059).abs() < 1e-6);
    }

    #[test]
    fn append_rules() {
        let mut s = MetricSeries::<f64>::new("stability", "face");
        s.append_point(100, 0.4).unwrap();
        assert_eq!(s.len(), 1);
        assert!(matches!(s.append_point(100, 0.5), Err(MetricError::NonMonotonicStep { last: 100, step: 100 })));
        let mut t = MetricSeries::<f64>::new("stability", "face");
        for st in [50, 100, 150] {
            t.append_point(st, st as f64).unwrap();
        }
        assert_eq!(t.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![50, 100, 150]);
    }

    #[test]
    fn ranking() {
        let r = rank_scores(vec![("a".to_string(), 0.3f64), ("b".to_string(), 0.9)]);
        assert_eq!(r, vec![("b".to_string(), 0.9), ("a".to_string(), 0.3)]);
        let t = rank_scores(vec![("b".to_string(), 0.5f64), ("a".to_string(), 0.5)]);
        assert_eq!(t, vec![("a".to_string(), 0.5), ("b".to_string(), 0.5)]);
        assert!(rank_scores::<f64>(vec![]).is_empty());
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = MetricLog::new(dir.path().join("m/stability.jsonl"));
        assert!(log.read::<f64>().unwrap().is_empty());
        let rec = MetricRecord {
            step: 3,
            value: 0.25f64,
            metric_name: "stability".into(),
            concept_name: "face".into(),
            prompt: "Vincent, face".into(),
        };
        log.append(&rec).unwrap();
        log.append(&MetricRecord { step: 6, ..rec.clone() }).unwrap();
        let back = log.read::<f64>().unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], rec);
    }
}
