//! Deterministic backends that need no model weights.
//!
//! They make the whole pipeline reproducible: the same inputs always give
//! bit-identical outputs.

use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{DetectionBox, DetectorBackend, EmbedderBackend, InpainterBackend};
use crate::caption::CaptionerBackend;
use crate::geometry::BBox;
use crate::imaging::{self, Mask, SourceImage};
use crate::metrics::SimilarityScorer;

/// Detector that replays boxes from a manifest keyed by image id or upload name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureDetector {
    boxes: HashMap<String, Vec<FixtureBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureBox {
    pub concept_name: String,
    pub bbox: BBox,
    pub score: f64,
}

impl FixtureDetector {
    pub fn insert(&mut self, key: impl Into<String>, det: DetectionBox) {
        self.boxes.entry(key.into()).or_default().push(FixtureBox {
            concept_name: det.concept_name,
            bbox: det.bbox,
            score: det.score,
        });
    }

    pub fn add(&mut self, key: impl Into<String>, concept: &str, bbox: BBox, score: f64) {
        self.boxes.entry(key.into()).or_default().push(FixtureBox { concept_name: concept.into(), bbox, score });
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let sorted: std::collections::BTreeMap<_, _> = self.boxes.iter().collect();
        serde_json::to_string_pretty(&sorted).expect("fixture serializes")
    }
}

impl DetectorBackend for FixtureDetector {
    fn name(&self) -> &str {
        "fixture-detector"
    }

    fn detect(&self, image: &SourceImage, concepts: &[String]) -> Result<Vec<DetectionBox>, String> {
        let entries = self
            .boxes
            .get(&image.id)
            .or_else(|| image.name.as_ref().and_then(|n| self.boxes.get(n)))
            .map(Vec::as_slice)
            .unwrap_or_default();
        Ok(entries
            .iter()
            .filter(|b| concepts.contains(&b.concept_name))
            .map(|b| DetectionBox {
                image_id: image.id.clone(),
                concept_name: b.concept_name.clone(),
                bbox: b.bbox,
                score: b.score,
            })
            .collect())
    }
}

/// Embeds an image by hashing its quantized mean colour into a random unit vector.
///
/// Crops with the same dominant texture share a vector; distinct textures
/// land on near-orthogonal ones.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
    /// Quantization levels per colour channel.
    pub levels: u8,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 128, levels: 4 }
    }
}

fn unit_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

impl HashEmbedder {
    pub fn texture_key(&self, image: &RgbImage) -> [u8; 3] {
        let step = 256.0 / self.levels as f64;
        imaging::mean_color(image).map(|c| (c / step).floor().min(self.levels as f64 - 1.0) as u8)
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let key = format!("text:{}", text.trim().to_lowercase());
        unit_vector(imaging::seed_from(key.as_bytes()), self.dim)
    }
}

impl EmbedderBackend for HashEmbedder {
    fn name(&self) -> &str {
        "hash-embedder"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, String> {
        let key = self.texture_key(image);
        Ok(unit_vector(imaging::seed_from(&[b'i', key[0], key[1], key[2]]), self.dim))
    }
}

/// Fills the masked pixels with their mean colour and leaves every other pixel untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanFillInpainter;

impl InpainterBackend for MeanFillInpainter {
    fn name(&self) -> &str {
        "mean-fill-inpainter"
    }

    fn inpaint(&self, image: &RgbImage, mask: &Mask) -> Result<RgbImage, String> {
        if mask.dimensions() != image.dimensions() {
            return Err("mask and image dimensions differ".into());
        }
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for (x, y, p) in image.enumerate_pixels() {
            if mask.get(x, y) {
                for c in 0..3 {
                    sum[c] += p[c] as u64;
                }
                n += 1;
            }
        }
        let mut out = image.clone();
        if n == 0 {
            return Ok(out);
        }
        let fill = Rgb(sum.map(|s| ((s + n / 2) / n) as u8));
        for (x, y, p) in out.enumerate_pixels_mut() {
            if mask.get(x, y) {
                *p = fill;
            }
        }
        Ok(out)
    }
}

/// Describes images by their dominant named colours.
#[derive(Debug, Clone, Copy, Default)]
pub struct PaletteCaptioner;

impl CaptionerBackend for PaletteCaptioner {
    fn name(&self) -> &str {
        "palette-captioner"
    }

    fn caption(&self, image: &RgbImage) -> Result<String, String> {
        let colors = imaging::dominant_colors(image, 3);
        Ok(match colors.as_slice() {
            [] => return Err("image has no pixels".into()),
            [a] => format!("a picture in {a} tones"),
            [a, b] => format!("a picture in {a} tones, with {b} details"),
            [a, b, c, ..] => format!("a picture in {a} tones, with {b} details, a touch of {c}"),
        })
    }

    fn caption_region(&self, image: &RgbImage, bbox: &BBox) -> Result<String, String> {
        let crop = imaging::crop(image, bbox);
        let colors = imaging::dominant_colors(&crop, 2);
        Ok(match colors.as_slice() {
            [] => return Err("region has no pixels".into()),
            [a] => format!("detailed {a} texture"),
            [a, b, ..] => format!("detailed {a} and {b} texture"),
        })
    }
}

/// Similarity scorer over [`HashEmbedder`] vectors, mapped from `[-1, 1]` to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashScorer {
    pub embedder: HashEmbedder,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SimilarityScorer<f64> for HashScorer {
    fn name(&self) -> &str {
        "hash-scorer"
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn sim(&self, sample: &RgbImage, reference: &RgbImage) -> Result<f64, String> {
        let a = self.embedder.embed_image(sample)?;
        let b = self.embedder.embed_image(reference)?;
        Ok(((1.0 + dot(&a, &b)) / 2.0).clamp(0.0, 1.0))
    }

    fn sim_text(&self, sample: &RgbImage, text: &str) -> Result<f64, String> {
        let a = self.embedder.embed_image(sample)?;
        let b = self.embedder.embed_text(text);
        Ok(((1.0 + dot(&a, &b)) / 2.0).clamp(0.0, 1.0))
    }
}
