//! Intent-guided image augmentation.
//!
//! Concepts named in the specification are located with a text-prompted
//! detector, disambiguated against the user's reference regions, and then
//! handled per operation: delete concepts are inpainted away, keep concepts
//! are cropped into their own training images, and modify concepts are
//! cropped only while they are not already dominant in the frame.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::imaging::{self, Mask, SourceImage};
use crate::intent::{Granularity, IntentSpecification, Region};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("detector failed on image {image_id}: {reason}")]
    DetectorFailure { image_id: String, reason: String },
    #[error("embedder failed: {0}")]
    EmbedderFailure(String),
    #[error("inpainting failed: {0}")]
    InpaintFailure(String),
    #[error("crop of {width}x{height} px is below the {min}x{min} px minimum")]
    DegenerateCrop { width: u32, height: u32, min: u32 },
    #[error("threshold {name} = {value} is out of range")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error("image {0} is not part of the input set")]
    UnknownImage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionBox {
    pub image_id: String,
    pub concept_name: String,
    pub bbox: BBox,
    pub score: f64,
}

pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Boxes for any of `concepts` found in `image`.
    fn detect(&self, image: &SourceImage, concepts: &[String]) -> Result<Vec<DetectionBox>, String>;
}

pub trait EmbedderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Unit-norm embedding of an image crop.
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, String>;
}

pub trait InpainterBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Redraws the masked pixels. The output has the input's dimensions.
    fn inpaint(&self, image: &RgbImage, mask: &Mask) -> Result<RgbImage, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Minimum detector score.
    pub score_threshold: f64,
    /// Minimum reference similarity for concepts with reference regions.
    pub sim_threshold: f64,
    /// Delete-mask padding as a fraction of the image side.
    pub mask_padding: f64,
    /// Minimum crop side in pixels.
    pub min_crop_px: u32,
    /// Modify crops are only made for boxes smaller than this area fraction.
    pub trigger_threshold: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            score_threshold: 0.35,
            sim_threshold: 0.60,
            mask_padding: 0.02,
            min_crop_px: 64,
            trigger_threshold: DEFAULT_TRIGGER_THRESHOLD,
        }
    }
}

pub const DEFAULT_TRIGGER_THRESHOLD: f64 = 0.40;

impl Thresholds {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let unit = |name, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(AugmentError::InvalidThreshold { name, value })
            }
        };
        unit("score_threshold", self.score_threshold)?;
        unit("sim_threshold", self.sim_threshold)?;
        unit("mask_padding", self.mask_padding)?;
        if !(self.trigger_threshold > 0.0 && self.trigger_threshold <= 1.0) {
            return Err(AugmentError::InvalidThreshold { name: "trigger_threshold", value: self.trigger_threshold });
        }
        Ok(())
    }
}

/// Concepts that can be localized with a box: attribute and instance level.
pub fn detectable_concepts(spec: &IntentSpecification) -> Vec<String> {
    spec.concepts.iter().filter(|c| c.granularity != Granularity::Imagery).map(|c| c.name.clone()).collect()
}

pub fn detect_concepts(
    images: &[SourceImage],
    spec: &IntentSpecification,
    detector: &dyn DetectorBackend,
    score_threshold: f64,
) -> Result<Vec<DetectionBox>, AugmentError> {
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(AugmentError::InvalidThreshold { name: "score_threshold", value: score_threshold });
    }
    let concepts = detectable_concepts(spec);
    if concepts.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for image in images {
        let boxes = detector
            .detect(image, &concepts)
            .map_err(|reason| AugmentError::DetectorFailure { image_id: image.id.clone(), reason })?;
        for b in boxes {
            if !b.bbox.is_well_formed() || !(0.0..=1.0).contains(&b.score) {
                return Err(AugmentError::DetectorFailure {
                    image_id: image.id.clone(),
                    reason: format!("backend returned an invalid box for {:?}", b.concept_name),
                });
            }
            if b.score >= score_threshold && concepts.contains(&b.concept_name) {
                out.push(DetectionBox { image_id: image.id.clone(), ..b });
            }
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn find_image<'a>(images: &'a [SourceImage], id: &str) -> Result<&'a SourceImage, AugmentError> {
    images.iter().find(|i| i.id == id).ok_or_else(|| AugmentError::UnknownImage(id.to_string()))
}

/// Best reference similarity for every box, `None` for concepts without reference regions.
pub fn reference_similarities(
    boxes: &[DetectionBox],
    spec: &IntentSpecification,
    regions: &[Region],
    images: &[SourceImage],
    embedder: &dyn EmbedderBackend,
) -> Result<Vec<Option<f64>>, AugmentError> {
    let mut refs: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
    for c in &spec.concepts {
        let mut embs = Vec::new();
        for id in &c.region_ids {
            let Some(region) = regions.iter().find(|r| r.region_id == *id) else { continue };
            let source = find_image(images, &region.image_id)?;
            let crop = imaging::crop(&source.pixels, &region.bbox);
            embs.push(embedder.embed_image(&crop).map_err(AugmentError::EmbedderFailure)?);
        }
        if !embs.is_empty() {
            refs.insert(c.name.as_str(), embs);
        }
    }
    boxes
        .iter()
        .map(|b| {
            let Some(ref_embs) = refs.get(b.concept_name.as_str()) else { return Ok(None) };
            let source = find_image(images, &b.image_id)?;
            let emb = embedder
                .embed_image(&imaging::crop(&source.pixels, &b.bbox))
                .map_err(AugmentError::EmbedderFailure)?;
            Ok(Some(ref_embs.iter().map(|r| cosine(&emb, r)).fold(f64::NEG_INFINITY, f64::max)))
        })
        .collect()
}

/// Keeps boxes whose best reference similarity reaches `sim_threshold`.
/// Boxes of concepts without reference regions pass unchanged.
pub fn filter_by_reference(
    boxes: Vec<DetectionBox>,
    spec: &IntentSpecification,
    regions: &[Region],
    images: &[SourceImage],
    embedder: &dyn EmbedderBackend,
    sim_threshold: f64,
) -> Result<Vec<DetectionBox>, AugmentError> {
    let sims = reference_similarities(&boxes, spec, regions, images, embedder)?;
    Ok(boxes
        .into_iter()
        .zip(sims)
        .filter(|(_, s)| s.is_none_or(|s| s >= sim_threshold))
        .map(|(b, _)| b)
        .collect())
}

/// Pixel mask covering every box, each padded by `padding` of the image side.
pub fn delete_mask(width: u32, height: u32, boxes: &[DetectionBox], padding: f64) -> Mask {
    Mask::union_of(width, height, boxes.iter().map(|b| b.bbox.padded(padding).to_pixels(width, height)))
}

/// Inpaints the union of the (padded) delete boxes in one pass.
pub fn apply_delete(
    image: &RgbImage,
    boxes: &[DetectionBox],
    inpainter: &dyn InpainterBackend,
    padding: f64,
) -> Result<RgbImage, AugmentError> {
    if boxes.is_empty() {
        return Ok(image.clone());
    }
    let mask = delete_mask(image.width(), image.height(), boxes, padding);
    let out = inpainter.inpaint(image, &mask).map_err(AugmentError::InpaintFailure)?;
    if out.dimensions() != image.dimensions() {
        return Err(AugmentError::InpaintFailure(format!(
            "inpainter changed dimensions from {:?} to {:?}",
            image.dimensions(),
            out.dimensions()
        )));
    }
    Ok(out)
}

/// A crop destined for a concept sub-folder.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub folder: String,
    pub source_image_id: String,
    pub bbox: BBox,
    pub image: RgbImage,
}

fn crop_record(image: &RgbImage, det: &DetectionBox, min_px: u32) -> Result<CropRecord, AugmentError> {
    let r = det.bbox.to_pixels(image.width(), image.height());
    if r.width < min_px || r.height < min_px {
        return Err(AugmentError::DegenerateCrop { width: r.width, height: r.height, min: min_px });
    }
    Ok(CropRecord {
        folder: det.concept_name.clone(),
        source_image_id: det.image_id.clone(),
        bbox: det.bbox,
        image: imaging::crop(image, &det.bbox),
    })
}

/// Crops a keep concept unconditionally.
pub fn apply_keep(image: &RgbImage, det: &DetectionBox, min_px: u32) -> Result<CropRecord, AugmentError> {
    crop_record(image, det, min_px)
}

/// Crops a modify concept only when its box covers less than `trigger_threshold` of the image.
pub fn apply_modify(
    image: &RgbImage,
    det: &DetectionBox,
    trigger_threshold: f64,
    min_px: u32,
) -> Result<Option<CropRecord>, AugmentError> {
    if !(trigger_threshold > 0.0 && trigger_threshold <= 1.0) {
        return Err(AugmentError::InvalidThreshold { name: "trigger_threshold", value: trigger_threshold });
    }
    if det.bbox.area_fraction() < trigger_threshold {
        crop_record(image, det, min_px).map(Some)
    } else {
        Ok(None)
    }
}
