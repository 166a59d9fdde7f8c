//! Building and editing the concept-foldered training dataset.
//!
//! On disk a dataset is `<root>/<folder>/<NNNN>.png` with a single-line
//! UTF-8 caption sidecar `<NNNN>.txt` next to each image, plus
//! `<root>/manifest.json`. Folder `base` holds the full (delete-cleaned)
//! images; every other folder is named after a concept.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    apply_delete, apply_keep, apply_modify, detect_concepts, filter_by_reference, AugmentError, CropRecord,
    DetectionBox, DetectorBackend, EmbedderBackend, InpainterBackend, Thresholds,
};
use crate::caption::{
    initial_caption, optimize_keep, optimize_modify, trigger_prefix, Caption, CaptionError, CaptionRewriterBackend,
    CaptionerBackend,
};
use crate::geometry::BBox;
use crate::imaging::{self, SourceImage};
use crate::intent::{IntentSpecification, Operation, Region};

pub const BASE_FOLDER: &str = "base";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("no input images")]
    NoImages,
    #[error("every image failed: {0:?}")]
    AllImagesFailed(Vec<ImageFailure>),
    #[error("output directory {0} exists and is not a dataset")]
    OutputNotEmpty(PathBuf),
    #[error("no dataset item at {0}")]
    UnknownItem(String),
    #[error("find string must be non-empty")]
    EmptyFind,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub error: String,
}

/// Backends used while building a dataset.
#[derive(Clone, Copy)]
pub struct AugmentBackends<'a> {
    pub detector: &'a dyn DetectorBackend,
    pub embedder: &'a dyn EmbedderBackend,
    pub inpainter: &'a dyn InpainterBackend,
    pub captioner: &'a dyn CaptionerBackend,
    pub rewriter: &'a dyn CaptionRewriterBackend,
}

impl AugmentBackends<'_> {
    fn names(&self) -> BTreeMap<String, String> {
        [
            ("detector", self.detector.name()),
            ("embedder", self.embedder.name()),
            ("inpainter", self.inpainter.name()),
            ("captioner", self.captioner.name()),
            ("rewriter", self.rewriter.name()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub relative_path: String,
    pub folder: String,
    pub source_image_id: String,
    /// Crop box in the source image; `None` for base images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: IntentSpecification,
    pub thresholds: Thresholds,
    pub backends: BTreeMap<String, String>,
    pub folders: BTreeMap<String, usize>,
    pub items: Vec<ItemRecord>,
    #[serde(default)]
    pub failures: Vec<ImageFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub record: ItemRecord,
    pub caption: Caption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub items: Vec<DatasetItem>,
}

/// Result of [`build_dataset`]: the dataset plus per-image problems that did not stop the build.
#[derive(Debug, Clone)]
pub struct BuildReport {
    pub dataset: ProcessedDataset,
    pub failures: Vec<ImageFailure>,
    pub warnings: Vec<String>,
}

/// Which captions an edit applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditScope {
    All,
    Folder(String),
}

pub fn folder_name(concept: &str) -> String {
    concept.replace(['/', '\\'], "_")
}

struct ImageOutput {
    image_id: String,
    base: RgbImage,
    base_caption: Caption,
    crops: Vec<(CropRecord, Caption)>,
    warnings: Vec<String>,
}

fn process_image(
    image: &SourceImage,
    all_images: &[SourceImage],
    regions: &[Region],
    spec: &IntentSpecification,
    backends: AugmentBackends<'_>,
    t: &Thresholds,
) -> Result<ImageOutput, DatasetError> {
    let boxes = detect_concepts(std::slice::from_ref(image), spec, backends.detector, t.score_threshold)?;
    let boxes = filter_by_reference(boxes, spec, regions, all_images, backends.embedder, t.sim_threshold)?;
    let op_of = |b: &DetectionBox| spec.concept(&b.concept_name).map(|c| c.operation);

    let delete_boxes: Vec<DetectionBox> = boxes.iter().filter(|b| op_of(b) == Some(Operation::Delete)).cloned().collect();
    let base = apply_delete(&image.pixels, &delete_boxes, backends.inpainter, t.mask_padding)?;

    let mut warnings = Vec::new();
    let mut crops = Vec::new();
    for b in &boxes {
        let res = match op_of(b) {
            Some(Operation::Keep) => apply_keep(&base, b, t.min_crop_px).map(Some),
            Some(Operation::Modify) => apply_modify(&base, b, t.trigger_threshold, t.min_crop_px),
            _ => continue,
        };
        match res {
            Ok(Some(crop)) => crops.push(crop),
            Ok(None) => {}
            Err(e @ AugmentError::DegenerateCrop { .. }) => {
                tracing::warn!(image = %image.id, concept = %b.concept_name, "skipping crop: {e}");
                warnings.push(format!("{}: {}: {e}", image.id, b.concept_name));
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut base_caption = initial_caption(&base, &spec.trigger_word, backends.captioner)?;
    for c in spec.concepts_with(Operation::Keep) {
        base_caption = optimize_keep(&base_caption, spec, c, backends.rewriter)?;
    }
    for c in spec.concepts_with(Operation::Modify) {
        if let Some(b) = boxes.iter().find(|b| b.concept_name == c.name) {
            base_caption =
                optimize_modify(&base_caption, &base, &b.bbox, spec, c, backends.captioner, backends.rewriter)?;
        }
    }
    let base_caption = Caption::new(base_caption.text, spec);

    let crops = crops
        .into_iter()
        .map(|crop| {
            let concept = spec.concept(&crop.folder).expect("crops come from spec concepts");
            let mut cap = initial_caption(&crop.image, &spec.trigger_word, backends.captioner)?;
            cap = match concept.operation {
                Operation::Keep => optimize_keep(&cap, spec, concept, backends.rewriter)?,
                _ => optimize_modify(
                    &cap,
                    &crop.image,
                    &BBox::FULL,
                    spec,
                    concept,
                    backends.captioner,
                    backends.rewriter,
                )?,
            };
            Ok((crop, cap))
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;

    Ok(ImageOutput { image_id: image.id.clone(), base, base_caption, crops, warnings })
}

fn prepare_root(root: &Path) -> Result<(), DatasetError> {
    if root.exists() {
        let is_empty = fs::read_dir(root).map_err(io_err(root))?.next().is_none();
        if !is_empty {
            if !root.join(MANIFEST_FILE).is_file() {
                return Err(DatasetError::OutputNotEmpty(root.to_path_buf()));
            }
            fs::remove_dir_all(root).map_err(io_err(root))?;
        }
    }
    fs::create_dir_all(root).map_err(io_err(root))
}

fn write_caption_file(path: &Path, text: &str) -> Result<(), DatasetError> {
    let line = text.replace(['\n', '\r'], " ");
    let tmp = path.with_extension("txt.tmp");
    fs::write(&tmp, format!("{line}\n")).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Single writer for the output directory.
struct DatasetWriter<'a> {
    root: &'a Path,
    counters: BTreeMap<String, usize>,
    items: Vec<DatasetItem>,
}

impl DatasetWriter<'_> {
    fn write(
        &mut self,
        folder: &str,
        source_image_id: &str,
        bbox: Option<BBox>,
        image: &RgbImage,
        caption: Caption,
    ) -> Result<(), DatasetError> {
        let n = self.counters.entry(folder.to_string()).or_insert(0);
        *n += 1;
        let stem = format!("{:04}", *n);
        let dir = self.root.join(folder);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let png = dir.join(format!("{stem}.png"));
        fs::write(&png, imaging::encode_png(image)).map_err(io_err(&png))?;
        write_caption_file(&dir.join(format!("{stem}.txt")), &caption.text)?;
        self.items.push(DatasetItem {
            record: ItemRecord {
                relative_path: format!("{folder}/{stem}.png"),
                folder: folder.to_string(),
                source_image_id: source_image_id.to_string(),
                bbox,
            },
            caption,
        });
        Ok(())
    }
}

/// Runs detection, reference filtering, deletion and cropping for every
/// image, captions the results, and writes the dataset under `root`.
///
/// Images are processed in parallel and written in input order. Individual
/// image failures are reported; the build fails only when every image fails.
pub fn build_dataset(
    images: &[SourceImage],
    regions: &[Region],
    spec: &IntentSpecification,
    backends: AugmentBackends<'_>,
    thresholds: &Thresholds,
    root: &Path,
) -> Result<BuildReport, DatasetError> {
    thresholds.validate()?;
    if images.is_empty() {
        return Err(DatasetError::NoImages);
    }
    let outputs: Vec<Result<ImageOutput, DatasetError>> = images
        .par_iter()
        .map(|img| process_image(img, images, regions, spec, backends, thresholds))
        .collect();

    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (img, out) in images.iter().zip(outputs) {
        match out {
            Ok(o) => ok.push(o),
            Err(e) => {
                tracing::warn!(image = %img.id, "image failed: {e}");
                failures.push(ImageFailure { image_id: img.id.clone(), error: e.to_string() });
            }
        }
    }
    if ok.is_empty() {
        return Err(DatasetError::AllImagesFailed(failures));
    }

    prepare_root(root)?;
    let mut writer = DatasetWriter { root, counters: BTreeMap::new(), items: Vec::new() };
    let mut warnings = Vec::new();
    for out in &ok {
        writer.write(BASE_FOLDER, &out.image_id, None, &out.base, out.base_caption.clone())?;
    }
    for out in ok {
        for (crop, caption) in out.crops {
            writer.write(&folder_name(&crop.folder), &crop.source_image_id, Some(crop.bbox), &crop.image, caption)?;
        }
        warnings.extend(out.warnings);
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        thresholds: *thresholds,
        backends: backends.names(),
        folders: writer.counters.clone(),
        items: writer.items.iter().map(|i| i.record.clone()).collect(),
        failures: failures.clone(),
    };
    let manifest_path = root.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&manifest_path))?;
    Ok(BuildReport {
        dataset: ProcessedDataset { root: root.to_path_buf(), manifest, items: writer.items },
        failures,
        warnings,
    })
}

impl ProcessedDataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let manifest_path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        let items = manifest
            .items
            .iter()
            .map(|record| {
                let path = root.join(&record.relative_path).with_extension("txt");
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                Ok(DatasetItem { record: record.clone(), caption: Caption::new(text.trim_end(), &manifest.spec) })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(Self { root: root.to_path_buf(), manifest, items })
    }

    pub fn spec(&self) -> &IntentSpecification {
        &self.manifest.spec
    }

    pub fn folders(&self) -> &BTreeMap<String, usize> {
        &self.manifest.folders
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, relative_path: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.record.relative_path == relative_path)
    }

    pub fn in_folder<'a>(&'a self, folder: &'a str) -> impl Iterator<Item = &'a DatasetItem> + 'a {
        self.items.iter().filter(move |i| i.record.folder == folder)
    }

    pub fn image_path(&self, item: &DatasetItem) -> PathBuf {
        self.root.join(&item.record.relative_path)
    }

    pub fn load_image(&self, item: &DatasetItem) -> Result<RgbImage, DatasetError> {
        let path = self.image_path(item);
        imaging::load_rgb(&path).map_err(|source| DatasetError::Image { path, source })
    }

    fn set_caption(&mut self, idx: usize, text: String) -> Result<(), DatasetError> {
        let path = self.root.join(&self.items[idx].record.relative_path).with_extension("txt");
        if path.exists() {
            let bak = path.with_extension("txt.bak");
            fs::copy(&path, &bak).map_err(io_err(&bak))?;
        }
        write_caption_file(&path, &text)?;
        self.items[idx].caption = Caption::new(text, &self.manifest.spec);
        Ok(())
    }

    /// Replaces one caption. The trigger prefix is required.
    pub fn put_caption(&mut self, relative_path: &str, text: &str) -> Result<&Caption, DatasetError> {
        let idx = self
            .items
            .iter()
            .position(|i| i.record.relative_path == relative_path)
            .ok_or_else(|| DatasetError::UnknownItem(relative_path.to_string()))?;
        let prefix = trigger_prefix(&self.manifest.spec.trigger_word);
        let text = text.replace(['\n', '\r'], " ");
        if !text.starts_with(&prefix) || text.trim() == prefix.trim() {
            return Err(CaptionError::Precondition(format!("caption must start with {prefix:?} and have a body")).into());
        }
        self.set_caption(idx, text)?;
        Ok(&self.items[idx].caption)
    }
}

/// Replaces `find` with `replace` in the body of every caption in `scope`.
/// The trigger prefix is never edited. Returns the number of captions changed.
pub fn propagate_edit(
    dataset: &mut ProcessedDataset,
    find: &str,
    replace: &str,
    scope: &EditScope,
) -> Result<usize, DatasetError> {
    if find.is_empty() {
        return Err(DatasetError::EmptyFind);
    }
    let prefix = trigger_prefix(&dataset.manifest.spec.trigger_word);
    let mut changed = 0;
    for idx in 0..dataset.items.len() {
        let item = &dataset.items[idx];
        if let EditScope::Folder(f) = scope {
            if &item.record.folder != f {
                continue;
            }
        }
        let text = &item.caption.text;
        let (head, body) = match text.strip_prefix(&prefix) {
            Some(body) => (prefix.as_str(), body),
            None => ("", text.as_str()),
        };
        if !body.contains(find) {
            continue;
        }
        let new_text = format!("{head}{}", body.replace(find, replace));
        if new_text != *text {
            dataset.set_caption(idx, new_text)?;
            changed += 1;
        }
    }
    Ok(changed)
}
