//! Synthetic portrait set for end-to-end runs with the mock backends.
//!
//! Seven 256×256 portraits of one person. Each wears either a solid dark
//! leather jacket or a striped jacket, four wear a gold necklace, one is
//! seen from behind (no face), and one jacket fills most of the frame. The
//! detector fixture deliberately reports every jacket under both jacket
//! concepts so the reference filter has to tell them apart.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};

use crate::augment::Thresholds;
use crate::caption::RuleRewriter;
use crate::dataset::{build_dataset, AugmentBackends, BuildReport, DatasetError};
use crate::geometry::BBox;
use crate::imaging::SourceImage;
use crate::intent::{ConceptIntent, Domain, Granularity, IntentSpecification, Operation, Region};
use crate::mock::{FixtureDetector, HashEmbedder, MeanFillInpainter, PaletteCaptioner};

pub const SIDE: u32 = 256;

pub const INTENT_TEXT: &str = "I want to train a model for a man named Vincent. Ensure his facial features remain consistent. He should be able to switch between a black leather jacket [1] and a black striped jacket [2]. His hair color should be adjustable, and don't let him wear a necklace.";

const SKIN: [u8; 3] = [224, 160, 160];
const HAIR: [u8; 3] = [96, 32, 32];
const LEATHER: [u8; 3] = [32, 32, 32];
const STRIPE_DARK: [u8; 3] = [32, 32, 32];
const STRIPE_LIGHT: [u8; 3] = [160, 160, 160];
const GOLD: [u8; 3] = [224, 192, 32];
const BACKGROUNDS: [[u8; 3]; 7] = [
    [40, 110, 180],
    [60, 150, 80],
    [200, 200, 210],
    [170, 120, 200],
    [230, 200, 120],
    [90, 170, 170],
    [210, 120, 90],
];

pub const FACE: (f64, f64, f64, f64) = (0.36, 0.10, 0.64, 0.40);
pub const HAIR_BOX: (f64, f64, f64, f64) = (0.30, 0.00, 0.70, 0.28);
pub const JACKET: (f64, f64, f64, f64) = (0.20, 0.45, 0.80, 0.90);
pub const BIG_JACKET: (f64, f64, f64, f64) = (0.05, 0.35, 0.95, 1.00);
pub const NECKLACE: (f64, f64, f64, f64) = (0.42, 0.42, 0.58, 0.48);
const SPURIOUS_FACE: (f64, f64, f64, f64) = (0.05, 0.05, 0.35, 0.35);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacketKind {
    Leather,
    Striped,
}

#[derive(Debug, Clone, Copy)]
pub struct PortraitLayout {
    pub jacket: JacketKind,
    pub big_jacket: bool,
    pub necklace: bool,
    pub face_visible: bool,
}

pub const LAYOUTS: [PortraitLayout; 7] = [
    PortraitLayout { jacket: JacketKind::Leather, big_jacket: false, necklace: true, face_visible: true },
    PortraitLayout { jacket: JacketKind::Striped, big_jacket: false, necklace: true, face_visible: true },
    PortraitLayout { jacket: JacketKind::Leather, big_jacket: false, necklace: false, face_visible: true },
    PortraitLayout { jacket: JacketKind::Striped, big_jacket: false, necklace: true, face_visible: true },
    PortraitLayout { jacket: JacketKind::Leather, big_jacket: true, necklace: false, face_visible: true },
    PortraitLayout { jacket: JacketKind::Striped, big_jacket: false, necklace: false, face_visible: true },
    PortraitLayout { jacket: JacketKind::Leather, big_jacket: false, necklace: true, face_visible: false },
];

pub fn bbox(r: (f64, f64, f64, f64)) -> BBox {
    BBox::new(r.0, r.1, r.2, r.3).expect("fixture boxes are well formed")
}

fn paint(img: &mut RgbImage, r: (f64, f64, f64, f64), color: impl Fn(u32, u32) -> [u8; 3]) {
    let p = bbox(r).to_pixels(img.width(), img.height());
    for y in p.y..p.y + p.height {
        for x in p.x..p.x + p.width {
            img.put_pixel(x, y, Rgb(color(x, y)));
        }
    }
}

pub fn render(index: usize) -> RgbImage {
    let layout = LAYOUTS[index];
    let mut img = RgbImage::from_pixel(SIDE, SIDE, Rgb(BACKGROUNDS[index]));
    paint(&mut img, HAIR_BOX, |_, _| HAIR);
    if layout.face_visible {
        paint(&mut img, FACE, |_, _| SKIN);
    }
    let jacket = if layout.big_jacket { BIG_JACKET } else { JACKET };
    match layout.jacket {
        JacketKind::Leather => paint(&mut img, jacket, |_, _| LEATHER),
        JacketKind::Striped => {
            paint(&mut img, jacket, |_, y| if (y / 8) % 2 == 0 { STRIPE_DARK } else { STRIPE_LIGHT })
        }
    }
    if layout.necklace {
        paint(&mut img, NECKLACE, |_, _| GOLD);
    }
    img
}

pub fn file_name(index: usize) -> String {
    format!("portrait_{:02}.png", index + 1)
}

/// Everything needed to drive the pipeline over the portrait set.
#[derive(Debug, Clone)]
pub struct PortraitFixture {
    pub images: Vec<SourceImage>,
    pub regions: Vec<Region>,
    pub spec: IntentSpecification,
    /// Boxes keyed by upload file name.
    pub detector: FixtureDetector,
    pub expected_folders: BTreeMap<String, usize>,
}

pub fn vincent_spec() -> IntentSpecification {
    IntentSpecification {
        domain: Domain::HumanPortrait,
        trigger_word: "Vincent".into(),
        concepts: vec![
            ConceptIntent::new("face", Granularity::Instance, Operation::Keep),
            ConceptIntent::new("hair color", Granularity::Attribute, Operation::Modify)
                .with_opposing("long hair", "short hair"),
            ConceptIntent::new("black leather jacket", Granularity::Instance, Operation::Modify)
                .with_opposing("black leather jacket", "black striped jacket")
                .with_regions([1]),
            ConceptIntent::new("black striped jacket", Granularity::Instance, Operation::Modify)
                .with_opposing("black striped jacket", "black leather jacket")
                .with_regions([2]),
            ConceptIntent::new("necklace", Granularity::Instance, Operation::Delete),
        ],
    }
}

/// [`vincent_spec`] without region links, as a user would type it for the rule backend.
pub fn vincent_structured() -> IntentSpecification {
    let mut s = vincent_spec();
    for c in &mut s.concepts {
        c.region_ids.clear();
    }
    s
}

/// Reference regions: region 1 outlines the leather jacket on the first
/// portrait, region 2 the striped jacket on the second.
pub fn regions_for(first_id: &str, second_id: &str) -> Vec<Region> {
    vec![
        Region { region_id: 1, image_id: first_id.into(), bbox: bbox(JACKET), color_index: 0 },
        Region { region_id: 2, image_id: second_id.into(), bbox: bbox(JACKET), color_index: 1 },
    ]
}

pub fn portrait_detector() -> FixtureDetector {
    let mut d = FixtureDetector::default();
    for (i, layout) in LAYOUTS.iter().enumerate() {
        let key = file_name(i);
        if layout.face_visible {
            d.add(key.clone(), "face", bbox(FACE), 0.92);
        }
        if i == 2 {
            d.add(key.clone(), "face", bbox(SPURIOUS_FACE), 0.20);
        }
        d.add(key.clone(), "hair color", bbox(HAIR_BOX), 0.81);
        let jacket = bbox(if layout.big_jacket { BIG_JACKET } else { JACKET });
        d.add(key.clone(), "black leather jacket", jacket, 0.74);
        d.add(key.clone(), "black striped jacket", jacket, 0.66);
        if layout.necklace {
            d.add(key, "necklace", bbox(NECKLACE), 0.88);
        }
    }
    d
}

pub fn portrait_fixture() -> PortraitFixture {
    let images: Vec<SourceImage> = (0..LAYOUTS.len())
        .map(|i| SourceImage::new(format!("img-{:04}", i + 1), render(i)).named(file_name(i)))
        .collect();
    let regions = regions_for(&images[0].id, &images[1].id);
    let expected_folders = BTreeMap::from([
        ("base".to_string(), 7),
        ("face".to_string(), 6),
        ("hair color".to_string(), 7),
        ("black leather jacket".to_string(), 3),
        ("black striped jacket".to_string(), 3),
    ]);
    PortraitFixture { images, regions, spec: vincent_spec(), detector: portrait_detector(), expected_folders }
}

/// Builds the portrait dataset under `root` with the deterministic backends.
pub fn build_portrait_dataset(fixture: &PortraitFixture, root: &std::path::Path) -> Result<BuildReport, DatasetError> {
    let backends = AugmentBackends {
        detector: &fixture.detector,
        embedder: &HashEmbedder::default(),
        inpainter: &MeanFillInpainter,
        captioner: &PaletteCaptioner,
        rewriter: &RuleRewriter,
    };
    build_dataset(&fixture.images, &fixture.regions, &fixture.spec, backends, &Thresholds::default(), root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sizes() {
        assert!(bbox(JACKET).area_fraction() < 0.40);
        assert!(bbox(BIG_JACKET).area_fraction() >= 0.40);
        for r in [FACE, HAIR_BOX, JACKET] {
            let p = bbox(r).to_pixels(SIDE, SIDE);
            assert!(p.width >= 64 && p.height >= 64, "{r:?}");
        }
    }

    #[test]
    fn renders_are_distinct() {
        let imgs: Vec<_> = (0..7).map(render).collect();
        for i in 0..7 {
            for j in i + 1..7 {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }
}
