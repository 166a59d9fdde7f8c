//! Raster helpers: identified images, crops, masks and colour summaries.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::geometry::{BBox, PixelRect};

/// An image together with the identifier it is known by in a project.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub id: String,
    /// Original upload name, when known. Fixture backends may key on it.
    pub name: Option<String>,
    pub pixels: RgbImage,
}

impl SourceImage {
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Self {
        Self { id: id.into(), name: None, pixels }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

pub fn crop(image: &RgbImage, bbox: &BBox) -> RgbImage {
    let r = bbox.to_pixels(image.width(), image.height());
    image::imageops::crop_imm(image, r.x, r.y, r.width.max(1), r.height.max(1)).to_image()
}

/// Boolean pixel mask with the same dimensions as the image it applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; (width as usize) * (height as usize)] }
    }

    pub fn union_of(width: u32, height: u32, rects: impl IntoIterator<Item = PixelRect>) -> Self {
        let mut m = Self::empty(width, height);
        for r in rects {
            m.fill(r);
        }
        m
    }

    pub fn fill(&mut self, r: PixelRect) {
        for y in r.y..(r.y + r.height).min(self.height) {
            for x in r.x..(r.x + r.width).min(self.width) {
                self.bits[(y * self.width + x) as usize] = true;
            }
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

pub fn mean_color(image: &RgbImage) -> [f64; 3] {
    let n = (image.width() as f64 * image.height() as f64).max(1.0);
    let mut acc = [0.0; 3];
    for p in image.pixels() {
        for c in 0..3 {
            acc[c] += p[c] as f64;
        }
    }
    acc.map(|v| v / n)
}

const PALETTE: [(&str, [u8; 3]); 12] = [
    ("black", [20, 20, 20]),
    ("dark gray", [80, 80, 80]),
    ("gray", [140, 140, 140]),
    ("white", [235, 235, 235]),
    ("red", [200, 40, 40]),
    ("brown", [120, 70, 35]),
    ("orange", [230, 140, 40]),
    ("yellow", [230, 220, 60]),
    ("green", [50, 160, 70]),
    ("blue", [50, 90, 200]),
    ("purple", [130, 60, 170]),
    ("pink", [230, 160, 170]),
];

pub fn color_name(rgb: [u8; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by_key(|(_, p)| (0..3).map(|c| (p[c] as i32 - rgb[c] as i32).pow(2)).sum::<i32>())
        .map(|(n, _)| *n)
        .expect("palette is non-empty")
}

/// Named colours covering the image, most frequent first.
pub fn dominant_colors(image: &RgbImage, limit: usize) -> Vec<&'static str> {
    let mut counts: Vec<(&'static str, usize)> = Vec::new();
    for p in image.pixels() {
        let name = color_name(p.0);
        match counts.iter_mut().find(|(n, _)| *n == name) {
            Some((_, c)) => *c += 1,
            None => counts.push((name, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    counts.into_iter().take(limit).map(|(n, _)| n).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// First eight bytes of the SHA-256 of `bytes`, as a seed.
pub fn seed_from(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, image::ImageError> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, image::ImageError> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_matches_pixel_rect() {
        let img = solid(100, 50, [1, 2, 3]);
        let c = crop(&img, &BBox::new(0.1, 0.2, 0.6, 1.0).unwrap());
        assert_eq!(c.dimensions(), (50, 40));
    }

    #[test]
    fn mask_union() {
        let m = Mask::union_of(
            10,
            10,
            [PixelRect { x: 0, y: 0, width: 2, height: 2 }, PixelRect { x: 1, y: 1, width: 2, height: 2 }],
        );
        assert_eq!(m.count(), 7);
        assert!(m.get(2, 2));
        assert!(!m.get(3, 3));
    }

    #[test]
    fn colors() {
        assert_eq!(color_name([0, 0, 0]), "black");
        assert_eq!(color_name([240, 240, 240]), "white");
        let mut img = solid(4, 4, [20, 20, 20]);
        img.put_pixel(0, 0, Rgb([200, 40, 40]));
        assert_eq!(dominant_colors(&img, 2), vec!["black", "red"]);
    }

    #[test]
    fn png_round_trip() {
        let img = solid(3, 2, [9, 8, 7]);
        assert_eq!(decode_image(&encode_png(&img)).unwrap(), img);
        assert!(decode_image(b"not an image").is_err());
    }
}
