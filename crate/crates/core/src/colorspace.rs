//! RGB to the ten candidate input channels: R, G, B, H, S, V, l, a, b and gray.
//!
//! Every plane is stored as `f32`. Ranges per channel:
//!
//! | channel        | range          |
//! |----------------|----------------|
//! | R, G, B, Gray  | `[0, 1]`       |
//! | S, V           | `[0, 1]`       |
//! | H              | `[0, 1)`       |
//! | L              | `[0, 100]`     |
//! | A, Bb          | `[-110, 110]`  |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier for one of the ten candidate planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelId {
    R,
    G,
    B,
    H,
    S,
    V,
    L,
    A,
    /// CIE-lab `b`, named `Bb` to keep it apart from RGB blue.
    Bb,
    Gray,
}

impl ChannelId {
    pub const ALL: [ChannelId; 10] = [
        ChannelId::R,
        ChannelId::G,
        ChannelId::B,
        ChannelId::H,
        ChannelId::S,
        ChannelId::V,
        ChannelId::L,
        ChannelId::A,
        ChannelId::Bb,
        ChannelId::Gray,
    ];

    /// Nominal value range `(lo, hi)` used for histogram binning and normalization.
    pub fn nominal_range(self) -> (f32, f32) {
        match self {
            ChannelId::L => (0.0, 100.0),
            ChannelId::A | ChannelId::Bb => (-LAB_AB_LIMIT, LAB_AB_LIMIT),
            _ => (0.0, 1.0),
        }
    }

    /// Stable one-byte code used by the binary file formats.
    pub fn code(self) -> u8 {
        match self {
            ChannelId::R => 0,
            ChannelId::G => 1,
            ChannelId::B => 2,
            ChannelId::H => 3,
            ChannelId::S => 4,
            ChannelId::V => 5,
            ChannelId::L => 6,
            ChannelId::A => 7,
            ChannelId::Bb => 8,
            ChannelId::Gray => 9,
        }
    }

    pub fn from_code(code: u8) -> Option<ChannelId> {
        ChannelId::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::R => "R",
            ChannelId::G => "G",
            ChannelId::B => "B",
            ChannelId::H => "H",
            ChannelId::S => "S",
            ChannelId::V => "V",
            ChannelId::L => "l",
            ChannelId::A => "a",
            ChannelId::Bb => "b",
            ChannelId::Gray => "Gray",
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelId {
    type Err = Error;

    /// Case matters for the single letters that collide: `b` is CIE-lab b, `B` is RGB blue.
    fn from_str(s: &str) -> Result<Self> {
        let id = match s {
            "R" | "r" => ChannelId::R,
            "G" | "g" => ChannelId::G,
            "B" => ChannelId::B,
            "H" | "h" => ChannelId::H,
            "S" | "s" => ChannelId::S,
            "V" | "v" => ChannelId::V,
            "l" | "L" | "I" => ChannelId::L,
            "a" | "A" => ChannelId::A,
            "b" | "Bb" | "bb" => ChannelId::Bb,
            "Gray" | "gray" | "GRAY" => ChannelId::Gray,
            other => return Err(Error::Config(format!("unknown channel id {other:?}"))),
        };
        Ok(id)
    }
}

/// Parses a comma separated channel list such as `a,G,S`.
pub fn parse_channel_list(s: &str) -> Result<Vec<ChannelId>> {
    let ids = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(ChannelId::from_str)
        .collect::<Result<Vec<_>>>()?;
    validate_ids(&ids)?;
    Ok(ids)
}

fn validate_ids(ids: &[ChannelId]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Config("channel list is empty".into()));
    }
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(Error::Config(format!("channel {id} listed twice")));
        }
    }
    Ok(())
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        RgbImage::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }
}

/// Planar stack of real-valued channels sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImage {
    width: usize,
    height: usize,
    planes: Vec<(ChannelId, Vec<f32>)>,
}

impl ChannelImage {
    pub fn new(width: usize, height: usize, planes: Vec<(ChannelId, Vec<f32>)>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {width}x{height}")));
        }
        for (id, plane) in &planes {
            if plane.len() != width * height {
                return Err(Error::Shape(format!(
                    "plane {id} has {} values, expected {}",
                    plane.len(),
                    width * height
                )));
            }
        }
        Ok(ChannelImage { width, height, planes })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn ids(&self) -> Vec<ChannelId> {
        self.planes.iter().map(|(id, _)| *id).collect()
    }

    pub fn planes(&self) -> &[(ChannelId, Vec<f32>)] {
        &self.planes
    }

    pub fn plane(&self, id: ChannelId) -> Option<&[f32]> {
        self.planes.iter().find(|(p, _)| *p == id).map(|(_, v)| v.as_slice())
    }

    pub fn plane_at(&self, index: usize) -> &[f32] {
        &self.planes[index].1
    }

    pub fn planes_mut(&mut self) -> &mut [(ChannelId, Vec<f32>)] {
        &mut self.planes
    }

    /// Returns a new image holding only `ids`, in that order.
    pub fn select(&self, ids: &[ChannelId]) -> Result<ChannelImage> {
        validate_ids(ids)?;
        let planes = ids
            .iter()
            .map(|id| {
                self.plane(*id)
                    .map(|p| (*id, p.to_vec()))
                    .ok_or_else(|| Error::Shape(format!("channel {id} not present")))
            })
            .collect::<Result<Vec<_>>>()?;
        ChannelImage::new(self.width, self.height, planes)
    }
}

/// Clip applied to CIE-lab a and b.
pub const LAB_AB_LIMIT: f32 = 110.0;

// D65 reference white, 2 degree observer.
const WHITE_X: f64 = 0.95047;
const WHITE_Y: f64 = 1.0;
const WHITE_Z: f64 = 1.08883;

/// Hexcone HSV of one pixel, hue normalized to `[0, 1)`.
pub fn hsv_pixel(rgb: [u8; 3]) -> (f64, f64, f64) {
    let r = rgb[0] as f64 / 255.0;
    let g = rgb[1] as f64 / 255.0;
    let b = rgb[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta <= 0.0 {
        return (0.0, 0.0, v);
    }
    let s = delta / max;
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = sector / 6.0;
    if h >= 1.0 {
        h -= 1.0;
    }
    (h, s, v)
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIE-lab of one sRGB pixel (D65). `a` and `b` are clipped to +-110.
pub fn lab_pixel(rgb: [u8; 3]) -> (f64, f64, f64) {
    let r = srgb_to_linear(rgb[0]);
    let g = srgb_to_linear(rgb[1]);
    let b = srgb_to_linear(rgb[2]);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let fx = lab_f(x / WHITE_X);
    let fy = lab_f(y / WHITE_Y);
    let fz = lab_f(z / WHITE_Z);
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    let limit = LAB_AB_LIMIT as f64;
    let a = (500.0 * (fx - fy)).clamp(-limit, limit);
    let bb = (200.0 * (fy - fz)).clamp(-limit, limit);
    (l, a, bb)
}

/// Rec.601 luma scaled to `[0, 1]`.
pub fn gray_pixel(rgb: [u8; 3]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / 255.0
}

fn map_planes<const N: usize>(
    img: &RgbImage,
    ids: [ChannelId; N],
    f: impl Fn([u8; 3]) -> [f64; N],
) -> ChannelImage {
    let mut planes: Vec<Vec<f32>> = (0..N).map(|_| Vec::with_capacity(img.pixels.len())).collect();
    for px in &img.pixels {
        let vals = f(*px);
        for (plane, v) in planes.iter_mut().zip(vals) {
            plane.push(v as f32);
        }
    }
    ChannelImage {
        width: img.width,
        height: img.height,
        planes: ids.into_iter().zip(planes).collect(),
    }
}

pub fn to_hsv(img: &RgbImage) -> ChannelImage {
    map_planes(img, [ChannelId::H, ChannelId::S, ChannelId::V], |px| {
        let (h, s, v) = hsv_pixel(px);
        [h, s, v]
    })
}

pub fn to_cielab(img: &RgbImage) -> ChannelImage {
    map_planes(img, [ChannelId::L, ChannelId::A, ChannelId::Bb], |px| {
        let (l, a, b) = lab_pixel(px);
        [l, a, b]
    })
}

pub fn to_gray(img: &RgbImage) -> ChannelImage {
    map_planes(img, [ChannelId::Gray], |px| [gray_pixel(px)])
}

pub fn to_rgb_planes(img: &RgbImage) -> ChannelImage {
    map_planes(img, [ChannelId::R, ChannelId::G, ChannelId::B], |px| {
        px.map(|c| c as f64 / 255.0)
    })
}

/// Computes the requested planes in the requested order. Each color space is
/// converted at most once, and only if one of its channels was asked for.
pub fn extract_channels(img: &RgbImage, ids: &[ChannelId]) -> Result<ChannelImage> {
    validate_ids(ids)?;
    let wants = |group: &[ChannelId]| ids.iter().any(|id| group.contains(id));
    let mut pool: Vec<(ChannelId, Vec<f32>)> = Vec::new();
    if wants(&[ChannelId::R, ChannelId::G, ChannelId::B]) {
        pool.extend(to_rgb_planes(img).planes);
    }
    if wants(&[ChannelId::H, ChannelId::S, ChannelId::V]) {
        pool.extend(to_hsv(img).planes);
    }
    if wants(&[ChannelId::L, ChannelId::A, ChannelId::Bb]) {
        pool.extend(to_cielab(img).planes);
    }
    if wants(&[ChannelId::Gray]) {
        pool.extend(to_gray(img).planes);
    }
    let planes = ids
        .iter()
        .map(|id| {
            let pos = pool.iter().position(|(p, _)| p == id).expect("plane computed above");
            (*id, std::mem::take(&mut pool[pos].1))
        })
        .collect();
    Ok(ChannelImage { width: img.width, height: img.height, planes })
}

/// All ten planes in [`ChannelId::ALL`] order.
pub fn all_channels(img: &RgbImage) -> ChannelImage {
    extract_channels(img, &ChannelId::ALL).expect("ALL has no duplicates")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(rgb: [u8; 3]) -> RgbImage {
        RgbImage::filled(1, 1, rgb).unwrap()
    }

    fn value(img: &ChannelImage, id: ChannelId) -> f32 {
        img.plane(id).unwrap()[0]
    }

    #[test]
    fn hsv_pure_red_and_gray() {
        let red = to_hsv(&px([255, 0, 0]));
        assert_eq!(value(&red, ChannelId::H), 0.0);
        assert_eq!(value(&red, ChannelId::S), 1.0);
        assert_eq!(value(&red, ChannelId::V), 1.0);

        let gray = to_hsv(&px([128, 128, 128]));
        assert_eq!(value(&gray, ChannelId::H), 0.0);
        assert_eq!(value(&gray, ChannelId::S), 0.0);
        assert!((value(&gray, ChannelId::V) - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn hsv_matches_reference_conversion() {
        // Python colorsys.rgb_to_hsv(0, 128/255, 1.0)
        let (h, s, v) = hsv_pixel([0, 128, 255]);
        assert!((h - 0.5830065359477125).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lab_white_black_red() {
        let (l, a, b) = lab_pixel([255, 255, 255]);
        assert!((l - 100.0).abs() < 1e-3, "L={l}");
        assert!(a.abs() < 0.5 && b.abs() < 0.5, "a={a} b={b}");

        assert_eq!(lab_pixel([0, 0, 0]), (0.0, 0.0, 0.0));

        // skimage.color.rgb2lab reference values
        let refs: [([u8; 3], [f64; 3]); 3] = [
            ([255, 0, 0], [53.2405879437449, 80.0923082256922, 67.2027510444287]),
            ([0, 128, 255], [54.7145387915421, 18.773463797434996, -70.91376436569962]),
            ([100, 150, 200], [60.507096751353515, -2.7896842082391626, -30.926769780777907]),
        ];
        for (rgb, want) in refs {
            let (l, a, b) = lab_pixel(rgb);
            for (got, want) in [l, a, b].into_iter().zip(want) {
                assert!((got - want).abs() < 0.05, "{rgb:?}: got {got}, want {want}");
            }
        }
    }

    #[test]
    fn gray_luma() {
        assert_eq!(gray_pixel([255, 255, 255]), 1.0);
        assert_eq!(gray_pixel([0, 0, 0]), 0.0);
        let want = (0.299 * 100.0 + 0.587 * 150.0 + 0.114 * 200.0) / 255.0;
        assert!((gray_pixel([100, 150, 200]) - want).abs() < 1e-15);
    }

    #[test]
    fn extract_returns_requested_order() {
        let img = RgbImage::new(2, 1, vec![[10, 200, 30], [255, 0, 0]]).unwrap();
        let out = extract_channels(&img, &[ChannelId::A, ChannelId::G, ChannelId::S]).unwrap();
        assert_eq!(out.ids(), vec![ChannelId::A, ChannelId::G, ChannelId::S]);
        let all = all_channels(&img);
        for id in [ChannelId::A, ChannelId::G, ChannelId::S] {
            assert_eq!(out.plane(id), all.plane(id));
        }
    }

    #[test]
    fn extract_rejects_empty_and_duplicates() {
        let img = px([1, 2, 3]);
        assert!(extract_channels(&img, &[]).is_err());
        assert!(extract_channels(&img, &[ChannelId::R, ChannelId::R]).is_err());
    }

    #[test]
    fn gray_ramp_has_monotone_lightness() {
        let mut prev = -1.0;
        for v in 0..=255u8 {
            let (l, _, _) = lab_pixel([v, v, v]);
            assert!(l > prev, "L not increasing at {v}");
            prev = l;
        }
    }

    #[test]
    fn channel_names_round_trip() {
        for id in ChannelId::ALL {
            assert_eq!(id.name().parse::<ChannelId>().unwrap(), id);
            assert_eq!(ChannelId::from_code(id.code()), Some(id));
        }
        assert_eq!(parse_channel_list("a,G,S").unwrap(), vec![ChannelId::A, ChannelId::G, ChannelId::S]);
    }

    fn check_ranges(rgb: [u8; 3]) {
        let all = all_channels(&px(rgb));
        for (id, plane) in all.planes() {
            let v = plane[0];
            let (lo, hi) = id.nominal_range();
            assert!(v >= lo && v <= hi, "{id} = {v} out of range for {rgb:?}");
            if *id == ChannelId::H {
                assert!(v < 1.0);
            }
        }
        let (_, s, _) = hsv_pixel(rgb);
        let achromatic = rgb[0] == rgb[1] && rgb[1] == rgb[2];
        assert_eq!(s.abs() < 1e-9, achromatic, "{rgb:?}");
    }

    #[test]
    fn corner_colors_respect_ranges() {
        for r in [0u8, 255] {
            for g in [0u8, 255] {
                for b in [0u8, 255] {
                    check_ranges([r, g, b]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn random_colors_respect_ranges(r: u8, g: u8, b: u8) {
            check_ranges([r, g, b]);
        }
    }
}
