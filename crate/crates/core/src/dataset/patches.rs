//! Fixed-size labeled patches, class rebalancing and the on-disk patch cache.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{ChannelId, ChannelImage};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};

/// Where a patch came from: image index within its batch and center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchSource {
    pub image: u32,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    /// Only centers whose whole window lies inside the image.
    Valid,
    /// Every pixel is a center; out-of-range taps mirror about the edge (no edge repeat).
    #[default]
    Reflect,
}

/// Dense `N x C x k x k` patch tensor with one label per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patch_size: usize,
    channel_ids: Vec<ChannelId>,
    data: Vec<f32>,
    labels: Vec<u8>,
    sources: Vec<PatchSource>,
}

impl PatchSet {
    pub fn new(
        patch_size: usize,
        channel_ids: Vec<ChannelId>,
        data: Vec<f32>,
        labels: Vec<u8>,
        sources: Vec<PatchSource>,
    ) -> Result<Self> {
        check_patch_size(patch_size)?;
        let per = patch_size * patch_size * channel_ids.len();
        if data.len() != labels.len() * per || sources.len() != labels.len() {
            return Err(Error::Shape("patch data, labels and sources disagree".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("patch labels must be 0 or 1".into()));
        }
        Ok(PatchSet { patch_size, channel_ids, data, labels, sources })
    }

    pub fn empty(patch_size: usize, channel_ids: Vec<ChannelId>) -> Self {
        PatchSet { patch_size, channel_ids, data: vec![], labels: vec![], sources: vec![] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channel_ids(&self) -> &[ChannelId] {
        &self.channel_ids
    }

    /// Number of values in one patch.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channel_ids.len()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sources(&self) -> &[PatchSource] {
        &self.sources
    }

    /// `(negatives, positives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l != 0).count();
        (self.labels.len() - pos, pos)
    }

    /// Copies the patches at `indices`, in that order (indices may repeat).
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        let n = self.patch_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.patch(i));
        }
        PatchSet {
            patch_size: self.patch_size,
            channel_ids: self.channel_ids.clone(),
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
        }
    }

    pub fn append(&mut self, other: &PatchSet) -> Result<()> {
        if other.patch_size != self.patch_size || other.channel_ids != self.channel_ids {
            return Err(Error::Shape("cannot append patch sets of different layout".into()));
        }
        self.data.extend_from_slice(&other.data);
        self.labels.extend_from_slice(&other.labels);
        self.sources.extend_from_slice(&other.sources);
        Ok(())
    }

    /// Little-endian cache: `PSET`, version, n, size, channel count, f32 data, labels,
    /// then channel codes and `(image, x, y)` sources as u32 triples.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4 + self.len() * 13);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.patch_size as u16).to_le_bytes());
        out.extend_from_slice(&(self.channel_ids.len() as u16).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out.extend(self.channel_ids.iter().map(|c| c.code()));
        for s in &self.sources {
            for v in [s.image, s.x, s.y] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<PatchSet> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::parse(0, "missing PSET magic"));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::parse(4, format!("unsupported patch cache version {version}")));
        }
        let n = r.u64()? as usize;
        let size = r.u16()? as usize;
        let channels = r.u16()? as usize;
        let values = n
            .checked_mul(size * size * channels)
            .ok_or_else(|| Error::parse(r.pos, "patch count overflows"))?;
        let raw = r.take(values.checked_mul(4).ok_or_else(|| Error::parse(r.pos, "overflow"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let labels = r.take(n)?.to_vec();
        let codes_at = r.pos;
        let channel_ids = r
            .take(channels)?
            .iter()
            .map(|&c| ChannelId::from_code(c).ok_or_else(|| Error::parse(codes_at, "bad channel code")))
            .collect::<Result<Vec<_>>>()?;
        let mut sources = Vec::with_capacity(n);
        for _ in 0..n {
            sources.push(PatchSource { image: r.u32()?, x: r.u32()?, y: r.u32()? });
        }
        PatchSet::new(size, channel_ids, data, labels, sources)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"PSET";
const CACHE_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(self.bytes.len(), format!("unexpected end of data, wanted {n} bytes at {}", self.pos))),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
}

fn check_patch_size(size: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {size}")));
    }
    Ok(())
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Writes the `size x size` window centered at `(cx, cy)` of every plane into `out`
/// (channel-major), reflecting at the borders.
pub fn write_patch(img: &ChannelImage, cx: usize, cy: usize, size: usize, out: &mut [f32]) {
    let (w, h) = (img.width(), img.height());
    let half = (size / 2) as isize;
    let mut k = 0;
    for (_, plane) in img.planes() {
        for dy in -half..=half {
            let row = reflect(cy as isize + dy, h) * w;
            for dx in -half..=half {
                out[k] = plane[row + reflect(cx as isize + dx, w)];
                k += 1;
            }
        }
    }
}

fn centers(len: usize, size: usize, stride: usize, border: Border) -> Vec<usize> {
    let half = size / 2;
    match border {
        Border::Valid => (half..len - half).step_by(stride).collect(),
        Border::Reflect => (0..len).step_by(stride).collect(),
    }
}

fn candidate_sources(
    img: &LabeledImage,
    image_id: u32,
    size: usize,
    stride: usize,
    border: Border,
) -> Result<Vec<PatchSource>> {
    check_patch_size(size)?;
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let (w, h) = (img.channels().width(), img.channels().height());
    if border == Border::Valid && size > w.min(h) {
        return Err(Error::Config(format!("patch size {size} exceeds image {w}x{h}")));
    }
    let xs = centers(w, size, stride, border);
    let ys = centers(h, size, stride, border);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| PatchSource { image: image_id, x: x as u32, y: y as u32 }))
        .collect())
}

fn materialize(images: &[LabeledImage], size: usize, sources: Vec<PatchSource>) -> PatchSet {
    let ids = images[0].channels().ids();
    let per = size * size * ids.len();
    let mut data = vec![0.0f32; sources.len() * per];
    let mut labels = Vec::with_capacity(sources.len());
    for (s, out) in sources.iter().zip(data.chunks_exact_mut(per)) {
        let img = &images[s.image as usize];
        write_patch(img.channels(), s.x as usize, s.y as usize, size, out);
        labels.push(img.mask().get(s.x as usize, s.y as usize));
    }
    PatchSet { patch_size: size, channel_ids: ids, data, labels, sources }
}

/// One patch per center on a `stride` grid; the label is the mask value at the center.
pub fn extract_patches(
    img: &LabeledImage,
    image_id: u32,
    size: usize,
    stride: usize,
    border: Border,
) -> Result<PatchSet> {
    let sources = candidate_sources(img, 0, size, stride, border)?;
    let mut ps = materialize(std::slice::from_ref(img), size, sources);
    for s in &mut ps.sources {
        s.image = image_id;
    }
    Ok(ps)
}

/// Positive-to-negative class ratio, written `pos:neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassRatio {
    pub positive: u32,
    pub negative: u32,
}

impl ClassRatio {
    pub fn new(positive: u32, negative: u32) -> Result<Self> {
        if positive == 0 || negative == 0 {
            return Err(Error::Config("ratio terms must be positive".into()));
        }
        Ok(ClassRatio { positive, negative })
    }

    /// `floor(n * pos / (pos + neg))`.
    pub fn positives_in(&self, n: usize) -> usize {
        (n as u128 * self.positive as u128 / (self.positive as u128 + self.negative as u128)) as usize
    }
}

impl fmt::Display for ClassRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.positive, self.negative)
    }
}

impl FromStr for ClassRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (p, n) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("ratio {s:?} must look like 1:3")))?;
        let parse = |t: &str| {
            t.trim().parse::<u32>().map_err(|_| Error::Config(format!("bad ratio term {t:?}")))
        };
        ClassRatio::new(parse(p)?, parse(n)?)
    }
}

fn draw<R: Rng>(pool: &[usize], k: usize, rng: &mut R, class: &str) -> Vec<usize> {
    if k <= pool.len() {
        index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        log::warn!(
            "only {} {class} patches available for {k} requested; sampling with replacement",
            pool.len()
        );
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Indices of a rebalanced, shuffled selection of `target` labels with
/// `ratio.positives_in(target)` positives.
pub fn balanced_indices<R: Rng>(
    labels: &[u8],
    ratio: ClassRatio,
    target: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] != 0);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "both classes are needed for balancing ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let n_pos = ratio.positives_in(target);
    let mut chosen = draw(&pos, n_pos, rng, "positive");
    chosen.extend(draw(&neg, target - n_pos, rng, "negative"));
    chosen.shuffle(rng);
    Ok(chosen)
}

pub fn balance(ps: &PatchSet, ratio: ClassRatio, target: usize, seed: u64) -> Result<PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = balanced_indices(&ps.labels, ratio, target, &mut rng)?;
    Ok(ps.select(&idx))
}

/// Same selection as `balance` over every pixel-centered patch of `images`, without
/// materializing the unselected patches.
pub fn sample_balanced(
    images: &[LabeledImage],
    size: usize,
    border: Border,
    ratio: ClassRatio,
    target: usize,
    seed: u64,
) -> Result<PatchSet> {
    if images.is_empty() {
        return Err(Error::Data("no images to sample from".into()));
    }
    let ids = images[0].channels().ids();
    let mut sources = Vec::new();
    let mut labels = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if img.channels().ids() != ids {
            return Err(Error::Shape("images carry different channel sets".into()));
        }
        for s in candidate_sources(img, i as u32, size, 1, border)? {
            labels.push(img.mask().get(s.x as usize, s.y as usize));
            sources.push(s);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = balanced_indices(&labels, ratio, target, &mut rng)?;
    Ok(materialize(images, size, idx.into_iter().map(|i| sources[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BinaryMask;

    fn ramp_image(w: usize, h: usize) -> LabeledImage {
        let g: Vec<f32> = (0..w * h).map(|i| i as f32).collect();
        let s: Vec<f32> = (0..w * h).map(|i| -(i as f32)).collect();
        let mask: Vec<u8> = (0..w * h).map(|i| ((i * 7) % 5 == 0) as u8).collect();
        let channels =
            ChannelImage::new(w, h, vec![(ChannelId::G, g), (ChannelId::S, s)]).unwrap();
        LabeledImage::new(channels, BinaryMask::new(w, h, mask).unwrap()).unwrap()
    }

    #[test]
    fn valid_patch_counts() {
        let ps = extract_patches(&ramp_image(9, 9), 0, 9, 1, Border::Valid).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.sources()[0], PatchSource { image: 0, x: 4, y: 4 });
        let ps = extract_patches(&ramp_image(11, 11), 0, 9, 1, Border::Valid).unwrap();
        assert_eq!(ps.len(), 9);
        let ps = extract_patches(&ramp_image(11, 11), 0, 9, 2, Border::Valid).unwrap();
        assert_eq!(ps.len(), 4);
    }

    #[test]
    fn bad_sizes_rejected() {
        let img = ramp_image(9, 9);
        assert!(extract_patches(&img, 0, 8, 1, Border::Valid).is_err());
        assert!(extract_patches(&img, 0, 11, 1, Border::Valid).is_err());
        assert!(extract_patches(&img, 0, 3, 0, Border::Valid).is_err());
        assert!(extract_patches(&img, 0, 11, 1, Border::Reflect).is_ok());
    }

    #[test]
    fn patch_content_matches_window() {
        let (w, h) = (13, 11);
        let img = ramp_image(w, h);
        let ps = extract_patches(&img, 3, 5, 1, Border::Valid).unwrap();
        for i in 0..ps.len() {
            let s = ps.sources()[i];
            assert_eq!(s.image, 3);
            let patch = ps.patch(i);
            for c in 0..2 {
                let plane = img.channels().plane_at(c);
                for dy in 0..5 {
                    for dx in 0..5 {
                        let (x, y) = (s.x as usize + dx - 2, s.y as usize + dy - 2);
                        assert_eq!(patch[c * 25 + dy * 5 + dx], plane[y * w + x]);
                    }
                }
            }
            assert_eq!(ps.labels()[i], img.mask().get(s.x as usize, s.y as usize));
        }
    }

    #[test]
    fn reflect_padding_covers_every_pixel() {
        let img = ramp_image(6, 5);
        let ps = extract_patches(&img, 0, 9, 1, Border::Reflect).unwrap();
        assert_eq!(ps.len(), 30);
        for (i, s) in ps.sources().iter().enumerate() {
            assert_eq!(ps.labels()[i], img.mask().get(s.x as usize, s.y as usize));
            // The center tap is the pixel itself.
            assert_eq!(ps.patch(i)[40], img.channels().plane_at(0)[s.y as usize * 6 + s.x as usize]);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
        assert_eq!(reflect(-1, 2), 1);
    }

    fn labels_set(n_pos: usize, n_neg: usize) -> PatchSet {
        let labels: Vec<u8> = (0..n_pos + n_neg).map(|i| (i < n_pos) as u8).collect();
        let data: Vec<f32> = (0..labels.len()).map(|i| i as f32).collect();
        let sources = (0..labels.len() as u32).map(|i| PatchSource { image: 0, x: i, y: 0 }).collect();
        PatchSet::new(1, vec![ChannelId::G], data, labels, sources).unwrap()
    }

    #[test]
    fn balance_counts_follow_ratio() {
        let ratio: ClassRatio = "1:1".parse().unwrap();
        assert_eq!(ratio.positives_in(500_000), 250_000);
        let ratio: ClassRatio = "1:3".parse().unwrap();
        assert_eq!(ratio.positives_in(600_000), 150_000);

        let ps = labels_set(40, 400);
        let out = balance(&ps, ratio, 100, 7).unwrap();
        assert_eq!(out.class_counts(), (75, 25));
        // Scarce class is drawn with replacement.
        let out = balance(&ps, "1:1".parse().unwrap(), 200, 7).unwrap();
        assert_eq!(out.class_counts(), (100, 100));
    }

    #[test]
    fn balance_is_deterministic_and_preserves_content() {
        let ps = labels_set(30, 70);
        let a = balance(&ps, "1:1".parse().unwrap(), 50, 11).unwrap();
        let b = balance(&ps, "1:1".parse().unwrap(), 50, 11).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            let src = a.sources()[i].x as usize;
            assert_eq!(a.patch(i), ps.patch(src));
            assert_eq!(a.labels()[i], ps.labels()[src]);
        }
    }

    #[test]
    fn balance_requires_both_classes() {
        assert!(balance(&labels_set(0, 10), "1:1".parse().unwrap(), 4, 0).is_err());
        assert!(balance(&labels_set(10, 0), "1:1".parse().unwrap(), 4, 0).is_err());
        assert!("0:1".parse::<ClassRatio>().is_err());
        assert!("3".parse::<ClassRatio>().is_err());
    }

    #[test]
    fn sampling_matches_balance_of_full_extraction() {
        let imgs = vec![ramp_image(7, 6), ramp_image(5, 8)];
        let mut full = PatchSet::empty(3, imgs[0].channels().ids());
        for (i, img) in imgs.iter().enumerate() {
            full.append(&extract_patches(img, i as u32, 3, 1, Border::Reflect).unwrap()).unwrap();
        }
        let ratio = "1:2".parse().unwrap();
        let a = balance(&full, ratio, 30, 5).unwrap();
        let b = sample_balanced(&imgs, 3, Border::Reflect, ratio, 30, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_round_trip_and_truncation() {
        let ps = extract_patches(&ramp_image(7, 7), 2, 3, 2, Border::Reflect).unwrap();
        let bytes = ps.to_cache_bytes();
        assert_eq!(&bytes[..4], b"PSET");
        assert_eq!(PatchSet::from_cache_bytes(&bytes).unwrap(), ps);
        assert!(PatchSet::from_cache_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(PatchSet::from_cache_bytes(b"NOPE").is_err());
    }
}
