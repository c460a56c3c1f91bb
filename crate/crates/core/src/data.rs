//! Fundus samples: DRIVE-style directory loading, synthetic vessel images,
//! patch extraction and 8-bit mask files.
//!
//! A DRIVE-style tree has three sibling folders, `images/`, `labels/` and
//! `masks/`. Files are paired by the first run of digits in their names
//! (`21_training.tif`, `21_manual1.gif`, `21_training_mask.gif`), samples are
//! ordered by that number, and the first half is the training split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

const RASTER_EXTENSIONS: [&str; 4] = ["png", "gif", "tif", "tiff"];

/// One image with its vessel label and field-of-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusSample {
    pub id: String,
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, 1 on vessel pixels.
    pub label: Tensor,
    /// `[H, W]`, 1 inside the field of view.
    pub fov: Tensor,
}

impl FundusSample {
    pub fn new(id: impl Into<String>, image: Tensor, label: Tensor, fov: Tensor) -> Result<Self> {
        let id = id.into();
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::Data(format!(
                "sample {id}: image must be [C, H, W], got {s:?}"
            )));
        }
        for (name, t) in [("label", &label), ("fov", &fov)] {
            if t.shape() != &s[1..] {
                return Err(Error::Data(format!(
                    "sample {id}: {name} extent {:?} differs from image extent {:?}",
                    t.shape(),
                    &s[1..]
                )));
            }
            if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("sample {id}: {name} is not binary")));
            }
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "sample {id}: image values outside [0, 1]"
            )));
        }
        Ok(FundusSample {
            id,
            image,
            label,
            fov,
        })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> FundusSample {
        let (h, w) = (self.height(), self.width());
        self.remap(h, w, |y, x| (y, w - 1 - x))
    }

    /// Rotation by 90° counter-clockwise.
    pub fn rotate90(&self) -> FundusSample {
        let (h, w) = (self.height(), self.width());
        self.remap(w, h, |y, x| (x, w - 1 - y))
    }

    /// Builds an `oh × ow` sample whose pixel `(y, x)` is this sample's
    /// pixel `src(y, x)`.
    fn remap(
        &self,
        oh: usize,
        ow: usize,
        src: impl Fn(usize, usize) -> (usize, usize),
    ) -> FundusSample {
        let (c, w) = (self.channels(), self.width());
        let plane = |t: &[f64], off: usize| -> Vec<f64> {
            (0..oh * ow)
                .map(|i| {
                    let (sy, sx) = src(i / ow, i % ow);
                    t[off + sy * w + sx]
                })
                .collect()
        };
        let hw = self.height() * w;
        let image: Vec<f64> = (0..c)
            .flat_map(|ci| plane(self.image.data(), ci * hw))
            .collect();
        FundusSample {
            id: self.id.clone(),
            image: Tensor::from_raw(vec![c, oh, ow], image),
            label: Tensor::from_raw(vec![oh, ow], plane(self.label.data(), 0)),
            fov: Tensor::from_raw(vec![oh, ow], plane(self.fov.data(), 0)),
        }
    }

    /// The eight flips and right-angle rotations of this sample, identity
    /// first.
    pub fn dihedral(&self) -> Vec<FundusSample> {
        let mut out = Vec::with_capacity(8);
        for base in [self.clone(), self.flip_horizontal()] {
            let mut cur = base;
            for _ in 0..4 {
                let next = cur.rotate90();
                out.push(cur);
                cur = next;
            }
        }
        out
    }
}

/// Replaces every sample by its eight dihedral variants.
pub fn augment(samples: &[FundusSample]) -> Vec<FundusSample> {
    samples.iter().flat_map(FundusSample::dihedral).collect()
}

/// First run of ASCII digits in a file name.
pub fn numeric_id(name: &str) -> Option<u64> {
    let start = name.find(|c: char| c.is_ascii_digit())?;
    let digits: String = name[start..]
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}

fn index_folder(dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if !path.is_file() || !RASTER_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let Some(id) = numeric_id(name) else { continue };
        if let Some(prev) = out.insert(id, path.clone()) {
            return Err(Error::Data(format!(
                "{} and {} share sample number {id}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn open_raster(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Green channel of a colour image, or the luminance of a grey one, as
/// `[1, H, W]` in `[0, 1]`.
pub fn read_fundus(path: &Path) -> Result<Tensor> {
    let img = open_raster(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| f64::from(p[1]) / 255.0)
            .collect()
    } else {
        img.to_luma8()
            .pixels()
            .map(|p| f64::from(p[0]) / 255.0)
            .collect()
    };
    Tensor::new(&[1, h, w], data)
}

/// An 8-bit raster whose every byte is 0 or 255, as a `{0, 1}` `[H, W]`.
fn read_binary(path: &Path) -> Result<Tensor> {
    let img = open_raster(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if let Some(p) = img.pixels().find(|p| p[0] != 0 && p[0] != 255) {
        return Err(Error::Data(format!(
            "{} is not binary: found byte {}",
            path.display(),
            p[0]
        )));
    }
    let data = img.pixels().map(|p| f64::from(p[0] / 255)).collect();
    Tensor::new(&[h, w], data)
}

/// Loads every sample of a DRIVE-style tree, ordered by sample number.
pub fn load_drive_layout(root: &Path) -> Result<Vec<FundusSample>> {
    let folders = ["images", "labels", "masks"];
    let mut indexed = Vec::with_capacity(3);
    for f in folders {
        let dir = root.join(f);
        if !dir.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", dir.display())));
        }
        indexed.push(index_folder(&dir)?);
    }
    let ids: std::collections::BTreeSet<u64> =
        indexed.iter().flat_map(|m| m.keys().copied()).collect();
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no raster files under {}",
            root.display()
        )));
    }
    let mut triplets = Vec::with_capacity(ids.len());
    for &id in &ids {
        let mut paths = Vec::with_capacity(3);
        for (folder, map) in folders.iter().zip(&indexed) {
            match map.get(&id) {
                Some(p) => paths.push(p.clone()),
                None => {
                    return Err(Error::MissingFile {
                        sample: id.to_string(),
                        path: root.join(folder),
                    })
                }
            }
        }
        triplets.push((id, paths));
    }
    let loaded = par::map_indexed(triplets.len(), |i| {
        let (id, paths) = &triplets[i];
        let image = read_fundus(&paths[0])?;
        let label = read_binary(&paths[1])?;
        let fov = read_binary(&paths[2])?;
        FundusSample::new(id.to_string(), image, label, fov)
    });
    loaded.into_iter().collect()
}

/// Splits an ordered sample list in half: the first half trains.
pub fn train_test_split(mut samples: Vec<FundusSample>) -> (Vec<FundusSample>, Vec<FundusSample>) {
    let test = samples.split_off(samples.len().div_ceil(2));
    (samples, test)
}

/// One drawn centre line, as pixel coordinates `(y, x)` in drawing order.
pub type Branch = Vec<(usize, usize)>;

/// Synthetic vessel image number `index` of the stream seeded by `seed`,
/// with the centre line of every branch.
///
/// Branches are random walks with unit steps and a slowly drifting
/// heading that reflect off the frame. The first starts anywhere, later
/// ones fork from a point of an earlier branch. Each branch is stamped with
/// a square brush of its width. The image is a smooth background, darker
/// on vessels, plus Gaussian noise.
pub fn synthetic_sample(
    seed: u64,
    index: usize,
    size: usize,
) -> Result<(FundusSample, Vec<Branch>)> {
    if size < 16 || !size.is_multiple_of(8) {
        return Err(Error::config(format!(
            "synthetic size must be at least 16 and divisible by 8, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = size as f64;
    let hi = n - 1.0;

    let mut label = vec![0.0; size * size];
    let mut branches: Vec<Branch> = Vec::new();
    let count = rng.gen_range(2..=4);
    for _ in 0..count {
        let (mut y, mut x) = match branches.choose(&mut rng) {
            Some(b) => {
                let &(py, px) = b.choose(&mut rng).expect("branches are never empty");
                (py as f64, px as f64)
            }
            None => (rng.gen_range(0.0..hi), rng.gen_range(0.0..hi)),
        };
        let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let steps = (n * rng.gen_range(0.7..1.1)) as usize;
        let width: i64 = rng.gen_range(1..=3);
        let mut line: Branch = Vec::with_capacity(steps + 1);
        line.push((y.round() as usize, x.round() as usize));
        for _ in 0..steps {
            heading += rng.gen_range(-0.25..0.25);
            y += heading.sin();
            x += heading.cos();
            if !(0.0..=hi).contains(&y) {
                y = if y < 0.0 { -y } else { 2.0 * hi - y };
                heading = -heading;
            }
            if !(0.0..=hi).contains(&x) {
                x = if x < 0.0 { -x } else { 2.0 * hi - x };
                heading = std::f64::consts::PI - heading;
            }
            let p = (y.round() as usize, x.round() as usize);
            if line.last() != Some(&p) {
                line.push(p);
            }
        }
        let lo = -(width - 1) / 2;
        for &(py, px) in &line {
            for dy in lo..lo + width {
                for dx in lo..lo + width {
                    let (qy, qx) = (py as i64 + dy, px as i64 + dx);
                    if (0..size as i64).contains(&qy) && (0..size as i64).contains(&qx) {
                        label[qy as usize * size + qx as usize] = 1.0;
                    }
                }
            }
        }
        branches.push(line);
    }

    let level = rng.gen_range(0.45..0.65);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.02..0.06),
                rng.gen_range(0.5..2.0) * std::f64::consts::TAU / n,
                rng.gen_range(0.5..2.0) * std::f64::consts::TAU / n,
                rng.gen_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let contrast = rng.gen_range(0.15..0.3);
    let noise = Tensor::rand_normal(&[size * size], 0.02, &mut rng);
    let image: Vec<f64> = (0..size * size)
        .map(|i| {
            let (yy, xx) = ((i / size) as f64, (i % size) as f64);
            let bg: f64 = level
                + waves
                    .iter()
                    .map(|w| w[0] * (w[1] * xx + w[2] * yy + w[3]).cos())
                    .sum::<f64>();
            (bg - contrast * label[i] + noise.data()[i]).clamp(0.0, 1.0)
        })
        .collect();

    let sample = FundusSample::new(
        format!("{:04}", index + 1),
        Tensor::from_raw(vec![1, size, size], image),
        Tensor::from_raw(vec![size, size], label),
        Tensor::ones(&[size, size]),
    )?;
    Ok((sample, branches))
}

/// `count` synthetic samples from one seed; sample `i` depends only on
/// `(seed, i, size)`.
pub fn generate_synthetic(seed: u64, count: usize, size: usize) -> Result<Vec<FundusSample>> {
    par::map_indexed(count, |i| synthetic_sample(seed, i, size).map(|(s, _)| s))
        .into_iter()
        .collect()
}

/// Sliding-window crops of image, label and field of view, row-major over
/// window positions.
pub fn extract_patches(s: &FundusSample, size: usize, stride: usize) -> Result<Vec<FundusSample>> {
    let (c, h, w) = (s.channels(), s.height(), s.width());
    if size == 0 || stride == 0 {
        return Err(Error::config("patch size and stride must be positive"));
    }
    if size > h.min(w) {
        return Err(Error::config(format!(
            "patch size {size} exceeds the {h}×{w} sample {}",
            s.id
        )));
    }
    let (ny, nx) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let crop = |t: &[f64], planes: usize, y0: usize, x0: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(planes * size * size);
        for p in 0..planes {
            for y in y0..y0 + size {
                let row = p * h * w + y * w;
                out.extend_from_slice(&t[row + x0..row + x0 + size]);
            }
        }
        out
    };
    let mut out = Vec::with_capacity(ny * nx);
    for py in 0..ny {
        for px in 0..nx {
            let (y0, x0) = (py * stride, px * stride);
            out.push(FundusSample {
                id: format!("{}@{y0},{x0}", s.id),
                image: Tensor::from_raw(vec![c, size, size], crop(s.image.data(), c, y0, x0)),
                label: Tensor::from_raw(vec![size, size], crop(s.label.data(), 1, y0, x0)),
                fov: Tensor::from_raw(vec![size, size], crop(s.fov.data(), 1, y0, x0)),
            });
        }
    }
    Ok(out)
}

/// Patches of every sample, in sample order.
pub fn patch_set(
    samples: &[FundusSample],
    size: usize,
    stride: usize,
) -> Result<Vec<FundusSample>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(extract_patches(s, size, stride)?);
    }
    Ok(out)
}

/// Quantisation used by mask files: `⌊p·255 + ½⌋`.
pub fn mask_byte(p: f64) -> u8 {
    (p * 255.0 + 0.5).floor() as u8
}

fn write_gray(path: &Path, h: usize, w: usize, bytes: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extent");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes an `[H, W]` map in `[0, 1]` as an 8-bit greyscale PNG.
pub fn save_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("mask must be [H, W], got {s:?}")));
    }
    if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!("mask value {v} outside [0, 1]")));
    }
    write_gray(
        path,
        s[0],
        s[1],
        mask.data().iter().map(|&p| mask_byte(p)).collect(),
    )
}

/// Reads an 8-bit mask back as `byte / 255`.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = open_raster(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(
        &[h, w],
        img.pixels()
            .map(|p: &Luma<u8>| f64::from(p[0]) / 255.0)
            .collect(),
    )
}

/// Writes samples as a DRIVE-style tree under `root`, numbering files
/// from 1 in list order.
pub fn write_drive_layout(samples: &[FundusSample], root: &Path) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.channels() != 1 {
            return Err(Error::Data(format!(
                "sample {} has {} channels, expected 1",
                s.id,
                s.channels()
            )));
        }
        let (h, w) = (s.height(), s.width());
        let n = i + 1;
        let bytes = |t: &Tensor| t.data().iter().map(|&p| mask_byte(p)).collect::<Vec<u8>>();
        write_gray(
            &root.join(format!("images/{n:02}_image.png")),
            h,
            w,
            bytes(&s.image),
        )?;
        write_gray(
            &root.join(format!("labels/{n:02}_label.png")),
            h,
            w,
            bytes(&s.label),
        )?;
        write_gray(
            &root.join(format!("masks/{n:02}_mask.png")),
            h,
            w,
            bytes(&s.fov),
        )?;
    }
    Ok(())
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    DriveLayout {
        path: PathBuf,
    },
    Synthetic {
        seed: u64,
        count: usize,
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A source, one of its halves, and how to cut it into patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: Source,
    pub split: Split,
    /// `(size, stride)`; `None` keeps whole images.
    pub patching: Option<(usize, usize)>,
}

impl DatasetSpec {
    /// Checks that patches survive `depth` halvings of the network.
    pub fn validate(&self, depth: usize) -> Result<()> {
        if let Some((size, stride)) = self.patching {
            let div = 1usize << depth;
            if size == 0 || stride == 0 || size % div != 0 {
                return Err(Error::config(format!(
                    "patch size {size} must be a positive multiple of {div} (stride {stride})"
                )));
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<FundusSample>> {
        let all = match &self.source {
            Source::DriveLayout { path } => load_drive_layout(path)?,
            Source::Synthetic { seed, count, size } => generate_synthetic(*seed, *count, *size)?,
        };
        let (train, test) = train_test_split(all);
        let picked = match self.split {
            Split::Train => train,
            Split::Test => test,
        };
        match self.patching {
            Some((size, stride)) => patch_set(&picked, size, stride),
            None => Ok(picked),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> FundusSample {
        FundusSample::new(
            "s",
            Tensor::from_fn(&[2, h, w], |i| (i % 7) as f64 / 7.0),
            Tensor::from_fn(&[h, w], |i| (i % 3 == 0) as u8 as f64),
            Tensor::from_fn(&[h, w], |i| (i % 5 != 0) as u8 as f64),
        )
        .unwrap()
    }

    #[test]
    fn numeric_ids() {
        assert_eq!(numeric_id("21_training.tif"), Some(21));
        assert_eq!(numeric_id("img_007_mask.png"), Some(7));
        assert_eq!(numeric_id("mask.png"), None);
    }

    #[test]
    fn full_size_patch_is_the_sample() {
        let s = sample(16, 16);
        let p = extract_patches(&s, 16, 4).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(
            (&p[0].image, &p[0].label, &p[0].fov),
            (&s.image, &s.label, &s.fov)
        );
    }

    #[test]
    fn patch_count_formula() {
        let s = sample(20, 27);
        let p = extract_patches(&s, 8, 3).unwrap();
        assert_eq!(p.len(), ((20 - 8) / 3 + 1) * ((27 - 8) / 3 + 1));
        assert!(extract_patches(&s, 21, 1).is_err());
    }

    #[test]
    fn tiling_patches_reassemble() {
        let s = sample(64, 64);
        let p = extract_patches(&s, 32, 32).unwrap();
        assert_eq!(p.len(), 4);
        let mut label = vec![0.0; 64 * 64];
        for (k, patch) in p.iter().enumerate() {
            let (y0, x0) = (32 * (k / 2), 32 * (k % 2));
            for y in 0..32 {
                for x in 0..32 {
                    label[(y0 + y) * 64 + x0 + x] = patch.label.data()[y * 32 + x];
                }
            }
        }
        assert_eq!(label, s.label.data());
    }

    #[test]
    fn rotations_compose_to_identity() {
        let s = sample(5, 8);
        let r = s.rotate90();
        assert_eq!((r.height(), r.width()), (8, 5));
        assert_eq!(r.rotate90().rotate90().rotate90(), s);
        assert_eq!(s.flip_horizontal().flip_horizontal(), s);
        assert_eq!(s.dihedral().len(), 8);
    }

    #[test]
    fn mask_rounding() {
        assert_eq!(mask_byte(0.5), 128);
        assert_eq!(mask_byte(0.0), 0);
        assert_eq!(mask_byte(1.0), 255);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(generate_synthetic(0, 1, 12).is_err());
        assert!(generate_synthetic(0, 1, 20).is_err());
        assert!(generate_synthetic(0, 1, 24).is_ok());
    }

    #[test]
    fn rejects_non_binary_label() {
        let r = FundusSample::new(
            "x",
            Tensor::zeros(&[1, 2, 2]),
            Tensor::full(&[2, 2], 0.5),
            Tensor::ones(&[2, 2]),
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
