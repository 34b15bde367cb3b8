//! Benchmark datasets, the train/test split, augmentation and synthetic data.
//!
//! On disk a dataset is `<root>/images/*.{png,jpg,jpeg}` plus
//! `<root>/masks/*.png`, matched by file stem. Masks are binarized at 128.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{normalize_image, ImageTensor, MaskTensor, RawImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    KvasirSeg,
    CvcClinicDb,
    Etis,
    CvcColonDb,
    Synthetic,
}

impl DatasetName {
    pub const BENCHMARKS: [DatasetName; 4] = [Self::KvasirSeg, Self::CvcClinicDb, Self::Etis, Self::CvcColonDb];

    pub fn name(self) -> &'static str {
        match self {
            Self::KvasirSeg => "kvasir_seg",
            Self::CvcClinicDb => "cvc_clinicdb",
            Self::Etis => "etis",
            Self::CvcColonDb => "cvc_colondb",
            Self::Synthetic => "synthetic",
        }
    }

    /// Published size of each benchmark.
    pub fn expected_count(self) -> Option<usize> {
        match self {
            Self::KvasirSeg => Some(1000),
            Self::CvcClinicDb => Some(612),
            Self::Etis => Some(196),
            Self::CvcColonDb => Some(380),
            Self::Synthetic => None,
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "kvasir_seg" | "kvasir" => Self::KvasirSeg,
            "cvc_clinicdb" | "clinicdb" => Self::CvcClinicDb,
            "etis" => Self::Etis,
            "cvc_colondb" | "colondb" => Self::CvcColonDb,
            "synthetic" => Self::Synthetic,
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub root_path: PathBuf,
    pub expected_count: Option<usize>,
    pub split_role: SplitRole,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, root_path: impl Into<PathBuf>, split_role: SplitRole) -> Self {
        Self {
            name,
            root_path: root_path.into(),
            expected_count: name.expected_count(),
            split_role,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub image: ImageTensor,
    pub mask: MaskTensor,
    /// `(height, width)` of the source files.
    pub original_size: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<SampleRecord>,
    /// Pairs that could not be decoded: `(stem, reason)`.
    pub failures: Vec<(String, String)>,
}

/// Image and mask files of one sample.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SamplePaths {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing directory {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if let (Some(ext), Some(stem)) = (ext, path.file_stem().and_then(|s| s.to_str())) {
            if exts.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs every image with its mask, in lexicographic stem order.
pub fn list_samples(root: &Path) -> Result<Vec<SamplePaths>> {
    let images = stems(&root.join("images"), &["png", "jpg", "jpeg"])?;
    let masks_dir = root.join("masks");
    let masks = stems(&masks_dir, &["png"])?;
    images
        .into_iter()
        .map(|(stem, image)| match masks.get(&stem) {
            Some(mask) => Ok(SamplePaths {
                stem,
                image,
                mask: mask.clone(),
            }),
            None => Err(Error::MissingMask {
                stem,
                dir: masks_dir.clone(),
            }),
        })
        .collect()
}

pub fn read_mask(path: &Path) -> Result<MaskTensor> {
    let m = image::open(path)?.to_luma8();
    let (w, h) = (m.width() as usize, m.height() as usize);
    let data = m.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    MaskTensor::ground_truth(Tensor::from_vec([1, 1, h, w], data)?)
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    normalize_image(&RawImage::from(image::open(path)?.to_rgb8()), None)
}

pub fn load_sample(paths: &SamplePaths) -> Result<SampleRecord> {
    let image = read_image(&paths.image)?;
    let mask = read_mask(&paths.mask)?;
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Data(format!(
            "{}: image is {}x{}, mask is {}x{}",
            paths.stem,
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(SampleRecord {
        image_id: paths.stem.clone(),
        original_size: (image.height(), image.width()),
        image,
        mask,
    })
}

/// Loads every pair under `spec.root_path`. Undecodable pairs are listed in
/// `failures`; the call fails only when nothing could be read.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let paths = list_samples(&spec.root_path)?;
    if let Some(expected) = spec.expected_count {
        if paths.len() != expected {
            log::warn!(
                "{} at {}: found {} samples, expected {expected}",
                spec.name.name(),
                spec.root_path.display(),
                paths.len()
            );
        }
    }
    let mut ds = Dataset {
        name: spec.name.name().to_string(),
        ..Dataset::default()
    };
    for p in &paths {
        match load_sample(p) {
            Ok(r) => ds.records.push(r),
            Err(e) => ds.failures.push((p.stem.clone(), e.to_string())),
        }
    }
    if ds.records.is_empty() && !paths.is_empty() {
        return Err(Error::Data(format!(
            "no readable samples under {}",
            spec.root_path.display()
        )));
    }
    Ok(ds)
}

pub const PAPER_TRAIN_KVASIR: usize = 900;
pub const PAPER_TRAIN_CLINIC: usize = 550;

#[derive(Clone, Debug, PartialEq)]
pub struct PaperSplit<T> {
    pub seed: u64,
    pub train: Vec<T>,
    pub test_kvasir: Vec<T>,
    pub test_clinic: Vec<T>,
}

/// Seeded shuffle of each dataset, then 900 Kvasir-SEG and 550 CVC-ClinicDB
/// items for training and the remainder of each for testing.
pub fn make_paper_split<T: Clone>(kvasir: &[T], clinic: &[T], seed: u64) -> Result<PaperSplit<T>> {
    if kvasir.len() <= PAPER_TRAIN_KVASIR || clinic.len() <= PAPER_TRAIN_CLINIC {
        return Err(Error::Data(format!(
            "split needs more than {PAPER_TRAIN_KVASIR} Kvasir-SEG and {PAPER_TRAIN_CLINIC} CVC-ClinicDB samples, got {} and {}",
            kvasir.len(),
            clinic.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k: Vec<usize> = (0..kvasir.len()).collect();
    let mut c: Vec<usize> = (0..clinic.len()).collect();
    k.shuffle(&mut rng);
    c.shuffle(&mut rng);
    let pick = |src: &[T], idx: &[usize]| idx.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
    let mut train = pick(kvasir, &k[..PAPER_TRAIN_KVASIR]);
    train.extend(pick(clinic, &c[..PAPER_TRAIN_CLINIC]));
    Ok(PaperSplit {
        seed,
        train,
        test_kvasir: pick(kvasir, &k[PAPER_TRAIN_KVASIR..]),
        test_clinic: pick(clinic, &c[PAPER_TRAIN_CLINIC..]),
    })
}

/// A dihedral transform applied identically to image and mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turns: -1, 0 or 1 (positive is clockwise).
    pub rotation: i8,
}

impl Augmentation {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            rotation: rng.random_range(-1..=1),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        let mut t = t.clone();
        if self.hflip {
            t = t.flip_horizontal();
        }
        if self.vflip {
            t = t.flip_vertical();
        }
        match self.rotation {
            1 => t.rotate90(true),
            -1 => t.rotate90(false),
            _ => t,
        }
    }

    pub fn apply(&self, rec: &SampleRecord) -> Result<SampleRecord> {
        if self.is_identity() {
            return Ok(rec.clone());
        }
        Ok(SampleRecord {
            image_id: rec.image_id.clone(),
            image: ImageTensor::new(self.apply_tensor(rec.image.tensor()))?,
            mask: MaskTensor::ground_truth(self.apply_tensor(rec.mask.tensor()))?,
            original_size: rec.original_size,
        })
    }
}

pub fn augment(rec: &SampleRecord, seed: u64) -> Result<SampleRecord> {
    Augmentation::draw(&mut ChaCha8Rng::seed_from_u64(seed)).apply(rec)
}

/// Contrast of the faint blob in the "uncertain area" samples.
pub const LOW_CONTRAST: f64 = 0.2;
const LOW_CONTRAST_SUFFIX: &str = "_lowcontrast";

/// Whether a synthetic sample carries a low-contrast blob.
pub fn is_low_contrast(image_id: &str) -> bool {
    image_id.ends_with(LOW_CONTRAST_SUFFIX)
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    /// radial wobble: amplitude and phase of harmonics 2 and 3
    wobble: [(f64, f64); 2],
    contrast: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let radius = rng.random_range(0.14..0.25) * size;
        Self {
            cy: rng.random_range(radius..size - radius),
            cx: rng.random_range(radius..size - radius),
            radius,
            wobble: [
                (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU)),
                (rng.random_range(0.0..0.08), rng.random_range(0.0..std::f64::consts::TAU)),
            ],
            contrast: 1.0,
        }
    }

    /// Signed distance proxy: positive inside, in pixels.
    fn inside(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = dy.atan2(dx);
        let r = self.radius
            * (1.0 + self.wobble[0].0 * (2.0 * theta + self.wobble[0].1).sin() + self.wobble[1].0 * (3.0 * theta + self.wobble[1].1).sin());
        r - (dy * dy + dx * dx).sqrt()
    }
}

/// `n` images of 1 to 3 smooth blobs on a textured background. Every odd
/// sample has one blob at [`LOW_CONTRAST`] (its id ends in `_lowcontrast`);
/// the mask marks that blob fully.
pub fn synthetic_toy_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Data("synthetic dataset needs at least one sample".into()));
    }
    if size < 32 || size % 32 != 0 {
        return Err(Error::Data(format!("synthetic size {size} is not a positive multiple of 32")));
    }
    let records = (0..n)
        .map(|i| synthetic_sample(i, size, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: "synthetic".into(),
        records,
        failures: vec![],
    })
}

fn synthetic_sample(i: usize, size: usize, seed: u64) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64);
    let s = size as f64;
    let count = rng.random_range(1..=3);
    let mut blobs: Vec<Blob> = (0..count).map(|_| Blob::random(&mut rng, s)).collect();
    let low = i % 2 == 1;
    if low {
        blobs[0].contrast = LOW_CONTRAST;
    }
    let base = [
        rng.random_range(0.45..0.6),
        rng.random_range(0.25..0.4),
        rng.random_range(0.2..0.35),
    ];
    let tissue = [0.85, 0.55, 0.4];
    let (fy, fx, phase) = (
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let noise: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.02..0.02)).collect();
    let mut mask = Tensor::zeros([1, 1, size, size]);
    let mut img = Tensor::zeros([1, 3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let texture = 0.05 * (fy * py + fx * px + phase).sin() + noise[y * size + x];
            // blend weight: strongest blob covering the pixel, soft over ~1 px
            let mut alpha: f64 = 0.0;
            let mut inside = false;
            for b in &blobs {
                let d = b.inside(py, px);
                inside |= d > 0.0;
                let edge = 1.0 / (1.0 + (-2.0 * d).exp());
                alpha = alpha.max(b.contrast * edge);
            }
            mask.set(0, 0, y, x, f64::from(u8::from(inside)));
            for c in 0..3 {
                let v = base[c] + texture + alpha * (tissue[c] - base[c]);
                img.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    let suffix = if low { LOW_CONTRAST_SUFFIX } else { "" };
    Ok(SampleRecord {
        image_id: format!("toy_{i:04}{suffix}"),
        image: ImageTensor::new(img)?,
        mask: MaskTensor::ground_truth(mask)?,
        original_size: (size, size),
    })
}

/// Writes `ds` in the on-disk layout (`images/<id>.png`, `masks/<id>.png`).
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    for r in &ds.records {
        image_to_rgb(&r.image).save(root.join("images").join(format!("{}.png", r.image_id)))?;
        mask_to_luma(r.mask.tensor()).save(root.join("masks").join(format!("{}.png", r.image_id)))?;
    }
    Ok(())
}

pub fn image_to_rgb(img: &ImageTensor) -> image::RgbImage {
    let t = img.tensor();
    image::RgbImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let px = |c| (t.get(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// First plane of `t`, scaled from `[0, 1]` to bytes.
pub fn mask_to_luma(t: &Tensor) -> image::GrayImage {
    image::GrayImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        image::Luma([(t.get(0, 0, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Random access to samples, as the training loop sees them.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<SampleRecord>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn sample(&self, index: usize) -> Result<SampleRecord> {
        self.records
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("sample {index} out of range")))
    }
}

/// Pairs read from disk on every access, for sets too large to hold
/// decoded in memory.
#[derive(Clone, Debug)]
pub struct PathSource {
    pub name: String,
    pub paths: Vec<SamplePaths>,
}

impl PathSource {
    pub fn open(name: impl Into<String>, root: &Path) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            paths: list_samples(root)?,
        })
    }
}

impl SampleSource for PathSource {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn sample(&self, index: usize) -> Result<SampleRecord> {
        let p = self
            .paths
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample {index} out of range")))?;
        load_sample(p)
    }
}

/// Wraps a source and records the id of every sample handed out.
pub struct AccessLog<S> {
    inner: S,
    accessed: Mutex<Vec<String>>,
}

impl<S: SampleSource> AccessLog<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            accessed: Mutex::new(Vec::new()),
        }
    }

    pub fn accessed(&self) -> Vec<String> {
        self.accessed.lock().expect("access log poisoned").clone()
    }
}

impl<S: SampleSource> SampleSource for AccessLog<S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn sample(&self, index: usize) -> Result<SampleRecord> {
        let r = self.inner.sample(index)?;
        self.accessed.lock().expect("access log poisoned").push(r.image_id.clone());
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::types::resize_bilinear;

    #[test]
    fn synthetic_dataset_contract() {
        let a = synthetic_toy_dataset(8, 64, 0).unwrap();
        let b = synthetic_toy_dataset(8, 64, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 8);
        for r in &a.records {
            assert_eq!((r.image.height(), r.image.width()), (64, 64));
            assert_eq!((r.mask.height(), r.mask.width()), (64, 64));
            assert!(r.mask.foreground_count() > 0, "{}", r.image_id);
        }
        assert_eq!(a.records.iter().filter(|r| is_low_contrast(&r.image_id)).count(), 4);
        assert_ne!(a, synthetic_toy_dataset(8, 64, 1).unwrap());
        assert!(synthetic_toy_dataset(8, 48, 0).is_err());
        assert!(synthetic_toy_dataset(0, 64, 0).is_err());
    }

    #[test]
    fn low_contrast_blob_is_faint_but_masked() {
        let ds = synthetic_toy_dataset(8, 64, 0).unwrap();
        let rec = ds.records.iter().find(|r| is_low_contrast(&r.image_id)).unwrap();
        // rebuild the faint blob's footprint and compare it with the strong version
        let mut rng = ChaCha8Rng::seed_from_u64(0u64.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);
        let count = rng.random_range(1..=3);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(&mut rng, 64.0)).collect();
        let faint = &blobs[0];
        let mut masked = 0;
        let mut inside_only_faint = 0;
        let mut red_inside = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if faint.inside(py, px) > 2.0 && blobs[1..].iter().all(|b| b.inside(py, px) < -2.0) {
                    inside_only_faint += 1;
                    masked += rec.mask.tensor().get(0, 0, y, x) as usize;
                    red_inside += rec.image.tensor().get(0, 0, y, x);
                }
            }
        }
        assert!(inside_only_faint > 20);
        assert_eq!(masked, inside_only_faint);
        // the faint blob shifts red by only 20% of the strong blob's shift
        let mean_red = red_inside / inside_only_faint as f64;
        assert!(mean_red < 0.75, "faint blob red level {mean_red}");
    }

    #[test]
    fn disk_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_toy_dataset(3, 32, 5).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let spec = DatasetSpec::new(DatasetName::Synthetic, dir.path(), SplitRole::Train);
        let back = load_dataset(&spec).unwrap();
        assert_eq!(back.records.len(), 3);
        let ids: Vec<_> = back.records.iter().map(|r| r.image_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.mask, b.mask);
            assert!(a.image.tensor().zip_map(b.image.tensor(), |x, y| (x - y).abs()).unwrap().max() <= 0.5 / 255.0 + 1e-12);
        }

        std::fs::copy(
            dir.path().join("images/toy_0000.png"),
            dir.path().join("images/orphan.png"),
        )
        .unwrap();
        match load_dataset(&spec) {
            Err(Error::MissingMask { stem, .. }) => assert_eq!(stem, "orphan"),
            other => panic!("expected a missing-mask error, got {other:?}"),
        }
        let missing = DatasetSpec::new(DatasetName::Etis, dir.path().join("nope"), SplitRole::Test);
        assert!(matches!(load_dataset(&missing), Err(Error::Data(_))));
    }

    #[test]
    fn unreadable_pairs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&synthetic_toy_dataset(2, 32, 5).unwrap(), dir.path()).unwrap();
        std::fs::write(dir.path().join("images/broken.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("masks/broken.png"), b"not a png").unwrap();
        let ds = load_dataset(&DatasetSpec::new(DatasetName::Synthetic, dir.path(), SplitRole::Test)).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.failures.len(), 1);
        assert_eq!(ds.failures[0].0, "broken");
    }

    #[test]
    fn paper_split_counts() {
        let k: Vec<usize> = (0..1000).collect();
        let c: Vec<usize> = (10_000..10_612).collect();
        let s = make_paper_split(&k, &c, 7).unwrap();
        assert_eq!((s.train.len(), s.test_kvasir.len(), s.test_clinic.len()), (1450, 100, 62));
        assert_eq!(s, make_paper_split(&k, &c, 7).unwrap());
        assert_ne!(s.train, make_paper_split(&k, &c, 8).unwrap().train);
        for t in s.test_kvasir.iter().chain(&s.test_clinic) {
            assert!(!s.train.contains(t));
        }
        let mut all: Vec<usize> = s.train.iter().chain(&s.test_kvasir).chain(&s.test_clinic).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 1612);
        assert!(make_paper_split(&k[..900], &c, 0).is_err());
    }

    #[test]
    fn augmentation_properties() {
        let rec = synthetic_toy_dataset(1, 64, 3).unwrap().records.remove(0);
        assert_eq!(Augmentation::default().apply(&rec).unwrap(), rec);
        for seed in 0..20 {
            let a = augment(&rec, seed).unwrap();
            assert_eq!(a.mask.foreground_count(), rec.mask.foreground_count());
            assert_eq!(a, augment(&rec, seed).unwrap());
        }
        for aug in [
            Augmentation { hflip: true, ..Default::default() },
            Augmentation { vflip: true, ..Default::default() },
        ] {
            let twice = aug.apply(&aug.apply(&rec).unwrap()).unwrap();
            assert_eq!(twice, rec);
        }
        let r = Augmentation { rotation: 1, ..Default::default() };
        let l = Augmentation { rotation: -1, ..Default::default() };
        assert_eq!(l.apply(&r.apply(&rec).unwrap()).unwrap(), rec);
        // image and mask move together: the red channel still peaks on the mask
        let a = Augmentation { hflip: true, vflip: false, rotation: 1 }.apply(&rec).unwrap();
        let (mut fg, mut n) = (0.0, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                if a.mask.tensor().get(0, 0, y, x) == 1.0 {
                    fg += a.image.tensor().get(0, 0, y, x);
                    n += 1.0;
                }
            }
        }
        assert!(fg / n > 0.7);
    }

    #[test]
    fn resampling_round_trip_keeps_blob_masks() {
        let ds = synthetic_toy_dataset(4, 64, 11).unwrap();
        for r in &ds.records {
            let odd = resize_bilinear(&r.mask, (90, 75)).unwrap();
            let train = resize_bilinear(&odd, (352, 352)).unwrap();
            let back = resize_bilinear(&train, (90, 75)).unwrap();
            let p = MaskTensor::probability(back.tensor().clone()).unwrap();
            assert!(dice(&p, &odd, 0.5, 0.0).unwrap() >= 0.95);
        }
    }

    #[test]
    fn access_log_records_ids() {
        let ds = synthetic_toy_dataset(3, 32, 0).unwrap();
        let logged = AccessLog::new(ds);
        logged.sample(2).unwrap();
        logged.sample(0).unwrap();
        assert_eq!(logged.accessed(), vec!["toy_0002".to_string(), "toy_0000".to_string()]);
        assert!(logged.sample(3).is_err());
    }

    #[test]
    fn dataset_names() {
        assert_eq!(DatasetName::KvasirSeg.expected_count(), Some(1000));
        assert_eq!(DatasetName::CvcClinicDb.expected_count(), Some(612));
        assert_eq!(DatasetName::Etis.expected_count(), Some(196));
        assert_eq!(DatasetName::CvcColonDb.expected_count(), Some(380));
        assert_eq!("etis".parse::<DatasetName>().unwrap(), DatasetName::Etis);
        assert!("imagenet".parse::<DatasetName>().is_err());
    }
}
