//! Image, mask and feature-map contracts shared by every stage.

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::kernels;
use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 32;

/// An interleaved 8-bit image as read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl From<image::RgbImage> for RawImage {
    fn from(img: image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            pixels: img.into_raw(),
        }
    }
}

/// Per-channel standardization applied after scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// A normalized 3-channel image, stored as a `[1, 3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
    standardization: Option<Standardization>,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let [n, c, h, w] = data.shape();
        if n != 1 || c != 3 {
            return Err(Error::Invalid(format!(
                "image tensor must be [1, 3, H, W], got {:?}",
                data.shape()
            )));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Invalid(format!(
                "image {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if !data.all_finite() {
            return Err(Error::Invalid("image contains non-finite values".into()));
        }
        Ok(Self {
            data,
            standardization: None,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn standardization(&self) -> Option<Standardization> {
        self.standardization
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            data: kernels::resize_bilinear(&self.data, height, width)?,
            standardization: self.standardization,
        })
    }
}

/// Scales bytes to `[0, 1]` and optionally standardizes each channel.
pub fn normalize_image(raw: &RawImage, standardize: Option<Standardization>) -> Result<ImageTensor> {
    if raw.channels != 3 {
        return Err(Error::Invalid(format!(
            "expected 3 channels, got {}",
            raw.channels
        )));
    }
    if raw.width == 0 || raw.height == 0 || raw.pixels.is_empty() {
        return Err(Error::Invalid("empty image".into()));
    }
    if raw.pixels.len() != raw.width * raw.height * 3 {
        return Err(Error::Invalid(format!(
            "{} bytes do not describe a {}x{} RGB image",
            raw.pixels.len(),
            raw.width,
            raw.height
        )));
    }
    let (w, h) = (raw.width, raw.height);
    let data = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let v = f64::from(raw.pixels[(y * w + x) * 3 + c]) / 255.0;
        match standardize {
            Some(s) => (v - s.mean[c]) / s.std[c],
            None => v,
        }
    });
    let mut img = ImageTensor::new(data)?;
    img.standardization = standardize;
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    GroundTruth,
    Logits,
    Probability,
}

/// A single-channel map stored as `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    data: Tensor,
    kind: MaskKind,
}

impl MaskTensor {
    pub fn new(data: Tensor, kind: MaskKind) -> Result<Self> {
        let [n, c, _, _] = data.shape();
        if n != 1 || c != 1 {
            return Err(Error::Invalid(format!(
                "mask must be [1, 1, H, W], got {:?}",
                data.shape()
            )));
        }
        let ok = match kind {
            MaskKind::GroundTruth => data.data().iter().all(|&v| v == 0.0 || v == 1.0),
            MaskKind::Probability => data.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            MaskKind::Logits => data.all_finite(),
        };
        if !ok {
            return Err(Error::Invalid(format!("values violate the {kind:?} range")));
        }
        Ok(Self { data, kind })
    }

    pub fn ground_truth(data: Tensor) -> Result<Self> {
        Self::new(data, MaskKind::GroundTruth)
    }

    pub fn probability(data: Tensor) -> Result<Self> {
        Self::new(data, MaskKind::Probability)
    }

    pub fn logits(data: Tensor) -> Result<Self> {
        Self::new(data, MaskKind::Logits)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.data().iter().filter(|&&v| v >= 0.5).count()
    }
}

/// Encoder feature at pyramid level `1..=4` with stride `2^(level+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    level: u8,
}

impl FeatureMap {
    pub fn new(data: Tensor, level: u8) -> Result<Self> {
        if !(1..=4).contains(&level) {
            return Err(Error::Invalid(format!("pyramid level {level} outside 1..=4")));
        }
        if data.batch() != 1 {
            return Err(Error::Invalid("feature maps hold a single image".into()));
        }
        Ok(Self { data, level })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn stride(&self) -> usize {
        stride_of_level(self.level)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    /// `(H, W, C)` in channel-last order.
    pub fn hwc(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }
}

pub fn stride_of_level(level: u8) -> usize {
    1 << (level + 1)
}

/// Spatial size of a level-`level` feature for an `h`x`w` source.
///
/// Odd sizes are floored once per halving, which for power-of-two strides
/// equals a single floor division by the stride.
pub fn level_size(h: usize, w: usize, level: u8) -> (usize, usize) {
    let s = stride_of_level(level);
    (h / s, w / s)
}

/// Anything that can be bilinearly resampled without changing its kind.
pub trait Resample: Sized {
    fn resample(&self, height: usize, width: usize) -> Result<Self>;
}

impl Resample for MaskTensor {
    /// Ground-truth masks are re-binarized at 0.5 so they stay binary.
    fn resample(&self, height: usize, width: usize) -> Result<Self> {
        let mut data = kernels::resize_bilinear(&self.data, height, width)?;
        if self.kind == MaskKind::GroundTruth {
            data = data.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        }
        Ok(Self {
            data,
            kind: self.kind,
        })
    }
}

impl Resample for FeatureMap {
    fn resample(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            data: kernels::resize_bilinear(&self.data, height, width)?,
            level: self.level,
        })
    }
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear<T: Resample>(t: &T, target: (usize, usize)) -> Result<T> {
    t.resample(target.0, target.1)
}

/// Elementwise logistic function of a logit map.
pub fn sigmoid_map(logits: &MaskTensor) -> Result<MaskTensor> {
    if logits.kind != MaskKind::Logits {
        return Err(Error::Invalid(format!(
            "sigmoid_map expects logits, got {:?}",
            logits.kind
        )));
    }
    MaskTensor::probability(logits.data.map(sigmoid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn raw(w: usize, h: usize, fill: impl FnMut(usize) -> u8) -> RawImage {
        RawImage {
            width: w,
            height: h,
            channels: 3,
            pixels: (0..w * h * 3).map(fill).collect(),
        }
    }

    #[test]
    fn normalize_extremes() {
        let zero = normalize_image(&raw(40, 40, |_| 0), None).unwrap();
        assert!(zero.tensor().data().iter().all(|&v| v == 0.0));
        let one = normalize_image(&raw(40, 40, |_| 255), None).unwrap();
        assert!(one.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_random_bytes_in_unit_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = normalize_image(&raw(64, 64, |_| rng.random()), None).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (64, 64, 3));
        let (lo, hi) = (img.tensor().min(), img.tensor().max());
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn normalize_records_standardization() {
        let s = Standardization {
            mean: [0.5; 3],
            std: [0.25; 3],
        };
        let img = normalize_image(&raw(32, 32, |_| 255), Some(s)).unwrap();
        assert_eq!(img.standardization(), Some(s));
        assert!(img.tensor().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn normalize_rejects_bad_inputs() {
        let mut gray = raw(32, 32, |_| 0);
        gray.channels = 1;
        gray.pixels.truncate(32 * 32);
        assert!(normalize_image(&gray, None).is_err());
        let empty = RawImage {
            width: 0,
            height: 0,
            channels: 3,
            pixels: vec![],
        };
        assert!(normalize_image(&empty, None).is_err());
    }

    #[test]
    fn sigmoid_map_values() {
        let logits = MaskTensor::logits(Tensor::from_rows(&[vec![-1.0, 0.0, 1.0, 20.0]]).unwrap()).unwrap();
        let p = sigmoid_map(&logits).unwrap();
        let d = p.tensor().data();
        assert_eq!(d[1], 0.5);
        assert!((d[0] - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-15);
        assert!((d[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!(d[3] > 0.9999);
        assert!(sigmoid_map(&p).is_err());
    }

    #[test]
    fn mask_kind_invariants() {
        assert!(MaskTensor::ground_truth(Tensor::full([1, 1, 2, 2], 0.5)).is_err());
        assert!(MaskTensor::probability(Tensor::full([1, 1, 2, 2], 1.5)).is_err());
        assert!(MaskTensor::logits(Tensor::full([1, 1, 2, 2], f64::NAN)).is_err());
    }

    #[test]
    fn level_sizes_floor() {
        assert_eq!(level_size(352, 352, 1), (88, 88));
        assert_eq!(level_size(352, 352, 4), (11, 11));
        assert_eq!(level_size(100, 70, 2), (12, 8));
    }

    #[test]
    fn resize_feature_preserves_channels() {
        let f = FeatureMap::new(Tensor::full([1, 5, 4, 4], 1.0), 2).unwrap();
        let r = resize_bilinear(&f, (9, 3)).unwrap();
        assert_eq!(r.hwc(), (9, 3, 5));
        assert_eq!(r.level(), 2);
    }

    proptest! {
        #[test]
        fn up_down_resize_preserves_bounds(
            h in 2usize..10, w in 2usize..10, seed in 0u64..1000, constant in proptest::bool::ANY
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = if constant {
                Tensor::full([1, 1, h, w], rng.random_range(-3.0..3.0))
            } else {
                Tensor::from_fn([1, 1, h, w], |_, _, _, _| rng.random_range(-3.0..3.0))
            };
            let m = MaskTensor::logits(t.clone()).unwrap();
            let up = resize_bilinear(&m, (2 * h, 2 * w)).unwrap();
            let back = resize_bilinear(&up, (h, w)).unwrap();
            if constant {
                prop_assert!(back.tensor().data().iter().all(|&v| v == t.data()[0]));
            }
            prop_assert!(back.tensor().min() >= t.min() && back.tensor().max() <= t.max());
        }

        #[test]
        fn sigmoid_is_monotone(a in -50.0f64..50.0, d in 0.0f64..10.0) {
            let lo = MaskTensor::logits(Tensor::full([1, 1, 1, 1], a)).unwrap();
            let hi = MaskTensor::logits(Tensor::full([1, 1, 1, 1], a + d)).unwrap();
            prop_assert!(sigmoid_map(&hi).unwrap().tensor().data()[0] >= sigmoid_map(&lo).unwrap().tensor().data()[0]);
        }
    }
}
