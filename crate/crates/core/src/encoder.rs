//! Four-level feature pyramid `f1..f4` at strides 4, 8, 16 and 32.
//!
//! Two profiles share one interface:
//!
//! * `toy`: four stages of `3x3 conv -> ReLU -> average-pool`, the first
//!   pooling by 4 and the rest by 2. Small enough to train on a laptop CPU.
//! * `paper_shape`: the channel contract of the pretrained backbone
//!   (`{256, 512, 1024, 2048}`). Without a weight file it is a randomly
//!   initialized stand-in whose later stages pool first and use pointwise
//!   convolutions, so full-size shape checks stay cheap. Real weights are
//!   loaded through [`Encoder::load_weights`].

use std::path::Path;

use crate::checkpoint;
use crate::config::EncoderProfile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Conv2d, ParamStore};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, ImageTensor};

/// Encoder inputs must be divisible by the coarsest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub profile: EncoderProfile,
    pub channels: [usize; 4],
    pub seed: u64,
}

impl EncoderSpec {
    pub fn new(profile: EncoderProfile, seed: u64) -> Self {
        Self {
            profile,
            channels: profile.default_channels(),
            seed,
        }
    }

    /// Looks a profile up by its configuration name.
    pub fn named(name: &str, seed: u64) -> Result<Self> {
        Ok(Self::new(name.parse()?, seed))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    pool: usize,
    pool_first: bool,
}

/// The four feature maps of one image (or one batch, in graph form).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 4],
}

impl FeaturePyramid {
    pub fn level(&self, i: u8) -> &FeatureMap {
        &self.levels[usize::from(i) - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        let c = spec.channels;
        let stages = match spec.profile {
            EncoderProfile::Toy => (0..4)
                .map(|i| Stage {
                    conv: Conv2d::new(format!("encoder.stage{}", i + 1), if i == 0 { 3 } else { c[i - 1] }, c[i], 3),
                    pool: if i == 0 { 4 } else { 2 },
                    pool_first: false,
                })
                .collect(),
            EncoderProfile::PaperShape => (0..4)
                .map(|i| Stage {
                    conv: if i == 0 {
                        Conv2d::new("encoder.stage1", 3, c[0], 3)
                    } else {
                        Conv2d::new(format!("encoder.stage{}", i + 1), c[i - 1], c[i], 1)
                    },
                    pool: if i == 0 { 4 } else { 2 },
                    pool_first: i > 0,
                })
                .collect(),
        };
        Ok(Self { spec, stages })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn channels(&self) -> [usize; 4] {
        self.spec.channels
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|s| s.conv.num_params()).sum()
    }

    pub fn init(&self, store: &mut ParamStore) {
        for s in &self.stages {
            s.conv.init(store, self.spec.seed);
        }
    }

    /// Replaces the encoder parameters with those in a tensor archive.
    pub fn load_weights(&self, store: &mut ParamStore, path: &Path) -> Result<usize> {
        let file = checkpoint::read_tensor_archive(path)?;
        let loaded = store.load_from(&file, "encoder.")?;
        if loaded != self.stages.len() * 2 {
            return Err(Error::Checkpoint(format!(
                "{} holds {loaded} encoder tensors, expected {}",
                path.display(),
                self.stages.len() * 2
            )));
        }
        Ok(loaded)
    }

    /// Graph form of [`extract_features`] over a `[N, 3, H, W]` batch.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<[Var; 4]> {
        let [_, c, h, w] = g.shape(x);
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {INPUT_MULTIPLE}"
            )));
        }
        let mut cur = x;
        let mut out = Vec::with_capacity(4);
        for s in &self.stages {
            if s.pool_first {
                cur = g.avg_pool(cur, s.pool)?;
                let z = s.conv.forward(g, store, cur)?;
                cur = g.relu(z);
            } else {
                let z = s.conv.forward(g, store, cur)?;
                let a = g.relu(z);
                cur = g.avg_pool(a, s.pool)?;
            }
            out.push(cur);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

pub fn build_encoder(spec: EncoderSpec) -> Result<(Encoder, ParamStore)> {
    let enc = Encoder::new(spec)?;
    let mut store = ParamStore::default();
    enc.init(&mut store);
    Ok((enc, store))
}

/// Runs the encoder on one image and returns the four feature maps.
pub fn extract_features(enc: &Encoder, store: &ParamStore, img: &ImageTensor) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let x = g.input(img.tensor().clone());
    let vars = enc.forward(&mut g, store, x)?;
    pyramid_from_graph(&g, &vars)
}

pub(crate) fn pyramid_from_graph(g: &Graph, vars: &[Var; 4]) -> Result<FeaturePyramid> {
    let maps: Vec<FeatureMap> = vars
        .iter()
        .enumerate()
        .map(|(i, v)| FeatureMap::new(first_image(g.value(*v)), i as u8 + 1))
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid {
        levels: maps.try_into().expect("four levels"),
    })
}

fn first_image(t: &Tensor) -> Tensor {
    if t.batch() == 1 {
        t.clone()
    } else {
        t.select(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::level_size;

    fn image(size: usize) -> ImageTensor {
        ImageTensor::new(Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
            ((c * 7 + y * 3 + x) % 11) as f64 / 10.0
        }))
        .unwrap()
    }

    #[test]
    fn toy_construction_is_deterministic() {
        let (_, a) = build_encoder(EncoderSpec::new(EncoderProfile::Toy, 0)).unwrap();
        let (_, b) = build_encoder(EncoderSpec::new(EncoderProfile::Toy, 0)).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_encoder(EncoderSpec::new(EncoderProfile::Toy, 1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn toy_parameter_count() {
        // 3x3 conv weights plus biases of the documented 3->16->32->64->128 stack
        let expected: usize = [(3, 16), (16, 32), (32, 64), (64, 128)]
            .iter()
            .map(|(i, o)| i * o * 9 + o)
            .sum();
        let (enc, store) = build_encoder(EncoderSpec::new(EncoderProfile::Toy, 0)).unwrap();
        assert_eq!(enc.num_params(), expected);
        assert_eq!(store.num_scalars(), expected);
        assert!(expected < 2_000_000);
    }

    #[test]
    fn profile_names() {
        let spec = EncoderSpec::named("paper_shape", 0).unwrap();
        assert_eq!(Encoder::new(spec).unwrap().channels(), [256, 512, 1024, 2048]);
        assert!(EncoderSpec::named("resnet", 0).is_err());
    }

    #[test]
    fn toy_pyramid_shapes_at_64() {
        let (enc, store) = build_encoder(EncoderSpec::new(EncoderProfile::Toy, 0)).unwrap();
        let p = extract_features(&enc, &store, &image(64)).unwrap();
        assert_eq!(p.level(1).hwc(), (16, 16, 16));
        assert_eq!(p.level(4).hwc(), (2, 2, 128));
        for (i, f) in p.levels.iter().enumerate() {
            assert_eq!(f.stride(), 4 << i);
            assert_eq!((f.height(), f.width()), level_size(64, 64, i as u8 + 1));
        }
        let again = extract_features(&enc, &store, &image(64)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn rejects_indivisible_input() {
        let (enc, store) = build_encoder(EncoderSpec::new(EncoderProfile::Toy, 0)).unwrap();
        let img = ImageTensor::new(Tensor::zeros([1, 3, 48, 64])).unwrap();
        assert!(matches!(extract_features(&enc, &store, &img), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_reaches_the_input() {
        let (enc, store) = build_encoder(EncoderSpec::new(EncoderProfile::Toy, 3)).unwrap();
        let mut g = Graph::new();
        let x = g.input(image(32).into_tensor());
        let f = enc.forward(&mut g, &store, x).unwrap();
        let loss = g.mean(f[3]);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
