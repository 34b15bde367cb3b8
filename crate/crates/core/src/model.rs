//! The assembled network: encoder, early-map decoder and continuous attention.

use crate::attention::{AttentionVars, ContinuousAttention, RegionPartition, SemanticMask};
use crate::config::RunConfig;
use crate::ctd::{CtdDecoder, EarlyGlobalMap};
use crate::encoder::{Encoder, EncoderSpec, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, Head};
use crate::metrics::Segmenter;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{resize_bilinear, ImageTensor, MaskTensor};

#[derive(Clone, Debug)]
pub struct AdsNet {
    config: RunConfig,
    encoder: Encoder,
    decoder: CtdDecoder,
    attention: ContinuousAttention,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub features: [Var; 4],
    /// `M` logits at stride 4.
    pub early: Var,
    pub attention: AttentionVars,
    /// Logits upsampled to the input size, one per supervised head.
    pub upsampled: [(Head, Var); 4],
}

impl ModelVars {
    pub fn logits(&self, head: Head) -> Var {
        self.upsampled.iter().find(|(h, _)| *h == head).expect("every head present").1
    }
}

/// Value-level intermediates for one image, for figures and inspection.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub early: EarlyGlobalMap,
    pub partition: RegionPartition,
    pub heads: SemanticMask,
    /// Final probability at the input resolution.
    pub final_probability: MaskTensor,
}

impl AdsNet {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = EncoderSpec {
            profile: config.encoder_profile,
            channels: config.channel_scheme,
            seed: config.seed,
        };
        let encoder = Encoder::new(spec)?;
        let decoder = CtdDecoder::new(config.channel_scheme, config.decoder_width);
        let attention = ContinuousAttention::new(config.channel_scheme, config.decoder_width, config.reduction)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            attention,
        })
    }

    /// Builds the network and freshly initialized parameters (plus encoder
    /// weights from `encoder.weights` when set).
    pub fn build(config: &RunConfig) -> Result<(Self, ParamStore)> {
        let net = Self::new(config)?;
        let mut store = ParamStore::default();
        net.encoder.init(&mut store);
        net.decoder.init(&mut store, config.seed);
        net.attention.init(&mut store, config.seed);
        if let Some(path) = &config.encoder_weights {
            net.encoder.load_weights(&mut store, path)?;
        }
        Ok((net, store))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &CtdDecoder {
        &self.decoder
    }

    pub fn attention(&self) -> &ContinuousAttention {
        &self.attention
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params() + self.attention.num_params()
    }

    /// Checks that `store` holds every parameter with the right size.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let (_, fresh) = Self::build(&RunConfig {
            encoder_weights: None,
            ..self.config.clone()
        })?;
        for (name, t) in fresh.iter() {
            match store.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` is {:?}, model expects {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("parameter `{name}` missing"))),
            }
        }
        if store.len() != fresh.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                store.len(),
                fresh.len()
            )));
        }
        Ok(())
    }

    /// Forward pass over a `[N, 3, H, W]` batch.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, drop_os: bool) -> Result<ModelVars> {
        let [_, _, h, w] = g.shape(x);
        let features = self.encoder.forward(g, store, x)?;
        let early = self.decoder.forward(g, store, &features)?;
        let attention = self
            .attention
            .forward(g, store, &features, early, &self.config.partition, drop_os)?;
        let mut up = |v: Var| g.resize(v, h, w);
        let upsampled = [
            (Head::Final, up(attention.final_logits)?),
            (Head::Early, up(early)?),
            (Head::Bs, up(attention.bs)?),
            (Head::Os, up(attention.os)?),
        ];
        Ok(ModelVars {
            features,
            early,
            attention,
            upsampled,
        })
    }

    /// Total training loss against a `[N, 1, H, W]` ground truth. Returns
    /// the loss and the unweighted per-head losses.
    pub fn loss(&self, g: &mut Graph, vars: &ModelVars, y: Var) -> Result<(Var, Vec<(Head, Var)>)> {
        let probs: Vec<(Head, Var)> = vars.upsampled.iter().map(|&(h, v)| (h, g.sigmoid(v))).collect();
        losses::total_var(g, y, &probs, &self.config.loss)
    }

    /// Input side length the network runs at for an image of this size:
    /// the configured size, already a multiple of [`INPUT_MULTIPLE`].
    pub fn input_size(&self) -> usize {
        self.config.image_size
    }

    fn prepare(&self, image: &ImageTensor) -> Result<Tensor> {
        let s = self.input_size();
        if s % INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!("image_size {s} is not a multiple of {INPUT_MULTIPLE}")));
        }
        if (image.height(), image.width()) == (s, s) {
            Ok(image.tensor().clone())
        } else {
            Ok(image.resized(s, s)?.into_tensor())
        }
    }

    /// Probability map at the resolution of `image`.
    pub fn predict_probability(&self, store: &ParamStore, image: &ImageTensor, drop_os: bool) -> Result<MaskTensor> {
        let mut g = Graph::new();
        let x = g.input(self.prepare(image)?);
        let vars = self.forward(&mut g, store, x, drop_os)?;
        let p = g.sigmoid(vars.logits(Head::Final));
        let p = MaskTensor::probability(g.value(p).clone())?;
        if (p.height(), p.width()) == (image.height(), image.width()) {
            Ok(p)
        } else {
            let p = resize_bilinear(&p, (image.height(), image.width()))?;
            // bilinear weights are convex, but guard against rounding past 1
            MaskTensor::probability(p.tensor().map(|v| v.clamp(0.0, 1.0)))
        }
    }

    /// Every intermediate map of one image.
    pub fn decompose(&self, store: &ParamStore, image: &ImageTensor) -> Result<Decomposition> {
        let mut g = Graph::new();
        let x = g.input(self.prepare(image)?);
        let vars = self.forward(&mut g, store, x, false)?;
        let a = vars.attention;
        let logits = |v: Var| MaskTensor::logits(g.value(v).clone());
        let early = EarlyGlobalMap::from_logits(g.value(vars.early).clone())?;
        let partition = RegionPartition {
            strong: MaskTensor::probability(g.value(a.strong).clone())?,
            weak: MaskTensor::probability(g.value(a.weak).clone())?,
            config: self.config.partition,
        };
        let heads = SemanticMask {
            bs_logits: logits(a.bs)?,
            os_logits: logits(a.os)?,
            final_logits: logits(a.final_logits)?,
        };
        let final_probability = self.predict_probability(store, image, false)?;
        Ok(Decomposition {
            early,
            partition,
            heads,
            final_probability,
        })
    }
}

/// A network bound to its parameters.
pub struct Trained<'a> {
    pub net: &'a AdsNet,
    pub store: &'a ParamStore,
    /// Zero the object-semantic head before the final fusion.
    pub drop_os: bool,
}

impl Segmenter for Trained<'_> {
    fn predict(&self, image: &ImageTensor) -> Result<MaskTensor> {
        self.net.predict_probability(self.store, image, self.drop_os)
    }
}
