//! Continuous attention: dual-semantic refinement of the early global map.
//!
//! Data flow for one forward pass:
//!
//! ```text
//! f1 --CIM--> guide ------------------------------+
//! f2,f3,f4 --PASPP--> e2,e3,e4 --gate sequence--> AG2, AG3, AG4 (stride 4, common width)
//! M --sigmoid--> p --partition--> S, W
//! BS = head(Cat(S*AG2, S*AG3, S*AG4))
//! OS = head(Cat(S*AG2, S*AG3, S*AG4, W*AG2, W*AG3, W*AG4))
//! final = conv3x3(Cat(M, BS, OS))
//! ```
//!
//! The gate sequence runs deepest-first: the guide, pooled to the resolution
//! of `e4`, gates `e4`; each gated map is upsampled to gate the next shallower
//! level.

use crate::config::{PartitionConfig, PartitionMode};
use crate::ctd::EarlyGlobalMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::PadMode;
use crate::params::{Conv2d, ParamStore};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, MaskTensor};

/// Dilations of the four atrous branches.
pub const PASPP_DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Channel then spatial attention applied to `f1`.
#[derive(Clone, Debug)]
pub struct Cim {
    channels: usize,
    reduce: Conv2d,
    expand: Conv2d,
    spatial: Conv2d,
}

impl Cim {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::Config(format!(
                "channel attention needs at least {reduction} channels, got {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduce: Conv2d::new("attention.cim.reduce", channels, hidden, 1),
            expand: Conv2d::new("attention.cim.expand", hidden, channels, 1),
            spatial: Conv2d::new("attention.cim.spatial", 2, 1, 3),
        })
    }

    fn layers(&self) -> [&Conv2d; 3] {
        [&self.reduce, &self.expand, &self.spatial]
    }

    fn mlp(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        let h = self.reduce.forward(g, store, pooled)?;
        let h = g.relu(h);
        self.expand.forward(g, store, h)
    }

    /// `sigma(H(G_max(x)) + H(G_avg(x)))` with the bottleneck MLP `H` shared by both poolings.
    pub fn channel_gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gmax = g.global_max(x);
        let gavg = g.global_avg(x);
        let a = self.mlp(g, store, gmax)?;
        let b = self.mlp(g, store, gavg)?;
        let s = g.add(a, b)?;
        Ok(g.sigmoid(s))
    }

    pub fn channel_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gate = self.channel_gate(g, store, x)?;
        g.mul_gate(x, gate)
    }

    /// `sigma(conv3x3(Cat(max_c(x), mean_c(x))))`, one value per pixel.
    pub fn spatial_gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let rm = g.channel_max(x);
        let ra = g.channel_mean(x);
        let cat = g.concat(&[rm, ra])?;
        let z = self.spatial.forward(g, store, cat)?;
        Ok(g.sigmoid(z))
    }

    pub fn spatial_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gate = self.spatial_gate(g, store, x)?;
        g.mul_mask(x, gate)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f1: Var) -> Result<Var> {
        if g.shape(f1)[1] != self.channels {
            return Err(Error::Shape(format!(
                "CIM built for {} channels, got {}",
                self.channels,
                g.shape(f1)[1]
            )));
        }
        let c = self.channel_attention(g, store, f1)?;
        self.spatial_attention(g, store, c)
    }
}

/// Progressive atrous pyramid: branches with dilations 1/2/4/8 on a
/// bottleneck, each pair chained (`b2` sees `b1`, `b8` sees `b4`), pairs
/// fused, then everything fused back to the input width and added to the
/// input. Atrous taps use replicate padding, so a constant map stays
/// constant and maps smaller than a dilation simply see their border.
#[derive(Clone, Debug)]
pub struct Paspp {
    reduce: Conv2d,
    atrous: [Conv2d; 4],
    pair_low: Conv2d,
    pair_high: Conv2d,
    fuse: Conv2d,
}

impl Paspp {
    pub fn new(name: &str, channels: usize) -> Self {
        let q = (channels / 4).max(1);
        let atrous = PASPP_DILATIONS.map(|d| {
            Conv2d::new(format!("{name}.atrous{d}"), q, q, 3).dilated(d, PadMode::Replicate)
        });
        Self {
            reduce: Conv2d::new(format!("{name}.reduce"), channels, q, 1),
            atrous,
            pair_low: Conv2d::new(format!("{name}.pair_low"), 2 * q, q, 1),
            pair_high: Conv2d::new(format!("{name}.pair_high"), 2 * q, q, 1),
            fuse: Conv2d::new(format!("{name}.fuse"), 2 * q, channels, 1),
        }
    }

    fn layers(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.reduce, &self.pair_low, &self.pair_high, &self.fuse];
        v.extend(self.atrous.iter());
        v
    }

    /// Name of the weight tensor of the branch with dilation `d`.
    pub fn branch_weight(&self, d: usize) -> Option<String> {
        PASPP_DILATIONS
            .iter()
            .position(|&x| x == d)
            .map(|i| self.atrous[i].weight_name())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        if h == 0 || w == 0 {
            return Err(Error::Shape("PASPP input has no pixels".into()));
        }
        let r = self.reduce.forward(g, store, x)?;
        let r = g.relu(r);
        let branch = |g: &mut Graph, conv: &Conv2d, input: Var| -> Result<Var> {
            let z = conv.forward(g, store, input)?;
            Ok(g.relu(z))
        };
        let b1 = branch(g, &self.atrous[0], r)?;
        let in2 = g.add(r, b1)?;
        let b2 = branch(g, &self.atrous[1], in2)?;
        let b4 = branch(g, &self.atrous[2], r)?;
        let in8 = g.add(r, b4)?;
        let b8 = branch(g, &self.atrous[3], in8)?;
        let low = g.concat(&[b1, b2])?;
        let low = branch(g, &self.pair_low, low)?;
        let high = g.concat(&[b4, b8])?;
        let high = branch(g, &self.pair_high, high)?;
        let all = g.concat(&[low, high])?;
        let out = self.fuse.forward(g, store, all)?;
        g.add(x, out)
    }
}

/// Strong and weak region maps at the resolution of `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    pub strong: MaskTensor,
    pub weak: MaskTensor,
    pub config: PartitionConfig,
}

/// Graph form of the partition. Soft mode is differentiable; hard mode
/// produces constant indicator maps.
pub fn partition_vars(g: &mut Graph, p: Var, cfg: &PartitionConfig) -> (Var, Var) {
    match cfg.mode {
        PartitionMode::Soft => {
            // W = 1 - |2p - 1|
            let doubled = g.scale(p, 2.0);
            let centered = g.add_scalar(doubled, -1.0);
            let dist = g.abs(centered);
            let w = g.rsub_scalar(1.0, dist);
            (p, w)
        }
        PartitionMode::Hard => {
            let (s, w) = hard_partition(g.value(p), cfg);
            (g.input(s), g.input(w))
        }
    }
}

/// `S = 1[p >= theta]`; `W = 1[|p - 0.5| < band and p < theta]`, so the two
/// indicators never overlap even when the band reaches past `theta`.
fn hard_partition(p: &Tensor, cfg: &PartitionConfig) -> (Tensor, Tensor) {
    let s = p.map(|v| if v >= cfg.theta { 1.0 } else { 0.0 });
    let w = p.map(|v| {
        if (v - 0.5).abs() < cfg.band && v < cfg.theta {
            1.0
        } else {
            0.0
        }
    });
    (s, w)
}

pub fn partition_regions(m: &EarlyGlobalMap, cfg: &PartitionConfig) -> Result<RegionPartition> {
    cfg.validate()?;
    let mut g = Graph::new();
    let p = g.input(m.probability.tensor().clone());
    let (s, w) = partition_vars(&mut g, p, cfg);
    Ok(RegionPartition {
        strong: MaskTensor::probability(g.value(s).clone())?,
        weak: MaskTensor::probability(g.value(w).clone())?,
        config: *cfg,
    })
}

/// Gated high-level features `AG2, AG3, AG4`, all at stride 4 and common width.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedFeature {
    pub levels: [FeatureMap; 3],
}

/// The two semantic heads and the fused output, all single-channel logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    pub bs_logits: MaskTensor,
    pub os_logits: MaskTensor,
    pub final_logits: MaskTensor,
}

/// Graph handles of every intermediate the rest of the pipeline needs.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub guide: Var,
    pub enhanced: [Var; 3],
    pub gated: [Var; 3],
    pub ag: [Var; 3],
    pub strong: Var,
    pub weak: Var,
    pub bs: Var,
    pub os: Var,
    pub final_logits: Var,
}

#[derive(Clone, Debug)]
pub struct ContinuousAttention {
    width: usize,
    cim: Cim,
    paspp: [Paspp; 3],
    gates: [Conv2d; 3],
    proj: [Conv2d; 3],
    bs_mid: Conv2d,
    bs_out: Conv2d,
    os_mid: Conv2d,
    os_out: Conv2d,
    fuse: Conv2d,
}

impl ContinuousAttention {
    pub fn new(channels: [usize; 4], width: usize, reduction: usize) -> Result<Self> {
        let [c1, c2, c3, c4] = channels;
        let d = width;
        Ok(Self {
            width,
            cim: Cim::new(c1, reduction)?,
            paspp: [
                Paspp::new("attention.paspp2", c2),
                Paspp::new("attention.paspp3", c3),
                Paspp::new("attention.paspp4", c4),
            ],
            // gate i reads the previous (deeper) gated map, or the guide for level 4
            gates: [
                Conv2d::new("attention.gate2", c3, c2, 3),
                Conv2d::new("attention.gate3", c4, c3, 3),
                Conv2d::new("attention.gate4", c1, c4, 3),
            ],
            proj: [
                Conv2d::new("attention.proj2", c2, d, 1).without_bias(),
                Conv2d::new("attention.proj3", c3, d, 1).without_bias(),
                Conv2d::new("attention.proj4", c4, d, 1).without_bias(),
            ],
            bs_mid: Conv2d::new("attention.bs.mid", 3 * d, d, 3).without_bias(),
            bs_out: Conv2d::new("attention.bs.out", d, 1, 3),
            os_mid: Conv2d::new("attention.os.mid", 6 * d, d, 3).without_bias(),
            os_out: Conv2d::new("attention.os.out", d, 1, 3),
            fuse: Conv2d::new("attention.fuse", 3, 1, 3),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cim(&self) -> &Cim {
        &self.cim
    }

    pub fn paspp(&self, level: usize) -> &Paspp {
        &self.paspp[level - 2]
    }

    pub fn head_layers(&self) -> HeadLayers<'_> {
        HeadLayers {
            bs_mid: &self.bs_mid,
            bs_out: &self.bs_out,
            os_mid: &self.os_mid,
            os_out: &self.os_out,
            fuse: &self.fuse,
            gate4: &self.gates[2],
        }
    }

    fn layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.cim.layers().to_vec();
        for p in &self.paspp {
            v.extend(p.layers());
        }
        v.extend(self.gates.iter());
        v.extend(self.proj.iter());
        v.extend([&self.bs_mid, &self.bs_out, &self.os_mid, &self.os_out, &self.fuse]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|c| c.num_params()).sum()
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for c in self.layers() {
            c.init(store, seed);
        }
    }

    /// `sigma(conv3x3(a)) * b`
    fn gate(&self, g: &mut Graph, store: &ParamStore, conv: &Conv2d, a: Var, b: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(b);
        if g.shape(a)[2..] != [h, w] {
            return Err(Error::Shape(format!(
                "gate input {:?} not aligned with {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        let z = conv.forward(g, store, a)?;
        let s = g.sigmoid(z);
        g.mul(s, b)
    }

    /// Consecutive gating, deepest level first. Returns the raw gated maps
    /// `[g2, g3, g4]` and their stride-4 projections `[AG2, AG3, AG4]`.
    pub fn gate_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        guide: Var,
        enhanced: [Var; 3],
    ) -> Result<([Var; 3], [Var; 3])> {
        let [_, _, h1, w1] = g.shape(guide);
        let [_, _, h4, w4] = g.shape(enhanced[2]);
        let pooled = if h4 > 0 && h1 % h4 == 0 && w1 % w4 == 0 && h1 / h4 == w1 / w4 {
            g.avg_pool(guide, h1 / h4)?
        } else {
            g.resize(guide, h4, w4)?
        };
        let g4 = self.gate(g, store, &self.gates[2], pooled, enhanced[2])?;
        let [_, _, h3, w3] = g.shape(enhanced[1]);
        let up4 = g.resize(g4, h3, w3)?;
        let g3 = self.gate(g, store, &self.gates[1], up4, enhanced[1])?;
        let [_, _, h2, w2] = g.shape(enhanced[0]);
        let up3 = g.resize(g3, h2, w2)?;
        let g2 = self.gate(g, store, &self.gates[0], up3, enhanced[0])?;
        let gated = [g2, g3, g4];
        let mut ag = [g2; 3];
        for i in 0..3 {
            let p = self.proj[i].forward(g, store, gated[i])?;
            ag[i] = g.resize(p, h1, w1)?;
        }
        Ok((gated, ag))
    }

    fn check_mask(&self, g: &Graph, mask: Var, ag: &[Var; 3]) -> Result<()> {
        let [n, _, h, w] = g.shape(ag[0]);
        if g.shape(mask) != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "region map {:?} not aligned with gated features {:?}",
                g.shape(mask),
                g.shape(ag[0])
            )));
        }
        Ok(())
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, mid: &Conv2d, out: &Conv2d, streams: &[Var]) -> Result<Var> {
        let cat = g.concat(streams)?;
        let z = mid.forward(g, store, cat)?;
        let a = g.relu(z);
        out.forward(g, store, a)
    }

    /// Background semantic logits from `S`-masked gated features.
    pub fn background_head(&self, g: &mut Graph, store: &ParamStore, strong: Var, ag: &[Var; 3]) -> Result<Var> {
        self.check_mask(g, strong, ag)?;
        let streams = ag.iter().map(|&a| g.mul_mask(a, strong)).collect::<Result<Vec<_>>>()?;
        self.head(g, store, &self.bs_mid, &self.bs_out, &streams)
    }

    /// Object semantic logits from both the `S`- and `W`-masked streams.
    pub fn object_head(&self, g: &mut Graph, store: &ParamStore, strong: Var, weak: Var, ag: &[Var; 3]) -> Result<Var> {
        self.check_mask(g, strong, ag)?;
        self.check_mask(g, weak, ag)?;
        let mut streams = ag.iter().map(|&a| g.mul_mask(a, strong)).collect::<Result<Vec<_>>>()?;
        for &a in ag {
            streams.push(g.mul_mask(a, weak)?);
        }
        self.head(g, store, &self.os_mid, &self.os_out, &streams)
    }

    pub fn fuse_final(&self, g: &mut Graph, store: &ParamStore, m: Var, bs: Var, os: Var) -> Result<Var> {
        if g.shape(m) != g.shape(bs) || g.shape(m) != g.shape(os) {
            return Err(Error::Shape(format!(
                "cannot fuse {:?}, {:?}, {:?}",
                g.shape(m),
                g.shape(bs),
                g.shape(os)
            )));
        }
        let cat = g.concat(&[m, bs, os])?;
        self.fuse.forward(g, store, cat)
    }

    /// Full refinement from the pyramid and the early-map logits.
    ///
    /// `drop_os` replaces the object-semantic logits by zeros before the
    /// final fusion (inference-time ablation).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: &[Var; 4],
        m_logits: Var,
        partition: &PartitionConfig,
        drop_os: bool,
    ) -> Result<AttentionVars> {
        let guide = self.cim.forward(g, store, f[0])?;
        let enhanced = [
            self.paspp[0].forward(g, store, f[1])?,
            self.paspp[1].forward(g, store, f[2])?,
            self.paspp[2].forward(g, store, f[3])?,
        ];
        let (gated, ag) = self.gate_sequence(g, store, guide, enhanced)?;
        let p = g.sigmoid(m_logits);
        let (strong, weak) = partition_vars(g, p, partition);
        let bs = self.background_head(g, store, strong, &ag)?;
        let os_full = self.object_head(g, store, strong, weak, &ag)?;
        let os = if drop_os {
            g.constant(g.shape(os_full), 0.0)
        } else {
            os_full
        };
        let final_logits = self.fuse_final(g, store, m_logits, bs, os)?;
        Ok(AttentionVars {
            guide,
            enhanced,
            gated,
            ag,
            strong,
            weak,
            bs,
            os: os_full,
            final_logits,
        })
    }
}

/// Borrowed view of the head layers, for tests that tie weights across heads.
pub struct HeadLayers<'a> {
    pub bs_mid: &'a Conv2d,
    pub bs_out: &'a Conv2d,
    pub os_mid: &'a Conv2d,
    pub os_out: &'a Conv2d,
    pub fuse: &'a Conv2d,
    pub gate4: &'a Conv2d,
}

fn single(g: &mut Graph, t: &FeatureMap) -> Var {
    g.input(t.tensor().clone())
}

fn to_feature(g: &Graph, v: Var, level: u8) -> Result<FeatureMap> {
    FeatureMap::new(g.value(v).clone(), level)
}

pub fn cim_channel_attention(cim: &Cim, store: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let v = single(&mut g, x);
    let out = cim.channel_attention(&mut g, store, v)?;
    to_feature(&g, out, x.level())
}

pub fn cim_spatial_attention(cim: &Cim, store: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let v = single(&mut g, x);
    let out = cim.spatial_attention(&mut g, store, v)?;
    to_feature(&g, out, x.level())
}

pub fn cim(cim: &Cim, store: &ParamStore, f1: &FeatureMap) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let v = single(&mut g, f1);
    let out = cim.forward(&mut g, store, v)?;
    to_feature(&g, out, 1)
}

pub fn paspp(module: &Paspp, store: &ParamStore, f: &FeatureMap) -> Result<FeatureMap> {
    if !(2..=4).contains(&f.level()) {
        return Err(Error::Invalid(format!("PASPP applies to levels 2..=4, got {}", f.level())));
    }
    let mut g = Graph::new();
    let v = single(&mut g, f);
    let out = module.forward(&mut g, store, v)?;
    to_feature(&g, out, f.level())
}

pub fn gate_sequence(
    ca: &ContinuousAttention,
    store: &ParamStore,
    guide: &FeatureMap,
    enhanced: [&FeatureMap; 3],
) -> Result<GatedFeature> {
    let mut g = Graph::new();
    let gv = single(&mut g, guide);
    let ev = enhanced.map(|e| single(&mut g, e));
    let (_, ag) = ca.gate_sequence(&mut g, store, gv, ev)?;
    Ok(GatedFeature {
        levels: [
            to_feature(&g, ag[0], 1)?,
            to_feature(&g, ag[1], 1)?,
            to_feature(&g, ag[2], 1)?,
        ],
    })
}

fn gated_inputs(g: &mut Graph, ag: &GatedFeature) -> [Var; 3] {
    [0, 1, 2].map(|i| g.input(ag.levels[i].tensor().clone()))
}

pub fn background_head(
    ca: &ContinuousAttention,
    store: &ParamStore,
    part: &RegionPartition,
    ag: &GatedFeature,
) -> Result<MaskTensor> {
    let mut g = Graph::new();
    let s = g.input(part.strong.tensor().clone());
    let a = gated_inputs(&mut g, ag);
    let out = ca.background_head(&mut g, store, s, &a)?;
    MaskTensor::logits(g.value(out).clone())
}

pub fn object_head(
    ca: &ContinuousAttention,
    store: &ParamStore,
    part: &RegionPartition,
    ag: &GatedFeature,
) -> Result<MaskTensor> {
    let mut g = Graph::new();
    let s = g.input(part.strong.tensor().clone());
    let w = g.input(part.weak.tensor().clone());
    let a = gated_inputs(&mut g, ag);
    let out = ca.object_head(&mut g, store, s, w, &a)?;
    MaskTensor::logits(g.value(out).clone())
}

pub fn fuse_final(
    ca: &ContinuousAttention,
    store: &ParamStore,
    m: &EarlyGlobalMap,
    bs: &MaskTensor,
    os: &MaskTensor,
) -> Result<MaskTensor> {
    let mut g = Graph::new();
    let mv = g.input(m.logits.tensor().clone());
    let bv = g.input(bs.tensor().clone());
    let ov = g.input(os.tensor().clone());
    let out = ca.fuse_final(&mut g, store, mv, bv, ov)?;
    MaskTensor::logits(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CH: [usize; 4] = [8, 8, 12, 16];

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn feature(level: u8, c: usize, h: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(random([1, c, h, h], seed), level).unwrap()
    }

    fn module(seed: u64) -> (ContinuousAttention, ParamStore) {
        let ca = ContinuousAttention::new(CH, 4, 4).unwrap();
        let mut store = ParamStore::default();
        ca.init(&mut store, seed);
        for (name, t) in store.iter_mut() {
            if name.ends_with(".bias") {
                *t = t.map(|_| 0.05);
            }
        }
        (ca, store)
    }

    fn channel_gate_values(cim: &Cim, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let gate = cim.channel_gate(&mut g, store, v).unwrap();
        g.value(gate).clone()
    }

    #[test]
    fn channel_attention_zero_and_shape() {
        let (ca, store) = module(0);
        let zero = FeatureMap::new(Tensor::zeros([1, 8, 16, 16]), 1).unwrap();
        let out = cim_channel_attention(ca.cim(), &store, &zero).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.hwc(), (16, 16, 8));
        let cim32 = Cim::new(32, 4).unwrap();
        let mut s = ParamStore::default();
        for c in cim32.layers() {
            c.init(&mut s, 1);
        }
        let x = feature(1, 32, 16, 2);
        assert_eq!(cim_channel_attention(&cim32, &s, &x).unwrap().hwc(), (16, 16, 32));
        assert!(Cim::new(3, 4).is_err());
    }

    #[test]
    fn spatial_attention_zero_and_channel_constant() {
        let (ca, store) = module(1);
        let zero = FeatureMap::new(Tensor::zeros([1, 8, 8, 8]), 1).unwrap();
        let out = cim_spatial_attention(ca.cim(), &store, &zero).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_fn([1, 8, 6, 6], |_, _, y, x| (y as f64 - x as f64) * 0.3);
        let mut g = Graph::new();
        let v = g.input(x);
        let rm = g.channel_max(v);
        let ra = g.channel_mean(v);
        for (a, b) in g.value(rm).data().iter().zip(g.value(ra).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let r = feature(1, 8, 8, 3);
        assert_eq!(cim_spatial_attention(ca.cim(), &store, &r).unwrap().hwc(), r.hwc());
    }

    #[test]
    fn cim_composition() {
        let (ca, store) = module(2);
        let zero = FeatureMap::new(Tensor::zeros([1, 8, 8, 8]), 1).unwrap();
        assert!(cim(ca.cim(), &store, &zero).unwrap().tensor().data().iter().all(|&v| v == 0.0));
        let f1 = feature(1, 8, 8, 4);
        let a = cim(ca.cim(), &store, &f1).unwrap();
        let b = cim(ca.cim(), &store, &f1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensor(), f1.tensor());
        let wrong = feature(1, 4, 8, 4);
        assert!(cim(ca.cim(), &store, &wrong).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        // unit-scale inputs: in f64 a sigmoid rounds to exactly 1 past a pre-activation of ~37
        #[test]
        fn gates_are_bounded_and_shape_preserving(seed in 0u64..10_000, h in 1usize..10, w in 1usize..10, scale in 0.01f64..4.0) {
            let (ca, store) = module(seed % 7);
            let x = random([1, 8, h, w], seed).map(|v| v * scale);
            let gate = channel_gate_values(ca.cim(), &store, &x);
            prop_assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let sg = ca.cim().spatial_gate(&mut g, &store, v).unwrap();
            prop_assert!(g.value(sg).data().iter().all(|&v| v > 0.0 && v < 1.0));

            let f = FeatureMap::new(x.clone(), 1).unwrap();
            let c = cim_channel_attention(ca.cim(), &store, &f).unwrap();
            let s = cim_spatial_attention(ca.cim(), &store, &f).unwrap();
            prop_assert_eq!(c.hwc(), f.hwc());
            prop_assert_eq!(s.hwc(), f.hwc());
            for ((a, b), o) in c.tensor().data().iter().zip(s.tensor().data()).zip(x.data()) {
                prop_assert!(a.abs() <= o.abs());
                prop_assert!(b.abs() <= o.abs());
            }
        }
    }

    #[test]
    fn paspp_shape_and_constants() {
        let (ca, store) = module(3);
        let f = feature(3, 12, 5, 9);
        let out = paspp(ca.paspp(3), &store, &f).unwrap();
        assert_eq!(out.hwc(), (5, 5, 12));
        let c = FeatureMap::new(Tensor::from_fn([1, 12, 7, 7], |_, c, _, _| c as f64 * 0.1 - 0.4), 3).unwrap();
        let out = paspp(ca.paspp(3), &store, &c).unwrap();
        for ch in 0..12 {
            let plane = out.tensor().channel(ch);
            let first = plane.data()[0];
            assert!(plane.data().iter().all(|&v| (v - first).abs() < 1e-12), "channel {ch}");
        }
        assert!(paspp(ca.paspp(3), &store, &feature(1, 12, 5, 9)).is_err());
    }

    #[test]
    fn paspp_dilation_eight_matters() {
        let (ca, store) = module(4);
        let pattern = FeatureMap::new(
            Tensor::from_fn([1, 8, 24, 24], |_, c, y, x| ((x / 6 + y / 6) % 2) as f64 + 0.1 * c as f64),
            2,
        )
        .unwrap();
        let full = paspp(ca.paspp(2), &store, &pattern).unwrap();
        let mut ablated = store.clone();
        let name = ca.paspp(2).branch_weight(8).unwrap();
        let w = ablated.get_mut(&name).unwrap();
        *w = w.map(|_| 0.0);
        let cut = paspp(ca.paspp(2), &ablated, &pattern).unwrap();
        assert!(full.tensor().data().iter().zip(cut.tensor().data()).any(|(a, b)| (a - b).abs() > 1e-9));
        assert!(ca.paspp(2).branch_weight(3).is_none());
    }

    fn early(p: &[f64], h: usize, w: usize) -> EarlyGlobalMap {
        let logits = p.iter().map(|&v| (v / (1.0 - v)).ln()).collect();
        EarlyGlobalMap::from_logits(Tensor::from_vec([1, 1, h, w], logits).unwrap()).unwrap()
    }

    #[test]
    fn partition_examples() {
        let m = EarlyGlobalMap::from_logits(Tensor::zeros([1, 1, 3, 3])).unwrap();
        let soft = partition_regions(&m, &PartitionConfig::default()).unwrap();
        assert!(soft.strong.tensor().data().iter().all(|&v| v == 0.5));
        assert!(soft.weak.tensor().data().iter().all(|&v| v == 1.0));

        let sat = EarlyGlobalMap::from_logits(Tensor::full([1, 1, 2, 2], 40.0)).unwrap();
        let soft = partition_regions(&sat, &PartitionConfig::default()).unwrap();
        assert!(soft.strong.tensor().data().iter().all(|&v| v > 1.0 - 1e-12));
        assert!(soft.weak.tensor().data().iter().all(|&v| v < 1e-12));

        let hard = PartitionConfig::hard(0.6, 0.1).unwrap();
        let part = partition_regions(&early(&[0.7, 0.55], 1, 2), &hard).unwrap();
        assert_eq!(part.strong.tensor().data(), &[1.0, 0.0]);
        assert_eq!(part.weak.tensor().data(), &[0.0, 1.0]);
        assert!(PartitionConfig::hard(0.3, 0.4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn partition_invariants(seed in any::<u64>(), theta in 0.2f64..0.8, band_frac in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_fn([1, 1, 4, 4], |_, _, _, _| rng.random_range(-8.0..8.0));
            let m = EarlyGlobalMap::from_logits(logits).unwrap();
            let soft = partition_regions(&m, &PartitionConfig::default()).unwrap();
            for ((&p, &s), &w) in m.probability.tensor().data().iter().zip(soft.strong.tensor().data()).zip(soft.weak.tensor().data()) {
                prop_assert_eq!(s, p);
                prop_assert_eq!(s + (1.0 - s), 1.0);
                prop_assert_eq!(w, 1.0 - (2.0 * p - 1.0).abs());
                prop_assert!(w <= 1.0);
            }
            let band = band_frac * theta.min(1.0 - theta).min(0.5);
            let hard = PartitionConfig::hard(theta, band).unwrap();
            let part = partition_regions(&m, &hard).unwrap();
            for (s, w) in part.strong.tensor().data().iter().zip(part.weak.tensor().data()) {
                prop_assert_eq!(s * w, 0.0);
            }
        }
    }

    fn gated(ca: &ContinuousAttention, store: &ParamStore, guide: &FeatureMap) -> GatedFeature {
        let e2 = feature(2, 8, 8, 20);
        let e3 = feature(3, 12, 4, 21);
        let e4 = feature(4, 16, 2, 22);
        gate_sequence(ca, store, guide, [&e2, &e3, &e4]).unwrap()
    }

    #[test]
    fn gate_sequence_shapes_and_zero_guide() {
        let (ca, store) = module(5);
        let guide = feature(1, 8, 16, 23);
        let ag = gated(&ca, &store, &guide);
        for a in &ag.levels {
            assert_eq!(a.hwc(), (16, 16, 4));
        }
        let zero = FeatureMap::new(Tensor::zeros([1, 8, 16, 16]), 1).unwrap();
        let ag0 = gated(&ca, &store, &zero);
        assert_ne!(ag0.levels[0], ag.levels[0]);

        // with a zero guide the deepest gate is the constant sigma(bias)
        let mut g = Graph::new();
        let gv = g.input(Tensor::zeros([1, 8, 16, 16]));
        let e4 = feature(4, 16, 2, 22);
        let ev = [
            g.input(feature(2, 8, 8, 20).tensor().clone()),
            g.input(feature(3, 12, 4, 21).tensor().clone()),
            g.input(e4.tensor().clone()),
        ];
        let (raw, _) = ca.gate_sequence(&mut g, &store, gv, ev).unwrap();
        let k = sigmoid(0.05);
        for (a, b) in g.value(raw[2]).data().iter().zip(e4.tensor().data()) {
            assert!((a - k * b).abs() < 1e-14);
        }
    }

    fn region(h: usize, s: f64, w: f64) -> RegionPartition {
        RegionPartition {
            strong: MaskTensor::probability(Tensor::full([1, 1, h, h], s)).unwrap(),
            weak: MaskTensor::probability(Tensor::full([1, 1, h, h], w)).unwrap(),
            config: PartitionConfig::default(),
        }
    }

    #[test]
    fn heads_with_zero_masks_are_bias_only() {
        let (ca, store) = module(6);
        let ag = gated(&ca, &store, &feature(1, 8, 16, 24));
        let bs = background_head(&ca, &store, &region(16, 0.0, 0.3), &ag).unwrap();
        assert_eq!((bs.height(), bs.width(), bs.tensor().channels()), (16, 16, 1));
        assert!(bs.tensor().data().iter().all(|&v| v == 0.05));
        let os = object_head(&ca, &store, &region(16, 0.0, 0.0), &ag).unwrap();
        assert!(os.tensor().data().iter().all(|&v| v == 0.05));
        assert_eq!(os.tensor().channels(), 1);
        assert!(background_head(&ca, &store, &region(8, 1.0, 0.0), &ag).is_err());
    }

    #[test]
    fn background_head_with_unit_mask_sees_plain_features() {
        let (ca, store) = module(7);
        let ag = gated(&ca, &store, &feature(1, 8, 16, 25));
        let bs = background_head(&ca, &store, &region(16, 1.0, 0.0), &ag).unwrap();
        let mut g = Graph::new();
        let a = gated_inputs(&mut g, &ag);
        let cat = g.concat(&a).unwrap();
        let z = ca.bs_mid.forward(&mut g, &store, cat).unwrap();
        let z = g.relu(z);
        let out = ca.bs_out.forward(&mut g, &store, z).unwrap();
        assert_eq!(g.value(out), bs.tensor());
    }

    #[test]
    fn object_head_reduces_to_background_head() {
        let (ca, mut store) = module(8);
        let ag = gated(&ca, &store, &feature(1, 8, 16, 26));
        let layers = ca.head_layers();
        let d = ca.width();
        let bs_mid = store.get(&layers.bs_mid.weight_name()).unwrap().clone();
        // OS mid = [BS mid | 0] over the (S stream, W stream) input channels
        let tied = Tensor::from_fn([d, 6 * d, 3, 3], |o, i, y, x| if i < 3 * d { bs_mid.get(o, i, y, x) } else { 0.0 });
        store.insert(layers.os_mid.weight_name(), tied);
        let bs_out_w = store.get(&layers.bs_out.weight_name()).unwrap().clone();
        let bs_out_b = store.get(&layers.bs_out.bias_name()).unwrap().clone();
        store.insert(layers.os_out.weight_name(), bs_out_w);
        store.insert(layers.os_out.bias_name(), bs_out_b);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::from_fn([1, 1, 16, 16], |_, _, _, _| rng.random_range(0.0..1.0));
        let part = RegionPartition {
            strong: MaskTensor::probability(s).unwrap(),
            weak: MaskTensor::probability(Tensor::zeros([1, 1, 16, 16])).unwrap(),
            config: PartitionConfig::default(),
        };
        let bs = background_head(&ca, &store, &part, &ag).unwrap();
        let os = object_head(&ca, &store, &part, &ag).unwrap();
        assert_eq!(bs, os);
    }

    #[test]
    fn fuse_final_zero_and_sensitivity() {
        let (ca, store) = module(9);
        let zero = MaskTensor::logits(Tensor::zeros([1, 1, 8, 8])).unwrap();
        let m0 = EarlyGlobalMap::from_logits(Tensor::zeros([1, 1, 8, 8])).unwrap();
        let out = fuse_final(&ca, &store, &m0, &zero, &zero).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.05));

        let m = EarlyGlobalMap::from_logits(random([1, 1, 8, 8], 1)).unwrap();
        let bs = MaskTensor::logits(random([1, 1, 8, 8], 2)).unwrap();
        let os = MaskTensor::logits(random([1, 1, 8, 8], 3)).unwrap();
        let a = fuse_final(&ca, &store, &m, &bs, &os).unwrap();
        assert_eq!(a, fuse_final(&ca, &store, &m, &bs, &os).unwrap());
        let os2 = MaskTensor::logits(os.tensor().map(|v| v + 0.5)).unwrap();
        assert_ne!(a, fuse_final(&ca, &store, &m, &bs, &os2).unwrap());
        let small = MaskTensor::logits(Tensor::zeros([1, 1, 4, 4])).unwrap();
        assert!(fuse_final(&ca, &store, &m, &bs, &small).is_err());
    }

    #[test]
    fn forward_shapes_and_os_ablation() {
        let (ca, store) = module(10);
        let mut g = Graph::new();
        let f = [
            g.input(random([2, 8, 16, 16], 30)),
            g.input(random([2, 8, 8, 8], 31)),
            g.input(random([2, 12, 4, 4], 32)),
            g.input(random([2, 16, 2, 2], 33)),
        ];
        let m = g.input(random([2, 1, 16, 16], 34));
        let cfg = PartitionConfig::default();
        let full = ca.forward(&mut g, &store, &f, m, &cfg, false).unwrap();
        let cut = ca.forward(&mut g, &store, &f, m, &cfg, true).unwrap();
        for v in [full.bs, full.os, full.final_logits, full.strong, full.weak] {
            assert_eq!(g.shape(v), [2, 1, 16, 16]);
        }
        assert_eq!(g.value(full.os), g.value(cut.os));
        assert_ne!(g.value(full.final_logits), g.value(cut.final_logits));
        assert!(g.value(full.final_logits).all_finite());
    }
}
