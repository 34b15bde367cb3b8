//! Early global map `M` from the feature pyramid.
//!
//! A reference three-branch ("trilateral") decoder sits behind
//! [`decode_early_map`]; any other decoder with the same signature can be
//! swapped in without touching the rest of the network.
//!
//! * semantic: top-down aggregation of `f4` into `f3`, refined by a 3x3 conv;
//! * boundary: high-pass (`x - mean3x3(x)`) of `f1` and `f2`, bias-free so a
//!   constant pyramid yields exactly zero;
//! * detail: `f1` and `f2` carried at stride 4.
//!
//! All branches end at stride 4 with `width` channels and are fused by
//! `concat -> 3x3 conv -> ReLU -> 3x3 conv` into one logit channel.

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Conv2d, ParamStore};
use crate::tensor::Tensor;
use crate::types::{sigmoid_map, FeatureMap, MaskTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Semantic,
    Boundary,
    Detail,
}

/// `M` as logits plus its sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyGlobalMap {
    pub logits: MaskTensor,
    pub probability: MaskTensor,
}

impl EarlyGlobalMap {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let logits = MaskTensor::logits(logits)?;
        let probability = sigmoid_map(&logits)?;
        Ok(Self { logits, probability })
    }
}

#[derive(Clone, Debug)]
pub struct CtdDecoder {
    width: usize,
    sem_lat4: Conv2d,
    sem_lat3: Conv2d,
    sem_fuse: Conv2d,
    bnd_lat1: Conv2d,
    bnd_lat2: Conv2d,
    bnd_fuse: Conv2d,
    det_lat1: Conv2d,
    det_lat2: Conv2d,
    det_fuse: Conv2d,
    out_mid: Conv2d,
    out_head: Conv2d,
}

impl CtdDecoder {
    pub fn new(channels: [usize; 4], width: usize) -> Self {
        let [c1, c2, c3, c4] = channels;
        let d = width;
        Self {
            width,
            sem_lat4: Conv2d::new("ctd.semantic.lat4", c4, d, 1),
            sem_lat3: Conv2d::new("ctd.semantic.lat3", c3, d, 1),
            sem_fuse: Conv2d::new("ctd.semantic.fuse", d, d, 3),
            bnd_lat1: Conv2d::new("ctd.boundary.lat1", c1, d, 1).without_bias(),
            bnd_lat2: Conv2d::new("ctd.boundary.lat2", c2, d, 1).without_bias(),
            bnd_fuse: Conv2d::new("ctd.boundary.fuse", d, d, 3).without_bias(),
            det_lat1: Conv2d::new("ctd.detail.lat1", c1, d, 1),
            det_lat2: Conv2d::new("ctd.detail.lat2", c2, d, 1),
            det_fuse: Conv2d::new("ctd.detail.fuse", d, d, 3),
            out_mid: Conv2d::new("ctd.fuse.mid", 3 * d, d, 3).without_bias(),
            out_head: Conv2d::new("ctd.fuse.out", d, 1, 3),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn layers(&self) -> [&Conv2d; 11] {
        [
            &self.sem_lat4,
            &self.sem_lat3,
            &self.sem_fuse,
            &self.bnd_lat1,
            &self.bnd_lat2,
            &self.bnd_fuse,
            &self.det_lat1,
            &self.det_lat2,
            &self.det_fuse,
            &self.out_mid,
            &self.out_head,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|c| c.num_params()).sum()
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for c in self.layers() {
            c.init(store, seed);
        }
    }

    /// One branch, resampled to the resolution of `f1`.
    pub fn branch(&self, g: &mut Graph, store: &ParamStore, f: &[Var; 4], branch: Branch) -> Result<Var> {
        let [_, _, h1, w1] = g.shape(f[0]);
        let [_, _, h2, w2] = g.shape(f[1]);
        let [_, _, h3, w3] = g.shape(f[2]);
        let [_, _, h4, w4] = g.shape(f[3]);
        if h2 > h1 || h3 > h2 || h4 > h3 || w2 > w1 || w3 > w2 || w4 > w3 {
            return Err(Error::Shape("pyramid levels must coarsen monotonically".into()));
        }
        match branch {
            Branch::Semantic => {
                let l4 = self.sem_lat4.forward(g, store, f[3])?;
                let l4 = g.resize(l4, h3, w3)?;
                let l3 = self.sem_lat3.forward(g, store, f[2])?;
                let t = g.add(l4, l3)?;
                let z = self.sem_fuse.forward(g, store, t)?;
                let a = g.relu(z);
                g.resize(a, h1, w1)
            }
            Branch::Boundary => {
                let hp1 = high_pass(g, f[0])?;
                let hp2 = high_pass(g, f[1])?;
                let l1 = self.bnd_lat1.forward(g, store, hp1)?;
                let l2 = self.bnd_lat2.forward(g, store, hp2)?;
                let l2 = g.resize(l2, h1, w1)?;
                let t = g.add(l1, l2)?;
                let z = self.bnd_fuse.forward(g, store, t)?;
                Ok(g.relu(z))
            }
            Branch::Detail => {
                let l1 = self.det_lat1.forward(g, store, f[0])?;
                let l2 = self.det_lat2.forward(g, store, f[1])?;
                let l2 = g.resize(l2, h1, w1)?;
                let t = g.add(l1, l2)?;
                let z = self.det_fuse.forward(g, store, t)?;
                Ok(g.relu(z))
            }
        }
    }

    /// Concatenates the three branches and reduces them to one logit channel.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, s: Var, b: Var, d: Var) -> Result<Var> {
        if g.shape(s) != g.shape(b) || g.shape(s) != g.shape(d) {
            return Err(Error::Shape(format!(
                "branch shapes differ: {:?}, {:?}, {:?}",
                g.shape(s),
                g.shape(b),
                g.shape(d)
            )));
        }
        let cat = g.concat(&[s, b, d])?;
        let z = self.out_mid.forward(g, store, cat)?;
        let a = g.relu(z);
        self.out_head.forward(g, store, a)
    }

    /// Logits of the early global map at the resolution of `f1`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: &[Var; 4]) -> Result<Var> {
        let s = self.branch(g, store, f, Branch::Semantic)?;
        let b = self.branch(g, store, f, Branch::Boundary)?;
        let d = self.branch(g, store, f, Branch::Detail)?;
        self.fuse(g, store, s, b, d)
    }
}

fn high_pass(g: &mut Graph, x: Var) -> Result<Var> {
    let avg = g.local_mean3(x);
    g.sub(x, avg)
}

pub(crate) fn pyramid_inputs(g: &mut Graph, p: &FeaturePyramid) -> [Var; 4] {
    [0, 1, 2, 3].map(|i| g.input(p.levels[i].tensor().clone()))
}

pub fn decode_early_map(dec: &CtdDecoder, store: &ParamStore, p: &FeaturePyramid) -> Result<EarlyGlobalMap> {
    let mut g = Graph::new();
    let f = pyramid_inputs(&mut g, p);
    let m = dec.forward(&mut g, store, &f)?;
    EarlyGlobalMap::from_logits(g.value(m).clone())
}

pub fn branch_forward(dec: &CtdDecoder, store: &ParamStore, p: &FeaturePyramid, branch: Branch) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let f = pyramid_inputs(&mut g, p);
    let out = dec.branch(&mut g, store, &f, branch)?;
    FeatureMap::new(g.value(out).clone(), 1)
}

pub fn fuse_branches(
    dec: &CtdDecoder,
    store: &ParamStore,
    s: &FeatureMap,
    b: &FeatureMap,
    d: &FeatureMap,
) -> Result<EarlyGlobalMap> {
    let mut g = Graph::new();
    let [s, b, d] = [s, b, d].map(|m| g.input(m.tensor().clone()));
    let m = dec.fuse(&mut g, store, s, b, d)?;
    EarlyGlobalMap::from_logits(g.value(m).clone())
}
