//! Training objective: active-contour (ACE) term plus binary cross-entropy.
//!
//! For a ground truth `y` and a predicted probability map `p`:
//!
//! ```text
//! ACE(y, p) = mean[(alpha + beta * K^2) |grad p|]
//!           + mean[lambda * y * (c1 - p)^2]
//!           + mean[lambda * (1 - y) * (c2 - p)^2]
//! BCE(y, p) = -mean[y ln p + (1 - y) ln(1 - p)]      (p clamped to [eps, 1 - eps])
//! loss      = ACE + BCE
//! ```
//!
//! `K = div(grad p / (|grad p| + eps))` is the curvature of the level sets of
//! the prediction. Gradients are central differences with replicate borders.
//! With that convention a bright disc of radius `r` has `K ~ -1/r` on its
//! rim (the normal points inward, toward increasing `p`).

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Axis;
use crate::tensor::Tensor;
use crate::types::{MaskKind, MaskTensor};

/// Scalar components of the ACE term plus the curvature diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct AceTerms {
    pub length_curvature: f64,
    pub region_in: f64,
    pub region_out: f64,
    pub curvature_map: MaskTensor,
}

impl AceTerms {
    pub fn total(&self) -> f64 {
        self.length_curvature + self.region_in + self.region_out
    }
}

/// Graph handles for the ACE components.
#[derive(Clone, Copy, Debug)]
pub struct AceVars {
    pub total: Var,
    pub length_curvature: Var,
    pub region_in: Var,
    pub region_out: Var,
    pub curvature: Var,
}

pub fn bce_var(g: &mut Graph, y: Var, p: Var, eps: f64) -> Result<Var> {
    let pc = g.clamp(p, eps, 1.0 - eps);
    let log_p = g.ln(pc);
    let one_minus = g.rsub_scalar(1.0, pc);
    let log_q = g.ln(one_minus);
    let not_y = g.rsub_scalar(1.0, y);
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll);
    Ok(g.scale(m, -1.0))
}

/// Returns `(|grad p|, K)`.
pub fn curvature_vars(g: &mut Graph, p: Var, eps: f64) -> Result<(Var, Var)> {
    let [_, _, h, w] = g.shape(p);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("curvature needs at least 3x3, got {h}x{w}")));
    }
    let gx = g.diff(p, Axis::X);
    let gy = g.diff(p, Axis::Y);
    let mag = g.magnitude(gx, gy)?;
    let denom = g.add_scalar(mag, eps);
    let nx = g.div(gx, denom)?;
    let ny = g.div(gy, denom)?;
    let dnx = g.diff(nx, Axis::X);
    let dny = g.diff(ny, Axis::Y);
    let k = g.add(dnx, dny)?;
    Ok((mag, k))
}

pub fn ace_vars(g: &mut Graph, y: Var, p: Var, cfg: &LossConfig) -> Result<AceVars> {
    if g.shape(y) != g.shape(p) {
        return Err(Error::Shape(format!(
            "ground truth {:?} vs prediction {:?}",
            g.shape(y),
            g.shape(p)
        )));
    }
    let (mag, k) = curvature_vars(g, p, cfg.epsilon)?;
    let k2 = g.square(k);
    let bk2 = g.scale(k2, cfg.beta);
    let weight = g.add_scalar(bk2, cfg.alpha);
    let lc = g.mul(weight, mag)?;
    let length_curvature = g.mean(lc);

    let dev_in = g.rsub_scalar(cfg.c1, p);
    let sq_in = g.square(dev_in);
    let rin = g.mul(y, sq_in)?;
    let rin = g.mean(rin);
    let region_in = g.scale(rin, cfg.lambda);

    let dev_out = g.rsub_scalar(cfg.c2, p);
    let sq_out = g.square(dev_out);
    let not_y = g.rsub_scalar(1.0, y);
    let rout = g.mul(not_y, sq_out)?;
    let rout = g.mean(rout);
    let region_out = g.scale(rout, cfg.lambda);

    let t = g.add(length_curvature, region_in)?;
    let total = g.add(t, region_out)?;
    Ok(AceVars {
        total,
        length_curvature,
        region_in,
        region_out,
        curvature: k,
    })
}

/// `ACE + BCE` on one prediction.
pub fn combined_var(g: &mut Graph, y: Var, p: Var, cfg: &LossConfig) -> Result<Var> {
    let ace = ace_vars(g, y, p, cfg)?;
    let bce = bce_var(g, y, p, cfg.epsilon)?;
    g.add(ace.total, bce)
}

/// The four supervised outputs of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Head {
    Final,
    Early,
    Bs,
    Os,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Final, Head::Early, Head::Bs, Head::Os];

    pub fn name(self) -> &'static str {
        match self {
            Head::Final => "final",
            Head::Early => "early",
            Head::Bs => "bs",
            Head::Os => "os",
        }
    }

    pub fn weight(self, cfg: &LossConfig) -> f64 {
        match self {
            Head::Final => cfg.weights.final_mask,
            Head::Early => cfg.weights.early,
            Head::Bs => cfg.weights.bs,
            Head::Os => cfg.weights.os,
        }
    }
}

/// Weighted sum of the combined loss over every head. `probs` holds
/// probability maps already at the resolution of `y`. Returns the total and
/// the per-head (unweighted) losses.
pub fn total_var(
    g: &mut Graph,
    y: Var,
    probs: &[(Head, Var)],
    cfg: &LossConfig,
) -> Result<(Var, Vec<(Head, Var)>)> {
    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(4);
    for head in Head::ALL {
        let p = probs
            .iter()
            .find(|(h, _)| *h == head)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Invalid(format!("missing output `{}`", head.name())))?;
        let w = head.weight(cfg);
        if w == 0.0 {
            continue;
        }
        let l = combined_var(g, y, p, cfg)?;
        parts.push((head, l));
        let wl = g.scale(l, w);
        total = Some(match total {
            Some(t) => g.add(t, wl)?,
            None => wl,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant([1, 1, 1, 1], 0.0),
    };
    Ok((total, parts))
}

fn expect_gt(y: &MaskTensor) -> Result<()> {
    if y.kind() != MaskKind::GroundTruth {
        return Err(Error::Invalid(format!("expected a ground-truth mask, got {:?}", y.kind())));
    }
    Ok(())
}

fn expect_prob(p: &MaskTensor) -> Result<()> {
    if p.kind() != MaskKind::Probability {
        return Err(Error::Invalid(format!("expected a probability map, got {:?}", p.kind())));
    }
    Ok(())
}

fn pair(y: &MaskTensor, p: &MaskTensor) -> Result<(Graph, Var, Var)> {
    expect_gt(y)?;
    expect_prob(p)?;
    if y.tensor().shape() != p.tensor().shape() {
        return Err(Error::Shape(format!(
            "ground truth {:?} vs prediction {:?}",
            y.tensor().shape(),
            p.tensor().shape()
        )));
    }
    let mut g = Graph::new();
    let yv = g.input(y.tensor().clone());
    let pv = g.input(p.tensor().clone());
    Ok((g, yv, pv))
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

pub fn bce_loss(y: &MaskTensor, p: &MaskTensor, eps: f64) -> Result<f64> {
    let (mut g, yv, pv) = pair(y, p)?;
    let l = bce_var(&mut g, yv, pv, eps)?;
    Ok(scalar(&g, l))
}

pub fn curvature_map(p: &MaskTensor, eps: f64) -> Result<MaskTensor> {
    expect_prob(p)?;
    let mut g = Graph::new();
    let pv = g.input(p.tensor().clone());
    let (_, k) = curvature_vars(&mut g, pv, eps)?;
    MaskTensor::logits(g.value(k).clone())
}

pub fn ace_loss(y: &MaskTensor, p: &MaskTensor, cfg: &LossConfig) -> Result<(f64, AceTerms)> {
    let (mut g, yv, pv) = pair(y, p)?;
    let a = ace_vars(&mut g, yv, pv, cfg)?;
    let terms = AceTerms {
        length_curvature: scalar(&g, a.length_curvature),
        region_in: scalar(&g, a.region_in),
        region_out: scalar(&g, a.region_out),
        curvature_map: MaskTensor::logits(g.value(a.curvature).clone())?,
    };
    Ok((scalar(&g, a.total), terms))
}

pub fn combined_loss(y: &MaskTensor, p: &MaskTensor, cfg: &LossConfig) -> Result<f64> {
    let (mut g, yv, pv) = pair(y, p)?;
    let l = combined_var(&mut g, yv, pv, cfg)?;
    Ok(scalar(&g, l))
}

pub fn total_training_loss(y: &MaskTensor, outputs: &[(Head, &MaskTensor)], cfg: &LossConfig) -> Result<f64> {
    expect_gt(y)?;
    let mut g = Graph::new();
    let yv = g.input(y.tensor().clone());
    let mut probs = Vec::with_capacity(outputs.len());
    for (head, p) in outputs {
        expect_prob(p)?;
        probs.push((*head, g.input(p.tensor().clone())));
    }
    let (t, _) = total_var(&mut g, yv, &probs, cfg)?;
    Ok(scalar(&g, t))
}

/// Gradient of [`combined_loss`] with respect to every pixel of `p`.
pub fn combined_loss_grad(y: &MaskTensor, p: &MaskTensor, cfg: &LossConfig) -> Result<Tensor> {
    let (mut g, yv, pv) = pair(y, p)?;
    let l = combined_var(&mut g, yv, pv, cfg)?;
    let grads = g.backward(l)?;
    Ok(grads
        .get(pv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(p.tensor().shape())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn gt(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> MaskTensor {
        MaskTensor::ground_truth(Tensor::from_fn([1, 1, rows, cols], |_, _, y, x| {
            if f(y, x) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    fn prob(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> MaskTensor {
        MaskTensor::probability(Tensor::from_fn([1, 1, rows, cols], |_, _, y, x| f(y, x))).unwrap()
    }

    fn random_pair(seed: u64, n: usize) -> (MaskTensor, MaskTensor) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n * n).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        let p: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.02..0.98)).collect();
        (
            MaskTensor::ground_truth(Tensor::from_vec([1, 1, n, n], y).unwrap()).unwrap(),
            MaskTensor::probability(Tensor::from_vec([1, 1, n, n], p).unwrap()).unwrap(),
        )
    }

    #[test]
    fn bce_perfect_prediction() {
        let y = gt(4, 4, |r, c| (r + c) % 2 == 0);
        let p = MaskTensor::probability(y.tensor().clone()).unwrap();
        let eps = 1e-7;
        let l = bce_loss(&y, &p, eps).unwrap();
        assert!((l - -(1.0 - eps).ln()).abs() < 1e-15);
        assert!(l < 1e-6);
    }

    #[test]
    fn bce_half_probability() {
        let y = gt(3, 5, |_, _| true);
        let p = prob(3, 5, |_, _| 0.5);
        assert!((bce_loss(&y, &p, 1e-7).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let (y, p) = random_pair(11, 8);
        let eps = 1e-7;
        let mut acc = 0.0;
        for (&t, &q) in y.tensor().data().iter().zip(p.tensor().data()) {
            let q = q.clamp(eps, 1.0 - eps);
            acc -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        let oracle = acc / 64.0;
        assert!((bce_loss(&y, &p, eps).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn bce_shape_mismatch() {
        let y = gt(4, 4, |_, _| true);
        let p = prob(4, 5, |_, _| 0.5);
        assert!(matches!(bce_loss(&y, &p, 1e-7), Err(Error::Shape(_))));
    }

    #[test]
    fn curvature_of_constant_and_ramp() {
        let c = prob(6, 6, |_, _| 0.3);
        assert!(curvature_map(&c, 1e-7).unwrap().tensor().data().iter().all(|&v| v == 0.0));
        let w = 12;
        let ramp = prob(8, w, |_, x| x as f64 / w as f64);
        let k = curvature_map(&ramp, 1e-7).unwrap();
        for y in 1..7 {
            for x in 2..w - 2 {
                assert!(k.tensor().get(0, 0, y, x).abs() < 1e-12);
            }
        }
        assert!(curvature_map(&prob(2, 5, |_, _| 0.1), 1e-7).is_err());
    }

    #[test]
    fn curvature_of_a_disc() {
        for r in [8.0, 12.0] {
            let n = 48;
            let c = (n as f64 - 1.0) / 2.0;
            let p = prob(n, n, |y, x| {
                let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                1.0 / (1.0 + ((d - r) / 1.5).exp())
            });
            let k = curvature_map(&p, 1e-7).unwrap();
            // sample pixels on the rim (distance within half a pixel of r)
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..n {
                for x in 0..n {
                    let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                    if (d - r).abs() < 0.5 {
                        sum += k.tensor().get(0, 0, y, x);
                        count += 1;
                    }
                }
            }
            let mean = sum / count as f64;
            assert!(mean < 0.0, "bright disc has negative curvature");
            assert!(
                ((-mean) - 1.0 / r).abs() <= 0.2 / r,
                "r = {r}: |K| = {} vs 1/r = {}",
                -mean,
                1.0 / r
            );
        }
    }

    #[test]
    fn ace_zero_case() {
        let y = gt(5, 5, |_, _| false);
        let p = prob(5, 5, |_, _| 0.0);
        let (l, terms) = ace_loss(&y, &p, &LossConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(terms.total(), 0.0);
    }

    #[test]
    fn ace_half_ones() {
        let y = gt(4, 6, |_, x| x < 3);
        let p = prob(4, 6, |_, _| 0.5);
        let cfg = LossConfig::default();
        let (l, terms) = ace_loss(&y, &p, &cfg).unwrap();
        assert_eq!(terms.length_curvature, 0.0);
        assert!((terms.region_in + terms.region_out - 0.25).abs() < 1e-15);
        assert!((l - 0.25 * cfg.lambda).abs() < 1e-15);
    }

    #[test]
    fn ace_gradient_matches_finite_differences() {
        let (y, p) = random_pair(5, 8);
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let yv = g.input(y.tensor().clone());
        let pv = g.input(p.tensor().clone());
        let a = ace_vars(&mut g, yv, pv, &cfg).unwrap();
        let analytic = g.backward(a.total).unwrap().get(pv).unwrap().clone();
        let h = 1e-6;
        for k in 0..64 {
            let shift = |d: f64| {
                let mut t = p.tensor().clone();
                t.data_mut()[k] += d;
                ace_loss(&y, &MaskTensor::probability(t).unwrap(), &cfg).unwrap().0
            };
            let numeric = (shift(h) - shift(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (numeric - a).abs() / a.abs().max(1e-8);
            assert!(rel <= 1e-4, "pixel {k}: numeric {numeric} vs autodiff {a}");
        }
    }

    #[test]
    fn ace_is_flip_invariant() {
        let (y, p) = random_pair(21, 9);
        let flip = |m: &MaskTensor| MaskTensor::new(m.tensor().flip_horizontal(), m.kind()).unwrap();
        let cfg = LossConfig::default();
        let a = ace_loss(&y, &p, &cfg).unwrap().0;
        let b = ace_loss(&flip(&y), &flip(&p), &cfg).unwrap().0;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn combined_is_sum_of_parts() {
        let (y, p) = random_pair(3, 8);
        let cfg = LossConfig::default();
        let c = combined_loss(&y, &p, &cfg).unwrap();
        let a = ace_loss(&y, &p, &cfg).unwrap().0;
        let b = bce_loss(&y, &p, cfg.epsilon).unwrap();
        assert_eq!(c, a + b);
        let zero_y = gt(4, 4, |_, _| false);
        let zero_p = prob(4, 4, |_, _| 0.0);
        assert!(combined_loss(&zero_y, &zero_p, &cfg).unwrap() < 1e-6);
    }

    #[test]
    fn combined_nonnegative_on_random_instances() {
        let cfg = LossConfig::default();
        for seed in 0..1000 {
            let (y, p) = random_pair(seed, 6);
            assert!(combined_loss(&y, &p, &cfg).unwrap() >= 0.0, "seed {seed}");
        }
    }

    #[test]
    fn total_loss_weights() {
        let (y, p) = random_pair(8, 8);
        let (_, q) = random_pair(9, 8);
        let outs = [(Head::Final, &p), (Head::Early, &q), (Head::Bs, &q), (Head::Os, &p)];
        let mut cfg = LossConfig::default();
        cfg.weights.early = 0.0;
        cfg.weights.bs = 0.0;
        cfg.weights.os = 0.0;
        let only_final = total_training_loss(&y, &outs, &cfg).unwrap();
        assert_eq!(only_final, combined_loss(&y, &p, &cfg).unwrap());

        // affine in each weight: L(w=2) - L(w=1) == L(w=1) - L(w=0)
        let base = LossConfig::default();
        for head in Head::ALL {
            let eval = |w: f64| {
                let mut c = base;
                match head {
                    Head::Final => c.weights.final_mask = w,
                    Head::Early => c.weights.early = w,
                    Head::Bs => c.weights.bs = w,
                    Head::Os => c.weights.os = w,
                }
                total_training_loss(&y, &outs, &c).unwrap()
            };
            let (l0, l1, l2) = (eval(0.0), eval(1.0), eval(2.0));
            assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-12, "{head:?}");
        }

        let perfect = MaskTensor::probability(y.tensor().clone()).unwrap();
        let all_perfect = [(Head::Final, &perfect), (Head::Early, &perfect), (Head::Bs, &perfect), (Head::Os, &perfect)];
        // the length term still sees the mask edges, so "perfect" is small but not zero
        let mut no_len = LossConfig::default();
        no_len.alpha = 0.0;
        no_len.beta = 0.0;
        assert!(total_training_loss(&y, &all_perfect, &no_len).unwrap() < 1e-5);

        assert!(total_training_loss(&y, &outs[..3], &base).is_err());
    }

    proptest! {
        #[test]
        fn bce_nonnegative_and_decreasing(p in 0.01f64..0.98, d in 0.001f64..0.01) {
            let y = MaskTensor::ground_truth(Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
            let lo = MaskTensor::probability(Tensor::full([1, 1, 1, 1], p)).unwrap();
            let hi = MaskTensor::probability(Tensor::full([1, 1, 1, 1], p + d)).unwrap();
            let a = bce_loss(&y, &lo, 1e-7).unwrap();
            let b = bce_loss(&y, &hi, 1e-7).unwrap();
            prop_assert!(a >= 0.0 && b >= 0.0);
            prop_assert!(b < a);
        }
    }
}
