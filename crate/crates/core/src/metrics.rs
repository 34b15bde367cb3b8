//! Dice, IoU, MAE and the weighted F-beta measure.
//!
//! Dice and IoU binarize the prediction at `threshold`; MAE and weighted
//! F-beta use the soft map. When both masks are empty Dice and IoU are 1.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, SampleSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{resize_bilinear, ImageTensor, MaskKind, MaskTensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SMOOTH: f64 = 1e-8;
pub const DEFAULT_BETA_SQ: f64 = 1.0;
pub const DEFAULT_SIGMA: f64 = 5.0;
/// Side of the Gaussian window of the weighted F-measure.
pub const GAUSSIAN_SIZE: usize = 7;

fn check_pair(pred: &MaskTensor, gt: &MaskTensor) -> Result<()> {
    if gt.kind() != MaskKind::GroundTruth {
        return Err(Error::Invalid("second argument must be a ground-truth mask".into()));
    }
    if pred.kind() != MaskKind::Probability {
        return Err(Error::Invalid("prediction must be a probability map".into()));
    }
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    Ok(())
}

/// `(|P & G|, |P|, |G|)` with `P = pred >= threshold`.
fn counts(pred: &MaskTensor, gt: &MaskTensor, threshold: f64) -> (f64, f64, f64) {
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.tensor().data().iter().zip(gt.tensor().data()) {
        let p = p >= threshold;
        let g = g >= 0.5;
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    (inter as f64, np as f64, ng as f64)
}

pub fn dice(pred: &MaskTensor, gt: &MaskTensor, threshold: f64, smooth: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt, threshold);
    if p == 0.0 && g == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * i / (p + g + smooth))
}

pub fn iou(pred: &MaskTensor, gt: &MaskTensor, threshold: f64, smooth: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let (i, p, g) = counts(pred, gt, threshold);
    if p == 0.0 && g == 0.0 {
        return Ok(1.0);
    }
    Ok(i / (p + g - i + smooth))
}

pub fn mae(pred: &MaskTensor, gt: &MaskTensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let t = pred.tensor();
    let s: f64 = t.data().iter().zip(gt.tensor().data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / t.len() as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable correlation with zero padding.
fn gaussian_filter(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(GAUSSIAN_SIZE, sigma);
    let r = (GAUSSIAN_SIZE / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * img[y * w + xx as usize];
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * rows[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest foreground pixel and the
/// index of that pixel. Ties go to the smallest column, then smallest row.
/// Two 1-D passes (Felzenszwalb and Huttenlocher) with integer arithmetic.
pub(crate) fn distance_transform(fg: &[bool], h: usize, w: usize) -> (Vec<i64>, Vec<usize>) {
    const INF: i64 = i64::MAX / 4;
    // pass 1: nearest foreground row within each column
    let mut col_d = vec![INF; h * w];
    let mut col_row = vec![usize::MAX; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if fg[y * w + x] {
                last = Some(y);
            }
            if let Some(r) = last {
                col_d[y * w + x] = (y - r) as i64;
                col_row[y * w + x] = r;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if fg[y * w + x] {
                next = Some(y);
            }
            if let Some(r) = next {
                let d = (r - y) as i64;
                // strictly closer only: an upward tie keeps the smaller row
                if d < col_d[y * w + x] {
                    col_d[y * w + x] = d;
                    col_row[y * w + x] = r;
                }
            }
        }
    }
    // pass 2: lower envelope of parabolas along each row
    let mut dist = vec![INF; h * w];
    let mut idx = vec![usize::MAX; h * w];
    let mut v = vec![0usize; w];
    let mut f = vec![0i64; w];
    for y in 0..h {
        let cols: Vec<usize> = (0..w).filter(|&q| col_d[y * w + q] < INF).collect();
        if cols.is_empty() {
            continue;
        }
        for &q in &cols {
            f[q] = col_d[y * w + q] * col_d[y * w + q];
        }
        // intersection of parabolas at columns a < b, as the fraction num/den
        let cross = |a: usize, b: usize| -> (i64, i64) {
            let (a, b) = (a as i64, b as i64);
            (f[b as usize] + b * b - f[a as usize] - a * a, 2 * (b - a))
        };
        let mut k = 0usize;
        v[0] = cols[0];
        // z[k] is the left boundary of parabola v[k]; None stands for -inf
        let mut z: Vec<Option<(i64, i64)>> = vec![None];
        for &q in &cols[1..] {
            loop {
                let s = cross(v[k], q);
                let drop = match z[k] {
                    None => false,
                    // s <= z[k]
                    Some(zk) => s.0 * zk.1 <= zk.0 * s.1,
                };
                if drop {
                    k -= 1;
                    z.pop();
                } else {
                    k += 1;
                    v[k] = q;
                    z.push(Some(s));
                    break;
                }
            }
        }
        let mut k = 0usize;
        for x in 0..w {
            // advance while z[k+1] < x
            while k + 1 < z.len() {
                let (n, d) = z[k + 1].expect("bounded");
                if n < (x as i64) * d {
                    k += 1;
                } else {
                    break;
                }
            }
            let q = v[k];
            let dx = x as i64 - q as i64;
            dist[y * w + x] = dx * dx + f[q];
            idx[y * w + x] = col_row[y * w + q] * w + q;
        }
    }
    (dist, idx)
}

/// Weighted F-beta of a soft prediction. `None` when the ground truth has no
/// foreground (the measure is undefined there).
pub fn weighted_fbeta(pred: &MaskTensor, gt: &MaskTensor, beta_sq: f64, sigma: f64) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let [n, _, h, w] = gt.tensor().shape();
    if n != 1 {
        return Err(Error::Shape("weighted F-beta takes one image at a time".into()));
    }
    let g: Vec<bool> = gt.tensor().data().iter().map(|&v| v >= 0.5).collect();
    if !g.iter().any(|&b| b) {
        return Ok(None);
    }
    let p = pred.tensor().data();
    let e: Vec<f64> = p.iter().zip(&g).map(|(&p, &g)| (p - f64::from(u8::from(g))).abs()).collect();
    let (dst, nearest) = distance_transform(&g, h, w);
    let et: Vec<f64> = (0..h * w).map(|i| if g[i] { e[i] } else { e[nearest[i]] }).collect();
    let ea = gaussian_filter(&et, h, w, sigma);
    let decay = 0.5f64.ln() / 5.0;
    let (mut sum_fg, mut sum_bg, mut n_fg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if g[i] {
            sum_fg += if ea[i] < e[i] { ea[i] } else { e[i] };
            n_fg += 1.0;
        } else {
            let b = 2.0 - (decay * (dst[i] as f64).sqrt()).exp();
            sum_bg += e[i] * b;
        }
    }
    let tpw = n_fg - sum_fg;
    let fpw = sum_bg;
    let r = 1.0 - sum_fg / n_fg;
    let prec = tpw / (f64::EPSILON + tpw + fpw);
    let q = (1.0 + beta_sq) * r * prec / (f64::EPSILON + r + beta_sq * prec);
    Ok(Some(q))
}

/// Anything that maps an image to a probability map at the image's size.
pub trait Segmenter: Sync {
    fn predict(&self, image: &ImageTensor) -> Result<MaskTensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub dice: f64,
    pub iou: f64,
    /// `None` when the ground truth is all background.
    pub wfb: Option<f64>,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub dice: f64,
    pub iou: f64,
    /// Mean over the images where the measure is defined.
    pub wfb: Option<f64>,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dataset_name: String,
    pub threshold_used: f64,
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    /// Samples that could not be read, with the reason.
    pub failures: Vec<(String, String)>,
}

pub fn image_metrics(image_id: &str, pred: &MaskTensor, gt: &MaskTensor, threshold: f64) -> Result<ImageMetrics> {
    let pred = if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        resize_bilinear(pred, (gt.height(), gt.width()))?
    } else {
        pred.clone()
    };
    Ok(ImageMetrics {
        image_id: image_id.to_string(),
        dice: dice(&pred, gt, threshold, DEFAULT_SMOOTH)?,
        iou: iou(&pred, gt, threshold, DEFAULT_SMOOTH)?,
        wfb: weighted_fbeta(&pred, gt, DEFAULT_BETA_SQ, DEFAULT_SIGMA)?,
        mae: mae(&pred, gt)?,
    })
}

pub fn aggregate(rows: &[ImageMetrics]) -> Aggregate {
    let n = rows.len().max(1) as f64;
    let wfb: Vec<f64> = rows.iter().filter_map(|r| r.wfb).collect();
    Aggregate {
        dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
        wfb: if wfb.is_empty() {
            None
        } else {
            Some(wfb.iter().sum::<f64>() / wfb.len() as f64)
        },
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
    }
}

/// Per-image metrics at ground-truth resolution, ordered by image id.
/// Samples the source cannot read are listed in `failures`. `parallel`
/// fans the images out over the rayon pool; the result is identical either
/// way.
pub fn evaluate_source(
    model: &dyn Segmenter,
    source: &dyn SampleSource,
    name: &str,
    threshold: f64,
    parallel: bool,
) -> Result<MetricReport> {
    if source.is_empty() {
        return Err(Error::Data(format!("dataset `{name}` is empty")));
    }
    let one = |i: usize| -> Result<std::result::Result<ImageMetrics, (String, String)>> {
        let rec = match source.sample(i) {
            Ok(r) => r,
            Err(e) => return Ok(Err((format!("#{i}"), e.to_string()))),
        };
        let pred = model.predict(&rec.image)?;
        Ok(Ok(image_metrics(&rec.image_id, &pred, &rec.mask, threshold)?))
    };
    let results: Vec<_> = if parallel {
        (0..source.len()).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..source.len()).map(one).collect::<Result<_>>()?
    };
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(m) => rows.push(m),
            Err(f) => failures.push(f),
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no readable samples in `{name}`")));
    }
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(MetricReport {
        dataset_name: name.to_string(),
        threshold_used: threshold,
        aggregate: aggregate(&rows),
        per_image: rows,
        failures,
    })
}

pub fn evaluate_dataset_with(model: &dyn Segmenter, dataset: &Dataset, threshold: f64, parallel: bool) -> Result<MetricReport> {
    let mut report = evaluate_source(model, dataset, &dataset.name, threshold, parallel)?;
    report.failures.extend(dataset.failures.iter().cloned());
    Ok(report)
}

pub fn evaluate_dataset(model: &dyn Segmenter, dataset: &Dataset) -> Result<MetricReport> {
    evaluate_dataset_with(model, dataset, DEFAULT_THRESHOLD, true)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "image_id,dice,iou,wfb,mae";

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.per_image {
            let _ = writeln!(s, "{},{:.6},{:.6},{},{:.6}", r.image_id, r.dice, r.iou, fmt_opt(r.wfb), r.mae);
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "__mean__,{:.6},{:.6},{},{:.6}", a.dice, a.iou, fmt_opt(a.wfb), a.mae);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// One-row table in the column order Dice, IoU, F^w_beta, MAE.
    pub fn summary_table(&self) -> String {
        let a = &self.aggregate;
        format!(
            "| Dataset | Dice | IoU | F^w_beta | MAE |\n|---|---|---|---|---|\n| {} | {:.3} | {:.3} | {} | {:.3} |\n",
            self.dataset_name,
            a.dice,
            a.iou,
            a.wfb.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}")),
            a.mae
        )
    }
}

/// Mask-tensor helper for tests and callers holding plain 0/1 grids.
pub fn mask_from_rows(rows: &[Vec<f64>], kind: MaskKind) -> Result<MaskTensor> {
    MaskTensor::new(Tensor::from_rows(rows)?, kind)
}
