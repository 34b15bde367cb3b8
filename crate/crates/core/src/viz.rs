//! Decomposition panels: one row of tiles per image.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::SampleSource;
use crate::error::{Error, Result};
use crate::model::{AdsNet, Decomposition};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{resize_bilinear, sigmoid_map, ImageTensor, MaskTensor};

/// Tile order, left to right.
pub const TILES: [&str; 8] = ["input", "ground truth", "M", "S", "W", "BS", "OS", "final"];

/// White gutter between tiles, in pixels.
pub const GAP: u32 = 2;

fn to_size(m: &MaskTensor, h: usize, w: usize) -> Result<MaskTensor> {
    if (m.height(), m.width()) == (h, w) {
        Ok(m.clone())
    } else {
        resize_bilinear(m, (h, w))
    }
}

fn gray(t: &Tensor, y: usize, x: usize) -> Rgb<u8> {
    let v = (t.get(0, 0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([v, v, v])
}

fn input_rgb(img: &ImageTensor, y: usize, x: usize) -> Rgb<u8> {
    let t = img.tensor();
    let px = |c: usize| {
        let mut v = t.get(0, c, y, x);
        if let Some(s) = img.standardization() {
            v = v * s.std[c] + s.mean[c];
        }
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    Rgb([px(0), px(1), px(2)])
}

/// The eight maps of one image as `[0, 1]` planes at the image resolution,
/// in [`TILES`] order after the input.
pub fn tile_maps(image: &ImageTensor, gt: &MaskTensor, d: &Decomposition) -> Result<Vec<MaskTensor>> {
    let (h, w) = (image.height(), image.width());
    if (gt.height(), gt.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "ground truth is {}x{}, image is {h}x{w}",
            gt.height(),
            gt.width()
        )));
    }
    Ok(vec![
        gt.clone(),
        to_size(&d.early.probability, h, w)?,
        to_size(&d.partition.strong, h, w)?,
        to_size(&d.partition.weak, h, w)?,
        to_size(&sigmoid_map(&d.heads.bs_logits)?, h, w)?,
        to_size(&sigmoid_map(&d.heads.os_logits)?, h, w)?,
        to_size(&d.final_probability, h, w)?,
    ])
}

/// Renders input | ground truth | M | S | W | BS | OS | final.
pub fn render_panel(image: &ImageTensor, gt: &MaskTensor, d: &Decomposition) -> Result<RgbImage> {
    let maps = tile_maps(image, gt, d)?;
    let (h, w) = (image.height() as u32, image.width() as u32);
    let n = TILES.len() as u32;
    let mut panel = RgbImage::from_pixel(n * w + (n - 1) * GAP, h, Rgb([255, 255, 255]));
    for y in 0..h {
        for x in 0..w {
            panel.put_pixel(x, y, input_rgb(image, y as usize, x as usize));
        }
    }
    for (i, m) in maps.iter().enumerate() {
        let x0 = (i as u32 + 1) * (w + GAP);
        for y in 0..h {
            for x in 0..w {
                panel.put_pixel(x0 + x, y, gray(m.tensor(), y as usize, x as usize));
            }
        }
    }
    Ok(panel)
}

/// Writes `<out_dir>/<image_id>_panel.png` for the first `limit` samples
/// (all of them when `None`).
pub fn write_panels(
    net: &AdsNet,
    store: &ParamStore,
    source: &dyn SampleSource,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let n = limit.map_or(source.len(), |l| l.min(source.len()));
    let mut written = Vec::with_capacity(n);
    for i in 0..n {
        let r = source.sample(i)?;
        let d = net.decompose(store, &r.image)?;
        let path = out_dir.join(format!("{}_panel.png", r.image_id));
        render_panel(&r.image, &r.mask, &d)?.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
