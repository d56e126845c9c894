//! PNG renderings of attention maps, boundary predictions, uncertain points
//! and the final segmentation.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::autograd::{sigmoid, Tape};
use crate::error::{Error, Result};
use crate::network::{batch_images, Network};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::logits_to_predictions;

/// Linear map of `[0, 1]` to `[0, 255]`, clamped.
pub fn heatmap_value(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn heatmap(values: &[f64], h: usize, w: usize) -> GrayImage {
    assert_eq!(values.len(), h * w);
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([heatmap_value(values[y as usize * w + x as usize])]))
}

pub const UNCERTAIN_MARK: [u8; 3] = [255, 0, 0];

/// Colour of class `c` in segmentation renderings.
pub fn class_color(c: u8) -> [u8; 3] {
    match c {
        0 => [0, 0, 0],
        1 => [0, 200, 255],
        2 => [255, 200, 0],
        c => {
            let h = (c as u32).wrapping_mul(2654435761);
            [(h >> 8) as u8 | 64, (h >> 16) as u8 | 64, (h >> 24) as u8 | 64]
        }
    }
}

/// The image at half brightness with every `cell×cell` block listed in
/// `indices` (flattened over a `grid_w`-wide grid) painted in [`UNCERTAIN_MARK`].
pub fn uncertain_overlay(image: &Tensor<f32>, indices: &[usize], grid_w: usize, cell: usize) -> RgbImage {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let px = |c: usize, y: usize, x: usize| (image.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 127.0).round() as u8;
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
    });
    for &i in indices {
        let (gy, gx) = (i / grid_w, i % grid_w);
        for y in gy * cell..((gy + 1) * cell).min(h) {
            for x in gx * cell..((gx + 1) * cell).min(w) {
                img.put_pixel(x as u32, y as u32, Rgb(UNCERTAIN_MARK));
            }
        }
    }
    img
}

pub struct Visualization {
    pub files: Vec<PathBuf>,
    /// Uncertain indices drawn on the overlay, at the finest stage's resolution.
    pub uncertain: Vec<usize>,
    pub stage_grid: (usize, usize),
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Runs the network on one `3×H×W` image and writes
/// `<stem>_stage<i>_{as,ab,bnd}.png`, `<stem>_uncertain.png` and `<stem>_seg.png`.
/// Attention maps are skipped for variants without the mutual block.
pub fn visualize(net: &Network, store: &ParamStore<f32>, image: &Tensor<f32>, stem: &str, out_dir: &Path) -> Result<Visualization> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let out = net.forward(&ctx, &batch_images(&[image]))?;
    let mut files = Vec::new();
    let to_f64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    for st in &out.stages {
        let s = st.bnd_logits.shape();
        let (h, w) = (s[2], s[3]);
        if let Some(att) = &st.attention {
            for (tag, map) in [("as", att.a_s), ("ab", att.a_b)] {
                let p = out_dir.join(format!("{stem}_stage{}_{tag}.png", st.index));
                save_gray(&heatmap(&to_f64(&map.value()), h, w), &p)?;
                files.push(p);
            }
        }
        let bnd: Vec<f64> = st.bnd_logits.value().data().iter().map(|&v| sigmoid(v) as f64).collect();
        let p = out_dir.join(format!("{stem}_stage{}_bnd.png", st.index));
        save_gray(&heatmap(&bnd, h, w), &p)?;
        files.push(p);
    }
    let finest = out.stages.iter().min_by_key(|s| s.index).expect("at least one stage");
    let fs = finest.f_s.shape();
    let (gh, gw) = (fs[2], fs[3]);
    let uncertain = finest.selections.first().map(|s| s.0.indices.clone()).unwrap_or_default();
    let cell = image.shape()[1] / gh;
    let p = out_dir.join(format!("{stem}_uncertain.png"));
    save_rgb(&uncertain_overlay(image, &uncertain, gw, cell), &p)?;
    files.push(p);

    let pred = logits_to_predictions(&out.logits.value()).remove(0);
    let seg = RgbImage::from_fn(pred.labels.width as u32, pred.labels.height as u32, |x, y| {
        Rgb(class_color(pred.labels.at(y as usize, x as usize)))
    });
    let p = out_dir.join(format!("{stem}_seg.png"));
    save_rgb(&seg, &p)?;
    files.push(p);
    Ok(Visualization {
        files,
        uncertain,
        stage_grid: (gh, gw),
    })
}
