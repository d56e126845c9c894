//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/{train,val,test}/images/<id>.png      8-bit RGB
//! root/{train,val,test}/masks/<id>.png       8-bit gray, raw class ids
//! root/{train,val,test}/boundaries/<id>.png  8-bit gray, {0, 255}
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{generate_scene, sample_seed, GlassSample, Grid, SceneSpec, ShapeFamily};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = concat!("rfenet-synth/", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub n_classes: usize,
    /// `[H, W]`
    pub canvas: [usize; 2],
    pub boundary_thickness: usize,
    pub splits: SplitIds,
}

impl Manifest {
    pub fn counts(&self) -> [(Split, usize); 3] {
        Split::ALL.map(|s| (s, self.splits.get(s).len()))
    }
}

/// Fractions of samples assigned to train and val; test receives the rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
        }
    }
}

impl SplitFractions {
    /// Sample counts per split for `n` samples, in order train, val, test.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

/// Knobs for generating a whole dataset of scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n: usize,
    pub seed: u64,
    pub canvas: (usize, usize),
    pub min_objects: usize,
    pub max_objects: usize,
    pub shape_families: Vec<ShapeFamily>,
    pub transparency_alpha: f64,
    pub reflective_streaks: usize,
    pub n_classes: usize,
    pub boundary_thickness: usize,
    pub split: SplitFractions,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            canvas: (64, 64),
            min_objects: 1,
            max_objects: 2,
            shape_families: vec![ShapeFamily::Rect, ShapeFamily::Ellipse, ShapeFamily::Polygon],
            transparency_alpha: 0.6,
            reflective_streaks: 1,
            n_classes: 3,
            boundary_thickness: crate::synthdata::DEFAULT_BOUNDARY_THICKNESS,
            split: SplitFractions::default(),
        }
    }
}

impl GenConfig {
    /// Scene specification of sample `index`.
    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        let seed = sample_seed(self.seed, index as u64);
        let span = self.max_objects.saturating_sub(self.min_objects) as u64 + 1;
        let n_objects = self.min_objects + (seed % span) as usize;
        let family = self.shape_families[((seed >> 16) % self.shape_families.len() as u64) as usize];
        SceneSpec {
            canvas: self.canvas,
            n_objects,
            shape_family: family,
            transparency_alpha: self.transparency_alpha,
            reflective_streaks: self.reflective_streaks,
            rng_seed: seed,
            n_classes: self.n_classes,
            boundary_thickness: self.boundary_thickness,
        }
    }

    /// Generates all samples, in parallel across the current rayon pool.
    pub fn generate(&self) -> Result<Vec<GlassSample>> {
        if self.shape_families.is_empty() {
            return Err(Error::Config("no shape families selected".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        (0..self.n)
            .into_par_iter()
            .map(|i| generate_scene(&self.scene_spec(i), &format!("{i:06}")))
            .collect()
    }
}

fn image_path(root: &Path, split: Split, kind: &str, id: &str) -> PathBuf {
    root.join(split.as_str()).join(kind).join(format!("{id}.png"))
}

/// Writes samples in order: the first `counts[0]` go to train, then val, then test.
pub fn write_dataset(
    samples: &[GlassSample],
    root: &Path,
    split: SplitFractions,
    n_classes: usize,
    boundary_thickness: usize,
) -> Result<Manifest> {
    let werr = |path: &Path, source| Error::DatasetWrite {
        path: path.to_path_buf(),
        source,
    };
    fs::create_dir_all(root).map_err(|e| werr(root, e))?;
    let counts = split.counts(samples.len());
    let mut ids = SplitIds::default();
    let mut offset = 0;
    for (s, &count) in Split::ALL.iter().zip(&counts) {
        let chunk = &samples[offset..offset + count];
        offset += count;
        if chunk.is_empty() {
            continue;
        }
        for kind in ["images", "masks", "boundaries"] {
            let dir = root.join(s.as_str()).join(kind);
            fs::create_dir_all(&dir).map_err(|e| werr(&dir, e))?;
        }
        for sample in chunk {
            write_sample(sample, root, *s)?;
            ids.get_mut(*s).push(sample.sample_id.clone());
        }
    }
    let canvas = samples
        .first()
        .map(|s| [s.height(), s.width()])
        .unwrap_or([0, 0]);
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION.to_string(),
        n_classes,
        canvas,
        boundary_thickness,
        splits: ids,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| werr(&path, e))?;
    Ok(manifest)
}

fn write_sample(sample: &GlassSample, root: &Path, split: Split) -> Result<()> {
    let (h, w) = (sample.height() as u32, sample.width() as u32);
    let hw = (h * w) as usize;
    let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
        let p = (y * w + x) as usize;
        let q = |k: usize| (sample.image.data()[k * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([q(0), q(1), q(2)])
    });
    let mask = GrayImage::from_raw(w, h, sample.mask.data.clone()).unwrap();
    let bnd = GrayImage::from_raw(w, h, sample.boundary.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect())
        .unwrap();
    let save = |path: PathBuf, res: image::ImageResult<()>| {
        res.map_err(|e| Error::DatasetWrite {
            path,
            source: std::io::Error::other(e.to_string()),
        })
    };
    let p = image_path(root, split, "images", &sample.sample_id);
    save(p.clone(), img.save(&p))?;
    let p = image_path(root, split, "masks", &sample.sample_id);
    save(p.clone(), mask.save(&p))?;
    let p = image_path(root, split, "boundaries", &sample.sample_id);
    save(p.clone(), bnd.save(&p))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn open_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an RGB PNG as a `3×H×W` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| open_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let hw = (w * h) as usize;
    let mut t = Tensor::zeros(&[3, h as usize, w as usize]);
    for (p, px) in img.pixels().enumerate() {
        for k in 0..3 {
            t.data_mut()[k * hw + p] = px[k] as f32 / 255.0;
        }
    }
    Ok(t)
}

fn read_gray(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| open_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_vec(h as usize, w as usize, img.into_raw()))
}

pub fn read_sample(root: &Path, split: Split, id: &str) -> Result<GlassSample> {
    let image = read_image(&image_path(root, split, "images", id))?;
    let mask = read_gray(&image_path(root, split, "masks", id))?;
    let mut boundary = read_gray(&image_path(root, split, "boundaries", id))?;
    for v in boundary.data.iter_mut() {
        *v = u8::from(*v != 0);
    }
    let (_, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (mask.height, mask.width) != (h, w) || (boundary.height, boundary.width) != (h, w) {
        return Err(Error::Data(format!("sample {id}: image, mask and boundary sizes differ")));
    }
    Ok(GlassSample {
        image,
        mask,
        boundary,
        sample_id: id.to_string(),
    })
}

/// Loads every sample of one split. A split directory that is absent is an error.
pub fn load_split(root: &Path, split: Split) -> Result<(Manifest, Vec<GlassSample>)> {
    let manifest = read_manifest(root)?;
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::Data(format!("split directory {} does not exist", dir.display())));
    }
    let samples = manifest
        .splits
        .get(split)
        .par_iter()
        .map(|id| read_sample(root, split, id))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Runs `f` inside a rayon pool bounded by `RFENET_NUM_WORKERS` when set.
pub fn with_worker_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let workers = std::env::var("RFENET_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}
