//! Procedural multi-task scenes.
//!
//! Each scene is a tilted background plane with 2 to 6 axis-aligned
//! rectangles and discs painted over it in order. Every shape carries a
//! class and its own depth plane; labels, depth, normals and boundaries are
//! all derived from the same per-pixel shape assignment. Sample `i` of a
//! dataset with seed `s` is drawn from ChaCha stream `i` of seed `s`, so
//! samples can be generated in any order or in parallel.

use std::fs;
use std::path::Path;

use mtmamba_core::io::{read_rten, write_rten};
use mtmamba_core::tasks::{Labels, Target, TaskKind, TaskSpec};
use mtmamba_core::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const DEFAULT_CLASSES: usize = 5;
pub const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "mtmamba-synthetic";
const MANIFEST_VERSION: u64 = 1;
const NOISE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub height: usize,
    pub width: usize,
    /// `[H, W, 3]`, roughly in `[0, 1]`.
    pub image: Vec<f32>,
    pub segmentation: Vec<u8>,
    /// Positive distance, `[H, W]`.
    pub depth: Vec<f32>,
    /// Unit plane normals `[H, W, 3]`.
    pub normal: Vec<f32>,
    /// 1 where a 4-neighbor has a different class.
    pub boundary: Vec<u8>,
    /// Index of the visible shape, 0 for the background.
    pub instance: Vec<u8>,
}

#[derive(Clone, Copy, Debug)]
struct Plane {
    depth: f64,
    /// Depth change per pixel along rows (`gy`) and columns (`gx`).
    gy: f64,
    gx: f64,
    ci: f64,
    cj: f64,
}

impl Plane {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.depth + self.gy * (i as f64 - self.ci) + self.gx * (j as f64 - self.cj)
    }

    fn normal(&self) -> [f64; 3] {
        let n = [-self.gx, -self.gy, 1.0];
        let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
        n.map(|v| v / len)
    }
}

enum Shape {
    Rect { i0: usize, i1: usize, j0: usize, j1: usize },
    Disc { ci: f64, cj: f64, r: f64 },
}

impl Shape {
    fn contains(&self, i: usize, j: usize) -> bool {
        match *self {
            Shape::Rect { i0, i1, j0, j1 } => (i0..i1).contains(&i) && (j0..j1).contains(&j),
            Shape::Disc { ci, cj, r } => {
                let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
                di * di + dj * dj <= r * r
            }
        }
    }
}

/// Fixed color for each class, independent of the seed.
fn class_color(class: usize) -> [f64; 3] {
    let h = class as f64 * 0.618_033_988_75 % 1.0;
    let k = |n: f64| {
        let t = (n + h * 6.0) % 6.0;
        1.0 - (t.min(4.0 - t).clamp(0.0, 1.0))
    };
    if class == 0 {
        [0.35, 0.35, 0.35]
    } else {
        [k(5.0), k(3.0), k(1.0)].map(|v| 0.15 + 0.85 * v)
    }
}

pub fn generate_sample(seed: u64, index: u64, height: usize, width: usize, classes: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (hf, wf) = (height as f64, width as f64);
    // Keeps every plane in front of the camera on large images.
    let tilt = (64.0 / hf.max(wf)).min(1.0);

    let background = Plane {
        depth: rng.gen_range(6.0..7.5),
        gy: tilt * rng.gen_range(-0.02..0.02),
        gx: tilt * rng.gen_range(-0.02..0.02),
        ci: hf / 2.0,
        cj: wf / 2.0,
    };
    let n_shapes = rng.gen_range(2..=6);
    let min_side = (hf.min(wf) / 8.0).max(2.0);
    let max_side = (hf.min(wf) / 2.0).max(min_side + 1.0);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..classes);
        let ci = rng.gen_range(0.0..hf);
        let cj = rng.gen_range(0.0..wf);
        let shape = if rng.gen_bool(0.5) {
            let sh = rng.gen_range(min_side..max_side);
            let sw = rng.gen_range(min_side..max_side);
            let clamp = |v: f64, hi: f64| v.clamp(0.0, hi) as usize;
            Shape::Rect {
                i0: clamp(ci - sh / 2.0, hf),
                i1: clamp(ci + sh / 2.0, hf),
                j0: clamp(cj - sw / 2.0, wf),
                j1: clamp(cj + sw / 2.0, wf),
            }
        } else {
            Shape::Disc {
                ci,
                cj,
                r: rng.gen_range(min_side / 2.0..max_side / 2.0),
            }
        };
        let plane = Plane {
            depth: rng.gen_range(1.5..5.0),
            gy: tilt * rng.gen_range(-0.03..0.03),
            gx: tilt * rng.gen_range(-0.03..0.03),
            ci,
            cj,
        };
        shapes.push((shape, class, plane));
    }

    let n = height * width;
    let mut s = SyntheticSample {
        height,
        width,
        image: vec![0.0; n * 3],
        segmentation: vec![0; n],
        depth: vec![0.0; n],
        normal: vec![0.0; n * 3],
        boundary: vec![0; n],
        instance: vec![0; n],
    };
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            let mut plane = background;
            for (k, (shape, class, pl)) in shapes.iter().enumerate() {
                if shape.contains(i, j) {
                    s.segmentation[p] = *class as u8;
                    s.instance[p] = (k + 1) as u8;
                    plane = *pl;
                }
            }
            let d = plane.at(i, j);
            s.depth[p] = d as f32;
            for (c, v) in plane.normal().into_iter().enumerate() {
                s.normal[p * 3 + c] = v as f32;
            }
            // Nearer surfaces are brighter, so depth is recoverable from shading.
            let shade = 1.3 - 0.15 * d;
            let color = class_color(s.segmentation[p] as usize);
            for c in 0..3 {
                s.image[p * 3 + c] = (color[c] * shade + rng.gen_range(-NOISE..NOISE)) as f32;
            }
        }
    }
    s.boundary = boundary_map(&s.segmentation, height, width);
    s
}

/// 1 at pixels with a 4-neighbor of a different label.
pub fn boundary_map(labels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = vec![0; labels.len()];
    for i in 0..height {
        for j in 0..width {
            let v = labels[i * width + j];
            let differs = (i > 0 && labels[(i - 1) * width + j] != v)
                || (i + 1 < height && labels[(i + 1) * width + j] != v)
                || (j > 0 && labels[i * width + j - 1] != v)
                || (j + 1 < width && labels[i * width + j + 1] != v);
            out[i * width + j] = differs as u8;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

impl Dataset {
    /// Train samples use stream indices `0..n_train`, validation samples the
    /// `n_val` indices after those.
    pub fn generate(seed: u64, height: usize, width: usize, classes: usize, n_train: usize, n_val: usize) -> Result<Self> {
        if !(2..=255).contains(&classes) {
            return Err(Error::Data(format!("need 2..=255 classes, got {classes}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Data("image size must be positive".into()));
        }
        let make = |range: std::ops::Range<usize>| -> Vec<SyntheticSample> {
            range
                .into_par_iter()
                .map(|i| generate_sample(seed, i as u64, height, width, classes))
                .collect()
        };
        Ok(Dataset {
            seed,
            height,
            width,
            classes,
            train: make(0..n_train),
            val: make(n_train..n_train + n_val),
        })
    }

    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data_dir {
            Some(dir) => {
                let ds = Dataset::load(dir)?;
                if (ds.height, ds.width) != (cfg.image_height, cfg.image_width) {
                    return Err(Error::Data(format!(
                        "dataset is {}x{}, config expects {}x{}",
                        ds.height, ds.width, cfg.image_height, cfg.image_width
                    )));
                }
                if ds.classes != cfg.classes() {
                    return Err(Error::Data(format!("dataset has {} classes, config expects {}", ds.classes, cfg.classes())));
                }
                Ok(ds)
            }
            None => Dataset::generate(
                cfg.seed,
                cfg.image_height,
                cfg.image_width,
                cfg.classes(),
                cfg.train_samples,
                cfg.val_samples,
            ),
        }
    }

    pub fn split(&self, name: &str) -> Result<&[SyntheticSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(Error::Data(format!("unknown split '{other}' (train|val)"))),
        }
    }

    /// Writes one RTEN file per field and sample plus [`MANIFEST`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut splits = serde_json::Map::new();
        for (split, samples) in [("train", &self.train), ("val", &self.val)] {
            let mut entries = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                let stem = format!("{split}_{i:05}");
                for (field, t) in sample_tensors(s)? {
                    write_rten(dir.join(format!("{stem}.{field}.rten")), &t)?;
                }
                entries.push(Value::String(stem));
            }
            splits.insert(split.to_string(), Value::Array(entries));
        }
        let manifest = json!({
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "classes": self.classes,
            "fields": FIELDS,
            "splits": splits,
        });
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
        let m: Value = serde_json::from_str(&text)?;
        if m["format"] != MANIFEST_FORMAT || m["version"] != MANIFEST_VERSION {
            return Err(Error::Data(format!("{} is not a version {MANIFEST_VERSION} {MANIFEST_FORMAT} manifest", dir.display())));
        }
        let num = |k: &str| m[k].as_u64().ok_or_else(|| Error::Data(format!("manifest field '{k}' missing")));
        let (seed, height, width, classes) = (num("seed")?, num("height")? as usize, num("width")? as usize, num("classes")? as usize);
        let load_split = |split: &str| -> Result<Vec<SyntheticSample>> {
            let stems = m["splits"][split]
                .as_array()
                .ok_or_else(|| Error::Data(format!("manifest split '{split}' missing")))?;
            stems
                .iter()
                .map(|stem| {
                    let stem = stem.as_str().ok_or_else(|| Error::Data("sample names must be strings".into()))?;
                    load_sample(dir, stem, height, width)
                })
                .collect()
        };
        let (train, val) = (load_split("train")?, load_split("val")?);
        Ok(Dataset {
            seed,
            height,
            width,
            classes,
            train,
            val,
        })
    }
}

const FIELDS: [&str; 6] = ["image", "segmentation", "depth", "normal", "boundary", "instance"];

fn sample_tensors(s: &SyntheticSample) -> Result<Vec<(&'static str, Tensor<f32>)>> {
    let (h, w) = (s.height, s.width);
    let bytes = |v: &[u8]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    Ok(vec![
        ("image", Tensor::new(&[h, w, 3], s.image.clone())?),
        ("segmentation", Tensor::new(&[h, w], bytes(&s.segmentation))?),
        ("depth", Tensor::new(&[h, w], s.depth.clone())?),
        ("normal", Tensor::new(&[h, w, 3], s.normal.clone())?),
        ("boundary", Tensor::new(&[h, w], bytes(&s.boundary))?),
        ("instance", Tensor::new(&[h, w], bytes(&s.instance))?),
    ])
}

fn load_sample(dir: &Path, stem: &str, height: usize, width: usize) -> Result<SyntheticSample> {
    let read = |field: &str, channels: Option<usize>| -> Result<Vec<f32>> {
        let path = dir.join(format!("{stem}.{field}.rten"));
        let t: Tensor<f32> = read_rten(&path)?;
        let want: Vec<usize> = match channels {
            Some(c) => vec![height, width, c],
            None => vec![height, width],
        };
        if t.shape() != want {
            return Err(Error::Data(format!("{} has shape {:?}, expected {want:?}", path.display(), t.shape())));
        }
        Ok(t.into_data())
    };
    let labels = |field: &str| -> Result<Vec<u8>> {
        read(field, None)?
            .into_iter()
            .map(|v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Data(format!("{stem}.{field}: {v} is not a label")))
                }
            })
            .collect()
    };
    Ok(SyntheticSample {
        height,
        width,
        image: read("image", Some(3))?,
        segmentation: labels("segmentation")?,
        depth: read("depth", None)?,
        normal: read("normal", Some(3))?,
        boundary: labels("boundary")?,
        instance: labels("instance")?,
    })
}

/// A stacked batch with one target per task.
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub targets: Vec<Target<T>>,
}

pub fn make_batch<T: Element>(samples: &[&SyntheticSample], tasks: &[TaskSpec]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (b, h, w) = (samples.len(), first.height, first.width);
    let floats = |f: &dyn Fn(&SyntheticSample) -> &[f32], c: usize| -> Result<Tensor<T>> {
        let data: Vec<T> = samples.iter().flat_map(|s| f(s).iter().map(|&v| T::lit(v as f64))).collect();
        Ok(Tensor::new(&[b, h, w, c], data)?)
    };
    let labels = |f: &dyn Fn(&SyntheticSample) -> &[u8]| -> Result<Labels> {
        Ok(Labels::new([b, h, w], samples.iter().flat_map(|s| f(s).iter().copied()).collect())?)
    };
    let targets = tasks
        .iter()
        .map(|t| {
            Ok(match t.kind {
                TaskKind::Segmentation => Target::Labels(labels(&|s| &s.segmentation)?),
                TaskKind::Boundary => Target::Labels(labels(&|s| &s.boundary)?),
                TaskKind::Depth => Target::Dense {
                    values: floats(&|s| &s.depth, 1)?,
                    mask: None,
                },
                TaskKind::Normal => Target::Dense {
                    values: floats(&|s| &s.normal, 3)?,
                    mask: None,
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(Batch {
        images: floats(&|s| &s.image, 3)?,
        targets,
    })
}
