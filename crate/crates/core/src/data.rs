//! Synthetic class-signature image datasets: generation, on-disk layout and
//! loading.
//!
//! Every class owns a 2x2 block of patch positions and an oriented grating
//! texture painted there; the rest of the image is background noise. A
//! sample is a pure function of the spec, its split and its index.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! classes.txt          one class name per line, line number = class index
//! spec.txt             generator spec as `key = value` lines
//! train.tsv val.tsv test.tsv   `relative_path<TAB>class_index` manifests
//! train/00000.mpaf ... one tensor file per image, entry "image" [H, W, C]
//! ```

use std::f32::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mpaf_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::parse_pairs;
use crate::{tensorfile, Error, Result};

pub const SEVEN_CLASSES: [&str; 7] = [
    "surprise",
    "fear",
    "disgust",
    "happiness",
    "sadness",
    "anger",
    "neutral",
];

pub const EIGHT_CLASSES: [&str; 8] = [
    "neutral",
    "happiness",
    "surprise",
    "sadness",
    "anger",
    "disgust",
    "fear",
    "contempt",
];

/// Top-left patch coordinates (row, col) of each class's 2x2 region on a
/// 4x4 grid.
const REGION_ORIGINS: [(usize, usize); 9] = [
    (0, 0),
    (0, 2),
    (2, 0),
    (2, 2),
    (1, 1),
    (0, 1),
    (1, 0),
    (1, 2),
    (2, 1),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    /// Validation samples per class; defaults to 10% of the training count.
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub patch_size: usize,
    /// Standard deviation of the Gaussian background noise.
    pub noise: f32,
    /// Peak amplitude of the signature texture, which replaces the noise
    /// inside the region. The default `noise * sqrt(2)` gives the region the
    /// same per-pixel variance as the background, so patch energy alone does
    /// not mark it.
    pub amplitude: f32,
    /// Amplitude of the random class-agnostic distractor grating.
    pub distractor: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::new(7, 200)
    }
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, samples_per_class: usize) -> Self {
        Self {
            num_classes,
            samples_per_class,
            val_per_class: samples_per_class.div_ceil(10),
            test_per_class: samples_per_class.div_ceil(2),
            image_size: 32,
            image_channels: 1,
            patch_size: 8,
            noise: 0.5,
            amplitude: 0.5 * std::f32::consts::SQRT_2,
            distractor: 0.0,
            seed: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=REGION_ORIGINS.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must lie in [2, {}]",
                REGION_ORIGINS.len()
            )));
        }
        if self.samples_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("every split needs at least one sample per class".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.grid() != 4 {
            return Err(Error::Config("images must form a 4x4 patch grid".into()));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.amplitude > 0.0 && self.distractor >= 0.0) {
            return Err(Error::Config("noise/distractor must be >= 0, amplitude > 0".into()));
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.samples_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        let names: &[&str] = if self.num_classes == 8 {
            &EIGHT_CLASSES
        } else {
            &SEVEN_CLASSES
        };
        (0..self.num_classes)
            .map(|c| names.get(c).map_or(format!("class{c}"), |s| s.to_string()))
            .collect()
    }

    /// Patch indices (row-major on the grid) covered by class `c`.
    pub fn region_patches(&self, class: usize) -> Vec<usize> {
        let (r, c) = REGION_ORIGINS[class];
        let g = self.grid();
        vec![r * g + c, r * g + c + 1, (r + 1) * g + c, (r + 1) * g + c + 1]
    }

    /// Per-pixel membership of class `c`'s signature region, `[H * W]`.
    pub fn region_mask(&self, class: usize) -> Vec<bool> {
        let (s, p, g) = (self.image_size, self.patch_size, self.grid());
        let patches = self.region_patches(class);
        (0..s * s)
            .map(|i| patches.contains(&((i / s / p) * g + (i % s) / p)))
            .collect()
    }

    /// Grating orientation and spatial frequency (cycles per region) for a
    /// class. Orientations are spread over a half turn.
    fn texture(&self, class: usize) -> (f32, f32) {
        let angle = PI * class as f32 / self.num_classes as f32;
        let freq = 2.0 + (class % 3) as f32;
        (angle, freq)
    }

    fn grating(&self, class: usize, y: f32, x: f32, phase: f32) -> f32 {
        let (angle, freq) = self.texture(class);
        let span = (2 * self.patch_size) as f32;
        let u = (x * angle.cos() + y * angle.sin()) / span;
        (2.0 * PI * freq * u + phase).sin()
    }

    /// Deterministic image `[H, W, C]` for sample `index` of `split`.
    pub fn sample(&self, split: Split, index: usize) -> (Tensor, usize) {
        let label = index % self.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(split.stream() << 32 | index as u64);
        let (s, ch) = (self.image_size, self.image_channels);
        let noise = Normal::new(0.0f32, 1.0).expect("unit std");
        let mut data: Vec<f32> = (0..s * s * ch)
            .map(|_| self.noise * noise.sample(&mut rng))
            .collect();
        let mask = self.region_mask(label);
        let region = self.region_patches(label)[0];
        let (oy, ox) = (
            (region / self.grid() * self.patch_size) as f32,
            (region % self.grid() * self.patch_size) as f32,
        );
        for (i, inside) in mask.iter().enumerate() {
            if *inside {
                let (y, x) = ((i / s) as f32 - oy, (i % s) as f32 - ox);
                let v = self.amplitude * self.grating(label, y, x, 0.0);
                for c in 0..ch {
                    data[i * ch + c] = v;
                }
            }
        }
        if self.distractor > 0.0 {
            let other = rng.random_range(0..self.num_classes);
            let phase = rng.random_range(0.0..2.0 * PI);
            for (i, inside) in mask.iter().enumerate() {
                if !inside {
                    let v = self.distractor * self.grating(other, (i / s) as f32, (i % s) as f32, phase);
                    for c in 0..ch {
                        data[i * ch + c] += v;
                    }
                }
            }
        }
        let tensor = Tensor::new(&[s, s, ch], data).expect("image shape");
        (tensor, label)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("num_classes", self.num_classes.to_string());
        put("samples_per_class", self.samples_per_class.to_string());
        put("val_per_class", self.val_per_class.to_string());
        put("test_per_class", self.test_per_class.to_string());
        put("image_size", self.image_size.to_string());
        put("image_channels", self.image_channels.to_string());
        put("patch_size", self.patch_size.to_string());
        put("noise", self.noise.to_string());
        put("amplitude", self.amplitude.to_string());
        put("distractor", self.distractor.to_string());
        put("seed", self.seed.to_string());
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value, line) in parse_pairs(text)? {
            let bad = |what: &str| Error::Format {
                path: path.to_path_buf(),
                line,
                msg: format!("{key}: invalid {what} {value:?}"),
            };
            macro_rules! num {
                ($field:ident) => {
                    spec.$field = value.parse().map_err(|_| bad("number"))?
                };
            }
            match key.as_str() {
                "num_classes" => num!(num_classes),
                "samples_per_class" => num!(samples_per_class),
                "val_per_class" => num!(val_per_class),
                "test_per_class" => num!(test_per_class),
                "image_size" => num!(image_size),
                "image_channels" => num!(image_channels),
                "patch_size" => num!(patch_size),
                "noise" => num!(noise),
                "amplitude" => num!(amplitude),
                "distractor" => num!(distractor),
                "seed" => num!(seed),
                _ => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn manifest_name(split: Split) -> String {
    format!("{}.tsv", split.as_str())
}

/// Writes train/val/test splits under `out`. An existing non-empty `out` is
/// refused unless `force` is set, in which case it is replaced.
pub fn generate_dataset(spec: &SyntheticSpec, out: &Path, force: bool) -> Result<()> {
    spec.validate()?;
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("classes.txt", spec.class_names().join("\n") + "\n")?;
    write("spec.txt", spec.to_text())?;
    for split in Split::ALL {
        let dir = out.join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = String::new();
        for i in 0..spec.per_class(split) * spec.num_classes {
            let (image, label) = spec.sample(split, i);
            let rel = format!("{}/{i:05}.mpaf", split.as_str());
            tensorfile::save(&out.join(&rel), &[("image".into(), image)])?;
            let _ = writeln!(manifest, "{rel}\t{label}");
        }
        write(&manifest_name(split), manifest)?;
    }
    Ok(())
}

/// One loaded split: images `[H, W, C]` with labels, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct SplitData {
    pub paths: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    /// Present for generated datasets.
    pub spec: Option<SyntheticSpec>,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

pub fn read_classes(root: &Path) -> Result<Vec<String>> {
    let path = root.join("classes.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if classes.len() < 2 {
        return Err(Error::Format {
            path,
            line: 1,
            msg: "at least two classes are required".into(),
        });
    }
    Ok(classes)
}

fn load_split(root: &Path, split: Split, num_classes: usize) -> Result<SplitData> {
    let path = root.join(manifest_name(split));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut data = SplitData::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format {
            path: path.clone(),
            line: i + 1,
            msg,
        };
        let (rel, label) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected path<TAB>class_index".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad class index {label:?}")))?;
        if label >= num_classes {
            return Err(bad(format!("class index {label} out of range")));
        }
        let entries = tensorfile::load(&root.join(rel))?;
        let image = entries
            .into_iter()
            .find(|(n, _)| n == "image")
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("{rel} has no image entry")))?;
        data.paths.push(rel.to_string());
        data.images.push(image);
        data.labels.push(label);
    }
    Ok(data)
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let classes = read_classes(root)?;
        let spec_path = root.join("spec.txt");
        let spec = if spec_path.exists() {
            let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
            Some(SyntheticSpec::parse(&spec_path, &text)?)
        } else {
            None
        };
        let c = classes.len();
        Ok(Self {
            root: root.to_path_buf(),
            train: load_split(root, Split::Train, c)?,
            val: load_split(root, Split::Val, c)?,
            test: load_split(root, Split::Test, c)?,
            classes,
            spec,
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.train.images.first().map(|t| t.shape())
    }

    /// Identity of what a checkpoint must agree with: class list and image
    /// geometry.
    pub fn hash(&self) -> String {
        dataset_hash(&self.classes, self.image_shape().unwrap_or(&[]))
    }
}

pub fn dataset_hash(classes: &[String], image_shape: &[usize]) -> String {
    let mut h = Sha256::new();
    for c in classes {
        h.update(c.as_bytes());
        h.update(b"\n");
    }
    for d in image_shape {
        h.update((*d as u32).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
