//! Synthetic image-caption-mask data: colored shapes on a gray background.
//!
//! A dataset directory holds, for sample `i`, `{i:05}.ppm` (RGB image) and
//! `{i:05}.pgm` (mask, one class index per pixel, 0 = background, 255 =
//! ignore), plus:
//!
//! * `index.tsv`: one line per sample, `{i:05}.ppm<TAB>caption`;
//! * `classes.txt`: class names, line number = class index;
//! * `lexicon.txt`, `templates.txt`, `vocab.txt`: prompt nouns, prompt
//!   templates and the tokenizer vocabulary.

pub mod pnm;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::tokenizer::Vocab;
use crate::error::{Error, Result};
use crate::objectives::DEFAULT_TEMPLATES;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use pnm::Pnm;

pub const IGNORE_LABEL: u8 = 255;
pub const BACKGROUND: &str = "background";
pub const MAX_OBJECTS: usize = 3;
/// Placement attempts per object before the scene settles for fewer objects.
pub const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
        }
    }

    /// Mask value; 0 is background.
    pub fn class_index(self) -> u8 {
        self as u8 + 1
    }

    /// Whether the offset `(dx, dy)` from the center lies inside the shape of
    /// half-extent `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= SQUARE_HALF * r && dy.abs() <= SQUARE_HALF * r,
            // Apex at the top, base along the bottom of the bounding box.
            ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (RING_INNER * r).powi(2)
            }
        }
    }

    /// Exact area of the continuous shape.
    pub fn area(self, r: f64) -> f64 {
        match self {
            ShapeKind::Circle => std::f64::consts::PI * r * r,
            ShapeKind::Square => (2.0 * SQUARE_HALF * r).powi(2),
            ShapeKind::Triangle => 2.0 * r * r,
            ShapeKind::Cross => 20.0 * r * r / 9.0,
            ShapeKind::Ring => std::f64::consts::PI * r * r * (1.0 - RING_INNER * RING_INNER),
        }
    }

    /// Length of the boundary, bounding the pixel-sampling error of
    /// [`ShapeKind::area`].
    pub fn perimeter(self, r: f64) -> f64 {
        match self {
            ShapeKind::Circle => 2.0 * std::f64::consts::PI * r,
            ShapeKind::Square => 8.0 * SQUARE_HALF * r,
            ShapeKind::Triangle => 2.0 * r + 2.0 * (r * r + 4.0 * r * r).sqrt(),
            ShapeKind::Cross => 8.0 * r,
            ShapeKind::Ring => 2.0 * std::f64::consts::PI * r * (1.0 + RING_INNER),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const SQUARE_HALF: f64 = 0.85;
const RING_INNER: f64 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl ColorKind {
    pub const ALL: [ColorKind; 5] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
        ColorKind::Purple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorKind::Red => [220, 40, 40],
            ColorKind::Green => [40, 180, 60],
            ColorKind::Blue => [40, 80, 220],
            ColorKind::Yellow => [230, 210, 40],
            ColorKind::Purple => [150, 60, 190],
        }
    }
}

/// Geometry of generated scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Minimum gap between object bounding boxes, in pixels.
    pub margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            min_radius: 9.0,
            max_radius: 15.0,
            margin: 2.0,
        }
    }
}

impl SceneConfig {
    /// The default geometry scaled to `image_size`.
    pub fn for_size(image_size: usize) -> Self {
        let d = Self::default();
        let f = image_size as f64 / d.image_size as f64;
        SceneConfig {
            image_size,
            min_radius: d.min_radius * f,
            max_radius: d.max_radius * f,
            margin: d.margin * f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius && 2.0 * self.max_radius < s) {
            return Err(Error::Config(format!(
                "object radii [{}, {}] do not fit a {}-pixel image",
                self.min_radius, self.max_radius, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub center: (f64, f64),
    /// Half-extent of the bounding box.
    pub radius: f64,
}

impl SceneObject {
    fn overlaps(&self, other: &SceneObject, margin: f64) -> bool {
        let reach = self.radius + other.radius + margin;
        (self.center.0 - other.center.0).abs() < reach && (self.center.1 - other.center.1).abs() < reach
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.center.0;
        let dy = y as f64 + 0.5 - self.center.1;
        self.shape.contains(dx, dy, self.radius)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: [u8; 3],
    pub seed: u64,
}

impl SceneSpec {
    /// Draws 1 to 3 objects with uniform shape and color and places them
    /// without bounding-box overlap. An object that cannot be placed is
    /// dropped, so the scene may end up with fewer objects (never zero).
    pub fn sample(seed: u64, cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let level = rng.gen_range(30..=90u8);
        let wanted = rng.gen_range(1..=MAX_OBJECTS);
        let size = cfg.image_size as f64;
        let mut objects: Vec<SceneObject> = Vec::with_capacity(wanted);
        for _ in 0..wanted {
            let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
            let color = ColorKind::ALL[rng.gen_range(0..ColorKind::ALL.len())];
            for _ in 0..PLACEMENT_ATTEMPTS {
                let radius = rng.gen_range(cfg.min_radius..=cfg.max_radius);
                let center = (rng.gen_range(radius..=size - radius), rng.gen_range(radius..=size - radius));
                let cand = SceneObject {
                    shape,
                    color,
                    center,
                    radius,
                };
                if objects.iter().all(|o| !o.overlaps(&cand, cfg.margin)) {
                    objects.push(cand);
                    break;
                }
            }
        }
        SceneSpec {
            objects,
            background: [level; 3],
            seed,
        }
    }

    pub fn caption(&self) -> String {
        let parts: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("a {} {}", o.color.name(), o.shape.name()))
            .collect();
        format!("a photo of {}", parts.join(" and "))
    }

    /// Distinct shape words in caption order.
    pub fn nouns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for o in &self.objects {
            if !out.iter().any(|n| n == o.shape.name()) {
                out.push(o.shape.name().to_string());
            }
        }
        out
    }

    /// Image bytes (RGB) and mask bytes of a `size x size` rendering.
    pub fn render(&self, size: usize) -> (Vec<u8>, Vec<u8>) {
        let mut image = Vec::with_capacity(size * size * 3);
        let mut mask = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                let hit = self.objects.iter().find(|o| o.contains_pixel(x, y));
                match hit {
                    Some(o) => {
                        image.extend_from_slice(&o.color.rgb());
                        mask[y * size + x] = o.shape.class_index();
                    }
                    None => image.extend_from_slice(&self.background),
                }
            }
        }
        (image, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub size: usize,
    /// `size * size * 3` RGB bytes, row-major.
    pub image: Vec<u8>,
    pub caption: String,
    /// `size * size` class indices.
    pub mask: Vec<u8>,
    pub nouns: Vec<String>,
}

impl SampleRecord {
    /// `[H, W, 3]` with values in `[0, 1]`.
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        image_tensor(&self.image, self.size, self.size)
    }
}

pub fn image_tensor<T: Scalar>(rgb: &[u8], width: usize, height: usize) -> Tensor<T> {
    let data = rgb.iter().map(|&b| T::lit(f64::from(b) / 255.0)).collect();
    Tensor::new(&[height, width, 3], data).expect("rgb buffer matches its dimensions")
}

pub fn generate_sample(seed: u64, cfg: &SceneConfig) -> SampleRecord {
    let spec = SceneSpec::sample(seed, cfg);
    let (image, mask) = spec.render(cfg.image_size);
    SampleRecord {
        size: cfg.image_size,
        image,
        caption: spec.caption(),
        mask,
        nouns: spec.nouns(),
    }
}

/// Seed of sample `index` in a split generated with `split_seed`. Different
/// split seeds give disjoint ranges for any split below 2^32 samples.
pub fn sample_seed(split_seed: u64, index: usize) -> u64 {
    (split_seed << 32) | index as u64
}

pub fn class_names() -> Vec<String> {
    std::iter::once(BACKGROUND.to_string())
        .chain(ShapeKind::ALL.iter().map(|s| s.name().to_string()))
        .collect()
}

pub fn lexicon() -> Vec<String> {
    ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect()
}

/// Every word the captions and the default templates can produce.
pub fn vocabulary() -> Vocab {
    let mut words: Vec<String> = DEFAULT_TEMPLATES.iter().map(|t| t.replace("{noun}", "")).collect();
    words.push("a photo of and".into());
    words.extend(ColorKind::ALL.iter().map(|c| c.name().to_string()));
    words.extend(lexicon());
    words.push(BACKGROUND.into());
    Vocab::new(&words)
}

pub fn sample_name(index: usize) -> String {
    format!("{index:05}")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn lines(items: &[String]) -> String {
    items.iter().map(|s| format!("{s}\n")).collect()
}

/// Writes `n` samples and the metadata files into `dir`, creating it.
pub fn generate_split(dir: &Path, n: usize, split_seed: u64, cfg: &SceneConfig) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("a split needs at least one sample".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for i in 0..n {
        let s = generate_sample(sample_seed(split_seed, i), cfg);
        let name = sample_name(i);
        Pnm::rgb(s.size, s.size, s.image).save(&dir.join(format!("{name}.ppm")))?;
        Pnm::gray(s.size, s.size, s.mask).save(&dir.join(format!("{name}.pgm")))?;
        index.push_str(&format!("{name}.ppm\t{}\n", s.caption));
    }
    write(&dir.join("index.tsv"), index.as_bytes())?;
    write(&dir.join("classes.txt"), lines(&class_names()).as_bytes())?;
    write(&dir.join("lexicon.txt"), lines(&lexicon()).as_bytes())?;
    let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect();
    write(&dir.join("templates.txt"), lines(&templates).as_bytes())?;
    vocabulary().save(&dir.join("vocab.txt"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub caption: String,
    /// Present when a `.pgm` with the image's stem exists.
    pub mask: Option<Vec<u8>>,
}

impl LoadedSample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        image_tensor(&self.image, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    /// Reads `index.tsv` and every image and mask it lists.
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.tsv");
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut samples = Vec::new();
        for (ln, line) in index.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (file, caption) = line.split_once('\t').ok_or_else(|| Error::Format {
                kind: "index",
                path: index_path.clone(),
                msg: format!("line {}: expected filename<TAB>caption", ln + 1),
            })?;
            let img = Pnm::load(&dir.join(file))?;
            if img.channels != 3 {
                return Err(Error::Format {
                    kind: "pnm",
                    path: dir.join(file),
                    msg: "expected an RGB image".into(),
                });
            }
            let stem = Path::new(file).with_extension("pgm");
            let mask_path = dir.join(&stem);
            let mask = if mask_path.exists() {
                let m = Pnm::load(&mask_path)?;
                if m.channels != 1 || m.width != img.width || m.height != img.height {
                    return Err(Error::Format {
                        kind: "pnm",
                        path: mask_path,
                        msg: "mask must be a graymap of the image's size".into(),
                    });
                }
                Some(m.data)
            } else {
                None
            };
            samples.push(LoadedSample {
                name: file.to_string(),
                width: img.width,
                height: img.height,
                image: img.data,
                caption: caption.to_string(),
                mask,
            });
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[B, H, W, 3]` batch of the samples at `indices`.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let first = &self.samples[indices[0]];
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(indices.len() * w * h * 3);
        for &i in indices {
            let s = &self.samples[i];
            if (s.width, s.height) != (w, h) {
                return Err(Error::shape("dataset_images", format!("{} has a different size", s.name)));
            }
            data.extend(s.image.iter().map(|&b| T::lit(f64::from(b) / 255.0)));
        }
        Tensor::new(&[indices.len(), h, w, 3], data)
    }
}

/// Reads a class list: one name per line, line number = class index.
pub fn load_class_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Config(format!("class list {} is empty", path.display())));
    }
    Ok(names)
}
