//! Synthetic multi-label shape dataset.
//!
//! Each object is a class-specific silhouette made of a large, uniform,
//! low-contrast body and a small high-contrast textured core covering about
//! a tenth of its area. A classifier can solve the task from the cores
//! alone, so its CAMs tend to light up the core and miss most of the body;
//! that gap is what the expansion and shrinkage stages work on.
//!
//! Directory layout:
//!
//! ```text
//! manifest.csv          id,split,labels,image,mask
//! images/NNNNNN.tensor  [3,H,W] in [0,1]
//! masks/NNNNNN.tensor   [H,W] class ids (0 background, c+1 for class c)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 6;
pub const BACKGROUND_MEAN: f32 = 0.2;
pub const BACKGROUND_NOISE: f32 = 0.1;
pub const BODY_CONTRAST: f32 = 0.15;
pub const CORE_CONTRAST: f32 = 0.8;
pub const CORE_FRACTION: f64 = 0.04;
/// Circumradius range of an object as a fraction of the canvas side
/// (16 to 22 px on 64 px).
pub const OBJECT_RADIUS: (f64, f64) = (0.25, 0.34375);

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub train_count: usize,
    pub eval_count: usize,
    pub classes: usize,
    pub seed: u64,
    pub size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train_count: 500,
            eval_count: 100,
            classes: 3,
            seed: 0,
            size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Binary presence vector, one entry per class.
    pub labels: Vec<u8>,
    /// Per-pixel class ids, evaluation only.
    pub gt_mask: Vec<u8>,
}

impl SynthSample {
    pub fn present(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c] == 1).collect()
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Images and labels only; this is all the training code ever sees.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Vec<Tensor>,
    /// `[classes]` label vectors as floats.
    pub labels: Vec<Vec<f32>>,
    pub classes: usize,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack a batch into `[B,3,H,W]` images and `[B,C]` labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let imgs: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let s = self.images[i].shape().to_vec();
                self.images[i].clone().reshape(&[1, s[0], s[1], s[2]])
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let images = Tensor::stack(&refs)?;
        let labels = indices
            .iter()
            .flat_map(|&i| self.labels[i].iter().copied())
            .collect();
        Ok((images, Tensor::new(vec![indices.len(), self.classes], labels)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Vec<SynthSample>,
    pub eval: Vec<SynthSample>,
}

impl Dataset {
    fn to_set(&self, samples: &[SynthSample]) -> TrainSet {
        TrainSet {
            images: samples.iter().map(|s| s.image.clone()).collect(),
            labels: samples
                .iter()
                .map(|s| s.labels.iter().map(|&l| l as f32).collect())
                .collect(),
            classes: self.classes,
        }
    }

    pub fn train_set(&self) -> TrainSet {
        self.to_set(&self.train)
    }

    /// Eval images and labels without masks (classification accuracy).
    pub fn eval_set(&self) -> TrainSet {
        self.to_set(&self.eval)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut manifest = String::from("id,split,labels,image,mask\n");
        for (split, samples) in [(Split::Train, &self.train), (Split::Eval, &self.eval)] {
            for s in samples {
                let image = format!("images/{:06}.tensor", s.id);
                let mask = format!("masks/{:06}.tensor", s.id);
                write_tensor(&dir.join(&image), &s.image)?;
                let (h, w) = (s.height(), s.width());
                let m = Tensor::new(vec![h, w], s.gt_mask.iter().map(|&v| v as f32).collect())?;
                write_tensor(&dir.join(&mask), &m)?;
                let bits: String = s.labels.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
                manifest.push_str(&format!("{},{},{bits},{image},{mask}\n", s.id, split.name()));
            }
        }
        let p = dir.join("manifest.csv");
        fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.csv");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("id,split,labels,image,mask") {
            return Err(Error::format(&p, "unexpected manifest header"));
        }
        let mut classes = None;
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::format(&p, format!("bad manifest row `{line}`")));
            }
            let id: usize = f[0]
                .parse()
                .map_err(|_| Error::format(&p, format!("bad id `{}`", f[0])))?;
            let labels: Vec<u8> = f[2]
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(Error::format(&p, format!("bad label bits `{}`", f[2]))),
                })
                .collect::<Result<_>>()?;
            if *classes.get_or_insert(labels.len()) != labels.len() {
                return Err(Error::format(&p, "inconsistent label lengths"));
            }
            let image = read_tensor(&dir.join(f[3]))?;
            let mask = read_tensor(&dir.join(f[4]))?;
            if image.ndim() != 3 || image.shape()[0] != 3 || mask.shape() != &image.shape()[1..] {
                return Err(Error::Data(format!("sample {id}: image/mask shapes disagree")));
            }
            let sample = SynthSample {
                id,
                image,
                labels,
                gt_mask: mask.data().iter().map(|&v| v as u8).collect(),
            };
            match f[1] {
                "train" => train.push(sample),
                "eval" => eval.push(sample),
                other => return Err(Error::format(&p, format!("unknown split `{other}`"))),
            }
        }
        let classes = classes.ok_or_else(|| Error::Data("empty dataset manifest".into()))?;
        Ok(Self { classes, train, eval })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate train and eval splits; sample `i` is drawn from its own RNG
/// seeded by `seed` and `i`, so splits never share a sample.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.train_count == 0 {
        return Err(Error::Config("count must be >= 1".into()));
    }
    if cfg.classes == 0 || cfg.classes > MAX_CLASSES {
        return Err(Error::Config(format!(
            "{} classes requested; the generator has {MAX_CLASSES} shape kinds",
            cfg.classes
        )));
    }
    if cfg.size < 32 {
        return Err(Error::Config(format!(
            "canvas of {} pixels cannot hold the objects",
            cfg.size
        )));
    }
    let total = cfg.train_count + cfg.eval_count;
    let samples: Vec<SynthSample> = (0..total)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(i as u64)));
            sample(i, cfg.classes, cfg.size, &mut rng)
        })
        .collect();
    let mut samples = samples.into_iter();
    let train = samples.by_ref().take(cfg.train_count).collect();
    let eval = samples.collect();
    Ok(Dataset {
        classes: cfg.classes,
        train,
        eval,
    })
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: usize,
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let r = self.radius;
        match self.kind {
            // disc
            0 => u * u + v * v <= r * r,
            // triangle with circumradius r
            1 => {
                let k = 3f64.sqrt();
                v >= -r * 0.5 && v <= r && (k * u).abs() <= r - v
            }
            // bar
            2 => u.abs() <= r && v.abs() <= 0.38 * r,
            // diamond
            3 => u.abs() + v.abs() <= r,
            // cross
            4 => (u.abs() <= r && v.abs() <= 0.3 * r) || (v.abs() <= r && u.abs() <= 0.3 * r),
            // ring
            _ => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }
}

/// Class colour of the core; the body carries the same tint at low contrast.
const CORE_TINT: [[f32; 3]; MAX_CLASSES] = [
    [1.0, 0.15, 0.15],
    [0.15, 1.0, 0.15],
    [0.15, 0.15, 1.0],
    [1.0, 1.0, 0.15],
    [1.0, 0.15, 1.0],
    [0.15, 1.0, 1.0],
];

fn core_pattern(class: usize, y: usize, x: usize) -> bool {
    match class {
        0 => (y + x) % 2 == 0,
        1 => y % 2 == 0,
        2 => x % 2 == 0,
        3 => (x + y) % 3 != 0,
        4 => y % 2 == 0 || x % 2 == 0,
        _ => (x + 64 - y % 64) % 3 != 0,
    }
}

fn sample(id: usize, classes: usize, size: usize, rng: &mut impl Rng) -> SynthSample {
    let hw = size * size;
    let max_objects = classes.min(3);
    let wanted = rng.random_range(1..=max_objects);
    let mut pool: Vec<usize> = (0..classes).collect();
    let mut chosen = Vec::new();
    for _ in 0..wanted {
        let k = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(k));
    }

    let mut shapes: Vec<Shape> = Vec::new();
    for &class in &chosen {
        for _ in 0..200 {
            let radius = rng.random_range(OBJECT_RADIUS.0..OBJECT_RADIUS.1) * size as f64;
            let lo = radius + 1.0;
            let hi = size as f64 - radius - 2.0;
            let s = Shape {
                kind: class,
                cy: rng.random_range(lo..hi),
                cx: rng.random_range(lo..hi),
                radius,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            let clear = shapes.iter().all(|o| {
                let d = ((o.cy - s.cy).powi(2) + (o.cx - s.cx).powi(2)).sqrt();
                d >= o.radius + s.radius + 2.0
            });
            if clear {
                shapes.push(s);
                break;
            }
        }
    }
    if shapes.is_empty() {
        // the first placement always succeeds on an empty canvas
        unreachable!("no object placed");
    }

    let mut mask = vec![0u8; hw];
    let mut pixel = vec![0.0f32; 3 * hw];
    for p in pixel.iter_mut() {
        *p = BACKGROUND_MEAN + rng.random_range(-BACKGROUND_NOISE..BACKGROUND_NOISE);
    }
    for s in &shapes {
        let inside: Vec<usize> = (0..hw)
            .filter(|&p| s.contains((p / size) as f64, (p % size) as f64))
            .collect();
        for &p in &inside {
            mask[p] = (s.kind + 1) as u8;
            // grey body: only the core carries class colour
            for ch in 0..3 {
                pixel[ch * hw + p] = BACKGROUND_MEAN + BODY_CONTRAST;
            }
        }
        // core: a disc of ~4% of the body area lying fully inside the body
        let mut rc = (CORE_FRACTION * inside.len() as f64 / std::f64::consts::PI).sqrt();
        let centers = loop {
            let r2 = rc * rc;
            let reach = rc.ceil() as isize;
            let fits = |p: usize| {
                let (y, x) = ((p / size) as isize, (p % size) as isize);
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if ((dy * dy + dx * dx) as f64) > r2 {
                            continue;
                        }
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= size as isize || xx >= size as isize {
                            return false;
                        }
                        if mask[yy as usize * size + xx as usize] != (s.kind + 1) as u8 {
                            return false;
                        }
                    }
                }
                true
            };
            let c: Vec<usize> = inside.iter().copied().filter(|&p| fits(p)).collect();
            if !c.is_empty() || rc < 1.0 {
                break c;
            }
            rc -= 0.5;
        };
        let center = if centers.is_empty() {
            inside[inside.len() / 2]
        } else {
            centers[rng.random_range(0..centers.len())]
        };
        let (cy, cx) = ((center / size) as f64, (center % size) as f64);
        for &p in &inside {
            let (y, x) = (p / size, p % size);
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rc * rc {
                let on = core_pattern(s.kind, y, x);
                for ch in 0..3 {
                    pixel[ch * hw + p] = if on {
                        BACKGROUND_MEAN + CORE_CONTRAST * CORE_TINT[s.kind][ch]
                    } else {
                        BACKGROUND_MEAN + BODY_CONTRAST * CORE_TINT[s.kind][ch]
                    };
                }
            }
        }
    }
    pixel.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let mut labels = vec![0u8; classes];
    for &m in &mask {
        if m > 0 {
            labels[(m - 1) as usize] = 1;
        }
    }
    SynthSample {
        id,
        image: Tensor::new(vec![3, size, size], pixel).expect("sized buffer"),
        labels,
        gt_mask: mask,
    }
}
