//! Procedural harmonization samples with exact ground truth.
//!
//! A sample is a scene lit by one per-channel illuminant: a smooth background
//! gradient plus a few flat-coloured rectangles and ellipses. Every object
//! belongs to a class; the class fixes both its label colour in the semantic
//! map and its base albedo, so objects of one class look alike under the
//! scene light. The topmost object is the foreground. Its pixels get a random
//! per-channel gamma, gain and bias shift in the composite; all other pixels
//! are copied from the real image.
//!
//! Randomness is keyed on `(seed, index)` through a ChaCha stream, so a
//! sample never depends on which other samples were generated.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::{read_pgm, read_ppm, write_pgm, write_ppm, Image, ImageError, Mask};

pub const MANIFEST: &str = "manifest.txt";

/// Label colour of the background in the semantic map.
pub const BACKGROUND_LABEL: [f64; 3] = [0.0, 0.0, 0.0];

/// `(semantic label colour, base albedo)` per object class.
pub const CLASSES: [([f64; 3], [f64; 3]); 6] = [
    ([1.0, 0.0, 0.0], [0.80, 0.35, 0.30]),
    ([0.0, 1.0, 0.0], [0.30, 0.70, 0.35]),
    ([0.0, 0.0, 1.0], [0.30, 0.40, 0.80]),
    ([1.0, 1.0, 0.0], [0.85, 0.80, 0.40]),
    ([1.0, 0.0, 1.0], [0.70, 0.40, 0.75]),
    ([0.0, 1.0, 1.0], [0.45, 0.75, 0.80]),
];

/// Probability that the foreground reuses the class of a background object.
const SHARED_CLASS_PROB: f64 = 0.7;
const MAX_PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("sample {index}: no admissible foreground after {tries} placements")]
    Placement { index: u64, tries: usize },
    #[error("{}: listed in manifest but missing", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("sample {id}: {reason}")]
    Inconsistent { id: String, reason: String },
    #[error("dataset {} is empty", .0.display())]
    Empty(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub gamma: (f64, f64),
    /// Admissible foreground pixel fraction.
    pub fg_ratio: (f64, f64),
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 2,
            max_objects: 4,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            gain: (0.6, 1.4),
            bias: (-30.0 / 255.0, 30.0 / 255.0),
            gamma: (0.7, 1.4),
            fg_ratio: (0.01, 0.6),
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Colour shift fixed to the identity: composites equal real images.
    pub fn with_identity_shift(mut self) -> Self {
        self.gain = (1.0, 1.0);
        self.bias = (0.0, 0.0);
        self.gamma = (1.0, 1.0);
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.size < 16 {
            return bad("size must be at least 16");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if self.shapes.is_empty() {
            return bad("at least one shape kind is required");
        }
        for (name, (lo, hi)) in [
            ("gain", self.gain),
            ("bias", self.bias),
            ("gamma", self.gamma),
            ("fg_ratio", self.fg_ratio),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(&format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.gamma.0 <= 0.0 {
            return bad("gamma must be positive");
        }
        if self.fg_ratio.0 <= 0.0 || self.fg_ratio.1 >= 1.0 {
            return bad("fg_ratio range must lie inside (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub real: Image,
    pub composite: Image,
    pub mask: Mask,
    pub semantic: Image,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        self.real.dims()
    }
}

pub fn sample_id(index: u64) -> String {
    format!("{index:06}")
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn area_factor(kind: ShapeKind) -> f64 {
        match kind {
            ShapeKind::Rectangle => 4.0,
            ShapeKind::Ellipse => std::f64::consts::PI,
        }
    }

    /// Random shape covering roughly `ratio` of a `size`×`size` canvas.
    fn draw(rng: &mut ChaCha8Rng, kinds: &[ShapeKind], size: usize, ratio: f64) -> Shape {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let s = size as f64;
        let area = ratio * s * s;
        let aspect: f64 = rng.gen_range(0.5f64..=2.0);
        let r = (area / Shape::area_factor(kind)).sqrt();
        let ry = (r * aspect.sqrt()).clamp(1.0, s / 2.0);
        let rx = (area / Shape::area_factor(kind) / ry).clamp(1.0, s / 2.0);
        let cy = rng.gen_range(ry..=s - ry);
        let cx = rng.gen_range(rx..=s - rx);
        Shape {
            kind,
            cy,
            cx,
            ry,
            rx,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Deterministic function of `(cfg.seed, index)`.
pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<Sample, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.size;

    let light: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.75..=1.25));
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..=0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..=0.85));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();

    let mut real = Image::filled(n, n, [0.0; 3])?;
    let mut semantic = Image::filled(n, n, BACKGROUND_LABEL)?;
    let half = n as f64 / 2.0;
    for y in 0..n {
        for x in 0..n {
            let p = ((x as f64 + 0.5 - half) * cos + (y as f64 + 0.5 - half) * sin) / n as f64;
            let t = (p / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let px = std::array::from_fn(|c| quantize((c0[c] + (c1[c] - c0[c]) * t) * light[c]));
            real.set_pixel(y, x, px);
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut classes = Vec::with_capacity(count);
    for _ in 0..count - 1 {
        let class = rng.gen_range(0..CLASSES.len());
        let ratio = rng.gen_range(0.02..=0.2);
        let shape = Shape::draw(&mut rng, &cfg.shapes, n, ratio);
        paint(&mut real, &mut semantic, &shape, class, &light, &mut rng);
        classes.push(class);
    }

    let fg_class = if !classes.is_empty() && rng.gen_bool(SHARED_CLASS_PROB) {
        classes[rng.gen_range(0..classes.len())]
    } else {
        rng.gen_range(0..CLASSES.len())
    };
    let (lo, hi) = cfg.fg_ratio;
    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let target = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
        let shape = Shape::draw(&mut rng, &cfg.shapes, n, target);
        let mask = Mask::from_fn(n, n, |y, x| shape.contains(y, x))?;
        let r = mask.ratio();
        if r >= lo && r <= hi {
            placed = Some((shape, mask));
            break;
        }
    }
    let Some((shape, mask)) = placed else {
        return Err(DataError::Placement {
            index,
            tries: MAX_PLACEMENT_TRIES,
        });
    };
    paint(&mut real, &mut semantic, &shape, fg_class, &light, &mut rng);

    let gamma: [f64; 3] = std::array::from_fn(|_| range(&mut rng, cfg.gamma));
    let gain: [f64; 3] = std::array::from_fn(|_| range(&mut rng, cfg.gain));
    let bias: [f64; 3] = std::array::from_fn(|_| range(&mut rng, cfg.bias));
    let mut composite = real.clone();
    for y in 0..n {
        for x in 0..n {
            if mask.get(y, x) {
                let p = real.pixel(y, x);
                let q = std::array::from_fn(|c| quantize(gain[c] * p[c].powf(gamma[c]) + bias[c]));
                composite.set_pixel(y, x, q);
            }
        }
    }

    Ok(Sample {
        id: sample_id(index),
        real,
        composite,
        mask,
        semantic,
    })
}

fn paint(
    real: &mut Image,
    semantic: &mut Image,
    shape: &Shape,
    class: usize,
    light: &[f64; 3],
    rng: &mut ChaCha8Rng,
) {
    let (label, albedo) = CLASSES[class];
    let colour: [f64; 3] =
        std::array::from_fn(|c| quantize(albedo[c] * light[c] * rng.gen_range(0.92..=1.08)));
    let n = real.height();
    for y in 0..n {
        for x in 0..real.width() {
            if shape.contains(y, x) {
                real.set_pixel(y, x, colour);
                semantic.set_pixel(y, x, label);
            }
        }
    }
}

/// Samples `first..first + count`, generated on up to `threads` workers.
/// The result is ordered by index regardless of the thread count.
pub fn generate_dataset(
    cfg: &GenConfig,
    first: u64,
    count: usize,
    threads: usize,
) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let indices: Vec<u64> = (first..first + count as u64).collect();
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return indices.iter().map(|&i| generate_sample(cfg, i)).collect();
    }
    let chunk = count.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&i| generate_sample(cfg, i))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(count);
        for h in handles {
            out.extend(h.join().expect("generator worker panicked")?);
        }
        Ok(out)
    })
}

fn file_names(id: &str) -> [String; 4] {
    [
        format!("{id}_real.ppm"),
        format!("{id}_comp.ppm"),
        format!("{id}_mask.pgm"),
        format!("{id}_sem.ppm"),
    ]
}

/// Writes the four per-sample files and a sorted `manifest.txt`.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for s in samples {
        let [real, comp, mask, sem] = file_names(&s.id);
        write_ppm(&s.real, dir.join(real))?;
        write_ppm(&s.composite, dir.join(comp))?;
        write_pgm(&s.mask, dir.join(mask))?;
        write_ppm(&s.semantic, dir.join(sem))?;
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    let manifest: String = ids.iter().map(|id| format!("{id}\n")).collect();
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|source| DataError::Io { path, source })
}

/// Loads every sample listed in `manifest.txt`, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&path).map_err(|source| DataError::Io { path, source })?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| load_sample(dir, id))
        .collect()
}

fn load_sample(dir: &Path, id: &str) -> Result<Sample, DataError> {
    let paths = file_names(id).map(|f| dir.join(f));
    if let Some(p) = paths.iter().find(|p| !p.is_file()) {
        return Err(DataError::MissingFile(p.clone()));
    }
    let [real, comp, mask, sem] = paths;
    let sample = Sample {
        id: id.to_string(),
        real: read_ppm(real)?,
        composite: read_ppm(comp)?,
        mask: read_pgm(mask)?,
        semantic: read_ppm(sem)?,
    };
    let d = sample.real.dims();
    if sample.composite.dims() != d || sample.mask.dims() != d || sample.semantic.dims() != d {
        return Err(DataError::Inconsistent {
            id: id.to_string(),
            reason: "image, mask and semantic sizes differ".into(),
        });
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ratio_bucket;

    fn cfg(seed: u64) -> GenConfig {
        GenConfig {
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let a = generate_sample(&cfg(7), 3).unwrap();
        let b = generate_sample(&cfg(7), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_sample(&cfg(7), 4).unwrap());
        assert_ne!(a, generate_sample(&cfg(8), 3).unwrap());
    }

    #[test]
    fn identity_shift_gives_identical_composite() {
        for i in 0..10 {
            let s = generate_sample(&cfg(1).with_identity_shift(), i).unwrap();
            assert_eq!(s.composite, s.real);
        }
    }

    #[test]
    fn sample_invariants() {
        for i in 0..60 {
            let s = generate_sample(&cfg(11), i).unwrap();
            let r = s.mask.ratio();
            assert!((0.01..=0.6).contains(&r), "ratio {r}");
            let mut label = None;
            for y in 0..64 {
                for x in 0..64 {
                    if s.mask.get(y, x) {
                        let l = s.semantic.pixel(y, x);
                        assert_ne!(l, BACKGROUND_LABEL);
                        assert_eq!(*label.get_or_insert(l), l, "foreground label not flat");
                    } else {
                        assert_eq!(s.composite.pixel(y, x), s.real.pixel(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_order_does_not_depend_on_threads() {
        let c = GenConfig { size: 16, ..cfg(5) };
        let one = generate_dataset(&c, 0, 7, 1).unwrap();
        let three = generate_dataset(&c, 0, 7, 3).unwrap();
        assert_eq!(one, three);
        assert_eq!(one[4], generate_sample(&c, 4).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(GenConfig { size: 8, ..cfg(0) }.validate().is_err());
        assert!(GenConfig {
            gain: (1.2, 1.0),
            ..cfg(0)
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            min_objects: 0,
            ..cfg(0)
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            shapes: vec![],
            ..cfg(0)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn bucket_coverage_over_1000_samples() {
        let c = cfg(2024);
        let mut hits = [0usize; 3];
        for i in 0..1000 {
            let s = generate_sample(&c, i).unwrap();
            hits[ratio_bucket(s.mask.ratio())] += 1;
        }
        assert!(hits.iter().all(|&h| h >= 50), "{hits:?}");
    }

    #[test]
    fn write_load_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = GenConfig { size: 16, ..cfg(3) };
        let samples = generate_dataset(&c, 0, 4, 1).unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "000000\n000001\n000002\n000003\n");
        assert_eq!(load_dataset(dir.path()).unwrap(), samples);

        fs::write(dir.path().join(MANIFEST), "000000\n000009\n").unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::MissingFile(p)) => {
                assert!(p.ends_with("000009_real.ppm"), "{}", p.display())
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
