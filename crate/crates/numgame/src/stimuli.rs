//! Dot-image stimuli: white canvases with `n` disjoint black disks whose
//! total ink area is decoupled from numerosity, so count is the only cue
//! that generalises.
//!
//! Generation is rejection sampling. Each image draws a total ink fraction
//! uniformly from the configured range, splits it over dots with a symmetric
//! Dirichlet, and retries until radii, placement, and the *measured* pixel
//! fraction all satisfy the constraints. Every image has its own RNG stream
//! derived from the dataset spec hash, class, and index, so any single image
//! can be regenerated without replaying the rest.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::Raster;

/// Minimum dot radius in pixels; smaller disks rasterize too coarsely for
/// their area to track the sampled weight.
pub const MIN_RADIUS: f64 = 3.0;

/// Extra clearance (pixels) required between disk boundaries so rasterized
/// dots can never touch, even diagonally.
pub const SEPARATION: f64 = 2.0;

/// Total rejection budget per image before giving up.
pub const ATTEMPT_BUDGET: u32 = 10_000;

/// Dirichlet concentration for splitting ink area over dots.
const DIRICHLET_ALPHA: f64 = 5.0;

#[derive(Debug, Error)]
pub enum StimulusError {
    #[error("numerosity must be at least 1, got {n}")]
    InvalidNumerosity { n: u32 },

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error(
        "could not satisfy dot constraints for n={n} on a {side}x{side} canvas \
         within {attempts} attempts"
    )]
    InfeasibleConstraint { n: u32, side: usize, attempts: u32 },

    #[error("stimulus invariant violated: {0}")]
    InvariantViolation(String),

    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image encoding: {0}")]
    Encoding(String),

    #[error("dataset format: {0}")]
    Format(String),
}

/// One disk, in pixel coordinates (centre and radius).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// A rendered stimulus: canvas plus the geometry it was rendered from.
#[derive(Clone, Debug)]
pub struct DotImage {
    pub numerosity: u32,
    pub canvas: Raster,
    pub dots: Vec<Dot>,
    /// Ink fraction measured by counting dark pixels (not the sampled target).
    pub black_fraction: f64,
}

/// Accepted interval for the *measured* ink fraction. A degenerate range
/// (`lo == hi`) cannot be hit exactly by pixel counting, so it widens to a
/// ±4% relative band; a proper range is taken literally.
pub fn accept_band(area_range: (f64, f64)) -> (f64, f64) {
    let (lo, hi) = area_range;
    if (hi - lo).abs() < 1e-9 {
        (lo * 0.96, hi * 1.04)
    } else {
        (lo, hi)
    }
}

/// Generate one stimulus with `n` dots on a `side`-pixel canvas whose total
/// measured ink fraction lands in `area_range`.
pub fn generate_dot_image(
    n: u32,
    side: usize,
    area_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<DotImage, StimulusError> {
    if n == 0 {
        return Err(StimulusError::InvalidNumerosity { n });
    }
    validate_geometry(side, area_range)?;
    let (band_lo, band_hi) = accept_band(area_range);
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma parameters");
    let nd = n as usize;
    let total_px = (side * side) as f64;

    // The target fraction is drawn once per image and held fixed across
    // retries. Redrawing it on every rejection would skew accepted fractions
    // upward for large n (low fractions fail the minimum-radius constraint
    // more often), re-coupling ink area to numerosity.
    //
    // Fractions below n * pi * MIN_RADIUS^2 (plus headroom for the Dirichlet
    // spread) are geometrically unsatisfiable at any weight split, so the
    // draw floor rises to keep dense classes from burning the whole budget;
    // for the default range and n <= 5 the floor is inactive.
    let f_hard = nd as f64 * std::f64::consts::PI * MIN_RADIUS * MIN_RADIUS / total_px;
    let f_lo = area_range.0.max(f_hard * 1.2);
    if f_lo > area_range.1 {
        return Err(StimulusError::InfeasibleConstraint { n, side, attempts: 0 });
    }
    let frac = rng.random::<f64>() * (area_range.1 - f_lo) + f_lo;

    let mut attempts = 0u32;
    loop {
        attempts += 1;
        if attempts > ATTEMPT_BUDGET {
            return Err(StimulusError::InfeasibleConstraint { n, side, attempts: ATTEMPT_BUDGET });
        }

        // Dirichlet split of the ink over dots.
        let draws: Vec<f64> = (0..nd).map(|_| gamma.sample(rng)).collect();
        let dsum: f64 = draws.iter().sum();
        let radii: Vec<f64> = draws
            .iter()
            .map(|d| ((d / dsum) * frac * total_px / std::f64::consts::PI).sqrt())
            .collect();
        let max_r = (side as f64 - 2.0) / 2.0 - 1.0;
        if radii.iter().any(|&r| r < MIN_RADIUS || r > max_r) {
            continue;
        }

        // Place largest-first; each dot gets a bounded number of position
        // draws before the whole attempt is rejected.
        let mut order: Vec<usize> = (0..nd).collect();
        order.sort_by(|&a, &b| radii[b].partial_cmp(&radii[a]).unwrap().then(a.cmp(&b)));
        let mut placed: Vec<Dot> = Vec::with_capacity(nd);
        let mut ok = true;
        'dots: for &i in &order {
            let r = radii[i];
            let span = side as f64 - 2.0 * r - 2.0;
            for _ in 0..50 {
                let x = r + 1.0 + rng.random::<f64>() * span;
                let y = r + 1.0 + rng.random::<f64>() * span;
                let clear = placed.iter().all(|d| {
                    let (dx, dy) = (d.x - x, d.y - y);
                    (dx * dx + dy * dy).sqrt() >= d.r + r + SEPARATION
                });
                if clear {
                    placed.push(Dot { x, y, r });
                    continue 'dots;
                }
            }
            ok = false;
            break;
        }
        if !ok {
            continue;
        }

        let canvas = rasterize_dots(side, &placed);
        let measured = canvas.dark_fraction(0.5);
        if measured < band_lo || measured > band_hi {
            continue;
        }
        return Ok(DotImage { numerosity: n, canvas, dots: placed, black_fraction: measured });
    }
}

fn validate_geometry(side: usize, area_range: (f64, f64)) -> Result<(), StimulusError> {
    if side < 16 {
        return Err(StimulusError::InvalidSpec(format!("canvas side {side} too small")));
    }
    let (lo, hi) = area_range;
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
        return Err(StimulusError::InvalidSpec(format!(
            "area range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
        )));
    }
    Ok(())
}

/// Hard rasterization: a pixel is black iff its centre lies inside a disk.
/// No anti-aliasing, so measured area is an honest pixel count.
fn rasterize_dots(side: usize, dots: &[Dot]) -> Raster {
    let mut canvas = Raster::white(side);
    for d in dots {
        let x_lo = ((d.x - d.r).floor().max(0.0)) as usize;
        let x_hi = ((d.x + d.r).ceil().min(side as f64)) as usize;
        let y_lo = ((d.y - d.r).floor().max(0.0)) as usize;
        let y_hi = ((d.y + d.r).ceil().min(side as f64)) as usize;
        let r2 = d.r * d.r;
        for iy in y_lo..y_hi {
            let py = iy as f64 + 0.5 - d.y;
            for ix in x_lo..x_hi {
                let px = ix as f64 + 0.5 - d.x;
                if px * px + py * py < r2 {
                    canvas.set(ix, iy, 0.0);
                }
            }
        }
    }
    canvas
}

/// Count 4-connected components of pixels darker than `threshold`.
pub fn count_components(canvas: &Raster, threshold: f32) -> usize {
    let side = canvas.side();
    let mut seen = vec![false; side * side];
    let mut components = 0;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..side {
        for x in 0..side {
            if seen[y * side + x] || canvas.get(x, y) >= threshold {
                continue;
            }
            components += 1;
            stack.push((x, y));
            seen[y * side + x] = true;
            while let Some((cx, cy)) = stack.pop() {
                let push = |nx: usize, ny: usize, seen: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
                    if !seen[ny * side + nx] && canvas.get(nx, ny) < threshold {
                        seen[ny * side + nx] = true;
                        stack.push((nx, ny));
                    }
                };
                if cx > 0 {
                    push(cx - 1, cy, &mut seen, &mut stack);
                }
                if cx + 1 < side {
                    push(cx + 1, cy, &mut seen, &mut stack);
                }
                if cy > 0 {
                    push(cx, cy - 1, &mut seen, &mut stack);
                }
                if cy + 1 < side {
                    push(cx, cy + 1, &mut seen, &mut stack);
                }
            }
        }
    }
    components
}

/// Greatest ink-to-ink extent: the maximum over dot pairs of centre distance
/// plus both radii (for one dot, its diameter).
pub fn dot_span(image: &DotImage) -> f64 {
    let dots = &image.dots;
    if dots.len() == 1 {
        return 2.0 * dots[0].r;
    }
    let mut best = 0.0f64;
    for i in 0..dots.len() {
        for j in i + 1..dots.len() {
            let (dx, dy) = (dots[i].x - dots[j].x, dots[i].y - dots[j].y);
            let d = (dx * dx + dy * dy).sqrt() + dots[i].r + dots[j].r;
            if d > best {
                best = d;
            }
        }
    }
    best
}

impl DotImage {
    /// Check every stimulus invariant against the given area range.
    pub fn validate(&self, area_range: (f64, f64)) -> Result<(), StimulusError> {
        let n = self.numerosity;
        if n == 0 {
            return Err(StimulusError::InvariantViolation("numerosity 0".into()));
        }
        if self.dots.len() != n as usize {
            return Err(StimulusError::InvariantViolation(format!(
                "{} dots recorded for numerosity {n}",
                self.dots.len()
            )));
        }
        let measured = self.canvas.dark_fraction(0.5);
        if (measured - self.black_fraction).abs() > 1e-12 {
            return Err(StimulusError::InvariantViolation(format!(
                "stored black_fraction {} does not match measured {measured}",
                self.black_fraction
            )));
        }
        let (lo, hi) = accept_band(area_range);
        if measured < lo || measured > hi {
            return Err(StimulusError::InvariantViolation(format!(
                "black fraction {measured} outside [{lo}, {hi}]"
            )));
        }
        let comps = count_components(&self.canvas, 0.5);
        if comps != n as usize {
            return Err(StimulusError::InvariantViolation(format!(
                "{comps} connected components for numerosity {n}"
            )));
        }
        for i in 0..self.dots.len() {
            for j in i + 1..self.dots.len() {
                let (a, b) = (&self.dots[i], &self.dots[j]);
                let dist = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                if dist < a.r + b.r {
                    return Err(StimulusError::InvariantViolation(format!(
                        "dots {i} and {j} overlap (distance {dist:.2} < {:.2})",
                        a.r + b.r
                    )));
                }
            }
        }
        let side = self.canvas.side();
        for k in 0..side {
            for (x, y) in [(k, 0), (k, side - 1), (0, k), (side - 1, k)] {
                if self.canvas.get(x, y) < 0.5 {
                    return Err(StimulusError::InvariantViolation(format!(
                        "ink touches the border at ({x}, {y})"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---- datasets ---------------------------------------------------------------

/// Everything that determines a dataset's content. Hashing this (canonical
/// JSON, SHA-256) yields the identity used for caching and per-image seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Numerosity classes, strictly increasing.
    pub classes: Vec<u32>,
    /// Images per class, aligned with `classes`.
    pub counts: Vec<usize>,
    pub canvas_side: usize,
    pub area_range: (f64, f64),
    /// Leading fraction of each class that forms the train split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), StimulusError> {
        if self.classes.is_empty() {
            return Err(StimulusError::InvalidSpec("no classes".into()));
        }
        if self.classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StimulusError::InvalidSpec(format!(
                "classes must be strictly increasing, got {:?}",
                self.classes
            )));
        }
        if self.classes.contains(&0) {
            return Err(StimulusError::InvalidSpec("class 0 is not a numerosity".into()));
        }
        if self.counts.len() != self.classes.len() {
            return Err(StimulusError::InvalidSpec(format!(
                "{} counts for {} classes",
                self.counts.len(),
                self.classes.len()
            )));
        }
        if self.counts.iter().any(|&c| c == 0) {
            return Err(StimulusError::InvalidSpec("zero-count class".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(StimulusError::InvalidSpec(format!(
                "train fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        validate_geometry(self.canvas_side, self.area_range)
    }

    /// Content identity: SHA-256 of the canonical JSON encoding, hex.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Independent RNG stream for one image of one class.
    pub fn image_rng(&self, class: u32, index: usize) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.content_hash().as_bytes());
        h.update(b":");
        h.update(class.to_le_bytes());
        h.update(b":");
        h.update((index as u64).to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    fn train_count(&self, count: usize) -> usize {
        if count == 1 || self.train_fraction >= 1.0 {
            return count;
        }
        let t = (count as f64 * self.train_fraction).round() as usize;
        t.clamp(1, count - 1)
    }
}

/// All images of one numerosity class. The leading `train` images form the
/// train split, the remainder the test split.
#[derive(Clone, Debug)]
pub struct ClassSet {
    pub class: u32,
    pub images: Vec<DotImage>,
    pub train: usize,
}

impl ClassSet {
    pub fn train_images(&self) -> &[DotImage] {
        &self.images[..self.train]
    }

    pub fn test_images(&self) -> &[DotImage] {
        &self.images[self.train..]
    }
}

/// A generated dataset: per-class image pools plus the spec that made them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub classes: Vec<ClassSet>,
}

impl Dataset {
    /// Generate the full dataset described by `spec`.
    pub fn build(spec: &DatasetSpec) -> Result<Dataset, StimulusError> {
        spec.validate()?;
        let mut classes = Vec::with_capacity(spec.classes.len());
        for (ci, &class) in spec.classes.iter().enumerate() {
            let count = spec.counts[ci];
            let mut images = Vec::with_capacity(count);
            for index in 0..count {
                let mut rng = spec.image_rng(class, index);
                images.push(generate_dot_image(class, spec.canvas_side, spec.area_range, &mut rng)?);
            }
            classes.push(ClassSet { class, images, train: spec.train_count(count) });
        }
        Ok(Dataset { spec: spec.clone(), classes })
    }

    pub fn class(&self, class: u32) -> Option<&ClassSet> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn total_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    /// Write `manifest.json` plus one PNG per image into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), StimulusError> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::new();
        for cs in &self.classes {
            for (index, img) in cs.images.iter().enumerate() {
                let file = format!("n{}_i{}.png", cs.class, index);
                img.canvas.save_png(&dir.join(&file))?;
                records.push(ManifestImage {
                    class: cs.class,
                    index,
                    file,
                    black_fraction: img.black_fraction,
                    train: index < cs.train,
                    dots: img.dots.clone(),
                });
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT,
            content_hash: self.spec.content_hash(),
            spec: self.spec.clone(),
            images: records,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| StimulusError::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Load a dataset previously written by [`Dataset::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<Dataset, StimulusError> {
        let manifest_path = dir.join("manifest.json");
        let json = std::fs::read_to_string(&manifest_path)?;
        let manifest: Manifest =
            serde_json::from_str(&json).map_err(|e| StimulusError::Format(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(StimulusError::Format(format!(
                "manifest format {} (expected {MANIFEST_FORMAT})",
                manifest.format
            )));
        }
        manifest.spec.validate()?;
        if manifest.content_hash != manifest.spec.content_hash() {
            return Err(StimulusError::Format("content hash does not match spec".into()));
        }

        // Group records per class, ordered by index.
        let mut by_class: BTreeMap<u32, Vec<&ManifestImage>> = BTreeMap::new();
        for rec in &manifest.images {
            by_class.entry(rec.class).or_default().push(rec);
        }
        let mut classes = Vec::new();
        for (ci, &class) in manifest.spec.classes.iter().enumerate() {
            let mut recs = by_class.remove(&class).unwrap_or_default();
            recs.sort_by_key(|r| r.index);
            let expect = manifest.spec.counts[ci];
            if recs.len() != expect || recs.iter().enumerate().any(|(i, r)| r.index != i) {
                return Err(StimulusError::Format(format!(
                    "class {class}: expected indices 0..{expect}"
                )));
            }
            let mut images = Vec::with_capacity(recs.len());
            for rec in &recs {
                let canvas = Raster::load_png(&dir.join(&rec.file))?;
                if canvas.side() != manifest.spec.canvas_side {
                    return Err(StimulusError::Format(format!(
                        "{}: canvas side {} (expected {})",
                        rec.file,
                        canvas.side(),
                        manifest.spec.canvas_side
                    )));
                }
                let measured = canvas.dark_fraction(0.5);
                if (measured - rec.black_fraction).abs() > 1e-12 {
                    return Err(StimulusError::Format(format!(
                        "{}: stored ink fraction {} but pixels say {measured}",
                        rec.file, rec.black_fraction
                    )));
                }
                images.push(DotImage {
                    numerosity: class,
                    canvas,
                    dots: rec.dots.clone(),
                    black_fraction: rec.black_fraction,
                });
            }
            let train = manifest.spec.train_count(expect);
            classes.push(ClassSet { class, images, train });
        }
        if !by_class.is_empty() {
            return Err(StimulusError::Format(format!(
                "manifest lists classes not in spec: {:?}",
                by_class.keys().collect::<Vec<_>>()
            )));
        }
        Ok(Dataset { spec: manifest.spec, classes })
    }

    /// Load from `dir` if it already holds this spec's dataset, otherwise
    /// build and persist it. The returned dataset is identical either way.
    pub fn ensure_dir(spec: &DatasetSpec, dir: &Path) -> Result<Dataset, StimulusError> {
        if dir.join("manifest.json").exists() {
            let ds = Dataset::load_dir(dir)?;
            if ds.spec.content_hash() == spec.content_hash() {
                return Ok(ds);
            }
            return Err(StimulusError::Format(format!(
                "directory {} holds a different dataset",
                dir.display()
            )));
        }
        let ds = Dataset::build(spec)?;
        ds.save_dir(dir)?;
        Ok(ds)
    }
}

const MANIFEST_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    content_hash: String,
    spec: DatasetSpec,
    images: Vec<ManifestImage>,
}

#[derive(Serialize, Deserialize)]
struct ManifestImage {
    class: u32,
    index: usize,
    file: String,
    black_fraction: f64,
    train: bool,
    dots: Vec<Dot>,
}
