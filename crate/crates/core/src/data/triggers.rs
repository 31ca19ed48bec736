//! Trigger-set generation.
//!
//! Two families:
//! * abstract: a blank canvas overlaid with 3–6 primitives drawn from the
//!   seeded stream: filled star-shaped polygons, thick circular arcs, and
//!   straight bands of uniform noise.
//! * patch-tweaked: a base image from a clean dataset with a white 5x5
//!   square stamped one pixel in from a seeded corner.
//!
//! Image draws use stream 0 of the seed, label draws stream 1 and the
//! distance calibration used by [`default_delta`] stream 2.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::{euclidean, Dataset, Image};
use super::DataError;
use crate::rng::{self, Rng};

/// Side length of the patch stamped by the patch-tweaked family.
pub const PATCH_SIZE: usize = 5;

/// Rejection sampling gives up after this many attempts per requested image.
pub const ATTEMPTS_PER_IMAGE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerFamily {
    Abstract,
    PatchTweaked,
}

/// Where candidate trigger images come from.
#[derive(Debug, Clone, Copy)]
pub enum TriggerSource<'a> {
    Abstract {
        channels: usize,
        height: usize,
        width: usize,
    },
    PatchTweaked {
        base: &'a Dataset,
    },
}

impl TriggerSource<'_> {
    pub const MNIST_ABSTRACT: TriggerSource<'static> = TriggerSource::Abstract {
        channels: 1,
        height: 28,
        width: 28,
    };

    pub fn family(&self) -> TriggerFamily {
        match self {
            TriggerSource::Abstract { .. } => TriggerFamily::Abstract,
            TriggerSource::PatchTweaked { .. } => TriggerFamily::PatchTweaked,
        }
    }

    fn candidate(&self, rng: &mut Rng) -> Image {
        match *self {
            TriggerSource::Abstract {
                channels,
                height,
                width,
            } => abstract_image(rng, channels, height, width),
            TriggerSource::PatchTweaked { base } => patch_tweaked(rng, base),
        }
    }
}

fn abstract_image(rng: &mut Rng, channels: usize, height: usize, width: usize) -> Image {
    let mut image = Image::blank(channels, height, width);
    let primitives = rng.random_range(3..=6);
    for _ in 0..primitives {
        let colour: Vec<f32> = (0..channels)
            .map(|_| rng.random_range(0.25f32..1.0))
            .collect();
        match rng.random_range(0..3) {
            0 => draw_polygon(rng, &mut image, &colour),
            1 => draw_arc(rng, &mut image, &colour),
            _ => draw_noise_band(rng, &mut image),
        }
    }
    image
}

fn put(image: &mut Image, x: usize, y: usize, colour: &[f32]) {
    let (_, h, w) = image.dims();
    let pixels = image.pixels_mut();
    for (c, &v) in colour.iter().enumerate() {
        pixels[c * h * w + y * w + x] = v;
    }
}

fn draw_polygon(rng: &mut Rng, image: &mut Image, colour: &[f32]) {
    let (_, h, w) = image.dims();
    let scale = h.min(w) as f64;
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    let vertices = rng.random_range(3..=6);
    let mut angles: Vec<f64> = (0..vertices).map(|_| rng.random_range(0.0..TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let poly: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let r = rng.random_range(0.18 * scale..0.5 * scale);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            if inside(&poly, x as f64 + 0.5, y as f64 + 0.5) {
                put(image, x, y, colour);
            }
        }
    }
}

/// Even-odd ray casting.
fn inside(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn draw_arc(rng: &mut Rng, image: &mut Image, colour: &[f32]) {
    let (_, h, w) = image.dims();
    let scale = h.min(w) as f64;
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    let radius = rng.random_range(0.15 * scale..0.45 * scale);
    let thickness = rng.random_range(0.05 * scale..0.15 * scale);
    let start = rng.random_range(0.0..TAU);
    let span = rng.random_range(PI / 2.0..TAU);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if ((dx * dx + dy * dy).sqrt() - radius).abs() > thickness / 2.0 {
                continue;
            }
            let angle = (dy.atan2(dx) - start).rem_euclid(TAU);
            if angle <= span {
                put(image, x, y, colour);
            }
        }
    }
}

fn draw_noise_band(rng: &mut Rng, image: &mut Image) {
    let (channels, h, w) = image.dims();
    let scale = h.min(w) as f64;
    let theta = rng.random_range(0.0..PI);
    let offset = rng.random_range(-0.35 * scale..0.35 * scale);
    let half_width = rng.random_range(0.04 * scale..0.13 * scale);
    let (nx, ny) = (theta.cos(), theta.sin());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let d = (x as f64 + 0.5 - cx) * nx + (y as f64 + 0.5 - cy) * ny - offset;
            if d.abs() <= half_width {
                let noise: Vec<f32> = (0..channels).map(|_| rng.random::<f32>()).collect();
                put(image, x, y, &noise);
            }
        }
    }
}

fn patch_tweaked(rng: &mut Rng, base: &Dataset) -> Image {
    let mut image = base.image(rng.random_range(0..base.len()));
    let (_, h, w) = image.dims();
    let corner = rng.random_range(0..4);
    let x0 = if corner % 2 == 0 {
        1
    } else {
        w.saturating_sub(PATCH_SIZE + 1)
    };
    let y0 = if corner < 2 {
        1
    } else {
        h.saturating_sub(PATCH_SIZE + 1)
    };
    let white = vec![1.0; image.channels()];
    for y in y0..(y0 + PATCH_SIZE).min(h) {
        for x in x0..(x0 + PATCH_SIZE).min(w) {
            put(&mut image, x, y, &white);
        }
    }
    image
}

/// `count` images, each at distance ≥ `delta` from every earlier one.
/// Candidates closer than `delta` to an accepted image are redrawn.
pub fn generate_trigger_images(
    count: usize,
    seed: u64,
    delta: f64,
    source: &TriggerSource<'_>,
) -> Result<Vec<Image>, DataError> {
    if count == 0 {
        return Err(DataError::Argument(
            "trigger count must be at least 1".into(),
        ));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(DataError::Argument(format!(
            "delta must be a nonnegative real, got {delta}"
        )));
    }
    let mut rng = rng::stream(seed, 0);
    let mut accepted: Vec<Image> = Vec::with_capacity(count);
    let budget = ATTEMPTS_PER_IMAGE * count;
    let mut attempts = 0;
    while accepted.len() < count {
        if attempts == budget {
            return Err(DataError::Infeasible {
                requested: count,
                accepted: accepted.len(),
                delta,
            });
        }
        attempts += 1;
        let candidate = source.candidate(&mut rng);
        if delta == 0.0 || accepted.iter().all(|a| a.distance(&candidate) >= delta) {
            accepted.push(candidate);
        }
    }
    Ok(accepted)
}

/// Half the mean pairwise distance of 100 unconstrained candidates.
pub fn default_delta(source: &TriggerSource<'_>, seed: u64) -> f64 {
    let mut rng = rng::stream(seed, 2);
    let samples: Vec<Image> = (0..100).map(|_| source.candidate(&mut rng)).collect();
    let (sum, pairs) = pairwise(&samples).fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    0.5 * sum / pairs as f64
}

fn pairwise(images: &[Image]) -> impl Iterator<Item = f64> + '_ {
    (0..images.len())
        .flat_map(move |i| (i + 1..images.len()).map(move |j| images[i].distance(&images[j])))
}

/// Smallest distance between two distinct images, `None` below two images.
pub fn min_pairwise_distance(images: &[Image]) -> Option<f64> {
    pairwise(images).min_by(f64::total_cmp)
}

/// Owner's secret watermark key.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub owner_id: String,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub min_distance: f64,
    pub seed: u64,
    pub family: TriggerFamily,
}

/// Labels i.i.d. uniform on `[0, classes)` from stream 1 of `seed`.
pub fn assign_random_labels(
    images: Vec<Image>,
    classes: usize,
    seed: u64,
) -> Result<TriggerSet, DataError> {
    if classes < 2 {
        return Err(DataError::Argument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = rng::stream(seed, 1);
    let labels = images
        .iter()
        .map(|_| rng.random_range(0..classes))
        .collect();
    Ok(TriggerSet {
        owner_id: String::new(),
        images,
        labels,
        classes,
        min_distance: 0.0,
        seed,
        family: TriggerFamily::Abstract,
    })
}

impl TriggerSet {
    /// Images plus labels from one seed.
    pub fn generate(
        owner_id: impl Into<String>,
        count: usize,
        classes: usize,
        seed: u64,
        delta: f64,
        source: &TriggerSource<'_>,
    ) -> Result<Self, DataError> {
        let images = generate_trigger_images(count, seed, delta, source)?;
        let mut set = assign_random_labels(images, classes, seed)?;
        set.owner_id = owner_id.into();
        set.min_distance = delta;
        set.family = source.family();
        Ok(set)
    }

    /// Trigger set with no triggers (embedding it is plain training).
    pub fn empty(classes: usize) -> Self {
        Self {
            owner_id: String::new(),
            images: Vec::new(),
            labels: Vec::new(),
            classes,
            min_distance: 0.0,
            seed: 0,
            family: TriggerFamily::Abstract,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Exhaustive check of the pairwise-distance guarantee.
    pub fn check_spacing(&self) -> Result<(), DataError> {
        match min_pairwise_distance(&self.images) {
            Some(d) if d < self.min_distance => Err(DataError::Spacing {
                found: d,
                required: self.min_distance,
            }),
            _ => Ok(()),
        }
    }

    /// Every trigger must sit at least `min_distance` from every clean image.
    pub fn check_disjoint(&self, clean: &Dataset) -> Result<(), DataError> {
        for trigger in &self.images {
            if trigger.pixels().len() != clean.image_len() {
                return Err(DataError::Argument(
                    "trigger and dataset image sizes differ".into(),
                ));
            }
            for i in 0..clean.len() {
                let d = euclidean(trigger.pixels(), clean.pixels(i));
                if d < self.min_distance {
                    return Err(DataError::Spacing {
                        found: d,
                        required: self.min_distance,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> TriggerManifest {
        TriggerManifest {
            owner_id: self.owner_id.clone(),
            seed: self.seed,
            delta: self.min_distance,
            family: self.family,
            classes: self.classes,
            labels: self.labels.clone(),
        }
    }

    /// Writes `manifest.json` and `trigger-NNN.pgm` files into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), self.manifest().to_json())?;
        for (i, image) in self.images.iter().enumerate() {
            image.save_pgm(dir.join(trigger_file_name(i)))?;
        }
        Ok(())
    }

    /// Reproduces the set from `dir/manifest.json`. Patch-tweaked sets need
    /// the base dataset they were generated from.
    pub fn load_dir(dir: impl AsRef<Path>, base: Option<&Dataset>) -> Result<Self, DataError> {
        let text = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
        TriggerManifest::from_json(&text)?.reproduce(base)
    }
}

pub fn trigger_file_name(index: usize) -> String {
    format!("trigger-{index:03}.pgm")
}

/// Everything needed to regenerate a trigger set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerManifest {
    pub owner_id: String,
    pub seed: u64,
    pub delta: f64,
    pub family: TriggerFamily,
    pub classes: usize,
    pub labels: Vec<usize>,
}

impl TriggerManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        serde_json::from_str(text)
            .map_err(|e| DataError::Format(format!("bad trigger manifest: {e}")))
    }

    /// Regenerates the images (MNIST-sized for the abstract family) and
    /// checks the labels match.
    pub fn reproduce(&self, base: Option<&Dataset>) -> Result<TriggerSet, DataError> {
        let source = match (self.family, base) {
            (TriggerFamily::Abstract, _) => TriggerSource::MNIST_ABSTRACT,
            (TriggerFamily::PatchTweaked, Some(base)) => TriggerSource::PatchTweaked { base },
            (TriggerFamily::PatchTweaked, None) => {
                return Err(DataError::Argument(
                    "patch-tweaked triggers need their base dataset".into(),
                ))
            }
        };
        let set = TriggerSet::generate(
            self.owner_id.clone(),
            self.labels.len(),
            self.classes,
            self.seed,
            self.delta,
            &source,
        )?;
        if set.labels != self.labels {
            return Err(DataError::Consistency(
                "manifest labels do not match the regenerated trigger set".into(),
            ));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOURCE: TriggerSource<'static> = TriggerSource::MNIST_ABSTRACT;

    /// Independent check of every pair.
    fn all_pairs_at_least(images: &[Image], delta: f64) -> bool {
        for i in 0..images.len() {
            for j in 0..images.len() {
                if i != j && euclidean(images[i].pixels(), images[j].pixels()) < delta {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn single_image_and_zero_delta() {
        assert_eq!(
            generate_trigger_images(1, 3, 1e9, &SOURCE).unwrap().len(),
            1
        );
        let images = generate_trigger_images(10, 3, 0.0, &SOURCE).unwrap();
        assert_eq!(images.len(), 10);
        assert!(images
            .iter()
            .all(|im| im.pixels().iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn half_mean_distance_is_honoured() {
        let mut rng = rng::stream(123, 0);
        let free: Vec<Image> = (0..100).map(|_| SOURCE.candidate(&mut rng)).collect();
        let (sum, n) = pairwise(&free).fold((0.0, 0), |(s, n), d| (s + d, n + 1));
        let delta = 0.5 * sum / n as f64;
        assert!(delta > 1.0);
        let images = generate_trigger_images(10, 77, delta, &SOURCE).unwrap();
        assert!(all_pairs_at_least(&images, delta));
        assert!(min_pairwise_distance(&images).unwrap() >= delta);
    }

    #[test]
    fn impossible_delta_is_infeasible() {
        let err = generate_trigger_images(2, 1, 1e6, &SOURCE).unwrap_err();
        assert!(matches!(
            err,
            DataError::Infeasible {
                requested: 2,
                accepted: 1,
                ..
            }
        ));
        assert!(generate_trigger_images(0, 1, 0.0, &SOURCE).is_err());
        assert!(generate_trigger_images(1, 1, -1.0, &SOURCE).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let a = TriggerSet::generate("o", 5, 10, 9, 2.0, &SOURCE).unwrap();
        let b = TriggerSet::generate("o", 5, 10, 9, 2.0, &SOURCE).unwrap();
        let c = TriggerSet::generate("o", 5, 10, 10, 2.0, &SOURCE).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, c.images);
        a.check_spacing().unwrap();
    }

    #[test]
    fn label_frequencies_are_uniform() {
        let images = vec![Image::blank(1, 1, 1); 100_000];
        let set = assign_random_labels(images, 2, 5).unwrap();
        let ones = set.labels.iter().filter(|&&l| l == 1).count() as f64 / 1e5;
        assert!((ones - 0.5).abs() < 0.01, "{ones}");
        let again = assign_random_labels(vec![Image::blank(1, 1, 1); 100_000], 2, 5).unwrap();
        assert_eq!(set.labels, again.labels);
        let ten = assign_random_labels(vec![Image::blank(1, 1, 1); 10], 10, 1).unwrap();
        assert!(ten.labels.iter().all(|&l| l < 10));
        assert!(assign_random_labels(vec![], 1, 0).is_err());
    }

    #[test]
    fn patch_family_stamps_white_corner() {
        let base = Dataset::new(
            &[Image::blank(1, 28, 28)],
            vec![0],
            10,
            crate::data::Split::Test,
        )
        .unwrap();
        let source = TriggerSource::PatchTweaked { base: &base };
        let images = generate_trigger_images(3, 4, 0.0, &source).unwrap();
        for im in images {
            let white = im.pixels().iter().filter(|&&p| p == 1.0).count();
            assert_eq!(white, PATCH_SIZE * PATCH_SIZE);
        }
    }

    #[test]
    fn manifest_reproduces_the_set() {
        let set = TriggerSet::generate("owner-3", 4, 10, 31, 3.0, &SOURCE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        assert!(dir.path().join("trigger-003.pgm").exists());
        let back = TriggerSet::load_dir(dir.path(), None).unwrap();
        assert_eq!(back, set);

        let mut tampered = set.manifest();
        tampered.labels[0] = (tampered.labels[0] + 1) % 10;
        assert!(tampered.reproduce(None).is_err());
    }
}
