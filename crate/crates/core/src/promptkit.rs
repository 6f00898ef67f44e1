//! Point and box prompts derived from ground-truth masks, plus groups of
//! independently perturbed prompts over the same scene.
//!
//! Annotation line format (one element per line, whitespace separated):
//!
//! ```text
//! <sample_id> <entity> point <x> <y> <fg|bg>
//! <sample_id> <entity> box <x_min> <y_min> <x_max> <y_max>
//! ```
//!
//! Coordinates are integer pixel indices; box corners are inclusive.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synthgen::{mix_seed, SceneSample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Foreground,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Point,
    Box,
}

impl FromStr for PromptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(PromptMode::Point),
            "box" => Ok(PromptMode::Box),
            other => Err(Error::Config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Point => "point",
            PromptMode::Box => "box",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptElement {
    Point { x: usize, y: usize, polarity: Polarity },
    Box { x_min: usize, y_min: usize, x_max: usize, y_max: usize },
}

impl PromptElement {
    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        match *self {
            PromptElement::Point { x, y, .. } => x < width && y < height,
            PromptElement::Box { x_min, y_min, x_max, y_max } => {
                x_min <= x_max && y_min <= y_max && x_max < width && y_max < height
            }
        }
    }
}

/// One prompt element per entity; element `k` belongs to entity `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnnotation {
    pub elements: Vec<PromptElement>,
}

impl PromptAnnotation {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn to_lines(&self, sample_id: &str) -> String {
        let mut out = String::new();
        for (k, e) in self.elements.iter().enumerate() {
            let line = match *e {
                PromptElement::Point { x, y, polarity } => {
                    let pol = if polarity == Polarity::Foreground { "fg" } else { "bg" };
                    format!("{sample_id} {k} point {x} {y} {pol}\n")
                }
                PromptElement::Box { x_min, y_min, x_max, y_max } => {
                    format!("{sample_id} {k} box {x_min} {y_min} {x_max} {y_max}\n")
                }
            };
            out.push_str(&line);
        }
        out
    }

    /// Parses lines written by [`PromptAnnotation::to_lines`] for one sample.
    /// Returns the sample id and the annotation.
    pub fn parse_lines(text: &str) -> Result<(String, PromptAnnotation)> {
        let mut sample: Option<String> = None;
        let mut elements = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |why: &str| Error::Data(format!("prompt line {}: {why}: `{line}`", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 5 {
                return Err(bad("too few fields"));
            }
            match &sample {
                None => sample = Some(f[0].to_string()),
                Some(s) if s != f[0] => return Err(bad("mixed sample ids")),
                _ => {}
            }
            let entity: usize = f[1].parse().map_err(|_| bad("entity index"))?;
            if entity != elements.len() {
                return Err(bad("entity indices must be consecutive from 0"));
            }
            let num = |i: usize| -> Result<usize> { f[i].parse().map_err(|_| bad("coordinate")) };
            let element = match (f[2], f.len()) {
                ("point", 6) => PromptElement::Point {
                    x: num(3)?,
                    y: num(4)?,
                    polarity: match f[5] {
                        "fg" => Polarity::Foreground,
                        "bg" => Polarity::Background,
                        _ => return Err(bad("polarity")),
                    },
                },
                ("box", 7) => PromptElement::Box { x_min: num(3)?, y_min: num(4)?, x_max: num(5)?, y_max: num(6)? },
                _ => return Err(bad("unknown element")),
            };
            elements.push(element);
        }
        let sample = sample.ok_or_else(|| Error::Data("empty prompt record".into()))?;
        Ok((sample, PromptAnnotation { elements }))
    }
}

/// `N_t` perturbed annotations of the same sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub sample_seed: u64,
    pub annotations: Vec<PromptAnnotation>,
    pub mode: PromptMode,
    pub jitter: f64,
}

impl PromptGroup {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

/// Maximum displacement in pixels for a relative jitter.
pub fn jitter_radius(jitter: f64, height: usize, width: usize) -> i64 {
    (jitter * height.min(width) as f64).floor() as i64
}

fn tight_box(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), _) in mask.indexed_iter().filter(|(_, &m)| m) {
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b
}

/// Rounded centroid of the mask; falls back to the nearest mask pixel when
/// the centroid is outside the mask (rings, crosses).
fn seed_point(mask: &Array2<bool>) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for ((y, x), _) in mask.indexed_iter().filter(|(_, &m)| m) {
        sx += x as f64;
        sy += y as f64;
        n += 1.0;
    }
    let cx = (sx / n).round() as usize;
    let cy = (sy / n).round() as usize;
    if mask[[cy, cx]] {
        return (cx, cy);
    }
    let mut best = (cx, cy);
    let mut best_d = usize::MAX;
    for ((y, x), _) in mask.indexed_iter().filter(|(_, &m)| m) {
        let d = x.abs_diff(cx).pow(2) + y.abs_diff(cy).pow(2);
        if d < best_d {
            best_d = d;
            best = (x, y);
        }
    }
    best
}

fn displace(v: usize, radius: i64, limit: usize, rng: &mut ChaCha8Rng) -> usize {
    if radius == 0 {
        return v;
    }
    let d = rng.random_range(-radius..=radius);
    (v as i64 + d).clamp(0, limit as i64 - 1) as usize
}

/// Builds one prompt element per entity of `sample`.
pub fn annotate(sample: &SceneSample, mode: PromptMode, jitter: f64, seed: u64) -> Result<PromptAnnotation> {
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(Error::Config(format!("jitter must be finite and non-negative, got {jitter}")));
    }
    let (h, w) = (sample.height(), sample.width());
    let radius = jitter_radius(jitter, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut elements = Vec::with_capacity(sample.entities.len());
    for (k, entity) in sample.entities.iter().enumerate() {
        let (x0, y0, x1, y1) =
            tight_box(&entity.mask).ok_or_else(|| Error::Data(format!("entity {k} has an empty mask")))?;
        let element = match mode {
            PromptMode::Point => {
                let (cx, cy) = seed_point(&entity.mask);
                PromptElement::Point {
                    x: displace(cx, radius, w, &mut rng),
                    y: displace(cy, radius, h, &mut rng),
                    polarity: Polarity::Foreground,
                }
            }
            PromptMode::Box => {
                let mut x_min = displace(x0, radius, w, &mut rng);
                let mut y_min = displace(y0, radius, h, &mut rng);
                let mut x_max = displace(x1, radius, w, &mut rng);
                let mut y_max = displace(y1, radius, h, &mut rng);
                // crossed edges are swapped back into a valid box
                if x_min > x_max {
                    std::mem::swap(&mut x_min, &mut x_max);
                }
                if y_min > y_max {
                    std::mem::swap(&mut y_min, &mut y_max);
                }
                PromptElement::Box { x_min, y_min, x_max, y_max }
            }
        };
        elements.push(element);
    }
    Ok(PromptAnnotation { elements })
}

/// `n_t` independent annotations of `sample`.
pub fn make_prompt_groups(
    sample: &SceneSample,
    n_t: usize,
    mode: PromptMode,
    jitter: f64,
    seed: u64,
) -> Result<PromptGroup> {
    if n_t < 2 {
        return Err(Error::Config(format!("a prompt group needs at least 2 members, got {n_t}")));
    }
    let annotations = (0..n_t)
        .map(|i| annotate(sample, mode, jitter, mix_seed(seed, i as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptGroup { sample_seed: sample.seed, annotations, mode, jitter })
}

/// IoU of two inclusive pixel boxes.
pub fn box_iou(a: &PromptElement, b: &PromptElement) -> f64 {
    match (*a, *b) {
        (
            PromptElement::Box { x_min: ax0, y_min: ay0, x_max: ax1, y_max: ay1 },
            PromptElement::Box { x_min: bx0, y_min: by0, x_max: bx1, y_max: by1 },
        ) => {
            let area = |x0: usize, y0: usize, x1: usize, y1: usize| ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            let ix0 = ax0.max(bx0);
            let iy0 = ay0.max(by0);
            let ix1 = ax1.min(bx1);
            let iy1 = ay1.min(by1);
            let inter = if ix0 <= ix1 && iy0 <= iy1 { area(ix0, iy0, ix1, iy1) } else { 0.0 };
            inter / (area(ax0, ay0, ax1, ay1) + area(bx0, by0, bx1, by1) - inter)
        }
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{
        sample_scene, standard_factors, CausalRecord, ClassVocabulary, EntityInstance, SceneGeometry,
        SceneRecord, ShapeFamily, TextureFamily,
    };
    use ndarray::Array3;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn square_sample(x0: usize, x1: usize) -> SceneSample {
        let mask = Array2::from_shape_fn((64, 64), |(y, x)| (x0..=x1).contains(&x) && (x0..=x1).contains(&y));
        let c = (x0 + x1) as f64 / 2.0;
        SceneSample {
            seed: 0,
            image: Array3::zeros((64, 64, 3)),
            entities: vec![EntityInstance {
                class_id: 0,
                mask,
                causal: CausalRecord {
                    class_id: 0,
                    shape: ShapeFamily::Rectangle,
                    texture: TextureFamily::Solid,
                    center: (c, c),
                    radius: (x1 - x0) as f64 / 2.0,
                    aspect: 1.0,
                    rotation: 0.0,
                    texture_freq: 0.2,
                    texture_phase: 0.0,
                },
            }],
            scene: SceneRecord { background_hue: 0.0, illumination_gain: 1.0, noise_sigma: 0.0, distractors: vec![] },
        }
    }

    fn scenes(n: u64) -> Vec<SceneSample> {
        let vocab = ClassVocabulary::standard(9).unwrap();
        let all: Vec<usize> = (0..9).collect();
        (0..n).map(|s| sample_scene(s, &vocab, &standard_factors(), &all, SceneGeometry::default()).unwrap()).collect()
    }

    #[test]
    fn zero_jitter_box_is_tight() {
        for s in scenes(10) {
            let a = annotate(&s, PromptMode::Box, 0.0, 3).unwrap();
            for (e, el) in s.entities.iter().zip(&a.elements) {
                let (x0, y0, x1, y1) = tight_box(&e.mask).unwrap();
                assert_eq!(*el, PromptElement::Box { x_min: x0, y_min: y0, x_max: x1, y_max: y1 });
            }
        }
    }

    #[test]
    fn zero_jitter_point_is_centroid_and_inside() {
        let s = square_sample(10, 20);
        let a = annotate(&s, PromptMode::Point, 0.0, 1).unwrap();
        assert_eq!(a.elements[0], PromptElement::Point { x: 15, y: 15, polarity: Polarity::Foreground });
        for s in scenes(20) {
            let a = annotate(&s, PromptMode::Point, 0.0, 9).unwrap();
            for (e, el) in s.entities.iter().zip(&a.elements) {
                let PromptElement::Point { x, y, .. } = *el else { panic!() };
                assert!(e.mask[[y, x]]);
            }
        }
    }

    #[test]
    fn box_edge_displacement_is_uniform() {
        let s = square_sample(16, 47);
        let r = jitter_radius(0.25, 64, 64);
        assert_eq!(r, 16);
        let mut counts = vec![0usize; 33];
        let mut max_seen = 0i64;
        for draw in 0..1000u64 {
            let a = annotate(&s, PromptMode::Box, 0.25, draw).unwrap();
            let PromptElement::Box { x_min, y_min, x_max, y_max } = a.elements[0] else { panic!() };
            for (v, base) in [(x_min, 16), (y_min, 16), (x_max, 47), (y_max, 47)] {
                let d = v as i64 - base;
                max_seen = max_seen.max(d.abs());
                counts[(d + 16) as usize] += 1;
            }
        }
        assert_eq!(max_seen, 16);
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 33.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(32.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn group_sizes_and_degenerate_jitter() {
        let s = &scenes(1)[0];
        let g2 = make_prompt_groups(s, 2, PromptMode::Box, 0.1, 0).unwrap();
        assert_eq!(g2.len(), 2);
        let g4 = make_prompt_groups(s, 4, PromptMode::Box, 0.1, 0).unwrap();
        assert_eq!(g4.len(), 4);
        let g0 = make_prompt_groups(s, 3, PromptMode::Point, 0.0, 5).unwrap();
        assert!(g0.annotations.iter().all(|a| a == &g0.annotations[0]));
        assert!(matches!(make_prompt_groups(s, 1, PromptMode::Box, 0.1, 0), Err(Error::Config(_))));
        assert!(matches!(annotate(s, PromptMode::Box, -0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_mask_is_data_error() {
        let mut s = square_sample(4, 8);
        s.entities[0].mask.fill(false);
        assert!(matches!(annotate(&s, PromptMode::Point, 0.0, 0), Err(Error::Data(_))));
    }

    #[test]
    fn expected_box_iou_decreases_with_jitter() {
        let samples = scenes(40);
        let mut last = f64::INFINITY;
        for jitter in [0.0, 0.05, 0.1, 0.2, 0.3] {
            let mut total = 0.0;
            let mut n = 0.0;
            for (i, s) in samples.iter().enumerate() {
                let clean = annotate(s, PromptMode::Box, 0.0, 0).unwrap();
                for rep in 0..10 {
                    let noisy = annotate(s, PromptMode::Box, jitter, (i * 10 + rep) as u64).unwrap();
                    for (a, b) in clean.elements.iter().zip(&noisy.elements) {
                        total += box_iou(a, b);
                        n += 1.0;
                    }
                }
            }
            let mean = total / n;
            assert!(mean <= last + 1e-12, "IoU rose at jitter {jitter}: {mean} > {last}");
            last = mean;
        }
        assert!(last < 0.8);
    }

    #[test]
    fn lines_round_trip() {
        let s = &scenes(3)[2];
        for mode in [PromptMode::Box, PromptMode::Point] {
            let a = annotate(s, mode, 0.2, 11).unwrap();
            let text = a.to_lines("train_0002");
            let (id, back) = PromptAnnotation::parse_lines(&text).unwrap();
            assert_eq!(id, "train_0002");
            assert_eq!(back, a);
            assert!(a.elements.iter().all(|e| e.in_bounds(64, 64)));
        }
        assert_eq!(
            PromptAnnotation::parse_lines("s 0 point 3 4 fg\ns 1 box 1 2 5 6\n").unwrap().1.elements,
            vec![
                PromptElement::Point { x: 3, y: 4, polarity: Polarity::Foreground },
                PromptElement::Box { x_min: 1, y_min: 2, x_max: 5, y_max: 6 }
            ]
        );
        assert!(PromptAnnotation::parse_lines("s 0 blob 3 4 fg").is_err());
    }
}
