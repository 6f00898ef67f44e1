//! Synthetic open-vocabulary multi-entity scenes.
//!
//! Every scene is rendered from an explicit record of generating factors.
//! Causal factors (shape family, texture family, geometry, position) decide
//! the masks and class ids. Irrelevant factors (background hue, illumination
//! gain, pixel noise, distractor blobs) only touch pixels. The two groups
//! are drawn from independent random streams, so fixing the seed and
//! changing an irrelevant factor domain never moves a mask.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorKind {
    Causal,
    Irrelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorBinding {
    PerEntity,
    PerScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FactorDomain {
    /// Half-open real interval `[lo, hi)`; `lo == hi` pins the value.
    Interval { lo: f64, hi: f64 },
    /// Finite set of admissible values.
    Choices(Vec<f64>),
}

impl FactorDomain {
    pub fn is_empty(&self) -> bool {
        match self {
            FactorDomain::Interval { lo, hi } => !(lo <= hi) || !lo.is_finite() || !hi.is_finite(),
            FactorDomain::Choices(v) => v.is_empty(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            FactorDomain::Interval { lo, hi } if lo == hi => *lo,
            FactorDomain::Interval { lo, hi } => rng.random_range(*lo..*hi),
            FactorDomain::Choices(v) => v[rng.random_range(0..v.len())],
        }
    }
}

/// One generating factor of the scene model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    pub domain: FactorDomain,
    pub binding: FactorBinding,
}

impl FactorSpec {
    fn new(name: &str, kind: FactorKind, domain: FactorDomain, binding: FactorBinding) -> Self {
        FactorSpec { name: name.to_string(), kind, domain, binding }
    }
}

pub const CAUSAL_FACTORS: [&str; 5] = ["radius", "aspect", "rotation", "texture_freq", "texture_phase"];
pub const IRRELEVANT_FACTORS: [&str; 4] =
    ["background_hue", "illumination_gain", "noise_sigma", "distractor_count"];

/// The factor model used throughout the crate.
pub fn standard_factors() -> Vec<FactorSpec> {
    use FactorBinding::*;
    use FactorDomain::*;
    use FactorKind::*;
    vec![
        FactorSpec::new("radius", Causal, Interval { lo: 6.0, hi: 10.0 }, PerEntity),
        FactorSpec::new("aspect", Causal, Interval { lo: 0.75, hi: 1.0 }, PerEntity),
        FactorSpec::new("rotation", Causal, Interval { lo: 0.0, hi: std::f64::consts::TAU }, PerEntity),
        FactorSpec::new("texture_freq", Causal, Interval { lo: 0.16, hi: 0.26 }, PerEntity),
        FactorSpec::new("texture_phase", Causal, Interval { lo: 0.0, hi: 1.0 }, PerEntity),
        FactorSpec::new("background_hue", Irrelevant, Interval { lo: 0.0, hi: 1.0 }, PerScene),
        FactorSpec::new("illumination_gain", Irrelevant, Interval { lo: 0.7, hi: 1.3 }, PerScene),
        FactorSpec::new("noise_sigma", Irrelevant, Interval { lo: 0.0, hi: 0.06 }, PerScene),
        FactorSpec::new("distractor_count", Irrelevant, Choices(vec![0.0, 1.0, 2.0, 3.0]), PerScene),
    ]
}

/// Replaces the domain of a named factor, returning the modified list.
pub fn with_domain(mut factors: Vec<FactorSpec>, name: &str, domain: FactorDomain) -> Vec<FactorSpec> {
    for f in factors.iter_mut().filter(|f| f.name == name) {
        f.domain = domain.clone();
    }
    factors
}

struct FactorTable<'a> {
    specs: &'a [FactorSpec],
}

impl<'a> FactorTable<'a> {
    fn new(specs: &'a [FactorSpec]) -> Result<Self> {
        let mut causal = BTreeSet::new();
        let mut irrelevant = BTreeSet::new();
        for f in specs {
            if f.domain.is_empty() {
                return Err(Error::Config(format!("factor `{}` has an empty domain", f.name)));
            }
            match f.kind {
                FactorKind::Causal => {
                    if f.binding != FactorBinding::PerEntity {
                        return Err(Error::Config(format!("causal factor `{}` must bind per entity", f.name)));
                    }
                    causal.insert(f.name.as_str());
                }
                FactorKind::Irrelevant => {
                    irrelevant.insert(f.name.as_str());
                }
            }
        }
        if let Some(name) = causal.intersection(&irrelevant).next() {
            return Err(Error::Config(format!("factor `{name}` declared both causal and irrelevant")));
        }
        let table = FactorTable { specs };
        for name in CAUSAL_FACTORS {
            table.expect(name, FactorKind::Causal)?;
        }
        for name in IRRELEVANT_FACTORS {
            table.expect(name, FactorKind::Irrelevant)?;
        }
        Ok(table)
    }

    fn expect(&self, name: &str, kind: FactorKind) -> Result<&'a FactorSpec> {
        let spec = self
            .specs
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Config(format!("factor `{name}` is not declared")))?;
        if spec.kind != kind {
            return Err(Error::Config(format!("factor `{name}` must be {kind:?}")));
        }
        Ok(spec)
    }

    fn draw(&self, name: &str, rng: &mut ChaCha8Rng) -> f64 {
        self.specs.iter().find(|f| f.name == name).expect("validated").domain.sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShapeFamily {
    Disk,
    Rectangle,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TextureFamily {
    Solid,
    Stripes,
    Dots,
    Checker,
}

const SHAPES: [ShapeFamily; 6] = [
    ShapeFamily::Disk,
    ShapeFamily::Rectangle,
    ShapeFamily::Triangle,
    ShapeFamily::Ring,
    ShapeFamily::Cross,
    ShapeFamily::Diamond,
];
const TEXTURES: [TextureFamily; 4] =
    [TextureFamily::Solid, TextureFamily::Stripes, TextureFamily::Dots, TextureFamily::Checker];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitRole {
    Base,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub shape: ShapeFamily,
    pub texture: TextureFamily,
    /// Hue of the class palette in `[0, 1)`.
    pub hue: f64,
    pub role: SplitRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub classes: Vec<ClassSpec>,
}

impl ClassVocabulary {
    /// Deterministic vocabulary of `n` classes with a 2:1 base/target split.
    ///
    /// Class `k` combines shape `k mod 6` with a texture that cycles at a
    /// different rate, so target classes carry shape/texture combinations
    /// never seen among base classes.
    pub fn standard(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Config(format!("vocabulary of {n} classes cannot honour a 2:1 split")));
        }
        if n > SHAPES.len() * TEXTURES.len() {
            return Err(Error::Config(format!("at most {} classes available", SHAPES.len() * TEXTURES.len())));
        }
        let n_target = ((n as f64 / 3.0).round() as usize).max(1);
        let target: BTreeSet<usize> = (0..n_target).map(|j| (j + 1) * n / n_target - 1).collect();
        let mut seen = BTreeSet::new();
        let mut classes = Vec::with_capacity(n);
        let mut k = 0usize;
        while classes.len() < n {
            let shape = SHAPES[k % SHAPES.len()];
            let texture = TEXTURES[(k + k / SHAPES.len()) % TEXTURES.len()];
            k += 1;
            if !seen.insert((shape, texture)) {
                continue;
            }
            let id = classes.len();
            let hue = (id as f64 * 0.618_033_988_75).fract();
            let role = if target.contains(&id) { SplitRole::Target } else { SplitRole::Base };
            classes.push(ClassSpec { id, shape, texture, hue, role });
        }
        Ok(ClassVocabulary { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, id: usize) -> Option<&ClassSpec> {
        self.classes.get(id)
    }

    pub fn ids_with_role(&self, role: SplitRole) -> Vec<usize> {
        self.classes.iter().filter(|c| c.role == role).map(|c| c.id).collect()
    }

    pub fn base_ids(&self) -> Vec<usize> {
        self.ids_with_role(SplitRole::Base)
    }

    pub fn target_ids(&self) -> Vec<usize> {
        self.ids_with_role(SplitRole::Target)
    }
}

/// Causal factor values of one entity. The class id is a function of
/// `(shape, texture)` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalRecord {
    pub class_id: usize,
    pub shape: ShapeFamily,
    pub texture: TextureFamily,
    pub center: (f64, f64),
    pub radius: f64,
    pub aspect: f64,
    pub rotation: f64,
    pub texture_freq: f64,
    pub texture_phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub center: (f64, f64),
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Irrelevant factor values of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub background_hue: f64,
    pub illumination_gain: f64,
    pub noise_sigma: f64,
    pub distractors: Vec<Distractor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityInstance {
    pub class_id: usize,
    /// `H x W` binary mask.
    pub mask: Array2<bool>,
    pub causal: CausalRecord,
}

impl EntityInstance {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// `H x W x 3` in `[0, 1]`.
    pub image: Array3<f64>,
    pub entities: Vec<EntityInstance>,
    pub scene: SceneRecord,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.entities.iter().map(|e| e.class_id).collect()
    }
}

/// Ground-truth factor record of a generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub entities: Vec<CausalRecord>,
    pub scene: SceneRecord,
}

impl FactorRecord {
    /// Scalar irrelevant factors in [`IRRELEVANT_FACTORS`] order.
    pub fn irrelevant_values(&self) -> [f64; 4] {
        [
            self.scene.background_hue,
            self.scene.illumination_gain,
            self.scene.noise_sigma,
            self.scene.distractors.len() as f64,
        ]
    }
}

/// Returns the exact factor values used to render `sample`.
pub fn factor_probe(sample: &SceneSample) -> FactorRecord {
    FactorRecord {
        entities: sample.entities.iter().map(|e| e.causal.clone()).collect(),
        scene: sample.scene.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
    pub max_entities: usize,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        SceneGeometry { height: 64, width: 64, max_entities: 4 }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Renders one scene. Masks and class ids depend only on `seed`, the
/// vocabulary, the causal factor domains and `pool`.
pub fn sample_scene(
    seed: u64,
    vocab: &ClassVocabulary,
    factors: &[FactorSpec],
    pool: &[usize],
    geometry: SceneGeometry,
) -> Result<SceneSample> {
    if pool.is_empty() {
        return Err(Error::Config("class pool is empty".into()));
    }
    if let Some(&bad) = pool.iter().find(|&&c| c >= vocab.len()) {
        return Err(Error::Config(format!("class {bad} is not in the vocabulary")));
    }
    let SceneGeometry { height, width, max_entities } = geometry;
    if height < 16 || width < 16 {
        return Err(Error::Config(format!("image {height}x{width} is smaller than 16x16")));
    }
    if max_entities == 0 {
        return Err(Error::Config("max_entities must be at least 1".into()));
    }
    let table = FactorTable::new(factors)?;

    let mut causal_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC4A5));
    let mut scene_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1EE1));

    let n_entities = causal_rng.random_range(1..=max_entities);
    let mut occupied = Array2::from_elem((height, width), false);
    let mut entities: Vec<EntityInstance> = Vec::with_capacity(n_entities);
    for slot in 0..n_entities {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class_id = pool[causal_rng.random_range(0..pool.len())];
            let class = &vocab.classes[class_id];
            let radius = table.draw("radius", &mut causal_rng);
            let aspect = table.draw("aspect", &mut causal_rng);
            let rotation = table.draw("rotation", &mut causal_rng);
            let texture_freq = table.draw("texture_freq", &mut causal_rng);
            let texture_phase = table.draw("texture_phase", &mut causal_rng);
            let margin = radius + 1.0;
            if 2.0 * margin >= width as f64 || 2.0 * margin >= height as f64 {
                continue;
            }
            let cx = causal_rng.random_range(margin..width as f64 - margin);
            let cy = causal_rng.random_range(margin..height as f64 - margin);
            let causal = CausalRecord {
                class_id,
                shape: class.shape,
                texture: class.texture,
                center: (cx, cy),
                radius,
                aspect,
                rotation,
                texture_freq,
                texture_phase,
            };
            let mask = rasterize(&causal, height, width);
            if !is_connected_nonempty(&mask) || overlaps_with_margin(&mask, &occupied) {
                continue;
            }
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    occupied[[y, x]] = true;
                }
            }
            entities.push(EntityInstance { class_id, mask, causal });
            placed = true;
            break;
        }
        if !placed {
            if slot == 0 {
                return Err(Error::Data(format!("could not place any entity for seed {seed}")));
            }
            break;
        }
    }

    let n_distractors = table.draw("distractor_count", &mut scene_rng).max(0.0).round() as usize;
    let scene = SceneRecord {
        background_hue: table.draw("background_hue", &mut scene_rng),
        illumination_gain: table.draw("illumination_gain", &mut scene_rng),
        noise_sigma: table.draw("noise_sigma", &mut scene_rng),
        distractors: (0..n_distractors)
            .map(|_| Distractor {
                center: (
                    scene_rng.random_range(0.0..width as f64),
                    scene_rng.random_range(0.0..height as f64),
                ),
                sigma: scene_rng.random_range(3.0..7.0),
                color: hsv_to_rgb(scene_rng.random_range(0.0..1.0), 0.6, 0.8),
            })
            .collect(),
    };
    let image = render(vocab, &entities, &scene, height, width, &mut scene_rng);
    Ok(SceneSample { seed, image, entities, scene })
}

/// Deterministic seed derivation (splitmix64 finaliser).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn local_coords(c: &CausalRecord, x: usize, y: usize) -> (f64, f64) {
    let dx = x as f64 + 0.5 - c.center.0;
    let dy = y as f64 + 0.5 - c.center.1;
    let (s, co) = c.rotation.sin_cos();
    (dx * co + dy * s, -dx * s + dy * co)
}

fn inside(shape: ShapeFamily, u: f64, v: f64) -> bool {
    match shape {
        ShapeFamily::Disk => u * u + v * v <= 1.0,
        ShapeFamily::Rectangle => u.abs() <= 0.85 && v.abs() <= 0.85,
        ShapeFamily::Triangle => {
            let verts = [(0.0, -1.0), (0.866_025, 0.5), (-0.866_025, 0.5)];
            (0..3).all(|i| {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % 3];
                (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
            })
        }
        ShapeFamily::Ring => {
            let r2 = u * u + v * v;
            (0.3025..=1.0).contains(&r2)
        }
        ShapeFamily::Cross => (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0),
        ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
    }
}

/// Binary mask of one entity.
pub fn rasterize(c: &CausalRecord, height: usize, width: usize) -> Array2<bool> {
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (su, sv) = local_coords(c, x, y);
        inside(c.shape, su / c.radius, sv / (c.radius * c.aspect))
    })
}

fn is_connected_nonempty(mask: &Array2<bool>) -> bool {
    let (h, w) = mask.dim();
    let Some(((sy, sx), _)) = mask.indexed_iter().find(|(_, &m)| m) else {
        return false;
    };
    let total = mask.iter().filter(|&&m| m).count();
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::from([(sy, sx)]);
    seen[[sy, sx]] = true;
    let mut count = 0;
    while let Some((y, x)) = queue.pop_front() {
        count += 1;
        let neighbours = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in neighbours {
            if ny < h && nx < w && mask[[ny, nx]] && !seen[[ny, nx]] {
                seen[[ny, nx]] = true;
                queue.push_back((ny, nx));
            }
        }
    }
    count == total
}

fn overlaps_with_margin(mask: &Array2<bool>, occupied: &Array2<bool>) -> bool {
    let (h, w) = mask.dim();
    mask.indexed_iter().filter(|(_, &m)| m).any(|((y, x), _)| {
        let y0 = y.saturating_sub(1);
        let x0 = x.saturating_sub(1);
        (y0..=(y + 1).min(h - 1)).any(|yy| (x0..=(x + 1).min(w - 1)).any(|xx| occupied[[yy, xx]]))
    })
}

fn texture_is_primary(c: &CausalRecord, su: f64, sv: f64) -> bool {
    let f = c.texture_freq;
    let tau = std::f64::consts::TAU;
    match c.texture {
        TextureFamily::Solid => true,
        TextureFamily::Stripes => (tau * (f * su + c.texture_phase)).sin() >= 0.0,
        TextureFamily::Dots => {
            let fu = (f * su + c.texture_phase).rem_euclid(1.0) - 0.5;
            let fv = (f * sv + c.texture_phase).rem_euclid(1.0) - 0.5;
            fu * fu + fv * fv >= 0.09
        }
        TextureFamily::Checker => {
            let a = (2.0 * f * su + c.texture_phase).floor() as i64;
            let b = (2.0 * f * sv + c.texture_phase).floor() as i64;
            (a + b).rem_euclid(2) == 0
        }
    }
}

fn render(
    vocab: &ClassVocabulary,
    entities: &[EntityInstance],
    scene: &SceneRecord,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let bg = hsv_to_rgb(scene.background_hue, 0.35, 0.55);
    let mut image = Array3::zeros((height, width, 3));
    for y in 0..height {
        for x in 0..width {
            let mut px = bg;
            for d in &scene.distractors {
                let dx = x as f64 + 0.5 - d.center.0;
                let dy = y as f64 + 0.5 - d.center.1;
                let a = 0.6 * (-(dx * dx + dy * dy) / (2.0 * d.sigma * d.sigma)).exp();
                for ch in 0..3 {
                    px[ch] = (1.0 - a) * px[ch] + a * d.color[ch];
                }
            }
            for ch in 0..3 {
                image[[y, x, ch]] = px[ch];
            }
        }
    }
    for e in entities {
        let hue = vocab.classes[e.class_id].hue;
        let primary = hsv_to_rgb(hue, 0.8, 0.9);
        let secondary = hsv_to_rgb(hue, 0.8, 0.45);
        for ((y, x), &m) in e.mask.indexed_iter() {
            if !m {
                continue;
            }
            let (su, sv) = local_coords(&e.causal, x, y);
            let col = if texture_is_primary(&e.causal, su, sv) { primary } else { secondary };
            for ch in 0..3 {
                image[[y, x, ch]] = col[ch];
            }
        }
    }
    let noise = Normal::new(0.0, scene.noise_sigma.max(0.0)).expect("finite sigma");
    for v in image.iter_mut() {
        let mut p = *v * scene.illumination_gain;
        if scene.noise_sigma > 0.0 {
            p += noise.sample(rng);
        }
        *v = p.clamp(0.0, 1.0);
    }
    image
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_test_base: usize,
    pub n_test_target: usize,
    pub geometry: SceneGeometry,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            vocab_size: 9,
            n_train: 32,
            n_test_base: 24,
            n_test_target: 24,
            geometry: SceneGeometry::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    TestBase,
    TestTarget,
    Warmup,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::TestBase => "test_base",
            SplitName::TestTarget => "test_target",
            SplitName::Warmup => "warmup",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            SplitName::Train => 11,
            SplitName::TestBase => 23,
            SplitName::TestTarget => 37,
            SplitName::Warmup => 53,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SceneSample>,
    pub test_base: Vec<SceneSample>,
    pub test_target: Vec<SceneSample>,
    pub vocabulary: ClassVocabulary,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[SceneSample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::TestBase => &self.test_base,
            SplitName::TestTarget => &self.test_target,
            SplitName::Warmup => &[],
        }
    }
}

/// Seed of the `index`-th sample of a split.
pub fn sample_seed(dataset_seed: u64, split: SplitName, index: usize) -> u64 {
    mix_seed(mix_seed(dataset_seed, split.salt()), index as u64)
}

/// Generates `n` scenes of one split from the given class pool.
pub fn generate_split(
    config: &DatasetConfig,
    vocab: &ClassVocabulary,
    split: SplitName,
    pool: &[usize],
    n: usize,
) -> Result<Vec<SceneSample>> {
    let factors = standard_factors();
    (0..n)
        .map(|i| sample_scene(sample_seed(config.seed, split, i), vocab, &factors, pool, config.geometry))
        .collect()
}

/// Builds train / test-base / test-target splits. Train and test-base only
/// contain base classes; test-target scenes only contain target classes.
pub fn make_dataset(config: &DatasetConfig) -> Result<DatasetSplit> {
    let vocabulary = ClassVocabulary::standard(config.vocab_size)?;
    let base = vocabulary.base_ids();
    let target = vocabulary.target_ids();
    Ok(DatasetSplit {
        train: generate_split(config, &vocabulary, SplitName::Train, &base, config.n_train)?,
        test_base: generate_split(config, &vocabulary, SplitName::TestBase, &base, config.n_test_base)?,
        test_target: generate_split(config, &vocabulary, SplitName::TestTarget, &target, config.n_test_target)?,
        vocabulary,
    })
}

/// Writes images, label maps and a manifest under `dir`.
///
/// Layout: `images/<split>_<index>.png` (8-bit RGB), `masks/<split>_<index>.png`
/// (8-bit labels, 0 = background, k = entity k-1) and `manifest.tsv` with
/// columns `sample_id split index seed n_entities class_ids`.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut manifest = String::from("sample_id\tsplit\tindex\tseed\tn_entities\tclass_ids\n");
    for name in [SplitName::Train, SplitName::TestBase, SplitName::TestTarget] {
        for (i, s) in split.split(name).iter().enumerate() {
            let id = format!("{}_{:04}", name.as_str(), i);
            let (h, w) = (s.height(), s.width());
            let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |c: usize| (s.image[[y as usize, x as usize, c]] * 255.0).round() as u8;
                image::Rgb([px(0), px(1), px(2)])
            });
            rgb.save(images.join(format!("{id}.png")))?;
            let labels = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                let label = s
                    .entities
                    .iter()
                    .position(|e| e.mask[[y as usize, x as usize]])
                    .map_or(0, |k| k + 1);
                image::Luma([label as u8])
            });
            labels.save(masks.join(format!("{id}.png")))?;
            let classes: Vec<String> = s.class_ids().iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                manifest,
                "{id}\t{}\t{i}\t{}\t{}\t{}",
                name.as_str(),
                s.seed,
                s.entities.len(),
                classes.join(",")
            );
        }
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> SceneGeometry {
        SceneGeometry::default()
    }

    #[test]
    fn same_seed_gives_identical_samples() {
        let vocab = ClassVocabulary::standard(9).unwrap();
        let f = standard_factors();
        let a = sample_scene(0, &vocab, &f, &vocab.base_ids(), geometry()).unwrap();
        let b = sample_scene(0, &vocab, &f, &vocab.base_ids(), geometry()).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u64> = a.image.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.image.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn background_hue_sweep_leaves_labels_alone() {
        let vocab = ClassVocabulary::standard(9).unwrap();
        let base = standard_factors();
        let base = with_domain(base, "noise_sigma", FactorDomain::Interval { lo: 0.0, hi: 0.0 });
        let mut reference: Option<(Vec<Array2<bool>>, Vec<usize>)> = None;
        let mut images = Vec::new();
        for step in 0..10 {
            let hue = step as f64 / 10.0;
            let f = with_domain(base.clone(), "background_hue", FactorDomain::Interval { lo: hue, hi: hue });
            let s = sample_scene(5, &vocab, &f, &[0], geometry()).unwrap();
            let masks: Vec<_> = s.entities.iter().map(|e| e.mask.clone()).collect();
            let labels = s.class_ids();
            assert!(labels.iter().all(|&c| c == 0));
            match &reference {
                None => reference = Some((masks, labels)),
                Some((m, l)) => {
                    assert_eq!(m, &masks);
                    assert_eq!(l, &labels);
                }
            }
            images.push(s.image);
        }
        assert_ne!(images[0], images[5], "background hue must change pixels");
    }

    #[test]
    fn disk_of_radius_five_has_expected_area() {
        let c = CausalRecord {
            class_id: 0,
            shape: ShapeFamily::Disk,
            texture: TextureFamily::Solid,
            center: (16.0, 16.0),
            radius: 5.0,
            aspect: 1.0,
            rotation: 0.3,
            texture_freq: 0.2,
            texture_phase: 0.0,
        };
        let mask = rasterize(&c, 32, 32);
        let area = mask.iter().filter(|&&m| m).count() as f64;
        // independent count: lattice points with centre inside the circle
        let mut brute = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                let dx = x as f64 + 0.5 - 16.0;
                let dy = y as f64 + 0.5 - 16.0;
                if dx.hypot(dy) <= 5.0 {
                    brute += 1;
                }
            }
        }
        assert_eq!(area as usize, brute);
        let expected = std::f64::consts::PI * 25.0;
        assert!((area - expected).abs() <= 0.1 * expected, "area {area} vs {expected}");
    }

    #[test]
    fn empty_pool_and_empty_domain_are_config_errors() {
        let vocab = ClassVocabulary::standard(9).unwrap();
        let f = standard_factors();
        assert!(matches!(sample_scene(1, &vocab, &f, &[], geometry()), Err(Error::Config(_))));
        let bad = with_domain(f, "radius", FactorDomain::Choices(vec![]));
        assert!(matches!(sample_scene(1, &vocab, &bad, &[0], geometry()), Err(Error::Config(_))));
        let small = SceneGeometry { height: 8, width: 8, max_entities: 2 };
        assert!(matches!(sample_scene(1, &vocab, &standard_factors(), &[0], small), Err(Error::Config(_))));
    }

    #[test]
    fn vocabulary_split_ratios() {
        let v9 = ClassVocabulary::standard(9).unwrap();
        assert_eq!(v9.base_ids().len(), 6);
        assert_eq!(v9.target_ids().len(), 3);
        let v3 = ClassVocabulary::standard(3).unwrap();
        assert_eq!(v3.base_ids().len(), 2);
        assert_eq!(v3.target_ids().len(), 1);
        assert!(matches!(ClassVocabulary::standard(2), Err(Error::Config(_))));
        let ids: BTreeSet<usize> = v9.classes.iter().map(|c| c.id).collect();
        assert_eq!(ids.len(), 9);
        let combos: BTreeSet<(u8, u8)> =
            v9.classes.iter().map(|c| (c.shape as u8, c.texture as u8)).collect();
        assert_eq!(combos.len(), 9);
    }

    #[test]
    fn train_split_has_no_target_entities() {
        let cfg = DatasetConfig { n_train: 40, n_test_base: 4, n_test_target: 6, ..Default::default() };
        let ds = make_dataset(&cfg).unwrap();
        let target: BTreeSet<usize> = ds.vocabulary.target_ids().into_iter().collect();
        let train_hits = ds.train.iter().flat_map(|s| s.class_ids()).filter(|c| target.contains(c)).count();
        assert_eq!(train_hits, 0);
        assert!(ds.test_target.iter().all(|s| s.class_ids().iter().any(|c| target.contains(c))));
        let train_classes: BTreeSet<usize> = ds.train.iter().flat_map(|s| s.class_ids()).collect();
        assert!(train_classes.is_disjoint(&target));
    }

    #[test]
    fn entity_masks_are_disjoint_connected_and_bounded() {
        let vocab = ClassVocabulary::standard(9).unwrap();
        let f = standard_factors();
        let all: Vec<usize> = (0..9).collect();
        for seed in 0..30 {
            let s = sample_scene(seed, &vocab, &f, &all, geometry()).unwrap();
            assert!(!s.entities.is_empty() && s.entities.len() <= 4);
            for (i, a) in s.entities.iter().enumerate() {
                assert!(is_connected_nonempty(&a.mask));
                for b in &s.entities[i + 1..] {
                    assert!(a.mask.iter().zip(b.mask.iter()).all(|(x, y)| !(*x && *y)));
                }
            }
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn probe_echoes_generation_record() {
        let vocab = ClassVocabulary::standard(9).unwrap();
        let f = standard_factors();
        let s = (0..50)
            .map(|seed| sample_scene(seed, &vocab, &f, &vocab.base_ids(), geometry()).unwrap())
            .find(|s| s.entities.len() == 2)
            .expect("a two-entity scene");
        let p = factor_probe(&s);
        assert_eq!(p.entities.len(), 2);
        assert_eq!(p.scene, s.scene);
        assert_eq!(p.entities[1], s.entities[1].causal);
        assert_eq!(factor_probe(&s), p);
    }

    #[test]
    fn causal_and_irrelevant_names_are_disjoint() {
        let f = standard_factors();
        let causal: BTreeSet<&str> =
            f.iter().filter(|x| x.kind == FactorKind::Causal).map(|x| x.name.as_str()).collect();
        let irr: BTreeSet<&str> =
            f.iter().filter(|x| x.kind == FactorKind::Irrelevant).map(|x| x.name.as_str()).collect();
        assert!(causal.is_disjoint(&irr));
        assert!(f.iter().filter(|x| x.kind == FactorKind::Causal).all(|x| x.binding == FactorBinding::PerEntity));
        let mut dup = f.clone();
        dup.push(FactorSpec::new("radius", FactorKind::Irrelevant, FactorDomain::Choices(vec![1.0]), FactorBinding::PerScene));
        let vocab = ClassVocabulary::standard(9).unwrap();
        assert!(matches!(sample_scene(0, &vocab, &dup, &[0], geometry()), Err(Error::Config(_))));
    }
}
