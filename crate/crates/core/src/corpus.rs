//! Labelled sketch collections, stratified train/test splits, and a synthetic
//! toy generator.
//!
//! Toy sketches are one of a handful of core shapes drawn stroke-wise with
//! Gaussian jitter, followed by a few short random "decoration" strokes. The
//! decorations are drawn from the same distribution for every class, so they
//! carry no class information and are the content an abstraction agent
//! should learn to drop.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::sketch::{read_ndjson, RecordError, SketchRecord, VectorSketch};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("class {class:?} has {count} sketch(es); at least 2 are needed")]
    TooFewSketches { class: String, count: usize },
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    TestFraction(f64),
    #[error("unknown shape {0:?} (expected square, circle, zigzag, tee or star)")]
    UnknownShape(String),
    #[error("toy spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    /// Always carries a label in `0..class_names.len()`.
    pub sketch: VectorSketch,
    pub split: Split,
    /// Leading strokes that draw the class shape; `None` when unknown.
    pub core_strokes: Option<usize>,
}

impl CorpusItem {
    pub fn label(&self) -> usize {
        self.sketch.label.expect("corpus sketches are labelled")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub items: Vec<CorpusItem>,
}

/// Derives an independent stream seed; used for per-class and per-item RNGs.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train(&self) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(|i| i.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(|i| i.split == Split::Test)
    }

    pub fn count(&self, class: usize, split: Split) -> usize {
        self.items
            .iter()
            .filter(|i| i.split == split && i.label() == class)
            .count()
    }

    /// Reassigns splits: per class, a seeded shuffle puts
    /// `round(n * test_fraction)` items (at least one, at most `n - 1`) in test.
    pub fn resplit(&mut self, test_fraction: f64, seed: u64) -> Result<(), CorpusError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(CorpusError::TestFraction(test_fraction));
        }
        for class in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.items.len())
                .filter(|&i| self.items[i].label() == class)
                .collect();
            if idx.len() < 2 {
                return Err(CorpusError::TooFewSketches {
                    class: self.class_names[class].clone(),
                    count: idx.len(),
                });
            }
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64)));
            let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
            for (k, &i) in idx.iter().enumerate() {
                self.items[i].split = if k < n_test { Split::Test } else { Split::Train };
            }
        }
        Ok(())
    }

    /// NDJSON records carrying label, class name and core-stroke count.
    pub fn to_records(&self) -> Vec<SketchRecord> {
        self.items
            .iter()
            .map(|it| SketchRecord {
                sketch: it.sketch.clone(),
                class: Some(self.class_names[it.label()].clone()),
                id: None,
                core_strokes: it.core_strokes,
            })
            .collect()
    }

    /// Groups records into classes and splits them.
    ///
    /// A record's class is its `class` name, else its numeric label, else
    /// `fallback` (typically the source file stem). Classes are ordered by
    /// the smallest label seen for them, then by first appearance, so files
    /// written by [`Corpus::to_records`] reload with the same label numbers.
    pub fn from_records(
        records: impl IntoIterator<Item = (SketchRecord, String)>,
        per_class_cap: usize,
        test_fraction: f64,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        let mut keys: Vec<(String, Option<usize>)> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut grouped: Vec<Vec<SketchRecord>> = Vec::new();
        for (rec, fallback) in records {
            let key = rec
                .class
                .clone()
                .or_else(|| rec.sketch.label.map(|l| l.to_string()))
                .unwrap_or(fallback);
            let k = *index.entry(key.clone()).or_insert_with(|| {
                keys.push((key, None));
                grouped.push(Vec::new());
                keys.len() - 1
            });
            if let Some(l) = rec.sketch.label {
                keys[k].1 = Some(keys[k].1.map_or(l, |m: usize| m.min(l)));
            }
            grouped[k].push(rec);
        }
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by_key(|&k| (keys[k].1.unwrap_or(usize::MAX), k));

        let mut class_names = Vec::with_capacity(order.len());
        let mut items = Vec::new();
        for (label, &k) in order.iter().enumerate() {
            class_names.push(keys[k].0.clone());
            let mut recs = std::mem::take(&mut grouped[k]);
            if recs.len() > per_class_cap {
                recs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0xCA9, label as u64)));
                recs.truncate(per_class_cap);
            }
            items.extend(recs.into_iter().map(|r| CorpusItem {
                sketch: VectorSketch {
                    points: r.sketch.points,
                    label: Some(label),
                },
                split: Split::Train,
                core_strokes: r.core_strokes,
            }));
        }
        let mut corpus = Self { class_names, items };
        corpus.resplit(test_fraction, seed)?;
        Ok(corpus)
    }
}

/// Reads NDJSON files into a split corpus. Malformed lines are skipped and
/// returned alongside the corpus.
pub fn load_corpus(
    paths: &[impl AsRef<Path>],
    per_class_cap: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Vec<(String, RecordError)>), CorpusError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let name = path.display().to_string();
        let stem = path
            .file_stem()
            .map_or_else(|| name.clone(), |s| s.to_string_lossy().into_owned());
        let (recs, errs) = read_ndjson(path).map_err(|source| CorpusError::Io {
            path: name.clone(),
            source,
        })?;
        records.extend(recs.into_iter().map(|r| (r, stem.clone())));
        errors.extend(errs.into_iter().map(|e| (name.clone(), e)));
    }
    let corpus = Corpus::from_records(records, per_class_cap, test_fraction, seed)?;
    Ok((corpus, errors))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Zigzag,
    Tee,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Zigzag,
        ShapeKind::Tee,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Zigzag => "zigzag",
            ShapeKind::Tee => "tee",
            ShapeKind::Star => "star",
        }
    }

    /// Waypoint polylines (one per stroke) in a `[-1, 1]` box.
    pub fn strokes(self) -> Vec<Vec<(f64, f64)>> {
        match self {
            ShapeKind::Square => vec![vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0)]],
            ShapeKind::Circle => vec![(0..=32)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / 32.0;
                    (a.cos(), a.sin())
                })
                .collect()],
            ShapeKind::Zigzag => vec![vec![
                (-1.0, -0.6),
                (-0.5, 0.6),
                (0.0, -0.6),
                (0.5, 0.6),
                (1.0, -0.6),
            ]],
            ShapeKind::Tee => vec![vec![(-1.0, -1.0), (1.0, -1.0)], vec![(0.0, -1.0), (0.0, 1.0)]],
            ShapeKind::Star => vec![[0, 2, 4, 1, 3, 0]
                .iter()
                .map(|&k| {
                    let a = -PI / 2.0 + 2.0 * PI * k as f64 / 5.0;
                    (a.cos(), a.sin())
                })
                .collect()],
        }
    }
}

impl FromStr for ShapeKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| CorpusError::UnknownShape(s.to_string()))
    }
}

/// Parameters of the toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGenSpec {
    pub classes: Vec<ShapeKind>,
    /// Inclusive range of points per core stroke.
    pub points_per_stroke: (usize, usize),
    /// Inclusive range of decoration strokes per sketch.
    pub decoration_count: (usize, usize),
    /// Gaussian jitter on every point, in shape units (the shape spans `[-1, 1]`).
    pub jitter_std: f64,
    pub seed: u64,
}

impl Default for ToyGenSpec {
    fn default() -> Self {
        Self {
            classes: vec![ShapeKind::Square, ShapeKind::Circle, ShapeKind::Zigzag],
            points_per_stroke: (15, 25),
            decoration_count: (0, 3),
            jitter_std: 0.05,
            seed: 0,
        }
    }
}

impl ToyGenSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.classes.len() < 2 {
            return bad("need at least two classes");
        }
        if self.points_per_stroke.0 < 2 || self.points_per_stroke.0 > self.points_per_stroke.1 {
            return bad("points_per_stroke must be a non-empty range starting at 2 or more");
        }
        if self.decoration_count.0 > self.decoration_count.1 {
            return bad("decoration_count range is empty");
        }
        if !(self.jitter_std >= 0.0) || !self.jitter_std.is_finite() {
            return bad("jitter_std must be finite and non-negative");
        }
        Ok(())
    }
}

/// Points per decoration stroke: always a single stroke-segment.
const DECORATION_POINTS: (usize, usize) = (3, 5);

/// Resamples a waypoint polyline to `n` points evenly spaced in arc length.
fn sample_polyline(way: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
    let mut cum = vec![0.0];
    for w in way.windows(2) {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let mut seg = 0;
    (0..n)
        .map(|i| {
            let s = total * i as f64 / (n - 1).max(1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
            let (a, b) = (way[seg], way[seg + 1]);
            (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        })
        .collect()
}

fn toy_sketch(spec: &ToyGenSpec, shape: ShapeKind, rng: &mut ChaCha8Rng) -> (VectorSketch, usize) {
    let jitter = Normal::new(0.0, spec.jitter_std).expect("validated jitter");
    let mut strokes = Vec::new();
    for way in shape.strokes() {
        let n = rng.random_range(spec.points_per_stroke.0..=spec.points_per_stroke.1);
        let pts = sample_polyline(&way, n)
            .into_iter()
            .map(|(x, y)| (x + jitter.sample(rng), y + jitter.sample(rng)))
            .collect();
        strokes.push(pts);
    }
    let core = strokes.len();
    let decorations = rng.random_range(spec.decoration_count.0..=spec.decoration_count.1);
    for _ in 0..decorations {
        let n = rng.random_range(DECORATION_POINTS.0..=DECORATION_POINTS.1);
        let (mut x, mut y) = (rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3));
        let mut heading: f64 = rng.random_range(0.0..2.0 * PI);
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            pts.push((x, y));
            heading += rng.random_range(-1.0..1.0);
            let step = rng.random_range(0.15..0.3);
            x += step * heading.cos();
            y += step * heading.sin();
        }
        strokes.push(pts);
    }
    (VectorSketch::from_absolute_strokes(&strokes).normalize(), core)
}

/// Generates `n_per_class` normalized sketches per class with an 80/20
/// stratified split (see [`Corpus::resplit`] to change it).
pub fn generate_toy(spec: &ToyGenSpec, n_per_class: usize) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    if n_per_class < 2 {
        return Err(CorpusError::TooFewSketches {
            class: spec.classes[0].name().to_string(),
            count: n_per_class,
        });
    }
    let mut items = Vec::with_capacity(n_per_class * spec.classes.len());
    for (label, &shape) in spec.classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, label as u64));
        for _ in 0..n_per_class {
            let (sketch, core) = toy_sketch(spec, shape, &mut rng);
            items.push(CorpusItem {
                sketch: sketch.with_label(label),
                split: Split::Train,
                core_strokes: Some(core),
            });
        }
    }
    let mut corpus = Corpus {
        class_names: spec.classes.iter().map(|c| c.name().to_string()).collect(),
        items,
    };
    corpus.resplit(0.2, spec.seed)?;
    Ok(corpus)
}
