//! Sketch-based retrieval harness: a fixed raster embedder, triplet ranking
//! loss, Top-K accuracy and score fusion over several abstraction levels.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{abstract_sketch, AgentError, AgentModel};
use crate::nn::{Adam, Linear, NnError, ParamStore, Tape, Tensor};
use crate::raster::{rasterize, RasterImage};
use crate::sketch::VectorSketch;

pub const RASTER_SIZE: usize = 64;
pub const GRID: usize = 16;
pub const EMBED_DIM: usize = GRID * GRID;
/// Abstraction shifts used to build the extra fused queries.
pub const FUSION_DELTAS: [f64; 3] = [-0.1, 0.0, 0.1];

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot embed an empty input")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("margin must be finite and non-negative, got {0}")]
    Margin(f64),
    #[error("duplicate gallery id {0}")]
    DuplicateId(String),
    #[error("no true match for query {query}")]
    MissingMatch { query: String },
    #[error("k must be positive")]
    ZeroK,
    #[error("invalid projection config: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn distance(&self, other: &Embedding) -> Result<f64, RetrievalError> {
        euclidean(&self.values, &other.values)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::Dimension(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Box-downsamples a binary 64×64 raster to 16×16 and L2-normalizes.
fn embed_binary(img: &RasterImage, id: String) -> Result<Embedding, RetrievalError> {
    let cell = RASTER_SIZE / GRID;
    let mut values = vec![0.0; EMBED_DIM];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut on = 0usize;
            for y in 0..cell {
                for x in 0..cell {
                    on += img.is_on((gx * cell + x) as i64, (gy * cell + y) as i64) as usize;
                }
            }
            values[gy * GRID + gx] = on as f64 / (cell * cell) as f64;
        }
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(RetrievalError::Empty);
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(Embedding { id, values })
}

pub fn embed_sketch(sketch: &VectorSketch, id: impl Into<String>) -> Result<Embedding, RetrievalError> {
    if sketch.is_empty() {
        return Err(RetrievalError::Empty);
    }
    embed_binary(&rasterize(sketch, RASTER_SIZE, 2), id.into())
}

pub fn embed_raster(image: &RasterImage, id: impl Into<String>) -> Result<Embedding, RetrievalError> {
    if image.width == 0 || image.height == 0 {
        return Err(RetrievalError::Empty);
    }
    let img = image.binarize(128).resize_nearest(RASTER_SIZE, RASTER_SIZE);
    embed_binary(&img, id.into())
}

/// `max(0, margin + D(s, p+) - D(s, p-))`.
pub fn triplet_loss(s: &[f64], pos: &[f64], neg: &[f64], margin: f64) -> Result<f64, RetrievalError> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(RetrievalError::Margin(margin));
    }
    Ok(triplet_from_distances(euclidean(s, pos)?, euclidean(s, neg)?, margin))
}

pub fn triplet_from_distances(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (margin + d_pos - d_neg).max(0.0)
}

#[derive(Debug, Clone, Default)]
pub struct Gallery {
    items: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl Gallery {
    pub fn new(items: Vec<Embedding>) -> Result<Self, RetrievalError> {
        let mut index = HashMap::new();
        for (i, e) in items.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { items, index })
    }

    pub fn items(&self) -> &[Embedding] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// One query's distances to every gallery item, in gallery order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDistances {
    pub id: String,
    pub distances: Vec<f64>,
}

/// 0-based rank of gallery item `target`; ties go to the lower gallery index.
pub fn rank_in(distances: &[f64], target: usize) -> usize {
    let d = distances[target];
    distances
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x < d || (x == d && j < target))
        .count()
}

/// Per-query 0-based rank of the true match.
pub fn match_ranks(
    queries: &[QueryDistances],
    gallery: &Gallery,
    truth: &HashMap<String, String>,
) -> Result<Vec<usize>, RetrievalError> {
    queries
        .iter()
        .map(|q| {
            let target = truth
                .get(&q.id)
                .and_then(|g| gallery.position(g))
                .ok_or_else(|| RetrievalError::MissingMatch { query: q.id.clone() })?;
            if q.distances.len() != gallery.len() {
                return Err(RetrievalError::Dimension(q.distances.len(), gallery.len()));
            }
            Ok(rank_in(&q.distances, target))
        })
        .collect()
}

/// Fraction of queries whose true match is among the `k` nearest items.
pub fn topk_accuracy(
    queries: &[QueryDistances],
    gallery: &Gallery,
    truth: &HashMap<String, String>,
    k: usize,
) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let ranks = match_ranks(queries, gallery, truth)?;
    if ranks.is_empty() {
        return Ok(0.0);
    }
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Mean,
    Min,
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "min" => Ok(Self::Min),
            other => Err(format!("unknown fusion {other:?} (expected mean or min)")),
        }
    }
}

/// Embeddings of a query sketch and its abstractions.
#[derive(Debug, Clone)]
pub struct FusedQuery {
    pub id: String,
    pub embeddings: Vec<Embedding>,
}

impl FusedQuery {
    /// Only the original sketch, no abstractions.
    pub fn single(sketch: &VectorSketch, id: impl Into<String>) -> Result<Self, RetrievalError> {
        let id = id.into();
        Ok(Self {
            embeddings: vec![embed_sketch(sketch, id.clone())?],
            id,
        })
    }

    pub fn distance(&self, item: &Embedding, fusion: Fusion) -> Result<f64, RetrievalError> {
        let ds = self
            .embeddings
            .iter()
            .map(|e| e.distance(item))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match fusion {
            Fusion::Mean => ds.iter().sum::<f64>() / ds.len() as f64,
            Fusion::Min => ds.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }

    pub fn distances(&self, gallery: &Gallery, fusion: Fusion) -> Result<QueryDistances, RetrievalError> {
        Ok(QueryDistances {
            id: self.id.clone(),
            distances: gallery
                .items()
                .iter()
                .map(|g| self.distance(g, fusion))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Original sketch plus one abstraction per entry of `deltas`. An
/// abstraction that removes everything falls back to the original embedding.
pub fn fuse_query<R: Rng + ?Sized>(
    sketch: &VectorSketch,
    id: impl Into<String>,
    agent: &AgentModel,
    deltas: &[f64],
    rng: &mut R,
) -> Result<FusedQuery, RetrievalError> {
    let mut q = FusedQuery::single(sketch, id)?;
    let original = q.embeddings[0].clone();
    for &d in deltas {
        let a = abstract_sketch(agent, sketch, d, rng)?;
        let e = match embed_sketch(&a.sketch, q.id.clone()) {
            Ok(e) => e,
            Err(RetrievalError::Empty) => original.clone(),
            Err(e) => return Err(e),
        };
        q.embeddings.push(e);
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub output: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            output: 32,
            margin: 0.2,
            lr: 1e-3,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Linear map applied on top of the fixed embedder, trained with triplet loss.
#[derive(Debug, Clone)]
pub struct Projection {
    store: ParamStore,
    layer: Linear,
}

impl Projection {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Linear::new(&mut store, "proj", input, output, &mut rng);
        Self { store, layer }
    }

    pub fn apply(&self, e: &Embedding) -> Embedding {
        Embedding {
            id: e.id.clone(),
            values: self.layer.forward_plain(&self.store, &e.values),
        }
    }

    fn triplet_on(&self, tape: &Tape, t: &Triplet, margin: f64) -> Result<crate::nn::Var, NnError> {
        let bound = self.layer.bind(tape, &self.store);
        let proj = |v: &[f64]| bound.forward(tape, tape.constant(Tensor::vector(v.to_vec())));
        let (a, p, n) = (proj(&t.anchor)?, proj(&t.positive)?, proj(&t.negative)?);
        let dist = |x, y| -> Result<_, NnError> {
            let diff = tape.sub(x, y)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.sqrt(tape.offset(tape.sum(sq), 1e-12)))
        };
        let (dp, dn) = (dist(a, p)?, dist(a, n)?);
        let gap = tape.sub(dp, dn)?;
        Ok(tape.relu(tape.offset(gap, margin)))
    }

    /// Mean triplet loss of `triplets` under the current projection.
    pub fn mean_loss(&self, triplets: &[Triplet], margin: f64) -> f64 {
        if triplets.is_empty() {
            return 0.0;
        }
        let total: f64 = triplets
            .iter()
            .map(|t| {
                let f = |v: &[f64]| self.layer.forward_plain(&self.store, v);
                let (a, p, n) = (f(&t.anchor), f(&t.positive), f(&t.negative));
                let dp = (euclidean(&a, &p).unwrap().powi(2) + 1e-12).sqrt();
                let dn = (euclidean(&a, &n).unwrap().powi(2) + 1e-12).sqrt();
                triplet_from_distances(dp, dn, margin)
            })
            .sum();
        total / triplets.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// One triplet per query: its true match as positive and a random other
/// gallery item as negative.
pub fn sample_triplets<R: Rng + ?Sized>(
    queries: &[Embedding],
    gallery: &Gallery,
    truth: &HashMap<String, String>,
    rng: &mut R,
) -> Result<Vec<Triplet>, RetrievalError> {
    let ids: Vec<usize> = (0..gallery.len()).collect();
    queries
        .iter()
        .map(|q| {
            let pos = truth
                .get(&q.id)
                .and_then(|g| gallery.position(g))
                .ok_or_else(|| RetrievalError::MissingMatch { query: q.id.clone() })?;
            let others: Vec<usize> = ids.iter().copied().filter(|&j| j != pos).collect();
            let neg = *others.choose(rng).ok_or(RetrievalError::Config("gallery needs two items".into()))?;
            Ok(Triplet {
                anchor: q.values.clone(),
                positive: gallery.items()[pos].values.clone(),
                negative: gallery.items()[neg].values.clone(),
            })
        })
        .collect()
}

/// Trains a projection with per-triplet Adam steps. Returns the model and
/// the mean loss before training and after each epoch.
pub fn train_projection(
    triplets: &[Triplet],
    cfg: &ProjectionConfig,
) -> Result<(Projection, Vec<f64>), RetrievalError> {
    if cfg.output == 0 || !(cfg.lr > 0.0) {
        return Err(RetrievalError::Config("output and lr must be positive".into()));
    }
    if !(cfg.margin >= 0.0) {
        return Err(RetrievalError::Margin(cfg.margin));
    }
    let input = triplets.first().map_or(EMBED_DIM, |t| t.anchor.len());
    let mut proj = Projection::new(input, cfg.output, cfg.seed);
    let mut adam = Adam::new(&proj.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut history = vec![proj.mean_loss(triplets, cfg.margin)];
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &i in &order {
            let tape = Tape::new();
            let loss = proj.triplet_on(&tape, &triplets[i], cfg.margin)?;
            proj.store.zero_grads();
            tape.backward(loss, &mut proj.store)?;
            adam.step(&mut proj.store);
        }
        history.push(proj.mean_loss(triplets, cfg.margin));
    }
    Ok((proj, history))
}
