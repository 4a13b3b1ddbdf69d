//! Abstraction policy: a bidirectional GRU encodes every point of the current
//! sketch, and an MLP reads the encodings of the stroke-segment under the
//! cursor (plus optional neighbours) to choose skip or keep.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action;
use crate::nn::{self, BiGru, BoundBiGru, BoundLinear, Linear, NnError, ParamStore, Tape, Tensor, Var};
use crate::sketch::{remove_segment, SegmentTable, SketchError, VectorSketch, SEGMENT_LEN};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("cannot abstract an empty sketch")]
    EmptySketch,
    #[error("delta {0} outside [-1, 1]")]
    Delta(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("checkpoint config: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// GRU width per direction.
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// Neighbouring stroke-segments fed to the MLP on each side of the cursor.
    pub window_radius: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            mlp_hidden: 64,
            window_radius: 0,
        }
    }
}

impl AgentConfig {
    pub fn mlp_input(&self) -> usize {
        (2 * self.window_radius + 1) * SEGMENT_LEN * 2 * self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub p_skip: f64,
    pub p_keep: f64,
}

impl ActionDistribution {
    pub fn prob(&self, action: Action) -> f64 {
        match action {
            Action::Skip => self.p_skip,
            Action::Keep => self.p_keep,
        }
    }

    pub fn log_prob(&self, action: Action) -> f64 {
        self.prob(action).ln()
    }
}

/// Moves `delta` probability mass from keep to skip, clamps both to `[0, 1]`
/// and renormalizes. Positive `delta` produces more abstract output.
pub fn shift(phi: ActionDistribution, delta: f64) -> ActionDistribution {
    if delta == 0.0 {
        return phi;
    }
    let skip = (phi.p_skip + delta).clamp(0.0, 1.0);
    let keep = (phi.p_keep - delta).clamp(0.0, 1.0);
    let total = skip + keep;
    ActionDistribution {
        p_skip: skip / total,
        p_keep: keep / total,
    }
}

/// Samples from the shifted distribution and returns the log-probability of
/// the sampled action under the un-shifted `phi`.
pub fn sample_action<R: Rng + ?Sized>(phi: ActionDistribution, delta: f64, rng: &mut R) -> (Action, f64) {
    let shifted = shift(phi, delta);
    let u: f64 = rng.random();
    let action = if u < shifted.p_skip { Action::Skip } else { Action::Keep };
    (action, phi.log_prob(action))
}

#[derive(Debug, Clone)]
pub struct AgentModel {
    config: AgentConfig,
    store: ParamStore,
    gru: BiGru,
    l1: Linear,
    l2: Linear,
}

/// Agent parameters bound onto a tape for a differentiable pass.
pub struct BoundAgent {
    gru: BoundBiGru,
    l1: BoundLinear,
    l2: BoundLinear,
}

fn point_features(sketch: &VectorSketch) -> Vec<Vec<f64>> {
    sketch
        .points
        .iter()
        .map(|p| vec![p.dx, p.dy, if p.pen_lift { 1.0 } else { 0.0 }])
        .collect()
}

/// Feature slots (point indices, `None` for zero padding) read for the
/// decision at `cursor`.
fn window_slots(table: &SegmentTable, cursor: usize, radius: usize) -> Vec<Option<usize>> {
    let mut slots = Vec::with_capacity((2 * radius + 1) * SEGMENT_LEN);
    for offset in 0..=2 * radius {
        let range = (cursor + offset)
            .checked_sub(radius)
            .and_then(|s| table.ranges.get(s))
            .cloned()
            .unwrap_or(0..0);
        slots.extend((0..SEGMENT_LEN).map(|k| Some(range.start + k).filter(|i| range.contains(i))));
    }
    slots
}

impl AgentModel {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        if config.hidden == 0 || config.mlp_hidden == 0 {
            return Err(AgentError::Config("hidden widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "gru", 3, config.hidden, &mut rng);
        let l1 = Linear::new(&mut store, "mlp.0", config.mlp_input(), config.mlp_hidden, &mut rng);
        let l2 = Linear::new(&mut store, "mlp.1", config.mlp_hidden, 2, &mut rng);
        Ok(Self {
            config,
            store,
            gru,
            l1,
            l2,
        })
    }

    pub fn config(&self) -> AgentConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// B-GRU output (forward and backward halves concatenated) for every point.
    pub fn encode(&self, sketch: &VectorSketch) -> Result<Vec<Vec<f64>>, AgentError> {
        if sketch.is_empty() {
            return Err(AgentError::EmptySketch);
        }
        Ok(self.gru.run_plain(&self.store, &point_features(sketch))?)
    }

    pub fn policy(&self, features: &[Vec<f64>], table: &SegmentTable, cursor: usize) -> ActionDistribution {
        let width = 2 * self.config.hidden;
        let mut input = Vec::with_capacity(self.config.mlp_input());
        for slot in window_slots(table, cursor, self.config.window_radius) {
            match slot {
                Some(i) => input.extend_from_slice(&features[i]),
                None => input.extend(std::iter::repeat_n(0.0, width)),
            }
        }
        let h: Vec<f64> = self.l1.forward_plain(&self.store, &input).into_iter().map(f64::tanh).collect();
        let p = nn::softmax(&self.l2.forward_plain(&self.store, &h));
        ActionDistribution {
            p_skip: p[Action::Skip.index()],
            p_keep: p[Action::Keep.index()],
        }
    }

    pub fn bind(&self, tape: &Tape) -> BoundAgent {
        BoundAgent {
            gru: self.gru.bind(tape, &self.store),
            l1: self.l1.bind(tape, &self.store),
            l2: self.l2.bind(tape, &self.store),
        }
    }

    /// Differentiable counterpart of [`AgentModel::encode`].
    pub fn encode_on(&self, tape: &Tape, bound: &BoundAgent, sketch: &VectorSketch) -> Result<Vec<Var>, AgentError> {
        if sketch.is_empty() {
            return Err(AgentError::EmptySketch);
        }
        let xs: Vec<Var> = point_features(sketch)
            .into_iter()
            .map(|f| tape.constant(Tensor::vector(f)))
            .collect();
        Ok(bound.gru.run(tape, &xs)?)
    }

    /// Differentiable counterpart of [`AgentModel::policy`]; returns the
    /// `[p_skip, p_keep]` vector.
    pub fn policy_on(
        &self,
        tape: &Tape,
        bound: &BoundAgent,
        features: &[Var],
        table: &SegmentTable,
        cursor: usize,
    ) -> Result<Var, AgentError> {
        let zero = tape.constant(Tensor::zeros(&[2 * self.config.hidden]));
        let parts: Vec<Var> = window_slots(table, cursor, self.config.window_radius)
            .into_iter()
            .map(|s| s.map_or(zero, |i| features[i]))
            .collect();
        let input = tape.concat(&parts)?;
        let h = tape.tanh(bound.l1.forward(tape, input)?);
        Ok(tape.softmax(bound.l2.forward(tape, h)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AgentError> {
        nn::save_checkpoint(path, &self.store, &serde_json::to_string(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let ck = nn::load_checkpoint(path)?;
        let config: AgentConfig = serde_json::from_str(&ck.config)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_from(&ck.params)?;
        Ok(model)
    }
}

/// Output of one abstraction episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Abstraction {
    pub sketch: VectorSketch,
    /// Decision per original stroke-segment; `true` for keep.
    pub kept: Vec<bool>,
    /// Un-shifted policy at every step.
    pub policies: Vec<ActionDistribution>,
}

impl Abstraction {
    pub fn kept_segments(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }
}

/// Runs one episode with actions drawn from the `delta`-shifted policy.
pub fn abstract_sketch<R: Rng + ?Sized>(
    agent: &AgentModel,
    sketch: &VectorSketch,
    delta: f64,
    rng: &mut R,
) -> Result<Abstraction, AgentError> {
    if !(-1.0..=1.0).contains(&delta) {
        return Err(AgentError::Delta(delta));
    }
    let mut table = SegmentTable::build(sketch);
    if table.is_empty() {
        return Err(AgentError::EmptySketch);
    }
    let m = table.len();
    let mut current = sketch.clone();
    let mut features = agent.encode(&current)?;
    let mut cursor = 0;
    let mut kept = Vec::with_capacity(m);
    let mut policies = Vec::with_capacity(m);
    for _ in 0..m {
        let phi = agent.policy(&features, &table, cursor);
        let (action, _) = sample_action(phi, delta, rng);
        policies.push(phi);
        kept.push(action == Action::Keep);
        match action {
            Action::Keep => cursor += 1,
            Action::Skip => {
                current = remove_segment(&current, &table, cursor)?;
                table = SegmentTable::build(&current);
                if !current.is_empty() {
                    features = agent.encode(&current)?;
                }
            }
        }
    }
    Ok(Abstraction {
        sketch: current,
        kept,
        policies,
    })
}

/// Applies a kept-mask by removing every un-kept segment in episode order.
pub fn apply_mask(sketch: &VectorSketch, kept: &[bool]) -> Result<VectorSketch, SketchError> {
    let mut current = sketch.clone();
    let mut table = SegmentTable::build(&current);
    let mut cursor = 0;
    for &k in kept {
        if k {
            cursor += 1;
        } else {
            current = remove_segment(&current, &table, cursor)?;
            table = SegmentTable::build(&current);
        }
    }
    Ok(current)
}

/// Per-stroke saliency: the mean keep-probability over each stroke's
/// segments, taken on the intact sketch.
pub fn saliency(agent: &AgentModel, sketch: &VectorSketch) -> Result<Vec<f64>, AgentError> {
    let table = SegmentTable::build(sketch);
    if table.is_empty() {
        return Err(AgentError::EmptySketch);
    }
    let features = agent.encode(sketch)?;
    let strokes = table.stroke_count();
    let mut sum = vec![0.0; strokes];
    let mut count = vec![0usize; strokes];
    for cursor in 0..table.len() {
        let l = table.stroke_of[cursor];
        sum[l] += agent.policy(&features, &table, cursor).p_keep;
        count[l] += 1;
    }
    Ok(sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect())
}

/// Five-step blue-to-red scale for saliency rendering.
pub const SALIENCY_PALETTE: [&str; 5] = ["#2c7bb6", "#abd9e9", "#ffffbf", "#fdae61", "#d7191c"];

pub fn saliency_colors(values: &[f64]) -> Vec<String> {
    values
        .iter()
        .map(|&s| {
            let bin = ((s.clamp(0.0, 1.0) * 5.0) as usize).min(4);
            SALIENCY_PALETTE[bin].to_string()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::StrokePoint;

    fn agent() -> AgentModel {
        AgentModel::new(
            AgentConfig {
                hidden: 4,
                mlp_hidden: 6,
                window_radius: 0,
            },
            3,
        )
        .unwrap()
    }

    fn sketch(lens: &[usize]) -> VectorSketch {
        let mut pts = Vec::new();
        for (s, &n) in lens.iter().enumerate() {
            for i in 0..n {
                pts.push(StrokePoint::new((i as f64 * 0.7 + s as f64).cos(), 0.2 * i as f64 - 0.3, i + 1 == n));
            }
        }
        VectorSketch::new(pts)
    }

    #[test]
    fn shift_examples() {
        let even = ActionDistribution { p_skip: 0.5, p_keep: 0.5 };
        assert_eq!(shift(even, 0.0), even);
        let s = shift(even, 0.1);
        assert!((s.p_skip - 0.6).abs() < 1e-12 && (s.p_keep - 0.4).abs() < 1e-12);
        let s = shift(ActionDistribution { p_skip: 0.95, p_keep: 0.05 }, 0.1);
        assert_eq!((s.p_skip, s.p_keep), (1.0, 0.0));
        assert_eq!(shift(even, -1.0).p_keep, 1.0);
    }

    #[test]
    fn sampling() {
        let sure = ActionDistribution { p_skip: 1.0, p_keep: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_action(sure, 0.0, &mut rng).0 == Action::Skip));
        let phi = ActionDistribution { p_skip: 0.7, p_keep: 0.3 };
        let draws: Vec<_> = (0..10_000).map(|_| sample_action(phi, 0.0, &mut rng).0).collect();
        let rate = draws.iter().filter(|&&a| a == Action::Skip).count() as f64 / 1e4;
        assert!((rate - 0.7).abs() < 0.02, "{rate}");
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            assert_eq!(sample_action(phi, 0.1, &mut a), sample_action(phi, 0.1, &mut b));
        }
        // log-probability comes from the un-shifted distribution
        let (act, lp) = sample_action(phi, 1.0, &mut a);
        assert_eq!((act, lp), (Action::Skip, 0.7f64.ln()));
    }

    #[test]
    fn zero_agent_is_neutral() {
        let mut a = agent();
        a.params_mut().zero_values();
        let s = sketch(&[7, 3]);
        let f = a.encode(&s).unwrap();
        assert_eq!(f.len(), 10);
        assert!(f.iter().flatten().all(|&v| v == 0.0));
        let phi = a.policy(&f, &SegmentTable::build(&s), 1);
        assert_eq!((phi.p_skip, phi.p_keep), (0.5, 0.5));
        assert_eq!(saliency(&a, &s).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn re_encoding_differs_from_slicing() {
        let a = agent();
        let s = sketch(&[15]);
        let table = SegmentTable::build(&s);
        let full = a.encode(&s).unwrap();
        let cut = remove_segment(&s, &table, 1).unwrap();
        let re = a.encode(&cut).unwrap();
        let sliced: Vec<_> = full[..5].iter().chain(&full[10..]).cloned().collect();
        assert_eq!(re.len(), sliced.len());
        assert_ne!(re, sliced);
    }

    #[test]
    fn large_weight_saturates() {
        let mut a = agent();
        a.params_mut().zero_values();
        let id = a.params().id("mlp.1.b").unwrap();
        a.params_mut().value_mut(id).data_mut()[Action::Keep.index()] = 50.0;
        let s = sketch(&[5]);
        let phi = a.policy(&a.encode(&s).unwrap(), &SegmentTable::build(&s), 0);
        assert!(phi.p_keep > 1.0 - 1e-12);
    }

    #[test]
    fn tape_policy_matches_plain() {
        let a = AgentModel::new(
            AgentConfig {
                hidden: 3,
                mlp_hidden: 4,
                window_radius: 1,
            },
            8,
        )
        .unwrap();
        let s = sketch(&[7, 2, 6]);
        let table = SegmentTable::build(&s);
        let f = a.encode(&s).unwrap();
        let tape = Tape::new();
        let bound = a.bind(&tape);
        let fv = a.encode_on(&tape, &bound, &s).unwrap();
        for cursor in 0..table.len() {
            let p = a.policy(&f, &table, cursor);
            let pv = a.policy_on(&tape, &bound, &fv, &table, cursor).unwrap();
            assert_eq!(tape.value(pv).data(), &[p.p_skip, p.p_keep]);
        }
    }

    #[test]
    fn forced_abstraction_extremes_and_mask_replay() {
        let a = agent();
        let s = sketch(&[12, 4, 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all_keep = abstract_sketch(&a, &s, -1.0, &mut rng).unwrap();
        assert_eq!(all_keep.sketch, s);
        assert!(all_keep.kept.iter().all(|&k| k));
        let all_skip = abstract_sketch(&a, &s, 1.0, &mut rng).unwrap();
        assert!(all_skip.sketch.is_empty());
        assert_eq!(all_skip.kept.len(), 6);
        let mid = abstract_sketch(&a, &s, 0.0, &mut rng).unwrap();
        assert_eq!(apply_mask(&s, &mid.kept).unwrap(), mid.sketch);
        assert!(abstract_sketch(&a, &VectorSketch::default(), 0.0, &mut rng).is_err());
        assert!(abstract_sketch(&a, &s, 1.5, &mut rng).is_err());
    }

    #[test]
    fn saliency_bounds_and_colors() {
        let a = agent();
        let s = sketch(&[5, 11, 3]);
        let sal = saliency(&a, &s).unwrap();
        assert_eq!(sal.len(), 3);
        assert!(sal.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(
            saliency_colors(&[0.0, 0.3, 0.5, 0.79, 1.0]),
            vec!["#2c7bb6", "#abd9e9", "#ffffbf", "#fdae61", "#d7191c"]
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = agent();
        a.save(dir.path().join("a.ckpt")).unwrap();
        let b = AgentModel::load(dir.path().join("a.ckpt")).unwrap();
        assert_eq!(b.config(), a.config());
        assert_eq!(b.params().flat_values(), a.params().flat_values());
    }
}
