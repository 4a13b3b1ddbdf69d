//! The abstraction MDP. One episode visits every stroke-segment of the input
//! sketch once, in order; skipping deletes the segment, keeping leaves the
//! sketch untouched and moves on.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{rank_of, ClassifierModel, Prediction};
use crate::sketch::{remove_segment, SegmentTable, SketchError, StrokePoint, VectorSketch};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot reset on an empty sketch")]
    EmptySketch,
    #[error("step called after the episode finished")]
    EpisodeDone,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Skip = 0,
    Keep = 1,
}

impl Action {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardScheme {
    Basic,
    Ranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub scheme: RewardScheme,
    pub skip_bonus: f64,
    pub keep_penalty: f64,
    pub terminal_correct: f64,
    pub terminal_wrong: f64,
    /// Final weight of the ranked term, reached linearly at the last step.
    pub w_rf: f64,
    pub w_c: f64,
    pub w_v: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            scheme: RewardScheme::Ranked,
            skip_bonus: 1.0,
            keep_penalty: -5.0,
            terminal_correct: 100.0,
            terminal_wrong: -100.0,
            w_rf: 0.5,
            w_c: 0.8,
            w_v: 0.2,
            gamma: 0.9,
        }
    }
}

impl RewardConfig {
    pub fn basic() -> Self {
        Self {
            scheme: RewardScheme::Basic,
            ..Self::default()
        }
    }

    pub fn ranked() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if (self.w_c + self.w_v - 1.0).abs() > 1e-9 {
            return bad("w_c + w_v must equal 1");
        }
        if !(0.0..=1.0).contains(&self.w_rf) {
            return bad("w_rf must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        let constants = [self.skip_bonus, self.keep_penalty, self.terminal_correct, self.terminal_wrong];
        if constants.iter().any(|v| !v.is_finite()) {
            return bad("reward constants must be finite");
        }
        Ok(())
    }
}

/// Basic reward: a per-step bonus or penalty before the last step, and the
/// classification outcome at the last step (`final_correct` is ignored before it).
pub fn basic_reward(t: usize, m: usize, action: Action, final_correct: bool, cfg: &RewardConfig) -> f64 {
    if t < m {
        match action {
            Action::Skip => cfg.skip_bonus,
            Action::Keep => cfg.keep_penalty,
        }
    } else if final_correct {
        cfg.terminal_correct
    } else {
        cfg.terminal_wrong
    }
}

/// Weight of the ranked term at step `t`: 0 at the first step, rising
/// linearly to `w_rf` at step `m`.
pub fn ranked_weight(t: usize, m: usize, w_rf: f64) -> f64 {
    w_rf * t.saturating_sub(1) as f64 / m.saturating_sub(1).max(1) as f64
}

/// Class term `c_t = 1 - (K - C_t) / K`.
pub fn class_term(c_t: usize, k: usize) -> f64 {
    1.0 - (k as f64 - c_t as f64) / k as f64
}

/// Variation term `v_t = 1 - (K - (C_t - C_prev)) / (2K)`.
pub fn variation_term(c_t: usize, c_prev: usize, k: usize) -> f64 {
    let k = k as f64;
    1.0 - (k - (c_t as f64 - c_prev as f64)) / (2.0 * k)
}

/// Ranked reward from precomputed class and variation terms.
pub fn ranked_reward_from_terms(
    t: usize,
    m: usize,
    action: Action,
    c: f64,
    v: f64,
    final_correct: bool,
    cfg: &RewardConfig,
) -> f64 {
    let b = basic_reward(t, m, action, final_correct, cfg);
    let r = if t < m { (cfg.w_c * c + cfg.w_v * v) * b } else { 0.0 };
    let w_r = ranked_weight(t, m, cfg.w_rf);
    (1.0 - w_r) * b + w_r * r
}

/// Ranked reward for quality ranks `c_t` (current) and `c_prev` (previous step).
#[allow(clippy::too_many_arguments)]
pub fn ranked_reward(
    t: usize,
    m: usize,
    action: Action,
    c_t: usize,
    c_prev: usize,
    k: usize,
    final_correct: bool,
    cfg: &RewardConfig,
) -> f64 {
    let c = class_term(c_t, k);
    let v = variation_term(c_t, c_prev, k);
    ranked_reward_from_terms(t, m, action, c, v, final_correct, cfg)
}

/// Outcome of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Quality rank `C_t` of the updated sketch, when it was computed.
    pub rank: Option<usize>,
    pub done: bool,
    /// Classification result on the final sketch; set on the last step.
    pub correct: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub sketch: VectorSketch,
    pub table: SegmentTable,
    /// Index into `table` of the segment awaiting a decision.
    pub cursor: usize,
    /// 1-based step counter; `m + 1` once done.
    pub t: usize,
    pub m: usize,
    pub label: usize,
    /// `C_{t-1}`; at reset, the rank on the full sketch.
    pub prev_rank: usize,
    pub num_classes: usize,
    /// Decisions so far, in order; `true` for keep.
    pub kept: Vec<bool>,
    /// Classifier output for the current sketch, dropped after each skip.
    cached: Option<Prediction>,
}

impl EnvState {
    pub fn reset(sketch: &VectorSketch, label: usize, classifier: &ClassifierModel) -> Result<Self, EnvError> {
        let k = classifier.num_classes();
        if label >= k {
            return Err(EnvError::Label { label, classes: k });
        }
        let table = SegmentTable::build(sketch);
        if table.is_empty() {
            return Err(EnvError::EmptySketch);
        }
        let prediction = classifier.predict(sketch);
        let prev_rank = rank_of(&prediction.probs, label).expect("label checked");
        Ok(Self {
            m: table.len(),
            sketch: sketch.clone(),
            table,
            cursor: 0,
            t: 1,
            label,
            prev_rank,
            num_classes: k,
            kept: Vec::new(),
            cached: Some(prediction),
        })
    }

    pub fn is_done(&self) -> bool {
        self.t > self.m
    }

    pub fn step(
        &mut self,
        action: Action,
        classifier: &ClassifierModel,
        cfg: &RewardConfig,
    ) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeDone);
        }
        let (t, m) = (self.t, self.m);
        match action {
            Action::Skip => {
                self.sketch = remove_segment(&self.sketch, &self.table, self.cursor)?;
                self.table = SegmentTable::build(&self.sketch);
                self.cached = None;
            }
            Action::Keep => self.cursor += 1,
        }
        self.kept.push(action == Action::Keep);
        self.t += 1;
        let done = t == m;

        let mut rank = None;
        let mut correct = None;
        if done || cfg.scheme == RewardScheme::Ranked {
            let p = self.cached.get_or_insert_with(|| classifier.predict(&self.sketch));
            rank = Some(rank_of(&p.probs, self.label).expect("label checked"));
            if done {
                // The empty sketch classifies as uniform; that never counts as correct.
                correct = Some(!p.degenerate && p.predicted == self.label);
            }
        }
        let final_correct = correct.unwrap_or(false);

        let reward = match cfg.scheme {
            RewardScheme::Basic => basic_reward(t, m, action, final_correct, cfg),
            RewardScheme::Ranked => match rank {
                Some(c_t) if !done => {
                    ranked_reward(t, m, action, c_t, self.prev_rank, self.num_classes, final_correct, cfg)
                }
                _ => ranked_reward_from_terms(t, m, action, 0.0, 0.0, final_correct, cfg),
            },
        };
        if let Some(r) = rank {
            self.prev_rank = r;
        }
        Ok(StepOutcome {
            reward,
            rank,
            done,
            correct,
        })
    }
}

/// One decision of a recorded episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub t: usize,
    pub action: Action,
    pub reward: f64,
    /// Log-probability of `action` under the un-shifted policy.
    pub log_prob: f64,
    pub rank: Option<usize>,
    pub done: bool,
}

/// First line of an episode in a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeHeader {
    pub episode: usize,
    pub label: usize,
    pub points: Vec<(f64, f64, u8)>,
    pub reward: RewardConfig,
}

impl EpisodeHeader {
    pub fn new(episode: usize, sketch: &VectorSketch, label: usize, reward: &RewardConfig) -> Self {
        Self {
            episode,
            label,
            points: sketch.points.iter().map(|p| (p.dx, p.dy, p.pen_lift as u8)).collect(),
            reward: reward.clone(),
        }
    }

    pub fn sketch(&self) -> VectorSketch {
        VectorSketch::new(
            self.points
                .iter()
                .map(|&(dx, dy, p)| StrokePoint::new(dx, dy, p != 0))
                .collect(),
        )
        .with_label(self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceLine {
    Episode(EpisodeHeader),
    Step(TransitionRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub header: EpisodeHeader,
    pub steps: Vec<TransitionRecord>,
}

pub fn write_trace<W: Write>(out: &mut W, trace: &EpisodeTrace) -> std::io::Result<()> {
    let mut line = |l: &TraceLine| -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, l)?;
        out.write_all(b"\n")
    };
    line(&TraceLine::Episode(trace.header.clone()))?;
    for s in &trace.steps {
        line(&TraceLine::Step(*s))?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<EpisodeTrace>, TraceError> {
    let mut episodes: Vec<EpisodeTrace> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| TraceError::Parse { line: i + 1, message };
        match serde_json::from_str::<TraceLine>(&line).map_err(|e| parse_err(e.to_string()))? {
            TraceLine::Episode(header) => episodes.push(EpisodeTrace {
                header,
                steps: Vec::new(),
            }),
            TraceLine::Step(s) => episodes
                .last_mut()
                .ok_or_else(|| parse_err("step before any episode header".into()))?
                .steps
                .push(s),
        }
    }
    Ok(episodes)
}

/// First disagreement found when replaying an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub episode: usize,
    pub t: usize,
    pub detail: String,
}

/// Re-runs the recorded actions through a fresh environment and compares
/// rewards, ranks and termination flags exactly.
pub fn replay_episode(trace: &EpisodeTrace, classifier: &ClassifierModel) -> Result<Option<ReplayMismatch>, EnvError> {
    let h = &trace.header;
    let mismatch = |t: usize, detail: String| Ok(Some(ReplayMismatch {
        episode: h.episode,
        t,
        detail,
    }));
    let mut env = EnvState::reset(&h.sketch(), h.label, classifier)?;
    if trace.steps.len() != env.m {
        return mismatch(0, format!("{} steps recorded, episode length is {}", trace.steps.len(), env.m));
    }
    for rec in &trace.steps {
        let out = env.step(rec.action, classifier, &h.reward)?;
        if out.reward.to_bits() != rec.reward.to_bits() {
            return mismatch(rec.t, format!("reward {} recorded, {} replayed", rec.reward, out.reward));
        }
        if out.rank != rec.rank || out.done != rec.done {
            return mismatch(rec.t, format!("rank/done {:?}/{} recorded, {:?}/{} replayed", rec.rank, rec.done, out.rank, out.done));
        }
    }
    Ok(None)
}
