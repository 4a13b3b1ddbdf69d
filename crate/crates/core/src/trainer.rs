//! REINFORCE training of the abstraction agent.
//!
//! Rollouts sample the un-shifted policy with fast tape-free passes. Updates
//! replay each trajectory's geometry on a tape to rebuild the log-probabilities
//! of the taken actions and descend on
//! `-(1/N) Σ_traj Σ_t log π(a_t | s_t) · (G_t − b)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{sample_action, AgentError, AgentModel};
use crate::classifier::ClassifierModel;
use crate::corpus::{derive_seed, Corpus};
use crate::env::{Action, EnvError, EnvState, EpisodeHeader, EpisodeTrace, RewardConfig, TransitionRecord};
use crate::nn::{Adam, NnError, Tape, Var};
use crate::sketch::{remove_segment, SegmentTable, SketchError, VectorSketch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at update {update}")]
    Diverged { update: usize, loss: f64 },
    #[error("no usable training sketches")]
    EmptyCorpus,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    None,
    MovingAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    /// Trajectories per update.
    pub batch: usize,
    pub episodes: usize,
    pub baseline: BaselineKind,
    pub baseline_momentum: f64,
    /// Episodes between evaluations; 0 evaluates only at the start and end.
    pub eval_every: usize,
    /// Test sketches used per evaluation (all when 0).
    pub eval_size: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 16,
            episodes: 3000,
            baseline: BaselineKind::MovingAverage,
            baseline_momentum: 0.9,
            eval_every: 200,
            eval_size: 0,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and positive");
        }
        if !(0.0..=1.0).contains(&self.baseline_momentum) {
            return bad("baseline_momentum must lie in [0, 1]");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Input sketch (with label) the episode started from.
    pub sketch: VectorSketch,
    pub label: usize,
    pub sketch_id: usize,
    pub steps: Vec<TransitionRecord>,
    pub final_sketch: VectorSketch,
    pub correct: bool,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Undiscounted sum of rewards.
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn kept_segments(&self) -> usize {
        self.steps.iter().filter(|s| s.action == Action::Keep).count()
    }

    pub fn to_trace(&self, episode: usize, reward: &RewardConfig) -> EpisodeTrace {
        EpisodeTrace {
            header: EpisodeHeader::new(episode, &self.sketch, self.label, reward),
            steps: self.steps.clone(),
        }
    }
}

/// Return-to-go `G_t = Σ_{k≥t} γ^{k−t} R_k`.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}

/// Samples one episode from `agent` with shift `delta` (0 for training).
pub fn rollout<R: rand::Rng + ?Sized>(
    agent: &AgentModel,
    classifier: &ClassifierModel,
    sketch: &VectorSketch,
    label: usize,
    reward: &RewardConfig,
    delta: f64,
    rng: &mut R,
) -> Result<Trajectory, TrainError> {
    let mut env = EnvState::reset(sketch, label, classifier)?;
    let mut features = agent.encode(&env.sketch)?;
    let mut steps = Vec::with_capacity(env.m);
    let mut correct = false;
    while !env.is_done() {
        let phi = agent.policy(&features, &env.table, env.cursor);
        let (action, log_prob) = sample_action(phi, delta, rng);
        let t = env.t;
        let out = env.step(action, classifier, reward)?;
        if action == Action::Skip && !env.sketch.is_empty() && !out.done {
            features = agent.encode(&env.sketch)?;
        }
        correct = out.correct.unwrap_or(correct);
        steps.push(TransitionRecord {
            t,
            action,
            reward: out.reward,
            log_prob,
            rank: out.rank,
            done: out.done,
        });
    }
    Ok(Trajectory {
        sketch: sketch.clone(),
        label,
        sketch_id: 0,
        steps,
        final_sketch: env.sketch,
        correct,
    })
}

/// Records `Σ_t log π(a_t | s_t) · weight_t` for one trajectory on `tape`.
fn weighted_log_probs(
    agent: &AgentModel,
    tape: &Tape,
    bound: &crate::agent::BoundAgent,
    traj: &Trajectory,
    weights: &[f64],
) -> Result<Option<Var>, TrainError> {
    let mut sketch = traj.sketch.clone();
    let mut table = SegmentTable::build(&sketch);
    let mut features = agent.encode_on(tape, bound, &sketch)?;
    let mut cursor = 0;
    let mut total: Option<Var> = None;
    for (i, (step, &w)) in traj.steps.iter().zip(weights).enumerate() {
        if w != 0.0 {
            let probs = agent.policy_on(tape, bound, &features, &table, cursor)?;
            let lp = tape.ln(tape.pick(probs, step.action.index())?);
            let term = tape.scale(lp, w);
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        match step.action {
            Action::Keep => cursor += 1,
            Action::Skip => {
                sketch = remove_segment(&sketch, &table, cursor)?;
                table = SegmentTable::build(&sketch);
                let more = traj.steps[i + 1..].iter().zip(&weights[i + 1..]).any(|(_, &w)| w != 0.0);
                if more {
                    features = agent.encode_on(tape, bound, &sketch)?;
                }
            }
        }
    }
    Ok(total)
}

/// Per-step advantages `G_t − baseline` for a batch.
pub fn advantages(batch: &[Trajectory], gamma: f64, baseline: f64) -> Vec<Vec<f64>> {
    batch
        .iter()
        .map(|t| returns(&t.rewards(), gamma).into_iter().map(|g| g - baseline).collect())
        .collect()
}

/// Surrogate loss `-(1/N) Σ log π(a_t|s_t) · A_t` recorded on `tape`, or
/// `None` when every advantage is zero.
pub fn surrogate_loss(
    agent: &AgentModel,
    tape: &Tape,
    batch: &[Trajectory],
    advantages: &[Vec<f64>],
) -> Result<Option<Var>, TrainError> {
    let bound = agent.bind(tape);
    let n = batch.len() as f64;
    let mut total: Option<Var> = None;
    for (traj, adv) in batch.iter().zip(advantages) {
        let weights: Vec<f64> = adv.iter().map(|a| -a / n).collect();
        if let Some(term) = weighted_log_probs(agent, tape, &bound, traj, &weights)? {
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    Ok(total)
}

/// The same surrogate evaluated with plain forward passes.
pub fn surrogate_loss_value(agent: &AgentModel, batch: &[Trajectory], advantages: &[Vec<f64>]) -> Result<f64, TrainError> {
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (traj, adv) in batch.iter().zip(advantages) {
        let mut sketch = traj.sketch.clone();
        let mut table = SegmentTable::build(&sketch);
        let mut features = agent.encode(&sketch)?;
        let mut cursor = 0;
        for (step, a) in traj.steps.iter().zip(adv) {
            let phi = agent.policy(&features, &table, cursor);
            total += -a / n * phi.log_prob(step.action);
            match step.action {
                Action::Keep => cursor += 1,
                Action::Skip => {
                    sketch = remove_segment(&sketch, &table, cursor)?;
                    table = SegmentTable::build(&sketch);
                    if !sketch.is_empty() {
                        features = agent.encode(&sketch)?;
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Moving-average scalar baseline over batch mean returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub momentum: f64,
    pub value: Option<f64>,
}

impl Baseline {
    pub fn new(kind: BaselineKind, momentum: f64) -> Self {
        Self {
            kind,
            momentum,
            value: None,
        }
    }

    /// Baseline to subtract for a batch whose mean return is `batch_mean`;
    /// the first batch initializes it.
    pub fn current(&mut self, batch_mean: f64) -> f64 {
        match self.kind {
            BaselineKind::None => 0.0,
            BaselineKind::MovingAverage => *self.value.get_or_insert(batch_mean),
        }
    }

    pub fn update(&mut self, batch_mean: f64) {
        if let (BaselineKind::MovingAverage, Some(v)) = (self.kind, self.value.as_mut()) {
            *v = self.momentum * *v + (1.0 - self.momentum) * batch_mean;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_return: f64,
    pub baseline: f64,
}

/// One REINFORCE step on a batch of trajectories.
pub fn reinforce_update(
    agent: &mut AgentModel,
    adam: &mut Adam,
    baseline: &mut Baseline,
    batch: &[Trajectory],
    gamma: f64,
    update: usize,
) -> Result<UpdateStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let all_returns: Vec<f64> = batch
        .iter()
        .flat_map(|t| returns(&t.rewards(), gamma))
        .collect();
    let batch_mean = all_returns.iter().sum::<f64>() / all_returns.len() as f64;
    let b = baseline.current(batch_mean);
    let adv = advantages(batch, gamma, b);
    let tape = Tape::new();
    let loss = surrogate_loss(agent, &tape, batch, &adv)?;
    let loss_value = loss.map_or(0.0, |l| tape.scalar_value(l));
    if !loss_value.is_finite() {
        return Err(TrainError::Diverged { update, loss: loss_value });
    }
    if let Some(l) = loss {
        agent.params_mut().zero_grads();
        tape.backward(l, agent.params_mut())?;
        adam.step(agent.params_mut());
    }
    baseline.update(batch_mean);
    Ok(UpdateStats {
        loss: loss_value,
        mean_return: batch.iter().map(Trajectory::total_return).sum::<f64>() / batch.len() as f64,
        baseline: b,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub episode: usize,
    /// Mean undiscounted training return since the previous row.
    pub mean_return: f64,
    pub mean_kept_segments: f64,
    pub eval_accuracy: f64,
    pub eval_mean_return: f64,
}

pub fn write_curve_csv<W: std::io::Write>(out: &mut W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "episode,mean_return,mean_kept_segments,eval_accuracy,eval_mean_return")?;
    for p in curve {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            p.episode, p.mean_return, p.mean_kept_segments, p.eval_accuracy, p.eval_mean_return
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub mean_return: f64,
    pub mean_kept_segments: f64,
}

/// Runs `f` on every item, splitting the work over `workers` threads; the
/// output order matches the input order.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> U + Sync,
) -> Vec<U> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Seeded evaluation episodes at shift `delta` over `sketches`.
pub fn evaluate(
    agent: &AgentModel,
    classifier: &ClassifierModel,
    sketches: &[&VectorSketch],
    reward: &RewardConfig,
    delta: f64,
    seed: u64,
    workers: usize,
) -> Result<EvalStats, TrainError> {
    let results = parallel_map(sketches, workers, |i, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        rollout(agent, classifier, s, s.label.unwrap_or(0), reward, delta, &mut rng)
    });
    let mut stats = EvalStats {
        accuracy: 0.0,
        mean_return: 0.0,
        mean_kept_segments: 0.0,
    };
    let n = results.len().max(1) as f64;
    for r in results {
        let t = r?;
        stats.accuracy += t.correct as u8 as f64 / n;
        stats.mean_return += t.total_return() / n;
        stats.mean_kept_segments += t.kept_segments() as f64 / n;
    }
    Ok(stats)
}

/// Progress notifications from [`train_agent`].
pub enum TrainEvent<'a> {
    Trajectory { episode: usize, trajectory: &'a Trajectory },
    Curve(&'a CurvePoint),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// Episode count at which the returned parameters were evaluated.
    pub best_episode: usize,
    pub best_eval_return: f64,
    pub initial_eval_return: f64,
}

const EVAL_STREAM: u64 = 0xE7A1;

/// Trains `agent` in place and leaves it at the best-evaluated parameters.
pub fn train_agent(
    corpus: &Corpus,
    classifier: &ClassifierModel,
    agent: &mut AgentModel,
    reward: &RewardConfig,
    config: &TrainerConfig,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    reward.validate()?;
    let train: Vec<&VectorSketch> = corpus.train().map(|i| &i.sketch).filter(|s| !s.is_empty()).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut eval_set: Vec<&VectorSketch> = corpus.test().map(|i| &i.sketch).filter(|s| !s.is_empty()).collect();
    if config.eval_size > 0 && eval_set.len() > config.eval_size {
        eval_set.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, EVAL_STREAM)));
        eval_set.truncate(config.eval_size);
    }
    let eval_seed = derive_seed(config.seed, EVAL_STREAM + 1);
    let run_eval = |agent: &AgentModel| evaluate(agent, classifier, &eval_set, reward, 0.0, eval_seed, config.workers);

    let mut adam = Adam::new(agent.params(), config.lr);
    let mut baseline = Baseline::new(config.baseline, config.baseline_momentum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x0DE5));
    let mut order: Vec<usize> = Vec::new();

    let initial = run_eval(agent)?;
    let mut curve = vec![CurvePoint {
        episode: 0,
        mean_return: f64::NAN,
        mean_kept_segments: f64::NAN,
        eval_accuracy: initial.accuracy,
        eval_mean_return: initial.mean_return,
    }];
    on_event(TrainEvent::Curve(&curve[0]));
    let mut best = (0, initial.mean_return, agent.params().flat_values());
    let (mut window_return, mut window_kept, mut window_n) = (0.0, 0.0, 0usize);

    let mut episode = 0;
    let mut update = 0;
    while episode < config.episodes {
        let n = config.batch.min(config.episodes - episode);
        let mut jobs = Vec::with_capacity(n);
        for k in 0..n {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            jobs.push((episode + k, order.pop().expect("refilled")));
        }
        let frozen: &AgentModel = agent;
        let batch: Vec<Trajectory> = parallel_map(&jobs, config.workers, |_, &(ep, idx)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, ep as u64));
            let s = train[idx];
            rollout(frozen, classifier, s, s.label.unwrap_or(0), reward, 0.0, &mut rng).map(|mut t| {
                t.sketch_id = idx;
                t
            })
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        for (k, t) in batch.iter().enumerate() {
            on_event(TrainEvent::Trajectory {
                episode: episode + k,
                trajectory: t,
            });
            window_return += t.total_return();
            window_kept += t.kept_segments() as f64;
            window_n += 1;
        }
        update += 1;
        reinforce_update(agent, &mut adam, &mut baseline, &batch, reward.gamma, update)?;
        let before = episode;
        episode += n;

        let crossed = config.eval_every > 0 && episode / config.eval_every > before / config.eval_every;
        if crossed || episode == config.episodes {
            let e = run_eval(agent)?;
            let point = CurvePoint {
                episode,
                mean_return: window_return / window_n as f64,
                mean_kept_segments: window_kept / window_n as f64,
                eval_accuracy: e.accuracy,
                eval_mean_return: e.mean_return,
            };
            (window_return, window_kept, window_n) = (0.0, 0.0, 0);
            on_event(TrainEvent::Curve(&point));
            if e.mean_return > best.1 {
                best = (episode, e.mean_return, agent.params().flat_values());
            }
            curve.push(point);
        }
    }
    agent.params_mut().set_flat_values(&best.2);
    Ok(TrainOutcome {
        curve,
        best_episode: best.0,
        best_eval_return: best.1,
        initial_eval_return: initial.mean_return,
    })
}
