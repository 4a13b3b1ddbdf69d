//! Recurrent sketch classifier: a stacked LSTM over stroke-3 points with a
//! softmax head on the final hidden state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::nn::{self, Adam, Linear, NnError, ParamStore, StackedLstm, Tape, Tensor};
use crate::sketch::VectorSketch;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint config: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierShape {
    pub num_classes: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl ClassifierShape {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.num_classes < 2 {
            return Err(ClassifierError::Config("need at least 2 classes".into()));
        }
        if self.layers < 1 || self.hidden < 1 {
            return Err(ClassifierError::Config("layers and hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            epochs: 20,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// Argmax, ties to the lowest class index.
    pub predicted: usize,
    /// Set for empty input, which classifies as uniform.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    shape: ClassifierShape,
    store: ParamStore,
    lstm: StackedLstm,
    head: Linear,
}

/// Per-point input features: `(dx, dy, pen_lift)`.
fn features(sketch: &VectorSketch) -> Vec<Vec<f64>> {
    sketch
        .points
        .iter()
        .map(|p| vec![p.dx, p.dy, if p.pen_lift { 1.0 } else { 0.0 }])
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Quality rank of `label` under `probs`: `K` when it is the top class, `1`
/// when last. Classes are ordered by descending probability with ties going
/// to the lower class index.
pub fn rank_of(probs: &[f64], label: usize) -> Result<usize, ClassifierError> {
    let k = probs.len();
    if label >= k {
        return Err(ClassifierError::Label { label, classes: k });
    }
    let p = probs[label];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < label))
        .count();
    Ok(k - ahead)
}

impl ClassifierModel {
    pub fn new(shape: ClassifierShape, seed: u64) -> Result<Self, ClassifierError> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lstm = StackedLstm::new(&mut store, "lstm", 3, shape.hidden, shape.layers, &mut rng);
        let head = Linear::new(&mut store, "head", shape.hidden, shape.num_classes, &mut rng);
        Ok(Self {
            shape,
            store,
            lstm,
            head,
        })
    }

    pub fn shape(&self) -> ClassifierShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroes the output projection, making every prediction uniform.
    pub fn zero_head(&mut self) {
        self.store.value_mut(self.head.w).fill(0.0);
        self.store.value_mut(self.head.b).fill(0.0);
    }

    pub fn predict(&self, sketch: &VectorSketch) -> Prediction {
        let k = self.shape.num_classes;
        if sketch.is_empty() {
            return Prediction {
                probs: vec![1.0 / k as f64; k],
                predicted: 0,
                degenerate: true,
            };
        }
        let h = self
            .lstm
            .run_plain(&self.store, &features(sketch))
            .expect("non-empty sequence");
        let probs = nn::softmax(&self.head.forward_plain(&self.store, &h));
        Prediction {
            predicted: argmax(&probs),
            probs,
            degenerate: false,
        }
    }

    /// Quality rank of `label` for `sketch` (see [`rank_of`]).
    pub fn rank(&self, sketch: &VectorSketch, label: usize) -> Result<usize, ClassifierError> {
        rank_of(&self.predict(sketch).probs, label)
    }

    /// Cross-entropy of one labelled sketch, recorded on `tape`.
    fn loss(&self, tape: &Tape, sketch: &VectorSketch, label: usize) -> Result<nn::Var, NnError> {
        let xs: Vec<_> = features(sketch)
            .into_iter()
            .map(|f| tape.constant(Tensor::vector(f)))
            .collect();
        let h = self.lstm.run(tape, &self.store, &xs)?;
        let logits = self.head.bind(tape, &self.store).forward(tape, h)?;
        let probs = tape.softmax(logits)?;
        tape.cross_entropy(probs, label)
    }

    /// Fraction of `sketches` whose argmax matches their label.
    pub fn accuracy<'a>(&self, sketches: impl IntoIterator<Item = &'a VectorSketch>) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for s in sketches {
            n += 1;
            hit += (Some(self.predict(s).predicted) == s.label) as usize;
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        nn::save_checkpoint(path, &self.store, &serde_json::to_string(&self.shape)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        let ck = nn::load_checkpoint(path)?;
        let shape: ClassifierShape = serde_json::from_str(&ck.config)?;
        let mut model = Self::new(shape, 0)?;
        model.store.load_from(&ck.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub initial_test_accuracy: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned (0 = untrained).
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
}

/// Trains with one Adam step per sketch over seeded shuffles of the training
/// split, returning the parameters with the best test accuracy.
pub fn train_classifier(
    corpus: &Corpus,
    config: &ClassifierTrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ClassifierModel, ClassifierReport), ClassifierError> {
    let train: Vec<&VectorSketch> = corpus.train().map(|i| &i.sketch).collect();
    let test: Vec<&VectorSketch> = corpus.test().map(|i| &i.sketch).collect();
    if train.is_empty() || test.is_empty() {
        return Err(ClassifierError::Corpus("both splits must be non-empty".into()));
    }
    if !(config.lr >= 0.0) {
        return Err(ClassifierError::Config("lr must be non-negative".into()));
    }
    let shape = ClassifierShape {
        num_classes: corpus.num_classes(),
        hidden: config.hidden,
        layers: config.layers,
    };
    let mut model = ClassifierModel::new(shape, config.seed)?;
    let mut adam = Adam::new(&model.store, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_C1A5);

    let initial = model.accuracy(test.iter().copied());
    let mut best = (0, initial, model.store.clone());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut counted = 0usize;
        for &i in &order {
            let sketch = train[i];
            if sketch.is_empty() {
                continue;
            }
            let label = sketch.label.expect("corpus sketches are labelled");
            let tape = Tape::new();
            let loss = model.loss(&tape, sketch, label)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(ClassifierError::Diverged { epoch, loss: value });
            }
            total += value;
            counted += 1;
            model.store.zero_grads();
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / counted.max(1) as f64,
            test_accuracy: model.accuracy(test.iter().copied()),
        };
        on_epoch(&stats);
        if stats.test_accuracy > best.1 {
            best = (epoch, stats.test_accuracy, model.store.clone());
        }
        epochs.push(stats);
    }
    model.store = best.2;
    let report = ClassifierReport {
        initial_test_accuracy: initial,
        epochs,
        best_epoch: best.0,
        best_test_accuracy: best.1,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy, ToyGenSpec};
    use crate::sketch::StrokePoint;

    fn model() -> ClassifierModel {
        ClassifierModel::new(
            ClassifierShape {
                num_classes: 3,
                hidden: 8,
                layers: 2,
            },
            1,
        )
        .unwrap()
    }

    fn line() -> VectorSketch {
        VectorSketch::new(vec![
            StrokePoint::new(0.0, 0.0, false),
            StrokePoint::new(1.0, 0.5, false),
            StrokePoint::new(0.2, -1.0, true),
        ])
    }

    #[test]
    fn rank_examples() {
        let mut probs = vec![0.01; 9];
        probs[4] = 0.92;
        assert_eq!(rank_of(&probs, 4).unwrap(), 9);
        let mut probs = vec![0.12; 9];
        probs[2] = 0.04;
        assert_eq!(rank_of(&probs, 2).unwrap(), 1);
        let uniform = vec![1.0 / 3.0; 3];
        assert_eq!(rank_of(&uniform, 0).unwrap(), 3);
        assert_eq!(rank_of(&uniform, 2).unwrap(), 1);
        assert!(matches!(rank_of(&uniform, 3), Err(ClassifierError::Label { .. })));
    }

    #[test]
    fn zero_head_is_uniform_and_empty_is_degenerate() {
        let mut m = model();
        m.zero_head();
        let p = m.predict(&line());
        assert!(p.probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(!p.degenerate);
        let e = m.predict(&VectorSketch::default());
        assert!(e.degenerate);
        assert_eq!(e.probs, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn predict_is_repeatable_and_matches_tape() {
        let m = model();
        let a = m.predict(&line());
        assert_eq!(a, m.predict(&line()));
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let tape = Tape::new();
        let loss = m.loss(&tape, &line(), 1).unwrap();
        assert!((tape.scalar_value(loss) + a.probs[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let m = model();
        m.save(&path).unwrap();
        let back = ClassifierModel::load(&path).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert_eq!(back.predict(&line()), m.predict(&line()));
    }

    fn tiny_corpus() -> Corpus {
        generate_toy(
            &ToyGenSpec {
                seed: 3,
                ..Default::default()
            },
            10,
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let corpus = tiny_corpus();
        let cfg = ClassifierTrainConfig {
            hidden: 8,
            layers: 1,
            epochs: 1,
            lr: 0.0,
            seed: 5,
        };
        let (m, report) = train_classifier(&corpus, &cfg, |_| {}).unwrap();
        let fresh = ClassifierModel::new(m.shape(), 5).unwrap();
        assert_eq!(m.params().flat_values(), fresh.params().flat_values());
        assert_eq!(report.epochs[0].test_accuracy, report.initial_test_accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus();
        let cfg = ClassifierTrainConfig {
            hidden: 8,
            layers: 1,
            epochs: 2,
            lr: 1e-2,
            seed: 5,
        };
        let (a, ra) = train_classifier(&corpus, &cfg, |_| {}).unwrap();
        let (b, rb) = train_classifier(&corpus, &cfg, |_| {}).unwrap();
        assert_eq!(a.params().flat_values(), b.params().flat_values());
        assert_eq!(ra, rb);
    }
}
