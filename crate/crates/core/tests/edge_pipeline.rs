//! End-to-end toy run: edge raster in, abstracted sketch out, checked by the
//! toy classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sketchlab::agent::{AgentConfig, AgentModel};
use sketchlab::classifier::{train_classifier, ClassifierTrainConfig};
use sketchlab::corpus::{derive_seed, generate_toy, Corpus, ToyGenSpec};
use sketchlab::env::RewardConfig;
use sketchlab::photo2sketch::{edge_style_corpus, photo_to_sketch, P2sConfig};
use sketchlab::raster::RasterImage;
use sketchlab::trainer::{train_agent, TrainerConfig};

fn square_edges(size: i64, lo: i64, hi: i64) -> RasterImage {
    let mut img = RasterImage::new(size as usize, size as usize);
    for (a, b) in [((lo, lo), (hi, lo)), ((hi, lo), (hi, hi)), ((hi, hi), (lo, hi)), ((lo, hi), (lo, lo))] {
        img.draw_line(a.0, a.1, b.0, b.1, 255);
    }
    img
}

#[test]
fn fine_tuned_agent_keeps_a_traced_square_recognizable() {
    let spec = ToyGenSpec {
        seed: 3,
        ..ToyGenSpec::default()
    };
    let corpus = generate_toy(&spec, 60).unwrap();
    let square = corpus.class_names.iter().position(|c| c == "square").unwrap();
    let clf_cfg = ClassifierTrainConfig {
        hidden: 32,
        epochs: 6,
        seed: 3,
        ..ClassifierTrainConfig::default()
    };
    let p2s = P2sConfig::default();
    let edge_corpus = edge_style_corpus(&corpus, 64, &p2s, derive_seed(3, 0xED6E));
    // the classifier sees both clean and edge-style renderings
    let mixed = Corpus {
        class_names: corpus.class_names.clone(),
        items: corpus.items.iter().chain(&edge_corpus.items).cloned().collect(),
    };
    let (clf, _) = train_classifier(&mixed, &clf_cfg, |_| {}).unwrap();
    let agent_cfg = AgentConfig {
        hidden: 16,
        mlp_hidden: 32,
        window_radius: 0,
    };
    let mut agent = AgentModel::new(agent_cfg, 3).unwrap();
    let reward = RewardConfig::ranked();
    let base = TrainerConfig {
        lr: 3e-4,
        eval_every: 200,
        eval_size: 30,
        seed: 3,
        ..TrainerConfig::default()
    };
    let pre = TrainerConfig {
        episodes: 1000,
        ..base.clone()
    };
    train_agent(&corpus, &clf, &mut agent, &reward, &pre, |_| {}).unwrap();
    let tune = TrainerConfig {
        episodes: 400,
        seed: 4,
        ..base
    };
    train_agent(&edge_corpus, &clf, &mut agent, &reward, &tune, |_| {}).unwrap();

    let mut hits = 0;
    let variants = 5;
    for (lo, hi) in [(8, 56), (14, 50)] {
        let edges = square_edges(64, lo, hi);
        for m in 0..variants {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(11, m));
            let (stages, out) = photo_to_sketch(&edges, &agent, 0.0, &p2s, &mut rng).unwrap();
            assert!(stages.simplified.len() < stages.traced.len());
            let p = clf.predict(&out);
            println!("square {lo}-{hi} variant {m}: {} of {} points, predicted {}", out.len(), stages.simplified.len(), p.predicted);
            hits += usize::from(!p.degenerate && p.predicted == square);
        }
    }
    assert_eq!(hits, 2 * variants as usize, "only {hits} of {} abstractions read as square", 2 * variants);

    // the classifier does not simply call every traced outline a square
    let circle = corpus.class_names.iter().position(|c| c == "circle").unwrap();
    let mut ring = RasterImage::new(64, 64);
    let pts: Vec<(i64, i64)> = (0..=48)
        .map(|i| {
            let a = i as f64 / 48.0 * std::f64::consts::TAU;
            ((32.0 + 22.0 * a.cos()).round() as i64, (32.0 + 22.0 * a.sin()).round() as i64)
        })
        .collect();
    for w in pts.windows(2) {
        ring.draw_line(w[0].0, w[0].1, w[1].0, w[1].1, 255);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (stages, _) = photo_to_sketch(&ring, &agent, 0.0, &p2s, &mut rng).unwrap();
    assert_eq!(clf.predict(&stages.simplified).predicted, circle);
}
