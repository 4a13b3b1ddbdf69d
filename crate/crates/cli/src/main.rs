mod config;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchlab::agent::{abstract_sketch, saliency, saliency_colors, AgentModel};
use sketchlab::classifier::{train_classifier, ClassifierModel};
use sketchlab::corpus::{derive_seed, generate_toy, load_corpus, Corpus, ShapeKind, Split};
use sketchlab::env::{read_trace, replay_episode, write_trace, RewardScheme};
use sketchlab::photo2sketch::{distort, photo_to_sketch, polylines_to_sketch, resample, trace, edge_style_corpus};
use sketchlab::raster::load_pgm;
use sketchlab::retrieval::{
    embed_raster, fuse_query, match_ranks, topk_accuracy, FusedQuery, Gallery, QueryDistances,
};
use sketchlab::sketch::{read_ndjson, render_svg, write_ndjson, SketchRecord, VectorSketch};
use sketchlab::trainer::{train_agent, write_curve_csv, TrainEvent};

use config::{resolve_seed, write_echo, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "sketchlab", version, about = "Stroke-level sketch abstraction toolkit")]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (falls back to the config, then SKETCHLAB_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled toy corpus as NDJSON.
    GenToy(GenToyArgs),
    /// Train the sequence classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Report classifier accuracy on a corpus.
    EvalClassifier(EvalClassifierArgs),
    /// Train the abstraction agent with REINFORCE.
    TrainAgent(TrainAgentArgs),
    /// Abstract every sketch of an NDJSON file.
    Abstract(AbstractArgs),
    /// Per-stroke saliency of one sketch, optionally as a colored SVG.
    Saliency(SaliencyArgs),
    /// Trace a PGM edge raster into vector strokes.
    Trace(TraceArgs),
    /// Apply random global and stroke-level distortions.
    Distort(InOutArgs),
    /// Resample strokes at fixed arc-length spacing.
    Resample(ResampleArgs),
    /// Edge raster to abstract sketch, with optional stage dumps.
    P2s(P2sArgs),
    /// Top-K sketch-to-edge-map retrieval with score fusion.
    SbirEval(SbirArgs),
    /// Recompute the rewards of an episode trace and compare.
    ReplayCheck(ReplayArgs),
}

#[derive(Args, Debug)]
struct GenToyArgs {
    /// Comma-separated shape names.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<ShapeKind>>,
    /// Sketches per class.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// NDJSON corpus files.
    #[arg(long = "data", required = true, num_args = 1..)]
    paths: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainClassifierArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV (epoch, mean_loss, test_accuracy).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalClassifierArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    classifier: PathBuf,
}

#[derive(Args, Debug)]
struct TrainAgentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<RewardScheme>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Episodes per update.
    #[arg(long = "N", alias = "batch")]
    batch: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from an existing agent checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Train on traced-and-resampled renderings of the corpus.
    #[arg(long)]
    edge_style: bool,
    #[arg(long)]
    out: PathBuf,
    /// Training curve CSV; defaults to `<out>.curve.csv`.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Dump every training episode as an NDJSON trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AbstractArgs {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    delta: f64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one SVG per abstracted sketch.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Record to analyse (0-based line among valid records).
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<u8>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InOutArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ResampleArgs {
    #[command(flatten)]
    io: InOutArgs,
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Args, Debug)]
struct P2sArgs {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    agent: PathBuf,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value_t = 5)]
    variants: usize,
    #[arg(long)]
    step: Option<f64>,
    /// Output NDJSON, one abstracted sketch per variant.
    #[arg(long)]
    out: PathBuf,
    /// Directory receiving NDJSON and SVG files for every stage.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SbirArgs {
    /// Directory of PGM edge maps; the file stem is the item id.
    #[arg(long)]
    gallery: PathBuf,
    /// NDJSON queries whose `id` names their gallery match.
    #[arg(long)]
    queries: PathBuf,
    /// Agent for multi-abstraction fusion; omit for single-query retrieval.
    #[arg(long)]
    agent: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_parser = |s: &str| s.parse::<sketchlab::retrieval::Fusion>())]
    fusion: Option<sketchlab::retrieval::Fusion>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
}

fn parse_scheme(s: &str) -> Result<RewardScheme, String> {
    match s {
        "basic" => Ok(RewardScheme::Basic),
        "ranked" => Ok(RewardScheme::Ranked),
        other => Err(format!("unknown scheme {other:?} (expected basic or ranked)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn out_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read_records(path: &Path) -> Result<Vec<SketchRecord>> {
    let (records, errors) = read_ndjson(path).with_context(|| format!("reading {}", path.display()))?;
    for e in &errors {
        eprintln!("warning: {}: {e}", path.display());
    }
    Ok(records)
}

fn load_data(paths: &[PathBuf], cfg: &RunConfig, seed: u64) -> Result<Corpus> {
    let (corpus, errors) = load_corpus(paths, cfg.data.per_class_cap, cfg.data.test_fraction, seed)?;
    for (file, e) in &errors {
        eprintln!("warning: {file}: {e}");
    }
    Ok(corpus)
}

fn write_svg(path: &Path, sketch: &VectorSketch, colors: Option<&[String]>) -> Result<()> {
    fs::write(path, render_svg(sketch, colors)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(cli.seed, cfg.seed, std::env::var("SKETCHLAB_SEED").ok().as_deref())?;
    cfg.apply_seed(seed);
    let args: Vec<String> = std::env::args().skip(1).collect();

    match cli.command {
        Command::GenToy(a) => {
            if let Some(classes) = a.classes {
                cfg.toy.classes = classes;
            }
            let corpus = generate_toy(&cfg.toy, a.n)?;
            write_echo(&out_dir(&a.out), "gen-toy", seed, &args, &cfg)?;
            write_ndjson(&a.out, &corpus.to_records())?;
            eprintln!(
                "wrote {} sketches ({} classes) to {}",
                corpus.items.len(),
                corpus.num_classes(),
                a.out.display()
            );
        }
        Command::TrainClassifier(a) => {
            let c = &mut cfg.classifier;
            c.hidden = a.hidden.unwrap_or(c.hidden);
            c.layers = a.layers.unwrap_or(c.layers);
            c.epochs = a.epochs.unwrap_or(c.epochs);
            c.lr = a.lr.unwrap_or(c.lr);
            let corpus = load_data(&a.data.paths, &cfg, seed)?;
            write_echo(&out_dir(&a.out), "train-classifier", seed, &args, &cfg)?;
            let mut rows = Vec::new();
            let (model, report) = train_classifier(&corpus, &cfg.classifier, |e| {
                eprintln!("epoch {} loss {:.4} test_acc {:.4}", e.epoch, e.mean_loss, e.test_accuracy);
                rows.push(format!("{},{:.6},{:.6}", e.epoch, e.mean_loss, e.test_accuracy));
            })?;
            model.save(&a.out)?;
            if let Some(m) = &a.metrics {
                let mut f = BufWriter::new(File::create(m)?);
                writeln!(f, "epoch,mean_loss,test_accuracy")?;
                for r in rows {
                    writeln!(f, "{r}")?;
                }
            }
            println!(
                "best test accuracy {:.4} at epoch {}",
                report.best_test_accuracy, report.best_epoch
            );
        }
        Command::EvalClassifier(a) => {
            let model = ClassifierModel::load(&a.classifier)?;
            let corpus = load_data(&a.data.paths, &cfg, seed)?;
            if corpus.num_classes() != model.num_classes() {
                bail!(
                    "corpus has {} classes but the classifier expects {}",
                    corpus.num_classes(),
                    model.num_classes()
                );
            }
            for (name, split) in [("train", Split::Train), ("test", Split::Test)] {
                let items: Vec<_> = corpus.items.iter().filter(|i| i.split == split).collect();
                let acc = model.accuracy(items.iter().map(|i| &i.sketch));
                println!("{name} accuracy {acc:.4} (n={})", items.len());
            }
        }
        Command::TrainAgent(a) => {
            if let Some(s) = a.scheme {
                cfg.reward.scheme = s;
            }
            cfg.reward.gamma = a.gamma.unwrap_or(cfg.reward.gamma);
            let t = &mut cfg.trainer;
            t.episodes = a.episodes.unwrap_or(t.episodes);
            t.batch = a.batch.unwrap_or(t.batch);
            t.lr = a.lr.unwrap_or(t.lr);
            t.workers = a.workers.unwrap_or(t.workers);
            cfg.reward.validate()?;
            cfg.trainer.validate()?;
            let classifier = ClassifierModel::load(&a.classifier)?;
            let mut corpus = load_data(&a.data.paths, &cfg, seed)?;
            if a.edge_style {
                corpus = edge_style_corpus(&corpus, 64, &cfg.p2s, derive_seed(seed, 0xED6E));
            }
            let mut agent = match &a.init {
                Some(p) => AgentModel::load(p)?,
                None => AgentModel::new(cfg.agent, seed)?,
            };
            write_echo(&out_dir(&a.out), "train-agent", seed, &args, &cfg)?;
            let mut trace_out = match &a.trace {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            };
            let mut io_err = None;
            let reward = cfg.reward.clone();
            let outcome = train_agent(&corpus, &classifier, &mut agent, &reward, &cfg.trainer, |ev| match ev {
                TrainEvent::Trajectory { episode, trajectory } => {
                    if let Some(w) = trace_out.as_mut() {
                        if let Err(e) = write_trace(w, &trajectory.to_trace(episode, &reward)) {
                            io_err.get_or_insert(e);
                        }
                    }
                }
                TrainEvent::Curve(p) => eprintln!(
                    "episode {} return {:.3} kept {:.3} eval_acc {:.4} eval_return {:.3}",
                    p.episode, p.mean_return, p.mean_kept_segments, p.eval_accuracy, p.eval_mean_return
                ),
            })?;
            if let Some(e) = io_err {
                return Err(e).context("writing trace");
            }
            if let Some(mut w) = trace_out {
                w.flush()?;
            }
            agent.save(&a.out)?;
            let curve_path = a.curve.unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".curve.csv");
                p.into()
            });
            let mut f = BufWriter::new(File::create(&curve_path)?);
            write_curve_csv(&mut f, &outcome.curve)?;
            f.flush()?;
            println!(
                "best eval return {:.4} at episode {} (initial {:.4})",
                outcome.best_eval_return, outcome.best_episode, outcome.initial_eval_return
            );
        }
        Command::Abstract(a) => {
            let agent = AgentModel::load(&a.agent)?;
            let records = read_records(&a.input)?;
            write_echo(&out_dir(&a.out), "abstract", seed, &args, &cfg)?;
            if let Some(dir) = &a.svg {
                fs::create_dir_all(dir)?;
            }
            let mut out = Vec::with_capacity(records.len());
            let (mut before, mut after) = (0usize, 0usize);
            for (i, rec) in records.into_iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                let abs = abstract_sketch(&agent, &rec.sketch, a.delta, &mut rng)
                    .with_context(|| format!("record {i}"))?;
                before += rec.sketch.len();
                after += abs.sketch.len();
                if let Some(dir) = &a.svg {
                    write_svg(&dir.join(format!("{i}.svg")), &abs.sketch, None)?;
                }
                out.push(SketchRecord {
                    sketch: abs.sketch,
                    core_strokes: None,
                    ..rec
                });
            }
            write_ndjson(&a.out, &out)?;
            println!("{} sketches, {before} -> {after} data-segments", out.len());
        }
        Command::Saliency(a) => {
            let agent = AgentModel::load(&a.agent)?;
            let records = read_records(&a.input)?;
            let Some(rec) = records.get(a.index) else {
                bail!("{} has no record {}", a.input.display(), a.index);
            };
            let values = saliency(&agent, &rec.sketch)?;
            let colors = saliency_colors(&values);
            println!("stroke,saliency,color");
            for (i, (v, c)) in values.iter().zip(&colors).enumerate() {
                println!("{i},{v:.6},{c}");
            }
            if let Some(svg) = &a.svg {
                write_echo(&out_dir(svg), "saliency", seed, &args, &cfg)?;
                write_svg(svg, &rec.sketch, Some(&colors))?;
            }
        }
        Command::Trace(a) => {
            if let Some(t) = a.threshold {
                cfg.p2s.threshold = t;
            }
            let raster = load_pgm(&a.edges)?;
            let lines = trace(&raster.binarize(cfg.p2s.threshold));
            let sketch = polylines_to_sketch(&lines);
            write_echo(&out_dir(&a.out), "trace", seed, &args, &cfg)?;
            write_ndjson(&a.out, &[SketchRecord::new(sketch.clone())])?;
            if let Some(svg) = &a.svg {
                write_svg(svg, &sketch, None)?;
            }
            println!("{} polylines, {} points", lines.len(), sketch.len());
        }
        Command::Distort(a) => {
            let records = read_records(&a.input)?;
            write_echo(&out_dir(&a.out), "distort", seed, &args, &cfg)?;
            let out = records
                .into_iter()
                .enumerate()
                .map(|(i, rec)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                    Ok(SketchRecord {
                        sketch: distort(&rec.sketch, &cfg.p2s.distortion, &mut rng)?,
                        ..rec
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_ndjson(&a.out, &out)?;
        }
        Command::Resample(a) => {
            cfg.p2s.step = a.step.unwrap_or(cfg.p2s.step);
            let records = read_records(&a.io.input)?;
            write_echo(&out_dir(&a.io.out), "resample", seed, &args, &cfg)?;
            let out = records
                .into_iter()
                .map(|rec| {
                    Ok(SketchRecord {
                        sketch: resample(&rec.sketch, cfg.p2s.step)?,
                        ..rec
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_ndjson(&a.io.out, &out)?;
        }
        Command::P2s(a) => {
            cfg.p2s.step = a.step.unwrap_or(cfg.p2s.step);
            let agent = AgentModel::load(&a.agent)?;
            let raster = load_pgm(&a.edges)?;
            write_echo(&out_dir(&a.out), "p2s", seed, &args, &cfg)?;
            if let Some(dir) = &a.dump_stages {
                fs::create_dir_all(dir)?;
            }
            let mut outputs = Vec::new();
            for m in 1..=a.variants {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, m as u64));
                let (stages, sketch) = photo_to_sketch(&raster, &agent, a.delta, &cfg.p2s, &mut rng)?;
                if let Some(dir) = &a.dump_stages {
                    if m == 1 {
                        write_ndjson(dir.join("traced.ndjson"), &[SketchRecord::new(stages.traced.clone())])?;
                        write_svg(&dir.join("traced.svg"), &stages.traced, None)?;
                    }
                    for (name, s) in [
                        ("distorted", &stages.distorted),
                        ("simplified", &stages.simplified),
                        ("abstract", &sketch),
                    ] {
                        write_ndjson(dir.join(format!("{name}_{m}.ndjson")), &[SketchRecord::new(s.clone())])?;
                        write_svg(&dir.join(format!("{name}_{m}.svg")), s, None)?;
                    }
                }
                eprintln!(
                    "variant {m}: traced {} -> simplified {} -> abstract {} data-segments",
                    stages.traced.len(),
                    stages.simplified.len(),
                    sketch.len()
                );
                outputs.push(SketchRecord {
                    id: Some(format!("variant-{m}")),
                    ..SketchRecord::new(sketch)
                });
            }
            write_ndjson(&a.out, &outputs)?;
        }
        Command::SbirEval(a) => {
            if let Some(k) = a.k {
                cfg.retrieval.k = k;
            }
            if let Some(f) = a.fusion {
                cfg.retrieval.fusion = f;
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&a.gallery)
                .with_context(|| format!("reading {}", a.gallery.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
                .collect();
            files.sort();
            let gallery = Gallery::new(
                files
                    .iter()
                    .map(|p| {
                        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                        Ok(embed_raster(&load_pgm(p)?, id).with_context(|| p.display().to_string())?)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?;
            if gallery.is_empty() {
                bail!("no .pgm files in {}", a.gallery.display());
            }
            let agent = a.agent.as_deref().map(AgentModel::load).transpose()?;
            let records = read_records(&a.queries)?;
            write_echo(&out_dir(&a.out), "sbir-eval", seed, &args, &cfg)?;
            let mut truth = HashMap::new();
            let mut queries: Vec<QueryDistances> = Vec::new();
            for (i, rec) in records.iter().enumerate() {
                let id = rec.id.clone().with_context(|| format!("query {i} has no id"))?;
                let qid = format!("{i}:{id}");
                truth.insert(qid.clone(), id);
                let fq = match &agent {
                    Some(ag) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                        fuse_query(&rec.sketch, qid, ag, &cfg.retrieval.deltas, &mut rng)?
                    }
                    None => FusedQuery::single(&rec.sketch, qid)?,
                };
                queries.push(fq.distances(&gallery, cfg.retrieval.fusion)?);
            }
            let ranks = match_ranks(&queries, &gallery, &truth)?;
            let mut f = BufWriter::new(File::create(&a.out)?);
            writeln!(f, "kind,key,value")?;
            for (q, r) in queries.iter().zip(&ranks) {
                writeln!(f, "rank,{},{}", q.id, r + 1)?;
            }
            for &k in &cfg.retrieval.k {
                let acc = topk_accuracy(&queries, &gallery, &truth, k)?;
                writeln!(f, "top,{k},{acc:.6}")?;
                println!("top-{k} accuracy {acc:.4}");
            }
            f.flush()?;
        }
        Command::ReplayCheck(a) => {
            let classifier = ClassifierModel::load(&a.classifier)?;
            let file = File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
            let traces = read_trace(BufReader::new(file))?;
            for t in &traces {
                if let Some(m) = replay_episode(t, &classifier)? {
                    bail!("reward mismatch in episode {} at step {}: {}", m.episode, m.t, m.detail);
                }
            }
            println!("rewards match ({} episodes)", traces.len());
        }
    }
    Ok(())
}
