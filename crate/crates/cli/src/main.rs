use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignformer::eval::{evaluate_detections, ground_truths, EvalReport, ScoredDetection};
use alignformer::scenegen::{self, ClassSet, Scene};
use alignformer::train;
use alignformer::{eval, inspect, Config, Error};
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndtensor::checkpoint;
use serde_json::{json, Value};

const THREADS_ENV: &str = "ALIGNFORMER_THREADS";

#[derive(Parser)]
#[command(name = "alignformer", version, about = "Weakly-supervised HOI detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file layered over the defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test JSONL splits and a vocab file.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Training scenes; val and test get a fifth of this each.
        #[arg(long, default_value_t = 500)]
        scenes: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes metrics.csv and final/ (and best/) checkpoints.
    Train {
        /// Directory produced by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Training seed (init, noise, shuffling).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Split scored during training.
        #[arg(long, value_enum, default_value_t = Split::Val)]
        eval_split: Split,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint (or the ground truth itself) on a dataset file.
    Eval {
        #[arg(long, value_name = "DIR", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Report JSON path; a CSV summary is written next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// Use the ground truth as detections with score 1.
        #[arg(long)]
        oracle: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Dump attention, alignment and detections for one scene.
    Inspect {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Scene id.
        #[arg(long)]
        scene: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Weak,
    Strong,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Val,
    Test,
    None,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn require(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

fn resolve(args: &ConfigArgs, extra: &[String]) -> anyhow::Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => {
            require(p)?;
            Config::from_file(p)?
        }
        None => Config::default(),
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        cfg.train.threads = v
            .parse()
            .ok()
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer (got `{v}`)")))?;
    }
    let all: Vec<&String> = args.overrides.iter().chain(extra).collect();
    Ok(cfg.with_overrides(&all)?)
}

fn meta(command: &str, cfg: &Config) -> Value {
    json!({ "command": command, "seed": cfg.seed, "config": cfg.to_value() })
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn mkdir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn class_list(set: &ClassSet) -> Vec<String> {
    set.iter().map(|(v, n)| format!("{v}:{n}")).collect()
}

fn gen_data(out: &Path, seed: Option<u64>, scenes: usize, args: &ConfigArgs) -> anyhow::Result<()> {
    if scenes == 0 {
        return Err(usage("empty dataset: --scenes must be positive"));
    }
    let extra: Vec<String> = seed.map(|s| format!("data.seed={s}")).into_iter().collect();
    let mut cfg = resolve(args, &extra)?;
    cfg.sync_model_to_data();
    let held_out = (scenes / 5).max(1);
    let splits = [("train", 0, scenes), ("val", scenes, held_out), ("test", scenes + held_out, held_out)];
    mkdir(out)?;
    let mut train_set = Vec::new();
    for (name, first, count) in splits {
        let data = scenegen::generate_corpus(&cfg.data, first as u64, count)?;
        let mut m = meta("gen-data", &cfg);
        m["split"] = json!(name);
        scenegen::write_dataset_with_meta(&data, &out.join(format!("{name}.jsonl")), Some(m))?;
        let n_int: usize = data.iter().map(|s| s.interactions.len()).sum();
        println!("{name}: {count} scenes, {n_int} interactions");
        if name == "train" {
            train_set = data;
        }
    }
    let (rare, nonrare) = scenegen::split_rare(&train_set, &cfg.data.vocab);
    let counts: serde_json::Map<String, Value> = scenegen::class_counts(&train_set)
        .into_iter()
        .map(|((v, n), c)| (format!("{v}:{n}"), json!(c)))
        .collect();
    let vocab = json!({
        "meta": meta("gen-data", &cfg),
        "vocab": cfg.data.vocab,
        "train_class_counts": counts,
        "rare": class_list(&rare),
        "nonrare": class_list(&nonrare),
    });
    write(&out.join("vocab.json"), &pretty(&vocab))?;
    println!("rare classes: {}", class_list(&rare).join(" "));
    println!("non-rare classes: {}", class_list(&nonrare).join(" "));
    Ok(())
}

/// Reads a dataset file and the config it was generated with.
fn load_dataset(path: &Path) -> anyhow::Result<(Vec<Scene>, Option<Config>)> {
    require(path)?;
    let scenes = scenegen::read_dataset(path)?;
    let cfg = match scenegen::read_dataset_meta(path)? {
        Some(m) => Some(Config::from_value(m["config"].clone()).context("dataset metadata")?),
        None => None,
    };
    Ok((scenes, cfg))
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    data: &Path,
    out: &Path,
    mode: Option<ModeArg>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    eval_split: Split,
    args: &ConfigArgs,
) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(m) = mode {
        extra.push(format!("train.mode={}", if matches!(m, ModeArg::Weak) { "weak" } else { "strong" }));
    }
    extra.extend(seed.map(|s| format!("seed={s}")));
    extra.extend(epochs.map(|e| format!("train.epochs={e}")));
    extra.extend(lr.map(|l| format!("train.optimizer.lr={l}")));
    let mut cfg = resolve(args, &extra)?;

    let (train_set, data_cfg) = load_dataset(&data.join("train.jsonl"))?;
    if let Some(d) = data_cfg {
        cfg.data = d.data;
    }
    cfg.sync_model_to_data();
    cfg.validate()?;
    let eval_set = match eval_split {
        Split::Val => Some(load_dataset(&data.join("val.jsonl"))?.0),
        Split::Test => Some(load_dataset(&data.join("test.jsonl"))?.0),
        Split::None => None,
    };

    mkdir(out)?;
    let outcome = train::train(&cfg, &train_set, eval_set.as_deref(), &mut |row| {
        let m = row.map_full.map(|m| format!(" map_full {m}")).unwrap_or_default();
        eprintln!("epoch {} total {} aligned {}{m}", row.epoch, row.total, row.aligned_mean);
    })?;
    if outcome.warnings > 0 {
        eprintln!("{} target labels had no matching detection", outcome.warnings);
    }
    let (rare, _) = scenegen::split_rare(&train_set, &cfg.data.vocab);
    let mut m = meta("train", &cfg);
    m["rare_classes"] = json!(rare);
    train::write_metrics(&out.join("metrics.csv"), &outcome.metrics, &m)?;

    let ckpt_meta = |kind: &str, epoch: usize| {
        let mut c = m.clone();
        c["checkpoint"] = json!(kind);
        c["epoch"] = json!(epoch);
        c
    };
    checkpoint::save(&out.join("final"), &outcome.params, ckpt_meta("final", cfg.train.epochs))?;
    if let Some((epoch, map, params)) = &outcome.best {
        checkpoint::save(&out.join("best"), params, ckpt_meta("best", *epoch))?;
        println!("best map_full {map} at epoch {epoch}");
    }
    if let Some(r) = &outcome.final_report {
        print_report(r);
    }
    let last = outcome.metrics.last().expect("at least one epoch");
    println!("final total {} aligned_mean {}", last.total, last.aligned_mean);
    Ok(())
}

fn print_report(r: &EvalReport) {
    let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into());
    println!("map_full {}", r.map_full);
    println!("map_rare {}", o(r.map_rare));
    println!("map_nonrare {}", o(r.map_nonrare));
}

fn load_checkpoint(dir: &Path) -> anyhow::Result<(ndtensor::ParameterStore<f32>, Value, Config)> {
    require(dir)?;
    let (params, m) = checkpoint::load(dir)?;
    let cfg = Config::from_value(m["config"].clone()).context("checkpoint metadata")?;
    Ok((params, m, cfg))
}

fn rare_from_meta(m: &Value) -> anyhow::Result<ClassSet> {
    Ok(serde_json::from_value(m["rare_classes"].clone()).unwrap_or_default())
}

fn run_eval(
    ckpt: Option<&Path>,
    data: &Path,
    out: &Path,
    top_k: Option<usize>,
    oracle: bool,
    overrides: &[String],
) -> anyhow::Result<()> {
    let (scenes, data_cfg) = load_dataset(data)?;
    let (params, cmeta, mut cfg) = match ckpt {
        Some(dir) if !oracle => {
            let (p, m, c) = load_checkpoint(dir)?;
            (Some(p), m, c)
        }
        _ => (None, Value::Null, data_cfg.clone().unwrap_or_default()),
    };
    let mut extra = overrides.to_vec();
    extra.extend(top_k.map(|k| format!("eval.top_k={k}")));
    cfg = cfg.with_overrides(&extra)?;
    let vocab = data_cfg.map(|d| d.data.vocab).unwrap_or_else(|| cfg.data.vocab.clone());
    let rare = match params {
        Some(_) => rare_from_meta(&cmeta)?,
        None => scenegen::split_rare(&scenes, &vocab).0,
    };

    let report = match &params {
        Some(p) => {
            if cfg.model.num_verbs != vocab.num_verbs || cfg.model.num_nouns != vocab.num_nouns {
                return Err(Error::VocabMismatch(format!(
                    "checkpoint has {} verbs/{} nouns, dataset {}/{}",
                    cfg.model.num_verbs, cfg.model.num_nouns, vocab.num_verbs, vocab.num_nouns
                ))
                .into());
            }
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for s in &scenes {
                let pred = alignformer::model::predict(&cfg.model, p, &s.grid)?;
                dets.extend(eval::detections_from_predictions(s.scene_id, &pred, &cfg.eval));
                gts.extend(ground_truths(s));
            }
            evaluate_detections(dets, &gts, &rare, scenes.len(), &cfg.eval)?
        }
        None => {
            let gts: Vec<_> = scenes.iter().flat_map(ground_truths).collect();
            let dets = gts
                .iter()
                .enumerate()
                .map(|(k, g)| ScoredDetection {
                    scene_id: g.scene_id,
                    human: g.human,
                    object: g.object,
                    verb: g.verb,
                    noun: g.noun,
                    score: 1.0,
                    emission: k,
                })
                .collect();
            evaluate_detections(dets, &gts, &rare, scenes.len(), &cfg.eval)?
        }
    };

    let mut m = meta("eval", &cfg);
    m["oracle"] = json!(params.is_none());
    write(out, &pretty(&json!({ "meta": m, "report": report })))?;
    let csv = format!("# {m}\n{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    write(&out.with_extension("csv"), &csv)?;
    print_report(&report);
    Ok(())
}

fn run_inspect(ckpt: &Path, data: &Path, scene: u64, out: &Path) -> anyhow::Result<()> {
    let (params, _, cfg) = load_checkpoint(ckpt)?;
    let (scenes, _) = load_dataset(data)?;
    let s = scenes
        .iter()
        .find(|s| s.scene_id == scene)
        .ok_or_else(|| usage(format!("scene {scene} not in {}", data.display())))?;
    let dump = inspect::inspect(&cfg, &params, s)?;
    write(out, &pretty(&json!({ "meta": meta("inspect", &cfg), "inspection": dump })))?;
    println!(
        "scene {scene}: {} targets, {} detections",
        dump.targets.len(),
        dump.detections.len()
    );
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use ndtensor::TensorError as T;
    match e.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Malformed { .. }) => 3,
        Some(Error::NonFiniteLoss { .. } | Error::Tensor(T::NonFinite(_))) => 4,
        Some(Error::Tensor(T::Io(_) | T::Checkpoint(_))) => 3,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { out, seed, scenes, cfg } => gen_data(out, *seed, *scenes, cfg),
        Command::Train { data, out, mode, seed, epochs, lr, eval_split, cfg } => {
            run_train(data, out, *mode, *seed, *epochs, *lr, *eval_split, cfg)
        }
        Command::Eval { checkpoint, data, out, top_k, oracle, overrides } => {
            run_eval(checkpoint.as_deref(), data, out, *top_k, *oracle, overrides)
        }
        Command::Inspect { checkpoint, data, scene, out } => run_inspect(checkpoint, data, *scene, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
