use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};

use mmad_core::fusion::Variant;
use mmad_core::io::container::{anomaly_map_tensor, read_tensor, write_atomic, write_tensor};
use mmad_core::io::ledger::{self, LedgerEntry};
use mmad_core::io::{RunConfig, SampleStore, Split};
use mmad_core::metrics::measure_throughput;
use mmad_core::numcore::AnomalyMap;
use mmad_core::pipeline::{self, Inference, Mode};
use mmad_core::polyprep::Point;
use mmad_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mmad", version, about = "Multimodal anomaly detection: train, score, evaluate")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Modality mode: 2d3d, 2d or 3d.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Fusion variant: full or c1..c6.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// AUPRO integration limit; repeat for several.
    #[arg(long = "fpr-limit", global = true)]
    fpr_limit: Vec<f64>,
    /// Output directory for artifacts and the ledger.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Point-cloud scans to a 3D-only chunk dataset.
    Preprocess {
        /// Scans as `[N, 3]` tensor containers or whitespace-separated `.xyz` text.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Generate a synthetic paired dataset.
    Synth,
    /// Train the networks the mode needs on the training split.
    Train,
    /// Score the test split and write anomaly maps.
    Infer,
    /// Compute I-AUROC, P-AUROC and AUPRO from inference outputs.
    Evaluate,
    /// Compare every fusion variant on the test split.
    Ablate,
    /// Measure inference throughput and peak memory.
    Bench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Preprocess { .. } => "preprocess",
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Bench => "bench",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(v) = cli.variant {
        cfg.fusion.variant = v;
    }
    if !cli.fpr_limit.is_empty() {
        cfg.metrics.fpr_limits = cli.fpr_limit.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

fn model_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("model")
}

fn load_model(cfg: &RunConfig) -> Result<pipeline::ModelBundle> {
    let bundle = pipeline::load_checkpoint(&model_dir(cfg))?;
    if bundle.mode != cfg.mode {
        return Err(Error::Config(format!("checkpoint was trained for mode {} but mode {} was requested", bundle.mode, cfg.mode)));
    }
    Ok(bundle)
}

fn read_points(path: &Path) -> Result<Vec<Point>> {
    if path.extension().is_some_and(|e| e == "xyz") {
        let text = std::fs::read_to_string(path)?;
        let mut pts = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')) {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Schema { path: format!("{}:{}", path.display(), i + 1), msg: format!("{e}") })?;
            let [x, y, z] = v[..] else {
                return Err(Error::Schema { path: format!("{}:{}", path.display(), i + 1), msg: "expected three coordinates".into() });
            };
            pts.push([x, y, z]);
        }
        Ok(pts)
    } else {
        let t = read_tensor(path)?;
        if t.dims.len() != 2 || t.dims[1] != 3 {
            return Err(Error::Contract(format!("{}: point tensor must be [N, 3], got {:?}", path.display(), t.dims)));
        }
        Ok(t.to_f64().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

struct Outcome {
    metrics: Map<String, Value>,
    artifacts: Vec<String>,
}

fn run(cmd: &Command, cfg: &RunConfig) -> Result<Outcome> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut metrics = Map::new();
    let mut artifacts = Vec::new();
    match cmd {
        Command::Preprocess { inputs } => {
            let scans = inputs
                .iter()
                .map(|p| {
                    let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scan".into());
                    Ok((id, read_points(p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = cfg.manifest_path().parent().map(Path::to_path_buf).unwrap_or_else(|| out.join("data"));
            let m = pipeline::write_polyprep_dataset(&dir, &scans, cfg)?;
            metrics.insert("train_chunks".into(), m.records(Split::Train).count().into());
            metrics.insert("test_chunks".into(), m.records(Split::Test).count().into());
            artifacts.push(dir.join("manifest.jsonl").display().to_string());
        }
        Command::Synth => {
            let dir = cfg.manifest_path().parent().map(Path::to_path_buf).unwrap_or_else(|| out.join("data"));
            let m = pipeline::write_synth_dataset(&dir, cfg)?;
            metrics.insert("train_samples".into(), m.records(Split::Train).count().into());
            metrics.insert("test_samples".into(), m.records(Split::Test).count().into());
            artifacts.push(dir.join("manifest.jsonl").display().to_string());
        }
        Command::Train => {
            let store = SampleStore::open(&cfg.manifest_path())?;
            let samples = store.train_view().load_all()?;
            let (bundle, summary) = pipeline::train(&samples, cfg)?;
            pipeline::save_checkpoint(&model_dir(cfg), &bundle)?;
            write_json(&out.join("train_summary.json"), &summary)?;
            metrics.insert("parameters".into(), bundle.num_params().into());
            metrics.insert("train_samples".into(), samples.len().into());
            for (k, v) in summary.final_losses() {
                metrics.insert(format!("final_loss_{k}"), v.into());
            }
            artifacts.push(model_dir(cfg).display().to_string());
        }
        Command::Infer => {
            let bundle = load_model(cfg)?;
            let test = SampleStore::open(&cfg.manifest_path())?.load_split(Split::Test)?;
            let results = pipeline::infer_all(&bundle, &test, &cfg.fusion)?;
            let dir = out.join("maps");
            let mut lines = String::new();
            for (r, s) in results.iter().zip(&test) {
                write_tensor(&dir.join(format!("{}.cmdr", r.id)), &anomaly_map_tensor(&r.map))?;
                lines.push_str(&json!({"id": r.id, "score": r.score, "anomalous": s.anomalous}).to_string());
                lines.push('\n');
            }
            write_atomic(&out.join("scores.jsonl"), lines.as_bytes())?;
            metrics.insert("samples".into(), results.len().into());
            metrics.insert("variant".into(), cfg.fusion.variant.name().into());
            artifacts.push(out.join("scores.jsonl").display().to_string());
            artifacts.push(dir.display().to_string());
        }
        Command::Evaluate => {
            let test = SampleStore::open(&cfg.manifest_path())?.load_split(Split::Test)?;
            let text = std::fs::read_to_string(out.join("scores.jsonl"))?;
            let mut scores = std::collections::HashMap::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let v: Value = serde_json::from_str(line)
                    .map_err(|e| Error::Schema { path: format!("scores.jsonl line {}", i + 1), msg: e.to_string() })?;
                let (Some(id), Some(score)) = (v["id"].as_str(), v["score"].as_f64()) else {
                    return Err(Error::Schema { path: format!("scores.jsonl line {}", i + 1), msg: "needs id and score".into() });
                };
                scores.insert(id.to_owned(), score);
            }
            let results = test
                .iter()
                .map(|s| {
                    let score = *scores
                        .get(&s.id)
                        .ok_or_else(|| Error::Schema { path: "scores.jsonl".into(), msg: format!("no score for `{}`", s.id) })?;
                    let t = read_tensor(&out.join("maps").join(format!("{}.cmdr", s.id)))?;
                    let [h, w] = t.dims[..] else {
                        return Err(Error::Contract(format!("anomaly map of `{}` must have rank 2", s.id)));
                    };
                    let valid = s.f3.as_ref().or(s.f2.as_ref()).map(|f| f.validity().to_vec()).unwrap_or_default();
                    let map = AnomalyMap::new(h as usize, w as usize, t.to_f64(), valid)?;
                    Ok(Inference { id: s.id.clone(), map, score })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = pipeline::evaluate(&results, &test, &cfg.metrics.fpr_limits)?;
            write_json(&out.join("metrics.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report.to_metrics()).expect("json serializes"));
            metrics = report.to_metrics();
            artifacts.push(out.join("metrics.json").display().to_string());
        }
        Command::Ablate => {
            let bundle = load_model(cfg)?;
            let test = SampleStore::open(&cfg.manifest_path())?.load_split(Split::Test)?;
            let rows = pipeline::ablate(&bundle, &test, &cfg.fusion, &cfg.metrics.fpr_limits)?;
            let table = pipeline::format_ablation(&rows);
            print!("{table}");
            write_atomic(&out.join("ablation.txt"), table.as_bytes())?;
            write_json(&out.join("ablation.json"), &rows)?;
            for r in &rows {
                metrics.insert(r.variant.name().into(), Value::Object(r.report.to_metrics()));
            }
            artifacts.push(out.join("ablation.json").display().to_string());
        }
        Command::Bench => {
            let bundle = load_model(cfg)?;
            let test = SampleStore::open(&cfg.manifest_path())?.load_split(Split::Test)?;
            let t = measure_throughput(&test, |s| pipeline::infer(&bundle, s, &cfg.fusion).map(drop))?;
            write_json(&out.join("bench.json"), &t)?;
            println!("{}", serde_json::to_string_pretty(&t).expect("json serializes"));
            metrics.insert("fps".into(), t.fps.into());
            metrics.insert("mean_seconds".into(), t.mean_seconds.into());
            metrics.insert("samples".into(), t.samples.into());
            metrics.insert("peak_memory_bytes".into(), t.peak_memory_bytes.into());
            metrics.insert("parameters".into(), bundle.num_params().into());
            artifacts.push(out.join("bench.json").display().to_string());
        }
    }
    Ok(Outcome { metrics, artifacts })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let result = resolve_config(&cli).and_then(|cfg| {
        let outcome = run(&cli.command, &cfg)?;
        let entry = LedgerEntry::new(cli.command.name(), &cfg, outcome.metrics, outcome.artifacts, start.elapsed().as_secs_f64());
        ledger::append(&cfg.out_dir, &entry)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "command": cli.command.name(), "message": e.to_string()}));
            ExitCode::from(2)
        }
    }
}
