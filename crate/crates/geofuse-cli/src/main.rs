//! Command-line front end: dataset generation, spatial splitting, training,
//! evaluation, ablation sweeps, and analysis reports.
//!
//! Every command writes its artifacts under an output directory with a
//! `manifest.json` at the root recording the effective configuration, input
//! content hashes, every artifact path, and per-phase timings. With the same
//! inputs, configuration, and seeds the artifacts are byte-identical across
//! reruns (timings in the manifest naturally vary).
//!
//! `--deterministic` forces a single worker thread; otherwise the
//! `GEOFUSE_THREADS` environment variable caps the worker pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use geofuse::dataset::load_samples;
use geofuse::encoders::load_store;
use geofuse::eval::{
    bins_to_csv, effective_range, groups_to_csv, report_to_csv, similarity_vs_distance,
};
use geofuse::fusion::{load_checkpoint, save_checkpoint, ModalityMode, PoolMode};
use geofuse::geo::{block_split, build_index, knn_distance_stats, GeoPoint, Split};
use geofuse::locenc::{LocEncConfig, LocEncKind};
use geofuse::pipeline::{
    attention_for_split, evaluate_on_split, load_dir, prepare, run_one, ModelSpec, PrepConfig,
    RawData, SelectionPolicy,
};
use geofuse::synth::{gen_dataset, SynthConfig};
use geofuse::train::{metrics_to_csv, TrainConfig};

#[derive(Parser)]
#[command(
    name = "geofuse",
    version,
    about = "Spatial-context multimodal regression over geolocated images and text"
)]
struct Cli {
    /// Run on a single worker thread (fully serial schedule).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON config file.
    Synth(SynthArgs),
    /// Assign samples to spatially blocked train/val/test splits.
    Split(SplitArgs),
    /// Train one model per seed; write metrics, test reports, checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Sweep one axis across seeds, resumably: completed cells are skipped.
    Ablate(AblateArgs),
    /// Dataset and model analysis reports.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file deserializing into the generator configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory containing samples.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000.0)]
    block_size_m: f64,
    /// Train,val,test fractions.
    #[arg(long, value_parser = parse_fractions, default_value = "0.7,0.15,0.15")]
    fractions: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Options shared by `train` and `ablate`.
#[derive(Args, Clone)]
struct CommonTrainOpts {
    /// Neighbours per context; 0 uses the origin location alone.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Sentences kept per location.
    #[arg(long, default_value_t = 4)]
    j: usize,
    /// Sentence selection policy: topj or random.
    #[arg(long, value_parser = parse_selection, default_value = "topj")]
    text_selection: SelectionPolicy,
    /// Location encoding kind.
    #[arg(long, value_parser = parse_locenc, default_value = "polar")]
    locenc: LocEncKind,
    /// Width of the location encoding vector.
    #[arg(long, default_value_t = 512)]
    loc_dim: usize,
    /// Token drop probability during training.
    #[arg(long, default_value_t = 0.3)]
    mask: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Token modalities: text+images, images, text, or text+1image.
    #[arg(long, value_parser = parse_modality, default_value = "text+images")]
    modality: ModalityMode,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed_list: Vec<u64>,
    #[arg(long, default_value_t = 20_000.0)]
    block_size_m: f64,
    #[arg(long, value_parser = parse_fractions, default_value = "0.7,0.15,0.15")]
    fractions: [f64; 3],
    #[arg(long, default_value_t = 64)]
    token_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ff_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Sequence pooling: cls or mean.
    #[arg(long, value_parser = parse_pool, default_value = "cls")]
    pool: PoolMode,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (samples.jsonl, images.gfeb, sentences.gfeb, variables.json).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for artifacts and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: CommonTrainOpts,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint written by `train` or `ablate`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    #[arg(long, value_parser = parse_modality, default_value = "text+images")]
    modality: ModalityMode,
    #[arg(long, value_parser = parse_selection, default_value = "topj")]
    text_selection: SelectionPolicy,
    #[arg(long, default_value_t = 20_000.0)]
    block_size_m: f64,
    #[arg(long, value_parser = parse_fractions, default_value = "0.7,0.15,0.15")]
    fractions: [f64; 3],
    /// Seed of the preparation whose split the model was trained against.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One axis: `k=0,1,2,4,8,10,16`, `locenc=all` (or a comma list), or
    /// `text=random:4,topj:4` as selection:j pairs.
    #[arg(long)]
    sweep: String,
    #[command(flatten)]
    opts: CommonTrainOpts,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Report: knn-stats, similarity, or attention.
    #[arg(long)]
    what: String,
    /// knn-stats: deepest neighbour rank to profile.
    #[arg(long, default_value_t = 16)]
    k_max: usize,
    /// similarity: lag width in metres.
    #[arg(long, default_value_t = 100.0)]
    lag_m: f64,
    /// similarity: largest pair distance considered.
    #[arg(long, default_value_t = 1500.0)]
    max_m: f64,
    /// similarity: pair budget per lag.
    #[arg(long, default_value_t = 2000)]
    max_pairs: usize,
    /// similarity: which store to profile (images or sentences).
    #[arg(long, default_value = "images")]
    store: String,
    /// attention: distance bin width in metres.
    #[arg(long, default_value_t = 100.0)]
    bin_m: f64,
    /// attention: checkpoint to inspect.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_parser = parse_modality, default_value = "text+images")]
    modality: ModalityMode,
    #[arg(long, value_parser = parse_selection, default_value = "topj")]
    text_selection: SelectionPolicy,
    #[arg(long, default_value_t = 20_000.0)]
    block_size_m: f64,
    #[arg(long, value_parser = parse_fractions, default_value = "0.7,0.15,0.15")]
    fractions: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_locenc(s: &str) -> Result<LocEncKind, String> {
    s.parse().map_err(|_| {
        format!(
            "unknown location encoding '{s}'; expected one of: none, rank, learnable, \
             coordinates, distance, polar"
        )
    })
}

fn parse_modality(s: &str) -> Result<ModalityMode, String> {
    s.parse().map_err(|_| {
        format!("unknown modality '{s}'; expected text+images, images, text, or text+1image")
    })
}

fn parse_selection(s: &str) -> Result<SelectionPolicy, String> {
    s.parse()
        .map_err(|_| format!("unknown selection policy '{s}'; expected topj or random"))
}

fn parse_pool(s: &str) -> Result<PoolMode, String> {
    s.parse().map_err(|_| format!("unknown pooling '{s}'; expected cls or mean"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|_| format!("unknown split '{s}'; expected train, val, or test"))
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("fractions need three comma-separated values, got '{s}'"));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| format!("bad fraction '{part}'"))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest plumbing.
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunManifest {
    command: String,
    /// Effective configuration after defaults and overrides.
    config: serde_json::Value,
    seeds: Vec<u64>,
    /// Input path → sha256 of its content.
    inputs: BTreeMap<String, String>,
    /// Artifact paths relative to the run directory, sorted.
    outputs: Vec<String>,
    /// Phase → wall seconds.
    timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seeds,
            inputs: BTreeMap::new(),
            outputs: vec!["manifest.json".to_string()],
            timings_s: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_hex(path)?);
        Ok(())
    }

    fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    fn timing(&mut self, label: impl Into<String>, secs: f64) {
        self.timings_s.insert(label.into(), (secs * 1000.0).round() / 1000.0);
    }

    /// Validate that every recorded artifact exists, then write the manifest.
    fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.outputs.sort();
        self.outputs.dedup();
        for rel in &self.outputs {
            if rel != "manifest.json" && !out_dir.join(rel).exists() {
                bail!("artifact {rel} was not written");
            }
        }
        let body = serde_json::to_string_pretty(&self)?;
        fs::write(out_dir.join("manifest.json"), body + "\n")
            .with_context(|| format!("writing manifest under {}", out_dir.display()))?;
        Ok(())
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn hash_dataset(manifest: &mut RunManifest, dir: &Path) -> Result<()> {
    for name in ["samples.jsonl", "images.gfeb", "sentences.gfeb", "variables.json"] {
        manifest.input(&dir.join(name))?;
    }
    Ok(())
}

fn clone_raw(raw: &RawData) -> RawData {
    RawData {
        samples: raw.samples.clone(),
        images: raw.images.clone(),
        sentences: raw.sentences.clone(),
        schema: raw.schema.clone(),
    }
}

fn write_artifact(out_dir: &Path, rel: &str, content: &str) -> Result<()> {
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let body = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg: SynthConfig = serde_json::from_str(&body).context("parsing generator config")?;
    fs::create_dir_all(&args.out)?;
    let t0 = Instant::now();
    gen_dataset(&cfg, &args.out)?;
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&cfg)?, vec![cfg.seed]);
    manifest.input(&args.config)?;
    for rel in ["samples.jsonl", "images.gfeb", "sentences.gfeb", "variables.json", "generator.json"] {
        manifest.output(rel);
    }
    manifest.timing("generate", t0.elapsed().as_secs_f64());
    manifest.finish(&args.out)?;
    println!("wrote dataset ({} samples) to {}", cfg.n_samples, args.out.display());
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let samples_path = args.data.join("samples.jsonl");
    let samples = load_samples(&samples_path)?;
    let points: Vec<(usize, GeoPoint)> =
        samples.iter().enumerate().map(|(i, s)| (i, s.location)).collect();
    let t0 = Instant::now();
    let split = block_split(&points, args.block_size_m, args.fractions.into(), args.seed)?;
    fs::create_dir_all(&args.out)?;
    write_artifact(&args.out, "split.json", &(serde_json::to_string_pretty(&split)? + "\n"))?;
    let config = json!({
        "block_size_m": args.block_size_m,
        "fractions": args.fractions,
        "seed": args.seed,
    });
    let mut manifest = RunManifest::new("split", config, vec![args.seed]);
    manifest.input(&samples_path)?;
    manifest.output("split.json");
    manifest.timing("split", t0.elapsed().as_secs_f64());
    manifest.finish(&args.out)?;
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|s| format!("{s}={}", split.ids_in(*s).len()))
        .collect();
    println!("wrote split.json ({})", counts.join(", "));
    Ok(())
}

fn prep_config(opts: &CommonTrainOpts, seed: u64) -> PrepConfig {
    PrepConfig {
        k: opts.k,
        j: opts.j,
        selection: opts.text_selection,
        block_size_m: opts.block_size_m,
        fractions: opts.fractions,
        seed,
        ..PrepConfig::default()
    }
}

fn model_spec(opts: &CommonTrainOpts) -> ModelSpec {
    ModelSpec {
        token_dim: opts.token_dim,
        num_layers: opts.layers,
        num_heads: opts.heads,
        ff_dim: opts.ff_dim,
        dropout: opts.dropout,
        pool: opts.pool,
    }
}

fn locenc_config(opts: &CommonTrainOpts) -> LocEncConfig {
    LocEncConfig::new(opts.locenc).with_loc_dim(opts.loc_dim)
}

fn train_config(opts: &CommonTrainOpts, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: opts.lr,
        batch_size: opts.batch,
        epochs: opts.epochs,
        weight_decay: opts.weight_decay,
        mask_prob: opts.mask,
        seed,
        ..TrainConfig::default()
    }
}

fn effective_config(opts: &CommonTrainOpts) -> Result<serde_json::Value> {
    Ok(json!({
        "prep": prep_config(opts, 0),
        "model": model_spec(opts),
        "locenc": locenc_config(opts),
        "train": train_config(opts, 0),
        "modality": opts.modality.as_str(),
    }))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let opts = &args.opts;
    let raw = load_dir(&args.data)?;
    fs::create_dir_all(&args.out)?;
    let mut manifest =
        RunManifest::new("train", effective_config(opts)?, opts.seed_list.clone());
    hash_dataset(&mut manifest, &args.data)?;
    for &seed in &opts.seed_list {
        let t0 = Instant::now();
        let prepared = prepare(clone_raw(&raw), prep_config(opts, seed))?;
        let result = run_one(
            &prepared,
            &model_spec(opts),
            locenc_config(opts),
            opts.modality,
            &train_config(opts, seed),
        )?;
        let dir = format!("seed-{seed}");
        write_artifact(&args.out, &format!("{dir}/metrics.csv"), &metrics_to_csv(&result.outcome.metrics))?;
        write_artifact(&args.out, &format!("{dir}/report.csv"), &report_to_csv(&result.report))?;
        write_artifact(&args.out, &format!("{dir}/groups.csv"), &groups_to_csv(&result.report))?;
        let ckpt = args.out.join(&dir).join("model.ckpt");
        save_checkpoint(&result.outcome.best_model, &[], &ckpt)?;
        for rel in ["metrics.csv", "report.csv", "groups.csv", "model.ckpt"] {
            manifest.output(format!("{dir}/{rel}"));
        }
        manifest.timing(&dir, t0.elapsed().as_secs_f64());
        println!(
            "seed {seed}: best epoch {} val R2 {:.4}, test R2 {:.4}",
            result.outcome.best_epoch, result.outcome.best_val_r2, result.report.mean_r2
        );
    }
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let raw = load_dir(&args.data)?;
    let prep = PrepConfig {
        k: ckpt.model.cfg.neighbor_count,
        j: ckpt.model.cfg.sentences_per_location,
        selection: args.text_selection,
        block_size_m: args.block_size_m,
        fractions: args.fractions,
        seed: args.seed,
        ..PrepConfig::default()
    };
    let t0 = Instant::now();
    let prepared = prepare(raw, prep.clone())?;
    let report = evaluate_on_split(&ckpt.model, &prepared, args.modality, args.split)?;
    fs::create_dir_all(&args.out)?;
    write_artifact(&args.out, "report.csv", &report_to_csv(&report))?;
    write_artifact(&args.out, "groups.csv", &groups_to_csv(&report))?;
    let config = json!({
        "prep": prep,
        "split": args.split.as_str(),
        "modality": args.modality.as_str(),
        "model": ckpt.model.cfg,
        "locenc": ckpt.model.locenc,
    });
    let mut manifest = RunManifest::new("eval", config, vec![args.seed]);
    manifest.input(&args.model)?;
    hash_dataset(&mut manifest, &args.data)?;
    manifest.output("report.csv");
    manifest.output("groups.csv");
    manifest.timing("eval", t0.elapsed().as_secs_f64());
    manifest.finish(&args.out)?;
    println!(
        "{} split: mean R2 {:.4} over {} variables ({} samples)",
        args.split,
        report.mean_r2,
        report.scores.len(),
        report.n_test
    );
    Ok(())
}

/// One swept axis with its raw cell labels.
enum SweepAxis {
    K(Vec<usize>),
    Locenc(Vec<LocEncKind>),
    Text(Vec<(SelectionPolicy, usize)>),
}

impl SweepAxis {
    fn parse(s: &str) -> Result<SweepAxis> {
        let (axis, rest) =
            s.split_once('=').ok_or_else(|| anyhow!("sweep must look like axis=v1,v2"))?;
        match axis {
            "k" => {
                let ks = rest
                    .split(',')
                    .map(|v| v.parse::<usize>().map_err(|_| anyhow!("bad k value '{v}'")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SweepAxis::K(ks))
            }
            "locenc" => {
                let kinds = if rest == "all" {
                    LocEncKind::ALL.to_vec()
                } else {
                    rest.split(',')
                        .map(|v| parse_locenc(v).map_err(|e| anyhow!(e)))
                        .collect::<Result<Vec<_>>>()?
                };
                Ok(SweepAxis::Locenc(kinds))
            }
            "text" => {
                let cells = rest
                    .split(',')
                    .map(|v| -> Result<(SelectionPolicy, usize)> {
                        let (policy, j) = v
                            .split_once(':')
                            .ok_or_else(|| anyhow!("text cell '{v}' must be policy:j"))?;
                        Ok((
                            parse_selection(policy).map_err(|e| anyhow!(e))?,
                            j.parse().map_err(|_| anyhow!("bad j in '{v}'"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SweepAxis::Text(cells))
            }
            other => bail!("unknown sweep axis '{other}'; expected k, locenc, or text"),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SweepAxis::K(_) => "k",
            SweepAxis::Locenc(_) => "locenc",
            SweepAxis::Text(_) => "text",
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::K(ks) => ks.iter().map(|k| k.to_string()).collect(),
            SweepAxis::Locenc(kinds) => kinds.iter().map(|k| k.to_string()).collect(),
            SweepAxis::Text(cells) => {
                cells.iter().map(|(p, j)| format!("{p}:{j}")).collect()
            }
        }
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let opts = &args.opts;
    let axis = SweepAxis::parse(&args.sweep)?;
    let labels = axis.labels();
    let raw = load_dir(&args.data)?;
    fs::create_dir_all(&args.out)?;

    let mut manifest = RunManifest::new(
        "ablate",
        json!({ "base": effective_config(opts)?, "sweep": args.sweep }),
        opts.seed_list.clone(),
    );
    hash_dataset(&mut manifest, &args.data)?;
    let data_hashes: Vec<&String> = manifest.inputs.values().collect();
    let data_digest = {
        let mut hasher = Sha256::new();
        for h in data_hashes {
            hasher.update(h.as_bytes());
        }
        format!("{:x}", hasher.finalize())
    };

    let mut rows: Vec<(String, u64, f64, f64)> = Vec::new();
    for (vi, label) in labels.iter().enumerate() {
        for &seed in &opts.seed_list {
            // Cell configuration: the base options with the axis value and
            // seed applied. Its hash keys the cell directory, so a change to
            // any input or option recomputes the cell.
            let mut cell_opts = opts.clone();
            let mut mode = opts.modality;
            match &axis {
                SweepAxis::K(ks) => cell_opts.k = ks[vi],
                SweepAxis::Locenc(kinds) => cell_opts.locenc = kinds[vi],
                SweepAxis::Text(cells) => {
                    cell_opts.text_selection = cells[vi].0;
                    cell_opts.j = cells[vi].1;
                    mode = ModalityMode::TextOnly;
                }
            }
            let cell_config = json!({
                "axis": axis.name(),
                "value": label,
                "seed": seed,
                "modality": mode.as_str(),
                "prep": prep_config(&cell_opts, seed),
                "model": model_spec(&cell_opts),
                "locenc": locenc_config(&cell_opts),
                "train": train_config(&cell_opts, seed),
                "data": data_digest,
            });
            let cell_hash = {
                let mut hasher = Sha256::new();
                hasher.update(serde_json::to_string(&cell_config)?.as_bytes());
                format!("{:x}", hasher.finalize())[..16].to_string()
            };
            let cell_rel = format!("cells/{cell_hash}");
            let done_rel = format!("{cell_rel}/done.json");
            let done_path = args.out.join(&done_rel);

            let (mean_r2, mean_cod) = if done_path.exists() {
                let body = fs::read_to_string(&done_path)?;
                let done: serde_json::Value = serde_json::from_str(&body)?;
                println!("cell {}={} seed {seed}: complete, skipping", axis.name(), label);
                (
                    done["mean_r2"].as_f64().context("done.json missing mean_r2")?,
                    done["mean_cod"].as_f64().context("done.json missing mean_cod")?,
                )
            } else {
                let t0 = Instant::now();
                let prepared = prepare(clone_raw(&raw), prep_config(&cell_opts, seed))?;
                let result = run_one(
                    &prepared,
                    &model_spec(&cell_opts),
                    locenc_config(&cell_opts),
                    mode,
                    &train_config(&cell_opts, seed),
                )?;
                write_artifact(
                    &args.out,
                    &format!("{cell_rel}/metrics.csv"),
                    &metrics_to_csv(&result.outcome.metrics),
                )?;
                write_artifact(
                    &args.out,
                    &format!("{cell_rel}/report.csv"),
                    &report_to_csv(&result.report),
                )?;
                let done = json!({
                    "config": cell_config,
                    "mean_r2": result.report.mean_r2,
                    "mean_cod": result.report.mean_cod,
                    "elapsed_s": (t0.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
                });
                write_artifact(&args.out, &done_rel, &(serde_json::to_string_pretty(&done)? + "\n"))?;
                println!(
                    "cell {}={} seed {seed}: test R2 {:.4} ({:.1}s)",
                    axis.name(),
                    label,
                    result.report.mean_r2,
                    t0.elapsed().as_secs_f64()
                );
                (result.report.mean_r2, result.report.mean_cod)
            };
            for rel in ["metrics.csv", "report.csv", "done.json"] {
                manifest.output(format!("{cell_rel}/{rel}"));
            }
            rows.push((label.clone(), seed, mean_r2, mean_cod));
        }
    }

    let expected = labels.len() * opts.seed_list.len();
    if rows.len() != expected {
        bail!("sweep produced {} rows, expected {expected}", rows.len());
    }
    let mut csv = String::from("axis,value,seed,mean_r2,mean_cod\n");
    for (label, seed, r2, cod) in &rows {
        csv.push_str(&format!("{},{label},{seed},{r2},{cod}\n", axis.name()));
    }
    write_artifact(&args.out, "rows.csv", &csv)?;
    manifest.output("rows.csv");
    manifest.finish(&args.out)?;
    println!("{} cells complete", rows.len());
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    match args.what.as_str() {
        "knn-stats" => {
            let samples_path = args.data.join("samples.jsonl");
            let samples = load_samples(&samples_path)?;
            let points: Vec<(usize, GeoPoint)> =
                samples.iter().enumerate().map(|(i, s)| (i, s.location)).collect();
            let t0 = Instant::now();
            let index = build_index(&points)?;
            let ids: Vec<usize> = (0..points.len()).collect();
            let percentiles = [5.0, 25.0, 50.0, 75.0, 95.0];
            let stats = knn_distance_stats(&index, &ids, args.k_max, &percentiles)?;
            let mut csv = String::from("rank,count,mean,p5,p25,p50,p75,p95\n");
            for s in &stats {
                let pv: Vec<String> = s.percentile_values.iter().map(|v| v.to_string()).collect();
                csv.push_str(&format!("{},{},{},{}\n", s.rank, s.count, s.mean, pv.join(",")));
            }
            write_artifact(&args.out, "knn_stats.csv", &csv)?;
            let config = json!({ "what": "knn-stats", "k_max": args.k_max, "percentiles": percentiles });
            let mut manifest = RunManifest::new("analyze", config, vec![]);
            manifest.input(&samples_path)?;
            manifest.output("knn_stats.csv");
            manifest.timing("knn-stats", t0.elapsed().as_secs_f64());
            manifest.finish(&args.out)?;
            println!("wrote knn_stats.csv ({} ranks)", stats.len());
        }
        "similarity" => {
            let samples_path = args.data.join("samples.jsonl");
            let samples = load_samples(&samples_path)?;
            let (store_file, label) = match args.store.as_str() {
                "images" => ("images.gfeb", "visual"),
                "sentences" => ("sentences.gfeb", "text"),
                other => bail!("unknown store '{other}'; expected images or sentences"),
            };
            let store_path = args.data.join(store_file);
            let store = load_store(&store_path)?;
            let keyed: Vec<(String, GeoPoint)> = match args.store.as_str() {
                "images" => samples.iter().map(|s| (s.image_ref.clone(), s.location)).collect(),
                _ => samples
                    .iter()
                    .flat_map(|s| s.sentence_refs.iter().map(|r| (r.clone(), s.location)))
                    .collect(),
            };
            let t0 = Instant::now();
            let rows = similarity_vs_distance(
                &store,
                &keyed,
                label,
                args.lag_m,
                args.max_m,
                Some(args.max_pairs),
                args.seed,
            )?;
            let range = effective_range(&rows, 0.1)?;
            write_artifact(&args.out, "similarity.csv", &bins_to_csv(&rows))?;
            let range_body = json!({ "effective_range_m": range, "threshold_fraction": 0.1 });
            write_artifact(&args.out, "range.json", &(serde_json::to_string_pretty(&range_body)? + "\n"))?;
            let config = json!({
                "what": "similarity",
                "store": args.store,
                "lag_m": args.lag_m,
                "max_m": args.max_m,
                "max_pairs": args.max_pairs,
                "seed": args.seed,
            });
            let mut manifest = RunManifest::new("analyze", config, vec![args.seed]);
            manifest.input(&samples_path)?;
            manifest.input(&store_path)?;
            manifest.output("similarity.csv");
            manifest.output("range.json");
            manifest.timing("similarity", t0.elapsed().as_secs_f64());
            manifest.finish(&args.out)?;
            println!("wrote similarity.csv; effective range {range:.0} m");
        }
        "attention" => {
            let model_path = args
                .model
                .as_ref()
                .context("--model is required for the attention report")?;
            let ckpt = load_checkpoint(model_path)?;
            let raw = load_dir(&args.data)?;
            let prep = PrepConfig {
                k: ckpt.model.cfg.neighbor_count,
                j: ckpt.model.cfg.sentences_per_location,
                selection: args.text_selection,
                block_size_m: args.block_size_m,
                fractions: args.fractions,
                seed: args.seed,
                ..PrepConfig::default()
            };
            let t0 = Instant::now();
            let prepared = prepare(raw, prep.clone())?;
            let records =
                attention_for_split(&ckpt.model, &prepared, args.modality, Split::Test)?;
            let rows = geofuse::eval::attention_vs_distance(&records, args.bin_m)?;
            write_artifact(&args.out, "attention.csv", &bins_to_csv(&rows))?;
            let config = json!({
                "what": "attention",
                "bin_m": args.bin_m,
                "modality": args.modality.as_str(),
                "prep": prep,
            });
            let mut manifest = RunManifest::new("analyze", config, vec![args.seed]);
            manifest.input(model_path)?;
            hash_dataset(&mut manifest, &args.data)?;
            manifest.output("attention.csv");
            manifest.timing("attention", t0.elapsed().as_secs_f64());
            manifest.finish(&args.out)?;
            println!("wrote attention.csv ({} records)", records.len());
        }
        other => bail!("unknown report '{other}'; expected knn-stats, similarity, or attention"),
    }
    Ok(())
}

fn configure_threads(deterministic: bool) -> Result<()> {
    let cap = if deterministic {
        Some(1)
    } else {
        match std::env::var("GEOFUSE_THREADS") {
            Ok(v) => {
                let n: usize =
                    v.parse().context("GEOFUSE_THREADS must be a positive integer")?;
                Some(n)
            }
            Err(_) => None,
        }
    };
    if let Some(n) = cap {
        if n == 0 {
            bail!("thread cap must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("worker pool already configured")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads(cli.deterministic)?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}
