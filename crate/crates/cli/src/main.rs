use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use machan_core::baselines::{load_svr, save_svr, svr_train_standardized, SvrConfig};
use machan_core::data::{
    downsample, fit_normalizer, load_labels, load_pooled, load_records, pool_volumes, pot_features, save_pooled,
    split_indices, Dataset, GradPooling, LabelLine, Normalizer, PooledMeta, SplitSpec,
};
use machan_core::evaluation::{aggregate, evaluate, summary_table, write_reports_jsonl, EvalReport, LstmModel, SvrModel};
use machan_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, FusionMode, ModelConfig};
use machan_core::synth::{generate, load_modes, score_attention, write_synth, SynthConfig};
use machan_core::training::{train_from, TrainConfig};
use machan_core::{ChannelSet, Dataset64};

#[derive(Parser)]
#[command(name = "machan", version, about = "Multichannel attention LSTM for popularity regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic channel-switching dataset.
    Synth(SynthArgs),
    /// Max-pool frame features into volumes.
    Pool(PoolArgs),
    /// Compute pooled-time-series descriptors from frame features.
    Pot(PotArgs),
    /// Write a seeded train/val/test partition of a pooled dataset.
    Split(SplitArgs),
    /// Train one or more models on a pooled dataset.
    Train(TrainArgs),
    /// Score checkpoints on a split.
    Eval(EvalArgs),
    /// Export the per-volume attention of one video as CSV.
    Trace(TraceArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synth config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_videos: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PoolArgs {
    /// Frame-feature JSONL.
    #[arg(long)]
    input: PathBuf,
    /// Optional `{"id", "y"}` JSONL replacing likes/views labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = machan_core::data::volumes::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = machan_core::data::volumes::DEFAULT_STRIDE)]
    stride: usize,
    /// Downsample frames to this rate before pooling.
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = machan_core::data::pot::DEFAULT_LEVELS)]
    levels: usize,
    /// Gradient summary: `sums` or `histogram-counts`.
    #[arg(long, default_value = "sums", value_parser = parse_grad)]
    grad: GradPooling,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Pooled dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.6)]
    train: f64,
    #[arg(long, default_value_t = 0.2)]
    val: f64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Pooled dataset.
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON model config; input dims are always taken from the data.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Partition written by `split`; otherwise each run draws its own.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Base seed; run `k` uses `seed + k` for its split and initialization.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// Enabled channels, e.g. `f,p` or `fpc`.
    #[arg(long, value_parser = parse_channels)]
    channels: Option<ChannelSet>,
    /// Train the linear SVR on PoT descriptors instead of an LSTM.
    #[arg(long)]
    svr: bool,
    /// JSON SVR config; implies `--svr`.
    #[arg(long)]
    svr_config: Option<PathBuf>,
    /// Pyramid depth of the SVR's PoT descriptors.
    #[arg(long, default_value_t = machan_core::data::pot::DEFAULT_LEVELS)]
    pot_levels: usize,
    /// Output directory for checkpoints and the training report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoints to score; SVR models are recognized by their header.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    /// JSONL report, one line per checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id: String,
    /// Ground-truth modes; prints the recovery score when given.
    #[arg(long)]
    modes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: machan_core::Error| e.to_string())
}

fn parse_channels(s: &str) -> Result<ChannelSet, String> {
    s.parse().map_err(|e: machan_core::Error| e.to_string())
}

fn parse_grad(s: &str) -> Result<GradPooling, String> {
    match s {
        "sums" => Ok(GradPooling::Sums),
        "histogram-counts" => Ok(GradPooling::HistogramCounts),
        other => Err(format!("unknown gradient pooling {other:?}")),
    }
}

fn echo(command: &str, config: Value) {
    eprintln!("machan {command}: {config}");
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = Value>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        serde_json::to_writer(&mut w, &l)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut config: SynthConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.n_videos {
        config.n_videos = n;
    }
    if let Some(s) = a.sigma {
        config.sigma = s;
    }
    echo("synth", json!({ "config": config, "out": a.out }));
    let videos = generate(&config)?;
    fs::create_dir_all(&a.out)?;
    write_synth(&a.out, &videos)?;
    eprintln!("wrote {} videos to {}", videos.len(), a.out.display());
    Ok(())
}

fn load_raw(input: &Path, fps: Option<f64>) -> Result<Vec<machan_core::data::RawVideoRecord>> {
    let records = load_records(input).with_context(|| format!("loading {}", input.display()))?;
    match fps {
        None => Ok(records),
        Some(f) => records.iter().map(|r| downsample(r, f).map_err(Into::into)).collect(),
    }
}

fn label_map(path: Option<&Path>) -> Result<Option<Vec<LabelLine>>> {
    path.map(|p| load_labels(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn pool(a: PoolArgs) -> Result<()> {
    echo(
        "pool",
        json!({ "input": a.input, "labels": a.labels, "window": a.window, "stride": a.stride, "fps": a.fps, "out": a.out }),
    );
    let records = load_raw(&a.input, a.fps)?;
    let seqs = records
        .iter()
        .map(|r| pool_volumes(r, a.window, a.stride))
        .collect::<machan_core::Result<Vec<_>>>()?;
    let mut ds = Dataset::new(seqs)?;
    if let Some(labels) = label_map(a.labels.as_deref())? {
        ds.override_labels(&labels);
    }
    let meta: Vec<PooledMeta> = records
        .iter()
        .map(|r| PooledMeta {
            likes: r.likes,
            views: r.views,
            fps: r.fps,
        })
        .collect();
    save_pooled(&a.out, &ds.sequences, &meta)?;
    eprintln!("pooled {} videos into {}", ds.len(), a.out.display());
    Ok(())
}

fn pot(a: PotArgs) -> Result<()> {
    echo(
        "pot",
        json!({ "input": a.input, "labels": a.labels, "levels": a.levels, "grad": a.grad, "out": a.out }),
    );
    let records = load_raw(&a.input, None)?;
    let labels: std::collections::HashMap<String, f64> = label_map(a.labels.as_deref())?
        .unwrap_or_default()
        .into_iter()
        .map(|l| (l.id, l.y))
        .collect();
    let mut lines = Vec::with_capacity(records.len());
    for r in &records {
        let p = pot_features(r, a.levels, a.grad)?;
        let y = match labels.get(&r.id) {
            Some(&y) => y,
            None => machan_core::data::compute_popularity(r.likes, r.views)?,
        };
        lines.push(json!({ "id": r.id, "y": y, "pot": p.values }));
    }
    write_lines(&a.out, lines)?;
    eprintln!("wrote {} descriptors to {}", records.len(), a.out.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset64> {
    let (ds, _) = load_pooled(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ds)
}

fn split(a: SplitArgs) -> Result<()> {
    let spec = SplitSpec {
        seed: a.seed,
        train: a.train,
        val: a.val,
        test: a.test,
    };
    echo("split", json!({ "data": a.data, "spec": spec, "out": a.out }));
    let ds = load_data(&a.data)?;
    let idx = split_indices(ds.len(), &spec)?;
    let ids = |ix: &[usize]| -> Vec<&str> { ix.iter().map(|&i| ds.sequences[i].id.as_str()).collect() };
    let doc = json!({ "spec": spec, "train": ids(&idx.train), "val": ids(&idx.val), "test": ids(&idx.test) });
    fs::write(&a.out, serde_json::to_string_pretty(&doc)? + "\n")?;
    eprintln!(
        "split {} videos: {} train, {} val, {} test",
        ds.len(),
        idx.train.len(),
        idx.val.len(),
        idx.test.len()
    );
    Ok(())
}

/// Reads a partition file and checks that its seed and ratios reproduce its id lists
/// on `ds`.
fn read_split(path: &Path, ds: &Dataset64) -> Result<SplitSpec> {
    let doc: Value = serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
    let spec: SplitSpec = serde_json::from_value(doc["spec"].clone()).context("split file has no valid spec")?;
    let idx = split_indices(ds.len(), &spec)?;
    for (name, ix) in [("train", &idx.train), ("val", &idx.val), ("test", &idx.test)] {
        let want: Vec<&str> = ix.iter().map(|&i| ds.sequences[i].id.as_str()).collect();
        let got: Vec<&str> = doc[name]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        if want != got {
            bail!("{}: {name} ids do not match this dataset", path.display());
        }
    }
    Ok(spec)
}

struct Splits {
    train: Dataset64,
    val: Dataset64,
    test: Dataset64,
    normalizer: Normalizer,
}

/// Partitions `ds` and normalizes every part with training-label statistics.
fn make_splits(ds: &Dataset64, spec: &SplitSpec) -> Result<Splits> {
    let idx = split_indices(ds.len(), spec)?;
    let train = ds.select(&idx.train);
    let normalizer = fit_normalizer(&train.labels())?;
    Ok(Splits {
        train: train.normalized(normalizer)?,
        val: ds.select(&idx.val).normalized(normalizer)?,
        test: ds.select(&idx.test).normalized(normalizer)?,
        normalizer,
    })
}

fn pick<'a>(splits: &'a Splits, name: &str) -> Result<&'a Dataset64> {
    match name {
        "train" => Ok(&splits.train),
        "val" => Ok(&splits.val),
        "test" => Ok(&splits.test),
        other => bail!("unknown split {other:?}; expected train, val or test"),
    }
}

fn svr_meta_path(model: &Path) -> PathBuf {
    let mut p = model.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

fn train(a: TrainArgs) -> Result<()> {
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let ds = load_data(&a.data)?;
    let dims = ds.dims().context("dataset is empty")?;
    let mut tc: TrainConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    tc.validate()?;
    let mut mc: ModelConfig = read_json(a.model_config.as_deref())?;
    mc.input_dims = dims;
    if let Some(f) = a.fusion {
        mc.fusion = f;
    }
    if let Some(c) = a.channels {
        mc.channels = c;
    }
    mc.validate()?;
    let use_svr = a.svr || a.svr_config.is_some();
    let svr_config: SvrConfig = read_json(a.svr_config.as_deref())?;
    let fixed_split = a.split.as_deref().map(|p| read_split(p, &ds)).transpose()?;
    echo(
        "train",
        json!({
            "data": a.data, "runs": a.runs, "split": fixed_split, "train": tc,
            "model": if use_svr { Value::Null } else { json!(mc) },
            "svr": if use_svr { json!({ "config": svr_config, "pot_levels": a.pot_levels }) } else { Value::Null },
            "out": a.out,
        }),
    );
    fs::create_dir_all(&a.out)?;
    let mut report_lines = Vec::with_capacity(a.runs);
    for k in 0..a.runs {
        let seed = tc.seed + k as u64;
        let spec = fixed_split.unwrap_or_else(|| SplitSpec::with_seed(seed));
        let splits = make_splits(&ds, &spec)?;
        if use_svr {
            let levels = a.pot_levels;
            let grad = GradPooling::Sums;
            let xs = splits
                .train
                .sequences
                .iter()
                .map(|s| machan_core::data::pot_from_sequence(s, levels, grad).map(|p| p.values))
                .collect::<machan_core::Result<Vec<_>>>()?;
            let ys: Vec<f64> = splits.train.labels();
            let cfg = SvrConfig {
                seed,
                ..svr_config.clone()
            };
            let params = svr_train_standardized(&xs, &ys, &cfg)?;
            let path = a.out.join(format!("run-{k}.svr"));
            save_svr(&path, &params)?;
            let meta = json!({ "split": spec, "normalizer": splits.normalizer, "seed": seed, "levels": levels, "grad": grad });
            fs::write(svr_meta_path(&path), serde_json::to_string(&meta)? + "\n")?;
            report_lines.push(json!({ "run": k, "seed": seed, "model": "svr", "checkpoint": path }));
            eprintln!("run {k}: wrote {}", path.display());
            continue;
        }
        let run_tc = TrainConfig { seed, ..tc.clone() };
        let init = machan_core::model::init_params(&mc, seed)?;
        let (params, report) = train_from(init, &splits.train, &splits.val, &mc, &run_tc, |e| {
            let rho = e.val_rho.map_or_else(|| "undef".to_string(), |r| format!("{r:.4}"));
            eprintln!(
                "run {k} epoch {}: train loss {:.6}, val mse {:.6}, val rho {rho}",
                e.epoch, e.train_loss, e.val_mse
            );
        })?;
        let path = a.out.join(format!("run-{k}.ckpt"));
        let meta = CheckpointMeta {
            normalizer: Some(splits.normalizer),
            split: Some(spec),
            seed: Some(seed),
            best_epoch: Some(report.best_epoch),
        };
        save_checkpoint(&path, &mc, &params, &meta)?;
        eprintln!(
            "run {k}: best epoch {} (val mse {:.6}), {} updates in {:.1}s, wrote {}",
            report.best_epoch,
            report.best_val_mse,
            report.updates,
            report.wall_time_secs,
            path.display()
        );
        report_lines.push(json!({
            "run": k, "seed": seed, "model": model_name(&mc), "checkpoint": path, "report": report.without_timing(),
        }));
    }
    write_lines(&a.out.join("train_report.jsonl"), report_lines)?;
    Ok(())
}

fn model_name(mc: &ModelConfig) -> String {
    let fusion = serde_json::to_value(mc.fusion).ok();
    let fusion = fusion.as_ref().and_then(Value::as_str).unwrap_or("lstm");
    let chans: String = machan_core::Channel::ALL
        .iter()
        .filter(|c| mc.channels.contains(**c))
        .map(|c| &c.name()[..1])
        .collect();
    format!("{fusion}-{chans}")
}

fn is_svr(path: &Path) -> Result<bool> {
    let head = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(head.starts_with(machan_core::baselines::SVR_MAGIC.as_bytes()))
}

fn eval_one(ds: &Dataset64, path: &Path, split_name: &str) -> Result<EvalReport> {
    if is_svr(path)? {
        let meta: Value = serde_json::from_str(&fs::read_to_string(svr_meta_path(path)).context("missing SVR metadata")?)?;
        let spec: SplitSpec = serde_json::from_value(meta["split"].clone())?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let splits = make_splits(ds, &spec)?;
        let model = SvrModel {
            params: load_svr(path)?,
            levels: serde_json::from_value(meta["levels"].clone())?,
            grad: serde_json::from_value(meta["grad"].clone())?,
        };
        return Ok(evaluate(&model, pick(&splits, split_name)?, split_name, "svr", seed)?);
    }
    let (config, params, meta) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let spec = meta.split.context("checkpoint has no split")?;
    let splits = make_splits(ds, &spec)?;
    if meta.normalizer.is_some_and(|n| n != splits.normalizer) {
        bail!("{}: label statistics differ from training; wrong dataset?", path.display());
    }
    let id = model_name(&config);
    let model = LstmModel { config, params };
    Ok(evaluate(&model, pick(&splits, split_name)?, split_name, &id, meta.seed.unwrap_or(0))?)
}

fn eval(a: EvalArgs) -> Result<()> {
    echo(
        "eval",
        json!({ "data": a.data, "checkpoints": a.checkpoint, "split": a.split, "out": a.out }),
    );
    let ds = load_data(&a.data)?;
    let reports = a
        .checkpoint
        .iter()
        .map(|p| eval_one(&ds, p, &a.split))
        .collect::<Result<Vec<_>>>()?;
    if let Some(out) = &a.out {
        let f = BufWriter::new(fs::File::create(out)?);
        write_reports_jsonl(f, &reports)?;
    }
    print!("{}", summary_table(&aggregate(reports)?));
    Ok(())
}

fn trace(a: TraceArgs) -> Result<()> {
    echo(
        "trace",
        json!({ "data": a.data, "checkpoint": a.checkpoint, "id": a.id, "modes": a.modes, "out": a.out }),
    );
    let ds = load_data(&a.data)?;
    let seq = ds.get(&a.id).ok_or_else(|| machan_core::Error::UnknownId(a.id.clone()))?;
    let (config, params, _) = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let pred = LstmModel { config, params }.predict_full(seq)?;
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    pred.trace.write_csv(&mut w)?;
    w.flush()?;
    eprintln!("wrote {} rows to {}", pred.trace.len(), a.out.display());
    if let Some(mp) = &a.modes {
        let modes = load_modes(mp)?;
        let line = modes
            .iter()
            .find(|m| m.id == a.id)
            .ok_or_else(|| machan_core::Error::UnknownId(a.id.clone()))?;
        println!("recovery {:.4}", score_attention(&pred.trace, &line.modes)?);
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MACHAN_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("MACHAN_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pool(a) => pool(a),
        Command::Pot(a) => pot(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Trace(a) => trace(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
