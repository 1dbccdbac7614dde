//! `dfd`: dynamic focus decoding from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration or
//! arguments. Failures print one JSON line on stderr.

mod report;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dfd_core::config::{resolved_path, SourceKind};
use dfd_core::engine::{calibrate, generate_batch, read_records, write_records, Calibration, DecodeConfig, Prompt};
use dfd_core::ka::knowledge_awareness;
use dfd_core::provider::{AnyProvider, BuiltinProvider, ProviderSource};
use dfd_core::trace::{load_trace, record_greedy};
use dfd_core::training::{train_demo, TrainDemoConfig};
use dfd_core::{flops_estimate, CostModel, GenerationRecord, ModelConfig, RunConfig};

#[derive(Parser)]
#[command(name = "dfd", version, about = "Dynamic focus decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Builtin,
    Identity,
    Trace,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `provider.source`.
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Overrides `provider.trace`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every prompt and write one JSONL record per sample.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides `output.path`; stdout when neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve t0 so the mean KA of the calibration prompts maps to T = 1.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        /// Write the config with the solved t0 to this path.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Diversity report for a generations file.
    Metrics {
        generations: PathBuf,
        /// Corpus-level Distinct-N instead of per-response averages.
        #[arg(long)]
        pooled: bool,
    },
    /// Summarize a trace file; with --steps, KA and temperature per step.
    TraceInfo {
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: bool,
    },
    /// Record a greedy trace from the built-in model.
    TraceRecord {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated prompt token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        prompt: Vec<u32>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        /// Stored float width in bytes (4 or 8).
        #[arg(long, default_value_t = 4)]
        width: u32,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        /// Read intermediate layers without the final norm.
        #[arg(long)]
        no_normalize: bool,
        /// Write the JSONL variant instead of binary.
        #[arg(long)]
        jsonl: bool,
    },
    /// Decoding FLOPs with and without focus overhead.
    Flops {
        #[arg(long)]
        params: f64,
        #[arg(long)]
        dmodel: u64,
        #[arg(long)]
        vocab: u64,
        #[arg(long)]
        layers: u64,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        lengths: Vec<u64>,
        /// The head shares the embedding matrix.
        #[arg(long)]
        tied: bool,
        #[arg(long)]
        json: bool,
    },
    /// Train the toy model with plain and focused loss; print both curves.
    DftDemo {
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Focus settings are read from this run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep sigma and report diversity and temperature per point.
    GridSearch {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,5,10")]
        sigmas: Vec<f64>,
        /// Calibrate t0 at every grid point.
        #[arg(long)]
        calibrate: bool,
    },
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = run.provider {
        cfg.provider.source = match p {
            ProviderArg::Builtin => SourceKind::Builtin,
            ProviderArg::Identity => SourceKind::Identity,
            ProviderArg::Trace => SourceKind::Trace,
        };
    }
    if let Some(t) = &run.trace {
        cfg.provider.trace = Some(t.clone());
    }
    for w in cfg.validate()? {
        eprintln!("{}", json!({ "warning": w }));
    }
    Ok(cfg)
}

struct Session {
    cfg: RunConfig,
    source: ProviderSource<f64>,
    workers: Option<usize>,
}

impl Session {
    fn open(run: &RunArgs) -> Result<Self> {
        if run.workers == Some(0) {
            bail!(dfd_core::Error::Config {
                key: "--workers".into(),
                message: "must be at least 1".into()
            });
        }
        let cfg = load_config(run)?;
        let source = cfg.provider_source()?;
        Ok(Self {
            cfg,
            source,
            workers: run.workers,
        })
    }

    fn vocab(&self) -> usize {
        self.source.meta().vocab_size
    }

    /// A trace only replays its own prompt.
    fn prompts(&self) -> Result<Vec<Prompt>> {
        match &self.source {
            ProviderSource::Replay(t) => Ok(vec![Prompt::new("trace", t.context_tokens.clone())]),
            ProviderSource::Builtin(_) => Ok(self.cfg.prompts(self.vocab())?),
        }
    }

    fn calibration_prompts(&self) -> Result<Vec<Prompt>> {
        match &self.source {
            ProviderSource::Replay(_) => self.prompts(),
            ProviderSource::Builtin(_) => Ok(self.cfg.calibration_prompts(self.vocab())?),
        }
    }

    fn factory(&self) -> impl Fn() -> dfd_core::Result<AnyProvider<f64>> + Sync + '_ {
        || Ok(self.source.open())
    }

    fn calibrate(&self, dc: &DecodeConfig<f64>) -> Result<Calibration> {
        let prompts = self.calibration_prompts()?;
        Ok(calibrate(self.factory(), &prompts, dc, self.workers)?)
    }

    fn generate(&self, dc: &DecodeConfig<f64>) -> Result<Vec<GenerationRecord>> {
        let prompts = self.prompts()?;
        let items = generate_batch(self.factory(), &prompts, dc, self.workers)?;
        items
            .into_iter()
            .map(|i| {
                i.result
                    .with_context(|| format!("prompt `{}` sample {}", i.prompt_id, i.sample_id))
            })
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(run: &RunArgs, out: Option<PathBuf>) -> Result<()> {
    let mut s = Session::open(run)?;
    if let Some(o) = out {
        s.cfg.output.path = Some(o);
    }
    let mut dc = s.cfg.decode_config::<f64>();
    if s.cfg.focus.calibrate {
        let cal = s.calibrate(&dc)?;
        eprintln!(
            "{}",
            json!({ "calibrated_t0": cal.t0, "mean_ka": cal.mean_ka, "samples": cal.num_samples })
        );
        dc.focus.t0 = cal.t0;
        s.cfg.focus.t0 = cal.t0;
        s.cfg.focus.calibrate = false;
    }
    let records = s.generate(&dc)?;
    let mut buf = Vec::new();
    write_records(&mut buf, &records)?;
    match &s.cfg.output.path {
        Some(path) => {
            write_atomic(path, &buf)?;
            write_atomic(&resolved_path(path), s.cfg.to_toml_string()?.as_bytes())?;
        }
        None => io::stdout().lock().write_all(&buf)?,
    }
    Ok(())
}

fn cmd_calibrate(run: &RunArgs, write: Option<PathBuf>) -> Result<()> {
    let mut s = Session::open(run)?;
    let dc = s.cfg.decode_config::<f64>();
    let cal = s.calibrate(&dc)?;
    println!(
        "{}",
        json!({
            "t0": cal.t0,
            "mean_ka": cal.mean_ka,
            "samples": cal.num_samples,
            "transform": s.cfg.focus.transform.to_string(),
            "sigma": s.cfg.focus.sigma,
        })
    );
    if let Some(path) = write {
        s.cfg.focus.t0 = cal.t0;
        s.cfg.focus.calibrate = false;
        write_atomic(&path, s.cfg.to_toml_string()?.as_bytes())?;
    }
    Ok(())
}

fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = read_records(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!("{}: no records", path.display());
    }
    Ok(records)
}

fn cmd_metrics(path: &Path, pooled: bool) -> Result<()> {
    let records = read_generations(path)?;
    let rep = report::metrics_report(&records, pooled);
    println!("{}", serde_json::to_string_pretty(&rep)?);
    Ok(())
}

fn cmd_trace_info(path: &Path, config: Option<&Path>, steps: bool) -> Result<()> {
    let trace = load_trace::<f64>(path)?;
    // Binary traces store their float width right after the model name.
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let off = 4 + 4 + 4 * 8 + 2 + trace.meta.name.len();
    let width = (bytes.starts_with(dfd_core::trace::MAGIC) && bytes.len() >= off + 4)
        .then(|| u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]));
    let m = &trace.meta;
    println!(
        "{}",
        json!({
            "name": m.name,
            "num_layers": m.num_layers,
            "vocab_size": m.vocab_size,
            "d_model": m.d_model,
            "param_count": m.param_count,
            "float_width": width,
            "prompt_tokens": trace.context_tokens.len(),
            "steps": trace.steps.len(),
        })
    );
    if steps {
        let cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        let focus = cfg.focus_config::<f64>();
        let params = focus.ka_params();
        for (i, s) in trace.steps.iter().enumerate() {
            let sig = knowledge_awareness(&s.logits, &params).with_context(|| format!("step {i}"))?;
            println!(
                "{}",
                json!({
                    "step": i,
                    "token": s.token,
                    "ka": sig.ka,
                    "temperature": focus.temperature(sig.ka),
                    "head_size": sig.support.len(),
                    "per_layer_kl": sig.per_layer_kl,
                })
            );
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_trace_record(
    out: &Path,
    prompt: &[u32],
    steps: usize,
    width: u32,
    model_seed: u64,
    no_normalize: bool,
    jsonl: bool,
) -> Result<()> {
    let mut provider = BuiltinProvider::<f64>::from_config(ModelConfig {
        seed: model_seed,
        normalize_lens: !no_normalize,
        ..ModelConfig::default()
    })?;
    let trace = record_greedy(&mut provider, prompt, steps)?;
    if jsonl {
        let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
        trace.write_jsonl(&mut w)?;
        w.flush()?;
    } else {
        trace.save(out, width)?;
    }
    Ok(())
}

fn cmd_flops(
    params: f64,
    dmodel: u64,
    vocab: u64,
    layers: u64,
    lengths: &[u64],
    tied: bool,
    as_json: bool,
) -> Result<()> {
    if params.is_nan() || params < 1.0 || params > u64::MAX as f64 {
        bail!("--params must be a positive count, got {params}");
    }
    let model = CostModel {
        param_count: params.round() as u64,
        d_model: dmodel,
        vocab_size: vocab,
        num_layers: layers,
        tied_embeddings: tied,
    };
    let rows = lengths
        .iter()
        .map(|&l| flops_estimate(&model, l, true))
        .collect::<dfd_core::Result<Vec<_>>>()?;
    if as_json {
        for r in &rows {
            println!("{}", serde_json::to_string(r)?);
        }
        return Ok(());
    }
    println!("{:>8}  {:>14}  {:>14}  {:>7}", "length", "baseline", "dfd", "ratio");
    for r in &rows {
        println!(
            "{:>8}  {:>13.2}G  {:>13.2}G  x{:.3}",
            r.context_len,
            r.baseline / 1e9,
            r.flops / 1e9,
            r.ratio_vs_baseline
        );
    }
    Ok(())
}

fn cmd_dft_demo(steps: usize, seq_len: usize, lr: f64, seed: u64, config: Option<&Path>) -> Result<()> {
    let focus = match config {
        Some(p) => {
            let c = RunConfig::load(p)?;
            c.validate()?;
            c.focus_config()
        }
        None => Default::default(),
    };
    let cfg = TrainDemoConfig {
        focus,
        steps,
        seq_len,
        lr,
        data_seed: seed,
        ..TrainDemoConfig::default()
    };
    for p in train_demo(&cfg)? {
        println!("{}", serde_json::to_string(&p)?);
    }
    Ok(())
}

fn cmd_grid_search(run: &RunArgs, sigmas: &[f64], calibrate_each: bool) -> Result<()> {
    let s = Session::open(run)?;
    if sigmas.is_empty() {
        bail!("no sigma values given");
    }
    for &sigma in sigmas {
        let mut dc = s.cfg.decode_config::<f64>();
        dc.focus.sigma = sigma;
        if let Err(e) = dc.focus.validate() {
            bail!(e);
        }
        let t0 = if calibrate_each || s.cfg.focus.calibrate {
            s.calibrate(&dc)?.t0
        } else {
            dc.focus.t0
        };
        dc.focus.t0 = t0;
        let records = s.generate(&dc)?;
        let all: Vec<&GenerationRecord> = records.iter().collect();
        let rep = report::diversity(&all, false);
        println!("{}", json!({ "sigma": sigma, "t0": t0, "report": rep }));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { run, out } => cmd_generate(&run, out),
        Command::Calibrate { run, write } => cmd_calibrate(&run, write),
        Command::Metrics { generations, pooled } => cmd_metrics(&generations, pooled),
        Command::TraceInfo { trace, config, steps } => cmd_trace_info(&trace, config.as_deref(), steps),
        Command::TraceRecord {
            out,
            prompt,
            steps,
            width,
            model_seed,
            no_normalize,
            jsonl,
        } => cmd_trace_record(&out, &prompt, steps, width, model_seed, no_normalize, jsonl),
        Command::Flops {
            params,
            dmodel,
            vocab,
            layers,
            lengths,
            tied,
            json,
        } => cmd_flops(params, dmodel, vocab, layers, &lengths, tied, json),
        Command::DftDemo {
            steps,
            seq_len,
            lr,
            seed,
            config,
        } => cmd_dft_demo(steps, seq_len, lr, seed, config.as_deref()),
        Command::GridSearch { run, sigmas, calibrate } => cmd_grid_search(&run, &sigmas, calibrate),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let config_err = err
                .chain()
                .find_map(|e| match e.downcast_ref::<dfd_core::Error>()?.root() {
                    dfd_core::Error::Config { key, message } => Some((key.clone(), message.clone())),
                    _ => None,
                });
            match config_err {
                Some((key, message)) => {
                    eprintln!("{}", json!({ "error": "config", "key": key, "message": message }));
                    ExitCode::from(2)
                }
                None => {
                    eprintln!("{}", json!({ "error": "runtime", "message": format!("{err:#}") }));
                    ExitCode::from(1)
                }
            }
        }
    }
}
