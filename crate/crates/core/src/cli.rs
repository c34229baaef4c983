//! Command-line front end. Every subcommand writes a replayable run manifest
//! before it starts working.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{build_dataset, find_mentions_spans, load_corpus, load_test_cases, ConditionInput, DatasetInfo, Image};
use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::metrics::{eval_suite, summarize, write_csv, SuiteOptions, Variant};
use crate::model::{load_checkpoint, Model, RoutingOptions};
use crate::routing::{build_dynamic_mask, build_static_mask, combine, FlowMask, RoutingAssignment};
use crate::sampler::{export_trace, sample, SampleRequest};
use crate::trainer::{pretrain, train, PretrainConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "routed-dit", version, about = "Multi-subject diffusion transformer with attention routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic training corpus and held-out test cases.
    BuildDataset(BuildDatasetArgs),
    /// Pretrain the text-to-image base model.
    Pretrain(PretrainArgs),
    /// Train the adapters through the three curriculum stages.
    Train(TrainArgs),
    /// Generate one image from condition images and a prompt.
    Sample(SampleArgs),
    /// Compare the full model against its ablations on the test cases.
    Eval(EvalArgs),
    /// Render the static and combined attention masks for a layout.
    InspectMask(InspectMaskArgs),
    /// Export per-step affinity heatmaps for one generation.
    TraceAffinity(TraceAffinityArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Renders per subject.
    #[arg(long, default_value_t = 4)]
    pub renders: usize,
    /// Test cases per scenario.
    #[arg(long, default_value_t = 32)]
    pub test_cases: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file mirroring the pretraining config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file mirroring the training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained base checkpoint; without it a base is pretrained first.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Pretraining iterations when no base is given.
    #[arg(long, default_value_t = PretrainConfig::default().iters)]
    pub pretrain_iters: usize,
    /// Iterations per stage, e.g. `2000,1000,1000`.
    #[arg(long, value_parser = parse_stage_iters)]
    pub stage_iters: Option<[usize; 3]>,
    #[arg(long)]
    pub no_static_routing: bool,
    #[arg(long)]
    pub no_dynamic_routing: bool,
    #[arg(long)]
    pub no_diptych: bool,
    /// One adapter applied to every token instead of the gated pair.
    #[arg(long)]
    pub no_dual_lora: bool,
    /// Check every routed mask during training.
    #[arg(long)]
    pub audit: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerationArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Condition as `image.png:prompt`; repeat for several conditions.
    #[arg(long = "cond")]
    pub conds: Vec<String>,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_static_routing: bool,
    #[arg(long)]
    pub no_dynamic_routing: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also export affinity heatmaps into this directory.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TraceAffinityArgs {
    #[command(flatten)]
    pub generation: GenerationArgs,
    /// Heatmap directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Record every n-th step.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Full model checkpoint; also evaluated with dynamic routing off.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Checkpoint trained without diptych data.
    #[arg(long)]
    pub no_diptych_ckpt: Option<PathBuf>,
    /// Checkpoint trained without static routing or gated adapters.
    #[arg(long)]
    pub no_bias_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub seeds: usize,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Use at most this many cases per scenario.
    #[arg(long)]
    pub cases: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectMaskArgs {
    #[arg(long)]
    pub c: usize,
    #[arg(long)]
    pub n_prime: usize,
    #[arg(long)]
    pub m_prime: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub n: usize,
    /// Routing assignment: a JSON file or an inline list like `0,1,0`.
    #[arg(long)]
    pub assignment: Option<String>,
    /// Output PGM; the combined mask goes next to it as `*_combined.pgm`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
}

impl RunManifest {
    fn new(subcommand: &str, argv: &[String], config: serde_json::Value, seed: Option<u64>, artifacts: Vec<PathBuf>) -> Self {
        Self {
            subcommand: subcommand.into(),
            argv: argv.to_vec(),
            config,
            seed,
            artifacts,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Maps library errors onto process exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Image(_) => EXIT_DATA,
        Error::Shape(_) | Error::InvalidInput(_) => EXIT_USAGE,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Process entry point for the binary.
pub fn main() -> ! {
    std::process::exit(run(std::env::args_os()))
}

fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::BuildDataset(a) => cmd_build_dataset(a, argv),
        Command::Pretrain(a) => cmd_pretrain(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Sample(a) => cmd_sample(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::InspectMask(a) => cmd_inspect_mask(a, argv).map(|summary| print!("{summary}")),
        Command::TraceAffinity(a) => cmd_trace_affinity(a, argv),
    }
}

fn parse_stage_iters(text: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected three comma-separated counts, got {}", v.len()))
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        }
    }
}

fn cmd_build_dataset(a: BuildDatasetArgs, argv: &[String]) -> Result<()> {
    let info = DatasetInfo {
        renders: a.renders,
        test_per_scenario: a.test_cases,
        ..DatasetInfo::new(a.subjects, a.seed)
    };
    if info.subjects == 0 || info.renders == 0 {
        return Err(Error::invalid("subjects and renders must be positive"));
    }
    RunManifest::new(
        "build-dataset",
        argv,
        serde_json::to_value(info)?,
        Some(a.seed),
        vec![a.out.join("dataset.json"), a.out.join("train"), a.out.join("test")],
    )
    .write(&a.out.join("manifest.json"))?;
    let corpus = build_dataset(&a.out, &info)?;
    println!("wrote {} training samples to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, argv: &[String]) -> Result<()> {
    let mut config: PretrainConfig = read_config(a.config.as_deref())?;
    if let Some(i) = a.iters {
        config.iters = i;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    RunManifest::new(
        "pretrain",
        argv,
        serde_json::to_value(config)?,
        Some(config.seed),
        vec![a.out.join("base.ckpt"), a.out.join("pretrain_loss.csv")],
    )
    .write(&a.out.join("manifest.json"))?;
    let corpus = load_corpus(&a.data)?;
    let (_, losses) = pretrain(&config, &corpus, Some(&a.out))?;
    if let Some(last) = losses.last() {
        println!("pretrained {} iterations, final loss {:.4}", last.iter, last.loss);
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let mut config: TrainConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(iters) = a.stage_iters {
        config.stage_iters = iters;
    }
    config.static_routing &= !a.no_static_routing;
    config.dynamic_routing &= !a.no_dynamic_routing;
    config.diptych &= !a.no_diptych;
    config.dual_lora &= !a.no_dual_lora;
    config.audit |= a.audit;
    config.validate()?;
    let pre = PretrainConfig {
        iters: a.pretrain_iters,
        seed: config.seed,
        ..PretrainConfig::default()
    };
    let mut artifacts: Vec<PathBuf> = (1..=3).map(|s| a.out.join(format!("stage{s}.ckpt"))).collect();
    artifacts.push(a.out.join("loss.csv"));
    if a.base.is_none() {
        artifacts.push(a.out.join("base.ckpt"));
    }
    let resolved = serde_json::json!({ "train": config, "base": a.base, "pretrain": a.base.is_none().then_some(pre) });
    RunManifest::new("train", argv, resolved, Some(config.seed), artifacts).write(&a.out.join("manifest.json"))?;
    let corpus = load_corpus(&a.data)?;
    let base = match &a.base {
        Some(path) => load_checkpoint(path)?.model,
        None => pretrain(&pre, &corpus, Some(&a.out))?.0,
    };
    let (_, report) = train(&config, &corpus, base, Some(&a.out))?;
    if let Some(last) = report.losses.last() {
        println!("trained {} iterations, final loss {:.4}", last.iter, last.loss);
    }
    if config.audit {
        println!("audited {} routed masks", report.audits);
    }
    Ok(())
}

/// Loads condition images and locates their mentions in the prompt.
pub fn generation_request(g: &GenerationArgs, model: &Model) -> Result<SampleRequest> {
    let edge = model.config.cond_edge;
    let mut conditions = Vec::with_capacity(g.conds.len());
    for spec in &g.conds {
        let (path, text) = spec
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("condition `{spec}` is not of the form image.png:prompt")))?;
        let mut image = Image::load_png(path)?;
        if image.width != edge || image.height != edge {
            log::warn!("resizing {path} from {}x{} to {edge}x{edge}", image.width, image.height);
            image = image.resize_nearest(edge, edge);
        }
        conditions.push(ConditionInput {
            image,
            prompt: crate::data::tokenize(text)?,
        });
    }
    let prompt = crate::data::tokenize(&g.prompt)?;
    let spans = find_mentions_spans(&prompt, &conditions)?;
    let mut req = SampleRequest::new(conditions, prompt, spans);
    req.steps = g.steps;
    req.seed = g.seed;
    req.routing = RoutingOptions {
        static_routing: !g.no_static_routing,
        dynamic_routing: !g.no_dynamic_routing,
        ..RoutingOptions::default()
    };
    Ok(req)
}

fn cmd_sample(a: SampleArgs, argv: &[String]) -> Result<()> {
    let mut artifacts = vec![a.out.clone()];
    artifacts.extend(a.trace.clone());
    RunManifest::new("sample", argv, serde_json::to_value(&a)?, Some(a.generation.seed), artifacts)
        .write(&sidecar(&a.out))?;
    let model = load_checkpoint(&a.generation.ckpt)?.model;
    let mut req = generation_request(&a.generation, &model)?;
    if a.trace.is_some() {
        req.trace_every = Some(1);
    }
    let (image, trace) = sample(&model, &req)?;
    image.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    if let (Some(dir), Some(trace)) = (&a.trace, trace) {
        if trace.entries.is_empty() {
            log::warn!("no affinity to trace with fewer than one condition");
        } else {
            let files = export_trace(&trace, dir)?;
            println!("wrote {} heatmaps to {}", files.len(), dir.display());
        }
    }
    Ok(())
}

fn cmd_trace_affinity(a: TraceAffinityArgs, argv: &[String]) -> Result<()> {
    RunManifest::new(
        "trace-affinity",
        argv,
        serde_json::to_value(&a)?,
        Some(a.generation.seed),
        vec![a.out.join("trace.json"), a.out.join("sample.png")],
    )
    .write(&a.out.join("manifest.json"))?;
    let model = load_checkpoint(&a.generation.ckpt)?.model;
    let mut req = generation_request(&a.generation, &model)?;
    if req.conditions.is_empty() {
        return Err(Error::invalid("affinity tracing needs at least one condition"));
    }
    req.trace_every = Some(a.every);
    let (image, trace) = sample(&model, &req)?;
    image.save_png(a.out.join("sample.png"))?;
    let files = export_trace(&trace.expect("tracing requested"), &a.out)?;
    println!("wrote {} heatmaps to {}", files.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let summary_path = a.out.with_file_name(format!(
        "{}_summary.csv",
        a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metrics".into())
    ));
    RunManifest::new(
        "eval",
        argv,
        serde_json::to_value(&a)?,
        None,
        vec![a.out.clone(), summary_path.clone()],
    )
    .write(&sidecar(&a.out))?;
    let mut cases = load_test_cases(&a.data)?;
    if let Some(limit) = a.cases {
        let mut seen = std::collections::HashMap::new();
        cases.retain(|c| {
            let n = seen.entry(c.scenario).or_insert(0usize);
            *n += 1;
            *n <= limit
        });
    }
    let full = load_checkpoint(&a.ckpt)?.model;
    let no_diptych = a.no_diptych_ckpt.as_ref().map(load_checkpoint).transpose()?.map(|c| c.model);
    let no_bias = a.no_bias_ckpt.as_ref().map(load_checkpoint).transpose()?.map(|c| c.model);
    let on = RoutingOptions::default();
    let mut variants = vec![Variant {
        name: "full".into(),
        model: &full,
        routing: on,
    }];
    match &no_diptych {
        Some(m) => variants.push(Variant {
            name: "no-diptych".into(),
            model: m,
            routing: on,
        }),
        None => log::warn!("no --no-diptych-ckpt given; skipping that variant"),
    }
    match &no_bias {
        Some(m) => variants.push(Variant {
            name: "no-bias-mitigation".into(),
            model: m,
            routing: RoutingOptions {
                static_routing: false,
                ..on
            },
        }),
        None => log::warn!("no --no-bias-ckpt given; skipping that variant"),
    }
    variants.push(Variant {
        name: "no-dynamic-routing".into(),
        model: &full,
        routing: RoutingOptions {
            dynamic_routing: false,
            ..on
        },
    });
    let rows = eval_suite(
        &variants,
        &cases,
        &SuiteOptions {
            seeds: a.seeds,
            steps: a.steps,
        },
    )?;
    write_csv(&a.out, &rows)?;
    let summary = summarize(&rows);
    write_csv(&summary_path, &summary)?;
    println!("{:<20} {:<10} {:>12} {:>10}", "variant", "scenario", "identity", "attr");
    for r in &summary {
        println!("{:<20} {:<10} {:>12.4} {:>10.4}", r.variant, r.scenario, r.identity_sim, r.attr_match);
    }
    Ok(())
}

/// Parses `0,1,0`, a JSON array, or a JSON file holding either.
pub fn parse_assignment(text: &str) -> Result<RoutingAssignment> {
    let source = if Path::new(text).is_file() {
        fs::read_to_string(text).map_err(|e| Error::io(text, e))?
    } else {
        text.to_string()
    };
    let trimmed = source.trim();
    let values: Vec<usize> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| Error::invalid(format!("malformed assignment: {e}")))?
    } else {
        trimmed
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("malformed assignment `{trimmed}`: {e}")))?
    };
    Ok(RoutingAssignment(values))
}

fn summary_text(name: &str, mask: &FlowMask) -> String {
    let mut s = format!("{name}: {} blocked of {}\n", mask.blocked_count(), mask.size() * mask.size());
    for b in mask.block_summary() {
        s.push_str(&format!("  {} -> {}: {}\n", b.rows, b.cols, b.blocked));
    }
    s
}

/// Writes the static mask (and the combined mask when an assignment is
/// given) and returns a per-block summary.
pub fn cmd_inspect_mask(a: InspectMaskArgs, argv: &[String]) -> Result<String> {
    let layout = SequenceLayout::new(a.c, a.n_prime, a.m_prime, a.m, a.n);
    let combined_path = a.out.with_file_name(format!(
        "{}_combined.pgm",
        a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mask".into())
    ));
    let mut artifacts = vec![a.out.clone()];
    if a.assignment.is_some() {
        artifacts.push(combined_path.clone());
    }
    RunManifest::new("inspect-mask", argv, serde_json::to_value(&a)?, None, artifacts).write(&sidecar(&a.out))?;
    let assignment = a.assignment.as_deref().map(parse_assignment).transpose()?;
    let stat = build_static_mask(&layout);
    stat.to_pgm().save(&a.out)?;
    let mut text = summary_text("static", &stat);
    if let Some(assign) = assignment {
        let dynamic = build_dynamic_mask(&assign, &layout)?;
        let both = combine(&stat, &dynamic)?;
        both.to_pgm().save(&combined_path)?;
        text.push_str(&summary_text("combined", &both));
    }
    Ok(text)
}
