use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use wora::adapters::{count_params_for, AdapterKind};
use wora::embio::{self, load_config, RunConfig};
use wora::filtering::{emit_manifest, filter_dataset, DistractorPool, PairedDataset};
use wora::gradcheck::{run_suite, SuiteConfig, DEFAULT_STEP};
use wora::harness::{self, HarnessConfig, Method, SyntheticSpec};
use wora::metrics::{self, build_rankings, relevance_by_id};
use wora::Error;

#[derive(Parser)]
#[command(name = "wora", version, about = "Coreset filtering and weighted low-rank adapters")]
struct Cli {
    /// `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for filtering and sweeps (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank every pair against sampled distractors and keep the confident ones.
    Filter(FilterArgs),
    /// Compare analytic adapter gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Collapse an adapter checkpoint into a dense weight.
    Merge(MergeArgs),
    /// Recall@{1,5,10} and mAP of query embeddings against a gallery.
    Eval(EvalArgs),
    /// Train one method on the synthetic retrieval task.
    TrainToy(TrainArgs),
    /// Train an adapter at several ranks on the synthetic task.
    RankSweep(SweepArgs),
    /// Trainable and frozen parameter counts for an adapter.
    ParamCount(ParamArgs),
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    #[arg(long)]
    distractors: PathBuf,
    #[arg(long)]
    rank_threshold: Option<usize>,
    #[arg(long)]
    distractor_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Draw a separate distractor sample for every pair.
    #[arg(long)]
    per_pair: bool,
    #[arg(long, default_value = "manifest.jsonl")]
    manifest: PathBuf,
    #[arg(long, default_value = "filter_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Fixed shape as `D_INxD_OUT`; random shapes up to 16 when omitted.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = wora::gradcheck::DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value = "wora")]
    kind: AdapterKind,
}

#[derive(Args)]
struct MergeArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output EMB1 file for the merged weight.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Query embeddings; a gallery row is relevant when its id matches.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_CANDIDATES)]
    k_candidates: usize,
    /// Write the JSON summary here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corrupt_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on every generated pair instead of the filtered subset.
    #[arg(long)]
    no_filter: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "wora")]
    method: Method,
    #[arg(long)]
    rank: Option<usize>,
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long, default_value = "results.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16, 32, 64])]
    ranks: Vec<usize>,
    #[arg(long, default_value = "wora")]
    method: Method,
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long, default_value = "rank_sweep.json")]
    out: PathBuf,
    #[arg(long, default_value = "rank_sweep.csv")]
    csv: PathBuf,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize),
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value = "wora")]
    kind: AdapterKind,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected D_INxD_OUT, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad dimension `{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

enum Failure {
    Lib(Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }

    match cli.command {
        Command::Filter(a) => cmd_filter(a, cfg),
        Command::Gradcheck(a) => cmd_gradcheck(a, cfg),
        Command::Merge(a) => cmd_merge(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TrainToy(a) => cmd_train_toy(a, cfg),
        Command::RankSweep(a) => cmd_rank_sweep(a, cfg),
        Command::ParamCount(a) => cmd_param_count(a, cfg),
    }
}

fn cmd_filter(a: FilterArgs, mut cfg: RunConfig) -> CmdResult {
    if let Some(v) = a.rank_threshold {
        cfg.filter.rank_threshold = v;
    }
    if let Some(v) = a.distractor_count {
        cfg.filter.distractor_count = v;
    }
    if let Some(v) = a.seed {
        cfg.filter.seed = v;
    }
    if a.per_pair {
        cfg.filter.shared_sample = false;
    }

    let images = embio::read_embeddings(&a.images)?;
    let texts = embio::read_embeddings(&a.texts)?;
    let pool = DistractorPool::new(embio::read_embeddings(&a.distractors)?, a.distractors.display().to_string());
    let data = PairedDataset::new(images, texts)?;
    let report = filter_dataset(&data, &pool, &cfg.filter)?;
    let manifest = emit_manifest(&report, &data)?;
    embio::write_manifest(&manifest, &a.manifest)?;
    let summary = report.summary();
    embio::write_json(&summary, &a.report)?;
    println!(
        "retained {}/{} ({:.1}%)",
        summary.retained,
        summary.total,
        100.0 * summary.retention_rate
    );
    if summary.zero_vector_warnings > 0 {
        eprintln!("warning: {} zero-norm embeddings", summary.zero_vector_warnings);
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, cfg: RunConfig) -> CmdResult {
    let suite = SuiteConfig {
        kind: a.kind,
        instances: a.instances,
        dims: a.dims,
        rank: a.rank,
        seed: a.seed.unwrap_or(cfg.seed()),
        step: a.step,
        tolerance: a.tol,
        ..SuiteConfig::default()
    };
    let report = run_suite(&suite)?;
    for p in &report.params {
        println!(
            "{:<6} max_rel_error {:.3e}  {}",
            p.param,
            p.max_rel_error,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failing().map(|p| p.param).collect();
        Err(Failure::Check(format!(
            "gradient check failed at tolerance {:e}: {}",
            a.tol,
            names.join(", ")
        )))
    }
}

fn cmd_merge(a: MergeArgs) -> CmdResult {
    let state = embio::load_checkpoint(&a.checkpoint)?;
    let merged = state.merge()?;
    embio::write_matrix(&merged, &a.out)?;
    println!("merged {}x{} {} adapter to {}", merged.rows(), merged.cols(), state.kind, a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let queries = embio::read_embeddings(&a.queries)?;
    let gallery = embio::read_embeddings(&a.gallery)?;
    let relevance = relevance_by_id(&queries, &gallery);
    let rankings = build_rankings(&queries, &gallery, &relevance, a.k_candidates.min(gallery.rows()).max(1))?;
    let summary = metrics::evaluate(&rankings, &metrics::EVAL_KS)?;
    emit_json(&summary, a.out.as_deref())
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CmdResult {
    match out {
        Some(path) => embio::write_json(value, path)?,
        None => println!("{}", serde_json::to_string_pretty(value).expect("serializable")),
    }
    Ok(())
}

fn toy_setup(toy: &ToyArgs, cfg: &RunConfig) -> Result<(SyntheticSpec, HarnessConfig), Error> {
    let seed = toy.seed.unwrap_or(cfg.seed());
    let spec = SyntheticSpec {
        n_pairs: cfg.n_pairs,
        noise_std: cfg.noise_std,
        corrupt_fraction: toy.corrupt_fraction.unwrap_or(cfg.corrupt_fraction),
        seed,
        ..SyntheticSpec::default()
    };
    let hc = HarnessConfig {
        epochs: toy.epochs.unwrap_or(cfg.epochs),
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        temperature: cfg.temperature,
        alpha: cfg.alpha,
        beta: cfg.beta,
        eta: cfg.eta,
        filter: wora::FilterConfig { seed, ..cfg.filter },
        use_filter: !toy.no_filter,
        ..HarnessConfig::default()
    };
    spec.validate()?;
    hc.validate()?;
    Ok((spec, hc))
}

fn cmd_train_toy(a: TrainArgs, cfg: RunConfig) -> CmdResult {
    let (spec, hc) = toy_setup(&a.toy, &cfg)?;
    let bench = harness::prepare(&spec, &hc)?;
    let result = harness::run_experiment(a.method, a.rank.unwrap_or(cfg.rank), &bench, &hc)?;
    embio::write_json(&result, &a.out)?;
    println!(
        "{} rank {} R@1 {:.4} R@5 {:.4} R@10 {:.4} mAP {:.4} trainable {}",
        result.method,
        result.rank,
        result.r1(),
        result.recall[&5],
        result.recall[&10],
        result.map_score,
        result.trainable_params
    );
    Ok(())
}

fn cmd_rank_sweep(a: SweepArgs, cfg: RunConfig) -> CmdResult {
    let (spec, hc) = toy_setup(&a.toy, &cfg)?;
    let bench = harness::prepare(&spec, &hc)?;
    let results = harness::rank_sweep(&a.ranks, &bench, &hc, a.method)?;
    embio::write_json(&results, &a.out)?;
    let csv = harness::results_csv(&results);
    embio::write_atomic(&a.csv, |w| std::io::Write::write_all(w, csv.as_bytes()))?;
    for r in &results {
        println!("rank {:>3} R@1 {:.4} mAP {:.4}", r.rank, r.r1(), r.map_score);
    }
    Ok(())
}

fn cmd_param_count(a: ParamArgs, cfg: RunConfig) -> CmdResult {
    let (d_in, d_out) = a.dims;
    let rank = a.rank.unwrap_or(cfg.rank);
    wora::adapters::validate_rank(d_in, d_out, rank)?;
    let count = count_params_for(a.kind, d_in, d_out, rank);
    println!("{} trainable", count.trainable);
    println!("{} frozen", count.frozen);
    println!("{} total", count.total);
    for (name, n) in &count.breakdown {
        println!("  {name} {n}");
    }
    Ok(())
}
