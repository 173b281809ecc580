mod grid;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rdd_core::denoiser::{load_corpus, BigramDenoiser, ScriptedDenoiser, TrapGen, TrapSpec, DEFAULT_SMOOTHING};
use rdd_core::harness::{
    export_heatmap, load_scenarios, report_from_archive, report_from_results, run_suite, trap_corpus,
    write_archive, write_trap_corpus, Scenario, SuiteConfig,
};
use rdd_core::trace::{check_trace, read_jsonl, write_jsonl, TraceShape};
use rdd_core::wire::WireDenoiser;
use rdd_core::{
    decode, BlockGrid, DecodeConfig, DecodeResult, Error, EventKind, Method, RemaskPolicy, ScheduleConfig,
    TokenId, TraceEvent,
};

#[derive(Parser)]
#[command(name = "rdd", version, about = "Reversible block diffusion decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one decode and write its trace and final sequence.
    Decode(DecodeArgs),
    /// Run every scenario x method x grid point and write a report.
    Suite(SuiteArgs),
    /// Rebuild a suite report from its trace archive.
    Report {
        /// Directory written by `suite`.
        archive: PathBuf,
    },
    /// Commit-confidence CSV for a finished trace.
    Heatmap {
        trace: PathBuf,
        /// CSV destination; defaults to the trace path with `.heatmap.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a block-decoding trace against the transition rules.
    Check {
        trace: PathBuf,
        #[arg(long = "rollback-budget", default_value_t = 1)]
        rollback_budget: u32,
    },
    /// Generate a random trap scenario corpus.
    GenTraps(GenTrapsArgs),
}

#[derive(Args, Clone, Default)]
struct ScheduleArgs {
    #[arg(long)]
    f: Option<f64>,
    #[arg(long = "f-r")]
    f_r: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "rollback-budget")]
    rollback_budget: Option<u32>,
    /// `confidence` or `random:<ratio>`.
    #[arg(long)]
    remask: Option<String>,
    #[arg(long = "block-len")]
    block_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute every block summary on every evaluation.
    #[arg(long = "no-cache")]
    no_cache: bool,
}

#[derive(Args)]
struct DecodeArgs {
    /// vanilla | block | rdd | rdd-star
    #[arg(long)]
    method: Option<String>,
    /// scripted:trap1 | scripted:<spec.json> | bigram:<corpus> | wire:<command>
    #[arg(long)]
    model: Option<String>,
    #[arg(long = "gen-len")]
    gen_len: Option<usize>,
    /// Whitespace-separated prompt token ids (bigram and wire models).
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long = "step-cap")]
    step_cap: Option<u64>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// TOML file with the same keys as the echoed config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "RDD_OUT_DIR", default_value = "rdd-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    /// Directory of scenario JSON files.
    #[arg(long)]
    scenarios: PathBuf,
    /// Comma-separated methods.
    #[arg(long, default_value = "block,rdd")]
    methods: String,
    /// Sweep, e.g. `f=0.5:3.5:0.25`, `R=0,1,2`, `remask=confidence,random:0.25`.
    /// Repeat to take the Cartesian product.
    #[arg(long)]
    grid: Vec<String>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, env = "RDD_OUT_DIR", default_value = "rdd-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenTrapsArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "vocab-size", default_value_t = 16)]
    vocab_size: u32,
    #[arg(long = "prompt-len", default_value_t = 32)]
    prompt_len: usize,
    #[arg(long = "gen-len", default_value_t = 256)]
    gen_len: usize,
    #[arg(long = "block-len", default_value_t = 32)]
    block_len: usize,
    #[arg(long, default_value_t = 1)]
    traps: usize,
    #[arg(long = "c-high", default_value_t = 0.99)]
    c_high: f64,
    #[arg(long = "c-low", default_value_t = 0.6)]
    c_low: f64,
    #[arg(long = "decoy-confidence", default_value_t = 0.62)]
    decoy_confidence: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Fully resolved decode settings; printed before every run and accepted
/// back through `--config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    method: Option<String>,
    model: Option<String>,
    gen_len: Option<usize>,
    block_len: Option<usize>,
    f: Option<f64>,
    f_r: Option<f64>,
    lambda: Option<f64>,
    rollback_budget: Option<u32>,
    remask: Option<String>,
    seed: Option<u64>,
    cache: Option<bool>,
    prompt: Option<Vec<u32>>,
    smoothing: Option<f64>,
    step_cap: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Internal(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(_) | Error::RollbackAtOrigin { .. } => CliError::Usage(e.to_string()),
            Error::Io { .. } | Error::Parse { .. } | Error::Wire(_) => CliError::Io(e.to_string()),
            Error::CacheMiss { .. } | Error::Runaway { .. } | Error::Contract(_) => {
                CliError::Internal(e.to_string())
            }
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_prompt(s: &str) -> CliResult<Vec<u32>> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .map(|w| w.parse().map_err(|_| usage(format!("bad prompt token {w:?}"))))
        .collect()
}

fn resolve(args: &DecodeArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let s = &args.schedule;
    macro_rules! over {
        ($field:ident, $val:expr) => {
            if let Some(v) = $val {
                cfg.$field = Some(v);
            }
        };
    }
    over!(method, args.method.clone());
    over!(model, args.model.clone());
    over!(gen_len, args.gen_len);
    over!(block_len, s.block_len);
    over!(f, s.f);
    over!(f_r, s.f_r);
    over!(lambda, s.lambda);
    over!(rollback_budget, s.rollback_budget);
    over!(remask, s.remask.clone());
    over!(seed, s.seed);
    over!(smoothing, args.smoothing);
    over!(step_cap, args.step_cap);
    if s.no_cache {
        cfg.cache = Some(false);
    }
    if let Some(p) = &args.prompt {
        cfg.prompt = Some(parse_prompt(p)?);
    }

    let method: Method = cfg
        .method
        .get_or_insert_with(|| "rdd".into())
        .parse()
        .map_err(CliError::from)?;
    if cfg.model.is_none() {
        return Err(usage("--model is required"));
    }
    let f = *cfg.f.get_or_insert(0.9);
    cfg.f_r.get_or_insert(f);
    cfg.lambda.get_or_insert(1.0);
    let default_r = if method == Method::Block { 0 } else { 1 };
    cfg.rollback_budget.get_or_insert(default_r);
    cfg.block_len.get_or_insert(32);
    cfg.remask.get_or_insert_with(|| "confidence".into());
    cfg.seed.get_or_insert(0);
    cfg.cache.get_or_insert(true);
    Ok(cfg)
}

enum Model {
    Scripted(ScriptedDenoiser),
    Bigram(BigramDenoiser),
    Wire(String),
}

fn load_model(cfg: &mut RunConfig) -> CliResult<Model> {
    let spec = cfg.model.clone().unwrap_or_default();
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| usage(format!("model {spec:?} must look like kind:argument")))?;
    match kind {
        "scripted" => {
            let trap = if arg == "trap1" {
                TrapSpec::canonical()
            } else {
                TrapSpec::load(Path::new(arg))?
            };
            if cfg.prompt.is_some() {
                return Err(usage("scripted models carry their own prompt"));
            }
            match cfg.gen_len {
                Some(g) if g != trap.truth.len() => {
                    return Err(usage(format!(
                        "scripted model generates {} tokens, --gen-len is {g}",
                        trap.truth.len()
                    )))
                }
                _ => cfg.gen_len = Some(trap.truth.len()),
            }
            Ok(Model::Scripted(ScriptedDenoiser::new(trap)?))
        }
        "bigram" => {
            if cfg.prompt.is_none() {
                return Err(usage("bigram models need --prompt"));
            }
            let corpus = load_corpus(Path::new(arg))?;
            let smoothing = *cfg.smoothing.get_or_insert(DEFAULT_SMOOTHING);
            cfg.gen_len.get_or_insert(256);
            Ok(Model::Bigram(BigramDenoiser::fit(&corpus, smoothing)?))
        }
        "wire" => {
            cfg.gen_len.get_or_insert(256);
            if cfg.prompt.is_none() {
                return Err(usage("wire models need --prompt"));
            }
            Ok(Model::Wire(arg.to_string()))
        }
        other => Err(usage(format!("unknown model kind {other:?}"))),
    }
}

fn decode_config(cfg: &RunConfig, prompt_len: usize) -> CliResult<DecodeConfig> {
    let schedule = ScheduleConfig {
        f: cfg.f.unwrap(),
        f_r: cfg.f_r.unwrap(),
        lambda: cfg.lambda.unwrap(),
        rollback_budget: cfg.rollback_budget.unwrap(),
    };
    let method: Method = cfg.method.as_deref().unwrap().parse()?;
    let mut dc = DecodeConfig::new(method, cfg.block_len.unwrap(), prompt_len + cfg.gen_len.unwrap(), schedule);
    dc.seed = cfg.seed.unwrap();
    dc.remask = cfg.remask.as_deref().unwrap().parse()?;
    dc.use_cache = cfg.cache.unwrap();
    dc.step_cap = cfg.step_cap;
    dc.validate(prompt_len)?;
    Ok(dc)
}

fn metrics_line(res: &DecodeResult) -> String {
    let m = &res.metrics;
    let r_s = if m.nfe > 0 { m.nfe_f as f64 / m.nfe as f64 } else { 0.0 };
    format!(
        "metrics: nfe={} nfe_f={} r_s={:.4} rollbacks={} remasked={} wall_time={:.6}s",
        m.nfe, m.nfe_f, r_s, m.rollback_count, m.remasked_token_count, m.wall_time
    )
}

#[derive(Serialize)]
struct DecodeOutput<'a> {
    config: &'a RunConfig,
    tokens: Vec<u32>,
    generated: Vec<u32>,
    matches_truth: Option<bool>,
    nfe: u64,
    nfe_f: u64,
    rollback_count: u64,
    remasked_token_count: u64,
    wall_time: f64,
}

fn cmd_decode(args: DecodeArgs) -> CliResult<()> {
    let mut cfg = resolve(&args)?;
    let model = load_model(&mut cfg)?;
    let (prompt, truth): (Vec<TokenId>, Option<Vec<TokenId>>) = match &model {
        Model::Scripted(d) => (d.spec().prompt_tokens(), Some(d.spec().truth_tokens())),
        _ => (cfg.prompt.clone().unwrap().into_iter().map(TokenId).collect(), None),
    };
    let dc = decode_config(&cfg, prompt.len())?;

    println!("# config");
    print!("{}", toml::to_string(&cfg).map_err(|e| CliError::Internal(e.to_string()))?);
    let res = match &model {
        Model::Scripted(d) => decode(d, &prompt, &dc)?,
        Model::Bigram(d) => decode(d, &prompt, &dc)?,
        Model::Wire(cmd) => decode(&WireDenoiser::spawn(cmd)?, &prompt, &dc)?,
    };
    println!("{}", metrics_line(&res));

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let stem = format!("{}-seed{}", dc.method, dc.seed);
    let trace_path = args.out.join(format!("{stem}.trace.jsonl"));
    write_jsonl(&trace_path, &res.trace)?;
    let out = DecodeOutput {
        config: &cfg,
        tokens: res.buffer.tokens().iter().map(|t| t.0).collect(),
        generated: res.buffer.generated().iter().map(|t| t.0).collect(),
        matches_truth: truth.map(|t| t == res.buffer.generated()),
        nfe: res.metrics.nfe,
        nfe_f: res.metrics.nfe_f,
        rollback_count: res.metrics.rollback_count,
        remasked_token_count: res.metrics.remasked_token_count,
        wall_time: res.metrics.wall_time,
    };
    let out_path = args.out.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&out).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&out_path, text).map_err(|e| io_err(&out_path, e))?;
    println!("trace: {}", trace_path.display());
    println!("output: {}", out_path.display());
    Ok(())
}

fn cmd_suite(args: SuiteArgs) -> CliResult<()> {
    let scenarios: Vec<Scenario> = load_scenarios(&args.scenarios)?;
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .map(|m| m.trim().parse::<Method>())
        .collect::<Result<_, _>>()?;
    let s = &args.schedule;
    let base = ScheduleConfig {
        f: s.f.unwrap_or(0.9),
        f_r: s.f_r.or(s.f).unwrap_or(0.9),
        lambda: s.lambda.unwrap_or(1.0),
        rollback_budget: s.rollback_budget.unwrap_or(1),
    };
    let remask: RemaskPolicy = s.remask.as_deref().unwrap_or("confidence").parse()?;
    let points = grid::expand(&args.grid, base, remask, s.f_r.is_some())?;
    let suite = SuiteConfig {
        block_len: s.block_len.unwrap_or(32),
        base_seed: s.seed.unwrap_or(0),
        use_cache: !s.no_cache,
        workers: args.workers,
    };
    println!(
        "# suite: {} scenarios x {} methods x {} grid points, block_len={} base_seed={} cache={}",
        scenarios.len(),
        methods.len(),
        points.len(),
        suite.block_len,
        suite.base_seed,
        suite.use_cache
    );
    let results = run_suite(&scenarios, &methods, &points, &suite)?;
    let report = report_from_results(&results)?;
    write_archive(&args.out, &results)?;
    write_report(&args.out, &report)?;
    print!("{}", report.to_markdown());
    println!("archive: {}", args.out.display());
    Ok(())
}

fn write_report(dir: &Path, report: &rdd_core::harness::RunReport) -> CliResult<()> {
    for (name, text) in [("report.md", report.to_markdown()), ("report.json", report.to_json())] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Prompt and total length of a block-decoding trace.
fn trace_span(trace: &[TraceEvent]) -> CliResult<(usize, usize)> {
    let first = trace.first().ok_or_else(|| usage("trace is empty"))?;
    let last = trace.last().unwrap();
    if last.kind != EventKind::BlockDone {
        return Err(usage("trace is incomplete"));
    }
    Ok((first.window.start, last.window.end))
}

fn cmd_heatmap(trace_path: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let trace = read_jsonl(trace_path)?;
    let (prompt_len, total_len) = trace_span(&trace)?;
    let h = export_heatmap(&trace, prompt_len, total_len)?;
    let out = out.unwrap_or_else(|| {
        let name = trace_path.file_name().and_then(|n| n.to_str()).unwrap_or("trace");
        let stem = name.strip_suffix(".trace.jsonl").or_else(|| name.strip_suffix(".jsonl")).unwrap_or(name);
        trace_path.with_file_name(format!("{stem}.heatmap.csv"))
    });
    fs::write(&out, h.to_csv()).map_err(|e| io_err(&out, e))?;
    println!(
        "positions={} mean_confidence={:.4} below_{}={:.4}",
        h.positions.len(),
        h.mean,
        h.cutoff,
        h.fraction_below
    );
    println!("heatmap: {}", out.display());
    Ok(())
}

fn cmd_check(trace_path: &Path, rollback_budget: u32) -> CliResult<()> {
    let trace = read_jsonl(trace_path)?;
    let (prompt_len, total_len) = trace_span(&trace)?;
    let block_len = trace[0].window.block_len;
    let grid = BlockGrid::new(prompt_len, total_len, block_len)?;
    let c = check_trace(&trace, &TraceShape { grid, rollback_budget })?;
    println!(
        "ok: {} events, nfe={} nfe_f={} rollbacks={} remasked={}",
        trace.len(),
        c.nfe,
        c.nfe_f,
        c.rollbacks,
        c.remasked
    );
    Ok(())
}

fn cmd_gen_traps(a: GenTrapsArgs) -> CliResult<()> {
    let gen = TrapGen {
        vocab_size: a.vocab_size,
        prompt_len: a.prompt_len,
        gen_len: a.gen_len,
        block_len: a.block_len,
        traps: a.traps,
        c_high: a.c_high,
        c_low: a.c_low,
        decoy_confidence: a.decoy_confidence,
    };
    let specs = trap_corpus(a.count, &gen, a.seed)?;
    write_trap_corpus(&a.out, &specs)?;
    println!("wrote {} scenarios to {}", specs.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Decode(a) => cmd_decode(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Report { archive } => {
            let report = report_from_archive(&archive)?;
            write_report(&archive, &report)?;
            print!("{}", report.to_markdown());
            Ok(())
        }
        Command::Heatmap { trace, out } => cmd_heatmap(&trace, out),
        Command::Check {
            trace,
            rollback_budget,
        } => cmd_check(&trace, rollback_budget),
        Command::GenTraps(a) => cmd_gen_traps(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(4)
        }
    }
}
