//! Experiment orchestration: scenarios, suites, reports and heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeConfig, Method};
use crate::denoiser::{load_corpus, BigramDenoiser, ScriptedDenoiser, TrapGen, TrapSpec};
use crate::error::{Error, Result};
use crate::remask::RemaskPolicy;
use crate::scheduler::ScheduleConfig;
use crate::trace::{counts, final_confidences, read_jsonl, write_jsonl, TraceCounts};
use crate::types::{TokenId, TraceEvent};

/// `nfe_f / nfe`.
pub fn stagnation_rate(nfe_f: u64, nfe: u64) -> Result<f64> {
    if nfe == 0 {
        return Err(Error::usage("stagnation rate undefined for zero evaluations"));
    }
    if nfe_f > nfe {
        return Err(Error::usage(format!("NFE_f {nfe_f} exceeds NFE {nfe}")));
    }
    Ok(nfe_f as f64 / nfe as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ScenarioModel {
    Trap(TrapSpec),
    Bigram {
        prompt: Vec<u32>,
        truth: Vec<u32>,
        /// Relative paths resolve against the scenario file's directory.
        corpus: PathBuf,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
}

fn default_smoothing() -> f64 {
    crate::denoiser::DEFAULT_SMOOTHING
}

/// Scenario file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(flatten)]
    pub model: ScenarioModel,
}

#[derive(Clone, Debug)]
pub enum ScenarioDenoiser {
    Trap(ScriptedDenoiser),
    Bigram(BigramDenoiser),
}

/// A scenario with its denoiser built and ready to decode.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub prompt: Vec<TokenId>,
    pub truth: Vec<TokenId>,
    pub denoiser: ScenarioDenoiser,
}

fn to_tokens(v: &[u32]) -> Vec<TokenId> {
    v.iter().map(|&t| TokenId(t)).collect()
}

impl Scenario {
    pub fn trap(name: impl Into<String>, spec: TrapSpec) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            prompt: spec.prompt_tokens(),
            truth: spec.truth_tokens(),
            denoiser: ScenarioDenoiser::Trap(ScriptedDenoiser::new(spec)?),
        })
    }

    pub fn bigram(name: impl Into<String>, prompt: Vec<TokenId>, truth: Vec<TokenId>, model: BigramDenoiser) -> Self {
        Self {
            name: name.into(),
            prompt,
            truth,
            denoiser: ScenarioDenoiser::Bigram(model),
        }
    }

    pub fn from_file(file: ScenarioFile, base_dir: &Path) -> Result<Self> {
        match file.model {
            ScenarioModel::Trap(spec) => Self::trap(file.name, spec),
            ScenarioModel::Bigram {
                prompt,
                truth,
                corpus,
                smoothing,
            } => {
                let corpus = load_corpus(&base_dir.join(corpus))?;
                let model = BigramDenoiser::fit(&corpus, smoothing)?;
                Ok(Self::bigram(file.name, to_tokens(&prompt), to_tokens(&truth), model))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.into(),
            source,
        })?;
        Self::from_file(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.truth.len()
    }

    pub fn decode(&self, cfg: &DecodeConfig) -> Result<crate::decoder::DecodeResult> {
        match &self.denoiser {
            ScenarioDenoiser::Trap(d) => decode(d, &self.prompt, cfg),
            ScenarioDenoiser::Bigram(d) => decode(d, &self.prompt, cfg),
        }
    }
}

/// Load every `*.json` scenario in `dir`, sorted by file name.
pub fn load_scenarios(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    if paths.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no scenario files"),
        ));
    }
    paths.sort();
    paths.iter().map(|p| Scenario::load(p)).collect()
}

/// `n` random trap scenarios, `name` = `trap-NNN`, seeds `base_seed + i`.
pub fn trap_corpus(n: usize, params: &TrapGen, base_seed: u64) -> Result<Vec<TrapSpec>> {
    (0..n)
        .map(|i| TrapSpec::generate(params, base_seed + i as u64))
        .collect()
}

pub fn write_trap_corpus(dir: &Path, specs: &[TrapSpec]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, spec) in specs.iter().enumerate() {
        let file = ScenarioFile {
            name: format!("trap-{i:03}"),
            model: ScenarioModel::Trap(spec.clone()),
        };
        let path = dir.join(format!("trap-{i:03}.json"));
        let text = serde_json::to_string_pretty(&file).expect("scenario serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One point of a configuration grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub schedule: ScheduleConfig,
    pub remask: RemaskPolicy,
}

impl GridPoint {
    pub fn label(&self) -> String {
        let s = &self.schedule;
        format!(
            "f={} f_r={} lambda={} R={} remask={}",
            s.f, s.f_r, s.lambda, s.rollback_budget, self.remask
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub block_len: usize,
    pub base_seed: u64,
    pub use_cache: bool,
    /// Worker threads; `None` uses all cores.
    pub workers: Option<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            block_len: 32,
            base_seed: 0,
            use_cache: true,
            workers: None,
        }
    }
}

/// Adjust a grid point to what `method` accepts: BLOCK runs without
/// rollback, and only RDD* keeps a separate recovery factor. Grid points
/// that collapse to the same effective schedule run once.
pub fn cell_schedule(method: Method, s: ScheduleConfig) -> ScheduleConfig {
    match method {
        Method::Block => ScheduleConfig {
            f_r: s.f,
            rollback_budget: 0,
            ..s
        },
        Method::Rdd | Method::Vanilla => ScheduleConfig { f_r: s.f, ..s },
        Method::RddStar => s,
    }
}

/// Per-cell record; everything needed to rebuild a report row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub scenario: String,
    pub method: Method,
    pub config: String,
    pub seed: u64,
    pub generated: usize,
    pub exact_match: bool,
    pub wall_time: f64,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub summary: CellSummary,
    pub trace: Vec<TraceEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub config: String,
    pub runs: usize,
    /// Generated tokens per second of wall time.
    pub throughput: f64,
    /// Seconds per sample.
    pub latency: f64,
    pub nfe: u64,
    pub nfe_f: u64,
    pub stagnation_rate: f64,
    /// Exact-match fraction.
    pub score: f64,
    pub rollbacks: u64,
    pub remasks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

pub fn run_suite(
    scenarios: &[Scenario],
    methods: &[Method],
    grid: &[GridPoint],
    cfg: &SuiteConfig,
) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    for (si, sc) in scenarios.iter().enumerate() {
        for &method in methods {
            let mut seen: Vec<GridPoint> = Vec::new();
            for point in grid {
                let effective = GridPoint {
                    schedule: cell_schedule(method, point.schedule),
                    remask: point.remask,
                };
                if seen.contains(&effective) {
                    continue;
                }
                seen.push(effective.clone());
                cells.push((cells.len(), si, sc, method, effective));
            }
        }
    }
    let run = |(cell, si, sc, method, point): &(usize, usize, &Scenario, Method, GridPoint)| {
        let (cell, si, method) = (*cell, *si, *method);
        let mut dc = DecodeConfig::new(method, cfg.block_len, sc.total_len(), point.schedule);
        dc.seed = cfg.base_seed + si as u64;
        dc.remask = point.remask;
        dc.use_cache = cfg.use_cache;
        let res = sc.decode(&dc)?;
        let tokens: Vec<u32> = res.buffer.generated().iter().map(|t| t.0).collect();
        Ok(CellResult {
            summary: CellSummary {
                cell,
                scenario: sc.name.clone(),
                method,
                config: point.label(),
                seed: dc.seed,
                generated: sc.truth.len(),
                exact_match: res.buffer.generated() == &sc.truth[..],
                wall_time: res.metrics.wall_time,
                tokens,
            },
            trace: res.trace,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::usage(format!("worker pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run).collect())
}

/// Aggregate cells into report rows, one per (method, config) in order of
/// first appearance.
pub fn build_report(cells: &[(CellSummary, TraceCounts)]) -> Result<RunReport> {
    let mut order: Vec<(Method, String)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&(CellSummary, TraceCounts)>> = BTreeMap::new();
    let mut sorted: Vec<&(CellSummary, TraceCounts)> = cells.iter().collect();
    sorted.sort_by_key(|c| c.0.cell);
    for c in sorted {
        let key = (c.0.method, c.0.config.clone());
        let idx = match order.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                order.push(key);
                order.len() - 1
            }
        };
        groups.entry(idx).or_default().push(c);
    }
    let rows = groups
        .into_iter()
        .map(|(idx, cs)| {
            let (method, config) = order[idx].clone();
            let runs = cs.len();
            let wall: f64 = cs.iter().map(|c| c.0.wall_time).sum();
            let tokens: usize = cs.iter().map(|c| c.0.generated).sum();
            let nfe: u64 = cs.iter().map(|c| c.1.nfe).sum();
            let nfe_f: u64 = cs.iter().map(|c| c.1.nfe_f).sum();
            let hits = cs.iter().filter(|c| c.0.exact_match).count();
            Ok(ReportRow {
                method,
                config,
                runs,
                throughput: if wall > 0.0 { tokens as f64 / wall } else { 0.0 },
                latency: wall / runs as f64,
                nfe,
                nfe_f,
                stagnation_rate: stagnation_rate(nfe_f, nfe)?,
                score: hits as f64 / runs as f64,
                rollbacks: cs.iter().map(|c| c.1.rollbacks).sum(),
                remasks: cs.iter().map(|c| c.1.remasked).sum(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(RunReport { rows })
}

pub fn report_from_results(results: &[CellResult]) -> Result<RunReport> {
    let cells: Vec<_> = results
        .iter()
        .map(|r| (r.summary.clone(), counts(&r.trace)))
        .collect();
    build_report(&cells)
}

impl RunReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| method | config | runs | throughput (tok/s) | latency (s) | NFE | NFE_f | r_s | score | rollbacks | remasks |\n\
             |---|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.1} | {:.6} | {} | {} | {:.2}% | {:.2}% | {} | {} |",
                r.method,
                r.config,
                r.runs,
                r.throughput,
                r.latency,
                r.nfe,
                r.nfe_f,
                100.0 * r.stagnation_rate,
                100.0 * r.score,
                r.rollbacks,
                r.remasks
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, method: Method) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn cell_stem(s: &CellSummary) -> String {
    format!("cell-{:05}", s.cell)
}

/// Write every cell as `traces/cell-NNNNN.trace.jsonl` plus a
/// `cell-NNNNN.json` summary.
pub fn write_archive(dir: &Path, results: &[CellResult]) -> Result<()> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    for r in results {
        let stem = cell_stem(&r.summary);
        write_jsonl(&traces.join(format!("{stem}.trace.jsonl")), &r.trace)?;
        let path = traces.join(format!("{stem}.json"));
        let text = serde_json::to_string(&r.summary).expect("summary serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Rebuild a report from an archive written by [`write_archive`].
pub fn report_from_archive(dir: &Path) -> Result<RunReport> {
    let traces = dir.join("traces");
    let mut cells = Vec::new();
    for entry in fs::read_dir(&traces).map_err(|e| Error::io(&traces, e))? {
        let path = entry.map_err(|e| Error::io(&traces, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.ends_with(".json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: CellSummary = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.clone(),
            source,
        })?;
        let trace = read_jsonl(&traces.join(format!("{}.trace.jsonl", cell_stem(&summary))))?;
        cells.push((summary, counts(&trace)));
    }
    build_report(&cells)
}

/// Per-position commit confidence of a finished decode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub positions: Vec<usize>,
    pub confidences: Vec<f64>,
    pub mean: f64,
    pub fraction_below: f64,
    pub cutoff: f64,
}

pub const HEATMAP_CUTOFF: f64 = 0.7;

pub fn export_heatmap(trace: &[TraceEvent], prompt_len: usize, total_len: usize) -> Result<Heatmap> {
    let done = trace
        .last()
        .is_some_and(|e| e.kind == crate::types::EventKind::BlockDone && e.window.end == total_len);
    if !done || total_len <= prompt_len {
        return Err(Error::usage("trace is incomplete"));
    }
    let confidences = final_confidences(trace, prompt_len, total_len)?;
    let n = confidences.len() as f64;
    let mean = confidences.iter().sum::<f64>() / n;
    let below = confidences.iter().filter(|&&c| c < HEATMAP_CUTOFF).count() as f64 / n;
    Ok(Heatmap {
        positions: (prompt_len..total_len).collect(),
        confidences,
        mean,
        fraction_below: below,
        cutoff: HEATMAP_CUTOFF,
    })
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,confidence\n");
        for (p, c) in self.positions.iter().zip(&self.confidences) {
            let _ = writeln!(s, "{p},{c}");
        }
        s
    }
}
