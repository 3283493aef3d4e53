//! Command-line front end: synthesize traces, label them, train components,
//! run baselines and sweeps, and compare saved reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use prefetch_rag::bench::{
    self, compare, sweep_hyper, sweep_latency, BenchReport, CompareRow, Experiment, HyperParam, MetricsReport, ModeRow, ReportHeader,
    SweepReport, SweepRows,
};
use prefetch_rag::config::{self, Config};
use prefetch_rag::monitor::MonitorParams;
use prefetch_rag::parallel::Exec;
use prefetch_rag::policy::{write_reward_events, PolicyParams};
use prefetch_rag::predictor::PredictorParams;
use prefetch_rag::runtime::log::export_logs;
use prefetch_rag::runtime::{Bundle, Mode};
use prefetch_rag::synth::{export_traces, import_traces, label_oracle, synth_batch, SynthConfig, Trace};

#[derive(Parser)]
#[command(name = "prefetch-rag", version, about = "Predictive retrieval prefetching simulator")]
struct Cli {
    /// TOML config; the PREFETCH_RAG_CONFIG environment variable takes precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run without worker threads.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic traces (and optionally the corpus) as JSON lines.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of traces; defaults to bench.eval_queries.
        #[arg(long)]
        count: Option<usize>,
        /// Tokens per trace; defaults to synth.n_tokens.
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the document corpus here.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Oracle-label the crossings of saved traces.
    Label {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train predictor and monitor; write binary parameter files.
    Train {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run retrieval modes over evaluation traces.
    Bench {
        /// Comma-separated mode names, or "all".
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory written by `train`; trained on the fly when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Evaluate these traces instead of synthesizing them.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep retrieval latency or one predictive hyperparameter.
    Sweep {
        /// latency, tau_rag, horizon or theta.
        #[arg(long, default_value = "latency")]
        param: String,
        /// Comma-separated values; the latency grid defaults to bench.latency_grid_ms.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare modes of a saved bench report.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated modes; reductions are relative to the first.
        #[arg(long, default_value = "sync_reactive,predictive")]
        compare: String,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg_path = config::resolve_path(cli.config.as_deref());
    let cfg = match &cfg_path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.cmd {
        Cmd::Synth {
            seed,
            count,
            tokens,
            out,
            corpus,
        } => synth(&cfg, exec, seed, count, tokens, &out, corpus.as_deref()),
        Cmd::Label { traces, out } => label(&cfg, exec, &traces, &out),
        Cmd::Train { seed, out } => train(&cfg, exec, seed, &out),
        Cmd::Bench {
            mode,
            seed,
            params,
            traces,
            out,
        } => bench_cmd(&cfg, exec, &mode, seed, params.as_deref(), traces.as_deref(), &out),
        Cmd::Sweep {
            param,
            grid,
            seed,
            params,
            out,
        } => sweep(&cfg, exec, &param, grid.as_deref(), seed, params.as_deref(), &out),
        Cmd::Report { input, compare, out } => report(&input, &compare, out.as_deref()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn synth(
    cfg: &Config,
    exec: Exec,
    seed: u64,
    count: Option<usize>,
    tokens: Option<usize>,
    out: &Path,
    corpus: Option<&Path>,
) -> Result<()> {
    let sc = SynthConfig {
        n_tokens: tokens.unwrap_or(cfg.synth.n_tokens),
        ..cfg.synth.clone()
    };
    let traces = synth_batch(&sc, seed, count.unwrap_or(cfg.bench.eval_queries), exec)?;
    export_traces(&traces, out)?;
    eprintln!("wrote {} traces to {}", traces.len(), out.display());
    if let Some(p) = corpus {
        Experiment::new(cfg.clone(), seed, exec)?.env.retriever.corpus.export(p)?;
        eprintln!("wrote corpus to {}", p.display());
    }
    Ok(())
}

fn label(cfg: &Config, exec: Exec, traces: &Path, out: &Path) -> Result<()> {
    let traces = import_traces(traces)?;
    let exp = Experiment::new(cfg.clone(), 0, exec)?;
    let mut w = create(out)?;
    let mut n = 0;
    for t in &traces {
        for inst in label_oracle(t, &exp.env.retriever, &cfg.labels) {
            serde_json::to_writer(&mut w, &inst)?;
            w.write_all(b"\n")?;
            n += 1;
        }
    }
    w.flush()?;
    eprintln!("wrote {n} labeled crossings to {}", out.display());
    Ok(())
}

const PREDICTOR_FILE: &str = "predictor.bin";
const MONITOR_FILE: &str = "monitor.bin";
const POLICY_FILE: &str = "policy.bin";

fn train(cfg: &Config, exec: Exec, seed: u64, out: &Path) -> Result<()> {
    let exp = Experiment::new(cfg.clone(), seed, exec)?;
    let b = exp.train_bundle()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    b.predictor.save(&out.join(PREDICTOR_FILE))?;
    b.monitor.save(&out.join(MONITOR_FILE))?;
    b.policy.save(&out.join(POLICY_FILE))?;
    eprintln!("wrote parameters to {}", out.display());
    Ok(())
}

fn load_bundle(dir: &Path) -> Result<Bundle> {
    let ctx = |f: &str| format!("reading {}", dir.join(f).display());
    Ok(Bundle {
        predictor: PredictorParams::load(&dir.join(PREDICTOR_FILE)).with_context(|| ctx(PREDICTOR_FILE))?,
        monitor: MonitorParams::load(&dir.join(MONITOR_FILE)).with_context(|| ctx(MONITOR_FILE))?,
        policy: PolicyParams::load(&dir.join(POLICY_FILE)).with_context(|| ctx(POLICY_FILE))?,
    })
}

fn bundle_for(exp: &Experiment, params: Option<&Path>) -> Result<Bundle> {
    match params {
        Some(dir) => load_bundle(dir),
        None => {
            eprintln!("no --params given; training");
            Ok(exp.train_bundle()?)
        }
    }
}

fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    if s.trim() == "all" {
        return Ok(Mode::ALL.to_vec());
    }
    let modes: Vec<Mode> = s
        .split(',')
        .map(|m| Mode::parse(&m.trim().replace('-', "_")))
        .collect::<prefetch_rag::Result<_>>()?;
    if modes.is_empty() {
        bail!("no modes given");
    }
    Ok(modes)
}

/// Flat CSV form of one bench row.
#[derive(Serialize)]
struct BenchCsvRow<'a> {
    version: u32,
    config_hash: &'a str,
    seed: u64,
    mode: &'static str,
    n_queries: usize,
    ttft_ms: f64,
    e2e_ms: f64,
    e2e_p50: f64,
    e2e_p95: f64,
    e2e_p99: f64,
    ret_per_1k: f64,
    hit_rate: f64,
    sim_em: f64,
    sim_f1: f64,
    efficiency: f64,
    qal: Option<f64>,
    auroc: Option<f64>,
    mean_lead_time: Option<f64>,
    mean_qrs: Option<f64>,
    retrievals: usize,
    prefetches: usize,
    triggers: usize,
    skips: usize,
    fallbacks: usize,
    cancelled: usize,
    fp_total: usize,
    fp_rate: Option<f64>,
    fp_reuse_within_50: usize,
}

impl<'a> BenchCsvRow<'a> {
    fn new(h: &'a ReportHeader, mode: Mode, m: &MetricsReport) -> Self {
        BenchCsvRow {
            version: h.version,
            config_hash: &h.config_hash,
            seed: h.seed,
            mode: mode.name(),
            n_queries: m.n_queries,
            ttft_ms: m.ttft_ms,
            e2e_ms: m.e2e_ms,
            e2e_p50: m.e2e_percentiles.p50,
            e2e_p95: m.e2e_percentiles.p95,
            e2e_p99: m.e2e_percentiles.p99,
            ret_per_1k: m.ret_per_1k,
            hit_rate: m.hit_rate,
            sim_em: m.sim_em,
            sim_f1: m.sim_f1,
            efficiency: m.efficiency,
            qal: m.qal,
            auroc: m.auroc,
            mean_lead_time: m.mean_lead_time,
            mean_qrs: m.mean_qrs,
            retrievals: m.retrievals,
            prefetches: m.prefetches,
            triggers: m.triggers,
            skips: m.skips,
            fallbacks: m.fallbacks,
            cancelled: m.cancelled,
            fp_total: m.fp_total,
            fp_rate: m.fp_rate,
            fp_reuse_within_50: m.fp_reuse_within_50,
        }
    }
}

fn bench_cmd(cfg: &Config, exec: Exec, modes: &str, seed: u64, params: Option<&Path>, traces: Option<&Path>, out: &Path) -> Result<()> {
    let modes = parse_modes(modes)?;
    let exp = Experiment::new(cfg.clone(), seed, exec)?;
    let traces: Vec<Trace> = match traces {
        Some(p) => import_traces(p)?,
        None => exp.eval_traces()?,
    };
    let bundle = if modes.contains(&Mode::Predictive) {
        Some(bundle_for(&exp, params)?)
    } else {
        None
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut rewards = Vec::new();
    for &mode in &modes {
        let (metrics, outs) = exp.run(mode, &traces, bundle.as_ref())?;
        eprintln!(
            "{:<18} ttft {:>8.1} ms  e2e {:>9.1} ms  hit {:.3}  ret/1k {:>6.2}",
            mode.name(),
            metrics.ttft_ms,
            metrics.e2e_ms,
            metrics.hit_rate,
            metrics.ret_per_1k
        );
        for o in outs {
            logs.push(o.log);
            rewards.extend(o.rewards);
        }
        rows.push(ModeRow { mode, metrics });
    }
    let report = BenchReport {
        header: ReportHeader::new("bench", cfg, seed),
        rows,
    };
    write_json(&out.join("report.json"), &report)?;
    let csv_rows: Vec<BenchCsvRow> = report
        .rows
        .iter()
        .map(|r| BenchCsvRow::new(&report.header, r.mode, &r.metrics))
        .collect();
    let mut w = create(&out.join("report.csv"))?;
    write_csv(&mut w, &csv_rows)?;
    w.flush()?;
    export_logs(&logs, &out.join("events.jsonl"))?;
    let mut w = create(&out.join("rewards.jsonl"))?;
    write_reward_events(&rewards, &mut w)?;
    w.flush()?;
    eprintln!("wrote report, events and rewards to {}", out.display());
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad grid value {v:?}")))
        .collect()
}

#[derive(Serialize)]
struct LatencyCsvRow<'a> {
    version: u32,
    config_hash: &'a str,
    seed: u64,
    latency_ms: f64,
    ttft_reduction: f64,
    e2e_reduction: f64,
    hit_rate: f64,
}

#[derive(Serialize)]
struct HyperCsvRow<'a> {
    version: u32,
    config_hash: &'a str,
    seed: u64,
    param: &'static str,
    value: f64,
    auroc: Option<f64>,
    hit_rate: f64,
    ret_per_1k: f64,
    mean_lead_time: Option<f64>,
    e2e_ms: f64,
}

fn sweep(cfg: &Config, exec: Exec, param: &str, grid: Option<&str>, seed: u64, params: Option<&Path>, out: &Path) -> Result<()> {
    let exp = Experiment::new(cfg.clone(), seed, exec)?;
    let traces = exp.eval_traces()?;
    let bundle = bundle_for(&exp, params)?;
    let header = ReportHeader::new("sweep", cfg, seed);
    let sweep = if param == "latency" {
        let grid = match grid {
            Some(g) => parse_grid(g)?,
            None => cfg.bench.latency_grid_ms.clone(),
        };
        SweepRows::Latency {
            rows: sweep_latency(&exp, &bundle, &traces, &grid)?,
        }
    } else {
        let p = HyperParam::parse(param)?;
        let grid = parse_grid(grid.context("--grid is required for hyperparameter sweeps")?)?;
        SweepRows::Hyper {
            rows: sweep_hyper(&exp, &bundle, &traces, p, &grid)?,
        }
    };
    let report = SweepReport { header, sweep };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("sweep.json"), &report)?;
    let h = &report.header;
    let mut w = create(&out.join("sweep.csv"))?;
    match &report.sweep {
        SweepRows::Latency { rows } => {
            let rows: Vec<LatencyCsvRow> = rows
                .iter()
                .map(|r| LatencyCsvRow {
                    version: h.version,
                    config_hash: &h.config_hash,
                    seed: h.seed,
                    latency_ms: r.latency_ms,
                    ttft_reduction: r.ttft_reduction,
                    e2e_reduction: r.e2e_reduction,
                    hit_rate: r.hit_rate,
                })
                .collect();
            write_csv(&mut w, &rows)?;
        }
        SweepRows::Hyper { rows } => {
            let rows: Vec<HyperCsvRow> = rows
                .iter()
                .map(|r| HyperCsvRow {
                    version: h.version,
                    config_hash: &h.config_hash,
                    seed: h.seed,
                    param: r.param.name(),
                    value: r.value,
                    auroc: r.auroc,
                    hit_rate: r.hit_rate,
                    ret_per_1k: r.ret_per_1k,
                    mean_lead_time: r.mean_lead_time,
                    e2e_ms: r.e2e_ms,
                })
                .collect();
            write_csv(&mut w, &rows)?;
        }
    }
    w.flush()?;
    eprintln!("wrote sweep to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct CompareCsvRow<'a> {
    version: u32,
    config_hash: &'a str,
    seed: u64,
    mode: &'static str,
    ttft_ms: f64,
    e2e_ms: f64,
    sim_em: f64,
    sim_f1: f64,
    efficiency: f64,
    qal: Option<f64>,
    hit_rate: f64,
    ret_per_1k: f64,
    ttft_reduction: f64,
    e2e_reduction: f64,
}

fn report(input: &Path, modes: &str, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report: BenchReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
    if report.header.version != bench::REPORT_VERSION {
        bail!(
            "report version {} is not supported (expected {})",
            report.header.version,
            bench::REPORT_VERSION
        );
    }
    let rows: Vec<CompareRow> = compare(&report, &parse_modes(modes)?)?;
    let h = &report.header;
    let csv_rows: Vec<CompareCsvRow> = rows
        .iter()
        .map(|r| CompareCsvRow {
            version: h.version,
            config_hash: &h.config_hash,
            seed: h.seed,
            mode: r.mode.name(),
            ttft_ms: r.ttft_ms,
            e2e_ms: r.e2e_ms,
            sim_em: r.sim_em,
            sim_f1: r.sim_f1,
            efficiency: r.efficiency,
            qal: r.qal,
            hit_rate: r.hit_rate,
            ret_per_1k: r.ret_per_1k,
            ttft_reduction: r.ttft_reduction,
            e2e_reduction: r.e2e_reduction,
        })
        .collect();
    match out {
        Some(p) => {
            let mut w = create(p)?;
            write_csv(&mut w, &csv_rows)?;
            w.flush()?;
        }
        None => write_csv(std::io::stdout().lock(), &csv_rows)?,
    }
    Ok(())
}
