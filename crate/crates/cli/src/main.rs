//! Command-line front end: mine traces into a pattern library, simulate
//! sessions under a policy, and sweep or compare across seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use branchspec_core::mining::{PatternLibrary, DEFAULT_BINDING_THRESHOLD};
use branchspec_core::scheduler::Policy;
use branchspec_core::sim::{
    generate_corpus, simulate_session, Mode, RunResult, ToolModel, WorkloadSpec, TRAIN_SEED_BASE,
};
use branchspec_core::trace::{parse_trace, write_trace, AgentTrace};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "branchspec", version, about = "Branch-level speculative scheduling for agent tool calls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine a directory of traces into a pattern library.
    Mine {
        corpus_dir: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_support: u64,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_BINDING_THRESHOLD)]
        binding_threshold: f64,
    },
    /// Write serial traces of simulated sessions, for mining.
    Corpus {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = TRAIN_SEED_BASE)]
        seed_start: u64,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
    },
    /// Simulate one session.
    Simulate {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, default_value = "bpaste")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long = "out")]
        out: PathBuf,
        /// Also write the decision log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the session's trace as observed under this mode.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Simulate many seeds and print per-seed rows plus aggregates.
    Sweep {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, default_value = "bpaste")]
        mode: Mode,
        #[command(flatten)]
        seeds: Seeds,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Paired serial versus speculative runs over the same seeds.
    Compare {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, default_value = "bpaste")]
        mode: Mode,
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Setup {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    /// Pattern library from `mine`; serial and oracle runs may omit it.
    #[arg(long)]
    patterns: Option<PathBuf>,
}

#[derive(Args)]
struct Seeds {
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    #[arg(long, default_value_t = 100)]
    seeds: u64,
}

struct Loaded {
    workload: WorkloadSpec,
    policy: Policy,
    library: Arc<PatternLibrary>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

impl Setup {
    fn load(&self, mode: Mode) -> Result<Loaded> {
        let workload = WorkloadSpec::from_toml(&read(&self.workload)?)
            .with_context(|| format!("loading {}", self.workload.display()))?;
        let policy =
            Policy::from_toml(&read(&self.policy)?).with_context(|| format!("loading {}", self.policy.display()))?;
        let library = match &self.patterns {
            Some(p) => PatternLibrary::from_text(&read(p)?).with_context(|| format!("loading {}", p.display()))?,
            None if mode == Mode::Bpaste => bail!("--patterns is required in bpaste mode"),
            None => PatternLibrary::empty(),
        };
        Ok(Loaded {
            workload,
            policy,
            library: Arc::new(library),
        })
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building thread pool")
}

fn run_seeds(l: &Loaded, mode: Mode, seeds: &Seeds, jobs: usize) -> Result<Vec<RunResult>> {
    let model = ToolModel::new(l.workload.clone());
    let range: Vec<u64> = (seeds.seed_start..seeds.seed_start + seeds.seeds).collect();
    Ok(thread_pool(jobs)?.install(|| {
        range
            .par_iter()
            .map(|&seed| RunResult::from_record(&simulate_session(&model, &l.policy, Arc::clone(&l.library), mode, seed)))
            .collect()
    }))
}

fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn sweep_table(mode: Mode, results: &[RunResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} {:>6} {:>12} {:>12} {:>8} {:>6} {:>6} {:>10} {:>5}",
        "seed", "steps", "makespan", "serial", "speedup", "hit", "promo", "wasted_ms", "viol"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:>8} {:>6} {:>12.3} {:>12.3} {:>8.4} {:>6.3} {:>6.3} {:>10.3} {:>5}",
            r.seed,
            r.steps,
            r.makespan,
            r.serial_makespan,
            r.speedup,
            r.hit_rate,
            r.promotion_rate,
            r.wasted_spec_ms,
            r.auth_qos_violations
        );
    }
    let col = |f: fn(&RunResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
    let speedup = col(|r| r.speedup);
    let makespan = col(|r| r.makespan);
    let _ = writeln!(s, "mode {mode} over {} seeds", results.len());
    let _ = writeln!(s, "mean_speedup {:.4}", mean(&speedup));
    let _ = writeln!(s, "p95_speedup {:.4}", percentile(&speedup, 0.95));
    let _ = writeln!(s, "mean_makespan {:.3}", mean(&makespan));
    let _ = writeln!(s, "p95_makespan {:.3}", percentile(&makespan, 0.95));
    let _ = writeln!(s, "mean_promotion_rate {:.4}", mean(&col(|r| r.promotion_rate)));
    let _ = writeln!(s, "mean_prefix_reuse_rate {:.4}", mean(&col(|r| r.prefix_reuse_rate)));
    let _ = writeln!(s, "mean_wasted_spec_ms {:.3}", mean(&col(|r| r.wasted_spec_ms)));
    let _ = writeln!(s, "mean_corun_slowdown {:.4}", mean(&col(|r| r.corun_slowdown)));
    let _ = writeln!(
        s,
        "auth_qos_violations {}",
        results.iter().map(|r| r.auth_qos_violations).sum::<usize>()
    );
    s
}

fn compare_table(serial: &[RunResult], spec: &[RunResult], mode: Mode) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} {:>12} {:>12} {:>12} {:>8} {:>5}",
        "seed", "serial", mode.as_str(), "diff_ms", "speedup", "late"
    );
    let mut late_total = 0usize;
    let mut speedups = Vec::with_capacity(spec.len());
    for (a, b) in serial.iter().zip(spec) {
        let late = a
            .completions
            .iter()
            .zip(&b.completions)
            .filter(|(x, y)| **y > **x + branchspec_core::sim::QOS_TOLERANCE_MS)
            .count();
        late_total += late;
        let speedup = if b.makespan > 0.0 { a.makespan / b.makespan } else { 1.0 };
        speedups.push(speedup);
        let _ = writeln!(
            s,
            "{:>8} {:>12.3} {:>12.3} {:>12.3} {:>8.4} {:>5}",
            a.seed,
            a.makespan,
            b.makespan,
            a.makespan - b.makespan,
            speedup,
            late
        );
    }
    let _ = writeln!(s, "mean_speedup {:.4}", mean(&speedups));
    let _ = writeln!(s, "p95_speedup {:.4}", percentile(&speedups, 0.95));
    let _ = writeln!(s, "late_jobs {late_total}");
    s
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mine {
            corpus_dir,
            out,
            min_support,
            window,
            binding_threshold,
        } => {
            let mut corpus: Vec<AgentTrace> = Vec::new();
            for f in trace_files(&corpus_dir)? {
                let trace = parse_trace(&read(&f)?).with_context(|| format!("parsing {}", f.display()))?;
                corpus.push(trace);
            }
            let library = PatternLibrary::build(&corpus, min_support, window, binding_threshold)?;
            fs::write(&out, library.to_text()).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("mined {} patterns from {} traces", library.patterns.len(), corpus.len());
        }
        Command::Corpus {
            workload,
            count,
            seed_start,
            out,
        } => {
            let w = WorkloadSpec::from_toml(&read(&workload)?)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let model = ToolModel::new(w);
            for (i, trace) in generate_corpus(&model, count, seed_start).iter().enumerate() {
                let path = out.join(format!("session_{:05}.trace", seed_start + i as u64));
                fs::write(&path, write_trace(trace)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Simulate {
            setup,
            mode,
            seed,
            out,
            log,
            trace,
        } => {
            let l = setup.load(mode)?;
            let model = ToolModel::new(l.workload.clone());
            let rec = simulate_session(&model, &l.policy, Arc::clone(&l.library), mode, seed);
            if let Some(f) = rec.invariant_failures.first() {
                bail!("scheduler invariant violated: {f}");
            }
            fs::write(&out, RunResult::from_record(&rec).to_json())
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = log {
                let mut text = String::new();
                for d in rec.runtime.iter().flat_map(|rt| rt.log.iter()) {
                    let _ = writeln!(text, "{d}");
                }
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = trace {
                let t = branchspec_core::sim::session_trace(&model, &rec.session, &rec.call_t, &rec.return_t);
                fs::write(&path, write_trace(&t)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Sweep {
            setup,
            mode,
            seeds,
            jobs,
            out,
        } => {
            let l = setup.load(mode)?;
            let results = run_seeds(&l, mode, &seeds, jobs)?;
            write_out(out.as_deref(), &sweep_table(mode, &results))?;
        }
        Command::Compare {
            setup,
            mode,
            seeds,
            jobs,
            out,
        } => {
            if mode == Mode::Serial {
                bail!("compare needs a speculative mode");
            }
            let l = setup.load(mode)?;
            let serial = run_seeds(&l, Mode::Serial, &seeds, jobs)?;
            let spec = run_seeds(&l, mode, &seeds, jobs)?;
            write_out(out.as_deref(), &compare_table(&serial, &spec, mode))?;
        }
    }
    Ok(())
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
