use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kappa_core::experiment::{
    analyze_dir, calibrate, run_episode, run_sweep, snapshot_digest, trace_jsonl, write_atomic, CalibrationSnapshot,
    EpisodeOptions, ExperimentConfig, TraceHeader,
};
use kappa_core::oracle::{coupling_family, random_belief, verify_bound};
use kappa_core::perturb::{ConditionSpec, DelaySpec, MaskSpec, ShiftSpec};
use kappa_core::{Error, VERSION};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_CALIBRATION: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

/// Compound uncertainty toolkit: calibrate, run, sweep and analyze.
#[derive(Parser, Debug)]
#[command(name = "kappa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and freeze the ensemble, measure the noise floor and thresholds.
    Calibrate {
        #[command(flatten)]
        config: ConfigArg,
        /// Snapshot path [default: <output_dir>/snapshot.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one episode and write its JSONL trace.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        snapshot: SnapshotArg,
        #[command(flatten)]
        condition: ConditionArgs,
        /// Episode seed [default: config seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Trace path [default: <output_dir>/run_<slug>_s<seed>.jsonl]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every grid cell (resuming finished ones), then the analysis.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        snapshot: SnapshotArg,
        /// Output directory [default: config output_dir]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute records.csv and report.json from finished cells.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        snapshot: SnapshotArg,
        /// Sweep directory [default: config output_dir]
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Check the entropy bound on random discrete beliefs.
    OracleCheck {
        /// Number of sampled beliefs
        #[arg(long, default_value_t = 10_000)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// State grid size
        #[arg(long, default_value_t = 4)]
        n_s: usize,
        /// Parameter grid size
        #[arg(long, default_value_t = 4)]
        n_theta: usize,
        /// CSV output [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also sweep the coupling family and check that mi is monotone
        #[arg(long)]
        coupling: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML config [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> kappa_core::Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SnapshotArg {
    /// Calibration snapshot [default: <output_dir>/snapshot.json]
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

impl SnapshotArg {
    fn load(&self, cfg: &ExperimentConfig) -> kappa_core::Result<CalibrationSnapshot> {
        let path = self.snapshot.clone().unwrap_or_else(|| default_snapshot(cfg));
        if !path.exists() {
            return Err(Error::Calibration(format!("no snapshot at {}; run `kappa calibrate` first", path.display())));
        }
        let snap = CalibrationSnapshot::load(&path)?;
        snap.check_compatible(cfg)?;
        Ok(snap)
    }
}

#[derive(Args, Debug)]
struct ConditionArgs {
    /// Fraction of observation dims masked
    #[arg(long, default_value_t = 0.0)]
    po: f64,
    /// Action delay in steps
    #[arg(long, default_value_t = 0)]
    tau: u32,
    /// Dynamics shift as PARAM=VALUE
    #[arg(long, value_parser = parse_shift)]
    shift: Option<(String, f64)>,
}

fn parse_shift(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected PARAM=VALUE, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|e| format!("bad value `{v}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

impl ConditionArgs {
    fn build(&self, cfg: &ExperimentConfig) -> kappa_core::Result<ConditionSpec> {
        let onset_t = cfg.onset;
        let mask = (self.po > 0.0).then(|| MaskSpec::from_fraction(cfg.env, self.po, onset_t)).transpose()?;
        let delay = (self.tau > 0).then_some(DelaySpec { tau: self.tau, onset_t });
        let shift = self.shift.clone().map(|(param, value)| ShiftSpec { param, value, onset_t });
        let cond = ConditionSpec::labeled(mask, delay, shift);
        cond.validate(cfg.env)?;
        Ok(cond)
    }
}

fn default_snapshot(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("snapshot.json")
}

#[derive(Serialize)]
struct BoundRow {
    seed: u64,
    sample: usize,
    mi: f64,
    bound: f64,
    slack: f64,
    holds: bool,
}

#[derive(Serialize)]
struct CouplingRow {
    n: usize,
    lambda: f64,
    mi: f64,
}

enum Outcome {
    Ok,
    Violation(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violation(msg)) => {
            eprintln!("kappa: invariant violation: {msg}");
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(e) => {
            eprintln!("kappa: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Calibration(_) => EXIT_CALIBRATION,
        Error::Invariant(_) => EXIT_INVARIANT,
        _ => EXIT_USAGE,
    }
}

fn execute(cmd: Command) -> kappa_core::Result<Outcome> {
    match cmd {
        Command::Calibrate { config, out } => {
            let cfg = config.load()?;
            let snap = calibrate(&cfg)?;
            let path = out.unwrap_or_else(|| default_snapshot(&cfg));
            snap.save(&path)?;
            println!(
                "snapshot {} mu0={} sigma0={} tau_low={} tau_high={}",
                path.display(),
                snap.noise_floor.mu0,
                snap.noise_floor.sigma0,
                snap.thresholds.tau_low(),
                snap.thresholds.tau_high()
            );
            Ok(Outcome::Ok)
        }
        Command::Run { config, snapshot, condition, seed, out } => {
            let cfg = config.load()?;
            let snap = snapshot.load(&cfg)?;
            let cond = condition.build(&cfg)?;
            let seed = seed.unwrap_or(cfg.seed);
            let out_path =
                out.unwrap_or_else(|| cfg.output_dir.join(format!("run_{}_s{seed}.jsonl", cond.slug(cfg.env))));
            let opts = EpisodeOptions { record_steps: true, ..EpisodeOptions::from_config(&cfg) };
            let res = run_episode(&cfg, &snap, &cond, seed, &opts)?;
            let header = TraceHeader {
                version: VERSION.to_string(),
                config_hash: cfg.hash(),
                seed,
                env: cfg.env,
                condition: cond,
                snapshot_digest: snapshot_digest(&snap)?,
            };
            write_atomic(&out_path, &trace_jsonl(&header, &res)?)?;
            let s = &res.summary;
            println!(
                "trace {} label={} return={} post_onset_kappa={}",
                out_path.display(),
                s.label,
                s.episode_return,
                s.post_onset_kappa_mean
            );
            Ok(budget_outcome(s.budget_violations))
        }
        Command::Sweep { config, snapshot, out } => {
            let cfg = config.load()?;
            let snap = snapshot.load(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = run_sweep(&cfg, &snap, &dir)?;
            println!(
                "sweep {} ran={} resumed={} episodes={}",
                dir.display(),
                outcome.ran,
                outcome.resumed,
                outcome.report.n_episodes
            );
            print_report(&outcome.report);
            Ok(budget_outcome(outcome.report.budget_violations))
        }
        Command::Analyze { config, snapshot, dir } => {
            let cfg = config.load()?;
            let snap = snapshot.load(&cfg)?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
            let report = analyze_dir(&cfg, &snap, &dir)?;
            print_report(&report);
            Ok(budget_outcome(report.budget_violations))
        }
        Command::OracleCheck { n_samples, seed, n_s, n_theta, out, coupling } => {
            if n_samples == 0 {
                return Err(Error::Input("--n-samples must be at least 1".into()));
            }
            oracle_check(n_samples, seed, n_s, n_theta, out.as_deref(), coupling.as_deref())
        }
    }
}

fn budget_outcome(violations: u64) -> Outcome {
    if violations == 0 {
        Outcome::Ok
    } else {
        Outcome::Violation(format!("{violations} decisions exceeded the risk budget"))
    }
}

fn print_report(report: &kappa_core::experiment::SweepReport) {
    for (label, k) in &report.kappa_means {
        println!("kappa {label} {k}");
    }
    if let Some(s) = &report.synergy {
        println!("superadditive {}/{} rate={}", s.n_superadditive, s.n_configs, s.rate);
    }
    for note in &report.notes {
        println!("note {note}");
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(e.to_string())
}

fn write_csv<S: Serialize>(rows: &[S], path: Option<&Path>) -> kappa_core::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    match path {
        Some(p) => write_atomic(p, &bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}

fn oracle_check(
    n_samples: usize,
    seed: u64,
    n_s: usize,
    n_theta: usize,
    out: Option<&Path>,
    coupling: Option<&Path>,
) -> kappa_core::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_samples);
    for sample in 0..n_samples {
        let b = random_belief::<f64, _>(n_s, n_theta, &mut rng)?;
        let c = verify_bound(&b);
        rows.push(BoundRow { seed, sample, mi: c.mi, bound: c.bound, slack: c.slack, holds: c.holds });
    }
    write_csv(&rows, out)?;
    let failed = rows.iter().filter(|r| !r.holds).count();
    eprintln!("bound checked on {n_samples} beliefs: {failed} violations");

    let mut inversions = 0;
    if let Some(path) = coupling {
        let mut crows = Vec::new();
        for n in [2, 4, 8] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=100 {
                let lambda = i as f64 / 100.0;
                let mi = kappa_core::oracle::exact_mi(&coupling_family(lambda, n)?);
                if mi < prev - 1e-12 {
                    inversions += 1;
                }
                prev = mi;
                crows.push(CouplingRow { n, lambda, mi });
            }
        }
        write_csv(&crows, Some(path))?;
        eprintln!("coupling sweep: {inversions} inversions");
    }
    Ok(if failed == 0 && inversions == 0 {
        Outcome::Ok
    } else {
        Outcome::Violation(format!("{failed} bound violations, {inversions} coupling inversions"))
    })
}
