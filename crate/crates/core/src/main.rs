use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flora_core::config::{load_config, Entries, ExperimentConfig, SCALING_SWEEP};
use flora_core::fed_sim::{compare_strategies, Executor, Strategy};
use flora_core::report::{emit_report, ReportTable};
use flora_core::verify::run_checks;
use flora_core::FloraError;

#[derive(Parser)]
#[command(name = "flora-sim", version, about = "Federated low-rank adapter aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy and write its report.
    Run(ExperimentArgs),
    /// Run several strategies on the same task and partition.
    Compare(ExperimentArgs),
    /// Re-run with each constant scaling factor in 0.01, 0.05, 0.1, 0.2.
    SweepScaling(ExperimentArgs),
    /// Run the built-in invariant checks.
    Verify,
}

#[derive(Args, Default)]
struct ExperimentArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// homo16 or hetero.
    #[arg(long)]
    preset: Option<String>,
    /// Comma separated: flora, fedit, zero_padding, standalone, centralized.
    #[arg(long, visible_alias = "strategies")]
    strategy: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    /// One rank for every client, or a comma list.
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// `iid`, or a comma list of `kind[:strength]`.
    #[arg(long)]
    skew: Option<String>,
    /// Strength for skew kinds given without one.
    #[arg(long)]
    skew_strength: Option<String>,
    #[arg(long)]
    scaling_override: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Report path; defaults to report.csv.
    #[arg(long)]
    out: Option<String>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExperimentArgs {
    fn entries(&self) -> Result<Entries, FloraError> {
        let mut e = Entries::default();
        let flags = [
            ("preset", &self.preset),
            ("strategy", &self.strategy),
            ("clients", &self.clients),
            ("ranks", &self.ranks),
            ("rounds", &self.rounds),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("skew", &self.skew),
            ("skew_strength", &self.skew_strength),
            ("scaling_override", &self.scaling_override),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                e.push(key, v.clone());
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| FloraError::InvalidArgument(format!("--set expects key=value, found `{kv}`")))?;
            e.push(k.trim(), v.trim());
        }
        Ok(e)
    }

    fn load(&self) -> Result<ExperimentConfig, FloraError> {
        load_config(self.config.as_deref(), &self.entries()?)
    }
}

fn out_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("report.csv"))
}

/// `dir/name.csv` → `dir/name_p0.05.csv`.
fn suffixed(path: &std::path::Path, p: f64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_p{p}.{ext}"))
}

fn default_strategies(cfg: &ExperimentConfig, explicit: bool) -> Vec<Strategy> {
    if explicit {
        cfg.strategies.clone()
    } else if cfg.is_homogeneous() {
        vec![Strategy::Flora, Strategy::Fedit]
    } else {
        vec![Strategy::Flora, Strategy::ZeroPadding]
    }
}

fn print_curves(table: &ReportTable) {
    for r in &table.rows {
        println!("round {} {:<12} global_loss {:.6e}", r.round, r.strategy.name(), r.global_loss);
    }
}

fn execute(cmd: Command) -> Result<(), FloraError> {
    match cmd {
        Command::Verify => unreachable!(),
        Command::Run(args) => {
            let cfg = args.load()?;
            let report = flora_core::fed_sim::run_experiment(&cfg)?;
            let table = ReportTable::from_experiment(&report);
            let path = out_path(&cfg);
            emit_report(&table, &path)?;
            print_curves(&table);
            println!("wrote {}", path.display());
        }
        Command::Compare(args) => {
            let cfg = args.load()?;
            let strategies = default_strategies(&cfg, args.strategy.is_some());
            let cmp = compare_strategies(&cfg, &strategies, &Executor::from_env()?)?;
            let table = ReportTable::from_comparison(&cmp);
            let path = out_path(&cfg);
            emit_report(&table, &path)?;
            print_curves(&table);
            println!("wrote {}", path.display());
        }
        Command::SweepScaling(args) => {
            let base = args.load()?;
            let strategies = default_strategies(&base, args.strategy.is_some());
            let exec = Executor::from_env()?;
            for p in SCALING_SWEEP {
                let cfg = ExperimentConfig {
                    scaling_override: Some(p),
                    ..base.clone()
                };
                let table = ReportTable::from_comparison(&compare_strategies(&cfg, &strategies, &exec)?);
                let path = suffixed(&out_path(&base), p);
                emit_report(&table, &path)?;
                for (s, l) in strategies.iter().map(|&s| (s, table.curve(s).last().map(|r| r.global_loss))) {
                    println!("p={p} {:<12} final global_loss {:.6e}", s.name(), l.unwrap_or(f64::NAN));
                }
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &FloraError) -> u8 {
    match e {
        FloraError::InvalidArgument(_) | FloraError::Config(_) | FloraError::UnsupportedHeterogeneousRanks { .. } => 1,
        FloraError::Parse { .. } => 1,
        FloraError::Io { .. } | FloraError::Internal(_) => 2,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Command::Verify = cli.command {
        let checks = run_checks();
        for c in &checks {
            println!("{}", c.line());
        }
        let failed = checks.iter().filter(|c| !c.passed).count();
        println!("{} of {} checks passed", checks.len() - failed, checks.len());
        return if failed == 0 { 0 } else { 2 };
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::Path;

    use flora_core::report::read_report;

    use super::*;

    fn sim(args: &[&str]) -> u8 {
        run(std::iter::once("flora-sim").chain(args.iter().copied()))
    }

    fn path_arg(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn verify_exits_zero() {
        assert_eq!(sim(&["verify"]), 0);
    }

    #[test]
    fn compare_writes_two_aligned_curves() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("cmp.csv");
        assert_eq!(sim(&["compare", "--preset", "homo16", "--strategies", "flora,fedit", "--out", path_arg(&out)]), 0);
        let table = read_report(&out).unwrap();
        assert_eq!(table.seed, 42);
        let flora = table.curve(Strategy::Flora);
        let fedit = table.curve(Strategy::Fedit);
        assert_eq!(flora.len(), 4);
        assert_eq!(fedit.len(), 4);
        assert!(flora.iter().zip(&fedit).all(|(a, b)| a.round == b.round));
        assert_eq!(flora[0].global_loss, fedit[0].global_loss);
        assert!(fedit.iter().skip(1).all(|r| r.relative_noise.is_some()));
        assert!(flora.iter().all(|r| r.relative_noise.is_none()));
    }

    #[test]
    fn compare_defaults_follow_the_rank_profile() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("h.csv");
        assert_eq!(sim(&["compare", "--preset", "hetero", "--rounds", "1", "--out", path_arg(&out)]), 0);
        let table = read_report(&out).unwrap();
        assert_eq!(table.curve(Strategy::ZeroPadding).len(), 2);
        assert!(table.curve(Strategy::Fedit).is_empty());
    }

    #[test]
    fn sweep_scaling_writes_four_reports() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sweep.csv");
        assert_eq!(sim(&["sweep-scaling", "--preset", "homo16", "--rounds", "1", "--out", path_arg(&out)]), 0);
        for p in ["0.01", "0.05", "0.1", "0.2"] {
            let table = read_report(&dir.path().join(format!("sweep_p{p}.csv"))).unwrap();
            assert_eq!(table.rows.len(), 4, "{p}");
        }
    }

    #[test]
    fn config_file_with_flag_override() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.cfg");
        let out = dir.path().join("run.csv");
        fs::write(&cfg, "# small run\npreset = homo16\nrounds = 2\nstrategy = fedit\nseed = 7\n").unwrap();
        assert_eq!(sim(&["run", "--config", path_arg(&cfg), "--rounds", "1", "--out", path_arg(&out)]), 0);
        let table = read_report(&out).unwrap();
        assert_eq!(table.seed, 7);
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.strategy == Strategy::Fedit));
    }

    #[test]
    fn validation_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        assert_eq!(sim(&["run", "--preset", "hetero", "--strategy", "fedit", "--out", path_arg(&out)]), 1);
        assert!(!out.exists());
        assert_eq!(sim(&["run", "--lr", "fast", "--rounds", "-1", "--set", "colour=blue"]), 1);
        assert_eq!(sim(&["run", "--set", "novalue"]), 1);
        assert_eq!(sim(&["train"]), 1);
    }

    #[test]
    fn unwritable_output_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("blocker");
        fs::write(&blocker, "x").unwrap();
        assert_eq!(sim(&["run", "--rounds", "0", "--out", path_arg(&blocker.join("r.csv"))]), 2);
    }

    #[test]
    fn suffix_goes_before_the_extension() {
        assert_eq!(suffixed(Path::new("out/r.csv"), 0.05), Path::new("out/r_p0.05.csv"));
        assert_eq!(suffixed(Path::new("r"), 0.2), Path::new("r_p0.2.csv"));
    }
}
