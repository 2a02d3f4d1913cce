use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ensemble_track::experiment::{self, output, ExperimentConfig, ExperimentKind};
use ensemble_track::feedback::Convention;

/// Parameter-independent affine tracking feedback: run an experiment and
/// write its cost tables, trajectories and plots.
#[derive(Debug, Parser)]
#[command(name = "ensemble-track", version)]
struct Cli {
    #[command(subcommand)]
    experiment: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Damped oscillator with uncertain damping.
    Oscillator(Args),
    /// 1-D convection–diffusion–reaction with random diffusion.
    Cdr(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    /// TOML configuration; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `out/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed of the random diffusion draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Weighting of the averaged-parameter baseline.
    #[arg(long, value_enum)]
    convention: Option<ConventionArg>,
    /// Skip the SVG plots.
    #[arg(long)]
    no_plots: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConventionArg {
    Unit,
    PaperLiteral,
}

impl From<ConventionArg> for Convention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Unit => Convention::Unit,
            ConventionArg::PaperLiteral => Convention::PaperLiteral,
        }
    }
}

fn configure(kind: ExperimentKind, args: &Args) -> ensemble_track::Result<ExperimentConfig> {
    let base = kind.default_config();
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, base)?,
        None => base,
    };
    if let Some(steps) = args.steps {
        cfg.steps = steps;
        // keep checkpoints at most as dense as configured
        cfg.stride = (1..=cfg.stride.min(steps.max(1)))
            .rev()
            .find(|d| steps % d == 0)
            .unwrap_or(1);
    }
    if let Some(seed) = args.seed {
        if kind == ExperimentKind::Oscillator {
            eprintln!("warning: the oscillator experiment is deterministic; --seed is ignored");
        }
        cfg.cdr.seed = seed;
    }
    if let Some(c) = args.convention {
        cfg.conventions = vec![Convention::from(c).as_str().to_string()];
    }
    if args.no_plots {
        cfg.plots = false;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_count(value: Option<&str>) -> Result<Option<usize>, String> {
    let Some(value) = value else {
        return Ok(None);
    };
    match value.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(format!(
            "ENSEMBLE_TRACK_THREADS must be a positive integer, got {value:?}"
        )),
    }
}

fn init_threads() -> Result<(), String> {
    let value = std::env::var("ENSEMBLE_TRACK_THREADS").ok();
    if let Some(n) = thread_count(value.as_deref())? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

struct Outcome {
    dir: PathBuf,
    written: Vec<PathBuf>,
    warnings: Vec<String>,
}

fn execute(cli: &Cli) -> ensemble_track::Result<Outcome> {
    let (kind, args) = match &cli.experiment {
        Command::Oscillator(a) => (ExperimentKind::Oscillator, a),
        Command::Cdr(a) => (ExperimentKind::Cdr, a),
    };
    let cfg = configure(kind, args)?;
    let dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(kind.as_str()));
    let result = experiment::run(kind, &cfg)?;
    let written = output::write_outputs(&result, &dir)?;
    let warnings = result
        .errors()
        .into_iter()
        .map(|(section, msg)| format!("{section}: {msg}"))
        .collect();
    Ok(Outcome { dir, written, warnings })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match execute(&cli) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} files to {}", outcome.written.len(), outcome.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use std::fs;
    use std::path::Path;

    use super::*;

    fn cli(args: &[&str], out: &Path) -> Cli {
        let mut argv = vec!["ensemble-track"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--out", out.to_str().unwrap()]);
        Cli::try_parse_from(argv).unwrap()
    }

    #[test]
    fn oscillator_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, "[oscillator]\nells = [0.5, 2.0]\n").unwrap();
        let out = dir.path().join("out");
        let args = [
            "oscillator",
            "--config",
            config.to_str().unwrap(),
            "--steps",
            "400",
            "--convention",
            "paper-literal",
        ];
        let outcome = execute(&cli(&args, &out)).unwrap();
        assert!(outcome.warnings.is_empty());
        for name in [
            "costs.csv",
            "trajectories.csv",
            "gaps.csv",
            "metadata.toml",
            "costs-oscillator.svg",
        ] {
            assert!(out.join(name).is_file(), "{name} missing");
        }
        let costs = fs::read_to_string(out.join("costs.csv")).unwrap();
        assert!(costs.contains(",averaged,paper-literal,"));
        assert!(!costs.contains(",averaged,unit,"));
        let meta = fs::read_to_string(out.join("metadata.toml")).unwrap();
        assert!(meta.contains("steps = 400"));
    }

    #[test]
    fn no_plots_skips_svg() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = execute(&cli(&["oscillator", "--steps", "200", "--no-plots"], dir.path())).unwrap();
        assert!(outcome
            .written
            .iter()
            .all(|p| p.extension().is_some_and(|x| x != "svg")));
        assert!(fs::read_dir(dir.path())
            .unwrap()
            .all(|e| e.unwrap().path().extension().is_none_or(|x| x != "svg")));
    }

    #[test]
    fn steps_override_adapts_stride() {
        for (steps, stride) in [("120", 40), ("10000", 50), ("4999", 1)] {
            let args = Cli::try_parse_from(["ensemble-track", "cdr", "--steps", steps]).unwrap();
            let Command::Cdr(a) = &args.experiment else {
                unreachable!()
            };
            let cfg = configure(ExperimentKind::Cdr, a).unwrap();
            assert_eq!(cfg.stride, stride, "{steps}");
        }
    }

    #[test]
    fn bad_input_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("bad.toml");
        fs::write(&config, "horizon = -5.0\n").unwrap();
        let err = execute(&cli(&["cdr", "--config", config.to_str().unwrap()], dir.path()))
            .err()
            .unwrap();
        assert!(err.to_string().contains("horizon"));
        assert!(execute(&cli(&["oscillator", "--config", "/nonexistent/run.toml"], dir.path())).is_err());
        assert!(Cli::try_parse_from(["ensemble-track", "oscillator", "--convention", "mean"]).is_err());
        assert!(Cli::try_parse_from(["ensemble-track", "pendulum"]).is_err());
    }

    #[test]
    fn thread_variable_must_be_positive() {
        assert_eq!(thread_count(None), Ok(None));
        assert_eq!(thread_count(Some("3")), Ok(Some(3)));
        assert!(thread_count(Some("0")).is_err());
        assert!(thread_count(Some("zero")).is_err());
    }

    #[test]
    fn small_cdr_run_records_field_samples() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("cdr.toml");
        fs::write(
            &config,
            "steps = 200\nstride = 20\n[cdr]\nnodes = 21\nells = [0.0, 1.0]\nconvections = [0.1]\n",
        )
        .unwrap();
        let out = dir.path().join("out");
        execute(&cli(
            &["cdr", "--seed", "7", "--config", config.to_str().unwrap()],
            &out,
        ))
        .unwrap();
        let fields = fs::read_to_string(out.join("field-samples.csv")).unwrap();
        assert_eq!(fields.lines().next().unwrap(), "set,draw,ell,s,value");
        // (2 levels × 5 training + 5 test draws) × 21 nodes
        assert_eq!(fields.lines().count(), 1 + 15 * 21);
        let costs = fs::read_to_string(out.join("costs.csv")).unwrap();
        assert!(costs.lines().skip(1).all(|l| l.starts_with("cdr-b0.1,")));
        assert!(fs::read_to_string(out.join("metadata.toml"))
            .unwrap()
            .contains("seed = 7"));
    }
}
