use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use chirality_core::accounting::audit_model;
use chirality_core::harness::suite::{check_equivariance, gradcheck_model, SuiteReport};
use chirality_core::harness::{
    evaluate, to_json, train, EvalMode, LayoutFile, Model, ModelConfig, SyntheticPoseTask,
    TrainedModel, SCHEMA,
};
use chirality_core::Error;

/// Gradient-check tolerance on the relative error.
const GRAD_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "chirality-kit",
    version,
    about = "Chirality-equivariant pose networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivariance property suite on a freshly initialized model.
    CheckEquivariance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Print parameter and multiplication counts per layer.
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model on a synthetic task.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of the training split to use.
        #[arg(long, default_value_t = 1.0)]
        limit_frac: f64,
    },
    /// Evaluate a trained model on a task's validation split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Plain)]
        mode: ModeArg,
    },
    /// Generate a synthetic pose task from a layout file.
    GenTask {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of every layer.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    FlipAveraged,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => EvalMode::Plain,
            ModeArg::FlipAveraged => EvalMode::FlipAveraged,
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    schema: &'a str,
    error: ErrorBody,
}

#[derive(Serialize)]
struct ErrorBody {
    kind: &'static str,
    exit_code: u8,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failures: Vec<String>,
}

enum Failure {
    Core(Error),
    /// A property suite ran but some checks failed.
    Suite(SuiteReport),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn body(&self) -> ErrorBody {
        match self {
            Failure::Core(e) => {
                let (kind, exit_code) = match e {
                    Error::Validation(_) => ("validation", 2),
                    Error::Shape { .. } => ("shape", 2),
                    Error::Serde(_) => ("parse", 2),
                    Error::Io(_) => ("io", 2),
                    Error::Property { .. } => ("property", 3),
                    Error::Divergence { .. } => ("divergence", 4),
                    Error::NonFinite(_) => ("non_finite", 4),
                };
                ErrorBody {
                    kind,
                    exit_code,
                    message: e.to_string(),
                    failures: Vec::new(),
                }
            }
            Failure::Suite(report) => {
                let failures: Vec<String> = report
                    .failures()
                    .iter()
                    .map(|c| format!("{}: {:e} > {:e}", c.name, c.max_violation, c.tol))
                    .collect();
                ErrorBody {
                    kind: "property",
                    exit_code: 3,
                    message: format!(
                        "{} of {} checks failed",
                        failures.len(),
                        report.checks.len()
                    ),
                    failures,
                }
            }
        }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text)
        .map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, Error> {
    Model::from_config(&ModelConfig::from_json(&read(path)?)?)
}

fn finish_suite(report: SuiteReport) -> Outcome {
    print!("{}", to_json(&report)?);
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Suite(report))
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::CheckEquivariance {
            config,
            trials,
            tol,
        } => {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::Validation(format!("tolerance {tol} must be positive")).into());
            }
            let model = load_model(&config)?;
            let seed = model.training().seed;
            finish_suite(check_equivariance(&model, trials, tol, seed)?)
        }
        Command::Audit { config } => {
            let report = audit_model(&ModelConfig::from_json(&read(&config)?)?)?;
            print!("{}", report.to_table());
            println!();
            print!("{}", to_json(&report)?);
            Ok(())
        }
        Command::Train {
            config,
            task,
            out,
            limit_frac,
        } => {
            let mut model = load_model(&config)?;
            let task = SyntheticPoseTask::from_json(&read(&task)?)?;
            let report = train(&mut model, &task, limit_frac)?;
            let trained = TrainedModel::new(&model, report);
            write(&out, &trained.to_json()?)?;
            print!("{}", to_json(&trained.metrics)?);
            Ok(())
        }
        Command::Eval { model, task, mode } => {
            let trained = TrainedModel::from_json(&read(&model)?)?;
            let model = Model::from_record(&trained.model)?;
            let task = SyntheticPoseTask::from_json(&read(&task)?)?;
            let (_, val) = task.split();
            let data = if val.is_empty() { task.dataset() } else { val };
            let (t_in, t_out) = task.transforms();
            let dims = task.spec.out_layout.dims();
            let metrics = evaluate(&model, &data, dims, &t_in, &t_out, mode.into())?;
            print!("{}", to_json(&metrics)?);
            Ok(())
        }
        Command::GenTask {
            layout,
            samples,
            noise,
            seed,
            out,
        } => {
            let file = LayoutFile::from_json(&read(&layout)?)?;
            let task = SyntheticPoseTask::generate(file.task_spec(samples, noise, seed))?;
            write(&out, &task.to_json()?)?;
            print!("{}", to_json(&task.spec)?);
            Ok(())
        }
        Command::Gradcheck { config, eps } => {
            let model = load_model(&config)?;
            let seed = model.training().seed;
            finish_suite(gradcheck_model(&model, eps, GRAD_TOL, seed)?)
        }
    }
}

fn report(body: ErrorBody) -> ExitCode {
    let code = body.exit_code;
    let report = ErrorReport {
        schema: SCHEMA,
        error: body,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&report).expect("error report serializes")
    );
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return report(ErrorBody {
                kind: "usage",
                exit_code: 2,
                message: e.render().to_string().trim().to_string(),
                failures: Vec::new(),
            })
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f.body()),
    }
}
