use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ghost::bitsearch::BitPlan;
use ghost::cost::{cost_report, EvalReport};
use ghost::io::{
    emit_report, load_checkpoint, load_dataset, read_input, save_checkpoint, save_dataset, write_atomic, write_json,
    Checkpoint, ComparisonReport, Config, ModelReport,
};
use ghost::train::data::{gen_synthetic_dataset, Dataset};
use ghost::train::{evaluate_model, history_jsonl, train_student_with_plan, train_teacher};
use ghost::Error;

#[derive(Parser, Debug)]
#[command(name = "ghost", version, about = "Mixed-precision detector quantization with gated self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full-precision teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch history as JSON lines.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Measure weight-distribution distances and write the bit plan.
    AnalyzeBits {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full d(n) tables of every searched layer.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Quantization-aware training of the student from the teacher.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use this plan instead of searching one.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare teacher and student cost and accuracy.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Run {
    config: Config,
}

impl Run {
    fn load(common: &Common) -> Result<Self> {
        let config = Config::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
        log::info!("resolved config: {}", serde_json::to_string(&config)?);
        Ok(Self { config })
    }

    /// `explicit` if given, else `name` inside the configured output directory.
    fn path(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.config.output_dir.join(name))
    }

    fn output(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let p = self.path(explicit, name);
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(p)
    }

    fn dataset(&self, explicit: &Option<PathBuf>) -> Result<Dataset> {
        let p = self.path(explicit, "dataset.bin");
        let d = load_dataset(&p).with_context(|| format!("loading dataset {}", p.display()))?;
        if d.params != self.config.dataset_params()? {
            log::warn!("dataset {} was generated with different parameters than the config", p.display());
        }
        Ok(d)
    }

    fn checkpoint(&self, explicit: &Option<PathBuf>, name: &str) -> Result<Checkpoint> {
        let p = self.path(explicit, name);
        load_checkpoint(&p).with_context(|| format!("loading checkpoint {}", p.display()))
    }
}

fn bits_of(c: &Checkpoint) -> BitPlan {
    c.bitplan.clone().unwrap_or_else(|| BitPlan::full_precision(&c.spec))
}

fn evaluate_checkpoint(c: &Checkpoint, data: &Dataset) -> Result<EvalReport> {
    Ok(evaluate_model(&c.spec, &c.params, &bits_of(c).bits(), data.val())?)
}

fn eval_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "ap", "tp", "fp", "fn", "n_gt"])?;
    for (class, ap) in &report.per_class_ap {
        let c = report.counts[class];
        w.write_record([
            class.to_string(),
            ap.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.n_gt.to_string(),
        ])?;
    }
    w.write_record(["all".into(), report.map50.to_string(), String::new(), String::new(), String::new(), String::new()])?;
    Ok(w.into_inner()?)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let run = Run::load(&common)?;
            let data = gen_synthetic_dataset(run.config.dataset_params()?)?;
            let out = run.output(&out, "dataset.bin")?;
            save_dataset(&out, &data)?;
            log::info!(
                "wrote {} scenes ({} train / {} val) to {}",
                data.scenes.len(),
                data.train().len(),
                data.val().len(),
                out.display()
            );
        }
        Command::TrainTeacher {
            common,
            data,
            out,
            history,
        } => {
            let run = Run::load(&common)?;
            let data = run.dataset(&data)?;
            let spec = run.config.network_spec()?;
            let tc = run.config.train_config(&run.config.teacher, f64::NAN);
            let outcome = train_teacher(&spec, &tc, &data)?;
            let out = run.output(&out, "teacher.ckpt")?;
            save_checkpoint(&out, &outcome.checkpoint)?;
            write_atomic(
                &run.output(&history, "teacher_history.jsonl")?,
                history_jsonl(&outcome.history)?.as_bytes(),
            )?;
            log::info!("teacher written to {}", out.display());
        }
        Command::AnalyzeBits {
            common,
            teacher,
            out,
            tables,
        } => {
            let run = Run::load(&common)?;
            let teacher = run.checkpoint(&teacher, "teacher.ckpt")?;
            let (plan, measured) = run.config.resolve_plan(&teacher.spec, &teacher.params.weights)?;
            log::info!(
                "threshold {} gives bits {:?} (mean {:.3})",
                plan.threshold,
                plan.bits().iter().map(|b| b.cost_bits()).collect::<Vec<_>>(),
                plan.average_quantized_bits()
            );
            write_json(&run.output(&out, "plan.json")?, &plan)?;
            write_json(&run.output(&tables, "tables.json")?, &measured)?;
        }
        Command::TrainStudent {
            common,
            teacher,
            data,
            plan,
            out,
            history,
        } => {
            let run = Run::load(&common)?;
            let teacher = run.checkpoint(&teacher, "teacher.ckpt")?;
            let data = run.dataset(&data)?;
            let plan: BitPlan = match &plan {
                Some(p) => serde_json::from_slice(&read_input(p)?)
                    .map_err(|e| Error::Config(format!("plan {}: {e}", p.display())))?,
                None => run.config.resolve_plan(&teacher.spec, &teacher.params.weights)?.0,
            };
            log::info!("student plan: threshold {} bits {:?}", plan.threshold, plan.bits());
            let tc = run.config.train_config(&run.config.student, plan.threshold);
            let outcome = train_student_with_plan(&teacher, &tc, &data, plan)?;
            let out = run.output(&out, "student.ckpt")?;
            save_checkpoint(&out, &outcome.checkpoint)?;
            let history_path = run.output(&history, "student_history.jsonl")?;
            write_atomic(&history_path, history_jsonl(&outcome.history)?.as_bytes())?;
            let gates: String = outcome
                .checkpoint
                .telemetry
                .iter()
                .flat_map(|t| &t.epochs)
                .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
                .collect::<serde_json::Result<_>>()?;
            write_atomic(&history_path.with_extension("gates.jsonl"), gates.as_bytes())?;
            log::info!("student written to {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => {
            let run = Run::load(&common)?;
            let c = run.checkpoint(&Some(checkpoint), "")?;
            let data = run.dataset(&data)?;
            let report = evaluate_checkpoint(&c, &data)?;
            let out = run.output(&out, "eval.json")?;
            write_json(&out, &report)?;
            write_atomic(&out.with_extension("csv"), &eval_csv(&report)?)?;
            log::info!("mAP50 {:.4} written to {}", report.map50, out.display());
        }
        Command::Report {
            common,
            teacher,
            student,
            data,
            out,
        } => {
            let run = Run::load(&common)?;
            let teacher = run.checkpoint(&teacher, "teacher.ckpt")?;
            let student = run.checkpoint(&student, "student.ckpt")?;
            let data = run.dataset(&data)?;
            let model = |c: &Checkpoint| -> Result<ModelReport> {
                Ok(ModelReport {
                    cost: cost_report(&c.spec, &bits_of(c))?,
                    eval: evaluate_checkpoint(c, &data)?,
                })
            };
            let report = ComparisonReport::new(model(&teacher)?, model(&student)?)?;
            let written = emit_report(&report, &run.output(&out, "report.json")?)?;
            log::info!(
                "mAP50 gap {:+.4}, BOPs ratio {}, written to {:?}",
                report.deltas.map50_gap,
                report.deltas.bops_ratio,
                written
            );
        }
    }
    Ok(())
}

/// Exit code by failure category: 2 invalid config, 3 missing input, 4 divergence, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain()
        .find_map(|cause| cause.downcast_ref::<Error>())
        .map_or(1, |e| match e {
            Error::Config(_) => 2,
            Error::MissingInput(_) => 3,
            Error::Divergence(_) => 4,
            _ => 1,
        })
}

fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn main() {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    std::process::exit(run_cli(std::env::args_os()));
}
