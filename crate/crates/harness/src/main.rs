use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uet_core::data::{class_frequencies, CLASSES};
use uet_harness::ablation::{default_grids, plan, run_ablation, write_outputs};
use uet_harness::checkpoint::{load_net, save_dataset, save_net};
use uet_harness::config::ExperimentConfig;
use uet_harness::gradcheck::{run_suite, EPS, TOLERANCE};
use uet_harness::report::{emit_convergence, epochs_csv, write_text, Status, TrainReport};
use uet_harness::runner::{distill_student, train_teacher, Dataset, RunOptions, RunOutcome, TeacherBundle};
use uet_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "uet", about = "Uncertainty-aware feature distillation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's run (for ablate: a single seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Single-threaded, no wall-clock fields in reports.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval splits and dump them to a tensor container.
    GenData,
    /// Pretrain the teacher.
    TrainTeacher,
    /// Train a student against a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Train without distillation.
        #[arg(long)]
        scratch: bool,
    },
    /// Run the ablation grids (the shipped suite unless the config lists grids).
    Ablate {
        /// Reuse a teacher checkpoint instead of pretraining one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Align eval-accuracy curves of several reports into one CSV.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    match &c.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn options(c: &Common) -> RunOptions {
    RunOptions {
        deterministic: c.deterministic,
        record_steps: false,
    }
}

fn write_run(out: &Path, stem: &str, run: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    save_net(&out.join(format!("{stem}.ckpt")), &run.net, run.adapter.as_ref())?;
    run.report.write_json(&out.join(format!("{stem}_report.json")))?;
    write_text(&out.join(format!("{stem}_epochs.csv")), &epochs_csv(&run.report)?)
}

fn finish_run(run: &RunOutcome) -> Result<()> {
    let r = &run.report;
    match r.status {
        Status::Ok => {
            println!("{}: final eval accuracy {:.4} {:?}", r.label, r.final_accuracy_mean, r.final_accuracy);
            Ok(())
        }
        Status::Failed => Err(HarnessError::Numerical(r.error.clone().unwrap_or_default())),
    }
}

fn load_teacher(path: &Path, data: &Dataset) -> Result<TeacherBundle> {
    let (net, _) = load_net(path)?;
    if net.role != uet_core::Role::Teacher {
        return Err(HarnessError::Config(format!("{} is not a teacher checkpoint", path.display())));
    }
    TeacherBundle::new(net, data)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = load_config(c)?;
    let opts = options(c);
    match cli.command {
        Command::GenData => {
            let data = Dataset::generate(&cfg.data)?;
            std::fs::create_dir_all(&c.out).map_err(HarnessError::io(&c.out))?;
            save_dataset(&c.out.join("dataset.uett"), &data.cfg, &data.train, &data.eval)?;
            let freq: Vec<[f64; CLASSES]> = (0..data.cfg.scales).map(|s| class_frequencies(&data.train, s)).collect();
            let summary = serde_json::json!({
                "digest": data.digest,
                "n_train": data.train.len(),
                "n_eval": data.eval.len(),
                "train_class_frequencies": freq,
                "eval_background_baseline": data.background_baseline().per_scale,
            });
            write_text(&c.out.join("dataset.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
            println!("dataset {} ({} train, {} eval)", data.digest, data.train.len(), data.eval.len());
        }
        Command::TrainTeacher => {
            if let Some(s) = c.seed {
                cfg.teacher.train.seed = s;
            }
            let data = Dataset::generate(&cfg.data)?;
            let run = train_teacher(cfg.teacher.size(), &cfg.teacher.train, &data, opts)?;
            write_run(&c.out, "teacher", &run)?;
            println!("background baseline {:.4}", data.background_baseline().mean);
            finish_run(&run)?;
        }
        Command::Distill { teacher, scratch } => {
            if let Some(s) = c.seed {
                cfg.student.train.seed = s;
            }
            if scratch {
                cfg.student.train.distill = None;
            }
            let data = Dataset::generate(&cfg.data)?;
            let bundle = load_teacher(&teacher, &data)?;
            let run = distill_student(cfg.student.size(), &cfg.student.train, &bundle, &data, opts)?;
            write_run(&c.out, "student", &run)?;
            if !run.report.teacher_unchanged() {
                return Err(HarnessError::Numerical("teacher parameters changed during distillation".into()));
            }
            finish_run(&run)?;
        }
        Command::Ablate { teacher } => {
            if let Some(s) = c.seed {
                cfg.seeds = vec![s];
            }
            let grids = cfg.grids.clone().unwrap_or_else(default_grids);
            let mut total = 0;
            for (name, cells, seeds) in plan(&cfg, &grids)? {
                println!("grid {name}: {cells} cells x {seeds} seeds = {} rows", cells * seeds);
                total += cells * seeds;
            }
            println!("total {total} rows");
            let data = Dataset::generate(&cfg.data)?;
            let bundle = match teacher {
                Some(p) => load_teacher(&p, &data)?,
                None => {
                    let run = train_teacher(cfg.teacher.size(), &cfg.teacher.train, &data, opts)?;
                    write_run(&c.out, "teacher", &run)?;
                    finish_run(&run)?;
                    TeacherBundle::new(run.net, &data)?
                }
            };
            let result = run_ablation(&cfg, &grids, &bundle, &data, opts, c.jobs)?;
            write_outputs(&result, &c.out)?;
            let s = &result.summary;
            println!("{} distinct runs over {} distinct cells", s.runs, s.cells);
            if let Some(d) = s.uet_minus_et {
                println!("UET default - ET baseline: {:+.4} +/- {:.4} over {} seeds", d.mean, d.std, d.seeds);
            }
            if let Some(d) = s.distilled_minus_scratch {
                println!("distilled - scratch: {:+.4} +/- {:.4} over {} seeds", d.mean, d.std, d.seeds);
            }
            let failed = result.rows.iter().filter(|r| r.status == Status::Failed).count();
            if failed > 0 {
                println!("{failed} rows failed");
            }
            if !s.teacher_unchanged {
                return Err(HarnessError::Numerical("teacher parameters changed during ablation".into()));
            }
        }
        Command::Gradcheck => {
            let checks = run_suite(EPS)?;
            let mut bad = 0;
            for ch in &checks {
                let verdict = if ch.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:40} {:.3e}", ch.name, ch.max_rel_error);
                bad += usize::from(!ch.passed());
            }
            if bad > 0 {
                return Err(HarnessError::Numerical(format!("{bad} checks above {TOLERANCE:e}")));
            }
        }
        Command::Report { reports } => {
            let reports = reports.iter().map(|p| TrainReport::read_json(p)).collect::<Result<Vec<_>>>()?;
            let csv = emit_convergence(&reports)?;
            let path = c.out.join("convergence.csv");
            write_text(&path, &csv)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors; here 2 is reserved for numerical failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
