use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use distill3d_core::config::RunConfig;
use distill3d_core::dataset::{save_dataset, scenes_to_json};
use distill3d_core::detector::{Modality, ParamStore};
use distill3d_core::distill::Levels;
use distill3d_core::eval::flops_report;
use distill3d_core::train::{
    ablation_csv, detector_for, evaluate_params, generate_split, run_ablation, trace_csv, train_student,
    train_teacher, Benchmark,
};
use distill3d_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "distill3d", version, about = "Teacher/student distillation for a toy 3D detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic scene generation.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// Teacher pre-training or student distillation.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Score a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train one student per level combination and write the ablation table.
    Ablate(AblateArgs),
    /// Analytical FLOPs of the voxel consistency and relation losses.
    Flops(FlopsArgs),
}

#[derive(Subcommand)]
enum SceneCmd {
    /// Generate scenes for a seed range and write them to a file.
    Gen(SceneGenArgs),
}

#[derive(Subcommand)]
enum TrainCmd {
    Teacher(TrainArgs),
    Student(StudentArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SceneGenArgs {
    #[command(flatten)]
    common: Common,
    /// Half-open seed range such as `0..250`.
    #[arg(long, value_parser = parse_range)]
    seeds: Range<u64>,
    /// Output file; `.json` writes a readable dump, anything else the binary format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory; defaults to `out_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudentArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Teacher checkpoint; trained from the configuration when omitted.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Enabled levels, e.g. `rsp+vxl` or `none`; defaults to the configuration.
    #[arg(long)]
    levels: Option<Levels>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Teacher,
    Student,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input modality; teachers see painted semantics.
    #[arg(long, value_enum, default_value = "student")]
    modality: ModalityArg,
    /// Metrics file; `.csv` selects the tidy table, anything else JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Teacher checkpoint; trained from the configuration when omitted.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Comma-separated level combinations; defaults to the eight standard rows.
    #[arg(long, value_delimiter = ',')]
    combos: Vec<Levels>,
    /// Ablation CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// Comma-separated active-voxel counts.
    #[arg(long, value_delimiter = ',', default_value = "7718,984")]
    voxels: Vec<u64>,
    #[arg(long, default_value_t = 256)]
    channels: u64,
    /// CSV path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected START..END, got {s:?}"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty seed range {s:?}"));
    }
    Ok(a..b)
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(args: &TrainArgs, cfg: &RunConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn teacher_params(path: Option<&Path>, cfg: &RunConfig, bench: &Benchmark) -> Result<ParamStore> {
    match path {
        Some(p) => Ok(ParamStore::load(p)?),
        None => {
            eprintln!("no --teacher given; training one ({} steps)", cfg.train.teacher_steps);
            Ok(train_teacher(cfg, &bench.train)?.params)
        }
    }
}

fn scene_gen(a: &SceneGenArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let scenes = generate_split(&cfg.scene, [a.seeds.start, a.seeds.end])?;
    if a.out.extension().is_some_and(|e| e == "json") {
        write(&a.out, scenes_to_json(&scenes)?)?;
    } else {
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        save_dataset(&scenes, &a.out)?;
    }
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_teacher_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let dir = out_dir(a, &cfg);
    let bench = Benchmark::generate(&cfg)?;
    let out = train_teacher(&cfg, &bench.train)?;
    let det = detector_for(&cfg)?;
    let metrics = evaluate_params(&det, &out.params, &bench.eval, Modality::Teacher, &cfg.eval)?;
    fs::create_dir_all(&dir)?;
    out.params.save(dir.join("teacher.ckpt"))?;
    write(&dir.join("teacher_trace.csv"), trace_csv(&out.trace)?)?;
    write(&dir.join("teacher_metrics.json"), metrics.to_json()?)?;
    println!("teacher map_lite {:.4} nds_lite {:.4}", metrics.map_lite, metrics.nds_lite);
    Ok(())
}

fn train_student_cmd(a: &StudentArgs) -> Result<()> {
    let mut cfg = load_config(&a.train.common)?;
    if let Some(levels) = a.levels {
        cfg.distill = cfg.distill.with_levels(levels);
    }
    let dir = out_dir(&a.train, &cfg);
    let bench = Benchmark::generate(&cfg)?;
    let teacher = teacher_params(a.teacher.as_deref(), &cfg, &bench)?;
    let out = train_student(&cfg, &bench.train, &teacher)?;
    let det = detector_for(&cfg)?;
    let metrics = evaluate_params(&det, &out.params, &bench.eval, Modality::Student, &cfg.eval)?;
    fs::create_dir_all(&dir)?;
    out.params.save(dir.join("student.ckpt"))?;
    write(&dir.join("student_trace.csv"), trace_csv(&out.trace)?)?;
    write(&dir.join("metrics.json"), metrics.to_json()?)?;
    println!(
        "student ({}) map_lite {:.4} nds_lite {:.4}",
        cfg.distill.levels().label(),
        metrics.map_lite,
        metrics.nds_lite
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let params = ParamStore::load(&a.checkpoint)?;
    let det = detector_for(&cfg)?;
    let modality = match a.modality {
        ModalityArg::Teacher => Modality::Teacher,
        ModalityArg::Student => Modality::Student,
    };
    let eval = generate_split(&cfg.scene, cfg.data.eval_seeds)?;
    let metrics = evaluate_params(&det, &params, &eval, modality, &cfg.eval)?;
    if a.out.extension().is_some_and(|e| e == "csv") {
        write(&a.out, metrics.to_csv()?)?;
    } else {
        write(&a.out, metrics.to_json()?)?;
    }
    println!("map_lite {:.4} nds_lite {:.4}", metrics.map_lite, metrics.nds_lite);
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let combos = if a.combos.is_empty() {
        Levels::ablation_rows()
    } else {
        a.combos.clone()
    };
    let bench = Benchmark::generate(&cfg)?;
    let teacher = teacher_params(a.teacher.as_deref(), &cfg, &bench)?;
    let rows = run_ablation(&cfg, &bench, &teacher, &combos, |r| {
        let l = Levels {
            rsp: r.rsp,
            vxl: r.vxl,
            pts: r.pts,
            ins: r.ins,
        };
        eprintln!("{:<16} map_lite {:.4} nds_lite {:.4}", l.label(), r.map_lite, r.nds_lite);
    })?;
    write(&a.out, ablation_csv(&rows)?)
}

fn flops_cmd(a: &FlopsArgs) -> Result<()> {
    let mut text = String::from("voxels,channels,cons,rel\n");
    for row in flops_report(&a.voxels, a.channels) {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    match &a.out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Scene(SceneCmd::Gen(a)) => scene_gen(a),
        Command::Train(TrainCmd::Teacher(a)) => train_teacher_cmd(a),
        Command::Train(TrainCmd::Student(a)) => train_student_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Flops(a) => flops_cmd(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_config_error() => EXIT_CONFIG,
        Some(e) if e.is_numeric_error() => EXIT_NUMERIC,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
