use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use brts_core::evaluator::{evaluate, TABLE_HEADER};
use brts_core::gradcheck;
use brts_core::policy::{PolicyParams, Role};
use brts_core::pretrain::{init_student, pretrain_teacher};
use brts_core::rng::{label, SeedStream};
use brts_core::rollout::generate_pool;
use brts_core::selector::{catch_rate_analysis, select, CatchMode, CatchRateCurve};
use brts_core::task::{generate_task, load_tasks, task_set, TaskInstance};
use brts_core::vocab::render;
use brts_core::{checkpoint, trainer, TrainConfig};

mod manifest;

use manifest::{Manifest, Status};

const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
const STUDENT_CHECKPOINT: &str = "student.ckpt";

/// Best-of-N rollout teacher selection experiments on a synthetic arithmetic task.
#[derive(Parser, Debug)]
#[command(name = "brts", version)]
struct Cli {
    /// Config file of `key = value` lines; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and the manifest.
    #[arg(long, global = true, default_value = "brts-out")]
    out_dir: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the teacher to the accuracy gate and prepare the weak student.
    Pretrain,
    /// Run distillation and write the run log, eval table and checkpoints.
    Train,
    /// Score a checkpoint with mean, best@k and majority@k.
    Eval(EvalArgs),
    /// Show the selection rule on one task.
    Select(SelectArgs),
    /// Tier-1 catch rate against the i.i.d. baseline.
    Catchrate(CatchrateArgs),
    /// Compare analytic loss gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task file; defaults to the held-out set derived from the seed.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Samples per task; defaults to `eval_k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    task_seed: u64,
    #[arg(long, default_value_t = 2)]
    difficulty: u32,
    /// Pool size; defaults to `num_candidates`.
    #[arg(long)]
    n: Option<usize>,
    /// Condition the last candidate on the perturbed prompt.
    #[arg(long)]
    perturb_one: bool,
    #[arg(long)]
    no_tier2: bool,
}

#[derive(Args, Debug)]
struct CatchrateArgs {
    /// Teacher checkpoint; required unless `--p-hat` is given.
    #[arg(long, required_unless_present = "p_hat")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    n_max: usize,
    /// fixed_prompt, iid_resample or perturb_one.
    #[arg(long, default_value = "fixed_prompt")]
    mode: CatchMode,
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Number of generated tasks when no task file is given.
    #[arg(long, default_value_t = 1000)]
    num_tasks: usize,
    /// Print the analytic baseline for this single-sample rate instead.
    #[arg(long, conflicts_with_all = ["checkpoint", "tasks"])]
    p_hat: Option<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

/// Whether every declared gate passed.
type Gates = bool;

fn resolve_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn load_policy(path: &Path) -> Result<PolicyParams> {
    Ok(checkpoint::load(path)?)
}

fn pretrain(cfg: &TrainConfig, out: &Path, m: &mut Manifest) -> Result<Gates> {
    let (teacher, t) = pretrain_teacher(cfg)?;
    m.gate("teacher_greedy_accuracy", t.greedy_accuracy);
    m.gate("teacher_gate", t.gate);
    m.gate("teacher_steps", t.steps_run);
    checkpoint::save(&teacher, &out.join(TEACHER_CHECKPOINT))?;
    let (student, s) = init_student(cfg)?;
    m.gate("student_greedy_accuracy", s.greedy_accuracy);
    m.gate("student_gate", s.gate);
    checkpoint::save(&student, &out.join(STUDENT_CHECKPOINT))?;
    println!(
        "teacher greedy accuracy {:.4} (gate ≥ {}), student {:.4} (gate ≤ {})",
        t.greedy_accuracy, t.gate, s.greedy_accuracy, s.gate
    );
    Ok(t.passed && s.passed)
}

/// Loads the configured checkpoints, pretraining whichever is missing.
fn prepare_policies(cfg: &TrainConfig, m: &mut Manifest) -> Result<(PolicyParams, PolicyParams)> {
    let teacher = if cfg.teacher_checkpoint.is_empty() {
        let (p, r) = pretrain_teacher(cfg)?;
        m.gate("teacher_greedy_accuracy", r.greedy_accuracy);
        p
    } else {
        load_policy(Path::new(&cfg.teacher_checkpoint))?
    };
    let student = if cfg.student_checkpoint.is_empty() {
        let (p, r) = init_student(cfg)?;
        m.gate("student_greedy_accuracy", r.greedy_accuracy);
        p
    } else {
        load_policy(Path::new(&cfg.student_checkpoint))?.with_role(Role::Student)
    };
    for (name, p) in [("teacher", &teacher), ("student", &student)] {
        if p.vocab_size() != cfg.vocab_size {
            bail!(
                "{name} checkpoint has vocab_size {} but the config says {}",
                p.vocab_size(),
                cfg.vocab_size
            );
        }
    }
    Ok((teacher, student))
}

fn train(cfg: &TrainConfig, out: &Path, m: &mut Manifest) -> Result<Gates> {
    let (teacher, student) = prepare_policies(cfg, m)?;
    let summary = trainer::train(cfg, &teacher, student, out)?;
    if let Some((step, e)) = summary.outcome.evals.last() {
        println!(
            "step {step}: mean {:.4} best@{k} {:.4} majority@{k} {:.4}",
            e.mean,
            e.best_at_k,
            e.majority_at_k,
            k = e.k
        );
    }
    Ok(true)
}

fn read_or_generate_tasks(
    cfg: &TrainConfig,
    path: Option<&Path>,
    stream: SeedStream,
    count: usize,
) -> Result<Vec<TaskInstance>> {
    match path {
        Some(p) => {
            let tasks = load_tasks(p)?;
            if tasks.is_empty() {
                bail!("task file {} has no tasks", p.display());
            }
            Ok(tasks)
        }
        None => Ok(task_set(stream, count, cfg.min_difficulty, cfg.max_difficulty)?),
    }
}

fn eval(cfg: &TrainConfig, args: &EvalArgs, out: &Path) -> Result<Gates> {
    let policy = load_policy(&args.checkpoint)?;
    let tasks = match &args.tasks {
        Some(p) => read_or_generate_tasks(cfg, Some(p), SeedStream::new(cfg.seed), 0)?,
        None => trainer::heldout_tasks(cfg)?,
    };
    let k = args.k.unwrap_or(cfg.eval_k);
    let report = evaluate(
        &policy,
        &tasks,
        k,
        &cfg.eval_rollout(),
        SeedStream::new(cfg.seed).child(label::EVAL),
    )?;
    let mut table = format!("{TABLE_HEADER}\n{}\n", report.table_row(0));
    table.push_str("# per difficulty\ndifficulty\tmean\tbest\tmajority\ttasks\n");
    for (d, a) in &report.per_difficulty {
        let _ = writeln!(
            table,
            "{d}\t{:.6}\t{:.6}\t{:.6}\t{}",
            a.mean, a.best_at_k, a.majority_at_k, a.task_count
        );
    }
    write_file(out, "eval.tsv", &table)?;
    println!(
        "tasks {} k {k}: mean {:.4} best@k {:.4} majority@k {:.4}",
        report.task_count, report.mean, report.best_at_k, report.majority_at_k
    );
    Ok(true)
}

fn select_cmd(cfg: &TrainConfig, args: &SelectArgs, out: &Path) -> Result<Gates> {
    let teacher = load_policy(&args.teacher)?;
    let student = load_policy(&args.student)?;
    if teacher.vocab_size() != student.vocab_size() {
        bail!("teacher and student vocabularies differ");
    }
    let task = generate_task(args.task_seed, args.difficulty)?;
    let n = args.n.unwrap_or(cfg.num_candidates);
    if n == 0 {
        bail!("pool size must be at least 1");
    }
    let teacher_cfg = cfg.teacher_rollout();
    let stream = SeedStream::new(cfg.seed);
    let pool = generate_pool(
        &teacher,
        &task,
        n,
        args.perturb_one,
        &teacher_cfg,
        stream.child(label::TEACHER_POOL),
    )?;
    let outcome = select(
        &student,
        &teacher,
        &task,
        &pool,
        !args.no_tier2,
        cfg.top_k,
        &teacher_cfg,
        stream.child(label::TIER2),
    )?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "task {} prompt {} answer {}",
        task.id,
        render(&task.prompt),
        render(&task.ground_truth)
    );
    for (i, y) in pool.iter().enumerate() {
        let _ = writeln!(
            s,
            "candidate {i} {:?} correct={} overlap={:.4} tokens {}",
            y.variant,
            u8::from(y.correct),
            outcome.pool_overlaps[i],
            render(&y.tokens)
        );
    }
    if let Some(y) = &outcome.tier2_rollout {
        let _ = writeln!(
            s,
            "tier2 rollout correct={} tokens {}",
            u8::from(y.correct),
            render(&y.tokens)
        );
    }
    let _ = writeln!(
        s,
        "chosen tier={} source={} correct={} overlap={:.4} tokens {}",
        outcome.tier,
        outcome.chosen.source,
        u8::from(outcome.chosen.correct),
        outcome.overlap,
        render(&outcome.chosen.tokens)
    );
    print!("{s}");
    write_file(out, "selection.txt", &s)?;
    Ok(true)
}

fn catchrate(cfg: &TrainConfig, args: &CatchrateArgs, out: &Path) -> Result<Gates> {
    let curve = match args.p_hat {
        Some(p) => {
            if !(0.0..=1.0).contains(&p) {
                bail!("--p-hat must lie in [0, 1], got {p}");
            }
            CatchRateCurve::analytic(p, args.n_max)
        }
        None => {
            let path = args.checkpoint.as_deref().expect("clap requires a checkpoint");
            let teacher = load_policy(path)?;
            let stream = SeedStream::new(cfg.seed).child(label::CATCH_RATE);
            let tasks = read_or_generate_tasks(cfg, args.tasks.as_deref(), stream.child(0), args.num_tasks)?;
            catch_rate_analysis(
                &teacher,
                &tasks,
                args.n_max,
                args.mode,
                &cfg.teacher_rollout(),
                stream.child(1),
            )?
        }
    };
    let table = curve.to_table();
    print!("{table}");
    write_file(out, "catchrate.tsv", &table)?;
    Ok(true)
}

fn gradcheck_cmd(cfg: &TrainConfig, args: &GradcheckArgs, out: &Path) -> Result<Gates> {
    if args.cases == 0 {
        bail!("--cases must be at least 1");
    }
    let results = gradcheck::run(SeedStream::new(cfg.seed).child(label::GRADCHECK), args.cases, args.step)?;
    let mut table = String::from("case\tbranch\tvocab_size\tmax_abs_error\trelative_error\n");
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(
            table,
            "{}\t{:?}\t{}\t{:e}\t{:e}",
            i / 2,
            r.branch,
            r.vocab_size,
            r.max_abs_error,
            r.relative_error
        );
    }
    write_file(out, "gradcheck.tsv", &table)?;
    let failures = results.iter().filter(|r| !r.passes(args.tolerance)).count();
    let worst = results.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    println!(
        "{} checks, worst relative error {worst:.3e}, {failures} above {}",
        results.len(),
        args.tolerance
    );
    Ok(failures == 0)
}

fn run(cli: &Cli) -> Result<Gates> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let cfg = resolve_config(cli)?;
    let name = match &cli.command {
        Command::Pretrain => "pretrain",
        Command::Train => "train",
        Command::Eval(_) => "eval",
        Command::Select(_) => "select",
        Command::Catchrate(_) => "catchrate",
        Command::Gradcheck(_) => "gradcheck",
    };
    let out = cli.out_dir.as_path();
    let mut m = Manifest::begin(out, name, &cfg)?;
    let result = match &cli.command {
        Command::Pretrain => pretrain(&cfg, out, &mut m),
        Command::Train => train(&cfg, out, &mut m),
        Command::Eval(a) => eval(&cfg, a, out),
        Command::Select(a) => select_cmd(&cfg, a, out),
        Command::Catchrate(a) => catchrate(&cfg, a, out),
        Command::Gradcheck(a) => gradcheck_cmd(&cfg, a, out),
    };
    let status = match &result {
        Ok(true) => Status::Complete,
        _ => Status::Failed,
    };
    m.finish(status)?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: bad arguments"));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a gate failed; see the output above");
            ExitCode::FAILURE
        }
        Err(e) => {
            // one line: the error and its causes joined
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
