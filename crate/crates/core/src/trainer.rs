//! BRTS and student-only distillation steps and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluator::{self, evaluate, EvalReport};
use crate::losses::{loss_stu_ctx, loss_tea_ctx, loss_total, BranchLoss, GradAccumulator, LossBreakdown};
use crate::policy::{PolicyParams, Role};
use crate::rng::{label, SeedStream};
use crate::rollout::{generate, generate_pool, Source, Trajectory};
use crate::selector::{select, SelectionOutcome, TierComposition};
use crate::task::{task_set, PromptVariant, TaskInstance};

pub const RUN_LOG: &str = "run.log";
pub const EVAL_TABLE: &str = "eval.tsv";
pub const TIMING_TABLE: &str = "timing.tsv";

pub fn checkpoint_name(step: usize) -> String {
    format!("student_step{step}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub tiers: TierComposition,
    pub mean_len_student: f64,
    pub mean_len_teacher: f64,
    pub wall_ms: u128,
    /// Key of the step's seed stream.
    pub stream_key: u64,
}

impl StepRecord {
    /// The run-log line. Wall time goes to the timing table so that the run
    /// log stays byte-identical across runs.
    pub fn log_line(&self, eval: Option<&EvalReport>) -> String {
        let mut s = format!(
            "step={} stu_ctx={} tea_ctx={} total={} lambda={} tier1_frac={} tier2_frac={} tier3_frac={} mean_len_student={} mean_len_teacher={} rng={:016x}",
            self.step,
            self.loss.stu_ctx,
            self.loss.tea_ctx,
            self.loss.total,
            self.loss.lambda,
            self.tiers.tier1,
            self.tiers.tier2,
            self.tiers.tier3,
            self.mean_len_student,
            self.mean_len_teacher,
            self.stream_key,
        );
        if let Some(e) = eval {
            push_eval_fields(&mut s, e);
        }
        s
    }
}

fn push_eval_fields(s: &mut String, e: &EvalReport) {
    let _ = write!(
        s,
        " eval_mean={} eval_best={} eval_majority={} eval_k={}",
        e.mean, e.best_at_k, e.majority_at_k, e.k
    );
}

/// The per-task work of one step, kept for inspection and logging.
#[derive(Debug, Clone)]
pub struct TaskStep {
    pub task_id: u64,
    pub student_rollouts: Vec<Trajectory>,
    pub outcome: Option<SelectionOutcome>,
    pub stu_ctx: f64,
    pub tea_ctx: f64,
    pub grad: GradAccumulator,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    pub tasks: Vec<TaskStep>,
    pub grad: GradAccumulator,
}

fn mean_branch(parts: Vec<BranchLoss>, vocab_size: usize) -> BranchLoss {
    if parts.len() == 1 {
        return parts.into_iter().next().expect("one part");
    }
    let n = parts.len() as f64;
    let value = parts.iter().map(|p| p.value).sum::<f64>() / n;
    let grads: Vec<GradAccumulator> = parts.iter().map(|p| p.grad.clone()).collect();
    BranchLoss {
        value,
        per_position: parts.into_iter().flat_map(|p| p.per_position).collect(),
        grad: GradAccumulator::mean(&grads, vocab_size),
    }
}

fn task_step(
    student: &PolicyParams,
    teacher: &PolicyParams,
    task: &TaskInstance,
    cfg: &TrainConfig,
    stream: SeedStream,
    rollouts: usize,
    teacher_branch: bool,
) -> Result<TaskStep> {
    let student_cfg = cfg.student_rollout();
    let student_rollouts = (0..rollouts)
        .map(|r| {
            let mut rng = stream.path(&[label::STUDENT, r as u64]).rng();
            generate(
                student,
                task,
                PromptVariant::Plain,
                Source::Student,
                &student_cfg,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let stu_parts = student_rollouts
        .iter()
        .map(|y| loss_stu_ctx(student, teacher, task, y, cfg.top_k))
        .collect::<Result<Vec<_>>>()?;
    let stu = mean_branch(stu_parts, student.vocab_size());

    let (outcome, tea) = if teacher_branch {
        let teacher_cfg = cfg.teacher_rollout();
        let pool = generate_pool(
            teacher,
            task,
            cfg.num_candidates,
            cfg.perturb_one,
            &teacher_cfg,
            stream.child(label::TEACHER_POOL),
        )?;
        let outcome = select(
            student,
            teacher,
            task,
            &pool,
            cfg.tier2_enabled,
            cfg.top_k,
            &teacher_cfg,
            stream.child(label::TIER2),
        )?;
        let tea = loss_tea_ctx(student, teacher, task, &outcome.chosen, cfg.top_k)?;
        (Some(outcome), Some(tea))
    } else {
        (None, None)
    };
    let (breakdown, grad) = loss_total(&stu, tea.as_ref(), cfg.lambda)?;
    Ok(TaskStep {
        task_id: task.id,
        student_rollouts,
        outcome,
        stu_ctx: breakdown.stu_ctx,
        tea_ctx: breakdown.tea_ctx,
        grad,
    })
}

fn run_step(
    student: &mut PolicyParams,
    teacher: &PolicyParams,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    stream: SeedStream,
    rollouts: usize,
    teacher_branch: bool,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must be nonempty"));
    }
    if student.role() != Role::Student {
        return Err(Error::invalid("the updated policy must carry the student role"));
    }
    if student.vocab_size() != teacher.vocab_size() {
        return Err(Error::invalid("student and teacher vocabularies differ"));
    }
    let started = Instant::now();
    let frozen: &PolicyParams = student;
    let tasks = batch
        .par_iter()
        .enumerate()
        .map(|(j, task)| {
            task_step(
                frozen,
                teacher,
                task,
                cfg,
                stream.child(j as u64),
                rollouts,
                teacher_branch,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // Reduce in batch order so the result does not depend on scheduling.
    let grads: Vec<GradAccumulator> = tasks.iter().map(|t| t.grad.clone()).collect();
    let grad = GradAccumulator::mean(&grads, student.vocab_size());
    let b = tasks.len() as f64;
    let stu_ctx = tasks.iter().map(|t| t.stu_ctx).sum::<f64>() / b;
    let tea_ctx = tasks.iter().map(|t| t.tea_ctx).sum::<f64>() / b;
    let tiers = if teacher_branch {
        TierComposition::from_tiers(tasks.iter().filter_map(|t| t.outcome.as_ref().map(|o| o.tier)))?
    } else {
        TierComposition::zero()
    };
    let n_student: usize = tasks.iter().map(|t| t.student_rollouts.len()).sum();
    let mean_len_student = tasks
        .iter()
        .flat_map(|t| &t.student_rollouts)
        .map(|y| y.len() as f64)
        .sum::<f64>()
        / n_student as f64;
    let mean_len_teacher = if teacher_branch {
        tasks
            .iter()
            .filter_map(|t| t.outcome.as_ref())
            .map(|o| o.chosen.len() as f64)
            .sum::<f64>()
            / b
    } else {
        0.0
    };
    grad.apply(student, cfg.lr);
    Ok(StepOutput {
        record: StepRecord {
            step: 0,
            loss: LossBreakdown::new(stu_ctx, tea_ctx, cfg.lambda),
            tiers,
            mean_len_student,
            mean_len_teacher,
            wall_ms: started.elapsed().as_millis(),
            stream_key: stream.key(),
        },
        tasks,
        grad,
    })
}

/// One BRTS step: a student rollout, a curated teacher trajectory, and a
/// gradient step on `stu_ctx + λ·tea_ctx`. `num_candidates = 0` turns the
/// teacher branch off.
pub fn brts_step(
    student: &mut PolicyParams,
    teacher: &PolicyParams,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    stream: SeedStream,
) -> Result<StepOutput> {
    run_step(student, teacher, batch, cfg, stream, 1, cfg.num_candidates > 0)
}

/// Student-only distillation with `num_student_rollouts` rollouts per task,
/// their losses averaged.
pub fn opd_baseline_step(
    student: &mut PolicyParams,
    teacher: &PolicyParams,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    stream: SeedStream,
) -> Result<StepOutput> {
    run_step(student, teacher, batch, cfg, stream, cfg.num_student_rollouts, false)
}

pub fn step(
    student: &mut PolicyParams,
    teacher: &PolicyParams,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    stream: SeedStream,
) -> Result<StepOutput> {
    match cfg.mode {
        Mode::Brts => brts_step(student, teacher, batch, cfg, stream),
        Mode::Opd => opd_baseline_step(student, teacher, batch, cfg, stream),
    }
}

pub fn train_batch(cfg: &TrainConfig, step: usize) -> Result<Vec<TaskInstance>> {
    task_set(
        SeedStream::new(cfg.seed).path(&[label::TRAIN_BATCH, step as u64]),
        cfg.batch_size,
        cfg.min_difficulty,
        cfg.max_difficulty,
    )
}

pub fn step_stream(cfg: &TrainConfig, step: usize) -> SeedStream {
    SeedStream::new(cfg.seed).path(&[label::STEP, step as u64])
}

pub fn heldout_tasks(cfg: &TrainConfig) -> Result<Vec<TaskInstance>> {
    task_set(
        SeedStream::new(cfg.seed).path(&[label::HELDOUT, 0]),
        cfg.eval_tasks,
        cfg.min_difficulty,
        cfg.max_difficulty,
    )
}

pub fn evaluate_at(
    policy: &PolicyParams,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    step: usize,
) -> Result<EvalReport> {
    evaluate(
        policy,
        tasks,
        cfg.eval_k,
        &cfg.eval_rollout(),
        SeedStream::new(cfg.seed).path(&[label::EVAL, step as u64]),
    )
}

/// Result of [`train_in_memory`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: PolicyParams,
    pub records: Vec<StepRecord>,
    pub evals: Vec<(usize, EvalReport)>,
}

fn eval_due(cfg: &TrainConfig, step: usize) -> bool {
    step == 0 || step == cfg.steps || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every))
}

/// The training loop without any file output.
pub fn train_in_memory(cfg: &TrainConfig, teacher: &PolicyParams, student: PolicyParams) -> Result<TrainOutcome> {
    run_loop(cfg, teacher, student, &mut |_| Ok(()))
}

enum Event<'a> {
    Start(&'a PolicyParams, &'a EvalReport),
    Step(&'a StepOutput, Option<&'a EvalReport>, &'a PolicyParams),
}

fn run_loop(
    cfg: &TrainConfig,
    teacher: &PolicyParams,
    mut student: PolicyParams,
    sink: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let held_out = heldout_tasks(cfg)?;
    let mut evals = Vec::new();
    let initial = evaluate_at(&student, &held_out, cfg, 0)?;
    sink(Event::Start(&student, &initial))?;
    evals.push((0, initial));
    let mut records = Vec::with_capacity(cfg.steps);
    for s in 1..=cfg.steps {
        let batch = train_batch(cfg, s)?;
        let mut out = step(&mut student, teacher, &batch, cfg, step_stream(cfg, s))?;
        out.record.step = s;
        let eval = if eval_due(cfg, s) {
            Some(evaluate_at(&student, &held_out, cfg, s)?)
        } else {
            None
        };
        sink(Event::Step(&out, eval.as_ref(), &student))?;
        if let Some(e) = eval {
            evals.push((s, e));
        }
        records.push(out.record);
    }
    Ok(TrainOutcome {
        student,
        records,
        evals,
    })
}

/// Files produced by [`train`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub outcome: TrainOutcome,
}

struct RunWriter {
    dir: PathBuf,
    log: fs::File,
    eval: fs::File,
    timing: fs::File,
    files: Vec<PathBuf>,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            fs::File::create(&p).map_err(|e| Error::io(p, e))
        };
        let mut w = Self {
            dir: dir.to_path_buf(),
            log: open(RUN_LOG)?,
            eval: open(EVAL_TABLE)?,
            timing: open(TIMING_TABLE)?,
            files: vec![dir.join(RUN_LOG), dir.join(EVAL_TABLE), dir.join(TIMING_TABLE)],
        };
        w.write_eval(evaluator::TABLE_HEADER)?;
        w.write_timing("step\twall_ms")?;
        Ok(w)
    }

    fn err(&self, name: &str, e: std::io::Error) -> Error {
        Error::io(self.dir.join(name), e)
    }

    fn write_log(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{line}").map_err(|e| self.err(RUN_LOG, e))
    }

    fn write_eval(&mut self, line: &str) -> Result<()> {
        writeln!(self.eval, "{line}").map_err(|e| self.err(EVAL_TABLE, e))
    }

    fn write_timing(&mut self, line: &str) -> Result<()> {
        writeln!(self.timing, "{line}").map_err(|e| self.err(TIMING_TABLE, e))
    }

    fn checkpoint(&mut self, student: &PolicyParams, step: usize) -> Result<()> {
        let path = self.dir.join(checkpoint_name(step));
        checkpoint::save(student, &path)?;
        self.files.push(path);
        Ok(())
    }
}

/// Runs the loop and writes `run.log`, `eval.tsv`, `timing.tsv` and
/// `student_step{N}` checkpoints into `out_dir`.
pub fn train(cfg: &TrainConfig, teacher: &PolicyParams, student: PolicyParams, out_dir: &Path) -> Result<RunSummary> {
    let mut w = RunWriter::create(out_dir)?;
    let outcome = run_loop(cfg, teacher, student, &mut |event| match event {
        Event::Start(student, eval) => {
            let mut line = "step=0".to_string();
            push_eval_fields(&mut line, eval);
            w.write_log(&line)?;
            w.write_eval(&eval.table_row(0))?;
            w.checkpoint(student, 0)
        }
        Event::Step(out, eval, student) => {
            let s = out.record.step;
            w.write_log(&out.record.log_line(eval))?;
            if cfg.log_trajectories {
                for t in &out.tasks {
                    for y in &t.student_rollouts {
                        w.write_log(&y.log_record(s, None))?;
                    }
                    if let Some(o) = &t.outcome {
                        w.write_log(&o.chosen.log_record(s, Some(o.overlap)))?;
                    }
                }
            }
            if let Some(e) = eval {
                w.write_eval(&e.table_row(s))?;
            }
            w.write_timing(&format!("{s}\t{}", out.record.wall_ms))?;
            if s == cfg.steps || (cfg.checkpoint_every > 0 && s.is_multiple_of(cfg.checkpoint_every)) {
                w.checkpoint(student, s)?;
            }
            Ok(())
        }
    })?;
    for f in [&w.log, &w.eval, &w.timing] {
        f.sync_all().map_err(|e| Error::io(out_dir, e))?;
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        files: w.files,
        outcome,
    })
}

/// Parses a step line of the run log into `(key, value)` pairs, checking
/// that the keys are known and the values well formed.
pub fn parse_log_line(line: &str) -> Result<Vec<(String, String)>> {
    const INT_KEYS: &[&str] = &["step", "eval_k"];
    const FLOAT_KEYS: &[&str] = &[
        "stu_ctx",
        "tea_ctx",
        "total",
        "lambda",
        "tier1_frac",
        "tier2_frac",
        "tier3_frac",
        "mean_len_student",
        "mean_len_teacher",
        "eval_mean",
        "eval_best",
        "eval_majority",
    ];
    let mut out: Vec<(String, String)> = Vec::new();
    for word in line.split_whitespace() {
        let (k, v) = word
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("malformed field {word:?}")))?;
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::invalid(format!("duplicate field {k}")));
        }
        let ok = if INT_KEYS.contains(&k) {
            v.parse::<u64>().is_ok()
        } else if FLOAT_KEYS.contains(&k) {
            v.parse::<f64>().is_ok_and(f64::is_finite)
        } else if k == "rng" {
            v.len() == 16 && u64::from_str_radix(v, 16).is_ok()
        } else {
            return Err(Error::invalid(format!("unknown field {k}")));
        };
        if !ok {
            return Err(Error::invalid(format!("bad value for {k}: {v:?}")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    if out.first().map(|(k, _)| k.as_str()) != Some("step") {
        return Err(Error::invalid("a run-log line starts with step="));
    }
    Ok(out)
}
