//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances are pinned here and nowhere else.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use brts_core::evaluator::{evaluate, EvalReport};
use brts_core::gradcheck;
use brts_core::losses::{kl_exact, kl_topk};
use brts_core::policy::{Decoding, NextTokenDist, PolicyParams, Role};
use brts_core::pretrain::{init_student, pretrain_teacher};
use brts_core::rng::SeedStream;
use brts_core::rollout::{generate_pool, RolloutConfig};
use brts_core::selector::{catch_rate_analysis, choose, iid_baseline, select, CatchMode, Choice, Tier};
use brts_core::task::{parse_task_line, PromptVariant, TaskInstance};
use brts_core::trainer::{train, train_in_memory};
use brts_core::vocab::{ANSWER_MARK, EOS, PLUS, TIMES};
use brts_core::{Mode, TrainConfig};
use rand::Rng;

const GRAD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_CASES: usize = 120;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const KL_EXACT_TOL: f64 = 1e-12;
const KL_FLOOR: f64 = -1e-12;
const KL_PAIRS: usize = 1000;
const SELECTION_BUDGET: Duration = Duration::from_secs(5);
const REFERENCE_P_HAT: f64 = 0.4336;
const REFERENCE_BASELINE: [(usize, f64); 3] = [(2, 0.6792), (3, 0.8183), (4, 0.8971)];
const MC_TASKS: usize = 2400;
const MC_SIGMAS: f64 = 3.0;
const CORRELATION_RUNS: u64 = 20;
const CORRELATION_BELOW_FRAC: f64 = 0.95;
const PERTURB_AT_LEAST_FRAC: f64 = 0.80;
const SINGLE_SAMPLE_RANGE: (f64, f64) = (0.3, 0.6);
const TIER2_SEEDS: u64 = 5;
const TRAIN_SEEDS: u64 = 5;
const TRAIN_STEPS: usize = 200;
const TRAIN_BATCH: usize = 32;
const TEACHER_GATE: f64 = 0.9;
const STUDENT_GATE: f64 = 0.4;
const TRAIN_BUDGET: Duration = Duration::from_secs(300);
const DETERMINISM_THREADS: [usize; 3] = [1, 2, 4];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

// --- shared fixtures -------------------------------------------------------

/// Ground truth computed independently of the library: a two-operand
/// expression mod 10, or a single digit.
fn every_short_task() -> Vec<TaskInstance> {
    let mut lines = Vec::new();
    for a in 0..10u32 {
        lines.push(format!("12 {a} {ANSWER_MARK}|{a}|1"));
        for b in 0..10u32 {
            lines.push(format!("12 {a} {PLUS} {b} {ANSWER_MARK}|{}|2", (a + b) % 10));
            lines.push(format!("12 {a} {TIMES} {b} {ANSWER_MARK}|{}|2", (a * b) % 10));
        }
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| parse_task_line(l, i as u64).expect("fixture line"))
        .collect()
}

fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// A sharp teacher whose answer after each (prompt, variant) context is a
/// fixed label, correct with the given probability. Labels are drawn per
/// context from `seed`, so runs differ and samples on one context are
/// perfectly correlated.
fn noisy_label_teacher(seed: u64, plain_acc: f64, hint_acc: f64) -> PolicyParams {
    const MARGIN: f64 = 8.0;
    let cfg = TrainConfig::default();
    let mut p = PolicyParams::new(cfg.vocab_size, cfg.context_window, Role::Teacher).unwrap();
    let set = |p: &mut PolicyParams, prefix: &[u32], target: u32| {
        let mut z = vec![0.0; cfg.vocab_size];
        z[target as usize] = MARGIN;
        p.set_logits(p.context_key(prefix).into_owned(), z).unwrap();
    };
    let labels = SeedStream::new(seed);
    for task in every_short_task() {
        let gt = task.ground_truth[0];
        for (variant, acc) in [
            (PromptVariant::Plain, plain_acc),
            (PromptVariant::Perturbed, plain_acc),
            (PromptVariant::Hint, hint_acc),
        ] {
            let mut prefix = task.prompt_for(variant).to_vec();
            set(&mut p, &prefix, ANSWER_MARK);
            prefix.push(ANSWER_MARK);
            let key: Vec<u64> = p.context_key(&prefix).iter().map(|&t| u64::from(t)).collect();
            let h = labels.path(&key).key();
            let label = if unit_interval(h) < acc {
                gt
            } else {
                (gt + 1 + (h % 9) as u32) % 10
            };
            set(&mut p, &prefix, label);
            prefix.push(label);
            set(&mut p, &prefix, EOS);
        }
    }
    p
}

fn low_temperature() -> RolloutConfig {
    RolloutConfig {
        k: 16,
        decoding: Decoding::sample(0.5, 0.95).unwrap(),
        max_len: 8,
    }
}

fn random_tasks(stream: SeedStream, count: usize) -> Vec<TaskInstance> {
    let all = every_short_task();
    let mut rng = stream.rng();
    (0..count)
        .map(|i| {
            let mut t = all[rng.random_range(0..all.len())].clone();
            t.id = i as u64;
            t
        })
        .collect()
}

// --- criteria --------------------------------------------------------------

fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let results = gradcheck::run(SeedStream::new(0x6ead), GRAD_CASES, GRAD_STEP).unwrap();
    let elapsed = started.elapsed();
    let worst = results.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let failures = results.iter().filter(|r| !r.passes(GRAD_REL_TOL)).count();
    let (vmin, vmax) = results.iter().fold((usize::MAX, 0), |(lo, hi), r| {
        (lo.min(r.vocab_size), hi.max(r.vocab_size))
    });
    verdict(
        failures == 0 && results.len() >= 200 && elapsed < GRAD_BUDGET && vmin >= 3 && vmax <= 20,
        format!(
            "{} branch checks over {GRAD_CASES} cases, vocab {vmin}..={vmax}, worst rel err {worst:.2e}, {failures} failures, {elapsed:.2?}",
            results.len()
        ),
    )
}

/// `Σ p log(p/q)` written out directly.
fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

fn topk_bounds() -> Verdict {
    let mut rng = SeedStream::new(0x7095).rng();
    let mut full_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    let mut bound_violations = 0;
    let mut min_kl = f64::INFINITY;
    for _ in 0..KL_PAIRS {
        let n = rng.random_range(2..=24);
        let scale = rng.random_range(0.1..6.0);
        let zp: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let zq: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let p = NextTokenDist::from_logits(&zp, 1.0);
        let q = NextTokenDist::from_logits(&zq, 1.0);
        let exact = kl_exact(&p, &q).unwrap();
        let all: Vec<u32> = (0..n as u32).collect();
        full_err = full_err.max((kl_topk(&p, &q, &all).unwrap() - exact).abs());
        oracle_err = oracle_err.max((exact - oracle_kl(&p.probs, &q.probs)).abs());
        min_kl = min_kl.min(exact);
        for k in 1..=n {
            for set in [p.top_k_set(k).unwrap(), q.top_k_set(k).unwrap()] {
                let v = kl_topk(&p, &q, &set).unwrap();
                min_kl = min_kl.min(v);
                if v > exact + KL_EXACT_TOL {
                    bound_violations += 1;
                }
            }
        }
    }
    verdict(
        full_err <= KL_EXACT_TOL && oracle_err <= 1e-10 && bound_violations == 0 && min_kl >= KL_FLOOR,
        format!(
            "{KL_PAIRS} pairs: |full-K − exact| ≤ {full_err:.1e}, {bound_violations} bound violations, min KL {min_kl:.1e}"
        ),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// The contract, checked from scratch for one configuration.
fn contract_holds(correct: &[bool], overlaps: &[f64], tier2: Option<bool>, choice: Choice, tier2_calls: usize) -> bool {
    let any_correct = correct.iter().any(|&c| c);
    let best_of =
        |idx: &mut dyn Iterator<Item = usize>| idx.max_by(|&a, &b| overlaps[a].partial_cmp(&overlaps[b]).unwrap());
    if any_correct {
        let best = best_of(&mut (0..correct.len()).filter(|&i| correct[i]));
        tier2_calls == 0
            && choice
                == Choice::Pool {
                    index: best.unwrap(),
                    tier: Tier::One,
                }
    } else {
        match tier2 {
            Some(true) => tier2_calls == 1 && choice == Choice::Tier2,
            other => {
                let best = best_of(&mut (0..correct.len()));
                tier2_calls == usize::from(other.is_some())
                    && choice
                        == Choice::Pool {
                            index: best.unwrap(),
                            tier: Tier::Three,
                        }
            }
        }
    }
}

fn selection_exhaustive() -> Verdict {
    let started = Instant::now();
    let mut cases = 0usize;
    let mut violations = 0usize;
    for n in 1..=4usize {
        for perm in permutations(n) {
            let overlaps: Vec<f64> = perm.iter().map(|&r| (r + 1) as f64 / (n + 1) as f64).collect();
            for mask in 0..(1u32 << n) {
                let correct: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                for tier2 in [None, Some(false), Some(true)] {
                    let mut calls = 0usize;
                    let mut attempt = || -> brts_core::Result<bool> {
                        calls += 1;
                        Ok(tier2.unwrap())
                    };
                    let choice = choose(
                        &correct,
                        &overlaps,
                        tier2.map(|_| &mut attempt as &mut dyn FnMut() -> brts_core::Result<bool>),
                    )
                    .unwrap();
                    cases += 1;
                    if !contract_holds(&correct, &overlaps, tier2, choice, calls) {
                        violations += 1;
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        violations == 0 && elapsed < SELECTION_BUDGET,
        format!("{cases} configurations, {violations} violations, {elapsed:.2?}"),
    )
}

fn analytic_catch_rate() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (n, expected) in REFERENCE_BASELINE {
        let got = iid_baseline(REFERENCE_P_HAT, n);
        let rounded = (got * 1e4).round() / 1e4;
        ok &= (rounded - expected).abs() < 1e-9;
        parts.push(format!("n={n}: {got:.4}"));
    }
    verdict(ok, format!("p̂={REFERENCE_P_HAT}: {}", parts.join(", ")))
}

fn monte_carlo_iid() -> Verdict {
    let teacher = noisy_label_teacher(0x11d, 0.45, 1.0);
    let tasks = random_tasks(SeedStream::new(0x11d).child(1), MC_TASKS);
    let curve = catch_rate_analysis(
        &teacher,
        &tasks,
        4,
        CatchMode::IidResample,
        &low_temperature(),
        SeedStream::new(0x11d).child(2),
    )
    .unwrap();
    let p_hat = curve.p_hat();
    let m = curve.task_count as f64;
    let mut worst: f64 = 0.0;
    for (&obs, &base) in curve.observed.iter().zip(&curve.iid_baseline) {
        let sd = (base * (1.0 - base) / m).sqrt();
        worst = worst.max((obs - base).abs() / sd.max(f64::MIN_POSITIVE));
    }
    verdict(
        worst <= MC_SIGMAS,
        format!(
            "{MC_TASKS} tasks, p̂={p_hat:.4}, observed {:?}, max deviation {worst:.2}σ",
            rounded(&curve.observed)
        ),
    )
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn correlation_gap() -> Verdict {
    let mut below = 0;
    let mut perturb_ge = 0;
    let mut p_in_range = 0;
    for run in 0..CORRELATION_RUNS {
        let seed = 0xc0 + run;
        let teacher = noisy_label_teacher(seed, 0.45, 1.0);
        let tasks = random_tasks(SeedStream::new(seed).child(1), 400);
        let stream = SeedStream::new(seed).child(2);
        let fixed =
            catch_rate_analysis(&teacher, &tasks, 2, CatchMode::FixedPrompt, &low_temperature(), stream).unwrap();
        let perturbed =
            catch_rate_analysis(&teacher, &tasks, 2, CatchMode::PerturbOne, &low_temperature(), stream).unwrap();
        let p = fixed.p_hat();
        if (SINGLE_SAMPLE_RANGE.0..=SINGLE_SAMPLE_RANGE.1).contains(&p) {
            p_in_range += 1;
        }
        if fixed.observed[1] < fixed.iid_baseline[1] {
            below += 1;
        }
        if perturbed.observed[1] >= fixed.observed[1] {
            perturb_ge += 1;
        }
    }
    let runs = CORRELATION_RUNS as f64;
    verdict(
        p_in_range == CORRELATION_RUNS
            && below as f64 >= CORRELATION_BELOW_FRAC * runs
            && perturb_ge as f64 >= PERTURB_AT_LEAST_FRAC * runs,
        format!(
            "{CORRELATION_RUNS} runs: p̂ in range {p_in_range}, fixed_prompt below i.i.d. {below}, perturb_one ≥ fixed_prompt {perturb_ge}"
        ),
    )
}

fn tier2_coverage() -> Verdict {
    let cfg = low_temperature();
    let mut with_sum = 0.0;
    let mut without_sum = 0.0;
    let mut tier1_ok = true;
    for seed in 0..TIER2_SEEDS {
        let seed = 0x7e2 + seed;
        let teacher = noisy_label_teacher(seed, 0.45, 0.6);
        let student = PolicyParams::new(teacher.vocab_size(), teacher.context_window(), Role::Student).unwrap();
        let tasks = random_tasks(SeedStream::new(seed).child(1), 400);
        let stream = SeedStream::new(seed).child(2);
        let mut covered = [0usize; 2];
        let mut tier1 = 0usize;
        for task in &tasks {
            let pool = generate_pool(&teacher, task, 1, false, &cfg, stream.child(0)).unwrap();
            tier1 += usize::from(pool[0].correct);
            for (slot, enabled) in [false, true].into_iter().enumerate() {
                let out = select(&student, &teacher, task, &pool, enabled, 16, &cfg, stream.child(1)).unwrap();
                covered[slot] += usize::from(out.chosen.correct);
            }
        }
        let m = tasks.len() as f64;
        let rate = tier1 as f64 / m;
        tier1_ok &= (SINGLE_SAMPLE_RANGE.0..=SINGLE_SAMPLE_RANGE.1).contains(&rate);
        without_sum += covered[0] as f64 / m;
        with_sum += covered[1] as f64 / m;
    }
    let k = TIER2_SEEDS as f64;
    let (without, with) = (without_sum / k, with_sum / k);
    verdict(
        tier1_ok && with > without,
        format!("mean coverage over {TIER2_SEEDS} seeds: tier 1 only {without:.4}, with tier 2 {with:.4}"),
    )
}

fn training_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        steps: TRAIN_STEPS,
        batch_size: TRAIN_BATCH,
        num_candidates: 2,
        lambda: 10.0,
        top_k: 16,
        tier2_enabled: true,
        eval_k: 4,
        teacher_gate: TEACHER_GATE,
        student_gate: STUDENT_GATE,
        ..TrainConfig::default()
    }
}

fn training_direction(evals: &mut Vec<EvalReport>) -> Verdict {
    let started = Instant::now();
    let mut brts_final = 0.0;
    let mut opd_final = 0.0;
    let mut gates_ok = true;
    let mut steps_matched = true;
    for seed in 0..TRAIN_SEEDS {
        let cfg = training_config(seed);
        let (teacher, t_report) = match pretrain_teacher(&cfg) {
            Ok(x) => x,
            Err(e) => return verdict(false, format!("seed {seed}: {e}")),
        };
        let (student, s_report) = match init_student(&cfg) {
            Ok(x) => x,
            Err(e) => return verdict(false, format!("seed {seed}: {e}")),
        };
        gates_ok &= t_report.greedy_accuracy >= TEACHER_GATE && s_report.greedy_accuracy <= STUDENT_GATE;
        let brts = train_in_memory(
            &TrainConfig {
                mode: Mode::Brts,
                ..cfg.clone()
            },
            &teacher,
            student.clone(),
        )
        .unwrap();
        let opd = train_in_memory(
            &TrainConfig {
                mode: Mode::Opd,
                num_student_rollouts: 2,
                ..cfg.clone()
            },
            &teacher,
            student,
        )
        .unwrap();
        let (bs, b) = brts.evals.last().unwrap();
        let (os, o) = opd.evals.last().unwrap();
        steps_matched &= bs == os && *bs == TRAIN_STEPS;
        brts_final += b.mean;
        opd_final += o.mean;
        evals.extend(brts.evals.into_iter().chain(opd.evals).map(|(_, e)| e));
    }
    let elapsed = started.elapsed();
    let k = TRAIN_SEEDS as f64;
    let (brts, opd) = (brts_final / k, opd_final / k);
    verdict(
        gates_ok && steps_matched && brts >= opd && elapsed <= TRAIN_BUDGET,
        format!(
            "{TRAIN_SEEDS} seeds at step {TRAIN_STEPS}: BRTS mean@4 {brts:.4}, OPD(2 rollouts) {opd:.4}, {elapsed:.1?}"
        ),
    )
}

fn run_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        // wall-clock timings are expected to differ
        .filter(|(name, _)| name != brts_core::trainer::TIMING_TABLE)
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let cfg = TrainConfig {
        seed: 9,
        steps: 12,
        eval_every: 5,
        eval_tasks: 64,
        checkpoint_every: 4,
        log_trajectories: true,
        ..TrainConfig::default()
    };
    let (teacher, _) = pretrain_teacher(&cfg).unwrap();
    let (student, _) = init_student(&cfg).unwrap();
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (i, threads) in DETERMINISM_THREADS.iter().chain(&[4]).enumerate() {
        let dir = root.path().join(format!("run{i}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(*threads).build().unwrap();
        pool.install(|| train(&cfg, &teacher, student.clone(), &dir)).unwrap();
        runs.push(run_files(&dir));
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let has_checkpoints = names.iter().filter(|n| n.starts_with("student_step")).count() >= 3;
    verdict(
        identical && has_checkpoints && names.contains(&"run.log"),
        format!(
            "{} runs at threads {:?} then 4 again, files {:?}",
            runs.len(),
            DETERMINISM_THREADS,
            names
        ),
    )
}

fn metric_inequalities(evals: &[EvalReport]) -> Verdict {
    let mut checked = 0usize;
    let mut bad = 0usize;
    let mut check = |e: &EvalReport| {
        checked += 1;
        let task_ok = e.per_task.iter().all(|t| t.mean <= t.best && t.majority <= t.best);
        if !(task_ok && e.mean <= e.best_at_k && e.majority_at_k <= e.best_at_k) {
            bad += 1;
        }
    };
    evals.iter().for_each(&mut check);

    let cfg = TrainConfig::default();
    let teacher = noisy_label_teacher(3, 0.45, 1.0);
    let tasks = random_tasks(SeedStream::new(3), 300);
    let sampled = RolloutConfig {
        k: 16,
        decoding: Decoding::sample(1.5, 1.0).unwrap(),
        max_len: cfg.max_len,
    };
    let mut collapse_ok = true;
    for k in [1usize, 2, 4, 8] {
        let e = evaluate(&teacher, &tasks, k, &sampled, SeedStream::new(k as u64)).unwrap();
        check(&e);
        if k == 1 {
            collapse_ok &= e.mean == e.best_at_k && e.mean == e.majority_at_k;
            collapse_ok &= e.per_task.iter().all(|t| t.mean == t.best && t.mean == t.majority);
        }
    }
    verdict(
        bad == 0 && collapse_ok && checked > 4,
        format!(
            "{checked} evaluations, {bad} violations, k=1 collapse {}",
            if collapse_ok { "holds" } else { "broken" }
        ),
    )
}

fn main() -> ExitCode {
    let mut evals = Vec::new();
    type Criterion = Box<dyn FnOnce(&mut Vec<EvalReport>) -> Verdict>;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 gradient correctness", Box::new(|_| gradient_correctness())),
        ("2 top-K exactness and bounds", Box::new(|_| topk_bounds())),
        ("3 selection rule exhaustive", Box::new(|_| selection_exhaustive())),
        ("4 analytic catch rate", Box::new(|_| analytic_catch_rate())),
        ("5 Monte Carlo i.i.d. agreement", Box::new(|_| monte_carlo_iid())),
        ("6 correlation gap", Box::new(|_| correlation_gap())),
        ("7 tier-2 coverage gain", Box::new(|_| tier2_coverage())),
        ("8 end-to-end training direction", Box::new(training_direction)),
        ("9 determinism", Box::new(|_| determinism())),
        ("10 metric inequalities", Box::new(|e| metric_inequalities(e))),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let v = run(&mut evals);
        println!(
            "{} criterion {name}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
