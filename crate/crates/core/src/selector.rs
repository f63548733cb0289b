//! Teacher trajectory curation: correctness first, student alignment second.
//!
//! Tier 1 picks the correct pool member whose tokens best overlap the
//! student's top-K sets. If no member is correct, Tier 2 samples one rollout
//! from the hint-conditioned prompt and keeps it only if it grades correct.
//! Otherwise Tier 3 falls back to the highest-overlap pool member.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::{label, SeedStream};
use crate::rollout::{generate, RolloutConfig, Source, Trajectory};
use crate::task::{generate_task, PromptVariant, TaskInstance};

/// Fraction of `y`'s tokens inside the student's top-K set along `task.prompt ⊕ y`.
pub fn overlap_score(student: &PolicyParams, task: &TaskInstance, y: &Trajectory, k: usize) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("cannot score an empty trajectory"));
    }
    let mut prefix = task.prompt.clone();
    let mut hits = 0usize;
    for &t in &y.tokens {
        let top = student.next_dist(&prefix, 1.0)?.top_k_set(k)?;
        if top.contains(&t) {
            hits += 1;
        }
        prefix.push(t);
    }
    Ok(hits as f64 / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    One,
    Two,
    Three,
}

impl Tier {
    pub fn number(self) -> u8 {
        match self {
            Tier::One => 1,
            Tier::Two => 2,
            Tier::Three => 3,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Outcome of the selection rule on graded, scored candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Pool { index: usize, tier: Tier },
    Tier2,
}

impl Choice {
    pub fn tier(&self) -> Tier {
        match self {
            Choice::Pool { tier, .. } => *tier,
            Choice::Tier2 => Tier::Two,
        }
    }
}

fn argmax_overlap(overlaps: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    // strict '>' keeps the lowest index among ties
    overlaps
        .fold(None::<(usize, f64)>, |best, (i, o)| match best {
            Some((_, bo)) if o <= bo => best,
            _ => Some((i, o)),
        })
        .map(|(i, _)| i)
}

/// The pure selection rule. `tier2` is `None` when Tier 2 is disabled;
/// otherwise it runs the guided rollout on demand and reports whether it
/// graded correct. It is called at most once, and only when no pool member
/// is correct.
pub fn choose(correct: &[bool], overlaps: &[f64], tier2: Option<&mut dyn FnMut() -> Result<bool>>) -> Result<Choice> {
    if correct.is_empty() || correct.len() != overlaps.len() {
        return Err(Error::invalid("pool must be nonempty with one overlap per member"));
    }
    let among_correct = argmax_overlap(overlaps.iter().copied().enumerate().filter(|&(i, _)| correct[i]));
    if let Some(index) = among_correct {
        return Ok(Choice::Pool { index, tier: Tier::One });
    }
    if let Some(attempt) = tier2 {
        if attempt()? {
            return Ok(Choice::Tier2);
        }
    }
    let index = argmax_overlap(overlaps.iter().copied().enumerate()).expect("pool is nonempty");
    Ok(Choice::Pool {
        index,
        tier: Tier::Three,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub chosen: Trajectory,
    pub tier: Tier,
    /// Pool index of the chosen trajectory; `None` for Tier 2.
    pub chosen_index: Option<usize>,
    /// Overlap of the chosen trajectory with the student.
    pub overlap: f64,
    pub pool_overlaps: Vec<f64>,
    pub pool_correct: Vec<bool>,
    pub pool_correct_count: usize,
    pub pool_size: usize,
    pub tier2_attempted: bool,
    /// The guided rollout, kept for logging even when it failed.
    pub tier2_rollout: Option<Trajectory>,
}

/// Runs the full curation for one task.
#[allow(clippy::too_many_arguments)]
pub fn select(
    student: &PolicyParams,
    teacher: &PolicyParams,
    task: &TaskInstance,
    pool: &[Trajectory],
    tier2_enabled: bool,
    k: usize,
    teacher_cfg: &RolloutConfig,
    tier2_stream: SeedStream,
) -> Result<SelectionOutcome> {
    if pool.is_empty() {
        return Err(Error::invalid("selection needs a nonempty pool"));
    }
    let pool_overlaps = pool
        .iter()
        .map(|y| overlap_score(student, task, y, k))
        .collect::<Result<Vec<_>>>()?;
    let pool_correct: Vec<bool> = pool.iter().map(|y| y.correct).collect();

    let mut tier2_rollout = None;
    let mut attempt = || -> Result<bool> {
        let mut rng = tier2_stream.child(task.id).rng();
        let y = generate(
            teacher,
            task,
            PromptVariant::Hint,
            Source::TeacherTier2,
            teacher_cfg,
            &mut rng,
        )?;
        let ok = y.correct;
        tier2_rollout = Some(y);
        Ok(ok)
    };
    let choice = choose(
        &pool_correct,
        &pool_overlaps,
        tier2_enabled.then_some(&mut attempt as &mut dyn FnMut() -> Result<bool>),
    )?;
    let tier2_attempted = tier2_rollout.is_some();

    let (chosen, chosen_index, overlap) = match choice {
        Choice::Pool { index, tier } => {
            let mut chosen = pool[index].clone();
            if tier == Tier::Three {
                chosen.source = Source::TeacherTier3Fallback(index);
            }
            (chosen, Some(index), pool_overlaps[index])
        }
        Choice::Tier2 => {
            let y = tier2_rollout.clone().expect("tier 2 chosen after an attempt");
            let o = overlap_score(student, task, &y, k)?;
            (y, None, o)
        }
    };
    Ok(SelectionOutcome {
        chosen,
        tier: choice.tier(),
        chosen_index,
        overlap,
        pool_correct_count: pool_correct.iter().filter(|&&c| c).count(),
        pool_size: pool.len(),
        pool_overlaps,
        pool_correct,
        tier2_attempted,
        tier2_rollout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatchMode {
    FixedPrompt,
    IidResample,
    PerturbOne,
}

impl fmt::Display for CatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CatchMode::FixedPrompt => "fixed_prompt",
            CatchMode::IidResample => "iid_resample",
            CatchMode::PerturbOne => "perturb_one",
        })
    }
}

impl FromStr for CatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_prompt" => Ok(CatchMode::FixedPrompt),
            "iid_resample" => Ok(CatchMode::IidResample),
            "perturb_one" => Ok(CatchMode::PerturbOne),
            other => Err(Error::invalid(format!("unknown catch-rate mode {other:?}"))),
        }
    }
}

/// `1 − (1 − p)^n`.
pub fn iid_baseline(p: f64, n: usize) -> f64 {
    1.0 - (1.0 - p).powi(n as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatchRateCurve {
    pub mode: CatchMode,
    pub n_values: Vec<usize>,
    pub observed: Vec<f64>,
    pub iid_baseline: Vec<f64>,
    pub task_count: usize,
}

impl CatchRateCurve {
    /// Builds the curve from per-task correctness of samples `0..n_max`;
    /// the catch at `n` looks at the first `n` samples.
    pub fn from_hits(mode: CatchMode, hits: &[Vec<bool>]) -> Result<Self> {
        let n_max = hits.first().map_or(0, Vec::len);
        if hits.is_empty() || n_max == 0 || hits.iter().any(|h| h.len() != n_max) {
            return Err(Error::invalid("hits must be a nonempty rectangular table"));
        }
        let m = hits.len() as f64;
        let n_values: Vec<usize> = (1..=n_max).collect();
        let observed: Vec<f64> = n_values
            .iter()
            .map(|&n| hits.iter().filter(|h| h[..n].iter().any(|&c| c)).count() as f64 / m)
            .collect();
        let p_hat = observed[0];
        Ok(Self {
            mode,
            iid_baseline: n_values.iter().map(|&n| iid_baseline(p_hat, n)).collect(),
            n_values,
            observed,
            task_count: hits.len(),
        })
    }

    /// The analytic curve for a given single-sample rate.
    pub fn analytic(p_hat: f64, n_max: usize) -> Self {
        let n_values: Vec<usize> = (1..=n_max).collect();
        let baseline: Vec<f64> = n_values.iter().map(|&n| iid_baseline(p_hat, n)).collect();
        Self {
            mode: CatchMode::IidResample,
            observed: baseline.clone(),
            iid_baseline: baseline,
            n_values,
            task_count: 0,
        }
    }

    pub fn p_hat(&self) -> f64 {
        self.observed[0]
    }

    /// Plot-data table: header comment then `n observed baseline` rows.
    pub fn to_table(&self) -> String {
        let mut out = if self.task_count == 0 {
            "# analytic\nn\tobserved\tbaseline\n".to_string()
        } else {
            format!(
                "# mode={} tasks={}\nn\tobserved\tbaseline\n",
                self.mode, self.task_count
            )
        };
        for i in 0..self.n_values.len() {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\n",
                self.n_values[i], self.observed[i], self.iid_baseline[i]
            ));
        }
        out
    }
}

/// Per-task catch-rate sampling. Sample `i` of task `j` uses stream
/// `stream / j / i`, so modes share their first samples and results do not
/// depend on scheduling.
pub fn catch_rate_analysis(
    teacher: &PolicyParams,
    tasks: &[TaskInstance],
    n_max: usize,
    mode: CatchMode,
    cfg: &RolloutConfig,
    stream: SeedStream,
) -> Result<CatchRateCurve> {
    if n_max == 0 {
        return Err(Error::invalid("n_max must be at least 1"));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("task set must be nonempty"));
    }
    let hits = tasks
        .par_iter()
        .enumerate()
        .map(|(j, task)| {
            let task_stream = stream.child(j as u64);
            (0..n_max)
                .map(|i| {
                    let sample_stream = task_stream.child(i as u64);
                    let mut rng = sample_stream.rng();
                    let y = match mode {
                        CatchMode::IidResample if i > 0 => {
                            let seed = sample_stream.child(label::RESAMPLE).key();
                            let fresh = generate_task(seed, task.difficulty)?;
                            generate(
                                teacher,
                                &fresh,
                                PromptVariant::Plain,
                                Source::TeacherTier1(i),
                                cfg,
                                &mut rng,
                            )?
                        }
                        CatchMode::PerturbOne if i == 1 => generate(
                            teacher,
                            task,
                            PromptVariant::Perturbed,
                            Source::TeacherTier1(i),
                            cfg,
                            &mut rng,
                        )?,
                        _ => generate(
                            teacher,
                            task,
                            PromptVariant::Plain,
                            Source::TeacherTier1(i),
                            cfg,
                            &mut rng,
                        )?,
                    };
                    Ok(y.correct)
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    CatchRateCurve::from_hits(mode, &hits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierComposition {
    pub tier1: f64,
    pub tier2: f64,
    pub tier3: f64,
}

impl TierComposition {
    pub fn from_tiers(tiers: impl IntoIterator<Item = Tier>) -> Result<Self> {
        let mut counts = [0usize; 3];
        for t in tiers {
            counts[t.number() as usize - 1] += 1;
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid("tier composition needs at least one outcome"));
        }
        let n = total as f64;
        Ok(Self {
            tier1: counts[0] as f64 / n,
            tier2: counts[1] as f64 / n,
            tier3: counts[2] as f64 / n,
        })
    }

    /// Share of prompts that ended with a correct auxiliary trajectory.
    pub fn active(&self) -> f64 {
        self.tier1 + self.tier2
    }

    pub fn zero() -> Self {
        Self {
            tier1: 0.0,
            tier2: 0.0,
            tier3: 0.0,
        }
    }
}

pub fn tier_composition(outcomes: &[SelectionOutcome]) -> Result<TierComposition> {
    TierComposition::from_tiers(outcomes.iter().map(|o| o.tier))
}
