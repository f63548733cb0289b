//! Mean, best-of-k and majority-vote accuracy over k samples per task.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::SeedStream;
use crate::rollout::{generate, RolloutConfig, Source};
use crate::task::{PromptVariant, TaskInstance};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskScore {
    pub mean: f64,
    pub best: f64,
    pub majority: f64,
}

/// Scores one task from its sampled answers. Absent answers do not vote;
/// a plurality shared by several answers counts as incorrect.
pub fn score_answers(answers: &[Option<Vec<TokenId>>], ground_truth: &[TokenId]) -> TaskScore {
    let k = answers.len().max(1) as f64;
    let correct = answers.iter().filter(|a| a.as_deref() == Some(ground_truth)).count();
    let mut votes: HashMap<&[TokenId], usize> = HashMap::new();
    for a in answers.iter().flatten() {
        *votes.entry(a.as_slice()).or_default() += 1;
    }
    let top = votes.values().copied().max().unwrap_or(0);
    let leaders: Vec<&[TokenId]> = votes.iter().filter(|(_, &c)| c == top).map(|(a, _)| *a).collect();
    let majority = leaders.len() == 1 && leaders[0] == ground_truth;
    TaskScore {
        mean: correct as f64 / k,
        best: if correct > 0 { 1.0 } else { 0.0 },
        majority: if majority { 1.0 } else { 0.0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub mean: f64,
    pub best_at_k: f64,
    pub majority_at_k: f64,
    pub task_count: usize,
}

impl Accuracy {
    fn from_scores<'a>(scores: impl Iterator<Item = &'a TaskScore>) -> Self {
        let (mut m, mut b, mut v, mut n) = (0.0, 0.0, 0.0, 0usize);
        for s in scores {
            m += s.mean;
            b += s.best;
            v += s.majority;
            n += 1;
        }
        let d = n.max(1) as f64;
        Self {
            mean: m / d,
            best_at_k: b / d,
            majority_at_k: v / d,
            task_count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub best_at_k: f64,
    pub majority_at_k: f64,
    pub k: usize,
    pub task_count: usize,
    pub per_difficulty: BTreeMap<u32, Accuracy>,
    pub per_task: Vec<TaskScore>,
}

impl EvalReport {
    pub fn from_scores(tasks: &[TaskInstance], scores: Vec<TaskScore>, k: usize) -> Self {
        let all = Accuracy::from_scores(scores.iter());
        let mut by_d: BTreeMap<u32, Vec<TaskScore>> = BTreeMap::new();
        for (t, s) in tasks.iter().zip(&scores) {
            by_d.entry(t.difficulty).or_default().push(*s);
        }
        Self {
            mean: all.mean,
            best_at_k: all.best_at_k,
            majority_at_k: all.majority_at_k,
            k,
            task_count: tasks.len(),
            per_difficulty: by_d
                .into_iter()
                .map(|(d, v)| (d, Accuracy::from_scores(v.iter())))
                .collect(),
            per_task: scores,
        }
    }

    /// `step mean best majority` row for the eval plot table.
    pub fn table_row(&self, step: usize) -> String {
        format!("{step}\t{}\t{}\t{}", self.mean, self.best_at_k, self.majority_at_k)
    }
}

pub const TABLE_HEADER: &str = "step\tmean\tbest\tmajority";

/// Samples `k` rollouts per task; sample `i` of task `j` uses `stream / j / i`.
pub fn evaluate(
    policy: &PolicyParams,
    tasks: &[TaskInstance],
    k: usize,
    cfg: &RolloutConfig,
    stream: SeedStream,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if tasks.is_empty() {
        return Err(Error::invalid("evaluation needs at least one task"));
    }
    let scores = tasks
        .par_iter()
        .enumerate()
        .map(|(j, task)| {
            let answers = (0..k)
                .map(|i| {
                    let mut rng = stream.path(&[j as u64, i as u64]).rng();
                    generate(policy, task, PromptVariant::Plain, Source::Student, cfg, &mut rng)
                        .map(|y| y.extracted_answer)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(score_answers(&answers, &task.ground_truth))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(tasks, scores, k))
}

/// Greedy single-sample accuracy on plain prompts.
pub fn greedy_accuracy(policy: &PolicyParams, tasks: &[TaskInstance], k_records: usize, max_len: usize) -> Result<f64> {
    let cfg = RolloutConfig {
        k: k_records,
        decoding: crate::policy::Decoding::Greedy,
        max_len,
    };
    let report = evaluate(policy, tasks, 1, &cfg, SeedStream::new(0))?;
    Ok(report.mean)
}
