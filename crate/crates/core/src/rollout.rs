//! Trajectory generation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{Decoding, PolicyParams};
use crate::rng::SeedStream;
use crate::task::{self, PromptVariant, TaskInstance};
use crate::vocab::{TokenId, EOS};

pub const DEFAULT_MAX_LEN: usize = 32;

/// Top-K candidates of the issuing policy at one generated position.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKRecord {
    pub position: usize,
    pub candidate_ids: Vec<TokenId>,
    pub candidate_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Student,
    TeacherTier1(usize),
    TeacherTier2,
    TeacherTier3Fallback(usize),
}

impl Source {
    pub fn is_teacher(&self) -> bool {
        !matches!(self, Source::Student)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Student => f.write_str("student"),
            Source::TeacherTier1(i) => write!(f, "teacher_tier1:{i}"),
            Source::TeacherTier2 => f.write_str("teacher_tier2"),
            Source::TeacherTier3Fallback(i) => write!(f, "teacher_tier3_fallback:{i}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let idx = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad source index {v:?}")))
        };
        match s.split_once(':') {
            None if s == "student" => Ok(Source::Student),
            None if s == "teacher_tier2" => Ok(Source::TeacherTier2),
            Some(("teacher_tier1", i)) => Ok(Source::TeacherTier1(idx(i)?)),
            Some(("teacher_tier3_fallback", i)) => Ok(Source::TeacherTier3Fallback(idx(i)?)),
            _ => Err(Error::invalid(format!("unknown source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: u64,
    pub variant: PromptVariant,
    pub tokens: Vec<TokenId>,
    pub records: Vec<TopKRecord>,
    pub source: Source,
    pub correct: bool,
    pub extracted_answer: Option<Vec<TokenId>>,
}

impl Trajectory {
    /// Builds a trajectory from fixed tokens, recording the issuing policy's
    /// top-K sets and grading against `task`.
    pub fn from_tokens(
        params: &PolicyParams,
        task: &TaskInstance,
        variant: PromptVariant,
        tokens: Vec<TokenId>,
        source: Source,
        k: usize,
    ) -> Result<Self> {
        let mut prefix = task.prompt_for(variant).to_vec();
        let mut records = Vec::with_capacity(tokens.len());
        for (position, &t) in tokens.iter().enumerate() {
            records.push(record_at(params, &prefix, position, k)?);
            prefix.push(t);
        }
        params.check_tokens(&tokens)?;
        Ok(Self::finish(task, variant, tokens, records, source, prefix))
    }

    fn finish(
        task: &TaskInstance,
        variant: PromptVariant,
        tokens: Vec<TokenId>,
        records: Vec<TopKRecord>,
        source: Source,
        full: Vec<TokenId>,
    ) -> Self {
        let extracted_answer = task::extract_answer(&full);
        let correct = extracted_answer.as_deref() == Some(task.ground_truth.as_slice());
        Self {
            task_id: task.id,
            variant,
            tokens,
            records,
            source,
            correct,
            extracted_answer,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One run-log line for this trajectory.
    pub fn log_record(&self, step: usize, overlap: Option<f64>) -> String {
        TrajectoryRecord {
            step,
            task_id: self.task_id,
            source: self.source,
            correct: self.correct,
            answer: self.extracted_answer.clone(),
            overlap,
            tokens: self.tokens.clone(),
        }
        .to_string()
    }
}

fn record_at(params: &PolicyParams, prefix: &[TokenId], position: usize, k: usize) -> Result<TopKRecord> {
    let dist = params.next_dist(prefix, 1.0)?;
    let candidate_ids = dist.top_k_set(k)?;
    let candidate_logprobs = candidate_ids.iter().map(|&t| dist.log_probs[t as usize]).collect();
    Ok(TopKRecord {
        position,
        candidate_ids,
        candidate_logprobs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub k: usize,
    pub decoding: Decoding,
    pub max_len: usize,
}

/// Samples one trajectory until EOS or `max_len` tokens.
pub fn generate<R: Rng + ?Sized>(
    params: &PolicyParams,
    task: &TaskInstance,
    variant: PromptVariant,
    source: Source,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    if cfg.max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut prefix = task.prompt_for(variant).to_vec();
    let prompt_len = prefix.len();
    let mut records = Vec::new();
    for position in 0..cfg.max_len {
        // Records use the untempered distribution even when sampling is tempered.
        records.push(record_at(params, &prefix, position, cfg.k)?);
        let t = cfg.decoding.next_token(params, &prefix, rng)?;
        prefix.push(t);
        if t == EOS {
            break;
        }
    }
    let tokens = prefix[prompt_len..].to_vec();
    Ok(Trajectory::finish(task, variant, tokens, records, source, prefix))
}

/// `n` teacher rollouts for `task`; candidate `i` draws from
/// `stream / task.id / i`. With `perturb_one` and `n >= 2` the last
/// candidate is conditioned on the perturbed prompt.
pub fn generate_pool(
    teacher: &PolicyParams,
    task: &TaskInstance,
    n: usize,
    perturb_one: bool,
    cfg: &RolloutConfig,
    stream: SeedStream,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::invalid("pool size must be at least 1"));
    }
    let task_stream = stream.child(task.id);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let variant = if perturb_one && n >= 2 && i == n - 1 {
                PromptVariant::Perturbed
            } else {
                PromptVariant::Plain
            };
            let mut rng = task_stream.child(i as u64).rng();
            generate(teacher, task, variant, Source::TeacherTier1(i), cfg, &mut rng)
        })
        .collect()
}

/// Parsed form of a trajectory run-log line:
/// `traj step=3 task=17 source=teacher_tier1:0 correct=1 answer=7 overlap=0.5 tokens=14,7,13`.
/// `answer` and `overlap` are `-` when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub task_id: u64,
    pub source: Source,
    pub correct: bool,
    pub answer: Option<Vec<TokenId>>,
    pub overlap: Option<f64>,
    pub tokens: Vec<TokenId>,
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

fn split_ids(s: &str) -> Result<Vec<TokenId>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.parse().map_err(|_| Error::invalid(format!("bad token id {t:?}"))))
        .collect()
}

impl fmt::Display for TrajectoryRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "traj step={} task={} source={} correct={} answer={} overlap={} tokens={}",
            self.step,
            self.task_id,
            self.source,
            u8::from(self.correct),
            self.answer.as_deref().map_or_else(|| "-".to_string(), join_ids),
            self.overlap.map_or_else(|| "-".to_string(), |o| o.to_string()),
            join_ids(&self.tokens),
        )
    }
}

impl FromStr for TrajectoryRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        if words.next() != Some("traj") {
            return Err(Error::invalid("trajectory record must start with 'traj'"));
        }
        let expected = ["step", "task", "source", "correct", "answer", "overlap", "tokens"];
        let mut values = Vec::with_capacity(expected.len());
        for key in expected {
            let word = words
                .next()
                .ok_or_else(|| Error::invalid(format!("missing field {key}")))?;
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("malformed field {word:?}")))?;
            if k != key {
                return Err(Error::invalid(format!("expected field {key}, found {k}")));
            }
            values.push(v);
        }
        if words.next().is_some() {
            return Err(Error::invalid("trailing fields in trajectory record"));
        }
        let bad = |k: &str| Error::invalid(format!("bad value for {k}"));
        let overlap = match values[5] {
            "-" => None,
            v => {
                let o: f64 = v.parse().map_err(|_| bad("overlap"))?;
                if !(0.0..=1.0).contains(&o) {
                    return Err(bad("overlap"));
                }
                Some(o)
            }
        };
        Ok(Self {
            step: values[0].parse().map_err(|_| bad("step"))?,
            task_id: values[1].parse().map_err(|_| bad("task"))?,
            source: values[2].parse()?,
            correct: match values[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("correct")),
            },
            answer: match values[4] {
                "-" => None,
                v => Some(split_ids(v)?),
            },
            overlap,
            tokens: split_ids(values[6])?,
        })
    }
}
