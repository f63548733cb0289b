//! Synthetic verifiable tasks.
//!
//! A task is a modular-arithmetic expression over single-digit operands,
//! `BOS a op b op c ... ANSWER_MARK`, whose answer is the value of the
//! expression mod 10 with the usual precedence (`*` binds tighter than `+`).

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{label, SeedStream};
use crate::vocab::{self, TokenId, ANSWER_MARK, BOS, EOS, HINT_MARK, PERTURB_MARK, PLUS, TIMES};

pub const MODULUS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: u64,
    pub prompt: Vec<TokenId>,
    pub ground_truth: Vec<TokenId>,
    pub hint_prompt: Vec<TokenId>,
    pub perturbed_prompt: Vec<TokenId>,
    pub difficulty: u32,
}

/// Which conditioning a rollout is generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptVariant {
    Plain,
    Hint,
    Perturbed,
}

impl TaskInstance {
    fn from_parts(id: u64, prompt: Vec<TokenId>, ground_truth: Vec<TokenId>, difficulty: u32) -> Self {
        let mut hint_prompt = prompt.clone();
        hint_prompt.push(HINT_MARK);
        hint_prompt.extend_from_slice(&ground_truth);
        let mut perturbed_prompt = prompt.clone();
        perturbed_prompt.push(PERTURB_MARK);
        Self {
            id,
            prompt,
            ground_truth,
            hint_prompt,
            perturbed_prompt,
            difficulty,
        }
    }

    pub fn prompt_for(&self, variant: PromptVariant) -> &[TokenId] {
        match variant {
            PromptVariant::Plain => &self.prompt,
            PromptVariant::Hint => &self.hint_prompt,
            PromptVariant::Perturbed => &self.perturbed_prompt,
        }
    }

    /// The canonical correct completion `ANSWER_MARK answer EOS`.
    pub fn reference_completion(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.ground_truth.len() + 2);
        out.push(ANSWER_MARK);
        out.extend_from_slice(&self.ground_truth);
        out.push(EOS);
        out
    }

    /// One line of the task file format: `prompt|gt|difficulty`.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        write_ids(&mut s, &self.prompt);
        s.push('|');
        write_ids(&mut s, &self.ground_truth);
        let _ = write!(s, "|{}", self.difficulty);
        s
    }
}

fn write_ids(s: &mut String, ids: &[TokenId]) {
    for (i, t) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{t}");
    }
}

/// Generates the task for `(seed, difficulty)`. The task id is the seed.
pub fn generate_task(seed: u64, difficulty: u32) -> Result<TaskInstance> {
    if difficulty == 0 {
        return Err(Error::invalid("difficulty must be at least 1"));
    }
    let mut rng = SeedStream::new(seed).child(label::TASK_CONTENT).rng();
    let mut prompt = Vec::with_capacity(2 * difficulty as usize + 1);
    prompt.push(BOS);
    for i in 0..difficulty {
        if i > 0 {
            prompt.push(if rng.random_bool(0.5) { PLUS } else { TIMES });
        }
        prompt.push(vocab::digit(rng.random_range(0..MODULUS)));
    }
    prompt.push(ANSWER_MARK);
    let value = evaluate_expression(&prompt[1..prompt.len() - 1])?;
    Ok(TaskInstance::from_parts(
        seed,
        prompt,
        vec![vocab::digit(value)],
        difficulty,
    ))
}

/// Evaluates `d (op d)*` mod 10 with `*` before `+`.
fn evaluate_expression(expr: &[TokenId]) -> Result<u32> {
    if expr.is_empty() || expr.len().is_multiple_of(2) {
        return Err(Error::invalid("malformed expression length"));
    }
    let mut sum = 0u32;
    let mut term = 1u32;
    for (i, &t) in expr.iter().enumerate() {
        if i % 2 == 0 {
            if !vocab::is_digit(t) {
                return Err(Error::invalid(format!("expected digit, found token {t}")));
            }
            term = term * t % MODULUS;
        } else {
            match t {
                PLUS => {
                    sum = (sum + term) % MODULUS;
                    term = 1;
                }
                TIMES => {}
                _ => return Err(Error::invalid(format!("expected operator, found token {t}"))),
            }
        }
    }
    Ok((sum + term) % MODULUS)
}

/// The digit run following the last `ANSWER_MARK`, if it is nonempty.
pub fn extract_answer(y: &[TokenId]) -> Option<Vec<TokenId>> {
    let mark = y.iter().rposition(|&t| t == ANSWER_MARK)?;
    let digits: Vec<TokenId> = y[mark + 1..]
        .iter()
        .take_while(|&&t| vocab::is_digit(t))
        .copied()
        .collect();
    (!digits.is_empty()).then_some(digits)
}

pub fn grade(y: &[TokenId], task: &TaskInstance) -> bool {
    extract_answer(y).is_some_and(|a| a == task.ground_truth)
}

/// Parses one task-file line. `id` is assigned by the caller.
pub fn parse_task_line(line: &str, id: u64) -> Result<TaskInstance> {
    let fields: Vec<&str> = line.trim().split('|').collect();
    if fields.len() != 3 {
        return Err(Error::parse(
            0,
            format!("expected 3 '|' fields, found {}", fields.len()),
        ));
    }
    let prompt = parse_ids(fields[0])?;
    let ground_truth = parse_ids(fields[1])?;
    let difficulty: u32 = fields[2]
        .trim()
        .parse()
        .map_err(|e| Error::parse(0, format!("bad difficulty: {e}")))?;

    if prompt.len() < 3 || prompt[0] != BOS || prompt[prompt.len() - 1] != ANSWER_MARK {
        return Err(Error::parse(0, "prompt must be BOS expr ANSWER_MARK"));
    }
    let expr = &prompt[1..prompt.len() - 1];
    if difficulty == 0 || expr.len() != 2 * difficulty as usize - 1 {
        return Err(Error::parse(0, "difficulty does not match operand count"));
    }
    let value = evaluate_expression(expr).map_err(|e| Error::parse(0, e.to_string()))?;
    if ground_truth != [vocab::digit(value)] {
        return Err(Error::parse(0, "ground truth does not match the expression"));
    }
    Ok(TaskInstance::from_parts(id, prompt, ground_truth, difficulty))
}

fn parse_ids(field: &str) -> Result<Vec<TokenId>> {
    field
        .split_whitespace()
        .map(|s| {
            s.parse::<TokenId>()
                .map_err(|e| Error::parse(0, format!("bad token id {s:?}: {e}")))
        })
        .collect()
}

/// Reads a task file; blank lines and `#` comments are skipped and task ids
/// are zero-based line numbers.
pub fn read_tasks(reader: impl BufRead) -> Result<Vec<TaskInstance>> {
    let mut tasks = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let task = parse_task_line(trimmed, idx as u64).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(idx + 1, message),
            other => other,
        })?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tasks(std::io::BufReader::new(file))
}

pub fn write_tasks(mut w: impl Write, tasks: &[TaskInstance]) -> std::io::Result<()> {
    for t in tasks {
        writeln!(w, "{}", t.to_line())?;
    }
    Ok(())
}

/// A task set of `count` tasks whose seeds and difficulties derive from `stream`.
pub fn task_set(
    stream: SeedStream,
    count: usize,
    min_difficulty: u32,
    max_difficulty: u32,
) -> Result<Vec<TaskInstance>> {
    if min_difficulty == 0 || min_difficulty > max_difficulty {
        return Err(Error::invalid(format!(
            "bad difficulty range {min_difficulty}..={max_difficulty}"
        )));
    }
    (0..count as u64)
        .map(|i| {
            let s = stream.child(i);
            let d = s.rng().random_range(min_difficulty..=max_difficulty);
            generate_task(s.key(), d)
        })
        .collect()
}
