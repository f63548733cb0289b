//! Supervised preparation of the teacher and the weak initial student.
//!
//! Both are fitted by maximum likelihood on `prompt ⊕ ANSWER_MARK ⊕ answer ⊕
//! EOS` for the plain, hint and perturbed prompts of each task. The teacher
//! trains for its full budget and must then clear a greedy-accuracy gate on a
//! held-out set; the student is the same run stopped early, with Gaussian
//! noise on its logits.

use rand_distr::{Distribution, Normal};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluator::greedy_accuracy;
use crate::losses::GradAccumulator;
use crate::policy::{PolicyParams, Role};
use crate::rng::{label, SeedStream};
use crate::task::{task_set, PromptVariant, TaskInstance};
use crate::vocab::TokenId;

/// A prompt and the completion the policy should emit after it.
#[derive(Debug, Clone)]
pub struct SupervisedExample {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
}

impl SupervisedExample {
    pub fn reference(task: &TaskInstance, variant: PromptVariant) -> Self {
        Self {
            prompt: task.prompt_for(variant).to_vec(),
            completion: task.reference_completion(),
        }
    }
}

/// Mean over examples of the token-mean negative log-likelihood gradient.
pub fn supervised_gradient(params: &PolicyParams, examples: &[SupervisedExample]) -> Result<GradAccumulator> {
    let n = params.vocab_size();
    let mut parts = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut g = GradAccumulator::new(n);
        let weight = 1.0 / ex.completion.len().max(1) as f64;
        let mut prefix = ex.prompt.clone();
        for &t in &ex.completion {
            params.check_tokens(&[t])?;
            let mut grad = params.next_dist(&prefix, 1.0)?.probs;
            grad[t as usize] -= 1.0;
            g.add(&params.context_key(&prefix), &grad, weight);
            prefix.push(t);
        }
        parts.push(g);
    }
    Ok(GradAccumulator::mean(&parts, n))
}

pub fn supervised_step(params: &mut PolicyParams, examples: &[SupervisedExample], lr: f64) -> Result<()> {
    let g = supervised_gradient(params, examples)?;
    g.apply(params, lr);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub role: Role,
    pub steps_run: usize,
    pub greedy_accuracy: f64,
    pub gate: f64,
    pub passed: bool,
}

fn batch_examples(cfg: &TrainConfig, stream: SeedStream, step: usize) -> Result<Vec<SupervisedExample>> {
    let tasks = task_set(
        stream.child(step as u64),
        cfg.pretrain_batch,
        cfg.min_difficulty,
        cfg.max_difficulty,
    )?;
    Ok(tasks
        .iter()
        .flat_map(|t| {
            [PromptVariant::Plain, PromptVariant::Hint, PromptVariant::Perturbed]
                .map(|v| SupervisedExample::reference(t, v))
        })
        .collect())
}

/// The held-out set the accuracy gates are measured on.
pub fn gate_tasks(cfg: &TrainConfig) -> Result<Vec<TaskInstance>> {
    task_set(
        SeedStream::new(cfg.seed).path(&[label::HELDOUT, 1]),
        cfg.gate_tasks,
        cfg.min_difficulty,
        cfg.max_difficulty,
    )
}

fn pretrain_stream(cfg: &TrainConfig) -> SeedStream {
    SeedStream::new(cfg.seed).child(label::PRETRAIN)
}

/// Fits the teacher for the full step budget, then checks the gate. Stopping
/// at the first passing check would leave a teacher that is right greedily
/// but diffuse when sampled.
pub fn pretrain_teacher(cfg: &TrainConfig) -> Result<(PolicyParams, PretrainReport)> {
    let mut params = PolicyParams::new(cfg.vocab_size, cfg.context_window, Role::Teacher)?;
    let stream = pretrain_stream(cfg);
    for step in 0..cfg.teacher_pretrain_steps {
        let examples = batch_examples(cfg, stream, step)?;
        supervised_step(&mut params, &examples, cfg.pretrain_lr)?;
    }
    let steps_run = cfg.teacher_pretrain_steps;
    let acc = greedy_accuracy(&params, &gate_tasks(cfg)?, cfg.top_k, cfg.max_len)?;
    let report = PretrainReport {
        role: Role::Teacher,
        steps_run,
        greedy_accuracy: acc,
        gate: cfg.teacher_gate,
        passed: acc >= cfg.teacher_gate,
    };
    if !report.passed {
        return Err(Error::GateFailed(format!(
            "teacher greedy accuracy {acc:.4} below {} after {steps_run} steps",
            cfg.teacher_gate
        )));
    }
    Ok((params, report))
}

/// The weak student: truncated teacher pretraining plus logit noise. Fails
/// if its greedy accuracy exceeds `student_gate`.
pub fn init_student(cfg: &TrainConfig) -> Result<(PolicyParams, PretrainReport)> {
    let mut params = PolicyParams::new(cfg.vocab_size, cfg.context_window, Role::Student)?;
    let stream = pretrain_stream(cfg);
    for step in 0..cfg.student_pretrain_steps {
        let examples = batch_examples(cfg, stream, step)?;
        supervised_step(&mut params, &examples, cfg.pretrain_lr)?;
    }
    if cfg.student_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.student_noise).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = SeedStream::new(cfg.seed).child(label::NOISE).rng();
        for (_, z) in params.iter_mut() {
            for x in z.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
    }
    let acc = greedy_accuracy(&params, &gate_tasks(cfg)?, cfg.top_k, cfg.max_len)?;
    let report = PretrainReport {
        role: Role::Student,
        steps_run: cfg.student_pretrain_steps,
        greedy_accuracy: acc,
        gate: cfg.student_gate,
        passed: acc <= cfg.student_gate,
    };
    if !report.passed {
        return Err(Error::GateFailed(format!(
            "initial student greedy accuracy {acc:.4} above {}",
            cfg.student_gate
        )));
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::generate_task;

    #[test]
    fn supervised_step_raises_target_probability() {
        let task = generate_task(1, 2).unwrap();
        let mut p = PolicyParams::new(20, 6, Role::Teacher).unwrap();
        let ex = vec![SupervisedExample::reference(&task, PromptVariant::Plain)];
        let mut prefix = task.prompt.clone();
        prefix.push(crate::vocab::ANSWER_MARK);
        let before = p.next_dist(&prefix, 1.0).unwrap().probs[task.ground_truth[0] as usize];
        supervised_step(&mut p, &ex, 5.0).unwrap();
        let after = p.next_dist(&prefix, 1.0).unwrap().probs[task.ground_truth[0] as usize];
        assert!(after > before);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn zero_budget_fails_gate() {
        let cfg = TrainConfig {
            teacher_pretrain_steps: 0,
            gate_tasks: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(pretrain_teacher(&cfg), Err(Error::GateFailed(_))));
    }
}
