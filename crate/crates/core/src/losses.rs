//! Dual-context distillation losses.
//!
//! Student-context branch: `KL(π_S ‖ π_T)` on the student's own prefixes,
//! restricted to the student's top-K candidates. Teacher-context branch:
//! `KL(π_T ‖ π_S)` on the selected teacher trajectory, restricted to the
//! teacher's top-K candidates. Mass outside the candidate set is merged into
//! one tail pseudo-token, so each per-position term is an exact KL between
//! coarsened distributions. Both branches average over positions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::policy::{softmax_vjp, NextTokenDist, PolicyParams};
use crate::rollout::{Source, Trajectory};
use crate::task::TaskInstance;
use crate::vocab::TokenId;

pub const DEFAULT_LAMBDA: f64 = 10.0;

pub fn kl_exact(p: &NextTokenDist, q: &NextTokenDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("distributions differ in vocabulary size"));
    }
    Ok(p.probs
        .iter()
        .zip(p.log_probs.iter().zip(&q.log_probs))
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(pv, (lp, lq))| pv * (lp - lq))
        .sum())
}

fn membership(n: usize, candidates: &[TokenId]) -> Result<Vec<bool>> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate set must be nonempty"));
    }
    let mut mask = vec![false; n];
    for &c in candidates {
        let slot = mask.get_mut(c as usize).ok_or(Error::TokenOutOfRange {
            token: c,
            vocab_size: n,
        })?;
        if *slot {
            return Err(Error::invalid(format!("duplicate candidate id {c}")));
        }
        *slot = true;
    }
    Ok(mask)
}

/// Head sum over members and tail sum over non-members.
fn split_mass(probs: &[f64], mask: &[bool]) -> (f64, f64) {
    probs
        .iter()
        .zip(mask)
        .fold((0.0, 0.0), |(h, t), (&p, &m)| if m { (h + p, t) } else { (h, t + p) })
}

fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p.ln() - q.ln())
    }
}

fn kl_masked(p: &NextTokenDist, q: &NextTokenDist, mask: &[bool]) -> f64 {
    let (_, p_tail) = split_mass(&p.probs, mask);
    let (_, q_tail) = split_mass(&q.probs, mask);
    let head: f64 = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(v, _)| p.probs[v] * (p.log_probs[v] - q.log_probs[v]))
        .sum();
    head + xlogy_ratio(p_tail, q_tail)
}

/// KL over the candidates plus one aggregated tail outcome.
pub fn kl_topk(p: &NextTokenDist, q: &NextTokenDist, candidates: &[TokenId]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("distributions differ in vocabulary size"));
    }
    let mask = membership(p.len(), candidates)?;
    Ok(kl_masked(p, q, &mask))
}

/// Sparse per-context logit gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    vocab_size: usize,
    grads: BTreeMap<Vec<TokenId>, Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            grads: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn add(&mut self, key: &[TokenId], grad: &[f64], scale: f64) {
        debug_assert_eq!(grad.len(), self.vocab_size);
        let n = self.vocab_size;
        let slot = self.grads.entry(key.to_vec()).or_insert_with(|| vec![0.0; n]);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += scale * g;
        }
    }

    pub fn get(&self, key: &[TokenId]) -> Option<&[f64]> {
        self.grads.get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    /// `self += scale · other`, key by key.
    pub fn add_scaled(&mut self, other: &GradAccumulator, scale: f64) {
        for (k, g) in other.iter() {
            self.add(k, g, scale);
        }
    }

    /// `a + λ·b` computed elementwise, so the result does not depend on
    /// which branch was evaluated first.
    pub fn combine(a: &GradAccumulator, b: &GradAccumulator, lambda: f64) -> GradAccumulator {
        let mut out = GradAccumulator::new(a.vocab_size);
        let keys: std::collections::BTreeSet<&Vec<TokenId>> = a.grads.keys().chain(b.grads.keys()).collect();
        for k in keys {
            let v = match (a.grads.get(k), b.grads.get(k)) {
                (Some(x), Some(y)) => x.iter().zip(y).map(|(x, y)| x + lambda * y).collect(),
                (Some(x), None) => x.clone(),
                (None, Some(y)) => y.iter().map(|y| lambda * y).collect(),
                (None, None) => unreachable!(),
            };
            out.grads.insert(k.clone(), v);
        }
        out
    }

    /// Arithmetic mean of accumulators, summed in slice order.
    pub fn mean(parts: &[GradAccumulator], vocab_size: usize) -> GradAccumulator {
        let mut out = GradAccumulator::new(vocab_size);
        for p in parts {
            out.add_scaled(p, 1.0);
        }
        let inv = 1.0 / parts.len().max(1) as f64;
        for v in out.grads.values_mut() {
            for x in v.iter_mut() {
                *x *= inv;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Gradient descent `θ ← θ − lr·g` on the stored contexts.
    pub fn apply(&self, params: &mut PolicyParams, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for (k, g) in &self.grads {
            if params.logits(k).is_none() && g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let z = params.logits_mut(k);
            for (z, g) in z.iter_mut().zip(g) {
                *z -= lr * g;
            }
        }
    }
}

/// One branch's loss over a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLoss {
    pub value: f64,
    pub per_position: Vec<f64>,
    pub grad: GradAccumulator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `KL(π_S ‖ π_T)` with student top-K candidates.
    StudentContext,
    /// `KL(π_T ‖ π_S)` with teacher top-K candidates.
    TeacherContext,
}

/// Candidate sets a branch uses along `prompt ⊕ tokens`.
pub fn candidate_sets(
    branch: Branch,
    student: &PolicyParams,
    teacher: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
    k: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let issuer = match branch {
        Branch::StudentContext => student,
        Branch::TeacherContext => teacher,
    };
    let mut prefix = prompt.to_vec();
    let mut sets = Vec::with_capacity(tokens.len());
    for &t in tokens {
        sets.push(issuer.next_dist(&prefix, 1.0)?.top_k_set(k)?);
        prefix.push(t);
    }
    Ok(sets)
}

/// Branch loss with the candidate sets held fixed; the gradient is taken
/// with respect to the student logits only.
pub fn branch_loss_with_candidates(
    branch: Branch,
    student: &PolicyParams,
    teacher: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
    candidates: &[Vec<TokenId>],
) -> Result<BranchLoss> {
    if tokens.is_empty() {
        return Err(Error::invalid("loss needs a nonempty trajectory"));
    }
    if candidates.len() != tokens.len() {
        return Err(Error::invalid("one candidate set per position is required"));
    }
    if student.vocab_size() != teacher.vocab_size() {
        return Err(Error::invalid("student and teacher vocabularies differ"));
    }
    let n = student.vocab_size();
    let weight = 1.0 / tokens.len() as f64;
    let mut grad = GradAccumulator::new(n);
    let mut per_position = Vec::with_capacity(tokens.len());
    let mut prefix = prompt.to_vec();
    for (&t, cand) in tokens.iter().zip(candidates) {
        let s = student.next_dist(&prefix, 1.0)?;
        let te = teacher.next_dist(&prefix, 1.0)?;
        let mask = membership(n, cand)?;
        let g = match branch {
            Branch::StudentContext => {
                per_position.push(kl_masked(&s, &te, &mask));
                let (_, s_tail) = split_mass(&s.probs, &mask);
                let (_, t_tail) = split_mass(&te.probs, &mask);
                let tail_ratio = if s_tail > 0.0 { s_tail.ln() - t_tail.ln() } else { 0.0 };
                let downstream: Vec<f64> = (0..n)
                    .map(|v| {
                        if mask[v] {
                            s.log_probs[v] - te.log_probs[v]
                        } else {
                            tail_ratio
                        }
                    })
                    .collect();
                softmax_vjp(&s.probs, &downstream)
            }
            Branch::TeacherContext if s == te => {
                per_position.push(0.0);
                vec![0.0; n]
            }
            Branch::TeacherContext => {
                per_position.push(kl_masked(&te, &s, &mask));
                let (t_head, t_tail) = split_mass(&te.probs, &mask);
                let (_, s_tail) = split_mass(&s.probs, &mask);
                let t_total = t_head + t_tail;
                (0..n)
                    .map(|v| {
                        if mask[v] {
                            s.probs[v] * t_total - te.probs[v]
                        } else if t_tail > 0.0 {
                            s.probs[v] * (t_total - t_tail / s_tail)
                        } else {
                            s.probs[v] * t_total
                        }
                    })
                    .collect()
            }
        };
        let key = student.context_key(&prefix);
        grad.add(&key, &g, weight);
        prefix.push(t);
    }
    let value = per_position.iter().sum::<f64>() * weight;
    Ok(BranchLoss {
        value,
        per_position,
        grad,
    })
}

/// Student-context loss on a student rollout.
pub fn loss_stu_ctx(
    student: &PolicyParams,
    teacher: &PolicyParams,
    task: &TaskInstance,
    y_hat: &Trajectory,
    k: usize,
) -> Result<BranchLoss> {
    if y_hat.source != Source::Student {
        return Err(Error::invalid(format!(
            "student-context loss needs a student rollout, got {}",
            y_hat.source
        )));
    }
    if y_hat.is_empty() {
        return Err(Error::invalid("loss needs a nonempty trajectory"));
    }
    let cands = candidate_sets(Branch::StudentContext, student, teacher, &task.prompt, &y_hat.tokens, k)?;
    branch_loss_with_candidates(
        Branch::StudentContext,
        student,
        teacher,
        &task.prompt,
        &y_hat.tokens,
        &cands,
    )
}

/// Teacher-context loss on the selected teacher trajectory. Prefixes use the
/// plain prompt even when `y_prime` was sampled from a hint or perturbed one.
pub fn loss_tea_ctx(
    student: &PolicyParams,
    teacher: &PolicyParams,
    task: &TaskInstance,
    y_prime: &Trajectory,
    k: usize,
) -> Result<BranchLoss> {
    if !y_prime.source.is_teacher() {
        return Err(Error::invalid("teacher-context loss needs a teacher trajectory"));
    }
    if y_prime.is_empty() {
        return Err(Error::invalid("loss needs a nonempty trajectory"));
    }
    let cands = candidate_sets(
        Branch::TeacherContext,
        student,
        teacher,
        &task.prompt,
        &y_prime.tokens,
        k,
    )?;
    branch_loss_with_candidates(
        Branch::TeacherContext,
        student,
        teacher,
        &task.prompt,
        &y_prime.tokens,
        &cands,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub stu_ctx: f64,
    pub tea_ctx: f64,
    pub total: f64,
    pub lambda: f64,
    pub per_position_stu: Vec<f64>,
    pub per_position_tea: Vec<f64>,
}

impl LossBreakdown {
    pub fn new(stu_ctx: f64, tea_ctx: f64, lambda: f64) -> Self {
        Self {
            stu_ctx,
            tea_ctx,
            total: stu_ctx + lambda * tea_ctx,
            lambda,
            per_position_stu: Vec::new(),
            per_position_tea: Vec::new(),
        }
    }
}

/// `total = stu + λ·tea`, with the matching merged gradient. `tea = None`
/// is the student-only objective.
pub fn loss_total(stu: &BranchLoss, tea: Option<&BranchLoss>, lambda: f64) -> Result<(LossBreakdown, GradAccumulator)> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let (tea_value, per_position_tea, grad) = match tea {
        Some(t) => (
            t.value,
            t.per_position.clone(),
            GradAccumulator::combine(&stu.grad, &t.grad, lambda),
        ),
        None => (0.0, Vec::new(), stu.grad.clone()),
    };
    let mut breakdown = LossBreakdown::new(stu.value, tea_value, lambda);
    breakdown.per_position_stu = stu.per_position.clone();
    breakdown.per_position_tea = per_position_tea;
    Ok((breakdown, grad))
}
