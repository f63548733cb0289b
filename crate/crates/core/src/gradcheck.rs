//! Finite-difference verification of the branch-loss gradients.
//!
//! Each case draws random student/teacher tables over a small vocabulary, a
//! random prompt and trajectory, and compares the analytic student-logit
//! gradient against central differences of the loss value with the
//! candidate sets frozen.

use rand::Rng;

use crate::error::Result;
use crate::losses::{branch_loss_with_candidates, candidate_sets, Branch};
use crate::policy::{PolicyParams, Role};
use crate::rng::SeedStream;
use crate::vocab::TokenId;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub student: PolicyParams,
    pub teacher: PolicyParams,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub k: usize,
}

impl GradCase {
    /// A random case with vocabulary size in `3..=20`.
    pub fn random(stream: SeedStream) -> Result<Self> {
        let mut rng = stream.rng();
        let n = rng.random_range(3..=20usize);
        let w = rng.random_range(1..=3usize);
        let k = rng.random_range(1..=n);
        let prompt: Vec<TokenId> = (0..rng.random_range(w..=w + 2))
            .map(|_| rng.random_range(0..n as TokenId))
            .collect();
        let tokens: Vec<TokenId> = (0..rng.random_range(1..=4))
            .map(|_| rng.random_range(0..n as TokenId))
            .collect();
        let mut student = PolicyParams::new(n, w, Role::Student)?;
        let mut teacher = PolicyParams::new(n, w, Role::Teacher)?;
        let mut prefix = prompt.clone();
        for &t in &tokens {
            let key = student.context_key(&prefix).into_owned();
            // Leave the occasional student context unset to exercise the
            // uniform default. The teacher is always set: if both sides were
            // uniform the gradient would be exactly zero and relative error
            // against finite-difference rounding noise meaningless.
            if rng.random_bool(0.85) {
                student.set_logits(key.clone(), (0..n).map(|_| rng.random_range(-2.5..2.5)).collect())?;
            }
            teacher.set_logits(key, (0..n).map(|_| rng.random_range(-2.5..2.5)).collect())?;
            prefix.push(t);
        }
        Ok(Self {
            student,
            teacher,
            prompt,
            tokens,
            k,
        })
    }

    fn student_keys(&self) -> Vec<Vec<TokenId>> {
        let mut keys = Vec::new();
        let mut prefix = self.prompt.clone();
        for &t in &self.tokens {
            let key = self.student.context_key(&prefix).into_owned();
            if !keys.contains(&key) {
                keys.push(key);
            }
            prefix.push(t);
        }
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckResult {
    pub branch: Branch,
    pub vocab_size: usize,
    pub max_abs_error: f64,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`.
    pub relative_error: f64,
}

impl GradCheckResult {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.relative_error <= tolerance
    }
}

pub fn check_case(case: &GradCase, branch: Branch, step: f64) -> Result<GradCheckResult> {
    let cands = candidate_sets(branch, &case.student, &case.teacher, &case.prompt, &case.tokens, case.k)?;
    let analytic =
        branch_loss_with_candidates(branch, &case.student, &case.teacher, &case.prompt, &case.tokens, &cands)?;
    let n = case.student.vocab_size();
    let mut max_err: f64 = 0.0;
    let mut max_a: f64 = 0.0;
    let mut max_n: f64 = 0.0;
    let mut probe = case.student.clone();
    for key in case.student_keys() {
        for v in 0..n {
            let base = probe.logits(&key).map_or(0.0, |z| z[v]);
            probe.logits_mut(&key)[v] = base + step;
            let up =
                branch_loss_with_candidates(branch, &probe, &case.teacher, &case.prompt, &case.tokens, &cands)?.value;
            probe.logits_mut(&key)[v] = base - step;
            let down =
                branch_loss_with_candidates(branch, &probe, &case.teacher, &case.prompt, &case.tokens, &cands)?.value;
            probe.logits_mut(&key)[v] = base;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.grad.get(&key).map_or(0.0, |g| g[v]);
            max_err = max_err.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
    }
    Ok(GradCheckResult {
        branch,
        vocab_size: n,
        max_abs_error: max_err,
        relative_error: max_err / max_a.max(max_n).max(1e-8),
    })
}

/// Checks both branches on `cases` random cases derived from `stream`.
pub fn run(stream: SeedStream, cases: usize, step: f64) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::with_capacity(2 * cases);
    for i in 0..cases {
        let case = GradCase::random(stream.child(i as u64))?;
        out.push(check_case(&case, Branch::StudentContext, step)?);
        out.push(check_case(&case, Branch::TeacherContext, step)?);
    }
    Ok(out)
}
