//! Tabular context-window softmax policy.
//!
//! The next-token distribution depends only on the last `w` tokens of the
//! prefix (left-padded with `BOS`). Each observed context owns a logit
//! vector; contexts that were never written behave as all-zero logits.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, BOS};

pub const DEFAULT_CONTEXT_WINDOW: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Student,
    Teacher,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Role::Student),
            "teacher" => Ok(Role::Teacher),
            other => Err(Error::invalid(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    context_window: usize,
    role: Role,
    table: BTreeMap<Vec<TokenId>, Vec<f64>>,
}

impl PolicyParams {
    /// Any vocabulary of at least two tokens is accepted here; task-facing
    /// code additionally requires [`crate::vocab::MIN_VOCAB_SIZE`].
    pub fn new(vocab_size: usize, context_window: usize, role: Role) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid("a policy needs at least two tokens"));
        }
        if context_window == 0 {
            return Err(Error::invalid("context window must be positive"));
        }
        Ok(Self {
            vocab_size,
            context_window,
            role,
            table: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Number of stored contexts.
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], &[f64])> {
        self.table.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&Vec<TokenId>, &mut Vec<f64>)> {
        self.table.iter_mut()
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    /// The `w`-token context key of a prefix.
    pub fn context_key<'a>(&self, prefix: &'a [TokenId]) -> Cow<'a, [TokenId]> {
        let w = self.context_window;
        if prefix.len() >= w {
            Cow::Borrowed(&prefix[prefix.len() - w..])
        } else {
            let mut key = vec![BOS; w - prefix.len()];
            key.extend_from_slice(prefix);
            Cow::Owned(key)
        }
    }

    pub fn logits(&self, key: &[TokenId]) -> Option<&[f64]> {
        self.table.get(key).map(Vec::as_slice)
    }

    pub fn set_logits(&mut self, key: Vec<TokenId>, logits: Vec<f64>) -> Result<()> {
        if key.len() != self.context_window {
            return Err(Error::invalid(format!(
                "context key has {} tokens, expected {}",
                key.len(),
                self.context_window
            )));
        }
        self.check_tokens(&key)?;
        if logits.len() != self.vocab_size() {
            return Err(Error::invalid(format!(
                "logit vector has length {}, expected {}",
                logits.len(),
                self.vocab_size()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        self.table.insert(key, logits);
        Ok(())
    }

    /// Mutable logits for a context, materializing zeros if absent.
    pub(crate) fn logits_mut(&mut self, key: &[TokenId]) -> &mut Vec<f64> {
        let n = self.vocab_size();
        if !self.table.contains_key(key) {
            self.table.insert(key.to_vec(), vec![0.0; n]);
        }
        self.table.get_mut(key).expect("just inserted")
    }

    pub fn next_dist(&self, prefix: &[TokenId], temperature: f64) -> Result<NextTokenDist> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.check_tokens(prefix)?;
        let key = self.context_key(prefix);
        Ok(match self.table.get(key.as_ref()) {
            Some(z) => NextTokenDist::from_logits(z, temperature),
            None => NextTokenDist::uniform(self.vocab_size()),
        })
    }

    /// `Jᵀ g` of the softmax at this prefix's context (temperature 1).
    pub fn logit_grad_of_scalar(&self, prefix: &[TokenId], downstream: &[f64]) -> Result<Vec<f64>> {
        if downstream.len() != self.vocab_size() {
            return Err(Error::invalid("downstream gradient has the wrong length"));
        }
        let dist = self.next_dist(prefix, 1.0)?;
        Ok(softmax_vjp(&dist.probs, downstream))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl NextTokenDist {
    pub fn uniform(n: usize) -> Self {
        let lp = -(n as f64).ln();
        Self {
            probs: vec![1.0 / n as f64; n],
            log_probs: vec![lp; n],
        }
    }

    /// Tempered softmax with max subtraction.
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scaled.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let log_probs: Vec<f64> = scaled.iter().map(|z| z - lse).collect();
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        Self { probs, log_probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Token ids ordered by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len() as TokenId).collect();
        ids.sort_by(|&a, &b| {
            self.probs[b as usize]
                .partial_cmp(&self.probs[a as usize])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        ids
    }

    pub fn top_k_set(&self, k: usize) -> Result<Vec<TokenId>> {
        if k == 0 || k > self.probs.len() {
            return Err(Error::invalid(format!(
                "top-k size {k} outside 1..={}",
                self.probs.len()
            )));
        }
        let mut ranked = self.ranked();
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn argmax(&self) -> TokenId {
        self.ranked()[0]
    }

    /// Nucleus sampling; `top_p >= 1` samples the full distribution.
    pub fn sample_token<R: Rng + ?Sized>(&self, top_p: f64, rng: &mut R) -> TokenId {
        if top_p >= 1.0 {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in self.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as TokenId;
                }
            }
            // u landed in the rounding gap above the cumulative sum
            return self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId;
        }
        let ranked = self.ranked();
        let mut nucleus = Vec::new();
        let mut mass = 0.0;
        for t in ranked {
            mass += self.probs[t as usize];
            nucleus.push(t);
            if mass >= top_p {
                break;
            }
        }
        let u = rng.random::<f64>() * mass;
        let mut acc = 0.0;
        for &t in &nucleus {
            acc += self.probs[t as usize];
            if u < acc {
                return t;
            }
        }
        *nucleus.last().expect("nucleus is nonempty")
    }
}

/// Vector-Jacobian product of softmax: `p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_vjp(probs: &[f64], downstream: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(downstream).map(|(p, g)| p * g).sum();
    probs.iter().zip(downstream).map(|(p, g)| p * (g - dot)).collect()
}

/// How rollouts pick their next token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, top_p: f64 },
}

impl Decoding {
    pub fn sample(temperature: f64, top_p: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p must lie in (0, 1], got {top_p}")));
        }
        Ok(Decoding::Sample { temperature, top_p })
    }

    pub fn next_token<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        prefix: &[TokenId],
        rng: &mut R,
    ) -> Result<TokenId> {
        match *self {
            Decoding::Greedy => Ok(params.next_dist(prefix, 1.0)?.argmax()),
            Decoding::Sample { temperature, top_p } => {
                Ok(params.next_dist(prefix, temperature)?.sample_token(top_p, rng))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_token_dist(logits: [f64; 2]) -> NextTokenDist {
        NextTokenDist::from_logits(&logits, 1.0)
    }

    fn dist_from_probs(p: &[f64]) -> NextTokenDist {
        NextTokenDist {
            probs: p.to_vec(),
            log_probs: p.iter().map(|x| x.ln()).collect(),
        }
    }

    #[test]
    fn unseen_context_is_uniform() {
        let params = PolicyParams::new(20, 3, Role::Student).unwrap();
        for temp in [0.1, 1.0, 7.0] {
            let d = params.next_dist(&[BOS, 3], temp).unwrap();
            assert!(d.probs.iter().all(|&p| (p - 1.0 / 20.0).abs() < 1e-15));
        }
    }

    #[test]
    fn ln2_logits_give_two_thirds() {
        // hand summation: e^{ln 2} / (e^{ln 2} + e^0) = 2 / 3
        let d = two_token_dist([2f64.ln(), 0.0]);
        assert!((d.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.probs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let d = NextTokenDist::from_logits(&[0.3, 1.0, 0.9], 1e-4);
        assert!(d.probs[1] > 1.0 - 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = PolicyParams::new(20, 3, Role::Student).unwrap();
        assert!(params.next_dist(&[BOS], 0.0).is_err());
        assert!(params.next_dist(&[BOS], -1.0).is_err());
        assert!(matches!(
            params.next_dist(&[BOS, 20], 1.0),
            Err(Error::TokenOutOfRange { token: 20, .. })
        ));
        let d = NextTokenDist::uniform(4);
        assert!(d.top_k_set(0).is_err());
        assert!(d.top_k_set(5).is_err());
    }

    #[test]
    fn context_key_pads_with_bos() {
        let params = PolicyParams::new(20, 3, Role::Student).unwrap();
        assert_eq!(params.context_key(&[5]).as_ref(), &[BOS, BOS, 5]);
        assert_eq!(params.context_key(&[1, 2, 3, 4]).as_ref(), &[2, 3, 4]);
    }

    #[test]
    fn top_k_tie_break() {
        let d = dist_from_probs(&[0.5, 0.2, 0.2, 0.1]);
        assert_eq!(d.top_k_set(2).unwrap(), vec![0, 1]);
        assert_eq!(d.top_k_set(4).unwrap(), vec![0, 1, 2, 3]);
        let tied = dist_from_probs(&[0.1, 0.45, 0.45]);
        assert_eq!(tied.top_k_set(1).unwrap(), vec![1]);
    }

    #[test]
    fn nucleus_of_uniform_four() {
        // Enumerated nucleus: cumulative mass reaches 0.5 after ids 0 and 1.
        let d = NextTokenDist::uniform(4);
        let mut rng = SeedStream::new(3).rng();
        let mut seen = [0usize; 4];
        for _ in 0..2000 {
            seen[d.sample_token(0.5, &mut rng) as usize] += 1;
        }
        assert_eq!(seen[2] + seen[3], 0);
        assert!(seen[0] > 800 && seen[1] > 800);
    }

    #[test]
    fn singleton_nucleus() {
        let d = dist_from_probs(&[0.05, 0.96 - 0.05, 0.04, 0.05]);
        let mut rng = SeedStream::new(4).rng();
        assert!((0..500).all(|_| d.sample_token(0.9, &mut rng) == 1));
    }

    #[test]
    fn full_nucleus_matches_probs() {
        let d = dist_from_probs(&[0.1, 0.6, 0.3]);
        let mut rng = SeedStream::new(5).rng();
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[d.sample_token(1.0, &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip(&d.probs) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!(((*c as f64 / n as f64) - p).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn vjp_annihilates_constants() {
        let d = NextTokenDist::from_logits(&[0.2, -1.0, 0.7, 0.0], 1.0);
        assert!(softmax_vjp(&d.probs, &[0.0; 4]).iter().all(|&x| x == 0.0));
        assert!(softmax_vjp(&d.probs, &[3.5; 4]).iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        // scalar s(z) = Σ g_v softmax(z)_v, checked by central differences
        let mut rng = SeedStream::new(17).rng();
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = |z: &[f64]| -> f64 {
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                e.iter().zip(&g).map(|(e, g)| e / tot * g).sum()
            };
            let analytic = softmax_vjp(&NextTokenDist::from_logits(&z, 1.0).probs, &g);
            let h = 1e-6;
            for i in 0..3 {
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fd = (s(&zp) - s(&zm)) / (2.0 * h);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
                assert!((analytic[i] - fd).abs() / denom < 1e-6 || (analytic[i] - fd).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn logit_grad_of_scalar_uses_context() {
        let mut params = PolicyParams::new(18, 2, Role::Student).unwrap();
        let mut z = vec![0.0; 18];
        z[4] = 2.0;
        params.set_logits(vec![BOS, 7], z.clone()).unwrap();
        let mut g = vec![0.0; 18];
        g[4] = 1.0;
        let got = params.logit_grad_of_scalar(&[3, BOS, 7], &g).unwrap();
        let expect = softmax_vjp(&NextTokenDist::from_logits(&z, 1.0).probs, &g);
        assert_eq!(got, expect);
    }

    #[test]
    fn set_logits_validates() {
        let mut params = PolicyParams::new(18, 2, Role::Student).unwrap();
        assert!(params.set_logits(vec![1], vec![0.0; 18]).is_err());
        assert!(params.set_logits(vec![1, 2], vec![0.0; 17]).is_err());
        assert!(params.set_logits(vec![1, 2], vec![f64::NAN; 18]).is_err());
        assert!(params.set_logits(vec![1, 40], vec![0.0; 18]).is_err());
    }

    proptest! {
        #[test]
        fn probs_normalized(z in proptest::collection::vec(-30.0f64..30.0, 2..40), t in 0.1f64..10.0) {
            let d = NextTokenDist::from_logits(&z, t);
            let s: f64 = d.probs.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(d.probs.iter().all(|&p| p > 0.0));
            for (p, lp) in d.probs.iter().zip(&d.log_probs) {
                prop_assert!((p.ln() - lp).abs() < 1e-9);
            }
        }

        #[test]
        fn top_k_prefix_property(z in proptest::collection::vec(-3i32..3, 2..24), k in 1usize..24) {
            let z: Vec<f64> = z.into_iter().map(f64::from).collect();
            let d = NextTokenDist::from_logits(&z, 1.0);
            let k = k.min(d.len() - 1);
            let a = d.top_k_set(k).unwrap();
            let b = d.top_k_set(k + 1).unwrap();
            prop_assert_eq!(&b[..k], &a[..]);
        }

        #[test]
        fn sampling_reproducible(z in proptest::collection::vec(-3.0f64..3.0, 2..24), seed in any::<u64>(), p in 0.1f64..=1.0) {
            let d = NextTokenDist::from_logits(&z, 1.0);
            let s = SeedStream::new(seed);
            let a: Vec<_> = { let mut r = s.rng(); (0..20).map(|_| d.sample_token(p, &mut r)).collect() };
            let b: Vec<_> = { let mut r = s.rng(); (0..20).map(|_| d.sample_token(p, &mut r)).collect() };
            prop_assert_eq!(a, b);
        }
    }
}
