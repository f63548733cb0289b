//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. Every key has a default, so an empty file is a valid config.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::DEFAULT_LAMBDA;
use crate::policy::{Decoding, DEFAULT_CONTEXT_WINDOW};
use crate::rollout::{RolloutConfig, DEFAULT_MAX_LEN};
use crate::vocab::{DEFAULT_VOCAB_SIZE, MIN_VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Student rollout plus selected teacher trajectory.
    Brts,
    /// Student rollouts only.
    Opd,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Brts => "brts",
            Mode::Opd => "opd",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brts" => Ok(Mode::Brts),
            "opd" => Ok(Mode::Opd),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

macro_rules! train_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct TrainConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// Sets one key from its textual value, without cross-field validation.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = parse_value::<$ty>(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    } )*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// Every key with its resolved value, in declaration order.
            pub fn to_kv_string(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($field), ConfigValue::render(&self.$field))); )*
                out
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse_cfg(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_cfg(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, u32, usize, f64, Mode);

impl ConfigValue for bool {
    fn parse_cfg(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(format!("expected true or false, got {other:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_cfg(s: &str) -> std::result::Result<Self, String> {
        let unquoted = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(s);
        Ok(unquoted.to_string())
    }
    fn render(&self) -> String {
        format!("\"{self}\"")
    }
}

fn parse_value<T: ConfigValue>(s: &str) -> std::result::Result<T, String> {
    T::parse_cfg(s)
}

train_config! {
    /// Master seed for every random stream of a run.
    seed: u64 = 0,
    vocab_size: usize = DEFAULT_VOCAB_SIZE,
    context_window: usize = DEFAULT_CONTEXT_WINDOW,
    /// `brts` or `opd`.
    mode: Mode = Mode::Brts,
    steps: usize = 200,
    /// Tasks per step.
    batch_size: usize = 32,
    /// Step size on the batch-mean gradient. Each table row sees only a
    /// small share of a batch, so tabular policies need large values.
    lr: f64 = 20.0,
    lambda: f64 = DEFAULT_LAMBDA,
    top_k: usize = 16,
    /// Tier-1 pool size N; 0 disables the teacher branch.
    num_candidates: usize = 2,
    tier2_enabled: bool = true,
    perturb_one: bool = false,
    /// Student rollouts per task in `opd` mode.
    num_student_rollouts: usize = 1,
    min_difficulty: u32 = 1,
    max_difficulty: u32 = 2,
    max_len: usize = DEFAULT_MAX_LEN,
    student_temperature: f64 = 1.0,
    student_top_p: f64 = 1.0,
    teacher_temperature: f64 = 0.7,
    teacher_top_p: f64 = 0.95,
    eval_temperature: f64 = 0.7,
    eval_top_p: f64 = 0.95,
    eval_k: usize = 4,
    /// Evaluate every this many steps; 0 evaluates only at the start and end.
    eval_every: usize = 10,
    eval_tasks: usize = 256,
    /// Student checkpoint cadence; 0 writes only the initial and final ones.
    checkpoint_every: usize = 0,
    log_trajectories: bool = false,
    /// Teacher checkpoint to distil from; empty means pretrain one.
    teacher_checkpoint: String = String::new(),
    /// Initial student checkpoint; empty means prepare one.
    student_checkpoint: String = String::new(),
    pretrain_lr: f64 = 300.0,
    pretrain_batch: usize = 64,
    /// Teacher supervised steps; the gate is checked after the last one.
    teacher_pretrain_steps: usize = 200,
    teacher_gate: f64 = 0.9,
    student_pretrain_steps: usize = 1,
    student_noise: f64 = 1.0,
    student_gate: f64 = 0.4,
    gate_tasks: usize = 500,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", idx + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", idx + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < MIN_VOCAB_SIZE {
            return fail(format!("vocab_size must be at least {MIN_VOCAB_SIZE}"));
        }
        if self.context_window == 0 {
            return fail("context_window must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.vocab_size {
            return fail(format!("top_k must lie in 1..={}", self.vocab_size));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 {
            return fail("lambda must be positive".into());
        }
        if [self.lr, self.pretrain_lr].iter().any(|x| x.is_nan() || *x < 0.0) {
            return fail("learning rates must be nonnegative".into());
        }
        if self.batch_size == 0 || self.pretrain_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.num_student_rollouts == 0 {
            return fail("num_student_rollouts must be at least 1".into());
        }
        if self.min_difficulty == 0 || self.min_difficulty > self.max_difficulty {
            return fail("need 1 <= min_difficulty <= max_difficulty".into());
        }
        if self.max_len == 0 || self.eval_k == 0 || self.eval_tasks == 0 || self.gate_tasks == 0 {
            return fail("max_len, eval_k, eval_tasks and gate_tasks must be positive".into());
        }
        if self.student_noise.is_nan() || self.student_noise < 0.0 {
            return fail("student_noise must be nonnegative".into());
        }
        for (name, t, p) in [
            ("student", self.student_temperature, self.student_top_p),
            ("teacher", self.teacher_temperature, self.teacher_top_p),
            ("eval", self.eval_temperature, self.eval_top_p),
        ] {
            Decoding::sample(t, p).map_err(|e| Error::Config(format!("{name} sampling: {}", strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn teacher_branch(&self) -> bool {
        self.mode == Mode::Brts && self.num_candidates > 0
    }

    pub fn student_rollout(&self) -> RolloutConfig {
        RolloutConfig {
            k: self.top_k,
            decoding: Decoding::Sample {
                temperature: self.student_temperature,
                top_p: self.student_top_p,
            },
            max_len: self.max_len,
        }
    }

    pub fn teacher_rollout(&self) -> RolloutConfig {
        RolloutConfig {
            k: self.top_k,
            decoding: Decoding::Sample {
                temperature: self.teacher_temperature,
                top_p: self.teacher_top_p,
            },
            max_len: self.max_len,
        }
    }

    pub fn eval_rollout(&self) -> RolloutConfig {
        RolloutConfig {
            k: self.top_k,
            decoding: Decoding::Sample {
                temperature: self.eval_temperature,
                top_p: self.eval_top_p,
            },
            max_len: self.max_len,
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}
