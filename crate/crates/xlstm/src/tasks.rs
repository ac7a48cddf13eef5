//! Synthetic task generators: parity, Multi-Query Associative Recall and
//! Nearest Neighbor Search, plus the scaled-accuracy metric. Generators are
//! pure functions of (config, rng) and tests pin them against independent
//! brute-force oracles.

use crate::blocks::ModelInput;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Parity alphabet: a, b and padding.
pub const PARITY_A: usize = 0;
pub const PARITY_B: usize = 1;
pub const PARITY_PAD: usize = 2;
pub const PARITY_VOCAB: usize = 3;
/// Random-guess accuracy for parity (two classes).
pub const PARITY_S_RAND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Parity,
    Mqar,
    Nns,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub context: usize,
    /// Token vocabulary (MQAR: even split keys/values; parity: fixed 3).
    #[serde(default)]
    pub vocab: usize,
    /// Sequence-length range for parity (inclusive).
    #[serde(default)]
    pub min_len: usize,
    #[serde(default)]
    pub max_len: usize,
    /// Number of key-value pairs (MQAR).
    #[serde(default)]
    pub kv_pairs: usize,
    /// Supervise every eligible position instead of only the final answer
    /// (parity: running parity; NNS: running nearest-neighbor value).
    /// Useful as a training signal; evaluation defaults to answer-only.
    #[serde(default)]
    pub dense_mask: bool,
}

/// One generated sequence: token or real inputs, per-position targets, and
/// the evaluation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub input: ModelInput,
    /// Token targets (classification) or real targets (regression).
    pub targets: Vec<usize>,
    pub real_targets: Vec<f64>,
    /// 1.0 where the loss is evaluated.
    pub mask: Vec<f64>,
    pub length: usize,
}

impl TaskSample {
    /// Plain-text one-line rendering for inspection:
    /// `in=<..> target=<..> mask=<..>`.
    pub fn render(&self) -> String {
        let input = match &self.input {
            ModelInput::Tokens(ids) => ids
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            ModelInput::Real(x) => x
                .data()
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(","),
        };
        let target = if self.real_targets.is_empty() {
            self.targets
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        } else {
            self.real_targets
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mask = self
            .mask
            .iter()
            .map(|v| if *v > 0.0 { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",");
        format!("in={input} target={target} mask={mask}")
    }
}

/// Parity of the number of b's: answer token at the final position only,
/// padded to the configured context.
pub fn gen_parity(cfg: &TaskConfig, rng: &mut Rng) -> Result<TaskSample> {
    let lo = cfg.min_len.max(1);
    let hi = cfg.max_len.max(lo);
    let len = lo + rng.below(hi - lo + 1);
    if len + 1 > cfg.context {
        return Err(Error::InvalidConfig(format!(
            "parity: length {len} plus answer slot exceeds context {}",
            cfg.context
        )));
    }
    let mut tokens = vec![PARITY_PAD; cfg.context];
    let mut targets = vec![0usize; cfg.context];
    let mut mask = vec![0.0; cfg.context];
    let mut b_count = 0usize;
    for t in 0..len {
        let tok = if rng.uniform() < 0.5 { PARITY_A } else { PARITY_B };
        if tok == PARITY_B {
            b_count += 1;
        }
        tokens[t] = tok;
        if cfg.dense_mask {
            // running parity of the string consumed so far
            targets[t] = if b_count % 2 == 0 { PARITY_A } else { PARITY_B };
            mask[t] = 1.0;
        }
    }
    let answer = if b_count % 2 == 0 { PARITY_A } else { PARITY_B };
    // answer read at the position right after the string
    targets[len] = answer;
    mask[len] = 1.0;
    Ok(TaskSample {
        input: ModelInput::Tokens(tokens),
        targets,
        real_targets: Vec::new(),
        mask,
        length: len + 1,
    })
}

/// Independent parity oracle over a token string.
pub fn parity_oracle(tokens: &[usize]) -> usize {
    let b = tokens.iter().filter(|&&t| t == PARITY_B).count();
    if b % 2 == 0 {
        PARITY_A
    } else {
        PARITY_B
    }
}

/// Draw a Zipf(1.0)-distributed index in [0, n).
fn zipf_index(n: usize, rng: &mut Rng) -> usize {
    let norm: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.uniform() * norm;
    for k in 1..=n {
        u -= 1.0 / k as f64;
        if u <= 0.0 {
            return k - 1;
        }
    }
    n - 1
}

/// Multi-Query Associative Recall. The first half of the vocabulary are
/// keys, the second half values. A prefix of key-value pairs is followed by
/// key queries at Zipf-placed slots; the target (= bound value) sits in the
/// gap right after each queried key and only those gaps are masked.
pub fn gen_mqar(cfg: &TaskConfig, rng: &mut Rng) -> Result<TaskSample> {
    let half = cfg.vocab / 2;
    if cfg.vocab % 2 != 0 || half == 0 {
        return Err(Error::InvalidConfig(format!(
            "mqar: vocab {} must be even and positive",
            cfg.vocab
        )));
    }
    if cfg.kv_pairs > half {
        return Err(Error::InvalidConfig(format!(
            "mqar: {} pairs exceed key vocabulary {half}",
            cfg.kv_pairs
        )));
    }
    let prefix = 2 * cfg.kv_pairs;
    if prefix + 2 > cfg.context {
        return Err(Error::InvalidConfig(format!(
            "mqar: prefix {prefix} plus one query exceeds context {}",
            cfg.context
        )));
    }
    // distinct keys via partial Fisher-Yates over the key range
    let mut keys: Vec<usize> = (0..half).collect();
    for i in 0..cfg.kv_pairs {
        let j = i + rng.below(half - i);
        keys.swap(i, j);
    }
    keys.truncate(cfg.kv_pairs);
    let values: Vec<usize> = (0..cfg.kv_pairs).map(|_| half + rng.below(half)).collect();

    let mut tokens = vec![0usize; cfg.context];
    for (i, (&k, &v)) in keys.iter().zip(&values).enumerate() {
        tokens[2 * i] = k;
        tokens[2 * i + 1] = v;
    }
    // queries occupy (key, gap) slot pairs in the suffix
    let slots = (cfg.context - prefix) / 2;
    let mut targets = vec![0usize; cfg.context];
    let mut mask = vec![0.0; cfg.context];
    let mut queried = vec![false; slots];
    for _ in 0..cfg.kv_pairs.min(slots) {
        // Zipf-placed slot; retry into the first free slot on collision
        let mut s = zipf_index(slots, rng);
        while queried[s] {
            s = (s + 1) % slots;
        }
        queried[s] = true;
        let pair = rng.below(cfg.kv_pairs);
        let pos = prefix + 2 * s;
        tokens[pos] = keys[pair];
        targets[pos + 1] = values[pair];
        mask[pos + 1] = 1.0;
    }
    Ok(TaskSample {
        input: ModelInput::Tokens(tokens),
        targets,
        real_targets: Vec::new(),
        mask,
        length: cfg.context,
    })
}

/// Nearest Neighbor Search: rows are (x, y, value) with (x, y) unit-norm.
/// Row 0 is the reference; the final-position target is the value of the
/// candidate (rows 1..) most similar to the reference by dot product.
pub fn gen_nns(cfg: &TaskConfig, rng: &mut Rng) -> Result<TaskSample> {
    let t_len = cfg.context;
    if t_len < 2 {
        return Err(Error::InvalidConfig("nns: context must be >= 2".into()));
    }
    let mut x = Tensor::zeros(&[t_len, 3]);
    let mut values = vec![0.0; t_len];
    for t in 0..t_len {
        let angle = rng.uniform() * 2.0 * std::f64::consts::PI;
        let v = rng.uniform();
        let row = x.row_mut(t);
        row[0] = angle.cos();
        row[1] = angle.sin();
        row[2] = v;
        values[t] = v;
    }
    // the reference value is ignored
    let reference = [x.at2(0, 0), x.at2(0, 1)];
    let mut real_targets = vec![0.0; t_len];
    let mut mask = vec![0.0; t_len];
    let mut best = f64::NEG_INFINITY;
    let mut best_val = 0.0;
    for t in 1..t_len {
        let sim = reference[0] * x.at2(t, 0) + reference[1] * x.at2(t, 1);
        if sim > best {
            best = sim;
            best_val = values[t];
        }
        if cfg.dense_mask {
            // nearest neighbor among the candidates seen so far
            real_targets[t] = best_val;
            mask[t] = 1.0;
        }
    }
    real_targets[t_len - 1] = best_val;
    mask[t_len - 1] = 1.0;
    Ok(TaskSample {
        input: ModelInput::Real(x),
        targets: Vec::new(),
        real_targets,
        mask,
        length: t_len,
    })
}

/// Dispatch to the generator for the configured task kind.
pub fn gen_sample(cfg: &TaskConfig, rng: &mut Rng) -> Result<TaskSample> {
    match cfg.kind {
        TaskKind::Parity => gen_parity(cfg, rng),
        TaskKind::Mqar => gen_mqar(cfg, rng),
        TaskKind::Nns => gen_nns(cfg, rng),
    }
}

/// Affine rescaling between the random baseline and perfect accuracy.
pub fn scaled_accuracy(raw: f64, s_rand: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&s_rand) {
        return Err(Error::InvalidConfig(format!(
            "scaled_accuracy: s_rand {s_rand} must be in [0, 1)"
        )));
    }
    Ok((raw - s_rand) / (1.0 - s_rand))
}
