//! Grouped codebook quantization and the future-step contrastive objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UwsError};
use crate::mathx::{argmax, dot, squared_distance};

/// `G` groups of `V` codewords, each of length `d / G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedCodebook {
    pub groups: usize,
    pub variables: usize,
    pub dim: usize,
    /// `entries[g][v]` has length `dim / groups`.
    pub entries: Vec<Vec<Vec<f64>>>,
}

impl GroupedCodebook {
    pub fn new(entries: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let groups = entries.len();
        let variables = entries.first().map_or(0, Vec::len);
        let sub = entries.first().and_then(|g| g.first()).map_or(0, Vec::len);
        let gc = GroupedCodebook {
            groups,
            variables,
            dim: groups * sub,
            entries,
        };
        gc.validate()?;
        Ok(gc)
    }

    pub fn random(groups: usize, variables: usize, dim: usize, seed: u64) -> Result<Self> {
        if groups == 0 || dim % groups != 0 {
            return Err(UwsError::invalid(
                "grouped codebook",
                format!("dim {dim} not divisible by {groups} groups"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = dim / groups;
        GroupedCodebook::new(
            (0..groups)
                .map(|_| {
                    (0..variables)
                        .map(|_| (0..sub).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect(),
        )
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.groups.max(1)
    }

    /// Number of distinct index tuples, `V^G`.
    pub fn n_tuples(&self) -> usize {
        self.variables.pow(self.groups as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.dim % self.groups != 0 {
            return Err(UwsError::invalid(
                "grouped codebook",
                "dim must be divisible by the number of groups",
            ));
        }
        if self.variables < 2 {
            return Err(UwsError::invalid("grouped codebook", "need V >= 2"));
        }
        let sub = self.sub_dim();
        if self.entries.len() != self.groups
            || self
                .entries
                .iter()
                .any(|g| g.len() != self.variables || g.iter().any(|e| e.len() != sub))
        {
            return Err(UwsError::invalid(
                "grouped codebook",
                "entries do not match G x V x d/G",
            ));
        }
        Ok(())
    }

    /// Lexicographic index of a tuple: `i_0 V^(G-1) + ... + i_(G-1)`.
    pub fn tuple_index(&self, indices: &[usize]) -> usize {
        indices.iter().fold(0, |acc, i| acc * self.variables + i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantizeMode {
    Hard,
    /// Gumbel-max sampling from `softmax(logits / temperature)`.
    Gumbel {
        temperature: f64,
        seed: u64,
    },
}

/// Quantizes `z` group by group; returns the index tuple and the concatenated codewords.
pub fn grouped_quantize(
    z: &[f64],
    gc: &GroupedCodebook,
    mode: QuantizeMode,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if z.len() != gc.dim {
        return Err(UwsError::dim(
            None,
            format!("vector has dim {}, codebook expects {}", z.len(), gc.dim),
        ));
    }
    let sub = gc.sub_dim();
    let mut rng = match mode {
        QuantizeMode::Gumbel { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        QuantizeMode::Hard => None,
    };
    let mut indices = Vec::with_capacity(gc.groups);
    let mut zhat = Vec::with_capacity(gc.dim);
    for (g, codewords) in gc.entries.iter().enumerate() {
        let part = &z[g * sub..(g + 1) * sub];
        let logits: Vec<f64> = codewords
            .iter()
            .map(|e| -squared_distance(part, e))
            .collect();
        let idx = match (mode, rng.as_mut()) {
            (QuantizeMode::Gumbel { temperature, .. }, Some(rng)) => {
                let perturbed: Vec<f64> = logits
                    .iter()
                    .map(|l| {
                        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                        l / temperature - (-u.ln()).ln()
                    })
                    .collect();
                argmax(&perturbed)
            }
            _ => argmax(&logits),
        };
        indices.push(idx);
        zhat.extend_from_slice(&codewords[idx]);
    }
    Ok((indices, zhat))
}

/// Affine step predictor `h_k(c) = W_k c + b_k`; `w` is row-major `dz x dc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTransform {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl StepTransform {
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        StepTransform {
            w,
            b: vec![0.0; dim],
        }
    }

    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        let dc = c.len();
        self.b
            .iter()
            .enumerate()
            .map(|(o, b)| b + dot(&self.w[o * dc..(o + 1) * dc], c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLossConfig {
    /// One transform per prediction step `k = 1..=K`.
    pub steps: Vec<StepTransform>,
    pub lambda: f64,
    pub n_negatives: usize,
}

/// `ln sigma(x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Sum over steps `k` and positions `i < T - k` of
/// `ln s(zhat[i+k] . h_k(c[i])) + lambda * mean_neg ln s(-neg . h_k(c[i]))`.
///
/// This is the maximized form; negate it to obtain a loss to minimize.
/// `negatives[i]` holds the distractors for context position `i`.
pub fn contrastive_loss(
    context: &[Vec<f64>],
    targets: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
    cfg: &ContrastiveLossConfig,
) -> Result<f64> {
    let t = context.len();
    let k_max = cfg.steps.len();
    if k_max == 0 {
        return Err(UwsError::invalid("contrastive loss", "need K >= 1"));
    }
    if t <= k_max || targets.len() != t || negatives.len() < t {
        return Err(UwsError::invalid(
            "contrastive loss",
            format!("need T > K with matching targets/negatives (T={t}, K={k_max})"),
        ));
    }
    if negatives.iter().take(t).any(Vec::is_empty) {
        return Err(UwsError::invalid("contrastive loss", "empty negative set"));
    }
    let mut total = 0.0;
    for (k0, step) in cfg.steps.iter().enumerate() {
        let k = k0 + 1;
        for i in 0..t - k {
            let pred = step.apply(&context[i]);
            let pos = log_sigmoid(dot(&targets[i + k], &pred));
            let negs = &negatives[i];
            let neg = negs
                .iter()
                .map(|n| log_sigmoid(-dot(n, &pred)))
                .sum::<f64>()
                / negs.len() as f64;
            total += pos + cfg.lambda * neg;
        }
    }
    Ok(total)
}

/// Draws `n` distractors per position uniformly from the same sequence.
pub fn sample_negatives(targets: &[Vec<f64>], n: usize, rng: &mut impl Rng) -> Vec<Vec<Vec<f64>>> {
    (0..targets.len())
        .map(|_| {
            (0..n)
                .map(|_| targets[rng.random_range(0..targets.len())].clone())
                .collect()
        })
        .collect()
}
