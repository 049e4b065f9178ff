//! Unit HMMs, the phone loop, and the map from unconstrained vectors to unit
//! parameters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::inference::LoopParams;
use crate::error::{Result, UwsError};
use crate::mathx::{logsumexp, softmax, LN_2PI};
use crate::seq::SIL;

pub const VAR_MIN: f64 = 1e-6;
pub const VAR_MAX: f64 = 1e6;

/// Shape shared by every unit of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub n_states: usize,
    pub n_components: usize,
    pub dim: usize,
}

impl Topology {
    pub fn new(n_states: usize, n_components: usize, dim: usize) -> Result<Self> {
        if n_states == 0 || n_components == 0 || dim == 0 {
            return Err(UwsError::invalid(
                "topology",
                "states, components and dimension must be >= 1",
            ));
        }
        Ok(Topology {
            n_states,
            n_components,
            dim,
        })
    }

    /// Length of the unconstrained parameter block of one state.
    pub fn state_param_len(&self) -> usize {
        2 + self.n_components + 2 * self.n_components * self.dim
    }

    /// Length of the unconstrained parameter vector of one unit.
    pub fn param_len(&self) -> usize {
        self.n_states * self.state_param_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmState {
    /// `[self-loop, forward]`; forward leaves the unit from the last state.
    pub transitions: [f64; 2],
    pub emission: Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitHmm {
    pub states: Vec<HmmState>,
}

fn check_simplex(what: &str, p: &[f64], tol: f64) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(UwsError::invalid(
            what,
            "entries must be finite and non-negative",
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(UwsError::invalid(what, format!("sums to {s}, expected 1")));
    }
    Ok(())
}

impl UnitHmm {
    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if self.states.len() != topo.n_states {
            return Err(UwsError::invalid(
                "unit hmm",
                format!("{} states, expected {}", self.states.len(), topo.n_states),
            ));
        }
        for st in &self.states {
            check_simplex("transition row", &st.transitions, 1e-9)?;
            let m = &st.emission;
            if m.weights.len() != topo.n_components
                || m.means.len() != topo.n_components
                || m.variances.len() != topo.n_components
            {
                return Err(UwsError::invalid("mixture", "component count mismatch"));
            }
            check_simplex("mixture weights", &m.weights, 1e-9)?;
            for (mu, var) in m.means.iter().zip(&m.variances) {
                if mu.len() != topo.dim || var.len() != topo.dim {
                    return Err(UwsError::invalid("mixture", "dimension mismatch"));
                }
                if mu.iter().any(|x| !x.is_finite()) {
                    return Err(UwsError::invalid("mixture", "non-finite mean"));
                }
                if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(UwsError::invalid("mixture", "variances must be positive"));
                }
            }
        }
        Ok(())
    }

    /// A unit whose components all share `mean` and `variance`.
    pub fn flat(topo: &Topology, mean: &[f64], variance: &[f64], self_loop: f64) -> Self {
        let c = topo.n_components;
        let state = HmmState {
            transitions: [self_loop, 1.0 - self_loop],
            emission: Mixture {
                weights: vec![1.0 / c as f64; c],
                means: vec![mean.to_vec(); c],
                variances: vec![variance.to_vec(); c],
            },
        };
        UnitHmm {
            states: vec![state; topo.n_states],
        }
    }
}

/// Maps an unconstrained vector to unit parameters.
///
/// Per state: two transition logits, `C` mixture logits, `C*D` means and
/// `C*D` log-variances (clamped so variances stay in `[VAR_MIN, VAR_MAX]`).
pub fn decode_params(topo: &Topology, raw: &[f64]) -> Result<UnitHmm> {
    if raw.len() != topo.param_len() {
        return Err(UwsError::dim(
            None,
            format!(
                "parameter vector has {} entries, expected {}",
                raw.len(),
                topo.param_len()
            ),
        ));
    }
    let (c, d) = (topo.n_components, topo.dim);
    let states = raw
        .chunks(topo.state_param_len())
        .map(|block| {
            let t = softmax(&block[..2]);
            let weights = softmax(&block[2..2 + c]);
            let means_raw = &block[2 + c..2 + c + c * d];
            let logv = &block[2 + c + c * d..];
            HmmState {
                transitions: [t[0], t[1]],
                emission: Mixture {
                    weights,
                    means: means_raw.chunks(d).map(<[f64]>::to_vec).collect(),
                    variances: logv
                        .chunks(d)
                        .map(|r| r.iter().map(|l| clamped_exp(*l)).collect())
                        .collect(),
                },
            }
        })
        .collect();
    Ok(UnitHmm { states })
}

pub(crate) fn clamped_exp(l: f64) -> f64 {
    l.clamp(VAR_MIN.ln(), VAR_MAX.ln()).exp()
}

fn centered_logs(p: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = p.iter().map(|x| x.max(1e-300).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.iter().map(|l| l - mean).collect()
}

/// Right inverse of [`decode_params`] for units inside the variance clamp.
pub fn encode_params(unit: &UnitHmm) -> Vec<f64> {
    let mut out = Vec::new();
    for st in &unit.states {
        out.extend(centered_logs(&st.transitions));
        out.extend(centered_logs(&st.emission.weights));
        for m in &st.emission.means {
            out.extend_from_slice(m);
        }
        for v in &st.emission.variances {
            out.extend(v.iter().map(|x| x.ln()));
        }
    }
    out
}

/// The looped model: any unit may follow any unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneLoop {
    pub topology: Topology,
    pub units: Vec<UnitHmm>,
    pub weights: Vec<f64>,
    /// Unit reserved for silence, labeled `"sil"` when decoded.
    pub silence_unit: Option<usize>,
}

impl PhoneLoop {
    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(UwsError::invalid("phone loop", "needs at least one unit"));
        }
        if self.weights.len() != self.units.len() {
            return Err(UwsError::invalid(
                "phone loop",
                "one weight per unit required",
            ));
        }
        check_simplex("unit weights", &self.weights, 1e-9)?;
        if let Some(s) = self.silence_unit {
            if s >= self.units.len() {
                return Err(UwsError::invalid("phone loop", "silence unit out of range"));
            }
        }
        self.units
            .iter()
            .try_for_each(|u| u.validate(&self.topology))
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_label(&self, u: usize) -> String {
        unit_label(u, self.silence_unit)
    }

    /// Log-domain scores with point-estimate parameters.
    pub fn point_params(&self) -> LoopParams {
        let log_weights = self.weights.iter().map(|w| w.max(1e-300).ln()).collect();
        self.params_with_weights(log_weights)
    }

    pub(crate) fn params_with_weights(&self, log_weights: Vec<f64>) -> LoopParams {
        let topo = self.topology;
        let mut p = LoopParams::empty(topo, self.units.len());
        p.log_weights = log_weights;
        for unit in &self.units {
            for st in &unit.states {
                p.log_self.push(st.transitions[0].max(1e-300).ln());
                p.log_fwd.push(st.transitions[1].max(1e-300).ln());
                let m = &st.emission;
                for c in 0..topo.n_components {
                    let logdet: f64 = m.variances[c].iter().map(|v| v.ln()).sum();
                    p.gauss_const.push(
                        m.weights[c].max(1e-300).ln() - 0.5 * (topo.dim as f64 * LN_2PI + logdet),
                    );
                    p.gauss_mean.extend_from_slice(&m.means[c]);
                    p.gauss_prec.extend(m.variances[c].iter().map(|v| 1.0 / v));
                }
            }
        }
        p
    }

    /// Samples an utterance of `n_units` unit instances. Returns the frames and
    /// the unit index of every frame.
    pub fn sample(&self, n_units: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n_units {
            let u = sample_index(&self.weights, rng);
            for st in &self.units[u].states {
                loop {
                    let m = &st.emission;
                    let c = sample_index(&m.weights, rng);
                    let x = m.means[c]
                        .iter()
                        .zip(&m.variances[c])
                        .map(|(mu, v)| {
                            let z: f64 = rng.sample(StandardNormal);
                            mu + v.sqrt() * z
                        })
                        .collect();
                    frames.push(x);
                    labels.push(u);
                    if rng.random::<f64>() >= st.transitions[0] {
                        break;
                    }
                }
            }
        }
        (frames, labels)
    }
}

fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if r < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn unit_label(u: usize, silence_unit: Option<usize>) -> String {
    if Some(u) == silence_unit {
        SIL.to_owned()
    } else {
        u.to_string()
    }
}

/// Log-density of `x` under a diagonal Gaussian mixture.
pub fn mixture_loglik(m: &Mixture, x: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..m.weights.len())
        .map(|c| {
            let mut ll = m.weights[c].ln();
            for ((xi, mu), v) in x.iter().zip(&m.means[c]).zip(&m.variances[c]) {
                ll -= 0.5 * (LN_2PI + v.ln() + (xi - mu) * (xi - mu) / v);
            }
            ll
        })
        .collect();
    logsumexp(&terms)
}
