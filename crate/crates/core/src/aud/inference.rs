//! Forward-backward and Viterbi over the phone loop, in log space.
//!
//! States are indexed `j = u * S + s`. A path starts in the first state of
//! some unit, moves by self-loops or forward steps, leaves a unit from its
//! last state, and must end in the last state of a unit.

use serde::{Deserialize, Serialize};

use super::hmm::{unit_label, Topology};
use crate::corpus::FrameSequence;
use crate::error::{Result, UwsError};
use crate::mathx::{logaddexp, logsumexp};
use crate::seq::UnitSequence;

/// Everything the recursions need, as log-domain scores.
///
/// Component `k = (u * S + s) * C + c` scores a frame as
/// `gauss_const[k] - 0.5 * sum_d gauss_prec[k,d] * (x_d - gauss_mean[k,d])^2`,
/// which covers both point estimates and variational expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    pub topology: Topology,
    pub n_units: usize,
    pub log_weights: Vec<f64>,
    pub log_self: Vec<f64>,
    pub log_fwd: Vec<f64>,
    pub gauss_const: Vec<f64>,
    pub gauss_mean: Vec<f64>,
    pub gauss_prec: Vec<f64>,
}

impl LoopParams {
    pub(crate) fn empty(topology: Topology, n_units: usize) -> Self {
        LoopParams {
            topology,
            n_units,
            log_weights: Vec::new(),
            log_self: Vec::new(),
            log_fwd: Vec::new(),
            gauss_const: Vec::new(),
            gauss_mean: Vec::new(),
            gauss_prec: Vec::new(),
        }
    }

    pub fn n_states_total(&self) -> usize {
        self.n_units * self.topology.n_states
    }

    pub fn n_gauss(&self) -> usize {
        self.n_states_total() * self.topology.n_components
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_states_total();
        let k = self.n_gauss();
        let d = self.topology.dim;
        if self.n_units == 0
            || self.log_weights.len() != self.n_units
            || self.log_self.len() != j
            || self.log_fwd.len() != j
            || self.gauss_const.len() != k
            || self.gauss_mean.len() != k * d
            || self.gauss_prec.len() != k * d
        {
            return Err(UwsError::invalid("loop parameters", "inconsistent sizes"));
        }
        Ok(())
    }

    fn component_loglik(&self, x: &[f64], out: &mut [f64]) {
        let d = self.topology.dim;
        for (k, o) in out.iter_mut().enumerate() {
            let mean = &self.gauss_mean[k * d..(k + 1) * d];
            let prec = &self.gauss_prec[k * d..(k + 1) * d];
            let mut q = 0.0;
            for i in 0..d {
                let diff = x[i] - mean[i];
                q += prec[i] * diff * diff;
            }
            *o = self.gauss_const[k] - 0.5 * q;
        }
    }

    /// Per-frame component scores (`N x K`) and state scores (`N x J`).
    fn emissions(&self, seq: &FrameSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        if seq.dim != self.topology.dim {
            return Err(UwsError::dim(
                Some(&seq.utterance_id),
                format!(
                    "features have {} dims, model expects {}",
                    seq.dim, self.topology.dim
                ),
            ));
        }
        let n = seq.n_frames();
        let k = self.n_gauss();
        let c = self.topology.n_components;
        let j = self.n_states_total();
        let mut comp = vec![0.0; n * k];
        let mut state = vec![0.0; n * j];
        for t in 0..n {
            let row = &mut comp[t * k..(t + 1) * k];
            self.component_loglik(seq.row(t), row);
            for s in 0..j {
                state[t * j + s] = logsumexp(&row[s * c..(s + 1) * c]);
            }
        }
        if let Some(t) = (0..n).find(|&t| {
            state[t * j..(t + 1) * j]
                .iter()
                .all(|v| *v == f64::NEG_INFINITY)
        }) {
            return Err(UwsError::Degenerate(format!(
                "frame {t} of {} has zero likelihood under every state",
                seq.utterance_id
            )));
        }
        if state.iter().any(|v| v.is_nan()) {
            return Err(UwsError::Numerical(format!(
                "NaN emission score in {}",
                seq.utterance_id
            )));
        }
        Ok((comp, state))
    }
}

/// Expected counts gathered from one or more utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub topology: Topology,
    pub n_units: usize,
    /// Expected number of times each unit is entered.
    pub entries: Vec<f64>,
    pub self_counts: Vec<f64>,
    /// Forward moves; for the last state these are unit exits.
    pub fwd_counts: Vec<f64>,
    pub comp_counts: Vec<f64>,
    pub comp_s1: Vec<f64>,
    pub comp_s2: Vec<f64>,
    pub log_marginal: f64,
    pub n_frames: usize,
}

impl SuffStats {
    pub fn zeros(topology: Topology, n_units: usize) -> Self {
        let j = n_units * topology.n_states;
        let k = j * topology.n_components;
        SuffStats {
            topology,
            n_units,
            entries: vec![0.0; n_units],
            self_counts: vec![0.0; j],
            fwd_counts: vec![0.0; j],
            comp_counts: vec![0.0; k],
            comp_s1: vec![0.0; k * topology.dim],
            comp_s2: vec![0.0; k * topology.dim],
            log_marginal: 0.0,
            n_frames: 0,
        }
    }

    pub fn add(&mut self, other: &SuffStats) {
        let pairs = [
            (&mut self.entries, &other.entries),
            (&mut self.self_counts, &other.self_counts),
            (&mut self.fwd_counts, &other.fwd_counts),
            (&mut self.comp_counts, &other.comp_counts),
            (&mut self.comp_s1, &other.comp_s1),
            (&mut self.comp_s2, &other.comp_s2),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.log_marginal += other.log_marginal;
        self.n_frames += other.n_frames;
    }

    /// Sums per-utterance statistics in the given order.
    pub fn sum<'a>(
        topology: Topology,
        n_units: usize,
        items: impl IntoIterator<Item = &'a SuffStats>,
    ) -> Self {
        let mut acc = SuffStats::zeros(topology, n_units);
        for s in items {
            acc.add(s);
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.log_marginal.is_finite()
            && [
                &self.entries,
                &self.self_counts,
                &self.fwd_counts,
                &self.comp_counts,
                &self.comp_s1,
                &self.comp_s2,
            ]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Frame-level posteriors of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub log_marginal: f64,
    pub n_frames: usize,
    pub n_units: usize,
    pub n_states: usize,
    /// `N x (U * S)` state occupancies.
    pub states: Vec<f64>,
}

impl Posteriors {
    /// `N x U` unit occupancies.
    pub fn units(&self) -> Vec<f64> {
        let j = self.n_units * self.n_states;
        let mut out = vec![0.0; self.n_frames * self.n_units];
        for t in 0..self.n_frames {
            for u in 0..self.n_units {
                out[t * self.n_units + u] = self.states
                    [t * j + u * self.n_states..t * j + (u + 1) * self.n_states]
                    .iter()
                    .sum();
            }
        }
        out
    }
}

struct Lattice {
    n: usize,
    j: usize,
    comp: Vec<f64>,
    emit: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// log prob of leaving some unit at frame t (before entering at t + 1).
    exit: Vec<f64>,
    /// log prob of the suffix after entering any unit at frame t.
    entry: Vec<f64>,
    log_z: f64,
}

fn run_lattice(seq: &FrameSequence, p: &LoopParams) -> Result<Lattice> {
    p.validate()?;
    let (comp, emit) = p.emissions(seq)?;
    let n = seq.n_frames();
    let s_n = p.topology.n_states;
    let j = p.n_states_total();
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; n * j];
    let mut exit = vec![ninf; n];
    for u in 0..p.n_units {
        alpha[u * s_n] = p.log_weights[u] + emit[u * s_n];
    }
    for t in 1..n {
        let (prev, cur) = alpha.split_at_mut(t * j);
        let prev = &prev[(t - 1) * j..];
        let cur = &mut cur[..j];
        let ex = logsumexp(
            &(0..p.n_units)
                .map(|u| prev[u * s_n + s_n - 1] + p.log_fwd[u * s_n + s_n - 1])
                .collect::<Vec<_>>(),
        );
        exit[t - 1] = ex;
        for u in 0..p.n_units {
            for s in 0..s_n {
                let i = u * s_n + s;
                let stay = prev[i] + p.log_self[i];
                let arrive = if s == 0 {
                    ex + p.log_weights[u]
                } else {
                    prev[i - 1] + p.log_fwd[i - 1]
                };
                cur[i] = logaddexp(stay, arrive) + emit[t * j + i];
            }
        }
    }
    let log_z = logsumexp(
        &(0..p.n_units)
            .map(|u| alpha[(n - 1) * j + u * s_n + s_n - 1])
            .collect::<Vec<_>>(),
    );
    if log_z == ninf {
        return Err(UwsError::Degenerate(format!(
            "no complete path through {} ({n} frames)",
            seq.utterance_id
        )));
    }
    if !log_z.is_finite() {
        return Err(UwsError::Numerical(format!(
            "log marginal of {} is {log_z}",
            seq.utterance_id
        )));
    }

    let mut beta = vec![ninf; n * j];
    let mut entry = vec![ninf; n];
    for u in 0..p.n_units {
        beta[(n - 1) * j + u * s_n + s_n - 1] = 0.0;
    }
    entry[n - 1] = logsumexp(
        &(0..p.n_units)
            .map(|u| p.log_weights[u] + emit[(n - 1) * j + u * s_n] + beta[(n - 1) * j + u * s_n])
            .collect::<Vec<_>>(),
    );
    for t in (0..n - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * j);
        let cur = &mut cur[t * j..];
        let next = &next[..j];
        let e_next = &emit[(t + 1) * j..(t + 2) * j];
        for u in 0..p.n_units {
            for s in 0..s_n {
                let i = u * s_n + s;
                let stay = p.log_self[i] + e_next[i] + next[i];
                let go = if s + 1 < s_n {
                    p.log_fwd[i] + e_next[i + 1] + next[i + 1]
                } else {
                    p.log_fwd[i] + entry[t + 1]
                };
                cur[i] = logaddexp(stay, go);
            }
        }
        entry[t] = logsumexp(
            &(0..p.n_units)
                .map(|u| p.log_weights[u] + emit[t * j + u * s_n] + cur[u * s_n])
                .collect::<Vec<_>>(),
        );
    }
    Ok(Lattice {
        n,
        j,
        comp,
        emit,
        alpha,
        beta,
        exit,
        entry,
        log_z,
    })
}

/// State posteriors and log marginal of one utterance.
pub fn forward_backward(seq: &FrameSequence, p: &LoopParams) -> Result<Posteriors> {
    let lat = run_lattice(seq, p)?;
    Ok(posteriors(&lat, p))
}

fn posteriors(lat: &Lattice, p: &LoopParams) -> Posteriors {
    let states = lat
        .alpha
        .iter()
        .zip(&lat.beta)
        .map(|(a, b)| (a + b - lat.log_z).exp())
        .collect();
    Posteriors {
        log_marginal: lat.log_z,
        n_frames: lat.n,
        n_units: p.n_units,
        n_states: p.topology.n_states,
        states,
    }
}

/// Posteriors plus the expected sufficient statistics of one utterance.
pub fn accumulate(seq: &FrameSequence, p: &LoopParams) -> Result<(Posteriors, SuffStats)> {
    let lat = run_lattice(seq, p)?;
    let post = posteriors(&lat, p);
    let topo = p.topology;
    let (s_n, c_n, d) = (topo.n_states, topo.n_components, topo.dim);
    let (n, j, lz) = (lat.n, lat.j, lat.log_z);
    let k_n = p.n_gauss();
    let mut st = SuffStats::zeros(topo, p.n_units);
    st.log_marginal = lz;
    st.n_frames = n;

    for u in 0..p.n_units {
        st.entries[u] += post.states[u * s_n];
    }
    for t in 0..n {
        let x = seq.row(t);
        let gam = &post.states[t * j..(t + 1) * j];
        let comp = &lat.comp[t * k_n..(t + 1) * k_n];
        for i in 0..j {
            if gam[i] == 0.0 {
                continue;
            }
            let e = lat.emit[t * j + i];
            for c in 0..c_n {
                let k = i * c_n + c;
                let r = gam[i] * (comp[k] - e).exp();
                st.comp_counts[k] += r;
                let s1 = &mut st.comp_s1[k * d..(k + 1) * d];
                for (a, xi) in s1.iter_mut().zip(x) {
                    *a += r * xi;
                }
                let s2 = &mut st.comp_s2[k * d..(k + 1) * d];
                for (a, xi) in s2.iter_mut().zip(x) {
                    *a += r * xi * xi;
                }
            }
        }
        if t + 1 == n {
            break;
        }
        let a_t = &lat.alpha[t * j..(t + 1) * j];
        let b_next = &lat.beta[(t + 1) * j..(t + 2) * j];
        let e_next = &lat.emit[(t + 1) * j..(t + 2) * j];
        for u in 0..p.n_units {
            for s in 0..s_n {
                let i = u * s_n + s;
                st.self_counts[i] += (a_t[i] + p.log_self[i] + e_next[i] + b_next[i] - lz).exp();
                st.fwd_counts[i] += if s + 1 < s_n {
                    (a_t[i] + p.log_fwd[i] + e_next[i + 1] + b_next[i + 1] - lz).exp()
                } else {
                    (a_t[i] + p.log_fwd[i] + lat.entry[t + 1] - lz).exp()
                };
            }
            st.entries[u] +=
                (lat.exit[t] + p.log_weights[u] + e_next[u * s_n] + b_next[u * s_n] - lz).exp();
        }
    }
    if !st.is_finite() {
        return Err(UwsError::Numerical(format!(
            "non-finite statistics in {}",
            seq.utterance_id
        )));
    }
    Ok((post, st))
}

/// Best state path (state indices `u * S + s`) and its log score.
pub fn viterbi_path(seq: &FrameSequence, p: &LoopParams) -> Result<(Vec<usize>, f64)> {
    p.validate()?;
    let (_, emit) = p.emissions(seq)?;
    let n = seq.n_frames();
    let s_n = p.topology.n_states;
    let j = p.n_states_total();
    let ninf = f64::NEG_INFINITY;
    let mut delta = vec![ninf; n * j];
    let mut back = vec![usize::MAX; n * j];
    for u in 0..p.n_units {
        delta[u * s_n] = p.log_weights[u] + emit[u * s_n];
    }
    for t in 1..n {
        let prev = &delta[(t - 1) * j..t * j];
        let mut best_exit = (ninf, usize::MAX);
        for u in 0..p.n_units {
            let i = u * s_n + s_n - 1;
            let v = prev[i] + p.log_fwd[i];
            if v > best_exit.0 {
                best_exit = (v, i);
            }
        }
        let mut row = vec![ninf; j];
        let mut bp = vec![usize::MAX; j];
        for u in 0..p.n_units {
            for s in 0..s_n {
                let i = u * s_n + s;
                let (arrive, from) = if s == 0 {
                    (best_exit.0 + p.log_weights[u], best_exit.1)
                } else {
                    (prev[i - 1] + p.log_fwd[i - 1], i - 1)
                };
                let stay = prev[i] + p.log_self[i];
                // ties go to the lower predecessor index
                let (v, b) = if stay > arrive || (stay == arrive && i < from) {
                    (stay, i)
                } else {
                    (arrive, from)
                };
                row[i] = v + emit[t * j + i];
                bp[i] = b;
            }
        }
        delta[t * j..(t + 1) * j].copy_from_slice(&row);
        back[t * j..(t + 1) * j].copy_from_slice(&bp);
    }
    let mut best = (ninf, usize::MAX);
    for u in 0..p.n_units {
        let i = u * s_n + s_n - 1;
        if delta[(n - 1) * j + i] > best.0 {
            best = (delta[(n - 1) * j + i], i);
        }
    }
    if best.1 == usize::MAX {
        return Err(UwsError::Degenerate(format!(
            "no complete path through {} ({n} frames)",
            seq.utterance_id
        )));
    }
    let mut path = vec![0; n];
    path[n - 1] = best.1;
    for t in (1..n).rev() {
        path[t - 1] = back[t * j + path[t]];
    }
    Ok((path, best.0))
}

/// Per-frame unit labels of the best path.
pub fn viterbi_frame_labels(
    seq: &FrameSequence,
    p: &LoopParams,
    silence_unit: Option<usize>,
) -> Result<Vec<String>> {
    let (path, _) = viterbi_path(seq, p)?;
    let s_n = p.topology.n_states;
    Ok(path
        .iter()
        .map(|i| unit_label(i / s_n, silence_unit))
        .collect())
}

/// Best path as a time-stamped unit sequence; runs of one unit become one token.
pub fn viterbi_decode(
    seq: &FrameSequence,
    p: &LoopParams,
    silence_unit: Option<usize>,
) -> Result<UnitSequence> {
    let labels = viterbi_frame_labels(seq, p, silence_unit)?;
    crate::units::merge_windows(&seq.utterance_id, &labels, seq.hop_s)
}
