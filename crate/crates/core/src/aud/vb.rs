//! Variational Bayes training of the phone-loop HMM with conjugate priors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::hmm::{HmmState, Mixture, PhoneLoop, Topology, UnitHmm, VAR_MAX, VAR_MIN};
use super::inference::{accumulate, LoopParams, SuffStats};
use super::{AudConfig, AudKind, AudModel, AudTrace};
use crate::corpus::{FrameSequence, Interval};
use crate::error::{Result, UwsError};
use crate::mathx::{digamma, dirichlet_expected_log, kl_dirichlet, ln_gamma, LN_2PI};
use crate::par::Exec;

/// Hyperparameters of the conjugate priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmPriors {
    /// Total concentration of the symmetric Dirichlet over unit weights.
    pub unit_concentration: f64,
    pub transition_concentration: f64,
    pub mixture_concentration: f64,
    /// Prior pseudo-count of the component means.
    pub mean_count: f64,
    /// Gamma shape of the component precisions.
    pub precision_shape: f64,
}

impl Default for HmmPriors {
    fn default() -> Self {
        HmmPriors {
            unit_concentration: 1.0,
            transition_concentration: 1.0,
            mixture_concentration: 1.0,
            mean_count: 1.0,
            precision_shape: 1.0,
        }
    }
}

impl HmmPriors {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.unit_concentration,
            self.transition_concentration,
            self.mixture_concentration,
            self.mean_count,
            self.precision_shape,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(UwsError::invalid(
                "priors",
                "all hyperparameters must be positive",
            ));
        }
        Ok(())
    }
}

/// Diagonal Normal-Gamma distribution over one Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalGamma {
    pub mean: Vec<f64>,
    pub kappa: f64,
    pub shape: f64,
    pub rate: Vec<f64>,
}

impl NormalGamma {
    /// Conjugate update of `self` (the prior) with weighted moments.
    pub fn posterior(&self, n: f64, s1: &[f64], s2: &[f64]) -> NormalGamma {
        let kappa = self.kappa + n;
        let shape = self.shape + 0.5 * n;
        let mut mean = Vec::with_capacity(self.mean.len());
        let mut rate = Vec::with_capacity(self.mean.len());
        for d in 0..self.mean.len() {
            let m0 = self.mean[d];
            let m = (self.kappa * m0 + s1[d]) / kappa;
            let b = self.rate[d] + 0.5 * (s2[d] + self.kappa * m0 * m0 - kappa * m * m);
            mean.push(m);
            rate.push(b.max(self.rate[d]));
        }
        NormalGamma {
            mean,
            kappa,
            shape,
            rate,
        }
    }

    /// `E[ln N(x)] = c - 0.5 * sum_d prec_d (x_d - m_d)^2`; returns `(c, prec)`.
    fn expected_score(&self) -> (f64, Vec<f64>) {
        let psi = digamma(self.shape);
        let mut c = 0.0;
        let mut prec = Vec::with_capacity(self.rate.len());
        for b in &self.rate {
            c += 0.5 * (psi - b.ln()) - 0.5 * LN_2PI - 0.5 / self.kappa;
            prec.push(self.shape / b);
        }
        (c, prec)
    }

    pub fn kl(&self, prior: &NormalGamma) -> f64 {
        let (a, a0) = (self.shape, prior.shape);
        let mut kl = 0.0;
        for d in 0..self.mean.len() {
            let (b, b0) = (self.rate[d], prior.rate[d]);
            kl += (a - a0) * digamma(a) - ln_gamma(a)
                + ln_gamma(a0)
                + a0 * (b.ln() - b0.ln())
                + a * (b0 - b) / b;
            let dm = self.mean[d] - prior.mean[d];
            let r = prior.kappa / self.kappa;
            kl += 0.5 * (r + prior.kappa * (a / b) * dm * dm - 1.0 - r.ln());
        }
        kl
    }

    pub fn mean_variance(&self) -> Vec<f64> {
        self.rate
            .iter()
            .map(|b| (b / self.shape).clamp(VAR_MIN, VAR_MAX))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePosterior {
    pub transitions: [f64; 2],
    pub mixture: Vec<f64>,
    pub components: Vec<NormalGamma>,
}

/// Variational posterior (or prior) over all phone-loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbPosterior {
    pub topology: Topology,
    pub unit_weights: Vec<f64>,
    /// `U * S` states, unit-major.
    pub states: Vec<StatePosterior>,
}

impl VbPosterior {
    pub fn prior(
        topology: Topology,
        n_units: usize,
        priors: &HmmPriors,
        mean: &[f64],
        variance: &[f64],
    ) -> Self {
        let comp = NormalGamma {
            mean: mean.to_vec(),
            kappa: priors.mean_count,
            shape: priors.precision_shape,
            rate: variance
                .iter()
                .map(|v| priors.precision_shape * v)
                .collect(),
        };
        let state = StatePosterior {
            transitions: [priors.transition_concentration; 2],
            mixture: vec![priors.mixture_concentration; topology.n_components],
            components: vec![comp; topology.n_components],
        };
        VbPosterior {
            topology,
            unit_weights: vec![priors.unit_concentration / n_units as f64; n_units],
            states: vec![state; n_units * topology.n_states],
        }
    }

    pub fn n_units(&self) -> usize {
        self.unit_weights.len()
    }

    /// Scores using expected log-parameters.
    pub fn expected_params(&self) -> LoopParams {
        let topo = self.topology;
        let mut p = LoopParams::empty(topo, self.n_units());
        p.log_weights = dirichlet_expected_log(&self.unit_weights);
        for st in &self.states {
            let t = dirichlet_expected_log(&st.transitions);
            p.log_self.push(t[0]);
            p.log_fwd.push(t[1]);
            let lw = dirichlet_expected_log(&st.mixture);
            for (c, comp) in st.components.iter().enumerate() {
                let (k, prec) = comp.expected_score();
                p.gauss_const.push(lw[c] + k);
                p.gauss_mean.extend_from_slice(&comp.mean);
                p.gauss_prec.extend(prec);
            }
        }
        p
    }

    /// Conjugate update of `prior` with expected counts.
    pub fn update(prior: &VbPosterior, stats: &SuffStats) -> VbPosterior {
        let topo = prior.topology;
        let (c_n, d) = (topo.n_components, topo.dim);
        let unit_weights = prior
            .unit_weights
            .iter()
            .zip(&stats.entries)
            .map(|(a, n)| a + n)
            .collect();
        let states = prior
            .states
            .iter()
            .enumerate()
            .map(|(j, st)| StatePosterior {
                transitions: [
                    st.transitions[0] + stats.self_counts[j],
                    st.transitions[1] + stats.fwd_counts[j],
                ],
                mixture: (0..c_n)
                    .map(|c| st.mixture[c] + stats.comp_counts[j * c_n + c])
                    .collect(),
                components: (0..c_n)
                    .map(|c| {
                        let k = j * c_n + c;
                        st.components[c].posterior(
                            stats.comp_counts[k],
                            &stats.comp_s1[k * d..(k + 1) * d],
                            &stats.comp_s2[k * d..(k + 1) * d],
                        )
                    })
                    .collect(),
            })
            .collect();
        VbPosterior {
            topology: topo,
            unit_weights,
            states,
        }
    }

    pub fn kl(&self, prior: &VbPosterior) -> f64 {
        let mut kl = kl_dirichlet(&self.unit_weights, &prior.unit_weights);
        for (q, p) in self.states.iter().zip(&prior.states) {
            kl += kl_dirichlet(&q.transitions, &p.transitions);
            kl += kl_dirichlet(&q.mixture, &p.mixture);
            for (qc, pc) in q.components.iter().zip(&p.components) {
                kl += qc.kl(pc);
            }
        }
        kl
    }

    /// Posterior-mean parameters as a phone loop.
    pub fn point_estimate(&self, silence_unit: Option<usize>) -> PhoneLoop {
        let s_n = self.topology.n_states;
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let units = self
            .states
            .chunks(s_n)
            .map(|states| UnitHmm {
                states: states
                    .iter()
                    .map(|st| {
                        let t = norm(&st.transitions);
                        HmmState {
                            transitions: [t[0], t[1]],
                            emission: Mixture {
                                weights: norm(&st.mixture),
                                means: st.components.iter().map(|c| c.mean.clone()).collect(),
                                variances: st
                                    .components
                                    .iter()
                                    .map(NormalGamma::mean_variance)
                                    .collect(),
                            },
                        }
                    })
                    .collect(),
            })
            .collect();
        PhoneLoop {
            topology: self.topology,
            units,
            weights: norm(&self.unit_weights),
            silence_unit,
        }
    }
}

/// Utterances per reduction chunk; bounds memory of per-utterance statistics.
const CHUNK: usize = 64;

/// Expected statistics over the corpus, summed in utterance order.
pub fn e_step(features: &[FrameSequence], params: &LoopParams, exec: Exec) -> Result<SuffStats> {
    let mut total = SuffStats::zeros(params.topology, params.n_units);
    for chunk in features.chunks(CHUNK) {
        let parts = exec.try_map(chunk, |f| accumulate(f, params).map(|(_, s)| s))?;
        for s in &parts {
            total.add(s);
        }
    }
    Ok(total)
}

pub(crate) fn check_corpus(features: &[FrameSequence]) -> Result<usize> {
    let first = features
        .first()
        .ok_or_else(|| UwsError::invalid("corpus", "needs at least one utterance"))?;
    for f in features {
        if f.dim != first.dim {
            return Err(UwsError::dim(
                Some(&f.utterance_id),
                format!("{} dims, corpus has {}", f.dim, first.dim),
            ));
        }
    }
    Ok(first.dim)
}

/// Per-dimension mean and variance over all frames.
pub(crate) fn global_moments(features: &[FrameSequence], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut s1 = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for f in features {
        for x in f.rows() {
            n += 1.0;
            for d in 0..dim {
                s1[d] += x[d];
                s2[d] += x[d] * x[d];
            }
        }
    }
    let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
    let var = (0..dim)
        .map(|d| (s2[d] / n - mean[d] * mean[d]).max(VAR_MIN))
        .collect();
    (mean, var)
}

/// Frames whose centre lies inside an annotated silence.
pub(crate) fn silence_frames<'a>(
    features: &'a [FrameSequence],
    silences: &[Vec<Interval>],
) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    for (f, sil) in features.iter().zip(silences) {
        for t in 0..f.n_frames() {
            let mid = f.frame_start(t) + 0.5 * f.hop_s;
            if sil.iter().any(|iv| iv.contains(mid)) {
                out.push(f.row(t));
            }
        }
    }
    out
}

pub(crate) fn moments(frames: &[&[f64]], dim: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut s1 = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for x in frames {
        for d in 0..dim {
            s1[d] += x[d];
            s2[d] += x[d] * x[d];
        }
    }
    (frames.len() as f64, s1, s2)
}

pub(crate) fn validate_config(cfg: &AudConfig) -> Result<()> {
    if cfg.units == 0 {
        return Err(UwsError::invalid("aud config", "units must be >= 1"));
    }
    if !(cfg.init_spread.is_finite() && cfg.init_spread >= 0.0) {
        return Err(UwsError::invalid("aud config", "init_spread must be >= 0"));
    }
    cfg.priors.validate()
}

fn initial_posterior(
    prior: &VbPosterior,
    cfg: &AudConfig,
    std: &[f64],
    silence: Option<(f64, Vec<f64>, Vec<f64>)>,
    rng: &mut ChaCha8Rng,
) -> VbPosterior {
    let mut q = prior.clone();
    let topo = prior.topology;
    let per = (topo.n_states * topo.n_components) as f64;
    for (j, st) in q.states.iter_mut().enumerate() {
        let unit = j / topo.n_states;
        for comp in st.components.iter_mut() {
            let (spread, base) = match (&silence, unit) {
                (Some((n, s1, s2)), 0) => {
                    let s1: Vec<f64> = s1.iter().map(|v| v / per).collect();
                    let s2: Vec<f64> = s2.iter().map(|v| v / per).collect();
                    (0.1, comp.posterior(n / per, &s1, &s2))
                }
                _ => (cfg.init_spread, comp.clone()),
            };
            *comp = base;
            for (m, s) in comp.mean.iter_mut().zip(std) {
                let z: f64 = rng.sample(StandardNormal);
                *m += spread * s * z;
            }
        }
    }
    q
}

/// Trains the variational phone loop. `silences` holds the annotated
/// silences of each utterance (may be empty); when any frame falls inside
/// one, unit 0 is reserved for silence and initialised on those frames.
pub fn train_hmm(
    features: &[FrameSequence],
    silences: &[Vec<Interval>],
    cfg: &AudConfig,
    exec: Exec,
) -> Result<(AudModel, AudTrace)> {
    validate_config(cfg)?;
    let dim = check_corpus(features)?;
    let topo = Topology::new(cfg.n_states, cfg.n_components, dim)?;
    let (mean, var) = global_moments(features, dim);
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let prior = VbPosterior::prior(topo, cfg.units, &cfg.priors, &mean, &var);

    let sil = silence_frames(features, silences);
    let silence_unit = (!sil.is_empty()).then_some(0);
    let sil_stats = silence_unit.map(|_| moments(&sil, dim));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = initial_posterior(&prior, cfg, &std, sil_stats, &mut rng);

    let mut trace = AudTrace::default();
    for it in 0..=cfg.iterations {
        let params = q.expected_params();
        let stats = e_step(features, &params, exec).map_err(|e| annotate(e, it))?;
        let elbo = stats.log_marginal - q.kl(&prior);
        if !elbo.is_finite() {
            return Err(UwsError::Numerical(format!(
                "iteration {it}: lower bound is {elbo}"
            )));
        }
        log::debug!("hmm iteration {it}: elbo {elbo:.6}");
        trace.elbo.push(elbo);
        if it == cfg.iterations {
            break;
        }
        q = VbPosterior::update(&prior, &stats);
    }
    let model = AudModel {
        kind: AudKind::Hmm,
        phone_loop: q.point_estimate(silence_unit),
        scores: q.expected_params(),
        posterior: Some(q),
        embeddings: None,
        language_embedding: None,
    };
    Ok((model, trace))
}

pub(crate) fn annotate(err: UwsError, iteration: usize) -> UwsError {
    match err {
        UwsError::Numerical(m) => UwsError::Numerical(format!("iteration {iteration}: {m}")),
        other => other,
    }
}
