//! Generalized EM for phone loops whose units live in a subspace.
//!
//! Unit embeddings (and the language embedding of the hierarchical model)
//! are point estimates under standard-normal priors. Each M-step takes
//! preconditioned gradient steps on the expected complete-data
//! log-likelihood and only accepts steps that do not decrease it.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::hmm::{clamped_exp, decode_params, PhoneLoop, Topology, UnitHmm, VAR_MAX, VAR_MIN};
use super::inference::{LoopParams, SuffStats};
use super::subspace::{HierSubspace, Subspace};
use super::vb::{annotate, check_corpus, e_step, moments, silence_frames, validate_config};
use super::{AudConfig, AudKind, AudModel, AudTrace};
use crate::corpus::{FrameSequence, Interval};
use crate::error::{Result, UwsError};
use crate::mathx::{dirichlet_expected_log, kl_dirichlet, logsumexp, LN_2PI};
use crate::par::Exec;

/// Expected counts of one unit, sliced out of corpus statistics.
struct UnitStats<'a> {
    self_counts: &'a [f64],
    fwd_counts: &'a [f64],
    comp_counts: &'a [f64],
    s1: &'a [f64],
    s2: &'a [f64],
}

fn unit_stats(stats: &SuffStats, u: usize) -> UnitStats<'_> {
    let t = stats.topology;
    let (s, c, d) = (t.n_states, t.n_components, t.dim);
    let k = s * c;
    UnitStats {
        self_counts: &stats.self_counts[u * s..(u + 1) * s],
        fwd_counts: &stats.fwd_counts[u * s..(u + 1) * s],
        comp_counts: &stats.comp_counts[u * k..(u + 1) * k],
        s1: &stats.comp_s1[u * k * d..(u + 1) * k * d],
        s2: &stats.comp_s2[u * k * d..(u + 1) * k * d],
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let z = logsumexp(x);
    x.iter().map(|v| v - z).collect()
}

fn clamped_log_var(l: f64) -> (f64, bool) {
    let lo = VAR_MIN.ln();
    let hi = VAR_MAX.ln();
    (l.clamp(lo, hi), (lo..=hi).contains(&l))
}

/// Appends the scores of one unit given its unconstrained vector.
fn push_unit_scores(p: &mut LoopParams, topo: &Topology, raw: &[f64]) {
    let (c_n, d) = (topo.n_components, topo.dim);
    for block in raw.chunks(topo.state_param_len()) {
        let t = log_softmax(&block[..2]);
        p.log_self.push(t[0]);
        p.log_fwd.push(t[1]);
        let lw = log_softmax(&block[2..2 + c_n]);
        let means = &block[2 + c_n..2 + c_n + c_n * d];
        let logv = &block[2 + c_n + c_n * d..];
        for c in 0..c_n {
            let lv: Vec<f64> = logv[c * d..(c + 1) * d]
                .iter()
                .map(|l| clamped_log_var(*l).0)
                .collect();
            p.gauss_const
                .push(lw[c] - 0.5 * (d as f64 * LN_2PI + lv.iter().sum::<f64>()));
            p.gauss_mean.extend_from_slice(&means[c * d..(c + 1) * d]);
            p.gauss_prec.extend(lv.iter().map(|l| (-l).exp()));
        }
    }
}

/// Expected complete-data log-likelihood of one unit, its gradient and a
/// diagonal curvature estimate, all with respect to the unconstrained vector.
fn unit_objective(topo: &Topology, raw: &[f64], st: &UnitStats) -> (f64, Vec<f64>, Vec<f64>) {
    let (c_n, d) = (topo.n_components, topo.dim);
    let len = topo.state_param_len();
    let mut val = 0.0;
    let mut grad = vec![0.0; raw.len()];
    let mut curv = vec![0.0; raw.len()];
    for (s, block) in raw.chunks(len).enumerate() {
        let o = s * len;
        let lt = log_softmax(&block[..2]);
        let counts = [st.self_counts[s], st.fwd_counts[s]];
        let n_t = counts[0] + counts[1];
        for j in 0..2 {
            let pj = lt[j].exp();
            val += counts[j] * lt[j];
            grad[o + j] = counts[j] - n_t * pj;
            curv[o + j] = n_t * pj * (1.0 - pj);
        }
        let lw = log_softmax(&block[2..2 + c_n]);
        let nk = &st.comp_counts[s * c_n..(s + 1) * c_n];
        let n_s: f64 = nk.iter().sum();
        for c in 0..c_n {
            let w = lw[c].exp();
            val += nk[c] * lw[c];
            grad[o + 2 + c] = nk[c] - n_s * w;
            curv[o + 2 + c] = n_s * w * (1.0 - w);
        }
        for c in 0..c_n {
            let k = s * c_n + c;
            let n = nk[c];
            for i in 0..d {
                let mi = o + 2 + c_n + c * d + i;
                let vi = o + 2 + c_n + c_n * d + c * d + i;
                let mu = raw[mi];
                let (lv, inside) = clamped_log_var(raw[vi]);
                let prec = (-lv).exp();
                let s1 = st.s1[k * d + i];
                let s2 = st.s2[k * d + i];
                let sq = s2 - 2.0 * mu * s1 + mu * mu * n;
                val += -0.5 * n * (LN_2PI + lv) - 0.5 * sq * prec;
                grad[mi] = (s1 - mu * n) * prec;
                curv[mi] = n * prec;
                if inside {
                    grad[vi] = -0.5 * n + 0.5 * sq * prec;
                }
                curv[vi] = 0.5 * n;
            }
        }
    }
    (val, grad, curv)
}

fn log_std_normal(x: &[f64]) -> f64 {
    -0.5 * (x.len() as f64 * LN_2PI + x.iter().map(|v| v * v).sum::<f64>())
}

/// Solves `(J^T H J + I) d = g` where `J` is given column-wise as `P x E`.
fn preconditioned(jac: &DMatrix<f64>, curv: &[f64], g: &[f64]) -> Vec<f64> {
    let e = jac.ncols();
    let mut lhs = DMatrix::identity(e, e);
    let mut scaled = jac.clone();
    for (r, h) in curv.iter().enumerate() {
        scaled.row_mut(r).scale_mut(*h);
    }
    lhs += jac.transpose() * scaled;
    let g = DVector::from_column_slice(g);
    match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&g).iter().copied().collect(),
        None => g.iter().copied().collect(),
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct StepCount {
    accepted: usize,
    rejected: usize,
}

/// Backtracking ascent on `f` from `x0` along preconditioned directions.
/// `eval` returns value and gradient; `direction` maps a gradient to a step.
fn ascend(
    x0: &[f64],
    step0: f64,
    inner_steps: usize,
    eval: impl Fn(&[f64]) -> (f64, Vec<f64>),
    direction: impl Fn(&[f64]) -> Vec<f64>,
) -> (Vec<f64>, f64, StepCount) {
    let mut x = x0.to_vec();
    let mut step = step0;
    let mut count = StepCount::default();
    if inner_steps == 0 {
        return (x, step, count);
    }
    let (mut fx, mut g) = eval(&x);
    for _ in 0..inner_steps {
        let dir = direction(&g);
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let (fc, gc) = eval(&cand);
            if fc.is_finite() && fc >= fx {
                x = cand;
                fx = fc;
                g = gc;
                step = (step * 2.0).min(1.0);
                count.accepted += 1;
                moved = true;
                break;
            }
            count.rejected += 1;
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (x, step, count)
}

enum Space<'a> {
    Flat(&'a Subspace),
    Hier(&'a HierSubspace),
}

struct SubspaceTrainer<'a> {
    space: Space<'a>,
    topo: Topology,
    cfg: &'a AudConfig,
    current: Subspace,
    embeddings: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    weights: Vec<f64>,
    prior_weights: Vec<f64>,
    steps: Vec<f64>,
    alpha_step: f64,
    silence_unit: Option<usize>,
}

impl SubspaceTrainer<'_> {
    fn raws(&self) -> Vec<Vec<f64>> {
        self.embeddings
            .iter()
            .map(|e| self.current.raw(e))
            .collect()
    }

    fn params(&self) -> LoopParams {
        let mut p = LoopParams::empty(self.topo, self.embeddings.len());
        p.log_weights = dirichlet_expected_log(&self.weights);
        for raw in self.raws() {
            push_unit_scores(&mut p, &self.topo, &raw);
        }
        p
    }

    fn learns_language(&self) -> bool {
        matches!(self.space, Space::Hier(_)) && self.cfg.update_language
    }

    fn elbo(&self, log_marginal: f64) -> f64 {
        let mut l = log_marginal - kl_dirichlet(&self.weights, &self.prior_weights);
        l += self
            .embeddings
            .iter()
            .map(|e| log_std_normal(e))
            .sum::<f64>();
        if self.learns_language() {
            l += log_std_normal(&self.alpha);
        }
        l
    }

    fn m_step(&mut self, stats: &SuffStats, exec: Exec) -> Result<StepCount> {
        self.weights = self
            .prior_weights
            .iter()
            .zip(&stats.entries)
            .map(|(a, n)| a + n)
            .collect();
        let topo = self.topo;
        let inner = self.cfg.inner_steps;
        let sub = &self.current;
        let w = sub.basis_matrix();
        let results = exec.map_range(self.embeddings.len(), |u| {
            let st = unit_stats(stats, u);
            let e0 = &self.embeddings[u];
            let (_, _, curv) = unit_objective(&topo, &sub.raw(e0), &st);
            let eval = |e: &[f64]| {
                let (v, g, _) = unit_objective(&topo, &sub.raw(e), &st);
                let mut ge = sub.transpose_mul(&g);
                ge.iter_mut().zip(e).for_each(|(a, b)| *a -= b);
                (v + log_std_normal(e), ge)
            };
            ascend(e0, self.steps[u], inner, eval, |g| {
                preconditioned(&w, &curv, g)
            })
        });
        let mut count = StepCount::default();
        for (u, (e, step, c)) in results.into_iter().enumerate() {
            self.embeddings[u] = e;
            self.steps[u] = step;
            count.accepted += c.accepted;
            count.rejected += c.rejected;
        }
        if self.learns_language() {
            let c = self.update_alpha(stats)?;
            count.accepted += c.accepted;
            count.rejected += c.rejected;
        }
        Ok(count)
    }

    fn update_alpha(&mut self, stats: &SuffStats) -> Result<StepCount> {
        let Space::Hier(hier) = self.space else {
            return Ok(StepCount::default());
        };
        let k_dim = hier.language_dim();
        if k_dim == 0 {
            return Ok(StepCount::default());
        }
        let topo = self.topo;
        let p_len = topo.param_len();
        // responses of every template to every unit embedding
        let zs: Vec<DMatrix<f64>> = self
            .embeddings
            .iter()
            .map(|e| {
                let mut z = DMatrix::zeros(p_len, k_dim);
                for k in 0..k_dim {
                    z.set_column(k, &DVector::from_vec(hier.template_response(k + 1, e)));
                }
                z
            })
            .collect();
        let eval = |alpha: &[f64]| -> (f64, Vec<f64>) {
            let sub = match hier.language_subspace(alpha) {
                Ok(s) => s,
                Err(_) => return (f64::NEG_INFINITY, vec![0.0; k_dim]),
            };
            let mut val = log_std_normal(alpha);
            let mut grad: Vec<f64> = alpha.iter().map(|a| -a).collect();
            for (u, e) in self.embeddings.iter().enumerate() {
                let st = unit_stats(stats, u);
                let (v, g, _) = unit_objective(&topo, &sub.raw(e), &st);
                val += v;
                let gz = zs[u].transpose() * DVector::from_vec(g);
                grad.iter_mut().zip(gz.iter()).for_each(|(a, b)| *a += b);
            }
            (val, grad)
        };
        let mut lhs = DMatrix::identity(k_dim, k_dim);
        for (u, e) in self.embeddings.iter().enumerate() {
            let st = unit_stats(stats, u);
            let (_, _, curv) = unit_objective(&topo, &self.current.raw(e), &st);
            let mut scaled = zs[u].clone();
            for (r, h) in curv.iter().enumerate() {
                scaled.row_mut(r).scale_mut(*h);
            }
            lhs += zs[u].transpose() * scaled;
        }
        let chol = lhs.cholesky();
        let direction = |g: &[f64]| -> Vec<f64> {
            let g = DVector::from_column_slice(g);
            match &chol {
                Some(ch) => ch.solve(&g).iter().copied().collect(),
                None => g.iter().copied().collect(),
            }
        };
        let (alpha, step, count) = ascend(
            &self.alpha,
            self.alpha_step,
            self.cfg.inner_steps,
            eval,
            direction,
        );
        self.alpha = alpha;
        self.alpha_step = step;
        self.current = hier.language_subspace(&self.alpha)?;
        Ok(count)
    }

    fn units(&self) -> Result<Vec<UnitHmm>> {
        self.raws()
            .iter()
            .map(|r| decode_params(&self.topo, r))
            .collect()
    }
}

fn train_in_space(
    features: &[FrameSequence],
    silences: &[Vec<Interval>],
    space: Space,
    cfg: &AudConfig,
    exec: Exec,
) -> Result<(AudModel, AudTrace)> {
    validate_config(cfg)?;
    let dim = check_corpus(features)?;
    let (topo, start, kind) = match &space {
        Space::Flat(s) => {
            s.validate()?;
            ((*s).topology, (*s).clone(), AudKind::Shmm)
        }
        Space::Hier(h) => {
            h.validate()?;
            let alpha = vec![0.0; h.language_dim()];
            (h.topology, h.language_subspace(&alpha)?, AudKind::Hshmm)
        }
    };
    if topo.dim != dim {
        return Err(UwsError::dim(
            None,
            format!(
                "subspace expects {}-dim features, corpus has {dim}",
                topo.dim
            ),
        ));
    }
    let e_dim = start.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut embeddings: Vec<Vec<f64>> = (0..cfg.units)
        .map(|_| {
            (0..e_dim)
                .map(|_| cfg.init_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let sil = silence_frames(features, silences);
    let silence_unit = (!sil.is_empty()).then_some(0);
    if silence_unit.is_some() {
        let (n, s1, s2) = moments(&sil, dim);
        let mean: Vec<f64> = s1.iter().map(|v| v / n).collect();
        let var: Vec<f64> = (0..dim)
            .map(|d| clamped_exp((s2[d] / n - mean[d] * mean[d]).max(VAR_MIN).ln()))
            .collect();
        let unit = UnitHmm::flat(&topo, &mean, &var, 0.9);
        embeddings[0] = start.embed(&super::hmm::encode_params(&unit), 1.0);
    }
    let prior_weights = vec![cfg.priors.unit_concentration / cfg.units as f64; cfg.units];
    let alpha = vec![
        0.0;
        if let Space::Hier(h) = &space {
            h.language_dim()
        } else {
            0
        }
    ];
    let mut tr = SubspaceTrainer {
        space,
        topo,
        cfg,
        current: start,
        embeddings,
        alpha,
        weights: prior_weights.clone(),
        prior_weights,
        steps: vec![cfg.learning_rate; cfg.units],
        alpha_step: cfg.learning_rate,
        silence_unit,
    };

    let mut trace = AudTrace::default();
    for it in 0..=cfg.iterations {
        let params = tr.params();
        let stats = e_step(features, &params, exec).map_err(|e| annotate(e, it))?;
        let elbo = tr.elbo(stats.log_marginal);
        if !elbo.is_finite() {
            return Err(UwsError::Numerical(format!(
                "iteration {it}: lower bound is {elbo}"
            )));
        }
        log::debug!("subspace iteration {it}: elbo {elbo:.6}");
        trace.elbo.push(elbo);
        if it == cfg.iterations {
            break;
        }
        let c = tr.m_step(&stats, exec).map_err(|e| annotate(e, it))?;
        trace.accepted_steps += c.accepted;
        trace.rejected_steps += c.rejected;
    }

    let total: f64 = tr.weights.iter().sum();
    let phone_loop = PhoneLoop {
        topology: topo,
        units: tr.units()?,
        weights: tr.weights.iter().map(|w| w / total).collect(),
        silence_unit: tr.silence_unit,
    };
    let model = AudModel {
        kind,
        scores: tr.params(),
        phone_loop,
        posterior: None,
        embeddings: Some(tr.embeddings.clone()),
        language_embedding: matches!(kind, AudKind::Hshmm).then(|| tr.alpha.clone()),
    };
    Ok((model, trace))
}

/// Trains a phone loop whose units are constrained to `subspace`.
pub fn train_shmm(
    features: &[FrameSequence],
    silences: &[Vec<Interval>],
    subspace: &Subspace,
    cfg: &AudConfig,
    exec: Exec,
) -> Result<(AudModel, AudTrace)> {
    train_in_space(features, silences, Space::Flat(subspace), cfg, exec)
}

/// Like [`train_shmm`], but also adapts the language embedding that mixes
/// the templates of `hier`. The learned embedding is stored in the model.
pub fn train_hshmm(
    features: &[FrameSequence],
    silences: &[Vec<Interval>],
    hier: &HierSubspace,
    cfg: &AudConfig,
    exec: Exec,
) -> Result<(AudModel, AudTrace)> {
    train_in_space(features, silences, Space::Hier(hier), cfg, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aud::hmm::encode_params;

    fn stats_for(topo: Topology) -> SuffStats {
        let mut s = SuffStats::zeros(topo, 1);
        s.self_counts = vec![3.0, 1.0];
        s.fwd_counts = vec![1.0, 1.0];
        s.comp_counts = vec![2.0, 2.0, 1.5, 0.5];
        let d = topo.dim;
        for k in 0..4 {
            for i in 0..d {
                s.comp_s1[k * d + i] = s.comp_counts[k] * (0.3 * k as f64 - 0.2 * i as f64);
                s.comp_s2[k * d + i] = s.comp_counts[k] * (1.0 + 0.1 * (k + i) as f64);
            }
        }
        s
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let topo = Topology::new(2, 2, 2).unwrap();
        let stats = stats_for(topo);
        let st = unit_stats(&stats, 0);
        let raw: Vec<f64> = (0..topo.param_len())
            .map(|i| ((i * 5) % 7) as f64 * 0.2 - 0.6)
            .collect();
        let (_, g, _) = unit_objective(&topo, &raw, &st);
        for i in 0..raw.len() {
            let h = 1e-6;
            let mut a = raw.clone();
            let mut b = raw.clone();
            a[i] += h;
            b[i] -= h;
            let fd =
                (unit_objective(&topo, &a, &st).0 - unit_objective(&topo, &b, &st).0) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn scores_match_point_parameters() {
        let topo = Topology::new(2, 2, 2).unwrap();
        let raw: Vec<f64> = (0..topo.param_len())
            .map(|i| ((i * 3) % 5) as f64 * 0.3 - 0.5)
            .collect();
        let unit = decode_params(&topo, &raw).unwrap();
        let pl = PhoneLoop {
            topology: topo,
            units: vec![unit.clone()],
            weights: vec![1.0],
            silence_unit: None,
        };
        let a = pl.point_params();
        let mut b = LoopParams::empty(topo, 1);
        b.log_weights = vec![0.0];
        push_unit_scores(&mut b, &topo, &encode_params(&unit));
        for (x, y) in a.gauss_const.iter().zip(&b.gauss_const) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in a.log_self.iter().zip(&b.log_self) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ascent_never_decreases() {
        let f = |x: &[f64]| (-(x[0] - 3.0).powi(2), vec![-2.0 * (x[0] - 3.0)]);
        let (x, _, c) = ascend(&[0.0], 10.0, 20, f, |g| vec![0.5 * g[0]]);
        assert!((x[0] - 3.0).abs() < 1e-3);
        assert!(c.rejected > 0);
        let (same, _, _) = ascend(&[0.0], 10.0, 0, f, |g| g.to_vec());
        assert_eq!(same, vec![0.0]);
    }
}
