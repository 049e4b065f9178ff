//! Phonetic subspaces estimated from labeled source corpora.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::hmm::{
    decode_params, encode_params, HmmState, Mixture, PhoneLoop, Topology, UnitHmm, VAR_MIN,
};
use super::inference::{accumulate, SuffStats};
use super::vb::{check_corpus, global_moments};
use crate::corpus::FrameSequence;
use crate::error::{Result, UwsError};
use crate::par::Exec;

/// Frames with one gold label per frame, e.g. one source language.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub name: String,
    pub features: Vec<FrameSequence>,
    pub frame_labels: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceConfig {
    pub embedding_dim: usize,
    pub language_dim: usize,
    pub n_states: usize,
    pub n_components: usize,
    pub em_iterations: usize,
    /// Minimum usable frames for every source unit.
    pub min_frames: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        SubspaceConfig {
            embedding_dim: 100,
            language_dim: 6,
            n_states: 3,
            n_components: 4,
            em_iterations: 10,
            min_frames: 20,
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

/// Unconstrained parameter vectors of the units of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    pub name: String,
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Linear subspace of unit parameters: unit `u` is `decode(W e_u + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    pub topology: Topology,
    pub embedding_dim: usize,
    /// `P x E`, row-major.
    pub basis: Vec<f64>,
    pub offset: Vec<f64>,
    pub source_units: Vec<String>,
    pub source_embeddings: Vec<Vec<f64>>,
    /// Relative Frobenius error of the reconstructed source parameters.
    pub reconstruction_error: f64,
}

impl Subspace {
    pub fn param_len(&self) -> usize {
        self.offset.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.topology.param_len();
        if self.offset.len() != p || self.basis.len() != p * self.embedding_dim {
            return Err(UwsError::invalid(
                "subspace",
                "basis/offset sizes do not match topology",
            ));
        }
        if self
            .basis
            .iter()
            .chain(&self.offset)
            .any(|v| !v.is_finite())
        {
            return Err(UwsError::invalid("subspace", "non-finite entries"));
        }
        Ok(())
    }

    /// `W e + b`.
    pub fn raw(&self, e: &[f64]) -> Vec<f64> {
        let k = self.embedding_dim;
        self.offset
            .iter()
            .enumerate()
            .map(|(i, b)| b + crate::mathx::dot(&self.basis[i * k..(i + 1) * k], e))
            .collect()
    }

    pub fn unit(&self, e: &[f64]) -> Result<UnitHmm> {
        decode_params(&self.topology, &self.raw(e))
    }

    /// `W^T g`.
    pub fn transpose_mul(&self, g: &[f64]) -> Vec<f64> {
        let k = self.embedding_dim;
        let mut out = vec![0.0; k];
        for (i, gi) in g.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.basis[i * k..(i + 1) * k]) {
                *o += w * gi;
            }
        }
        out
    }

    /// Ridge projection of an unconstrained vector onto the subspace.
    pub fn embed(&self, raw: &[f64], ridge: f64) -> Vec<f64> {
        let w = self.basis_matrix();
        let r = DVector::from_iterator(raw.len(), raw.iter().zip(&self.offset).map(|(a, b)| a - b));
        let lhs =
            w.transpose() * &w + DMatrix::identity(self.embedding_dim, self.embedding_dim) * ridge;
        let rhs = w.transpose() * r;
        solve_spd(
            &lhs,
            &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()),
        )
        .column(0)
        .iter()
        .copied()
        .collect()
    }

    pub fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.param_len(), self.embedding_dim, &self.basis)
    }
}

/// Template subspaces combined per language: `W = M_0 + sum_k a_k M_k`,
/// `b = m_0 + sum_k a_k m_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierSubspace {
    pub topology: Topology,
    pub embedding_dim: usize,
    /// `K + 1` matrices, each `P x E` row-major.
    pub templates: Vec<Vec<f64>>,
    pub template_offsets: Vec<Vec<f64>>,
    pub languages: Vec<String>,
    pub language_embeddings: Vec<Vec<f64>>,
    pub reconstruction_error: f64,
}

impl HierSubspace {
    pub fn language_dim(&self) -> usize {
        self.templates.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.topology.param_len();
        if self.templates.is_empty()
            || self.templates.len() != self.template_offsets.len()
            || self
                .templates
                .iter()
                .any(|m| m.len() != p * self.embedding_dim)
            || self.template_offsets.iter().any(|m| m.len() != p)
        {
            return Err(UwsError::invalid(
                "hierarchical subspace",
                "inconsistent template sizes",
            ));
        }
        Ok(())
    }

    /// The subspace of a language with embedding `alpha`.
    pub fn language_subspace(&self, alpha: &[f64]) -> Result<Subspace> {
        if alpha.len() != self.language_dim() {
            return Err(UwsError::dim(
                None,
                format!(
                    "language embedding has {} dims, expected {}",
                    alpha.len(),
                    self.language_dim()
                ),
            ));
        }
        let mut basis = self.templates[0].clone();
        let mut offset = self.template_offsets[0].clone();
        for (k, a) in alpha.iter().enumerate() {
            basis
                .iter_mut()
                .zip(&self.templates[k + 1])
                .for_each(|(x, m)| *x += a * m);
            offset
                .iter_mut()
                .zip(&self.template_offsets[k + 1])
                .for_each(|(x, m)| *x += a * m);
        }
        let sub = Subspace {
            topology: self.topology,
            embedding_dim: self.embedding_dim,
            basis,
            offset,
            source_units: Vec::new(),
            source_embeddings: Vec::new(),
            reconstruction_error: self.reconstruction_error,
        };
        if sub.basis.iter().chain(&sub.offset).any(|v| !v.is_finite()) {
            return Err(UwsError::Numerical(
                "derived language subspace is not finite".into(),
            ));
        }
        Ok(sub)
    }

    /// `M_k e + m_k` for template `k >= 1`.
    pub fn template_response(&self, k: usize, e: &[f64]) -> Vec<f64> {
        let d = self.embedding_dim;
        self.template_offsets[k]
            .iter()
            .enumerate()
            .map(|(i, b)| b + crate::mathx::dot(&self.templates[k][i * d..(i + 1) * d], e))
            .collect()
    }
}

fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => a
            .clone()
            .pseudo_inverse(1e-12)
            .map(|p| p * b)
            .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), b.ncols())),
    }
}

/// Contiguous runs of each label, keyed by label.
fn label_segments(corpus: &LabeledCorpus) -> Result<BTreeMap<String, Vec<FrameSequence>>> {
    if corpus.features.len() != corpus.frame_labels.len() {
        return Err(UwsError::invalid(
            "labeled corpus",
            format!(
                "{}: {} feature files but {} label rows",
                corpus.name,
                corpus.features.len(),
                corpus.frame_labels.len()
            ),
        ));
    }
    let mut out: BTreeMap<String, Vec<FrameSequence>> = BTreeMap::new();
    for (f, labels) in corpus.features.iter().zip(&corpus.frame_labels) {
        if labels.len() != f.n_frames() {
            return Err(UwsError::dim(
                Some(&f.utterance_id),
                format!("{} labels for {} frames", labels.len(), f.n_frames()),
            ));
        }
        let mut start = 0;
        for t in 1..=labels.len() {
            if t == labels.len() || labels[t] != labels[start] {
                let seg = FrameSequence::new(
                    format!("{}:{}", f.utterance_id, start),
                    f.dim,
                    f.frames[start * f.dim..t * f.dim].to_vec(),
                    f.hop_s,
                )?;
                out.entry(labels[start].clone()).or_default().push(seg);
                start = t;
            }
        }
    }
    Ok(out)
}

fn initial_unit(topo: &Topology, segments: &[&FrameSequence], floor: &[f64]) -> UnitHmm {
    let (s_n, c_n, d) = (topo.n_states, topo.n_components, topo.dim);
    let mut n = vec![0.0; s_n];
    let mut s1 = vec![vec![0.0; d]; s_n];
    let mut s2 = vec![vec![0.0; d]; s_n];
    let mut total = 0usize;
    for seg in segments {
        let len = seg.n_frames();
        total += len;
        for t in 0..len {
            let s = t * s_n / len;
            n[s] += 1.0;
            for (i, x) in seg.row(t).iter().enumerate() {
                s1[s][i] += x;
                s2[s][i] += x * x;
            }
        }
    }
    let dur = total as f64 / (s_n * segments.len()) as f64;
    let self_loop = (1.0 - 1.0 / dur).clamp(0.05, 0.95);
    let half = (c_n as f64 - 1.0) / 2.0;
    let states = (0..s_n)
        .map(|s| {
            let mean: Vec<f64> = s1[s].iter().map(|v| v / n[s]).collect();
            let var: Vec<f64> = (0..d)
                .map(|i| (s2[s][i] / n[s] - mean[i] * mean[i]).max(floor[i]))
                .collect();
            let means = (0..c_n)
                .map(|c| {
                    let shift = if half > 0.0 {
                        (c as f64 - half) / half
                    } else {
                        0.0
                    };
                    (0..d)
                        .map(|i| {
                            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                            mean[i] + 0.5 * sign * shift * var[i].sqrt()
                        })
                        .collect()
                })
                .collect();
            HmmState {
                transitions: [self_loop, 1.0 - self_loop],
                emission: Mixture {
                    weights: vec![1.0 / c_n as f64; c_n],
                    means,
                    variances: vec![var; c_n],
                },
            }
        })
        .collect();
    UnitHmm { states }
}

/// Maximum-likelihood re-estimate of unit 0 from its statistics.
fn ml_unit(prev: &UnitHmm, stats: &SuffStats, floor: &[f64]) -> UnitHmm {
    let topo = stats.topology;
    let (c_n, d) = (topo.n_components, topo.dim);
    let states = prev
        .states
        .iter()
        .enumerate()
        .map(|(s, st)| {
            let ns = stats.self_counts[s] + 1e-2;
            let nf = stats.fwd_counts[s] + 1e-2;
            let total: f64 = (0..c_n).map(|c| stats.comp_counts[s * c_n + c]).sum();
            let weights = (0..c_n)
                .map(|c| (stats.comp_counts[s * c_n + c] + 1e-3) / (total + 1e-3 * c_n as f64))
                .collect();
            let mut means = Vec::with_capacity(c_n);
            let mut variances = Vec::with_capacity(c_n);
            for c in 0..c_n {
                let k = s * c_n + c;
                let nk = stats.comp_counts[k];
                if nk < 1e-6 {
                    means.push(st.emission.means[c].clone());
                    variances.push(st.emission.variances[c].clone());
                    continue;
                }
                let m: Vec<f64> = (0..d).map(|i| stats.comp_s1[k * d + i] / nk).collect();
                let v = (0..d)
                    .map(|i| (stats.comp_s2[k * d + i] / nk - m[i] * m[i]).max(floor[i]))
                    .collect();
                means.push(m);
                variances.push(v);
            }
            HmmState {
                transitions: [ns / (ns + nf), nf / (ns + nf)],
                emission: Mixture {
                    weights,
                    means,
                    variances,
                },
            }
        })
        .collect();
    UnitHmm { states }
}

/// Trains one HMM per gold label by maximum likelihood. Labels come back in
/// sorted order.
pub fn train_supervised_units(
    corpus: &LabeledCorpus,
    cfg: &SubspaceConfig,
    exec: Exec,
) -> Result<Vec<(String, UnitHmm)>> {
    let dim = check_corpus(&corpus.features)?;
    let topo = Topology::new(cfg.n_states, cfg.n_components, dim)?;
    let (_, var) = global_moments(&corpus.features, dim);
    let floor: Vec<f64> = var.iter().map(|v| (1e-3 * v).max(VAR_MIN)).collect();
    let segments = label_segments(corpus)?;
    let jobs: Vec<(String, Vec<FrameSequence>)> = segments.into_iter().collect();
    exec.try_map(&jobs, |(label, segs)| {
        let usable: Vec<&FrameSequence> = segs
            .iter()
            .filter(|s| s.n_frames() >= topo.n_states)
            .collect();
        let frames: usize = usable.iter().map(|s| s.n_frames()).sum();
        if frames < cfg.min_frames.max(topo.n_states) {
            return Err(UwsError::invalid(
                "source unit",
                format!(
                    "{}: unit {label} has {frames} usable frames, need {}",
                    corpus.name, cfg.min_frames
                ),
            ));
        }
        let mut unit = initial_unit(&topo, &usable, &floor);
        for _ in 0..cfg.em_iterations {
            let pl = PhoneLoop {
                topology: topo,
                units: vec![unit.clone()],
                weights: vec![1.0],
                silence_unit: None,
            };
            let params = pl.point_params();
            let mut stats = SuffStats::zeros(topo, 1);
            for seg in &usable {
                stats.add(&accumulate(seg, &params)?.1);
            }
            unit = ml_unit(&unit, &stats, &floor);
        }
        Ok((label.clone(), unit))
    })
}

/// Supervised units of one source as unconstrained vectors.
pub fn source_params(
    corpus: &LabeledCorpus,
    cfg: &SubspaceConfig,
    exec: Exec,
) -> Result<SourceParams> {
    let units = train_supervised_units(corpus, cfg, exec)?;
    Ok(SourceParams {
        name: corpus.name.clone(),
        labels: units
            .iter()
            .map(|(l, _)| format!("{}:{l}", corpus.name))
            .collect(),
        rows: units.iter().map(|(_, u)| encode_params(u)).collect(),
    })
}

fn rows_matrix(rows: &[&Vec<f64>]) -> DMatrix<f64> {
    let p = rows[0].len();
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

/// Principal directions of `rows`: returns `(W, b, E)` with `W` of shape
/// `P x dim`, unit-variance scores `E` (`n x dim`) and `Y ~ E W^T + b`.
fn pca(rows: &[&Vec<f64>], dim: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let y = rows_matrix(rows);
    let (n, p) = (y.nrows(), y.ncols());
    let mean = DVector::from_iterator(p, (0..p).map(|j| y.column(j).mean()));
    let mut yc = y.clone();
    for mut r in yc.row_iter_mut() {
        r -= mean.transpose();
    }
    let mut w = DMatrix::zeros(p, dim);
    let mut e = DMatrix::zeros(n, dim);
    if dim == 0 {
        return (w, mean, e);
    }
    let scale = (n as f64).sqrt();
    if n <= p {
        let eig = (&yc * yc.transpose()).symmetric_eigen();
        let order = descending(eig.eigenvalues.as_slice());
        let top = eig.eigenvalues[order[0]].max(0.0);
        for (col, &i) in order.iter().take(dim).enumerate() {
            if eig.eigenvalues[i] <= 1e-20 * top.max(1.0) {
                break;
            }
            let u = eig.eigenvectors.column(i);
            w.set_column(col, &(yc.transpose() * u / scale));
            e.set_column(col, &(u * scale));
        }
    } else {
        let eig = (yc.transpose() * &yc).symmetric_eigen();
        let order = descending(eig.eigenvalues.as_slice());
        let top = eig.eigenvalues[order[0]].max(0.0);
        for (col, &i) in order.iter().take(dim).enumerate() {
            let ev = eig.eigenvalues[i];
            if ev <= 1e-20 * top.max(1.0) {
                break;
            }
            let v = eig.eigenvectors.column(i);
            let sv = ev.sqrt();
            w.set_column(col, &(v * (sv / scale)));
            e.set_column(col, &(&yc * v * (scale / sv)));
        }
    }
    (w, mean, e)
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    order
}

fn relative_error(rows: &[&Vec<f64>], recon: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (y, r) in rows.iter().zip(recon) {
        num += crate::mathx::squared_distance(y, r);
        den += crate::mathx::dot(y, y);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Fits a subspace to known unconstrained unit vectors.
pub fn fit_subspace_from_params(
    topology: Topology,
    sources: &[SourceParams],
    embedding_dim: usize,
) -> Result<Subspace> {
    let rows: Vec<&Vec<f64>> = sources.iter().flat_map(|s| &s.rows).collect();
    if rows.len() < 2 {
        return Err(UwsError::invalid(
            "subspace",
            "needs at least two source units",
        ));
    }
    let p = topology.param_len();
    if let Some(bad) = rows.iter().find(|r| r.len() != p) {
        return Err(UwsError::dim(
            None,
            format!("source vector has {} entries, expected {p}", bad.len()),
        ));
    }
    let (w, b, e) = pca(&rows, embedding_dim);
    let mut basis = Vec::with_capacity(p * embedding_dim);
    for r in 0..p {
        basis.extend(w.row(r).iter());
    }
    let mut sub = Subspace {
        topology,
        embedding_dim,
        basis,
        offset: b.iter().copied().collect(),
        source_units: sources
            .iter()
            .flat_map(|s| s.labels.iter().cloned())
            .collect(),
        source_embeddings: e.row_iter().map(|r| r.iter().copied().collect()).collect(),
        reconstruction_error: 0.0,
    };
    let recon: Vec<Vec<f64>> = sub.source_embeddings.iter().map(|e| sub.raw(e)).collect();
    sub.reconstruction_error = relative_error(&rows, &recon);
    Ok(sub)
}

fn check_sources(sources: &[LabeledCorpus]) -> Result<Topology> {
    let first = sources
        .first()
        .ok_or_else(|| UwsError::invalid("subspace", "needs at least one source corpus"))?;
    let dim = check_corpus(&first.features)?;
    for s in sources {
        if check_corpus(&s.features)? != dim {
            return Err(UwsError::dim(
                None,
                format!("source {} has a different feature dimension", s.name),
            ));
        }
    }
    Ok(Topology::new(1, 1, dim)?)
}

/// Trains supervised units on every source and fits a shared subspace.
pub fn fit_subspace(
    sources: &[LabeledCorpus],
    cfg: &SubspaceConfig,
    exec: Exec,
) -> Result<Subspace> {
    let dim = check_sources(sources)?.dim;
    let topo = Topology::new(cfg.n_states, cfg.n_components, dim)?;
    let params = sources
        .iter()
        .map(|s| source_params(s, cfg, exec))
        .collect::<Result<Vec<_>>>()?;
    let sub = fit_subspace_from_params(topo, &params, cfg.embedding_dim)?;
    log::info!(
        "subspace reconstruction error {:.3e}",
        sub.reconstruction_error
    );
    Ok(sub)
}

/// Trains supervised units per source language and fits templates plus
/// language embeddings.
pub fn fit_hier_subspace(
    languages: &[LabeledCorpus],
    cfg: &SubspaceConfig,
    exec: Exec,
) -> Result<HierSubspace> {
    if cfg.language_dim > languages.len() {
        return Err(UwsError::invalid(
            "hierarchical subspace",
            format!(
                "language dimension {} exceeds {} source languages",
                cfg.language_dim,
                languages.len()
            ),
        ));
    }
    let dim = check_sources(languages)?.dim;
    let topo = Topology::new(cfg.n_states, cfg.n_components, dim)?;
    let params = languages
        .iter()
        .map(|s| source_params(s, cfg, exec))
        .collect::<Result<Vec<_>>>()?;
    fit_hier_from_params(topo, &params, cfg)
}

const RIDGE: f64 = 1e-8;

/// Alternating least squares over templates, unit embeddings and language
/// embeddings, starting from a pooled principal-component fit.
pub fn fit_hier_from_params(
    topology: Topology,
    languages: &[SourceParams],
    cfg: &SubspaceConfig,
) -> Result<HierSubspace> {
    let n_lang = languages.len();
    let k_dim = cfg.language_dim;
    let e_dim = cfg.embedding_dim;
    if n_lang < 2 {
        return Err(UwsError::invalid(
            "hierarchical subspace",
            "needs at least two source languages",
        ));
    }
    if k_dim > n_lang {
        return Err(UwsError::invalid(
            "hierarchical subspace",
            format!("language dimension {k_dim} exceeds {n_lang} source languages"),
        ));
    }
    let pooled = fit_subspace_from_params(topology, languages, e_dim)?;
    let p = topology.param_len();
    let names: Vec<String> = languages.iter().map(|l| l.name.clone()).collect();
    if k_dim == 0 {
        return Ok(HierSubspace {
            topology,
            embedding_dim: e_dim,
            templates: vec![pooled.basis.clone()],
            template_offsets: vec![pooled.offset.clone()],
            languages: names,
            language_embeddings: vec![Vec::new(); n_lang],
            reconstruction_error: pooled.reconstruction_error,
        });
    }

    let ys: Vec<Vec<DVector<f64>>> = languages
        .iter()
        .map(|l| {
            l.rows
                .iter()
                .map(|r| DVector::from_column_slice(r))
                .collect()
        })
        .collect();
    let mut es: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n_lang);
    let mut idx = 0;
    for l in languages {
        es.push(
            (0..l.rows.len())
                .map(|_| {
                    let e = DVector::from_column_slice(&pooled.source_embeddings[idx]);
                    idx += 1;
                    e
                })
                .collect(),
        );
    }
    let mut ms: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, e_dim); k_dim + 1];
    let mut bs: Vec<DVector<f64>> = vec![DVector::zeros(p); k_dim + 1];
    ms[0] = pooled.basis_matrix();
    bs[0] = DVector::from_column_slice(&pooled.offset);

    // language offsets from the mean pooled residual of each language
    let mut d = DMatrix::zeros(n_lang, p);
    for l in 0..n_lang {
        let mut acc = DVector::zeros(p);
        for (y, e) in ys[l].iter().zip(&es[l]) {
            acc += y - (&ms[0] * e + &bs[0]);
        }
        d.set_row(l, &(acc / ys[l].len() as f64).transpose());
    }
    let mut alphas: Vec<DVector<f64>> = vec![DVector::zeros(k_dim); n_lang];
    {
        let svd = d.clone().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|a, b| sv[*b].total_cmp(&sv[*a]).then(a.cmp(b)));
        let scale_y = ys
            .iter()
            .flatten()
            .map(|y| y.norm_squared())
            .sum::<f64>()
            .sqrt()
            .max(1.0);
        let root = (n_lang as f64).sqrt();
        for (k, &i) in order.iter().take(k_dim).enumerate() {
            if sv[i] <= 1e-9 * scale_y {
                break;
            }
            bs[k + 1] = vt.row(i).transpose() * (sv[i] / root);
            for l in 0..n_lang {
                alphas[l][k] = u[(l, i)] * root;
            }
        }
    }

    let objective = |ms: &[DMatrix<f64>],
                     bs: &[DVector<f64>],
                     es: &[Vec<DVector<f64>>],
                     alphas: &[DVector<f64>]| {
        let mut sse = 0.0;
        let mut reg = 0.0;
        for l in 0..n_lang {
            let (w, b) = combine(ms, bs, &alphas[l]);
            for (y, e) in ys[l].iter().zip(&es[l]) {
                sse += (y - (&w * e + &b)).norm_squared();
                reg += e.norm_squared();
            }
            reg += alphas[l].norm_squared();
        }
        for (m, b) in ms.iter().zip(bs) {
            reg += m.norm_squared() + b.norm_squared();
        }
        (sse, sse + RIDGE * reg)
    };

    let (_, mut prev) = objective(&ms, &bs, &es, &alphas);
    for it in 0..cfg.max_iterations {
        // templates
        let f = (k_dim + 1) * (e_dim + 1);
        let mut gram = DMatrix::identity(f, f) * RIDGE;
        let mut cross = DMatrix::zeros(p, f);
        for l in 0..n_lang {
            let abar: Vec<f64> = std::iter::once(1.0)
                .chain(alphas[l].iter().copied())
                .collect();
            for (y, e) in ys[l].iter().zip(&es[l]) {
                let ebar: Vec<f64> = e.iter().copied().chain(std::iter::once(1.0)).collect();
                let phi = DVector::from_iterator(
                    f,
                    abar.iter().flat_map(|a| ebar.iter().map(move |v| a * v)),
                );
                gram += &phi * phi.transpose();
                cross += y * phi.transpose();
            }
        }
        let theta = solve_spd(&gram, &cross.transpose()).transpose();
        for k in 0..=k_dim {
            let base = k * (e_dim + 1);
            ms[k] = theta.columns(base, e_dim).into_owned();
            bs[k] = theta.column(base + e_dim).into_owned();
        }
        // unit embeddings
        for l in 0..n_lang {
            let (w, b) = combine(&ms, &bs, &alphas[l]);
            let lhs = w.transpose() * &w + DMatrix::identity(e_dim, e_dim) * RIDGE;
            for (y, e) in ys[l].iter().zip(es[l].iter_mut()) {
                let rhs = w.transpose() * (y - &b);
                *e = solve_spd(&lhs, &DMatrix::from_column_slice(e_dim, 1, rhs.as_slice()))
                    .column(0)
                    .into_owned();
            }
        }
        // language embeddings
        for l in 0..n_lang {
            let mut lhs = DMatrix::identity(k_dim, k_dim) * RIDGE;
            let mut rhs = DVector::zeros(k_dim);
            for (y, e) in ys[l].iter().zip(&es[l]) {
                let r = y - (&ms[0] * e + &bs[0]);
                let mut a = DMatrix::zeros(p, k_dim);
                for k in 0..k_dim {
                    a.set_column(k, &(&ms[k + 1] * e + &bs[k + 1]));
                }
                lhs += a.transpose() * &a;
                rhs += a.transpose() * r;
            }
            alphas[l] = solve_spd(&lhs, &DMatrix::from_column_slice(k_dim, 1, rhs.as_slice()))
                .column(0)
                .into_owned();
        }
        let (_, obj) = objective(&ms, &bs, &es, &alphas);
        if !obj.is_finite() {
            return Err(UwsError::Numerical(format!(
                "template fit diverged at iteration {it}"
            )));
        }
        let done = prev - obj <= cfg.tolerance * prev.abs();
        log::debug!("template fit iteration {it}: objective {obj:.6e}");
        prev = obj;
        if done {
            break;
        }
    }

    let (sse, _) = objective(&ms, &bs, &es, &alphas);
    let total: f64 = ys.iter().flatten().map(|y| y.norm_squared()).sum();
    let to_rows = |m: &DMatrix<f64>| {
        (0..p)
            .flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>())
            .collect()
    };
    Ok(HierSubspace {
        topology,
        embedding_dim: e_dim,
        templates: ms.iter().map(to_rows).collect(),
        template_offsets: bs.iter().map(|b| b.iter().copied().collect()).collect(),
        languages: names,
        language_embeddings: alphas.iter().map(|a| a.iter().copied().collect()).collect(),
        reconstruction_error: if total > 0.0 {
            (sse / total).sqrt()
        } else {
            sse.sqrt()
        },
    })
}

fn combine(
    ms: &[DMatrix<f64>],
    bs: &[DVector<f64>],
    alpha: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut w = ms[0].clone();
    let mut b = bs[0].clone();
    for (k, a) in alpha.iter().enumerate() {
        w += &ms[k + 1] * *a;
        b += &bs[k + 1] * *a;
    }
    (w, b)
}
