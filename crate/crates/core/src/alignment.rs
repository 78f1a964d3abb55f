//! Object–token alignment, curriculum-aware damping and the in-batch
//! contrastive loss with its analytic gradient.
//!
//! For an image with object embeddings `e_o` and a caption with token
//! embeddings `e_j`:
//!
//! ```text
//! s[o][j]  = <e_o, e_j>
//! a[o][j]  = softmax over o of s[., j]
//! a'[o][j] = a[o][j] * exp(-m_j * t / T)       (m_j frozen, from a prior model)
//! G        = (1 / n_C) * sum_j sum_o a'[o][j] * s[o][j]
//! ```
//!
//! The damping factor multiplies the attention only; it is not renormalized
//! over objects, otherwise it would cancel.
//!
//! Loss for positive pair b of a batch, with `G[i][c]` the score of image i
//! against caption c:
//!
//! ```text
//! l_b = -G[b][b] + logsumexp({G[b][c] : all c} ∪ {G[i][b] : i != b})
//! ```
//!
//! and the batch loss is the mean of `l_b`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::model::{encode_caption, encode_objects, ModelParams, ParamSnapshot};
use crate::numerics::{log_sum_exp, stable_softmax, DenseMatrix};

/// Which loss variant drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossMode {
    /// Undamped contrastive loss.
    Plain,
    /// Damping from the model of the previous iteration.
    Cr,
    /// Damping from the model at the end of the previous phase.
    Cp,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Plain, LossMode::Cr, LossMode::Cp];

    pub fn uses_prior(self) -> bool {
        !matches!(self, LossMode::Plain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Plain => "plain",
            LossMode::Cr => "cr",
            LossMode::Cp => "cp",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" | "l" => Ok(LossMode::Plain),
            "cr" | "l_cr" => Ok(LossMode::Cr),
            "cp" | "l_cp" => Ok(LossMode::Cp),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss mode {other:?} (expected plain, cr or cp)"
            ))),
        }
    }
}

/// Position `t` of `total` iterations; the damping exponent scales with `t / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    t: usize,
    total: usize,
}

impl Schedule {
    pub fn new(t: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidConfig(
                "schedule total must be positive".into(),
            ));
        }
        if t > total {
            return Err(Error::ScheduleOutOfRange { t, total });
        }
        Ok(Self { t, total })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn fraction(&self) -> f64 {
        self.t as f64 / self.total as f64
    }
}

/// Per-token maximum attention under a frozen prior model.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingVector(Vec<f64>);

impl DampingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "damping values must be finite and non-negative".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `exp(-m_j * t / T)` for every token.
    pub fn factors(&self, sched: Schedule) -> Vec<f64> {
        let frac = sched.fraction();
        self.0.iter().map(|m| (-m * frac).exp()).collect()
    }
}

/// Everything computed for one image–caption pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTensors {
    pub scores: DenseMatrix,
    pub attention: DenseMatrix,
    pub damped_attention: DenseMatrix,
    pub global: f64,
}

/// `scores[o][j] = <obj_emb[o], tok_emb[j]>`.
pub fn pairwise_scores(obj_emb: &DenseMatrix, tok_emb: &DenseMatrix) -> Result<DenseMatrix> {
    obj_emb.matmul_transposed(tok_emb)
}

/// Softmax over objects, independently for each token column.
pub fn token_attention(scores: &DenseMatrix) -> Result<DenseMatrix> {
    if !scores.is_finite() {
        return Err(Error::NonFinite("alignment scores"));
    }
    let (n_o, n_c) = scores.shape();
    let mut out = DenseMatrix::zeros(n_o, n_c);
    for j in 0..n_c {
        let column = stable_softmax(&scores.column(j))?;
        for (o, v) in column.into_iter().enumerate() {
            out.set(o, j, v);
        }
    }
    Ok(out)
}

/// `(1 / n_C) Σ_j Σ_o attention[o][j] * scores[o][j]`.
pub fn global_alignment(scores: &DenseMatrix, attention: &DenseMatrix) -> Result<f64> {
    if scores.shape() != attention.shape() {
        return Err(Error::DimensionMismatch {
            context: "attention shape",
            expected: scores.as_slice().len(),
            actual: attention.as_slice().len(),
        });
    }
    let (n_o, n_c) = scores.shape();
    if n_c == 0 {
        return Err(Error::EmptyInput("caption tokens"));
    }
    let mut total = 0.0;
    for j in 0..n_c {
        for o in 0..n_o {
            total += attention.get(o, j) * scores.get(o, j);
        }
    }
    Ok(total / n_c as f64)
}

fn column_max(attention: &DenseMatrix) -> Vec<f64> {
    (0..attention.cols())
        .map(|j| {
            (0..attention.rows())
                .map(|o| attention.get(o, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Damping vector from already-encoded prior embeddings.
fn max_alignment(prior_obj: &DenseMatrix, prior_tok: &DenseMatrix) -> Result<DampingVector> {
    let attention = token_attention(&pairwise_scores(prior_obj, prior_tok)?)?;
    Ok(DampingVector(column_max(&attention)))
}

/// `m_j = max_o â[o][j]` with `â` computed under the frozen prior parameters.
pub fn prior_max_alignment(prior: &ParamSnapshot, sample: &EncodedSample) -> Result<DampingVector> {
    prior_max_alignment_pair(prior, &sample.features, &sample.token_ids)
}

/// As [`prior_max_alignment`] for an arbitrary image/caption combination.
pub fn prior_max_alignment_pair(
    prior: &ParamSnapshot,
    features: &DenseMatrix,
    token_ids: &[usize],
) -> Result<DampingVector> {
    let obj = encode_objects(features, prior.params())?;
    let tok = encode_caption(token_ids, prior.params())?;
    max_alignment(&obj, &tok)
}

fn scale_columns(attention: &DenseMatrix, factors: &[f64]) -> DenseMatrix {
    let mut out = attention.clone();
    for o in 0..out.rows() {
        for (v, f) in out.row_mut(o).iter_mut().zip(factors) {
            *v *= f;
        }
    }
    out
}

/// `a'[o][j] = a[o][j] * exp(-m_j * t / T)`; columns sum to the factor, not to one.
pub fn damped_attention(
    scores: &DenseMatrix,
    m: &DampingVector,
    sched: Schedule,
) -> Result<DenseMatrix> {
    if m.len() != scores.cols() {
        return Err(Error::DimensionMismatch {
            context: "damping vector length",
            expected: scores.cols(),
            actual: m.len(),
        });
    }
    if sched.t > sched.total {
        return Err(Error::ScheduleOutOfRange {
            t: sched.t,
            total: sched.total,
        });
    }
    let attention = token_attention(scores)?;
    Ok(scale_columns(&attention, &m.factors(sched)))
}

/// Full forward pass for one pair. Without damping, `damped_attention == attention`.
pub fn align(
    obj_emb: &DenseMatrix,
    tok_emb: &DenseMatrix,
    damping: Option<(&DampingVector, Schedule)>,
) -> Result<AlignmentTensors> {
    let scores = pairwise_scores(obj_emb, tok_emb)?;
    let attention = token_attention(&scores)?;
    let damped_attention = match damping {
        Some((m, sched)) => {
            if m.len() != scores.cols() {
                return Err(Error::DimensionMismatch {
                    context: "damping vector length",
                    expected: scores.cols(),
                    actual: m.len(),
                });
            }
            scale_columns(&attention, &m.factors(sched))
        }
        None => attention.clone(),
    };
    let global = global_alignment(&scores, &damped_attention)?;
    Ok(AlignmentTensors {
        scores,
        attention,
        damped_attention,
        global,
    })
}

/// Accumulates `upstream * dG/ds` back into object and token embedding grads.
///
/// With `f_j` the damping factor and `g_j = Σ_o a[o][j] s[o][j]`:
/// `dG/ds[o][j] = f_j / n_C * a[o][j] * (1 + s[o][j] - g_j)`.
fn backprop_pair(
    tensors: &AlignmentTensors,
    factors: Option<&[f64]>,
    upstream: f64,
    obj_emb: &DenseMatrix,
    tok_emb: &DenseMatrix,
    d_obj: &mut DenseMatrix,
    d_tok: &mut DenseMatrix,
) {
    let (n_o, n_c) = tensors.scores.shape();
    let inv_nc = 1.0 / n_c as f64;
    for j in 0..n_c {
        let mut g = 0.0;
        for o in 0..n_o {
            g += tensors.attention.get(o, j) * tensors.scores.get(o, j);
        }
        let f = factors.map_or(1.0, |fs| fs[j]);
        for o in 0..n_o {
            let a = tensors.attention.get(o, j);
            let s = tensors.scores.get(o, j);
            let ds = upstream * f * inv_nc * a * (1.0 + s - g);
            if ds == 0.0 {
                continue;
            }
            for (acc, t) in d_obj.row_mut(o).iter_mut().zip(tok_emb.row(j)) {
                *acc += ds * t;
            }
            for (acc, e) in d_tok.row_mut(j).iter_mut().zip(obj_emb.row(o)) {
                *acc += ds * e;
            }
        }
    }
}

struct BatchEmbeddings {
    objects: Vec<DenseMatrix>,
    captions: Vec<DenseMatrix>,
}

impl BatchEmbeddings {
    fn encode(batch: &[&EncodedSample], params: &ModelParams) -> Result<Self> {
        let objects = batch
            .iter()
            .map(|s| encode_objects(&s.features, params))
            .collect::<Result<Vec<_>>>()?;
        let captions = batch
            .iter()
            .map(|s| encode_caption(&s.token_ids, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { objects, captions })
    }
}

/// Cross-pair damping vectors, indexed `[image][caption]`, or `None` when
/// damping is inactive for this call.
fn cross_damping(
    batch: &[&EncodedSample],
    prior: Option<&ParamSnapshot>,
    mode: LossMode,
) -> Result<Option<Vec<Vec<DampingVector>>>> {
    let prior = match (mode.uses_prior(), prior) {
        (true, Some(p)) => p,
        _ => return Ok(None),
    };
    let emb = BatchEmbeddings::encode(batch, prior.params())?;
    let mut out = Vec::with_capacity(batch.len());
    for obj in &emb.objects {
        let row = emb
            .captions
            .iter()
            .map(|tok| max_alignment(obj, tok))
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(Some(out))
}

/// Loss and, when `want_grads` is set, its gradient.
#[allow(clippy::needless_range_loop)]
fn batch_objective(
    batch: &[&EncodedSample],
    params: &ModelParams,
    prior: Option<&ParamSnapshot>,
    sched: Schedule,
    mode: LossMode,
    want_grads: bool,
) -> Result<(f64, Option<ModelParams>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let b = batch.len();
    let emb = BatchEmbeddings::encode(batch, params)?;
    let damping = cross_damping(batch, prior, mode)?;

    let mut pairs: Vec<Vec<(AlignmentTensors, Option<Vec<f64>>)>> = Vec::with_capacity(b);
    for i in 0..b {
        let mut row = Vec::with_capacity(b);
        for c in 0..b {
            let m = damping.as_ref().map(|d| &d[i][c]);
            let tensors = align(&emb.objects[i], &emb.captions[c], m.map(|m| (m, sched)))?;
            row.push((tensors, m.map(|m| m.factors(sched))));
        }
        pairs.push(row);
    }
    let global = |i: usize, c: usize| pairs[i][c].0.global;

    // dL/dG, accumulated per positive pair then averaged.
    let mut d_global = vec![vec![0.0; b]; b];
    let mut loss = 0.0;
    let mut terms = Vec::with_capacity(2 * b - 1);
    for p in 0..b {
        terms.clear();
        terms.extend((0..b).map(|c| global(p, c)));
        terms.extend((0..b).filter(|&i| i != p).map(|i| global(i, p)));
        let lse = log_sum_exp(&terms)?;
        loss += lse - global(p, p);
        if want_grads {
            let weights = stable_softmax(&terms)?;
            for (d, w) in d_global[p].iter_mut().zip(&weights[..b]) {
                *d += w;
            }
            for (w, i) in weights[b..].iter().zip((0..b).filter(|&i| i != p)) {
                d_global[i][p] += w;
            }
            d_global[p][p] -= 1.0;
        }
    }
    let inv_b = 1.0 / b as f64;
    loss *= inv_b;

    if !want_grads {
        return Ok((loss, None));
    }

    let dims = params.dims();
    let mut d_obj: Vec<DenseMatrix> = emb
        .objects
        .iter()
        .map(|o| DenseMatrix::zeros(o.rows(), o.cols()))
        .collect();
    let mut d_tok: Vec<DenseMatrix> = emb
        .captions
        .iter()
        .map(|t| DenseMatrix::zeros(t.rows(), t.cols()))
        .collect();
    for i in 0..b {
        for c in 0..b {
            let upstream = d_global[i][c] * inv_b;
            let (tensors, factors) = &pairs[i][c];
            backprop_pair(
                tensors,
                factors.as_deref(),
                upstream,
                &emb.objects[i],
                &emb.captions[c],
                &mut d_obj[i],
                &mut d_tok[c],
            );
        }
    }

    let mut grads = ModelParams::zeros(dims);
    for (sample, d) in batch.iter().zip(&d_obj) {
        // E = X W + 1 bᵀ  ⇒  dW = Xᵀ dE, db = Σ_o dE_o
        let x = &sample.features;
        for o in 0..x.rows() {
            for i in 0..x.cols() {
                let xi = x.get(o, i);
                for (acc, g) in grads.visual_projection.row_mut(i).iter_mut().zip(d.row(o)) {
                    *acc += xi * g;
                }
            }
            for (acc, g) in grads.visual_bias.iter_mut().zip(d.row(o)) {
                *acc += g;
            }
        }
    }
    for (sample, d) in batch.iter().zip(&d_tok) {
        for (j, &id) in sample.token_ids.iter().enumerate() {
            for (acc, g) in grads.text_embeddings.row_mut(id).iter_mut().zip(d.row(j)) {
                *acc += g;
            }
        }
    }
    Ok((loss, Some(grads)))
}

/// Mean in-batch contrastive loss over the positive pairs.
///
/// In `Cr`/`Cp` mode without a prior snapshot the damping factor is 1.
pub fn batch_contrastive_loss(
    batch: &[&EncodedSample],
    params: &ModelParams,
    prior: Option<&ParamSnapshot>,
    sched: Schedule,
    mode: LossMode,
) -> Result<f64> {
    batch_objective(batch, params, prior, sched, mode, false).map(|(l, _)| l)
}

/// Loss plus analytic gradient with respect to every parameter. The prior
/// snapshot is treated as constant.
pub fn batch_loss_gradients(
    batch: &[&EncodedSample],
    params: &ModelParams,
    prior: Option<&ParamSnapshot>,
    sched: Schedule,
    mode: LossMode,
) -> Result<(f64, ModelParams)> {
    let (loss, grads) = batch_objective(batch, params, prior, sched, mode, true)?;
    Ok((loss, grads.expect("gradients requested")))
}
