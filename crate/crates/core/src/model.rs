//! Learnable parameters: a token embedding table and an affine visual projection.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub visual_feat_dim: usize,
}

impl ModelDims {
    pub fn new(vocab_size: usize, embed_dim: usize, visual_feat_dim: usize) -> Result<Self> {
        let dims = Self {
            vocab_size,
            embed_dim,
            visual_feat_dim,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.visual_feat_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "model dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// All learnable state. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `V × d`; row `j` embeds vocabulary token `j`.
    pub text_embeddings: DenseMatrix,
    /// `d_v × d`.
    pub visual_projection: DenseMatrix,
    /// Length `d`.
    pub visual_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            text_embeddings: DenseMatrix::zeros(dims.vocab_size, dims.embed_dim),
            visual_projection: DenseMatrix::zeros(dims.visual_feat_dim, dims.embed_dim),
            visual_bias: vec![0.0; dims.embed_dim],
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.text_embeddings.rows(),
            embed_dim: self.text_embeddings.cols(),
            visual_feat_dim: self.visual_projection.rows(),
        }
    }

    fn check_consistent(&self) -> Result<()> {
        let d = self.text_embeddings.cols();
        if self.visual_projection.cols() != d {
            return Err(Error::DimensionMismatch {
                context: "visual projection width",
                expected: d,
                actual: self.visual_projection.cols(),
            });
        }
        if self.visual_bias.len() != d {
            return Err(Error::DimensionMismatch {
                context: "visual bias length",
                expected: d,
                actual: self.visual_bias.len(),
            });
        }
        self.dims().validate()?;
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.text_embeddings.is_finite()
            && self.visual_projection.is_finite()
            && self.visual_bias.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`; shapes must agree.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.text_embeddings
            .add_scaled(alpha, &other.text_embeddings)?;
        self.visual_projection
            .add_scaled(alpha, &other.visual_projection)?;
        if self.visual_bias.len() != other.visual_bias.len() {
            return Err(Error::DimensionMismatch {
                context: "visual bias length",
                expected: self.visual_bias.len(),
                actual: other.visual_bias.len(),
            });
        }
        for (a, b) in self.visual_bias.iter_mut().zip(&other.visual_bias) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Parameters flattened as text embeddings, projection, bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(self.text_embeddings.as_slice());
        out.extend_from_slice(self.visual_projection.as_slice());
        out.extend_from_slice(&self.visual_bias);
        out
    }

    pub fn len(&self) -> usize {
        self.text_embeddings.as_slice().len()
            + self.visual_projection.as_slice().len()
            + self.visual_bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mutable access to the `i`-th entry of [`flatten`](Self::flatten) order.
    pub fn entry_mut(&mut self, mut i: usize) -> &mut f64 {
        let n_text = self.text_embeddings.as_slice().len();
        if i < n_text {
            return &mut self.text_embeddings.as_mut_slice()[i];
        }
        i -= n_text;
        let n_proj = self.visual_projection.as_slice().len();
        if i < n_proj {
            return &mut self.visual_projection.as_mut_slice()[i];
        }
        &mut self.visual_bias[i - n_proj]
    }
}

/// Deterministic i.i.d. uniform initialization on `[-0.1, 0.1]`.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect()
    };
    let text = draw(dims.vocab_size * dims.embed_dim);
    let proj = draw(dims.visual_feat_dim * dims.embed_dim);
    let bias = draw(dims.embed_dim);
    Ok(ModelParams {
        text_embeddings: DenseMatrix::new(dims.vocab_size, dims.embed_dim, text)?,
        visual_projection: DenseMatrix::new(dims.visual_feat_dim, dims.embed_dim, proj)?,
        visual_bias: bias,
    })
}

/// Projects object features (`n_o × d_v`) into the shared embedding space.
pub fn encode_objects(features: &DenseMatrix, params: &ModelParams) -> Result<DenseMatrix> {
    if features.cols() != params.visual_projection.rows() {
        return Err(Error::DimensionMismatch {
            context: "object feature width",
            expected: params.visual_projection.rows(),
            actual: features.cols(),
        });
    }
    let mut out = features.matmul(&params.visual_projection)?;
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&params.visual_bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Gathers one embedding row per caption token.
pub fn encode_caption(token_ids: &[usize], params: &ModelParams) -> Result<DenseMatrix> {
    if token_ids.is_empty() {
        return Err(Error::EmptyInput("caption tokens"));
    }
    let table = &params.text_embeddings;
    let mut out = DenseMatrix::zeros(token_ids.len(), table.cols());
    for (j, &id) in token_ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: table.rows(),
            });
        }
        out.row_mut(j).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Frozen copy of the parameters at a point in training.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    params: ModelParams,
    iteration: usize,
    phase: usize,
}

impl ParamSnapshot {
    pub fn new(params: &ModelParams, iteration: usize, phase: usize) -> Self {
        Self {
            params: params.clone(),
            iteration,
            phase,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Number of optimizer steps completed when the snapshot was taken.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn phase(&self) -> usize {
        self.phase
    }
}

const CHECKPOINT_FORMAT: &str = "curvl-checkpoint/1";

/// On-disk parameter container. Floats are written in shortest round-trip
/// form, so save followed by load reproduces every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dims: ModelDims,
    pub seed: u64,
    pub iteration: usize,
    pub phase: usize,
    /// Token strings in embedding-row order.
    pub vocabulary: Vec<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        vocabulary: Vec<String>,
        seed: u64,
        iteration: usize,
        phase: usize,
    ) -> Result<Self> {
        params.check_consistent()?;
        if vocabulary.len() != params.dims().vocab_size {
            return Err(Error::DimensionMismatch {
                context: "checkpoint vocabulary",
                expected: params.dims().vocab_size,
                actual: vocabulary.len(),
            });
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.to_string(),
            dims: params.dims(),
            seed,
            iteration,
            phase,
            vocabulary,
            params,
        })
    }

    pub fn to_string_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string_pretty()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::parse(
                path,
                1,
                format!("unsupported checkpoint format {:?}", ckpt.format),
            ));
        }
        ckpt.params.check_consistent()?;
        if ckpt.params.dims() != ckpt.dims {
            return Err(Error::parse(path, 1, "header dims disagree with matrices"));
        }
        if ckpt.vocabulary.len() != ckpt.dims.vocab_size {
            return Err(Error::parse(path, 1, "vocabulary size disagrees with dims"));
        }
        Ok(ckpt)
    }
}
