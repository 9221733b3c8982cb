//! Model parameters and forward propagation.
//!
//! The network maps an input index (a sample id, or a class id in supervised
//! mode) to a per-index Gaussian in a `k`-dimensional latent space, draws a
//! latent point with the reparameterization `z = mu + exp(logvar / 2) * eps`,
//! and decodes it through `l` ReLU layers and one linear output layer.
//!
//! The input layer is never materialized: multiplying the mean/log-variance
//! weight matrices by a one-hot vector selects one column, so both are stored
//! as `k x m` tables and indexed directly.
//!
//! Batched activations are stored one sample per column (`width x batch`).

use crate::error::{Error, Result};
use crate::matrix::{matmul, DenseMatrix};
use crate::rng::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One embedding column per sample.
    Unsupervised,
    /// One embedding column per class.
    Supervised,
}

/// Stop when the epoch loss changes by less than `rel_tol` (relative) over
/// the last `window` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patience {
    pub window: usize,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on epochs; training may stop earlier under `patience`.
    pub epochs: usize,
    pub mode: Mode,
    pub seed: u64,
    pub patience: Option<Patience>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_widths: vec![64, 128],
            beta: 1e-3,
            gamma1: 1e-5,
            gamma2: 1e-5,
            gamma3: 0.0,
            gamma4: 0.0,
            learning_rate: 1e-2,
            batch_size: 64,
            epochs: 200,
            mode: Mode::Unsupervised,
            seed: 0,
            patience: Some(Patience {
                window: 10,
                rel_tol: 1e-4,
            }),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 {
            return bad("latent dimension must be at least 1".into());
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return bad(format!(
                "need at least one hidden layer with positive width, got {:?}",
                self.hidden_widths
            ));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("gamma4", self.gamma4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(p) = self.patience {
            if p.window == 0 || p.rel_tol.is_nan() || p.rel_tol < 0.0 {
                return bad(format!("invalid patience {p:?}"));
            }
        }
        Ok(())
    }
}

/// Every trainable array, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mode: Mode,
    /// `k x m`
    pub mu_table: DenseMatrix,
    /// `k x m`
    pub logvar_table: DenseMatrix,
    pub mu_bias: Vec<f64>,
    pub logvar_bias: Vec<f64>,
    /// Layer `j` is `width_j x width_{j-1}` with `width_0 = k`.
    pub hidden_weights: Vec<DenseMatrix>,
    pub hidden_biases: Vec<Vec<f64>>,
    /// `d x width_l`
    pub rec_weights: DenseMatrix,
    pub rec_bias: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters with the given shapes.
    pub fn zeros(mode: Mode, k: usize, m: usize, hidden: &[usize], d: usize) -> Self {
        let mut fan_in = k;
        let mut hidden_weights = Vec::with_capacity(hidden.len());
        let mut hidden_biases = Vec::with_capacity(hidden.len());
        for &w in hidden {
            hidden_weights.push(DenseMatrix::zeros(w, fan_in));
            hidden_biases.push(vec![0.0; w]);
            fan_in = w;
        }
        Self {
            mode,
            mu_table: DenseMatrix::zeros(k, m),
            logvar_table: DenseMatrix::zeros(k, m),
            mu_bias: vec![0.0; k],
            logvar_bias: vec![0.0; k],
            hidden_weights,
            hidden_biases,
            rec_weights: DenseMatrix::zeros(d, fan_in),
            rec_bias: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.mode,
            self.latent_dim(),
            self.n_columns(),
            &self.hidden_widths(),
            self.output_dim(),
        )
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_table.rows()
    }

    /// Number of embedding columns (`n` or `c`).
    pub fn n_columns(&self) -> usize {
        self.mu_table.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.rec_weights.rows()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden_weights.iter().map(DenseMatrix::rows).collect()
    }

    /// Flat views of every array in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.mu_table.as_slice(),
            self.logvar_table.as_slice(),
            &self.mu_bias,
            &self.logvar_bias,
        ];
        out.extend(self.hidden_weights.iter().map(DenseMatrix::as_slice));
        out.extend(self.hidden_biases.iter().map(Vec::as_slice));
        out.push(self.rec_weights.as_slice());
        out.push(&self.rec_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.mu_table.as_mut_slice(),
            self.logvar_table.as_mut_slice(),
            &mut self.mu_bias,
            &mut self.logvar_bias,
        ];
        out.extend(
            self.hidden_weights
                .iter_mut()
                .map(DenseMatrix::as_mut_slice),
        );
        out.extend(self.hidden_biases.iter_mut().map(Vec::as_mut_slice));
        out.push(self.rec_weights.as_mut_slice());
        out.push(&mut self.rec_bias);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks that every array agrees with the table/decoder dimensions.
    pub fn check_shapes(&self) -> Result<()> {
        let k = self.latent_dim();
        let m = self.n_columns();
        let err = |what: &str| Err(Error::Consistency(format!("parameter shape: {what}")));
        if k == 0 || m == 0 || self.hidden_weights.is_empty() {
            return err("empty latent, table or hidden stack");
        }
        if self.logvar_table.shape() != (k, m) {
            return err("logvar table differs from mean table");
        }
        if self.mu_bias.len() != k || self.logvar_bias.len() != k {
            return err("parametric bias length");
        }
        if self.hidden_biases.len() != self.hidden_weights.len() {
            return err("hidden bias count");
        }
        let mut fan_in = k;
        for (w, b) in self.hidden_weights.iter().zip(&self.hidden_biases) {
            if w.cols() != fan_in || b.len() != w.rows() || w.rows() == 0 {
                return err("hidden layer chain");
            }
            fan_in = w.rows();
        }
        if self.rec_weights.cols() != fan_in || self.rec_bias.len() != self.rec_weights.rows() {
            return err("reconstruction layer");
        }
        Ok(())
    }
}

/// Cached activations of one batch, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Embedding column used by each batch entry.
    pub columns: Vec<usize>,
    pub mu: DenseMatrix,
    pub logvar: DenseMatrix,
    pub eps: DenseMatrix,
    pub z: DenseMatrix,
    pub hidden_pre: Vec<DenseMatrix>,
    pub hidden_post: Vec<DenseMatrix>,
    pub recon: DenseMatrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.columns.len()
    }
}

fn gaussian_scaled(rng: &mut RandomSource, rows: usize, cols: usize, sd: f64) -> DenseMatrix {
    let mut m = rng.gaussian_matrix(rows, cols);
    m.scale(sd);
    m
}

/// Standard deviation of the initial mean table.
pub const MU_INIT_SD: f64 = 0.1;

/// Random initialization.
///
/// Draw order: mean table `N(0, 0.01)`, then each hidden layer with
/// `N(0, 2 / fan_in)`, then the reconstruction layer with `N(0, 1 / fan_in)`.
/// Log-variances and all biases start at zero.
pub fn init_params(
    config: &ModelConfig,
    n_columns: usize,
    d: usize,
    rng: &mut RandomSource,
) -> Result<ModelParams> {
    config.validate()?;
    if n_columns == 0 || d == 0 {
        return Err(Error::arg(format!(
            "need at least one column and one feature, got m={n_columns}, d={d}"
        )));
    }
    let k = config.latent_dim;
    let mut p = ModelParams::zeros(config.mode, k, n_columns, &config.hidden_widths, d);
    p.mu_table = gaussian_scaled(rng, k, n_columns, MU_INIT_SD);
    let mut fan_in = k;
    for w in p.hidden_weights.iter_mut() {
        *w = gaussian_scaled(rng, w.rows(), fan_in, (2.0 / fan_in as f64).sqrt());
        fan_in = w.rows();
    }
    p.rec_weights = gaussian_scaled(rng, d, fan_in, (1.0 / fan_in as f64).sqrt());
    Ok(p)
}

/// Mean and log-variance for one input index.
pub fn encode(params: &ModelParams, index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = params.n_columns();
    if index >= m {
        return Err(Error::arg(format!(
            "index {index} out of range for {m} columns"
        )));
    }
    let mu = params
        .mu_table
        .col(index)
        .iter()
        .zip(&params.mu_bias)
        .map(|(w, b)| w + b)
        .collect();
    let logvar = params
        .logvar_table
        .col(index)
        .iter()
        .zip(&params.logvar_bias)
        .map(|(w, b)| w + b)
        .collect();
    Ok((mu, logvar))
}

pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    debug_assert!(mu.len() == logvar.len() && mu.len() == eps.len());
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect()
}

/// Decoder activations for a `k x B` latent batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub hidden_pre: Vec<DenseMatrix>,
    pub hidden_post: Vec<DenseMatrix>,
    pub recon: DenseMatrix,
}

pub fn decode_batch(params: &ModelParams, z: &DenseMatrix) -> Result<DecodeTrace> {
    let mut hidden_pre = Vec::with_capacity(params.hidden_weights.len());
    let mut hidden_post: Vec<DenseMatrix> = Vec::with_capacity(params.hidden_weights.len());
    for (w, b) in params.hidden_weights.iter().zip(&params.hidden_biases) {
        let input = hidden_post.last().unwrap_or(z);
        let mut a = matmul(w, input)?;
        a.add_row_bias(b);
        hidden_post.push(a.map(|v| v.max(0.0)));
        hidden_pre.push(a);
    }
    let last = hidden_post.last().expect("at least one hidden layer");
    let mut recon = matmul(&params.rec_weights, last)?;
    recon.add_row_bias(&params.rec_bias);
    Ok(DecodeTrace {
        hidden_pre,
        hidden_post,
        recon,
    })
}

/// Decodes a single latent point to a `d`-vector.
pub fn decode(params: &ModelParams, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != params.latent_dim() {
        return Err(Error::Shape {
            op: "decode",
            left: (params.latent_dim(), 1),
            right: (z.len(), 1),
        });
    }
    Ok(decode_batch(params, &DenseMatrix::column(z))?
        .recon
        .into_vec())
}

/// Full forward pass with caller-supplied noise (`k x B`).
pub fn forward_with_noise(
    params: &ModelParams,
    columns: &[usize],
    eps: DenseMatrix,
) -> Result<ForwardTrace> {
    let k = params.latent_dim();
    let b = columns.len();
    if eps.shape() != (k, b) {
        return Err(Error::Shape {
            op: "forward noise",
            left: (k, b),
            right: eps.shape(),
        });
    }
    let mut mu = DenseMatrix::zeros(k, b);
    let mut logvar = DenseMatrix::zeros(k, b);
    for (j, &col) in columns.iter().enumerate() {
        let (m, lv) = encode(params, col)?;
        mu.set_col(j, &m);
        logvar.set_col(j, &lv);
    }
    let mut z = DenseMatrix::zeros(k, b);
    for j in 0..b {
        z.set_col(j, &reparameterize(&mu.col(j), &logvar.col(j), &eps.col(j)));
    }
    let dec = decode_batch(params, &z)?;
    Ok(ForwardTrace {
        columns: columns.to_vec(),
        mu,
        logvar,
        eps,
        z,
        hidden_pre: dec.hidden_pre,
        hidden_post: dec.hidden_post,
        recon: dec.recon,
    })
}

/// Forward pass drawing fresh `k x B` noise from `rng`.
pub fn forward_batch(
    params: &ModelParams,
    columns: &[usize],
    rng: &mut RandomSource,
) -> Result<ForwardTrace> {
    let eps = rng.gaussian_matrix(params.latent_dim(), columns.len());
    forward_with_noise(params, columns, eps)
}

/// Per-sample embedding means as an `m x k` matrix (row `i` is sample `i`).
pub fn embedding_table(params: &ModelParams) -> DenseMatrix {
    let (k, m) = params.mu_table.shape();
    let mut out = DenseMatrix::zeros(m, k);
    for i in 0..m {
        for (r, &b) in params.mu_bias.iter().enumerate() {
            out.set(i, r, params.mu_table.get(r, i) + b);
        }
    }
    out
}

/// Low-dimensional embedding of a trained unsupervised model: the latent mean
/// of every sample, without noise.
pub fn embedding(params: &ModelParams, n_samples: usize) -> Result<DenseMatrix> {
    if params.mode != Mode::Unsupervised {
        return Err(Error::Unsupported(
            "supervised models hold one Gaussian per class, not a per-sample embedding".into(),
        ));
    }
    if params.n_columns() != n_samples {
        return Err(Error::Consistency(format!(
            "model has {} embedding columns but dataset has {n_samples} samples",
            params.n_columns()
        )));
    }
    Ok(embedding_table(params))
}
