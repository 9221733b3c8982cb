//! Objective, gradients, optimizer and the epoch loop.
//!
//! Every data-dependent term of the objective is a mean over the batch:
//!
//! ```text
//! recon          = 1/B sum_i |x_i - x~_i|^2
//! kld            = beta/B sum_i KL(N(mu_i, exp(logvar_i)) || N(0, I))
//! weight_reg     = gamma1 sum_j |W_j|_F^2 + gamma2 |W_rec|_F^2
//! activation_reg = 1/B sum_i (gamma3 sum_j |h_ij|^2 + gamma4 |x~_i|^2)
//! ```
//!
//! Embedding tables and biases are not weight-regularized.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{matmul_nt, matmul_tn, DenseMatrix};
use crate::model::{forward_with_noise, init_params, ForwardTrace, Mode, ModelConfig, ModelParams};
use crate::rng::RandomSource;

/// Stream ids for [`RandomSource::derive`] used by [`train`].
pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;

/// Central-difference step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kld: f64,
    pub weight_reg: f64,
    pub activation_reg: f64,
}

impl LossBreakdown {
    fn from_parts(recon: f64, kld: f64, weight_reg: f64, activation_reg: f64) -> Self {
        Self {
            total: recon + kld + weight_reg + activation_reg,
            recon,
            kld,
            weight_reg,
            activation_reg,
        }
    }
}

/// KL divergence of `N(mu, diag(exp(logvar)))` from the standard normal.
pub fn kld_term(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Transposes selected dataset rows into a `d x B` batch.
pub fn gather_batch(x: &DenseMatrix, samples: &[usize]) -> DenseMatrix {
    let d = x.cols();
    let mut out = DenseMatrix::zeros(d, samples.len());
    for (j, &i) in samples.iter().enumerate() {
        for (r, &v) in x.row(i).iter().enumerate() {
            out.set(r, j, v);
        }
    }
    out
}

fn check_batch(trace: &ForwardTrace, x_batch: &DenseMatrix, params: &ModelParams) -> Result<()> {
    let expect = (params.output_dim(), trace.batch_size());
    if x_batch.shape() != expect || trace.recon.shape() != expect {
        return Err(Error::Shape {
            op: "batch",
            left: trace.recon.shape(),
            right: x_batch.shape(),
        });
    }
    if trace.hidden_post.len() != params.hidden_weights.len()
        || trace.mu.rows() != params.latent_dim()
    {
        return Err(Error::Shape {
            op: "stale trace",
            left: (trace.mu.rows(), trace.hidden_post.len()),
            right: (params.latent_dim(), params.hidden_weights.len()),
        });
    }
    Ok(())
}

pub fn loss(
    trace: &ForwardTrace,
    x_batch: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<LossBreakdown> {
    check_batch(trace, x_batch, params)?;
    let b = trace.batch_size() as f64;
    let recon = trace
        .recon
        .as_slice()
        .iter()
        .zip(x_batch.as_slice())
        .map(|(r, x)| (x - r) * (x - r))
        .sum::<f64>()
        / b;
    let kld = config.beta
        * (0..trace.batch_size())
            .map(|j| kld_term(&trace.mu.col(j), &trace.logvar.col(j)))
            .sum::<f64>()
        / b;
    let weight_reg = config.gamma1
        * params
            .hidden_weights
            .iter()
            .map(DenseMatrix::frobenius_sq)
            .sum::<f64>()
        + config.gamma2 * params.rec_weights.frobenius_sq();
    let activation_reg = (config.gamma3
        * trace
            .hidden_post
            .iter()
            .map(DenseMatrix::frobenius_sq)
            .sum::<f64>()
        + config.gamma4 * trace.recon.frobenius_sq())
        / b;
    Ok(LossBreakdown::from_parts(
        recon,
        kld,
        weight_reg,
        activation_reg,
    ))
}

/// Gradient of the objective, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: ModelParams,
    /// Sorted, de-duplicated embedding columns the batch touched.
    pub touched_columns: Vec<usize>,
}

fn touched(columns: &[usize]) -> Vec<usize> {
    columns
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Exact gradient of [`loss`] by backpropagation through the trace.
pub fn backward(
    trace: &ForwardTrace,
    x_batch: &DenseMatrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Gradients> {
    check_batch(trace, x_batch, params)?;
    let bsz = trace.batch_size();
    let b = bsz as f64;
    let mut g = params.zeros_like();

    // output layer
    let mut delta = trace.recon.clone();
    for (dv, (&r, &x)) in delta
        .as_mut_slice()
        .iter_mut()
        .zip(trace.recon.as_slice().iter().zip(x_batch.as_slice()))
    {
        *dv = 2.0 / b * (r - x) + 2.0 * config.gamma4 / b * r;
    }
    let l = params.hidden_weights.len();
    g.rec_weights = matmul_nt(&delta, &trace.hidden_post[l - 1])?;
    g.rec_weights
        .axpy(2.0 * config.gamma2, &params.rec_weights)?;
    g.rec_bias = delta.row_sums();
    let mut upstream = matmul_tn(&params.rec_weights, &delta)?;

    for j in (0..l).rev() {
        if config.gamma3 != 0.0 {
            upstream.axpy(2.0 * config.gamma3 / b, &trace.hidden_post[j])?;
        }
        for (u, &pre) in upstream
            .as_mut_slice()
            .iter_mut()
            .zip(trace.hidden_pre[j].as_slice())
        {
            if pre <= 0.0 {
                *u = 0.0;
            }
        }
        let input = if j == 0 {
            &trace.z
        } else {
            &trace.hidden_post[j - 1]
        };
        g.hidden_weights[j] = matmul_nt(&upstream, input)?;
        g.hidden_weights[j].axpy(2.0 * config.gamma1, &params.hidden_weights[j])?;
        g.hidden_biases[j] = upstream.row_sums();
        upstream = matmul_tn(&params.hidden_weights[j], &upstream)?;
    }

    // latent layer: z = mu + exp(logvar/2) * eps, plus the direct KLD terms
    let k = params.latent_dim();
    let kl_scale = config.beta / b;
    for (col_idx, &col) in trace.columns.iter().enumerate() {
        for r in 0..k {
            let dz = upstream.get(r, col_idx);
            let mu = trace.mu.get(r, col_idx);
            let lv = trace.logvar.get(r, col_idx);
            let eps = trace.eps.get(r, col_idx);
            let dmu = dz + kl_scale * mu;
            let dlv = dz * 0.5 * (lv / 2.0).exp() * eps + kl_scale * 0.5 * (lv.exp() - 1.0);
            g.mu_table.set(r, col, g.mu_table.get(r, col) + dmu);
            g.logvar_table.set(r, col, g.logvar_table.get(r, col) + dlv);
            g.mu_bias[r] += dmu;
            g.logvar_bias[r] += dlv;
        }
    }
    Ok(Gradients {
        values: g,
        touched_columns: touched(&trace.columns),
    })
}

/// Total loss for fixed noise; the finite-difference oracle's only primitive.
pub fn loss_with_noise(
    params: &ModelParams,
    config: &ModelConfig,
    x_batch: &DenseMatrix,
    columns: &[usize],
    eps: &DenseMatrix,
) -> Result<LossBreakdown> {
    let trace = forward_with_noise(params, columns, eps.clone())?;
    loss(&trace, x_batch, params, config)
}

/// Central differences with step `step` on every parameter coordinate,
/// reusing the same noise for both evaluations.
pub fn finite_diff_grad(
    params: &ModelParams,
    config: &ModelConfig,
    x_batch: &DenseMatrix,
    columns: &[usize],
    eps: &DenseMatrix,
    step: f64,
) -> Result<Gradients> {
    let mut grads = params.zeros_like();
    let n_tensors = params.tensors().len();
    let mut probe = params.clone();
    for t in 0..n_tensors {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let orig = params.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + step;
            let plus = loss_with_noise(&probe, config, x_batch, columns, eps)?.total;
            probe.tensors_mut()[t][i] = orig - step;
            let minus = loss_with_noise(&probe, config, x_batch, columns, eps)?.total;
            probe.tensors_mut()[t][i] = orig;
            grads.tensors_mut()[t][i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(Gradients {
        values: grads,
        touched_columns: touched(columns),
    })
}

/// Adam moments. Embedding-table columns keep their own step counters and are
/// only updated when a batch touches them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ModelParams,
    pub second: ModelParams,
    /// Steps taken on the dense (non-table) parameters.
    pub step: u64,
    pub column_steps: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            column_steps: vec![0; params.n_columns()],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn adam_update(
    p: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    b1: f64,
    b2: f64,
    correction1: f64,
    correction2: f64,
    lr: f64,
    eps: f64,
) {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let m_hat = *m / correction1;
    let v_hat = *v / correction2;
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// Number of leading tensors in [`ModelParams::tensors`] that are embedding tables.
const TABLE_TENSORS: usize = 2;

pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if grads
        .values
        .tensors()
        .iter()
        .map(|t| t.len())
        .ne(params.tensors().iter().map(|t| t.len()))
    {
        return Err(Error::Consistency(
            "gradient shapes differ from parameters".into(),
        ));
    }
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let k = params.latent_dim();
    let m_cols = params.n_columns();

    for &c in &grads.touched_columns {
        if c >= m_cols {
            return Err(Error::arg(format!("touched column {c} out of range")));
        }
        state.column_steps[c] += 1;
        let t = state.column_steps[c] as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut p_t = params.tensors_mut();
        let mut m_t = state.first.tensors_mut();
        let mut v_t = state.second.tensors_mut();
        let g_t = grads.values.tensors();
        for ti in 0..TABLE_TENSORS {
            for r in 0..k {
                let idx = r * m_cols + c;
                adam_update(
                    &mut p_t[ti][idx],
                    g_t[ti][idx],
                    &mut m_t[ti][idx],
                    &mut v_t[ti][idx],
                    b1,
                    b2,
                    c1,
                    c2,
                    learning_rate,
                    eps,
                );
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let g_t = grads.values.tensors();
    let p_t = params.tensors_mut();
    let m_t = state.first.tensors_mut();
    let v_t = state.second.tensors_mut();
    for (((p, g), m), v) in p_t
        .into_iter()
        .zip(g_t)
        .zip(m_t)
        .zip(v_t)
        .skip(TABLE_TENSORS)
    {
        for i in 0..p.len() {
            adam_update(
                &mut p[i],
                g[i],
                &mut m[i],
                &mut v[i],
                b1,
                b2,
                c1,
                c2,
                learning_rate,
                eps,
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<LossBreakdown>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,recon,kld,weight_reg,activation_reg\n");
        for (i, e) in self.epochs.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                e.total,
                e.recon,
                e.kld,
                e.weight_reg,
                e.activation_reg
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Embedding column used by each sample under the configured mode.
pub fn sample_columns(dataset: &Dataset, mode: Mode) -> Result<(Vec<usize>, usize)> {
    match mode {
        Mode::Unsupervised => Ok(((0..dataset.n()).collect(), dataset.n())),
        Mode::Supervised => {
            let labels = dataset
                .labels
                .as_ref()
                .ok_or_else(|| Error::Config("supervised mode needs class labels".into()))?;
            let c = dataset.c();
            if c == 0 || labels.iter().any(|&l| l >= c) {
                return Err(Error::Config(format!(
                    "labels must lie in [0, {c}) for supervised training"
                )));
            }
            Ok((labels.clone(), c))
        }
    }
}

fn saturated(history: &[LossBreakdown], patience: Option<crate::model::Patience>) -> bool {
    let Some(p) = patience else { return false };
    if history.len() <= p.window {
        return false;
    }
    let now = history[history.len() - 1].total;
    let then = history[history.len() - 1 - p.window].total;
    (now - then).abs() <= p.rel_tol * then.abs()
}

/// Trains from a fresh initialization.
///
/// Initialization draws from stream [`INIT_STREAM`] of the configured seed;
/// batch shuffles and noise come from [`TRAIN_STREAM`]. Each epoch is a
/// shuffled pass over all samples in batches of `batch_size`, one Adam step
/// per batch.
pub fn train(dataset: &Dataset, config: &ModelConfig) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if dataset.n() == 0 || dataset.d() == 0 {
        return Err(Error::arg("training needs a non-empty dataset"));
    }
    let (columns, m) = sample_columns(dataset, config.mode)?;
    let mut params = init_params(
        config,
        m,
        dataset.d(),
        &mut RandomSource::derive(config.seed, INIT_STREAM),
    )?;
    let mut rng = RandomSource::derive(config.seed, TRAIN_STREAM);
    let mut state = AdamState::new(&params);
    let mut history = TrainHistory::default();
    let n = dataset.n();
    let k = config.latent_dim;

    for _ in 0..config.epochs {
        let order = rng.permutation(n);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(config.batch_size) {
            let cols: Vec<usize> = batch.iter().map(|&i| columns[i]).collect();
            let x_batch = gather_batch(&dataset.x, batch);
            let eps = rng.gaussian_matrix(k, batch.len());
            let trace = forward_with_noise(&params, &cols, eps)?;
            let lb = loss(&trace, &x_batch, &params, config)?;
            let grads = backward(&trace, &x_batch, &params, config)?;
            adam_step(&mut params, &grads, &mut state, config.learning_rate)?;
            let w = batch.len() as f64;
            sums[0] += w * lb.recon;
            sums[1] += w * lb.kld;
            sums[2] += w * lb.weight_reg;
            sums[3] += w * lb.activation_reg;
        }
        let nf = n as f64;
        history.epochs.push(LossBreakdown::from_parts(
            sums[0] / nf,
            sums[1] / nf,
            sums[2] / nf,
            sums[3] / nf,
        ));
        if !params.is_finite() {
            return Err(Error::Consistency(format!(
                "parameters diverged at epoch {}",
                history.len()
            )));
        }
        if saturated(&history.epochs, config.patience) {
            break;
        }
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_batch, init_params};
    use proptest::prelude::*;

    fn cfg(beta: f64, g: [f64; 4], widths: Vec<usize>) -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            hidden_widths: widths,
            beta,
            gamma1: g[0],
            gamma2: g[1],
            gamma3: g[2],
            gamma4: g[3],
            ..Default::default()
        }
    }

    #[test]
    fn kld_hand_values() {
        assert_eq!(kld_term(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kld_term(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        let expect = 0.5 * (1.0 - 2f64.ln());
        assert!((kld_term(&[0.0], &[2f64.ln()]) - expect).abs() < 1e-12);
        assert!((expect - 0.15343).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn kld_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..4), lv in prop::collection::vec(-5.0f64..5.0, 4)) {
            let lv = &lv[..mu.len()];
            prop_assert!(kld_term(&mu, lv) >= 0.0);
            if mu.iter().chain(lv).any(|v| v.abs() > 1e-3) {
                prop_assert!(kld_term(&mu, lv) > 0.0);
            }
        }
    }

    fn identity_decoder() -> ModelParams {
        // k = d = 1, one ReLU unit with weight 1, output weight 1
        let mut p = ModelParams::zeros(Mode::Unsupervised, 1, 1, &[1], 1);
        p.hidden_weights[0] = DenseMatrix::filled(1, 1, 1.0);
        p.rec_weights = DenseMatrix::filled(1, 1, 1.0);
        p.mu_table.set(0, 0, 0.7);
        p
    }

    #[test]
    fn loss_cases() {
        let c0 = cfg(0.0, [0.0; 4], vec![1]);
        let mut p = identity_decoder();
        let eps = DenseMatrix::zeros(1, 1);
        // perfect reconstruction
        let x = DenseMatrix::filled(1, 1, 0.7);
        let lb = loss_with_noise(&p, &c0, &x, &[0], &eps).unwrap();
        assert_eq!(lb.total, 0.0);

        // x = [1, 0], x~ = [0, 0]
        let mut q = ModelParams::zeros(Mode::Unsupervised, 1, 1, &[1], 2);
        q.rec_bias = vec![0.0, 0.0];
        let x = DenseMatrix::column(&[1.0, 0.0]);
        let lb = loss_with_noise(&q, &c0, &x, &[0], &eps).unwrap();
        assert_eq!(lb.recon, 1.0);

        // zero hidden weights contribute nothing to weight_reg
        p.hidden_weights[0].fill(0.0);
        p.rec_weights.fill(0.0);
        let x1 = DenseMatrix::filled(1, 1, 0.0);
        let lb = loss_with_noise(
            &p,
            &cfg(0.0, [1.0, 0.0, 0.0, 0.0], vec![1]),
            &x1,
            &[0],
            &eps,
        );
        assert_eq!(lb.unwrap().weight_reg, 0.0);
    }

    #[test]
    fn breakdown_is_additive() {
        let c = cfg(0.3, [0.1, 0.2, 0.05, 0.07], vec![3, 2]);
        let p = init_params(&c, 4, 3, &mut RandomSource::new(1)).unwrap();
        let x = RandomSource::new(2).gaussian_matrix(3, 4);
        let tr = forward_batch(&p, &[0, 1, 2, 3], &mut RandomSource::new(3)).unwrap();
        let lb = loss(&tr, &x, &p, &c).unwrap();
        let sum = lb.recon + lb.kld + lb.weight_reg + lb.activation_reg;
        assert!((lb.total - sum).abs() <= 1e-12 * lb.total.abs());
        assert!(lb.recon >= 0.0 && lb.kld >= 0.0);
        assert!(loss(&tr, &DenseMatrix::zeros(2, 4), &p, &c).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_gradient() {
        let c0 = cfg(0.0, [0.0; 4], vec![1]);
        let p = identity_decoder();
        let x = DenseMatrix::filled(1, 1, 0.7);
        let tr = forward_with_noise(&p, &[0], DenseMatrix::zeros(1, 1)).unwrap();
        let g = backward(&tr, &x, &p, &c0).unwrap();
        assert!(g
            .values
            .tensors()
            .iter()
            .all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn untouched_columns_get_exact_zero() {
        let c = cfg(0.1, [0.01; 4], vec![3]);
        let p = init_params(&c, 6, 2, &mut RandomSource::new(4)).unwrap();
        let x = RandomSource::new(5).gaussian_matrix(2, 2);
        let tr = forward_batch(&p, &[1, 4], &mut RandomSource::new(6)).unwrap();
        let g = backward(&tr, &x, &p, &c).unwrap();
        assert_eq!(g.touched_columns, vec![1, 4]);
        for col in [0, 2, 3, 5] {
            assert!(g.values.mu_table.col(col).iter().all(|&v| v == 0.0));
            assert!(g.values.logvar_table.col(col).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn finite_differences_on_quadratic_surrogate() {
        // x~ = mu + exp(lv/2) * eps with eps = 0, so loss = (x - mu)^2
        let c0 = cfg(0.0, [0.0; 4], vec![1]);
        let p = identity_decoder();
        let x = DenseMatrix::filled(1, 1, 1.9);
        let eps = DenseMatrix::zeros(1, 1);
        let g = finite_diff_grad(&p, &c0, &x, &[0], &eps, FD_STEP).unwrap();
        let hand = -2.0 * (1.9 - 0.7);
        assert!((g.values.mu_table.get(0, 0) - hand).abs() < 1e-8);
        assert!((g.values.mu_bias[0] - hand).abs() < 1e-8);
        assert!((g.values.rec_bias[0] - hand).abs() < 1e-8);
        assert!(g.values.logvar_table.get(0, 0).abs() < 1e-8);
    }

    #[test]
    fn finite_differences_vanish_at_stationary_point() {
        let c0 = cfg(0.0, [0.0; 4], vec![1]);
        let p = identity_decoder();
        let x = DenseMatrix::filled(1, 1, 0.7);
        let g = finite_diff_grad(&p, &c0, &x, &[0], &DenseMatrix::zeros(1, 1), FD_STEP).unwrap();
        assert!(g
            .values
            .tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.abs() < 1e-9)));
    }

    #[test]
    fn backward_matches_finite_differences_on_tiny_model() {
        let c = ModelConfig {
            latent_dim: 2,
            hidden_widths: vec![3],
            beta: 0.5,
            gamma1: 0.01,
            gamma2: 0.02,
            gamma3: 0.03,
            gamma4: 0.04,
            ..Default::default()
        };
        let mut rng = RandomSource::new(12);
        let mut p = init_params(&c, 5, 4, &mut rng).unwrap();
        p.logvar_table = rng.gaussian_matrix(2, 5);
        p.logvar_table.scale(0.5);
        p.hidden_biases[0] = rng.gaussian_matrix(3, 1).into_vec();
        p.mu_table.scale(10.0);
        let cols = [0, 2, 4, 2];
        let x = rng.gaussian_matrix(4, 4);
        let eps = rng.gaussian_matrix(2, 4);
        let tr = forward_with_noise(&p, &cols, eps.clone()).unwrap();
        let analytic = backward(&tr, &x, &p, &c).unwrap();
        let numeric = finite_diff_grad(&p, &c, &x, &cols, &eps, FD_STEP).unwrap();
        for (a, f) in analytic
            .values
            .tensors()
            .iter()
            .zip(numeric.values.tensors())
        {
            for (x, y) in a.iter().zip(f) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{x} vs {y}");
            }
        }
    }

    fn grads_of(params: &ModelParams, f: impl Fn(&mut [f64])) -> Gradients {
        let mut g = params.zeros_like();
        for t in g.tensors_mut() {
            f(t);
        }
        Gradients {
            values: g,
            touched_columns: (0..params.n_columns()).collect(),
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let c = cfg(0.0, [0.0; 4], vec![2]);
        let mut p = init_params(&c, 3, 2, &mut RandomSource::new(1)).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = grads_of(&p, |_| {});
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let c = cfg(0.0, [0.0; 4], vec![2]);
        let mut p = init_params(&c, 3, 2, &mut RandomSource::new(1)).unwrap();
        let before = p.clone();
        let g = grads_of(&p, |t| {
            for (i, v) in t.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.37 } else { -2.5 };
            }
        });
        let mut st = AdamState::new(&p);
        let lr = 1e-3;
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        for ((after, prev), gt) in p
            .tensors()
            .iter()
            .zip(before.tensors())
            .zip(g.values.tensors())
        {
            for ((a, b), gv) in after.iter().zip(prev).zip(gt) {
                let expect = b - lr * gv / (gv.abs() + 1e-8);
                assert!((a - expect).abs() < 1e-15, "{a} vs {expect}");
            }
        }
        assert_eq!(st.step, 1);
        assert!(st.column_steps.iter().all(|&s| s == 1));
    }

    #[test]
    fn adam_moments_follow_recurrence() {
        let c = cfg(0.0, [0.0; 4], vec![1]);
        let mut p = init_params(&c, 1, 1, &mut RandomSource::new(1)).unwrap();
        let g = grads_of(&p, |t| t.iter_mut().for_each(|v| *v = 2.0));
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let m1 = st.first.rec_bias[0];
        let v1 = st.second.rec_bias[0];
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(st.step, 2);
        assert!((m1 - 0.2).abs() < 1e-15 && (v1 - 0.004).abs() < 1e-15);
        let m2 = st.first.rec_bias[0];
        let v2 = st.second.rec_bias[0];
        assert!((m2 - (0.9 * 0.2 + 0.1 * 2.0)).abs() < 1e-15);
        assert!((v2 - (0.999 * 0.004 + 0.001 * 4.0)).abs() < 1e-15);
        assert!(m1 < m2 && m2 < 2.0 && v1 < v2 && v2 < 4.0);
    }

    #[test]
    fn untouched_columns_are_bit_identical_after_step() {
        let c = cfg(0.1, [0.01; 4], vec![3]);
        let mut p = init_params(&c, 6, 2, &mut RandomSource::new(4)).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        // warm up every column's moments
        let all: Vec<usize> = (0..6).collect();
        let x = RandomSource::new(5).gaussian_matrix(2, 6);
        let tr = forward_batch(&p, &all, &mut RandomSource::new(6)).unwrap();
        let g = backward(&tr, &x, &p, &c).unwrap();
        adam_step(&mut p, &g, &mut st, 1e-2).unwrap();
        assert_ne!(p.mu_table, before.mu_table);
        let snapshot = p.clone();
        let x2 = gather_batch(&x.transpose(), &[1, 4]);
        let tr = forward_batch(&p, &[1, 4], &mut RandomSource::new(7)).unwrap();
        let g = backward(&tr, &x2, &p, &c).unwrap();
        adam_step(&mut p, &g, &mut st, 1e-2).unwrap();
        for col in [0, 2, 3, 5] {
            assert_eq!(p.mu_table.col(col), snapshot.mu_table.col(col));
            assert_eq!(p.logvar_table.col(col), snapshot.logvar_table.col(col));
            assert_eq!(st.column_steps[col], 1);
        }
        assert_eq!(st.column_steps[1], 2);
        assert_ne!(p.mu_table.col(1), snapshot.mu_table.col(1));
    }

    fn small_blobs() -> Dataset {
        let ds = crate::data::make_blobs(30, 4, 3, 5.0, &mut RandomSource::new(0)).unwrap();
        crate::data::minmax_scale(&ds)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = small_blobs();
        let c = ModelConfig {
            epochs: 0,
            hidden_widths: vec![4],
            ..Default::default()
        };
        let (p, h) = train(&ds, &c).unwrap();
        let init = init_params(&c, 30, 4, &mut RandomSource::derive(c.seed, INIT_STREAM)).unwrap();
        assert_eq!(p, init);
        assert!(h.is_empty());
    }

    #[test]
    fn supervised_without_labels_is_a_config_error() {
        let mut ds = small_blobs();
        ds.labels = None;
        let c = ModelConfig {
            mode: Mode::Supervised,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train(&ds, &c), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let ds = small_blobs();
        let c = ModelConfig {
            epochs: 5,
            hidden_widths: vec![4, 4],
            batch_size: 8,
            seed: 99,
            patience: None,
            ..Default::default()
        };
        let (p1, h1) = train(&ds, &c).unwrap();
        let (p2, h2) = train(&ds, &c).unwrap();
        assert_eq!(
            crate::checkpoint::encode(&p1),
            crate::checkpoint::encode(&p2)
        );
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 5);
        let csv = h1.to_csv();
        assert!(csv.starts_with("epoch,total,recon,kld,weight_reg,activation_reg\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn supervised_identity_labels_match_unsupervised() {
        let mut ds = small_blobs();
        ds.labels = Some((0..ds.n()).collect());
        ds.n_classes = ds.n();
        let base = ModelConfig {
            epochs: 3,
            hidden_widths: vec![4],
            batch_size: 7,
            patience: None,
            ..Default::default()
        };
        let (pu, hu) = train(&ds, &base).unwrap();
        let (ps, hs) = train(
            &ds,
            &ModelConfig {
                mode: Mode::Supervised,
                ..base
            },
        )
        .unwrap();
        assert_eq!(hu, hs);
        assert_eq!(pu.tensors(), ps.tensors());
    }

    #[test]
    fn patience_stops_early_on_flat_loss() {
        let flat = vec![
            LossBreakdown {
                total: 1.0,
                ..Default::default()
            };
            12
        ];
        let p = Some(crate::model::Patience {
            window: 10,
            rel_tol: 1e-4,
        });
        assert!(saturated(&flat, p));
        assert!(!saturated(&flat[..10], p));
        assert!(!saturated(&flat, None));
    }
}
