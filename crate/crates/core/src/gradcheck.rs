//! Backpropagation checked against central differences on random tiny models.

use crate::error::{Error, Result};
use crate::model::{forward_with_noise, init_params, ModelConfig};
use crate::rng::RandomSource;
use crate::train::{backward, finite_diff_grad, Gradients, FD_STEP};

pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so coordinates with near-zero gradient compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub widths: Vec<usize>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub trials: Vec<TrialReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.trials
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= TOLERANCE
    }
}

fn size(rng: &mut RandomSource, max: usize) -> usize {
    1 + rng.below(max as u64) as usize
}

/// Runs `trials` random configurations (n <= 6, d <= 5, k <= 2, up to two
/// hidden layers of width <= 4). `tamper` is applied to every analytic
/// gradient before comparison, for failure injection.
pub fn gradient_check(
    trials: usize,
    seed: u64,
    tamper: Option<&dyn Fn(&mut Gradients)>,
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::arg("gradient check needs at least one trial"));
    }
    let mut rng = RandomSource::new(seed);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let n = size(&mut rng, 6);
        let d = size(&mut rng, 5);
        let k = size(&mut rng, 2);
        let l = size(&mut rng, 2);
        let widths: Vec<usize> = (0..l).map(|_| size(&mut rng, 4)).collect();
        let config = ModelConfig {
            latent_dim: k,
            hidden_widths: widths.clone(),
            beta: rng.uniform(),
            gamma1: 0.1 * rng.uniform(),
            gamma2: 0.1 * rng.uniform(),
            gamma3: 0.1 * rng.uniform(),
            gamma4: 0.1 * rng.uniform(),
            ..Default::default()
        };
        let mut params = init_params(&config, n, d, &mut rng)?;
        params.mu_table.scale(10.0);
        params.logvar_table = rng.gaussian_matrix(k, n);
        params.logvar_table.scale(0.5);
        for b in &mut params.hidden_biases {
            let len = b.len();
            b.copy_from_slice(&rng.gaussian_matrix(len, 1).into_vec());
        }
        let batch = size(&mut rng, n);
        let columns: Vec<usize> = (0..batch).map(|_| rng.below(n as u64) as usize).collect();
        let x = rng.gaussian_matrix(d, batch).map(|v| v.abs().min(1.0));
        let eps = rng.gaussian_matrix(k, batch);

        let trace = forward_with_noise(&params, &columns, eps.clone())?;
        let mut analytic = backward(&trace, &x, &params, &config)?;
        if let Some(f) = tamper {
            f(&mut analytic);
        }
        let numeric = finite_diff_grad(&params, &config, &x, &columns, &eps, FD_STEP)?;
        let max_rel_error = analytic
            .values
            .tensors()
            .iter()
            .zip(numeric.values.tensors())
            .flat_map(|(a, f)| a.iter().zip(f).map(|(&a, &f)| relative_error(a, f)))
            .fold(0.0, f64::max);
        reports.push(TrialReport {
            n,
            d,
            k,
            widths,
            max_rel_error,
        });
    }
    Ok(GradCheckReport { trials: reports })
}
