//! Diagonal Gaussian and Bernoulli kernels.
//!
//! The graph functions are batched: a batch of `B` Gaussians over `D` latent
//! units is a pair of `[B, D]` nodes, and per-example quantities come back as
//! `[B, 1]` columns. The plain-vector methods on [`GaussianParams`] and
//! [`BernoulliParams`] run the same graph code on a single example.

use std::f64::consts::PI;

use crate::autodiff::{sigmoid, softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// Mean and log-variance of a diagonal Gaussian. `log_var` is clamped to
/// `[LOG_VAR_MIN, LOG_VAR_MAX]` on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() || mean.is_empty() {
            return Err(Error::shape("gaussian params", &[mean.len()], &[log_var.len()]));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn precision(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| (-v).exp()).collect()
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = GaussianVars::constant(&mut g, std::slice::from_ref(self))?;
        let z = g.constant(Tensor::row(z));
        let lp = gaussian_log_prob(&mut g, z, p)?;
        g.item(lp)
    }

    pub fn rsample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = GaussianVars::constant(&mut g, std::slice::from_ref(self))?;
        let e = g.constant(Tensor::row(noise));
        let z = gaussian_rsample(&mut g, p, e)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn kl_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>()
    }
}

/// A batch of diagonal Gaussians on a graph; both nodes are `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Encoder heads: clamps the raw log-variance.
    pub fn from_raw(g: &mut Graph, mean: Var, raw_log_var: Var) -> Self {
        let log_var = g.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        Self { mean, log_var }
    }

    pub fn constant(g: &mut Graph, rows: &[GaussianParams]) -> Result<Self> {
        let means: Vec<Vec<f64>> = rows.iter().map(|p| p.mean.clone()).collect();
        let lvs: Vec<Vec<f64>> = rows.iter().map(|p| p.log_var.clone()).collect();
        Ok(Self {
            mean: g.constant(Tensor::from_rows(&means)?),
            log_var: g.constant(Tensor::from_rows(&lvs)?),
        })
    }

    /// `N(0, I)` for `rows` examples.
    pub fn standard(g: &mut Graph, rows: usize, dim: usize) -> Self {
        Self {
            mean: g.constant(Tensor::zeros(&[rows, dim])),
            log_var: g.constant(Tensor::zeros(&[rows, dim])),
        }
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.mean).rows()
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.value(self.mean).cols()
    }

    pub fn to_params(&self, g: &Graph) -> Vec<GaussianParams> {
        let m = g.value(self.mean);
        let lv = g.value(self.log_var);
        (0..m.rows())
            .map(|r| GaussianParams {
                mean: m.row_slice(r).to_vec(),
                log_var: lv.row_slice(r).to_vec(),
            })
            .collect()
    }
}

fn check_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Per-row `sum_d [-ln(2 pi)/2 - lv_d/2 - (z_d - m_d)^2 / (2 e^{lv_d})]`, shape `[B, 1]`.
pub fn gaussian_log_prob(g: &mut Graph, z: Var, p: GaussianVars) -> Result<Var> {
    check_same(g, "gaussian_log_prob", z, p.mean)?;
    let d = g.value(z).cols() as f64;
    let diff = g.sub(z, p.mean)?;
    let sq = g.square(diff);
    let neg_lv = g.neg(p.log_var);
    let prec = g.exp(neg_lv);
    let maha = g.mul(sq, prec)?;
    let t = g.add(maha, p.log_var)?;
    let s = g.sum_rows(t)?;
    let s = g.scale(s, -0.5);
    Ok(g.add_scalar(s, -d * half_ln_2pi()))
}

/// Per-row standard-normal log-density, shape `[B, 1]`.
pub fn standard_normal_log_prob(g: &mut Graph, z: Var) -> Result<Var> {
    let d = g.value(z).cols() as f64;
    let sq = g.square(z);
    let s = g.sum_rows(sq)?;
    let s = g.scale(s, -0.5);
    Ok(g.add_scalar(s, -d * half_ln_2pi()))
}

/// `mean + exp(log_var / 2) * noise`.
pub fn gaussian_rsample(g: &mut Graph, p: GaussianVars, noise: Var) -> Result<Var> {
    check_same(g, "gaussian_rsample", noise, p.mean)?;
    let half = g.scale(p.log_var, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, noise)?;
    g.add(p.mean, scaled)
}

/// Closed-form `KL(N(m, e^lv) || N(0, I))` per row, shape `[B, 1]`.
pub fn gaussian_kl_standard(g: &mut Graph, p: GaussianVars) -> Result<Var> {
    let var = g.exp(p.log_var);
    let m2 = g.square(p.mean);
    let t = g.add(var, m2)?;
    let t = g.sub(t, p.log_var)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum_rows(t)?;
    Ok(g.scale(s, 0.5))
}

/// Per-row Bernoulli negative log-likelihood `sum [softplus(l) - x l]`, shape `[B, 1]`.
pub fn bernoulli_nll_rows(g: &mut Graph, logits: Var, target: Var) -> Result<Var> {
    check_same(g, "bernoulli_nll", logits, target)?;
    if let Some(bad) = g.value(target).data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::InvalidArgument(format!("bernoulli target {bad} outside [0, 1]")));
    }
    let sp = g.softplus(logits);
    let xl = g.mul(target, logits)?;
    let t = g.sub(sp, xl)?;
    g.sum_rows(t)
}

/// Bernoulli NLL summed over dimensions and averaged over the batch.
pub fn bernoulli_nll(g: &mut Graph, logits: Var, target: Var) -> Result<Var> {
    let rows = bernoulli_nll_rows(g, logits, target)?;
    Ok(g.mean(rows))
}

/// Decoder output for one modality, `[B, data_dim]` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliParams {
    pub logits: Tensor,
}

impl BernoulliParams {
    pub fn new(logits: Tensor) -> Result<Self> {
        if !logits.all_finite() {
            return Err(Error::NonFinite("bernoulli logits".into()));
        }
        Ok(Self { logits })
    }

    /// Success probabilities.
    pub fn mean(&self) -> Tensor {
        self.logits.map(sigmoid)
    }

    /// Batch-mean NLL of `target`.
    pub fn nll(&self, target: &Tensor) -> Result<f64> {
        if target.shape() != self.logits.shape() {
            return Err(Error::shape("bernoulli_nll", self.logits.shape(), target.shape()));
        }
        if target.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("bernoulli target outside [0, 1]".into()));
        }
        let rows = self.logits.rows().max(1) as f64;
        let total: f64 = self
            .logits
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &x)| softplus(l) - x * l)
            .sum();
        Ok(total / rows)
    }
}
