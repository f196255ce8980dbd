//! Negative multimodal ELBO, KL annealing and the sub-sampled training step.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::MultimodalBatch;
use crate::distributions::{bernoulli_nll_rows, gaussian_kl_standard, standard_normal_log_prob};
use crate::error::{Error, Result};
use crate::model::{EncodedBatch, KlEstimator, MVAEModel};
use crate::nn::{Adam, Bound};
use crate::tensor::Tensor;

/// Reconstruction weights per modality and the KL weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboWeights {
    pub lambda: Vec<f64>,
    pub beta: f64,
}

impl ElboWeights {
    pub fn new(lambda: Vec<f64>, beta: f64) -> Result<Self> {
        let w = Self { lambda, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            lambda: vec![1.0; n],
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!("lambda {l} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self {
            lambda: self.lambda.clone(),
            beta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnealSchedule {
    pub anneal_epochs: usize,
    pub total_epochs: usize,
}

impl AnnealSchedule {
    pub fn new(anneal_epochs: usize, total_epochs: usize) -> Result<Self> {
        if anneal_epochs == 0 || total_epochs == 0 || anneal_epochs > total_epochs {
            return Err(Error::InvalidArgument(format!(
                "anneal epochs {anneal_epochs} must lie in 1..={total_epochs} (and total epochs must be positive)"
            )));
        }
        Ok(Self {
            anneal_epochs,
            total_epochs,
        })
    }
}

/// `min(1, epoch / anneal_epochs)`.
pub fn anneal_beta(epoch: usize, s: &AnnealSchedule) -> f64 {
    if epoch >= s.anneal_epochs {
        1.0
    } else {
        epoch as f64 / s.anneal_epochs as f64
    }
}

/// Frozen randomness for one ELBO term: `[B, D]` Gaussian noise and the
/// Rademacher probes the model's trace mode asks for.
#[derive(Clone, Debug, PartialEq)]
pub struct TermNoise {
    pub noise: Tensor,
    pub probes: Vec<Tensor>,
}

impl TermNoise {
    pub fn draw<R: Rng + ?Sized>(model: &MVAEModel, rows: usize, rng: &mut R) -> Self {
        let (noise, probes) = model.draw_noise(rows, rng);
        Self { noise, probes }
    }

    fn bind(&self, g: &mut Graph) -> (Var, Vec<Var>) {
        (g.constant(self.noise.clone()), self.probes.iter().map(|p| g.constant(p.clone())).collect())
    }
}

/// Per-row pieces of one ELBO term, all `[B, 1]`.
#[derive(Clone, Debug)]
pub struct ElboRows {
    /// `sum_i lambda_i nll_i + beta kl`.
    pub loss: Var,
    /// Unweighted reconstruction NLL of each included modality, zero where absent.
    pub nll: Vec<Option<Var>>,
    pub kl: Var,
}

/// One ELBO term using the experts of modalities with `keep[i]`, reconstructing the same modalities.
pub fn elbo_rows(
    g: &mut Graph,
    p: &Bound,
    model: &MVAEModel,
    enc: &EncodedBatch,
    keep: &[bool],
    w: &ElboWeights,
    noise: &TermNoise,
) -> Result<ElboRows> {
    let post = model.fuse(g, enc, keep)?;
    let (eps, probes) = noise.bind(g);
    let s = model.sample_graph(g, p, post, eps, &probes)?;
    let kl = match (model.flow().is_some(), model.config.baseline_kl) {
        (false, KlEstimator::Analytic) => gaussian_kl_standard(g, post)?,
        (false, KlEstimator::MonteCarlo) | (true, _) => {
            let lp = standard_normal_log_prob(g, s.z)?;
            g.sub(s.log_q, lp)?
        }
    };
    let logits = model.decode_graph(g, p, s.z)?;
    let mut loss = g.scale(kl, w.beta);
    let mut nll = Vec::with_capacity(keep.len());
    for i in 0..keep.len() {
        if !keep[i] {
            nll.push(None);
            continue;
        }
        let rows = bernoulli_nll_rows(g, logits[i], enc.values[i])?;
        let rows = g.mul(rows, enc.masks[i])?;
        let weighted = g.scale(rows, w.lambda[i]);
        loss = g.add(loss, weighted)?;
        nll.push(Some(rows));
    }
    Ok(ElboRows { loss, nll, kl })
}

/// Batch-mean negative ELBO with its reconstruction and KL parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboOutput {
    pub loss: f64,
    pub nll: Vec<f64>,
    pub kl: f64,
}

fn check_weights(model: &MVAEModel, w: &ElboWeights) -> Result<()> {
    w.validate()?;
    if w.lambda.len() != model.num_modalities() {
        return Err(Error::InvalidArgument(format!(
            "{} lambdas for {} modalities",
            w.lambda.len(),
            model.num_modalities()
        )));
    }
    Ok(())
}

/// Graph form of [`elbo_loss`] over the present modalities of each row.
pub fn elbo_loss_graph(g: &mut Graph, p: &Bound, model: &MVAEModel, batch: &MultimodalBatch, w: &ElboWeights, noise: &TermNoise) -> Result<(Var, ElboRows)> {
    check_weights(model, w)?;
    let enc = model.encode_batch(g, p, batch)?;
    let rows = elbo_rows(g, p, model, &enc, &vec![true; model.num_modalities()], w, noise)?;
    Ok((g.mean(rows.loss), rows))
}

fn summarize(g: &Graph, loss: Var, rows: &ElboRows) -> Result<ElboOutput> {
    let mean = |v: Var| g.value(v).sum() / g.value(v).numel() as f64;
    let nll = rows.nll.iter().map(|v| v.map_or(0.0, mean)).collect();
    let kl = mean(rows.kl);
    let out = ElboOutput { loss: g.item(loss)?, nll, kl };
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: out.loss,
            nll: out.nll,
            kl: out.kl,
        });
    }
    Ok(out)
}

/// `mean_b [ sum_i lambda_i NLL_i + beta KL ]` with frozen noise.
pub fn elbo_loss(model: &MVAEModel, batch: &MultimodalBatch, w: &ElboWeights, noise: &TermNoise) -> Result<ElboOutput> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let (loss, rows) = elbo_loss_graph(&mut g, &p, model, batch, w, noise)?;
    summarize(&g, loss, &rows)
}

/// Which rows take part in a term over `subset`: rows holding every modality
/// of the subset and at least one more (otherwise the joint term covers them).
fn term_weights(batch: &MultimodalBatch, subset: &[bool]) -> Tensor {
    let k = subset.iter().filter(|&&s| s).count();
    let data = batch
        .mask
        .iter()
        .map(|m| {
            let has_all = m.iter().zip(subset).all(|(p, s)| *p || !*s);
            let present = m.iter().filter(|&&x| x).count();
            if has_all && present > k {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![batch.rows(), 1], data).expect("shape")
}

/// Terms of one sub-sampled step: the joint term, each singleton, and for more
/// than two modalities one uniformly drawn non-singleton strict subset.
pub fn step_subsets<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<bool>> {
    let mut subsets = vec![vec![true; n]];
    if n > 1 {
        subsets.extend((0..n).map(|i| (0..n).map(|j| j == i).collect()));
    }
    if n > 2 {
        let candidates: Vec<u32> = (1u32..(1 << n) - 1).filter(|s| s.count_ones() >= 2).collect();
        let s = candidates[rng.random_range(0..candidates.len())];
        subsets.push((0..n).map(|j| s & (1 << j) != 0).collect());
    }
    subsets
}

/// Summed loss of all sub-sampled terms plus the joint term's breakdown.
pub fn subsampled_loss_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bound,
    model: &MVAEModel,
    batch: &MultimodalBatch,
    w: &ElboWeights,
    rng: &mut R,
) -> Result<(Var, Var, ElboRows)> {
    check_weights(model, w)?;
    let enc = model.encode_batch(g, p, batch)?;
    let subsets = step_subsets(model.num_modalities(), rng);
    let mut total: Option<Var> = None;
    let mut joint: Option<(Var, ElboRows)> = None;
    for (k, subset) in subsets.iter().enumerate() {
        let noise = TermNoise::draw(model, batch.rows(), rng);
        let rows = elbo_rows(g, p, model, &enc, subset, w, &noise)?;
        let term = if k == 0 {
            g.mean(rows.loss)
        } else {
            let wts = g.constant(term_weights(batch, subset));
            let masked = g.mul(rows.loss, wts)?;
            g.mean(masked)
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
        if k == 0 {
            joint = Some((term, rows));
        }
    }
    let (jl, jr) = joint.expect("joint term");
    Ok((total.expect("terms"), jl, jr))
}

/// Total loss, and the joint term's breakdown, of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub total: f64,
    pub joint: ElboOutput,
}

/// Build the sub-sampled loss, backpropagate and apply one Adam update. The
/// parameters are left untouched when the loss is not finite.
pub fn subsampled_step<R: Rng + ?Sized>(
    model: &mut MVAEModel,
    opt: &mut Adam,
    batch: &MultimodalBatch,
    w: &ElboWeights,
    rng: &mut R,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let (total, jl, jr) = subsampled_loss_graph(&mut g, &p, model, batch, w, rng)?;
    let joint = summarize(&g, jl, &jr)?;
    let t = g.item(total)?;
    if !t.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: t,
            nll: joint.nll,
            kl: joint.kl,
        });
    }
    let grads = g.backward(total)?;
    let gs = p.grads(&grads, &model.store);
    if let Some(i) = gs.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {i}")));
    }
    opt.update(&mut model.store, &gs)?;
    Ok(StepOutput { total: t, joint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GaussianParams, GaussianVars};
    use crate::model::{ModalitySpec, ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beta_schedule() {
        let s = AnnealSchedule::new(20, 60).unwrap();
        assert_eq!(anneal_beta(0, &s), 0.0);
        assert_eq!(anneal_beta(10, &s), 0.5);
        for e in 20..60 {
            assert_eq!(anneal_beta(e, &s), 1.0);
        }
        let mut prev = 0.0;
        for e in 0..60 {
            let b = anneal_beta(e, &s);
            assert!(b >= prev);
            prev = b;
        }
        assert!(AnnealSchedule::new(70, 60).is_err());
        assert!(AnnealSchedule::new(0, 60).is_err());
    }

    #[test]
    fn weights_validate() {
        assert!(ElboWeights::new(vec![1.0, 50.0], 1.0).is_ok());
        assert!(ElboWeights::new(vec![0.0], 1.0).is_err());
        assert!(ElboWeights::new(vec![1.0], 1.5).is_err());
    }

    #[test]
    fn subsets_per_modality_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(step_subsets(1, &mut rng), vec![vec![true]]);
        assert_eq!(step_subsets(2, &mut rng).len(), 3);
        for _ in 0..50 {
            let s = step_subsets(4, &mut rng);
            assert_eq!(s.len(), 6);
            let k = s[5].iter().filter(|&&x| x).count();
            assert!((2..4).contains(&k));
        }
    }

    #[test]
    fn term_rows() {
        let b = MultimodalBatch::new(
            vec![Tensor::zeros(&[3, 1]), Tensor::zeros(&[3, 1])],
            vec![vec![true, true], vec![true, false], vec![false, true]],
        )
        .unwrap();
        assert_eq!(term_weights(&b, &[true, false]).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(term_weights(&b, &[false, true]).data(), &[1.0, 0.0, 0.0]);
    }

    fn tiny() -> MVAEModel {
        let c = ModelConfig::new(vec![ModalitySpec::new("x", 3).with_widths(6, 4, 6)], 2, Variant::Baseline);
        MVAEModel::new(c, 5).unwrap()
    }

    #[test]
    fn beta_zero_is_reconstruction_only() {
        let m = tiny();
        let b = MultimodalBatch::full(vec![Tensor::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap()]).unwrap();
        let noise = TermNoise::draw(&m, 1, &mut ChaCha8Rng::seed_from_u64(1));
        let out = elbo_loss(&m, &b, &ElboWeights::new(vec![2.0], 0.0).unwrap(), &noise).unwrap();
        assert!((out.loss - 2.0 * out.nll[0]).abs() < 1e-12);
        assert!(out.kl > 0.0);
    }

    #[test]
    fn prior_posterior_has_zero_monte_carlo_kl() {
        let mut c = ModelConfig::new(vec![ModalitySpec::new("x", 3).with_widths(6, 4, 6)], 2, Variant::Cnf);
        c.flow_hidden = vec![4];
        c.flow.num_steps = 3;
        let mut m = MVAEModel::new(c, 0).unwrap();
        m.zero_flow();
        let mut g = Graph::new();
        let p = m.store.bind(&mut g, false);
        let post = GaussianVars::constant(&mut g, &vec![GaussianParams::standard(2); 4]).unwrap();
        let noise = g.constant(Tensor::from_rows(&[vec![0.1, 2.0], vec![-1.0, 0.5], vec![3.0, -3.0], vec![0.0, 0.0]]).unwrap());
        let s = m.sample_graph(&mut g, &p, post, noise, &[]).unwrap();
        let lp = standard_normal_log_prob(&mut g, s.z).unwrap();
        let kl = g.sub(s.log_q, lp).unwrap();
        assert!(g.value(kl).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_present_row_counts_once() {
        let c = ModelConfig::new(
            vec![ModalitySpec::new("a", 3).with_widths(6, 4, 6), ModalitySpec::new("b", 2).with_widths(6, 4, 6)],
            2,
            Variant::Baseline,
        );
        let m = MVAEModel::new(c, 1).unwrap();
        let b = MultimodalBatch::new(vec![Tensor::full(&[1, 3], 1.0), Tensor::zeros(&[1, 2])], vec![vec![true, false]]).unwrap();
        let w = ElboWeights::new(vec![1.0, 50.0], 1.0).unwrap();

        let mut g = Graph::new();
        let p = m.store.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (total, joint, _) = subsampled_loss_graph(&mut g, &p, &m, &b, &w, &mut rng).unwrap();
        assert_eq!(g.item(total).unwrap(), g.item(joint).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _ = step_subsets(2, &mut rng);
        let noise = TermNoise::draw(&m, 1, &mut rng);
        let only = elbo_loss(&m, &b.restrict(&[true, false]), &w, &noise).unwrap();
        assert!((only.loss - g.item(joint).unwrap()).abs() < 1e-12);
    }
}
