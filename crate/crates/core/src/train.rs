//! Mini-batch training and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{Dataset, MultimodalBatch};
use crate::error::{Error, Result};
use crate::model::MVAEModel;
use crate::nn::{Adam, AdamConfig};
use crate::objective::{anneal_beta, elbo_rows, subsampled_step, AnnealSchedule, ElboWeights, TermNoise};

/// Rows per graph during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: Vec<f64>,
    pub anneal: AnnealSchedule,
    /// Posterior samples per example when computing epoch metrics.
    pub eval_samples: usize,
}

impl TrainConfig {
    pub fn new(lambda: Vec<f64>, epochs: usize, anneal_epochs: usize) -> Result<Self> {
        Ok(Self {
            adam: AdamConfig::default(),
            batch_size: 64,
            seed: 0,
            lambda,
            anneal: AnnealSchedule::new(anneal_epochs, epochs)?,
            eval_samples: 1,
        })
    }

    /// A zero learning rate is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be non-negative", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.eps <= 0.0 {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidArgument("eval_samples must be at least 1".into()));
        }
        AnnealSchedule::new(self.anneal.anneal_epochs, self.anneal.total_epochs)?;
        ElboWeights::new(self.lambda.clone(), 1.0)?;
        Ok(())
    }
}

/// Per-example averages with `beta = 1`; lower is better. `elbo[i]` and
/// `bce[i]` average over the rows where modality `i` is present (NaN if none).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub elbo_joint: f64,
    pub elbo: Vec<f64>,
    pub bce: Vec<f64>,
    pub kl_joint: f64,
}

impl EvalMetrics {
    pub fn all_finite(&self) -> bool {
        self.elbo_joint.is_finite() && self.elbo.iter().chain(&self.bce).all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub step_losses: Vec<f64>,
    pub metrics: EvalMetrics,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn mean_train_loss(&self) -> f64 {
        self.step_losses.iter().sum::<f64>() / self.step_losses.len() as f64
    }
}

/// Noise seed of the per-epoch metrics of a run seeded with `seed`;
/// [`evaluate`] with it reproduces an epoch record.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x6576_616c
}

/// Joint, single-modality and reconstruction metrics of `model` on `ds`.
/// Noise comes from `seed`, so repeated calls agree exactly.
pub fn evaluate(model: &MVAEModel, ds: &Dataset, lambda: &[f64], samples: usize, seed: u64) -> Result<EvalMetrics> {
    let w = ElboWeights::new(lambda.to_vec(), 1.0)?;
    if samples == 0 || ds.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs rows and at least one sample".into()));
    }
    let n = model.num_modalities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut joint = 0.0;
    let mut kl = 0.0;
    let mut elbo = vec![0.0; n];
    let mut bce = vec![0.0; n];
    let mut present = vec![0usize; n];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = ds.batch(chunk)?;
        for (i, c) in present.iter_mut().enumerate() {
            *c += batch.mask.iter().filter(|m| m[i]).count();
        }
        for _ in 0..samples {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, false);
            let enc = model.encode_batch(&mut g, &p, &batch)?;
            let noise = TermNoise::draw(model, batch.rows(), &mut rng);
            let rows = elbo_rows(&mut g, &p, model, &enc, &vec![true; n], &w, &noise)?;
            joint += g.value(rows.loss).sum();
            kl += g.value(rows.kl).sum();
            for (i, v) in rows.nll.iter().enumerate() {
                bce[i] += v.map_or(0.0, |v| g.value(v).sum());
            }
            for (i, e) in elbo.iter_mut().enumerate() {
                let keep: Vec<bool> = (0..n).map(|j| j == i).collect();
                let noise = TermNoise::draw(model, batch.rows(), &mut rng);
                let rows = elbo_rows(&mut g, &p, model, &enc, &keep, &w, &noise)?;
                *e += g
                    .value(rows.loss)
                    .data()
                    .iter()
                    .zip(&batch.mask)
                    .filter(|(_, m)| m[i])
                    .map(|(x, _)| x)
                    .sum::<f64>();
            }
        }
    }
    let s = samples as f64;
    let per = |total: f64, count: usize| if count == 0 { f64::NAN } else { total / (count as f64 * s) };
    let out = EvalMetrics {
        elbo_joint: per(joint, ds.len()),
        elbo: elbo.iter().zip(&present).map(|(&t, &c)| per(t, c)).collect(),
        bce: bce.iter().zip(&present).map(|(&t, &c)| per(t, c)).collect(),
        kl_joint: per(kl, ds.len()),
    };
    if !out.elbo_joint.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: out.elbo_joint,
            nll: out.bce,
            kl: out.kl_joint,
        });
    }
    if out.kl_joint < -0.1 {
        log::warn!("mean KL estimate {:.4} is below -0.1", out.kl_joint);
    }
    Ok(out)
}

/// Model, optimizer state and epoch counter of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: MVAEModel,
    pub opt: Adam,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: MVAEModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.lambda.len() != model.num_modalities() {
            return Err(Error::InvalidArgument(format!(
                "{} lambdas for {} modalities",
                cfg.lambda.len(),
                model.num_modalities()
            )));
        }
        let opt = Adam::new(cfg.adam, &model.store);
        Ok(Self { model, opt, cfg, epoch: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.anneal.total_epochs
    }

    pub fn eval_seed(&self) -> u64 {
        eval_seed(self.cfg.seed)
    }

    /// One pass over `train` in shuffled mini-batches, then evaluation on `eval`.
    /// On a non-finite loss the model and optimizer roll back to the epoch start.
    pub fn run_epoch(&mut self, train: &Dataset, eval: &Dataset) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let beta = anneal_beta(epoch, &self.cfg.anneal);
        let w = ElboWeights::new(self.cfg.lambda.clone(), beta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let snapshot = (self.model.store.clone(), self.opt.clone());
        let mut step_losses = Vec::with_capacity(order.len().div_ceil(self.cfg.batch_size));
        for idx in order.chunks(self.cfg.batch_size) {
            let batch: MultimodalBatch = train.batch(idx)?;
            match subsampled_step(&mut self.model, &mut self.opt, &batch, &w, &mut rng) {
                Ok(out) => step_losses.push(out.total),
                Err(e) => {
                    self.model.store = snapshot.0;
                    self.opt = snapshot.1;
                    return Err(e);
                }
            }
        }
        let metrics = evaluate(&self.model, eval, &self.cfg.lambda, self.cfg.eval_samples, self.eval_seed())?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            beta,
            step_losses,
            metrics,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Run the remaining epochs, calling `on_epoch` after each one.
    pub fn fit<F>(&mut self, train: &Dataset, eval: &Dataset, mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut records = Vec::new();
        while !self.is_done() {
            let rec = self.run_epoch(train, eval)?;
            log::info!(
                "epoch {} beta {:.3} loss {:.4} joint {:.4}",
                rec.epoch,
                rec.beta,
                rec.mean_train_loss(),
                rec.metrics.elbo_joint
            );
            on_epoch(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Train `model` for `cfg.anneal.total_epochs` epochs.
pub fn train(model: MVAEModel, train_ds: &Dataset, eval_ds: &Dataset, cfg: TrainConfig) -> Result<(MVAEModel, Vec<EpochRecord>)> {
    let mut t = Trainer::new(model, cfg)?;
    let records = t.fit(train_ds, eval_ds, |_, _| Ok(()))?;
    Ok((t.model, records))
}
