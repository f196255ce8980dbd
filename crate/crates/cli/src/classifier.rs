//! Small judge classifier for label-conditioned samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvcf_core::autodiff::Graph;
use mvcf_core::data::one_hot;
use mvcf_core::nn::{Adam, AdamConfig, Linear, ParamStore};
use mvcf_core::{Result, Tensor};

pub const HIDDEN: usize = 128;
pub const EPOCHS: usize = 10;
const BATCH: usize = 64;

/// One swish hidden layer, softmax output.
#[derive(Clone, Debug)]
pub struct Classifier {
    store: ParamStore,
    hidden: Linear,
    out: Linear,
    classes: usize,
}

impl Classifier {
    /// Fixed budget: [`EPOCHS`] passes of Adam over shuffled mini-batches.
    pub fn train(x: &Tensor, labels: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = Linear::new(&mut store, "judge.hidden", x.cols(), HIDDEN, &mut rng);
        let out = Linear::new(&mut store, "judge.out", HIDDEN, classes, &mut rng);
        let mut c = Self {
            store,
            hidden,
            out,
            classes,
        };
        let mut opt = Adam::new(AdamConfig::default(), &c.store);
        let targets = one_hot(labels, classes);
        let mut order: Vec<usize> = (0..x.rows()).collect();
        for _ in 0..EPOCHS {
            order.shuffle(&mut rng);
            for idx in order.chunks(BATCH) {
                let mut g = Graph::new();
                let p = c.store.bind(&mut g, true);
                let xb = g.constant(x.gather_rows(idx)?);
                let yb = g.constant(targets.gather_rows(idx)?);
                let h = c.hidden.forward(&mut g, &p, xb)?;
                let h = g.swish(h);
                let logits = c.out.forward(&mut g, &p, h)?;
                let lse = g.logsumexp_rows(logits)?;
                let picked = g.mul(logits, yb)?;
                let picked = g.sum_rows(picked)?;
                let nll = g.sub(lse, picked)?;
                let loss = g.mean(nll);
                let grads = g.backward(loss)?;
                let gs = p.grads(&grads, &c.store);
                opt.update(&mut c.store, &gs)?;
            }
        }
        Ok(c)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.hidden.forward(&mut g, &p, xv)?;
        let h = g.swish(h);
        let logits = self.out.forward(&mut g, &p, h)?;
        let l = g.value(logits);
        Ok((0..l.rows())
            .map(|r| {
                l.row_slice(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}
