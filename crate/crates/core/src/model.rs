//! The multimodal VAE: per-modality encoders and decoders, product-of-experts
//! fusion, and an optional continuous flow on the fused posterior sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::data::MultimodalBatch;
use crate::distributions::{gaussian_log_prob, gaussian_rsample, BernoulliParams, GaussianParams, GaussianVars};
use crate::error::{Error, Result};
use crate::flows::{cnf_transform, rademacher, FlowConfig, OdeNet, TraceMode};
use crate::nn::{Bound, Linear, ParamStore};
use crate::poe::{poe_fuse_vars, ExpertVars};
use crate::tensor::Tensor;

/// Rows decoded per graph when generating.
const GENERATE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub data_dim: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    pub decoder_hidden: usize,
    pub likelihood: Likelihood,
    /// `(height, width)` when the modality is an image, for contact sheets.
    pub image_shape: Option<(usize, usize)>,
}

impl ModalitySpec {
    /// 512-unit trunk, 128-unit heads, 512-unit decoder.
    pub fn new(name: impl Into<String>, data_dim: usize) -> Self {
        Self {
            name: name.into(),
            data_dim,
            encoder_hidden: 512,
            head_hidden: 128,
            decoder_hidden: 512,
            likelihood: Likelihood::Bernoulli,
            image_shape: None,
        }
    }

    pub fn with_widths(mut self, encoder: usize, head: usize, decoder: usize) -> Self {
        self.encoder_hidden = encoder;
        self.head_hidden = head;
        self.decoder_hidden = decoder;
        self
    }

    pub fn with_image_shape(mut self, height: usize, width: usize) -> Self {
        self.image_shape = Some((height, width));
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Cnf,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "cnf" => Ok(Self::Cnf),
            _ => Err(Error::InvalidArgument(format!("unknown variant {s:?} (expected baseline or cnf)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Cnf => "cnf",
        })
    }
}

/// How the baseline variant estimates `KL(q || p)`. The flow variant always
/// uses the single-sample `log q_T(z_T) - log p(z_T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlEstimator {
    Analytic,
    MonteCarlo,
}

impl std::str::FromStr for KlEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "monte-carlo" => Ok(Self::MonteCarlo),
            _ => Err(Error::InvalidArgument(format!("unknown kl estimator {s:?}"))),
        }
    }
}

impl std::fmt::Display for KlEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Analytic => "analytic",
            Self::MonteCarlo => "monte-carlo",
        })
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub latent_dim: usize,
    pub variant: Variant,
    pub flow: FlowConfig,
    pub flow_hidden: Vec<usize>,
    pub baseline_kl: KlEstimator,
}

impl ModelConfig {
    pub fn new(modalities: Vec<ModalitySpec>, latent_dim: usize, variant: Variant) -> Self {
        Self {
            modalities,
            latent_dim,
            variant,
            flow: FlowConfig::default(),
            flow_hidden: vec![256, 256],
            baseline_kl: KlEstimator::Analytic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.modalities.len();
        if !(1..=4).contains(&n) {
            return Err(Error::InvalidArgument(format!("{n} modalities; supported range is 1 to 4")));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.data_dim == 0 || m.encoder_hidden == 0 || m.head_hidden == 0 || m.decoder_hidden == 0 {
                return Err(Error::InvalidArgument(format!("modality {:?}: widths must be positive", m.name)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::InvalidArgument(format!("duplicate modality name {:?}", m.name)));
            }
            if let Some((h, w)) = m.image_shape {
                if h * w != m.data_dim {
                    return Err(Error::InvalidArgument(format!(
                        "modality {:?}: image shape {h}x{w} does not match data_dim {}",
                        m.name, m.data_dim
                    )));
                }
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if self.flow_hidden.contains(&0) {
            return Err(Error::InvalidArgument("flow hidden widths must be positive".into()));
        }
        self.flow.validate()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    trunk: Linear,
    mean_hidden: Linear,
    mean_out: Linear,
    log_var_hidden: Linear,
    log_var_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    hidden: Linear,
    out: Linear,
}

/// Latent sample before and after the flow, with per-row log-densities `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorSample {
    pub z0: Var,
    pub log_q0: Var,
    pub z: Var,
    pub log_q: Var,
}

/// Encoder outputs for every modality plus `[B, 1]` presence columns.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub values: Vec<Var>,
    pub masks: Vec<Var>,
    pub experts: Vec<GaussianVars>,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MVAEModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
    flow: Option<OdeNet>,
}

impl MVAEModel {
    /// Parameters are created in a fixed order (encoders, decoders, flow), so
    /// both variants built from one seed share encoder and decoder weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.latent_dim;
        let encoders = config
            .modalities
            .iter()
            .map(|m| {
                let name = format!("enc.{}", m.name);
                Encoder {
                    trunk: Linear::new(&mut store, &format!("{name}.trunk"), m.data_dim, m.encoder_hidden, &mut rng),
                    mean_hidden: Linear::new(&mut store, &format!("{name}.mean_hidden"), m.encoder_hidden, m.head_hidden, &mut rng),
                    mean_out: Linear::new(&mut store, &format!("{name}.mean"), m.head_hidden, d, &mut rng),
                    log_var_hidden: Linear::new(&mut store, &format!("{name}.log_var_hidden"), m.encoder_hidden, m.head_hidden, &mut rng),
                    log_var_out: Linear::new(&mut store, &format!("{name}.log_var"), m.head_hidden, d, &mut rng),
                }
            })
            .collect();
        let decoders = config
            .modalities
            .iter()
            .map(|m| {
                let name = format!("dec.{}", m.name);
                Decoder {
                    hidden: Linear::new(&mut store, &format!("{name}.hidden"), d, m.decoder_hidden, &mut rng),
                    out: Linear::new(&mut store, &format!("{name}.out"), m.decoder_hidden, m.data_dim, &mut rng),
                }
            })
            .collect();
        let flow = match config.variant {
            Variant::Cnf => Some(OdeNet::new(&mut store, "flow", d, &config.flow_hidden, &mut rng)),
            Variant::Baseline => None,
        };
        Ok(Self {
            config,
            store,
            encoders,
            decoders,
            flow,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn num_modalities(&self) -> usize {
        self.config.modalities.len()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn flow(&self) -> Option<&OdeNet> {
        self.flow.as_ref()
    }

    /// Set every flow parameter to zero (`f = 0`). No-op for the baseline.
    pub fn zero_flow(&mut self) {
        if let Some(net) = &self.flow {
            net.zero_params(&mut self.store);
        }
    }

    /// Hutchinson probes needed per posterior sample.
    pub fn probes_per_sample(&self) -> usize {
        match (&self.flow, self.config.flow.trace_mode) {
            (Some(_), TraceMode::Hutchinson) => self.config.flow.hutchinson_probes,
            _ => 0,
        }
    }

    pub fn check_batch(&self, batch: &MultimodalBatch) -> Result<()> {
        if batch.num_modalities() != self.num_modalities() {
            return Err(Error::InvalidArgument(format!(
                "batch has {} modalities, model has {}",
                batch.num_modalities(),
                self.num_modalities()
            )));
        }
        for (v, m) in batch.values.iter().zip(&self.config.modalities) {
            if v.cols() != m.data_dim {
                return Err(Error::InvalidArgument(format!(
                    "modality {:?} expects {} columns, batch has shape {:?}",
                    m.name,
                    m.data_dim,
                    v.shape()
                )));
            }
        }
        Ok(())
    }

    fn encode_one(&self, g: &mut Graph, p: &Bound, i: usize, x: Var) -> Result<GaussianVars> {
        let e = &self.encoders[i];
        let h = e.trunk.forward(g, p, x)?;
        let h = g.swish(h);
        let mh = e.mean_hidden.forward(g, p, h)?;
        let mh = g.swish(mh);
        let mean = e.mean_out.forward(g, p, mh)?;
        let lh = e.log_var_hidden.forward(g, p, h)?;
        let lh = g.swish(lh);
        let raw = e.log_var_out.forward(g, p, lh)?;
        Ok(GaussianVars::from_raw(g, mean, raw))
    }

    /// Run every encoder on every row; presence only matters at fusion time.
    pub fn encode_batch(&self, g: &mut Graph, p: &Bound, batch: &MultimodalBatch) -> Result<EncodedBatch> {
        self.check_batch(batch)?;
        let values: Vec<Var> = batch.values.iter().map(|v| g.constant(v.clone())).collect();
        let masks = (0..batch.num_modalities()).map(|i| g.constant(batch.mask_column(i))).collect();
        let experts = values
            .iter()
            .enumerate()
            .map(|(i, &x)| self.encode_one(g, p, i, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedBatch {
            values,
            masks,
            experts,
            rows: batch.rows(),
        })
    }

    /// Fuse the experts of modalities with `keep[i]`, each masked by row presence.
    pub fn fuse(&self, g: &mut Graph, enc: &EncodedBatch, keep: &[bool]) -> Result<GaussianVars> {
        let experts: Vec<ExpertVars> = (0..enc.experts.len())
            .filter(|&i| keep[i])
            .map(|i| ExpertVars {
                modality: i,
                params: enc.experts[i],
                mask: Some(enc.masks[i]),
            })
            .collect();
        poe_fuse_vars(g, &experts, true, enc.rows, self.latent_dim())
    }

    /// Reparameterized draw from the fused posterior pushed through the flow.
    pub fn sample_graph(&self, g: &mut Graph, p: &Bound, post: GaussianVars, noise: Var, probes: &[Var]) -> Result<PosteriorSample> {
        let z0 = gaussian_rsample(g, post, noise)?;
        let log_q0 = gaussian_log_prob(g, z0, post)?;
        match &self.flow {
            None => Ok(PosteriorSample {
                z0,
                log_q0,
                z: z0,
                log_q: log_q0,
            }),
            Some(net) => {
                let out = cnf_transform(g, p, net, z0, &self.config.flow, probes)?;
                let log_q = g.add(log_q0, out.delta_log_q)?;
                Ok(PosteriorSample {
                    z0,
                    log_q0,
                    z: out.z,
                    log_q,
                })
            }
        }
    }

    /// Logits for every modality.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Vec<Var>> {
        self.decoders
            .iter()
            .map(|d| {
                let h = d.hidden.forward(g, p, z)?;
                let h = g.swish(h);
                d.out.forward(g, p, h)
            })
            .collect()
    }

    /// Per-row fused posterior of the present modalities (the prior for rows with none).
    pub fn encode(&self, batch: &MultimodalBatch) -> Result<Vec<GaussianParams>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let enc = self.encode_batch(&mut g, &p, batch)?;
        let post = self.fuse(&mut g, &enc, &vec![true; self.num_modalities()])?;
        Ok(post.to_params(&g))
    }

    /// `(z_T, log q_T(z_T))` for each row of `params`. `noise` is `[B, D]`;
    /// `probes` holds [`Self::probes_per_sample`] matrices of the same shape.
    pub fn posterior_sample(&self, params: &[GaussianParams], noise: &Tensor, probes: &[Tensor]) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let post = GaussianVars::constant(&mut g, params)?;
        let noise = g.constant(noise.clone());
        let probes: Vec<Var> = probes.iter().map(|t| g.constant(t.clone())).collect();
        let s = self.sample_graph(&mut g, &p, post, noise, &probes)?;
        Ok((g.value(s.z).clone(), g.value(s.log_q).data().to_vec()))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Vec<BernoulliParams>> {
        if z.shape().len() != 2 || z.cols() != self.latent_dim() {
            return Err(Error::shape("decode", &[z.rows(), self.latent_dim()], z.shape()));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let logits = self.decode_graph(&mut g, &p, zv)?;
        logits.into_iter().map(|l| BernoulliParams::new(g.value(l).clone())).collect()
    }

    /// Standard-normal noise and Rademacher probes for `rows` samples.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> (Tensor, Vec<Tensor>) {
        let d = self.latent_dim();
        let noise = (0..rows * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let probes = (0..self.probes_per_sample()).map(|_| rademacher(rows, d, rng)).collect();
        (Tensor::new(vec![rows, d], noise).expect("shape"), probes)
    }

    /// `n` draws per row of `given`: encode, sample, flow, decode. Returns
    /// Bernoulli means for every modality as `[rows * n, dim]`, the draws of
    /// one conditioning row contiguous. Present modalities come back as
    /// reconstructions.
    pub fn generate_conditional(&self, given: &MultimodalBatch, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        self.check_batch(given)?;
        if let Some(r) = given.mask.iter().position(|m| !m.iter().any(|&x| x)) {
            return Err(Error::InvalidArgument(format!("conditioning row {r} has no present modality")));
        }
        if given.mask.iter().all(|m| m.iter().all(|&x| x)) {
            log::warn!("every modality is given; conditional generation returns reconstructions");
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let posts = self.encode(given)?;
        let rows: Vec<GaussianParams> = posts.iter().flat_map(|q| std::iter::repeat_n(q.clone(), n)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); self.num_modalities()];
        for chunk in rows.chunks(GENERATE_CHUNK) {
            let (noise, probes) = self.draw_noise(chunk.len(), &mut rng);
            let (z, _) = self.posterior_sample(chunk, &noise, &probes)?;
            for (o, b) in out.iter_mut().zip(self.decode(&z)?) {
                o.extend_from_slice(b.mean().data());
            }
        }
        self.collect(out, rows.len())
    }

    /// `n` draws of every modality from `z_T ~ N(0, I)`; empty when `n == 0`.
    pub fn generate_joint(&self, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let d = self.latent_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); self.num_modalities()];
        let mut left = n;
        while left > 0 {
            let m = left.min(GENERATE_CHUNK);
            let z: Vec<f64> = (0..m * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for (o, b) in out.iter_mut().zip(self.decode(&Tensor::new(vec![m, d], z)?)?) {
                o.extend_from_slice(b.mean().data());
            }
            left -= m;
        }
        self.collect(out, n)
    }

    fn collect(&self, out: Vec<Vec<f64>>, rows: usize) -> Result<Vec<Tensor>> {
        out.into_iter()
            .zip(&self.config.modalities)
            .map(|(v, m)| Tensor::new(vec![rows, m.data_dim], v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowConfig;

    fn tiny(variant: Variant) -> ModelConfig {
        let mut c = ModelConfig::new(
            vec![ModalitySpec::new("a", 5).with_widths(8, 4, 8), ModalitySpec::new("b", 3).with_widths(8, 4, 8)],
            2,
            variant,
        );
        c.flow_hidden = vec![6];
        c.flow = FlowConfig {
            num_steps: 5,
            ..Default::default()
        };
        c
    }

    fn batch() -> MultimodalBatch {
        MultimodalBatch::new(
            vec![
                Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 0.0, 1.0]]).unwrap(),
                Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
            ],
            vec![vec![true, true], vec![false, true]],
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Variant::Cnf);
        c.modalities[1].name = "a".into();
        assert!(MVAEModel::new(c, 0).is_err());
        let mut c = tiny(Variant::Cnf);
        c.latent_dim = 0;
        assert!(MVAEModel::new(c, 0).is_err());
        assert!(MVAEModel::new(tiny(Variant::Baseline), 0).unwrap().flow().is_none());
        assert!(MVAEModel::new(tiny(Variant::Cnf), 0).unwrap().flow().is_some());
    }

    #[test]
    fn variants_share_encoder_decoder_weights() {
        let a = MVAEModel::new(tiny(Variant::Baseline), 3).unwrap();
        let b = MVAEModel::new(tiny(Variant::Cnf), 3).unwrap();
        let n = a.store.len();
        assert_eq!(&b.store.tensors()[..n], a.store.tensors());
    }

    #[test]
    fn empty_mask_encodes_to_prior() {
        let m = MVAEModel::new(tiny(Variant::Baseline), 0).unwrap();
        let b = batch().restrict(&[false, false]);
        for q in m.encode(&b).unwrap() {
            assert_eq!(q, GaussianParams::standard(2));
        }
    }

    #[test]
    fn encode_is_deterministic_and_tightens() {
        let m = MVAEModel::new(tiny(Variant::Baseline), 1).unwrap();
        let full = m.encode(&batch()).unwrap();
        assert_eq!(full, m.encode(&batch()).unwrap());
        for keep in [[true, false], [false, true]] {
            let single = m.encode(&batch().restrict(&keep)).unwrap();
            for (f, s) in full.iter().zip(&single) {
                for (pf, ps) in f.precision().iter().zip(s.precision()) {
                    assert!(*pf >= ps);
                }
            }
        }
    }

    #[test]
    fn encode_rejects_dim_mismatch() {
        let m = MVAEModel::new(tiny(Variant::Baseline), 0).unwrap();
        let b = MultimodalBatch::full(vec![Tensor::zeros(&[1, 4]), Tensor::zeros(&[1, 3])]).unwrap();
        assert!(m.encode(&b).is_err());
    }

    #[test]
    fn zero_flow_matches_baseline_sample() {
        let base = MVAEModel::new(tiny(Variant::Baseline), 2).unwrap();
        let mut cnf = MVAEModel::new(tiny(Variant::Cnf), 2).unwrap();
        cnf.zero_flow();
        let q = base.encode(&batch()).unwrap();
        let noise = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]).unwrap();
        let (za, la) = base.posterior_sample(&q, &noise, &[]).unwrap();
        let (zb, lb) = cnf.posterior_sample(&q, &noise, &[]).unwrap();
        assert_eq!(za, zb);
        assert_eq!(la, lb);
    }

    #[test]
    fn contracting_flow_at_the_mode() {
        let mut c = tiny(Variant::Cnf);
        c.modalities.truncate(1);
        c.latent_dim = 1;
        c.flow.num_steps = 1000;
        let mut m = MVAEModel::new(c, 0).unwrap();
        let mut store = ParamStore::new();
        m.flow = Some(OdeNet::linear_dynamics(&mut store, Tensor::full(&[1, 1], -1.0)).unwrap());
        m.store = store;
        let q = vec![GaussianParams::standard(1)];
        let (z, lq) = m.posterior_sample(&q, &Tensor::zeros(&[1, 1]), &[]).unwrap();
        let lq0 = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(z.data()[0].abs() < 1e-12);
        assert!((lq[0] - (lq0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_decoder_gives_bias_logits() {
        let mut m = MVAEModel::new(tiny(Variant::Baseline), 0).unwrap();
        let w = m.decoders[0].out.weight;
        let bias = m.decoders[0].out.bias;
        m.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let out = m.decode(&Tensor::from_rows(&[vec![0.5, -0.5], vec![3.0, 1.0]]).unwrap()).unwrap();
        for r in 0..2 {
            assert_eq!(out[0].logits.row_slice(r), m.store.get(bias).data());
        }
        assert_eq!(out[1].logits.shape(), &[2, 3]);
    }

    #[test]
    fn generation_shapes_and_determinism() {
        let m = MVAEModel::new(tiny(Variant::Cnf), 4).unwrap();
        let given = batch().restrict(&[false, true]);
        let a = m.generate_conditional(&given, 7, 11).unwrap();
        assert_eq!(a[0].shape(), &[14, 5]);
        assert!(a[0].data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(a, m.generate_conditional(&given, 7, 11).unwrap());
        assert_ne!(a, m.generate_conditional(&given, 7, 12).unwrap());

        let j = m.generate_joint(300, 5).unwrap();
        assert_eq!(j[1].shape(), &[300, 3]);
        assert_eq!(j, m.generate_joint(300, 5).unwrap());
        assert!(m.generate_joint(0, 5).unwrap().is_empty());
        assert!(m.generate_conditional(&batch().restrict(&[false, false]), 2, 0).is_err());
    }
}
