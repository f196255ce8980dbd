//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `b"MVCF"`, `u32` version, the model topology, the
//! parameter blocks (name, shape, `f32` values), the training state (epoch
//! and Adam moments as `f32`), the run-config text, then a CRC-32 of every
//! preceding byte.

use std::path::Path;

use mvcf_core::flows::{FlowConfig, TraceMode};
use mvcf_core::model::{KlEstimator, Likelihood, MVAEModel, ModalitySpec, ModelConfig, Variant};
use mvcf_core::nn::{Adam, AdamConfig};
use mvcf_core::Tensor;

pub const MAGIC: &[u8; 4] = b"MVCF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error(transparent)]
    Model(#[from] mvcf_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MVAEModel,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Adam,
    /// Run configuration in `key = value` form.
    pub run_config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values(&mut self, t: &Tensor) {
        for &x in t.data() {
            self.0.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.bad(at, "string is not UTF-8"))
    }
    fn values(&mut self, shape: &[usize]) -> Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(self.buf.len()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
    fn bad(&self, offset: usize, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            offset,
            reason: reason.into(),
        }
    }
}

fn write_topology(w: &mut Writer, c: &ModelConfig) {
    w.u32(c.modalities.len());
    for m in &c.modalities {
        w.str(&m.name);
        w.u32(m.data_dim);
        w.u32(m.encoder_hidden);
        w.u32(m.head_hidden);
        w.u32(m.decoder_hidden);
        w.u8(match m.likelihood {
            Likelihood::Bernoulli => 0,
        });
        match m.image_shape {
            Some((h, wd)) => {
                w.u8(1);
                w.u32(h);
                w.u32(wd);
            }
            None => w.u8(0),
        }
    }
    w.u32(c.latent_dim);
    w.u8(match c.variant {
        Variant::Baseline => 0,
        Variant::Cnf => 1,
    });
    w.u32(c.flow.num_steps);
    w.f64(c.flow.t0);
    w.f64(c.flow.t1);
    w.u8(match c.flow.trace_mode {
        TraceMode::Exact => 0,
        TraceMode::Hutchinson => 1,
    });
    w.u32(c.flow.hutchinson_probes);
    w.u32(c.flow_hidden.len());
    c.flow_hidden.iter().for_each(|&h| w.u32(h));
    w.u8(match c.baseline_kl {
        KlEstimator::Analytic => 0,
        KlEstimator::MonteCarlo => 1,
    });
}

fn read_topology(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    let n = r.u32()?;
    let mut modalities = Vec::with_capacity(n.min(16));
    for _ in 0..n {
        let name = r.str()?;
        let data_dim = r.u32()?;
        let mut m = ModalitySpec::new(name, data_dim).with_widths(r.u32()?, r.u32()?, r.u32()?);
        let at = r.pos;
        m.likelihood = match r.u8()? {
            0 => Likelihood::Bernoulli,
            t => return Err(r.bad(at, format!("unknown likelihood tag {t}"))),
        };
        if r.u8()? == 1 {
            m = m.with_image_shape(r.u32()?, r.u32()?);
        }
        modalities.push(m);
    }
    let latent_dim = r.u32()?;
    let at = r.pos;
    let variant = match r.u8()? {
        0 => Variant::Baseline,
        1 => Variant::Cnf,
        t => return Err(r.bad(at, format!("unknown variant tag {t}"))),
    };
    let num_steps = r.u32()?;
    let t0 = r.f64()?;
    let t1 = r.f64()?;
    let at = r.pos;
    let trace_mode = match r.u8()? {
        0 => TraceMode::Exact,
        1 => TraceMode::Hutchinson,
        t => return Err(r.bad(at, format!("unknown trace tag {t}"))),
    };
    let hutchinson_probes = r.u32()?;
    let layers = r.u32()?;
    let flow_hidden = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let at = r.pos;
    let baseline_kl = match r.u8()? {
        0 => KlEstimator::Analytic,
        1 => KlEstimator::MonteCarlo,
        t => return Err(r.bad(at, format!("unknown kl tag {t}"))),
    };
    let mut c = ModelConfig::new(modalities, latent_dim, variant);
    c.flow = FlowConfig {
        num_steps,
        t0,
        t1,
        trace_mode,
        hutchinson_probes,
    };
    c.flow_hidden = flow_hidden;
    c.baseline_kl = baseline_kl;
    Ok(c)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        write_topology(&mut w, &self.model.config);

        w.u32(self.model.store.len());
        for (name, t) in self.model.store.iter() {
            w.str(name);
            w.u32(t.shape().len());
            t.shape().iter().for_each(|&d| w.u32(d));
            w.values(t);
        }

        w.u64(self.epoch as u64);
        let AdamConfig { lr, beta1, beta2, eps } = self.adam.config;
        [lr, beta1, beta2, eps].into_iter().for_each(|x| w.f64(x));
        w.u64(self.adam.step);
        self.adam.m.iter().chain(&self.adam.v).for_each(|t| w.values(t));

        w.str(&self.run_config);
        let crc = crc32fast::hash(&w.0);
        w.u32(crc as usize);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic(bytes[..4].try_into().expect("4 bytes")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = read_topology(&mut r)?;
        let mut model = MVAEModel::new(config, 0)?;

        let count = r.u32()?;
        if count != model.store.len() {
            return Err(r.bad(r.pos, format!("{count} parameter blocks, topology implies {}", model.store.len())));
        }
        let expected: Vec<(String, Vec<usize>)> = model.store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let mut values = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let at = r.pos;
            let got = r.str()?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            if &got != name || &dims != shape {
                return Err(r.bad(at, format!("parameter {got:?} {dims:?}, expected {name:?} {shape:?}")));
            }
            values.push(r.values(shape)?);
        }
        model.store.load_values(values)?;

        let epoch = r.u64()? as usize;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut adam = Adam::new(config, &model.store);
        adam.step = r.u64()?;
        for (i, (_, shape)) in expected.iter().enumerate() {
            adam.m[i] = r.values(shape)?;
        }
        for (i, (_, shape)) in expected.iter().enumerate() {
            adam.v[i] = r.values(shape)?;
        }
        let run_config = r.str()?;
        if r.pos != body.len() {
            return Err(r.bad(r.pos, format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            model,
            epoch,
            adam,
            run_config,
        })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}
