//! Multimodal datasets: IDX files, the synthetic bimodal generator and
//! weak-supervision presence masks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-modality `[B, dim]` values with a `B x N` presence mask. Values of
/// absent entries are zero. Rows with no present modality are allowed here
/// (they encode to the prior); datasets never contain them.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub values: Vec<Tensor>,
    pub mask: Vec<Vec<bool>>,
}

impl MultimodalBatch {
    pub fn new(mut values: Vec<Tensor>, mask: Vec<Vec<bool>>) -> Result<Self> {
        let rows = mask.len();
        if rows == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape("batch modality", &[rows], v.shape()));
            }
            if let Some(r) = mask.iter().position(|m| m.len() != values.len()) {
                return Err(Error::InvalidArgument(format!("mask row {r} has wrong width (modality {i})")));
            }
        }
        for (i, v) in values.iter_mut().enumerate() {
            let c = v.cols();
            for (r, m) in mask.iter().enumerate() {
                if !m[i] {
                    v.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Ok(Self { values, mask })
    }

    /// All modalities present.
    pub fn full(values: Vec<Tensor>) -> Result<Self> {
        let rows = values.first().map_or(0, Tensor::rows);
        let n = values.len();
        Self::new(values, vec![vec![true; n]; rows])
    }

    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.values.len()
    }

    /// Same values, presence replaced by `mask[r][i] && keep[i]`.
    pub fn restrict(&self, keep: &[bool]) -> Self {
        let mask = self
            .mask
            .iter()
            .map(|m| m.iter().zip(keep).map(|(a, b)| *a && *b).collect())
            .collect();
        Self::new(self.values.clone(), mask).expect("restricting a valid batch")
    }

    /// `[B, 1]` 0/1 column for modality `i`.
    pub fn mask_column(&self, i: usize) -> Tensor {
        let data = self.mask.iter().map(|m| if m[i] { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.rows(), 1], data).expect("shape")
    }
}

/// Rows of multimodal data with presence masks and optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub modalities: Vec<Tensor>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(names: Vec<String>, modalities: Vec<Tensor>, mask: Vec<Vec<bool>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if names.len() != modalities.len() {
            return Err(Error::InvalidArgument("one name per modality".into()));
        }
        let batch = MultimodalBatch::new(modalities, mask)?;
        if let Some(r) = batch.mask.iter().position(|m| !m.iter().any(|&x| x)) {
            return Err(Error::InvalidArgument(format!("row {r} has no present modality")));
        }
        if let Some(l) = &labels {
            if l.len() != batch.rows() {
                return Err(Error::InvalidArgument("label count does not match rows".into()));
            }
        }
        Ok(Self {
            names,
            modalities: batch.values,
            mask: batch.mask,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(Tensor::cols).collect()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<MultimodalBatch> {
        let values = self.modalities.iter().map(|m| m.gather_rows(idx)).collect::<Result<Vec<_>>>()?;
        let mask = idx.iter().map(|&i| self.mask[i].clone()).collect();
        MultimodalBatch::new(values, mask)
    }

    pub fn all(&self) -> Result<MultimodalBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let b = self.batch(idx)?;
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Self::new(self.names.clone(), b.values, b.mask, labels)
    }

    pub fn is_fully_paired(&self) -> bool {
        self.mask.iter().all(|m| m.iter().all(|&x| x))
    }

    /// Presence counts: (all present, per-modality-only rows).
    pub fn pairing_counts(&self) -> (usize, Vec<usize>) {
        let paired = self.mask.iter().filter(|m| m.iter().all(|&x| x)).count();
        let single = (0..self.num_modalities())
            .map(|i| {
                self.mask
                    .iter()
                    .filter(|m| m[i] && m.iter().filter(|&&x| x).count() == 1)
                    .count()
            })
            .collect();
        (paired, single)
    }
}

// ---------------------------------------------------------------------- IDX

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// A tensor in the big-endian IDX layout: two zero bytes, an element-type
/// byte, a rank byte, `rank` 32-bit dimensions, then the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;

impl IdxArray {
    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::check(&dims, data.len())?;
        Ok(Self { dims, data: IdxData::U8(data) })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::check(&dims, data.len())?;
        Ok(Self { dims, data: IdxData::F32(data) })
    }

    fn check(dims: &[usize], len: usize) -> Result<()> {
        if dims.is_empty() || dims.len() > 255 || dims.iter().product::<usize>() != len {
            return Err(Error::InvalidShape {
                shape: dims.to_vec(),
                reason: format!("{len} values"),
            });
        }
        Ok(())
    }

    /// Values as reals; bytes are scaled to `[0, 1]`.
    pub fn to_unit_f64(&self) -> Vec<f64> {
        match &self.data {
            IdxData::U8(v) => v.iter().map(|&b| b as f64 / 255.0).collect(),
            IdxData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (code, payload_len) = match &self.data {
            IdxData::U8(v) => (IDX_U8, v.len()),
            IdxData::F32(v) => (IDX_F32, 4 * v.len()),
        };
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + payload_len);
        out.extend_from_slice(&[0, 0, code, self.dims.len() as u8]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        match &self.data {
            IdxData::U8(v) => out.extend_from_slice(v),
            IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Idx { offset, reason };
        if bytes.len() < 4 {
            return Err(err(bytes.len(), "file shorter than the 4-byte magic".into()));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(err(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
        }
        let width = match bytes[2] {
            IDX_U8 => 1,
            IDX_F32 => 4,
            t => return Err(err(2, format!("unsupported element type 0x{t:02x}"))),
        };
        let rank = bytes[3] as usize;
        if rank == 0 {
            return Err(err(3, "rank 0".into()));
        }
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(err(bytes.len(), format!("truncated header, need {header} bytes")));
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let need = header + count * width;
        if bytes.len() < need {
            return Err(err(bytes.len(), format!("truncated payload, need {need} bytes")));
        }
        if bytes.len() > need {
            return Err(err(need, format!("{} trailing bytes", bytes.len() - need)));
        }
        let payload = &bytes[header..need];
        let data = if width == 1 {
            IdxData::U8(payload.to_vec())
        } else {
            IdxData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        };
        Ok(Self { dims, data })
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    IdxArray::parse(&std::fs::read(path)?)
}

pub fn write_idx(path: impl AsRef<Path>, arr: &IdxArray) -> Result<()> {
    std::fs::write(path, arr.encode())?;
    Ok(())
}

/// Image file (magic 2051) as `[n, rows*cols]`, binarized at 0.5.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let arr = load_idx(path)?;
    if arr.dims.len() < 2 {
        return Err(Error::Idx {
            offset: 3,
            reason: format!("image file rank {} < 2", arr.dims.len()),
        });
    }
    let n = arr.dims[0];
    let per: usize = arr.dims[1..].iter().product();
    let data = arr.to_unit_f64().into_iter().map(|x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![n, per], data)
}

/// Label file (magic 2049) as one-hot `[n, num_classes]` plus class indices.
/// `first_label` is subtracted from every stored label (1 for EMNIST letters).
pub fn load_idx_labels(path: impl AsRef<Path>, num_classes: usize, first_label: usize) -> Result<(Tensor, Vec<usize>)> {
    let arr = load_idx(path)?;
    let IdxData::U8(raw) = &arr.data else {
        return Err(Error::Idx {
            offset: 2,
            reason: "labels must be unsigned bytes".into(),
        });
    };
    if arr.dims.len() != 1 {
        return Err(Error::Idx {
            offset: 3,
            reason: format!("label file rank {} != 1", arr.dims.len()),
        });
    }
    let mut labels = Vec::with_capacity(raw.len());
    for (i, &b) in raw.iter().enumerate() {
        let l = (b as usize).checked_sub(first_label).filter(|&l| l < num_classes).ok_or(Error::Idx {
            offset: 8 + i,
            reason: format!("label {b} outside {first_label}..{}", first_label + num_classes),
        })?;
        labels.push(l);
    }
    Ok((one_hot(&labels, num_classes), labels))
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * num_classes + l] = 1.0;
    }
    t
}

/// `[0, 1]` values as bytes, rounding to the nearest of 256 levels.
pub fn to_idx_u8(t: &Tensor, dims: Vec<usize>) -> Result<IdxArray> {
    let bytes = t.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    IdxArray::u8(dims, bytes)
}

/// Write every modality of `ds` as `<prefix>-<name>-idx2-ubyte` (plus labels when known).
pub fn export_idx(ds: &Dataset, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (name, t) in ds.names.iter().zip(&ds.modalities) {
        write_idx(dir.join(format!("{prefix}-{name}-idx2-ubyte")), &to_idx_u8(t, vec![t.rows(), t.cols()])?)?;
    }
    if let Some(labels) = &ds.labels {
        let bytes = labels.iter().map(|&l| l as u8).collect();
        write_idx(dir.join(format!("{prefix}-labels-idx1-ubyte")), &IdxArray::u8(vec![labels.len()], bytes)?)?;
    }
    Ok(())
}

// --------------------------------------------------------------- MNIST-like

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Mnist,
    Fashion,
    Kmnist,
    Emnist,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synth" => Self::Synth,
            "mnist" => Self::Mnist,
            "fashion" => Self::Fashion,
            "kmnist" => Self::Kmnist,
            "emnist" => Self::Emnist,
            _ => return Err(Error::InvalidArgument(format!("unknown dataset {s:?}"))),
        })
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Synth => "synth",
            Self::Mnist => "mnist",
            Self::Fashion => "fashion",
            Self::Kmnist => "kmnist",
            Self::Emnist => "emnist",
        })
    }
}

impl DatasetKind {
    /// (classes, value of the first label).
    pub fn label_space(self) -> (usize, usize) {
        match self {
            Self::Emnist => (26, 1),
            Self::Synth => (SyntheticSpec::default().num_classes, 0),
            _ => (10, 0),
        }
    }

    fn file_prefix(self) -> &'static str {
        match self {
            Self::Emnist => "emnist-letters-",
            _ => "",
        }
    }
}

/// Load `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir` as an image
/// + one-hot label bimodal pair. `limit` caps the training rows.
pub fn load_mnist_like(kind: DatasetKind, dir: impl AsRef<Path>, limit: Option<usize>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let (classes, first) = kind.label_space();
    let pre = kind.file_prefix();
    let load = |split: &str| -> Result<Dataset> {
        let images = load_idx_images(dir.join(format!("{pre}{split}-images-idx3-ubyte")))?;
        let (onehot, labels) = load_idx_labels(dir.join(format!("{pre}{split}-labels-idx1-ubyte")), classes, first)?;
        if images.rows() != onehot.rows() {
            return Err(Error::InvalidArgument(format!(
                "{split}: {} images but {} labels",
                images.rows(),
                onehot.rows()
            )));
        }
        let n = images.rows();
        Dataset::new(
            vec!["image".into(), "label".into()],
            vec![images, onehot],
            vec![vec![true, true]; n],
            Some(labels),
        )
    };
    let mut train = load("train")?;
    if let Some(l) = limit.filter(|&l| l < train.len()) {
        train = train.subset(&(0..l).collect::<Vec<_>>())?;
    }
    Ok((train, load("t10k")?))
}

// ---------------------------------------------------------------- synthetic

/// Bimodal toy data: a binary prototype per class with bit-flip noise, paired
/// with the one-hot class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub pattern_dim: usize,
    pub flip_noise: f64,
    pub samples_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            pattern_dim: 16,
            flip_noise: 0.05,
            samples_per_class: 250,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.pattern_dim < 8 {
            return Err(Error::InvalidArgument("pattern_dim must be at least 8".into()));
        }
        if !(0.0..=0.2).contains(&self.flip_noise) {
            return Err(Error::InvalidArgument("flip_noise must lie in [0, 0.2]".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("samples_per_class must be positive".into()));
        }
        if self.pattern_dim < 64 && (1u64 << self.pattern_dim) < self.num_classes as u64 {
            return Err(Error::InvalidArgument("too few patterns for distinct prototypes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub eval: Dataset,
    pub prototypes: Vec<Vec<f64>>,
}

/// Prototypes and noise draw from separate streams of the same seed.
pub fn synth_bimodal(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    synth_bimodal_with(spec, seed, seed)
}

/// Prototypes depend only on `prototype_seed`; row noise, order and split only on `noise_seed`.
pub fn synth_bimodal_with(spec: &SyntheticSpec, prototype_seed: u64, noise_seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(prototype_seed);
    proto_rng.set_stream(0);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    noise_rng.set_stream(1);

    let (k, p) = (spec.num_classes, spec.pattern_dim);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(k);
    while prototypes.len() < k {
        let cand: Vec<f64> = (0..p).map(|_| if proto_rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        if !prototypes.contains(&cand) {
            prototypes.push(cand);
        }
    }

    let n = k * spec.samples_per_class;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
    for (class, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x = proto
                .iter()
                .map(|&b| if noise_rng.random_bool(spec.flip_noise) { 1.0 - b } else { b })
                .collect();
            rows.push((class, x));
        }
    }
    rows.shuffle(&mut noise_rng);

    let n_train = (n * 4) / 5;
    let make = |part: &[(usize, Vec<f64>)]| -> Result<Dataset> {
        let labels: Vec<usize> = part.iter().map(|(c, _)| *c).collect();
        let x1 = Tensor::new(vec![part.len(), p], part.iter().flat_map(|(_, x)| x.iter().copied()).collect())?;
        Dataset::new(
            vec!["image".into(), "label".into()],
            vec![x1, one_hot(&labels, k)],
            vec![vec![true, true]; part.len()],
            Some(labels),
        )
    };
    Ok(SyntheticData {
        train: make(&rows[..n_train])?,
        eval: make(&rows[n_train..])?,
        prototypes,
    })
}

/// Keep `matched_fraction` of the rows fully paired and spread the rest
/// round-robin over single-modality rows.
pub fn pair_mask(ds: &Dataset, matched_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(matched_fraction > 0.0 && matched_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("matched fraction {matched_fraction} outside (0, 1]")));
    }
    if !ds.is_fully_paired() {
        return Err(Error::InvalidArgument("pair_mask needs a fully paired dataset".into()));
    }
    let n = ds.len();
    let m = ds.num_modalities();
    let paired = ((matched_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut mask = vec![vec![true; m]; n];
    for (j, &row) in order[paired..].iter().enumerate() {
        let keep = j % m;
        mask[row] = (0..m).map(|i| i == keep).collect();
    }
    Dataset::new(ds.names.clone(), ds.modalities.clone(), mask, ds.labels.clone())
}
