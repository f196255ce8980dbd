//! `train`, `eval`, `generate` and `sample-quality`.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use mvcf_core::data::{load_mnist_like, pair_mask, synth_bimodal, to_idx_u8, write_idx, Dataset, DatasetKind, MultimodalBatch};
use mvcf_core::model::MVAEModel;
use mvcf_core::train::{eval_seed, evaluate, EpochRecord, EvalMetrics, Trainer};
use mvcf_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::classifier::Classifier;
use crate::config::RunConfig;
use crate::metrics;

pub const CHECKPOINT_FILE: &str = "checkpoint.mvcf";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Train and eval splits plus the modality layout `(name, dim, image shape)`.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    pub eval: Dataset,
    pub layout: Vec<(String, usize, Option<(usize, usize)>)>,
    /// Class prototypes, synthetic data only.
    pub prototypes: Option<Vec<Vec<f64>>>,
}

fn image_shape(dim: usize) -> (usize, usize) {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side, side)
    } else {
        (1, dim)
    }
}

/// Build the datasets named by `cfg`; `matched_fraction < 1` masks the training split.
pub fn load_data(cfg: &RunConfig) -> anyhow::Result<Data> {
    let (mut train, eval, prototypes) = match cfg.dataset {
        DatasetKind::Synth => {
            let d = synth_bimodal(&cfg.synth, cfg.seed)?;
            (d.train, d.eval, Some(d.prototypes))
        }
        kind => {
            let dir = cfg.data_dir.as_ref().context("data_dir is required for IDX datasets")?;
            let (train, eval) = load_mnist_like(kind, dir, cfg.train_limit).with_context(|| format!("loading {kind} from {}", dir.display()))?;
            (train, eval, None)
        }
    };
    if cfg.matched_fraction < 1.0 {
        train = pair_mask(&train, cfg.matched_fraction, cfg.seed)?;
    }
    let layout = train
        .names
        .iter()
        .zip(train.dims())
        .map(|(n, d)| (n.clone(), d, (n == "image").then(|| image_shape(d))))
        .collect();
    Ok(Data {
        train,
        eval,
        layout,
        prototypes,
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub model: MVAEModel,
}

fn snapshot(t: &Trainer, cfg: &RunConfig) -> Checkpoint {
    Checkpoint {
        model: t.model.clone(),
        epoch: t.epoch,
        adam: t.opt.clone(),
        run_config: cfg.to_text(),
    }
}

/// Train from scratch, writing a checkpoint and one metrics line per epoch into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    let metrics_path = cfg.out.join(METRICS_FILE);
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }

    let names: Vec<String> = data.layout.iter().map(|l| l.0.clone()).collect();
    let model = MVAEModel::new(cfg.model_config(&data.layout), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train_config(&names)?)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    while !trainer.is_done() {
        let rec = trainer.run_epoch(&data.train, &data.eval).with_context(|| {
            format!(
                "epoch {} failed; last good checkpoint is {}",
                trainer.epoch,
                if trainer.epoch > 0 { ckpt_path.display().to_string() } else { "none".into() }
            )
        })?;
        log::info!("epoch {} beta {:.3} joint {:.4}", rec.epoch, rec.beta, rec.metrics.elbo_joint);
        metrics::append(&metrics_path, &metrics::record(rec.epoch, rec.beta, &rec.metrics, rec.wall_seconds, cfg.seed))?;
        snapshot(&trainer, cfg).save(&ckpt_path)?;
        records.push(rec);
    }
    Ok(TrainSummary {
        records,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        model: trainer.model,
    })
}

/// A checkpoint with the run configuration it was trained under.
pub fn open_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&ck.run_config, "checkpoint config")?;
    Ok((ck, cfg))
}

fn check_topology(model: &MVAEModel, ds: &Dataset) -> anyhow::Result<()> {
    let want: Vec<(&str, usize)> = model.config.modalities.iter().map(|m| (m.name.as_str(), m.data_dim)).collect();
    let dims = ds.dims();
    let have: Vec<(&str, usize)> = ds.names.iter().map(String::as_str).zip(dims).collect();
    ensure!(want == have, "dataset modalities {have:?} do not match checkpoint topology {want:?}");
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    /// Modality to hide from every row.
    pub mask: Option<String>,
    /// Overrides the checkpoint's `data_dir`.
    pub data_dir: Option<PathBuf>,
    /// Where `eval.json` goes; defaults to the checkpoint's directory.
    pub out: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Eval,
            mask: None,
            data_dir: None,
            out: None,
        }
    }
}

/// Six-column metrics of a checkpoint on one split, printed and saved as `eval.json`.
pub fn cmd_eval(checkpoint: &Path, opts: &EvalOptions) -> anyhow::Result<EvalMetrics> {
    let (ck, mut cfg) = open_checkpoint(checkpoint)?;
    if let Some(d) = &opts.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    let data = load_data(&cfg)?;
    let mut ds = match opts.split {
        Split::Train => data.train,
        Split::Eval => data.eval,
    };
    check_topology(&ck.model, &ds)?;
    if let Some(name) = &opts.mask {
        let i = ds.modality_index(name).with_context(|| format!("no modality named {name:?}"))?;
        let mask = ds.mask.iter().map(|m| m.iter().enumerate().map(|(j, &p)| p && j != i).collect()).collect();
        ds = Dataset::new(ds.names.clone(), ds.modalities.clone(), mask, ds.labels.clone())
            .with_context(|| format!("hiding {name:?} leaves rows with no modality"))?;
    }
    let lambda = cfg.lambdas(&ds.names)?;
    let m = evaluate(&ck.model, &ds, &lambda, cfg.eval_samples, eval_seed(cfg.seed))?;
    let rec = metrics::record(ck.epoch.saturating_sub(1), 1.0, &m, 0.0, cfg.seed);
    println!("{rec}");
    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("eval.json"), format!("{rec}\n"))?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerateMode {
    Joint,
    Conditional,
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub mode: GenerateMode,
    /// `name=k` (one-hot class `k`) or `name=v1,v2,...` (full vector).
    pub condition: Vec<String>,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Parse conditions into a one-row batch with only the named modalities present.
pub fn condition_batch(model: &MVAEModel, condition: &[String]) -> anyhow::Result<MultimodalBatch> {
    let mods = &model.config.modalities;
    let mut values: Vec<Tensor> = mods.iter().map(|m| Tensor::zeros(&[1, m.data_dim])).collect();
    let mut present = vec![false; mods.len()];
    for c in condition {
        let (name, value) = c.split_once('=').with_context(|| format!("condition {c:?} is not name=value"))?;
        let i = model.config.modality_index(name.trim()).with_context(|| format!("no modality named {name:?}"))?;
        ensure!(!present[i], "modality {name:?} conditioned twice");
        let dim = mods[i].data_dim;
        let v: Vec<f64> = if value.contains(',') {
            let v = value.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
            ensure!(v.len() == dim, "condition for {name:?} has {} values, modality dimension is {dim}", v.len());
            v
        } else {
            let k: usize = value.trim().parse().with_context(|| format!("condition {c:?}: expected a class index or a vector"))?;
            ensure!(k < dim, "class {k} out of range for {name:?} (dimension {dim})");
            (0..dim).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
        };
        values[i] = Tensor::new(vec![1, dim], v)?;
        present[i] = true;
    }
    ensure!(present.iter().any(|&p| p), "conditional generation needs at least one condition");
    Ok(MultimodalBatch::new(values, vec![present])?)
}

/// Portable graymap tiling `images` (`[n, h*w]` in `[0, 1]`) on a square-ish grid.
pub fn contact_sheet(images: &Tensor, h: usize, w: usize) -> Vec<u8> {
    let n = images.rows();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; width * height];
    for k in 0..n {
        let (gy, gx) = (k / cols, k % cols);
        let img = images.row_slice(k);
        for y in 0..h {
            for x in 0..w {
                let v = (img[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                px[(1 + gy * (h + 1) + y) * width + 1 + gx * (w + 1) + x] = v;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}

/// Write samples as IDX (`samples-<name>-idx*-ubyte`) plus `.pgm` sheets for images.
pub fn cmd_generate(checkpoint: &Path, opts: &GenerateOptions) -> anyhow::Result<Vec<PathBuf>> {
    ensure!(opts.n > 0, "n must be at least 1");
    let (ck, _) = open_checkpoint(checkpoint)?;
    let model = &ck.model;
    let samples = match opts.mode {
        GenerateMode::Joint => {
            ensure!(opts.condition.is_empty(), "joint generation takes no condition");
            model.generate_joint(opts.n, opts.seed)?
        }
        GenerateMode::Conditional => model.generate_conditional(&condition_batch(model, &opts.condition)?, opts.n, opts.seed)?,
    };
    std::fs::create_dir_all(&opts.out)?;
    let mut written = Vec::new();
    for (t, spec) in samples.iter().zip(&model.config.modalities) {
        let (dims, rank) = match spec.image_shape {
            Some((h, w)) => (vec![t.rows(), h, w], 3),
            None => (vec![t.rows(), t.cols()], 2),
        };
        let path = opts.out.join(format!("samples-{}-idx{rank}-ubyte", spec.name));
        write_idx(&path, &to_idx_u8(t, dims)?)?;
        written.push(path);
        if let Some((h, w)) = spec.image_shape {
            let path = opts.out.join(format!("samples-{}.pgm", spec.name));
            std::fs::write(&path, contact_sheet(t, h, w))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// Judge accuracy on held-out real data.
    pub judge_accuracy: f64,
    pub samples_per_class: usize,
}

fn image_label(model: &MVAEModel) -> anyhow::Result<(usize, usize)> {
    let image = model.config.modality_index("image").context("sample quality needs an \"image\" modality")?;
    let label = model.config.modality_index("label").context("sample quality needs a \"label\" modality")?;
    Ok((image, label))
}

fn rows_with(ds: &Dataset, i: usize) -> anyhow::Result<(Tensor, Vec<usize>)> {
    let labels = ds.labels.as_ref().context("dataset has no class labels")?;
    let idx: Vec<usize> = (0..ds.len()).filter(|&r| ds.mask[r][i]).collect();
    Ok((ds.modalities[i].gather_rows(&idx)?, idx.iter().map(|&r| labels[r]).collect()))
}

/// Accuracy of a classifier trained on real images when judging label-conditioned samples.
pub fn sample_quality(a: &MVAEModel, b: &MVAEModel, data: &Data, n: usize, seed: u64) -> anyhow::Result<QualityReport> {
    ensure!(n > 0, "n must be at least 1");
    check_topology(a, &data.eval)?;
    check_topology(b, &data.eval)?;
    let (image, label) = image_label(a)?;
    let classes = data.eval.dims()[label];

    let (x, y) = rows_with(&data.train, image)?;
    let judge = Classifier::train(&x, &y, classes, seed)?;
    let (xe, ye) = rows_with(&data.eval, image)?;
    let judge_accuracy = judge.accuracy(&xe, &ye)?;
    let floor = 1.5 / classes as f64;
    if judge_accuracy < floor {
        bail!("judge classifier reaches {judge_accuracy:.3} on held-out data, below 1.5x chance ({floor:.3}); it cannot rank samples");
    }

    let per = n.div_ceil(classes);
    let mut values: Vec<Tensor> = a.config.modalities.iter().map(|m| Tensor::zeros(&[classes, m.data_dim])).collect();
    for k in 0..classes {
        values[label].data_mut()[k * classes + k] = 1.0;
    }
    let mask = (0..classes).map(|_| (0..values.len()).map(|j| j == label).collect()).collect();
    let given = MultimodalBatch::new(values, mask)?;
    let truth: Vec<usize> = (0..classes).flat_map(|k| std::iter::repeat_n(k, per)).collect();
    let score = |m: &MVAEModel| -> anyhow::Result<f64> {
        let s = m.generate_conditional(&given, per, seed)?;
        Ok(judge.accuracy(&s[image], &truth)?)
    };
    Ok(QualityReport {
        accuracy_a: score(a)?,
        accuracy_b: score(b)?,
        judge_accuracy,
        samples_per_class: per,
    })
}

/// [`sample_quality`] on two checkpoints, using the first one's dataset.
pub fn cmd_sample_quality(checkpoint_a: &Path, checkpoint_b: &Path, n: usize, seed: u64) -> anyhow::Result<QualityReport> {
    let (a, cfg) = open_checkpoint(checkpoint_a)?;
    let (b, _) = open_checkpoint(checkpoint_b)?;
    let data = load_data(&cfg)?;
    let r = sample_quality(&a.model, &b.model, &data, n, seed)?;
    println!(
        "{}",
        serde_json::json!({
            "accuracy_a": r.accuracy_a,
            "accuracy_b": r.accuracy_b,
            "judge_accuracy": r.judge_accuracy,
            "samples_per_class": r.samples_per_class,
        })
    );
    Ok(r)
}
