//! Downstream evaluation: Dice, a small transposed-convolution segmentation
//! head over encoder patch tokens, linear and end-to-end fine-tuning with
//! label-fraction subsets, and the pre-training convergence comparison.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::patch::{patchify, MaskedView};
use crate::pretrain::{load_pretrained, train_on, Mode, Precision, PretrainConfig};
use crate::views::{crop_labeled, CropGeometry, View};
use crate::vit::{init_params, Encoder, Linear, ModelConfig, ParamStore, PatchBatch};
use crate::volume::{numel, synth_volumes, DatasetManifest, LabeledVolume, Shape3, Volume};

/// Per-class Dice (index `c - 1` holds class `c`; `None` when the class is
/// absent from both inputs) and their mean, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn dice(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<DiceScores> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("prediction has {} voxels, ground truth {}", pred.len(), gt.len())));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("dice needs at least two classes".into()));
    }
    let mut inter = vec![0usize; num_classes];
    let mut np = vec![0usize; num_classes];
    let mut ng = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::InvalidArgument(format!("label {} outside {num_classes} classes", p.max(g))));
        }
        np[p] += 1;
        ng[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (1..num_classes)
        .map(|c| {
            let denom = np[c] + ng[c];
            (denom > 0).then(|| 100.0 * 2.0 * inter[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::DegenerateInput("no foreground class in prediction or ground truth".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(DiceScores { per_class, mean })
}

/// Number of 2x upsampling stages taking a patch grid back to voxels.
pub fn head_stages(patch: Shape3) -> Result<usize> {
    if patch[0] != patch[1] || patch[1] != patch[2] || !patch[0].is_power_of_two() || patch[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "segmentation head needs a cubic power-of-two patch, got {patch:?}"
        )));
    }
    Ok(patch[0].trailing_zeros() as usize)
}

fn head_widths(embed_dim: usize, stages: usize) -> Vec<usize> {
    let mut w = vec![embed_dim];
    for _ in 0..stages {
        w.push((w.last().unwrap() / 2).max(8));
    }
    w
}

/// Xavier-initialized segmentation head parameters under `seg_head.`.
pub fn init_seg_head(model: &ModelConfig, num_classes: usize, seed: u64, dtype: DType) -> Result<ParamStore> {
    let stages = head_stages(model.encoder.patch_size)?;
    let widths = head_widths(model.encoder.embed_dim, stages);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(dtype);
    let mut add = |store: &mut ParamStore, name: String, fan_in: usize, out: usize, bias_len: usize| -> Result<()> {
        let a = (6.0 / (fan_in + out) as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a).expect("valid range");
        let w: Vec<f64> = (0..fan_in * out).map(|_| u.sample(&mut rng)).collect();
        store.insert(format!("{name}.weight"), Tensor::from_vec(w, (fan_in, out), &Device::Cpu)?)?;
        store.insert(format!("{name}.bias"), Tensor::zeros(bias_len, DType::F64, &Device::Cpu)?)?;
        Ok(())
    };
    for s in 0..stages {
        let (cin, cout) = (widths[s], widths[s + 1]);
        add(&mut store, format!("seg_head.stage{s}"), cin, 8 * cout, cout)?;
    }
    add(&mut store, "seg_head.classifier".into(), widths[stages], num_classes, num_classes)?;
    Ok(store)
}

/// Patch tokens reassembled on their grid, upsampled by `stages` kernel-2
/// stride-2 transposed convolutions with GELU, then a per-voxel classifier.
pub struct SegHead {
    stages: Vec<(Tensor, Tensor)>,
    classifier: Linear,
}

impl SegHead {
    pub fn load(p: &ParamStore, model: &ModelConfig) -> Result<Self> {
        let n = head_stages(model.encoder.patch_size)?;
        let stages = (0..n)
            .map(|s| {
                let w = p.get(&format!("seg_head.stage{s}.weight"))?.as_tensor().clone();
                let b = p.get(&format!("seg_head.stage{s}.bias"))?.as_tensor().clone();
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages, classifier: Linear::load(p, "seg_head.classifier")? })
    }

    /// `tokens` is `[N, V, D]` in grid order; returns logits `[N, X, Y, Z, C]`.
    pub fn forward(&self, tokens: &Tensor, grid: Shape3) -> Result<Tensor> {
        let (n, v, d) = tokens.dims3()?;
        if v != numel(grid) {
            return Err(Error::ShapeMismatch(format!("{v} tokens for grid {grid:?}")));
        }
        let mut x = tokens.reshape((n * v, d))?;
        let mut g = grid;
        for (w, b) in &self.stages {
            let cout = b.dim(0)?;
            let y = x.matmul(w)?;
            let y = y
                .reshape(vec![n, g[0], g[1], g[2], 2, 2, 2, cout])?
                .permute(vec![0, 1, 4, 2, 5, 3, 6, 7])?
                .contiguous()?;
            g = [2 * g[0], 2 * g[1], 2 * g[2]];
            x = y.reshape((n * numel(g), cout))?.broadcast_add(b)?.gelu_erf()?;
        }
        let logits = self.classifier.forward(&x)?;
        let c = logits.dim(1)?;
        Ok(logits.reshape(vec![n, g[0], g[1], g[2], c])?)
    }
}

/// Mean voxel cross-entropy of `logits` `[M, C]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (m, c) = logits.dims2()?;
    if labels.len() != m {
        return Err(Error::ShapeMismatch(format!("{m} logits rows, {} labels", labels.len())));
    }
    let mut onehot = vec![0f32; m * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (m, c), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    Ok((logp * onehot)?.sum_all()?.affine(-1.0 / m as f64, 0.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Frozen encoder, head only.
    #[default]
    Linear,
    /// Encoder and head trained together.
    E2e,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FinetuneMode::Linear),
            "e2e" => Ok(FinetuneMode::E2e),
            other => Err(Error::InvalidArgument(format!("unknown fine-tuning mode `{other}`"))),
        }
    }
}

/// Labeled data for fine-tuning: a manifest of labeled volumes or a
/// synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabeledSource {
    Manifest(PathBuf),
    Synthetic { n: usize, shape: Shape3, num_classes: usize, seed: u64 },
}

impl LabeledSource {
    /// The fixed desk benchmark: 20 volumes of 64^3 with 3 classes
    /// (background plus two structures).
    pub fn desk_benchmark() -> Self {
        LabeledSource::Synthetic { n: 20, shape: [64; 3], num_classes: 3, seed: 20_240 }
    }

    pub fn load(&self) -> Result<Vec<LabeledVolume>> {
        match self {
            LabeledSource::Manifest(path) => DatasetManifest::load(path)?.load_labeled(),
            LabeledSource::Synthetic { n, shape, num_classes, seed } => synth_volumes(*n, *shape, *num_classes, *seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub data: LabeledSource,
    pub mode: FinetuneMode,
    pub label_fraction: f64,
    pub test_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub crop_size: Shape3,
    pub seed: u64,
    /// Model used for random-init runs; pretrained runs take the
    /// checkpoint's model.
    pub model: ModelConfig,
    pub precision: Precision,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            data: LabeledSource::desk_benchmark(),
            mode: FinetuneMode::Linear,
            label_fraction: 1.0,
            test_fraction: 0.2,
            steps: 300,
            batch_size: 4,
            lr: 1e-4,
            optimizer: AdamWConfig::default(),
            crop_size: [16; 3],
            seed: 0,
            model: ModelConfig::desk(),
            precision: Precision::F32,
        }
    }
}

impl FinetuneConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("label fraction {} outside (0, 1]", self.label_fraction)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("test fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Held-out test volumes and the pool that label-fraction subsets are drawn
/// from, both as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub test: Vec<usize>,
    pub pool: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        let n_test = (test_fraction * n as f64).ceil() as usize;
        if n < 2 || n_test == 0 || n_test >= n {
            return Err(Error::InvalidArgument(format!("cannot split {n} volumes with test fraction {test_fraction}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pool = order.split_off(n_test);
        Ok(Self { test: order, pool })
    }

    /// The first `ceil(fraction * |pool|)` pool entries, so smaller fractions
    /// are prefixes of larger ones.
    pub fn train_subset(&self, fraction: f64) -> Result<&[usize]> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("label fraction {fraction} outside (0, 1]")));
        }
        let k = ((fraction * self.pool.len() as f64).ceil() as usize).clamp(1, self.pool.len());
        Ok(&self.pool[..k])
    }

    pub fn test_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.test.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_dice: Vec<Option<f64>>,
    pub mean_dice: f64,
    /// Mean Dice of the same model before any fine-tuning step.
    pub untrained_mean_dice: Option<f64>,
    pub label_fraction: f64,
    pub mode: FinetuneMode,
    pub checkpoint: Option<String>,
    pub train_volumes: Vec<usize>,
    pub test_split_hash: u64,
    pub config: FinetuneConfig,
}

/// Encoder weights a fine-tuning run starts from.
pub enum EncoderInit {
    Pretrained { params: ParamStore, model: ModelConfig, id: String },
    Random,
}

impl EncoderInit {
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (params, cfg) = load_pretrained(dir)?;
        Ok(EncoderInit::Pretrained { params, model: cfg.model, id: dir.display().to_string() })
    }
}

fn encoder_only(mut params: ParamStore) -> ParamStore {
    params.split_off_prefix("student.encoder.")
}

/// Patch tokens `[N, V, D]` for unmasked views.
fn encode_views(params: &ParamStore, model: &ModelConfig, views: &[View]) -> Result<(Tensor, Shape3)> {
    let masked: Vec<MaskedView> = views
        .iter()
        .map(|v| Ok(MaskedView::unmasked(patchify(v, model.encoder.patch_size)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<&MaskedView> = masked.iter().collect();
    let batch = PatchBatch::from_masked(&refs, params.dtype())?;
    let enc = Encoder::load(params, "student.encoder", model)?.forward(&batch)?;
    Ok((enc.patch_tokens, batch.grid))
}

fn tile_origins(len: usize, tile: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..len / tile).map(|i| i * tile).collect();
    if len % tile != 0 {
        out.push(len - tile);
    }
    out
}

/// Voxel-wise prediction over a whole volume by non-overlapping tiles of
/// `crop` (the last tile along an axis is shifted inward to fit).
pub fn predict_volume(params: &ParamStore, model: &ModelConfig, lv: &LabeledVolume, crop: Shape3) -> Result<Vec<u8>> {
    let shape = lv.shape();
    if (0..3).any(|i| shape[i] < crop[i]) {
        return Err(Error::InvalidArgument(format!("volume {shape:?} smaller than crop {crop:?}")));
    }
    let head = SegHead::load(params, model)?;
    let mut pred = vec![0u8; numel(shape)];
    let origins: Vec<Shape3> = tile_origins(shape[0], crop[0])
        .into_iter()
        .flat_map(|a| {
            let ys = tile_origins(shape[1], crop[1]);
            let zs = tile_origins(shape[2], crop[2]);
            ys.into_iter().flat_map(move |b| zs.clone().into_iter().map(move |c| [a, b, c]))
        })
        .collect();
    for chunk in origins.chunks(8) {
        let views: Vec<View> = chunk
            .iter()
            .map(|&o| {
                let g = CropGeometry { origin: o, extent: crop, source_shape: shape };
                crop_labeled(lv, &g, crop).0
            })
            .collect();
        let (tokens, grid) = encode_views(params, model, &views)?;
        let logits = head.forward(&tokens, grid)?;
        let labels = logits.argmax(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?;
        let per = numel(crop);
        for (k, o) in chunk.iter().enumerate() {
            for x in 0..crop[0] {
                for y in 0..crop[1] {
                    for z in 0..crop[2] {
                        let src = (x * crop[1] + y) * crop[2] + z;
                        let dst = ((o[0] + x) * shape[1] + o[1] + y) * shape[2] + o[2] + z;
                        pred[dst] = labels[k * per + src] as u8;
                    }
                }
            }
        }
    }
    Ok(pred)
}

/// Per-class Dice averaged over volumes where the class is present, and the
/// mean over volumes of each volume's mean Dice.
pub fn evaluate(params: &ParamStore, model: &ModelConfig, volumes: &[&LabeledVolume], crop: Shape3) -> Result<DiceScores> {
    if volumes.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let nc = volumes[0].num_classes();
    let mut sums = vec![(0.0, 0usize); nc - 1];
    let mut mean = 0.0;
    for lv in volumes {
        let pred = predict_volume(params, model, lv, crop)?;
        let d = dice(&pred, lv.labels(), nc)?;
        for (acc, c) in sums.iter_mut().zip(&d.per_class) {
            if let Some(v) = c {
                acc.0 += v;
                acc.1 += 1;
            }
        }
        mean += d.mean;
    }
    Ok(DiceScores {
        per_class: sums.iter().map(|&(s, k)| (k > 0).then(|| s / k as f64)).collect(),
        mean: mean / volumes.len() as f64,
    })
}

fn sample_training_batch(
    data: &[LabeledVolume],
    train: &[usize],
    crop: Shape3,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<View>, Vec<u8>)> {
    let mut views = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch * numel(crop));
    for _ in 0..batch {
        let lv = &data[train[rng.random_range(0..train.len())]];
        let shape = lv.shape();
        if (0..3).any(|i| shape[i] < crop[i]) {
            return Err(Error::InvalidArgument(format!("volume {shape:?} smaller than crop {crop:?}")));
        }
        let origin = [0, 1, 2].map(|i| rng.random_range(0..=shape[i] - crop[i]));
        let (v, l) = crop_labeled(lv, &CropGeometry { origin, extent: crop, source_shape: shape }, crop);
        views.push(v);
        labels.extend(l);
    }
    Ok((views, labels))
}

/// Fine-tunes a segmentation head (and, in e2e mode, the encoder) on the
/// label-fraction subset of the non-test pool and reports held-out Dice.
/// Returns the report together with the fine-tuned parameters.
pub fn finetune(init: EncoderInit, data: &[LabeledVolume], cfg: &FinetuneConfig) -> Result<(EvalReport, ParamStore)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("labeled dataset"));
    }
    let num_classes = data[0].num_classes();
    if data.iter().any(|lv| lv.num_classes() != num_classes) {
        return Err(Error::InvalidArgument("labeled volumes disagree on num_classes".into()));
    }
    let dtype = cfg.precision.dtype();
    let (encoder, model, checkpoint) = match init {
        EncoderInit::Pretrained { params, model, id } => {
            let enc = encoder_only(params);
            let enc = if enc.dtype() == dtype { enc } else { convert(&enc, dtype)? };
            (enc, model, Some(id))
        }
        EncoderInit::Random => (encoder_only(init_params(&cfg.model, cfg.seed, dtype)?), cfg.model.clone(), None),
    };
    if encoder.is_empty() {
        return Err(Error::IncompatibleCheckpoint("checkpoint holds no student encoder".into()));
    }
    Encoder::load(&encoder, "student.encoder", &model)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("encoder does not match its config: {e}")))?;
    let frozen = encoder.deep_copy()?;
    let mut params = encoder;
    params.merge(init_seg_head(&model, num_classes, cfg.seed ^ 0x5E6, dtype)?);

    let split = Split::new(data.len(), cfg.test_fraction, cfg.seed)?;
    let train = split.train_subset(cfg.label_fraction)?.to_vec();
    let test: Vec<&LabeledVolume> = split.test.iter().map(|&i| &data[i]).collect();
    let untrained = evaluate(&params, &model, &test, cfg.crop_size)?;

    let prefix = match cfg.mode {
        FinetuneMode::Linear => "seg_head.",
        FinetuneMode::E2e => "",
    };
    let mut opt = AdamW::for_prefix(&params, prefix, cfg.optimizer);
    let head = SegHead::load(&params, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xF1E));
    for _ in 0..cfg.steps {
        let (views, labels) = sample_training_batch(data, &train, cfg.crop_size, cfg.batch_size, &mut rng)?;
        let (tokens, grid) = encode_views(&params, &model, &views)?;
        let tokens = match cfg.mode {
            FinetuneMode::Linear => tokens.detach(),
            FinetuneMode::E2e => tokens,
        };
        let logits = head.forward(&tokens, grid)?;
        let flat = logits.reshape(((), num_classes))?;
        let loss = cross_entropy(&flat, &labels)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss("cross_entropy"));
        }
        opt.step(&params, &loss.backward()?, cfg.lr)?;
    }

    if cfg.mode == FinetuneMode::Linear {
        let mut enc_now = params.clone();
        let enc_now = enc_now.split_off_prefix("student.encoder.");
        if !enc_now.bit_equal(&frozen)? {
            return Err(Error::DegenerateInput("frozen encoder changed during linear evaluation".into()));
        }
    }
    let scores = evaluate(&params, &model, &test, cfg.crop_size)?;
    let report = EvalReport {
        per_class_dice: scores.per_class,
        mean_dice: scores.mean,
        untrained_mean_dice: Some(untrained.mean),
        label_fraction: cfg.label_fraction,
        mode: cfg.mode,
        checkpoint,
        train_volumes: train,
        test_split_hash: split.test_hash(),
        config: cfg.clone(),
    };
    Ok((report, params))
}

fn convert(p: &ParamStore, dtype: DType) -> Result<ParamStore> {
    let mut out = ParamStore::new(dtype);
    for (name, t) in p.tensors() {
        out.insert(name, t)?;
    }
    Ok(out)
}

pub fn linear_eval(checkpoint: &Path, data: &[LabeledVolume], cfg: &FinetuneConfig) -> Result<EvalReport> {
    let cfg = FinetuneConfig { mode: FinetuneMode::Linear, ..cfg.clone() };
    Ok(finetune(EncoderInit::from_checkpoint(checkpoint)?, data, &cfg)?.0)
}

/// End-to-end fine-tuning; `checkpoint = None` is the random-init baseline.
pub fn e2e_finetune(checkpoint: Option<&Path>, data: &[LabeledVolume], cfg: &FinetuneConfig) -> Result<EvalReport> {
    let cfg = FinetuneConfig { mode: FinetuneMode::E2e, ..cfg.clone() };
    let init = match checkpoint {
        Some(dir) => EncoderInit::from_checkpoint(dir)?,
        None => EncoderInit::Random,
    };
    Ok(finetune(init, data, &cfg)?.0)
}

/// One fine-tuning report per label fraction.
pub fn label_fraction_sweep(
    checkpoint: Option<&Path>,
    data: &[LabeledVolume],
    cfg: &FinetuneConfig,
    fractions: &[f64],
) -> Result<Vec<EvalReport>> {
    fractions
        .iter()
        .map(|&f| {
            let cfg = FinetuneConfig { label_fraction: f, ..cfg.clone() };
            let init = match checkpoint {
                Some(dir) => EncoderInit::from_checkpoint(dir)?,
                None => EncoderInit::Random,
            };
            Ok(finetune(init, data, &cfg)?.0)
        })
        .collect()
}

/// Config echo stored in the manifest of a fine-tuned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunedManifest {
    pub finetune: FinetuneConfig,
    pub model: ModelConfig,
    pub num_classes: usize,
}

/// Saves encoder plus segmentation head; no optimizer state is kept.
pub fn save_finetuned(dir: &Path, params: &ParamStore, model: &ModelConfig, cfg: &FinetuneConfig, num_classes: usize) -> Result<()> {
    let echo = FinetunedManifest { finetune: cfg.clone(), model: model.clone(), num_classes };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: serde_json::to_value(echo)?,
        step: cfg.steps,
        partial: false,
        optimizer_steps: 0,
    };
    save_checkpoint(dir, params, Default::default(), &manifest)
}

/// Held-out Dice of a checkpoint. A fine-tuned checkpoint is evaluated as
/// is on its own split; a pre-training checkpoint gets a linear evaluation
/// under `fallback`.
pub fn evaluate_checkpoint(dir: &Path, fallback: &FinetuneConfig) -> Result<EvalReport> {
    let ck = load_checkpoint(dir)?;
    if !ck.params.names().any(|n| n.starts_with("seg_head.")) {
        let data = fallback.data.load()?;
        return linear_eval(dir, &data, fallback);
    }
    let echo: FinetunedManifest = serde_json::from_value(ck.manifest.config)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("not a fine-tuned checkpoint: {e}")))?;
    let cfg = echo.finetune;
    let data = cfg.data.load()?;
    let split = Split::new(data.len(), cfg.test_fraction, cfg.seed)?;
    let test: Vec<&LabeledVolume> = split.test.iter().map(|&i| &data[i]).collect();
    let scores = evaluate(&ck.params, &echo.model, &test, cfg.crop_size)?;
    Ok(EvalReport {
        per_class_dice: scores.per_class,
        mean_dice: scores.mean,
        untrained_mean_dice: None,
        label_fraction: cfg.label_fraction,
        mode: cfg.mode,
        checkpoint: Some(dir.display().to_string()),
        train_volumes: split.train_subset(cfg.label_fraction)?.to_vec(),
        test_split_hash: split.test_hash(),
        config: cfg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub epoch: usize,
    pub mean_dice: f64,
    pub seed: u64,
    #[serde(skip)]
    pub test_split_hash: u64,
}

pub const COMPARE_HEADER: &str = "mode,epoch,mean_dice,seed";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        let mode = match r.mode {
            Mode::Glmae => "glmae",
            Mode::Mae3d => "mae3d",
            Mode::DownsampleMae => "downsample_mae",
        };
        s.push_str(&format!("{mode},{},{:.4},{}\n", r.epoch, r.mean_dice, r.seed));
    }
    s
}

/// Pre-trains GL-MAE and MAE3D on the non-test images of `data` with the
/// same seeds, stopping at each probe epoch to run a linear evaluation.
/// Writes `compare.csv` and `compare.png` into `out_dir`.
pub fn convergence_compare(
    pretrain: &PretrainConfig,
    finetune_cfg: &FinetuneConfig,
    data: &[LabeledVolume],
    probe_epochs: &[usize],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<CompareRow>> {
    if probe_epochs.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("probe epochs or seeds"));
    }
    let mut probes = probe_epochs.to_vec();
    probes.sort_unstable();
    probes.dedup();
    if probes[0] == 0 {
        return Err(Error::InvalidArgument("probe epochs must be positive".into()));
    }
    let split = Split::new(data.len(), finetune_cfg.test_fraction, finetune_cfg.seed)?;
    let images: Vec<Volume> = split.pool.iter().map(|&i| data[i].volume.clone()).collect();
    let spe = crate::pretrain::steps_per_epoch(images.len(), pretrain.batch_size);
    let mut rows = Vec::new();
    for &seed in seeds {
        for mode in [Mode::Glmae, Mode::Mae3d] {
            let run_dir = out_dir.join(format!("{}_seed{seed}", mode_name(mode)));
            let mut cfg = PretrainConfig {
                mode,
                seed,
                epochs: *probes.last().unwrap(),
                out_dir: run_dir,
                checkpoint_every: 0,
                resume: None,
                ..pretrain.clone()
            };
            for &epoch in &probes {
                cfg.stop_after = Some(epoch * spe);
                let report = train_on(&images, &cfg)?;
                // one split for every run, so no test volume is pre-trained on
                let eval = linear_eval(&report.final_checkpoint, data, finetune_cfg)?;
                log::info!("{} seed {seed} epoch {epoch}: mean dice {:.2}", mode_name(mode), eval.mean_dice);
                rows.push(CompareRow {
                    mode,
                    epoch,
                    mean_dice: eval.mean_dice,
                    seed,
                    test_split_hash: eval.test_split_hash,
                });
                cfg.resume = Some(report.final_checkpoint);
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("compare.csv"), compare_csv(&rows))?;
    crate::plot::convergence_plot(&rows, &out_dir.join("compare.png"))?;
    Ok(rows)
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Glmae => "glmae",
        Mode::Mae3d => "mae3d",
        Mode::DownsampleMae => "downsample_mae",
    }
}

/// Median of mean Dice per (mode, epoch) across seeds.
pub fn median_curve(rows: &[CompareRow], mode: Mode) -> Vec<(usize, f64)> {
    let mut epochs: Vec<usize> = rows.iter().filter(|r| r.mode == mode).map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    epochs
        .into_iter()
        .map(|e| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.mode == mode && r.epoch == e).map(|r| r.mean_dice).collect();
            (e, median(&vals))
        })
        .collect()
}

pub fn median(vals: &[f64]) -> f64 {
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let gt = vec![1u8; 8];
        assert_eq!(dice(&gt, &gt, 2).unwrap().per_class, vec![Some(100.0)]);
        let mut a = vec![0u8; 16];
        let mut b = vec![0u8; 16];
        a[..4].fill(1);
        b[8..12].fill(1);
        assert_eq!(dice(&a, &b, 2).unwrap().mean, 0.0);
        let gt: Vec<u8> = (0..128).map(|i| (i < 64) as u8).collect();
        let pred: Vec<u8> = (0..128).map(|i| (i < 32) as u8).collect();
        assert!((dice(&pred, &gt, 2).unwrap().mean - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dice_excludes_absent_classes() {
        let gt = [0u8, 1, 1, 0];
        let d = dice(&gt, &gt, 4).unwrap();
        assert_eq!(d.per_class, vec![Some(100.0), None, None]);
        assert_eq!(d.mean, 100.0);
        assert!(matches!(dice(&[0, 1], &[0], 2), Err(Error::ShapeMismatch(_))));
        assert!(dice(&[0, 0], &[0, 0], 1).is_err());
        assert!(dice(&[0, 0], &[0, 0], 2).is_err());
    }

    #[test]
    fn splits_are_nested_and_sized() {
        let s = Split::new(20, 0.2, 7).unwrap();
        assert_eq!(s.test.len(), 4);
        assert_eq!(s.pool.len(), 16);
        let quarter = s.train_subset(0.25).unwrap();
        let half = s.train_subset(0.5).unwrap();
        assert_eq!((quarter.len(), half.len()), (4, 8));
        assert_eq!(&half[..4], quarter);
        assert_eq!(Split::new(20, 0.2, 7).unwrap(), s);
        let odd = Split::new(11, 0.1, 0).unwrap();
        assert_eq!(odd.train_subset(0.5).unwrap().len(), 5);
    }

    #[test]
    fn seg_head_output_shape() {
        let model = ModelConfig::desk();
        let head_params = init_seg_head(&model, 3, 0, DType::F32).unwrap();
        let head = SegHead::load(&head_params, &model).unwrap();
        let tokens = Tensor::randn(0f32, 1.0, (2, 8, model.encoder.embed_dim), &Device::Cpu).unwrap();
        let out = head.forward(&tokens, [2, 2, 2]).unwrap();
        assert_eq!(out.dims(), &[2, 16, 16, 16, 3]);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = Tensor::new(&[[0.0f64, 0.0], [2.0, 0.0]], &Device::Cpu).unwrap();
        let ce = cross_entropy(&logits, &[1, 0]).unwrap().to_scalar::<f64>().unwrap();
        let expected = (2f64.ln() + (1.0 + (-2f64).exp()).ln()) / 2.0;
        assert!((ce - expected).abs() < 1e-12);
    }

    #[test]
    fn tiles_cover_axis() {
        assert_eq!(tile_origins(64, 16), vec![0, 16, 32, 48]);
        assert_eq!(tile_origins(20, 16), vec![0, 4]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
