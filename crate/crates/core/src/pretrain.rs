//! The pre-training loop: view sampling, masking, student reconstruction at
//! both scales, teacher-guided consistency, AdamW on the student, EMA on the
//! teacher, JSON-lines logging and checkpoints.
//!
//! Randomness is drawn from ChaCha streams keyed by `(seed, step)` and
//! `(seed, epoch)`, so a run resumed from a checkpoint replays exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::objectives::{
    consistency_gg, consistency_gl, recon_loss, total_loss, LossBreakdown, LossParts, LossWeights,
    TeacherCentering,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::patch::{mask_patches, patchify, unpatchify, MaskedView};
use crate::plot::{write_panel_grid, Panel};
use crate::teacher::{ema_update, init_teacher, lr_at, momentum_at, ScheduleState};
use crate::views::{downsample_whole, sample_global, sample_local, View, ViewConfig};
use crate::vit::{init_params, Decoder, Encoder, ModelConfig, ParamStore, PatchBatch, ProjectionHead};
use crate::volume::{synth_volumes, DatasetManifest, Shape3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Global and local reconstruction plus global-guided consistency.
    #[default]
    Glmae,
    /// Local-view reconstruction only; no teacher.
    Mae3d,
    /// Reconstruction of the whole volume resized to the local view size.
    DownsampleMae,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glmae" => Ok(Mode::Glmae),
            "mae3d" => Ok(Mode::Mae3d),
            "downsample_mae" => Ok(Mode::DownsampleMae),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// In-memory synthetic corpus used when no manifest is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub n: usize,
    pub shape: Shape3,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
    pub p: usize,
    pub q: usize,
    pub views: ViewConfig,
    pub mask_ratio: f64,
    pub weights: LossWeights,
    pub t_teacher: f64,
    pub t_student: f64,
    /// Momentum of the optional teacher-output centering; `None` disables it.
    pub center_momentum: Option<f64>,
    pub mu0: f64,
    pub lr0: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Stop (with a partial checkpoint) after this many total steps.
    pub stop_after: Option<usize>,
    pub resume: Option<PathBuf>,
    pub log_stdout: bool,
}

impl Default for PretrainConfig {
    /// Desk-scale defaults: 32^3 globals, 16^3 locals, 8^3 patches, batch 2,
    /// p = 2, q = 4.
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: Some(SyntheticSource { n: 8, shape: [64; 3], num_classes: 3, seed: 0 }),
            p: 2,
            q: 4,
            views: ViewConfig::desk(),
            mask_ratio: 0.6,
            weights: LossWeights::default(),
            t_teacher: 0.04,
            t_student: 0.1,
            center_momentum: None,
            mu0: 0.996,
            lr0: 1e-3,
            warmup_frac: 0.05,
            epochs: 50,
            batch_size: 2,
            seed: 0,
            mode: Mode::Glmae,
            model: ModelConfig::desk(),
            optimizer: AdamWConfig::default(),
            checkpoint_every: 50,
            out_dir: PathBuf::from("runs/pretrain"),
            precision: Precision::F32,
            stop_after: None,
            resume: None,
            log_stdout: false,
        }
    }
}

impl PretrainConfig {
    /// Full-scale view and batch settings: p = 2, q = 8, 160^3 / 96^3 views,
    /// 16^3 patches, lr 1e-2.
    pub fn full_scale() -> Self {
        Self {
            p: 2,
            q: 8,
            views: ViewConfig::default(),
            model: ModelConfig::vit_base([16; 3], [6; 3]),
            lr0: 1e-2,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Applies mode constraints: `mae3d` and `downsample_mae` drop the
    /// teacher and every weighted term.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match c.mode {
            Mode::Glmae => {}
            Mode::Mae3d => {
                c.p = 0;
                c.weights = LossWeights::mae3d();
            }
            Mode::DownsampleMae => {
                c.p = 0;
                c.q = 1;
                c.weights = LossWeights::mae3d();
            }
        }
        c
    }

    pub fn uses_teacher(&self) -> bool {
        self.mode == Mode::Glmae
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.mode == Mode::Glmae && self.p == 0 {
            return Err(Error::InvalidArgument("glmae mode needs p >= 1".into()));
        }
        if self.mode == Mode::Mae3d && self.q == 0 {
            return Err(Error::InvalidArgument("mae3d mode needs q >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidMaskRatio(self.mask_ratio));
        }
        if !(self.t_teacher > 0.0 && self.t_student > 0.0) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn load_volumes(&self) -> Result<Vec<Volume>> {
        if let Some(path) = &self.dataset {
            let vols = DatasetManifest::load(path)?.load_volumes()?;
            if vols.is_empty() {
                return Err(Error::Empty("dataset manifest"));
            }
            return Ok(vols);
        }
        let s = self
            .synthetic
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("config names neither a dataset nor a synthetic source".into()))?;
        Ok(synth_volumes(s.n, s.shape, s.num_classes, s.seed)?.into_iter().map(|lv| lv.volume).collect())
    }
}

/// Independent ChaCha stream for `(seed, domain, index)`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub const STEP_DOMAIN: u64 = 1;
pub const EPOCH_DOMAIN: u64 = 2;

/// Masked views of one batch, grouped by kind. Globals and locals are stored
/// volume-major: entry `b * p + i` is global `i` of volume `b`.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub volumes: usize,
    pub globals: Vec<View>,
    pub masked_globals: Vec<MaskedView>,
    pub locals: Vec<View>,
    pub masked_locals: Vec<MaskedView>,
}

/// Samples and masks the views of one batch. `cfg` should be effective.
pub fn prepare_batch(batch: &[&Volume], cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<PreparedBatch> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let patch = cfg.model.encoder.patch_size;
    let mut out = PreparedBatch {
        volumes: batch.len(),
        globals: Vec::new(),
        masked_globals: Vec::new(),
        locals: Vec::new(),
        masked_locals: Vec::new(),
    };
    for v in batch {
        let globals = (0..cfg.p).map(|_| sample_global(v, &cfg.views, rng)).collect::<Result<Vec<_>>>()?;
        let locals = if cfg.mode == Mode::DownsampleMae {
            vec![downsample_whole(v, cfg.views.local_size)?]
        } else {
            (0..cfg.q).map(|_| sample_local(v, &cfg.views, rng)).collect::<Result<Vec<_>>>()?
        };
        for g in &globals {
            out.masked_globals.push(mask_patches(patchify(g, patch)?, cfg.mask_ratio, rng)?);
        }
        for l in &locals {
            out.masked_locals.push(mask_patches(patchify(l, patch)?, cfg.mask_ratio, rng)?);
        }
        out.globals.extend(globals);
        out.locals.extend(locals);
    }
    Ok(out)
}

fn full_patches(views: &[MaskedView], dtype: DType) -> Result<Tensor> {
    let first = &views[0].grid;
    let data: Vec<f32> = views.iter().flat_map(|mv| mv.grid.patches.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (views.len(), first.num_patches(), first.patch_voxels()), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Student reconstruction of a group of masked views: returns the loss term
/// and the encoder cls outputs `[N, D]`.
fn reconstruct_group(
    student: &ParamStore,
    model: &ModelConfig,
    views: &[MaskedView],
) -> Result<(Tensor, Tensor)> {
    let refs: Vec<&MaskedView> = views.iter().collect();
    let batch = PatchBatch::from_masked(&refs, student.dtype())?;
    let enc = Encoder::load(student, "student.encoder", model)?.forward(&batch)?;
    let recon = Decoder::load(student, "student.decoder", model)?.forward(&enc.patch_tokens, &batch.masks, batch.grid)?;
    let target = full_patches(views, student.dtype())?;
    let term = recon_loss(&recon, &target, &batch.masks)?;
    Ok((term.value, enc.cls))
}

/// Teacher projections of the unmasked globals, `[volumes, p, K]`, detached.
pub fn teacher_embeddings(
    teacher: &ParamStore,
    model: &ModelConfig,
    prepared: &PreparedBatch,
    centering: Option<&TeacherCentering>,
) -> Result<Tensor> {
    let full: Vec<MaskedView> = prepared
        .masked_globals
        .iter()
        .map(|mv| MaskedView::unmasked(mv.grid.clone()))
        .collect();
    let refs: Vec<&MaskedView> = full.iter().collect();
    let batch = PatchBatch::from_masked(&refs, teacher.dtype())?;
    let cls = Encoder::load(teacher, "teacher.encoder", model)?.forward(&batch)?.cls;
    let mut ec = ProjectionHead::load(teacher, "teacher.proj")?.forward(&cls)?.detach();
    if let Some(c) = centering {
        ec = c.apply(&ec)?;
    }
    let p = prepared.masked_globals.len() / prepared.volumes;
    Ok(ec.reshape((prepared.volumes, p, ()))?)
}

/// Differentiable total objective for a prepared batch. Returns the total,
/// its breakdown and the raw teacher embeddings (for centering updates).
pub fn forward_loss(
    student: &ParamStore,
    teacher: Option<&ParamStore>,
    prepared: &PreparedBatch,
    cfg: &PretrainConfig,
    centering: Option<&TeacherCentering>,
) -> Result<(Tensor, LossBreakdown, Option<Tensor>)> {
    let dtype = student.dtype();
    let zero = Tensor::zeros((), dtype, &Device::Cpu)?;
    let model = &cfg.model;
    let b = prepared.volumes;

    let (recon_local, cls_l) = if prepared.masked_locals.is_empty() {
        (zero.clone(), None)
    } else {
        let (l, c) = reconstruct_group(student, model, &prepared.masked_locals)?;
        (l, Some(c))
    };
    let (recon_global, cls_g) = if prepared.masked_globals.is_empty() {
        (zero.clone(), None)
    } else {
        let (l, c) = reconstruct_group(student, model, &prepared.masked_globals)?;
        (l, Some(c))
    };

    let mut cons_gg = zero.clone();
    let mut cons_gl = zero;
    let mut raw_teacher = None;
    if let (Some(teacher), Some(cls_g)) = (teacher, cls_g.as_ref()) {
        let head = ProjectionHead::load(student, "student.proj")?;
        let ec = teacher_embeddings(teacher, model, prepared, centering)?;
        let eg = head.forward(cls_g)?.reshape((b, cfg.p, ()))?;
        cons_gg = consistency_gg(&ec, &eg, cfg.t_teacher, cfg.t_student)?.value;
        if let Some(cls_l) = cls_l.as_ref() {
            let q = prepared.masked_locals.len() / b;
            let el = head.forward(cls_l)?.reshape((b, q, ()))?;
            cons_gl = consistency_gl(&ec, &el, cfg.t_teacher, cfg.t_student)?.value;
        }
        raw_teacher = Some(match centering {
            Some(c) => (ec.broadcast_add(&c.center))?,
            None => ec,
        });
    }

    let parts = LossParts { recon_local, recon_global, cons_gg, cons_gl };
    let (total, breakdown) = total_loss(&parts, cfg.weights)?;
    Ok((total, breakdown, raw_teacher))
}

/// Student, teacher, optimizer and schedule: everything a step mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: Option<ParamStore>,
    pub optimizer: AdamW,
    pub schedule: ScheduleState,
    pub centering: Option<TeacherCentering>,
}

impl TrainState {
    pub fn init(cfg: &PretrainConfig, total_steps: usize) -> Result<Self> {
        let cfg = cfg.effective();
        let student = init_params(&cfg.model, cfg.seed, cfg.precision.dtype())?;
        let teacher = if cfg.uses_teacher() { Some(init_teacher(&student)?) } else { None };
        let optimizer = AdamW::for_prefix(&student, "student.", cfg.optimizer);
        let mut schedule = ScheduleState::new(total_steps.max(1), cfg.mu0, cfg.lr0);
        schedule.warmup_steps = (total_steps as f64 * cfg.warmup_frac).round() as usize;
        let centering = match (cfg.uses_teacher(), cfg.center_momentum) {
            (true, Some(m)) => Some(TeacherCentering::new(cfg.model.proj_dim, m, cfg.precision.dtype())?),
            _ => None,
        };
        Ok(Self { student, teacher, optimizer, schedule, centering })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub recon_local: f64,
    pub recon_global: f64,
    pub cons_gg: f64,
    pub cons_gl: f64,
    pub total: f64,
    pub lr: f64,
    pub mu: f64,
}

/// One optimization step on `batch`. On a non-finite loss the state is left
/// unchanged and the error names the offending term.
pub fn pretrain_step(
    batch: &[&Volume],
    state: &mut TrainState,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, LogRecord)> {
    let cfg = cfg.effective();
    let prepared = prepare_batch(batch, &cfg, rng)?;
    let (total, breakdown, raw_teacher) =
        forward_loss(&state.student, state.teacher.as_ref(), &prepared, &cfg, state.centering.as_ref())?;
    let grads = total.backward()?;
    let lr = lr_at(&state.schedule);
    let mu = momentum_at(&state.schedule)?;
    state.optimizer.step(&state.student, &grads, lr)?;
    if let Some(teacher) = &state.teacher {
        ema_update(&state.student, teacher, mu)?;
    }
    if let (Some(c), Some(t)) = (state.centering.as_mut(), raw_teacher.as_ref()) {
        c.update(t)?;
    }
    state.schedule.step += 1;
    let record = LogRecord {
        step: state.schedule.step,
        recon_local: breakdown.recon_local,
        recon_global: breakdown.recon_global,
        cons_gg: breakdown.cons_gg,
        cons_gl: breakdown.cons_gl,
        total: breakdown.total,
        lr,
        mu,
    };
    Ok((breakdown, record))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    pub wall_clock_secs: f64,
    pub final_checkpoint: PathBuf,
    pub config: PretrainConfig,
}

pub fn steps_per_epoch(n_volumes: usize, batch_size: usize) -> usize {
    n_volumes.div_ceil(batch_size)
}

const CENTER_KEY: &str = "state.teacher_center";

fn checkpoint_state(state: &TrainState, cfg: &PretrainConfig, dir: &Path, partial: bool) -> Result<()> {
    let mut params = state.student.clone();
    if let Some(t) = &state.teacher {
        params.merge(t.clone());
    }
    let mut opt = state.optimizer.state_tensors(&state.student)?;
    if let Some(c) = &state.centering {
        opt.insert(CENTER_KEY.to_string(), c.center.clone());
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: serde_json::to_value(cfg)?,
        step: state.schedule.step,
        partial,
        optimizer_steps: state.optimizer.steps(),
    };
    save_checkpoint(dir, &params, opt, &manifest)
}

/// Restores a training state saved by [`train`].
pub fn restore_state(dir: &Path, cfg: &PretrainConfig, total_steps: usize) -> Result<TrainState> {
    let mut state = TrainState::init(cfg, total_steps)?;
    let ck = load_checkpoint(dir)?;
    let mut params = ck.params;
    let teacher = params.split_off_prefix("teacher.");
    let fresh_names: Vec<&String> = state.student.names().collect();
    let loaded_names: Vec<&String> = params.names().collect();
    if fresh_names != loaded_names {
        return Err(Error::IncompatibleCheckpoint("student parameter set differs from config".into()));
    }
    state.student = params;
    state.teacher = if state.teacher.is_some() { Some(teacher) } else { None };
    state.optimizer = AdamW::for_prefix(&state.student, "student.", cfg.optimizer);
    state.optimizer.load_state(&ck.optimizer, ck.manifest.optimizer_steps)?;
    if let (Some(c), Some(t)) = (state.centering.as_mut(), ck.optimizer.get(CENTER_KEY)) {
        c.center = t.clone();
    }
    state.schedule.step = ck.manifest.step;
    Ok(state)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, EPOCH_DOMAIN, epoch as u64));
    order
}

/// Runs `epochs` passes over the dataset. Writes `train_log.jsonl`, periodic
/// `ckpt_stepNNNNNN` checkpoints and a `final` checkpoint under `out_dir`.
pub fn train(cfg: &PretrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let volumes = cfg.load_volumes()?;
    train_on(&volumes, cfg)
}

pub fn train_on(volumes: &[Volume], cfg: &PretrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let started = Instant::now();
    let spe = steps_per_epoch(volumes.len(), cfg.batch_size);
    let total_steps = cfg.epochs * spe;
    let mut state = match &cfg.resume {
        Some(dir) => restore_state(dir, cfg, total_steps)?,
        None => TrainState::init(cfg, total_steps)?,
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log_file = BufWriter::new(if cfg.resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    });
    let stop = cfg.stop_after.unwrap_or(total_steps).min(total_steps);
    let mut log = Vec::new();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.schedule.step < stop {
        let step = state.schedule.step;
        let (epoch, slot) = (step / spe, step % spe);
        if epoch != order_epoch {
            order = epoch_order(volumes.len(), cfg.seed, epoch);
            order_epoch = epoch;
        }
        let end = ((slot + 1) * cfg.batch_size).min(volumes.len());
        let batch: Vec<&Volume> = order[slot * cfg.batch_size..end].iter().map(|&i| &volumes[i]).collect();
        let mut rng = stream_rng(cfg.seed, STEP_DOMAIN, step as u64);
        let (_, record) = pretrain_step(&batch, &mut state, cfg, &mut rng)?;
        let line = serde_json::to_string(&record)?;
        writeln!(log_file, "{line}")?;
        if cfg.log_stdout {
            println!("{line}");
        }
        log.push(record);
        let done = state.schedule.step;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total_steps {
            checkpoint_state(&state, cfg, &cfg.out_dir.join(format!("ckpt_step{done:06}")), true)?;
        }
    }
    log_file.flush()?;
    let final_checkpoint = if state.schedule.step >= total_steps {
        cfg.out_dir.join("final")
    } else {
        cfg.out_dir.join(format!("ckpt_step{:06}", state.schedule.step))
    };
    checkpoint_state(&state, cfg, &final_checkpoint, state.schedule.step < total_steps)?;
    Ok(TrainReport {
        log,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        final_checkpoint,
        config: cfg.clone(),
    })
}

/// Loads the student of a pre-training checkpoint together with its config.
pub fn load_pretrained(dir: &Path) -> Result<(ParamStore, PretrainConfig)> {
    let ck = load_checkpoint(dir)?;
    let cfg: PretrainConfig = serde_json::from_value(ck.manifest.config.clone())?;
    let mut params = ck.params;
    let _teacher = params.split_off_prefix("teacher.");
    Ok((params, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub kind: String,
    pub num_patches: usize,
    pub masked_patches: usize,
    /// Reconstruction error over masked patches, as computed by `recon_loss`.
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct DumpReport {
    pub rows: Vec<DumpRow>,
    pub image: PathBuf,
}

const MASK_GRAY: f32 = 0.5;

fn center_slice(data: &[f32], size: Shape3) -> Panel {
    let h = size[0] / 2;
    let plane = size[1] * size[2];
    Panel { width: size[2], height: size[1], pixels: data[h * plane..(h + 1) * plane].to_vec() }
}

/// Samples `p` globals and `q` locals from `volume`, masks and reconstructs
/// each with the checkpoint's student, and writes `reconstruction.png` with
/// one (original, masked, reconstructed) row of center slices per view. The
/// reconstructed panel keeps visible patches and fills masked ones with the
/// prediction.
pub fn reconstruct_dump(checkpoint: &Path, volume: &Volume, seed: u64, out_dir: &Path) -> Result<DumpReport> {
    let (student, cfg) = load_pretrained(checkpoint)?;
    let cfg = cfg.effective();
    let mut rng = stream_rng(seed, STEP_DOMAIN, 0);
    let mut views = Vec::new();
    for _ in 0..cfg.p {
        views.push(sample_global(volume, &cfg.views, &mut rng)?);
    }
    if cfg.mode == Mode::DownsampleMae {
        views.push(downsample_whole(volume, cfg.views.local_size)?);
    } else {
        for _ in 0..cfg.q {
            views.push(sample_local(volume, &cfg.views, &mut rng)?);
        }
    }
    let patch = cfg.model.encoder.patch_size;
    let mut rows = Vec::new();
    let mut panels = Vec::new();
    for view in &views {
        let mv = mask_patches(patchify(view, patch)?, cfg.mask_ratio, &mut rng)?;
        let batch = PatchBatch::from_masked(&[&mv], student.dtype())?;
        let enc = Encoder::load(&student, "student.encoder", &cfg.model)?.forward(&batch)?;
        let recon = Decoder::load(&student, "student.decoder", &cfg.model)?.forward(&enc.patch_tokens, &batch.masks, batch.grid)?;
        let target = full_patches(std::slice::from_ref(&mv), student.dtype())?;
        let mse = recon_loss(&recon, &target, &batch.masks)?.value.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let pv = mv.grid.patch_voxels();
        let predicted = recon.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let mut grayed = mv.grid.patches.clone();
        let mut filled = mv.grid.patches.clone();
        for (i, &m) in mv.mask.iter().enumerate() {
            if m {
                grayed[i * pv..(i + 1) * pv].fill(MASK_GRAY);
                filled[i * pv..(i + 1) * pv].copy_from_slice(&predicted[i * pv..(i + 1) * pv]);
            }
        }
        let size = view.size;
        panels.push(vec![
            center_slice(&view.data, size),
            center_slice(&unpatchify(&grayed, mv.grid.grid_dims, patch)?, size),
            center_slice(&unpatchify(&filled, mv.grid.grid_dims, patch)?, size),
        ]);
        rows.push(DumpRow {
            kind: format!("{:?}", view.kind).to_lowercase(),
            num_patches: mv.grid.num_patches(),
            masked_patches: mv.masked_count(),
            mse,
        });
    }
    fs::create_dir_all(out_dir)?;
    let image = out_dir.join("reconstruction.png");
    write_panel_grid(&panels, &image)?;
    fs::write(out_dir.join("reconstruction.json"), serde_json::to_vec_pretty(&rows)?)?;
    Ok(DumpReport { rows, image })
}
