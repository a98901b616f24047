use candle_core::{DType, Device, IndexOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::layers::{Block, LayerNorm, Linear};
use super::params::ParamStore;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::interp::interp_matrix;
use crate::patch::{grid_dims_for, patchify, MaskedView};
use crate::views::View;
use crate::volume::{numel, Shape3};

enum Init {
    Xavier,
    Normal,
    Zeros,
    Ones,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let e = &cfg.encoder;
    let pv = cfg.patch_voxels();
    let pb = numel(e.base_grid_dims);
    let mut specs = Vec::new();
    let linear = |specs: &mut Vec<_>, name: String, i: usize, o: usize| {
        specs.push((format!("{name}.weight"), vec![i, o], Init::Xavier));
        specs.push((format!("{name}.bias"), vec![o], Init::Zeros));
    };
    let norm = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: String, w: usize| {
        specs.push((format!("{name}.gamma"), vec![w], Init::Ones));
        specs.push((format!("{name}.beta"), vec![w], Init::Zeros));
    };
    let blocks = |specs: &mut Vec<_>, prefix: &str, depth: usize, w: usize, ratio: usize| {
        for b in 0..depth {
            let p = format!("{prefix}.block{b}");
            norm(specs, format!("{p}.norm1"), w);
            for proj in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("{p}.attn.{proj}.weight"), vec![w, w], Init::Xavier));
                specs.push((format!("{p}.attn.{proj}.bias"), vec![w], Init::Zeros));
            }
            norm(specs, format!("{p}.norm2"), w);
            specs.push((format!("{p}.mlp.fc1.weight"), vec![w, w * ratio], Init::Xavier));
            specs.push((format!("{p}.mlp.fc1.bias"), vec![w * ratio], Init::Zeros));
            specs.push((format!("{p}.mlp.fc2.weight"), vec![w * ratio, w], Init::Xavier));
            specs.push((format!("{p}.mlp.fc2.bias"), vec![w], Init::Zeros));
        }
    };

    let enc = "student.encoder";
    linear(&mut specs, format!("{enc}.patch_embed"), pv, e.embed_dim);
    specs.push((format!("{enc}.pos_embed"), vec![pb, e.embed_dim], Init::Normal));
    specs.push((format!("{enc}.cls_token"), vec![e.embed_dim], Init::Normal));
    blocks(&mut specs, enc, e.depth, e.embed_dim, e.mlp_ratio);
    norm(&mut specs, format!("{enc}.norm"), e.embed_dim);

    let dec = "student.decoder";
    let dd = cfg.decoder_dim;
    linear(&mut specs, format!("{dec}.embed"), e.embed_dim, dd);
    specs.push((format!("{dec}.mask_token"), vec![dd], Init::Normal));
    specs.push((format!("{dec}.pos_embed"), vec![pb, dd], Init::Normal));
    blocks(&mut specs, dec, cfg.decoder_depth, dd, e.mlp_ratio);
    norm(&mut specs, format!("{dec}.norm"), dd);
    linear(&mut specs, format!("{dec}.head"), dd, pv);

    let widths = [e.embed_dim, cfg.proj_hidden, cfg.proj_hidden, cfg.proj_dim];
    for (i, io) in widths.windows(2).enumerate() {
        linear(&mut specs, format!("student.proj.fc{i}"), io[0], io[1]);
    }
    specs
}

/// Deterministic student initialization (encoder, decoder, projection head):
/// Xavier-uniform weights, N(0, 0.02) tokens and positional tables, zero
/// biases, unit norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut store = ParamStore::new(dtype);
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Xavier => {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("valid range");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
        };
        store.insert(name, Tensor::from_vec(vals, shape, &Device::Cpu)?)?;
    }
    Ok(store)
}

/// Resizes a positional table stored on `base` to `target` by trilinear
/// interpolation of every channel, keeping patch order.
pub fn interp_pos_embed(table: &Tensor, base: Shape3, target: Shape3) -> Result<Tensor> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::InvalidArgument(format!("target grid {target:?} has an empty axis")));
    }
    let (rows, _) = table.dims2()?;
    if rows != numel(base) {
        return Err(Error::ShapeMismatch(format!("{rows} table rows for base grid {base:?}")));
    }
    if base == target {
        return Ok(table.clone());
    }
    let m = Tensor::from_vec(interp_matrix(base, target), (numel(target), numel(base)), &Device::Cpu)?
        .to_dtype(table.dtype())?;
    Ok(m.matmul(table)?)
}

/// Visible patches of `N` views sharing a patch grid and visible count.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// `[N, V, patch_voxels]`
    pub patches: Tensor,
    /// Absolute grid index of every visible patch, flattened `[N * V]`.
    pub positions: Tensor,
    pub grid: Shape3,
    pub masks: Vec<Vec<bool>>,
}

impl PatchBatch {
    pub fn from_masked(views: &[&MaskedView], dtype: DType) -> Result<Self> {
        let first = views.first().ok_or(Error::Empty("patch batch"))?;
        let grid = first.grid.grid_dims;
        let v = first.visible_index.len();
        let pv = first.grid.patch_voxels();
        if v == 0 {
            return Err(Error::InvalidArgument("masked view has no visible patch".into()));
        }
        let mut data = Vec::with_capacity(views.len() * v * pv);
        let mut pos = Vec::with_capacity(views.len() * v);
        for mv in views {
            if mv.grid.grid_dims != grid || mv.visible_index.len() != v || mv.grid.patch_voxels() != pv {
                return Err(Error::ShapeMismatch("views in a batch must share grid and visible count".into()));
            }
            data.extend(mv.visible_patches());
            pos.extend(mv.visible_index.iter().map(|&i| i as u32));
        }
        Ok(Self {
            patches: Tensor::from_vec(data, (views.len(), v, pv), &Device::Cpu)?.to_dtype(dtype)?,
            positions: Tensor::from_vec(pos, views.len() * v, &Device::Cpu)?,
            grid,
            masks: views.iter().map(|mv| mv.mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Encoder outputs for a batch: `cls` is `[N, D]`, `patch_tokens` `[N, V, D]`.
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    pub cls: Tensor,
    pub patch_tokens: Tensor,
}

pub struct Encoder {
    patch_embed: Linear,
    pos_embed: Tensor,
    cls_token: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    base_grid: Shape3,
}

impl Encoder {
    /// `prefix` is e.g. `student.encoder` or `teacher.encoder`.
    pub fn load(p: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let e = &cfg.encoder;
        Ok(Self {
            patch_embed: Linear::load(p, &format!("{prefix}.patch_embed"))?,
            pos_embed: p.get(&format!("{prefix}.pos_embed"))?.as_tensor().clone(),
            cls_token: p.get(&format!("{prefix}.cls_token"))?.as_tensor().clone(),
            blocks: (0..e.depth)
                .map(|b| Block::load(p, &format!("{prefix}.block{b}"), e.num_heads))
                .collect::<Result<_>>()?,
            norm: LayerNorm::load(p, &format!("{prefix}.norm"))?,
            base_grid: e.base_grid_dims,
        })
    }

    pub fn forward(&self, batch: &PatchBatch) -> Result<TokenEmbedding> {
        let (n, v, _) = batch.patches.dims3()?;
        let width = self.cls_token.dim(0)?;
        let pos = interp_pos_embed(&self.pos_embed, self.base_grid, batch.grid)?
            .index_select(&batch.positions, 0)?
            .reshape((n, v, width))?;
        let x = (self.patch_embed.forward(&batch.patches)? + pos)?;
        let cls = self.cls_token.reshape((1, 1, width))?.broadcast_as((n, 1, width))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            let peak = x.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !peak.is_finite() {
                return Err(Error::NonFiniteActivation { block: i });
            }
        }
        let x = self.norm.forward(&x)?;
        Ok(TokenEmbedding { cls: x.i((.., 0))?, patch_tokens: x.narrow(1, 1, v)? })
    }
}

pub struct Decoder {
    embed: Linear,
    mask_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    base_grid: Shape3,
}

impl Decoder {
    pub fn load(p: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            embed: Linear::load(p, &format!("{prefix}.embed"))?,
            mask_token: p.get(&format!("{prefix}.mask_token"))?.as_tensor().clone(),
            pos_embed: p.get(&format!("{prefix}.pos_embed"))?.as_tensor().clone(),
            blocks: (0..cfg.decoder_depth)
                .map(|b| Block::load(p, &format!("{prefix}.block{b}"), cfg.decoder_heads))
                .collect::<Result<_>>()?,
            norm: LayerNorm::load(p, &format!("{prefix}.norm"))?,
            head: Linear::load(p, &format!("{prefix}.head"))?,
            base_grid: cfg.encoder.base_grid_dims,
        })
    }

    /// Reconstructs every patch: `patch_tokens` `[N, V, D]` for the visible
    /// positions of `masks` → `[N, P, patch_voxels]`.
    pub fn forward(&self, patch_tokens: &Tensor, masks: &[Vec<bool>], grid: Shape3) -> Result<Tensor> {
        let (n, v, _) = patch_tokens.dims3()?;
        let p = numel(grid);
        if masks.len() != n {
            return Err(Error::ShapeMismatch(format!("{} masks for {n} token sets", masks.len())));
        }
        let mut index = Vec::with_capacity(n * p);
        for (b, mask) in masks.iter().enumerate() {
            if mask.len() != p {
                return Err(Error::ShapeMismatch(format!("mask of length {} for {p} patches", mask.len())));
            }
            let mut rank = 0u32;
            for &m in mask {
                if m {
                    index.push((n * v) as u32);
                } else {
                    index.push((b * v) as u32 + rank);
                    rank += 1;
                }
            }
            if rank as usize != v {
                return Err(Error::ShapeMismatch(format!("mask has {rank} visible patches, encoder gave {v}")));
            }
        }
        let dd = self.mask_token.dim(0)?;
        let y = self.embed.forward(patch_tokens)?.reshape((n * v, dd))?;
        let pool = Tensor::cat(&[&y, &self.mask_token.reshape((1, dd))?], 0)?;
        let index = Tensor::from_vec(index, n * p, &Device::Cpu)?;
        let seq = pool.index_select(&index, 0)?.reshape((n, p, dd))?;
        let pos = interp_pos_embed(&self.pos_embed, self.base_grid, grid)?;
        let mut x = seq.broadcast_add(&pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.head.forward(&self.norm.forward(&x)?)
    }
}

/// Fully connected layers with GELU between them and none after the last.
pub struct ProjectionHead {
    layers: Vec<Linear>,
}

impl ProjectionHead {
    pub fn load(p: &ParamStore, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        while p.contains(&format!("{prefix}.fc{}.weight", layers.len())) {
            layers.push(Linear::load(p, &format!("{prefix}.fc{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(Error::TreeMismatch(format!("no projection layers under `{prefix}`")));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.gelu_erf()?;
            }
        }
        Ok(x)
    }
}

/// Encodes the visible patches of one masked view; returns `cls` `[D]` and
/// `patch_tokens` `[V, D]`.
pub fn encode(p: &ParamStore, prefix: &str, cfg: &ModelConfig, mv: &MaskedView) -> Result<TokenEmbedding> {
    let batch = PatchBatch::from_masked(&[mv], p.dtype())?;
    let out = Encoder::load(p, prefix, cfg)?.forward(&batch)?;
    Ok(TokenEmbedding { cls: out.cls.squeeze(0)?, patch_tokens: out.patch_tokens.squeeze(0)? })
}

/// Encodes a view with every patch visible.
pub fn encode_full(p: &ParamStore, prefix: &str, cfg: &ModelConfig, view: &View) -> Result<TokenEmbedding> {
    let mv = MaskedView::unmasked(patchify(view, cfg.encoder.patch_size)?);
    encode(p, prefix, cfg, &mv)
}

/// Single-view decode: `patch_tokens` `[V, D]` → `[P, patch_voxels]`.
pub fn decode(p: &ParamStore, prefix: &str, cfg: &ModelConfig, patch_tokens: &Tensor, mask: &[bool], grid: Shape3) -> Result<Tensor> {
    let out = Decoder::load(p, prefix, cfg)?.forward(&patch_tokens.unsqueeze(0)?, &[mask.to_vec()], grid)?;
    Ok(out.squeeze(0)?)
}

pub fn project(p: &ParamStore, prefix: &str, cls: &Tensor) -> Result<Tensor> {
    ProjectionHead::load(p, prefix)?.forward(cls)
}

/// Patch grid of a view of `size` under this model's patch size.
pub fn grid_for(cfg: &ModelConfig, size: Shape3) -> Result<Shape3> {
    grid_dims_for(size, cfg.encoder.patch_size)
}
