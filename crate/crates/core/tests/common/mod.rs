//! Independent reference implementations shared by the integration tests.
//! Nothing here calls the loss, model, optimizer or schedule code under test.

#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use glmae::patch::{mask_patches, patchify, MaskedView};
use glmae::pretrain::{stream_rng, PretrainConfig, EPOCH_DOMAIN, STEP_DOMAIN};
use glmae::views::sample_local;
use glmae::vit::{init_params, ModelConfig};
use glmae::volume::Volume;
use rand::seq::SliceRandom;

pub const EPS: f64 = 1e-12;

/// Small model used by gradient and reduction checks.
pub fn tiny_model(patch: usize, base_grid: [usize; 3]) -> ModelConfig {
    let mut m = ModelConfig::desk();
    m.encoder.embed_dim = 16;
    m.encoder.depth = 1;
    m.encoder.num_heads = 2;
    m.encoder.patch_size = [patch; 3];
    m.encoder.base_grid_dims = base_grid;
    m.decoder_dim = 8;
    m.decoder_depth = 1;
    m.decoder_heads = 2;
    m.proj_hidden = 16;
    m.proj_dim = 8;
    m
}

pub fn softmax_ref(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn xent_ref(target: &[f64], student: &[f64]) -> f64 {
    -target.iter().zip(student).map(|(t, s)| t * (s + EPS).ln()).sum::<f64>()
}

/// Mean over every (teacher, student) pair of the sharpened cross-entropy.
pub fn consistency_ref(teacher: &[Vec<f64>], student: &[Vec<f64>], tt: f64, ts: f64) -> f64 {
    if student.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for t in teacher {
        for s in student {
            total += xent_ref(&softmax_ref(t, tt), &softmax_ref(s, ts));
        }
    }
    total / (teacher.len() * student.len()) as f64
}

/// `recon[n][p][v]`; per view mean over masked voxels, then mean over views.
pub fn recon_ref(recon: &[Vec<Vec<f64>>], target: &[Vec<Vec<f64>>], masks: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for n in 0..recon.len() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..recon[n].len() {
            if masks[n][p] {
                for v in 0..recon[n][p].len() {
                    sum += (recon[n][p][v] - target[n][p][v]).powi(2);
                    count += 1;
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total / recon.len() as f64
}

/// Expected Overlap percentage by exact enumeration of crop boxes on a cube
/// of side `s`: the local extent is fixed, the global scale is uniform on
/// `[g_lo, g_hi]` with round-half-up extents, origins are uniform per axis.
pub fn overlap_oracle(s: usize, local_extent: usize, g_lo: f64, g_hi: f64) -> f64 {
    let mut total = 0.0;
    for e in 1..=s {
        let lo = ((e as f64 - 0.5) / s as f64).max(g_lo);
        let hi = ((e as f64 + 0.5) / s as f64).min(g_hi);
        if hi <= lo {
            continue;
        }
        let prob = (hi - lo) / (g_hi - g_lo);
        let mut axis = 0.0;
        let mut cases = 0usize;
        for a in 0..=s - local_extent {
            for b in 0..=s - e {
                let start = a.max(b);
                let end = (a + local_extent).min(b + e);
                axis += end.saturating_sub(start) as f64;
                cases += 1;
            }
        }
        let frac = axis / cases as f64 / local_extent as f64;
        total += prob * frac.powi(3);
    }
    100.0 * total
}

/// Plain MAE on local views: per-view forward, masked MSE, AdamW, with the
/// same sampling streams as the pre-training loop.
pub struct MaeOracle {
    pub model: ModelConfig,
    pub params: BTreeMap<String, Var>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

fn lin(x: &Tensor, p: &BTreeMap<String, Var>, name: &str) -> Tensor {
    let w = p[&format!("{name}.weight")].as_tensor();
    let b = p[&format!("{name}.bias")].as_tensor();
    x.matmul(w).unwrap().broadcast_add(b).unwrap()
}

fn layer_norm(x: &Tensor, p: &BTreeMap<String, Var>, name: &str) -> Tensor {
    let g = p[&format!("{name}.gamma")].as_tensor();
    let b = p[&format!("{name}.beta")].as_tensor();
    let mean = x.mean_keepdim(D::Minus1).unwrap();
    let c = x.broadcast_sub(&mean).unwrap();
    let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
    let n = c.broadcast_div(&(var + 1e-6).unwrap().sqrt().unwrap()).unwrap();
    n.broadcast_mul(g).unwrap().broadcast_add(b).unwrap()
}

/// One pre-norm transformer block on a `[T, W]` sequence, heads looped.
fn block(x: &Tensor, p: &BTreeMap<String, Var>, name: &str, heads: usize) -> Tensor {
    let (_, w) = x.dims2().unwrap();
    let dh = w / heads;
    let h = layer_norm(x, p, &format!("{name}.norm1"));
    let q = lin(&h, p, &format!("{name}.attn.wq"));
    let k = lin(&h, p, &format!("{name}.attn.wk"));
    let v = lin(&h, p, &format!("{name}.attn.wv"));
    let mut outs = Vec::new();
    for i in 0..heads {
        let qi = q.narrow(1, i * dh, dh).unwrap();
        let ki = k.narrow(1, i * dh, dh).unwrap();
        let vi = v.narrow(1, i * dh, dh).unwrap();
        let s = (qi.matmul(&ki.t().unwrap()).unwrap() * (1.0 / (dh as f64).sqrt())).unwrap();
        let mx = s.max_keepdim(D::Minus1).unwrap().detach();
        let e = s.broadcast_sub(&mx).unwrap().exp().unwrap();
        let a = e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap();
        outs.push(a.matmul(&vi).unwrap());
    }
    let attn = lin(&Tensor::cat(&outs, 1).unwrap(), p, &format!("{name}.attn.wo"));
    let x = (x + attn).unwrap();
    let h = layer_norm(&x, p, &format!("{name}.norm2"));
    let m = lin(&lin(&h, p, &format!("{name}.mlp.fc1")).gelu_erf().unwrap(), p, &format!("{name}.mlp.fc2"));
    (x + m).unwrap()
}

impl MaeOracle {
    pub fn new(model: &ModelConfig, seed: u64) -> Self {
        let store = init_params(model, seed, DType::F64).unwrap();
        let params = store
            .tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("student.encoder.") || n.starts_with("student.decoder."))
            .map(|(n, t)| (n, Var::from_tensor(&t.copy().unwrap()).unwrap()))
            .collect();
        Self { model: model.clone(), params, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// Masked MSE of one view (grid must equal the base positional grid).
    pub fn view_loss(&self, mv: &MaskedView) -> Tensor {
        let p = &self.params;
        let cfg = &self.model;
        assert_eq!(mv.grid.grid_dims, cfg.encoder.base_grid_dims);
        let pv = mv.grid.patch_voxels();
        let np = mv.grid.num_patches();
        let dev = &Device::Cpu;
        let vis = &mv.visible_index;
        let x = Tensor::from_vec(mv.visible_patches(), (vis.len(), pv), dev).unwrap().to_dtype(DType::F64).unwrap();
        let idx = Tensor::from_vec(vis.iter().map(|&i| i as u32).collect::<Vec<_>>(), vis.len(), dev).unwrap();
        let pos = p["student.encoder.pos_embed"].as_tensor().index_select(&idx, 0).unwrap();
        let tokens = (lin(&x, p, "student.encoder.patch_embed") + pos).unwrap();
        let cls = p["student.encoder.cls_token"].as_tensor().unsqueeze(0).unwrap();
        let mut h = Tensor::cat(&[&cls, &tokens], 0).unwrap();
        for b in 0..cfg.encoder.depth {
            h = block(&h, p, &format!("student.encoder.block{b}"), cfg.encoder.num_heads);
        }
        let h = layer_norm(&h, p, "student.encoder.norm");
        let latent = lin(&h.narrow(0, 1, vis.len()).unwrap(), p, "student.decoder.embed");
        let mask_tok = p["student.decoder.mask_token"].as_tensor().unsqueeze(0).unwrap();
        let mut rows = Vec::with_capacity(np);
        let mut r = 0;
        for &m in &mv.mask {
            if m {
                rows.push(mask_tok.clone());
            } else {
                rows.push(latent.narrow(0, r, 1).unwrap());
                r += 1;
            }
        }
        let mut d = (Tensor::cat(&rows, 0).unwrap() + p["student.decoder.pos_embed"].as_tensor()).unwrap();
        for b in 0..cfg.decoder_depth {
            d = block(&d, p, &format!("student.decoder.block{b}"), cfg.decoder_heads);
        }
        let out = lin(&layer_norm(&d, p, "student.decoder.norm"), p, "student.decoder.head");
        let target = Tensor::from_vec(mv.grid.patches.clone(), (np, pv), dev).unwrap().to_dtype(DType::F64).unwrap();
        let w: Vec<f64> = mv.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let masked = mv.mask.iter().filter(|&&m| m).count();
        let w = Tensor::from_vec(w, (np, 1), dev).unwrap();
        let sq = (out - target).unwrap().sqr().unwrap().broadcast_mul(&w).unwrap();
        (sq.sum_all().unwrap() / (masked * pv) as f64).unwrap()
    }

    /// AdamW with decay on `*.weight` only; parameters without gradient are
    /// skipped.
    pub fn adamw(&mut self, loss: &Tensor, lr: f64) {
        let grads = loss.backward().unwrap();
        self.t += 1;
        let (b1, b2, eps, wd) = (0.9f64, 0.95f64, 1e-8, 0.05);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let mut x = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; x.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; x.len()]);
            let decay = if name.ends_with(".weight") { wd } else { 0.0 };
            for i in 0..x.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(self.t));
                let vh = v[i] / (1.0 - b2.powi(self.t));
                x[i] -= lr * (decay * x[i] + mh / (vh.sqrt() + eps));
            }
            var.set(&Tensor::from_vec(x, var.shape(), &Device::Cpu).unwrap()).unwrap();
        }
    }

    /// Runs the whole MAE schedule over `volumes` and returns per-step losses.
    pub fn run(mut self, volumes: &[Volume], cfg: &PretrainConfig) -> Vec<f64> {
        let n = volumes.len();
        let spe = n.div_ceil(cfg.batch_size);
        let total = cfg.epochs * spe;
        let warm = (total as f64 * cfg.warmup_frac).round() as usize;
        let mut losses = Vec::new();
        for step in 0..total {
            let (epoch, slot) = (step / spe, step % spe);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(cfg.seed, EPOCH_DOMAIN, epoch as u64));
            let batch = &order[slot * cfg.batch_size..((slot + 1) * cfg.batch_size).min(n)];
            let mut rng = stream_rng(cfg.seed, STEP_DOMAIN, step as u64);
            let mut views = Vec::new();
            for &i in batch {
                let locals: Vec<_> = (0..cfg.q).map(|_| sample_local(&volumes[i], &cfg.views, &mut rng).unwrap()).collect();
                for l in &locals {
                    views.push(mask_patches(patchify(l, self.model.encoder.patch_size).unwrap(), cfg.mask_ratio, &mut rng).unwrap());
                }
            }
            let mut loss = self.view_loss(&views[0]);
            for mv in &views[1..] {
                loss = (loss + self.view_loss(mv)).unwrap();
            }
            let loss = (loss / views.len() as f64).unwrap();
            losses.push(loss.to_scalar::<f64>().unwrap());
            let lr = if step < warm {
                cfg.lr0 * step as f64 / warm as f64
            } else {
                let span = (total - warm) as f64;
                cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * (step - warm) as f64 / span).cos())
            };
            self.adamw(&loss, lr);
        }
        losses
    }
}
