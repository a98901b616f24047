//! Multi-crop view sampling (global and local crops), the whole-volume
//! downsampling ablation, and the overlap/hit statistics between local and
//! global crops.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{resize_nearest, resize_trilinear};
use crate::volume::{numel, LabeledVolume, Shape3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropGeometry {
    pub origin: Shape3,
    pub extent: Shape3,
    pub source_shape: Shape3,
}

impl CropGeometry {
    pub fn full(source_shape: Shape3) -> Self {
        Self { origin: [0; 3], extent: source_shape, source_shape }
    }

    pub fn voxels(&self) -> usize {
        numel(self.extent)
    }

    /// Voxel count of the box intersection.
    pub fn intersection(&self, other: &CropGeometry) -> usize {
        (0..3)
            .map(|i| {
                let lo = self.origin[i].max(other.origin[i]);
                let hi = (self.origin[i] + self.extent[i]).min(other.origin[i] + other.extent[i]);
                hi.saturating_sub(lo)
            })
            .product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Uniform,
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub global_scale: (f64, f64),
    pub global_size: Shape3,
    pub local_scale: (f64, f64),
    pub local_size: Shape3,
    #[serde(default)]
    pub placement: Placement,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global_scale: (0.5, 1.0),
            global_size: [160; 3],
            local_scale: (0.25, 0.5),
            local_size: [96; 3],
            placement: Placement::Uniform,
        }
    }
}

impl ViewConfig {
    pub fn desk() -> Self {
        Self { global_size: [32; 3], local_size: [16; 3], ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
            }
        }
        if self.global_size.iter().chain(&self.local_size).any(|&s| s == 0) {
            return Err(Error::InvalidArgument("view sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub data: Vec<f32>,
    pub geometry: CropGeometry,
    pub kind: ViewKind,
    pub size: Shape3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub globals: Vec<View>,
    pub locals: Vec<View>,
    pub source_id: String,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Draws one crop box. Always consumes exactly four uniform draws (scale plus
/// one per axis) so streams stay aligned whatever the configuration.
pub fn sample_crop_geometry<R: Rng>(
    source_shape: Shape3,
    scale: (f64, f64),
    placement: Placement,
    rng: &mut R,
) -> Result<CropGeometry> {
    if source_shape.iter().any(|&s| s < 2) {
        return Err(Error::DegenerateInput(format!(
            "volume {source_shape:?} needs at least 2 voxels per axis"
        )));
    }
    let u: f64 = rng.random();
    let s = scale.0 + u * (scale.1 - scale.0);
    let mut extent = [0; 3];
    let mut origin = [0; 3];
    for i in 0..3 {
        extent[i] = round_half_up(s * source_shape[i] as f64).clamp(1, source_shape[i]);
        let slack = source_shape[i] - extent[i];
        let draw = rng.random_range(0..=slack);
        origin[i] = match placement {
            Placement::Uniform => draw,
            Placement::Centered => slack / 2,
        };
    }
    Ok(CropGeometry { origin, extent, source_shape })
}

pub fn crop(v: &Volume, g: &CropGeometry) -> Vec<f32> {
    crop_slice(v.data(), v.shape(), g)
}

fn crop_slice<T: Copy>(data: &[T], shape: Shape3, g: &CropGeometry) -> Vec<T> {
    let mut out = Vec::with_capacity(g.voxels());
    for h in g.origin[0]..g.origin[0] + g.extent[0] {
        for w in g.origin[1]..g.origin[1] + g.extent[1] {
            let row = (h * shape[1] + w) * shape[2];
            out.extend_from_slice(&data[row + g.origin[2]..row + g.origin[2] + g.extent[2]]);
        }
    }
    out
}

pub fn view_from_geometry(v: &Volume, g: CropGeometry, kind: ViewKind, size: Shape3) -> View {
    let data = resize_trilinear(&crop(v, &g), g.extent, size);
    View { data, geometry: g, kind, size }
}

/// Crops a labelled volume and resizes intensities trilinearly and labels by
/// nearest neighbour.
pub fn crop_labeled(lv: &LabeledVolume, g: &CropGeometry, size: Shape3) -> (View, Vec<u8>) {
    let view = view_from_geometry(&lv.volume, *g, ViewKind::Local, size);
    let labels = resize_nearest(&crop_slice(lv.labels(), lv.shape(), g), g.extent, size);
    (view, labels)
}

pub fn sample_global<R: Rng>(v: &Volume, cfg: &ViewConfig, rng: &mut R) -> Result<View> {
    cfg.validate()?;
    let g = sample_crop_geometry(v.shape(), cfg.global_scale, cfg.placement, rng)?;
    Ok(view_from_geometry(v, g, ViewKind::Global, cfg.global_size))
}

pub fn sample_local<R: Rng>(v: &Volume, cfg: &ViewConfig, rng: &mut R) -> Result<View> {
    cfg.validate()?;
    let g = sample_crop_geometry(v.shape(), cfg.local_scale, cfg.placement, rng)?;
    Ok(view_from_geometry(v, g, ViewKind::Local, cfg.local_size))
}

/// `p` global views followed by `q` local views, drawn in that order.
pub fn sample_views<R: Rng>(
    v: &Volume,
    source_id: &str,
    p: usize,
    q: usize,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<ViewSet> {
    if p == 0 {
        return Err(Error::InvalidArgument("at least one global view is required".into()));
    }
    let globals = (0..p).map(|_| sample_global(v, cfg, rng)).collect::<Result<Vec<_>>>()?;
    let locals = (0..q).map(|_| sample_local(v, cfg, rng)).collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { globals, locals, source_id: source_id.to_string() })
}

/// Resizes the whole volume into a single global view.
pub fn downsample_whole(v: &Volume, size: Shape3) -> Result<View> {
    if size.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("target size {size:?} has an empty axis")));
    }
    Ok(view_from_geometry(v, CropGeometry::full(v.shape()), ViewKind::Global, size))
}

/// Percentage of the local box covered by the global box. Normalized by the
/// local box only, so it is not symmetric in its arguments.
pub fn overlap_ratio(local: &CropGeometry, global: &CropGeometry) -> Result<f64> {
    if local.source_shape != global.source_shape {
        return Err(Error::ShapeMismatch(format!(
            "crops come from different sources {:?} and {:?}",
            local.source_shape, global.source_shape
        )));
    }
    Ok(100.0 * local.intersection(global) as f64 / local.voxels() as f64)
}

/// Crop boxes for one volume in one round: `p` globals then `q` locals.
#[derive(Debug, Clone)]
pub struct CropSample {
    pub globals: Vec<CropGeometry>,
    pub locals: Vec<CropGeometry>,
}

/// Draws crop geometry for `rounds` passes over the given source shapes, in
/// the same per-volume order `sample_views` uses.
pub fn sample_crop_sets(
    shapes: &[Shape3],
    p: usize,
    q: usize,
    cfg: &ViewConfig,
    seed: u64,
    rounds: usize,
) -> Result<Vec<Vec<CropSample>>> {
    cfg.validate()?;
    if shapes.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if p == 0 || q == 0 {
        return Err(Error::InvalidArgument("overlap statistics need p >= 1 and q >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rounds.max(1))
        .map(|_| {
            shapes
                .iter()
                .map(|&s| {
                    let globals = (0..p)
                        .map(|_| sample_crop_geometry(s, cfg.global_scale, cfg.placement, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let locals = (0..q)
                        .map(|_| sample_crop_geometry(s, cfg.local_scale, cfg.placement, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(CropSample { globals, locals })
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugStats {
    pub overlap_pct: f64,
    pub hit_pct: f64,
    pub n_samples: usize,
}

/// Overlap and Hit over the same sampled crops. Each round is one pass over
/// the dataset; results are averaged over rounds.
pub fn crop_statistics(samples: &[Vec<CropSample>]) -> Result<AugStats> {
    let mut overlap = 0.0;
    let mut hit = 0.0;
    let mut volumes = 0usize;
    let mut pairs = 0usize;
    for round in samples {
        for s in round {
            let norm = (s.globals.len() * s.locals.len()) as f64;
            let (mut o, mut h) = (0.0, 0.0);
            for g in &s.globals {
                for l in &s.locals {
                    let r = overlap_ratio(l, g)?;
                    o += r;
                    h += if r > 0.0 { 100.0 } else { 0.0 };
                    pairs += 1;
                }
            }
            overlap += o / norm;
            hit += h / norm;
            volumes += 1;
        }
    }
    if volumes == 0 {
        return Err(Error::Empty("crop samples"));
    }
    Ok(AugStats { overlap_pct: overlap / volumes as f64, hit_pct: hit / volumes as f64, n_samples: pairs })
}

pub fn dataset_overlap(shapes: &[Shape3], p: usize, q: usize, cfg: &ViewConfig, seed: u64, rounds: usize) -> Result<f64> {
    Ok(crop_statistics(&sample_crop_sets(shapes, p, q, cfg, seed, rounds)?)?.overlap_pct)
}

pub fn dataset_hit(shapes: &[Shape3], p: usize, q: usize, cfg: &ViewConfig, seed: u64, rounds: usize) -> Result<f64> {
    Ok(crop_statistics(&sample_crop_sets(shapes, p, q, cfg, seed, rounds)?)?.hit_pct)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugStatsRow {
    pub local_scale_lo: f64,
    pub local_scale_hi: f64,
    pub overlap_pct: f64,
    pub hit_pct: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const AUGSTATS_HEADER: &str = "local_scale_lo,local_scale_hi,overlap_pct,hit_pct,n_samples,seed";

pub fn augstats_csv(rows: &[AugStatsRow]) -> String {
    let mut out = String::from(AUGSTATS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{},{}\n",
            r.local_scale_lo, r.local_scale_hi, r.overlap_pct, r.hit_pct, r.n_samples, r.seed
        ));
    }
    out
}
