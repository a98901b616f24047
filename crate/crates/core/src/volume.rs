//! Volumetric data: the in-memory grid type, intensity windowing, the raw-grid
//! file format and the procedural blob generator used as a desk-scale corpus.
//!
//! Voxels are stored channel-free in H-major, then W, then D order, so the flat
//! index of `(h, w, d)` is `(h * W + w) * D + d`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];

pub fn numel(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape3, h: usize, w: usize, d: usize) -> usize {
    (h * shape[1] + w) * shape[2] + d
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: Shape3,
    spacing: [f64; 3],
    intensity_range: (f64, f64),
}

impl Volume {
    pub fn new(data: Vec<f32>, shape: Shape3, spacing: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("volume shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        if data.len() != numel(shape) {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { data, shape, spacing, intensity_range: (0.0, 1.0) })
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(vec![value; numel(shape)], shape, [1.0; 3])
    }

    pub fn with_intensity_range(mut self, lo: f64, hi: f64) -> Self {
        self.intensity_range = (lo, hi);
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn intensity_range(&self) -> (f64, f64) {
        self.intensity_range
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[flat_index(self.shape, h, w, d)]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Maps raw intensities through the window `[lo, hi]` onto `[0, 1]`, clamping
/// values outside the window.
pub fn normalize_window(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidWindow { lo, hi });
    }
    let scale = hi - lo;
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - lo) / scale).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Volume { data, shape: v.shape, spacing: v.spacing, intensity_range: (lo, hi) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub volume: Volume,
    labels: Vec<u8>,
    num_classes: usize,
}

impl LabeledVolume {
    pub fn new(volume: Volume, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > u8::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!("num_classes {num_classes} out of range")));
        }
        if labels.len() != volume.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a volume of {} voxels",
                labels.len(),
                volume.data.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self { volume, labels, num_classes })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> Shape3 {
        self.volume.shape
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Shape3,
    spacing: [f64; 3],
    intensity_range: [f64; 2],
    version: u32,
}

fn raw_and_sidecar(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("f32raw"), path.with_extension("json"))
}

/// Writes `<stem>.f32raw` and `<stem>.json`. `path` may name either file or
/// the bare stem.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let (raw, sidecar) = raw_and_sidecar(path);
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw, bytes)?;
    let meta = Sidecar {
        shape: v.shape,
        spacing: v.spacing,
        intensity_range: [v.intensity_range.0, v.intensity_range.1],
        version: 1,
    };
    fs::write(&sidecar, serde_json::to_vec(&meta)?)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (raw, sidecar) = raw_and_sidecar(path);
    for p in [&raw, &sidecar] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let meta: Sidecar = serde_json::from_slice(&fs::read(&sidecar)?)?;
    if meta.version != 1 {
        return Err(Error::InvalidArgument(format!("unsupported raw-grid version {}", meta.version)));
    }
    let bytes = fs::read(&raw)?;
    let expected = numel(meta.shape);
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "sidecar shape {:?} needs {expected} voxels, payload holds {} bytes",
            meta.shape,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(expected);
    for (index, chunk) in bytes.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !x.is_finite() {
            return Err(Error::NonFiniteVoxel { path: raw, index });
        }
        data.push(x);
    }
    Ok(Volume::new(data, meta.shape, meta.spacing)?
        .with_intensity_range(meta.intensity_range[0], meta.intensity_range[1]))
}

fn save_labels(labeled: &LabeledVolume, path: &Path) -> Result<()> {
    let data = labeled.labels.iter().map(|&l| l as f32).collect();
    let v = Volume::new(data, labeled.shape(), labeled.volume.spacing)?
        .with_intensity_range(0.0, (labeled.num_classes - 1) as f64);
    save_volume(&v, path)
}

fn load_labels(path: &Path) -> Result<(Vec<u8>, Shape3, usize)> {
    let v = load_volume(path)?;
    let labels = v
        .data
        .iter()
        .map(|&x| {
            if x < 0.0 || x > u8::MAX as f32 || x.fract() != 0.0 {
                Err(Error::InvalidArgument(format!("label value {x} is not a class id")))
            } else {
                Ok(x as u8)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = v.intensity_range.1 as usize + 1;
    Ok((labels, v.shape, classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub volume_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub seed: u64,
    /// Directory relative entry paths are resolved against. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate manifest id `{}`", e.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut m: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_volumes(&self) -> Result<Vec<Volume>> {
        self.entries.iter().map(|e| load_volume(&self.resolve(&e.volume_path))).collect()
    }

    /// Loads every entry together with its label map. Entries without labels
    /// are an error here.
    pub fn load_labeled(&self) -> Result<Vec<LabeledVolume>> {
        self.entries
            .iter()
            .map(|e| {
                let volume = load_volume(&self.resolve(&e.volume_path))?;
                let lp = e.label_path.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("entry `{}` has no label map", e.id))
                })?;
                let (labels, shape, classes) = load_labels(&self.resolve(lp))?;
                if shape != volume.shape {
                    return Err(Error::ShapeMismatch(format!(
                        "labels {shape:?} vs volume {:?} for `{}`",
                        volume.shape, e.id
                    )));
                }
                LabeledVolume::new(volume, labels, classes)
            })
            .collect()
    }
}

/// Axis-aligned ellipsoid in voxel coordinates (voxel centers at integers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, h: usize, w: usize, d: usize) -> bool {
        let p = [h as f64, w as f64, d as f64];
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.semi_axes[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Calls `f` with the flat index of every voxel of `shape` inside the ellipsoid.
    pub fn for_each_voxel(&self, shape: Shape3, mut f: impl FnMut(usize)) {
        let lo = |i: usize| (self.center[i] - self.semi_axes[i]).floor().max(0.0) as usize;
        let hi = |i: usize| ((self.center[i] + self.semi_axes[i]).ceil() as usize).min(shape[i] - 1);
        if (0..3).any(|i| self.center[i] + self.semi_axes[i] < 0.0) {
            return;
        }
        for h in lo(0)..=hi(0) {
            for w in lo(1)..=hi(1) {
                for d in lo(2)..=hi(2) {
                    if self.contains(h, w, d) {
                        f(flat_index(shape, h, w, d));
                    }
                }
            }
        }
    }
}

const BACKGROUND_MEAN: f64 = 0.3;
const BACKGROUND_SIGMA: f64 = 0.05;
const BLOB_LO: f64 = 0.6;
const BLOB_HI: f64 = 0.9;

fn box_smooth(data: &[f32], shape: Shape3) -> Vec<f32> {
    let mut cur = data.to_vec();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let mut next = vec![0.0f32; cur.len()];
        let n = shape[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / strides[axis]) % n;
            let (mut acc, mut cnt) = (0.0f32, 0.0f32);
            for off in [-1i64, 0, 1] {
                let q = pos as i64 + off;
                if q >= 0 && (q as usize) < n {
                    let j = (i as i64 + off * strides[axis] as i64) as usize;
                    acc += cur[j];
                    cnt += 1.0;
                }
            }
            *out = acc / cnt;
        }
        cur = next;
    }
    cur
}

/// Generates one labelled volume: noisy background with one or two smooth
/// ellipsoidal blobs per foreground class. Class `c` blobs get intensities in
/// their own sub-band of `[0.6, 0.9]` so they are separable after smoothing.
pub fn synth_labeled_volume<R: Rng>(shape: Shape3, num_classes: usize, rng: &mut R) -> Result<LabeledVolume> {
    if num_classes < 1 {
        return Err(Error::InvalidArgument("num_classes must be at least 1".into()));
    }
    if shape.iter().any(|&s| s < 2) {
        return Err(Error::InvalidArgument(format!("shape {shape:?} too small to hold blobs")));
    }
    let n = numel(shape);
    let noise = Normal::new(0.0, BACKGROUND_SIGMA).expect("valid sigma");
    let mut data: Vec<f32> = (0..n).map(|_| (BACKGROUND_MEAN + noise.sample(rng)) as f32).collect();
    let mut labels = vec![0u8; n];

    let fg = num_classes.saturating_sub(1);
    let band = (BLOB_HI - BLOB_LO) / fg.max(1) as f64;
    for class in 1..=fg {
        let blobs = rng.random_range(1..=2);
        for _ in 0..blobs {
            let mut semi = [0.0; 3];
            let mut center = [0.0; 3];
            for i in 0..3 {
                let s = shape[i] as f64;
                semi[i] = rng.random_range((s / 10.0).max(1.0)..=(s / 5.0).max(1.5));
                center[i] = rng.random_range(semi[i].min(s / 2.0)..=(s - 1.0 - semi[i]).max(s / 2.0));
            }
            let lo = BLOB_LO + band * (class - 1) as f64;
            let level = rng.random_range(lo + 0.2 * band..=lo + 0.8 * band);
            let blob = Ellipsoid { center, semi_axes: semi };
            blob.for_each_voxel(shape, |i| {
                data[i] = (level + noise.sample(rng) * 0.5) as f32;
                labels[i] = class as u8;
            });
        }
    }
    let data = box_smooth(&data, shape).into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
    LabeledVolume::new(Volume::new(data, shape, [1.0; 3])?, labels, num_classes)
}

/// In-memory variant of [`synth_dataset`]; volume `i` draws from its own
/// ChaCha stream so entries are independent of `n`.
pub fn synth_volumes(n: usize, shape: Shape3, num_classes: usize, seed: u64) -> Result<Vec<LabeledVolume>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_labeled_volume(shape, num_classes, &mut rng)
        })
        .collect()
}

/// Generates `n` labelled volumes into `out_dir` and writes `manifest.json`.
pub fn synth_dataset(
    n: usize,
    shape: Shape3,
    num_classes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let vols = synth_volumes(n, shape, num_classes, seed)?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    for (i, lv) in vols.iter().enumerate() {
        let id = format!("synth_{i:04}");
        let vp = PathBuf::from(format!("{id}.f32raw"));
        let lp = PathBuf::from(format!("{id}_label.f32raw"));
        save_volume(&lv.volume, &out_dir.join(&vp))?;
        save_labels(lv, &out_dir.join(&lp))?;
        entries.push(ManifestEntry { id, volume_path: vp, label_path: Some(lp) });
    }
    let manifest = DatasetManifest { entries, seed, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: &[f32]) -> Volume {
        Volume::new(values.to_vec(), [values.len(), 1, 1], [1.0; 3]).unwrap()
    }

    #[test]
    fn window_maps_hu_range() {
        let v = normalize_window(&vol(&[-1000.0, 0.0, 2500.0]), -1000.0, 1000.0).unwrap();
        assert_eq!(v.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(v.intensity_range(), (-1000.0, 1000.0));
    }

    #[test]
    fn window_rejects_inverted_bounds() {
        assert!(matches!(
            normalize_window(&vol(&[0.0]), 1.0, 1.0),
            Err(Error::InvalidWindow { .. })
        ));
        assert!(normalize_window(&vol(&[0.0]), 2.0, -1.0).is_err());
    }

    #[test]
    fn window_is_idempotent_on_unit_data() {
        let v = vol(&[0.0, 0.25, 0.7, 1.0]);
        let once = normalize_window(&v, 0.0, 1.0).unwrap();
        let twice = normalize_window(&once, 0.0, 1.0).unwrap();
        assert_eq!(once.data(), v.data());
        assert_eq!(twice.data(), once.data());
    }

    #[test]
    fn volume_rejects_bad_geometry() {
        assert!(Volume::new(vec![], [0, 1, 1], [1.0; 3]).is_err());
        assert!(Volume::new(vec![0.0], [1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(Volume::new(vec![0.0; 3], [2, 1, 1], [1.0; 3]).is_err());
    }

    #[test]
    fn labels_must_be_in_class_range() {
        let v = Volume::filled([2, 1, 1], 0.0).unwrap();
        assert!(LabeledVolume::new(v.clone(), vec![0, 3], 3).is_err());
        assert!(LabeledVolume::new(v, vec![0, 2], 3).is_ok());
    }

    #[test]
    fn ellipsoid_voxel_count_matches_volume_formula() {
        // Brute force over the whole grid, independent of for_each_voxel's bounding box.
        let e = Ellipsoid { center: [20.0, 20.0, 20.0], semi_axes: [8.0, 6.0, 4.0] };
        let mut brute = 0usize;
        for h in 0..40 {
            for w in 0..40 {
                for d in 0..40 {
                    let (x, y, z) = (h as f64 - 20.0, w as f64 - 20.0, d as f64 - 20.0);
                    if (x / 8.0).powi(2) + (y / 6.0).powi(2) + (z / 4.0).powi(2) <= 1.0 {
                        brute += 1;
                    }
                }
            }
        }
        let mut counted = 0usize;
        e.for_each_voxel([40, 40, 40], |_| counted += 1);
        assert_eq!(counted, brute);
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 8.0 * 6.0 * 4.0;
        assert!((brute as f64 - analytic).abs() / analytic < 0.05, "{brute} vs {analytic}");
    }

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        let a = synth_volumes(2, [32, 32, 32], 3, 7).unwrap();
        let b = synth_volumes(2, [32, 32, 32], 3, 7).unwrap();
        let c = synth_volumes(2, [32, 32, 32], 3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].volume.data(), c[0].volume.data());
        for lv in &a {
            assert!(lv.labels().iter().all(|&l| l < 3));
            assert!(lv.volume.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
