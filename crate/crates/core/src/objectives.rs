//! Loss terms: masked reconstruction at both view scales, temperature
//! sharpening, cross-entropy, global-to-global and global-to-local
//! consistency, and their weighted total.
//!
//! Everything operates on candle tensors so the student side stays
//! differentiable. Teacher distributions are always detached.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::softmax_last;

pub const LOG_EPS: f64 = 1e-12;

/// A loss value plus whether it was vacuous (no terms to average).
#[derive(Debug, Clone)]
pub struct Term {
    pub value: Tensor,
    pub vacuous: bool,
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

/// Mean squared error over masked patches only.
///
/// `recon` and `target` are `[N, P, patch_voxels]` (or `[P, patch_voxels]`
/// for a single view); `masks[n][p]` marks hidden patches. Each view is
/// averaged over its masked voxels, then views are averaged. Views without
/// masked patches contribute zero; if none has any, the term is vacuous.
pub fn recon_loss(recon: &Tensor, target: &Tensor, masks: &[Vec<bool>]) -> Result<Term> {
    if recon.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs target {:?}",
            recon.dims(),
            target.dims()
        )));
    }
    let (recon, target) = if recon.rank() == 2 {
        (recon.unsqueeze(0)?, target.unsqueeze(0)?)
    } else {
        (recon.clone(), target.clone())
    };
    let (n, p, pv) = recon.dims3()?;
    if masks.len() != n || masks.iter().any(|m| m.len() != p) {
        return Err(Error::ShapeMismatch(format!("masks do not cover {n} views of {p} patches")));
    }
    let mut weights = Vec::with_capacity(n * p);
    let mut any = false;
    for mask in masks {
        let m = mask.iter().filter(|&&x| x).count();
        any |= m > 0;
        let w = if m == 0 { 0.0 } else { 1.0 / (m * pv * n) as f64 };
        weights.extend(mask.iter().map(|&x| if x { w } else { 0.0 }));
    }
    if !any {
        return Ok(Term { value: zero(recon.dtype())?, vacuous: true });
    }
    let w = Tensor::from_vec(weights, (n, p, 1), &Device::Cpu)?.to_dtype(recon.dtype())?;
    let sq = (recon - target)?.sqr()?;
    Ok(Term { value: sq.broadcast_mul(&w)?.sum_all()?, vacuous: false })
}

/// Temperature-scaled softmax over the last axis.
#[derive(Debug, Clone)]
pub struct SharpenedDistribution {
    pub probs: Tensor,
    pub temperature: f64,
}

pub fn sharpen(e: &Tensor, t: f64) -> Result<SharpenedDistribution> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {t} must be positive")));
    }
    Ok(SharpenedDistribution { probs: softmax_last(&(e / t)?)?, temperature: t })
}

/// `-sum_k target[k] * ln(student[k] + eps)` along the last axis, one value
/// per row. The target is detached.
pub fn xent(target: &SharpenedDistribution, student: &SharpenedDistribution) -> Result<Tensor> {
    if target.probs.dims() != student.probs.dims() {
        return Err(Error::ShapeMismatch(format!(
            "distributions {:?} vs {:?}",
            target.probs.dims(),
            student.probs.dims()
        )));
    }
    let log_s = (&student.probs + LOG_EPS)?.log()?;
    Ok((target.probs.detach() * log_s)?.sum(D::Minus1)?.neg()?)
}

/// Mean cross-entropy over every (teacher, student) pair. Inputs are
/// `[A, K]` and `[B, K]`, or batched `[N, A, K]` and `[N, B, K]` where pairs
/// are only formed within the same batch entry.
fn pairwise_consistency(teacher: &Tensor, student: &Tensor, t_teacher: f64, t_student: f64) -> Result<Term> {
    let (teacher, student) = if teacher.rank() == 2 {
        (teacher.unsqueeze(0)?, student.unsqueeze(0)?)
    } else {
        (teacher.clone(), student.clone())
    };
    let (n, a, k) = teacher.dims3()?;
    let (ns, b, ks) = student.dims3()?;
    if n != ns || k != ks {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher.dims(),
            student.dims()
        )));
    }
    if a == 0 {
        return Err(Error::Empty("teacher embeddings"));
    }
    if b == 0 {
        return Ok(Term { value: zero(teacher.dtype())?, vacuous: true });
    }
    let target = sharpen(&teacher, t_teacher)?.probs.detach();
    let log_s = (sharpen(&student, t_student)?.probs + LOG_EPS)?.log()?;
    // [N, A, K] x [N, K, B] -> pairwise sum_k T log S
    let cross = target.matmul(&log_s.transpose(1, 2)?.contiguous()?)?;
    Ok(Term { value: (cross.sum_all()? / -((n * a * b) as f64))?, vacuous: false })
}

/// Global-to-global consistency between teacher embeddings of unmasked
/// globals and student embeddings of masked globals.
pub fn consistency_gg(ec: &Tensor, eg: &Tensor, t_teacher: f64, t_student: f64) -> Result<Term> {
    let (_, b) = pair_counts(eg)?;
    if b == 0 {
        return Err(Error::Empty("masked global embeddings"));
    }
    pairwise_consistency(ec, eg, t_teacher, t_student)
}

/// Global-to-local consistency between teacher embeddings of unmasked globals
/// and student embeddings of masked locals. Vacuous (zero) when there are no
/// locals.
pub fn consistency_gl(ec: &Tensor, el: &Tensor, t_teacher: f64, t_student: f64) -> Result<Term> {
    pairwise_consistency(ec, el, t_teacher, t_student)
}

fn pair_counts(x: &Tensor) -> Result<(usize, usize)> {
    let dims = x.dims();
    match dims.len() {
        2 => Ok((1, dims[0])),
        3 => Ok((dims[0], dims[1])),
        _ => Err(Error::ShapeMismatch(format!("embedding list of shape {dims:?}"))),
    }
}

/// Running-mean centering of teacher outputs before sharpening. Off by
/// default; mitigates collapse in longer runs.
#[derive(Debug, Clone)]
pub struct TeacherCentering {
    pub center: Tensor,
    pub momentum: f64,
}

impl TeacherCentering {
    pub fn new(k: usize, momentum: f64, dtype: DType) -> Result<Self> {
        Ok(Self { center: Tensor::zeros(k, dtype, &Device::Cpu)?, momentum })
    }

    pub fn apply(&self, teacher: &Tensor) -> Result<Tensor> {
        Ok(teacher.broadcast_sub(&self.center)?)
    }

    /// `center = m * center + (1 - m) * mean(batch)` over all leading axes.
    pub fn update(&mut self, teacher: &Tensor) -> Result<()> {
        let k = self.center.dim(0)?;
        let flat = teacher.detach().reshape(((), k))?;
        let mean = flat.mean(0)?;
        self.center = ((&self.center * self.momentum)? + (mean * (1.0 - self.momentum))?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta1: 1.0, beta2: 1.0, beta3: 1.0 }
    }
}

impl LossWeights {
    /// `L = L_R + alpha * L_C`: unit weight on global reconstruction, `alpha`
    /// on both consistency terms.
    pub fn from_alpha(alpha: f64) -> Self {
        Self { beta1: 1.0, beta2: alpha, beta3: alpha }
    }

    /// Local reconstruction only.
    pub fn mae3d() -> Self {
        Self { beta1: 0.0, beta2: 0.0, beta3: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub recon_local: Tensor,
    pub recon_global: Tensor,
    pub cons_gg: Tensor,
    pub cons_gl: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_local: f64,
    pub recon_global: f64,
    pub cons_gg: f64,
    pub cons_gl: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn compose(recon_local: f64, recon_global: f64, cons_gg: f64, cons_gl: f64, weights: LossWeights) -> Self {
        let total = recon_local + weights.beta1 * recon_global + weights.beta2 * cons_gg + weights.beta3 * cons_gl;
        Self { recon_local, recon_global, cons_gg, cons_gl, total, weights }
    }

    /// `(L_R, L_C)` with `L_R = recon_local + beta1 * recon_global` and
    /// `L_C = cons_gg + cons_gl`. When `beta2 == beta3 == alpha`, the total
    /// equals `L_R + alpha * L_C`.
    pub fn regrouped(&self) -> (f64, f64) {
        (self.recon_local + self.weights.beta1 * self.recon_global, self.cons_gg + self.cons_gl)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted sum of the four parts. Returns the differentiable total and the
/// scalar breakdown; any non-finite part is an error naming it.
pub fn total_loss(parts: &LossParts, weights: LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let named = [
        ("recon_local", &parts.recon_local),
        ("recon_global", &parts.recon_global),
        ("cons_gg", &parts.cons_gg),
        ("cons_gl", &parts.cons_gl),
    ];
    let mut vals = [0.0; 4];
    for (i, (name, t)) in named.iter().enumerate() {
        vals[i] = scalar(t)?;
        if !vals[i].is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    let mut total = parts.recon_local.clone();
    for (w, t) in [
        (weights.beta1, &parts.recon_global),
        (weights.beta2, &parts.cons_gg),
        (weights.beta3, &parts.cons_gl),
    ] {
        if w != 0.0 {
            total = (total + (t * w)?)?;
        }
    }
    Ok((total, LossBreakdown::compose(vals[0], vals[1], vals[2], vals[3], weights)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn recon_zero_when_exact() {
        let x = Tensor::arange(0.0f64, 16.0, &Device::Cpu).unwrap().reshape((2, 8)).unwrap();
        let term = recon_loss(&x, &x, &[vec![true, false]]).unwrap();
        assert_eq!(val(&term.value), 0.0);
        assert!(!term.vacuous);
    }

    #[test]
    fn recon_single_masked_patch() {
        let recon = Tensor::zeros((2, 8), DType::F64, &Device::Cpu).unwrap();
        let target = (Tensor::ones((2, 8), DType::F64, &Device::Cpu).unwrap() * 0.5).unwrap();
        let term = recon_loss(&recon, &target, &[vec![false, true]]).unwrap();
        assert!((val(&term.value) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn recon_vacuous_without_mask() {
        let recon = Tensor::zeros((2, 8), DType::F64, &Device::Cpu).unwrap();
        let target = Tensor::ones((2, 8), DType::F64, &Device::Cpu).unwrap();
        let term = recon_loss(&recon, &target, &[vec![false, false]]).unwrap();
        assert_eq!(val(&term.value), 0.0);
        assert!(term.vacuous);
        assert!(recon_loss(&recon, &target.narrow(1, 0, 4).unwrap(), &[vec![true, true]]).is_err());
    }

    #[test]
    fn sharpen_examples() {
        let p = sharpen(&t1(&[0.0, 0.0]), 1.0).unwrap().probs.to_vec1::<f64>().unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = sharpen(&t1(&[1.0, 0.0]), 0.05).unwrap().probs.to_vec1::<f64>().unwrap();
        assert!((p[0] - 1.0 / (1.0 + (-20.0f64).exp())).abs() < 1e-12);
        assert!(p[0] > 0.999);
        assert!(sharpen(&t1(&[1.0]), 0.0).is_err());
        assert!(sharpen(&t1(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn xent_examples() {
        let target = SharpenedDistribution { probs: t1(&[1.0, 0.0]), temperature: 1.0 };
        let student = SharpenedDistribution { probs: t1(&[0.5, 0.5]), temperature: 1.0 };
        assert!((val(&xent(&target, &student).unwrap()) - std::f64::consts::LN_2).abs() < 1e-9);
        let d = sharpen(&t1(&[0.3, -1.0, 2.0]), 1.0).unwrap();
        let p = d.probs.to_vec1::<f64>().unwrap();
        let entropy: f64 = -p.iter().map(|x| x * (x + LOG_EPS).ln()).sum::<f64>();
        assert!((val(&xent(&d, &d).unwrap()) - entropy).abs() < 1e-12);
        let short = SharpenedDistribution { probs: t1(&[1.0]), temperature: 1.0 };
        assert!(xent(&short, &student).is_err());
    }

    #[test]
    fn consistency_term_counts() {
        let e = Tensor::new(&[[0.2, -0.4, 1.0]], &Device::Cpu).unwrap();
        let p = sharpen(&e, 1.0).unwrap().probs.to_vec2::<f64>().unwrap();
        let entropy: f64 = -p[0].iter().map(|x| x * (x + LOG_EPS).ln()).sum::<f64>();
        let gg = consistency_gg(&e, &e, 1.0, 1.0).unwrap();
        assert!((val(&gg.value) - entropy).abs() < 1e-12);

        let empty = Tensor::zeros((0, 3), DType::F64, &Device::Cpu).unwrap();
        let gl = consistency_gl(&e, &empty, 0.04, 0.1).unwrap();
        assert!(gl.vacuous);
        assert_eq!(val(&gl.value), 0.0);
        assert!(consistency_gg(&empty, &e, 1.0, 1.0).is_err());
        assert!(consistency_gg(&e, &empty, 1.0, 1.0).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let parts = LossParts {
            recon_local: one.clone(),
            recon_global: one.clone(),
            cons_gg: one.clone(),
            cons_gl: one.clone(),
        };
        let (t, b) = total_loss(&parts, LossWeights::default()).unwrap();
        assert_eq!((val(&t), b.total), (4.0, 4.0));
        let (t, b) = total_loss(&parts, LossWeights::mae3d()).unwrap();
        assert_eq!((val(&t), b.total), (1.0, b.recon_local));
        let alpha = LossWeights::from_alpha(1.0);
        assert_eq!(alpha, LossWeights::default());
        let (_, b) = total_loss(&parts, LossWeights::from_alpha(0.5)).unwrap();
        let (lr, lc) = b.regrouped();
        assert_eq!(b.total, lr + 0.5 * lc);

        let bad = LossParts { cons_gl: Tensor::new(f64::NAN, &Device::Cpu).unwrap(), ..parts };
        assert!(matches!(total_loss(&bad, LossWeights::default()), Err(Error::NonFiniteLoss("cons_gl"))));
    }

    #[test]
    fn centering_tracks_mean() {
        let mut c = TeacherCentering::new(2, 0.5, DType::F64).unwrap();
        let batch = Tensor::new(&[[2.0, 0.0], [4.0, 2.0]], &Device::Cpu).unwrap();
        c.update(&batch).unwrap();
        assert_eq!(c.center.to_vec1::<f64>().unwrap(), vec![1.5, 0.5]);
        let shifted = c.apply(&batch).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(shifted[0], vec![0.5, -0.5]);
    }
}
