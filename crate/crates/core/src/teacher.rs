//! Momentum teacher: initialization from the student, EMA updates, and the
//! per-iteration cosine schedules for the momentum coefficient and the
//! learning rate.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ParamStore;

pub const STUDENT: &str = "student.";
pub const TEACHER: &str = "teacher.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: usize,
    pub total_steps: usize,
    pub mu0: f64,
    pub lr0: f64,
    pub warmup_steps: usize,
}

impl ScheduleState {
    /// Warmup defaults to 5% of the run.
    pub fn new(total_steps: usize, mu0: f64, lr0: f64) -> Self {
        let warmup_steps = (total_steps as f64 * 0.05).round() as usize;
        Self { step: 0, total_steps, mu0, lr0, warmup_steps }
    }

    pub fn at(mut self, step: usize) -> Self {
        self.step = step;
        self
    }
}

/// `mu(step) = 1 - (1 - mu0) * (cos(pi * step / T) + 1) / 2`, rising from
/// `mu0` to exactly 1.
pub fn momentum_at(s: &ScheduleState) -> Result<f64> {
    if s.total_steps == 0 {
        return Err(Error::InvalidArgument("schedule needs total_steps > 0".into()));
    }
    let progress = s.step.min(s.total_steps) as f64 / s.total_steps as f64;
    Ok(1.0 - (1.0 - s.mu0) * ((PI * progress).cos() + 1.0) / 2.0)
}

/// Linear warmup from 0 to `lr0`, then half-cosine decay to 0 at `total_steps`.
pub fn lr_at(s: &ScheduleState) -> f64 {
    let step = s.step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.lr0 * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.lr0;
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    s.lr0 * 0.5 * (1.0 + (PI * progress).cos())
}

/// Copies the student encoder and projection head into `teacher.*`.
pub fn init_teacher(student: &ParamStore) -> Result<ParamStore> {
    for (name, v) in student.iter() {
        let peak = v.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !peak.is_finite() {
            return Err(Error::InvalidArgument(format!("student parameter `{name}` is not finite")));
        }
    }
    let mut teacher = student.deep_copy_prefix("student.encoder.", "teacher.encoder.")?;
    teacher.merge(student.deep_copy_prefix("student.proj.", "teacher.proj.")?);
    Ok(teacher)
}

/// `teacher' = mu * teacher + (1 - mu) * student` for every teacher
/// parameter. Results are clamped to the interval spanned by the two inputs
/// so rounding never leaves it.
pub fn ema_update(student: &ParamStore, teacher: &ParamStore, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("momentum {mu} outside [0, 1]")));
    }
    for (name, tv) in teacher.iter() {
        let sname = name
            .strip_prefix(TEACHER)
            .map(|rest| format!("{STUDENT}{rest}"))
            .ok_or_else(|| Error::TreeMismatch(format!("`{name}` is not a teacher parameter")))?;
        let sv = student.get(&sname)?;
        if sv.shape() != tv.shape() {
            return Err(Error::TreeMismatch(format!(
                "`{name}` {:?} vs `{sname}` {:?}",
                tv.shape(),
                sv.shape()
            )));
        }
        let t = teacher.values(name)?;
        let s = student.values(&sname)?;
        let next: Vec<f64> = t
            .iter()
            .zip(&s)
            .map(|(&t, &s)| (mu * t + (1.0 - mu) * s).clamp(t.min(s), t.max(s)))
            .collect();
        let next = Tensor::from_vec(next, tv.shape(), &Device::Cpu)?.to_dtype(teacher.dtype())?;
        tv.set(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(prefix: &str, vals: &[f64]) -> ParamStore {
        let mut p = ParamStore::new(DType::F64);
        p.insert(format!("{prefix}encoder.w"), Tensor::new(vals, &Device::Cpu).unwrap()).unwrap();
        p
    }

    #[test]
    fn momentum_endpoints() {
        let s = ScheduleState::new(1000, 0.996, 1e-2);
        assert_eq!(momentum_at(&s.at(0)).unwrap(), 0.996);
        assert_eq!(momentum_at(&s.at(1000)).unwrap(), 1.0);
        assert!((momentum_at(&s.at(500)).unwrap() - 0.998).abs() < 1e-15);
        assert!(momentum_at(&ScheduleState::new(0, 0.996, 1.0)).is_err());
    }

    #[test]
    fn lr_endpoints() {
        let s = ScheduleState { step: 0, total_steps: 200, mu0: 0.996, lr0: 0.01, warmup_steps: 10 };
        assert_eq!(lr_at(&s.at(0)), 0.0);
        assert_eq!(lr_at(&s.at(10)), 0.01);
        assert!(lr_at(&s.at(200)).abs() < 1e-12);
        assert!((lr_at(&s.at(105)) - 0.005).abs() < 1e-12);
        assert_eq!(ScheduleState::new(200, 0.996, 0.01).warmup_steps, 10);
    }

    #[test]
    fn ema_extremes_and_value() {
        let student = store(STUDENT, &[2.0, -1.0]);
        let teacher = store(TEACHER, &[0.0, 3.0]);
        ema_update(&student, &teacher, 1.0).unwrap();
        assert_eq!(teacher.values("teacher.encoder.w").unwrap(), vec![0.0, 3.0]);
        ema_update(&student, &teacher, 0.996).unwrap();
        let v = teacher.values("teacher.encoder.w").unwrap();
        assert!((v[0] - 0.008).abs() < 1e-15);
        ema_update(&student, &teacher, 0.0).unwrap();
        assert_eq!(teacher.values("teacher.encoder.w").unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn ema_rejects_mismatched_trees() {
        let student = store(STUDENT, &[2.0]);
        let teacher = store(TEACHER, &[0.0, 3.0]);
        assert!(matches!(ema_update(&student, &teacher, 0.5), Err(Error::TreeMismatch(_))));
        let orphan = store("teacher.other.", &[0.0]);
        assert!(ema_update(&student, &orphan, 0.5).is_err());
    }

    #[test]
    fn teacher_is_independent_copy() {
        let mut student = store(STUDENT, &[1.0, 2.0]);
        student.insert("student.proj.fc0.weight", Tensor::new(&[0.5f64], &Device::Cpu).unwrap()).unwrap();
        student.insert("student.decoder.head.weight", Tensor::new(&[0.5f64], &Device::Cpu).unwrap()).unwrap();
        let teacher = init_teacher(&student).unwrap();
        let names: Vec<_> = teacher.names().cloned().collect();
        assert_eq!(names, vec!["teacher.encoder.w", "teacher.proj.fc0.weight"]);
        student.set_element("student.encoder.w", 0, 9.0).unwrap();
        assert_eq!(teacher.values("teacher.encoder.w").unwrap(), vec![1.0, 2.0]);
    }
}
