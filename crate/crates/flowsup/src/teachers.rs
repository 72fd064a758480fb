//! Pluggable teacher strategies for semi-supervised fine-tuning.
//!
//! All teachers see privileged inputs — clean, uncropped frames — and emit
//! detached pseudo-labels. Only the flow-supervisor strategy owns state that
//! keeps learning (through the teacher losses); the EMA teacher tracks the
//! student passively, the fixed teacher never changes, and `self` is the
//! student itself.

use crate::autodiff::Tape;
use crate::model::{
    init_supervisor_from_student, student_forward, supervisor_forward, BoundParams,
    IterationConfig, ModelConfig, ParamSet,
};
use crate::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Fs,
    #[serde(rename = "self")]
    SelfDistill,
    Ema,
    Fixed,
    Unsup,
    None,
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TeacherKind::Fs => "fs",
            TeacherKind::SelfDistill => "self",
            TeacherKind::Ema => "ema",
            TeacherKind::Fixed => "fixed",
            TeacherKind::Unsup => "unsup",
            TeacherKind::None => "none",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fs" => Ok(TeacherKind::Fs),
            "self" => Ok(TeacherKind::SelfDistill),
            "ema" => Ok(TeacherKind::Ema),
            "fixed" => Ok(TeacherKind::Fixed),
            "unsup" => Ok(TeacherKind::Unsup),
            "none" => Ok(TeacherKind::None),
            other => Err(Error::Config(format!(
                "unknown teacher '{other}' (expected fs|self|ema|fixed|unsup|none)"
            ))),
        }
    }
}

/// A teacher strategy with its state.
#[derive(Debug, Clone)]
pub enum TeacherStrategy {
    Fs { supervisor: ParamSet },
    SelfDistill,
    Ema { teacher: ParamSet, beta: f64 },
    Fixed { teacher: ParamSet },
    Unsup,
    None,
}

impl TeacherStrategy {
    pub fn kind(&self) -> TeacherKind {
        match self {
            TeacherStrategy::Fs { .. } => TeacherKind::Fs,
            TeacherStrategy::SelfDistill => TeacherKind::SelfDistill,
            TeacherStrategy::Ema { .. } => TeacherKind::Ema,
            TeacherStrategy::Fixed { .. } => TeacherKind::Fixed,
            TeacherStrategy::Unsup => TeacherKind::Unsup,
            TeacherStrategy::None => TeacherKind::None,
        }
    }

    pub fn supervisor(&self) -> Option<&ParamSet> {
        match self {
            TeacherStrategy::Fs { supervisor } => Some(supervisor),
            _ => None,
        }
    }

    pub fn supervisor_mut(&mut self) -> Option<&mut ParamSet> {
        match self {
            TeacherStrategy::Fs { supervisor } => Some(supervisor),
            _ => None,
        }
    }
}

/// Construct a teacher. Strategies with state need the pretrained student.
pub fn make_teacher(
    kind: TeacherKind,
    pretrained: Option<&ParamSet>,
    model_cfg: &ModelConfig,
    ema_beta: f64,
) -> Result<TeacherStrategy> {
    let need = |name: &str| -> Result<&ParamSet> {
        pretrained.ok_or_else(|| {
            Error::Config(format!("teacher '{name}' requires pretrained student weights"))
        })
    };
    Ok(match kind {
        TeacherKind::Fs => TeacherStrategy::Fs {
            supervisor: init_supervisor_from_student(need("fs")?, model_cfg)?,
        },
        TeacherKind::SelfDistill => TeacherStrategy::SelfDistill,
        TeacherKind::Ema => {
            if !(0.0..=1.0).contains(&ema_beta) {
                return Err(Error::Config(format!("ema beta must be in [0,1], got {ema_beta}")));
            }
            TeacherStrategy::Ema {
                teacher: need("ema")?.clone(),
                beta: ema_beta,
            }
        }
        TeacherKind::Fixed => TeacherStrategy::Fixed {
            teacher: need("fixed")?.clone(),
        },
        TeacherKind::Unsup => TeacherStrategy::Unsup,
        TeacherKind::None => TeacherStrategy::None,
    })
}

/// One exponential-moving-average step: `w_t ← β·w_t + (1−β)·w_s`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("ema beta must be in [0,1], got {beta}")));
    }
    for (name, w_t) in teacher.iter_mut() {
        let w_s = student
            .get(name)
            .ok_or_else(|| Error::Shape(format!("student lacks parameter {name}")))?;
        if w_s.shape() != w_t.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: teacher {:?} vs student {:?}",
                w_t.shape(),
                w_s.shape()
            )));
        }
        w_t.zip_mut_with(w_s, |t, s| *t = beta * *t + (1.0 - beta) * *s);
    }
    Ok(())
}

/// A pseudo-label request's outcome.
#[derive(Debug, Clone)]
pub enum TeacherTarget {
    /// Full-resolution detached flow target.
    Flow(Array3<f64>),
    /// No target: score the student with the unsupervised objective instead.
    UseUnsup,
}

/// Produce a detached pseudo-label from privileged full frames.
///
/// Runs entirely on a scratch tape, so the returned flow carries no gradient
/// paths to any parameter set.
pub fn teacher_target(
    strategy: &TeacherStrategy,
    student_params: &ParamSet,
    model_cfg: &ModelConfig,
    x1_full: &Array3<f64>,
    x2_full: &Array3<f64>,
    student_padded: Option<(&Array3<f64>, &Array3<f64>)>,
    iters: &IterationConfig,
) -> Result<TeacherTarget> {
    let tape = Tape::new();
    let final_full = |params: &ParamSet| -> Result<Array3<f64>> {
        let bp = BoundParams::bind(&tape, params);
        let out = student_forward(&tape, &bp, model_cfg, x1_full, x2_full, iters.n_student)?;
        Ok(out
            .flows_full
            .last()
            .unwrap()
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned())
    };
    match strategy {
        TeacherStrategy::Fs { supervisor } => {
            let (flow_pad, hidden_pad) = student_padded.ok_or_else(|| {
                Error::Config("fs teacher needs padded student outputs".into())
            })?;
            let s_bp = BoundParams::bind(&tape, student_params);
            let p_bp = BoundParams::bind(&tape, supervisor);
            let out = supervisor_forward(
                &tape,
                &s_bp,
                &p_bp,
                model_cfg,
                x1_full,
                x2_full,
                flow_pad,
                hidden_pad,
                iters.m_supervisor,
            )?;
            let label = out
                .pseudo_label()
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .to_owned();
            Ok(TeacherTarget::Flow(label))
        }
        TeacherStrategy::SelfDistill => Ok(TeacherTarget::Flow(final_full(student_params)?)),
        TeacherStrategy::Ema { teacher, .. } | TeacherStrategy::Fixed { teacher } => {
            Ok(TeacherTarget::Flow(final_full(teacher)?))
        }
        TeacherStrategy::Unsup => Ok(TeacherTarget::UseUnsup),
        TeacherStrategy::None => Err(Error::Config(
            "teacher 'none' has no target; caller must not request one".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_student_params;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ModelConfig, ParamSet) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (cfg, init_student_params(&cfg, &mut rng))
    }

    fn test_image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn fixed_teacher_holds_pretrained_weights() {
        let (cfg, student) = setup(100);
        let t = make_teacher(TeacherKind::Fixed, Some(&student), &cfg, 0.999).unwrap();
        match &t {
            TeacherStrategy::Fixed { teacher } => {
                for (name, v) in teacher.iter() {
                    assert_eq!(v, student.get(name).unwrap());
                }
            }
            _ => panic!("wrong strategy"),
        }
    }

    #[test]
    fn ema_teacher_starts_at_pretrained_weights() {
        let (cfg, student) = setup(101);
        let t = make_teacher(TeacherKind::Ema, Some(&student), &cfg, 0.42).unwrap();
        match &t {
            TeacherStrategy::Ema { teacher, beta } => {
                assert_eq!(*beta, 0.42);
                assert_eq!(teacher.get("upd.gru_z.w"), student.get("upd.gru_z.w"));
            }
            _ => panic!("wrong strategy"),
        }
    }

    #[test]
    fn fs_teacher_copies_update_block() {
        let (cfg, student) = setup(102);
        let t = make_teacher(TeacherKind::Fs, Some(&student), &cfg, 0.999).unwrap();
        let sup = t.supervisor().unwrap();
        assert_eq!(sup.get("upd.motion.w"), student.get("upd.motion.w"));
        assert!(sup.get("fenc.c1.w").is_none(), "encoder stays shared, not copied");
    }

    #[test]
    fn stateful_teachers_require_pretrained_weights() {
        let cfg = ModelConfig::tiny();
        for kind in [TeacherKind::Fs, TeacherKind::Ema, TeacherKind::Fixed] {
            assert!(make_teacher(kind, None, &cfg, 0.999).is_err());
        }
        assert!(make_teacher(TeacherKind::SelfDistill, None, &cfg, 0.999).is_ok());
        assert!(make_teacher(TeacherKind::Unsup, None, &cfg, 0.999).is_ok());
    }

    #[test]
    fn ema_update_arithmetic() {
        let mut teacher = ParamSet::new();
        teacher.insert("w", crate::autodiff::scalar_arr(2.0));
        let mut student = ParamSet::new();
        student.insert("w", crate::autodiff::scalar_arr(4.0));

        // beta = 1: unchanged.
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(*teacher.get("w").unwrap().first().unwrap(), 2.0);

        // Hand case: 0.99·2 + 0.01·4 = 2.02.
        ema_update(&mut teacher, &student, 0.99).unwrap();
        assert!((teacher.get("w").unwrap().first().unwrap() - 2.02).abs() < 1e-12);

        // beta = 0: copy of the student.
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(*teacher.get("w").unwrap().first().unwrap(), 4.0);
    }

    #[test]
    fn ema_shape_mismatch_is_error() {
        let mut teacher = ParamSet::new();
        teacher.insert("w", crate::autodiff::Arr::zeros(ndarray::IxDyn(&[2, 2])));
        let mut student = ParamSet::new();
        student.insert("w", crate::autodiff::Arr::zeros(ndarray::IxDyn(&[3, 2])));
        assert!(ema_update(&mut teacher, &student, 0.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically_toward_frozen_student() {
        let (cfg, student) = setup(103);
        let mut t = make_teacher(TeacherKind::Ema, Some(&student), &cfg, 0.5).unwrap();
        // Perturb the teacher so there is a gap to close.
        if let TeacherStrategy::Ema { teacher, .. } = &mut t {
            for (_, v) in teacher.iter_mut() {
                *v += 1.0;
            }
        }
        let gap = |t: &TeacherStrategy| -> f64 {
            match t {
                TeacherStrategy::Ema { teacher, .. } => teacher
                    .iter()
                    .map(|(n, v)| {
                        (v - student.get(n).unwrap()).iter().map(|d| d * d).sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt(),
                _ => unreachable!(),
            }
        };
        let g0 = gap(&t);
        if let TeacherStrategy::Ema { teacher, beta } = &mut t {
            let b = *beta;
            ema_update(teacher, &student, b).unwrap();
        }
        let g1 = gap(&t);
        assert!((g1 - 0.5 * g0).abs() < 1e-9 * g0.max(1.0));
    }

    #[test]
    fn fixed_teacher_target_is_deterministic() {
        let (cfg, student) = setup(104);
        let t = make_teacher(TeacherKind::Fixed, Some(&student), &cfg, 0.999).unwrap();
        let (x1, x2) = (test_image(105), test_image(106));
        let iters = IterationConfig {
            n_student: 3,
            m_supervisor: 3,
        };
        let a = teacher_target(&t, &student, &cfg, &x1, &x2, None, &iters).unwrap();
        let b = teacher_target(&t, &student, &cfg, &x1, &x2, None, &iters).unwrap();
        match (a, b) {
            (TeacherTarget::Flow(fa), TeacherTarget::Flow(fb)) => assert_eq!(fa, fb),
            _ => panic!("expected flow targets"),
        }
    }

    #[test]
    fn self_teacher_equals_fixed_teacher_at_initialization() {
        let (cfg, student) = setup(107);
        let fixed = make_teacher(TeacherKind::Fixed, Some(&student), &cfg, 0.999).unwrap();
        let selfd = make_teacher(TeacherKind::SelfDistill, Some(&student), &cfg, 0.999).unwrap();
        let (x1, x2) = (test_image(108), test_image(109));
        let iters = IterationConfig {
            n_student: 3,
            m_supervisor: 3,
        };
        let a = teacher_target(&fixed, &student, &cfg, &x1, &x2, None, &iters).unwrap();
        let b = teacher_target(&selfd, &student, &cfg, &x1, &x2, None, &iters).unwrap();
        match (a, b) {
            (TeacherTarget::Flow(fa), TeacherTarget::Flow(fb)) => assert_eq!(fa, fb),
            _ => panic!("expected flow targets"),
        }
    }

    #[test]
    fn unsup_signals_and_none_errors() {
        let (cfg, student) = setup(110);
        let (x1, x2) = (test_image(111), test_image(112));
        let iters = IterationConfig::default();
        let unsup = make_teacher(TeacherKind::Unsup, None, &cfg, 0.999).unwrap();
        assert!(matches!(
            teacher_target(&unsup, &student, &cfg, &x1, &x2, None, &iters).unwrap(),
            TeacherTarget::UseUnsup
        ));
        let none = make_teacher(TeacherKind::None, None, &cfg, 0.999).unwrap();
        assert!(teacher_target(&none, &student, &cfg, &x1, &x2, None, &iters).is_err());
    }
}
