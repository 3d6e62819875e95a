//! Consistency (CM) and consistency-trajectory (CTM) distillation of the
//! teacher into a guidance-aware student.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::diffusion::{ddim_step, forward_noise_rows, stack_rows, CallCounter};
use crate::error::{Error, Result};
use crate::scorenet::{Condition, DenoiserModel, ModelKind, NoisePredictor, ParamSet, TrajectoryModel};
use crate::{BINS, FRAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMethod {
    /// Every jump targets `s = 0`.
    Cm,
    /// Jumps to any earlier grid time.
    Ctm,
}

impl fmt::Display for DistillMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillMethod::Cm => "cm",
            DistillMethod::Ctm => "ctm",
        })
    }
}

impl FromStr for DistillMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cm" => Ok(DistillMethod::Cm),
            "ctm" => Ok(DistillMethod::Ctm),
            other => Err(Error::invalid(format!("unknown distillation method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub method: DistillMethod,
    pub t_max: usize,
    pub ema_decay: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of drawing the null condition.
    pub null_prob: f64,
    /// Probability that a CTM draw targets `s = 0`.
    pub s_zero_prob: f64,
    /// Rows written to the training log (every `log_every` steps).
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: DistillMethod::Ctm,
            t_max: 20,
            ema_decay: 0.999,
            w_min: 1.0,
            w_max: 8.0,
            steps: 3000,
            batch_size: 128,
            learning_rate: 2e-4,
            seed: 0,
            null_prob: 0.1,
            s_zero_prob: 0.5,
            log_every: 10,
        }
    }
}

impl DistillConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        c.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::invalid(format!("EMA decay {} outside (0, 1]", self.ema_decay)));
        }
        if !(self.w_min <= self.w_max && self.w_min.is_finite() && self.w_max.is_finite()) {
            return Err(Error::invalid("guidance range must satisfy w_min <= w_max"));
        }
        if self.batch_size == 0 || self.t_max == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch_size, t_max and log_every must be positive"));
        }
        for (name, p) in [("null_prob", self.null_prob), ("s_zero_prob", self.s_zero_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * student`, per element.
pub fn ema_update(shadow: &mut ParamSet, student: &ParamSet, decay: f64) -> Result<()> {
    if shadow.shapes() != student.shapes() {
        return Err(Error::shape("ema_update", "shadow and student parameter shapes differ"));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1]")));
    }
    if decay == 1.0 {
        return Ok(());
    }
    for (s, p) in shadow.iter_mut().zip(student.iter()) {
        s.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(a, &b)| *a = decay * *a + (1.0 - decay) * b);
    }
    Ok(())
}

/// Root-mean-square difference between two parameter sets.
pub fn parameter_rms_distance(a: &ParamSet, b: &ParamSet) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        total += x.sq_dist(y).unwrap_or(f64::NAN);
        n += x.len();
    }
    (total / n.max(1) as f64).sqrt()
}

/// One batch of distillation draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    pub cond: Vec<Condition>,
    /// `[B, D]` noise used to build `x_t`.
    pub eps: Tensor,
}

impl Draws {
    /// Samples times, weights, conditions and noise for a batch whose data
    /// conditions are `data_cond`.
    pub fn sample(config: &DistillConfig, data_cond: &[Condition], rng: &mut impl Rng) -> Result<Self> {
        let b = data_cond.len();
        let mut t = Vec::with_capacity(b);
        let mut s = Vec::with_capacity(b);
        let mut w = Vec::with_capacity(b);
        let mut cond = Vec::with_capacity(b);
        for &c in data_cond {
            let ti = rng.random_range(1..=config.t_max);
            let si = match config.method {
                DistillMethod::Cm => 0,
                DistillMethod::Ctm => {
                    if rng.random::<f64>() < config.s_zero_prob {
                        0
                    } else {
                        rng.random_range(0..ti)
                    }
                }
            };
            t.push(ti as f64);
            s.push(si as f64);
            w.push(rng.random_range(config.w_min..=config.w_max));
            cond.push(if rng.random::<f64>() < config.null_prob { Condition::Null } else { c });
        }
        let eps = Tensor::randn(&[b, BINS * FRAMES], rng);
        Ok(Self { t, s, w, cond, eps })
    }

    fn check(&self, batch: usize) -> Result<()> {
        let n = self.t.len();
        if n != batch || self.s.len() != n || self.w.len() != n || self.cond.len() != n {
            return Err(Error::shape("consistency loss", format!("{batch} samples, {n} draws")));
        }
        for (&t, &s) in self.t.iter().zip(&self.s) {
            if t < 1.0 {
                return Err(Error::invalid("draws at t = 0 are excluded"));
            }
            if s >= t {
                return Err(Error::invalid(format!("draw with s = {s} not below t = {t}")));
            }
        }
        Ok(())
    }
}

/// Mean over the batch of the squared distance between the student jump
/// `t -> s` from `x_t` and the shadow jump `t-1 -> s` from the teacher's
/// DDIM step `x_{t-1}`.
///
/// The shadow and teacher should be bound as non-trainable; their branch is
/// evaluated on values only.
#[allow(clippy::too_many_arguments)]
pub fn ctm_loss(
    g: &mut Graph,
    student: &dyn TrajectoryModel,
    shadow: &dyn TrajectoryModel,
    teacher: &dyn NoisePredictor,
    x0: &Tensor,
    draws: &Draws,
    counter: &mut CallCounter,
) -> Result<Var> {
    let b = x0.shape().first().copied().unwrap_or(0);
    draws.check(b)?;
    let xt = forward_noise_rows(teacher.schedule(), x0, &draws.t, &draws.eps)?;
    let x = g.constant(xt);

    let t_prev: Vec<f64> = draws.t.iter().map(|t| t - 1.0).collect();
    let x_prev = ddim_step(g, teacher, x, &draws.t, &t_prev, &draws.cond, &draws.w, counter)?;
    let target = shadow.jump(g, x_prev, &draws.cond, &draws.w, &t_prev, &draws.s)?;
    counter.forward += 1;
    let target = g.value(target).clone();
    let target = g.constant(target);

    let pred = student.jump(g, x, &draws.cond, &draws.w, &draws.t, &draws.s)?;
    counter.forward += 1;
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// [`ctm_loss`] restricted to draws with `s = 0`.
#[allow(clippy::too_many_arguments)]
pub fn cm_loss(
    g: &mut Graph,
    student: &dyn TrajectoryModel,
    shadow: &dyn TrajectoryModel,
    teacher: &dyn NoisePredictor,
    x0: &Tensor,
    draws: &Draws,
    counter: &mut CallCounter,
) -> Result<Var> {
    if draws.s.iter().any(|&s| s != 0.0) {
        return Err(Error::invalid("consistency-model draws must all target s = 0"));
    }
    ctm_loss(g, student, shadow, teacher, x0, draws, counter)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// RMS distance between student and shadow parameters.
    pub ema_defect: f64,
}

#[derive(Clone, Debug)]
pub struct Distilled {
    pub student: DenoiserModel,
    pub shadow: DenoiserModel,
    pub log: Vec<LogRow>,
    pub calls: CallCounter,
}

/// Distills `teacher` on `dataset`; the student starts as a copy of the teacher.
pub fn distill(
    teacher: &DenoiserModel,
    dataset: &[(Tensor, Condition)],
    config: &DistillConfig,
) -> Result<Distilled> {
    config.validate()?;
    if teacher.kind() != ModelKind::Teacher {
        return Err(Error::invalid("distillation needs a teacher model"));
    }
    if teacher.schedule().t_max() != config.t_max {
        return Err(Error::invalid(format!(
            "config grid has {} steps, teacher has {}",
            config.t_max,
            teacher.schedule().t_max()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("empty distillation set"));
    }
    let mut student = DenoiserModel::student_from(teacher);
    let mut shadow = student.clone();
    let shapes = student.params().shapes();
    let mut adam = AdamState::new(
        AdamConfig::with_lr(config.learning_rate),
        shapes.iter().map(|s| s.as_slice()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut calls = CallCounter::default();

    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let rows: Vec<&Tensor> = idx.iter().map(|&i| &dataset[i].0).collect();
        let x0 = stack_rows(&rows)?;
        let conds: Vec<Condition> = idx.iter().map(|&i| dataset[i].1).collect();
        let draws = Draws::sample(config, &conds, &mut rng)?;

        let mut g = Graph::new();
        let tb = teacher.bind(&mut g, false);
        let sb = shadow.bind(&mut g, false);
        let pb = student.bind(&mut g, true);
        let loss = ctm_loss(&mut g, &pb, &sb, &tb, &x0, &draws, &mut calls).map_err(|e| match e {
            Error::NonFinite { context } => Error::Diverged { step, detail: context },
            e => e,
        })?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("consistency loss is {lv}; last logged {:?}", log.last()),
            });
        }
        let mut grads = g.backward(loss)?;
        calls.backward += 1;
        let grads: Vec<Tensor> = pb
            .params()
            .iter()
            .map(|&p| grads.take(p).expect("trainable parameter"))
            .collect();
        drop(g);
        adam_step(student.params_mut().iter_mut(), &grads, &mut adam)?;
        ema_update(shadow.params_mut(), student.params(), config.ema_decay)?;
        if step % config.log_every == 0 || step + 1 == config.steps {
            log.push(LogRow {
                step,
                loss: lv,
                ema_defect: parameter_rms_distance(student.params(), shadow.params()),
            });
        }
    }
    Ok(Distilled {
        student,
        shadow,
        log,
        calls,
    })
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "ema_defect"])?;
    for r in log {
        w.write_record([r.step.to_string(), format!("{:.10e}", r.loss), format!("{:.10e}", r.ema_defect)])?;
    }
    w.flush()?;
    Ok(())
}

/// Largest mean squared gap, over grid pairs `s < t - 1`, between a direct
/// jump `t -> s` and the two-hop path through the teacher step `t -> t-1`.
pub fn consistency_defect(
    student: &DenoiserModel,
    teacher: &DenoiserModel,
    x0: &Tensor,
    cond: &[Condition],
    w: f64,
    seed: u64,
) -> Result<f64> {
    let b = cond.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(&[b, BINS * FRAMES], &mut rng);
    let t_max = teacher.schedule().t_max();
    let mut worst = 0.0f64;
    for t in (2..=t_max).step_by(3) {
        for s in [0, t / 2, t - 2] {
            let draws = Draws {
                t: vec![t as f64; b],
                s: vec![s as f64; b],
                w: vec![w; b],
                cond: cond.to_vec(),
                eps: eps.clone(),
            };
            let mut g = Graph::new();
            let tb = teacher.bind(&mut g, false);
            let sb = student.bind(&mut g, false);
            let mut c = CallCounter::default();
            let l = ctm_loss(&mut g, &sb, &sb, &tb, x0, &draws, &mut c)?;
            worst = worst.max(g.value(l).item()? / (BINS * FRAMES) as f64);
        }
    }
    Ok(worst)
}
