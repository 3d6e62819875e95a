//! Inference-time optimization of the initial latent: the surrogate
//! optimization loop, gamma-sampling decoding and the full-chain baseline.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::controls::ControlTarget;
use crate::diffusion::{sample_chain_graph, CallCounter, Sampler, SamplerConfig};
use crate::error::{Error, Result};
use crate::scorenet::{Condition, DenoiserModel, ModelKind};
use crate::{BINS, FRAMES};

pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_K: usize = 40;
pub const DEFAULT_GAMMA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Full guided teacher chain inside the optimization loop.
    Ditto,
    /// Consistency student; decodes with full renoising (`gamma = 1`).
    Ditto2Cm,
    /// Trajectory student with gamma-sampling.
    Ditto2Ctm,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ditto => "ditto",
            Method::Ditto2Cm => "ditto2-cm",
            Method::Ditto2Ctm => "ditto2-ctm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Ditto, Method::Ditto2Cm, Method::Ditto2Ctm]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

/// Surrogate chain length per optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptSteps {
    Fixed(usize),
    Adaptive,
}

impl fmt::Display for OptSteps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptSteps::Fixed(m) => write!(f, "{m}"),
            OptSteps::Adaptive => f.write_str("adaptive"),
        }
    }
}

impl FromStr for OptSteps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(OptSteps::Adaptive);
        }
        s.parse::<usize>()
            .map(OptSteps::Fixed)
            .map_err(|_| Error::invalid(format!("optimization steps '{s}' is neither a number nor 'adaptive'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItoConfig {
    pub k: usize,
    /// Surrogate steps `M` (ignored by the baseline, which always runs `t_decode` steps).
    pub m: OptSteps,
    /// Decoding steps `T`.
    pub t_decode: usize,
    pub gamma: f64,
    pub w: f64,
    pub cond: Condition,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ItoConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            m: OptSteps::Fixed(1),
            t_decode: 1,
            gamma: DEFAULT_GAMMA,
            w: 4.0,
            cond: Condition::Null,
            adam: AdamConfig::with_lr(DEFAULT_LR),
            seed: 0,
        }
    }
}

impl ItoConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if let OptSteps::Fixed(m) = self.m {
            if m == 0 || m > t_max {
                return Err(Error::invalid(format!("M = {m} outside [1, {t_max}]")));
            }
        }
        if self.t_decode == 0 || self.t_decode > t_max {
            return Err(Error::invalid(format!("T = {} outside [1, {t_max}]", self.t_decode)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        self.cond.validate()
    }

    /// `M` for each of the `K` iterations.
    pub fn m_schedule(&self) -> Result<Vec<usize>> {
        match self.m {
            OptSteps::Fixed(m) => Ok(vec![m; self.k]),
            OptSteps::Adaptive => adaptive_schedule(self.k),
        }
    }
}

/// `M = 1` for `K/2` iterations, `M = 2` for `3K/8`, then `M = 4` for the
/// rest (`K/8` plus any rounding remainder).
pub fn adaptive_schedule(k: usize) -> Result<Vec<usize>> {
    if k < 8 {
        return Err(Error::invalid(format!("adaptive schedule needs K >= 8, got {k}")));
    }
    let ones = k / 2;
    let twos = 3 * k / 8;
    let mut s = vec![1; ones];
    s.extend(std::iter::repeat_n(2, twos));
    s.extend(std::iter::repeat_n(4, k - ones - twos));
    Ok(s)
}

/// Output of an optimization loop.
#[derive(Clone, Debug)]
pub struct LatentOpt {
    pub latent: Tensor,
    /// Loss before each of the `K` updates.
    pub trajectory: Vec<f64>,
    pub calls: CallCounter,
}

/// Runs one Adam update per entry of `schedule` on the latent.
///
/// `generator(g, x, m, counter)` maps the latent to a clean sample with an
/// `m`-step chain and records its network calls; every forward call made in
/// an iteration is matched by one backward call.
pub fn optimize_latent<G, L>(
    generator: G,
    loss: L,
    init: &Tensor,
    schedule: &[usize],
    adam: AdamConfig,
) -> Result<LatentOpt>
where
    G: Fn(&mut Graph, Var, usize, &mut CallCounter) -> Result<Var>,
    L: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut latent = init.clone();
    let mut state = AdamState::new(adam, [latent.shape()]);
    let mut trajectory = Vec::with_capacity(schedule.len());
    let mut calls = CallCounter::default();
    for (i, &m) in schedule.iter().enumerate() {
        let mut g = Graph::new();
        let x = g.leaf(latent.clone(), true);
        let mut step = CallCounter::default();
        let x0 = generator(&mut g, x, m, &mut step)?;
        let l = loss(&mut g, x0)?;
        let lv = g.value(l).item()?;
        if !lv.is_finite() {
            return Err(Error::non_finite(format!(
                "ITO loss at iteration {i}; trajectory so far {trajectory:?}"
            )));
        }
        trajectory.push(lv);
        let grad = g.backward(l)?.take(x).expect("latent requires grad");
        step.backward += step.forward;
        calls.merge(step);
        adam_step([&mut latent], &[grad], &mut state)?;
    }
    Ok(LatentOpt {
        latent,
        trajectory,
        calls,
    })
}

/// Standard normal latent `[1, D]` from a seed.
pub fn initial_latent(seed: u64) -> Tensor {
    Tensor::randn(&[1, BINS * FRAMES], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn student_chain(
    g: &mut Graph,
    student: &dyn crate::scorenet::TrajectoryModel,
    x: Var,
    cond: Condition,
    w: f64,
    steps: usize,
    gamma: f64,
    noise_seed: u64,
    counter: &mut CallCounter,
) -> Result<Var> {
    let cfg = SamplerConfig::evenly_spaced(student.schedule(), steps, w)?.with_gamma(gamma, noise_seed)?;
    sample_chain_graph(g, Sampler::Student(student), x, &[cond], &cfg, counter)
}

/// Decodes a latent with `steps` gamma-sampling jumps of the student.
///
/// Each step jumps from the current iterate to the reduced level
/// `sqrt(1 - gamma^2) tau_{t-1}` and adds `gamma tau_{t-1}` worth of fresh
/// noise; the last step lands on `tau = 0` without noise.
pub fn gamma_decode(
    student: &DenoiserModel,
    latent: &Tensor,
    cond: Condition,
    w: f64,
    steps: usize,
    gamma: f64,
    noise_seed: u64,
) -> Result<(Tensor, CallCounter)> {
    if student.kind() != ModelKind::Student {
        return Err(Error::invalid("gamma decoding needs a distilled student"));
    }
    let mut g = Graph::new();
    let x = g.constant(latent.clone().reshape(&[1, BINS * FRAMES])?);
    let bound = student.bind(&mut g, false);
    let mut counter = CallCounter::default();
    let y = student_chain(&mut g, &bound, x, cond, w, steps, gamma, noise_seed, &mut counter)?;
    Ok((g.value(y).clone().reshape(&[BINS, FRAMES])?, counter))
}

#[derive(Clone, Debug)]
pub struct ItoResult {
    pub method: Method,
    pub latent: Tensor,
    pub x0: Tensor,
    pub loss_trajectory: Vec<f64>,
    /// Control loss of the decoded sample.
    pub final_loss: f64,
    pub m_schedule: Vec<usize>,
    pub opt_calls: CallCounter,
    pub decode_calls: CallCounter,
    /// Cost-model units: forward plus backward calls of the optimization
    /// loop for the baseline; surrogate chain steps plus decoding steps
    /// otherwise.
    pub accounted_units: u64,
    pub wall_clock_s: f64,
}

impl ItoResult {
    pub fn total_calls(&self) -> CallCounter {
        let mut c = self.opt_calls;
        c.merge(self.decode_calls);
        c
    }
}

/// Surrogate ITO with a distilled student, followed by gamma decoding.
pub fn run_ditto2(
    student: &DenoiserModel,
    method: Method,
    target: &ControlTarget,
    config: &ItoConfig,
) -> Result<ItoResult> {
    if method == Method::Ditto {
        return Err(Error::invalid("run_ditto2 needs a distilled method"));
    }
    if student.kind() != ModelKind::Student {
        return Err(Error::invalid("surrogate optimization needs a distilled student"));
    }
    config.validate(student.schedule().t_max())?;
    target.validate()?;
    let gamma = if method == Method::Ditto2Cm { 1.0 } else { config.gamma };
    let schedule = config.m_schedule()?;
    let noise_seed = config.seed.wrapping_add(1);
    let start = Instant::now();

    let opt = optimize_latent(
        |g, x, m, c| {
            let bound = student.bind(g, false);
            student_chain(g, &bound, x, config.cond, config.w, m, gamma, noise_seed, c)
        },
        |g, x0| target.loss(g, x0),
        &initial_latent(config.seed),
        &schedule,
        config.adam,
    )?;
    let (x0, decode_calls) = gamma_decode(
        student,
        &opt.latent,
        config.cond,
        config.w,
        config.t_decode,
        gamma,
        noise_seed,
    )?;
    let wall_clock_s = start.elapsed().as_secs_f64();
    let final_loss = target.loss_value(&x0)?;
    let chain_steps: u64 = schedule.iter().map(|&m| m as u64).sum();
    debug_assert_eq!(opt.calls.forward, chain_steps);
    Ok(ItoResult {
        method,
        latent: opt.latent.reshape(&[BINS, FRAMES])?,
        x0,
        loss_trajectory: opt.trajectory,
        final_loss,
        m_schedule: schedule,
        opt_calls: opt.calls,
        decode_calls,
        accounted_units: chain_steps + config.t_decode as u64,
        wall_clock_s,
    })
}

/// DITTO: optimizes through the full `T`-step guided teacher chain.
pub fn ditto_baseline(teacher: &DenoiserModel, target: &ControlTarget, config: &ItoConfig) -> Result<ItoResult> {
    if teacher.kind() != ModelKind::Teacher {
        return Err(Error::invalid("the baseline runs the teacher"));
    }
    config.validate(teacher.schedule().t_max())?;
    target.validate()?;
    let t = config.t_decode;
    let sampler_cfg = SamplerConfig::evenly_spaced(teacher.schedule(), t, config.w)?;
    let start = Instant::now();
    let schedule = vec![t; config.k];
    let opt = optimize_latent(
        |g, x, _, c| {
            let bound = teacher.bind(g, false);
            sample_chain_graph(g, Sampler::Teacher(&bound), x, &[config.cond], &sampler_cfg, c)
        },
        |g, x0| target.loss(g, x0),
        &initial_latent(config.seed),
        &schedule,
        config.adam,
    )?;
    let mut g = Graph::new();
    let x = g.constant(opt.latent.clone());
    let bound = teacher.bind(&mut g, false);
    let mut decode_calls = CallCounter::default();
    let y = sample_chain_graph(
        &mut g,
        Sampler::Teacher(&bound),
        x,
        &[config.cond],
        &sampler_cfg,
        &mut decode_calls,
    )?;
    let x0 = g.value(y).clone().reshape(&[BINS, FRAMES])?;
    let wall_clock_s = start.elapsed().as_secs_f64();
    let final_loss = target.loss_value(&x0)?;
    Ok(ItoResult {
        method: Method::Ditto,
        latent: opt.latent.reshape(&[BINS, FRAMES])?,
        x0,
        loss_trajectory: opt.trajectory,
        final_loss,
        m_schedule: schedule,
        accounted_units: opt.calls.total(),
        opt_calls: opt.calls,
        decode_calls,
        wall_clock_s,
    })
}

/// Dispatches on the method; `model` must be the teacher for the baseline
/// and a student otherwise.
pub fn run_method(model: &DenoiserModel, method: Method, target: &ControlTarget, config: &ItoConfig) -> Result<ItoResult> {
    match method {
        Method::Ditto => ditto_baseline(model, target, config),
        _ => run_ditto2(model, method, target, config),
    }
}
