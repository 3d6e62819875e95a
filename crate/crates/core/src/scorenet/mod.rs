//! Denoiser networks: the noise-prediction teacher and the distilled
//! trajectory student.
//!
//! Both share one dense residual body over the flattened spectrogram. The
//! student adds a Fourier-feature embedding of the guidance weight `w`; the
//! target time `s` has no parameters of its own and enters only through the
//! Euler jump in [`euler_jump`].

mod checkpoint;

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::{BINS, FRAMES};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const TEMPO_CLASSES: usize = 3;
pub const MOOD_CLASSES: usize = 4;

/// Conditioning tags, or the null condition used for the unconditional branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Null,
    Tags { tempo: u8, mood: u8 },
}

impl Condition {
    pub fn tags(tempo: u8, mood: u8) -> Self {
        Condition::Tags { tempo, mood }
    }

    pub fn validate(&self) -> Result<()> {
        if let Condition::Tags { tempo, mood } = *self {
            if tempo as usize >= TEMPO_CLASSES || mood as usize >= MOOD_CLASSES {
                return Err(Error::invalid(format!(
                    "unknown tag id (tempo {tempo}, mood {mood})"
                )));
            }
        }
        Ok(())
    }

    // Rows into the tag table: tempo classes, mood classes, null tempo, null mood.
    fn table_rows(&self) -> (usize, usize) {
        match *self {
            Condition::Tags { tempo, mood } => (tempo as usize, TEMPO_CLASSES + mood as usize),
            Condition::Null => (
                TEMPO_CLASSES + MOOD_CLASSES,
                TEMPO_CLASSES + MOOD_CLASSES + 1,
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub time_features: usize,
    pub w_features: usize,
    pub t_max: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            blocks: 2,
            time_features: 32,
            w_features: 16,
            t_max: 20,
        }
    }
}

/// Named parameter tensors, shared cheaply with graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    /// Mutable access; clones any buffer still shared with a live graph.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(Arc::make_mut)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf_shared(Arc::clone(t), trainable))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    w_in: usize,
    b_in: usize,
    w_time: usize,
    b_time: usize,
    tags: usize,
    blocks: Vec<[usize; 4]>,
    w_out: usize,
    b_out: usize,
    gate_w: usize,
    gate_b: usize,
    w_guidance: Option<(usize, usize)>,
}

/// Parameters for the noise predictor `eps(x_t, t, c)` or the student
/// `G(x_t, c, w, t, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    kind: ModelKind,
    config: ScoreNetConfig,
    schedule: NoiseSchedule,
    params: ParamSet,
    layout: Layout,
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v *= std);
    t
}

impl DenoiserModel {
    /// Fresh teacher with a zero-initialized output layer.
    pub fn new_teacher(config: ScoreNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = BINS * FRAMES;
        let h = config.hidden;
        let mut p = ParamSet::new();
        let w_in = p.push("in.weight", normal(&[d, h], (1.0 / d as f64).sqrt(), &mut rng));
        let b_in = p.push("in.bias", Tensor::zeros(&[h]));
        let tf = config.time_features;
        let w_time = p.push("time.weight", normal(&[tf, h], (1.0 / tf as f64).sqrt(), &mut rng));
        let b_time = p.push("time.bias", Tensor::zeros(&[h]));
        let rows = TEMPO_CLASSES + MOOD_CLASSES + 2;
        let tags = p.push("tags.table", normal(&[rows, h], 0.5, &mut rng));
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let w1 = p.push(
                &format!("block{i}.fc1.weight"),
                normal(&[h, h], (2.0 / h as f64).sqrt(), &mut rng),
            );
            let b1 = p.push(&format!("block{i}.fc1.bias"), Tensor::zeros(&[h]));
            let w2 = p.push(
                &format!("block{i}.fc2.weight"),
                normal(&[h, h], (0.5 / h as f64).sqrt(), &mut rng),
            );
            let b2 = p.push(&format!("block{i}.fc2.bias"), Tensor::zeros(&[h]));
            blocks.push([w1, b1, w2, b2]);
        }
        let w_out = p.push("out.weight", Tensor::zeros(&[h, d]));
        let b_out = p.push("out.bias", Tensor::zeros(&[d]));
        let gate_w = p.push("out.gate.weight", Tensor::zeros(&[h, 1]));
        let gate_b = p.push("out.gate.bias", Tensor::zeros(&[1]));
        Self {
            kind: ModelKind::Teacher,
            config,
            schedule: NoiseSchedule::cosine(config.t_max),
            params: p,
            layout: Layout {
                w_in,
                b_in,
                w_time,
                b_time,
                tags,
                blocks,
                w_out,
                b_out,
                gate_w,
                gate_b,
                w_guidance: None,
            },
        }
    }

    /// Student initialized as a copy of the teacher plus a zero guidance embedding,
    /// so it starts out as the teacher's own Euler jump.
    pub fn student_from(teacher: &DenoiserModel) -> Self {
        let mut s = teacher.clone();
        if s.kind == ModelKind::Student {
            return s;
        }
        let h = s.config.hidden;
        let ww = s.params.push("guidance.weight", Tensor::zeros(&[s.config.w_features, h]));
        let wb = s.params.push("guidance.bias", Tensor::zeros(&[h]));
        s.layout.w_guidance = Some((ww, wb));
        s.kind = ModelKind::Student;
        s
    }

    pub(crate) fn skeleton(kind: ModelKind, config: ScoreNetConfig) -> Self {
        let t = Self::new_teacher(config, 0);
        match kind {
            ModelKind::Teacher => t,
            ModelKind::Student => Self::student_from(&t),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Inserts the parameters into `g`; trainable leaves collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        Bound {
            model: self,
            params: self.params.bind(g, trainable),
        }
    }

    /// Zeroes the output layer (the whole map becomes identically zero).
    pub fn zero_output_layer(&mut self) {
        let l = self.layout.clone();
        for i in [l.w_out, l.b_out, l.gate_w, l.gate_b] {
            Arc::make_mut(&mut self.params.tensors[i])
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    /// Noise prediction on plain tensors (`[B, BINS, FRAMES]` or `[BINS, FRAMES]`).
    pub fn eps_forward(&self, x_t: &Tensor, t: f64, c: Condition) -> Result<Tensor> {
        let mut g = Graph::new();
        let (x, b, shape) = flat_input(&mut g, x_t)?;
        let bound = self.bind(&mut g, false);
        let out = bound.predict_eps(&mut g, x, &vec![t; b], &vec![c; b], None)?;
        Ok(g.value(out).clone().reshape(&shape)?)
    }

    /// Trajectory jump on plain tensors.
    pub fn g_forward(
        &self,
        x_t: &Tensor,
        c: Condition,
        w: f64,
        t: f64,
        s: f64,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let (x, b, shape) = flat_input(&mut g, x_t)?;
        let bound = self.bind(&mut g, false);
        let out = bound.jump(&mut g, x, &vec![c; b], &vec![w; b], &vec![t; b], &vec![s; b])?;
        Ok(g.value(out).clone().reshape(&shape)?)
    }
}

/// Flattens `[B, BINS, FRAMES]`/`[BINS, FRAMES]` input to a `[B, D]` leaf.
pub(crate) fn flat_input(g: &mut Graph, x: &Tensor) -> Result<(Var, usize, Vec<usize>)> {
    let d = BINS * FRAMES;
    if x.len() % d != 0 || x.shape().last() != Some(&FRAMES) {
        return Err(Error::shape(
            "model input",
            format!("{:?} is not a batch of {BINS}x{FRAMES} spectrograms", x.shape()),
        ));
    }
    let b = x.len() / d;
    let v = g.constant(x.clone().reshape(&[b, d])?);
    Ok((v, b, x.shape().to_vec()))
}

/// A model whose parameters live in a particular graph.
pub struct Bound<'m> {
    model: &'m DenoiserModel,
    params: Vec<Var>,
}

impl Bound<'_> {
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn model(&self) -> &DenoiserModel {
        self.model
    }

    fn p(&self, i: usize) -> Var {
        self.params[i]
    }

    fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        t: &[f64],
        cond: &[Condition],
        w: Option<&[f64]>,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let l = &self.model.layout;
        let shape = g.shape(x).to_vec();
        let d = BINS * FRAMES;
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape("eps_forward", format!("x_t {shape:?}, want [B, {d}]")));
        }
        let b = shape[0];
        if t.len() != b || cond.len() != b || w.is_some_and(|w| w.len() != b) {
            return Err(Error::shape(
                "eps_forward",
                format!("batch {b} with {} times and {} conditions", t.len(), cond.len()),
            ));
        }
        for &ti in t {
            self.model.schedule.check_time(ti)?;
        }
        for c in cond {
            c.validate()?;
        }

        let h = g.linear(x, self.p(l.w_in), self.p(l.b_in))?;

        let tf = g.constant(time_features(t, cfg.time_features)?);
        let emb = g.linear(tf, self.p(l.w_time), self.p(l.b_time))?;
        let mut emb = g.silu(emb)?;
        let (rows_a, rows_b): (Vec<usize>, Vec<usize>) =
            cond.iter().map(Condition::table_rows).unzip();
        let ta = g.gather(self.p(l.tags), &rows_a)?;
        let tb = g.gather(self.p(l.tags), &rows_b)?;
        emb = g.add(emb, ta)?;
        emb = g.add(emb, tb)?;
        if let (Some((ww, wb)), Some(w)) = (l.w_guidance, w) {
            let wf = g.constant(guidance_features(w, cfg.w_features)?);
            let we = g.linear(wf, self.p(ww), self.p(wb))?;
            emb = g.add(emb, we)?;
        }

        let mut h = h;
        for blk in &l.blocks {
            let z = g.silu(h)?;
            let z = g.linear(z, self.p(blk[0]), self.p(blk[1]))?;
            let z = g.add(z, emb)?;
            let z = g.silu(z)?;
            let z = g.linear(z, self.p(blk[2]), self.p(blk[3]))?;
            h = g.add(h, z)?;
        }
        let z = g.silu(h)?;
        let out = g.linear(z, self.p(l.w_out), self.p(l.b_out))?;
        let gate = g.linear(emb, self.p(l.gate_w), self.p(l.gate_b))?;
        let gate = g.broadcast(gate, &[b, d])?;
        let skip = g.mul(gate, x)?;
        g.add(out, skip)
    }
}

/// Sinusoidal features of the (continuous) grid index.
pub fn time_features(t: &[f64], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let pos = ti * 50.0;
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            data.push((pos * freq).sin());
        }
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            data.push((pos * freq).cos());
        }
    }
    Tensor::new(&[t.len(), 2 * half], data)
}

/// Fourier features of the guidance weight.
pub fn guidance_features(w: &[f64], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(w.len() * dim);
    for &wi in w {
        for k in 0..half {
            data.push((wi * PI * 2f64.powi(k as i32) / 16.0).sin());
        }
        for k in 0..half {
            data.push((wi * PI * 2f64.powi(k as i32) / 16.0).cos());
        }
    }
    Tensor::new(&[w.len(), 2 * half], data)
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn schedule(&self) -> &NoiseSchedule;

    /// `x` is `[B, D]`; `t` and `cond` have one entry per row.
    fn predict_eps(
        &self,
        g: &mut Graph,
        x: Var,
        t: &[f64],
        cond: &[Condition],
        w: Option<&[f64]>,
    ) -> Result<Var>;
}

/// Anything that jumps from time `t` to an earlier time `s` along a trajectory.
pub trait TrajectoryModel {
    fn schedule(&self) -> &NoiseSchedule;

    fn jump(
        &self,
        g: &mut Graph,
        x: Var,
        cond: &[Condition],
        w: &[f64],
        t: &[f64],
        s: &[f64],
    ) -> Result<Var>;
}

impl NoisePredictor for Bound<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.model.schedule
    }

    fn predict_eps(
        &self,
        g: &mut Graph,
        x: Var,
        t: &[f64],
        cond: &[Condition],
        w: Option<&[f64]>,
    ) -> Result<Var> {
        self.forward(g, x, t, cond, w)
    }
}

impl TrajectoryModel for Bound<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.model.schedule
    }

    fn jump(
        &self,
        g: &mut Graph,
        x: Var,
        cond: &[Condition],
        w: &[f64],
        t: &[f64],
        s: &[f64],
    ) -> Result<Var> {
        check_jump_times(&self.model.schedule, t, s)?;
        if t.iter().zip(s).all(|(a, b)| a == b) {
            return Ok(x);
        }
        let eps = self.forward(g, x, t, cond, Some(w))?;
        euler_jump(g, &self.model.schedule, x, eps, t, s)
    }
}

pub fn check_jump_times(schedule: &NoiseSchedule, t: &[f64], s: &[f64]) -> Result<()> {
    if t.len() != s.len() {
        return Err(Error::shape("jump", format!("{} times vs {} targets", t.len(), s.len())));
    }
    for (&ti, &si) in t.iter().zip(s) {
        schedule.check_time(ti)?;
        schedule.check_time(si)?;
        if si > ti {
            return Err(Error::invalid(format!("target time {si} is after source time {ti}")));
        }
    }
    Ok(())
}

/// Per-row coefficients `(p, q)` such that the jump is `p * x - q * eps`.
///
/// In the variance-exploding frame `y = x / sqrt(ab)` the jump is the Euler
/// step `y_s = (sigma_s / sigma_t) y_t + (1 - sigma_s / sigma_t) x0_hat`, with
/// `x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`. Rows with `s == t` get
/// `(1, 0)` and rows with `s == 0` reduce to `x0_hat` exactly.
pub fn euler_coefficients(schedule: &NoiseSchedule, t: f64, s: f64) -> (f64, f64) {
    if s == t {
        return (1.0, 0.0);
    }
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let (sig_t, sig_s) = (schedule.sigma(t), schedule.sigma(s));
    let ratio = sig_s / sig_t;
    let a = ab_s.sqrt() / ab_t.sqrt() * ratio;
    let b = ab_s.sqrt() * (1.0 - ratio);
    let inv = 1.0 / ab_t.sqrt();
    (a + b * inv, b * (1.0 - ab_t).sqrt() * inv)
}

pub fn euler_jump(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    x: Var,
    eps: Var,
    t: &[f64],
    s: &[f64],
) -> Result<Var> {
    let (p, q): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(s)
        .map(|(&ti, &si)| euler_coefficients(schedule, ti, si))
        .unzip();
    let a = g.row_scale(x, &p)?;
    let b = g.row_scale(eps, &q)?;
    g.sub(a, b)
}
