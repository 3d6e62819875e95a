use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::NoiseSchedule;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scorenet::{flat_input, Condition, NoisePredictor, TrajectoryModel};

/// Logical network evaluations. A batched CFG evaluation counts as two
/// forward calls; backward calls are recorded by whoever differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounter {
    pub forward: u64,
    pub backward: u64,
}

impl CallCounter {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }

    pub fn merge(&mut self, other: CallCounter) {
        self.forward += other.forward;
        self.backward += other.backward;
    }
}

/// `sqrt(ab(t)) x0 + sqrt(1 - ab(t)) eps`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    schedule.check_time(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Row-wise [`forward_noise`] over a leading batch axis, one time per row.
pub fn forward_noise_rows(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: &[f64],
    eps: &Tensor,
) -> Result<Tensor> {
    x0.expect_same_shape("forward_noise", eps)?;
    if t.is_empty() || x0.len() % t.len() != 0 {
        return Err(Error::shape(
            "forward_noise",
            format!("{} times for tensor {:?}", t.len(), x0.shape()),
        ));
    }
    let row = x0.len() / t.len();
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_time(ti)?;
        let ab = schedule.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = i * row..(i + 1) * row;
        out.data_mut()[r.clone()]
            .iter_mut()
            .zip(&eps.data()[r])
            .for_each(|(x, e)| *x = a * *x + b * e);
    }
    Ok(out)
}

/// Guided prediction `eps(NULL) + w (eps(c) - eps(NULL))`, with per-row `w`.
///
/// Both branches go through the network as one concatenated batch.
pub fn cfg_eps(
    g: &mut Graph,
    model: &dyn NoisePredictor,
    x: Var,
    t: &[f64],
    cond: &[Condition],
    w: &[f64],
    counter: &mut CallCounter,
) -> Result<Var> {
    let b = cond.len();
    if w.len() != b || t.len() != b {
        return Err(Error::shape(
            "cfg_eps",
            format!("{b} conditions, {} weights, {} times", w.len(), t.len()),
        ));
    }
    let both = g.concat(&[x, x], 0)?;
    let tt: Vec<f64> = t.iter().chain(t).copied().collect();
    let cc: Vec<Condition> = std::iter::repeat_n(Condition::Null, b)
        .chain(cond.iter().copied())
        .collect();
    let eps = model.predict_eps(g, both, &tt, &cc, None)?;
    counter.forward += 2;
    let uncond = g.narrow(eps, 0, 0, b)?;
    let c = g.narrow(eps, 0, b, b)?;
    let diff = g.sub(c, uncond)?;
    let scaled = g.row_scale(diff, w)?;
    g.add(uncond, scaled)
}

/// Coefficients `(p, q)` of the deterministic update `x_prev = p x_t + q eps`.
pub fn ddim_coefficients(schedule: &NoiseSchedule, t: f64, t_prev: f64) -> Result<(f64, f64)> {
    schedule.check_time(t)?;
    schedule.check_time(t_prev)?;
    if t_prev > t {
        return Err(Error::invalid(format!("DDIM step from {t} to later time {t_prev}")));
    }
    if t_prev == t {
        return Ok((1.0, 0.0));
    }
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    if ab_t < 1e-8 {
        return Err(Error::invalid(format!("alpha_bar({t}) = {ab_t:e} is too small to invert")));
    }
    let p = ab_p.sqrt() / ab_t.sqrt();
    let q = (1.0 - ab_p).sqrt() - ab_p.sqrt() * (1.0 - ab_t).sqrt() / ab_t.sqrt();
    Ok((p, q))
}

/// DDIM update for a given noise prediction.
pub fn ddim_update(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    x: Var,
    eps: Var,
    t: &[f64],
    t_prev: &[f64],
) -> Result<Var> {
    let mut p = Vec::with_capacity(t.len());
    let mut q = Vec::with_capacity(t.len());
    for (&a, &b) in t.iter().zip(t_prev) {
        let (pi, qi) = ddim_coefficients(schedule, a, b)?;
        p.push(pi);
        q.push(qi);
    }
    let a = g.row_scale(x, &p)?;
    let b = g.row_scale(eps, &q)?;
    g.add(a, b)
}

/// One guided deterministic DDIM step of the teacher.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    g: &mut Graph,
    model: &dyn NoisePredictor,
    x: Var,
    t: &[f64],
    t_prev: &[f64],
    cond: &[Condition],
    w: &[f64],
    counter: &mut CallCounter,
) -> Result<Var> {
    if t.len() != t_prev.len() {
        return Err(Error::shape("ddim_step", "time vectors differ in length"));
    }
    for (&a, &b) in t.iter().zip(t_prev) {
        ddim_coefficients(model.schedule(), a, b)?;
    }
    if t.iter().zip(t_prev).all(|(a, b)| a == b) {
        return Ok(x);
    }
    let eps = cfg_eps(g, model, x, t, cond, w, counter)?;
    ddim_update(g, model.schedule(), x, eps, t, t_prev)
}

/// Time grid, guidance weight, and (for students) the gamma-sampling setup.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    times: Vec<f64>,
    pub w: f64,
    pub gamma: f64,
    pub noise_seed: u64,
}

impl SamplerConfig {
    /// `times` must start at `t_max`, end at 0 and strictly decrease.
    pub fn new(schedule: &NoiseSchedule, times: Vec<f64>, w: f64) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a sampler needs at least one step"));
        }
        if times[0] != schedule.t_max() as f64 || *times.last().expect("non-empty") != 0.0 {
            return Err(Error::invalid(format!(
                "step times must run from {} to 0, got {times:?}",
                schedule.t_max()
            )));
        }
        if times.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::invalid(format!("step times not strictly decreasing: {times:?}")));
        }
        if !w.is_finite() {
            return Err(Error::invalid("guidance weight must be finite"));
        }
        Ok(Self {
            times,
            w,
            gamma: 0.0,
            noise_seed: 0,
        })
    }

    pub fn evenly_spaced(schedule: &NoiseSchedule, steps: usize, w: f64) -> Result<Self> {
        Self::new(schedule, schedule.evenly_spaced(steps)?, w)
    }

    /// Enables gamma-sampling for students; noise is drawn from `seed`.
    pub fn with_gamma(mut self, gamma: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
        }
        self.gamma = gamma;
        self.noise_seed = seed;
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_deterministic(&self) -> bool {
        self.gamma == 0.0
    }
}

/// The network driving a chain.
#[derive(Clone, Copy)]
pub enum Sampler<'a> {
    /// Guided DDIM, two calls per step.
    Teacher(&'a dyn NoisePredictor),
    /// Trajectory jumps with gamma-sampling, one call per step.
    Student(&'a dyn TrajectoryModel),
}

/// One gamma-sampling step from `t` to `t_prev`.
///
/// The jump lands at the reduced level `sqrt(1 - gamma^2) sigma(t_prev)`;
/// fresh noise of scale `gamma sigma(t_prev)` then restores the full level.
/// The step into `t_prev = 0` never adds noise.
#[allow(clippy::too_many_arguments)]
pub fn gamma_step(
    g: &mut Graph,
    model: &dyn TrajectoryModel,
    x: Var,
    cond: &[Condition],
    w: &[f64],
    t: f64,
    t_prev: f64,
    gamma: f64,
    noise: &Tensor,
) -> Result<Var> {
    let b = cond.len();
    let sched = model.schedule();
    if t_prev == 0.0 || gamma == 0.0 {
        return model.jump(g, x, cond, w, &vec![t; b], &vec![t_prev; b]);
    }
    let tau = sched.sigma(t_prev);
    let s_hat = if gamma >= 1.0 {
        0.0
    } else {
        sched.time_for_sigma((1.0 - gamma * gamma).sqrt() * tau)
    };
    let jumped = model.jump(g, x, cond, w, &vec![t; b], &vec![s_hat; b])?;
    let ab_hat = sched.alpha_bar(s_hat);
    let ab_prev = sched.alpha_bar(t_prev);
    let y = g.scale(jumped, ab_prev.sqrt() / ab_hat.sqrt());
    let n = g.constant(noise.clone());
    let n = g.scale(n, gamma * tau * ab_prev.sqrt());
    g.add(y, n)
}

/// Runs a full chain inside `g`, so the result can be differentiated
/// with respect to `x_start`.
pub fn sample_chain_graph(
    g: &mut Graph,
    sampler: Sampler<'_>,
    x_start: Var,
    cond: &[Condition],
    config: &SamplerConfig,
    counter: &mut CallCounter,
) -> Result<Var> {
    let b = cond.len();
    let shape = g.shape(x_start).to_vec();
    if shape.first() != Some(&b) {
        return Err(Error::shape(
            "sample_chain",
            format!("latent {shape:?} for {b} conditions"),
        ));
    }
    let w = vec![config.w; b];
    let mut x = x_start;
    let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    for pair in config.times.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        match sampler {
            Sampler::Teacher(m) => {
                x = ddim_step(g, m, x, &vec![t; b], &vec![t_prev; b], cond, &w, counter)?;
            }
            Sampler::Student(m) => {
                let noise = if config.gamma > 0.0 && t_prev > 0.0 {
                    Tensor::randn(&shape, &mut rng)
                } else {
                    Tensor::zeros(&shape)
                };
                x = gamma_step(g, m, x, cond, &w, t, t_prev, config.gamma, &noise)?;
                counter.forward += 1;
            }
        }
    }
    Ok(x)
}

/// Samples a batch of spectrograms `[B, BINS, FRAMES]` from starting latents.
pub fn sample_chain(
    sampler: Sampler<'_>,
    x_start: &Tensor,
    cond: &[Condition],
    config: &SamplerConfig,
) -> Result<(Tensor, CallCounter)> {
    let mut g = Graph::new();
    let (x, _, shape) = flat_input(&mut g, x_start)?;
    let mut counter = CallCounter::default();
    let out = sample_chain_graph(&mut g, sampler, x, cond, config, &mut counter)?;
    Ok((g.value(out).clone().reshape(&shape)?, counter))
}

/// Binds a model to a fresh graph and samples from it; a convenience for
/// callers that only need values.
pub fn sample_with_model(
    model: &crate::scorenet::DenoiserModel,
    x_start: &Tensor,
    cond: &[Condition],
    config: &SamplerConfig,
) -> Result<(Tensor, CallCounter)> {
    let mut g = Graph::new();
    let (x, _, shape) = flat_input(&mut g, x_start)?;
    let bound = model.bind(&mut g, false);
    let sampler = match model.kind() {
        crate::scorenet::ModelKind::Teacher => Sampler::Teacher(&bound),
        crate::scorenet::ModelKind::Student => Sampler::Student(&bound),
    };
    let mut counter = CallCounter::default();
    let out = sample_chain_graph(&mut g, sampler, x, cond, config, &mut counter)?;
    Ok((g.value(out).clone().reshape(&shape)?, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorenet::{DenoiserModel, ScoreNetConfig};
    use crate::{BINS, FRAMES};
    use rand::Rng;

    /// Predicts a constant per row depending only on the condition.
    struct ConstEps {
        schedule: NoiseSchedule,
        uncond: f64,
        cond: f64,
    }

    impl NoisePredictor for ConstEps {
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }
        fn predict_eps(
            &self,
            g: &mut Graph,
            x: Var,
            _t: &[f64],
            cond: &[Condition],
            _w: Option<&[f64]>,
        ) -> Result<Var> {
            let d = g.shape(x)[1];
            let mut data = Vec::new();
            for c in cond {
                let v = if *c == Condition::Null { self.uncond } else { self.cond };
                data.extend(std::iter::repeat_n(v, d));
            }
            Ok(g.constant(Tensor::new(&[cond.len(), d], data)?))
        }
    }

    /// Exact noise predictor for 1-D data x0 ~ N(mu, s^2).
    struct GaussianScore {
        schedule: NoiseSchedule,
        mu: f64,
        var: f64,
    }

    impl NoisePredictor for GaussianScore {
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }
        fn predict_eps(
            &self,
            g: &mut Graph,
            x: Var,
            t: &[f64],
            _cond: &[Condition],
            _w: Option<&[f64]>,
        ) -> Result<Var> {
            let xv = g.value(x).clone();
            let d = xv.shape()[1];
            let mut out = xv.clone();
            for (i, &ti) in t.iter().enumerate() {
                let ab = self.schedule.alpha_bar(ti);
                let var_t = ab * self.var + 1.0 - ab;
                for j in 0..d {
                    let xt = xv.data()[i * d + j];
                    // eps = -sqrt(1 - ab) * score(x_t)
                    out.data_mut()[i * d + j] = (1.0 - ab).sqrt() * (xt - ab.sqrt() * self.mu) / var_t;
                }
            }
            Ok(g.constant(out))
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(20)
    }

    #[test]
    fn forward_noise_boundaries() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[BINS, FRAMES], &mut rng);
        let e = Tensor::randn(&[BINS, FRAMES], &mut rng);
        assert_eq!(forward_noise(&s, &x0, 0.0, &e).unwrap(), x0);
        let xt = forward_noise(&s, &x0, 20.0, &e).unwrap();
        let bound = s.alpha_bar(20.0).sqrt() * x0.sq_norm().sqrt();
        assert!(xt.sq_dist(&e).unwrap().sqrt() <= bound + 1e-12);
    }

    #[test]
    fn forward_noise_preserves_unit_variance() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let x0 = Tensor::randn(&[n], &mut rng);
        let e = Tensor::randn(&[n], &mut rng);
        for t in [0.0, 3.0, 10.0, 17.0, 20.0] {
            let xt = forward_noise(&s, &x0, t, &e).unwrap();
            let mean = xt.sum() / n as f64;
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.03, "t={t} var={var}");
        }
    }

    #[test]
    fn cfg_combines_stub_branches() {
        let m = ConstEps { schedule: sched(), uncond: 0.5, cond: 2.0 };
        for (w, want) in [(3.0, 0.5 + 3.0 * 1.5), (1.0, 2.0), (0.0, 0.5)] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[1, 4]));
            let mut c = CallCounter::default();
            let e = cfg_eps(&mut g, &m, x, &[5.0], &[Condition::tags(0, 0)], &[w], &mut c).unwrap();
            assert!(g.value(e).data().iter().all(|&v| v == want));
            assert_eq!(c.forward, 2);
        }
    }

    #[test]
    fn ddim_inverts_forward_noise_with_true_eps() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[1, 8], &mut rng);
        let e = Tensor::randn(&[1, 8], &mut rng);
        for t in [1.0, 7.0, 20.0] {
            let xt = forward_noise(&s, &x0, t, &e).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(xt);
            let ev = g.constant(e.clone());
            let r = ddim_update(&mut g, &s, xv, ev, &[t], &[0.0]).unwrap();
            let err = g.value(r).sq_dist(&x0).unwrap().sqrt();
            assert!(err < 1e-6, "t={t} err={err}");
        }
    }

    #[test]
    fn ddim_identity_and_errors() {
        let s = sched();
        let m = ConstEps { schedule: s.clone(), uncond: 1.0, cond: 1.0 };
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3]));
        let mut c = CallCounter::default();
        let c1 = [Condition::Null];
        let y = ddim_step(&mut g, &m, x, &[4.0], &[4.0], &c1, &[1.0], &mut c).unwrap();
        assert_eq!(y, x);
        assert_eq!(c.forward, 0);
        assert!(ddim_step(&mut g, &m, x, &[4.0], &[5.0], &c1, &[1.0], &mut c).is_err());
        assert!(ddim_coefficients(&s, 20.0, 0.0).is_ok());
    }

    #[test]
    fn ddim_step_matches_gaussian_posterior_mean() {
        // With the exact score, the x0 estimate is E[x0 | x_t] and the step
        // lands on sqrt(ab_p) E[x0|x_t] + sqrt(1-ab_p) eps_hat.
        let s = sched();
        let (mu, var) = (0.7, 0.36);
        let m = GaussianScore { schedule: s.clone(), mu, var };
        for (t, tp, xt) in [(10.0, 9.0, 0.3), (20.0, 0.0, -1.2), (5.0, 2.0, 1.9)] {
            let ab = s.alpha_bar(t);
            let var_t = ab * var + 1.0 - ab;
            let post_mean = mu + ab.sqrt() * var / var_t * (xt - ab.sqrt() * mu);
            let eps_hat = (1.0 - ab).sqrt() * (xt - ab.sqrt() * mu) / var_t;
            let abp = s.alpha_bar(tp);
            let want = abp.sqrt() * post_mean + (1.0 - abp).sqrt() * eps_hat;

            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[1, 1], vec![xt]).unwrap());
            let mut c = CallCounter::default();
            let y = ddim_step(&mut g, &m, x, &[t], &[tp], &[Condition::Null], &[0.0], &mut c)
                .unwrap();
            let got = g.value(y).data()[0];
            assert!((got - want).abs() < 1e-10, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn chain_call_counts() {
        let cfg = ScoreNetConfig { hidden: 8, blocks: 1, ..ScoreNetConfig::default() };
        let teacher = DenoiserModel::new_teacher(cfg, 0);
        let student = DenoiserModel::student_from(&teacher);
        let s = teacher.schedule().clone();
        let x = Tensor::randn(&[2, BINS, FRAMES], &mut ChaCha8Rng::seed_from_u64(0));
        let c = [Condition::Null, Condition::tags(1, 1)];
        for (steps, want) in [(1, 2), (20, 40)] {
            let sc = SamplerConfig::evenly_spaced(&s, steps, 2.0).unwrap();
            let (_, n) = sample_with_model(&teacher, &x, &c, &sc).unwrap();
            assert_eq!(n.forward, want);
            let (_, n) = sample_with_model(&student, &x, &c, &sc).unwrap();
            assert_eq!(n.forward, want / 2);
        }
    }

    #[test]
    fn chains_are_deterministic() {
        let cfg = ScoreNetConfig { hidden: 8, blocks: 1, ..ScoreNetConfig::default() };
        let mut student = DenoiserModel::student_from(&DenoiserModel::new_teacher(cfg, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in student.params_mut().iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += 0.01 * rng.random::<f64>());
        }
        let x = Tensor::randn(&[1, BINS, FRAMES], &mut rng);
        let c = [Condition::tags(2, 3)];
        let sc = SamplerConfig::evenly_spaced(student.schedule(), 4, 3.0)
            .unwrap()
            .with_gamma(0.3, 11)
            .unwrap();
        let a = sample_with_model(&student, &x, &c, &sc).unwrap().0;
        let b = sample_with_model(&student, &x, &c, &sc).unwrap().0;
        assert_eq!(a, b);
        let other = sc.clone().with_gamma(0.3, 12).unwrap();
        assert_ne!(a, sample_with_model(&student, &x, &c, &other).unwrap().0);
    }

    #[test]
    fn sampler_config_validation() {
        let s = sched();
        assert!(SamplerConfig::new(&s, vec![20.0, 10.0, 0.0], 1.0).is_ok());
        assert!(SamplerConfig::new(&s, vec![19.0, 0.0], 1.0).is_err());
        assert!(SamplerConfig::new(&s, vec![20.0, 10.0, 10.0, 0.0], 1.0).is_err());
        assert!(SamplerConfig::new(&s, vec![20.0, 5.0], 1.0).is_err());
        let c = SamplerConfig::new(&s, vec![20.0, 0.0], 1.0).unwrap();
        assert!(c.clone().with_gamma(1.5, 0).is_err());
        assert!(c.is_deterministic());
    }
}
