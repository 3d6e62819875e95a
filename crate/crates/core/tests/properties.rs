use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ditto2::autodiff::{Graph, Tensor, Var};
use ditto2::bench::{frechet_distance, GaussianFit, SynthDatasetSpec};
use ditto2::controls::{
    chroma_feature, eval_feature, intensity_feature, ss_matrix, ControlTarget, MaskedReference, Task, PITCH_CLASSES,
};
use ditto2::diffusion::NoiseSchedule;
use ditto2::distill::ema_update;
use ditto2::ito::{adaptive_schedule, run_ditto2, ItoConfig, Method, OptSteps};
use ditto2::scorenet::{Condition, DenoiserModel, ScoreNetConfig};
use ditto2::{BINS, FRAMES};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn smooth_op(g: &mut Graph, pool: &mut Vec<Var>, op: u8, a: usize, b: usize, w: Var) -> Result<(), ditto2::Error> {
    let x = pool[a % pool.len()];
    let y = pool[b % pool.len()];
    let v = match op % 12 {
        0 => g.add(x, y)?,
        1 => g.sub(x, y)?,
        2 => {
            let p = g.mul(x, y)?;
            g.tanh(p)?
        }
        3 => g.silu(x)?,
        4 => {
            let t = g.tanh(x)?;
            g.exp(t)?
        }
        5 => {
            let s = g.square(x)?;
            let s1 = g.affine(s, 1.0, 1.0);
            g.div(y, s1)?
        }
        6 => {
            let s = g.square(x)?;
            let s1 = g.affine(s, 1.0, 1.0);
            g.log(s1)?
        }
        7 => {
            let m = g.matmul(x, w)?;
            g.scale(m, 0.5)
        }
        8 => {
            let t = g.transpose(x)?;
            let r = g.reshape(t, &[3, 4])?;
            g.neg(r)
        }
        9 => {
            let s = g.sum_axis(x, 0)?;
            let r = g.reshape(s, &[1, 4])?;
            let bc = g.broadcast(r, &[3, 4])?;
            g.scale(bc, 0.3)
        }
        10 => {
            let c = g.concat(&[x, y], 1)?;
            g.narrow(c, 1, 2, 4)?
        }
        _ => {
            let p = g.gather(x, &[2, 0, 1])?;
            let s = g.square(p)?;
            let s1 = g.affine(s, 1.0, 1.0);
            g.sqrt(s1)?
        }
    };
    pool.push(v);
    Ok(())
}

fn random_graph(g: &mut Graph, x: Var, ops: &[(u8, usize, usize)]) -> Result<Var, ditto2::Error> {
    let w = g.constant(tensor(&[4, 4], 99));
    let c = g.constant(tensor(&[3, 4], 98));
    let mut pool = vec![x, c];
    for &(op, a, b) in ops {
        smooth_op(g, &mut pool, op, a, b, w)?;
    }
    let last = *pool.last().expect("nonempty");
    let t = g.tanh(last)?;
    let s = g.sum(t);
    let m = g.mean(x);
    g.add(s, m)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_graphs_match_central_differences(
        ops in prop::collection::vec((any::<u8>(), 0usize..16, 0usize..16), 1..10),
        seed in any::<u64>(),
    ) {
        let point = tensor(&[3, 4], seed);
        let check = ditto2::autodiff::finite_diff_check(|g, x| random_graph(g, x, &ops), &point, 1e-6).unwrap();
        let diff: Vec<f64> = check.analytic.data().iter().zip(check.numeric.data()).map(|(a, n)| a - n).collect();
        prop_assert!(norm(&diff) <= 1e-6 + 1e-6 * norm(check.analytic.data()), "ops {:?}", ops);
    }

    #[test]
    fn backward_visits_each_node_once(
        ops in prop::collection::vec((any::<u8>(), 0usize..16, 0usize..16), 1..10),
    ) {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[3, 4], 1), true);
        let y = random_graph(&mut g, x, &ops).unwrap();
        let grads = g.backward(y).unwrap();
        prop_assert!(grads.visited() <= g.len());
        prop_assert!(grads.get(x).unwrap().is_finite());
    }

    #[test]
    fn sigma_and_time_are_inverse(t in 0.0f64..=20.0) {
        let s = NoiseSchedule::cosine(20);
        prop_assert!((s.time_for_sigma(s.sigma(t)) - t).abs() < 1e-8);
        let t2 = (t + 0.5).min(20.0);
        if t2 > t {
            prop_assert!(s.alpha_bar(t2) < s.alpha_bar(t));
        }
    }

    #[test]
    fn evenly_spaced_grid_is_strictly_decreasing(n in 1usize..=20) {
        let s = NoiseSchedule::cosine(20);
        let grid = s.evenly_spaced(n).unwrap();
        prop_assert_eq!(grid.len(), n + 1);
        prop_assert_eq!(grid[0], 20.0);
        prop_assert_eq!(*grid.last().unwrap(), 0.0);
        prop_assert!(grid.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn adaptive_schedule_covers_k(k in 8usize..200) {
        let s = adaptive_schedule(k).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!(s.iter().filter(|&&m| m == 1).count(), k / 2);
        prop_assert_eq!(s.iter().filter(|&&m| m == 2).count(), 3 * k / 8);
    }

    #[test]
    fn intensity_shifts_by_gain_in_db(seed in any::<u64>(), gain in 0.5f64..4.0) {
        let x = tensor(&[BINS, FRAMES], seed).map(|v| v.abs() + 0.1);
        let a = eval_feature(&x, intensity_feature).unwrap();
        let b = eval_feature(&x.map(|v| v * gain), intensity_feature).unwrap();
        let shift = 20.0 * gain.log10();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| (q - p - shift).abs() < 1e-9));
    }

    #[test]
    fn chroma_rows_are_distributions(seed in any::<u64>()) {
        let x = tensor(&[BINS, FRAMES], seed).map(|v| v.abs());
        let lp = eval_feature(&x, chroma_feature).unwrap();
        for row in lp.data().chunks(PITCH_CLASSES) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ss_matrix_is_symmetric_with_unit_diagonal(seed in any::<u64>()) {
        let x = tensor(&[BINS, FRAMES], seed).map(|v| v.abs() + 0.01);
        let s = eval_feature(&x, ss_matrix).unwrap();
        for i in 0..FRAMES {
            prop_assert!((s.data()[i * FRAMES + i] - 1.0).abs() < 1e-9);
            for j in 0..FRAMES {
                prop_assert_eq!(s.data()[i * FRAMES + j], s.data()[j * FRAMES + i]);
            }
        }
    }

    #[test]
    fn control_losses_vanish_on_own_reference_and_are_nonnegative(seed in 0u64..1000, other in 1000u64..2000) {
        let spec = SynthDatasetSpec::new(1, 3);
        let (x, _) = spec.sample(seed);
        let (y, _) = spec.sample(other);
        for task in Task::ALL {
            if task == Task::Melody {
                continue;
            }
            let target = ControlTarget::from_reference(task, &x).unwrap();
            let own = match &target {
                ControlTarget::Inpaint(r) | ControlTarget::Outpaint(r) => r.fixed_point(),
                _ => x.clone(),
            };
            prop_assert_eq!(target.loss_value(&own).unwrap(), 0.0, "{}", task);
            prop_assert!(target.loss_value(&y).unwrap() > 0.0, "{}", task);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = GaussianFit::from_rows(&Tensor::randn(&[12, 3], &mut rng)).unwrap();
        let b = GaussianFit::from_rows(&Tensor::randn(&[12, 3], &mut rng).map(|v| 2.0 * v + 0.5)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-8 * ab.max(1.0));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn synthetic_samples_are_pure_functions_of_the_index(seed in any::<u64>(), index in any::<u64>()) {
        let spec = SynthDatasetSpec::new(1, seed);
        prop_assert_eq!(spec.sample(index), spec.sample(index));
    }

    #[test]
    fn masked_reference_fixed_point_matches_reference_cells(seed in 0u64..500) {
        let (x, _) = SynthDatasetSpec::new(1, 5).sample(seed);
        for r in [MaskedReference::inpaint(x.clone()).unwrap(), MaskedReference::outpaint(x.clone()).unwrap()] {
            let t = ControlTarget::Inpaint(r.clone());
            prop_assert_eq!(t.loss_value(&r.fixed_point()).unwrap(), 0.0);
        }
    }
}

fn tiny_models() -> (DenoiserModel, DenoiserModel) {
    let cfg = ScoreNetConfig { hidden: 8, blocks: 1, ..ScoreNetConfig::default() };
    let mut t = DenoiserModel::new_teacher(cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in t.params_mut().iter_mut() {
        let r = Tensor::randn(p.shape(), &mut rng);
        p.data_mut().iter_mut().zip(r.data()).for_each(|(a, b)| *a += 0.05 * b);
    }
    let s = DenoiserModel::student_from(&t);
    (t, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jump_to_the_same_time_is_identity(seed in any::<u64>(), t in 0usize..=20, w in 1.0f64..8.0, null in any::<bool>()) {
        let (_, s) = tiny_models();
        let x = tensor(&[BINS, FRAMES], seed);
        let c = if null { Condition::Null } else { Condition::tags(1, 2) };
        let y = s.g_forward(&x, c, w, t as f64, t as f64).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn surrogate_costs_are_exact_and_parameters_untouched(k in 1usize..5, m in 1usize..4, t in 1usize..5, seed in any::<u64>()) {
        let (_, s) = tiny_models();
        let before = s.params().clone();
        let target = ControlTarget::Intensity(vec![-3.0; FRAMES]);
        let cfg = ItoConfig { k, m: OptSteps::Fixed(m), t_decode: t, seed, ..ItoConfig::default() };
        let r = run_ditto2(&s, Method::Ditto2Ctm, &target, &cfg).unwrap();
        prop_assert_eq!(r.accounted_units, (k * m + t) as u64);
        prop_assert_eq!(r.opt_calls.forward, r.opt_calls.backward);
        prop_assert_eq!(s.params(), &before);
    }

    #[test]
    fn ema_endpoints(decay in 0.0f64..=1.0) {
        let (_, s) = tiny_models();
        let mut other = s.clone();
        for p in other.params_mut().iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.5 - *v);
        }
        let mut shadow = s.params().clone();
        ema_update(&mut shadow, other.params(), decay).unwrap();
        for ((z, a), b) in shadow.iter().zip(s.params().iter()).zip(other.params().iter()) {
            for ((zv, av), bv) in z.data().iter().zip(a.data()).zip(b.data()) {
                let want = decay * av + (1.0 - decay) * bv;
                prop_assert!((zv - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }
}
