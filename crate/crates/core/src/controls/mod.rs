//! Differentiable feature extractors and the matching losses used as ITO
//! objectives.

mod embed;
mod features;
mod io;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::{BINS, FRAMES};

pub use embed::{ToyEmbedder, EMBED_DIM};
pub use features::{
    chroma_feature, eval_feature, intensity_feature, melody_of, smoothing_matrix, ss_matrix,
    AMPLITUDE_FLOOR, BIN_TO_CLASS, PITCH_CLASSES, SMOOTHING_WIDTH,
};
pub use io::{read_spectrogram, read_target, write_spectrogram, write_target};

use features::as_grid;

/// Frames per overlap unit for inpainting and outpainting.
pub const OVERLAP_UNIT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Intensity,
    Melody,
    Structure,
    Inpaint,
    Outpaint,
    Embed,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Intensity,
        Task::Melody,
        Task::Structure,
        Task::Inpaint,
        Task::Outpaint,
        Task::Embed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Intensity => "intensity",
            Task::Melody => "melody",
            Task::Structure => "structure",
            Task::Inpaint => "inpaint",
            Task::Outpaint => "outpaint",
            Task::Embed => "embed",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task '{s}'")))
    }
}

/// Reference spectrogram plus the cells compared against the generation.
///
/// `gen_mask` and `ref_mask` select equally many cells; the k-th selected cell
/// of the generation (row-major order) is matched to the k-th of the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedReference {
    pub reference: Tensor,
    pub gen_mask: Vec<bool>,
    pub ref_mask: Vec<bool>,
    pub overlap: usize,
}

impl MaskedReference {
    pub fn new(reference: Tensor, gen_mask: Vec<bool>, ref_mask: Vec<bool>, overlap: usize) -> Result<Self> {
        let n = BINS * FRAMES;
        if reference.len() != n || gen_mask.len() != n || ref_mask.len() != n {
            return Err(Error::shape("masked reference", "reference and masks must have 512 cells"));
        }
        let (a, b) = (
            gen_mask.iter().filter(|&&m| m).count(),
            ref_mask.iter().filter(|&&m| m).count(),
        );
        if a != b || a == 0 {
            return Err(Error::invalid(format!(
                "masks select {a} generated and {b} reference cells"
            )));
        }
        Ok(Self {
            reference: reference.reshape(&[BINS, FRAMES])?,
            gen_mask,
            ref_mask,
            overlap,
        })
    }

    fn frame_mask(pred: impl Fn(usize) -> bool) -> Vec<bool> {
        (0..BINS * FRAMES).map(|i| pred(i % FRAMES)).collect()
    }

    /// Keeps one unit on either side of a central gap of two units.
    pub fn inpaint(reference: Tensor) -> Result<Self> {
        let lo = FRAMES / 2 - OVERLAP_UNIT;
        let hi = FRAMES / 2 + OVERLAP_UNIT;
        let m = Self::frame_mask(|f| (lo - OVERLAP_UNIT..lo).contains(&f) || (hi..hi + OVERLAP_UNIT).contains(&f));
        Self::new(reference, m.clone(), m, 1)
    }

    /// The first unit of the generation continues the last unit of the reference.
    pub fn outpaint(reference: Tensor) -> Result<Self> {
        let gen = Self::frame_mask(|f| f < OVERLAP_UNIT);
        let refm = Self::frame_mask(|f| f >= FRAMES - OVERLAP_UNIT);
        Self::new(reference, gen, refm, 1)
    }

    /// The reference with its masked cells copied into the generated positions;
    /// the overlap loss vanishes on it.
    pub fn fixed_point(&self) -> Tensor {
        let mut x = self.reference.clone();
        for (g, r) in Self::indices(&self.gen_mask)
            .into_iter()
            .zip(Self::indices(&self.ref_mask))
        {
            x.data_mut()[g] = self.reference.data()[r];
        }
        x
    }

    pub fn cells(&self) -> usize {
        self.gen_mask.iter().filter(|&&m| m).count()
    }

    fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Target feature `y` for one control task.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlTarget {
    /// Smoothed dB curve, one value per frame.
    Intensity(Vec<f64>),
    /// Pitch class in `1..=12` per frame.
    Melody(Vec<u8>),
    /// Frame self-similarity matrix, `[FRAMES, FRAMES]`.
    Structure(Tensor),
    Inpaint(MaskedReference),
    Outpaint(MaskedReference),
    /// Unit-norm toy embedding.
    Embed(Vec<f64>),
}

impl ControlTarget {
    pub fn task(&self) -> Task {
        match self {
            ControlTarget::Intensity(_) => Task::Intensity,
            ControlTarget::Melody(_) => Task::Melody,
            ControlTarget::Structure(_) => Task::Structure,
            ControlTarget::Inpaint(_) => Task::Inpaint,
            ControlTarget::Outpaint(_) => Task::Outpaint,
            ControlTarget::Embed(_) => Task::Embed,
        }
    }

    /// Checks the invariants of the target feature.
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlTarget::Intensity(c) => {
                if c.len() != FRAMES || c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("intensity curve needs {FRAMES} finite values")));
                }
            }
            ControlTarget::Melody(m) => {
                if m.len() != FRAMES {
                    return Err(Error::shape("melody_loss", format!("{} frames, want {FRAMES}", m.len())));
                }
                if let Some(bad) = m.iter().find(|&&c| !(1..=12).contains(&c)) {
                    return Err(Error::invalid(format!("pitch class {bad} outside 1..=12")));
                }
            }
            ControlTarget::Structure(s) => {
                if s.shape() != [FRAMES, FRAMES] {
                    return Err(Error::shape("structure_loss", format!("target {:?}", s.shape())));
                }
                for i in 0..FRAMES {
                    for j in 0..FRAMES {
                        let (a, b) = (s.data()[i * FRAMES + j], s.data()[j * FRAMES + i]);
                        if (a - b).abs() > 1e-6 || !(-1e-6..=1.0 + 1e-6).contains(&a) {
                            return Err(Error::invalid("SS matrix must be symmetric with values in [0, 1]"));
                        }
                    }
                    if (s.data()[i * FRAMES + i] - 1.0).abs() > 1e-6 {
                        return Err(Error::invalid("SS matrix must have a unit diagonal"));
                    }
                }
            }
            ControlTarget::Inpaint(_) | ControlTarget::Outpaint(_) => {}
            ControlTarget::Embed(e) => {
                let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if e.len() != EMBED_DIM || (n - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "embedding target must be a unit vector of length {EMBED_DIM}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds the target that `x` itself satisfies exactly.
    pub fn from_reference(task: Task, x: &Tensor) -> Result<Self> {
        let x = x.clone().reshape(&[BINS, FRAMES])?;
        Ok(match task {
            Task::Intensity => ControlTarget::Intensity(eval_feature(&x, intensity_feature)?.into_data()),
            Task::Melody => ControlTarget::Melody(melody_of(&x)?),
            Task::Structure => ControlTarget::Structure(eval_feature(&x, ss_matrix)?),
            Task::Inpaint => ControlTarget::Inpaint(MaskedReference::inpaint(x)?),
            Task::Outpaint => ControlTarget::Outpaint(MaskedReference::outpaint(x)?),
            Task::Embed => ControlTarget::Embed(ToyEmbedder::standard().embed_tensor(&x)?.into_data()),
        })
    }

    /// Scalar loss `L(x0)` for a single spectrogram `x0` (512 elements).
    pub fn loss(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.validate()?;
        match self {
            ControlTarget::Intensity(c) => {
                let f = intensity_feature(g, x)?;
                let y = g.constant(Tensor::new(&[1, FRAMES], c.clone())?);
                sq_l2(g, f, y)
            }
            ControlTarget::Melody(m) => melody_loss(g, x, m),
            ControlTarget::Structure(s) => {
                let f = ss_matrix(g, x)?;
                let y = g.constant(s.clone());
                sq_l2(g, f, y)
            }
            ControlTarget::Inpaint(r) | ControlTarget::Outpaint(r) => overlap_loss(g, x, r),
            ControlTarget::Embed(e) => embed_similarity_loss(g, x, e),
        }
    }

    /// Task metric: MSE per feature element, frame accuracy for melody, and
    /// `1 - cos` for the embedding task.
    pub fn metric(&self, x: &Tensor) -> Result<f64> {
        if let ControlTarget::Melody(m) = self {
            return melody_accuracy(x, m);
        }
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = self.loss(&mut g, v)?;
        let l = g.value(l).item()?;
        Ok(match self {
            ControlTarget::Intensity(_) => l / FRAMES as f64,
            ControlTarget::Structure(_) => l / (FRAMES * FRAMES) as f64,
            ControlTarget::Inpaint(r) | ControlTarget::Outpaint(r) => l / r.cells() as f64,
            _ => l,
        })
    }

    /// Loss value on a plain tensor.
    pub fn loss_value(&self, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = self.loss(&mut g, v)?;
        g.value(l).item()
    }
}

fn sq_l2(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let s = g.square(d)?;
    Ok(g.sum(s))
}

/// Mean negative log-probability of the target class per frame.
pub fn melody_loss(g: &mut Graph, x: Var, target: &[u8]) -> Result<Var> {
    ControlTarget::Melody(target.to_vec()).validate()?;
    let lp = chroma_feature(g, x)?;
    let flat = g.reshape(lp, &[FRAMES * PITCH_CLASSES, 1])?;
    let idx: Vec<usize> = target
        .iter()
        .enumerate()
        .map(|(f, &c)| f * PITCH_CLASSES + (c as usize - 1))
        .collect();
    let picked = g.gather(flat, &idx)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / FRAMES as f64))
}

/// Fraction of frames whose argmax pitch class equals the target.
pub fn melody_accuracy(x: &Tensor, target: &[u8]) -> Result<f64> {
    ControlTarget::Melody(target.to_vec()).validate()?;
    let m = melody_of(x)?;
    Ok(m.iter().zip(target).filter(|(a, b)| a == b).count() as f64 / FRAMES as f64)
}

/// Squared distance between the masked generation and the masked reference.
pub fn overlap_loss(g: &mut Graph, x: Var, r: &MaskedReference) -> Result<Var> {
    let grid = as_grid(g, x)?;
    let flat = g.reshape(grid, &[BINS * FRAMES, 1])?;
    let picked = g.gather(flat, &MaskedReference::indices(&r.gen_mask))?;
    let refs: Vec<f64> = MaskedReference::indices(&r.ref_mask)
        .into_iter()
        .map(|i| r.reference.data()[i])
        .collect();
    let y = g.constant(Tensor::new(&[refs.len(), 1], refs)?);
    sq_l2(g, picked, y)
}

/// `1 - <f(x), e>` for unit vectors, evaluated as `|f(x) - e|^2 / 2` so
/// that it vanishes exactly at `f(x) = e`.
pub fn embed_similarity_loss(g: &mut Graph, x: Var, target: &[f64]) -> Result<Var> {
    let f = ToyEmbedder::standard().embed(g, x)?;
    let y = g.constant(Tensor::new(&[1, EMBED_DIM], target.to_vec())?);
    let d = sq_l2(g, f, y)?;
    Ok(g.scale(d, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn positive_sample(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[BINS, FRAMES], &mut rng).map(|v| 0.3 + 0.2 * v.abs())
    }

    #[test]
    fn task_names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("looping".parse::<Task>().is_err());
    }

    #[test]
    fn every_loss_vanishes_on_its_own_target() {
        let x = positive_sample(1);
        // Melody needs all chroma energy of each frame in one class.
        let concentrated = Tensor::new(
            &[BINS, FRAMES],
            (0..BINS * FRAMES)
                .map(|i| if BIN_TO_CLASS[i / FRAMES] == (i % FRAMES) % 12 { 0.8 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        for t in Task::ALL {
            let x = if t == Task::Melody { &concentrated } else { &x };
            let target = ControlTarget::from_reference(t, x).unwrap();
            let x = match &target {
                ControlTarget::Outpaint(r) => r.fixed_point(),
                _ => x.clone(),
            };
            assert_eq!(target.loss_value(&x).unwrap(), 0.0, "{t}");
        }
    }

    #[test]
    fn intensity_offset_by_one_db() {
        let x = positive_sample(2);
        let mut c = eval_feature(&x, intensity_feature).unwrap().into_data();
        c.iter_mut().for_each(|v| *v += 1.0);
        let l = ControlTarget::Intensity(c).loss_value(&x).unwrap();
        assert!((l - 32.0).abs() < 1e-9, "{l}");
        assert!(ControlTarget::Intensity(vec![0.0; 31]).loss_value(&x).is_err());
    }

    #[test]
    fn melody_uniform_and_bounds() {
        let x = Tensor::new(
            &[BINS, FRAMES],
            (0..BINS * FRAMES)
                .map(|i| if BIN_TO_CLASS[i / FRAMES] < 4 { 0.5f64.sqrt() } else { 1.0 })
                .collect(),
        )
        .unwrap();
        let target: Vec<u8> = (0..FRAMES).map(|f| (f % 12) as u8 + 1).collect();
        let l = ControlTarget::Melody(target).loss_value(&x).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
        assert!(ControlTarget::Melody(vec![0; FRAMES]).loss_value(&x).is_err());
        assert!(ControlTarget::Melody(vec![13; FRAMES]).validate().is_err());
    }

    #[test]
    fn overlap_mask_semantics() {
        let r = positive_sample(3);
        let target = ControlTarget::Inpaint(MaskedReference::inpaint(r.clone()).unwrap());
        let mut x = r.clone();
        // Frames 8..24 form the gap.
        for b in 0..BINS {
            x.data_mut()[b * FRAMES + 13] += 5.0;
        }
        assert_eq!(target.loss_value(&x).unwrap(), 0.0);
        // Unit change on n masked cells.
        for (n, f) in [(1, 2), (2, 25)] {
            let mut y = r.clone();
            for b in 0..n {
                y.data_mut()[b * FRAMES + f] += 1.0;
            }
            let l = target.loss_value(&y).unwrap();
            assert!((l - n as f64).abs() < 1e-12);
        }
        let out = MaskedReference::outpaint(r.clone()).unwrap();
        assert_eq!(out.cells(), BINS * OVERLAP_UNIT);
        let mut shifted = Tensor::zeros(&[BINS, FRAMES]);
        for b in 0..BINS {
            for f in 0..OVERLAP_UNIT {
                shifted.data_mut()[b * FRAMES + f] = r.data()[b * FRAMES + FRAMES - OVERLAP_UNIT + f];
            }
        }
        assert_eq!(ControlTarget::Outpaint(out).loss_value(&shifted).unwrap(), 0.0);
    }

    #[test]
    fn embed_loss_reference_values() {
        let x = positive_sample(4);
        let e = ToyEmbedder::standard().embed_tensor(&x).unwrap().into_data();
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        let l = ControlTarget::Embed(neg).loss_value(&x).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        // A unit vector orthogonal to e.
        let mut o = vec![0.0; EMBED_DIM];
        o[0] = e[1];
        o[1] = -e[0];
        let n = (o[0] * o[0] + o[1] * o[1]).sqrt();
        o.iter_mut().for_each(|v| *v /= n);
        let l = ControlTarget::Embed(o).loss_value(&x).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_pass_gradient_check() {
        let x = positive_sample(5);
        let other = positive_sample(6);
        for t in Task::ALL {
            let target = ControlTarget::from_reference(t, &other).unwrap();
            let r = finite_diff_check(|g, v| target.loss(g, v), &x, 1e-6).unwrap();
            assert!(r.max_rel_error < 1e-3, "{t}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn ss_target_validation() {
        let x = positive_sample(7);
        let s = eval_feature(&x, ss_matrix).unwrap();
        assert!(ControlTarget::Structure(s.clone()).validate().is_ok());
        let mut bad = s;
        bad.data_mut()[1] += 0.1;
        assert!(ControlTarget::Structure(bad).validate().is_err());
    }
}
