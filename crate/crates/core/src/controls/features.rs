use std::f64::consts::LN_10;
use std::sync::OnceLock;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::{BINS, FRAMES};

/// Amplitude floor applied before any logarithm or normalization.
pub const AMPLITUDE_FLOOR: f64 = 1e-5;
pub const PITCH_CLASSES: usize = 12;
pub const SMOOTHING_WIDTH: usize = 5;
const PROB_FLOOR: f64 = 1e-8;

/// Pitch class of each frequency bin (round-robin; classes 0-3 get two bins).
pub const BIN_TO_CLASS: [usize; BINS] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 0, 1, 2, 3];

/// Reshapes any 512-element variable to `[BINS, FRAMES]`.
pub(crate) fn as_grid(g: &mut Graph, x: Var) -> Result<Var> {
    let n: usize = g.shape(x).iter().product();
    if n != BINS * FRAMES {
        return Err(Error::shape(
            "control feature",
            format!("input {:?} is not a single {BINS}x{FRAMES} spectrogram", g.shape(x)),
        ));
    }
    g.reshape(x, &[BINS, FRAMES])
}

/// Moving-average matrix `S` with `curve @ S` smoothing a row vector;
/// out-of-range taps reflect about the end frames.
pub fn smoothing_matrix() -> &'static Tensor {
    static S: OnceLock<Tensor> = OnceLock::new();
    S.get_or_init(|| {
        let n = FRAMES as isize;
        let half = (SMOOTHING_WIDTH / 2) as isize;
        let mut m = vec![0.0; FRAMES * FRAMES];
        for i in 0..n {
            for k in -half..=half {
                let mut j = i + k;
                if j < 0 {
                    j = -j;
                }
                if j >= n {
                    j = 2 * (n - 1) - j;
                }
                m[j as usize * FRAMES + i as usize] += 1.0 / SMOOTHING_WIDTH as f64;
            }
        }
        Tensor::new(&[FRAMES, FRAMES], m).expect("square matrix")
    })
}

/// Smoothed per-frame loudness in dB, shape `[1, FRAMES]`.
pub fn intensity_feature(g: &mut Graph, x: Var) -> Result<Var> {
    let x = as_grid(g, x)?;
    let x = g.clamp_min(x, AMPLITUDE_FLOOR);
    let sq = g.square(x)?;
    let power = g.sum_axis(sq, 0)?;
    let power = g.scale(power, 1.0 / BINS as f64);
    let rms = g.sqrt(power)?;
    let db = g.log(rms)?;
    let db = g.scale(db, 20.0 / LN_10);
    let db = g.reshape(db, &[1, FRAMES])?;
    let s = g.constant(smoothing_matrix().clone());
    g.matmul(db, s)
}

fn class_matrix() -> Tensor {
    let mut m = vec![0.0; PITCH_CLASSES * BINS];
    for (b, &c) in BIN_TO_CLASS.iter().enumerate() {
        m[c * BINS + b] = 1.0;
    }
    Tensor::new(&[PITCH_CLASSES, BINS], m).expect("class matrix")
}

/// Per-frame log-probabilities over pitch classes, shape `[FRAMES, 12]`.
pub fn chroma_feature(g: &mut Graph, x: Var) -> Result<Var> {
    let x = as_grid(g, x)?;
    let energy = g.square(x)?;
    let c = g.constant(class_matrix());
    let classes = g.matmul(c, energy)?;
    let classes = g.transpose(classes)?;
    let total = g.sum_axis(classes, 1)?;
    let total = g.clamp_min(total, 1e-30);
    let total = g.reshape(total, &[FRAMES, 1])?;
    let total = g.broadcast(total, &[FRAMES, PITCH_CLASSES])?;
    let p = g.div(classes, total)?;
    let p = g.clamp_min(p, PROB_FLOOR);
    g.log(p)
}

/// Gram matrix of per-frame spectral profiles normalized to unit length,
/// shape `[FRAMES, FRAMES]`.
pub fn ss_matrix(g: &mut Graph, x: Var) -> Result<Var> {
    let x = as_grid(g, x)?;
    let x = g.clamp_min(x, AMPLITUDE_FLOOR);
    let rows = g.transpose(x)?;
    let sq = g.square(rows)?;
    let norm = g.sum_axis(sq, 1)?;
    let norm = g.affine(norm, 1.0, 1e-12);
    let norm = g.sqrt(norm)?;
    let norm = g.reshape(norm, &[FRAMES, 1])?;
    let norm = g.broadcast(norm, &[FRAMES, BINS])?;
    let unit = g.div(rows, norm)?;
    let unit_t = g.transpose(unit)?;
    g.matmul(unit, unit_t)
}

/// Plain-tensor helpers for callers outside a graph.
pub fn eval_feature(
    x: &Tensor,
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = f(&mut g, v)?;
    Ok(g.value(y).clone())
}

/// Argmax pitch class (1-based) per frame.
pub fn melody_of(x: &Tensor) -> Result<Vec<u8>> {
    let lp = eval_feature(x, chroma_feature)?;
    Ok(lp
        .data()
        .chunks(PITCH_CLASSES)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8 + 1
        })
        .collect())
}
