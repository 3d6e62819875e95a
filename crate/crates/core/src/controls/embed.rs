use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::as_grid;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::{BINS, FRAMES};

pub const EMBED_DIM: usize = 32;
const HIDDEN: usize = 64;
const DEFAULT_SEED: u64 = 0x0e3b_ed01;
/// Rough data mean, subtracted so the first layer sees centered inputs.
const INPUT_OFFSET: f64 = 0.25;

/// Frozen two-layer random projection onto the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEmbedder {
    w1: Tensor,
    w2: Tensor,
}

impl ToyEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = BINS * FRAMES;
        let w1 = Tensor::randn(&[d, HIDDEN], &mut rng).map(|v| v * (4.0 / d as f64).sqrt());
        let w2 = Tensor::randn(&[HIDDEN, EMBED_DIM], &mut rng).map(|v| v / (HIDDEN as f64).sqrt());
        Self { w1, w2 }
    }

    /// The embedder shared by the embedding control and the Fréchet metric.
    pub fn standard() -> &'static ToyEmbedder {
        static E: OnceLock<ToyEmbedder> = OnceLock::new();
        E.get_or_init(|| ToyEmbedder::new(DEFAULT_SEED))
    }

    /// Embeds a `[B, D]` batch (or a single spectrogram) to `[B, EMBED_DIM]`.
    pub fn embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n: usize = g.shape(x).iter().product();
        let x = if n == BINS * FRAMES {
            let grid = as_grid(g, x)?;
            g.reshape(grid, &[1, n])?
        } else {
            g.reshape(x, &[n / (BINS * FRAMES), BINS * FRAMES])?
        };
        let b = g.shape(x)[0];
        let x = g.affine(x, 1.0, -INPUT_OFFSET);
        let w1 = g.constant(self.w1.clone());
        let h = g.matmul(x, w1)?;
        let h = g.tanh(h)?;
        let w2 = g.constant(self.w2.clone());
        let v = g.matmul(h, w2)?;
        let sq = g.square(v)?;
        let norm = g.sum_axis(sq, 1)?;
        let norm = g.sqrt(norm)?;
        let norm = g.reshape(norm, &[b, 1])?;
        let norm = g.broadcast(norm, &[b, EMBED_DIM])?;
        g.div(v, norm)
    }

    /// Embeddings of plain spectrograms, one row per sample.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let e = self.embed(&mut g, v)?;
        Ok(g.value(e).clone())
    }
}
