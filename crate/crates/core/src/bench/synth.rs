use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::controls::BIN_TO_CLASS;
use crate::error::{Error, Result};
use crate::scorenet::{Condition, MOOD_CLASSES, TEMPO_CLASSES};
use crate::{BINS, FRAMES};

/// Pitch classes emphasized by each mood class. The four sets are disjoint
/// and together cover all twelve classes.
pub const MOOD_TEMPLATES: [[usize; 3]; MOOD_CLASSES] = [[0, 4, 7], [2, 5, 9], [1, 6, 10], [3, 8, 11]];

const DOMINANT: f64 = 1.0;
const BACKGROUND: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub count: usize,
    pub seed: u64,
    /// Envelope period in frames for the slow, mid and fast tempo classes.
    pub tempo_periods: [usize; TEMPO_CLASSES],
    pub noise: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            count: 4000,
            seed: 0,
            tempo_periods: [16, 8, 4],
            noise: 0.02,
        }
    }
}

impl SynthDatasetSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            ..Self::default()
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if spec.tempo_periods.iter().any(|&p| p < 2 || p > FRAMES) || !(spec.noise >= 0.0) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: "tempo periods must lie in [2, 32] and noise must be nonnegative".into(),
            });
        }
        Ok(spec)
    }

    /// Sample `index`, a pure function of the spec's seed and the index.
    pub fn sample(&self, index: u64) -> (Tensor, Condition) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let tempo = rng.random_range(0..TEMPO_CLASSES) as u8;
        let mood = rng.random_range(0..MOOD_CLASSES) as u8;
        let period = self.tempo_periods[tempo as usize] as f64;
        let phase = rng.random::<f64>() * period;
        let gain = 1.0 + rng.random::<f64>();
        let template = &MOOD_TEMPLATES[mood as usize];
        let mut data = Vec::with_capacity(BINS * FRAMES);
        for b in 0..BINS {
            let level = if template.contains(&BIN_TO_CLASS[b]) { DOMINANT } else { BACKGROUND };
            for f in 0..FRAMES {
                let env = 0.55 + 0.45 * (TAU * (f as f64 - phase) / period).cos();
                let n: f64 = rng.sample(StandardNormal);
                data.push((gain * level * env + self.noise * n).max(0.0));
            }
        }
        let x = Tensor::new(&[BINS, FRAMES], data).expect("fixed shape");
        (x, Condition::tags(tempo, mood))
    }

    pub fn generate(&self) -> Vec<(Tensor, Condition)> {
        (0..self.count as u64).map(|i| self.sample(i)).collect()
    }
}

/// All samples of a dataset spec.
pub fn synth_generate(spec: &SynthDatasetSpec) -> Vec<(Tensor, Condition)> {
    spec.generate()
}
