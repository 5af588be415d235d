use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How the server picks the encoder depth `ℓ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SamplerMode {
    /// Uniform over the inclusive range `min..=max`.
    Uniform { min: usize, max: usize },
    /// Always the same block.
    Fixed(usize),
}

impl SamplerMode {
    pub fn full(layers: usize) -> Self {
        SamplerMode::Uniform { min: 1, max: layers }
    }

    /// Inclusive range of depths this mode can return.
    pub fn range(&self) -> (usize, usize) {
        match *self {
            SamplerMode::Uniform { min, max } => (min, max),
            SamplerMode::Fixed(l) => (l, l),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let (lo, hi) = self.range();
        if lo == 0 || lo > hi || hi > layers {
            return Err(Error::Config(format!("block range {lo}..={hi} is empty or outside 1..={layers}")));
        }
        Ok(())
    }
}

/// Seeded block sampler.
#[derive(Clone, Debug)]
pub struct BlockSampler {
    mode: SamplerMode,
    rng: ChaCha8Rng,
}

impl BlockSampler {
    pub fn new(mode: SamplerMode, layers: usize, rng: ChaCha8Rng) -> Result<Self> {
        mode.validate(layers)?;
        Ok(Self { mode, rng })
    }

    pub fn seeded(mode: SamplerMode, layers: usize, seed: u64) -> Result<Self> {
        Self::new(mode, layers, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn draw(&mut self) -> usize {
        match self.mode {
            SamplerMode::Uniform { min, max } => self.rng.random_range(min..=max),
            SamplerMode::Fixed(l) => l,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn fixed_mode_always_returns_its_block() {
        let mut s = BlockSampler::seeded(SamplerMode::Fixed(4), 12, 0).unwrap();
        assert!((0..100).all(|_| s.draw() == 4));
    }

    #[test]
    fn empty_or_out_of_range_is_rejected() {
        assert!(BlockSampler::seeded(SamplerMode::Uniform { min: 5, max: 4 }, 12, 0).is_err());
        assert!(BlockSampler::seeded(SamplerMode::Uniform { min: 0, max: 4 }, 12, 0).is_err());
        assert!(BlockSampler::seeded(SamplerMode::Uniform { min: 1, max: 13 }, 12, 0).is_err());
        assert!(BlockSampler::seeded(SamplerMode::Fixed(13), 12, 0).is_err());
    }

    #[test]
    fn draws_stay_in_range_and_repeat_under_seed() {
        let mode = SamplerMode::Uniform { min: 3, max: 7 };
        let mut a = BlockSampler::seeded(mode, 12, 42).unwrap();
        let mut b = BlockSampler::seeded(mode, 12, 42).unwrap();
        let xs: Vec<usize> = (0..500).map(|_| a.draw()).collect();
        let ys: Vec<usize> = (0..500).map(|_| b.draw()).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|l| (3..=7).contains(l)));
        let mut seen = [false; 8];
        xs.iter().for_each(|&l| seen[l] = true);
        assert!(seen[3..=7].iter().all(|&s| s));
    }
}
