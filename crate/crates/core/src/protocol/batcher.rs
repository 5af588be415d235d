use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Cycles through `0..n` in a fresh random order every epoch. A batch that
/// runs past the end of an epoch continues into the next one.
#[derive(Clone, Debug)]
pub struct EpochBatcher {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl EpochBatcher {
    pub fn new(n: usize, batch: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            batch,
            rng,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
