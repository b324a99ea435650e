use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::episode::stream_rng;
use super::DataError;

/// One draw from a [`MixStream`]: which source, and which item inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub source: usize,
    pub index: usize,
}

/// Endless weighted mixture over sources of known size.
///
/// A source is chosen with probability `weight / Σ weights`; within a source
/// items are replayed in a fresh random permutation each epoch.
pub struct MixStream {
    cumulative: Vec<f64>,
    sizes: Vec<usize>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl MixStream {
    pub fn new(sources: &[(usize, f64)], seed: u64) -> Result<Self, DataError> {
        if sources.is_empty() {
            return Err(DataError::Invalid("mixture needs at least one source".into()));
        }
        let mut cumulative = Vec::with_capacity(sources.len());
        let mut total = 0.0;
        for (i, &(size, w)) in sources.iter().enumerate() {
            if size == 0 {
                return Err(DataError::Invalid(format!("mixture source {i} is empty")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(DataError::Invalid(format!("mixture source {i} has weight {w}")));
            }
            total += w;
            cumulative.push(total);
        }
        for c in &mut cumulative {
            *c /= total;
        }
        let sizes: Vec<usize> = sources.iter().map(|s| s.0).collect();
        Ok(Self {
            cumulative,
            orders: vec![Vec::new(); sizes.len()],
            cursors: vec![0; sizes.len()],
            sizes,
            rng: stream_rng(seed, 0x6d69_78),
        })
    }

    pub fn next_draw(&mut self) -> Draw {
        let u: f64 = self.rng.gen();
        let source = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.sizes.len() - 1);
        if self.cursors[source] == self.orders[source].len() {
            let mut order: Vec<usize> = (0..self.sizes[source]).collect();
            order.shuffle(&mut self.rng);
            self.orders[source] = order;
            self.cursors[source] = 0;
        }
        let index = self.orders[source][self.cursors[source]];
        self.cursors[source] += 1;
        Draw { source, index }
    }
}

impl Iterator for MixStream {
    type Item = Draw;
    fn next(&mut self) -> Option<Draw> {
        Some(self.next_draw())
    }
}
