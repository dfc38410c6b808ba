use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// Indices of one batch, all drawn from a single source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: usize,
    pub indices: Vec<usize>,
}

/// Deterministic stream of homogeneous batches.
///
/// Every batch first picks a source with probability proportional to its
/// size, then takes the next `batch_size` records of that source's current
/// epoch. An epoch is a fresh shuffle of the source; when fewer than a full
/// batch of records remain, they are dropped and a new epoch starts, so no
/// record repeats within an epoch. Sources smaller than `batch_size` yield
/// whole-source batches.
#[derive(Clone, Debug)]
pub struct ProportionalSampler {
    sizes: Vec<usize>,
    batch_size: usize,
    choose: WeightedIndex<usize>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl ProportionalSampler {
    pub fn new(sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if sizes.is_empty() {
            return Err(TrainError::NoSources);
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(TrainError::EmptySource(format!("#{k}")));
        }
        if batch_size == 0 {
            return Err(TrainError::ZeroBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orders = sizes
            .iter()
            .map(|&n| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            batch_size,
            choose: WeightedIndex::new(sizes).expect("sizes are positive"),
            orders,
            cursors: vec![0; sizes.len()],
            rng,
        })
    }

    /// Size of the batches drawn from `source`.
    pub fn batch_size_for(&self, source: usize) -> usize {
        self.batch_size.min(self.sizes[source])
    }

    pub fn next_batch(&mut self) -> Batch {
        let source = self.choose.sample(&mut self.rng);
        let b = self.batch_size_for(source);
        if self.cursors[source] + b > self.sizes[source] {
            self.orders[source].shuffle(&mut self.rng);
            self.cursors[source] = 0;
        }
        let start = self.cursors[source];
        self.cursors[source] += b;
        Batch {
            source,
            indices: self.orders[source][start..start + b].to_vec(),
        }
    }
}

impl Iterator for ProportionalSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_source_always_chosen() {
        let s = ProportionalSampler::new(&[10], 3, 1).unwrap();
        assert!(s.take(50).all(|b| b.source == 0 && b.indices.len() == 3));
    }

    #[test]
    fn epochs_do_not_repeat_records() {
        let mut s = ProportionalSampler::new(&[10], 3, 7).unwrap();
        for _ in 0..5 {
            let mut seen = HashSet::new();
            for _ in 0..3 {
                for i in s.next_batch().indices {
                    assert!(seen.insert(i));
                }
            }
        }
    }

    #[test]
    fn small_sources_give_whole_source_batches() {
        let mut s = ProportionalSampler::new(&[2], 8, 0).unwrap();
        let mut b = s.next_batch().indices;
        b.sort();
        assert_eq!(b, vec![0, 1]);
    }

    #[test]
    fn seeded_and_proportional() {
        let a: Vec<Batch> = ProportionalSampler::new(&[300, 100], 4, 42).unwrap().take(200).collect();
        let b: Vec<Batch> = ProportionalSampler::new(&[300, 100], 4, 42).unwrap().take(200).collect();
        assert_eq!(a, b);
        let c: Vec<Batch> = ProportionalSampler::new(&[300, 100], 4, 43).unwrap().take(200).collect();
        assert_ne!(a, c);

        let n = 40_000;
        let first = ProportionalSampler::new(&[3, 1], 1, 9)
            .unwrap()
            .take(n)
            .filter(|b| b.source == 0)
            .count();
        assert!((first as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(ProportionalSampler::new(&[], 2, 0), Err(TrainError::NoSources)));
        assert!(matches!(ProportionalSampler::new(&[3, 0], 2, 0), Err(TrainError::EmptySource(_))));
        assert!(matches!(ProportionalSampler::new(&[3], 0, 0), Err(TrainError::ZeroBatch)));
    }
}
