//! Strict-fairness sampling: per choice point, a shuffled cyclic queue
//! over the candidates, reshuffled on exhaustion. Within any window of
//! m_i consecutive draws each candidate appears exactly once, so update
//! counts never differ by more than one.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct FairQueue {
    size: usize,
    queue: Vec<usize>,
}

impl FairQueue {
    pub fn new(size: usize) -> Self {
        assert!(size > 0, "choice point with no candidates");
        FairQueue { size, queue: Vec::new() }
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.queue.is_empty() {
            self.queue = (0..self.size).collect();
            self.queue.shuffle(rng);
        }
        self.queue.pop().expect("refilled above")
    }
}

/// One independent queue per choice point; choice points may have
/// unequal candidate counts.
pub struct FairSchedule {
    queues: Vec<FairQueue>,
    rng: ChaCha8Rng,
}

impl FairSchedule {
    pub fn new(sizes: &[usize], rng: ChaCha8Rng) -> Self {
        FairSchedule {
            queues: sizes.iter().map(|&s| FairQueue::new(s)).collect(),
            rng,
        }
    }

    /// One candidate index per choice point.
    pub fn next(&mut self) -> Vec<usize> {
        let rng = &mut self.rng;
        self.queues.iter_mut().map(|q| q.next(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_window_is_a_permutation() {
        let mut sched = FairSchedule::new(&[3, 5, 1], ChaCha8Rng::seed_from_u64(11));
        let draws: Vec<Vec<usize>> = (0..300).map(|_| sched.next()).collect();
        for (cp, &m) in [3usize, 5, 1].iter().enumerate() {
            for window in draws.chunks(m) {
                let mut seen: Vec<usize> = window.iter().map(|d| d[cp]).collect();
                seen.sort_unstable();
                assert_eq!(seen, (0..m).collect::<Vec<_>>(), "choice point {cp}");
            }
        }
    }

    #[test]
    fn global_spread_at_most_one() {
        let mut sched = FairSchedule::new(&[4], ChaCha8Rng::seed_from_u64(12));
        let mut counts = [0usize; 4];
        for step in 1..=1000 {
            counts[sched.next()[0]] += 1;
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1, "spread at step {step}: {counts:?}");
        }
        assert_eq!(counts, [250; 4]);
    }

    #[test]
    fn singleton_always_returns_zero() {
        let mut sched = FairSchedule::new(&[1], ChaCha8Rng::seed_from_u64(13));
        for _ in 0..10 {
            assert_eq!(sched.next(), vec![0]);
        }
    }
}
