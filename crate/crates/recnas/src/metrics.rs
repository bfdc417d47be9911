//! Ranking and classification metrics. Ties in candidate scores are
//! broken by stable candidate order so HR/NDCG are unambiguous.

/// Rank of the target among candidates (1 = best). `scores[i]` belongs
/// to candidate i; the target is `scores[target_idx]`. A candidate
/// outranks the target if its score is strictly higher, or equal with a
/// lower index.
pub fn rank_of_target(scores: &[f64], target_idx: usize) -> usize {
    let t = scores[target_idx];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i == target_idx {
            continue;
        }
        if s > t || (s == t && i < target_idx) {
            rank += 1;
        }
    }
    rank
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item form: ideal DCG is 1.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Mann-Whitney AUC via rank sums, counting ties as half. O(n log n).
pub fn auc(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let npos = labels.iter().filter(|&&y| y == 1.0).count();
    let nneg = labels.len() - npos;
    assert!(npos > 0 && nneg > 0, "auc needs both classes");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // midranks over tie groups
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1.0)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - npos as f64 * (npos as f64 + 1.0) / 2.0;
    u / (npos as f64 * nneg as f64)
}

/// O(n^2) pair-counting reference for [`auc`].
pub fn auc_bruteforce(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    assert!(pairs > 0.0, "auc needs both classes");
    wins / pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_and_gain_basics() {
        // target at index 2 with two strictly better scores -> rank 3
        let scores = [0.9, 0.8, 0.5, 0.1];
        assert_eq!(rank_of_target(&scores, 2), 3);
        assert_eq!(hr_at_k(3, 5), 1.0);
        assert_eq!(hr_at_k(6, 5), 0.0);
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(3, 5), 0.5);
        assert_eq!(ndcg_at_k(6, 5), 0.0);
    }

    #[test]
    fn ties_break_by_candidate_order() {
        let scores = [0.5, 0.5, 0.5];
        assert_eq!(rank_of_target(&scores, 0), 1);
        assert_eq!(rank_of_target(&scores, 2), 3);
    }

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1.0, 0.0]), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 1.0, 0.0]), 0.5);
    }

    #[test]
    fn rank_sum_matches_bruteforce_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // coarse grid forces many ties
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
        let labels: Vec<f64> = (0..1000).map(|_| rng.gen_range(0..2) as f64).collect();
        let fast = auc(&scores, &labels);
        let slow = auc_bruteforce(&scores, &labels);
        assert!(
            (fast - slow).abs() < 1e-12,
            "rank-sum {fast} vs pair-count {slow}"
        );
    }
}
