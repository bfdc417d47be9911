//! Synthetic datasets with planted, analytically bounded signals, the
//! leave-one-out protocol split and negative sampling.
//!
//! The CTR generator plants a pure pairwise interaction: the label
//! depends on the product of two balanced +-1 codes, so every single
//! field carries zero marginal signal and recovering the pair is a
//! sharp test of interaction search. Its Bayes AUC is sigmoid(beta) in
//! closed form. The sequence generator follows a noisy successor
//! permutation whose Bayes HR@1 is (1-noise) + noise/items.

use crate::schema::{
    BehaviorElement, DatasetSchema, FieldGroup, FieldSchema, Instance, Label, Valence,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor::ops::sigmoid_scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticSpec {
    /// First-order item sequences: each step follows a fixed random
    /// successor permutation with probability 1-noise, else uniform.
    MarkovSeq {
        users: usize,
        items: usize,
        seq_len: usize,
        noise: f64,
        seed: u64,
    },
    /// Uniform categorical fields; the label is Bernoulli of
    /// sigmoid(beta * r[x_a] * c[x_b]) for the planted field pair.
    PlantedInteractionCtr {
        rows: usize,
        fields: usize,
        cardinality: usize,
        pair: [usize; 2],
        beta: f64,
        seed: u64,
    },
}

/// Best achievable AUC on the planted-interaction task.
pub fn planted_bayes_auc(beta: f64) -> f64 {
    sigmoid_scalar(beta)
}

/// Best achievable HR@1 on the successor task (predict succ[current]).
pub fn markov_bayes_hr1(noise: f64, items: usize) -> f64 {
    (1.0 - noise) + noise / items as f64
}

/// Balanced random +-1 code of even length.
fn pm_code(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    assert!(len % 2 == 0, "balanced code needs even cardinality");
    let mut code: Vec<f64> = (0..len).map(|i| if i < len / 2 { 1.0 } else { -1.0 }).collect();
    code.shuffle(rng);
    code
}

pub fn planted_ctr_schema(fields: usize, cardinality: usize) -> DatasetSchema {
    DatasetSchema {
        fields: (0..fields)
            .map(|f| FieldSchema {
                name: format!("f{f:02}"),
                cardinality,
                valence: Valence::Univalent,
                group: FieldGroup::NonSequential,
            })
            .collect(),
        max_seq_len: 0,
    }
}

pub fn generate_planted_ctr(
    rows: usize,
    fields: usize,
    cardinality: usize,
    pair: [usize; 2],
    beta: f64,
    seed: u64,
) -> (DatasetSchema, Vec<Instance>) {
    assert!(pair[0] < fields && pair[1] < fields && pair[0] != pair[1]);
    let schema = planted_ctr_schema(fields, cardinality);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = pm_code(&mut rng, cardinality);
    let c = pm_code(&mut rng, cardinality);
    let instances = (0..rows)
        .map(|_| {
            let ids: Vec<u32> = (0..fields).map(|_| rng.gen_range(0..cardinality) as u32).collect();
            let g = r[ids[pair[0]] as usize] * c[ids[pair[1]] as usize];
            let p = sigmoid_scalar(beta * g);
            let y = u8::from(rng.gen_range(0.0..1.0) < p);
            Instance {
                non_seq: ids.into_iter().map(|i| vec![i]).collect(),
                behavior: Vec::new(),
                target_item: None,
                label: Label::Click(y),
            }
        })
        .collect();
    (schema, instances)
}

pub fn markov_schema(items: usize, seq_len: usize) -> DatasetSchema {
    DatasetSchema {
        fields: vec![FieldSchema {
            name: "item".into(),
            cardinality: items,
            valence: Valence::Univalent,
            group: FieldGroup::BehaviorElement,
        }],
        max_seq_len: seq_len,
    }
}

pub fn generate_markov(
    users: usize,
    items: usize,
    seq_len: usize,
    noise: f64,
    seed: u64,
) -> (DatasetSchema, Vec<Vec<u32>>) {
    assert!(items >= 2 && seq_len >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut succ: Vec<u32> = (0..items as u32).collect();
    succ.shuffle(&mut rng);
    let sequences = (0..users)
        .map(|_| {
            let mut seq = Vec::with_capacity(seq_len);
            let mut cur = rng.gen_range(0..items) as u32;
            seq.push(cur);
            for _ in 1..seq_len {
                cur = if rng.gen_range(0.0..1.0) < noise {
                    rng.gen_range(0..items) as u32
                } else {
                    succ[cur as usize]
                };
                seq.push(cur);
            }
            seq
        })
        .collect();
    (markov_schema(items, seq_len), sequences)
}

/// View a pure item sequence as an on-disk record (single behavior
/// field, placeholder label).
pub fn sequences_to_instances(sequences: &[Vec<u32>]) -> Vec<Instance> {
    sequences
        .iter()
        .map(|seq| Instance {
            non_seq: Vec::new(),
            behavior: seq.iter().map(|&i| vec![vec![i]]).collect(),
            target_item: None,
            label: Label::NextItem(0),
        })
        .collect()
}

/// Item ids of the first behavior field, one per element.
pub fn instance_to_sequence(inst: &Instance) -> Vec<u32> {
    inst.behavior
        .iter()
        .map(|elem: &BehaviorElement| elem[0][0])
        .collect()
}

/// Per-user leave-one-out split over full sequences.
pub struct LooSplit {
    /// Training prefix per kept user (everything before the held-out
    /// pair).
    pub train: Vec<Vec<u32>>,
    /// (prefix, target): the penultimate action per user.
    pub val: Vec<(Vec<u32>, u32)>,
    /// (prefix, target): the last action per user.
    pub test: Vec<(Vec<u32>, u32)>,
}

/// Remove items, then users, with fewer than `min_feedback`
/// occurrences; split the survivors: last action to test, penultimate
/// to validation, rest to train. Survivors shorter than 3 are dropped.
pub fn leave_one_out_split(sequences: &[Vec<u32>], min_feedback: usize) -> LooSplit {
    let max_item = sequences
        .iter()
        .flat_map(|s| s.iter())
        .max()
        .map_or(0, |&m| m as usize + 1);
    let mut item_counts = vec![0usize; max_item];
    for seq in sequences {
        for &i in seq {
            item_counts[i as usize] += 1;
        }
    }
    let mut split = LooSplit { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for seq in sequences {
        let filtered: Vec<u32> = seq
            .iter()
            .copied()
            .filter(|&i| item_counts[i as usize] >= min_feedback)
            .collect();
        if filtered.len() < min_feedback.max(3) {
            continue;
        }
        let n = filtered.len();
        split.test.push((filtered[..n - 1].to_vec(), filtered[n - 1]));
        split.val.push((filtered[..n - 2].to_vec(), filtered[n - 2]));
        split.train.push(filtered[..n - 2].to_vec());
    }
    split
}

/// `n` distinct items outside `exclude`, seeded-deterministic.
pub fn sample_negatives(
    universe: usize,
    exclude: &[u32],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let allowed = universe - exclude.iter().collect::<std::collections::BTreeSet<_>>().len();
    assert!(allowed >= n, "universe too small: {allowed} allowed, {n} requested");
    if allowed <= 2 * n {
        // dense case: enumerate and draw without replacement
        let mut pool: Vec<u32> = (0..universe as u32)
            .filter(|i| !exclude.contains(i))
            .collect();
        pool.shuffle(rng);
        pool.truncate(n);
        return pool;
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let cand = rng.gen_range(0..universe) as u32;
        if !exclude.contains(&cand) && !out.contains(&cand) {
            out.push(cand);
        }
    }
    out
}
