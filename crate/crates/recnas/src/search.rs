//! Search orchestration: fair one-shot supernet training, random
//! search with inherited weights, beam-driven interaction discovery,
//! aggregation-MLP width search and fine-tuning of derived models.

use crate::blocks::{
    compress, compress_width, nonzero_layer_choices, stack_forward, BlockArchitecture, BlockSpec,
    LayerChoice, SupernetBank, TargetScorer, BLOCK_ACTS, NORMS, SCORE_HIDDEN,
};
use crate::dice::{absorb_taps, DiceState, DiceTaps};
use crate::embed::{embed_behavior, embed_non_seq, embed_target, EmbeddingTables, PaddedBatch};
use crate::fairness::FairSchedule;
use crate::head::{
    assemble_input, loss_ctr, loss_nextitem, mlp_forward, user_vector, MlpBank, MlpSpec,
    RetrievalHead, MLP_ACTS, WIDTH_FRACTIONS,
};
use crate::interactions::{evolve, hadamard, EvolveOutcome, ExploreConfig, Interaction};
use crate::metrics::{auc, hr_at_k, ndcg_at_k, rank_of_target};
use crate::schema::{DatasetSchema, Instance, Label};
use crate::synth::{leave_one_out_split, sample_negatives, LooSplit};
use crate::RecError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensor::graph::Var;
use tensor::{init, Adam, Binder, Graph, ParamId, ParamStore, Tensor};

// ---------------------------------------------------------------------------
// architecture space

/// Composite per-position choice count: (norm x layer x act) for every
/// non-Zero layer plus the single Zero option.
pub fn composite_space_size(l_b: usize, num_nonzero_layers: usize) -> u128 {
    let per = 2 * num_nonzero_layers as u128 * 4 + 1;
    per.pow(l_b as u32)
}

fn decode_composite(idx: usize, choices: &[LayerChoice]) -> BlockSpec {
    let per = 2 * choices.len() * 4;
    if idx == per {
        return BlockSpec::zero();
    }
    let norm = NORMS[idx / (choices.len() * 4)];
    let rest = idx % (choices.len() * 4);
    BlockSpec {
        norm,
        layer: choices[rest / 4],
        act: BLOCK_ACTS[rest % 4],
    }
}

/// Uniform draw over the composite space (Zero weighted as one option).
pub fn sample_architecture(
    rng: &mut ChaCha8Rng,
    l_b: usize,
    choices: &[LayerChoice],
) -> BlockArchitecture {
    let per = 2 * choices.len() * 4 + 1;
    BlockArchitecture(
        (0..l_b)
            .map(|_| decode_composite(rng.gen_range(0..per), choices))
            .collect(),
    )
}

/// Every architecture in the space, for small L_b.
pub fn enumerate_architectures(l_b: usize, choices: &[LayerChoice]) -> Vec<BlockArchitecture> {
    let per = 2 * choices.len() * 4 + 1;
    let total = (per as u128).pow(l_b as u32);
    assert!(total <= 1_000_000, "space too large to enumerate");
    let mut out = Vec::with_capacity(total as usize);
    let mut idx = vec![0usize; l_b];
    loop {
        out.push(BlockArchitecture(
            idx.iter().map(|&i| decode_composite(i, choices)).collect(),
        ));
        let mut pos = 0;
        loop {
            if pos == l_b {
                return out;
            }
            idx[pos] += 1;
            if idx[pos] < per {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// stage-1 supernet model

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Number of choice blocks L_b.
    pub l_b: usize,
    /// Embedding width K.
    pub embed_width: usize,
    /// Hidden sizes of the pre-defined combining MLP.
    pub combiner_hidden: Vec<usize>,
    /// Model-side sequence length T (input prefixes are clipped to it).
    pub model_seq_len: usize,
    /// Restrict the layer candidates (None = full declared set).
    pub reduced_layers: Option<Vec<LayerChoice>>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_users: usize,
    /// Up to this many next items become positives per clipped prefix.
    pub positives_per_user: usize,
    pub lr: f64,
    /// Sampled paths whose gradients are summed into one optimizer
    /// update; 1 = one update per single-path step.
    pub paths_per_update: usize,
    pub early_stop_patience: usize,
    /// Random-search budget and how many winners to keep.
    pub num_samples: usize,
    pub top_n: usize,
    /// Validation subset sizes for fitness scoring.
    pub val_users: usize,
    pub eval_negatives: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            l_b: 3,
            embed_width: 16,
            combiner_hidden: vec![32, 16],
            model_seq_len: 15,
            reduced_layers: None,
            epochs: 10,
            steps_per_epoch: 200,
            batch_users: 64,
            positives_per_user: 5,
            lr: 1e-3,
            paths_per_update: 1,
            early_stop_patience: 3,
            num_samples: 2000,
            top_n: 5,
            val_users: 500,
            eval_negatives: 100,
            finetune_epochs: 2,
            finetune_lr: 1e-4,
        }
    }
}

#[derive(Clone)]
pub enum TaskHead {
    Ctr(ParamId),
    Retrieval(RetrievalHead),
}

/// The whole stage-1 one-shot model: embeddings, block supernet, a
/// pre-defined combining MLP and the task head. Children reuse this
/// exact structure, so inheritance is a parameter copy.
#[derive(Clone)]
pub struct Stage1Model {
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub bank: SupernetBank,
    pub combiner: MlpBank,
    pub combiner_spec: MlpSpec,
    pub head: TaskHead,
    pub dice: Vec<DiceState>,
    /// Model-side schema: behavior clipped to `model_seq_len`.
    pub schema: DatasetSchema,
    pub choices: Vec<LayerChoice>,
}

impl Stage1Model {
    pub fn new(data_schema: &DatasetSchema, cfg: &Stage1Config, ctr: bool, seed: u64) -> Self {
        let mut schema = data_schema.clone();
        schema.max_seq_len = cfg.model_seq_len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, &schema, cfg.embed_width, &mut rng);
        let d = schema.num_behavior() * cfg.embed_width;
        let choices = cfg
            .reduced_layers
            .clone()
            .unwrap_or_else(|| nonzero_layer_choices(ctr));
        let bank = SupernetBank::with_choices(&mut store, "blocks", cfg.l_b, d, &choices, ctr, &mut rng);
        let k0 = schema.num_non_seq() * cfg.embed_width + compress_width(d, ctr);
        let combiner = MlpBank::new(
            &mut store,
            "combiner",
            k0,
            cfg.combiner_hidden.len(),
            bank.dice_states().len(),
            &mut rng,
        );
        let combiner_spec = MlpSpec::predefined(k0, &cfg.combiner_hidden);
        let out_w = combiner_spec.output_width();
        let head = if ctr {
            TaskHead::Ctr(store.add("head.w", init::xavier(&mut rng, out_w, 1)))
        } else {
            TaskHead::Retrieval(RetrievalHead::new(
                &mut store,
                "head",
                out_w,
                cfg.embed_width,
                &mut rng,
            ))
        };
        let mut dice = bank.dice_states();
        dice.extend(combiner.dice_states());
        Stage1Model {
            store,
            tables,
            bank,
            combiner,
            combiner_spec,
            head,
            dice,
            schema,
            choices,
        }
    }

    /// Copy every shared weight from another structurally identical
    /// model (the inheritance step).
    pub fn inherit_from(&mut self, other: &Stage1Model) {
        self.store
            .load_named(&other.store.named_tensors())
            .expect("identical structure");
        self.dice = other.dice.clone();
    }

    /// Forward one batch through a single path: retrieval returns the
    /// projected user vector, CTR returns logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        taps: &mut DiceTaps,
        batch: &PaddedBatch,
        arch: &BlockArchitecture,
    ) -> Var {
        let h0 = embed_behavior(g, binder, &self.tables, batch);
        let target = embed_target(g, binder, &self.tables, batch);
        let mut ctx = crate::blocks::SeqCtx::new(g, batch, None);
        if matches!(self.head, TaskHead::Ctr(_)) {
            ctx.target = target;
        }
        let h = stack_forward(g, binder, &self.bank, arch, h0, &ctx, &self.dice, taps);
        let hb = compress(g, binder, &self.bank, h, &ctx, &self.dice, taps);
        let e_a = embed_non_seq(g, binder, &self.tables, batch);
        let x = assemble_input(g, &e_a, &[], Some(hb));
        let h_mlp = mlp_forward(
            g,
            binder,
            &self.combiner,
            &self.combiner_spec,
            x,
            &self.dice,
            taps,
        );
        match &self.head {
            TaskHead::Ctr(w) => {
                let w = binder.var(g, *w);
                let y = g.matmul(h_mlp, w);
                let b = g.value(y).shape()[0];
                g.reshape(y, vec![b])
            }
            TaskHead::Retrieval(head) => user_vector(g, binder, head, h_mlp),
        }
    }

    fn fair_sizes(&self) -> Vec<usize> {
        let per = [self.choices.len() + 1, NORMS.len(), BLOCK_ACTS.len()];
        (0..self.bank.depth()).flat_map(|_| per).collect()
    }

    /// Decode one FairSchedule draw into an architecture. The layer
    /// queue includes Zero as its last index.
    fn arch_from_draw(&self, draw: &[usize]) -> BlockArchitecture {
        BlockArchitecture(
            draw.chunks(3)
                .map(|c| {
                    if c[0] == self.choices.len() {
                        BlockSpec::zero()
                    } else {
                        BlockSpec {
                            layer: self.choices[c[0]],
                            norm: NORMS[c[1]],
                            act: BLOCK_ACTS[c[2]],
                        }
                    }
                })
                .collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// retrieval data plumbing

fn prefix_instance(prefix: &[u32], t: usize) -> Instance {
    let tail = &prefix[prefix.len().saturating_sub(t)..];
    Instance {
        non_seq: Vec::new(),
        behavior: tail.iter().map(|&i| vec![vec![i]]).collect(),
        target_item: None,
        label: Label::NextItem(0),
    }
}

/// One scored evaluation case: the target is candidate 0.
pub struct EvalExample {
    pub instance: Instance,
    pub candidates: Vec<u32>,
}

pub fn build_eval_set(
    pairs: &[(Vec<u32>, u32)],
    items: usize,
    n_neg: usize,
    t: usize,
    seed: u64,
    limit: usize,
) -> Vec<EvalExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .take(limit)
        .map(|(prefix, target)| {
            let mut exclude = prefix.clone();
            exclude.push(*target);
            let mut candidates = vec![*target];
            candidates.extend(sample_negatives(items, &exclude, n_neg, &mut rng));
            EvalExample {
                instance: prefix_instance(prefix, t),
                candidates,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub hr1: f64,
    pub hr5: f64,
    pub ndcg5: f64,
}

/// Score every example's candidate list with one architecture.
pub fn eval_retrieval(
    model: &Stage1Model,
    arch: &BlockArchitecture,
    examples: &[EvalExample],
    batch_size: usize,
) -> RankMetrics {
    let table = match &model.head {
        TaskHead::Retrieval(_) => model.store.get(model.tables.item_table()),
        TaskHead::Ctr(_) => panic!("retrieval eval on a CTR model"),
    };
    let k = model.tables.width;
    let (mut hr1, mut hr5, mut ndcg5) = (0.0, 0.0, 0.0);
    for chunk in examples.chunks(batch_size) {
        let rows: Vec<Instance> = chunk.iter().map(|e| e.instance.clone()).collect();
        let batch = PaddedBatch::new(&model.schema, &rows);
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.store);
        let mut taps = DiceTaps::new();
        let user = model.forward(&mut g, &mut binder, &mut taps, &batch, arch);
        let uv = g.value(user);
        for (bi, ex) in chunk.iter().enumerate() {
            let u = &uv.data()[bi * k..(bi + 1) * k];
            let scores: Vec<f64> = ex
                .candidates
                .iter()
                .map(|&c| {
                    let row = &table.data()[c as usize * k..(c as usize + 1) * k];
                    u.iter().zip(row).map(|(a, b)| a * b).sum()
                })
                .collect();
            let rank = rank_of_target(&scores, 0);
            hr1 += hr_at_k(rank, 1);
            hr5 += hr_at_k(rank, 5);
            ndcg5 += ndcg_at_k(rank, 5);
        }
    }
    let n = examples.len() as f64;
    RankMetrics { hr1: hr1 / n, hr5: hr5 / n, ndcg5: ndcg5 / n }
}

/// Rank candidates by training-set frequency; the reference floor for
/// sequence models.
pub fn popularity_baseline(train: &[Vec<u32>], items: usize, examples: &[EvalExample]) -> RankMetrics {
    let mut counts = vec![0.0f64; items];
    for seq in train {
        for &i in seq {
            counts[i as usize] += 1.0;
        }
    }
    let (mut hr1, mut hr5, mut ndcg5) = (0.0, 0.0, 0.0);
    for ex in examples {
        let scores: Vec<f64> = ex.candidates.iter().map(|&c| counts[c as usize]).collect();
        let rank = rank_of_target(&scores, 0);
        hr1 += hr_at_k(rank, 1);
        hr5 += hr_at_k(rank, 5);
        ndcg5 += ndcg_at_k(rank, 5);
    }
    let n = examples.len() as f64;
    RankMetrics { hr1: hr1 / n, hr5: hr5 / n, ndcg5: ndcg5 / n }
}

// ---------------------------------------------------------------------------
// stage-1 data and training

pub enum Stage1Data<'a> {
    Retrieval { split: &'a LooSplit, items: usize },
    Ctr { train: &'a [Instance], val: &'a [Instance] },
}

struct RetrievalBatch {
    batch: PaddedBatch,
    targets: Vec<u32>,
    negatives: Vec<u32>,
}

fn sample_retrieval_batch(
    split: &LooSplit,
    items: usize,
    schema: &DatasetSchema,
    cfg: &Stage1Config,
    rng: &mut ChaCha8Rng,
) -> RetrievalBatch {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut negatives = Vec::new();
    while rows.len() < cfg.batch_users {
        let seq = &split.train[rng.gen_range(0..split.train.len())];
        if seq.len() < 2 {
            continue;
        }
        let clip = rng.gen_range(1..seq.len());
        let upper = (clip + cfg.positives_per_user).min(seq.len());
        for &pos in &seq[clip..upper] {
            rows.push(prefix_instance(&seq[..clip], cfg.model_seq_len));
            targets.push(pos);
            negatives.push(sample_negatives(items, seq, 1, rng)[0]);
        }
    }
    RetrievalBatch {
        batch: PaddedBatch::new(schema, &rows),
        targets,
        negatives,
    }
}

/// One optimizer update: every sampled path sees the same minibatch,
/// path gradients are summed, then Adam steps once.
fn train_update(
    model: &mut Stage1Model,
    adam: &mut Adam,
    archs: &[BlockArchitecture],
    data: &Stage1Data,
    cfg: &Stage1Config,
    ctr_cursor: &mut usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let retrieval_batch = match data {
        Stage1Data::Retrieval { split, items } => {
            Some(sample_retrieval_batch(split, *items, &model.schema, cfg, rng))
        }
        Stage1Data::Ctr { .. } => None,
    };
    let ctr_batch = match data {
        Stage1Data::Ctr { train, .. } => {
            let lo = (*ctr_cursor * cfg.batch_users) % train.len();
            let hi = (lo + cfg.batch_users).min(train.len());
            *ctr_cursor += 1;
            Some(PaddedBatch::new(&model.schema, &train[lo..hi]))
        }
        Stage1Data::Retrieval { .. } => None,
    };
    let mut merged: Vec<(ParamId, Tensor)> = Vec::new();
    let mut total_loss = 0.0;
    for arch in archs {
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.store);
        let mut taps = DiceTaps::new();
        let loss = match (&retrieval_batch, &ctr_batch) {
            (Some(rb), _) => {
                let user = model.forward(&mut g, &mut binder, &mut taps, &rb.batch, arch);
                loss_nextitem(
                    &mut g,
                    &mut binder,
                    user,
                    model.tables.item_table(),
                    &rb.targets,
                    &[rb.negatives.clone()],
                )
            }
            (_, Some(batch)) => {
                let logits = model.forward(&mut g, &mut binder, &mut taps, batch, arch);
                loss_ctr(&mut g, logits, &batch.click_labels())
            }
            _ => unreachable!(),
        };
        let lv = g.value(loss).item();
        assert!(lv.is_finite(), "non-finite one-shot loss");
        total_loss += lv;
        let grads = g.backward(loss);
        for (id, t) in binder.grads(&g, &grads) {
            match merged.iter_mut().find(|(m, _)| *m == id) {
                Some((_, acc)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                None => merged.push((id, t)),
            }
        }
        absorb_taps(&g, &taps, &mut model.dice);
    }
    adam.step(&mut model.store, &merged);
    total_loss / archs.len() as f64
}

fn eval_ctr_auc(model: &Stage1Model, arch: &BlockArchitecture, val: &[Instance], batch: usize) -> f64 {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for rows in val.chunks(batch) {
        let pb = PaddedBatch::new(&model.schema, rows);
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.store);
        let mut taps = DiceTaps::new();
        let logits = model.forward(&mut g, &mut binder, &mut taps, &pb, arch);
        scores.extend_from_slice(g.value(logits).data());
        labels.extend(pb.click_labels());
    }
    auc(&scores, &labels)
}

fn stage1_fitness(
    model: &Stage1Model,
    arch: &BlockArchitecture,
    data: &Stage1Data,
    val_examples: &[EvalExample],
    cfg: &Stage1Config,
) -> f64 {
    match data {
        Stage1Data::Retrieval { .. } => {
            eval_retrieval(model, arch, val_examples, cfg.batch_users).ndcg5
        }
        Stage1Data::Ctr { val, .. } => {
            let n = (cfg.val_users).min(val.len());
            eval_ctr_auc(model, arch, &val[..n], cfg.batch_users)
        }
    }
}

/// Fair one-shot training of the block supernet. Returns the per-epoch
/// validation fitness of a fixed probe set of architectures.
pub fn train_oneshot_stage1(
    model: &mut Stage1Model,
    data: &Stage1Data,
    cfg: &Stage1Config,
    seed: u64,
) -> Vec<f64> {
    let mut adam = Adam::new(cfg.lr);
    let mut sched = FairSchedule::new(&model.fair_sizes(), ChaCha8Rng::seed_from_u64(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let probes: Vec<BlockArchitecture> = (0..4)
        .map(|_| sample_architecture(&mut probe_rng, model.bank.depth(), &model.choices))
        .collect();
    let val_examples = match data {
        Stage1Data::Retrieval { split, items } => build_eval_set(
            &split.val,
            *items,
            cfg.eval_negatives,
            cfg.model_seq_len,
            seed.wrapping_add(3),
            cfg.val_users,
        ),
        Stage1Data::Ctr { .. } => Vec::new(),
    };
    let mut curve = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut ctr_cursor = 0usize;
    assert!(cfg.paths_per_update >= 1, "need at least one path per update");
    for _epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let archs: Vec<BlockArchitecture> = (0..cfg.paths_per_update)
                .map(|_| model.arch_from_draw(&sched.next()))
                .collect();
            train_update(model, &mut adam, &archs, data, cfg, &mut ctr_cursor, &mut rng);
        }
        let fitness = probes
            .iter()
            .map(|a| stage1_fitness(model, a, data, &val_examples, cfg))
            .sum::<f64>()
            / probes.len() as f64;
        curve.push(fitness);
        if fitness > best {
            best = fitness;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    curve
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateResult {
    pub arch: BlockArchitecture,
    pub fitness: f64,
    pub rank: usize,
}

/// Sample-and-score with inherited weights; exhaustive when the space
/// is smaller than the sampling budget.
pub fn random_search_blocks(
    model: &Stage1Model,
    data: &Stage1Data,
    cfg: &Stage1Config,
    seed: u64,
) -> Vec<CandidateResult> {
    let space = composite_space_size(model.bank.depth(), model.choices.len());
    let mut archs: Vec<BlockArchitecture> = Vec::new();
    if space <= cfg.num_samples as u128 {
        archs = enumerate_architectures(model.bank.depth(), &model.choices);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut attempts = 0;
        while archs.len() < cfg.num_samples && attempts < cfg.num_samples * 20 {
            let a = sample_architecture(&mut rng, model.bank.depth(), &model.choices);
            attempts += 1;
            if !archs.contains(&a) {
                archs.push(a);
            }
        }
    }
    let val_examples = match data {
        Stage1Data::Retrieval { split, items } => build_eval_set(
            &split.val,
            *items,
            cfg.eval_negatives,
            cfg.model_seq_len,
            seed.wrapping_add(3),
            cfg.val_users,
        ),
        Stage1Data::Ctr { .. } => Vec::new(),
    };
    let fitness: Vec<f64> = archs
        .par_iter()
        .map(|a| stage1_fitness(model, a, data, &val_examples, cfg))
        .collect();
    let mut ranked: Vec<CandidateResult> = archs
        .into_iter()
        .zip(fitness)
        .map(|(arch, fitness)| CandidateResult { arch, fitness, rank: 0 })
        .collect();
    ranked.sort_by(|a, b| b.fitness.partial_cmp(&a.fitness).unwrap());
    ranked.truncate(cfg.top_n);
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    ranked
}

/// Inherit the supernet weights into a child and train only its path.
pub fn finetune_blocks(
    supernet: &Stage1Model,
    arch: &BlockArchitecture,
    data: &Stage1Data,
    cfg: &Stage1Config,
    seed: u64,
) -> Stage1Model {
    let mut child = supernet.clone();
    train_fixed_arch(&mut child, arch, data, cfg, cfg.finetune_epochs, cfg.finetune_lr, seed);
    child
}

/// Ordinary single-architecture training (also used for standalone
/// reference models trained from scratch).
pub fn train_fixed_arch(
    model: &mut Stage1Model,
    arch: &BlockArchitecture,
    data: &Stage1Data,
    cfg: &Stage1Config,
    epochs: usize,
    lr: f64,
    seed: u64,
) {
    let mut adam = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctr_cursor = 0usize;
    let archs = std::slice::from_ref(arch);
    for _ in 0..epochs {
        for _ in 0..cfg.steps_per_epoch {
            train_update(model, &mut adam, archs, data, cfg, &mut ctr_cursor, &mut rng);
        }
    }
}

// ---------------------------------------------------------------------------
// stage-3 model: interactions + SE + width-searchable MLP

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub depth: usize,
    pub embed_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub num_samples: usize,
    pub top_n: usize,
    pub val_batches: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Model behavior with the step-1 winning block stack instead of
    /// the default target-attention pooling over raw embeddings.
    pub use_block_winner: bool,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            depth: 3,
            embed_width: 8,
            epochs: 2,
            batch_size: 256,
            lr: 1e-3,
            num_samples: 2000,
            top_n: 5,
            val_batches: 20,
            finetune_epochs: 1,
            finetune_lr: 1e-4,
            use_block_winner: false,
        }
    }
}

/// CTR head with separately sliced parts so the searched MLP width can
/// vary while the SE segment keeps its own weights.
#[derive(Clone)]
pub struct SlicedCtrHead {
    pub w_mlp: ParamId,
    pub w_se: ParamId,
}

/// How the stage-3 model turns behavior into a fixed-length vector.
#[derive(Clone)]
pub enum SeqPath {
    /// Target-attention pooling over raw behavior embeddings (the
    /// default, which decouples step 3 from step 1).
    AttnPool(TargetScorer),
    /// The step-1 winning block stack, rebuilt over its own layer set.
    Blocks {
        bank: SupernetBank,
        arch: BlockArchitecture,
    },
}

/// Stage-3 one-shot model for CTR: raw fields plus the discovered
/// interactions feed a width-searchable MLP; the SE path gates the same
/// rows; behavior (when present) enters through the configured
/// sequence path.
#[derive(Clone)]
pub struct Stage3Model {
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub interactions: Vec<Interaction>,
    pub se: crate::head::SeParams,
    pub mlp: MlpBank,
    pub head: SlicedCtrHead,
    pub seq: Option<SeqPath>,
    pub dice: Vec<DiceState>,
    pub schema: DatasetSchema,
    pub k0: usize,
}

impl Stage3Model {
    pub fn new(
        schema: &DatasetSchema,
        interactions: &[Interaction],
        block_winner: Option<&BlockArchitecture>,
        cfg: &Stage3Config,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, schema, cfg.embed_width, &mut rng);
        let n = schema.num_non_seq();
        let m = interactions.len();
        let k = cfg.embed_width;
        let d = schema.num_behavior() * k;
        let seq = if !schema.has_behavior() {
            None
        } else if let Some(arch) = block_winner {
            let mut choices: Vec<LayerChoice> = Vec::new();
            for spec in &arch.0 {
                if !spec.is_zero() && !choices.contains(&spec.layer) {
                    choices.push(spec.layer);
                }
            }
            let bank =
                SupernetBank::with_choices(&mut store, "blocks", arch.0.len(), d, &choices, true, &mut rng);
            Some(SeqPath::Blocks { bank, arch: arch.clone() })
        } else {
            Some(SeqPath::AttnPool(TargetScorer {
                proj: store.add("pool.proj", init::xavier(&mut rng, d, d)),
                w1: store.add("pool.w1", init::xavier(&mut rng, 3 * d, SCORE_HIDDEN)),
                b1: store.add("pool.b1", Tensor::zeros(&[SCORE_HIDDEN])),
                alpha: store.add("pool.alpha", Tensor::zeros(&[SCORE_HIDDEN])),
                w2: store.add("pool.w2", init::xavier(&mut rng, SCORE_HIDDEN, 1)),
                b2: store.add("pool.b2", Tensor::zeros(&[1])),
                dice_slot: 0,
            }))
        };
        let h_b_width = match &seq {
            None => 0,
            Some(SeqPath::AttnPool(_)) => d,
            Some(SeqPath::Blocks { .. }) => compress_width(d, true),
        };
        let dice_base = usize::from(seq.is_some());
        let k0 = (n + m) * k + h_b_width;
        let se = crate::head::SeParams::new(&mut store, "se", n + m, k, &mut rng);
        let mlp = MlpBank::new(&mut store, "mlp", k0, cfg.depth, dice_base, &mut rng);
        let head = SlicedCtrHead {
            w_mlp: store.add("head.w_mlp", init::xavier(&mut rng, k0, 1)),
            w_se: store.add("head.w_se", init::xavier(&mut rng, k, 1)),
        };
        let mut dice: Vec<DiceState> = Vec::new();
        if seq.is_some() {
            dice.push(DiceState::new(SCORE_HIDDEN));
        }
        dice.extend(mlp.dice_states());
        Stage3Model {
            store,
            tables,
            interactions: interactions.to_vec(),
            se,
            mlp,
            head,
            seq,
            dice,
            schema: schema.clone(),
            k0,
        }
    }

    pub fn inherit_from(&mut self, other: &Stage3Model) {
        self.store
            .load_named(&other.store.named_tensors())
            .expect("identical structure");
        self.dice = other.dice.clone();
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        taps: &mut DiceTaps,
        batch: &PaddedBatch,
        spec: &MlpSpec,
    ) -> Var {
        let e_a = embed_non_seq(g, binder, &self.tables, batch);
        let p_a: Vec<Var> = self
            .interactions
            .iter()
            .map(|i| hadamard(g, &e_a, i))
            .collect();
        let h_b = self.seq.as_ref().map(|seq| {
            let h0 = embed_behavior(g, binder, &self.tables, batch);
            let target = embed_target(g, binder, &self.tables, batch)
                .expect("CTR behavior modeling needs a target item");
            let ctx = crate::blocks::SeqCtx::new(g, batch, Some(target));
            match seq {
                SeqPath::AttnPool(scorer) => {
                    let scores = crate::blocks::target_scores(
                        g, binder, scorer, &self.dice, taps, h0, target, &ctx,
                    );
                    let weighted = g.scale_rows(h0, scores);
                    g.sum_axis(weighted, 1)
                }
                SeqPath::Blocks { bank, arch } => {
                    let h = stack_forward(g, binder, bank, arch, h0, &ctx, &self.dice, taps);
                    compress(g, binder, bank, h, &ctx, &self.dice, taps)
                }
            }
        });
        let x = assemble_input(g, &e_a, &p_a, h_b);
        let h_mlp = mlp_forward(g, binder, &self.mlp, spec, x, &self.dice, taps);
        // SE path over the stacked embedding + interaction rows
        let k = self.tables.width;
        let b = batch.batch;
        let rows: Vec<Var> = e_a
            .iter()
            .chain(&p_a)
            .map(|&v| g.reshape(v, vec![b, 1, k]))
            .collect();
        let q = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 1) };
        let h_se = crate::head::se_compress(g, binder, &self.se, q);
        // sliced head: leading rows of w_mlp match the spec's output width
        let w_mlp_full = binder.var(g, self.head.w_mlp);
        let w_mlp = g.narrow(w_mlp_full, 0, 0, spec.output_width());
        let y_mlp = g.matmul(h_mlp, w_mlp);
        let w_se = binder.var(g, self.head.w_se);
        let y_se = g.matmul(h_se, w_se);
        let y = g.add(y_mlp, y_se);
        g.reshape(y, vec![b])
    }
}

/// Fair draw over (width fraction, activation) per layer, clamped to
/// keep widths non-increasing.
fn spec_from_draw(draw: &[usize], k0: usize) -> MlpSpec {
    let mut layers = Vec::with_capacity(draw.len() / 2);
    let mut cap = WIDTH_FRACTIONS.len() - 1;
    for c in draw.chunks(2) {
        let pick = c[0].min(cap);
        cap = pick;
        layers.push(crate::head::MlpLayerSpec {
            width_fraction: WIDTH_FRACTIONS[pick],
            act: MLP_ACTS[c[1]],
        });
    }
    MlpSpec { input_width: k0, layers }
}

fn stage3_train_epoch(
    model: &mut Stage3Model,
    adam: &mut Adam,
    train: &[Instance],
    cfg: &Stage3Config,
    sched: &mut FairSchedule,
    rng: &mut ChaCha8Rng,
    fixed: Option<&MlpSpec>,
) {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(cfg.batch_size) {
        let rows: Vec<Instance> = chunk.iter().map(|&i| train[i].clone()).collect();
        let batch = PaddedBatch::new(&model.schema, &rows);
        let spec = match fixed {
            Some(s) => s.clone(),
            None => spec_from_draw(&sched.next(), model.k0),
        };
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.store);
        let mut taps = DiceTaps::new();
        let logits = model.forward(&mut g, &mut binder, &mut taps, &batch, &spec);
        let loss = loss_ctr(&mut g, logits, &batch.click_labels());
        assert!(g.value(loss).item().is_finite(), "non-finite stage-3 loss");
        let grads = g.backward(loss);
        let grads = binder.grads(&g, &grads);
        adam.step(&mut model.store, &grads);
        absorb_taps(&g, &taps, &mut model.dice);
    }
}

pub fn eval_stage3_auc(
    model: &Stage3Model,
    spec: &MlpSpec,
    val: &[Instance],
    cfg: &Stage3Config,
) -> f64 {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for rows in val.chunks(cfg.batch_size).take(cfg.val_batches) {
        let batch = PaddedBatch::new(&model.schema, rows);
        let mut g = Graph::new();
        let mut binder = Binder::new(&model.store);
        let mut taps = DiceTaps::new();
        let logits = model.forward(&mut g, &mut binder, &mut taps, &batch, spec);
        scores.extend_from_slice(g.value(logits).data());
        labels.extend(batch.click_labels());
    }
    auc(&scores, &labels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCandidateResult {
    pub spec: MlpSpec,
    pub fitness: f64,
    pub rank: usize,
}

pub fn train_oneshot_stage3(
    model: &mut Stage3Model,
    train: &[Instance],
    cfg: &Stage3Config,
    seed: u64,
) {
    let mut adam = Adam::new(cfg.lr);
    let sizes: Vec<usize> = (0..cfg.depth)
        .flat_map(|_| [WIDTH_FRACTIONS.len(), MLP_ACTS.len()])
        .collect();
    let mut sched = FairSchedule::new(&sizes, ChaCha8Rng::seed_from_u64(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for _ in 0..cfg.epochs {
        stage3_train_epoch(model, &mut adam, train, cfg, &mut sched, &mut rng, None);
    }
}

pub fn random_search_mlp(
    model: &Stage3Model,
    val: &[Instance],
    cfg: &Stage3Config,
    seed: u64,
) -> Vec<MlpCandidateResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs: Vec<MlpSpec> = Vec::new();
    let mut attempts = 0;
    while specs.len() < cfg.num_samples && attempts < cfg.num_samples * 20 {
        let s = MlpSpec::sample(&mut rng, model.k0, cfg.depth);
        attempts += 1;
        if !specs.contains(&s) {
            specs.push(s);
        }
    }
    let fitness: Vec<f64> = specs
        .par_iter()
        .map(|s| eval_stage3_auc(model, s, val, cfg))
        .collect();
    let mut ranked: Vec<MlpCandidateResult> = specs
        .into_iter()
        .zip(fitness)
        .map(|(spec, fitness)| MlpCandidateResult { spec, fitness, rank: 0 })
        .collect();
    ranked.sort_by(|a, b| b.fitness.partial_cmp(&a.fitness).unwrap());
    ranked.truncate(cfg.top_n);
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    ranked
}

pub fn finetune_mlp(
    supernet: &Stage3Model,
    spec: &MlpSpec,
    train: &[Instance],
    cfg: &Stage3Config,
    seed: u64,
) -> Stage3Model {
    let mut child = supernet.clone();
    let mut adam = Adam::new(cfg.finetune_lr);
    let mut sched = FairSchedule::new(&[1], ChaCha8Rng::seed_from_u64(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for _ in 0..cfg.finetune_epochs {
        stage3_train_epoch(&mut child, &mut adam, train, cfg, &mut sched, &mut rng, Some(spec));
    }
    child
}

// ---------------------------------------------------------------------------
// full pipeline

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stage1: Stage1Config,
    pub explore: ExploreConfig,
    pub stage3: Stage3Config,
    /// Minimum user/item feedback kept by the protocol split.
    pub min_feedback: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            stage1: Stage1Config::default(),
            explore: ExploreConfig::default(),
            stage3: Stage3Config::default(),
            min_feedback: 5,
        }
    }
}

/// Checkpoint entries carrying dice running statistics, which live
/// beside the trainable weights but outside the parameter store.
pub const DICE_STATE_PREFIX: &str = "__dice.";

/// Full model state as named tensors: parameters plus dice statistics.
pub fn export_model_state(store: &ParamStore, dice: &[DiceState]) -> Vec<(String, Tensor)> {
    let mut out = store.named_tensors();
    for (i, d) in dice.iter().enumerate() {
        out.push((
            format!("{DICE_STATE_PREFIX}{i}.mean"),
            Tensor::vector(d.mean().to_vec()),
        ));
        out.push((
            format!("{DICE_STATE_PREFIX}{i}.var"),
            Tensor::vector(d.var().to_vec()),
        ));
    }
    out
}

/// Restore state exported by [`export_model_state`] into a structurally
/// identical model.
pub fn import_model_state(
    store: &mut ParamStore,
    dice: &mut [DiceState],
    tensors: &[(String, Tensor)],
) -> Result<(), RecError> {
    let (stats, weights): (Vec<_>, Vec<_>) = tensors
        .iter()
        .cloned()
        .partition(|(n, _)| n.starts_with(DICE_STATE_PREFIX));
    store.load_named(&weights)?;
    for (name, t) in stats {
        let rest = &name[DICE_STATE_PREFIX.len()..];
        let (idx, kind) = rest
            .split_once('.')
            .ok_or_else(|| RecError::Config(format!("malformed dice entry {name}")))?;
        let i: usize = idx
            .parse()
            .map_err(|_| RecError::Config(format!("malformed dice entry {name}")))?;
        if i >= dice.len() {
            return Err(RecError::Config(format!("dice slot {i} out of range")));
        }
        match kind {
            "mean" => {
                let var = dice[i].var().to_vec();
                dice[i].load(t.data(), &var);
            }
            "var" => {
                let mean = dice[i].mean().to_vec();
                dice[i].load(&mean, t.data());
            }
            _ => return Err(RecError::Config(format!("malformed dice entry {name}"))),
        }
    }
    Ok(())
}

/// Resolved step switches; a step still needs schema support to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepsEnabled {
    pub blocks: bool,
    pub interactions: bool,
    pub mlp: bool,
}

impl Default for StepsEnabled {
    fn default() -> Self {
        StepsEnabled { blocks: true, interactions: true, mlp: true }
    }
}

pub enum PipelineData {
    Retrieval { sequences: Vec<Vec<u32>> },
    Ctr {
        train: Vec<Instance>,
        val: Vec<Instance>,
        test: Vec<Instance>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub block_winner: Option<BlockArchitecture>,
    pub block_curve: Vec<f64>,
    pub block_candidates: Vec<CandidateResult>,
    pub interactions: Vec<Interaction>,
    pub interaction_history: Option<EvolveOutcome>,
    pub mlp_winner: Option<MlpSpec>,
    pub mlp_candidates: Vec<MlpCandidateResult>,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

/// The three-step search. Step 1 runs when behavior fields exist, step
/// 2 when at least two non-sequential fields exist, step 3 for CTR
/// tasks (retrieval stops after the behavior search). Also returns the
/// named parameter stores of the fine-tuned final models, for
/// checkpointing.
pub fn run_pipeline(
    schema: &DatasetSchema,
    data: &PipelineData,
    cfg: &PipelineConfig,
    steps: StepsEnabled,
) -> Result<(PipelineOutcome, Vec<(String, Vec<(String, Tensor)>)>), RecError> {
    let mut out = PipelineOutcome::default();
    let mut stores: Vec<(String, Vec<(String, Tensor)>)> = Vec::new();
    match data {
        PipelineData::Retrieval { sequences } => {
            let split = leave_one_out_split(sequences, cfg.min_feedback);
            if split.train.is_empty() {
                return Err(RecError::Config("no users survive the protocol filter".into()));
            }
            let items = schema.item_field().map(|f| f.cardinality).ok_or_else(|| {
                RecError::Config("retrieval task needs a behavior item field".into())
            })?;
            let data = Stage1Data::Retrieval { split: &split, items };
            let mut model = Stage1Model::new(schema, &cfg.stage1, false, cfg.seed);
            out.block_curve = train_oneshot_stage1(&mut model, &data, &cfg.stage1, cfg.seed);
            out.block_candidates =
                random_search_blocks(&model, &data, &cfg.stage1, cfg.seed.wrapping_add(10));
            let winner = out.block_candidates[0].arch.clone();
            let child =
                finetune_blocks(&model, &winner, &data, &cfg.stage1, cfg.seed.wrapping_add(20));
            let test_examples = build_eval_set(
                &split.test,
                items,
                cfg.stage1.eval_negatives,
                cfg.stage1.model_seq_len,
                cfg.seed.wrapping_add(30),
                usize::MAX,
            );
            let m = eval_retrieval(&child, &winner, &test_examples, cfg.stage1.batch_users);
            let pop = popularity_baseline(&split.train, items, &test_examples);
            out.metrics.insert("test_hr1".into(), m.hr1);
            out.metrics.insert("test_hr5".into(), m.hr5);
            out.metrics.insert("test_ndcg5".into(), m.ndcg5);
            out.metrics.insert("popularity_hr1".into(), pop.hr1);
            out.block_winner = Some(winner);
            stores.push(("final_model".into(), export_model_state(&child.store, &child.dice)));
        }
        PipelineData::Ctr { train, val, test } => {
            if steps.blocks && schema.has_behavior() {
                let data = Stage1Data::Ctr { train, val };
                let mut model = Stage1Model::new(schema, &cfg.stage1, true, cfg.seed);
                out.block_curve = train_oneshot_stage1(&mut model, &data, &cfg.stage1, cfg.seed);
                out.block_candidates =
                    random_search_blocks(&model, &data, &cfg.stage1, cfg.seed.wrapping_add(10));
                out.block_winner = Some(out.block_candidates[0].arch.clone());
            }
            if steps.interactions && schema.num_non_seq() >= 2 {
                let mut ecfg = cfg.explore.clone();
                ecfg.seed = cfg.seed.wrapping_add(40);
                let (_explorer, outcome) = evolve(schema, train, val, &ecfg)?;
                out.interactions = outcome.final_interactions.clone();
                out.interaction_history = Some(outcome);
            }
            if !steps.mlp || schema.num_non_seq() == 0 {
                return Ok((out, stores));
            }
            let block_winner = cfg
                .stage3
                .use_block_winner
                .then_some(out.block_winner.as_ref())
                .flatten();
            let mut model = Stage3Model::new(
                schema,
                &out.interactions,
                block_winner,
                &cfg.stage3,
                cfg.seed.wrapping_add(50),
            );
            train_oneshot_stage3(&mut model, train, &cfg.stage3, cfg.seed.wrapping_add(51));
            out.mlp_candidates =
                random_search_mlp(&model, val, &cfg.stage3, cfg.seed.wrapping_add(52));
            let winner = out.mlp_candidates[0].spec.clone();
            let child =
                finetune_mlp(&model, &winner, train, &cfg.stage3, cfg.seed.wrapping_add(53));
            let test_cfg = Stage3Config { val_batches: usize::MAX, ..cfg.stage3.clone() };
            let test_auc = eval_stage3_auc(&child, &winner, test, &test_cfg);
            out.metrics.insert("test_auc".into(), test_auc);
            out.mlp_winner = Some(winner);
            stores.push(("final_model".into(), export_model_state(&child.store, &child.dice)));
        }
    }
    Ok((out, stores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_matches_enumeration_for_reduced_sets() {
        let reduced = vec![
            LayerChoice::Conv { k: 1 },
            LayerChoice::AvgPool,
            LayerChoice::SelfAttn { heads: 2 },
        ];
        for l_b in 1..=2 {
            let archs = enumerate_architectures(l_b, &reduced);
            assert_eq!(archs.len() as u128, composite_space_size(l_b, reduced.len()));
            // no duplicates
            let set: std::collections::HashSet<_> = archs.iter().collect();
            assert_eq!(set.len(), archs.len());
        }
        let full = nonzero_layer_choices(true);
        assert_eq!(
            composite_space_size(2, full.len()),
            crate::blocks::search_space_size(2, true)
        );
    }

    #[test]
    fn sampled_architectures_stay_in_the_space() {
        let choices = nonzero_layer_choices(false);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut saw_zero = false;
        for _ in 0..200 {
            let a = sample_architecture(&mut rng, 3, &choices);
            a.validate(false).unwrap();
            assert_eq!(a.0.len(), 3);
            saw_zero |= a.0.iter().any(|s| s.is_zero());
        }
        assert!(saw_zero, "zero must be reachable");
    }

    #[test]
    fn monotone_clamp_on_fair_draws() {
        // widths drawn high-then-low must clamp, acts pass through
        let spec = spec_from_draw(&[9, 0, 4, 1, 6, 2], 10);
        let w = spec.widths();
        assert_eq!(w, vec![10, 5, 5]);
        spec.validate().unwrap();
    }

    #[test]
    fn clipped_prefix_keeps_most_recent_items() {
        let inst = prefix_instance(&[1, 2, 3, 4, 5, 6], 4);
        let seq: Vec<u32> = inst.behavior.iter().map(|e| e[0][0]).collect();
        assert_eq!(seq, vec![3, 4, 5, 6]);
    }
}
