//! Hadamard feature interactions over non-sequential fields and the
//! beam-evolution loop that discovers them.
//!
//! The shared scoring model exploits that a linear projection of a
//! concatenation equals the sum of per-segment projections: the first
//! hidden layer is W_e over the concatenated field embeddings plus
//! W_p(i) over the single sampled interaction, so one set of MLP and
//! embedding weights serves every candidate.

use crate::embed::{embed_non_seq, EmbeddingTables, PaddedBatch};
use crate::fairness::FairQueue;
use crate::head::loss_ctr;
use crate::metrics::auc;
use crate::schema::{DatasetSchema, Instance};
use crate::RecError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensor::graph::Var;
use tensor::{init, Adam, Binder, Graph, ParamId, ParamStore, Tensor};

/// A sorted set of distinct non-sequential field indices. The Hadamard
/// product is commutative, so the sorted form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Interaction(Vec<usize>);

impl Interaction {
    pub fn new(mut fields: Vec<usize>) -> Self {
        fields.sort_unstable();
        fields.dedup();
        assert!(!fields.is_empty(), "interaction needs at least one field");
        Interaction(fields)
    }

    pub fn fields(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, field: usize) -> bool {
        self.0.binary_search(&field).is_ok()
    }

    pub fn with_field(&self, field: usize) -> Self {
        let mut f = self.0.clone();
        f.push(field);
        Interaction::new(f)
    }

    /// Stable key for parameter naming.
    pub fn key(&self) -> String {
        self.0
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Elementwise product of the named field embeddings; order 1 returns
/// the raw field embedding.
pub fn hadamard(g: &mut Graph, e_fields: &[Var], interaction: &Interaction) -> Var {
    let mut it = interaction.fields().iter();
    let first = *it.next().expect("non-empty interaction");
    let mut p = e_fields[first];
    for &f in it {
        p = g.mul(p, e_fields[f]);
    }
    p
}

/// Cross every survivor with every field not already in it; the pool
/// keeps the survivors themselves (they compete with their expansions)
/// and is de-duplicated in first-seen order.
pub fn expand_beam(survivors: &[Interaction], num_fields: usize) -> Vec<Interaction> {
    let mut pool: Vec<Interaction> = Vec::new();
    let mut push = |i: Interaction| {
        if !pool.contains(&i) {
            pool.push(i);
        }
    };
    for s in survivors {
        push(s.clone());
    }
    for s in survivors {
        for f in 0..num_fields {
            if !s.contains(f) {
                push(s.with_field(f));
            }
        }
    }
    pool
}

/// Shared scoring model: base projection over concatenated fields, one
/// first-layer projection per candidate, and an optional ReLU tower.
/// With no tower the first-layer sum is the logit, so the base path is
/// a generalized linear model over the field embeddings.
pub struct InteractionSupernet {
    pub we: ParamId,
    pub b0: ParamId,
    /// Candidate projections in creation order.
    pub wp: Vec<(Interaction, ParamId)>,
    pub tower: Vec<(ParamId, ParamId)>,
    /// `None` for the linear scoring model (`hidden: []`), where the
    /// first-layer sum is the logit itself.
    pub head: Option<ParamId>,
    pub embed_width: usize,
    pub hidden0: usize,
}

impl InteractionSupernet {
    pub fn new(
        store: &mut ParamStore,
        num_fields: usize,
        embed_width: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // An empty tower makes the base path additive in the field
        // embeddings, so it cannot absorb interaction signal and every
        // candidate is scored purely by its own marginal lift.
        let h0 = hidden.first().copied().unwrap_or(1);
        let we = store.add("inter.we", init::xavier(rng, num_fields * embed_width, h0));
        let b0 = store.add("inter.b0", Tensor::zeros(&[h0]));
        let mut tower = Vec::new();
        let mut prev = h0;
        for (l, &h) in hidden.iter().enumerate().skip(1) {
            tower.push((
                store.add(format!("inter.t{l}.w"), init::xavier(rng, prev, h)),
                store.add(format!("inter.t{l}.b"), Tensor::zeros(&[h])),
            ));
            prev = h;
        }
        let head = (!hidden.is_empty())
            .then(|| store.add("inter.head", init::xavier(rng, prev, 1)));
        InteractionSupernet {
            we,
            b0,
            wp: Vec::new(),
            tower,
            head,
            embed_width,
            hidden0: h0,
        }
    }

    /// Create projections for candidates that do not have one yet;
    /// surviving candidates keep their trained projection.
    pub fn ensure_projections(
        &mut self,
        store: &mut ParamStore,
        candidates: &[Interaction],
        rng: &mut ChaCha8Rng,
    ) {
        for c in candidates {
            if !self.wp.iter().any(|(i, _)| i == c) {
                let id = store.add(
                    format!("inter.wp.{}", c.key()),
                    init::xavier(rng, self.embed_width, self.hidden0),
                );
                self.wp.push((c.clone(), id));
            }
        }
    }

    pub fn projection(&self, c: &Interaction) -> ParamId {
        self.wp
            .iter()
            .find(|(i, _)| i == c)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("no projection for {c:?}"))
    }

    /// Logits for a batch with the single candidate `c` active.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        e_fields: &[Var],
        c: &Interaction,
    ) -> Var {
        let e_cat = if e_fields.len() == 1 {
            e_fields[0]
        } else {
            g.concat(e_fields, 1)
        };
        let we = binder.var(g, self.we);
        let base = g.matmul(e_cat, we);
        let p = hadamard(g, e_fields, c);
        let wp = binder.var(g, self.projection(c));
        let proj = g.matmul(p, wp);
        let b0 = binder.var(g, self.b0);
        let summed = g.add(base, proj);
        let pre = g.add_rows(summed, b0);
        let y = match self.head {
            None => pre,
            Some(head) => {
                let mut h = g.relu(pre);
                for &(w, b) in &self.tower {
                    let w = binder.var(g, w);
                    let b = binder.var(g, b);
                    let y = g.linear(h, w, b);
                    h = g.relu(y);
                }
                let head = binder.var(g, head);
                g.matmul(h, head)
            }
        };
        let n = g.value(y).shape()[0];
        g.reshape(y, vec![n])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    pub rounds: usize,
    pub beam_k: usize,
    pub final_k: usize,
    pub embed_width: usize,
    pub hidden: Vec<usize>,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_batches: usize,
    /// Parsimony pressure: selection ranks by fitness minus this much
    /// per interaction order, so a higher-order candidate must beat its
    /// subsets by more than the AUC estimation noise to displace them.
    pub order_penalty: f64,
    pub seed: u64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            rounds: 4,
            beam_k: 50,
            final_k: 15,
            embed_width: 8,
            hidden: vec![],
            epochs_per_round: 3,
            batch_size: 256,
            lr: 1e-2,
            val_batches: 20,
            order_penalty: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolveOutcome {
    pub final_interactions: Vec<Interaction>,
    /// Per round: the retained beam with validation fitness.
    pub beam_history: Vec<Vec<(Interaction, f64)>>,
}

/// One persistent scoring model whose embeddings, tower and surviving
/// projections carry across rounds.
pub struct Explorer {
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub net: InteractionSupernet,
    adam: Adam,
    pub num_fields: usize,
}

impl Explorer {
    pub fn new(schema: &DatasetSchema, cfg: &ExploreConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, schema, cfg.embed_width, &mut rng);
        let num_fields = schema.num_non_seq();
        let net = InteractionSupernet::new(
            &mut store,
            num_fields,
            cfg.embed_width,
            &cfg.hidden,
            &mut rng,
        );
        Explorer {
            store,
            tables,
            net,
            adam: Adam::new(cfg.lr),
            num_fields,
        }
    }

    fn batch_logits(
        &self,
        batch: &PaddedBatch,
        c: &Interaction,
    ) -> (Graph, Binder<'_>, Var) {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.store);
        let e_fields = embed_non_seq(&mut g, &mut binder, &self.tables, batch);
        let logits = self.net.forward(&mut g, &mut binder, &e_fields, c);
        (g, binder, logits)
    }

    /// One epoch of single-candidate training over shuffled batches.
    pub fn train_epoch(
        &mut self,
        schema: &DatasetSchema,
        train: &[Instance],
        candidates: &[Interaction],
        batch_size: usize,
        queue: &mut FairQueue,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let rows: Vec<Instance> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = PaddedBatch::new(schema, &rows);
            let c = &candidates[queue.next(rng)];
            let (mut g, binder, logits) = self.batch_logits(&batch, c);
            let loss = loss_ctr(&mut g, logits, &batch.click_labels());
            let lv = g.value(loss).item();
            assert!(lv.is_finite(), "non-finite training loss");
            total += lv;
            steps += 1;
            let grads = g.backward(loss);
            let grads = binder.grads(&g, &grads);
            self.adam.step(&mut self.store, &grads);
        }
        total / steps.max(1) as f64
    }

    /// Validation AUC of each candidate over the same fixed batches.
    /// Read-only over the weights, so candidates score in parallel.
    pub fn score_candidates(
        &self,
        candidates: &[Interaction],
        val_batches: &[PaddedBatch],
    ) -> Vec<f64> {
        assert!(!val_batches.is_empty(), "no validation batches");
        candidates
            .par_iter()
            .map(|c| {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for batch in val_batches {
                    let (g, _, logits) = self.batch_logits(batch, c);
                    scores.extend_from_slice(g.value(logits).data());
                    labels.extend(batch.click_labels());
                }
                auc(&scores, &labels)
            })
            .collect()
    }
}

/// Full beam evolution: expand, train the shared model fairly over the
/// pool, score on validation, retain top-k; after the last round return
/// the top-k' interactions of order >= 2.
pub fn evolve(
    schema: &DatasetSchema,
    train: &[Instance],
    val: &[Instance],
    cfg: &ExploreConfig,
) -> Result<(Explorer, EvolveOutcome), RecError> {
    let num_fields = schema.num_non_seq();
    if num_fields < 2 {
        return Err(RecError::Config(
            "interaction search needs >= 2 non-sequential fields".into(),
        ));
    }
    let mut explorer = Explorer::new(schema, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let val_batches: Vec<PaddedBatch> = val
        .chunks(cfg.batch_size)
        .take(cfg.val_batches)
        .map(|rows| PaddedBatch::new(schema, rows))
        .collect();
    if val_batches.is_empty() {
        return Err(RecError::Config("empty validation stream".into()));
    }

    // beam starts from every single field
    let mut beam: Vec<Interaction> = (0..num_fields).map(|f| Interaction::new(vec![f])).collect();
    let mut history = Vec::new();
    for _round in 0..cfg.rounds {
        let pool = expand_beam(&beam, num_fields);
        explorer
            .net
            .ensure_projections(&mut explorer.store, &pool, &mut rng);
        let mut queue = FairQueue::new(pool.len());
        for _ in 0..cfg.epochs_per_round {
            explorer.train_epoch(schema, train, &pool, cfg.batch_size, &mut queue, &mut rng);
        }
        let fitness = explorer.score_candidates(&pool, &val_batches);
        let mut ranked: Vec<(Interaction, f64)> =
            pool.into_iter().zip(fitness).collect();
        let score = |(i, f): &(Interaction, f64)| f - cfg.order_penalty * i.order() as f64;
        ranked.sort_by(|a, b| {
            score(b)
                .partial_cmp(&score(a))
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(cfg.beam_k);
        beam = ranked.iter().map(|(i, _)| i.clone()).collect();
        history.push(ranked);
    }
    let final_interactions: Vec<Interaction> = history
        .last()
        .map(|ranked| {
            ranked
                .iter()
                .filter(|(i, _)| i.order() >= 2)
                .take(cfg.final_k)
                .map(|(i, _)| i.clone())
                .collect()
        })
        .unwrap_or_default();
    Ok((
        explorer,
        EvolveOutcome { final_interactions, beam_history: history },
    ))
}

/// Interactions as arrays of field names, the external form.
pub fn interactions_to_names(
    interactions: &[Interaction],
    schema: &DatasetSchema,
) -> Vec<Vec<String>> {
    let fields = schema.non_seq_fields();
    interactions
        .iter()
        .map(|i| i.fields().iter().map(|&f| fields[f].name.clone()).collect())
        .collect()
}
