//! Embedding stage: per-field tables, batch padding with masks, and
//! graph-level lookups producing the non-sequential vectors and the
//! behavior matrix.

use crate::schema::{DatasetSchema, Instance, Label};
use rand_chacha::ChaCha8Rng;
use tensor::graph::Var;
use tensor::{init, Binder, Graph, ParamId, ParamStore, Tensor};

pub const EMBED_INIT_RANGE: f64 = 0.05;

/// One (cardinality, K) table per schema field, in schema order.
/// Multivalent lookups sum the member rows.
#[derive(Clone)]
pub struct EmbeddingTables {
    pub non_seq: Vec<ParamId>,
    pub behavior: Vec<ParamId>,
    pub width: usize,
}

impl EmbeddingTables {
    pub fn new(
        store: &mut ParamStore,
        schema: &DatasetSchema,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut make = |fields: Vec<&crate::schema::FieldSchema>| {
            fields
                .iter()
                .map(|f| {
                    let t = init::uniform(
                        rng,
                        &[f.cardinality, width],
                        -EMBED_INIT_RANGE,
                        EMBED_INIT_RANGE,
                    );
                    store.add(format!("embed.{}", f.name), t)
                })
                .collect::<Vec<_>>()
        };
        let non_seq = make(schema.non_seq_fields());
        let behavior = make(schema.behavior_fields());
        EmbeddingTables { non_seq, behavior, width }
    }

    /// Table of the designated item field, used to score candidates in
    /// retrieval mode.
    pub fn item_table(&self) -> ParamId {
        self.behavior[0]
    }
}

/// A right-padded minibatch: lookup groups per field plus the validity
/// mask. Padded positions get empty groups, so their embeddings are
/// structurally zero before the mask is even applied.
pub struct PaddedBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// Per non-sequential field: B groups.
    pub non_seq_groups: Vec<Vec<Vec<u32>>>,
    /// Per behavior field: B*T groups, row-major (example, time).
    pub seq_groups: Vec<Vec<Vec<u32>>>,
    /// 1.0 at real positions, 0.0 at padding; shape (B, T) flattened.
    pub mask: Vec<f64>,
    /// Index of the last real element per example (0 when empty).
    pub last_idx: Vec<usize>,
    /// Per behavior field: B groups for the candidate target item.
    pub target_groups: Option<Vec<Vec<Vec<u32>>>>,
    pub labels: Vec<Label>,
}

impl PaddedBatch {
    pub fn new(schema: &DatasetSchema, instances: &[Instance]) -> Self {
        let b = instances.len();
        let t = schema.max_seq_len;
        let n = schema.num_non_seq();
        let nb = schema.num_behavior();
        let mut non_seq_groups = vec![Vec::with_capacity(b); n];
        let mut seq_groups = vec![vec![Vec::new(); b * t]; nb];
        let mut mask = vec![0.0; b * t];
        let mut last_idx = vec![0usize; b];
        let with_target = instances.iter().all(|i| i.target_item.is_some());
        let mut target_groups = if with_target && nb > 0 {
            Some(vec![Vec::with_capacity(b); nb])
        } else {
            None
        };
        for (bi, inst) in instances.iter().enumerate() {
            for (f, ids) in inst.non_seq.iter().enumerate() {
                non_seq_groups[f].push(ids.clone());
            }
            for (ti, elem) in inst.behavior.iter().enumerate() {
                mask[bi * t + ti] = 1.0;
                for (f, ids) in elem.iter().enumerate() {
                    seq_groups[f][bi * t + ti] = ids.clone();
                }
            }
            last_idx[bi] = inst.behavior.len().saturating_sub(1);
            if let (Some(tg), Some(elem)) = (target_groups.as_mut(), inst.target_item.as_ref()) {
                for (f, ids) in elem.iter().enumerate() {
                    tg[f].push(ids.clone());
                }
            }
        }
        PaddedBatch {
            batch: b,
            seq_len: t,
            non_seq_groups,
            seq_groups,
            mask,
            last_idx,
            target_groups,
            labels: instances.iter().map(|i| i.label).collect(),
        }
    }

    pub fn mask_const(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::new(vec![self.batch, self.seq_len], self.mask.clone()))
    }

    pub fn click_labels(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|l| match l {
                Label::Click(y) => *y as f64,
                Label::NextItem(_) => panic!("click labels requested on retrieval batch"),
            })
            .collect()
    }
}

/// e^a_i for each non-sequential field: a list of (B, K) vectors.
pub fn embed_non_seq(
    g: &mut Graph,
    binder: &mut Binder,
    tables: &EmbeddingTables,
    batch: &PaddedBatch,
) -> Vec<Var> {
    tables
        .non_seq
        .iter()
        .zip(&batch.non_seq_groups)
        .map(|(&id, groups)| {
            let table = binder.var(g, id);
            g.gather_sum(table, groups)
        })
        .collect()
}

/// Behavior matrix H_0: (B, T, N_b*K), masked so padded rows are zero.
pub fn embed_behavior(
    g: &mut Graph,
    binder: &mut Binder,
    tables: &EmbeddingTables,
    batch: &PaddedBatch,
) -> Var {
    let per_field: Vec<Var> = tables
        .behavior
        .iter()
        .zip(&batch.seq_groups)
        .map(|(&id, groups)| {
            let table = binder.var(g, id);
            g.gather_sum(table, groups)
        })
        .collect();
    let flat = if per_field.len() == 1 {
        per_field[0]
    } else {
        g.concat(&per_field, 1)
    };
    let d = tables.behavior.len() * tables.width;
    let h0 = g.reshape(flat, vec![batch.batch, batch.seq_len, d]);
    let mask = batch.mask_const(g);
    g.scale_rows(h0, mask)
}

/// Candidate target item embedding: (B, N_b*K).
pub fn embed_target(
    g: &mut Graph,
    binder: &mut Binder,
    tables: &EmbeddingTables,
    batch: &PaddedBatch,
) -> Option<Var> {
    let groups = batch.target_groups.as_ref()?;
    let per_field: Vec<Var> = tables
        .behavior
        .iter()
        .zip(groups)
        .map(|(&id, gr)| {
            let table = binder.var(g, id);
            g.gather_sum(table, gr)
        })
        .collect();
    Some(if per_field.len() == 1 {
        per_field[0]
    } else {
        g.concat(&per_field, 1)
    })
}
