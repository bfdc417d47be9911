//! Aggregation head: width-searchable MLP evaluated by slicing leading
//! sub-matrices out of maximal weights, squeeze-and-excitation gating
//! over stacked embedding/interaction rows, prediction heads and the
//! two task losses.

use crate::dice::{apply_dice, DiceState, DiceTaps};
use crate::RecError;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor::graph::Var;
use tensor::{init, Binder, Graph, ParamId, ParamStore, Tensor};

/// Allowed hidden-width fractions of the input width K_0.
pub const WIDTH_FRACTIONS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpAct {
    Relu,
    Swish,
    Identity,
    Dice,
}

impl std::fmt::Display for MlpAct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MlpAct::Relu => write!(f, "ReLU"),
            MlpAct::Swish => write!(f, "Swish"),
            MlpAct::Identity => write!(f, "Identity"),
            MlpAct::Dice => write!(f, "Dice"),
        }
    }
}

pub const MLP_ACTS: [MlpAct; 4] = [MlpAct::Relu, MlpAct::Swish, MlpAct::Identity, MlpAct::Dice];

pub fn realized_width(fraction: f64, k0: usize) -> usize {
    ((fraction * k0 as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpLayerSpec {
    pub width_fraction: f64,
    pub act: MlpAct,
}

/// One aggregation-MLP architecture. Realized widths are monotonically
/// non-increasing along the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layers: Vec<MlpLayerSpec>,
}

impl MlpSpec {
    pub fn widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| realized_width(l.width_fraction, self.input_width))
            .collect()
    }

    pub fn output_width(&self) -> usize {
        self.widths().last().copied().unwrap_or(self.input_width)
    }

    pub fn validate(&self) -> Result<(), RecError> {
        let widths = self.widths();
        for pair in widths.windows(2) {
            if pair[1] > pair[0] {
                return Err(RecError::Config(format!(
                    "mlp widths must be non-increasing, got {widths:?}"
                )));
            }
        }
        for l in &self.layers {
            if !WIDTH_FRACTIONS.iter().any(|&f| (f - l.width_fraction).abs() < 1e-12) {
                return Err(RecError::Config(format!(
                    "width fraction {} not on the search grid",
                    l.width_fraction
                )));
            }
        }
        Ok(())
    }

    /// Uniform over the monotone space: each layer draws from the
    /// fractions not exceeding the previous layer's.
    pub fn sample(rng: &mut ChaCha8Rng, k0: usize, depth: usize) -> Self {
        use rand::Rng;
        let mut layers = Vec::with_capacity(depth);
        let mut cap = WIDTH_FRACTIONS.len();
        for _ in 0..depth {
            let pick = rng.gen_range(0..cap);
            cap = pick + 1;
            layers.push(MlpLayerSpec {
                width_fraction: WIDTH_FRACTIONS[pick],
                act: MLP_ACTS[rng.gen_range(0..MLP_ACTS.len())],
            });
        }
        MlpSpec { input_width: k0, layers }
    }

    /// Fixed spec from explicit hidden sizes with ReLU throughout, used
    /// for pre-defined MLPs; sizes snap to the nearest grid fraction.
    pub fn predefined(k0: usize, sizes: &[usize]) -> Self {
        let layers = sizes
            .iter()
            .map(|&s| {
                let frac = WIDTH_FRACTIONS
                    .iter()
                    .copied()
                    .min_by(|a, b| {
                        let da = (realized_width(*a, k0) as f64 - s as f64).abs();
                        let db = (realized_width(*b, k0) as f64 - s as f64).abs();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                MlpLayerSpec { width_fraction: frac, act: MlpAct::Relu }
            })
            .collect();
        MlpSpec { input_width: k0, layers }
    }
}

#[derive(Serialize, Deserialize)]
struct MlpLayerRepr {
    width: usize,
    activation: MlpAct,
}

#[derive(Serialize, Deserialize)]
struct MlpSpecRepr {
    input_width: usize,
    layers: Vec<MlpLayerRepr>,
}

impl Serialize for MlpSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MlpSpecRepr {
            input_width: self.input_width,
            layers: self
                .layers
                .iter()
                .map(|l| MlpLayerRepr {
                    width: realized_width(l.width_fraction, self.input_width),
                    activation: l.act,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MlpSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MlpSpecRepr::deserialize(d)?;
        let layers = repr
            .layers
            .iter()
            .map(|l| {
                let frac = WIDTH_FRACTIONS
                    .iter()
                    .copied()
                    .find(|&f| realized_width(f, repr.input_width) == l.width)
                    .ok_or_else(|| {
                        serde::de::Error::custom(format!(
                            "width {} unreachable from the fraction grid at input width {}",
                            l.width, repr.input_width
                        ))
                    })?;
                Ok(MlpLayerSpec { width_fraction: frac, act: l.activation })
            })
            .collect::<Result<Vec<_>, D::Error>>()?;
        Ok(MlpSpec { input_width: repr.input_width, layers })
    }
}

#[derive(Clone)]
struct MlpBankLayer {
    w: ParamId,
    b: ParamId,
    alpha: ParamId,
}

/// Maximal (K_0, K_0) weights per layer; any spec's forward slices the
/// leading (h_in, h_out) block, sharing weights across widths.
#[derive(Clone)]
pub struct MlpBank {
    layers: Vec<MlpBankLayer>,
    pub k0: usize,
    dice_slot_base: usize,
}

impl MlpBank {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        k0: usize,
        depth: usize,
        dice_slot_base: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| MlpBankLayer {
                w: store.add(format!("{prefix}.l{l}.w"), init::xavier(rng, k0, k0)),
                b: store.add(format!("{prefix}.l{l}.b"), Tensor::zeros(&[k0])),
                alpha: store.add(format!("{prefix}.l{l}.alpha"), Tensor::zeros(&[k0])),
            })
            .collect();
        MlpBank { layers, k0, dice_slot_base }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// One running-stats slot per layer (used only when Dice is chosen).
    pub fn dice_states(&self) -> Vec<DiceState> {
        (0..self.layers.len()).map(|_| DiceState::new(self.k0)).collect()
    }

    /// (weight, bias, dice alpha) ids of layer `l`, for oracle copies.
    pub fn layer_params(&self, l: usize) -> (ParamId, ParamId, ParamId) {
        let bl = &self.layers[l];
        (bl.w, bl.b, bl.alpha)
    }
}

pub fn apply_mlp_act(
    g: &mut Graph,
    binder: &mut Binder,
    act: MlpAct,
    x: Var,
    alpha_full: ParamId,
    dice: &[DiceState],
    slot: usize,
    taps: &mut DiceTaps,
) -> Var {
    match act {
        MlpAct::Relu => g.relu(x),
        MlpAct::Swish => g.swish(x),
        MlpAct::Identity => x,
        MlpAct::Dice => {
            let width = g.value(x).last_dim();
            let alpha = binder.var(g, alpha_full);
            let alpha = g.narrow(alpha, 0, 0, width);
            apply_dice(g, taps, dice, slot, x, alpha)
        }
    }
}

/// Forward a spec through the shared bank via sub-matrix slicing.
pub fn mlp_forward(
    g: &mut Graph,
    binder: &mut Binder,
    bank: &MlpBank,
    spec: &MlpSpec,
    x: Var,
    dice: &[DiceState],
    taps: &mut DiceTaps,
) -> Var {
    assert_eq!(spec.layers.len(), bank.depth(), "spec depth != bank depth");
    assert_eq!(spec.input_width, bank.k0, "spec input width != bank width");
    let mut h = x;
    let mut h_in = bank.k0;
    for (l, (layer, bl)) in spec.layers.iter().zip(&bank.layers).enumerate() {
        let h_out = realized_width(layer.width_fraction, bank.k0);
        assert!(h_out <= h_in, "widths must be non-increasing");
        let w_full = binder.var(g, bl.w);
        let w = g.slice2d(w_full, h_in, h_out);
        let b_full = binder.var(g, bl.b);
        let b = g.narrow(b_full, 0, 0, h_out);
        let y = g.linear(h, w, b);
        h = apply_mlp_act(
            g,
            binder,
            layer.act,
            y,
            bl.alpha,
            dice,
            bank.dice_slot_base + l,
            taps,
        );
        h_in = h_out;
    }
    h
}

/// Squeeze-and-excitation gate over (M+N) stacked K-wide rows.
#[derive(Clone)]
pub struct SeParams {
    pub v: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub rows: usize,
}

impl SeParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rows: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SeParams {
            v: store.add(format!("{prefix}.v"), init::xavier(rng, k, 1)),
            w1: store.add(format!("{prefix}.w1"), init::xavier(rng, rows, rows)),
            w2: store.add(format!("{prefix}.w2"), init::xavier(rng, rows, rows)),
            rows,
        }
    }
}

/// Gates a^se = sigmoid(W2 ReLU(W1 Q v)); output is the gate-weighted
/// sum of the rows, width K.
pub fn se_compress(g: &mut Graph, binder: &mut Binder, se: &SeParams, q: Var) -> Var {
    let s = g.value(q).shape().to_vec();
    assert!(s.len() == 3 && s[1] == se.rows, "se_compress: expected (B, {}, K)", se.rows);
    let (b, rows, k) = (s[0], s[1], s[2]);
    let v = binder.var(g, se.v);
    let flat = g.reshape(q, vec![b * rows, k]);
    let z = g.matmul(flat, v);
    let z = g.reshape(z, vec![b, rows]);
    let w1 = binder.var(g, se.w1);
    let z = g.matmul(z, w1);
    let z = g.relu(z);
    let w2 = binder.var(g, se.w2);
    let z = g.matmul(z, w2);
    let a = g.sigmoid(z);
    let weighted = g.scale_rows(q, a);
    g.sum_axis(weighted, 1)
}

/// Concatenation feeding the MLP: raw non-sequential vectors, then
/// interaction values, then the sequential representation.
pub fn assemble_input(g: &mut Graph, e_a: &[Var], p_a: &[Var], h_b: Option<Var>) -> Var {
    let mut parts: Vec<Var> = e_a.to_vec();
    parts.extend_from_slice(p_a);
    if let Some(h) = h_b {
        parts.push(h);
    }
    assert!(!parts.is_empty(), "assemble_input: nothing to concatenate");
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 1)
    }
}

#[derive(Clone)]
pub struct CtrHead {
    pub w: ParamId,
}

impl CtrHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CtrHead {
            w: store.add(format!("{prefix}.w"), init::xavier(rng, in_width, 1)),
        }
    }
}

/// Scalar logit per example from [h_mlp | h_se].
pub fn predict_ctr(
    g: &mut Graph,
    binder: &mut Binder,
    head: &CtrHead,
    h_mlp: Var,
    h_se: Option<Var>,
) -> Var {
    let h_c = match h_se {
        Some(se) => g.concat(&[h_mlp, se], 1),
        None => h_mlp,
    };
    let w = binder.var(g, head.w);
    let b = g.value(h_c).shape()[0];
    let y = g.matmul(h_c, w);
    g.reshape(y, vec![b])
}

#[derive(Clone)]
pub struct RetrievalHead {
    pub w: ParamId,
}

impl RetrievalHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        item_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        RetrievalHead {
            w: store.add(format!("{prefix}.w"), init::xavier(rng, in_width, item_width)),
        }
    }
}

/// Project the hidden representation into item-embedding space.
pub fn user_vector(g: &mut Graph, binder: &mut Binder, head: &RetrievalHead, h_c: Var) -> Var {
    let w = binder.var(g, head.w);
    g.matmul(h_c, w)
}

/// Mean binary log loss from logits, in the numerically stable
/// softplus form: y*softplus(-x) + (1-y)*softplus(x).
pub fn loss_ctr(g: &mut Graph, logits: Var, labels: &[f64]) -> Var {
    let b = g.value(logits).numel();
    assert_eq!(labels.len(), b, "loss_ctr: label count");
    for &y in labels {
        assert!(y == 0.0 || y == 1.0, "loss_ctr: labels must be 0/1");
    }
    let y = g.constant(Tensor::vector(labels.to_vec()));
    let one_minus_y = g.constant(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()));
    let neg = g.neg(logits);
    let sp_neg = g.softplus(neg);
    let sp_pos = g.softplus(logits);
    let pos_term = g.mul(y, sp_neg);
    let neg_term = g.mul(one_minus_y, sp_pos);
    let total = g.add(pos_term, neg_term);
    g.mean_all(total)
}

/// Sampled-softmax surrogate: -[log s(s_target) + sum_j log(1 - s(s_j))]
/// averaged over examples. `negatives[j]` holds the j-th negative id of
/// every example.
pub fn loss_nextitem(
    g: &mut Graph,
    binder: &mut Binder,
    user: Var,
    item_table: ParamId,
    targets: &[u32],
    negatives: &[Vec<u32>],
) -> Var {
    let b = g.value(user).shape()[0];
    assert_eq!(targets.len(), b, "loss_nextitem: target count");
    let table = binder.var(g, item_table);
    let t_emb = g.gather_rows(table, targets);
    let s_t = g.rowwise_dot(user, t_emb);
    let neg_st = g.neg(s_t);
    let mut per_example = g.softplus(neg_st);
    for col in negatives {
        assert_eq!(col.len(), b, "loss_nextitem: negative column length");
        let n_emb = g.gather_rows(table, col);
        let s_n = g.rowwise_dot(user, n_emb);
        let sp = g.softplus(s_n);
        per_example = g.add(per_example, sp);
    }
    g.mean_all(per_example)
}
