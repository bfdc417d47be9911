//! Behavior-modeling blocks: the per-position candidate layers of the
//! shared-weight supernet, residual block composition, and the
//! fixed-length compression of the block stack output.
//!
//! Every candidate operates at width d = N_b*K so any stack of choices
//! composes. A sampled architecture and the supernet run the exact same
//! forward code over the same parameter ids, which is what makes weight
//! inheritance an identity.

use crate::dice::{apply_dice, DiceState, DiceTaps};
use crate::RecError;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor::graph::Var;
use tensor::ops::Act;
use tensor::{init, Binder, Graph, ParamId, ParamStore, Tensor};

pub const CONV_KERNELS: [usize; 2] = [1, 3];
pub const DCONV_KERNELS: [usize; 3] = [3, 5, 7];
pub const DCONV_DILATION: usize = 2;
pub const POOL_KERNEL: usize = 3;
pub const ATTN_HEADS: [usize; 2] = [2, 4];
pub const LN_EPS: f64 = 1e-6;
pub const ATTN_MASK_PENALTY: f64 = -1e9;
pub const SCORE_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerChoice {
    Conv { k: usize },
    #[serde(rename = "dconv")]
    DilatedConv { k: usize },
    #[serde(rename = "avgpool")]
    AvgPool,
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "bigru")]
    BiGru,
    #[serde(rename = "attn")]
    SelfAttn { heads: usize },
    #[serde(rename = "targetattn")]
    TargetAttn,
    Zero,
}

impl std::fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerChoice::Conv { k } => write!(f, "1x{k} Conv"),
            LayerChoice::DilatedConv { k } => write!(f, "1x{k} Dconv"),
            LayerChoice::AvgPool => write!(f, "Avg Pooling"),
            LayerChoice::MaxPool => write!(f, "Max Pooling"),
            LayerChoice::BiGru => write!(f, "Bi-GRU"),
            LayerChoice::SelfAttn { heads } => write!(f, "{heads}-Head Attention"),
            LayerChoice::TargetAttn => write!(f, "Attention from Target"),
            LayerChoice::Zero => write!(f, "Zero"),
        }
    }
}

/// The non-Zero layer candidates, in a fixed enumeration order.
pub fn nonzero_layer_choices(has_target: bool) -> Vec<LayerChoice> {
    let mut v = Vec::new();
    for k in CONV_KERNELS {
        v.push(LayerChoice::Conv { k });
    }
    for k in DCONV_KERNELS {
        v.push(LayerChoice::DilatedConv { k });
    }
    v.push(LayerChoice::AvgPool);
    v.push(LayerChoice::MaxPool);
    v.push(LayerChoice::BiGru);
    for heads in ATTN_HEADS {
        v.push(LayerChoice::SelfAttn { heads });
    }
    if has_target {
        v.push(LayerChoice::TargetAttn);
    }
    v
}

/// All layer candidates including Zero (Zero last).
pub fn layer_choices(has_target: bool) -> Vec<LayerChoice> {
    let mut v = nonzero_layer_choices(has_target);
    v.push(LayerChoice::Zero);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    LayerNorm,
    None,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Norm::LayerNorm => write!(f, "LayerNorm"),
            Norm::None => write!(f, "None"),
        }
    }
}

pub const NORMS: [Norm; 2] = [Norm::LayerNorm, Norm::None];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockAct {
    Relu,
    Gelu,
    Swish,
    Identity,
}

impl BlockAct {
    pub fn act(self) -> Act {
        match self {
            BlockAct::Relu => Act::Relu,
            BlockAct::Gelu => Act::Gelu,
            BlockAct::Swish => Act::Swish,
            BlockAct::Identity => Act::Identity,
        }
    }
}

impl std::fmt::Display for BlockAct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockAct::Relu => write!(f, "ReLU"),
            BlockAct::Gelu => write!(f, "GeLU"),
            BlockAct::Swish => write!(f, "Swish"),
            BlockAct::Identity => write!(f, "Identity"),
        }
    }
}

pub const BLOCK_ACTS: [BlockAct; 4] = [
    BlockAct::Relu,
    BlockAct::Gelu,
    BlockAct::Swish,
    BlockAct::Identity,
];

/// One residual block choice. A Zero layer skips the block entirely;
/// norm and act are ignored and canonicalized away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub norm: Norm,
    pub layer: LayerChoice,
    pub act: BlockAct,
}

impl BlockSpec {
    pub fn zero() -> Self {
        BlockSpec {
            norm: Norm::None,
            layer: LayerChoice::Zero,
            act: BlockAct::Identity,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layer == LayerChoice::Zero
    }

    pub fn validate(&self, has_target: bool) -> Result<(), RecError> {
        if self.is_zero() {
            return Ok(());
        }
        if !nonzero_layer_choices(has_target).contains(&self.layer) {
            return Err(RecError::Config(format!(
                "layer {} is not in the candidate set",
                self.layer
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_zero() {
            write!(f, "Zero")
        } else {
            write!(f, "({}, {}, {})", self.layer, self.act, self.norm)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BlockSpecRepr {
    Sentinel(String),
    Full {
        norm: Norm,
        layer: LayerChoice,
        act: BlockAct,
    },
}

impl Serialize for BlockSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_zero() {
            BlockSpecRepr::Sentinel("ZERO".to_string()).serialize(s)
        } else {
            BlockSpecRepr::Full {
                norm: self.norm,
                layer: self.layer,
                act: self.act,
            }
            .serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for BlockSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match BlockSpecRepr::deserialize(d)? {
            BlockSpecRepr::Sentinel(s) if s == "ZERO" => Ok(BlockSpec::zero()),
            BlockSpecRepr::Sentinel(s) => Err(serde::de::Error::custom(format!(
                "unknown block sentinel {s:?}"
            ))),
            BlockSpecRepr::Full { norm, layer, act } => {
                if layer == LayerChoice::Zero {
                    Ok(BlockSpec::zero())
                } else {
                    Ok(BlockSpec { norm, layer, act })
                }
            }
        }
    }
}

/// A length-L_b list of block choices identifying one child network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockArchitecture(pub Vec<BlockSpec>);

impl BlockArchitecture {
    pub fn all_zero(l_b: usize) -> Self {
        BlockArchitecture(vec![BlockSpec::zero(); l_b])
    }

    pub fn validate(&self, has_target: bool) -> Result<(), RecError> {
        for spec in &self.0 {
            spec.validate(has_target)?;
        }
        Ok(())
    }
}

impl std::fmt::Display for BlockArchitecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, spec) in self.0.iter().enumerate() {
            writeln!(f, "Block {}: {}", i + 1, spec)?;
        }
        Ok(())
    }
}

/// Number of distinct architectures: per position, (norm x layer x act)
/// for non-Zero layers plus the single composite Zero choice.
pub fn search_space_size(l_b: usize, has_target: bool) -> u128 {
    let per_position = 2 * nonzero_layer_choices(has_target).len() as u128 * 4 + 1;
    per_position.pow(l_b as u32)
}

#[derive(Clone)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone)]
pub struct GruDirParams {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wh: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub uh: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bh: ParamId,
}

#[derive(Clone)]
pub struct GruParams {
    pub fwd: GruDirParams,
    pub bwd: GruDirParams,
}

#[derive(Clone)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone)]
pub enum LayerParams {
    Conv(ConvParams),
    Gru(Box<GruParams>),
    Attn(AttnParams),
    /// TargetAttn uses the bank-level shared scoring network.
    TargetShared,
    NoParams,
}

#[derive(Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Local activation unit that scores sequence positions against the
/// candidate item: scalar score per position from a small gated MLP.
#[derive(Clone)]
pub struct TargetScorer {
    pub proj: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub alpha: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Index into the model's dice state list.
    pub dice_slot: usize,
}

#[derive(Clone)]
pub struct PositionBank {
    /// Parallel to `nonzero_layer_choices(has_target)`.
    pub layers: Vec<(LayerChoice, LayerParams)>,
    /// Per-candidate normalization scale/shift, same indexing.
    pub norms: Vec<NormParams>,
}

/// All trainable state of the block supernet: one candidate parameter
/// set per (position, layer choice) plus one shared target scorer.
#[derive(Clone)]
pub struct SupernetBank {
    pub positions: Vec<PositionBank>,
    pub target: Option<TargetScorer>,
    pub width: usize,
}

fn gru_dir(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    h: usize,
) -> GruDirParams {
    let mut w = |n: &str| store.add(format!("{prefix}.w{n}"), init::xavier(rng, d, h));
    let wz = w("z");
    let wr = w("r");
    let wh = w("h");
    let mut u = |n: &str| store.add(format!("{prefix}.u{n}"), init::orthogonal(rng, h, h));
    let uz = u("z");
    let ur = u("r");
    let uh = u("h");
    let mut b = |n: &str| store.add(format!("{prefix}.b{n}"), Tensor::zeros(&[h]));
    let bz = b("z");
    let br = b("r");
    let bh = b("h");
    GruDirParams { wz, wr, wh, uz, ur, uh, bz, br, bh }
}

impl SupernetBank {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        l_b: usize,
        width: usize,
        has_target: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let choices = nonzero_layer_choices(has_target);
        Self::with_choices(store, prefix, l_b, width, &choices, has_target, rng)
    }

    /// Build a bank over an explicit candidate subset. The scorer is
    /// built whenever a target item exists, since compression uses it
    /// even when TargetAttn is not a block candidate.
    pub fn with_choices(
        store: &mut ParamStore,
        prefix: &str,
        l_b: usize,
        width: usize,
        choices: &[LayerChoice],
        has_target: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(width % 2 == 0, "block width must be even for the Bi-GRU halves");
        for heads in ATTN_HEADS {
            assert!(width % heads == 0, "block width must divide attention heads");
        }
        assert!(
            !choices.contains(&LayerChoice::Zero),
            "zero is implicit, not a bank candidate"
        );
        assert!(
            has_target || !choices.contains(&LayerChoice::TargetAttn),
            "target attention requires a target item"
        );
        let mut positions = Vec::with_capacity(l_b);
        for pos in 0..l_b {
            let mut layers = Vec::new();
            let mut norms = Vec::new();
            for (ci, &choice) in choices.iter().enumerate() {
                let p = format!("{prefix}.pos{pos}.c{ci}");
                let params = match choice {
                    LayerChoice::Conv { k } | LayerChoice::DilatedConv { k } => {
                        LayerParams::Conv(ConvParams {
                            w: store.add(format!("{p}.w"), init::he(rng, &[k, width, width])),
                            b: store.add(format!("{p}.b"), Tensor::zeros(&[width])),
                        })
                    }
                    LayerChoice::BiGru => {
                        let h = width / 2;
                        LayerParams::Gru(Box::new(GruParams {
                            fwd: gru_dir(store, rng, &format!("{p}.fwd"), width, h),
                            bwd: gru_dir(store, rng, &format!("{p}.bwd"), width, h),
                        }))
                    }
                    LayerChoice::SelfAttn { .. } => LayerParams::Attn(AttnParams {
                        wq: store.add(format!("{p}.wq"), init::xavier(rng, width, width)),
                        wk: store.add(format!("{p}.wk"), init::xavier(rng, width, width)),
                        wv: store.add(format!("{p}.wv"), init::xavier(rng, width, width)),
                        wo: store.add(format!("{p}.wo"), init::xavier(rng, width, width)),
                    }),
                    LayerChoice::TargetAttn => LayerParams::TargetShared,
                    LayerChoice::AvgPool | LayerChoice::MaxPool => LayerParams::NoParams,
                    LayerChoice::Zero => unreachable!("zero is not a candidate"),
                };
                layers.push((choice, params));
                norms.push(NormParams {
                    gamma: store.add(format!("{p}.ln.gamma"), Tensor::full(&[width], 1.0)),
                    beta: store.add(format!("{p}.ln.beta"), Tensor::zeros(&[width])),
                });
            }
            positions.push(PositionBank { layers, norms });
        }
        let target = has_target.then(|| TargetScorer {
            proj: store.add(format!("{prefix}.score.proj"), init::xavier(rng, width, width)),
            w1: store.add(
                format!("{prefix}.score.w1"),
                init::xavier(rng, 3 * width, SCORE_HIDDEN),
            ),
            b1: store.add(format!("{prefix}.score.b1"), Tensor::zeros(&[SCORE_HIDDEN])),
            alpha: store.add(format!("{prefix}.score.alpha"), Tensor::zeros(&[SCORE_HIDDEN])),
            w2: store.add(format!("{prefix}.score.w2"), init::xavier(rng, SCORE_HIDDEN, 1)),
            b2: store.add(format!("{prefix}.score.b2"), Tensor::zeros(&[1])),
            dice_slot: 0,
        });
        SupernetBank { positions, target, width }
    }

    pub fn depth(&self) -> usize {
        self.positions.len()
    }

    pub fn has_target(&self) -> bool {
        self.target.is_some()
    }

    /// Dice states required by this bank (one per scorer).
    pub fn dice_states(&self) -> Vec<DiceState> {
        if self.target.is_some() {
            vec![DiceState::new(SCORE_HIDDEN)]
        } else {
            Vec::new()
        }
    }

    fn candidate_index(&self, choice: &LayerChoice) -> usize {
        self.positions[0]
            .layers
            .iter()
            .position(|(c, _)| c == choice)
            .unwrap_or_else(|| panic!("layer {choice} not in bank"))
    }
}

/// Everything a block forward needs besides parameters.
pub struct SeqCtx {
    pub batch: usize,
    pub seq_len: usize,
    /// (B, T) validity mask as a graph constant.
    pub mask: Var,
    pub last_idx: Vec<usize>,
    /// Projected + raw target embedding, when the task supplies one.
    pub target: Option<Var>,
}

impl SeqCtx {
    pub fn new(g: &mut Graph, batch: &crate::embed::PaddedBatch, target: Option<Var>) -> Self {
        SeqCtx {
            batch: batch.batch,
            seq_len: batch.seq_len,
            mask: batch.mask_const(g),
            last_idx: batch.last_idx.clone(),
            target,
        }
    }
}

fn time_matmul(g: &mut Graph, x: Var, w: Var) -> Var {
    // (B, T, din) x (din, dout) via a flatten round-trip
    let s = g.value(x).shape().to_vec();
    let dout = g.value(w).shape()[1];
    let flat = g.reshape(x, vec![s[0] * s[1], s[2]]);
    let y = g.matmul(flat, w);
    g.reshape(y, vec![s[0], s[1], dout])
}

fn gru_direction(
    g: &mut Graph,
    binder: &mut Binder,
    p: &GruDirParams,
    x: Var,
    reverse: bool,
) -> Vec<Var> {
    let s = g.value(x).shape().to_vec();
    let (b, t) = (s[0], s[1]);
    let h_dim = binder.var(g, p.bz);
    let h_dim = g.value(h_dim).last_dim();
    let wz = binder.var(g, p.wz);
    let wr = binder.var(g, p.wr);
    let wh = binder.var(g, p.wh);
    let uz = binder.var(g, p.uz);
    let ur = binder.var(g, p.ur);
    let uh = binder.var(g, p.uh);
    let bz = binder.var(g, p.bz);
    let br = binder.var(g, p.br);
    let bh = binder.var(g, p.bh);
    let mut h = g.constant(Tensor::zeros(&[b, h_dim]));
    let mut outs = vec![h; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for ti in order {
        let xt = g.narrow(x, 1, ti, 1);
        let xt = g.reshape(xt, vec![b, s[2]]);
        let xz = g.linear(xt, wz, bz);
        let hz = g.matmul(h, uz);
        let zs = g.add(xz, hz);
        let z = g.sigmoid(zs);
        let xr = g.linear(xt, wr, br);
        let hr = g.matmul(h, ur);
        let rs = g.add(xr, hr);
        let r = g.sigmoid(rs);
        let rh = g.mul(r, h);
        let xh = g.linear(xt, wh, bh);
        let hh = g.matmul(rh, uh);
        let cand = g.add(xh, hh);
        let cand = g.tanh(cand);
        // h' = h + z * (cand - h)
        let diff = g.sub(cand, h);
        let upd = g.mul(z, diff);
        h = g.add(h, upd);
        outs[ti] = h;
    }
    outs
}

fn bigru_forward(g: &mut Graph, binder: &mut Binder, p: &GruParams, x: Var) -> Var {
    let s = g.value(x).shape().to_vec();
    let (b, t) = (s[0], s[1]);
    let fwd = gru_direction(g, binder, &p.fwd, x, false);
    let bwd = gru_direction(g, binder, &p.bwd, x, true);
    let steps: Vec<Var> = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, r)| {
            let both = g.concat(&[f, r], 1);
            let d = g.value(both).last_dim();
            g.reshape(both, vec![b, 1, d])
        })
        .collect();
    if t == 1 {
        steps[0]
    } else {
        g.concat(&steps, 1)
    }
}

/// Additive key mask: 0 over valid keys, a large negative constant over
/// padding, broadcast over query positions.
fn attn_key_mask(g: &mut Graph, ctx: &SeqCtx) -> Var {
    let (b, t) = (ctx.batch, ctx.seq_len);
    let m = g.value(ctx.mask).data().to_vec();
    let mut data = vec![0.0; b * t * t];
    for bi in 0..b {
        for q in 0..t {
            for k in 0..t {
                if m[bi * t + k] == 0.0 {
                    data[(bi * t + q) * t + k] = ATTN_MASK_PENALTY;
                }
            }
        }
    }
    g.constant(Tensor::new(vec![b, t, t], data))
}

fn self_attn_forward(
    g: &mut Graph,
    binder: &mut Binder,
    p: &AttnParams,
    heads: usize,
    x: Var,
    ctx: &SeqCtx,
) -> Var {
    let s = g.value(x).shape().to_vec();
    let d = s[2];
    let dh = d / heads;
    let wq = binder.var(g, p.wq);
    let wk = binder.var(g, p.wk);
    let wv = binder.var(g, p.wv);
    let wo = binder.var(g, p.wo);
    let q = time_matmul(g, x, wq);
    let k = time_matmul(g, x, wk);
    let v = time_matmul(g, x, wv);
    let key_mask = attn_key_mask(g, ctx);
    let mut head_outs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let qh = g.narrow(q, 2, hi * dh, dh);
        let kh = g.narrow(k, 2, hi * dh, dh);
        let vh = g.narrow(v, 2, hi * dh, dh);
        let kt = g.transpose_last2(kh);
        let scores = g.batch_matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.add(scores, key_mask);
        let probs = g.softmax_last(scores);
        head_outs.push(g.batch_matmul(probs, vh));
    }
    let merged = if heads == 1 {
        head_outs[0]
    } else {
        g.concat(&head_outs, 2)
    };
    time_matmul(g, merged, wo)
}

/// Scalar relevance of each position against the projected target:
/// (B, T) raw scores, no softmax.
pub fn target_scores(
    g: &mut Graph,
    binder: &mut Binder,
    scorer: &TargetScorer,
    dice: &[DiceState],
    taps: &mut DiceTaps,
    h: Var,
    target: Var,
    ctx: &SeqCtx,
) -> Var {
    let (b, t) = (ctx.batch, ctx.seq_len);
    let d = g.value(h).last_dim();
    let proj = binder.var(g, scorer.proj);
    let ep = g.matmul(target, proj);
    let ep = g.broadcast_middle(ep, t);
    let had = g.mul(h, ep);
    let cat = g.concat(&[h, ep, had], 2);
    let flat = g.reshape(cat, vec![b * t, 3 * d]);
    let w1 = binder.var(g, scorer.w1);
    let b1 = binder.var(g, scorer.b1);
    let hid = g.linear(flat, w1, b1);
    let alpha = binder.var(g, scorer.alpha);
    let hid = apply_dice(g, taps, dice, scorer.dice_slot, hid, alpha);
    let w2 = binder.var(g, scorer.w2);
    let b2 = binder.var(g, scorer.b2);
    let out = g.linear(hid, w2, b2);
    g.reshape(out, vec![b, t])
}

/// One residual block: H_l = mask * Act(Layer(Norm(H))) + H. Zero specs
/// return the input Var unchanged.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    g: &mut Graph,
    binder: &mut Binder,
    bank: &SupernetBank,
    pos: usize,
    spec: &BlockSpec,
    h_prev: Var,
    ctx: &SeqCtx,
    dice: &[DiceState],
    taps: &mut DiceTaps,
) -> Var {
    if spec.is_zero() {
        return h_prev;
    }
    let ci = bank.candidate_index(&spec.layer);
    let position = &bank.positions[pos];
    let x = match spec.norm {
        Norm::LayerNorm => {
            let np = &position.norms[ci];
            let gamma = binder.var(g, np.gamma);
            let beta = binder.var(g, np.beta);
            g.layer_norm(h_prev, gamma, beta, LN_EPS)
        }
        Norm::None => h_prev,
    };
    let y = match (&spec.layer, &position.layers[ci].1) {
        (LayerChoice::Conv { .. }, LayerParams::Conv(p)) => {
            let w = binder.var(g, p.w);
            let b = binder.var(g, p.b);
            g.conv1d_same(x, w, b, 1)
        }
        (LayerChoice::DilatedConv { .. }, LayerParams::Conv(p)) => {
            let w = binder.var(g, p.w);
            let b = binder.var(g, p.b);
            g.conv1d_same(x, w, b, DCONV_DILATION)
        }
        (LayerChoice::AvgPool, _) => g.avg_pool1d_same(x, POOL_KERNEL),
        (LayerChoice::MaxPool, _) => g.max_pool1d_same(x, POOL_KERNEL),
        (LayerChoice::BiGru, LayerParams::Gru(p)) => bigru_forward(g, binder, p, x),
        (LayerChoice::SelfAttn { heads }, LayerParams::Attn(p)) => {
            self_attn_forward(g, binder, p, *heads, x, ctx)
        }
        (LayerChoice::TargetAttn, LayerParams::TargetShared) => {
            let scorer = bank.target.as_ref().expect("target scorer missing");
            let target = ctx.target.expect("target embedding missing");
            let scores = target_scores(g, binder, scorer, dice, taps, x, target, ctx);
            g.scale_rows(x, scores)
        }
        _ => unreachable!("candidate parameter kind mismatch"),
    };
    let a = g.apply_act(spec.act.act(), y);
    let masked = g.scale_rows(a, ctx.mask);
    g.add(masked, h_prev)
}

/// Run the whole stack; input must already be masked.
#[allow(clippy::too_many_arguments)]
pub fn stack_forward(
    g: &mut Graph,
    binder: &mut Binder,
    bank: &SupernetBank,
    arch: &BlockArchitecture,
    h0: Var,
    ctx: &SeqCtx,
    dice: &[DiceState],
    taps: &mut DiceTaps,
) -> Var {
    assert_eq!(arch.0.len(), bank.depth(), "architecture depth mismatch");
    let mut h = h0;
    for (pos, spec) in arch.0.iter().enumerate() {
        h = block_forward(g, binder, bank, pos, spec, h, ctx, dice, taps);
    }
    h
}

/// Compress the (B, T, d) stack output to a fixed-length vector:
/// masked sum pooling, the last valid state and (when a target exists)
/// raw-weight target attention over positions.
pub fn compress(
    g: &mut Graph,
    binder: &mut Binder,
    bank: &SupernetBank,
    h: Var,
    ctx: &SeqCtx,
    dice: &[DiceState],
    taps: &mut DiceTaps,
) -> Var {
    let pooled = g.sum_axis(h, 1);
    let last = g.select_time(h, &ctx.last_idx);
    let mut parts = vec![pooled, last];
    if let (Some(scorer), Some(target)) = (&bank.target, ctx.target) {
        let scores = target_scores(g, binder, scorer, dice, taps, h, target, ctx);
        let weighted = g.scale_rows(h, scores);
        parts.push(g.sum_axis(weighted, 1));
    }
    g.concat(&parts, 1)
}

/// Output width of [`compress`].
pub fn compress_width(width: usize, has_target: bool) -> usize {
    if has_target {
        3 * width
    } else {
        2 * width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seq_ctx(g: &mut Graph, b: usize, t: usize, lens: &[usize]) -> SeqCtx {
        let mut mask = vec![0.0; b * t];
        for (bi, &l) in lens.iter().enumerate() {
            for ti in 0..l {
                mask[bi * t + ti] = 1.0;
            }
        }
        SeqCtx {
            batch: b,
            seq_len: t,
            mask: g.constant(Tensor::new(vec![b, t], mask)),
            last_idx: lens.iter().map(|&l| l.saturating_sub(1)).collect(),
            target: None,
        }
    }

    fn masked_input(g: &mut Graph, rng: &mut ChaCha8Rng, ctx: &SeqCtx, d: usize) -> Var {
        let x = init::uniform(rng, &[ctx.batch, ctx.seq_len, d], -1.0, 1.0);
        let x = g.leaf(x);
        g.scale_rows(x, ctx.mask)
    }

    #[test]
    fn choice_counts_match_declared_sets() {
        assert_eq!(layer_choices(false).len(), 11);
        assert_eq!(layer_choices(true).len(), 12);
        assert_eq!(search_space_size(1, false), 81);
        assert_eq!(search_space_size(2, true), 89 * 89);
    }

    #[test]
    fn spec_serialization_round_trips_with_zero_sentinel() {
        let arch = BlockArchitecture(vec![
            BlockSpec {
                norm: Norm::LayerNorm,
                layer: LayerChoice::DilatedConv { k: 5 },
                act: BlockAct::Gelu,
            },
            BlockSpec::zero(),
            BlockSpec {
                norm: Norm::None,
                layer: LayerChoice::SelfAttn { heads: 4 },
                act: BlockAct::Swish,
            },
        ]);
        let json = serde_json::to_string(&arch).unwrap();
        assert!(json.contains("\"ZERO\""), "{json}");
        let back: BlockArchitecture = serde_json::from_str(&json).unwrap();
        assert_eq!(back, arch);
    }

    #[test]
    fn zero_stack_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = SupernetBank::new(&mut store, "blocks", 3, 8, false, &mut rng);
        let mut g = Graph::new();
        let ctx = seq_ctx(&mut g, 2, 5, &[5, 2]);
        let h0 = masked_input(&mut g, &mut rng, &ctx, 8);
        let mut binder = Binder::new(&store);
        let mut taps = DiceTaps::new();
        let out = stack_forward(
            &mut g,
            &mut binder,
            &bank,
            &BlockArchitecture::all_zero(3),
            h0,
            &ctx,
            &[],
            &mut taps,
        );
        assert_eq!(out.index(), h0.index(), "zero blocks must not touch the tape");
    }

    #[test]
    fn every_candidate_preserves_shape_and_mask() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = SupernetBank::new(&mut store, "blocks", 1, 8, true, &mut rng);
        let dice = bank.dice_states();
        for layer in nonzero_layer_choices(true) {
            for norm in NORMS {
                let mut g = Graph::new();
                let mut ctx = seq_ctx(&mut g, 2, 5, &[4, 2]);
                ctx.target = Some(g.constant(init::uniform(&mut rng, &[2, 8], -1.0, 1.0)));
                let h0 = masked_input(&mut g, &mut rng, &ctx, 8);
                let mut binder = Binder::new(&store);
                let mut taps = DiceTaps::new();
                let spec = BlockSpec { norm, layer, act: BlockAct::Swish };
                let out = block_forward(
                    &mut g, &mut binder, &bank, 0, &spec, h0, &ctx, &dice, &mut taps,
                );
                let v = g.value(out);
                assert_eq!(v.shape(), &[2, 5, 8], "{layer}");
                // padded rows stay exactly zero through the residual
                for ti in 4..5 {
                    for di in 0..8 {
                        assert_eq!(v.data()[(0 * 5 + ti) * 8 + di], 0.0, "{layer} {norm}");
                    }
                }
                for ti in 2..5 {
                    for di in 0..8 {
                        assert_eq!(v.data()[(5 + ti) * 8 + di], 0.0, "{layer} {norm}");
                    }
                }
            }
        }
    }

    #[test]
    fn compress_of_zero_stack_equals_masked_sum_and_last() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = SupernetBank::new(&mut store, "blocks", 2, 4, false, &mut rng);
        let mut g = Graph::new();
        let ctx = seq_ctx(&mut g, 2, 3, &[3, 1]);
        let h0 = masked_input(&mut g, &mut rng, &ctx, 4);
        let mut binder = Binder::new(&store);
        let mut taps = DiceTaps::new();
        let out = compress(&mut g, &mut binder, &bank, h0, &ctx, &[], &mut taps);
        let v = g.value(out).clone();
        assert_eq!(v.shape(), &[2, compress_width(4, false)]);
        let x = g.value(h0).clone();
        for bi in 0..2 {
            for di in 0..4 {
                let want: f64 = (0..3).map(|ti| x.data()[(bi * 3 + ti) * 4 + di]).sum();
                assert_eq!(v.data()[bi * 8 + di], want);
            }
            let last = ctx.last_idx[bi];
            for di in 0..4 {
                assert_eq!(v.data()[bi * 8 + 4 + di], x.data()[(bi * 3 + last) * 4 + di]);
            }
        }
    }
}
