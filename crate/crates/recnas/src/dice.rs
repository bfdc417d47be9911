//! Data-adaptive activation with running batch statistics.
//!
//! The normalization statistics are not trainable and are not part of
//! the tape: each forward reads the current running mean/variance as
//! constants and reports the pre-normalization values back through a
//! tap, and the training loop folds those into the running estimates.

use tensor::graph::Var;
use tensor::{Graph, Tensor};

pub const DICE_MOMENTUM: f64 = 0.99;
pub const DICE_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct DiceState {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiceState {
    pub fn new(width: usize) -> Self {
        DiceState {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// Restore saved running statistics (checkpoint path).
    pub fn load(&mut self, mean: &[f64], var: &[f64]) {
        assert_eq!(mean.len(), self.width(), "dice mean width mismatch");
        assert_eq!(var.len(), self.width(), "dice var width mismatch");
        self.mean.copy_from_slice(mean);
        self.var.copy_from_slice(var);
    }

    /// Fold one batch of pre-normalization values (rows of the tracked
    /// width, or a leading slice of it) into the running estimates.
    pub fn update(&mut self, values: &Tensor) {
        let d = values.last_dim();
        assert!(d <= self.width(), "dice update wider than tracked state");
        let rows = values.numel() / d;
        if rows == 0 {
            return;
        }
        for j in 0..d {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for r in 0..rows {
                let v = values.data()[r * d + j];
                s += v;
                s2 += v * v;
            }
            let m = s / rows as f64;
            let v = (s2 / rows as f64 - m * m).max(0.0);
            self.mean[j] = DICE_MOMENTUM * self.mean[j] + (1.0 - DICE_MOMENTUM) * m;
            self.var[j] = DICE_MOMENTUM * self.var[j] + (1.0 - DICE_MOMENTUM) * v;
        }
    }
}

/// Pre-normalization values recorded during a forward pass, keyed by
/// the owning model's dice slot index.
pub type DiceTaps = Vec<(usize, Var)>;

/// Apply the gated activation to `x` using slot `slot` of `states`,
/// recording the tap. `alpha` must match the last axis of `x`.
pub fn apply_dice(
    g: &mut Graph,
    taps: &mut DiceTaps,
    states: &[DiceState],
    slot: usize,
    x: Var,
    alpha: Var,
) -> Var {
    let d = g.value(x).last_dim();
    let st = &states[slot];
    taps.push((slot, x));
    g.dice(x, alpha, &st.mean()[..d], &st.var()[..d], DICE_EPS)
}

/// Drain one forward's taps into the running states.
pub fn absorb_taps(g: &Graph, taps: &DiceTaps, states: &mut [DiceState]) {
    for &(slot, v) in taps {
        states[slot].update(g.value(v));
    }
}
