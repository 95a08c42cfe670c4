//! Recurrent attentive refinement of a feature map.
//!
//! Each step gates the (hidden-state-fused) input with a spatial attention
//! distribution, then feeds the reweighted map through a convolutional LSTM
//! cell. Cascading T steps over the same feature map progressively sharpens
//! what the cell remembers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ConvKernel, ParamId, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::{Shape, Tensor};

/// How the hidden state folds back into the input between steps. Addition
/// preserves the channel count so one parameter set serves every step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    #[default]
    Add,
}

#[derive(Clone, Copy, Debug)]
pub struct RannConfig {
    /// Cascade depth T (number of attend + cell iterations).
    pub depth: usize,
    /// Feature channels C.
    pub channels: usize,
    /// One parameter set shared across steps (true) or one per step.
    pub tied: bool,
    pub fusion: FusionMode,
}

impl RannConfig {
    pub fn new(depth: usize, channels: usize, tied: bool) -> Result<RannConfig> {
        if depth == 0 {
            return Err(Error::Input("cascade depth must be >= 1".into()));
        }
        if channels == 0 {
            return Err(Error::Input("channel count must be >= 1".into()));
        }
        Ok(RannConfig { depth, channels, tied, fusion: FusionMode::Add })
    }
}

/// Attention gate kernels: two C->C 3x3 convolutions, a C->1 1x1 reducer,
/// and a per-channel bias.
pub struct AttentionParams {
    pub w_a: ConvKernel,
    pub u_a: ConvKernel,
    pub r_a: ConvKernel,
    pub b_a: ParamId,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<AttentionParams> {
        let w_a = ConvKernel::new(store, &format!("{prefix}/w_a"), channels, channels, 3, 3, false, rng)?;
        let u_a = ConvKernel::new(store, &format!("{prefix}/u_a"), channels, channels, 3, 3, false, rng)?;
        let r_a = ConvKernel::new(store, &format!("{prefix}/r_a"), 1, channels, 1, 1, false, rng)?;
        let b_a = store.add(
            &format!("{prefix}/b_a"),
            Tensor::zeros(Shape::new(1, channels, 1, 1)?),
        )?;
        Ok(AttentionParams { w_a, u_a, r_a, b_a })
    }
}

/// Per-gate kernels of the convolutional LSTM cell: W_k on the refined input,
/// U_k on the previous hidden state, and a bias b_k, for k in {i, f, o, g}.
pub struct GateParams {
    pub w: ConvKernel,
    pub u: ConvKernel,
    pub b: ParamId,
}

pub struct CellParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub output: GateParams,
    pub cell: GateParams,
}

impl CellParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<CellParams> {
        let gate = |store: &mut ParamStore, name: &str, rng: &mut _, bias_init: f64| -> Result<GateParams> {
            let w = ConvKernel::new(store, &format!("{prefix}/w_{name}"), channels, channels, 3, 3, false, rng)?;
            let u = ConvKernel::new(store, &format!("{prefix}/u_{name}"), channels, channels, 3, 3, false, rng)?;
            let b = store.add(
                &format!("{prefix}/b_{name}"),
                Tensor::filled(Shape::new(1, channels, 1, 1)?, bias_init),
            )?;
            Ok(GateParams { w, u, b })
        };
        Ok(CellParams {
            input: gate(store, "i", rng, 0.0)?,
            // forget gate starts open so early steps retain memory
            forget: gate(store, "f", rng, 1.0)?,
            output: gate(store, "o", rng, 0.0)?,
            cell: gate(store, "g", rng, 0.0)?,
        })
    }
}

/// Parameters for the whole cascade: one step set when tied, T sets otherwise.
pub struct RannParams {
    pub steps: Vec<(AttentionParams, CellParams)>,
}

impl RannParams {
    pub fn new(
        store: &mut ParamStore,
        cfg: &RannConfig,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<RannParams> {
        let sets = if cfg.tied { 1 } else { cfg.depth };
        let mut steps = Vec::with_capacity(sets);
        for s in 0..sets {
            let p = if cfg.tied {
                format!("{prefix}/shared")
            } else {
                format!("{prefix}/step{s}")
            };
            steps.push((
                AttentionParams::new(store, &format!("{p}/att"), cfg.channels, rng)?,
                CellParams::new(store, &format!("{p}/cell"), cfg.channels, rng)?,
            ));
        }
        Ok(RannParams { steps })
    }

    fn step(&self, t: usize) -> &(AttentionParams, CellParams) {
        if self.steps.len() == 1 {
            &self.steps[0]
        } else {
            &self.steps[t]
        }
    }
}

/// Hidden and memory maps of the cell, both (n, C, h, w).
#[derive(Clone, Copy, Debug)]
pub struct RannState {
    pub h: Val,
    pub c_mem: Val,
}

/// Attention gate: A = softmax(R_a * tanh(W_a*X + U_a*H + b_a)) over spatial
/// positions, and X_tilde = (h*w) * A (.) X broadcast over channels. The h*w
/// factor keeps the expected magnitude of X_tilde equal to X under uniform
/// attention, so deep cascades do not shrink activations.
pub fn attend(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Val,
    h_prev: Val,
    p: &AttentionParams,
) -> Result<(Val, Val)> {
    let xs = tape.value(x).shape();
    if tape.value(h_prev).shape() != xs {
        return Err(Error::Shape(format!(
            "attend: input {} and hidden {} shapes differ",
            xs,
            tape.value(h_prev).shape()
        )));
    }
    let wx = p.w_a.apply_same(tape, bound, x)?;
    let uh = p.u_a.apply_same(tape, bound, h_prev)?;
    let pre = tape.add(wx, uh)?;
    let pre = tape.add(pre, bound.val(p.b_a))?;
    let t = tape.tanh(pre)?;
    let logits = p.r_a.apply(tape, bound, t, 1, 0)?;
    let a = tape.spatial_softmax(logits)?;
    let weighted = tape.hadamard(x, a)?;
    let x_tilde = tape.affine(weighted, xs.spatial() as f64, 0.0)?;
    Ok((a, x_tilde))
}

/// One convolutional LSTM update:
///   I,F,O = sigmoid(W_k*X_tilde + U_k*H + b_k), G = tanh(...),
///   C_t = F (.) C_{t-1} + I (.) G, H_t = O (.) tanh(C_t).
pub fn ann_step(
    tape: &mut Tape,
    bound: &BoundParams,
    x_tilde: Val,
    state: &RannState,
    p: &CellParams,
) -> Result<RannState> {
    let pre = |tape: &mut Tape, g: &GateParams| -> Result<Val> {
        let wx = g.w.apply_same(tape, bound, x_tilde)?;
        let uh = g.u.apply_same(tape, bound, state.h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, bound.val(g.b))
    };
    let i_pre = pre(tape, &p.input)?;
    let i = tape.sigmoid(i_pre)?;
    let f_pre = pre(tape, &p.forget)?;
    let f = tape.sigmoid(f_pre)?;
    let o_pre = pre(tape, &p.output)?;
    let o = tape.sigmoid(o_pre)?;
    let g_pre = pre(tape, &p.cell)?;
    let g = tape.tanh(g_pre)?;
    let keep = tape.hadamard(f, state.c_mem)?;
    let write = tape.hadamard(i, g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new)?;
    let h_new = tape.hadamard(o, c_act)?;
    Ok(RannState { h: h_new, c_mem: c_new })
}

/// Final hidden state plus every step's attention map, for inspection.
pub struct RannTrace {
    pub output: Val,
    pub attentions: Vec<Val>,
}

/// Run the T-step cascade: state starts at zero; each step attends over
/// X + H_{t-1} (plain X at t=1 since H_0 = 0), updates the cell, and the
/// final hidden state H_T is the refined feature map.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Val,
    cfg: &RannConfig,
    params: &RannParams,
) -> Result<RannTrace> {
    let xs = tape.value(x).shape();
    if xs.c != cfg.channels {
        return Err(Error::Shape(format!(
            "rann expects {} channels, got {}",
            cfg.channels, xs.c
        )));
    }
    if !cfg.tied && params.steps.len() != cfg.depth {
        return Err(Error::Param(format!(
            "untied cascade needs {} parameter sets, has {}",
            cfg.depth,
            params.steps.len()
        )));
    }
    let mut state = RannState {
        h: tape.leaf(Tensor::zeros(xs)),
        c_mem: tape.leaf(Tensor::zeros(xs)),
    };
    let mut attentions = Vec::with_capacity(cfg.depth);
    for t in 0..cfg.depth {
        let (att, cell) = params.step(t);
        let fused = match cfg.fusion {
            FusionMode::Add => tape.add(x, state.h)?,
        };
        let (a, x_tilde) = attend(tape, bound, fused, state.h, att)?;
        state = ann_step(tape, bound, x_tilde, &state, cell)?;
        attentions.push(a);
    }
    Ok(RannTrace { output: state.h, attentions })
}
