//! Spectral-energy attention router and Top-k gating.
//!
//! Every frequency bin is a token whose one feature is the amplitude
//! `A(ω) = √(mean_c |ẑ_c(ω)|²)`, scaled by `1/√(HW)` so token magnitudes
//! match the field's RMS. Tokens go through one single-head attention layer,
//! a two-layer per-token scorer, and a mean over tokens that yields the
//! expert logits `g`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{invalid_config, invalid_input, Result};
use crate::params::{init_uniform, ParamId, ParamSet};
use crate::tensor::{Field2D, LatentTensor, Tensor};

pub const DEFAULT_DK: usize = 16;
pub const DEFAULT_AGG_HIDDEN: usize = 32;
pub const DEFAULT_TOP_K: usize = 2;

/// Which features the router's tokens carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    /// One token per frequency bin, feature = spectral amplitude.
    Spectral,
    /// One token per pixel, features = the latent channels.
    Spatial,
}

impl std::str::FromStr for RouterKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Self::Spectral),
            "spatial" => Ok(Self::Spatial),
            other => Err(invalid_config(format!("unknown router kind `{other}`"))),
        }
    }
}

/// Parameter handles of one router inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub kind: RouterKind,
    pub in_features: usize,
    pub d_k: usize,
    pub hidden: usize,
    pub n_experts: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl RouterParams {
    /// Registers freshly initialized router weights under `prefix`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        ps: &mut ParamSet,
        prefix: &str,
        kind: RouterKind,
        in_features: usize,
        d_k: usize,
        hidden: usize,
        n_experts: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if d_k == 0 || hidden == 0 || n_experts == 0 || in_features == 0 {
            return Err(invalid_config("router sizes must be positive"));
        }
        let wq = ps.add(format!("{prefix}.wq"), init_uniform(&[in_features, d_k], in_features, rng));
        let wk = ps.add(format!("{prefix}.wk"), init_uniform(&[in_features, d_k], in_features, rng));
        let wv = ps.add(format!("{prefix}.wv"), init_uniform(&[in_features, d_k], in_features, rng));
        let w1 = ps.add(format!("{prefix}.w1"), init_uniform(&[d_k, hidden], d_k, rng));
        let b1 = ps.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let w2 = ps.add(format!("{prefix}.w2"), init_uniform(&[hidden, n_experts], hidden, rng));
        let b2 = ps.add(format!("{prefix}.b2"), Tensor::zeros(&[n_experts]));
        Ok(Self { kind, in_features, d_k, hidden, n_experts, wq, wk, wv, w1, b1, w2, b2 })
    }

    /// Attention and scoring over a `[T, in_features]` token matrix; returns `g`.
    pub fn logits_from_tokens(&self, tape: &mut Tape, ps: &ParamSet, tokens: Var) -> Result<Var> {
        let wq = tape.param(ps, self.wq);
        let wk = tape.param(ps, self.wk);
        let wv = tape.param(ps, self.wv);
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(tokens, wk)?;
        let v = tape.matmul(tokens, wv)?;
        let att = tape.attention(q, k, v, 1.0 / (self.d_k as f64).sqrt())?;
        let w1 = tape.param(ps, self.w1);
        let b1 = tape.param(ps, self.b1);
        let hid = tape.matmul(att, w1)?;
        let hid = tape.add_bias(hid, b1)?;
        let hid = tape.silu(hid);
        let w2 = tape.param(ps, self.w2);
        let b2 = tape.param(ps, self.b2);
        let scores = tape.matmul(hid, w2)?;
        let scores = tape.add_bias(scores, b2)?;
        tape.mean_rows(scores)
    }

    /// Expert logits for a `[C, H, W]` latent node, using this router's kind.
    pub fn logits(&self, tape: &mut Tape, ps: &ParamSet, z: Var) -> Result<Var> {
        let tokens = match self.kind {
            RouterKind::Spectral => spectral_tokens(tape, z)?,
            RouterKind::Spatial => spatial_tokens(tape, z)?,
        };
        if tape.shape(tokens)[1] != self.in_features {
            return Err(invalid_input(format!(
                "router expects {} token features, got {}",
                self.in_features,
                tape.shape(tokens)[1]
            )));
        }
        self.logits_from_tokens(tape, ps, tokens)
    }
}

/// Records the amplitude map `√(mean_c |ẑ_c|²)` as an `[H, W]` node.
pub fn energy_map_on_tape(tape: &mut Tape, z: Var) -> Result<Var> {
    let (c, h, w) = match tape.shape(z) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(invalid_input(format!("expected [C, H, W], got {s:?}"))),
    };
    let zh = tape.dft(z)?;
    let p = tape.power(zh)?;
    let p = tape.reshape(p, &[c, h * w])?;
    let p = tape.mean_rows(p)?;
    let a = tape.sqrt(p);
    tape.reshape(a, &[h, w])
}

/// `[H·W, 1]` tokens of the normalized amplitude map.
pub fn spectral_tokens(tape: &mut Tape, z: Var) -> Result<Var> {
    let a = energy_map_on_tape(tape, z)?;
    let (h, w) = (tape.shape(a)[0], tape.shape(a)[1]);
    let a = tape.scale(a, 1.0 / ((h * w) as f64).sqrt());
    tape.reshape(a, &[h * w, 1])
}

/// `[H·W, C]` tokens of the latent itself.
pub fn spatial_tokens(tape: &mut Tape, z: Var) -> Result<Var> {
    let (c, h, w) = match tape.shape(z) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(invalid_input(format!("expected [C, H, W], got {s:?}"))),
    };
    let flat = tape.reshape(z, &[c, h * w])?;
    tape.transpose(flat)
}

/// The centered amplitude map of `z`, averaged over channels.
pub fn energy_map(z: &LatentTensor) -> Result<Field2D> {
    let mut tape = Tape::new();
    let v = tape.constant(z.to_tensor());
    let a = energy_map_on_tape(&mut tape, v)?;
    Field2D::from_tensor(tape.value(a))
}

/// Logits `g` for an amplitude map, as the spectral router computes them.
pub fn spectral_attention(a: &Field2D, p: &RouterParams, ps: &ParamSet) -> Result<Vec<f64>> {
    let (h, w) = a.dims();
    let mut tape = Tape::new();
    let scaled = a.to_tensor().map(|v| v / ((h * w) as f64).sqrt());
    let tokens = tape.constant(scaled.reshaped(&[h * w, 1])?);
    let g = p.logits_from_tokens(&mut tape, ps, tokens)?;
    Ok(tape.value(g).data().to_vec())
}

/// Selected experts, their mixing weights and the raw logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub selected: Vec<usize>,
    pub alpha: Vec<f64>,
    pub logits: Vec<f64>,
}

impl RouterDecision {
    /// Weight of expert `e`, zero when it was not selected.
    pub fn weight_of(&self, e: usize) -> f64 {
        self.selected.iter().position(|&s| s == e).map_or(0.0, |i| self.alpha[i])
    }
}

/// Indices of the `k` largest logits, larger first; equal logits go to the
/// lower index.
pub fn top_k(g: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > g.len() {
        return Err(invalid_config(format!("top-k needs 1 ≤ k ≤ {}, got {k}", g.len())));
    }
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Top-k selection followed by a softmax over the selected logits.
pub fn gate(g: &[f64], k: usize) -> Result<RouterDecision> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(invalid_input("non-finite router logits"));
    }
    let selected = top_k(g, k)?;
    let mut alpha: Vec<f64> = selected.iter().map(|&i| g[i]).collect();
    softmax_in_place(&mut alpha);
    Ok(RouterDecision { selected, alpha, logits: g.to_vec() })
}

/// Records the gate: the selection is read from values, `α` stays on the tape.
pub fn gate_on_tape(tape: &mut Tape, g: Var, k: usize) -> Result<(Vec<usize>, Var)> {
    let selected = top_k(tape.value(g).data(), k)?;
    let picked = tape.select(g, &selected)?;
    Ok((selected, tape.softmax_last(picked)))
}

/// Routes `z` with the given router, whichever kind it is.
pub fn route(z: &LatentTensor, p: &RouterParams, ps: &ParamSet, k: usize) -> Result<RouterDecision> {
    let mut tape = Tape::new();
    let v = tape.constant(z.to_tensor());
    let g = p.logits(&mut tape, ps, v)?;
    gate(tape.value(g).data(), k)
}

/// The spatial-feature baseline router.
pub fn spatial_gate(z: &LatentTensor, p: &RouterParams, ps: &ParamSet, k: usize) -> Result<RouterDecision> {
    if p.kind != RouterKind::Spatial {
        return Err(invalid_config("spatial_gate needs a spatial router"));
    }
    route(z, p, ps, k)
}
