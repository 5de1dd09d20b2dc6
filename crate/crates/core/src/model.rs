//! The full pipeline: encoder, band decomposition, preference mixing,
//! routing, experts and fusion, recorded on one tape per sample.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bands::{cached_masks, BandMaskSet, MaskKind, DEFAULT_BANDS, DEFAULT_GAMMA};
use crate::encoder::{reshape_shots, EncoderConfig, EncoderParams, Observation};
use crate::error::{invalid_config, invalid_input, Result};
use crate::experts::{fuse_on_tape, Expert, ExpertKind, FnoConfig, FnoParams, LnoConfig, LnoParams, MnoConfig, MnoParams, Readout};
use crate::params::{ParamId, ParamSet};
use crate::preference::{affinity_on_tape, FrequencyPreference, DEFAULT_ETA};
use crate::router::{gate_on_tape, RouterDecision, RouterKind, RouterParams, DEFAULT_AGG_HIDDEN, DEFAULT_DK, DEFAULT_TOP_K};
use crate::synth::TOY_SHOTS;
use crate::tensor::{Field2D, Tensor};

pub const DEFAULT_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output grid.
    pub h: usize,
    pub w: usize,
    pub n_shots: usize,
    pub n_time: usize,
    pub n_receivers: usize,
    pub channels: usize,
    pub encoder_dim: usize,
    pub encoder_mix_layers: usize,
    /// 0 picks the patch automatically.
    pub patch_h: usize,
    pub patch_w: usize,
    pub bands: usize,
    pub gamma: f64,
    pub mask_kind: MaskKind,
    pub normalized_masks: bool,
    pub eta: f64,
    pub top_k: usize,
    pub router: RouterKind,
    pub d_k: usize,
    pub agg_hidden: usize,
    pub fno: FnoConfig,
    pub mno: MnoConfig,
    pub lno: LnoConfig,
    /// Replaces every activation with the identity.
    pub linear: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Defaults for observations of `n_shots × n_time × n_receivers` mapped to `h × w`.
    pub fn new(h: usize, w: usize, n_shots: usize, n_time: usize, n_receivers: usize) -> Self {
        Self {
            h,
            w,
            n_shots,
            n_time,
            n_receivers,
            channels: DEFAULT_CHANNELS,
            encoder_dim: 16,
            encoder_mix_layers: 2,
            patch_h: 0,
            patch_w: 0,
            bands: DEFAULT_BANDS,
            gamma: DEFAULT_GAMMA,
            mask_kind: MaskKind::Soft,
            normalized_masks: false,
            eta: DEFAULT_ETA,
            top_k: DEFAULT_TOP_K,
            router: RouterKind::Spectral,
            d_k: DEFAULT_DK,
            agg_hidden: DEFAULT_AGG_HIDDEN,
            fno: FnoConfig::default(),
            mno: MnoConfig::default(),
            lno: LnoConfig::default(),
            linear: false,
            init_seed: 0,
        }
    }

    /// Geometry produced by `toy_observe` on `h × w` fields.
    pub fn toy(h: usize, w: usize) -> Self {
        let mut c = Self::new(h, w, TOY_SHOTS, h, w);
        c.fno.modes_h = c.fno.modes_h.min(h);
        c.fno.modes_w = c.fno.modes_w.min(w);
        c
    }

    fn encoder_config(&self) -> EncoderConfig {
        let mut e = EncoderConfig::new(self.n_shots, self.channels, self.h, self.w);
        e.patch_h = self.patch_h;
        e.patch_w = self.patch_w;
        e.dim = self.encoder_dim;
        e.mix_layers = self.encoder_mix_layers;
        e
    }

    pub fn masks(&self) -> Result<Arc<BandMaskSet>> {
        if self.normalized_masks {
            Ok(Arc::new(BandMaskSet::build(self.h, self.w, self.bands, self.gamma, self.mask_kind)?.normalized()))
        } else {
            cached_masks(self.h, self.w, self.bands, self.gamma, self.mask_kind)
        }
    }
}

/// Parameter handles of every stage plus the values they live in. The
/// layout is a pure function of the config, so a checkpoint only needs the
/// config and the tensor values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpamoeModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    /// Raw preference values, `[N_E]`.
    pub pref: ParamId,
    pub router: RouterParams,
    pub experts: Vec<Expert>,
    pub readout: Readout,
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// `[H, W]`.
    pub y_hat: Var,
    /// `[N_E]` router logits.
    pub logits: Var,
    /// `[top_k]` weights of `selected`.
    pub alpha: Var,
    pub selected: Vec<usize>,
    /// `[N_E, K]` band affinities.
    pub pi: Var,
}

impl ForwardPass {
    pub fn decision(&self) -> RouterDecision {
        RouterDecision {
            selected: self.selected.clone(),
            alpha: self.tape.value(self.alpha).data().to_vec(),
            logits: self.tape.value(self.logits).data().to_vec(),
        }
    }

    pub fn prediction(&self) -> Result<Field2D> {
        Field2D::from_tensor(self.tape.value(self.y_hat))
    }
}

impl SpamoeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.h < 2 || config.w < 2 {
            return Err(invalid_config("output grid must be at least 2x2"));
        }
        if config.top_k == 0 || config.top_k > ExpertKind::ALL.len() {
            return Err(invalid_config(format!("top_k must be in 1..={}, got {}", ExpertKind::ALL.len(), config.top_k)));
        }
        config.masks()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut ps = ParamSet::new();
        let enc_cfg = config.encoder_config();
        let (ph, pw) = enc_cfg.patch_for(config.n_time, config.n_shots * config.n_receivers)?;
        let encoder = EncoderParams::init(&mut ps, "encoder", enc_cfg, config.n_shots * ph * pw, &mut rng)?;
        let n_e = ExpertKind::ALL.len();
        let pref0 = FrequencyPreference::evenly_spaced(n_e, config.eta)?;
        let pref = ps.add("pref.raw", Tensor::new(vec![n_e], pref0.raw)?);
        let in_features = match config.router {
            RouterKind::Spectral => 1,
            RouterKind::Spatial => config.channels,
        };
        let router = RouterParams::init(&mut ps, "router", config.router, in_features, config.d_k, config.agg_hidden, n_e, &mut rng)?;
        let c = config.channels;
        let experts = vec![
            Expert::Fno(FnoParams::init(&mut ps, "fno", c, config.fno.clone(), &mut rng)?),
            Expert::Mno(MnoParams::init(&mut ps, "mno", c, config.mno.clone(), &mut rng)?),
            Expert::Lno(LnoParams::init(&mut ps, "lno", c, config.lno.clone(), &mut rng)?),
        ];
        let readout = Readout::init(&mut ps, "readout", c, &mut rng);
        Ok(Self { config, params: ps, encoder, pref, router, experts, readout })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn preferences(&self) -> FrequencyPreference {
        FrequencyPreference { raw: self.params.get(self.pref).data().to_vec(), eta: self.config.eta }
    }

    fn check_observation(&self, x: &Observation) -> Result<()> {
        let want = (self.config.n_shots, self.config.n_time, self.config.n_receivers);
        if x.dims() != want {
            return Err(invalid_input(format!("model expects a {want:?} observation, got {:?}", x.dims())));
        }
        Ok(())
    }

    /// Records the whole pipeline for one observation.
    pub fn forward_with_tape(&self, x: &Observation) -> Result<ForwardPass> {
        self.check_observation(x)?;
        let ps = &self.params;
        let linear = self.config.linear;
        let masks = self.config.masks()?;
        let mut tape = Tape::new();
        let pano = tape.constant(reshape_shots(x)?.to_tensor());
        let z = self.encoder.forward(&mut tape, ps, pano, linear)?;

        let zh = tape.dft(z)?;
        let mut bands = Vec::with_capacity(masks.len());
        for m in masks.masks() {
            let masked = tape.mul_planes(zh, Arc::new(m.clone()))?;
            bands.push(tape.idft_re(masked)?);
        }
        let raw = tape.param(ps, self.pref);
        let pi = affinity_on_tape(&mut tape, raw, masks.centers(), self.config.eta)?;

        let logits = self.router.logits(&mut tape, ps, z)?;
        let (selected, alpha) = gate_on_tape(&mut tape, logits, self.config.top_k)?;

        let mut outputs = Vec::with_capacity(selected.len());
        for &e in &selected {
            let ze = crate::preference::mix_on_tape(&mut tape, &bands, pi, e)?;
            outputs.push(self.experts[e].forward(&mut tape, ps, ze, linear)?);
        }
        let fused = fuse_on_tape(&mut tape, ps, alpha, &outputs, &self.readout)?;
        let y_hat = tape.reshape(fused, &[self.config.h, self.config.w])?;
        Ok(ForwardPass { tape, y_hat, logits, alpha, selected, pi })
    }

    /// Prediction and routing decision without keeping the tape.
    pub fn predict(&self, x: &Observation) -> Result<(Field2D, RouterDecision)> {
        let fp = self.forward_with_tape(x)?;
        Ok((fp.prediction()?, fp.decision()))
    }
}
