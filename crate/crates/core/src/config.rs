//! Human-readable `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, repeated keys and
//! unparsable values are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bands::MaskKind;
use crate::error::{invalid_config, Result};
use crate::model::ModelConfig;
use crate::router::RouterKind;
use crate::synth::{FieldKind, ObserveMode};
use crate::train::{DataConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub warmup: usize,
    pub t0: usize,
    pub t_mult: usize,
    pub scheduler_gamma: f64,
    pub lambda_grad: f64,
    pub lambda_freq: f64,
    pub lambda_ce: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub bands: usize,
    pub gamma_band: f64,
    pub mask: MaskKind,
    pub normalized_masks: bool,
    pub eta: f64,
    pub top_k: usize,
    pub router: RouterKind,
    pub channels: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub d_k: usize,
    pub agg_hidden: usize,
    pub fno_layers: usize,
    pub fno_modes: usize,
    pub mno_layers: usize,
    pub mno_scales: Vec<f64>,
    pub mno_kernel: usize,
    pub lno_layers: usize,
    pub lno_radius: usize,
    pub r_split: f64,
    pub eps: f64,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub kinds: Vec<FieldKind>,
    pub observe: ObserveMode,
    pub data_seed: u64,
    pub init_seed: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::toy(64, 32, 32);
        let m = &t.model;
        Self {
            lr: t.schedule.base_lr,
            weight_decay: t.optim.weight_decay,
            batch: t.batch,
            epochs: t.epochs,
            max_steps: t.max_steps,
            warmup: t.schedule.warmup_epochs,
            t0: t.schedule.t0,
            t_mult: t.schedule.t_mult,
            scheduler_gamma: t.schedule.gamma,
            lambda_grad: t.weights.grad,
            lambda_freq: t.weights.freq,
            lambda_ce: t.weights.ce,
            lambda_l1: t.weights.l1,
            lambda_l2: t.weights.l2,
            bands: m.bands,
            gamma_band: m.gamma,
            mask: m.mask_kind,
            normalized_masks: m.normalized_masks,
            eta: m.eta,
            top_k: m.top_k,
            router: m.router,
            channels: m.channels,
            encoder_dim: m.encoder_dim,
            encoder_layers: m.encoder_mix_layers,
            d_k: m.d_k,
            agg_hidden: m.agg_hidden,
            fno_layers: m.fno.layers,
            fno_modes: 16,
            mno_layers: m.mno.layers,
            mno_scales: m.mno.scales.clone(),
            mno_kernel: m.mno.kernel,
            lno_layers: m.lno.layers,
            lno_radius: m.lno.radius,
            r_split: crate::metrics::DEFAULT_R_SPLIT,
            eps: crate::metrics::DEFAULT_EPS,
            samples: t.data.n_samples,
            height: t.data.h,
            width: t.data.w,
            kinds: t.data.kinds.clone(),
            observe: t.data.mode,
            data_seed: t.data.seed,
            init_seed: m.init_seed,
            seed: t.seed,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid_config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn kind_name(k: FieldKind) -> &'static str {
    match k {
        FieldKind::Layered => "layered",
        FieldKind::Curved => "curved",
        FieldKind::Fault => "fault",
        FieldKind::Broadband => "broadband",
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 44] = [
        "lr", "weight_decay", "batch", "epochs", "max_steps", "warmup", "t0", "t_mult", "scheduler_gamma",
        "lambda_grad", "lambda_freq", "lambda_ce", "lambda_l1", "lambda_l2", "bands", "gamma_band", "mask",
        "normalized_masks", "eta", "top_k", "router", "channels", "encoder_dim", "encoder_layers", "d_k",
        "agg_hidden", "fno_layers", "fno_modes", "mno_layers", "mno_scales", "mno_kernel", "lno_layers",
        "lno_radius", "r_split", "eps", "samples", "height", "width", "kinds", "observe", "data_seed",
        "init_seed", "seed", "size",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid_config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(invalid_config(format!("line {}: `{k}` given twice", n + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "t0" => self.t0 = parse(key, v)?,
            "t_mult" => self.t_mult = parse(key, v)?,
            "scheduler_gamma" => self.scheduler_gamma = parse(key, v)?,
            "lambda_grad" => self.lambda_grad = parse(key, v)?,
            "lambda_freq" => self.lambda_freq = parse(key, v)?,
            "lambda_ce" => self.lambda_ce = parse(key, v)?,
            "lambda_l1" => self.lambda_l1 = parse(key, v)?,
            "lambda_l2" => self.lambda_l2 = parse(key, v)?,
            "bands" => self.bands = parse(key, v)?,
            "gamma_band" => self.gamma_band = parse(key, v)?,
            "mask" => self.mask = v.parse()?,
            "normalized_masks" => self.normalized_masks = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "router" => self.router = v.parse()?,
            "channels" => self.channels = parse(key, v)?,
            "encoder_dim" => self.encoder_dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "d_k" => self.d_k = parse(key, v)?,
            "agg_hidden" => self.agg_hidden = parse(key, v)?,
            "fno_layers" => self.fno_layers = parse(key, v)?,
            "fno_modes" => self.fno_modes = parse(key, v)?,
            "mno_layers" => self.mno_layers = parse(key, v)?,
            "mno_scales" => self.mno_scales = parse_list(key, v)?,
            "mno_kernel" => self.mno_kernel = parse(key, v)?,
            "lno_layers" => self.lno_layers = parse(key, v)?,
            "lno_radius" => self.lno_radius = parse(key, v)?,
            "r_split" => self.r_split = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "size" => {
                let (h, w) = parse_size(v)?;
                self.height = h;
                self.width = w;
            }
            "kinds" => self.kinds = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            "observe" => self.observe = v.parse()?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(invalid_config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("lr", self.lr.to_string());
        line("weight_decay", self.weight_decay.to_string());
        line("batch", self.batch.to_string());
        line("epochs", self.epochs.to_string());
        line("max_steps", self.max_steps.to_string());
        line("warmup", self.warmup.to_string());
        line("t0", self.t0.to_string());
        line("t_mult", self.t_mult.to_string());
        line("scheduler_gamma", self.scheduler_gamma.to_string());
        line("lambda_grad", self.lambda_grad.to_string());
        line("lambda_freq", self.lambda_freq.to_string());
        line("lambda_ce", self.lambda_ce.to_string());
        line("lambda_l1", self.lambda_l1.to_string());
        line("lambda_l2", self.lambda_l2.to_string());
        line("bands", self.bands.to_string());
        line("gamma_band", self.gamma_band.to_string());
        line("mask", if self.mask == MaskKind::Soft { "soft" } else { "hard" }.into());
        line("normalized_masks", self.normalized_masks.to_string());
        line("eta", self.eta.to_string());
        line("top_k", self.top_k.to_string());
        line("router", if self.router == RouterKind::Spectral { "spectral" } else { "spatial" }.into());
        line("channels", self.channels.to_string());
        line("encoder_dim", self.encoder_dim.to_string());
        line("encoder_layers", self.encoder_layers.to_string());
        line("d_k", self.d_k.to_string());
        line("agg_hidden", self.agg_hidden.to_string());
        line("fno_layers", self.fno_layers.to_string());
        line("fno_modes", self.fno_modes.to_string());
        line("mno_layers", self.mno_layers.to_string());
        line("mno_scales", join(&self.mno_scales));
        line("mno_kernel", self.mno_kernel.to_string());
        line("lno_layers", self.lno_layers.to_string());
        line("lno_radius", self.lno_radius.to_string());
        line("r_split", self.r_split.to_string());
        line("eps", self.eps.to_string());
        line("samples", self.samples.to_string());
        line("height", self.height.to_string());
        line("width", self.width.to_string());
        line("kinds", self.kinds.iter().map(|k| kind_name(*k)).collect::<Vec<_>>().join(","));
        line(
            "observe",
            match self.observe {
                ObserveMode::Identity => "identity",
                ObserveMode::Bandlimit => "bandlimit",
                ObserveMode::Smear => "smear",
            }
            .into(),
        );
        line("data_seed", self.data_seed.to_string());
        line("init_seed", self.init_seed.to_string());
        line("seed", self.seed.to_string());
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::toy(self.height, self.width);
        m.channels = self.channels;
        m.encoder_dim = self.encoder_dim;
        m.encoder_mix_layers = self.encoder_layers;
        m.bands = self.bands;
        m.gamma = self.gamma_band;
        m.mask_kind = self.mask;
        m.normalized_masks = self.normalized_masks;
        m.eta = self.eta;
        m.top_k = self.top_k;
        m.router = self.router;
        m.d_k = self.d_k;
        m.agg_hidden = self.agg_hidden;
        m.fno.layers = self.fno_layers;
        m.fno.modes_h = self.fno_modes.min(self.height);
        m.fno.modes_w = self.fno_modes.min(self.width);
        m.mno.layers = self.mno_layers;
        m.mno.scales = self.mno_scales.clone();
        m.mno.kernel = self.mno_kernel;
        m.lno.layers = self.lno_layers;
        m.lno.radius = self.lno_radius;
        m.init_seed = self.init_seed;
        m
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::toy(self.samples, self.height, self.width);
        t.model = self.model_config();
        t.data = DataConfig {
            n_samples: self.samples,
            h: self.height,
            w: self.width,
            kinds: self.kinds.clone(),
            mode: self.observe,
            seed: self.data_seed,
        };
        t.schedule.base_lr = self.lr;
        t.schedule.warmup_epochs = self.warmup;
        t.schedule.t0 = self.t0;
        t.schedule.t_mult = self.t_mult;
        t.schedule.gamma = self.scheduler_gamma;
        t.optim.weight_decay = self.weight_decay;
        t.weights.grad = self.lambda_grad;
        t.weights.freq = self.lambda_freq;
        t.weights.ce = self.lambda_ce;
        t.weights.l1 = self.lambda_l1;
        t.weights.l2 = self.lambda_l2;
        t.batch = self.batch;
        t.epochs = self.epochs;
        t.max_steps = self.max_steps;
        t.seed = self.seed;
        t.validate()?;
        Ok(t)
    }
}

/// `HxW` or a single `N` for a square grid.
pub fn parse_size(v: &str) -> Result<(usize, usize)> {
    let v = v.trim();
    let (h, w) = match v.split_once(['x', 'X']) {
        Some((h, w)) => (parse("size", h.trim())?, parse("size", w.trim())?),
        None => {
            let n = parse("size", v)?;
            (n, n)
        }
    };
    if h < 2 || w < 2 {
        return Err(invalid_config(format!("size {v} is smaller than 2x2")));
    }
    Ok((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_tables() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.warmup, c.t0, c.t_mult, c.scheduler_gamma), (1e-4, 5, 10, 2, 0.3));
        assert_eq!((c.lambda_grad, c.lambda_freq, c.lambda_ce, c.lambda_l1, c.lambda_l2), (0.15, 0.10, 0.20, 0.60, 0.40));
        assert_eq!((c.top_k, c.gamma_band, c.eta), (2, 20.0, 10.0));
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let c = RunConfig::parse("# run\nlr = 3e-3\nsize = 16x24  # grid\nmask = hard\nkinds = fault, layered\n\n").unwrap();
        assert_eq!(c.lr, 3e-3);
        assert_eq!((c.height, c.width), (16, 24));
        assert_eq!(c.mask, MaskKind::Hard);
        assert_eq!(c.kinds, vec![FieldKind::Fault, FieldKind::Layered]);
        let t = c.train_config().unwrap();
        assert_eq!((t.model.h, t.model.w, t.model.n_receivers), (16, 24, 24));
    }

    #[test]
    fn rejects_unknown_repeated_and_bad_values() {
        assert!(RunConfig::parse("learning_rate = 1").is_err());
        assert!(RunConfig::parse("lr = 1\nlr = 2").is_err());
        assert!(RunConfig::parse("batch = many").is_err());
        assert!(RunConfig::parse("just text").is_err());
        assert!(RunConfig::parse("size = 1x5").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("mno_scales", "1,0.5").unwrap();
        c.set("router", "spatial").unwrap();
        c.set("observe", "smear").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        let text = c.to_text();
        for key in RunConfig::KEYS.iter().filter(|k| **k != "size") {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} ="))), "{key} missing");
        }
    }
}
