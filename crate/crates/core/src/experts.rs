//! Operator experts and the gated fusion of their outputs.
//!
//! * FNO: truncated spectral channel mixing plus a pointwise skip path.
//! * MNO: parallel branches at several resolutions, each a depthwise kernel
//!   followed by a pointwise map, summed after upsampling.
//! * LNO: a shared `(2ρ+1)²` stencil per channel followed by channel mixing.
//!
//! All experts map `[C, H, W]` to `[C, H, W]`. Layers are separated by SiLU;
//! the last layer is linear. With `linear = true` every activation becomes
//! the identity, which makes bias-free experts homogeneous.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid_config, invalid_input, Result};
use crate::params::{init_uniform, ParamId, ParamSet};
use crate::resample::{area_maps, bilinear_maps};
use crate::router::RouterDecision;
use crate::tensor::{Field2D, LatentTensor, Tensor};

pub const MNO_DEFAULT_SCALES: [f64; 3] = [1.0, 0.6, 0.3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Fno,
    Mno,
    Lno,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::Fno, ExpertKind::Mno, ExpertKind::Lno];

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Fno => "fno",
            ExpertKind::Mno => "mno",
            ExpertKind::Lno => "lno",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub layers: usize,
    pub modes_h: usize,
    pub modes_w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnoConfig {
    pub layers: usize,
    pub scales: Vec<f64>,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnoConfig {
    pub layers: usize,
    pub radius: usize,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self { layers: 2, modes_h: 16, modes_w: 16 }
    }
}

impl Default for MnoConfig {
    fn default() -> Self {
        Self { layers: 2, scales: MNO_DEFAULT_SCALES.to_vec(), kernel: 3 }
    }
}

impl Default for LnoConfig {
    fn default() -> Self {
        Self { layers: 2, radius: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnoLayer {
    /// `[2, C, C, modes_h·modes_w]` complex weights.
    pub spectral: ParamId,
    pub skip_w: ParamId,
    pub skip_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnoParams {
    pub config: FnoConfig,
    pub channels: usize,
    pub layers: Vec<FnoLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnoBranch {
    pub scale: f64,
    pub kernel: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnoParams {
    pub config: MnoConfig,
    pub channels: usize,
    /// `layers[l][s]` is branch `s` of layer `l`.
    pub layers: Vec<Vec<MnoBranch>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnoLayer {
    pub stencil: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnoParams {
    pub config: LnoConfig,
    pub channels: usize,
    pub layers: Vec<LnoLayer>,
}

/// Flat indices of the `mh × mw` block of bins around the centered DC bin.
pub fn retained_modes(h: usize, w: usize, mh: usize, mw: usize) -> Result<Vec<usize>> {
    if mh == 0 || mw == 0 || mh > h || mw > w {
        return Err(invalid_config(format!("{mh}x{mw} modes do not fit a {h}x{w} grid")));
    }
    let (r0, c0) = (h / 2 - mh / 2, w / 2 - mw / 2);
    Ok((r0..r0 + mh).flat_map(|i| (c0..c0 + mw).map(move |j| i * w + j)).collect())
}

fn check_layers(layers: usize, channels: usize) -> Result<()> {
    if layers == 0 || channels == 0 {
        return Err(invalid_config("experts need at least one layer and one channel"));
    }
    Ok(())
}

fn activate(tape: &mut Tape, v: Var, last: bool, linear: bool) -> Var {
    if last || linear {
        v
    } else {
        tape.silu(v)
    }
}

fn latent_dims(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(x) {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(invalid_input(format!("expected [C, H, W], got {s:?}"))),
    }
}

impl FnoParams {
    pub fn init(ps: &mut ParamSet, prefix: &str, channels: usize, config: FnoConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        check_layers(config.layers, channels)?;
        let m = config.modes_h * config.modes_w;
        if m == 0 {
            return Err(invalid_config("FNO needs at least one retained mode"));
        }
        let layers = (0..config.layers)
            .map(|l| {
                let spec = Tensor::from_fn(&[2, channels, channels, m], |_| rng.random_range(-1.0..1.0) / channels as f64);
                FnoLayer {
                    spectral: ps.add(format!("{prefix}.{l}.spectral"), spec),
                    skip_w: ps.add(format!("{prefix}.{l}.skip_w"), init_uniform(&[channels, channels], channels, rng)),
                    skip_b: ps.add(format!("{prefix}.{l}.skip_b"), Tensor::zeros(&[channels])),
                }
            })
            .collect();
        Ok(Self { config, channels, layers })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, linear: bool) -> Result<Var> {
        let (_, h, w) = latent_dims(tape, x)?;
        let modes = Arc::new(retained_modes(h, w, self.config.modes_h, self.config.modes_w)?);
        let mut v = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let spec = tape.param(ps, layer.spectral);
            let vh = tape.dft(v)?;
            let mixed = tape.spectral_mix(vh, spec, Arc::clone(&modes))?;
            let global = tape.idft_re(mixed)?;
            let sw = tape.param(ps, layer.skip_w);
            let sb = tape.param(ps, layer.skip_b);
            let local = tape.pointwise(v, sw, Some(sb))?;
            let sum = tape.add(global, local)?;
            v = activate(tape, sum, l + 1 == self.layers.len(), linear);
        }
        Ok(v)
    }
}

/// Grid size of an MNO branch at scale `f`.
pub fn branch_size(n: usize, f: f64) -> usize {
    ((n as f64 * f).round() as usize).max(1)
}

impl MnoParams {
    pub fn init(ps: &mut ParamSet, prefix: &str, channels: usize, config: MnoConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        check_layers(config.layers, channels)?;
        if config.kernel % 2 == 0 {
            return Err(invalid_config(format!("MNO kernel size must be odd, got {}", config.kernel)));
        }
        if config.scales.is_empty() || config.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(invalid_config(format!("MNO scales must lie in (0, 1], got {:?}", config.scales)));
        }
        let k = config.kernel;
        let layers = (0..config.layers)
            .map(|l| {
                config
                    .scales
                    .iter()
                    .enumerate()
                    .map(|(s, &scale)| MnoBranch {
                        scale,
                        kernel: ps.add(format!("{prefix}.{l}.{s}.kernel"), init_uniform(&[channels, k, k], k * k, rng)),
                        w: ps.add(format!("{prefix}.{l}.{s}.w"), init_uniform(&[channels, channels], channels, rng)),
                        b: ps.add(format!("{prefix}.{l}.{s}.b"), Tensor::zeros(&[channels])),
                    })
                    .collect()
            })
            .collect();
        Ok(Self { config, channels, layers })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, linear: bool) -> Result<Var> {
        let (_, h, w) = latent_dims(tape, x)?;
        let k = self.config.kernel;
        let mut v = x;
        for (l, branches) in self.layers.iter().enumerate() {
            let mut acc: Option<Var> = None;
            for br in branches {
                let (hs, ws) = (branch_size(h, br.scale), branch_size(w, br.scale));
                if hs < k || ws < k {
                    return Err(invalid_config(format!(
                        "scale {} gives a {hs}x{ws} grid, smaller than the {k}x{k} kernel",
                        br.scale
                    )));
                }
                let resized = (hs, ws) != (h, w);
                let mut u = v;
                if resized {
                    let (rh, rw) = area_maps(h, w, hs, ws)?;
                    u = tape.resample(u, rh, rw)?;
                }
                let kern = tape.param(ps, br.kernel);
                u = tape.depthwise_conv(u, kern)?;
                let pw = tape.param(ps, br.w);
                let pb = tape.param(ps, br.b);
                u = tape.pointwise(u, pw, Some(pb))?;
                if resized {
                    let (rh, rw) = bilinear_maps(hs, ws, h, w)?;
                    u = tape.resample(u, rh, rw)?;
                }
                acc = Some(match acc {
                    None => u,
                    Some(a) => tape.add(a, u)?,
                });
            }
            let sum = acc.ok_or_else(|| invalid_config("MNO layer without branches"))?;
            v = activate(tape, sum, l + 1 == self.layers.len(), linear);
        }
        Ok(v)
    }
}

impl LnoParams {
    pub fn init(ps: &mut ParamSet, prefix: &str, channels: usize, config: LnoConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        check_layers(config.layers, channels)?;
        if config.radius == 0 {
            return Err(invalid_config("LNO radius must be at least 1"));
        }
        let k = 2 * config.radius + 1;
        let layers = (0..config.layers)
            .map(|l| LnoLayer {
                stencil: ps.add(format!("{prefix}.{l}.stencil"), init_uniform(&[channels, k, k], k * k, rng)),
                w: ps.add(format!("{prefix}.{l}.w"), init_uniform(&[channels, channels], channels, rng)),
                b: ps.add(format!("{prefix}.{l}.b"), Tensor::zeros(&[channels])),
            })
            .collect();
        Ok(Self { config, channels, layers })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, linear: bool) -> Result<Var> {
        let (_, h, w) = latent_dims(tape, x)?;
        let k = 2 * self.config.radius + 1;
        if k > h || k > w {
            return Err(invalid_config(format!("radius {} needs at least a {k}x{k} grid, got {h}x{w}", self.config.radius)));
        }
        let mut v = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let st = tape.param(ps, layer.stencil);
            let u = tape.depthwise_conv(v, st)?;
            let pw = tape.param(ps, layer.w);
            let pb = tape.param(ps, layer.b);
            let u = tape.pointwise(u, pw, Some(pb))?;
            v = activate(tape, u, l + 1 == self.layers.len(), linear);
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expert {
    Fno(FnoParams),
    Mno(MnoParams),
    Lno(LnoParams),
}

impl Expert {
    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::Fno(_) => ExpertKind::Fno,
            Expert::Mno(_) => ExpertKind::Mno,
            Expert::Lno(_) => ExpertKind::Lno,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, linear: bool) -> Result<Var> {
        match self {
            Expert::Fno(p) => p.forward(tape, ps, x, linear),
            Expert::Mno(p) => p.forward(tape, ps, x, linear),
            Expert::Lno(p) => p.forward(tape, ps, x, linear),
        }
    }

    /// Evaluates the expert on a latent tensor outside of training.
    pub fn apply(&self, ps: &ParamSet, z: &LatentTensor, linear: bool) -> Result<LatentTensor> {
        let mut tape = Tape::new();
        let x = tape.constant(z.to_tensor());
        let y = self.forward(&mut tape, ps, x, linear)?;
        LatentTensor::from_tensor(tape.value(y))
    }
}

pub fn fno_forward(z: &LatentTensor, p: &FnoParams, ps: &ParamSet) -> Result<LatentTensor> {
    Expert::Fno(p.clone()).apply(ps, z, false)
}

pub fn mno_forward(z: &LatentTensor, p: &MnoParams, ps: &ParamSet) -> Result<LatentTensor> {
    Expert::Mno(p.clone()).apply(ps, z, false)
}

pub fn lno_forward(z: &LatentTensor, p: &LnoParams, ps: &ParamSet) -> Result<LatentTensor> {
    Expert::Lno(p.clone()).apply(ps, z, false)
}

/// Shared `C → 1` readout applied after fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub w: ParamId,
    pub b: ParamId,
}

impl Readout {
    pub fn init(ps: &mut ParamSet, prefix: &str, channels: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            w: ps.add(format!("{prefix}.w"), init_uniform(&[1, channels], channels, rng)),
            b: ps.add(format!("{prefix}.b"), Tensor::zeros(&[1])),
        }
    }
}

/// Records `readout(Σ_i α_i · outputs[i])`, returning a `[1, H, W]` node.
pub fn fuse_on_tape(tape: &mut Tape, ps: &ParamSet, alpha: Var, outputs: &[Var], readout: &Readout) -> Result<Var> {
    if outputs.len() != tape.value(alpha).len() {
        return Err(invalid_input(format!("{} weights for {} expert outputs", tape.value(alpha).len(), outputs.len())));
    }
    let mut acc: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        let a = tape.select(alpha, &[i])?;
        let term = tape.scalar_mul(a, o)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    let mixed = acc.ok_or_else(|| invalid_input("no expert outputs to fuse"))?;
    let w = tape.param(ps, readout.w);
    let b = tape.param(ps, readout.b);
    tape.pointwise(mixed, w, Some(b))
}

/// Convex combination of the selected experts' outputs, then an optional
/// `C → 1` readout given as `(weights, bias)`. Without a readout the outputs
/// must be single-channel. `outputs[i]` belongs to `decision.selected[i]`.
pub fn moe_fuse(decision: &RouterDecision, outputs: &[LatentTensor], readout: Option<(&[f64], f64)>) -> Result<Field2D> {
    if outputs.len() != decision.selected.len() {
        return Err(invalid_input(format!(
            "{} experts selected but {} outputs given",
            decision.selected.len(),
            outputs.len()
        )));
    }
    let first = outputs.first().ok_or_else(|| invalid_input("no expert outputs to fuse"))?;
    let (c, h, w) = first.dims();
    let mut mixed = vec![0.0; c * h * w];
    for (o, &a) in outputs.iter().zip(&decision.alpha) {
        if o.dims() != (c, h, w) {
            return Err(invalid_input("expert outputs differ in shape"));
        }
        for (m, v) in mixed.iter_mut().zip(o.data()) {
            *m += a * v;
        }
    }
    let n = h * w;
    let out = match readout {
        Some((wts, bias)) => {
            if wts.len() != c {
                return Err(invalid_input(format!("readout has {} weights for {c} channels", wts.len())));
            }
            (0..n).map(|p| bias + (0..c).map(|ch| wts[ch] * mixed[ch * n + p]).sum::<f64>()).collect()
        }
        None if c == 1 => mixed,
        None => return Err(invalid_input("multichannel outputs need a readout")),
    };
    Field2D::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{dft_oracle, idft_oracle};
    use crate::Spectrum2D;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_latent(c: usize, h: usize, w: usize, seed: u64) -> LatentTensor {
        let mut r = rng(seed);
        LatentTensor::new(c, h, w, (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fill(ps: &mut ParamSet, id: ParamId, v: f64) {
        ps.get_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
    }

    #[test]
    fn mode_block_is_centered() {
        assert_eq!(retained_modes(4, 4, 2, 2).unwrap(), vec![5, 6, 9, 10]);
        assert_eq!(retained_modes(5, 5, 1, 1).unwrap(), vec![12]);
        assert_eq!(retained_modes(3, 3, 3, 3).unwrap().len(), 9);
        assert!(retained_modes(8, 8, 9, 2).is_err());
    }

    #[test]
    fn fno_zero_weights_zero_output() {
        let mut ps = ParamSet::new();
        let p = FnoParams::init(&mut ps, "fno", 2, FnoConfig { layers: 2, modes_h: 4, modes_w: 4 }, &mut rng(1)).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            fill(&mut ps, id, 0.0);
        }
        let out = fno_forward(&random_latent(2, 8, 8, 2), &p, &ps).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fno_full_mode_identity() {
        let mut ps = ParamSet::new();
        let c = 2;
        let p = FnoParams::init(&mut ps, "fno", c, FnoConfig { layers: 1, modes_h: 6, modes_w: 8 }, &mut rng(3)).unwrap();
        let l = &p.layers[0];
        fill(&mut ps, l.skip_w, 0.0);
        let m = 48;
        let spec = ps.get_mut(l.spectral).data_mut();
        spec.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..c {
            for mi in 0..m {
                spec[(ch * c + ch) * m + mi] = 1.0;
            }
        }
        let z = random_latent(c, 6, 8, 4);
        let out = fno_forward(&z, &p, &ps).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-10);
    }

    #[test]
    fn fno_single_mode_matches_oracle_composition() {
        let mut ps = ParamSet::new();
        let p = FnoParams::init(&mut ps, "fno", 1, FnoConfig { layers: 1, modes_h: 1, modes_w: 5 }, &mut rng(5)).unwrap();
        let l = &p.layers[0];
        fill(&mut ps, l.skip_w, 0.0);
        let weight = Complex64::new(0.7, -0.2);
        // Block columns are kj = -2..=2; keep only kj = +2.
        let spec = ps.get_mut(l.spectral).data_mut();
        spec.iter_mut().for_each(|v| *v = 0.0);
        spec[4] = weight.re;
        spec[5 + 4] = weight.im;
        let u = Field2D::from_fn(8, 8, |_, j| (2.0 * PI * 2.0 * j as f64 / 8.0).cos()).unwrap();
        let out = fno_forward(&LatentTensor::from_field(&u), &p, &ps).unwrap();

        let s = dft_oracle(&u).unwrap();
        let kept: Vec<Complex64> =
            (0..64).map(|idx| if idx == 4 * 8 + 6 { s.data()[idx] * weight } else { Complex64::new(0.0, 0.0) }).collect();
        let inv = idft_oracle(&Spectrum2D::new(8, 8, kept).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(&inv) {
            assert!((a - b.re).abs() < 1e-12);
        }
    }

    #[test]
    fn fno_symmetric_pair_scales_cosine() {
        let mut ps = ParamSet::new();
        let p = FnoParams::init(&mut ps, "fno", 1, FnoConfig { layers: 1, modes_h: 1, modes_w: 5 }, &mut rng(6)).unwrap();
        fill(&mut ps, p.layers[0].skip_w, 0.0);
        let spec = ps.get_mut(p.layers[0].spectral).data_mut();
        spec.iter_mut().for_each(|v| *v = 0.0);
        spec[0] = 1.5;
        spec[4] = 1.5;
        let u = Field2D::from_fn(8, 8, |_, j| (2.0 * PI * 2.0 * j as f64 / 8.0).cos()).unwrap();
        let out = fno_forward(&LatentTensor::from_field(&u), &p, &ps).unwrap();
        for (a, b) in out.data().iter().zip(u.data()) {
            assert!((a - 1.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn mno_identity_branch() {
        let mut ps = ParamSet::new();
        let cfg = MnoConfig { layers: 1, scales: vec![1.0], kernel: 1 };
        let p = MnoParams::init(&mut ps, "mno", 2, cfg, &mut rng(7)).unwrap();
        let br = &p.layers[0][0];
        fill(&mut ps, br.kernel, 1.0);
        let w = ps.get_mut(br.w).data_mut();
        w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let z = random_latent(2, 8, 8, 8);
        assert!(mno_forward(&z, &p, &ps).unwrap().max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn mno_zero_kernels_zero_output() {
        let mut ps = ParamSet::new();
        let cfg = MnoConfig { layers: 2, scales: vec![1.0, 0.5], kernel: 3 };
        let p = MnoParams::init(&mut ps, "mno", 2, cfg, &mut rng(9)).unwrap();
        for layer in &p.layers {
            for br in layer {
                fill(&mut ps, br.kernel, 0.0);
            }
        }
        let out = mno_forward(&random_latent(2, 8, 8, 10), &p, &ps).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    /// Zero-padded cross-correlation by direct summation.
    fn naive_conv(x: &[f64], h: usize, w: usize, k: &[f64], r: usize) -> Vec<f64> {
        let kw = 2 * r + 1;
        let mut out = vec![0.0; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut s = 0.0;
                for a in -(r as isize)..=r as isize {
                    for b in -(r as isize)..=r as isize {
                        let (y, x2) = (i + a, j + b);
                        if y >= 0 && y < h as isize && x2 >= 0 && x2 < w as isize {
                            s += k[((a + r as isize) as usize) * kw + (b + r as isize) as usize] * x[y as usize * w + x2 as usize];
                        }
                    }
                }
                out[i as usize * w + j as usize] = s;
            }
        }
        out
    }

    #[test]
    fn mno_constant_field_convolution() {
        let mut ps = ParamSet::new();
        let cfg = MnoConfig { layers: 1, scales: vec![1.0], kernel: 3 };
        let p = MnoParams::init(&mut ps, "mno", 1, cfg, &mut rng(11)).unwrap();
        let br = &p.layers[0][0];
        fill(&mut ps, br.w, 1.0);
        let kern = ps.get(br.kernel).data().to_vec();
        let ksum: f64 = kern.iter().sum();
        let u = Field2D::constant(8, 8, 2.0).unwrap();
        let out = mno_forward(&LatentTensor::from_field(&u), &p, &ps).unwrap();
        let oracle = naive_conv(u.data(), 8, 8, &kern, 1);
        for i in 0..8 {
            for j in 0..8 {
                let v = out.data()[i * 8 + j];
                assert!((v - oracle[i * 8 + j]).abs() < 1e-12);
                if (1..7).contains(&i) && (1..7).contains(&j) {
                    assert!((v - 2.0 * ksum).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mno_rejects_grids_smaller_than_kernel() {
        let mut ps = ParamSet::new();
        let p = MnoParams::init(&mut ps, "mno", 1, MnoConfig::default(), &mut rng(12)).unwrap();
        let err = mno_forward(&random_latent(1, 8, 8, 13), &p, &ps).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidConfig(_)));
        assert!(mno_forward(&random_latent(1, 16, 16, 13), &p, &ps).is_ok());
    }

    #[test]
    fn lno_delta_stencil_and_zero_stencil() {
        let mut ps = ParamSet::new();
        let p = LnoParams::init(&mut ps, "lno", 1, LnoConfig { layers: 2, radius: 1 }, &mut rng(14)).unwrap();
        for l in &p.layers {
            let s = ps.get_mut(l.stencil).data_mut();
            s.iter_mut().for_each(|v| *v = 0.0);
            s[4] = 1.0;
            fill(&mut ps, l.w, 1.0);
        }
        let z = random_latent(1, 6, 7, 15);
        assert!(Expert::Lno(p.clone()).apply(&ps, &z, true).unwrap().max_abs_diff(&z) < 1e-15);
        for l in &p.layers {
            fill(&mut ps, l.stencil, 0.0);
        }
        assert!(lno_forward(&z, &p, &ps).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lno_matches_neighborhood_sum() {
        let mut ps = ParamSet::new();
        let p = LnoParams::init(&mut ps, "lno", 1, LnoConfig { layers: 1, radius: 1 }, &mut rng(16)).unwrap();
        fill(&mut ps, p.layers[0].w, 1.0);
        let stencil = ps.get(p.layers[0].stencil).data().to_vec();
        let z = random_latent(1, 7, 9, 17);
        let out = lno_forward(&z, &p, &ps).unwrap();
        let oracle = naive_conv(z.data(), 7, 9, &stencil, 1);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = LnoParams::init(&mut ps, "lno2", 1, LnoConfig { layers: 1, radius: 4 }, &mut rng(18)).unwrap();
        assert!(lno_forward(&z, &big, &ps).is_err());
    }

    fn all_experts(ps: &mut ParamSet, c: usize) -> Vec<Expert> {
        let mut r = rng(19);
        vec![
            Expert::Fno(FnoParams::init(ps, "fno", c, FnoConfig { layers: 2, modes_h: 4, modes_w: 4 }, &mut r).unwrap()),
            Expert::Mno(MnoParams::init(ps, "mno", c, MnoConfig { layers: 2, scales: vec![1.0, 0.5], kernel: 3 }, &mut r).unwrap()),
            Expert::Lno(LnoParams::init(ps, "lno", c, LnoConfig::default(), &mut r).unwrap()),
        ]
    }

    #[test]
    fn linear_mode_is_homogeneous() {
        let mut ps = ParamSet::new();
        let experts = all_experts(&mut ps, 2);
        let z = random_latent(2, 8, 8, 20);
        for e in &experts {
            let a = e.apply(&ps, &z, true).unwrap();
            let b = e.apply(&ps, &z.scaled(-3.5), true).unwrap();
            assert!(a.scaled(-3.5).max_abs_diff(&b) < 1e-10, "{:?}", e.kind());
        }
    }

    #[test]
    fn expert_gradients_match_finite_differences() {
        let mut ps = ParamSet::new();
        let experts = all_experts(&mut ps, 1);
        for id in ps.ids().collect::<Vec<_>>() {
            if ps.name(id).ends_with(".b") || ps.name(id).ends_with("skip_b") {
                let mut r = rng(id.0 as u64);
                ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            }
        }
        let z = random_latent(1, 8, 8, 21);
        let target = random_latent(1, 8, 8, 22);
        let loss_of = |ps: &ParamSet, e: &Expert| -> (f64, Tape, Var) {
            let mut tape = Tape::new();
            let x = tape.constant(z.to_tensor());
            let y = e.forward(&mut tape, ps, x, false).unwrap();
            let t = tape.constant(target.to_tensor());
            let d = tape.sub(y, t).unwrap();
            let sq = tape.square(d);
            let l = tape.sum(sq);
            (tape.value(l).data()[0], tape, l)
        };
        for e in &experts {
            let (_, mut tape, l) = loss_of(&ps, e);
            let grads = tape.backward(l).unwrap();
            let prefix = e.kind().name();
            for id in ps.group(prefix) {
                let g = grads.param(id).expect("used");
                let mut num = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let h = 1e-6;
                    let mut p1 = ps.clone();
                    p1.get_mut(id).data_mut()[i] += h;
                    let mut p2 = ps.clone();
                    p2.get_mut(id).data_mut()[i] -= h;
                    num[i] = (loss_of(&p1, e).0 - loss_of(&p2, e).0) / (2.0 * h);
                }
                let diff: f64 = g.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                assert!(diff / norm < 1e-4, "{}: rel err {}", ps.name(id), diff / norm);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let d = RouterDecision { selected: vec![1], alpha: vec![1.0], logits: vec![0.0, 1.0] };
        let u = random_latent(1, 4, 4, 23);
        let f = moe_fuse(&d, &[u.clone()], None).unwrap();
        assert_eq!(f, u.plane_field(0).unwrap());

        let d = RouterDecision { selected: vec![0, 2], alpha: vec![0.5, 0.5], logits: vec![0.0; 3] };
        let f = moe_fuse(&d, &[u.clone(), u.scaled(-1.0)], None).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));

        let d = RouterDecision { selected: vec![0, 2], alpha: vec![0.73106, 0.26894], logits: vec![0.0; 3] };
        let ones = LatentTensor::new(1, 3, 3, vec![1.0; 9]).unwrap();
        let twos = LatentTensor::new(1, 3, 3, vec![2.0; 9]).unwrap();
        let f = moe_fuse(&d, &[ones, twos], None).unwrap();
        assert!(f.data().iter().all(|&v| (v - 1.26894).abs() < 1e-12));

        assert!(moe_fuse(&d, &[u.clone()], None).is_err());
        let multi = random_latent(2, 4, 4, 24);
        assert!(moe_fuse(&RouterDecision { selected: vec![0], alpha: vec![1.0], logits: vec![0.0] }, &[multi], None).is_err());
    }

    #[test]
    fn fusion_is_permutation_consistent() {
        let a = random_latent(3, 4, 4, 25);
        let b = random_latent(3, 4, 4, 26);
        let ro = [0.2, -0.4, 0.9];
        let d1 = RouterDecision { selected: vec![0, 1], alpha: vec![0.3, 0.7], logits: vec![0.0; 2] };
        let d2 = RouterDecision { selected: vec![1, 0], alpha: vec![0.7, 0.3], logits: vec![0.0; 2] };
        let f1 = moe_fuse(&d1, &[a.clone(), b.clone()], Some((&ro, 0.1))).unwrap();
        let f2 = moe_fuse(&d2, &[b, a], Some((&ro, 0.1))).unwrap();
        assert!(f1.max_abs_diff(&f2) < 1e-15);
    }
}
