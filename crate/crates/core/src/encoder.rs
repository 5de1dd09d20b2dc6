//! Multi-shot observations, the trainable patch encoder and the bilinear
//! interpolation frontend it is compared against.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{invalid_config, invalid_input, Result};
use crate::fft::centered_freq;
use crate::metrics::RadialGrid;
use crate::params::{init_uniform, ParamId, ParamSet};
use crate::resample::{bilinear_maps, bilinear_matrix};
use crate::tensor::{Field2D, LatentTensor, Tensor};

/// Shots × time samples × receivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    n_shots: usize,
    n_time: usize,
    n_receivers: usize,
    data: Vec<f64>,
}

impl Observation {
    pub fn new(n_shots: usize, n_time: usize, n_receivers: usize, data: Vec<f64>) -> Result<Self> {
        if n_shots == 0 || n_time == 0 || n_receivers == 0 {
            return Err(invalid_input("observation dims must be positive"));
        }
        if data.len() != n_shots * n_time * n_receivers {
            return Err(invalid_input(format!(
                "{n_shots}x{n_time}x{n_receivers} observation needs {} values, got {}",
                n_shots * n_time * n_receivers,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid_input("observation contains non-finite values"));
        }
        Ok(Self { n_shots, n_time, n_receivers, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_shots, self.n_time, self.n_receivers)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, r: usize) -> f64 {
        self.data[(s * self.n_time + t) * self.n_receivers + r]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_shots, self.n_time, self.n_receivers], self.data.clone()).expect("validated dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [s, n, r] => Self::new(*s, *n, *r, t.data().to_vec()),
            s => Err(invalid_input(format!("expected shots x time x receivers, got {s:?}"))),
        }
    }

    /// Splits a panoramic `T × (N_s·N_r)` matrix back into shots.
    pub fn from_panorama(p: &Field2D, n_shots: usize) -> Result<Self> {
        let (t, width) = p.dims();
        if n_shots == 0 || width % n_shots != 0 {
            return Err(invalid_input(format!("width {width} is not a multiple of {n_shots} shots")));
        }
        let nr = width / n_shots;
        let mut data = Vec::with_capacity(t * width);
        for s in 0..n_shots {
            for i in 0..t {
                data.extend_from_slice(&p.data()[i * width + s * nr..i * width + (s + 1) * nr]);
            }
        }
        Self::new(n_shots, t, nr, data)
    }
}

/// Concatenates shots along the receiver axis, shot 0 first.
pub fn reshape_shots(x: &Observation) -> Result<Field2D> {
    let (ns, t, nr) = x.dims();
    let mut data = Vec::with_capacity(ns * t * nr);
    for i in 0..t {
        for s in 0..ns {
            let start = (s * t + i) * nr;
            data.extend_from_slice(&x.data[start..start + nr]);
        }
    }
    Field2D::new(t, ns * nr, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_shots: usize,
    /// Patch extent along time and receivers; 0 picks the smallest patch
    /// whose token grid does not exceed the output grid.
    pub patch_h: usize,
    pub patch_w: usize,
    pub dim: usize,
    pub mix_layers: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl EncoderConfig {
    pub fn new(n_shots: usize, channels: usize, out_h: usize, out_w: usize) -> Self {
        Self { n_shots, patch_h: 0, patch_w: 0, dim: 16, mix_layers: 2, channels, out_h, out_w }
    }

    /// Resolved patch size for a panoramic input of `t × width`.
    pub fn patch_for(&self, t: usize, width: usize) -> Result<(usize, usize)> {
        if self.n_shots == 0 || width % self.n_shots != 0 {
            return Err(invalid_config(format!("input width {width} is not a multiple of {} shots", self.n_shots)));
        }
        let nr = width / self.n_shots;
        let ph = if self.patch_h == 0 { t.div_ceil(self.out_h) } else { self.patch_h };
        let pw = if self.patch_w == 0 { nr.div_ceil(self.out_w) } else { self.patch_w };
        if ph == 0 || pw == 0 {
            return Err(invalid_config("patch size must be positive"));
        }
        Ok((ph, pw))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixLayer {
    pub kernel: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// Patch embedding, residual token mixing and a resize-plus-projection head.
///
/// A patch gathers `patch_h × patch_w` samples from every shot at the same
/// time/receiver window, so shots become embedding features and the token
/// grid follows the receiver geometry. Inputs are zero-padded at the bottom
/// and right to whole patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub mix: Vec<MixLayer>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl EncoderParams {
    /// `patch_features` is `n_shots · patch_h · patch_w` for the inputs the
    /// encoder will see.
    pub fn init(ps: &mut ParamSet, prefix: &str, config: EncoderConfig, patch_features: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if config.dim == 0 || config.channels == 0 || config.out_h < 2 || config.out_w < 2 || patch_features == 0 {
            return Err(invalid_config("encoder sizes must be positive and the output at least 2x2"));
        }
        let d = config.dim;
        let embed_w = ps.add(format!("{prefix}.embed_w"), init_uniform(&[d, patch_features], patch_features, rng));
        let embed_b = ps.add(format!("{prefix}.embed_b"), Tensor::zeros(&[d]));
        let mix = (0..config.mix_layers)
            .map(|l| MixLayer {
                kernel: ps.add(format!("{prefix}.mix.{l}.kernel"), init_uniform(&[d, 3, 3], 9, rng)),
                w: ps.add(format!("{prefix}.mix.{l}.w"), init_uniform(&[d, d], d, rng)),
                b: ps.add(format!("{prefix}.mix.{l}.b"), Tensor::zeros(&[d])),
            })
            .collect();
        let head_w = ps.add(format!("{prefix}.head_w"), init_uniform(&[config.channels, d], d, rng));
        let head_b = ps.add(format!("{prefix}.head_b"), Tensor::zeros(&[config.channels]));
        Ok(Self { config, embed_w, embed_b, mix, head_w, head_b })
    }

    /// Encodes a `[T, N_s·N_r]` node into `[C, out_h, out_w]`.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, linear: bool) -> Result<Var> {
        let (t, width) = match tape.shape(x) {
            [t, w] => (*t, *w),
            s => return Err(invalid_input(format!("encoder expects a 2D panorama, got {s:?}"))),
        };
        let (ph, pw) = self.config.patch_for(t, width)?;
        let ns = self.config.n_shots;
        let features = ns * ph * pw;
        if ps.get(self.embed_w).shape()[1] != features {
            return Err(invalid_config(format!(
                "encoder was built for {} patch features, input gives {features}",
                ps.get(self.embed_w).shape()[1]
            )));
        }
        let nr = width / ns;
        let (th, tw) = (t.div_ceil(ph), nr.div_ceil(pw));
        let idx = Arc::new(patch_index(t, width, ns, ph, pw));
        let patches = tape.gather(x, idx, &[features, th, tw])?;
        let ew = tape.param(ps, self.embed_w);
        let eb = tape.param(ps, self.embed_b);
        let mut v = tape.pointwise(patches, ew, Some(eb))?;
        for layer in &self.mix {
            let k = tape.param(ps, layer.kernel);
            let u = tape.depthwise_conv(v, k)?;
            let w = tape.param(ps, layer.w);
            let b = tape.param(ps, layer.b);
            let u = tape.pointwise(u, w, Some(b))?;
            let u = if linear { u } else { tape.silu(u) };
            v = tape.add(v, u)?;
        }
        let (oh, ow) = (self.config.out_h, self.config.out_w);
        if (th, tw) != (oh, ow) {
            let (rh, rw) = bilinear_maps(th, tw, oh, ow)?;
            v = tape.resample(v, rh, rw)?;
        }
        let hw = tape.param(ps, self.head_w);
        let hb = tape.param(ps, self.head_b);
        tape.pointwise(v, hw, Some(hb))
    }
}

/// Source index of every `(feature, token_row, token_col)` entry; `None`
/// marks zero padding.
fn patch_index(t: usize, width: usize, ns: usize, ph: usize, pw: usize) -> Vec<Option<usize>> {
    let nr = width / ns;
    let (th, tw) = (t.div_ceil(ph), nr.div_ceil(pw));
    let mut idx = Vec::with_capacity(ns * ph * pw * th * tw);
    for s in 0..ns {
        for a in 0..ph {
            for b in 0..pw {
                for ti in 0..th {
                    for tj in 0..tw {
                        let (row, r) = (ti * ph + a, tj * pw + b);
                        idx.push((row < t && r < nr).then(|| row * width + s * nr + r));
                    }
                }
            }
        }
    }
    idx
}

/// Runs the encoder on a panoramic input outside of training.
pub fn proxy_encode(x: &Field2D, p: &EncoderParams, ps: &ParamSet) -> Result<LatentTensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.to_tensor());
    let z = p.forward(&mut tape, ps, v, false)?;
    LatentTensor::from_tensor(tape.value(z))
}

/// Measured diagonal frequency response of a bilinear down-up cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpResponse {
    pub response: Field2D,
    pub alpha_hat: f64,
    pub beta_hat: f64,
}

impl InterpResponse {
    /// `(α̂/β̂)²`, the factor bounding how much the cycle can raise HL.
    pub fn bound(&self) -> f64 {
        (self.alpha_hat / self.beta_hat).powi(2)
    }
}

/// Diagonal response of a 1D linear map at every centered frequency:
/// the map applied to `e^{2πikx/n}`, projected back onto the same exponential.
fn diagonal_response_1d(m: &Matrix) -> Vec<Complex64> {
    let n = m.cols;
    (0..n)
        .map(|i| {
            let k = centered_freq(i, n);
            let e = |x: usize| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * ((k * x as i64).rem_euclid(n as i64)) as f64 / n as f64);
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..n {
                let mut row = Complex64::new(0.0, 0.0);
                for b in 0..n {
                    row += e(b) * m.at(a, b);
                }
                acc += e(a).conj() * row;
            }
            acc / n as f64
        })
        .collect()
}

/// Drives `up ∘ down` with unit complex exponentials and records the output
/// amplitude at the probe frequency. The cycle is separable, so the 2D
/// response is the product of the row and column responses.
pub fn measure_interp_response(h: usize, w: usize, mid_h: usize, mid_w: usize, grid: &RadialGrid) -> Result<InterpResponse> {
    if grid.dims() != (h, w) {
        return Err(invalid_config(format!("grid is {:?}, expected {h}x{w}", grid.dims())));
    }
    if mid_h < 2 || mid_w < 2 || mid_h > h || mid_w > w || (mid_h == h && mid_w == w) {
        return Err(invalid_config(format!("{mid_h}x{mid_w} is not a lossy intermediate size for {h}x{w}")));
    }
    let cycle = |n: usize, m: usize| -> Result<Matrix> {
        let down = bilinear_matrix(n, m)?;
        let up = bilinear_matrix(m, n)?;
        Ok(Matrix { rows: n, cols: n, data: crate::autodiff::matmul_raw(&up.data, &down.data, n, m, n) })
    };
    let rh = diagonal_response_1d(&cycle(h, mid_h)?);
    let rw = diagonal_response_1d(&cycle(w, mid_w)?);
    let mut resp = Vec::with_capacity(h * w);
    let (mut alpha, mut beta) = (0.0f64, f64::INFINITY);
    for (i, a) in rh.iter().enumerate() {
        for (j, b) in rw.iter().enumerate() {
            let v = (a * b).norm();
            if grid.is_high(i * w + j) {
                alpha = alpha.max(v);
            } else {
                beta = beta.min(v);
            }
            resp.push(v);
        }
    }
    Ok(InterpResponse { response: Field2D::new(h, w, resp)?, alpha_hat: alpha, beta_hat: beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::dft_oracle;
    use crate::resample::down_up;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_geometry_shape() {
        let x = Observation::new(5, 1000, 70, vec![0.0; 5 * 1000 * 70]).unwrap();
        assert_eq!(reshape_shots(&x).unwrap().dims(), (1000, 350));
    }

    #[test]
    fn single_shot_unchanged_and_layout() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = Observation::new(1, 3, 4, data.clone()).unwrap();
        assert_eq!(reshape_shots(&x).unwrap().data(), &data[..]);

        let (a, b) = (1.5, -2.0);
        let x = Observation::new(2, 2, 3, [vec![a; 6], vec![b; 6]].concat()).unwrap();
        let p = reshape_shots(&x).unwrap();
        for i in 0..2 {
            let row: Vec<f64> = (0..6).map(|j| p.get(i, j)).collect();
            assert_eq!(row, vec![a, a, a, b, b, b]);
        }
    }

    #[test]
    fn panorama_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Observation::new(3, 5, 4, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let back = Observation::from_panorama(&reshape_shots(&x).unwrap(), 3).unwrap();
        assert_eq!(back, x);
    }

    fn encoder(cfg: EncoderConfig, t: usize, width: usize, seed: u64) -> (ParamSet, EncoderParams) {
        let (ph, pw) = cfg.patch_for(t, width).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.n_shots * ph * pw;
        let p = EncoderParams::init(&mut ps, "enc", cfg, f, &mut rng).unwrap();
        (ps, p)
    }

    #[test]
    fn zero_input_zero_output() {
        let (ps, p) = encoder(EncoderConfig::new(2, 3, 8, 8), 10, 12, 2);
        let z = proxy_encode(&Field2D::constant(10, 12, 0.0).unwrap(), &p, &ps).unwrap();
        assert_eq!(z.dims(), (3, 8, 8));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_geometry_output_shape() {
        let mut cfg = EncoderConfig::new(5, 8, 70, 70);
        cfg.dim = 4;
        cfg.mix_layers = 1;
        let (ps, p) = encoder(cfg, 1000, 350, 3);
        assert_eq!(p.config.patch_for(1000, 350).unwrap(), (15, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Field2D::from_fn(1000, 350, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        assert_eq!(proxy_encode(&x, &p, &ps).unwrap().dims(), (8, 70, 70));
    }

    #[test]
    fn patch_gather_pads_bottom_right() {
        // 3x4 input, 2 shots of 2 receivers, 2x2 patches -> 2x1 tokens, 8 features.
        let idx = patch_index(3, 4, 2, 2, 2);
        assert_eq!(idx.len(), 8 * 2);
        // shot 1, a=0, b=1: feature 5; token (0,0) reads row 0, column 2+1.
        assert_eq!(idx[5 * 2], Some(3));
        // shot 0, a=1, b=0, token (1,0) reads row 3, which is padding.
        assert_eq!(idx[2 * 2 + 1], None);
    }

    #[test]
    fn mismatched_patch_features_rejected() {
        let (ps, p) = encoder(EncoderConfig::new(2, 3, 4, 4), 8, 8, 5);
        let err = proxy_encode(&Field2D::constant(8, 12, 1.0).unwrap(), &p, &ps);
        assert!(err.is_err());
    }

    #[test]
    fn dc_probe_is_one_and_nyquist_is_attenuated() {
        let grid = RadialGrid::new(70, 70, 0.25).unwrap();
        let r = measure_interp_response(70, 70, 35, 35, &grid).unwrap();
        assert!((r.response.get(35, 35) - 1.0).abs() < 1e-14);
        assert!(r.response.get(0, 0) < 0.1);
    }

    #[test]
    fn separable_response_matches_direct_probe() {
        let (h, w, mh, mw) = (8, 6, 5, 4);
        let grid = RadialGrid::new(h, w, 0.25).unwrap();
        let r = measure_interp_response(h, w, mh, mw, &grid).unwrap();
        for ci in 0..h {
            for cj in 0..w {
                let (ki, kj) = (centered_freq(ci, h), centered_freq(cj, w));
                let phase = |i: usize, j: usize| {
                    2.0 * std::f64::consts::PI * (ki as f64 * i as f64 / h as f64 + kj as f64 * j as f64 / w as f64)
                };
                let re = Field2D::from_fn(h, w, |i, j| phase(i, j).cos()).unwrap();
                let im = Field2D::from_fn(h, w, |i, j| phase(i, j).sin()).unwrap();
                let sr = dft_oracle(&down_up(&re, mh, mw).unwrap()).unwrap();
                let si = dft_oracle(&down_up(&im, mh, mw).unwrap()).unwrap();
                let coef = (sr.get(ci, cj) + Complex64::i() * si.get(ci, cj)) / (h * w) as f64;
                assert!((coef.norm() - r.response.get(ci, cj)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_mid_sizes_rejected() {
        let grid = RadialGrid::new(8, 8, 0.25).unwrap();
        assert!(measure_interp_response(8, 8, 8, 8, &grid).is_err());
        assert!(measure_interp_response(8, 8, 1, 4, &grid).is_err());
        assert!(measure_interp_response(8, 8, 9, 4, &grid).is_err());
    }
}
