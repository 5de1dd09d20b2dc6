//! Per-expert frequency preferences and the band affinity they induce.
//!
//! Expert `e` holds an unconstrained raw value; its preference is
//! `f_e = σ(raw_e) ∈ [0, 1]`. The affinity to band `k` is
//! `π_{e,k} = softmax_k(−η (f_e − c_k)²)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_in_place, Tape, Var};
use crate::error::{invalid_config, invalid_input, Result};
use crate::tensor::LatentTensor;

pub const DEFAULT_ETA: f64 = 10.0;

/// Raw values are kept within this magnitude at initialization so that the
/// end experts start near 0 and 1 without an infinite logit.
const INIT_LOGIT_CLAMP: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPreference {
    pub raw: Vec<f64>,
    pub eta: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl FrequencyPreference {
    /// Preferences spread evenly over `[0, 1]`: expert `e` starts at `e/(N_E−1)`.
    pub fn evenly_spaced(n_experts: usize, eta: f64) -> Result<Self> {
        if n_experts == 0 {
            return Err(invalid_config("need at least one expert"));
        }
        check_eta(eta)?;
        let raw = (0..n_experts)
            .map(|e| {
                let f = if n_experts == 1 { 0.5 } else { e as f64 / (n_experts - 1) as f64 };
                logit(f).clamp(-INIT_LOGIT_CLAMP, INIT_LOGIT_CLAMP)
            })
            .collect();
        Ok(Self { raw, eta })
    }

    /// Builds raw values reproducing the given preferences; 0 and 1 map to
    /// infinite logits, which `σ` evaluates exactly.
    pub fn from_values(f: &[f64], eta: f64) -> Result<Self> {
        check_eta(eta)?;
        if let Some(v) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid_input(format!("preference {v} outside [0, 1]")));
        }
        Ok(Self { raw: f.iter().map(|&v| logit(v)).collect(), eta })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn affinity(&self, centers: &[f64]) -> Vec<Vec<f64>> {
        band_affinity(&self.values(), centers, self.eta)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(invalid_config(format!("eta must be positive, got {eta}")));
    }
    Ok(())
}

/// `π_{e,k}` rows for preferences `f`.
pub fn band_affinity(f: &[f64], centers: &[f64], eta: f64) -> Vec<Vec<f64>> {
    f.iter()
        .map(|&fe| {
            let mut row: Vec<f64> = centers.iter().map(|c| -eta * (fe - c) * (fe - c)).collect();
            softmax_in_place(&mut row);
            row
        })
        .collect()
}

/// `z̃_e = Σ_k π_{e,k} z_k`.
pub fn mix_bands(bands: &[LatentTensor], pi_e: &[f64]) -> Result<LatentTensor> {
    if bands.is_empty() || bands.len() != pi_e.len() {
        return Err(invalid_input(format!("{} bands but {} weights", bands.len(), pi_e.len())));
    }
    let (c, h, w) = bands[0].dims();
    let mut out = vec![0.0; c * h * w];
    for (b, &p) in bands.iter().zip(pi_e) {
        if b.dims() != (c, h, w) {
            return Err(invalid_input("bands differ in shape"));
        }
        for (o, v) in out.iter_mut().zip(b.data()) {
            *o += p * v;
        }
    }
    LatentTensor::new(c, h, w, out)
}

/// Gradient of `Σ_{e,k} upstream[e][k] · π_{e,k}` with respect to the raw
/// preference values.
pub fn affinity_gradient(pref: &FrequencyPreference, centers: &[f64], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
    if upstream.len() != pref.len() || upstream.iter().any(|r| r.len() != centers.len()) {
        return Err(invalid_input("upstream shape does not match N_E x K"));
    }
    let f = pref.values();
    let pi = band_affinity(&f, centers, pref.eta);
    Ok(f.iter()
        .zip(&pi)
        .zip(upstream)
        .map(|((&fe, row), up)| {
            let mean: f64 = row.iter().zip(up).map(|(p, u)| p * u).sum();
            let dfe: f64 = row
                .iter()
                .zip(up)
                .zip(centers)
                .map(|((p, u), c)| p * (u - mean) * (-2.0 * pref.eta * (fe - c)))
                .sum();
            dfe * fe * (1.0 - fe)
        })
        .collect())
}

/// Records `π` as an `[N_E, K]` node from a raw `[N_E]` node.
pub fn affinity_on_tape(tape: &mut Tape, raw: Var, centers: &[f64], eta: f64) -> Result<Var> {
    let f = tape.sigmoid(raw);
    let d = tape.outer_sub(f, centers.to_vec())?;
    let sq = tape.square(d);
    let s = tape.scale(sq, -eta);
    Ok(tape.softmax_last(s))
}

/// Records `Σ_k π[e, k] · bands[k]`.
pub fn mix_on_tape(tape: &mut Tape, bands: &[Var], pi: Var, e: usize) -> Result<Var> {
    let k = bands.len();
    let mut acc: Option<Var> = None;
    for (j, &b) in bands.iter().enumerate() {
        let w = tape.select(pi, &[e * k + j])?;
        let term = tape.scalar_mul(w, b)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| invalid_input("no bands to mix"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::band_centers;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midway_two_bands_is_even() {
        let pi = band_affinity(&[0.5], &[0.0, 1.0], 10.0);
        assert!((pi[0][0] - 0.5).abs() < 1e-15 && (pi[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn low_preference_three_bands() {
        let c = band_centers(3).unwrap();
        let pi = band_affinity(&[0.0], &c, 10.0);
        let s = [0.0f64, -2.5, -10.0];
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            assert!((pi[0][k] - s[k].exp() / z).abs() < 1e-15);
        }
        assert!((pi[0][0] - 0.924103).abs() < 1e-6);
        assert!((pi[0][1] - 0.075855).abs() < 1e-6);
    }

    #[test]
    fn huge_eta_is_one_hot() {
        let c = band_centers(3).unwrap();
        let pi = band_affinity(&[0.5], &c, 1e6);
        assert!((pi[0][1] - 1.0).abs() < 1e-12);
        assert!(pi[0][0] < 1e-12 && pi[0][2] < 1e-12);
    }

    #[test]
    fn evenly_spaced_init_orders_experts() {
        let p = FrequencyPreference::evenly_spaced(3, 10.0).unwrap();
        let f = p.values();
        let end = 1.0 / (1.0 + 3f64.exp());
        assert!((f[0] - end).abs() < 1e-15 && (f[1] - 0.5).abs() < 1e-15 && (f[2] - (1.0 - end)).abs() < 1e-15);
        assert!(p.raw.iter().all(|r| r.is_finite()));
        for (e, row) in p.affinity(&[0.0, 0.5, 1.0]).iter().enumerate() {
            let best = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, e);
        }
    }

    #[test]
    fn from_values_round_trips() {
        let p = FrequencyPreference::from_values(&[0.0, 0.3, 1.0], 10.0).unwrap();
        let f = p.values();
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 0.3).abs() < 1e-15);
        assert_eq!(f[2], 1.0);
        assert!(FrequencyPreference::from_values(&[1.5], 10.0).is_err());
        assert!(FrequencyPreference::from_values(&[0.5], 0.0).is_err());
    }

    fn constant_band(v: f64) -> LatentTensor {
        LatentTensor::new(1, 2, 2, vec![v; 4]).unwrap()
    }

    #[test]
    fn mixing_examples() {
        let bands = [constant_band(4.0), constant_band(8.0)];
        let m = mix_bands(&bands, &[0.25, 0.75]).unwrap();
        assert!(m.data().iter().all(|&v| v == 7.0));
        let one_hot = mix_bands(&bands, &[0.0, 1.0]).unwrap();
        assert_eq!(one_hot, bands[1]);
        assert!(mix_bands(&bands, &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = FrequencyPreference::from_values(&[0.2, 0.7], 10.0).unwrap();
        let c = band_centers(3).unwrap();
        let g = affinity_gradient(&p, &c, &vec![vec![0.0; 3]; 2]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn centered_preference_with_symmetric_upstream_is_stationary() {
        let p = FrequencyPreference::from_values(&[0.5], 10.0).unwrap();
        let c = band_centers(3).unwrap();
        let g = affinity_gradient(&p, &c, &[vec![1.3, -0.2, 1.3]]).unwrap();
        assert!(g[0].abs() < 1e-15);
    }

    fn objective(raw: &[f64], eta: f64, c: &[f64], up: &[Vec<f64>]) -> f64 {
        let p = FrequencyPreference { raw: raw.to_vec(), eta };
        p.affinity(c)
            .iter()
            .zip(up)
            .map(|(r, u)| r.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let k = rng.random_range(2..6);
            let ne = rng.random_range(1..5);
            let c = band_centers(k).unwrap();
            let raw: Vec<f64> = (0..ne).map(|_| rng.random_range(-2.0..2.0)).collect();
            let up: Vec<Vec<f64>> = (0..ne).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let p = FrequencyPreference { raw: raw.clone(), eta: 10.0 };
            let g = affinity_gradient(&p, &c, &up).unwrap();
            let h = 1e-6;
            for e in 0..ne {
                let mut a = raw.clone();
                a[e] += h;
                let mut b = raw.clone();
                b[e] -= h;
                let fd = (objective(&a, 10.0, &c, &up) - objective(&b, 10.0, &c, &up)) / (2.0 * h);
                let rel = (g[e] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5 || (g[e] - fd).abs() < 1e-10, "e={e} analytic {} fd {fd}", g[e]);
            }
        }
    }

    #[test]
    fn tape_affinity_matches_direct() {
        let c = band_centers(4).unwrap();
        let p = FrequencyPreference::from_values(&[0.1, 0.45, 0.9], 7.0).unwrap();
        let mut tape = Tape::new();
        let raw = tape.constant(Tensor::new(vec![3], p.raw.clone()).unwrap());
        let pi = affinity_on_tape(&mut tape, raw, &c, 7.0).unwrap();
        let direct: Vec<f64> = p.affinity(&c).concat();
        let got = tape.value(pi).data();
        for (a, b) in got.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
