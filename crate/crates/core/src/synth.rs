//! Deterministic synthetic velocity-like fields and a toy observation map.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::Observation;
use crate::error::{invalid_config, Result};
use crate::fft::{centered_freq, dft_plane_real, idft_plane};
use crate::metrics::radial_grid;
use crate::tensor::Field2D;

/// Shots in every toy observation.
pub const TOY_SHOTS: usize = 5;
pub const DEFAULT_BANDLIMIT_CUTOFF: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Layered,
    Curved,
    Fault,
    Broadband,
}

impl std::str::FromStr for FieldKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layered" => Ok(Self::Layered),
            "curved" => Ok(Self::Curved),
            "fault" => Ok(Self::Fault),
            "broadband" => Ok(Self::Broadband),
            other => Err(invalid_config(format!("unknown field kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub kind: FieldKind,
    pub h: usize,
    pub w: usize,
    pub layers: usize,
    /// Vertical offset of the hanging wall, in rows.
    pub throw: f64,
    /// Peak vertical displacement of curved interfaces, in rows.
    pub curvature: f64,
    /// Exponent `s` of the radial power spectrum `P(k) ∝ k^s`.
    pub slope: f64,
    pub seed: u64,
}

impl FieldSpec {
    pub fn new(kind: FieldKind, h: usize, w: usize, seed: u64) -> Self {
        Self {
            kind,
            h,
            w,
            layers: 4,
            throw: (h as f64 / 8.0).round(),
            curvature: h as f64 / 10.0,
            slope: -2.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.h < 2 || self.w < 2 {
            return Err(invalid_config(format!("field must be at least 2x2, got {}x{}", self.h, self.w)));
        }
        if self.kind != FieldKind::Broadband && (self.layers < 2 || self.layers > self.h) {
            return Err(invalid_config(format!("layer count must be in 2..={}, got {}", self.h, self.layers)));
        }
        if !self.throw.is_finite() || !self.curvature.is_finite() || !self.slope.is_finite() {
            return Err(invalid_config("field parameters must be finite"));
        }
        if self.throw.abs() > self.h as f64 || self.curvature.abs() > self.h as f64 {
            return Err(invalid_config("throw and curvature must not exceed the field height"));
        }
        Ok(())
    }
}

/// Rescales to `[0, 1]`; a constant field maps to zeros.
pub fn min_max_normalize(data: &mut [f64]) {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in data.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

fn layer_values(layers: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = Vec::with_capacity(layers);
    let mut acc = 0.0;
    for _ in 0..layers {
        acc += rng.random_range(0.25..1.0);
        v.push(acc);
    }
    v
}

fn layer_at(depth: f64, h: usize, layers: usize) -> usize {
    let idx = (depth * layers as f64 / h as f64).floor();
    idx.clamp(0.0, (layers - 1) as f64) as usize
}

pub fn gen_field(spec: &FieldSpec) -> Result<Field2D> {
    spec.validate()?;
    let (h, w, l) = (spec.h, spec.w, spec.layers);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = match spec.kind {
        FieldKind::Layered => {
            let vals = layer_values(l, &mut rng);
            (0..h * w).map(|p| vals[layer_at((p / w) as f64, h, l)]).collect::<Vec<_>>()
        }
        FieldKind::Curved => {
            let vals = layer_values(l, &mut rng);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let cycles = rng.random_range(0.5..2.0);
            (0..h * w)
                .map(|p| {
                    let (i, j) = (p / w, p % w);
                    let d = spec.curvature * (std::f64::consts::TAU * cycles * j as f64 / w as f64 + phase).sin();
                    vals[layer_at(i as f64 + d, h, l)]
                })
                .collect()
        }
        FieldKind::Fault => {
            let vals = layer_values(l, &mut rng);
            let j0 = rng.random_range(0.3..0.7) * w as f64;
            let dip = rng.random_range(-0.5..0.5);
            (0..h * w)
                .map(|p| {
                    let (i, j) = (p / w, p % w);
                    let shifted = j as f64 > j0 + dip * i as f64;
                    let depth = if shifted { i as f64 - spec.throw } else { i as f64 };
                    vals[layer_at(depth, h, l)]
                })
                .collect()
        }
        FieldKind::Broadband => broadband(h, w, spec.slope, &mut rng),
    };
    min_max_normalize(&mut data);
    Field2D::new(h, w, data)
}

/// Complex white noise shaped by `k^{s/2}` in the centered spectrum, real part.
fn broadband(h: usize, w: usize, slope: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spec = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (centered_freq(i, h) as f64, centered_freq(j, w) as f64);
            let k = (fi * fi + fj * fj).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let amp = if k == 0.0 { 0.0 } else { k.powf(slope / 2.0) };
            spec.push(Complex64::new(re, im) * amp);
        }
    }
    idft_plane(&spec, h, w).into_iter().map(|c| c.re).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObserveMode {
    /// Every shot is the field itself.
    Identity,
    /// Every shot is the field with bins at radius `≥ 0.2` removed.
    Bandlimit,
    /// Every shot is the running mean down each column.
    Smear,
}

impl std::str::FromStr for ObserveMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "bandlimit" => Ok(Self::Bandlimit),
            "smear" => Ok(Self::Smear),
            other => Err(invalid_config(format!("unknown observation mode `{other}`"))),
        }
    }
}

/// Low-pass keeping bins with radial frequency below `cutoff`.
pub fn bandlimit(y: &Field2D, cutoff: f64) -> Result<Field2D> {
    let (h, w) = y.dims();
    let grid = radial_grid(h, w)?;
    let s: Vec<Complex64> = dft_plane_real(y.data(), h, w)
        .into_iter()
        .zip(grid.r())
        .map(|(v, &r)| if r < cutoff { v } else { Complex64::new(0.0, 0.0) })
        .collect();
    Field2D::new(h, w, idft_plane(&s, h, w).into_iter().map(|c| c.re).collect())
}

/// `s(i, j) = (1/H) Σ_{i' ≤ i} y(i', j)`.
pub fn smear(y: &Field2D) -> Result<Field2D> {
    let (h, w) = y.dims();
    let mut out = vec![0.0; h * w];
    for j in 0..w {
        let mut acc = 0.0;
        for i in 0..h {
            acc += y.get(i, j);
            out[i * w + j] = acc / h as f64;
        }
    }
    Field2D::new(h, w, out)
}

/// Tiles a transformed copy of `y` into `TOY_SHOTS` shots of `H × W`.
pub fn toy_observe(y: &Field2D, mode: ObserveMode) -> Result<Observation> {
    let shot = match mode {
        ObserveMode::Identity => y.clone(),
        ObserveMode::Bandlimit => bandlimit(y, DEFAULT_BANDLIMIT_CUTOFF)?,
        ObserveMode::Smear => smear(y)?,
    };
    let (h, w) = y.dims();
    Observation::new(TOY_SHOTS, h, w, shot.data().repeat(TOY_SHOTS))
}

/// Radially averaged power `(k, P(k))` for integer radii `1..=kmax`.
pub fn radial_power_profile(u: &Field2D, kmax: usize) -> Vec<(f64, f64)> {
    let (h, w) = u.dims();
    let s = dft_plane_real(u.data(), h, w);
    let mut sums = vec![0.0; kmax + 1];
    let mut counts = vec![0usize; kmax + 1];
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (centered_freq(i, h) as f64, centered_freq(j, w) as f64);
            let k = (fi * fi + fj * fj).sqrt().round() as usize;
            if (1..=kmax).contains(&k) {
                sums[k] += s[i * w + j].norm_sqr();
                counts[k] += 1;
            }
        }
    }
    (1..=kmax).filter(|&k| counts[k] > 0).map(|k| (k as f64, sums[k] / counts[k] as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{hl_ratio, RadialGrid};

    #[test]
    fn layered_nine_rows_three_layers() {
        let mut spec = FieldSpec::new(FieldKind::Layered, 9, 5, 3);
        spec.layers = 3;
        let f = gen_field(&spec).unwrap();
        let mut distinct: Vec<f64> = f.data().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
        for i in 0..9 {
            let row: Vec<f64> = (0..5).map(|j| f.get(i, j)).collect();
            assert!(row.iter().all(|&v| v == row[0]));
            assert_eq!(row[0], f.get(3 * (i / 3), 0));
        }
        assert_eq!(f.get(0, 0), 0.0);
        assert_eq!(f.get(8, 0), 1.0);
    }

    #[test]
    fn zero_throw_fault_is_layered() {
        for seed in 0..10 {
            let mut fault = FieldSpec::new(FieldKind::Fault, 32, 32, seed);
            fault.throw = 0.0;
            let mut layered = fault.clone();
            layered.kind = FieldKind::Layered;
            assert_eq!(gen_field(&fault).unwrap(), gen_field(&layered).unwrap());
        }
    }

    #[test]
    fn generators_are_deterministic_and_normalized() {
        for kind in [FieldKind::Layered, FieldKind::Curved, FieldKind::Fault, FieldKind::Broadband] {
            let spec = FieldSpec::new(kind, 24, 20, 11);
            let a = gen_field(&spec).unwrap();
            assert_eq!(a, gen_field(&spec).unwrap());
            let lo = a.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = a.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = FieldSpec::new(FieldKind::Layered, 8, 8, 0);
        s.layers = 1;
        assert!(gen_field(&s).is_err());
        let s = FieldSpec::new(FieldKind::Layered, 1, 8, 0);
        assert!(gen_field(&s).is_err());
    }

    /// Least-squares slope of `log P` against `log k`.
    fn fitted_slope(profile: &[(f64, f64)]) -> f64 {
        let pts: Vec<(f64, f64)> = profile.iter().map(|(k, p)| (k.ln(), p.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }

    #[test]
    fn broadband_slope_is_recovered() {
        for (seed, slope) in [(1u64, -2.0), (2, -3.0), (3, -1.0), (4, 0.0)] {
            let mut spec = FieldSpec::new(FieldKind::Broadband, 64, 64, seed);
            spec.slope = slope;
            let f = gen_field(&spec).unwrap();
            let fit = fitted_slope(&radial_power_profile(&f, 31));
            assert!((fit - slope).abs() < 0.3, "slope {slope}: fitted {fit}");
        }
    }

    #[test]
    fn bandlimit_lowers_hl() {
        let grid = RadialGrid::new(32, 32, 0.25).unwrap();
        for seed in 0..10 {
            let f = gen_field(&FieldSpec::new(FieldKind::Broadband, 32, 32, seed)).unwrap();
            let obs = toy_observe(&f, ObserveMode::Bandlimit).unwrap();
            let shot = Field2D::new(32, 32, obs.data()[..32 * 32].to_vec()).unwrap();
            assert!(hl_ratio(&shot, &grid, 1e-12).unwrap() < hl_ratio(&f, &grid, 1e-12).unwrap());
        }
    }

    #[test]
    fn observation_layout() {
        let f = gen_field(&FieldSpec::new(FieldKind::Curved, 6, 7, 2)).unwrap();
        let obs = toy_observe(&f, ObserveMode::Identity).unwrap();
        assert_eq!(obs.dims(), (TOY_SHOTS, 6, 7));
        for s in 0..TOY_SHOTS {
            assert_eq!(obs.get(s, 4, 3), f.get(4, 3));
        }
        assert_eq!(obs, toy_observe(&f, ObserveMode::Identity).unwrap());
        let sm = toy_observe(&f, ObserveMode::Smear).unwrap();
        let col_sum: f64 = (0..6).map(|i| f.get(i, 2)).sum();
        assert!((sm.get(0, 5, 2) - col_sum / 6.0).abs() < 1e-15);
    }

    #[test]
    fn faults_raise_hl() {
        let grid = RadialGrid::new(32, 32, 0.25).unwrap();
        for seed in 0..50 {
            let fault = FieldSpec::new(FieldKind::Fault, 32, 32, seed);
            let mut flat = fault.clone();
            flat.throw = 0.0;
            let a = hl_ratio(&gen_field(&fault).unwrap(), &grid, 1e-12).unwrap();
            let b = hl_ratio(&gen_field(&flat).unwrap(), &grid, 1e-12).unwrap();
            assert!(a > b, "seed {seed}: fault {a} vs flat {b}");
        }
    }
}
