//! Concentric frequency bands: Gaussian soft masks, the hard step-mask
//! variant, and band decomposition of latent tensors.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::fft::{dft_plane_real, idft_plane, note_residue, real_part_with_residue};
use crate::metrics::{radial_grid, RadialGrid};
use crate::tensor::LatentTensor;

pub const DEFAULT_BANDS: usize = 3;
pub const DEFAULT_GAMMA: f64 = 20.0;

/// Ties in the nearest-center rule are resolved within this distance.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Soft,
    Hard,
}

impl std::str::FromStr for MaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            other => Err(invalid_config(format!("unknown mask kind `{other}`"))),
        }
    }
}

/// `K` radial masks over a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMaskSet {
    h: usize,
    w: usize,
    gamma: f64,
    kind: MaskKind,
    normalized: bool,
    centers: Vec<f64>,
    masks: Vec<Vec<f64>>,
}

/// `c_k = k / (K - 1)` for zero-based `k`.
pub fn band_centers(k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(invalid_config(format!("need at least 2 bands, got {k}")));
    }
    Ok((0..k).map(|i| i as f64 / (k - 1) as f64).collect())
}

#[inline]
pub fn gaussian_mask_value(r: f64, center: f64, gamma: f64) -> f64 {
    (-gamma * (r - center).powi(2)).exp()
}

/// Index of the nearest center, lowest index on ties.
pub fn nearest_band(r: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = (r - centers[0]).abs();
    for (k, c) in centers.iter().enumerate().skip(1) {
        let d = (r - c).abs();
        if d < best_d - TIE_TOL {
            best = k;
            best_d = d;
        }
    }
    best
}

pub fn gaussian_band_masks(h: usize, w: usize, k: usize, gamma: f64) -> Result<BandMaskSet> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid_config(format!("band sharpness must be positive, got {gamma}")));
    }
    let centers = band_centers(k)?;
    let grid = radial_grid(h, w)?;
    let masks = centers
        .iter()
        .map(|&c| grid.r().iter().map(|&r| gaussian_mask_value(r, c, gamma)).collect())
        .collect();
    Ok(BandMaskSet { h, w, gamma, kind: MaskKind::Soft, normalized: false, centers, masks })
}

pub fn hard_band_masks(h: usize, w: usize, k: usize) -> Result<BandMaskSet> {
    let centers = band_centers(k)?;
    let grid = radial_grid(h, w)?;
    let owner: Vec<usize> = grid.r().iter().map(|&r| nearest_band(r, &centers)).collect();
    let masks = (0..k)
        .map(|b| owner.iter().map(|&o| if o == b { 1.0 } else { 0.0 }).collect())
        .collect();
    Ok(BandMaskSet { h, w, gamma: f64::INFINITY, kind: MaskKind::Hard, normalized: false, centers, masks })
}

impl BandMaskSet {
    pub fn build(h: usize, w: usize, k: usize, gamma: f64, kind: MaskKind) -> Result<Self> {
        match kind {
            MaskKind::Soft => gaussian_band_masks(h, w, k, gamma),
            MaskKind::Hard => hard_band_masks(h, w, k),
        }
    }

    /// Rescales soft masks so they sum to one at every bin. Experimental, off
    /// by default; hard masks already partition.
    pub fn normalized(mut self) -> Self {
        if self.kind == MaskKind::Soft && !self.normalized {
            let n = self.h * self.w;
            for idx in 0..n {
                let s: f64 = self.masks.iter().map(|m| m[idx]).sum();
                for m in &mut self.masks {
                    m[idx] /= s;
                }
            }
            self.normalized = true;
        }
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn mask(&self, k: usize) -> &[f64] {
        &self.masks[k]
    }

    pub fn masks(&self) -> &[Vec<f64>] {
        &self.masks
    }

    pub fn grid(&self) -> RadialGrid {
        radial_grid(self.h, self.w).expect("mask set dims were validated")
    }
}

type CacheKey = (usize, usize, usize, u64, MaskKind);

/// Shared immutable mask sets keyed by `(H, W, K, γ, kind)`.
pub fn cached_masks(h: usize, w: usize, k: usize, gamma: f64, kind: MaskKind) -> Result<Arc<BandMaskSet>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<BandMaskSet>>>> = OnceLock::new();
    let gamma_key = if kind == MaskKind::Hard { 0 } else { gamma.to_bits() };
    let key = (h, w, k, gamma_key, kind);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(m) = cache.lock().expect("mask cache poisoned").get(&key) {
        return Ok(Arc::clone(m));
    }
    let set = Arc::new(BandMaskSet::build(h, w, k, gamma, kind)?);
    cache.lock().expect("mask cache poisoned").insert(key, Arc::clone(&set));
    Ok(set)
}

/// `z_k = U⁻¹(ẑ ⊙ M_k)` for every band, the same mask on every channel.
pub fn decompose(z: &LatentTensor, masks: &BandMaskSet) -> Result<Vec<LatentTensor>> {
    let (c, h, w) = z.dims();
    if masks.dims() != (h, w) {
        return Err(invalid_input(format!(
            "masks are {:?}, latent planes are {h}x{w}",
            masks.dims()
        )));
    }
    let spectra: Vec<Vec<Complex64>> = (0..c).map(|ch| dft_plane_real(z.plane(ch), h, w)).collect();
    masks
        .masks()
        .iter()
        .map(|m| {
            let mut data = Vec::with_capacity(c * h * w);
            for s in &spectra {
                let masked: Vec<Complex64> = s.iter().zip(m).map(|(v, &g)| v * g).collect();
                let (re, rel) = real_part_with_residue(&idft_plane(&masked, h, w));
                note_residue(rel);
                data.extend(re);
            }
            LatentTensor::new(c, h, w, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::dft_oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_latent(c: usize, h: usize, w: usize, seed: u64) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn centers_and_peak_value() {
        assert_eq!(band_centers(3).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(band_centers(1).is_err());
        for k in 2..6 {
            for c in band_centers(k).unwrap() {
                assert_eq!(gaussian_mask_value(c, c, 20.0), 1.0);
            }
        }
        assert!((gaussian_mask_value(0.5, 0.0, 20.0) - (-5.0f64).exp()).abs() < 1e-15);
        assert!(((-5.0f64).exp() - 6.7379e-3).abs() < 1e-7);
    }

    #[test]
    fn soft_masks_bounded_and_radial() {
        let m = gaussian_band_masks(9, 9, 3, 20.0).unwrap();
        let g = m.grid();
        for k in 0..3 {
            assert!(m.mask(k).iter().all(|&v| v > 0.0 && v <= 1.0));
            for a in 0..81 {
                for b in 0..81 {
                    if g.r()[a] == g.r()[b] {
                        assert_eq!(m.mask(k)[a], m.mask(k)[b]);
                    }
                }
            }
        }
        // r = 0 at the center of an odd grid, so the low band peaks at exactly one
        assert_eq!(m.mask(0)[4 * 9 + 4], 1.0);
    }

    #[test]
    fn hard_masks_partition() {
        for k in 2..5 {
            let m = hard_band_masks(8, 9, k).unwrap();
            for idx in 0..72 {
                let s: f64 = (0..k).map(|b| m.mask(b)[idx]).sum();
                assert_eq!(s, 1.0);
            }
        }
    }

    #[test]
    fn hard_two_band_tie_goes_low() {
        let m = hard_band_masks(5, 5, 2).unwrap();
        let g = m.grid();
        for idx in 0..25 {
            let r = g.r()[idx];
            let expect_low = r <= 0.5 + 1e-12;
            assert_eq!(m.mask(0)[idx] == 1.0, expect_low, "r = {r}");
        }
        // (1, 1) has coordinates (-0.5, -0.5), the midpoint radius
        assert!((g.at(1, 1) - 0.5).abs() < 1e-15);
        assert_eq!(m.mask(0)[6], 1.0);
        assert_eq!(nearest_band(0.4, &[0.0, 0.5, 1.0]), 1);
    }

    #[test]
    fn identity_mask_reproduces_input() {
        let z = random_latent(2, 6, 7, 1);
        let mut m = gaussian_band_masks(6, 7, 2, 20.0).unwrap();
        m.masks[0] = vec![1.0; 42];
        let bands = decompose(&z, &m).unwrap();
        assert!(bands[0].max_abs_diff(&z) < 1e-10);
    }

    #[test]
    fn hard_bands_sum_back() {
        let z = random_latent(3, 8, 8, 2);
        let bands = decompose(&z, &hard_band_masks(8, 8, 3).unwrap()).unwrap();
        let mut acc = vec![0.0; z.data().len()];
        for b in &bands {
            for (a, v) in acc.iter_mut().zip(b.data()) {
                *a += v;
            }
        }
        let err = acc.iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn soft_band_spectra_match_oracle_products() {
        // odd grid: the masks are conjugate-symmetric so every band is exactly real
        let z = random_latent(1, 7, 7, 3);
        let m = gaussian_band_masks(7, 7, 3, 20.0).unwrap();
        let bands = decompose(&z, &m).unwrap();
        let zhat = dft_oracle(&z.plane_field(0).unwrap()).unwrap();
        let mut sum = vec![0.0; 49];
        for (k, b) in bands.iter().enumerate() {
            let bhat = dft_oracle(&b.plane_field(0).unwrap()).unwrap();
            for idx in 0..49 {
                let expect = zhat.data()[idx] * m.mask(k)[idx];
                assert!((bhat.data()[idx] - expect).norm() < 1e-9);
            }
            for (s, v) in sum.iter_mut().zip(b.data()) {
                *s += v;
            }
        }
        let diff = sum.iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-3, "soft bands should not sum back exactly");
    }

    #[test]
    fn decompose_is_linear() {
        let a = random_latent(2, 8, 6, 4);
        let b = random_latent(2, 8, 6, 5);
        let m = gaussian_band_masks(8, 6, 3, 20.0).unwrap();
        let combo = LatentTensor::new(
            2,
            8,
            6,
            a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 0.5 * y).collect(),
        )
        .unwrap();
        let (da, db, dc) = (decompose(&a, &m).unwrap(), decompose(&b, &m).unwrap(), decompose(&combo, &m).unwrap());
        for k in 0..3 {
            for i in 0..a.data().len() {
                let expect = 2.0 * da[k].data()[i] - 0.5 * db[k].data()[i];
                assert!((dc[k].data()[i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn soft_mask_lipschitz_bound() {
        let gamma = 20.0;
        let m = gaussian_band_masks(16, 16, 3, gamma).unwrap();
        let g = m.grid();
        let lip = (2.0 * gamma / std::f64::consts::E).sqrt();
        for k in 0..3 {
            for i in 0..16 {
                for j in 0..15 {
                    let (p, q) = (i * 16 + j, i * 16 + j + 1);
                    let jump = (m.mask(k)[p] - m.mask(k)[q]).abs();
                    assert!(jump <= lip * (g.r()[p] - g.r()[q]).abs() + 1e-15);
                }
            }
        }
        let hard = hard_band_masks(16, 16, 3).unwrap();
        let max_jump = (0..256 - 1)
            .map(|p| (hard.mask(1)[p] - hard.mask(1)[p + 1]).abs())
            .fold(0.0, f64::max);
        assert_eq!(max_jump, 1.0);
    }

    #[test]
    fn band_energy_concentrates_near_center() {
        let gamma = 20.0;
        let m = gaussian_band_masks(33, 33, 3, gamma).unwrap();
        let g = m.grid();
        let z = random_latent(1, 33, 33, 9);
        let bands = decompose(&z, &m).unwrap();
        let s = crate::fft::dft_centered(&bands[1].plane_field(0).unwrap()).unwrap();
        let p = s.power();
        let total: f64 = p.iter().sum();
        let mean_r: f64 = p.iter().zip(g.r()).map(|(a, r)| a * r).sum::<f64>() / total;
        assert!((mean_r - 0.5).abs() < 2.0 / gamma.sqrt(), "{mean_r}");
    }

    #[test]
    fn cache_returns_shared_set() {
        let a = cached_masks(10, 10, 3, 20.0, MaskKind::Soft).unwrap();
        let b = cached_masks(10, 10, 3, 20.0, MaskKind::Soft).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let h = cached_masks(10, 10, 3, 5.0, MaskKind::Hard).unwrap();
        assert_eq!(h.kind(), MaskKind::Hard);
    }

    #[test]
    fn normalized_mode_sums_to_one() {
        let m = gaussian_band_masks(6, 6, 3, 20.0).unwrap().normalized();
        for idx in 0..36 {
            let s: f64 = (0..3).map(|k| m.mask(k)[idx]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_shape_rejected() {
        let z = random_latent(1, 4, 4, 0);
        assert!(decompose(&z, &gaussian_band_masks(5, 4, 3, 20.0).unwrap()).is_err());
    }
}
