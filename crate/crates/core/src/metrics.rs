//! Radial frequency geometry, band energies and the HL ratio.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::fft::{dft_centered, dft_plane_real};
use crate::tensor::{Field2D, LatentTensor};

pub const DEFAULT_R_SPLIT: f64 = 0.25;
pub const DEFAULT_EPS: f64 = 1e-12;

/// Normalized radial frequency over a centered H×W spectrum.
///
/// Coordinates are mapped onto `[-1, 1]²` by `x_j = -1 + 2j/(W-1)`,
/// `y_i = -1 + 2i/(H-1)` and the Euclidean norm is divided by its grid
/// maximum, so corners sit at exactly 1. For odd extents the zero-frequency
/// bin has `r = 0`; for even extents the coordinate origin falls between
/// bins and the smallest radius is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    h: usize,
    w: usize,
    r: Vec<f64>,
    r_split: f64,
}

pub fn radial_grid(h: usize, w: usize) -> Result<RadialGrid> {
    if h < 2 || w < 2 {
        return Err(invalid_input(format!("radial grid needs H, W >= 2, got {h}x{w}")));
    }
    let coord = |k: usize, n: usize| -1.0 + 2.0 * k as f64 / (n - 1) as f64;
    let mut d = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = coord(i, h);
        for j in 0..w {
            let x = coord(j, w);
            d.push((x * x + y * y).sqrt());
        }
    }
    let max = d.iter().cloned().fold(0.0, f64::max);
    let r = d.into_iter().map(|v| v / max).collect();
    Ok(RadialGrid { h, w, r, r_split: DEFAULT_R_SPLIT })
}

impl RadialGrid {
    pub fn new(h: usize, w: usize, r_split: f64) -> Result<Self> {
        radial_grid(h, w)?.with_split(r_split)
    }

    pub fn with_split(mut self, r_split: f64) -> Result<Self> {
        if !(r_split > 0.0 && r_split < 1.0) {
            return Err(invalid_input(format!("r_split must lie in (0, 1), got {r_split}")));
        }
        self.r_split = r_split;
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.w + j]
    }

    pub fn r_split(&self) -> f64 {
        self.r_split
    }

    /// True for bins in the high band `{r >= r_split}`.
    #[inline]
    pub fn is_high(&self, idx: usize) -> bool {
        self.r[idx] >= self.r_split
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.h, self.w) {
            return Err(invalid_input(format!(
                "grid is {}x{}, field is {h}x{w}",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandEnergies {
    pub e_low: f64,
    pub e_high: f64,
    pub hl: f64,
    pub eps: f64,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid_input(format!("eps must be finite and >= 0, got {eps}")));
    }
    Ok(())
}

/// Splits a centered power spectrum at the grid's `r_split`.
pub fn band_energies_from_power(power: &[f64], grid: &RadialGrid, eps: f64) -> Result<BandEnergies> {
    check_eps(eps)?;
    if power.len() != grid.r.len() {
        return Err(invalid_input("power spectrum and grid differ in size"));
    }
    let (mut e_low, mut e_high) = (0.0, 0.0);
    for (idx, p) in power.iter().enumerate() {
        if grid.is_high(idx) {
            e_high += p;
        } else {
            e_low += p;
        }
    }
    Ok(BandEnergies { e_low, e_high, hl: e_high / (e_low + eps), eps })
}

pub fn band_energies(u: &Field2D, grid: &RadialGrid, eps: f64) -> Result<BandEnergies> {
    grid.check(u.height(), u.width())?;
    let s = dft_centered(u)?;
    band_energies_from_power(&s.power(), grid, eps)
}

pub fn hl_ratio(u: &Field2D, grid: &RadialGrid, eps: f64) -> Result<f64> {
    Ok(band_energies(u, grid, eps)?.hl)
}

/// Channel-averaged power spectrum `mean_c |ẑ_c(ω)|²` of a latent tensor.
pub fn latent_power(z: &LatentTensor) -> Vec<f64> {
    let (c, h, w) = z.dims();
    let mut acc = vec![0.0; h * w];
    for ch in 0..c {
        for (a, v) in acc.iter_mut().zip(dft_plane_real(z.plane(ch), h, w)) {
            *a += v.norm_sqr();
        }
    }
    let inv = 1.0 / c as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    acc
}

/// High/low retention and gain statistics for one `(u_c, y, ŷ)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `E_H(u_c) / E_H(y)`
    pub ratio1: f64,
    /// `E_L(u_c) / E_L(y)`
    pub ratio2: f64,
    /// `E_H(ŷ) / E_H(u_c)`
    pub g_high: f64,
    /// `E_L(ŷ) / E_L(u_c)`
    pub g_low: f64,
    pub hl_uc: f64,
    pub hl_y: f64,
    pub hl_yhat: f64,
}

pub fn assumption_metrics(
    u_c: &Field2D,
    y: &Field2D,
    y_hat: &Field2D,
    grid: &RadialGrid,
    eps: f64,
) -> Result<AssumptionReport> {
    let ec = band_energies(u_c, grid, eps)?;
    let ey = band_energies(y, grid, eps)?;
    let ep = band_energies(y_hat, grid, eps)?;
    Ok(AssumptionReport {
        ratio1: ec.e_high / (ey.e_high + eps),
        ratio2: ec.e_low / (ey.e_low + eps),
        g_high: ep.e_high / (ec.e_high + eps),
        g_low: ep.e_low / (ec.e_low + eps),
        hl_uc: ec.hl,
        hl_y: ey.hl,
        hl_yhat: ep.hl,
    })
}
