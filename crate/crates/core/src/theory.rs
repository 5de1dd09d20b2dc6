//! Executable checks of the two HL-ratio bounds and the empirical
//! assumption statistics.
//!
//! Both bounds are exact inequalities for filters that act diagonally on the
//! centered spectrum, so the checks work with filtered spectra directly: the
//! energies of `û ⊙ H` are the energies of the filtered field by Parseval,
//! whether or not `H` is conjugate-symmetric on the grid.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::BandMaskSet;
use crate::encoder::EncoderParams;
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::fft::{dft_centered, idft_centered};
use crate::metrics::{assumption_metrics, band_energies_from_power, AssumptionReport, BandEnergies, RadialGrid};
use crate::params::ParamSet;
use crate::resample::down_up;
use crate::synth::{gen_field, FieldKind, FieldSpec};
use crate::tensor::{Field2D, Spectrum2D};

/// Slack allowed on every inequality.
pub const BOUND_SLACK: f64 = 1e-9;

/// Real nonnegative response applied multiplicatively to a centered spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalFilter {
    h: usize,
    w: usize,
    response: Vec<f64>,
}

impl DiagonalFilter {
    pub fn new(h: usize, w: usize, response: Vec<f64>) -> Result<Self> {
        if response.len() != h * w {
            return Err(invalid_input(format!("{h}x{w} filter needs {} values", h * w)));
        }
        if response.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid_input("filter response must be finite and nonnegative"));
        }
        Ok(Self { h, w, response })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self { h, w, response: vec![1.0; h * w] }
    }

    /// `high` on Ω_H and `low` on Ω_L.
    pub fn band_constant(grid: &RadialGrid, high: f64, low: f64) -> Result<Self> {
        let (h, w) = grid.dims();
        Self::new(h, w, (0..h * w).map(|i| if grid.is_high(i) { high } else { low }).collect())
    }

    /// Independent uniform draws per bin from `high` on Ω_H and `low` on Ω_L.
    pub fn random_banded(grid: &RadialGrid, high: (f64, f64), low: (f64, f64), rng: &mut impl Rng) -> Result<Self> {
        let (h, w) = grid.dims();
        let draw = |(a, b): (f64, f64), rng: &mut dyn rand::RngCore| if a == b { a } else { rng.random_range(a..=b) };
        let resp = (0..h * w).map(|i| if grid.is_high(i) { draw(high, rng) } else { draw(low, rng) }).collect();
        Self::new(h, w, resp)
    }

    /// One band mask used as a filter.
    pub fn from_mask(masks: &BandMaskSet, k: usize) -> Result<Self> {
        let (h, w) = masks.dims();
        if k >= masks.len() {
            return Err(invalid_input(format!("band {k} out of range")));
        }
        Self::new(h, w, masks.mask(k).to_vec())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    /// `(max over Ω_H, min over Ω_L)` of the response.
    pub fn band_bounds(&self, grid: &RadialGrid) -> (f64, f64) {
        let (mut hi, mut lo) = (0.0f64, f64::INFINITY);
        for (i, &v) in self.response.iter().enumerate() {
            if grid.is_high(i) {
                hi = hi.max(v);
            } else {
                lo = lo.min(v);
            }
        }
        (hi, lo)
    }

    pub fn apply_spectrum(&self, s: &Spectrum2D) -> Result<Spectrum2D> {
        if s.dims() != (self.h, self.w) {
            return Err(invalid_input("filter and spectrum differ in shape"));
        }
        Spectrum2D::new(self.h, self.w, s.data().iter().zip(&self.response).map(|(v, g)| v * g).collect())
    }

    /// `Re U⁻¹(û ⊙ H)`; a response that is not conjugate-symmetric on the grid
    /// leaves an imaginary residue, which is dropped and counted.
    pub fn apply(&self, u: &Field2D) -> Result<Field2D> {
        idft_centered(&self.apply_spectrum(&dft_centered(u)?)?)
    }
}

fn spectrum_energies(s: &Spectrum2D, grid: &RadialGrid, eps: f64) -> Result<BandEnergies> {
    band_energies_from_power(&s.power(), grid, eps)
}

/// Outcome of a bound check over many cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem: u8,
    pub cases_run: usize,
    pub violations: usize,
    /// Failures of the per-band energy inequalities the bound rests on.
    pub energy_violations: usize,
    /// Smallest `bound − observed` (upper bound) or `observed − bound`
    /// (lower bound) over all cases.
    pub worst_margin: f64,
    pub parameters: BTreeMap<String, f64>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.energy_violations == 0
    }
}

/// A filter with the `(α, β)` it claims to satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterCase {
    pub filter: DiagonalFilter,
    pub alpha: f64,
    pub beta: f64,
}

impl FilterCase {
    /// Reads `(α, β)` off the filter itself.
    pub fn measured(filter: DiagonalFilter, grid: &RadialGrid) -> Self {
        let (alpha, beta) = filter.band_bounds(grid);
        Self { filter, alpha, beta }
    }

    fn check_premise(&self, grid: &RadialGrid) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha <= self.beta && self.beta <= 1.0) {
            return Err(Error::PremiseViolation(format!(
                "need 0 <= alpha <= beta <= 1, got alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        let (hi, lo) = self.filter.band_bounds(grid);
        if hi > self.alpha || lo < self.beta {
            return Err(Error::PremiseViolation(format!(
                "filter reaches {hi} on the high band and {lo} on the low band, claimed alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

struct CaseOutcome {
    margin: f64,
    energy_ok: bool,
}

/// `a ≤ b` up to rounding in sums of many squared magnitudes.
fn relative_le(a: f64, b: f64) -> bool {
    a <= b + 1e-12 * a.abs().max(b.abs())
}

/// `HL(I(u)) ≤ (α²/β²)·HL(u)` for every filter and field, together with
/// `E_H(I(u)) ≤ α² E_H(u)` and `E_L(I(u)) ≥ β² E_L(u)`.
pub fn verify_theorem1(cases: &[FilterCase], fields: &[Field2D], grid: &RadialGrid, eps: f64) -> Result<TheoremReport> {
    if cases.is_empty() || fields.is_empty() {
        return Err(invalid_input("need at least one filter and one field"));
    }
    for c in cases {
        if c.filter.dims() != grid.dims() {
            return Err(invalid_input("filter and grid differ in shape"));
        }
        c.check_premise(grid)?;
    }
    let spectra = fields.iter().map(dft_centered).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..cases.len()).flat_map(|c| (0..fields.len()).map(move |f| (c, f))).collect();
    let outcomes = pairs
        .par_iter()
        .map(|&(ci, fi)| {
            let case = &cases[ci];
            let before = spectrum_energies(&spectra[fi], grid, eps)?;
            let after = spectrum_energies(&case.filter.apply_spectrum(&spectra[fi])?, grid, eps)?;
            let (a2, b2) = (case.alpha * case.alpha, case.beta * case.beta);
            let bound = a2 / b2 * before.hl;
            let energy_ok = relative_le(after.e_high, a2 * before.e_high) && relative_le(b2 * before.e_low, after.e_low);
            Ok(CaseOutcome { margin: bound - after.hl, energy_ok })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = BTreeMap::new();
    params.insert("alpha_max".into(), cases.iter().map(|c| c.alpha).fold(0.0, f64::max));
    params.insert("beta_min".into(), cases.iter().map(|c| c.beta).fold(f64::INFINITY, f64::min));
    params.insert("r_split".into(), grid.r_split());
    params.insert("eps".into(), eps);
    Ok(summarize(1, &outcomes, params))
}

fn summarize(theorem: u8, outcomes: &[CaseOutcome], parameters: BTreeMap<String, f64>) -> TheoremReport {
    TheoremReport {
        theorem,
        cases_run: outcomes.len(),
        violations: outcomes.iter().filter(|o| o.margin < -BOUND_SLACK).count(),
        energy_violations: outcomes.iter().filter(|o| !o.energy_ok).count(),
        worst_margin: outcomes.iter().map(|o| o.margin).fold(f64::INFINITY, f64::min),
        parameters,
    }
}

/// Constants of the lower bound `HL(ŷ_c) ≥ (m/M)(δ/κ)·HL(y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Params {
    pub delta: f64,
    pub kappa: f64,
    pub m: f64,
    pub big_m: f64,
}

impl Theorem2Params {
    fn validate(&self) -> Result<()> {
        let ok = self.delta >= 1.0 && self.kappa >= 1.0 && self.m > 0.0 && self.m <= self.big_m && self.big_m >= 1.0;
        if !ok || ![self.delta, self.kappa, self.m, self.big_m].iter().all(|v| v.is_finite()) {
            return Err(invalid_config(format!("invalid bound constants {self:?}")));
        }
        Ok(())
    }

    pub fn factor(&self) -> f64 {
        (self.m / self.big_m) * (self.delta / self.kappa)
    }
}

/// How the encoder-like map `y → u_c` and the downstream map are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    /// Per-bin gains drawn inside the admissible ranges.
    Random,
    /// Gains at the extremes that minimize the resulting HL: the encoder
    /// meets its premises with equality and the downstream map damps Ω_H by
    /// `m` while amplifying Ω_L by `M`.
    Adversarial,
}

/// Builds `u_c = G(y)` and `ŷ_c = F(u_c)` from diagonal filters meeting the
/// premises, checks the premises on the measured energies, then checks the
/// bound for every field.
pub fn verify_theorem2(
    params: Theorem2Params,
    construction: Construction,
    fields: &[Field2D],
    grid: &RadialGrid,
    eps: f64,
    seed: u64,
) -> Result<TheoremReport> {
    params.validate()?;
    if fields.is_empty() {
        return Err(invalid_input("need at least one field"));
    }
    let Theorem2Params { delta, kappa, m, big_m } = params;
    let outcomes = fields
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let (g, f) = match construction {
                Construction::Random => (
                    DiagonalFilter::random_banded(
                        grid,
                        (delta.sqrt(), (2.0 * delta).sqrt()),
                        ((kappa / 4.0).sqrt(), kappa.sqrt()),
                        &mut rng,
                    )?,
                    DiagonalFilter::random_banded(grid, (m.sqrt(), big_m.sqrt()), (m.sqrt(), big_m.sqrt()), &mut rng)?,
                ),
                Construction::Adversarial => (
                    DiagonalFilter::band_constant(grid, delta.sqrt(), kappa.sqrt())?,
                    DiagonalFilter::band_constant(grid, m.sqrt(), big_m.sqrt())?,
                ),
            };
            theorem2_case(&params, &dft_centered(y)?, &g, &f, grid, eps)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut p = BTreeMap::new();
    p.insert("delta".into(), delta);
    p.insert("kappa".into(), kappa);
    p.insert("m".into(), m);
    p.insert("M".into(), big_m);
    p.insert("r_split".into(), grid.r_split());
    p.insert("eps".into(), eps);
    Ok(summarize(2, &outcomes, p))
}

fn theorem2_case(
    params: &Theorem2Params,
    y: &Spectrum2D,
    g: &DiagonalFilter,
    f: &DiagonalFilter,
    grid: &RadialGrid,
    eps: f64,
) -> Result<CaseOutcome> {
    let uc = g.apply_spectrum(y)?;
    let yc = f.apply_spectrum(&uc)?;
    let (ey, ec, ep) = (
        spectrum_energies(y, grid, eps)?,
        spectrum_energies(&uc, grid, eps)?,
        spectrum_energies(&yc, grid, eps)?,
    );
    let premise = [
        ("high-band growth", relative_le(params.delta * ey.e_high, ec.e_high)),
        ("low-band control", relative_le(ec.e_low, params.kappa * ey.e_low)),
        ("high gain >= m", relative_le(params.m * ec.e_high, ep.e_high)),
        ("high gain <= M", relative_le(ep.e_high, params.big_m * ec.e_high)),
        ("low gain >= m", relative_le(params.m * ec.e_low, ep.e_low)),
        ("low gain <= M", relative_le(ep.e_low, params.big_m * ec.e_low)),
    ];
    if let Some((name, _)) = premise.iter().find(|(_, ok)| !ok) {
        return Err(Error::PremiseViolation(format!("constructed operators fail {name}")));
    }
    let bound = params.factor() * ey.hl;
    Ok(CaseOutcome { margin: ep.hl - bound, energy_ok: true })
}

/// Filter families spanning one `(α, β)` pair: band-constant at the bounds
/// and per-bin random responses inside them.
pub fn theorem1_filters(grid: &RadialGrid, alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<Vec<FilterCase>> {
    Ok(vec![
        FilterCase { filter: DiagonalFilter::band_constant(grid, alpha, beta)?, alpha, beta },
        FilterCase { filter: DiagonalFilter::random_banded(grid, (0.0, alpha), (beta, 1.0), rng)?, alpha, beta },
    ])
}

/// Mixed test fields: white noise, broadband spectra and layered models.
pub fn test_fields(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Field2D>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| match i % 4 {
            0 => Field2D::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0)),
            1 => {
                let mut s = FieldSpec::new(FieldKind::Broadband, h, w, rng.random());
                s.slope = rng.random_range(-3.0..0.0);
                gen_field(&s)
            }
            2 => gen_field(&FieldSpec::new(FieldKind::Fault, h, w, rng.random())),
            _ => gen_field(&FieldSpec::new(FieldKind::Curved, h, w, rng.random())),
        })
        .collect()
}

/// Where `u_c` comes from when validating the assumptions.
pub enum UcSource<'a> {
    /// `u_c = y`.
    PassThrough,
    /// Bilinear down to `mid` and back up, applied to `y`.
    Interp { mid_h: usize, mid_w: usize },
    /// Channel mean of the encoder's latent for the observation.
    Encoder { params: &'a EncoderParams, ps: &'a ParamSet },
}

impl UcSource<'_> {
    pub fn produce(&self, x: &Field2D, y: &Field2D) -> Result<Field2D> {
        match self {
            UcSource::PassThrough => Ok(y.clone()),
            UcSource::Interp { mid_h, mid_w } => down_up(y, *mid_h, *mid_w),
            UcSource::Encoder { params, ps } => crate::encoder::proxy_encode(x, params, ps)?.channel_mean(),
        }
    }
}

/// Means and ranges of the per-sample statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionSummary {
    pub samples: usize,
    pub ratio1_mean: f64,
    pub ratio2_mean: f64,
    pub hl_uc_mean: f64,
    pub hl_y_mean: f64,
    pub hl_yhat_mean: f64,
    pub g_high_min: f64,
    pub g_high_max: f64,
    pub g_low_min: f64,
    pub g_low_max: f64,
    pub reports: Vec<AssumptionReport>,
}

/// Statistics over `(x′, y)` pairs; `downstream` maps `u_c` to `ŷ`.
pub fn validate_assumptions(
    source: &UcSource,
    pairs: &[(Field2D, Field2D)],
    downstream: &(dyn Fn(&Field2D) -> Result<Field2D> + Sync),
    grid: &RadialGrid,
    eps: f64,
) -> Result<AssumptionSummary> {
    if pairs.is_empty() {
        return Err(invalid_input("no samples to validate"));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        let uc = source.produce(x, y)?;
        let yhat = downstream(&uc)?;
        reports.push(assumption_metrics(&uc, y, &yhat, grid, eps)?);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&AssumptionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let min = |f: fn(&AssumptionReport) -> f64| reports.iter().map(f).fold(f64::INFINITY, f64::min);
    let max = |f: fn(&AssumptionReport) -> f64| reports.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    Ok(AssumptionSummary {
        samples: reports.len(),
        ratio1_mean: mean(|r| r.ratio1),
        ratio2_mean: mean(|r| r.ratio2),
        hl_uc_mean: mean(|r| r.hl_uc),
        hl_y_mean: mean(|r| r.hl_y),
        hl_yhat_mean: mean(|r| r.hl_yhat),
        g_high_min: min(|r| r.g_high),
        g_high_max: max(|r| r.g_high),
        g_low_min: min(|r| r.g_low),
        g_low_max: max(|r| r.g_low),
        reports,
    })
}

/// High-band gains exercised by [`theorem1_suite`], each with `β = 1`.
pub const THEOREM1_ALPHAS: [f64; 3] = [0.1, 0.5, 0.9];

/// Runs at least `cases` (filter, field) pairs: the identity filter, whose
/// bound is attained exactly, plus band-constant and random filters for
/// every α in [`THEOREM1_ALPHAS`].
pub fn theorem1_suite(cases: usize, grid: &RadialGrid, eps: f64, seed: u64) -> Result<TheoremReport> {
    let (h, w) = grid.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut filters = vec![FilterCase { filter: DiagonalFilter::identity(h, w), alpha: 1.0, beta: 1.0 }];
    for a in THEOREM1_ALPHAS {
        filters.extend(theorem1_filters(grid, a, 1.0, &mut rng)?);
    }
    let n_fields = cases.div_ceil(filters.len()).max(1);
    let fields = test_fields(n_fields, h, w, rng.random())?;
    verify_theorem1(&filters, &fields, grid, eps)
}

/// Constant sets and constructions exercised by [`theorem2_suite`]; the
/// first is the all-ones case where the bound is tight.
pub fn theorem2_settings() -> Vec<(Theorem2Params, Construction)> {
    let p = |delta, kappa, m, big_m| Theorem2Params { delta, kappa, m, big_m };
    vec![
        (p(1.0, 1.0, 1.0, 1.0), Construction::Adversarial),
        (p(1.0, 1.0, 1.0, 1.0), Construction::Random),
        (p(2.0, 3.0, 0.5, 2.0), Construction::Adversarial),
        (p(2.0, 3.0, 0.5, 2.0), Construction::Random),
        (p(1.5, 8.0, 0.1, 1.0), Construction::Adversarial),
        (p(4.0, 1.0, 0.25, 4.0), Construction::Random),
    ]
}

/// Runs every setting of [`theorem2_settings`] on enough fields to reach
/// `cases` in total and merges the reports.
pub fn theorem2_suite(cases: usize, grid: &RadialGrid, eps: f64, seed: u64) -> Result<TheoremReport> {
    let (h, w) = grid.dims();
    let settings = theorem2_settings();
    let n_fields = cases.div_ceil(settings.len()).max(1);
    let fields = test_fields(n_fields, h, w, seed)?;
    let mut merged = TheoremReport {
        theorem: 2,
        cases_run: 0,
        violations: 0,
        energy_violations: 0,
        worst_margin: f64::INFINITY,
        parameters: BTreeMap::new(),
    };
    for (i, (params, construction)) in settings.into_iter().enumerate() {
        let r = verify_theorem2(params, construction, &fields, grid, eps, seed.wrapping_add(1000 * i as u64))?;
        merged.cases_run += r.cases_run;
        merged.violations += r.violations;
        merged.energy_violations += r.energy_violations;
        merged.worst_margin = merged.worst_margin.min(r.worst_margin);
    }
    merged.parameters.insert("settings".into(), theorem2_settings().len() as f64);
    merged.parameters.insert("r_split".into(), grid.r_split());
    merged.parameters.insert("eps".into(), eps);
    Ok(merged)
}
