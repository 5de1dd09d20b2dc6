//! Centered 2D DFT pair and the brute-force oracle.
//!
//! Convention: the forward transform is unnormalized, the inverse carries
//! `1/(H·W)`. The zero frequency sits at `(H/2, W/2)`; for even extents the
//! unpaired Nyquist row/column lands at index 0, on the negative side.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Field2D, Spectrum2D};

/// Largest `H·W` the quadratic oracle accepts.
pub const ORACLE_MAX_ENTRIES: usize = 4096;

/// Imaginary residue (relative to the largest real magnitude) above which a
/// dropped imaginary part is counted.
pub const IMAG_RESIDUE_TOL: f64 = 1e-10;

static RESIDUE_DROPS: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Number of inverse transforms whose non-negligible imaginary part was discarded.
pub fn residue_drop_count() -> u64 {
    RESIDUE_DROPS.load(Ordering::Relaxed)
}

fn fft_rows(buf: &mut [Complex64], len: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let fft = if inverse { p.plan_fft_inverse(len) } else { p.plan_fft_forward(len) };
        fft.process(buf);
    });
}

/// Unnormalized, uncentered 2D FFT in place.
pub(crate) fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    fft_rows(buf, w, inverse);
    let mut cols = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            cols[j * h + i] = buf[i * w + j];
        }
    }
    fft_rows(&mut cols, h, inverse);
    for j in 0..w {
        for i in 0..h {
            buf[i * w + j] = cols[j * h + i];
        }
    }
}

/// Moves index 0 to `(H/2, W/2)`.
pub(crate) fn shift<T: Copy + Default>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); h * w];
    let (ch, cw) = (h / 2, w / 2);
    for i in 0..h {
        let oi = (i + ch) % h;
        for j in 0..w {
            out[oi * w + (j + cw) % w] = src[i * w + j];
        }
    }
    out
}

/// Inverse of [`shift`].
pub(crate) fn ishift<T: Copy + Default>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); h * w];
    let (ch, cw) = (h / 2, w / 2);
    for i in 0..h {
        let si = (i + ch) % h;
        for j in 0..w {
            out[i * w + j] = src[si * w + (j + cw) % w];
        }
    }
    out
}

/// Centered forward transform of one real plane.
pub(crate) fn dft_plane_real(u: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, false);
    shift(&buf, h, w)
}

/// Centered inverse transform of one plane, complex result, `1/(HW)` scaled.
pub(crate) fn idft_plane(s: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf = ishift(s, h, w);
    fft2_in_place(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Splits a complex plane into its real part and the relative imaginary residue.
pub(crate) fn real_part_with_residue(v: &[Complex64]) -> (Vec<f64>, f64) {
    let max_re = v.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    let max_im = v.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let rel = max_im / max_re.max(1.0);
    (v.iter().map(|c| c.re).collect(), rel)
}

pub(crate) fn note_residue(rel: f64) {
    if rel >= IMAG_RESIDUE_TOL {
        RESIDUE_DROPS.fetch_add(1, Ordering::Relaxed);
        log::debug!("dropped imaginary residue {rel:.3e} in inverse DFT");
    }
}

pub fn dft_centered(u: &Field2D) -> Result<Spectrum2D> {
    let (h, w) = u.dims();
    Spectrum2D::new(h, w, dft_plane_real(u.data(), h, w))
}

/// Real part of the centered inverse. Returns the relative imaginary residue
/// alongside the field.
pub fn idft_centered_checked(s: &Spectrum2D) -> Result<(Field2D, f64)> {
    let (h, w) = s.dims();
    let (re, rel) = real_part_with_residue(&idft_plane(s.data(), h, w));
    Ok((Field2D::new(h, w, re)?, rel))
}

pub fn idft_centered(s: &Spectrum2D) -> Result<Field2D> {
    let (f, rel) = idft_centered_checked(s)?;
    note_residue(rel);
    Ok(f)
}

/// Signed frequency of centered index `i` on an axis of length `n`.
#[inline]
pub fn centered_freq(i: usize, n: usize) -> i64 {
    i as i64 - (n / 2) as i64
}

fn twiddle(k: i64, x: usize, n: usize, sign: f64) -> Complex64 {
    // reduce the phase exactly in integers before going to floating point
    let m = (k * x as i64).rem_euclid(n as i64) as f64;
    Complex64::from_polar(1.0, sign * 2.0 * PI * m / n as f64)
}

fn oracle_guard(h: usize, w: usize) -> Result<()> {
    if h * w > ORACLE_MAX_ENTRIES {
        return Err(Error::OracleTooLarge { h, w, max: ORACLE_MAX_ENTRIES });
    }
    Ok(())
}

/// Centered DFT evaluated straight from the double-sum definition.
pub fn dft_oracle(u: &Field2D) -> Result<Spectrum2D> {
    let (h, w) = u.dims();
    oracle_guard(h, w)?;
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..h {
        let kp = centered_freq(p, h);
        for q in 0..w {
            let kq = centered_freq(q, w);
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..h {
                let ti = twiddle(kp, i, h, -1.0);
                for j in 0..w {
                    acc += u.get(i, j) * ti * twiddle(kq, j, w, -1.0);
                }
            }
            out[p * w + q] = acc;
        }
    }
    Spectrum2D::new(h, w, out)
}

/// Complex inverse of a centered spectrum from the double-sum definition.
pub fn idft_oracle(s: &Spectrum2D) -> Result<Vec<Complex64>> {
    let (h, w) = s.dims();
    oracle_guard(h, w)?;
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for p in 0..h {
                let tp = twiddle(centered_freq(p, h), i, h, 1.0);
                for q in 0..w {
                    acc += s.get(p, q) * tp * twiddle(centered_freq(q, w), j, w, 1.0);
                }
            }
            out[i * w + j] = acc * scale;
        }
    }
    Ok(out)
}

/// Index mirrored about the center, `ω → −ω`, for a centered axis of length `n`.
#[inline]
pub fn mirror_index(i: usize, n: usize) -> usize {
    (2 * (n / 2) + n - i) % n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Field2D {
        Field2D::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn constant_field_is_dc_only() {
        let u = Field2D::constant(4, 4, 2.5).unwrap();
        let s = dft_centered(&u).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let v = s.get(i, j);
                if (i, j) == (2, 2) {
                    assert!((v.re - 40.0).abs() < 1e-12 && v.im.abs() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_field(8, 8, &mut rng);
        let back = idft_centered(&dft_centered(&u).unwrap()).unwrap();
        assert!(back.max_abs_diff(&u) < 1e-12);
    }

    #[test]
    fn center_only_spectrum_inverts_to_ones() {
        let (h, w) = (5, 6);
        let mut data = vec![Complex64::new(0.0, 0.0); h * w];
        data[(h / 2) * w + w / 2] = Complex64::new((h * w) as f64, 0.0);
        let f = idft_centered(&Spectrum2D::new(h, w, data).unwrap()).unwrap();
        assert!(f.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_round_trip() {
        let u = Field2D::from_fn(6, 6, |i, j| if (i + j) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let back = idft_centered(&dft_centered(&u).unwrap()).unwrap();
        assert!(back.max_abs_diff(&u) < 1e-12);
    }

    #[test]
    fn odd_and_even_sizes_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w) in [(6, 6), (5, 7), (4, 9), (2, 2)] {
            let u = random_field(h, w, &mut rng);
            let fast = dft_centered(&u).unwrap();
            let slow = dft_oracle(&u).unwrap();
            let err = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn nonsymmetric_inverse_real_part_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 5);
        let data = (0..h * w)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s = Spectrum2D::new(h, w, data).unwrap();
        let (fast, rel) = idft_centered_checked(&s).unwrap();
        assert!(rel > IMAG_RESIDUE_TOL);
        let slow = idft_oracle(&s).unwrap();
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b.re).abs() < 1e-9);
        }
        let before = residue_drop_count();
        idft_centered(&s).unwrap();
        assert!(residue_drop_count() > before);
    }

    #[test]
    fn oracle_ones_and_guard() {
        let s = dft_oracle(&Field2D::constant(2, 2, 1.0).unwrap()).unwrap();
        assert!((s.get(1, 1).re - 4.0).abs() < 1e-15);
        for (i, j) in [(0, 0), (0, 1), (1, 0)] {
            assert!(s.get(i, j).norm() < 1e-15);
        }
        let big = Field2D::constant(65, 64, 0.0).unwrap();
        assert!(matches!(dft_oracle(&big), Err(Error::OracleTooLarge { .. })));
    }

    #[test]
    fn oracle_cosine_has_two_peaks() {
        let k = 2;
        let u = Field2D::from_fn(8, 8, |_, j| (2.0 * PI * (j * k) as f64 / 8.0).cos()).unwrap();
        let s = dft_oracle(&u).unwrap();
        let peaks: Vec<(usize, usize)> = (0..8)
            .flat_map(|i| (0..8).map(move |j| (i, j)))
            .filter(|&(i, j)| s.get(i, j).norm() > 1e-9)
            .collect();
        assert_eq!(peaks, vec![(4, 2), (4, 6)]);
        assert!((s.get(4, 2).re - 32.0).abs() < 1e-9);
        assert!((s.get(4, 6).re - 32.0).abs() < 1e-9);
    }

    #[test]
    fn real_field_spectrum_is_conjugate_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (h, w) in [(6, 8), (5, 7), (4, 5)] {
            let u = random_field(h, w, &mut rng);
            let s = dft_centered(&u).unwrap();
            for i in 0..h {
                for j in 0..w {
                    let a = s.get(i, j);
                    let b = s.get(mirror_index(i, h), mirror_index(j, w));
                    assert!((a - b.conj()).norm() < 1e-10);
                }
            }
        }
    }
}
