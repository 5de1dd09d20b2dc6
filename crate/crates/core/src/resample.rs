//! Separable linear resampling: corner-aligned bilinear and area averaging.

use std::sync::Arc;

use crate::autodiff::{resample_forward, Matrix};
use crate::error::{invalid_config, Result};
use crate::tensor::Field2D;

/// 1D corner-aligned bilinear map from `n_in` to `n_out` samples.
///
/// Output sample `i` reads input coordinate `i·(n_in−1)/(n_out−1)`, so the
/// first and last samples of both grids coincide.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Result<Matrix> {
    if n_in == 0 || n_out == 0 {
        return Err(invalid_config(format!("cannot resample {n_in} samples to {n_out}")));
    }
    let mut m = Matrix::zeros(n_out, n_in);
    if n_in == 1 {
        m.data.iter_mut().for_each(|v| *v = 1.0);
        return Ok(m);
    }
    if n_out == 1 {
        m.add_at(0, 0, 1.0);
        return Ok(m);
    }
    for i in 0..n_out {
        let x = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
        let i0 = (x.floor() as usize).min(n_in - 1);
        let frac = x - i0 as f64;
        if frac == 0.0 || i0 + 1 >= n_in {
            m.add_at(i, i0, 1.0);
        } else {
            m.add_at(i, i0, 1.0 - frac);
            m.add_at(i, i0 + 1, frac);
        }
    }
    Ok(m)
}

/// 1D area-average map from `n_in` to `n_out ≤ n_in` samples: each output
/// cell averages the input cells it overlaps, weighted by overlap length.
pub fn area_matrix(n_in: usize, n_out: usize) -> Result<Matrix> {
    if n_out == 0 || n_out > n_in {
        return Err(invalid_config(format!("area averaging needs 1 ≤ n_out ≤ n_in, got {n_in} -> {n_out}")));
    }
    let mut m = Matrix::zeros(n_out, n_in);
    let s = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let lo = o as f64 * s;
        let hi = lo + s;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(n_in);
        for j in first..last {
            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            if overlap > 0.0 {
                m.add_at(o, j, overlap / s);
            }
        }
    }
    Ok(m)
}

/// Row and column maps for a 2D resize, shared so the tape can hold them.
pub fn bilinear_maps(h: usize, w: usize, h2: usize, w2: usize) -> Result<(Arc<Matrix>, Arc<Matrix>)> {
    Ok((Arc::new(bilinear_matrix(h, h2)?), Arc::new(bilinear_matrix(w, w2)?)))
}

pub fn area_maps(h: usize, w: usize, h2: usize, w2: usize) -> Result<(Arc<Matrix>, Arc<Matrix>)> {
    Ok((Arc::new(area_matrix(h, h2)?), Arc::new(area_matrix(w, w2)?)))
}

/// Applies separable maps to a field.
pub fn apply_separable(u: &Field2D, rh: &Matrix, rw: &Matrix) -> Result<Field2D> {
    let (h, w) = u.dims();
    if rh.cols != h || rw.cols != w {
        return Err(invalid_config(format!("{}x{} maps for a {h}x{w} field", rh.cols, rw.cols)));
    }
    Field2D::new(rh.rows, rw.rows, resample_forward(u.data(), 1, h, w, rh, rw))
}

/// Corner-aligned bilinear resize to `h2 × w2`.
pub fn interp_resize(u: &Field2D, h2: usize, w2: usize) -> Result<Field2D> {
    if h2 < 2 || w2 < 2 {
        return Err(invalid_config(format!("resize target must be at least 2x2, got {h2}x{w2}")));
    }
    let (h, w) = u.dims();
    apply_separable(u, &bilinear_matrix(h, h2)?, &bilinear_matrix(w, w2)?)
}

/// Bilinear down to `mid` then back up: the interpolation frontend.
pub fn down_up(u: &Field2D, mid_h: usize, mid_w: usize) -> Result<Field2D> {
    let (h, w) = u.dims();
    interp_resize(&interp_resize(u, mid_h, mid_w)?, h, w)
}
