//! Composite training loss.
//!
//! Per sample: `MAE(ŷ, y) + λ_grad·L1(∇ŷ, ∇y) + λ_freq·mean|(|Û| − |Ŷ|)| +
//! λ_l1·mean|g| + λ_l2·mean g²`, with forward differences along both axes
//! and the unnormalized centered DFT. Per batch, `λ_ce` times the squared
//! coefficient of variation of per-expert importance `Σ_b α_{b,e}` is added.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid_config, invalid_input, Result};
use crate::fft::dft_plane_real;
use crate::router::RouterDecision;
use crate::tensor::{Field2D, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub grad: f64,
    pub freq: f64,
    /// Load balance.
    pub ce: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { grad: 0.15, freq: 0.10, ce: 0.20, l1: 0.60, l2: 0.40 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("grad", self.grad), ("freq", self.freq), ("ce", self.ce), ("l1", self.l1), ("l2", self.l2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid_config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted terms and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mae: f64,
    pub grad: f64,
    pub freq: f64,
    pub load_balance: f64,
    pub logit_l1: f64,
    pub logit_l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(mut self, w: &LossWeights) -> Self {
        self.total = self.mae
            + w.grad * self.grad
            + w.freq * self.freq
            + w.ce * self.load_balance
            + w.l1 * self.logit_l1
            + w.l2 * self.logit_l2;
        self
    }
}

/// Per-expert importance over a batch of routing decisions.
pub fn importance(decisions: &[RouterDecision], n_experts: usize) -> Result<Vec<f64>> {
    let mut imp = vec![0.0; n_experts];
    for d in decisions {
        for (&e, &a) in d.selected.iter().zip(&d.alpha) {
            *imp.get_mut(e).ok_or_else(|| invalid_input(format!("expert {e} out of range")))? += a;
        }
    }
    Ok(imp)
}

/// Squared coefficient of variation with the population variance; zero for
/// an all-zero vector.
pub fn cv_squared(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.is_empty() || m == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    var / (m * m)
}

/// `∂ CV² / ∂ v_e = 2 (v_e − mean(v²)/m) / (N m²)`.
pub fn cv_squared_grad(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.is_empty() || m == 0.0 {
        return vec![0.0; v.len()];
    }
    let a = v.iter().map(|x| x * x).sum::<f64>() / n;
    v.iter().map(|x| 2.0 * (x - a / m) / (n * m * m)).collect()
}

fn check_pair(y_hat: &Field2D, y: &Field2D) -> Result<()> {
    if y_hat.dims() != y.dims() {
        return Err(invalid_input(format!("prediction is {:?}, target is {:?}", y_hat.dims(), y.dims())));
    }
    Ok(())
}

fn forward_diff_l1(a: &Field2D, b: &Field2D) -> f64 {
    let (h, w) = a.dims();
    let d = |f: &Field2D, i: usize, j: usize, di: usize, dj: usize| f.get(i + di, j + dj) - f.get(i, j);
    let mut sx = 0.0;
    for i in 0..h {
        for j in 0..w - 1 {
            sx += (d(a, i, j, 0, 1) - d(b, i, j, 0, 1)).abs();
        }
    }
    let mut sy = 0.0;
    for i in 0..h - 1 {
        for j in 0..w {
            sy += (d(a, i, j, 1, 0) - d(b, i, j, 1, 0)).abs();
        }
    }
    sx / (h * (w - 1)) as f64 + sy / ((h - 1) * w) as f64
}

fn spectral_l1(a: &Field2D, b: &Field2D) -> f64 {
    let (h, w) = a.dims();
    let sa = dft_plane_real(a.data(), h, w);
    let sb = dft_plane_real(b.data(), h, w);
    sa.iter().zip(&sb).map(|(p, q)| (p.norm() - q.norm()).abs()).sum::<f64>() / (h * w) as f64
}

/// Loss of one prediction with the router statistics of its batch.
pub fn composite_loss(
    y_hat: &Field2D,
    y: &Field2D,
    decisions: &[RouterDecision],
    n_experts: usize,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_pair(y_hat, y)?;
    let n = y.data().len() as f64;
    let mae = y_hat.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let logits: Vec<f64> = decisions.iter().flat_map(|d| d.logits.iter().copied()).collect();
    let nl = logits.len().max(1) as f64;
    let out = LossBreakdown {
        mae,
        grad: forward_diff_l1(y_hat, y),
        freq: spectral_l1(y_hat, y),
        load_balance: if decisions.is_empty() { 0.0 } else { cv_squared(&importance(decisions, n_experts)?) },
        logit_l1: logits.iter().map(|g| g.abs()).sum::<f64>() / nl,
        logit_l2: logits.iter().map(|g| g * g).sum::<f64>() / nl,
        total: 0.0,
    };
    Ok(out.weighted(w))
}

/// Per-sample loss nodes recorded on a tape.
pub struct SampleLoss {
    /// Weighted sum of every per-sample term.
    pub total: Var,
    /// Unweighted terms, `load_balance` left at zero.
    pub terms: LossBreakdown,
}

fn shift_index(h: usize, w: usize, di: usize, dj: usize) -> (Arc<Vec<Option<usize>>>, Arc<Vec<Option<usize>>>) {
    let (rh, rw) = (h - di, w - dj);
    let mut base = Vec::with_capacity(rh * rw);
    let mut moved = Vec::with_capacity(rh * rw);
    for i in 0..rh {
        for j in 0..rw {
            base.push(Some(i * w + j));
            moved.push(Some((i + di) * w + j + dj));
        }
    }
    (Arc::new(base), Arc::new(moved))
}

fn l1_to_constant(tape: &mut Tape, a: Var, target: Tensor) -> Result<Var> {
    let t = tape.constant(target);
    let d = tape.sub(a, t)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

fn diff_on_tape(tape: &mut Tape, a: Var, h: usize, w: usize, di: usize, dj: usize) -> Result<Var> {
    let (base, moved) = shift_index(h, w, di, dj);
    let shape = [h - di, w - dj];
    let p = tape.gather(a, base, &shape)?;
    let q = tape.gather(a, moved, &shape)?;
    tape.sub(q, p)
}

fn diff_values(y: &Field2D, di: usize, dj: usize) -> Result<Tensor> {
    let (h, w) = y.dims();
    let (rh, rw) = (h - di, w - dj);
    Tensor::new(
        vec![rh, rw],
        (0..rh * rw).map(|k| y.get(k / rw + di, k % rw + dj) - y.get(k / rw, k % rw)).collect(),
    )
}

/// Records the per-sample terms for an `[H, W]` prediction node and `[N_E]` logits.
pub fn sample_loss_on_tape(tape: &mut Tape, y_hat: Var, y: &Field2D, logits: Var, w: &LossWeights) -> Result<SampleLoss> {
    let (h, wd) = y.dims();
    if tape.shape(y_hat) != [h, wd] {
        return Err(invalid_input(format!("prediction is {:?}, target is {h}x{wd}", tape.shape(y_hat))));
    }
    let mae = l1_to_constant(tape, y_hat, y.to_tensor())?;
    let dx = diff_on_tape(tape, y_hat, h, wd, 0, 1)?;
    let gx = l1_to_constant(tape, dx, diff_values(y, 0, 1)?)?;
    let dy = diff_on_tape(tape, y_hat, h, wd, 1, 0)?;
    let gy = l1_to_constant(tape, dy, diff_values(y, 1, 0)?)?;
    let grad = tape.add(gx, gy)?;
    let planes = tape.reshape(y_hat, &[1, h, wd])?;
    let spec = tape.dft(planes)?;
    let mag = tape.magnitude(spec)?;
    let target_mag: Vec<f64> = dft_plane_real(y.data(), h, wd).iter().map(|c| c.norm()).collect();
    let freq = l1_to_constant(tape, mag, Tensor::new(vec![1, h, wd], target_mag)?)?;
    let ga = tape.abs(logits);
    let l1 = tape.mean(ga);
    let gs = tape.square(logits);
    let l2 = tape.mean(gs);

    let mut total = mae;
    for (v, c) in [(grad, w.grad), (freq, w.freq), (l1, w.l1), (l2, w.l2)] {
        if c != 0.0 {
            let s = tape.scale(v, c);
            total = tape.add(total, s)?;
        }
    }
    let val = |v: Var| tape.value(v).data()[0];
    let terms = LossBreakdown {
        mae: val(mae),
        grad: val(grad),
        freq: val(freq),
        load_balance: 0.0,
        logit_l1: val(l1),
        logit_l2: val(l2),
        total: val(total),
    };
    Ok(SampleLoss { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Field2D {
        Field2D::from_fn(h, w, |_, _| rng.random_range(0.0..1.0)).unwrap()
    }

    fn decision(selected: Vec<usize>, alpha: Vec<f64>, logits: Vec<f64>) -> RouterDecision {
        RouterDecision { selected, alpha, logits }
    }

    #[test]
    fn exact_prediction_with_balanced_routing_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_field(8, 8, &mut rng);
        let ds = vec![
            decision(vec![0, 1], vec![0.5, 0.5], vec![0.0; 3]),
            decision(vec![1, 2], vec![0.5, 0.5], vec![0.0; 3]),
            decision(vec![2, 0], vec![0.5, 0.5], vec![0.0; 3]),
        ];
        let l = composite_loss(&y, &y, &ds, 3, &LossWeights::default()).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn constant_offset_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_field(12, 10, &mut rng);
        let y_hat = Field2D::from_fn(12, 10, |i, j| y.get(i, j) + 0.1).unwrap();
        let l = composite_loss(&y_hat, &y, &[], 3, &LossWeights::default()).unwrap();
        assert!((l.mae - 0.1).abs() < 1e-12);
        assert!(l.grad.abs() < 1e-12);
        assert!((l.freq - 0.1).abs() < 1e-12);
    }

    #[test]
    fn one_hot_importance_has_cv_two() {
        assert!((cv_squared(&[1.0, 0.0, 0.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cv_squared(&[0.5, 0.5, 0.5]), 0.0);
        let ds = vec![decision(vec![0], vec![1.0], vec![1.0, 0.0, 0.0])];
        let l = composite_loss(&Field2D::constant(2, 2, 0.0).unwrap(), &Field2D::constant(2, 2, 0.0).unwrap(), &ds, 3, &LossWeights::default())
            .unwrap();
        assert!((l.load_balance - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cv_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..2.0)).collect();
            let g = cv_squared_grad(&v);
            for e in 0..4 {
                let h = 1e-6;
                let (mut p, mut m) = (v.clone(), v.clone());
                p[e] += h;
                m[e] -= h;
                let fd = (cv_squared(&p) - cv_squared(&m)) / (2.0 * h);
                assert!((fd - g[e]).abs() < 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn taped_terms_match_plain_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = LossWeights::default();
        for _ in 0..5 {
            let y = random_field(9, 8, &mut rng);
            let y_hat = random_field(9, 8, &mut rng);
            let logits = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let mut tape = Tape::new();
            let yv = tape.constant(y_hat.to_tensor());
            let gv = tape.constant(Tensor::new(vec![3], logits.clone()).unwrap());
            let s = sample_loss_on_tape(&mut tape, yv, &y, gv, &w).unwrap();
            let mut plain = composite_loss(&y_hat, &y, &[decision(vec![0], vec![1.0], logits)], 3, &w).unwrap();
            plain.total -= w.ce * plain.load_balance;
            plain.load_balance = 0.0;
            let t = &s.terms;
            for (a, b) in [(t.mae, plain.mae), (t.grad, plain.grad), (t.freq, plain.freq), (t.logit_l1, plain.logit_l1), (t.logit_l2, plain.logit_l2), (t.total, plain.total)] {
                assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn taped_loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LossWeights::default();
        let y = random_field(6, 7, &mut rng);
        let y_hat = random_field(6, 7, &mut rng);
        let logits = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let eval = |yh: &Tensor| {
            let mut tape = Tape::new();
            let yv = tape.constant(yh.clone());
            let gv = tape.constant(logits.clone());
            let s = sample_loss_on_tape(&mut tape, yv, &y, gv, &w).unwrap();
            tape.value(s.total).data()[0]
        };
        let mut tape = Tape::new();
        let yv = tape.constant(y_hat.to_tensor());
        let gv = tape.constant(logits.clone());
        let s = sample_loss_on_tape(&mut tape, yv, &y, gv, &w).unwrap();
        let g = tape.backward(s.total).unwrap().wrt(yv);
        let base = y_hat.to_tensor();
        for k in 0..base.len() {
            let h = 1e-6;
            let (mut p, mut m) = (base.clone(), base.clone());
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-6, "entry {k}: {fd} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights { grad: -1.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
