//! Graph-free differentiable pieces: dropout, activations, log-softmax, the
//! masked NLL criterion, trainable parameters, Adam, and a finite-difference
//! gradient checker. Every forward has a hand-written backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor2D;

/// Inverted dropout with rows keyed by `0..rows`.
///
/// Returns `(y, mask)` with `y = x ⊙ mask`; `mask` holds `0` or `1/(1-p)`.
pub fn dropout(x: &Tensor2D, p: f64, rng: &RngStream, training: bool) -> Result<(Tensor2D, Tensor2D)> {
    let keys: Vec<usize> = (0..x.rows()).collect();
    dropout_rows(x, p, rng, &keys, training)
}

/// Inverted dropout where row `r` draws from `rng.fork(row_keys[r])`.
///
/// Keying rows by global node id makes a node's mask independent of which
/// micro-batch it lands in.
pub fn dropout_rows(
    x: &Tensor2D,
    p: f64,
    rng: &RngStream,
    row_keys: &[usize],
    training: bool,
) -> Result<(Tensor2D, Tensor2D)> {
    check_probability(p)?;
    if row_keys.len() != x.rows() {
        return Err(Error::shape(
            "dropout",
            format!("{} row keys for {} rows", row_keys.len(), x.rows()),
        ));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), Tensor2D::filled(x.rows(), x.cols(), 1.0)));
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor2D::zeros(x.rows(), x.cols());
    for (r, &key) in row_keys.iter().enumerate() {
        let stream = rng.fork(key as u64);
        for (c, m) in mask.row_mut(r).iter_mut().enumerate() {
            if stream.uniform_at(c as u64) >= p {
                *m = keep;
            }
        }
    }
    let y = x.hadamard(&mask)?;
    Ok((y, mask))
}

pub fn check_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(())
}

pub fn leaky_relu(x: &Tensor2D, slope: f64) -> Tensor2D {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor2D, dy: &Tensor2D, slope: f64) -> Result<Tensor2D> {
    let slopes = x.map(|v| if v > 0.0 { 1.0 } else { slope });
    dy.hadamard(&slopes)
}

/// ELU with α = 1.
pub fn elu(x: &Tensor2D) -> Tensor2D {
    x.map(|v| if v > 0.0 { v } else { v.exp_m1() })
}

pub fn elu_backward(x: &Tensor2D, dy: &Tensor2D) -> Result<Tensor2D> {
    let d = x.map(|v| if v > 0.0 { 1.0 } else { v.exp() });
    dy.hadamard(&d)
}

/// Row-wise log-softmax via max subtraction.
pub fn log_softmax_rows(x: &Tensor2D) -> Tensor2D {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    y
}

/// Backward of `log_softmax_rows` given its output `y`.
pub fn log_softmax_backward(y: &Tensor2D, dy: &Tensor2D) -> Result<Tensor2D> {
    if y.shape() != dy.shape() {
        return Err(Error::shape("log_softmax_backward", format!("{:?} vs {:?}", y.shape(), dy.shape())));
    }
    let mut dx = dy.clone();
    for r in 0..y.rows() {
        let s: f64 = dy.row(r).iter().sum();
        for (d, &lp) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
            *d -= lp.exp() * s;
        }
    }
    Ok(dx)
}

/// Mean negative log-likelihood over the masked rows.
pub fn masked_nll_loss(logp: &Tensor2D, labels: &[i64], mask: &[bool]) -> Result<(f64, Tensor2D)> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    masked_nll_loss_normalized(logp, labels, mask, count)
}

/// `-(1/normalizer) Σ_{i ∈ mask} logp[i, label_i]` and its gradient.
///
/// With `normalizer` set to the global masked count, the losses of the
/// micro-batches of a split sum to the full-batch mean. An all-false mask
/// yields zero loss and a zero gradient.
pub fn masked_nll_loss_normalized(
    logp: &Tensor2D,
    labels: &[i64],
    mask: &[bool],
    normalizer: usize,
) -> Result<(f64, Tensor2D)> {
    if labels.len() != logp.rows() || mask.len() != logp.rows() {
        return Err(Error::shape(
            "masked_nll_loss",
            format!("{} labels / {} mask for {} rows", labels.len(), mask.len(), logp.rows()),
        ));
    }
    let mut grad = Tensor2D::zeros(logp.rows(), logp.cols());
    if normalizer == 0 {
        return Ok((0.0, grad));
    }
    let w = 1.0 / normalizer as f64;
    let mut sum = 0.0;
    for (i, (&m, &label)) in mask.iter().zip(labels).enumerate() {
        if !m {
            continue;
        }
        if label < 0 || label as usize >= logp.cols() {
            return Err(Error::LabelOutOfRange {
                node: i,
                label,
                num_classes: logp.cols(),
            });
        }
        sum += logp.get(i, label as usize);
        grad.set(i, label as usize, -w);
    }
    Ok((-sum * w, grad))
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

impl Param {
    pub fn new(value: Tensor2D) -> Self {
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor2D) -> Result<()> {
        self.grad.add_assign(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// One Adam update of a single parameter at step `t ≥ 1`. L2 decay is
/// folded into the gradient before the moment updates.
pub fn adam_step(param: &mut Param, m: &mut Tensor2D, v: &mut Tensor2D, t: u64, cfg: &AdamConfig) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let values = param.value.data_mut();
    let grads = param.grad.data();
    for (((w, &g), m), v) in values
        .iter_mut()
        .zip(grads)
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        let g = g + cfg.weight_decay * *w;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam with moment buffers for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<(Tensor2D, Tensor2D)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    let (r, c) = p.value.shape();
                    (Tensor2D::zeros(r, c), Tensor2D::zeros(r, c))
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("{} params, optimizer tracks {}", params.len(), self.moments.len()),
            ));
        }
        self.t += 1;
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if m.shape() != p.value.shape() {
                return Err(Error::shape("adam", "parameter shape changed between steps"));
            }
            adam_step(p, m, v, self.t, &self.cfg);
        }
        Ok(())
    }
}

/// Something with parameters and a deterministic scalar objective.
pub trait Differentiable {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Evaluates the objective. When `with_grad` is set, analytic gradients
    /// are accumulated into the parameters as well.
    fn objective(&mut self, with_grad: bool) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Compares analytic gradients against central finite differences and
/// returns the worst relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<D: Differentiable + ?Sized>(model: &mut D, eps: f64) -> Result<GradCheck> {
    for p in model.params_mut() {
        p.zero_grad();
    }
    let base = model.objective(true)?;
    let analytic: Vec<Tensor2D> = model.params_mut().iter().map(|p| p.grad.clone()).collect();
    let again = model.objective(false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut worst = 0.0f64;
    let mut entries = 0;
    let counts: Vec<usize> = model.params_mut().iter().map(|p| p.value.data().len()).collect();
    for (pi, &len) in counts.iter().enumerate() {
        for k in 0..len {
            let orig = model.params_mut()[pi].value.data()[k];
            model.params_mut()[pi].value.data_mut()[k] = orig + eps;
            let plus = model.objective(false)?;
            model.params_mut()[pi].value.data_mut()[k] = orig - eps;
            let minus = model.objective(false)?;
            model.params_mut()[pi].value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn dropout_zero_p_is_exact() {
        let x = random(4, 3, 1);
        let (y, mask) = dropout(&x, 0.0, &RngStream::new(0, 0), true).unwrap();
        assert_eq!(y, x);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_eval_passthrough() {
        let x = random(4, 3, 2);
        let (y, _) = dropout(&x, 0.6, &RngStream::new(0, 0), false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let x = random(1, 1, 3);
        let rng = RngStream::new(0, 0);
        assert!(matches!(dropout(&x, 1.0, &rng, true), Err(Error::InvalidProbability(_))));
        assert!(dropout(&x, -0.1, &rng, true).is_err());
    }

    #[test]
    fn dropout_survivor_statistics() {
        let x = Tensor2D::filled(1000, 100, 1.0);
        let (y, mask) = dropout(&x, 0.6, &RngStream::new(9, 1), true).unwrap();
        let survivors: Vec<f64> = y.data().iter().copied().filter(|&v| v != 0.0).collect();
        let frac = survivors.len() as f64 / 100_000.0;
        assert!((frac - 0.4).abs() < 0.01, "survivor fraction {frac}");
        let mean = survivors.iter().sum::<f64>() / survivors.len() as f64;
        assert!((mean - 2.5).abs() / 2.5 < 0.01);
        assert_eq!(y, x.hadamard(&mask).unwrap());
    }

    #[test]
    fn dropout_masks_are_reproducible_and_row_keyed() {
        let x = Tensor2D::filled(6, 5, 1.0);
        let rng = RngStream::new(5, 2);
        let (_, a) = dropout(&x, 0.5, &rng, true).unwrap();
        let (_, b) = dropout(&x, 0.5, &rng, true).unwrap();
        assert_eq!(a, b);
        // Rows 3 and 4 alone, keyed by their original index, reproduce
        // the same mask rows.
        let sub = x.slice_rows(3, 5);
        let (_, c) = dropout_rows(&sub, 0.5, &rng, &[3, 4], true).unwrap();
        assert_eq!(c.row(0), a.row(3));
        assert_eq!(c.row(1), a.row(4));
    }

    #[test]
    fn leaky_relu_by_definition() {
        let x = Tensor2D::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn log_softmax_uniform_row() {
        let x = Tensor2D::filled(1, 4, 3.7);
        for &v in log_softmax_rows(&x).data() {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let x = random(20, 7, 4).map(|v| v * 30.0);
        let y = log_softmax_rows(&x);
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_closed_forms() {
        let uniform = Tensor2D::filled(3, 7, (1.0f64 / 7.0).ln());
        let (loss, _) = masked_nll_loss(&uniform, &[0, 3, 6], &[true, true, true]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);

        let mut perfect = Tensor2D::filled(2, 3, -50.0);
        perfect.set(0, 1, 0.0);
        perfect.set(1, 2, 0.0);
        let (loss, _) = masked_nll_loss(&perfect, &[1, 2], &[true, true]).unwrap();
        assert_eq!(loss, 0.0);

        assert!(matches!(
            masked_nll_loss(&perfect, &[1, 2], &[false, false]),
            Err(Error::EmptyMask)
        ));
        let (l, g) = masked_nll_loss_normalized(&perfect, &[1, 2], &[false, false], 10).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let logp = random(5, 3, 6);
        let labels = [0, 2, 1, 1, 0];
        let mask = [true, false, true, true, false];
        let (_, grad) = masked_nll_loss(&logp, &labels, &mask).unwrap();
        let eps = 1e-5;
        for i in 0..5 {
            for c in 0..3 {
                let mut p = logp.clone();
                p.set(i, c, logp.get(i, c) + eps);
                let (lp, _) = masked_nll_loss(&p, &labels, &mask).unwrap();
                p.set(i, c, logp.get(i, c) - eps);
                let (lm, _) = masked_nll_loss(&p, &labels, &mask).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let a = grad.get(i, c);
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-6);
                if !mask[i] {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = Param::new(random(3, 2, 7));
        let before = p.value.clone();
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new(Tensor2D::filled(1, 1, 0.3));
        p.grad.set(0, 0, 1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut m = Tensor2D::zeros(1, 1);
        let mut v = Tensor2D::zeros(1, 1);
        adam_step(&mut p, &mut m, &mut v, 1, &cfg);
        // m̂ = 1, v̂ = 1, so the update is -lr / (1 + eps).
        assert!((p.value.get(0, 0) - (0.3 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut p = Param::new(Tensor2D::filled(1, 1, 1.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..100 {
            let w = p.value.get(0, 0);
            p.grad.set(0, 0, 2.0 * w);
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!(p.value.get(0, 0).abs() < 0.1);
    }

    struct Linear {
        w: Param,
        x: Tensor2D,
        r: Tensor2D,
    }

    impl Differentiable for Linear {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w]
        }
        fn objective(&mut self, with_grad: bool) -> Result<f64> {
            let y = self.x.matmul(&self.w.value)?;
            if with_grad {
                let g = self.x.matmul_tn(&self.r)?;
                self.w.accumulate(&g)?;
            }
            Ok(y.hadamard(&self.r)?.sum())
        }
    }

    #[test]
    fn grad_check_linear() {
        let mut m = Linear {
            w: Param::new(random(4, 3, 10)),
            x: random(6, 4, 11),
            r: random(6, 3, 12),
        };
        let gc = grad_check(&mut m, 1e-5).unwrap();
        assert_eq!(gc.entries, 12);
        assert!(gc.max_rel_err < 1e-8, "{gc:?}");
    }

    struct FrozenDropout {
        w: Param,
        x: Tensor2D,
        r: Tensor2D,
    }

    impl Differentiable for FrozenDropout {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w]
        }
        fn objective(&mut self, with_grad: bool) -> Result<f64> {
            let h = self.x.matmul(&self.w.value)?;
            let (y, mask) = dropout(&h, 0.5, &RngStream::new(1, 1), true)?;
            if with_grad {
                let dh = self.r.hadamard(&mask)?;
                self.w.accumulate(&self.x.matmul_tn(&dh)?)?;
            }
            Ok(y.hadamard(&self.r)?.sum())
        }
    }

    #[test]
    fn grad_check_frozen_dropout() {
        let mut m = FrozenDropout {
            w: Param::new(random(3, 4, 13)),
            x: random(5, 3, 14),
            r: random(5, 4, 15),
        };
        assert!(grad_check(&mut m, 1e-5).unwrap().max_rel_err < 1e-8);
    }

    struct Activations {
        w: Param,
        x: Tensor2D,
        labels: Vec<i64>,
    }

    impl Differentiable for Activations {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w]
        }
        fn objective(&mut self, with_grad: bool) -> Result<f64> {
            let h = self.x.matmul(&self.w.value)?;
            let a = elu(&h);
            let b = leaky_relu(&a, 0.2);
            let y = log_softmax_rows(&b);
            let mask = vec![true; self.labels.len()];
            let (loss, dy) = masked_nll_loss(&y, &self.labels, &mask)?;
            if with_grad {
                let db = log_softmax_backward(&y, &dy)?;
                let da = leaky_relu_backward(&a, &db, 0.2)?;
                let dh = elu_backward(&h, &da)?;
                self.w.accumulate(&self.x.matmul_tn(&dh)?)?;
            }
            Ok(loss)
        }
    }

    #[test]
    fn grad_check_activation_chain() {
        let mut m = Activations {
            w: Param::new(random(4, 3, 16)),
            x: random(8, 4, 17),
            labels: vec![0, 1, 2, 0, 1, 2, 2, 1],
        };
        assert!(grad_check(&mut m, 1e-5).unwrap().max_rel_err < 1e-6);
    }

    struct Flaky {
        w: Param,
        calls: u32,
    }

    impl Differentiable for Flaky {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w]
        }
        fn objective(&mut self, _with_grad: bool) -> Result<f64> {
            self.calls += 1;
            Ok(self.w.value.sum() + self.calls as f64)
        }
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        let mut m = Flaky {
            w: Param::new(Tensor2D::zeros(1, 1)),
            calls: 0,
        };
        assert!(matches!(grad_check(&mut m, 1e-5), Err(Error::NonDeterministic { .. })));
    }
}
