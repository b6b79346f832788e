//! Loss functions: segmentation cross-entropy, channel-wise distillation
//! (CWD), the teacher's dual-path objective, and the student's distillation
//! objective. Each entry point returns the scalar value together with
//! analytic gradients w.r.t. the logits that are trainable by contract.

use ndarray::{Array1, Array3, Axis};

use crate::error::{LadError, Result};
use crate::label::{LabelMap, IGNORE};
use crate::real::Real;

/// Scalar weights of the composite objectives.
///
/// `lambda_consistency` scales the teacher's dual-path consistency term,
/// `beta_kd` the student's distillation term, `temperature` the CWD softmax.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_consistency: f64,
    pub beta_kd: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_consistency: 1.0,
            beta_kd: 3.0,
            temperature: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LadError::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.lambda_consistency < 0.0 || self.beta_kd < 0.0 {
            return Err(LadError::InvalidConfig(format!(
                "loss weights must be non-negative, got lambda={} beta={}",
                self.lambda_consistency, self.beta_kd
            )));
        }
        Ok(())
    }
}

/// Teacher objective value with per-term breakdown and per-path gradients.
/// `consistency` is the raw symmetrized CWD value, before the λ weight.
#[derive(Debug, Clone)]
pub struct TeacherLossOut<F> {
    pub total: F,
    pub ce_path1: F,
    pub ce_path2: F,
    pub consistency: F,
    pub grad_o1: Array3<F>,
    pub grad_o2: Array3<F>,
}

/// Student objective value with breakdown and the student-logits gradient.
/// `kd` is the raw CWD value, before the β weight.
#[derive(Debug, Clone)]
pub struct StudentLossOut<F> {
    pub total: F,
    pub ce: F,
    pub kd: F,
    pub grad: Array3<F>,
}

fn ensure_finite<F: Real>(context: &str, a: &Array3<F>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LadError::NonFinite(format!("{context} logits contain NaN or Inf")))
    }
}

fn check_same_shape<F: Real>(context: &str, a: &Array3<F>, b: &Array3<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(LadError::shape(
            context,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

fn check_logits_vs_label<F: Real>(logits: &Array3<F>, label: &LabelMap) -> Result<()> {
    let (c, h, w) = logits.dim();
    if c != label.num_classes() || h != label.height() || w != label.width() {
        return Err(LadError::shape(
            "logits vs label",
            format!("{}x{}x{}", label.num_classes(), label.height(), label.width()),
            format!("{c}x{h}x{w}"),
        ));
    }
    Ok(())
}

/// Mean cross-entropy over non-ignore pixels, with the gradient w.r.t. the
/// logits. Ignore pixels contribute nothing to the value and carry zero
/// gradient. All pixels ignored gives loss 0.
pub fn cross_entropy_seg_grad<F: Real>(
    logits: &Array3<F>,
    label: &LabelMap,
) -> Result<(F, Array3<F>)> {
    ensure_finite("cross-entropy", logits)?;
    check_logits_vs_label(logits, label)?;
    let (c, h, w) = logits.dim();
    let mut grad = Array3::zeros((c, h, w));
    let n_valid = label.num_valid();
    if n_valid == 0 {
        return Ok((F::zero(), grad));
    }
    let inv_n = F::one() / F::from_f64(n_valid as f64);
    let mut loss = F::zero();
    let mut probs = Array1::zeros(c);
    for y in 0..h {
        for x in 0..w {
            let v = label.get(y, x);
            if v == IGNORE {
                continue;
            }
            let target = usize::from(v);
            // stable log-softmax over the channel axis
            let mut max = logits[(0, y, x)];
            for i in 1..c {
                max = F::max(max, logits[(i, y, x)]);
            }
            let mut sum = F::zero();
            for i in 0..c {
                let e = (logits[(i, y, x)] - max).exp();
                probs[i] = e;
                sum = sum + e;
            }
            let log_sum = sum.ln();
            loss = loss - ((logits[(target, y, x)] - max) - log_sum) * inv_n;
            for i in 0..c {
                let p = probs[i] / sum;
                let indicator = if i == target { F::one() } else { F::zero() };
                grad[(i, y, x)] = (p - indicator) * inv_n;
            }
        }
    }
    Ok((loss, grad))
}

/// Scalar-only variant of [`cross_entropy_seg_grad`].
pub fn cross_entropy_seg<F: Real>(logits: &Array3<F>, label: &LabelMap) -> Result<F> {
    cross_entropy_seg_grad(logits, label).map(|(v, _)| v)
}

/// Core CWD computation. For each channel form the spatial softmax over all
/// H·W positions with temperature τ and accumulate KL(p ‖ q); the value is
/// scaled by τ²/C. Returns gradients w.r.t. both sides; callers drop the one
/// their contract detaches.
fn cwd_with_grads<F: Real>(
    p_logits: &Array3<F>,
    q_logits: &Array3<F>,
    temperature: f64,
) -> Result<(F, Array3<F>, Array3<F>)> {
    ensure_finite("cwd p-side", p_logits)?;
    ensure_finite("cwd q-side", q_logits)?;
    check_same_shape("cwd logits", p_logits, q_logits)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(LadError::InvalidConfig(format!(
            "cwd temperature must be positive and finite, got {temperature}"
        )));
    }
    let (c, h, w) = p_logits.dim();
    let tau = F::from_f64(temperature);
    let inv_tau = F::one() / tau;
    // d(τ²/C · KL)/d·logit carries one 1/τ from the softmax chain rule
    let coef = tau / F::from_f64(c as f64);
    let m = h * w;
    let mut grad_p = Array3::zeros((c, h, w));
    let mut grad_q = Array3::zeros((c, h, w));
    let mut lp = Array1::zeros(m);
    let mut lq = Array1::zeros(m);
    let mut kl_sum = F::zero();

    let log_softmax = |chan: ndarray::ArrayView2<F>, out: &mut Array1<F>| {
        let mut max = F::from_f64(f64::NEG_INFINITY);
        for (i, &v) in chan.iter().enumerate() {
            let a = v * inv_tau;
            out[i] = a;
            max = F::max(max, a);
        }
        let mut sum = F::zero();
        for i in 0..m {
            sum = sum + (out[i] - max).exp();
        }
        let lse = max + sum.ln();
        for i in 0..m {
            out[i] = out[i] - lse;
        }
    };

    for ch in 0..c {
        log_softmax(p_logits.index_axis(Axis(0), ch), &mut lp);
        log_softmax(q_logits.index_axis(Axis(0), ch), &mut lq);
        let mut kl = F::zero();
        for i in 0..m {
            kl = kl + lp[i].exp() * (lp[i] - lq[i]);
        }
        kl_sum = kl_sum + kl;
        let mut gp = grad_p.index_axis_mut(Axis(0), ch);
        let gp = gp.as_slice_mut().expect("contiguous");
        let mut gq = grad_q.index_axis_mut(Axis(0), ch);
        let gq = gq.as_slice_mut().expect("contiguous");
        for i in 0..m {
            let p = lp[i].exp();
            let q = lq[i].exp();
            gp[i] = coef * p * ((lp[i] - lq[i]) - kl);
            gq[i] = coef * (q - p);
        }
    }
    let scale = tau * tau / F::from_f64(c as f64);
    Ok((scale * kl_sum, grad_p, grad_q))
}

/// Channel-wise distillation loss. The teacher side is a detached constant:
/// no gradient object w.r.t. it exists.
pub fn cwd_loss<F: Real>(teacher: &Array3<F>, student: &Array3<F>, temperature: f64) -> Result<F> {
    cwd_with_grads(teacher, student, temperature).map(|(v, _, _)| v)
}

/// [`cwd_loss`] with the gradient w.r.t. the student logits.
pub fn cwd_loss_grad<F: Real>(
    teacher: &Array3<F>,
    student: &Array3<F>,
    temperature: f64,
) -> Result<(F, Array3<F>)> {
    cwd_with_grads(teacher, student, temperature).map(|(v, _, gq)| (v, gq))
}

/// Symmetrized dual-path consistency term ½[cwd(o1→o2) + cwd(o2→o1)],
/// differentiable through both paths.
pub fn consistency_cwd<F: Real>(
    o1: &Array3<F>,
    o2: &Array3<F>,
    temperature: f64,
) -> Result<(F, Array3<F>, Array3<F>)> {
    let (v12, p12, q12) = cwd_with_grads(o1, o2, temperature)?;
    let (v21, p21, q21) = cwd_with_grads(o2, o1, temperature)?;
    let half = F::from_f64(0.5);
    let value = half * (v12 + v21);
    let grad_o1 = (p12 + q21).mapv_into(|g| g * half);
    let grad_o2 = (q12 + p21).mapv_into(|g| g * half);
    Ok((value, grad_o1, grad_o2))
}

/// Teacher objective: CE on both paths plus λ times the symmetrized
/// consistency term.
pub fn teacher_loss<F: Real>(
    o1: &Array3<F>,
    o2: &Array3<F>,
    label: &LabelMap,
    weights: &LossWeights,
) -> Result<TeacherLossOut<F>> {
    weights.validate()?;
    check_same_shape("teacher paths", o1, o2)?;
    let (ce1, g_ce1) = cross_entropy_seg_grad(o1, label)?;
    let (ce2, g_ce2) = cross_entropy_seg_grad(o2, label)?;
    let (d, g_d1, g_d2) = consistency_cwd(o1, o2, weights.temperature)?;
    let lambda = F::from_f64(weights.lambda_consistency);
    let total = ce1 + ce2 + lambda * d;
    let grad_o1 = g_ce1 + g_d1.mapv_into(|g| g * lambda);
    let grad_o2 = g_ce2 + g_d2.mapv_into(|g| g * lambda);
    Ok(TeacherLossOut {
        total,
        ce_path1: ce1,
        ce_path2: ce2,
        consistency: d,
        grad_o1,
        grad_o2,
    })
}

/// Student objective: CE plus β times CWD against detached teacher logits.
pub fn student_loss<F: Real>(
    student: &Array3<F>,
    teacher: &Array3<F>,
    label: &LabelMap,
    weights: &LossWeights,
) -> Result<StudentLossOut<F>> {
    weights.validate()?;
    check_same_shape("student vs teacher", student, teacher)?;
    let (ce, g_ce) = cross_entropy_seg_grad(student, label)?;
    let (kd, g_kd) = cwd_loss_grad(teacher, student, weights.temperature)?;
    let beta = F::from_f64(weights.beta_kd);
    let total = ce + beta * kd;
    let grad = g_ce + g_kd.mapv_into(|g| g * beta);
    Ok(StudentLossOut { total, ce, kd, grad })
}
