//! Temperature softmax, cross-entropy, KL divergence and the distillation
//! objective `CE + mean_teachers KL(p_teacher,T || p_student,T)`.

use super::{backward, forward, forward_cached, Dataset, ModelParams, NnError};

/// Lower clamp applied to `q` inside `ln(p / q)`.
pub const KL_FLOOR: f64 = 1e-12;

/// Loss value and gradient with respect to the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `exp(z/T) / sum exp(z_i/T)`, max-subtracted.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn check_distribution(p: &[f64], name: &str) -> Result<(), NnError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| v.is_nan() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(NnError::NotADistribution(format!("{name}: sum {sum}")));
    }
    Ok(())
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum()
}

/// `sum p_i ln(p_i / q_i)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, NnError> {
    if p.len() != q.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_unchecked(p, q))
}

fn check_batch(model: &ModelParams, batch: &Dataset) -> Result<(), NnError> {
    if batch.dim() != model.input_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "batch width {} vs model input {}",
            batch.dim(),
            model.input_dim()
        )));
    }
    if batch.n_classes() > model.output_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "{} classes vs {} outputs",
            batch.n_classes(),
            model.output_dim()
        )));
    }
    if batch.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against the labels.
pub fn ce_loss(model: &ModelParams, batch: &Dataset) -> Result<LossGrad, NnError> {
    distill_loss(model, &[], batch, 1.0)
}

/// Cross-entropy plus the teacher-averaged KL term at `temperature`.
/// Teachers are constants: no gradient flows into them.
pub fn distill_loss(
    student: &ModelParams,
    teachers: &[&ModelParams],
    batch: &Dataset,
    temperature: f64,
) -> Result<LossGrad, NnError> {
    check_batch(student, batch)?;
    for t in teachers {
        student.ensure_same_shape(t)?;
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(NnError::BadConfig(format!("temperature {temperature}")));
    }
    let rows = batch.len();
    let k = student.output_dim();
    let cache = forward_cached(student, batch.features())?;
    let teacher_logits = teachers
        .iter()
        .map(|t| forward(t, batch.features()))
        .collect::<Result<Vec<_>, _>>()?;

    let inv_rows = 1.0 / rows as f64;
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut dlogits = vec![0.0; rows * k];
    for r in 0..rows {
        let z = &cache.logits()[r * k..(r + 1) * k];
        let d = &mut dlogits[r * k..(r + 1) * k];
        let p = softmax_t(z, 1.0);
        let y = batch.labels()[r];
        ce -= p[y].max(f64::MIN_POSITIVE).ln();
        for (j, dj) in d.iter_mut().enumerate() {
            *dj = (p[j] - if j == y { 1.0 } else { 0.0 }) * inv_rows;
        }
        if teachers.is_empty() {
            continue;
        }
        let inv_teachers = 1.0 / teachers.len() as f64;
        let q = softmax_t(z, temperature);
        for tz in &teacher_logits {
            let pt = softmax_t(&tz[r * k..(r + 1) * k], temperature);
            kl += kl_unchecked(&pt, &q) * inv_teachers;
            // d KL(pt || softmax(z/T)) / dz = (q - pt) / T
            for j in 0..k {
                d[j] += (q[j] - pt[j]) / temperature * inv_teachers * inv_rows;
            }
        }
    }
    let loss = (ce + kl) * inv_rows;
    let grad = backward(student, &cache, dlogits);
    Ok(LossGrad { loss, grad })
}
