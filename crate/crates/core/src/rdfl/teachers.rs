use crate::config::DistillConfig;
use crate::hashring::NodeId;
use crate::tinynn::{forward, softmax_t, Dataset, ModelParams, NnError};

use crate::tinynn::kl_unchecked as loss_kl;

/// A candidate's divergence from the local model.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherScore {
    pub origin: NodeId,
    pub score: f64,
}

/// Mean over the probe rows of `KL(softmax(candidate/T) || softmax(local/T))`.
pub fn teacher_score(
    local: &ModelParams,
    candidate: &ModelParams,
    probe: &Dataset,
    temperature: f64,
) -> Result<f64, NnError> {
    if probe.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    local.ensure_same_shape(candidate)?;
    let k = local.output_dim();
    let zl = forward(local, probe.features())?;
    let zc = forward(candidate, probe.features())?;
    let total: f64 = zl
        .chunks_exact(k)
        .zip(zc.chunks_exact(k))
        .map(|(l, c)| loss_kl(&softmax_t(c, temperature), &softmax_t(l, temperature)))
        .sum();
    Ok(total / probe.len() as f64)
}

/// Keeps the `ceil(frac(round) * candidates)` lowest-divergence candidates,
/// ties broken by origin id. Returns the kept scores in ascending order.
pub fn select_teachers(
    local: &ModelParams,
    candidates: &[(NodeId, ModelParams)],
    round: usize,
    cfg: &DistillConfig,
    probe: &Dataset,
) -> Result<Vec<TeacherScore>, NnError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored = candidates
        .iter()
        .map(|(origin, m)| {
            Ok(TeacherScore {
                origin: origin.clone(),
                score: teacher_score(local, m, probe, cfg.temperature)?,
            })
        })
        .collect::<Result<Vec<_>, NnError>>()?;
    scored.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.origin.cmp(&b.origin))
    });
    scored.truncate(cfg.teacher_count(round, candidates.len()));
    Ok(scored)
}
