use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, distill_loss, forward, Dataset, ModelParams, NnError};
use crate::config::{DistillConfig, TrainConfig};

fn sgd_epochs(
    model: &ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    teachers: &[&ModelParams],
    temperature: f64,
) -> Result<ModelParams, NnError> {
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    cfg.validate()?;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.select(chunk);
            let lg = distill_loss(&model, teachers, &batch, temperature)?;
            for (w, g) in model.values_mut().iter_mut().zip(&lg.grad) {
                *w -= cfg.lr * (g + cfg.weight_decay * *w);
            }
        }
    }
    Ok(model)
}

/// Plain SGD with weight decay on cross-entropy. Returns a new model.
pub fn train_local(
    model: &ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<ModelParams, NnError> {
    sgd_epochs(model, dataset, cfg, cfg.local_epochs, &[], 1.0)
}

/// SGD on the distillation objective for `epochs` passes over `dataset`.
pub fn train_distill(
    student: &ModelParams,
    teachers: &[&ModelParams],
    dataset: &Dataset,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    epochs: usize,
) -> Result<ModelParams, NnError> {
    distill.validate()?;
    sgd_epochs(student, dataset, cfg, epochs, teachers, distill.temperature)
}

/// Elementwise unweighted mean, summed in input order.
pub fn average_params(models: &[&ModelParams]) -> Result<ModelParams, NnError> {
    let (first, rest) = models.split_first().ok_or(NnError::EmptyList)?;
    let mut acc = first.values().to_vec();
    for m in rest {
        first.ensure_same_shape(m)?;
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / models.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    ModelParams::from_values(first.shapes().to_vec(), acc)
}

/// Fraction of rows whose argmax logit equals the label.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<f64, NnError> {
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let k = model.output_dim();
    let logits = forward(model, dataset.features())?;
    let correct = logits
        .chunks_exact(k)
        .zip(dataset.labels())
        .filter(|(z, y)| argmax(z) == **y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
