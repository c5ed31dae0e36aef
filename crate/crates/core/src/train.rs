//! Leave-one-out fold planning and the supervised training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_batch, Classifier, GradTarget, Mode, ModelConfig, Optimizer, OptimizerKind,
    Prediction, Real, Tensor,
};
use crate::preprocess::CompositeVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 40,
            optimizer: OptimizerKind::Adam,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed (it makes training a no-op).
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold<Id> {
    pub train_ids: Vec<Id>,
    pub val_id: Id,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan<Id> {
    pub folds: Vec<Fold<Id>>,
}

/// One fold per id, in catalog order; fold `i` validates on `ids[i]` and
/// trains on the rest (order kept).
pub fn make_loocv_folds<Id: Clone>(ids: &[Id]) -> Result<FoldPlan<Id>> {
    match ids.len() {
        0 => Err(Error::Parameter("catalog is empty".into())),
        1 => Err(Error::EmptyTrainSet),
        _ => Ok(FoldPlan {
            folds: (0..ids.len())
                .map(|v| Fold {
                    train_ids: ids
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != v)
                        .map(|(_, id)| id.clone())
                        .collect(),
                    val_id: ids[v].clone(),
                })
                .collect(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch (as seen during the epoch).
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains `model` in place on `[C, D, H, W]` samples.
///
/// Each epoch visits the samples in a fresh seeded permutation, in batches
/// of `batch_size` (the last one may be smaller). Batch-norm running
/// statistics are updated after every batch.
pub fn fit<T: Real>(
    model: &mut Classifier<T>,
    samples: &[Tensor<T>],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if samples.len() != labels.len() {
        return Err(Error::Parameter(format!(
            "{} samples but {} labels",
            samples.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.network().params());
    let mut grads = model.network().params().zero_grads();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<&Tensor<T>> = batch.iter().map(|&i| &samples[i]).collect();
            let x = Tensor::stack(&items)?;
            let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();

            let net = model.network();
            let pass = net.forward(&x, Mode::Train, None)?;
            if !pass.logits.all_finite() {
                return Err(Error::Diverged { epoch });
            }
            let (loss, dlogits) = cross_entropy_batch(&pass.logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * batch.len() as f64;

            grads.clear();
            net.backward(&pass.tape, dlogits, GradTarget::Params, Some(&mut grads))?;
            if grads.tensors.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged { epoch });
            }
            let net = model.network_mut();
            optimizer.step(net.params_mut(), &grads);
            net.commit_running_stats(&pass.tape);
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    Ok(TrainReport { epoch_losses })
}

/// Outcome of one leave-one-out fold, without any file references.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub prediction: Prediction,
    pub train: TrainReport,
}

/// Builds a fresh model, trains it on `train`, and predicts `val` once.
/// `pretrained`, when given, is applied before training.
pub fn train_fold(
    train: &[(&CompositeVolume, u8)],
    val: &CompositeVolume,
    config: &TrainConfig,
    model_config: &ModelConfig,
    pretrained: Option<&dyn Fn(&mut Classifier<f32>) -> Result<()>>,
) -> Result<(Classifier<f32>, FoldOutcome)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let mut model = Classifier::<f32>::new(model_config.clone())?;
    if let Some(load) = pretrained {
        load(&mut model)?;
    }
    let mut samples = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for (c, label) in train {
        if *label > 1 {
            return Err(Error::Data(format!("label must be 0 or 1, got {}", label)));
        }
        let t = model.input_tensor(c)?;
        let shape = t.shape()[1..].to_vec();
        samples.push(t.reshape(&shape)?);
        labels.push(*label);
    }
    let report = fit(&mut model, &samples, &labels, config)?;
    let prediction = model.forward(val)?;
    Ok((
        model,
        FoldOutcome {
            prediction,
            train: report,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_ids() {
        let plan = make_loocv_folds(&["a", "b", "c"]).unwrap();
        let want = [(["b", "c"], "a"), (["a", "c"], "b"), (["a", "b"], "c")];
        assert_eq!(plan.folds.len(), 3);
        for (f, (t, v)) in plan.folds.iter().zip(want) {
            assert_eq!(f.train_ids, t);
            assert_eq!(f.val_id, v);
        }
    }

    #[test]
    fn degenerate_catalogs() {
        assert!(matches!(make_loocv_folds::<u8>(&[]), Err(Error::Parameter(_))));
        assert_eq!(make_loocv_folds(&[7u8]), Err(Error::EmptyTrainSet));
    }

    #[test]
    fn two_hundred_folds() {
        let ids: Vec<u32> = (0..200).collect();
        let plan = make_loocv_folds(&ids).unwrap();
        assert_eq!(plan.folds.len(), 200);
        assert!(plan.folds.iter().all(|f| f.train_ids.len() == 199));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
