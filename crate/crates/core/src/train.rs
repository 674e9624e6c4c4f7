//! Optimizer settings and loss shared by the learned operators.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            lr_decay: 0.96,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.adam.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return invalid("learning rate must be positive and decay in (0, 1]");
        }
        Ok(())
    }
}

/// One row of a loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

/// `||pred - target|| / ||target||` recorded on the tape.
pub fn relative_loss<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    target: &[f64],
    norm: f64,
) -> Result<Var<'t>> {
    let t = tape.constant(Tensor::matrix(target.len(), 1, target.to_vec())?);
    let r = pred.sub(t)?;
    Ok(r.mul(r)?.sum().sqrt().scale(1.0 / norm))
}

/// Adam over shuffled mini-batches of `n_samples` items. `sample_loss` records
/// the loss of one item; the batch loss is their mean. `test_loss` runs after
/// every epoch on the updated parameters.
pub fn fit<L, T>(
    params: &mut ParamStore,
    n_samples: usize,
    cfg: &TrainConfig,
    sample_loss: L,
    test_loss: T,
) -> Result<Vec<EpochRecord>>
where
    L: for<'t> Fn(&'t Tape, &ParamVars<'t>, usize) -> Result<Var<'t>>,
    T: Fn(&ParamStore) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if n_samples == 0 {
        return invalid("training set is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(params);
    let mut adam = cfg.adam;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_samples).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let pv = tape.params(params);
            let mut total: Option<Var<'_>> = None;
            for &i in batch {
                let l = sample_loss(&tape, &pv, i)?;
                total = Some(match total {
                    Some(t) => t.add(l)?,
                    None => l,
                });
            }
            let loss = total
                .expect("non-empty batch")
                .scale(1.0 / batch.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::TrainingFailure { epoch, loss: value });
            }
            epoch_loss += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam_step(params, &grads, &mut state, &adam)?;
        }
        if !params.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                loss: f64::NAN,
            });
        }
        adam.lr *= cfg.lr_decay;
        let test = test_loss(params)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n_samples as f64,
            test_loss: test,
        });
    }
    Ok(history)
}
