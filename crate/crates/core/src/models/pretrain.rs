//! Independent pretraining of the base models on pooled training samples.

use super::{Adam, AdamConfig, Ftrl, FtrlConfig, Model, ModelKind, ParamBank};
use crate::data::Sample;
use crate::numkit::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ftrl: FtrlConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            batch_size: 1000,
            adam: AdamConfig::default(),
            ftrl: FtrlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLog {
    pub model: ModelKind,
    pub epoch: usize,
    pub mean_loss: f64,
}

enum Opt {
    Ftrl(Ftrl),
    Adam(Adam),
}

/// Train each model on `samples` for `config.epochs` shuffled passes. LR uses
/// FTRL, the factorization models Adam; DeepFM trains with dropout. Each
/// model draws from its own fork of `rng`, so results do not depend on how
/// many other models are trained alongside it.
pub fn pretrain(
    models: &[Model],
    banks: &mut [ParamBank],
    samples: &[&Sample],
    config: &PretrainConfig,
    rng: &Rng,
) -> Result<Vec<PretrainLog>> {
    if models.len() != banks.len() {
        return Err(Error::LengthMismatch {
            expected: models.len(),
            found: banks.len(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut logs = Vec::new();
    if config.epochs == 0 {
        return Ok(logs);
    }
    if samples.is_empty() {
        return Err(Error::Empty("pretraining samples"));
    }
    for (k, (model, bank)) in models.iter().zip(banks.iter_mut()).enumerate() {
        if bank.len() != model.param_len() {
            return Err(Error::LengthMismatch {
                expected: model.param_len(),
                found: bank.len(),
            });
        }
        let mut rng = rng.fork(k as u64);
        let mut opt = match model.kind() {
            ModelKind::Lr => Opt::Ftrl(Ftrl::new(config.ftrl, model.param_len())),
            _ => Opt::Adam(Adam::new(config.adam, model.param_len())),
        };
        let deep = model.kind() == ModelKind::DeepFm;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut batch: Vec<&Sample> = Vec::with_capacity(config.batch_size);
        for epoch in 0..config.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(config.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| samples[i]));
                let (loss, grad) = {
                    let dropout = if deep { Some(&mut rng) } else { None };
                    model.grad_batch_refs(bank.values(), &batch, None, dropout)?
                };
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged(format!("{} pretraining, epoch {epoch}", model.kind())));
                }
                total += loss * chunk.len() as f64;
                match &mut opt {
                    Opt::Ftrl(o) => o.step(bank.values_mut(), &grad)?,
                    Opt::Adam(o) => o.step(bank.values_mut(), &grad)?,
                }
            }
            if bank.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "{} parameters after epoch {epoch}",
                    model.kind()
                )));
            }
            let mean_loss = total / samples.len() as f64;
            log::debug!("pretrain {} epoch {epoch}: loss {mean_loss:.5}", model.kind());
            logs.push(PretrainLog {
                model: model.kind(),
                epoch,
                mean_loss,
            });
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_users, SyntheticSpec};
    use crate::models::ModelSpec;

    #[test]
    fn zero_epochs_leaves_banks_unchanged() {
        let data = generate_synthetic(&SyntheticSpec {
            num_users: 10,
            ..Default::default()
        })
        .unwrap();
        let m = Model::new(
            ModelSpec::new(ModelKind::Fm, data.dataset.space.num_fields()),
            &data.dataset.space,
        )
        .unwrap();
        let mut banks = vec![m.init_params(&mut Rng::new(1))];
        let before = banks.clone();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let logs = pretrain(std::slice::from_ref(&m), &mut banks, &[], &cfg, &Rng::new(2)).unwrap();
        assert!(logs.is_empty());
        assert_eq!(banks, before);
    }

    #[test]
    fn training_reduces_loss() {
        let data = generate_synthetic(&SyntheticSpec {
            num_users: 60,
            noise: 0.3,
            ..Default::default()
        })
        .unwrap();
        let (users, _) = split_users(&data.dataset, 0.8, 0.75);
        let train: Vec<&Sample> = users.iter().flat_map(|u| u.train()).collect();
        let space = &data.dataset.space;
        let nf = space.num_fields();
        let models: Vec<Model> = [ModelKind::Lr, ModelKind::Fm]
            .iter()
            .map(|&k| Model::new(ModelSpec::new(k, nf).with_latent_dim(4), space).unwrap())
            .collect();
        let mut rng = Rng::new(3);
        let mut banks: Vec<ParamBank> = models.iter().map(|m| m.init_params(&mut rng)).collect();
        let cfg = PretrainConfig {
            epochs: 8,
            batch_size: 100,
            adam: AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        let logs = pretrain(&models, &mut banks, &train, &cfg, &Rng::new(4)).unwrap();
        for kind in [ModelKind::Lr, ModelKind::Fm] {
            let l: Vec<f64> = logs.iter().filter(|l| l.model == kind).map(|l| l.mean_loss).collect();
            assert!(l.last().unwrap() < &(l[0] - 0.02), "{kind}: {l:?}");
        }
    }
}
