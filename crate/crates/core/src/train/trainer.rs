use std::path::Path;

use log::{info, warn};

use super::{
    binary_cross_entropy_loss, cross_entropy_loss, AdamState, EarlyStopping, LossKind,
    PlateauScheduler, StopSignal, TrainConfig,
};
use crate::data::{Dataset, Split, Triple};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Metrics};
use crate::layers::Mode;
use crate::model::{Model, ModelConfig};
use crate::numkernel::{Rng, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub valid: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Snapshot with the highest validation MRR (the final model if no
    /// evaluation ran).
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_valid_mrr: Option<f64>,
    pub last: Model<T>,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub evaluations: usize,
}

/// Builds a fresh model from `model_config` and trains it.
pub fn train_loop<T: Scalar>(
    dataset: &Dataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let model = Model::new(model_config.clone(), dataset.n_entities(), dataset.n_relations())?;
    train_model(model, dataset, cfg)
}

/// One optimizer step on a batch; returns the batch loss.
pub(crate) fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    dataset: &Dataset,
    batch: &[Triple],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let heads: Vec<usize> = batch.iter().map(|t| t.head).collect();
    let rels: Vec<usize> = batch.iter().map(|t| t.relation).collect();
    model.zero_grad();
    let scores = model.score_all(&heads, &rels, Mode::Train)?;
    let (loss, d_scores) = match cfg.loss {
        LossKind::SoftmaxCe => {
            let gold: Vec<usize> = batch.iter().map(|t| t.tail).collect();
            cross_entropy_loss(&scores, &gold, cfg.label_smoothing)?
        }
        LossKind::Bce => {
            let targets: Vec<&[usize]> = batch
                .iter()
                .map(|t| dataset.train_filter.get(t.head, t.relation))
                .collect();
            binary_cross_entropy_loss(&scores, &targets, cfg.label_smoothing)?
        }
    };
    model.backward(&d_scores)?;
    adam.step_model(model, lr, cfg.l2)?;
    Ok(loss)
}

/// Trains `model` on the augmented training triples, evaluating on the
/// validation split every `eval_every` epochs.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.n_entities() != dataset.n_entities() || model.n_relations() != dataset.n_relations() {
        return Err(Error::Config("model vocabulary does not match the dataset".into()));
    }
    if dataset.train_augmented.len() < 2 {
        return Err(Error::Config("training needs at least one triple".into()));
    }
    model.set_mode(Mode::Train);
    let eval_opts = EvalOptions {
        ties: cfg.ties,
        ..EvalOptions::from_env()
    };
    let mut rng = Rng::new(cfg.seed).split(7);
    let mut adam = AdamState::new();
    let mut plateau = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut triples = dataset.train_augmented.clone();
    let mut log = Vec::new();
    let mut best: Option<(Model<T>, usize)> = None;
    let mut evaluations = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr();
        rng.shuffle(&mut triples);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (b, batch) in triples.chunks(cfg.batch_size).enumerate() {
            // batch norm cannot normalise a single row
            if batch.len() < 2 {
                continue;
            }
            let loss = train_step(&mut model, &mut adam, dataset, batch, cfg, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss,
                    lr,
                });
            }
            sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = sum / seen as f64;
        plateau.step(train_loss);

        let mut record = EpochRecord {
            epoch,
            train_loss,
            lr,
            valid: None,
        };
        let mut stop = false;
        if epoch % cfg.eval_every == 0 {
            let m = evaluate(&model, dataset, Split::Valid, &eval_opts)?.overall;
            evaluations += 1;
            match stopper.observe(m.mrr) {
                StopSignal::Improved => best = Some((model.clone(), epoch)),
                StopSignal::Continue => {}
                StopSignal::Stop => stop = true,
            }
            record.valid = Some(m);
        }
        info!(
            "epoch {epoch} loss {train_loss:.6} lr {lr:.6}{}",
            record
                .valid
                .map(|m| format!(" valid mrr {:.4}", m.mrr))
                .unwrap_or_default()
        );
        log.push(record);
        if stop {
            stopped_early = true;
            break;
        }
    }
    if plateau.decays() > 0 {
        info!("learning rate decayed {} times to {}", plateau.decays(), plateau.lr());
    }
    model.clear_cache();
    let (best, best_epoch) = match best {
        Some(b) => b,
        None => {
            warn!("no validation round ran; the final model stands in for the best one");
            (model.clone(), log.len())
        }
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid_mrr: stopper.best(),
        last: model,
        log,
        stopped_early,
        evaluations,
    })
}

/// Writes the per-epoch log as CSV; validation columns are empty on epochs
/// without an evaluation.
pub fn write_log(log: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "train_loss",
        "lr",
        "valid_mrr",
        "valid_mr",
        "valid_hits1",
        "valid_hits10",
    ])?;
    for r in log {
        let v = |f: fn(&Metrics) -> f64| r.valid.as_ref().map(|m| format!("{}", f(m))).unwrap_or_default();
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.train_loss),
            format!("{}", r.lr),
            v(|m| m.mrr),
            v(|m| m.mr),
            v(|m| m.hits1),
            v(|m| m.hits10),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DropoutSpec;

    fn toy() -> Dataset {
        let train: Vec<(String, String, String)> = (0..12)
            .map(|i| (format!("e{i}"), format!("r{}", i % 2), format!("e{}", (i + 1) % 12)))
            .collect();
        let valid = vec![train[0].clone(), train[5].clone()];
        let test = vec![train[3].clone()];
        Dataset::from_named(&train, &valid, &test).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            n_deepe_blocks: 1,
            n_resnet_blocks: 1,
            resnet_inner_layers: 1,
            dropout: DropoutSpec::NONE,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn first_epoch_loss_is_reproducible() {
        let ds = toy();
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train_loop::<f64>(&ds, &small_config(), &cfg).unwrap();
        let b = train_loop::<f64>(&ds, &small_config(), &cfg).unwrap();
        assert_eq!(a.log[0].train_loss.to_bits(), b.log[0].train_loss.to_bits());
    }

    #[test]
    fn frozen_model_stops_after_patience() {
        let ds = toy();
        let model_cfg = ModelConfig {
            bn_momentum: 0.0,
            ..small_config()
        };
        let cfg = TrainConfig {
            lr: 0.0,
            early_stop_patience: 4,
            max_epochs: 100,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train_loop::<f64>(&ds, &model_cfg, &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.evaluations, 1 + 4);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn single_triple_step_lowers_its_loss() {
        let ds = toy();
        let mut model = Model::<f64>::new(small_config(), ds.n_entities(), ds.n_relations()).unwrap();
        let batch = [ds.train[0], ds.train[0]];
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new();
        let before = train_step(&mut model, &mut adam, &ds, &batch, &cfg, 1e-4).unwrap();
        let after = train_step(&mut model, &mut adam, &ds, &batch, &cfg, 0.0).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn log_csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = [EpochRecord {
            epoch: 1,
            train_loss: 2.5,
            lr: 0.003,
            valid: None,
        }];
        write_log(&log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,train_loss,lr,valid_mrr,valid_mr,valid_hits1,valid_hits10"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "1,2.5,0.003,,,,");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let ds = toy();
        let cfg = TrainConfig {
            plateau_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(train_loop::<f64>(&ds, &small_config(), &cfg).is_err());
    }
}
