//! Model construction, training with checkpoints, evaluation and probing
//! driven by a [`RunConfig`]. The command handlers are thin wrappers.

use serde::Serialize;

use super::checkpoint::{Checkpoint, OptimizerSnapshot};
use super::config::{ModelKind, RunConfig};
use crate::baselines::{
    cossim_train, rbivae_epoch, CosSimLvm, RbiHistoryRow, RbiTrainState, RbiVae,
};
use crate::datagen::{DatasetKind, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::numkit::{ParamStore, Rng, Tensor};
use crate::probe::{probe, LatentRetriever, ProbeReport};
use crate::retrieval::{evaluate, RetrievalReport, Retriever, ScoreMode};
use crate::rivae::{DiagGaussian, HistoryRow, RivaeModel, TrainState, Trainer};

const PRETRAIN_TAG: u64 = 7;
const TRAIN_TAG: u64 = 9;
const EVAL_TAG: u64 = 0xE7A1;
const PROBE_TAG: u64 = 0x9B0E;

/// Any of the trainable retrieval models.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Rivae(RivaeModel),
    Rbi(RbiVae),
    CosSim(CosSimLvm),
}

impl AnyModel {
    /// Fresh initialisation from `cfg.seed`.
    pub fn build(cfg: &RunConfig, x1_dim: usize, x2_dim: usize) -> Result<Self> {
        let spec = cfg.embed_spec(x1_dim, x2_dim);
        let rng = Rng::new(cfg.seed);
        Ok(match cfg.model {
            ModelKind::Rivae => AnyModel::Rivae(RivaeModel::new(cfg.rivae_config(), &spec, &rng)?),
            ModelKind::Rbivae | ModelKind::BivaeOnV => {
                AnyModel::Rbi(RbiVae::new(cfg.rbivae_config(), &spec, &rng)?)
            }
            ModelKind::CossimLvm => {
                AnyModel::CosSim(CosSimLvm::new(cfg.cossim_config(), &spec, &rng)?)
            }
        })
    }

    /// Rebuilds the architecture from the checkpoint's config and loads its
    /// parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint, x1_dim: usize, x2_dim: usize) -> Result<Self> {
        let mut m = Self::build(&ckpt.config, x1_dim, x2_dim)?;
        m.params_mut().load_from(&ckpt.params)?;
        Ok(m)
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Rivae(m) => &m.params,
            AnyModel::Rbi(m) => &m.params,
            AnyModel::CosSim(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Rivae(m) => &mut m.params,
            AnyModel::Rbi(m) => &mut m.params,
            AnyModel::CosSim(m) => &mut m.params,
        }
    }

    fn inner(&self) -> &dyn LatentRetriever {
        match self {
            AnyModel::Rivae(m) => m,
            AnyModel::Rbi(m) => m,
            AnyModel::CosSim(m) => m,
        }
    }
}

impl Retriever for AnyModel {
    fn params_version(&self) -> u64 {
        self.inner().params_version()
    }

    fn embed_targets(&self, x2: &Tensor) -> Result<Tensor> {
        self.inner().embed_targets(x2)
    }

    fn score(
        &self,
        x1: &Tensor,
        targets: &Tensor,
        mode: ScoreMode,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        self.inner().score(x1, targets, mode, rng)
    }
}

impl LatentRetriever for AnyModel {
    fn z_dim(&self) -> usize {
        self.inner().z_dim()
    }

    fn query_latent(&self, x1: &Tensor) -> Result<DiagGaussian> {
        self.inner().query_latent(x1)
    }

    fn score_latents(&self, z: &Tensor, targets: &Tensor) -> Result<Tensor> {
        self.inner().score_latents(z, targets)
    }
}

/// Why a checkpoint is being written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointEvent {
    /// the learning rate is about to decay at this epoch
    Decay(usize),
    Final,
    /// state rolled back to the last finite epoch before a divergence
    LastGood,
}

/// A finished run: the model, its final checkpoint and the loss CSV.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: AnyModel,
    pub checkpoint: Checkpoint,
    pub loss_csv: String,
}

fn check_data(cfg: &RunConfig, data: &PairedDataset) -> Result<()> {
    if data.kind != cfg.dataset {
        return Err(Error::contract(format!(
            "config is for `{}` but the dataset file holds `{}`",
            cfg.dataset, data.kind
        )));
    }
    Ok(())
}

fn snapshots(
    store: &ParamStore,
    opts: &[(&str, &crate::numkit::AdamState)],
) -> Vec<OptimizerSnapshot> {
    opts.iter()
        .map(|(n, o)| OptimizerSnapshot::capture(n, o, store))
        .collect()
}

fn rivae_checkpoint(cfg: &RunConfig, model: &RivaeModel, state: &TrainState) -> Checkpoint {
    Checkpoint {
        model: cfg.model,
        epoch: state.epoch,
        config: cfg.clone(),
        params: model.params.export(),
        optimizers: snapshots(
            &model.params,
            &[("model", &state.model_opt), ("embed", &state.embed_opt)],
        ),
        rng: Some(state.rng.state()),
        history: serde_json::to_string(&state.history).expect("history serialises"),
    }
}

fn rbi_checkpoint(cfg: &RunConfig, model: &RbiVae, state: &RbiTrainState) -> Checkpoint {
    Checkpoint {
        model: cfg.model,
        epoch: state.epoch,
        config: cfg.clone(),
        params: model.params.export(),
        optimizers: snapshots(
            &model.params,
            &[
                ("model", &state.model_opt),
                ("embed", &state.embed_opt),
                ("disc", &state.disc_opt),
            ],
        ),
        rng: Some(state.rng.state()),
        history: serde_json::to_string(&state.history).expect("history serialises"),
    }
}

fn restore_history<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint) -> Result<Vec<T>> {
    serde_json::from_str(&ckpt.history).map_err(|e| Error::Format {
        offset: 0,
        detail: format!("checkpoint history: {e}"),
    })
}

fn restore_rng(ckpt: &Checkpoint) -> Result<Rng> {
    ckpt.rng
        .map(Rng::from_state)
        .ok_or_else(|| Error::contract("checkpoint has no RNG state to resume from"))
}

/// Cos-Sim-LVM on the training split; also the embedder warm start.
pub fn pretrain_cossim(
    cfg: &RunConfig,
    data: &PairedDataset,
    bottleneck: bool,
) -> Result<(CosSimLvm, Vec<f64>)> {
    let spec = cfg.embed_spec(data.x1_dim(), data.x2_dim());
    let mut cs = CosSimLvm::new(cfg.cossim_config(), &spec, &Rng::new(cfg.seed))?;
    let mut sched = cfg.cossim_schedule();
    if !bottleneck {
        sched.bottleneck_epochs = 0;
    }
    let mut rng = Rng::new(cfg.seed).derive(PRETRAIN_TAG);
    let losses = cossim_train(&mut cs, &data.train.x1, &data.train.x2, &sched, &mut rng)?;
    Ok((cs, losses))
}

fn warm_start(cfg: &RunConfig, data: &PairedDataset, store: &mut ParamStore) -> Result<()> {
    if cfg.pretrain.enabled && cfg.pretrain.embed_epochs > 0 {
        let (cs, _) = pretrain_cossim(cfg, data, false)?;
        store.copy_prefix_from(&cs.params, "e1.")?;
        store.copy_prefix_from(&cs.params, "e2.")?;
    }
    Ok(())
}

/// Trains `cfg.model` on `data.train`, or continues from `resume`.
/// `on_checkpoint` sees a checkpoint whenever the learning rate is about to
/// decay, at the end, and the rolled-back state if training diverges (the
/// divergence error is returned afterwards).
pub fn train(
    cfg: &RunConfig,
    data: &PairedDataset,
    resume: Option<&Checkpoint>,
    mut on_checkpoint: impl FnMut(CheckpointEvent, &Checkpoint) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    check_data(cfg, data)?;
    if let Some(c) = resume {
        if c.model != cfg.model
            || c.config.dataset != cfg.dataset
            || c.config.model_net != cfg.model_net
        {
            return Err(Error::contract(
                "checkpoint does not match the configured dataset/model",
            ));
        }
    }
    let (x1, x2) = (&data.train.x1, &data.train.x2);
    let decay = cfg.schedule.decay_epochs.clone();
    let mut model = AnyModel::build(cfg, data.x1_dim(), data.x2_dim())?;
    match resume {
        Some(c) => model.params_mut().load_from(&c.params)?,
        None => {
            if cfg.model != ModelKind::CossimLvm {
                warm_start(cfg, data, model.params_mut())?;
            }
        }
    }
    match model {
        AnyModel::Rivae(m) => {
            let rng = Rng::new(cfg.seed).derive(TRAIN_TAG);
            let mut state = TrainState::fresh(&m, &cfg.schedule, rng);
            if let Some(c) = resume {
                c.optimizer("model")?
                    .restore(&mut state.model_opt, &m.params)?;
                c.optimizer("embed")?
                    .restore(&mut state.embed_opt, &m.params)?;
                state.rng = restore_rng(c)?;
                state.epoch = c.epoch;
                state.history = restore_history(c)?;
            }
            let mut t = Trainer::resume(m, state, x1, x2, cfg.schedule.clone(), cfg.loss)?;
            let run = t.run(|tr, _| {
                if decay.contains(&tr.state.epoch) && !tr.finished() {
                    on_checkpoint(
                        CheckpointEvent::Decay(tr.state.epoch),
                        &rivae_checkpoint(cfg, &tr.model, &tr.state),
                    )?;
                }
                Ok(())
            });
            if let Err(e) = run {
                if matches!(e, Error::Divergence { .. }) {
                    on_checkpoint(
                        CheckpointEvent::LastGood,
                        &rivae_checkpoint(cfg, &t.model, &t.state),
                    )?;
                }
                return Err(e);
            }
            let ckpt = rivae_checkpoint(cfg, &t.model, &t.state);
            on_checkpoint(CheckpointEvent::Final, &ckpt)?;
            Ok(Trained {
                loss_csv: HistoryRow::to_csv(&t.state.history),
                model: AnyModel::Rivae(t.model),
                checkpoint: ckpt,
            })
        }
        AnyModel::Rbi(mut m) => {
            let weights = m.config.effective_weights(&cfg.loss);
            let mut schedule = cfg.schedule.clone();
            if m.config.frozen_embedders {
                schedule.joint_start = usize::MAX;
            }
            schedule.validate()?;
            weights.validate()?;
            if x1.rows() < schedule.batch_size {
                return Err(Error::contract("training pairs cannot fill a batch"));
            }
            let mut state =
                RbiTrainState::fresh(&m, &schedule, Rng::new(cfg.seed).derive(TRAIN_TAG));
            if let Some(c) = resume {
                c.optimizer("model")?
                    .restore(&mut state.model_opt, &m.params)?;
                c.optimizer("embed")?
                    .restore(&mut state.embed_opt, &m.params)?;
                c.optimizer("disc")?
                    .restore(&mut state.disc_opt, &m.params)?;
                state.rng = restore_rng(c)?;
                state.epoch = c.epoch;
                state.history = restore_history(c)?;
            }
            while state.epoch < schedule.epochs {
                if let Err(e) = rbivae_epoch(&mut m, &mut state, x1, x2, &schedule, &weights) {
                    if matches!(e, Error::Divergence { .. }) {
                        on_checkpoint(CheckpointEvent::LastGood, &rbi_checkpoint(cfg, &m, &state))?;
                    }
                    return Err(e);
                }
                if decay.contains(&state.epoch) && state.epoch < schedule.epochs {
                    on_checkpoint(
                        CheckpointEvent::Decay(state.epoch),
                        &rbi_checkpoint(cfg, &m, &state),
                    )?;
                }
            }
            let ckpt = rbi_checkpoint(cfg, &m, &state);
            on_checkpoint(CheckpointEvent::Final, &ckpt)?;
            Ok(Trained {
                loss_csv: rbi_csv(&state.history),
                model: AnyModel::Rbi(m),
                checkpoint: ckpt,
            })
        }
        AnyModel::CosSim(_) => {
            // short and stateless between phases: a resumed run is complete
            let (cs, losses) = match resume {
                Some(c) => {
                    let mut m = model_from(cfg, data)?;
                    m.params_mut().load_from(&c.params)?;
                    let AnyModel::CosSim(cs) = m else {
                        unreachable!()
                    };
                    (cs, restore_history(c)?)
                }
                None => pretrain_cossim(cfg, data, true)?,
            };
            let ckpt = Checkpoint {
                model: cfg.model,
                epoch: losses.len(),
                config: cfg.clone(),
                params: cs.params.export(),
                optimizers: Vec::new(),
                rng: None,
                history: serde_json::to_string(&losses).expect("history serialises"),
            };
            on_checkpoint(CheckpointEvent::Final, &ckpt)?;
            let embed = cfg.pretrain.embed_epochs;
            let mut csv = String::from("epoch,phase,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let phase = if i < embed { "embed" } else { "bottleneck" };
                csv.push_str(&format!("{i},{phase},{l:e}\n"));
            }
            Ok(Trained {
                model: AnyModel::CosSim(cs),
                checkpoint: ckpt,
                loss_csv: csv,
            })
        }
    }
}

fn model_from(cfg: &RunConfig, data: &PairedDataset) -> Result<AnyModel> {
    AnyModel::build(cfg, data.x1_dim(), data.x2_dim())
}

fn rbi_csv(rows: &[RbiHistoryRow]) -> String {
    let mut s = String::from("epoch,neg_elbo,tc,L_Retr,L_Reg,total,disc\n");
    for r in rows {
        let t = r.terms;
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.epoch, t.neg_elbo, t.tc, t.retr, t.reg, t.total, t.disc
        ));
    }
    s
}

/// Loads a checkpoint's model and checks it against `cfg` and `data`.
pub fn restore_model(cfg: &RunConfig, data: &PairedDataset, ckpt: &Checkpoint) -> Result<AnyModel> {
    check_data(cfg, data)?;
    if ckpt.config.dataset != cfg.dataset {
        return Err(Error::contract(format!(
            "checkpoint was trained on `{}`, config names `{}`",
            ckpt.config.dataset, cfg.dataset
        )));
    }
    AnyModel::from_checkpoint(ckpt, data.x1_dim(), data.x2_dim())
}

/// Retrieval evaluation on the test split with `cfg.eval` settings.
pub fn evaluate_model<M: Retriever + ?Sized>(
    cfg: &RunConfig,
    model: &M,
    data: &PairedDataset,
) -> Result<RetrievalReport> {
    let rng = Rng::new(cfg.seed).derive(EVAL_TAG);
    evaluate(
        model,
        &data.test,
        cfg.eval.db_size,
        cfg.eval.trials,
        cfg.eval.mode,
        &rng,
    )
}

/// Test split restricted to the configured factor columns.
pub fn probe_split(cfg: &RunConfig, data: &PairedDataset) -> Result<Split> {
    let f = data
        .test
        .factors
        .as_ref()
        .ok_or_else(|| Error::Unsupported {
            dataset: data.kind.to_string(),
            detail: "probing needs factor or digit labels".into(),
        })?;
    let cols = &cfg.probe.factor_columns;
    if cols.iter().any(|&c| c >= f.row_len()) {
        return Err(Error::Config(format!(
            "probe.factor_columns {cols:?} exceed {} factors",
            f.row_len()
        )));
    }
    let factors = if cols.is_empty() {
        f.clone()
    } else {
        let data = (0..f.rows())
            .flat_map(|i| cols.iter().map(move |&c| f.row(i)[c]))
            .collect();
        Tensor::new(vec![f.rows(), cols.len()], data)?
    };
    Split::new(data.test.x1.clone(), data.test.x2.clone(), Some(factors))
}

pub fn probe_model<M: LatentRetriever + ?Sized>(
    cfg: &RunConfig,
    model: &M,
    data: &PairedDataset,
) -> Result<ProbeReport> {
    let split = probe_split(cfg, data)?;
    let db = cfg.probe.db_size.min(split.len());
    let rng = Rng::new(cfg.seed).derive(PROBE_TAG);
    let mut report = probe(
        model,
        &split,
        &cfg.traversal_spec(),
        db,
        cfg.probe.alpha,
        &rng,
    )?;
    if data.kind != DatasetKind::SplitMnist {
        // digit transitions only mean something for digit labels
        (report.transitions, report.overlap, report.coverage) = (None, None, None);
    }
    Ok(report)
}

/// A report wrapped with the effective configuration that produced it.
#[derive(Serialize)]
pub struct Echoed<'a, T: Serialize> {
    pub config: &'a RunConfig,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn echo_json<T: Serialize>(cfg: &RunConfig, body: &T) -> String {
    let mut s =
        serde_json::to_string_pretty(&Echoed { config: cfg, body }).expect("report serialises");
    s.push('\n');
    s
}
