//! Two-stage minibatch Adam training.

use serde::{Deserialize, Serialize};

use super::{JointInput, LossTerms, LossWeights, RivaeModel, EMBED_GROUP, MODEL_GROUP};
use crate::error::{Error, Result};
use crate::numkit::{AdamConfig, AdamState, Graph, ParamStore, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// embedders fixed, model nets only
    Frozen,
    /// everything trains
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub batch_size: usize,
    pub epochs: usize,
    pub joint_start: usize,
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "batch_size must be ≥ 2 and epochs ≥ 1, got {} / {}",
                self.batch_size, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config(
                "learning rate and decay factor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.decay_factor.powi(n as i32)
    }

    pub fn stage_at(&self, epoch: usize) -> Stage {
        if epoch >= self.joint_start {
            Stage::Joint
        } else {
            Stage::Frozen
        }
    }
}

/// Epoch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: Stage,
    pub lb: f64,
    pub retr: f64,
    pub reg: f64,
    pub total: f64,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str = "epoch,L_LB,L_Retr,L_Reg,total";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e}",
            self.epoch, self.lb, self.retr, self.reg, self.total
        )
    }

    pub fn to_csv(rows: &[HistoryRow]) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

/// Everything beyond parameters needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// number of completed epochs
    pub epoch: usize,
    pub model_opt: AdamState,
    pub embed_opt: AdamState,
    pub rng: Rng,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn fresh(model: &RivaeModel, schedule: &Schedule, rng: Rng) -> Self {
        let adam = |prefixes: &[&str]| {
            let ids = prefixes
                .iter()
                .flat_map(|p| model.params.ids_with_prefix(p))
                .collect();
            AdamState::new(
                AdamConfig::with_lr(schedule.learning_rate),
                ids,
                &model.params,
            )
        };
        Self {
            epoch: 0,
            model_opt: adam(&MODEL_GROUP),
            embed_opt: adam(&EMBED_GROUP),
            rng,
            history: Vec::new(),
        }
    }
}

/// Sets trainable flags so that every trainable parameter receives a gradient.
pub(crate) fn route_gradients(store: &mut ParamStore, stage: Stage, weights: &LossWeights) {
    let joint = stage == Stage::Joint;
    store.set_trainable("e1.", joint && weights.lambda_retr > 0.0);
    store.set_trainable(
        "e2.",
        joint && (weights.lambda_retr > 0.0 || weights.lambda_reg > 0.0),
    );
    store.set_trainable("reg.", joint && weights.lambda_reg > 0.0);
}

pub struct Trainer<'d> {
    pub model: RivaeModel,
    pub state: TrainState,
    pub schedule: Schedule,
    pub weights: LossWeights,
    x1: &'d Tensor,
    x2: &'d Tensor,
    cache: Option<(Tensor, Tensor)>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: RivaeModel,
        x1: &'d Tensor,
        x2: &'d Tensor,
        schedule: Schedule,
        weights: LossWeights,
        rng: Rng,
    ) -> Result<Self> {
        let state = TrainState::fresh(&model, &schedule, rng);
        Self::resume(model, state, x1, x2, schedule, weights)
    }

    pub fn resume(
        model: RivaeModel,
        state: TrainState,
        x1: &'d Tensor,
        x2: &'d Tensor,
        schedule: Schedule,
        weights: LossWeights,
    ) -> Result<Self> {
        schedule.validate()?;
        weights.validate()?;
        if x1.rows() != x2.rows() {
            return Err(Error::dim("train", x1.shape(), x2.shape()));
        }
        if x1.rows() < schedule.batch_size {
            return Err(Error::contract(format!(
                "{} training pairs cannot fill a batch of {}",
                x1.rows(),
                schedule.batch_size
            )));
        }
        Ok(Self {
            model,
            state,
            schedule,
            weights,
            x1,
            x2,
            cache: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.schedule.epochs
    }

    /// Runs one epoch. On divergence the parameters and optimiser state are
    /// rolled back to the start of the epoch before the error is returned.
    pub fn step_epoch(&mut self) -> Result<HistoryRow> {
        let snapshot = (self.model.params.clone(), self.state.clone());
        match self.epoch_inner() {
            Ok(row) => Ok(row),
            Err(e) => {
                let epoch = self.state.epoch;
                (self.model.params, self.state) = snapshot;
                Err(match e {
                    Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
                    other => other,
                })
            }
        }
    }

    fn epoch_inner(&mut self) -> Result<HistoryRow> {
        let epoch = self.state.epoch;
        let stage = self.schedule.stage_at(epoch);
        let lr = self.schedule.lr_at(epoch);
        self.state.model_opt.set_learning_rate(lr);
        self.state.embed_opt.set_learning_rate(lr);
        route_gradients(&mut self.model.params, stage, &self.weights);
        if stage == Stage::Frozen && self.cache.is_none() {
            let v1 = self
                .model
                .e1
                .embed_values(&self.model.params, self.x1, 512)?;
            let v2 = self
                .model
                .e2
                .embed_values(&self.model.params, self.x2, 512)?;
            self.cache = Some((v1, v2));
        } else if stage == Stage::Joint {
            self.cache = None;
        }

        let n = self.x1.rows();
        let bs = self.schedule.batch_size;
        let order = self.state.rng.permutation(n);
        let mut sum = LossTerms::default();
        let batches = n / bs;
        for b in 0..batches {
            let idx = &order[b * bs..(b + 1) * bs];
            let g = Graph::new();
            let (a, c);
            let input = match &self.cache {
                Some((v1, v2)) => {
                    (a, c) = (v1.gather_rows(idx), v2.gather_rows(idx));
                    JointInput::Embedded { v1: &a, v2: &c }
                }
                None => {
                    (a, c) = (self.x1.gather_rows(idx), self.x2.gather_rows(idx));
                    JointInput::Raw { x1: &a, x2: &c }
                }
            };
            let (loss, terms) =
                self.model
                    .joint_loss(&g, input, &self.weights, &mut self.state.rng)?;
            g.backward_into(loss, &mut self.model.params)?;
            drop(g);
            self.state.model_opt.step(&mut self.model.params)?;
            if stage == Stage::Joint {
                self.state.embed_opt.step(&mut self.model.params)?;
            }
            sum.lb += terms.lb;
            sum.retr += terms.retr;
            sum.reg += terms.reg;
            sum.total += terms.total;
        }
        let k = batches as f64;
        let row = HistoryRow {
            epoch,
            stage,
            lb: sum.lb / k,
            retr: sum.retr / k,
            reg: sum.reg / k,
            total: sum.total / k,
        };
        self.state.history.push(row);
        self.state.epoch += 1;
        Ok(row)
    }

    /// Trains until the schedule is exhausted, calling `hook` after each epoch.
    pub fn run(&mut self, mut hook: impl FnMut(&Self, &HistoryRow) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let row = self.step_epoch()?;
            hook(self, &row)?;
        }
        Ok(())
    }
}
