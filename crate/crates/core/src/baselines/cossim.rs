//! Cos-Sim with a bottleneck auto-encoder on the query embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Activation, EmbedSpec, Embedder, Mlp};
use crate::numkit::{AdamConfig, AdamState, Graph, ParamStore, Rng, Tensor, Var};
use crate::retrieval::{Retriever, ScoreMode};
use crate::rivae::EMBED_INIT_TAG;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosSimConfig {
    pub v_dim: usize,
    pub z_dim: usize,
    pub hidden: Vec<usize>,
    pub slope: f64,
    /// triplet margin of the alignment hinge
    pub margin: f64,
}

impl CosSimConfig {
    pub fn new(v_dim: usize, z_dim: usize) -> Self {
        Self {
            v_dim,
            z_dim,
            hidden: vec![10, 10],
            slope: 0.2,
            margin: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosSimSchedule {
    pub batch_size: usize,
    pub embed_epochs: usize,
    pub bottleneck_epochs: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct CosSimLvm {
    pub config: CosSimConfig,
    pub params: ParamStore,
    pub e1: Embedder,
    pub e2: Embedder,
    pub enc: Mlp,
    pub dec: Mlp,
}

const BOTTLENECK_INIT_TAG: u64 = 0xC055_0000;

/// Row-wise `⟨a, b⟩ / (‖a‖‖b‖)`.
pub fn cosine<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    a.normalize_last()
        .mul(b.normalize_last())
        .map(Var::sum_last)
}

/// `mean (margin − cos(v1, v2) + cos(v1, v2'))₊`.
pub fn alignment_loss<'g>(
    v1: Var<'g>,
    v2: Var<'g>,
    v2_mis: Var<'g>,
    margin: f64,
) -> Result<Var<'g>> {
    let pos = cosine(v1, v2)?;
    let neg = cosine(v1, v2_mis)?;
    Ok(neg.sub(pos)?.add_scalar(margin).clamp_min_zero().mean())
}

impl CosSimLvm {
    pub fn new(config: CosSimConfig, embed: &EmbedSpec, rng: &Rng) -> Result<Self> {
        if embed.v_dim != config.v_dim || config.z_dim == 0 {
            return Err(Error::Config(format!(
                "cos-sim dims: embedder {} vs v_dim {}, z_dim {}",
                embed.v_dim, config.v_dim, config.z_dim
            )));
        }
        let mut params = ParamStore::new();
        let (e1, e2) = embed.build(&mut params, &mut rng.derive(EMBED_INIT_TAG))?;
        let mut r = rng.derive(BOTTLENECK_INIT_TAG);
        let act = Activation::LeakyRelu(config.slope);
        let chain = |a: usize, b: usize| {
            let mut d = vec![a];
            d.extend(&config.hidden);
            d.push(b);
            d
        };
        let enc = Mlp::new(
            &mut params,
            "bottleneck.enc",
            &chain(config.v_dim, config.z_dim),
            act,
            &mut r,
        )?;
        let dec = Mlp::new(
            &mut params,
            "bottleneck.dec",
            &chain(config.z_dim, config.v_dim),
            act,
            &mut r,
        )?;
        Ok(Self {
            config,
            params,
            e1,
            e2,
            enc,
            dec,
        })
    }

    /// `v1' = dec(enc(v1))`.
    pub fn reconstruct<'g>(&self, g: &'g Graph, v1: Var<'g>) -> Result<Var<'g>> {
        let z = self.enc.forward(g, &self.params, v1)?;
        self.dec.forward(g, &self.params, z)
    }

    /// `mean ‖v1' − v1‖² + mean (1 − cos(v1', v2))`.
    pub fn bottleneck_loss<'g>(&self, g: &'g Graph, v1: Var<'g>, v2: Var<'g>) -> Result<Var<'g>> {
        let r = self.reconstruct(g, v1)?;
        let rec = r.sub(v1)?.square().sum_last().mean();
        let align = cosine(r, v2)?.neg().add_scalar(1.0).mean();
        rec.add(align)
    }

    /// Bottleneck codes `enc(e1(x1))`, no gradients.
    pub fn latents(&self, x1: &Tensor) -> Result<Tensor> {
        let v1 = self.e1.embed_values(&self.params, x1, 256)?;
        let g = Graph::new();
        let z = self.enc.forward(&g, &self.params, g.constant(v1))?;
        Ok((*z.value()).clone().with_requires_grad(false))
    }

    /// `dec(z)`, no gradients.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let v = self.dec.forward(&g, &self.params, g.constant(z.clone()))?;
        Ok((*v.value()).clone().with_requires_grad(false))
    }
}

/// Minibatch indices of one epoch, incomplete tail dropped.
pub(crate) fn epoch_batches(rng: &mut Rng, n: usize, bs: usize) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    order.chunks_exact(bs).map(<[usize]>::to_vec).collect()
}

/// Trains the embedders on the alignment hinge, then the bottleneck on the
/// frozen embeddings. Returns per-epoch mean losses of both phases.
pub fn cossim_train(
    model: &mut CosSimLvm,
    x1: &Tensor,
    x2: &Tensor,
    schedule: &CosSimSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if x1.rows() != x2.rows() || x1.rows() < schedule.batch_size || schedule.batch_size < 2 {
        return Err(Error::contract(
            "cos-sim training needs aligned pairs filling a batch of ≥ 2",
        ));
    }
    let adam = AdamConfig::with_lr(schedule.learning_rate);
    let mut history = Vec::new();

    let embed_ids = [
        model.params.ids_with_prefix("e1."),
        model.params.ids_with_prefix("e2."),
    ]
    .concat();
    model.params.set_trainable("", false);
    model.params.set_trainable("e1.", true);
    model.params.set_trainable("e2.", true);
    let mut opt = AdamState::new(adam, embed_ids, &model.params);
    for _ in 0..schedule.embed_epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(rng, x1.rows(), schedule.batch_size);
        for idx in &batches {
            let mis = rng.derangement(idx.len());
            let g = Graph::new();
            let v1 = model
                .e1
                .embed(&g, &model.params, g.constant(x1.gather_rows(idx)))?;
            let v2 = model
                .e2
                .embed(&g, &model.params, g.constant(x2.gather_rows(idx)))?;
            let loss = alignment_loss(v1, v2, v2.select_rows(&mis)?, model.config.margin)?;
            sum += finite(loss.item(), history.len())?;
            g.backward_into(loss, &mut model.params)?;
            drop(g);
            opt.step(&mut model.params)?;
        }
        history.push(sum / batches.len() as f64);
    }

    let v1 = model.e1.embed_values(&model.params, x1, 512)?;
    let v2 = model.e2.embed_values(&model.params, x2, 512)?;
    let bott_ids = model.params.ids_with_prefix("bottleneck.");
    model.params.set_trainable("", false);
    model.params.set_trainable("bottleneck.", true);
    let mut opt = AdamState::new(adam, bott_ids, &model.params);
    for _ in 0..schedule.bottleneck_epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(rng, x1.rows(), schedule.batch_size);
        for idx in &batches {
            let g = Graph::new();
            let loss = model.bottleneck_loss(
                &g,
                g.constant(v1.gather_rows(idx)),
                g.constant(v2.gather_rows(idx)),
            )?;
            sum += finite(loss.item(), history.len())?;
            g.backward_into(loss, &mut model.params)?;
            drop(g);
            opt.step(&mut model.params)?;
        }
        history.push(sum / batches.len() as f64);
    }
    model.params.set_trainable("", true);
    Ok(history)
}

pub(crate) fn finite(x: f64, epoch: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Divergence {
            epoch,
            detail: format!("non-finite loss {x}"),
        })
    }
}

impl Retriever for CosSimLvm {
    fn params_version(&self) -> u64 {
        self.params.version()
    }

    fn embed_targets(&self, x2: &Tensor) -> Result<Tensor> {
        self.e2.embed_values(&self.params, x2, 256)
    }

    /// `cos(v1', v2)`; deterministic, so `mode` is irrelevant.
    fn score(
        &self,
        x1: &Tensor,
        targets: &Tensor,
        _mode: ScoreMode,
        _rng: &mut Rng,
    ) -> Result<Tensor> {
        let r = self.decode_latents(&self.latents(x1)?)?;
        Ok(cosine_table(&r, targets))
    }
}

/// `cos(a_i, b_j)` for every row pair.
pub fn cosine_table(a: &Tensor, b: &Tensor) -> Tensor {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let bn: Vec<f64> = (0..b.rows()).map(|j| norm(b.row(j))).collect();
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        let (ai, na) = (a.row(i), norm(a.row(i)));
        for (j, nb) in bn.iter().enumerate() {
            let dot: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
        }
    }
    Tensor::new(vec![a.rows(), b.rows()], out).expect("score shape")
}
