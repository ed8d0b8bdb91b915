//! Retrieval bi-modal VAE on the embedding space: standard-normal prior,
//! heteroscedastic decoders for both modalities, a product-of-experts
//! posterior and a discriminator-based total-correlation penalty.

use serde::{Deserialize, Serialize};

use super::cossim::epoch_batches;
use super::tc::{permute_dims, TcDiscriminator};
use crate::error::{Error, Result};
use crate::nets::{Activation, EmbedSpec, Embedder, Mlp};
use crate::numkit::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::retrieval::{latent, Retriever, ScoreMode};
use crate::rivae::{
    embedder_reg_with, gaussian_log_prob, kl_diag, perturbation, DiagGaussian, GaussianVar,
    LossWeights, Schedule, Stage, EMBED_INIT_TAG,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbiVaeConfig {
    pub v_dim: usize,
    pub z_dim: usize,
    /// empty = linear-Gaussian encoders and decoders
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub gamma: f64,
    pub disc_hidden: usize,
    pub disc_layers: usize,
    pub c_init: f64,
    /// Bi-VAE on fixed embeddings: embedders never train, λ terms are ignored
    #[serde(default)]
    pub frozen_embedders: bool,
}

impl RbiVaeConfig {
    pub fn new(v_dim: usize, z_dim: usize) -> Self {
        Self {
            v_dim,
            z_dim,
            hidden: vec![10],
            slope: 0.2,
            gamma: 10.0,
            disc_hidden: 300,
            disc_layers: 6,
            c_init: 0.01,
            frozen_embedders: false,
        }
    }

    pub fn bivae_on_v(v_dim: usize, z_dim: usize) -> Self {
        Self {
            frozen_embedders: true,
            ..Self::new(v_dim, z_dim)
        }
    }

    fn chain(&self, a: usize, b: usize) -> Vec<usize> {
        let mut d = vec![a];
        d.extend(&self.hidden);
        d.push(b);
        d
    }

    /// The weights actually used: zeroed when embedders are frozen.
    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        if self.frozen_embedders {
            LossWeights {
                lambda_retr: 0.0,
                lambda_reg: 0.0,
                ..*w
            }
        } else {
            *w
        }
    }
}

#[derive(Clone, Debug)]
pub struct RbiVae {
    pub config: RbiVaeConfig,
    pub params: ParamStore,
    pub e1: Embedder,
    pub e2: Embedder,
    pub enc1: Mlp,
    pub enc2: Mlp,
    pub dec1: Mlp,
    pub dec2: Mlp,
    pub disc: TcDiscriminator,
    pub log_c: ParamId,
}

pub const RBIVAE_MODEL_GROUP: [&str; 4] = ["enc1.", "enc2.", "dec1.", "dec2."];
const RBIVAE_INIT_TAG: u64 = 0xB1FA_0000;

/// Precision-weighted product of the experts and the `N(0, I)` prior:
/// `T = 1 + Σ e^{−lv_i}`, `mean = Σ m_i e^{−lv_i} / T`, `log_var = −ln T`.
pub fn poe_posterior<'g>(experts: &[GaussianVar<'g>]) -> Result<GaussianVar<'g>> {
    let first = experts
        .first()
        .ok_or_else(|| Error::contract("product of experts needs at least one expert"))?;
    let mut prec = first.log_var.neg().exp();
    let mut weighted = first.mean.mul(prec)?;
    for e in &experts[1..] {
        let p = e.log_var.neg().exp();
        prec = prec.add(p)?;
        weighted = weighted.add(e.mean.mul(p)?)?;
    }
    let total = prec.add_scalar(1.0);
    let log_var = total.log().neg();
    Ok(GaussianVar {
        mean: weighted.mul(log_var.exp())?,
        log_var,
    })
}

fn standard_normal<'g>(g: &'g Graph, rows: usize, dim: usize) -> GaussianVar<'g> {
    GaussianVar {
        mean: g.constant(Tensor::zeros(&[rows, dim])),
        log_var: g.constant(Tensor::zeros(&[rows, dim])),
    }
}

/// Per-term values of one RBi-VAE step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RbiTerms {
    pub neg_elbo: f64,
    pub tc: f64,
    pub retr: f64,
    pub reg: f64,
    pub total: f64,
    pub disc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbiHistoryRow {
    pub epoch: usize,
    pub stage: Stage,
    pub terms: RbiTerms,
}

impl RbiVae {
    pub fn new(config: RbiVaeConfig, embed: &EmbedSpec, rng: &Rng) -> Result<Self> {
        if embed.v_dim != config.v_dim || config.z_dim == 0 || config.disc_layers < 1 {
            return Err(Error::Config(format!("invalid RBi-VAE config {config:?}")));
        }
        let mut params = ParamStore::new();
        let (e1, e2) = embed.build(&mut params, &mut rng.derive(EMBED_INIT_TAG))?;
        let mut r = rng.derive(RBIVAE_INIT_TAG);
        let act = Activation::LeakyRelu(config.slope);
        let (v, z) = (config.v_dim, config.z_dim);
        let enc1 = Mlp::new(&mut params, "enc1", &config.chain(v, 2 * z), act, &mut r)?;
        let enc2 = Mlp::new(&mut params, "enc2", &config.chain(v, 2 * z), act, &mut r)?;
        let dec1 = Mlp::new(&mut params, "dec1", &config.chain(z, 2 * v), act, &mut r)?;
        let dec2 = Mlp::new(&mut params, "dec2", &config.chain(z, 2 * v), act, &mut r)?;
        let disc = TcDiscriminator::new(
            &mut params,
            z,
            config.disc_hidden,
            config.disc_layers,
            &mut r,
        )?;
        let log_c = params.add("reg.log_c", Tensor::scalar(config.c_init.ln()));
        Ok(Self {
            config,
            params,
            e1,
            e2,
            enc1,
            enc2,
            dec1,
            dec2,
            disc,
            log_c,
        })
    }

    fn heads<'g>(h: Var<'g>, d: usize) -> Result<GaussianVar<'g>> {
        Ok(GaussianVar {
            mean: h.slice_last(0, d)?,
            log_var: h.slice_last(d, d)?,
        })
    }

    /// Single-modality expert `Q(z|v_i)`, `i ∈ {1, 2}`.
    pub fn expert<'g>(&self, g: &'g Graph, which: usize, v: Var<'g>) -> Result<GaussianVar<'g>> {
        let net = if which == 1 { &self.enc1 } else { &self.enc2 };
        Self::heads(net.forward(g, &self.params, v)?, self.config.z_dim)
    }

    /// `P(v_i|z) = N(μ_i(z), diag σ_i(z))`.
    pub fn decode<'g>(&self, g: &'g Graph, which: usize, z: Var<'g>) -> Result<GaussianVar<'g>> {
        let net = if which == 1 { &self.dec1 } else { &self.dec2 };
        Self::heads(net.forward(g, &self.params, z)?, self.config.v_dim)
    }

    /// `Q(z|v1,v2) ∝ Q(z|v1) Q(z|v2) N(0, I)`.
    pub fn posterior<'g>(&self, g: &'g Graph, v1: Var<'g>, v2: Var<'g>) -> Result<GaussianVar<'g>> {
        poe_posterior(&[self.expert(g, 1, v1)?, self.expert(g, 2, v2)?])
    }

    /// `Q(z|v1) ∝ Q(z|v1) N(0, I)`, the query-side latent.
    pub fn query_posterior<'g>(&self, g: &'g Graph, v1: Var<'g>) -> Result<GaussianVar<'g>> {
        poe_posterior(&[self.expert(g, 1, v1)?])
    }

    /// `−E_Q[log P(v1|z) + log P(v2|z)] + KL(Q ‖ N(0, I))`, batch mean, and the
    /// latent sample used.
    pub fn elbo_loss_with<'g>(
        &self,
        g: &'g Graph,
        v1: Var<'g>,
        v2: Var<'g>,
        eps: &Tensor,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let q = self.posterior(g, v1, v2)?;
        let z = q.sample(eps)?;
        let lik = gaussian_log_prob(&self.decode(g, 1, z)?, v1)?
            .add(gaussian_log_prob(&self.decode(g, 2, z)?, v2)?)?;
        let kl = kl_diag(&q, &standard_normal(g, eps.rows(), self.config.z_dim))?;
        Ok((kl.sub(lik)?.mean(), z))
    }

    /// `(1 + log P(v2'|z) − log P(v2|z))₊` with `z ~ Q(z|v1)`.
    pub fn retrieval_loss_with<'g>(
        &self,
        g: &'g Graph,
        v1: Var<'g>,
        v2: Var<'g>,
        v2_mismatch: Var<'g>,
        eps: &Tensor,
    ) -> Result<Var<'g>> {
        if v1.shape()[0] < 2 {
            return Err(Error::contract(
                "retrieval loss needs a batch of at least 2 for a mismatch",
            ));
        }
        let z = self.query_posterior(g, v1)?.sample(eps)?;
        let dec = self.decode(g, 2, z)?;
        let gap = gaussian_log_prob(&dec, v2_mismatch)?.sub(gaussian_log_prob(&dec, v2)?)?;
        Ok(gap.add_scalar(1.0).relu().mean())
    }

    /// `Q(z|v1)` statistics for a batch of `x1`, no gradients.
    pub fn query_latent(&self, x1: &Tensor) -> Result<DiagGaussian> {
        let v1 = self.e1.embed_values(&self.params, x1, 256)?;
        let g = Graph::new();
        Ok(self.query_posterior(&g, g.constant(v1))?.value())
    }

    /// Joint-posterior means for embedded pairs, no gradients.
    pub fn posterior_means(&self, v1: &Tensor, v2: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let q = self.posterior(&g, g.constant(v1.clone()), g.constant(v2.clone()))?;
        Ok(q.value().mean)
    }

    /// `(μ2(z), log σ2(z))`, no gradients.
    pub fn decode_values(&self, which: usize, z: &Tensor) -> Result<DiagGaussian> {
        let g = Graph::new();
        Ok(self.decode(&g, which, g.constant(z.clone()))?.value())
    }

    /// `[z, targets]` table of `log N(v2; μ2(z), diag σ2(z))`.
    pub fn target_log_density(&self, z: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let dec = self.decode_values(2, z)?;
        let (n, m, d) = (z.rows(), targets.rows(), targets.row_len());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let (mu, lv) = (dec.mean.row(i), dec.log_var.row(i));
            let base: f64 = lv
                .iter()
                .map(|l| -0.5 * (l + (2.0 * std::f64::consts::PI).ln()))
                .sum();
            let inv: Vec<f64> = lv.iter().map(|l| (-l).exp()).collect();
            for j in 0..m {
                let t = targets.row(j);
                let quad: f64 = (0..d).map(|k| (t[k] - mu[k]).powi(2) * inv[k]).sum();
                out.push(base - 0.5 * quad);
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn set_flags(&mut self, stage: Stage, w: &LossWeights, disc_phase: bool) {
        let joint = stage == Stage::Joint && !disc_phase;
        self.params.set_trainable("", !disc_phase);
        self.params.set_trainable("disc.", disc_phase);
        self.params
            .set_trainable("e1.", joint && w.lambda_retr > 0.0);
        self.params
            .set_trainable("e2.", joint && (w.lambda_retr > 0.0 || w.lambda_reg > 0.0));
        self.params
            .set_trainable("reg.", joint && w.lambda_reg > 0.0);
    }
}

/// Optimiser and RNG state of an RBi-VAE run.
#[derive(Clone, Debug)]
pub struct RbiTrainState {
    pub epoch: usize,
    pub model_opt: AdamState,
    pub embed_opt: AdamState,
    pub disc_opt: AdamState,
    pub rng: Rng,
    pub history: Vec<RbiHistoryRow>,
}

impl RbiTrainState {
    pub fn fresh(model: &RbiVae, schedule: &Schedule, rng: Rng) -> Self {
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
            model_opt: adam(&RBIVAE_MODEL_GROUP),
            embed_opt: adam(&["e1.", "e2.", "reg."]),
            disc_opt: adam(&["disc."]),
            rng,
            history: Vec::new(),
        }
    }
}

/// One epoch of `−ELBO + γ·TC + λ_Retr·L_Retr + λ_Reg·L_Reg`, interleaved
/// with discriminator updates. Rolls back the epoch on divergence.
pub fn rbivae_epoch(
    model: &mut RbiVae,
    state: &mut RbiTrainState,
    x1: &Tensor,
    x2: &Tensor,
    schedule: &Schedule,
    weights: &LossWeights,
) -> Result<RbiHistoryRow> {
    let snapshot = (model.params.clone(), state.clone());
    match epoch_inner(model, state, x1, x2, schedule, weights) {
        Ok(row) => Ok(row),
        Err(e) => {
            let epoch = state.epoch;
            (model.params, *state) = snapshot;
            Err(match e {
                Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
                other => other,
            })
        }
    }
}

fn epoch_inner(
    model: &mut RbiVae,
    state: &mut RbiTrainState,
    x1: &Tensor,
    x2: &Tensor,
    schedule: &Schedule,
    weights: &LossWeights,
) -> Result<RbiHistoryRow> {
    let w = model.config.effective_weights(weights);
    let epoch = state.epoch;
    let stage = if model.config.frozen_embedders {
        Stage::Frozen
    } else {
        schedule.stage_at(epoch)
    };
    let lr = schedule.lr_at(epoch);
    for opt in [
        &mut state.model_opt,
        &mut state.embed_opt,
        &mut state.disc_opt,
    ] {
        opt.set_learning_rate(lr);
    }
    let cache = if stage == Stage::Frozen {
        Some((
            model.e1.embed_values(&model.params, x1, 512)?,
            model.e2.embed_values(&model.params, x2, 512)?,
        ))
    } else {
        None
    };
    let zd = model.config.z_dim;
    let batches = epoch_batches(&mut state.rng, x1.rows(), schedule.batch_size);
    let mut sum = RbiTerms::default();
    for idx in &batches {
        let b = idx.len();
        let mismatch = state.rng.derangement(b);
        let z_eps = state.rng.normal_tensor(&[b, zd]);
        let r_eps = state.rng.normal_tensor(&[b, zd]);
        let reg_eps = (cache.is_none() && w.lambda_reg > 0.0)
            .then(|| perturbation(&mut state.rng, b, x2.row_len(), w.noise_magnitude));

        model.set_flags(stage, &w, false);
        let g = Graph::new();
        let (v1, v2, x2v) = match &cache {
            Some((c1, c2)) => (
                g.constant(c1.gather_rows(idx)),
                g.constant(c2.gather_rows(idx)),
                None,
            ),
            None => {
                let x2v = g.constant(x2.gather_rows(idx));
                let v1 = model
                    .e1
                    .embed(&g, &model.params, g.constant(x1.gather_rows(idx)))?;
                (v1, model.e2.embed(&g, &model.params, x2v)?, Some(x2v))
            }
        };
        let (neg_elbo, z) = model.elbo_loss_with(&g, v1.detach(), v2.detach(), &z_eps)?;
        let tc = model.disc.logits(&g, &model.params, z)?.mean();
        let mut total = neg_elbo.add(tc.scale(model.config.gamma))?;
        let mut terms = RbiTerms {
            neg_elbo: neg_elbo.item(),
            tc: tc.item(),
            ..RbiTerms::default()
        };
        if w.lambda_retr > 0.0 {
            let r = model.retrieval_loss_with(&g, v1, v2, v2.select_rows(&mismatch)?, &r_eps)?;
            terms.retr = r.item();
            total = total.add(r.scale(w.lambda_retr))?;
        }
        if let (Some(x2v), Some(eps)) = (x2v, &reg_eps) {
            let c = g.param(&model.params, model.log_c).exp();
            let r = embedder_reg_with(&g, &model.params, &model.e2, x2v, Some(v2), eps, c)?;
            terms.reg = r.item();
            total = total.add(r.scale(w.lambda_reg))?;
        }
        terms.total = total.item();
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("non-finite RBi-VAE loss {terms:?}"),
            });
        }
        let z_val = (*z.value()).clone().with_requires_grad(false);
        g.backward_into(total, &mut model.params)?;
        drop(g);
        state.model_opt.step(&mut model.params)?;
        if stage == Stage::Joint {
            state.embed_opt.step(&mut model.params)?;
        }

        model.set_flags(stage, &w, true);
        let z_perm = permute_dims(&z_val, &mut state.rng);
        let g = Graph::new();
        let d = model
            .disc
            .loss(&g, &model.params, g.constant(z_val), g.constant(z_perm))?;
        terms.disc = d.item();
        g.backward_into(d, &mut model.params)?;
        drop(g);
        state.disc_opt.step(&mut model.params)?;

        sum.neg_elbo += terms.neg_elbo;
        sum.tc += terms.tc;
        sum.retr += terms.retr;
        sum.reg += terms.reg;
        sum.total += terms.total;
        sum.disc += terms.disc;
    }
    model.params.set_trainable("", true);
    let k = batches.len() as f64;
    let row = RbiHistoryRow {
        epoch,
        stage,
        terms: RbiTerms {
            neg_elbo: sum.neg_elbo / k,
            tc: sum.tc / k,
            retr: sum.retr / k,
            reg: sum.reg / k,
            total: sum.total / k,
            disc: sum.disc / k,
        },
    };
    state.history.push(row);
    state.epoch += 1;
    Ok(row)
}

/// Full schedule; `hook` runs after every epoch.
pub fn rbivae_train(
    model: &mut RbiVae,
    x1: &Tensor,
    x2: &Tensor,
    schedule: &Schedule,
    weights: &LossWeights,
    rng: Rng,
    mut hook: impl FnMut(&RbiVae, &RbiHistoryRow) -> Result<()>,
) -> Result<RbiTrainState> {
    schedule.validate()?;
    weights.validate()?;
    if x1.rows() != x2.rows() || x1.rows() < schedule.batch_size {
        return Err(Error::contract(
            "RBi-VAE training needs aligned pairs filling a batch",
        ));
    }
    let mut state = RbiTrainState::fresh(model, schedule, rng);
    while state.epoch < schedule.epochs {
        let row = rbivae_epoch(model, &mut state, x1, x2, schedule, weights)?;
        hook(model, &row)?;
    }
    Ok(state)
}

impl Retriever for RbiVae {
    fn params_version(&self) -> u64 {
        self.params.version()
    }

    fn embed_targets(&self, x2: &Tensor) -> Result<Tensor> {
        self.e2.embed_values(&self.params, x2, 256)
    }

    /// `z` from `Q(z|v1)`, scored by [`RbiVae::target_log_density`].
    fn score(
        &self,
        x1: &Tensor,
        targets: &Tensor,
        mode: ScoreMode,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        let q = self.query_latent(x1)?;
        self.target_log_density(&latent(&q.mean, &q.std(), mode, rng), targets)
    }
}
