//! Retrieval IVAE: a conditional prior `P(z|v1)`, a homoscedastic decoder
//! `P(v2|z) = N(f(z), η²I)` living in the embedding space, and a posterior
//! `Q(z|v1,v2)`, trained with the negative ELBO, a retrieval hinge and an
//! embedder regulariser that keeps `e2`'s local response constant.

mod train;

pub use train::{HistoryRow, Schedule, Stage, TrainState, Trainer};

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nets::{Activation, EmbedSpec, Embedder, Mlp, Module};
use crate::numkit::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Row-wise diagonal Gaussians, `[B, d]` mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::dim("diag_gaussian", mean.shape(), log_var.shape()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.row_len()
    }

    pub fn std(&self) -> Tensor {
        self.log_var.map(|l| (0.5 * l).exp())
    }
}

/// A [`DiagGaussian`] whose parameters live on a tape.
#[derive(Clone, Copy)]
pub struct GaussianVar<'g> {
    pub mean: Var<'g>,
    pub log_var: Var<'g>,
}

impl<'g> GaussianVar<'g> {
    pub fn value(&self) -> DiagGaussian {
        DiagGaussian {
            mean: (*self.mean.value()).clone().with_requires_grad(false),
            log_var: (*self.log_var.value()).clone().with_requires_grad(false),
        }
    }

    /// Reparameterised draw `mean + exp(½ log_var) ⊙ eps`.
    pub fn sample(&self, eps: &Tensor) -> Result<Var<'g>> {
        let g = self.mean.graph();
        let noise = g.constant(eps.clone());
        self.mean.add(self.log_var.scale(0.5).exp().mul(noise)?)
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self.mean.value().all_finite() && self.log_var.value().all_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                epoch: 0,
                detail: format!("non-finite {what} output"),
            })
        }
    }
}

/// `KL(q ‖ p)` per row, summed over dimensions.
pub fn kl_diag<'g>(q: &GaussianVar<'g>, p: &GaussianVar<'g>) -> Result<Var<'g>> {
    // ½ Σ [ lv_p − lv_q + (e^{lv_q} + (m_q − m_p)²) e^{−lv_p} − 1 ]
    let inv_var_p = p.log_var.neg().exp();
    let spread = q.log_var.exp().add(q.mean.sub(p.mean)?.square())?;
    Ok(p.log_var
        .sub(q.log_var)?
        .add(spread.mul(inv_var_p)?)?
        .add_scalar(-1.0)
        .sum_last()
        .scale(0.5))
}

/// `log N(x; mean, diag exp(log_var))` per row.
pub fn gaussian_log_prob<'g>(d: &GaussianVar<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let quad = x.sub(d.mean)?.square().mul(d.log_var.neg().exp())?;
    Ok(quad
        .add(d.log_var)?
        .add_scalar((2.0 * PI).ln())
        .sum_last()
        .scale(-0.5))
}

/// Which latent distribution the retrieval hinge takes its expectation under.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    #[default]
    Posterior,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RivaeConfig {
    pub v_dim: usize,
    pub z_dim: usize,
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub eta: f64,
    pub c_init: f64,
}

impl RivaeConfig {
    pub fn new(v_dim: usize, z_dim: usize) -> Self {
        Self {
            v_dim,
            z_dim,
            hidden: vec![10, 10],
            slope: 0.2,
            eta: 1e-3,
            c_init: 0.01,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.v_dim == 0 || self.z_dim == 0 {
            return Err(Error::Config("v_dim and z_dim must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite())
            || !(self.c_init > 0.0 && self.c_init.is_finite())
        {
            return Err(Error::Config(format!(
                "eta and c_init must be positive, got {} and {}",
                self.eta, self.c_init
            )));
        }
        Ok(())
    }

    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.hidden);
        d.push(output);
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_retr: f64,
    pub lambda_reg: f64,
    pub noise_magnitude: f64,
    #[serde(default)]
    pub retr_latent: LatentSource,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_retr: 1.0,
            lambda_reg: 0.1,
            noise_magnitude: 1e-3,
            retr_latent: LatentSource::Posterior,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_retr)
            || !ok(self.lambda_reg)
            || !(self.noise_magnitude > 0.0 && self.noise_magnitude.is_finite())
        {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Parameter container: `e1`, `e2`, prior `(μ, log σ²)`, decoder `f`,
/// posterior `(m, log s²)` and the regulariser target `c = exp(log_c)`.
#[derive(Clone, Debug)]
pub struct RivaeModel {
    pub config: RivaeConfig,
    pub params: ParamStore,
    pub e1: Embedder,
    pub e2: Embedder,
    pub prior: Mlp,
    pub decoder: Mlp,
    pub posterior: Mlp,
    pub log_c: ParamId,
}

pub const EMBED_INIT_TAG: u64 = 0xE3BE_D000;
const NETS_INIT_TAG: u64 = 0x1FAE_0000;

pub const MODEL_GROUP: [&str; 3] = ["prior.", "decoder.", "posterior."];
pub const EMBED_GROUP: [&str; 3] = ["e1.", "e2.", "reg."];

impl RivaeModel {
    /// Embedders are drawn from `rng.derive(EMBED_INIT_TAG)` so that every
    /// model built from the same seed starts from identical embedders.
    pub fn new(config: RivaeConfig, embed: &EmbedSpec, rng: &Rng) -> Result<Self> {
        config.validate()?;
        if embed.v_dim != config.v_dim {
            return Err(Error::Config(format!(
                "embedder width {} does not match v_dim {}",
                embed.v_dim, config.v_dim
            )));
        }
        let mut params = ParamStore::new();
        let (e1, e2) = embed.build(&mut params, &mut rng.derive(EMBED_INIT_TAG))?;
        let mut r = rng.derive(NETS_INIT_TAG);
        let act = Activation::LeakyRelu(config.slope);
        let (v, z) = (config.v_dim, config.z_dim);
        let prior = Mlp::new(&mut params, "prior", &config.dims(v, 2 * z), act, &mut r)?;
        let decoder = Mlp::new(&mut params, "decoder", &config.dims(z, v), act, &mut r)?;
        let posterior = Mlp::new(
            &mut params,
            "posterior",
            &config.dims(2 * v, 2 * z),
            act,
            &mut r,
        )?;
        let log_c = params.add("reg.log_c", Tensor::scalar(config.c_init.ln()));
        Ok(Self {
            config,
            params,
            e1,
            e2,
            prior,
            decoder,
            posterior,
            log_c,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    pub fn reg_c(&self) -> f64 {
        self.params.get(self.log_c).item().exp()
    }

    fn split_heads<'g>(&self, h: Var<'g>) -> Result<GaussianVar<'g>> {
        let z = self.config.z_dim;
        Ok(GaussianVar {
            mean: h.slice_last(0, z)?,
            log_var: h.slice_last(z, z)?,
        })
    }

    pub fn encode_prior<'g>(&self, g: &'g Graph, v1: Var<'g>) -> Result<GaussianVar<'g>> {
        let d = self.split_heads(self.prior.forward(g, &self.params, v1)?)?;
        d.check_finite("prior")?;
        Ok(d)
    }

    /// `N(f(z), η²I)`: the log-variance is the constant `2 ln η`.
    pub fn decode<'g>(&self, g: &'g Graph, z: Var<'g>) -> Result<GaussianVar<'g>> {
        let mean = self.decoder.forward(g, &self.params, z)?;
        let lv = Tensor::full(&mean.shape(), 2.0 * self.config.eta.ln());
        Ok(GaussianVar {
            mean,
            log_var: g.constant(lv),
        })
    }

    pub fn encode_posterior<'g>(
        &self,
        g: &'g Graph,
        v1: Var<'g>,
        v2: Var<'g>,
    ) -> Result<GaussianVar<'g>> {
        if v1.shape()[0] != v2.shape()[0] {
            return Err(Error::dim("encode_posterior", &v1.shape(), &v2.shape()));
        }
        let d = self.split_heads(self.posterior.forward(
            g,
            &self.params,
            v1.concat_last(v2)?,
        )?)?;
        d.check_finite("posterior")?;
        Ok(d)
    }

    /// Negative ELBO with explicit reparameterisation noise `eps ~ N(0, I)`.
    pub fn elbo_loss_with<'g>(
        &self,
        g: &'g Graph,
        v1: Var<'g>,
        v2: Var<'g>,
        eps: &Tensor,
    ) -> Result<Var<'g>> {
        let q = self.encode_posterior(g, v1, v2)?;
        let p = self.encode_prior(g, v1)?;
        let z = q.sample(eps)?;
        let lik = gaussian_log_prob(&self.decode(g, z)?, v2)?;
        Ok(kl_diag(&q, &p)?.sub(lik)?.mean())
    }

    pub fn elbo_loss<'g>(
        &self,
        g: &'g Graph,
        v1: Var<'g>,
        v2: Var<'g>,
        rng: &mut Rng,
    ) -> Result<Var<'g>> {
        let eps = rng.normal_tensor(&[v1.shape()[0], self.config.z_dim]);
        self.elbo_loss_with(g, v1, v2, &eps)
    }

    /// Retrieval hinge `(1 + log P(v2'|z) − log P(v2|z))₊` with explicit noise.
    pub fn retrieval_loss_with<'g>(
        &self,
        g: &'g Graph,
        v1: Var<'g>,
        v2: Var<'g>,
        v2_mismatch: Var<'g>,
        eps: &Tensor,
        source: LatentSource,
    ) -> Result<Var<'g>> {
        if v1.shape()[0] < 2 {
            return Err(Error::contract(
                "retrieval loss needs a batch of at least 2 for a mismatch",
            ));
        }
        if v2.shape() != v2_mismatch.shape() {
            return Err(Error::dim(
                "retrieval_loss",
                &v2.shape(),
                &v2_mismatch.shape(),
            ));
        }
        let latent = match source {
            LatentSource::Posterior => self.encode_posterior(g, v1, v2)?,
            LatentSource::Prior => self.encode_prior(g, v1)?,
        };
        let dec = self.decode(g, latent.sample(eps)?)?;
        let gap = gaussian_log_prob(&dec, v2_mismatch)?.sub(gaussian_log_prob(&dec, v2)?)?;
        Ok(gap.add_scalar(1.0).relu().mean())
    }

    /// Mismatches come from a within-batch derangement.
    pub fn retrieval_loss<'g>(
        &self,
        g: &'g Graph,
        v1: Var<'g>,
        v2: Var<'g>,
        source: LatentSource,
        rng: &mut Rng,
    ) -> Result<Var<'g>> {
        let b = v1.shape()[0];
        if b < 2 {
            return Err(Error::contract(
                "retrieval loss needs a batch of at least 2 for a mismatch",
            ));
        }
        let mis = v2.select_rows(&rng.derangement(b))?;
        let eps = rng.normal_tensor(&[b, self.config.z_dim]);
        self.retrieval_loss_with(g, v1, v2, mis, &eps, source)
    }

    pub fn reg_c_var<'g>(&self, g: &'g Graph) -> Var<'g> {
        g.param(&self.params, self.log_c).exp()
    }
}

/// Rows of isotropic Gaussian directions rescaled to exactly `magnitude`.
pub fn perturbation(rng: &mut Rng, rows: usize, dim: usize, magnitude: f64) -> Tensor {
    let mut t = rng.normal_tensor(&[rows, dim]);
    for r in t.data_mut().chunks_mut(dim) {
        let n = r
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        r.iter_mut().for_each(|x| *x *= magnitude / n);
    }
    t
}

/// `mean (‖e2(x2) − e2(x2 + ε)‖ − c)²` for a given perturbation batch `eps`.
/// `v2` may pass an already computed `e2(x2)` to save a forward pass.
pub fn embedder_reg_with<'g>(
    g: &'g Graph,
    store: &ParamStore,
    e2: &Embedder,
    x2: Var<'g>,
    v2: Option<Var<'g>>,
    eps: &Tensor,
    c: Var<'g>,
) -> Result<Var<'g>> {
    let v2 = match v2 {
        Some(v) => v,
        None => e2.embed(g, store, x2)?,
    };
    let shifted = e2.embed(g, store, x2.add(g.constant(eps.clone()))?)?;
    Ok(v2.sub(shifted)?.norm_last().sub(c)?.square().mean())
}

pub fn embedder_reg<'g>(
    g: &'g Graph,
    store: &ParamStore,
    e2: &Embedder,
    x2: Var<'g>,
    c: Var<'g>,
    rng: &mut Rng,
    noise_magnitude: f64,
) -> Result<Var<'g>> {
    let s = x2.shape();
    let eps = perturbation(rng, s[0], s[1], noise_magnitude);
    embedder_reg_with(g, store, e2, x2, None, &eps, c)
}

/// Per-term values of one joint-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub lb: f64,
    pub retr: f64,
    pub reg: f64,
    pub total: f64,
}

/// A minibatch either in ambient space or already embedded (frozen embedders).
#[derive(Clone, Copy)]
pub enum JointInput<'a> {
    Raw { x1: &'a Tensor, x2: &'a Tensor },
    Embedded { v1: &'a Tensor, v2: &'a Tensor },
}

impl JointInput<'_> {
    fn rows(&self) -> usize {
        match self {
            JointInput::Raw { x1, .. } => x1.rows(),
            JointInput::Embedded { v1, .. } => v1.rows(),
        }
    }
}

/// All randomness of one joint-loss evaluation, drawn up front.
#[derive(Clone, Debug, PartialEq)]
pub struct JointNoise {
    pub z_eps: Tensor,
    pub mismatch: Vec<usize>,
    pub reg_eps: Option<Tensor>,
}

impl JointNoise {
    pub fn draw(rng: &mut Rng, rows: usize, z_dim: usize, reg: Option<(usize, f64)>) -> Self {
        let mismatch = rng.derangement(rows);
        let z_eps = rng.normal_tensor(&[rows, z_dim]);
        let reg_eps = reg.map(|(dim, mag)| perturbation(rng, rows, dim, mag));
        Self {
            z_eps,
            mismatch,
            reg_eps,
        }
    }
}

impl RivaeModel {
    /// `L_LB + λ_Retr·L_Retr + λ_Reg·L_Reg`.
    ///
    /// Gradient routing: `L_LB` sees detached embeddings (prior, decoder and
    /// posterior only); `L_Retr` reaches the embedders; `L_Reg` touches `e2`
    /// and `c` only. Which groups actually move is decided by the trainable
    /// flags in the store. `L_Reg` is evaluated only for raw input when
    /// `noise.reg_eps` is present and `λ_Reg > 0`.
    pub fn joint_loss_with<'g>(
        &self,
        g: &'g Graph,
        input: JointInput<'_>,
        weights: &LossWeights,
        noise: &JointNoise,
    ) -> Result<(Var<'g>, LossTerms)> {
        if input.rows() < 2 {
            return Err(Error::contract("joint loss needs a batch of at least 2"));
        }
        let (v1, v2, x2) = match input {
            JointInput::Raw { x1, x2 } => {
                let x2v = g.constant(x2.clone());
                let v1 = self.e1.embed(g, &self.params, g.constant(x1.clone()))?;
                let v2 = self.e2.embed(g, &self.params, x2v)?;
                (v1, v2, Some(x2v))
            }
            JointInput::Embedded { v1, v2 } => {
                (g.constant(v1.clone()), g.constant(v2.clone()), None)
            }
        };
        let lb = self.elbo_loss_with(g, v1.detach(), v2.detach(), &noise.z_eps)?;
        let mut total = lb;
        let mut terms = LossTerms {
            lb: lb.item(),
            ..LossTerms::default()
        };
        if weights.lambda_retr > 0.0 {
            let mis = v2.select_rows(&noise.mismatch)?;
            let r = self.retrieval_loss_with(g, v1, v2, mis, &noise.z_eps, weights.retr_latent)?;
            terms.retr = r.item();
            total = total.add(r.scale(weights.lambda_retr))?;
        }
        if let (Some(x2v), Some(eps), true) = (x2, &noise.reg_eps, weights.lambda_reg > 0.0) {
            let r = embedder_reg_with(
                g,
                &self.params,
                &self.e2,
                x2v,
                Some(v2),
                eps,
                self.reg_c_var(g),
            )?;
            terms.reg = r.item();
            total = total.add(r.scale(weights.lambda_reg))?;
        }
        terms.total = total.item();
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                detail: format!("non-finite joint loss {terms:?}"),
            });
        }
        Ok((total, terms))
    }

    pub fn joint_loss<'g>(
        &self,
        g: &'g Graph,
        input: JointInput<'_>,
        weights: &LossWeights,
        rng: &mut Rng,
    ) -> Result<(Var<'g>, LossTerms)> {
        let reg = match input {
            JointInput::Raw { x2, .. } if weights.lambda_reg > 0.0 => {
                Some((x2.row_len(), weights.noise_magnitude))
            }
            _ => None,
        };
        let noise = JointNoise::draw(rng, input.rows(), self.config.z_dim, reg);
        self.joint_loss_with(g, input, weights, &noise)
    }

    /// Re-initialises the prior, decoder and posterior nets.
    pub fn reinit_nets(&mut self, rng: &mut Rng) {
        for m in [&self.prior, &self.decoder, &self.posterior] {
            m.init_params(&mut self.params, rng);
        }
    }

    /// Prior statistics for a batch of `x1`, no gradients.
    pub fn prior_of(&self, x1: &Tensor) -> Result<DiagGaussian> {
        let v1 = self.e1.embed_values(&self.params, x1, 256)?;
        self.prior_of_embedded(&v1)
    }

    pub fn prior_of_embedded(&self, v1: &Tensor) -> Result<DiagGaussian> {
        let g = Graph::new();
        Ok(self.encode_prior(&g, g.constant(v1.clone()))?.value())
    }

    /// Decoder means `f(z)` for a batch of latents, no gradients.
    pub fn decode_mean(&self, z: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let m = self.decode(&g, g.constant(z.clone()))?.mean;
        Ok((*m.value()).clone().with_requires_grad(false))
    }
}
