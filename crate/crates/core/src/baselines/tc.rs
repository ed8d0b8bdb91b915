//! Total correlation by density-ratio estimation: a discriminator separates
//! joint latent samples from samples with every dimension shuffled
//! independently across the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp};
use crate::numkit::{AdamConfig, AdamState, Graph, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TcDiscriminator {
    pub net: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcEstimate {
    pub tc_value: f64,
    pub discriminator_loss: f64,
}

/// Shuffles each column independently.
pub fn permute_dims(z: &Tensor, rng: &mut Rng) -> Tensor {
    let (n, d) = (z.rows(), z.row_len());
    let mut out = z.clone();
    for k in 0..d {
        let p = rng.permutation(n);
        for (i, &src) in p.iter().enumerate() {
            out.data_mut()[i * d + k] = z.data()[src * d + k];
        }
    }
    out
}

impl TcDiscriminator {
    /// `layers` fully connected layers, `hidden` wide, one logit out; params
    /// live under `disc.` in `store`.
    pub fn new(
        store: &mut ParamStore,
        z_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut dims = vec![z_dim];
        dims.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
        dims.push(1);
        Ok(Self {
            net: Mlp::new(store, "disc", &dims, Activation::LeakyRelu(0.2), rng)?,
        })
    }

    /// `log D(z) / (1 − D(z))` per row, `[B]`.
    pub fn logits<'g>(&self, g: &'g Graph, store: &ParamStore, z: Var<'g>) -> Result<Var<'g>> {
        Ok(self.net.forward(g, store, z)?.sum_last())
    }

    /// Binary cross-entropy: joint samples labelled 1, permuted samples 0.
    pub fn loss<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        z: Var<'g>,
        z_perm: Var<'g>,
    ) -> Result<Var<'g>> {
        if z.shape()[0] < 2 {
            return Err(Error::contract(
                "total correlation needs a batch of at least 2",
            ));
        }
        let pos = self.logits(g, store, z)?.neg().softplus().mean();
        let neg = self.logits(g, store, z_perm)?.softplus().mean();
        pos.add(neg)
    }

    /// TC estimate (mean joint-sample logit) and discriminator loss, no update.
    pub fn estimate(&self, store: &ParamStore, z: &Tensor, rng: &mut Rng) -> Result<TcEstimate> {
        let g = Graph::new();
        let zp = permute_dims(z, rng);
        let d = self.loss(&g, store, g.constant(z.clone()), g.constant(zp))?;
        let tc = self.logits(&g, store, g.constant(z.clone()))?.mean();
        Ok(TcEstimate {
            tc_value: tc.item(),
            discriminator_loss: d.item(),
        })
    }

    /// Trains only the discriminator on a fixed sample set.
    pub fn fit(
        &self,
        store: &mut ParamStore,
        samples: &Tensor,
        epochs: usize,
        batch: usize,
        lr: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        let ids = store.ids_with_prefix("disc.");
        let mut opt = AdamState::new(AdamConfig::with_lr(lr), ids, store);
        for _ in 0..epochs {
            for idx in super::cossim::epoch_batches(rng, samples.rows(), batch) {
                let z = samples.gather_rows(&idx);
                let zp = permute_dims(&z, rng);
                let g = Graph::new();
                let l = self.loss(&g, store, g.constant(z), g.constant(zp))?;
                g.backward_into(l, store)?;
                drop(g);
                opt.step(store)?;
            }
        }
        Ok(())
    }

    /// Fraction of correctly classified joint and permuted rows.
    pub fn accuracy(&self, store: &ParamStore, z: &Tensor, rng: &mut Rng) -> Result<f64> {
        let g = Graph::new();
        let joint = self.logits(&g, store, g.constant(z.clone()))?.value();
        let perm = self
            .logits(&g, store, g.constant(permute_dims(z, rng)))?
            .value();
        let hits = joint.data().iter().filter(|&&l| l > 0.0).count()
            + perm.data().iter().filter(|&&l| l <= 0.0).count();
        Ok(hits as f64 / (2 * z.rows()) as f64)
    }
}
