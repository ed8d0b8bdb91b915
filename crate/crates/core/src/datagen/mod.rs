//! Paired bi-modal datasets with ground-truth factors, and their on-disk
//! container.

mod container;
mod mnist;
mod sprites;
mod synth;

pub use container::{load_dataset, save_dataset, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use mnist::{
    read_idx_images, read_idx_labels, split_mnist_load, IdxImages, SplitMnistSpec, IDX_FILES,
};
pub use sprites::{sprites_generate, SpritesSpec, SPRITE_SIDE};
pub use synth::{synth_generate, SynthGenerator, SynthSpec};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synth,
    Sprites,
    SplitMnist,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [
        DatasetKind::Synth,
        DatasetKind::Sprites,
        DatasetKind::SplitMnist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::Sprites => "sprites",
            DatasetKind::SplitMnist => "split_mnist",
        }
    }

    pub fn factor_names(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Synth => &["fS1", "fS2", "f1", "f2"],
            DatasetKind::Sprites => &["x", "y", "scale"],
            DatasetKind::SplitMnist => &["digit"],
        }
    }

    fn tag(self) -> u8 {
        match self {
            DatasetKind::Synth => 1,
            DatasetKind::Sprites => 2,
            DatasetKind::SplitMnist => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == t)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset `{s}` (synth | sprites | split_mnist)"
                ))
            })
    }
}

/// Aligned rows `(x1[i], x2[i])` with optional factors `[n, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x1: Tensor,
    pub x2: Tensor,
    pub factors: Option<Tensor>,
}

impl Split {
    pub fn new(x1: Tensor, x2: Tensor, factors: Option<Tensor>) -> Result<Self> {
        let n = x1.rows();
        if x2.rows() != n || factors.as_ref().is_some_and(|f| f.rows() != n) {
            return Err(Error::dim("paired_split", x1.shape(), x2.shape()));
        }
        Ok(Self { x1, x2, factors })
    }

    pub fn len(&self) -> usize {
        self.x1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Factor column `k` of row `i`.
    pub fn factor(&self, i: usize, k: usize) -> Option<f64> {
        self.factors.as_ref().map(|f| f.row(i)[k])
    }
}

/// A generated or ingested dataset. `train` and `test` may share storage.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub train: Arc<Split>,
    pub test: Arc<Split>,
}

impl PairedDataset {
    pub fn test_is_train(&self) -> bool {
        Arc::ptr_eq(&self.train, &self.test)
    }

    pub fn x1_dim(&self) -> usize {
        self.train.x1.row_len()
    }

    pub fn x2_dim(&self) -> usize {
        self.train.x2.row_len()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} train / {} test pairs{}, dims x1={} x2={}, factors={}, seed={}",
            self.kind,
            self.train.len(),
            self.test.len(),
            if self.test_is_train() {
                " (test = train)"
            } else {
                ""
            },
            self.x1_dim(),
            self.x2_dim(),
            self.train.factors.as_ref().map_or(0, |f| f.row_len()),
            self.seed
        )
    }
}

impl PartialEq for PairedDataset {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.seed == other.seed
            && self.test_is_train() == other.test_is_train()
            && self.train == other.train
            && self.test == other.test
    }
}
