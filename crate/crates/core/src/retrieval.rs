//! The cross-modal retrieval protocol: every item of a random search set is
//! queried with its partner `x1`, and the rank of the true `x2` is recorded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::Split;
use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};
use crate::rivae::RivaeModel;

/// How the latent is chosen from the query-conditional distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// one draw per query
    #[default]
    Sample,
    /// the distribution mean; deterministic
    Mean,
}

/// A model that can rank embedded `x2` candidates for `x1` queries.
pub trait Retriever {
    /// Changes whenever parameters change.
    fn params_version(&self) -> u64;

    /// Search-side embeddings `v2 = e2(x2)`.
    fn embed_targets(&self, x2: &Tensor) -> Result<Tensor>;

    /// `[queries, candidates]` relevance scores; larger is better.
    fn score(
        &self,
        x1: &Tensor,
        targets: &Tensor,
        mode: ScoreMode,
        rng: &mut Rng,
    ) -> Result<Tensor>;
}

/// Precomputed search-side embeddings of a subset of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchDb {
    pub items: Vec<usize>,
    pub embeddings: Tensor,
    version: u64,
}

impl SearchDb {
    pub fn build<R: Retriever + ?Sized>(
        model: &R,
        pool: &Tensor,
        items: Vec<usize>,
    ) -> Result<Self> {
        if items.is_empty() || items.iter().any(|&i| i >= pool.rows()) {
            return Err(Error::contract(
                "search db items must be non-empty and inside the pool",
            ));
        }
        let embeddings = model.embed_targets(&pool.gather_rows(&items))?;
        Ok(Self {
            items,
            embeddings,
            version: model.params_version(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_current<R: Retriever + ?Sized>(&self, model: &R) -> bool {
        self.version == model.params_version()
    }

    fn ensure_current<R: Retriever + ?Sized>(&self, model: &R) -> Result<()> {
        if self.is_current(model) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "search db embeddings are stale (built at parameter version {}, model is at {})",
                self.version,
                model.params_version()
            )))
        }
    }
}

/// Scores of a batch of queries against every db item.
pub fn score_queries<R: Retriever + ?Sized>(
    model: &R,
    x1: &Tensor,
    db: &SearchDb,
    mode: ScoreMode,
    rng: &mut Rng,
) -> Result<Tensor> {
    db.ensure_current(model)?;
    model.score(x1, &db.embeddings, mode, rng)
}

pub fn score_query<R: Retriever + ?Sized>(
    model: &R,
    x1: &[f64],
    db: &SearchDb,
    mode: ScoreMode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let q = Tensor::new(vec![1, x1.len()], x1.to_vec())?;
    Ok(score_queries(model, &q, db, mode, rng)?.into_data())
}

/// `1 + #{strictly better} + #{equal with lower index}`.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < truth))
        .count()
}

/// Median of integer ranks; the mean of the two middle values for even counts.
pub fn median_rank(ranks: &[usize]) -> f64 {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        0.5 * (r[n / 2 - 1] + r[n / 2]) as f64
    }
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `"R@1"`, `"R@5"`, `"R@10"`
    pub r_at: BTreeMap<String, f64>,
    #[serde(rename = "Med-R")]
    pub med_r: f64,
    pub trials: usize,
    pub db_size: usize,
    pub mode: ScoreMode,
    /// per trial, per query
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ranks: Vec<Vec<usize>>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at
            .get(&format!("R@{k}"))
            .copied()
            .unwrap_or(f64::NAN)
    }

    pub const CSV_HEADER: &'static str = "R@1,R@5,R@10,Med-R";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.2}",
            self.recall(1),
            self.recall(5),
            self.recall(10),
            self.med_r
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn without_ranks(mut self) -> Self {
        self.ranks.clear();
        self
    }
}

/// Runs `trials` independent rounds; round `t` draws its db and its scoring
/// noise from `rng.derive(t)`, so results do not depend on evaluation order.
pub fn evaluate<R: Retriever + ?Sized>(
    model: &R,
    test: &Split,
    db_size: usize,
    trials: usize,
    mode: ScoreMode,
    rng: &Rng,
) -> Result<RetrievalReport> {
    if db_size == 0 || db_size > test.len() || trials == 0 {
        return Err(Error::contract(format!(
            "cannot draw {trials} search sets of {db_size} from {} test items",
            test.len()
        )));
    }
    let mut all_ranks = Vec::with_capacity(trials);
    let mut recall = [0.0; RECALL_KS.len()];
    let mut med = 0.0;
    for t in 0..trials {
        let mut r = rng.derive(t as u64);
        let items = r.sample_indices(test.len(), db_size);
        let db = SearchDb::build(model, &test.x2, items.clone())?;
        let scores = score_queries(model, &test.x1.gather_rows(&items), &db, mode, &mut r)?;
        let ranks: Vec<usize> = (0..db_size).map(|q| rank_of(scores.row(q), q)).collect();
        for (acc, &k) in recall.iter_mut().zip(&RECALL_KS) {
            *acc += ranks.iter().filter(|&&x| x <= k).count() as f64 / db_size as f64;
        }
        med += median_rank(&ranks);
        all_ranks.push(ranks);
    }
    let n = trials as f64;
    Ok(RetrievalReport {
        r_at: RECALL_KS
            .iter()
            .zip(recall)
            .map(|(k, v)| (format!("R@{k}"), v / n))
            .collect(),
        med_r: med / n,
        trials,
        db_size,
        mode,
        ranks: all_ranks,
    })
}

impl Retriever for RivaeModel {
    fn params_version(&self) -> u64 {
        self.params.version()
    }

    fn embed_targets(&self, x2: &Tensor) -> Result<Tensor> {
        self.e2.embed_values(&self.params, x2, 256)
    }

    /// `log N(v2; f(z), η²I)` up to a constant, `z` from `P(z|e1(x1))`.
    fn score(
        &self,
        x1: &Tensor,
        targets: &Tensor,
        mode: ScoreMode,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        let prior = self.prior_of(x1)?;
        let z = latent(&prior.mean, &prior.std(), mode, rng);
        let f = self.decode_mean(&z)?;
        let inv = 1.0 / (2.0 * self.config.eta * self.config.eta);
        Ok(neg_sq_dist(&f, targets, inv))
    }
}

/// `mean` or `mean + std ⊙ N(0, I)`.
pub fn latent(mean: &Tensor, std: &Tensor, mode: ScoreMode, rng: &mut Rng) -> Tensor {
    match mode {
        ScoreMode::Mean => mean.clone(),
        ScoreMode::Sample => {
            let mut z = mean.clone();
            for (zi, s) in z.data_mut().iter_mut().zip(std.data()) {
                *zi += s * rng.normal();
            }
            z
        }
    }
}

/// `−scale · ‖a_i − b_j‖²` for every row pair.
pub fn neg_sq_dist(a: &Tensor, b: &Tensor, scale: f64) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let d: f64 = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            out.push(-scale * d);
        }
    }
    Tensor::new(vec![n, m], out).expect("score shape")
}
