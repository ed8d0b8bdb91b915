//! Latent traversal with retrieval, the factor-correlation table, D/C/I
//! disentanglement scores and the digit-transition overlap/coverage metrics.

use serde::{Deserialize, Serialize};

use crate::baselines::{cosine_table, CosSimLvm, RbiVae};
use crate::datagen::Split;
use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};
use crate::retrieval::{neg_sq_dist, Retriever, SearchDb};
use crate::rivae::{DiagGaussian, RivaeModel};

/// A retriever whose query side passes through an explicit latent `z`.
pub trait LatentRetriever: Retriever {
    fn z_dim(&self) -> usize;

    /// Query-conditional latent distribution. Deterministic encoders report
    /// their code as the mean and the spread of codes over the batch as std.
    fn query_latent(&self, x1: &Tensor) -> Result<DiagGaussian>;

    /// `[latents, candidates]` scores of embedded targets.
    fn score_latents(&self, z: &Tensor, targets: &Tensor) -> Result<Tensor>;
}

impl LatentRetriever for RivaeModel {
    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn query_latent(&self, x1: &Tensor) -> Result<DiagGaussian> {
        self.prior_of(x1)
    }

    fn score_latents(&self, z: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let f = self.decode_mean(z)?;
        Ok(neg_sq_dist(
            &f,
            targets,
            1.0 / (2.0 * self.config.eta * self.config.eta),
        ))
    }
}

impl LatentRetriever for RbiVae {
    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn query_latent(&self, x1: &Tensor) -> Result<DiagGaussian> {
        RbiVae::query_latent(self, x1)
    }

    fn score_latents(&self, z: &Tensor, targets: &Tensor) -> Result<Tensor> {
        self.target_log_density(z, targets)
    }
}

impl LatentRetriever for CosSimLvm {
    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn query_latent(&self, x1: &Tensor) -> Result<DiagGaussian> {
        let z = self.latents(x1)?;
        let (n, d) = (z.rows(), z.row_len());
        let mut var = vec![0.0; d];
        for k in 0..d {
            let col: Vec<f64> = (0..n).map(|i| z.row(i)[k]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            var[k] = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).max(1e-300);
        }
        let lv: Vec<f64> = (0..n).flat_map(|_| var.iter().map(|v| v.ln())).collect();
        DiagGaussian::new(z, Tensor::new(vec![n, d], lv)?)
    }

    fn score_latents(&self, z: &Tensor, targets: &Tensor) -> Result<Tensor> {
        Ok(cosine_table(&self.decode_latents(z)?, targets))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalSpec {
    pub n_points: usize,
    /// sweep `mean ± k_std · std` of the reference's latent distribution
    pub k_std: f64,
    pub n_refs: usize,
}

impl Default for TraversalSpec {
    fn default() -> Self {
        Self {
            n_points: 100,
            k_std: 10.0,
            n_refs: 20,
        }
    }
}

/// One dimension's sweep: latent values and the dataset index retrieved at each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub values: Vec<f64>,
    pub items: Vec<usize>,
}

/// `sweeps[reference][dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Traversal {
    pub references: Vec<usize>,
    pub sweeps: Vec<Vec<Sweep>>,
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in row.iter().enumerate() {
        if s > row[best] {
            best = j;
        }
    }
    best
}

/// Sweeps each latent dimension of every reference query, holding the
/// others at the reference mean, and records the top-1 db item per point.
/// `x1_refs` are the reference queries; `references` their dataset indices.
pub fn traverse_and_retrieve<M: LatentRetriever + ?Sized>(
    model: &M,
    x1_refs: &Tensor,
    references: Vec<usize>,
    spec: &TraversalSpec,
    db: &SearchDb,
) -> Result<Traversal> {
    if spec.n_points < 2 {
        return Err(Error::contract("a traversal needs at least 2 points"));
    }
    if !db.is_current(model) {
        return Err(Error::contract("search db embeddings are stale"));
    }
    let q = model.query_latent(x1_refs)?;
    let std = q.std();
    let d = model.z_dim();
    let mut sweeps = Vec::with_capacity(x1_refs.rows());
    for r in 0..x1_refs.rows() {
        let (mu, sd) = (q.mean.row(r), std.row(r));
        let mut per_dim = Vec::with_capacity(d);
        for j in 0..d {
            let (lo, hi) = (mu[j] - spec.k_std * sd[j], mu[j] + spec.k_std * sd[j]);
            let values: Vec<f64> = (0..spec.n_points)
                .map(|t| lo + (hi - lo) * t as f64 / (spec.n_points - 1) as f64)
                .collect();
            let mut z = Vec::with_capacity(spec.n_points * d);
            for &v in &values {
                let mut row = mu.to_vec();
                row[j] = v;
                z.extend(row);
            }
            let scores =
                model.score_latents(&Tensor::new(vec![spec.n_points, d], z)?, &db.embeddings)?;
            let items = (0..spec.n_points)
                .map(|t| db.items[argmax_first(scores.row(t))])
                .collect();
            per_dim.push(Sweep { values, items });
        }
        sweeps.push(per_dim);
    }
    Ok(Traversal { references, sweeps })
}

/// Top-1 item when the query sits at its latent mean.
pub fn top1_at_mean<M: LatentRetriever + ?Sized>(
    model: &M,
    x1: &Tensor,
    db: &SearchDb,
) -> Result<Vec<usize>> {
    let q = model.query_latent(x1)?;
    let s = model.score_latents(&q.mean, &db.embeddings)?;
    Ok((0..x1.rows())
        .map(|i| db.items[argmax_first(s.row(i))])
        .collect())
}

/// Pearson correlation; 0 when either sequence is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// `c[j][k]`: mean over references of `|corr(z_j sweep, factor k of the
/// retrieved items)|`; `d × K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub c: Vec<Vec<f64>>,
}

impl CorrelationTable {
    pub fn new(c: Vec<Vec<f64>>) -> Result<Self> {
        let k = c.first().map_or(0, Vec::len);
        if k == 0 || c.iter().any(|r| r.len() != k) {
            return Err(Error::contract(
                "correlation table must be a non-empty rectangle",
            ));
        }
        if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("correlation entries must lie in [0, 1]"));
        }
        Ok(Self { c })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.c.len(), self.c[0].len())
    }

    pub fn to_csv(&self, factor_names: &[&str]) -> String {
        let mut s = String::from("z");
        for k in 0..self.dims().1 {
            s.push(',');
            s.push_str(factor_names.get(k).copied().unwrap_or("f"));
        }
        s.push('\n');
        for (j, row) in self.c.iter().enumerate() {
            s.push_str(&format!("z{}", j + 1));
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn correlation_table(traversal: &Traversal, factors: &Tensor) -> Result<CorrelationTable> {
    let refs = traversal.sweeps.len();
    let d = traversal.sweeps.first().map_or(0, Vec::len);
    if refs == 0 || d == 0 {
        return Err(Error::contract("empty traversal"));
    }
    let k = factors.row_len();
    let mut c = vec![vec![0.0; k]; d];
    for per_ref in &traversal.sweeps {
        for (j, sweep) in per_ref.iter().enumerate() {
            if sweep.values.len() < 2 {
                return Err(Error::contract("a traversal needs at least 2 points"));
            }
            for (kk, cell) in c[j].iter_mut().enumerate() {
                let f: Vec<f64> = sweep.items.iter().map(|&i| factors.row(i)[kk]).collect();
                *cell += pearson(&sweep.values, &f).abs() / refs as f64;
            }
        }
    }
    for v in c.iter_mut().flatten() {
        *v = v.clamp(0.0, 1.0);
    }
    CorrelationTable::new(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DciScores {
    pub disentanglement: f64,
    pub completeness: f64,
    pub informativeness: f64,
    pub alpha: f64,
}

/// `1 − mean normalised entropy` of softmax(α·x) over each group.
fn one_minus_entropy(groups: &[Vec<f64>], alpha: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .map(|g| {
            if g.len() < 2 {
                return 0.0;
            }
            let m = g.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = g.iter().map(|&x| (alpha * (x - m)).exp()).collect();
            let z: f64 = w.iter().sum();
            let h: f64 = w
                .iter()
                .map(|&x| x / z)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            h / (g.len() as f64).ln()
        })
        .sum();
    1.0 - total / groups.len() as f64
}

pub fn dci(table: &CorrelationTable, alpha: f64) -> DciScores {
    let (d, k) = table.dims();
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|kk| (0..d).map(|j| table.c[j][kk]).collect())
        .collect();
    let informativeness = cols
        .iter()
        .map(|c| c.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .sum::<f64>()
        / k as f64;
    DciScores {
        disentanglement: one_minus_entropy(&table.c, alpha),
        completeness: one_minus_entropy(&cols, alpha),
        informativeness,
        alpha,
    }
}

pub const DIGITS: usize = 10;
pub const DIGIT_PAIRS: usize = DIGITS * (DIGITS - 1) / 2;

/// Column of unordered digit pair `{a, b}`, lexicographic over `a < b`.
pub fn pair_column(a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    a * (2 * DIGITS - a - 1) / 2 + (b - a - 1)
}

/// Indicator row of the unordered consecutive class changes in `seq`.
pub fn transition_row(seq: &[usize]) -> Vec<f64> {
    let mut row = vec![0.0; DIGIT_PAIRS];
    for w in seq.windows(2) {
        if w[0] != w[1] {
            row[pair_column(w[0], w[1])] = 1.0;
        }
    }
    row
}

/// `d × 45` transition indicators averaged over references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub t: Vec<Vec<f64>>,
}

impl TransitionTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z");
        for a in 0..DIGITS {
            for b in a + 1..DIGITS {
                s.push_str(&format!(",{a}-{b}"));
            }
        }
        s.push('\n');
        for (j, row) in self.t.iter().enumerate() {
            s.push_str(&format!("z{}", j + 1));
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// `labels[i]` is the digit of dataset item `i`.
pub fn transition_table(traversal: &Traversal, labels: &[usize]) -> Result<TransitionTable> {
    let refs = traversal.sweeps.len();
    let d = traversal.sweeps.first().map_or(0, Vec::len);
    if refs == 0 || d == 0 {
        return Err(Error::contract("empty traversal"));
    }
    let mut t = vec![vec![0.0; DIGIT_PAIRS]; d];
    for per_ref in &traversal.sweeps {
        for (j, sweep) in per_ref.iter().enumerate() {
            let seq: Vec<usize> = sweep.items.iter().map(|&i| labels[i]).collect();
            if seq.iter().any(|&l| l >= DIGITS) {
                return Err(Error::contract("digit labels must be 0..=9"));
            }
            for (acc, v) in t[j].iter_mut().zip(transition_row(&seq)) {
                *acc += v / refs as f64;
            }
        }
    }
    Ok(TransitionTable { t })
}

/// `(overlap, coverage)`; rows are normalised to distributions and all-zero
/// rows are dropped. With a single surviving row the overlap is 0.
pub fn overlap_coverage(table: &TransitionTable) -> Result<(f64, f64)> {
    let rows: Vec<Vec<f64>> = table
        .t
        .iter()
        .filter_map(|r| {
            let s: f64 = r.iter().sum();
            (s > 0.0).then(|| r.iter().map(|v| v / s).collect())
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::contract("transition table has no non-zero row"));
    }
    let n = rows.len();
    let cols = rows[0].len();
    let mut overlap = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            overlap += rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| a.min(*b))
                .sum::<f64>()
                / cols as f64;
            pairs += 1;
        }
    }
    let overlap = if pairs > 0 {
        overlap / pairs as f64
    } else {
        0.0
    };
    let union: Vec<f64> = (0..cols)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64)
        .collect();
    let h: f64 = union
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok((overlap, h / (cols as f64).ln()))
}

/// Everything the probe command reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub correlation: CorrelationTable,
    pub dci: DciScores,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transitions: Option<TransitionTable>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overlap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage: Option<f64>,
    pub traversal: Traversal,
}

/// Draws `n_refs` references and a `db_size` search set from `test`, runs
/// the traversal and computes every metric the factors allow. Digit
/// transitions are computed when the split has exactly one factor column.
pub fn probe<M: LatentRetriever + ?Sized>(
    model: &M,
    test: &Split,
    spec: &TraversalSpec,
    db_size: usize,
    alpha: f64,
    rng: &Rng,
) -> Result<ProbeReport> {
    let factors = test
        .factors
        .as_ref()
        .ok_or_else(|| Error::contract("probing needs ground-truth factors"))?;
    if db_size == 0 || db_size > test.len() || spec.n_refs == 0 || spec.n_refs > test.len() {
        return Err(Error::contract(
            "db size and reference count must fit the test split",
        ));
    }
    let items = rng.derive(1).sample_indices(test.len(), db_size);
    let db = SearchDb::build(model, &test.x2, items)?;
    let refs = rng.derive(2).sample_indices(test.len(), spec.n_refs);
    let traversal = traverse_and_retrieve(model, &test.x1.gather_rows(&refs), refs, spec, &db)?;
    let correlation = correlation_table(&traversal, factors)?;
    let dci = dci(&correlation, alpha);
    let (mut transitions, mut overlap, mut coverage) = (None, None, None);
    if factors.row_len() == 1 {
        let labels: Vec<usize> = factors.data().iter().map(|&v| v as usize).collect();
        let t = transition_table(&traversal, &labels)?;
        if let Ok((o, c)) = overlap_coverage(&t) {
            (overlap, coverage) = (Some(o), Some(c));
        }
        transitions = Some(t);
    }
    Ok(ProbeReport {
        correlation,
        dci,
        transitions,
        overlap,
        coverage,
        traversal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ConvSpec, EmbedSpec, EmbedderArch};
    use crate::numkit::Rng;
    use crate::rivae::RivaeConfig;
    use proptest::prelude::*;

    fn uniform_table(rng: &mut Rng, d: usize, k: usize) -> Vec<Vec<f64>> {
        (0..d)
            .map(|_| (0..k).map(|_| rng.uniform()).collect())
            .collect()
    }

    // Direct transcription: p = e^{αc} / Σ e^{αc}, no max shift.
    fn dci_oracle(c: &[Vec<f64>], alpha: f64) -> (f64, f64, f64) {
        let (d, k) = (c.len(), c[0].len());
        let ent = |xs: Vec<f64>| -> f64 {
            if xs.len() == 1 {
                return 0.0;
            }
            let z: f64 = xs.iter().map(|x| (alpha * x).exp()).sum();
            let mut h = 0.0;
            for x in &xs {
                let p = (alpha * x).exp() / z;
                h -= p * p.ln();
            }
            h / (xs.len() as f64).ln()
        };
        let mut dd = 0.0;
        for row in c {
            dd += 1.0 - ent(row.clone());
        }
        let (mut cc, mut ii) = (0.0, 0.0);
        for kk in 0..k {
            let col: Vec<f64> = (0..d).map(|j| c[j][kk]).collect();
            ii += col.iter().cloned().fold(0.0, f64::max);
            cc += 1.0 - ent(col);
        }
        (dd / d as f64, cc / k as f64, ii / k as f64)
    }

    fn overlap_oracle(t: &[Vec<f64>]) -> (f64, f64) {
        let mut rows = Vec::new();
        for r in t {
            let s: f64 = r.iter().sum();
            if s != 0.0 {
                rows.push(r.iter().map(|v| v / s).collect::<Vec<f64>>());
            }
        }
        let n = rows.len();
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let mut m = 0.0;
                    for k in 0..45 {
                        m += rows[i][k].min(rows[j][k]);
                    }
                    acc += m / 45.0;
                    count += 1.0;
                }
            }
        }
        let mut h = 0.0;
        for k in 0..45 {
            let p: f64 = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        (if count > 0.0 { acc / count } else { 0.0 }, h / 45f64.ln())
    }

    fn sparse_transitions(rng: &mut Rng, d: usize) -> Vec<Vec<f64>> {
        (0..d)
            .map(|_| {
                (0..45)
                    .map(|_| {
                        if rng.uniform() < 0.2 {
                            rng.uniform()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn dci_matches_brute_force() {
        let mut rng = Rng::new(11);
        for t in 0..100 {
            let (d, k) = (1 + t % 5, 1 + (t / 5) % 4);
            let c = uniform_table(&mut rng, d, k);
            let got = dci(&CorrelationTable::new(c.clone()).unwrap(), 10.0);
            let (dd, cc, ii) = dci_oracle(&c, 10.0);
            assert!((got.disentanglement - dd).abs() < 1e-12, "{t}");
            assert!((got.completeness - cc).abs() < 1e-12, "{t}");
            assert!((got.informativeness - ii).abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn overlap_coverage_matches_brute_force() {
        let mut rng = Rng::new(12);
        for t in 0..100 {
            let mut rows = sparse_transitions(&mut rng, 1 + t % 6);
            rows[0][t % 45] += 0.5; // keep at least one row non-zero
            let (o, c) = overlap_coverage(&TransitionTable { t: rows.clone() }).unwrap();
            let (oo, co) = overlap_oracle(&rows);
            assert!((o - oo).abs() < 1e-12 && (c - co).abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn dci_extremes() {
        let eye: Vec<Vec<f64>> = (0..3)
            .map(|j| (0..3).map(|k| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = dci(&CorrelationTable::new(eye).unwrap(), 1000.0);
        assert!(s.disentanglement > 0.999 && s.completeness > 0.999);
        assert_eq!(s.informativeness, 1.0);
        let flat = dci(&CorrelationTable::new(vec![vec![0.4; 3]; 2]).unwrap(), 10.0);
        assert!(flat.disentanglement.abs() < 1e-15 && flat.completeness.abs() < 1e-15);
        // a single factor leaves nothing to spread over
        let one = dci(
            &CorrelationTable::new(vec![vec![0.3], vec![0.9]]).unwrap(),
            10.0,
        );
        assert_eq!(one.disentanglement, 1.0);
        assert!(CorrelationTable::new(vec![vec![1.5]]).is_err());
    }

    #[test]
    fn pair_columns_are_lexicographic() {
        let mut seen = Vec::new();
        for a in 0..10 {
            for b in a + 1..10 {
                seen.push(pair_column(a, b));
                assert_eq!(pair_column(a, b), pair_column(b, a));
            }
        }
        assert_eq!(seen, (0..45).collect::<Vec<_>>());
    }

    #[test]
    fn transition_unit_case() {
        let row = transition_row(&[2, 2, 2, 3, 8, 8, 9, 3, 2, 2, 2]);
        let marked: Vec<usize> = (0..45).filter(|&k| row[k] != 0.0).collect();
        let mut want = vec![
            pair_column(2, 3),
            pair_column(3, 8),
            pair_column(8, 9),
            pair_column(3, 9),
        ];
        want.sort();
        assert_eq!(marked, want);
        assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn overlap_edge_cases() {
        let mut one_hot = vec![0.0; 45];
        one_hot[7] = 1.0;
        let (o, c) = overlap_coverage(&TransitionTable {
            t: vec![one_hot.clone(), one_hot],
        })
        .unwrap();
        assert!((o - 1.0 / 45.0).abs() < 1e-15 && c == 0.0);
        let full = overlap_coverage(&TransitionTable {
            t: vec![vec![1.0; 45]],
        })
        .unwrap();
        assert!((full.1 - 1.0).abs() < 1e-12);
        assert!(overlap_coverage(&TransitionTable {
            t: vec![vec![0.0; 45]; 3]
        })
        .is_err());
    }

    #[test]
    fn pearson_handles_constants() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 1.0, -1.0]) + 1.0).abs() < 1e-12);
    }

    fn traversal_of(items: Vec<Vec<usize>>) -> Traversal {
        let sweeps = vec![items
            .into_iter()
            .map(|it| Sweep {
                values: (0..it.len()).map(|t| t as f64).collect(),
                items: it,
            })
            .collect()];
        Traversal {
            references: vec![0],
            sweeps,
        }
    }

    #[test]
    fn correlation_table_reads_factors_of_retrieved_items() {
        // factor 0 rises with the item index, factor 1 is constant
        let f = Tensor::new(vec![4, 2], vec![0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0]).unwrap();
        let t =
            correlation_table(&traversal_of(vec![vec![0, 1, 2, 3], vec![3, 3, 3, 3]]), &f).unwrap();
        assert!((t.c[0][0] - 1.0).abs() < 1e-12);
        assert_eq!((t.c[0][1], t.c[1][0], t.c[1][1]), (0.0, 0.0, 0.0));
        assert!(correlation_table(&traversal_of(vec![vec![2]]), &f).is_err());
    }

    #[test]
    fn traversal_spans_the_requested_range() {
        let spec = EmbedSpec {
            arch: EmbedderArch::Synth,
            x1_dim: 6,
            x2_dim: 6,
            v_dim: 3,
            conv: ConvSpec::default(),
        };
        let m = RivaeModel::new(RivaeConfig::new(3, 2), &spec, &Rng::new(0)).unwrap();
        let pool = Rng::new(1).normal_tensor(&[30, 6]);
        let db = SearchDb::build(&m, &pool, (10..30).collect()).unwrap();
        let ts = TraversalSpec {
            n_points: 7,
            k_std: 2.0,
            n_refs: 2,
        };
        let refs = pool.gather_rows(&[0, 1]);
        let tr = traverse_and_retrieve(&m, &refs, vec![0, 1], &ts, &db).unwrap();
        let prior = m.prior_of(&refs).unwrap();
        let sd = prior.std();
        for r in 0..2 {
            assert_eq!(tr.sweeps[r].len(), 2);
            for j in 0..2 {
                let sw = &tr.sweeps[r][j];
                assert_eq!(sw.values.len(), 7);
                assert!((sw.values[0] - (prior.mean.row(r)[j] - 2.0 * sd.row(r)[j])).abs() < 1e-12);
                assert!((sw.values[6] - (prior.mean.row(r)[j] + 2.0 * sd.row(r)[j])).abs() < 1e-12);
                assert!((sw.values[3] - prior.mean.row(r)[j]).abs() < 1e-12);
                assert!(sw.items.iter().all(|i| (10..30).contains(i)));
            }
        }
        // the midpoint is the unperturbed mean, so it agrees with top1_at_mean
        let top = top1_at_mean(&m, &refs, &db).unwrap();
        assert_eq!(tr.sweeps[0][0].items[3], top[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dci_is_permutation_invariant(seed in 0u64..10_000, d in 1usize..6, k in 1usize..5, rot in 0usize..5) {
            let mut rng = Rng::new(seed);
            let c = uniform_table(&mut rng, d, k);
            let a = dci(&CorrelationTable::new(c.clone()).unwrap(), 10.0);
            let mut rows = c.clone();
            rows.rotate_left(rot % d);
            for r in rows.iter_mut() {
                r.rotate_right(rot % k);
            }
            let b = dci(&CorrelationTable::new(rows).unwrap(), 10.0);
            prop_assert!((a.disentanglement - b.disentanglement).abs() < 1e-12);
            prop_assert!((a.completeness - b.completeness).abs() < 1e-12);
            prop_assert!((a.informativeness - b.informativeness).abs() < 1e-12);
        }

        #[test]
        fn overlap_is_permutation_invariant(seed in 0u64..10_000, d in 1usize..6, rot in 0usize..45) {
            let mut rng = Rng::new(seed);
            let mut t = sparse_transitions(&mut rng, d);
            t[0][0] = 1.0;
            let a = overlap_coverage(&TransitionTable { t: t.clone() }).unwrap();
            t.rotate_left(rot % d);
            for r in t.iter_mut() {
                r.rotate_right(rot);
            }
            let b = overlap_coverage(&TransitionTable { t }).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
            prop_assert!((0.0..=1.0 / 45.0 + 1e-15).contains(&a.0) && (0.0..=1.0 + 1e-12).contains(&a.1));
        }
    }
}
