use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DatasetKind, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub shared_dim: usize,
    pub private_dim: usize,
    pub ambient_dim: usize,
    pub hidden: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            shared_dim: 2,
            private_dim: 1,
            ambient_dim: 50,
            hidden: 50,
            n_train: 10_000,
            n_test: 2_000,
            seed: 0,
        }
    }
}

/// Two-layer tanh net `(f^S, f^i) ↦ x_i`; weights `N(0, 1/fan_in)`, zero biases.
#[derive(Clone, Debug, PartialEq)]
struct Generator {
    w1: Vec<f64>,
    w2: Vec<f64>,
    input: usize,
    hidden: usize,
    output: usize,
}

impl Generator {
    fn draw(rng: &mut Rng, input: usize, hidden: usize, output: usize) -> Self {
        let mut w = |fan_in: usize, n: usize| {
            let s = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| s * rng.normal()).collect::<Vec<_>>()
        };
        Self {
            w1: w(input, input * hidden),
            w2: w(hidden, hidden * output),
            input,
            hidden,
            output,
        }
    }

    /// Plain loops keep the per-row result independent of batch layout.
    fn apply(&self, f: &[f64], out: &mut [f64]) {
        let mut h = vec![0.0; self.hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut a = 0.0;
            for (i, fi) in f.iter().enumerate() {
                a += fi * self.w1[i * self.hidden + j];
            }
            *hj = a.tanh();
        }
        for (k, o) in out.iter_mut().enumerate() {
            let mut a = 0.0;
            for (j, hj) in h.iter().enumerate() {
                a += hj * self.w2[j * self.output + k];
            }
            *o = a;
        }
    }
}

/// The fixed pair `(G1, G2)` of one Synth spec.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthGenerator {
    spec: SynthSpec,
    g1: Generator,
    g2: Generator,
}

impl SynthGenerator {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        if spec.shared_dim == 0 || spec.ambient_dim == 0 || spec.hidden == 0 {
            return Err(Error::Config(format!("degenerate synth spec {spec:?}")));
        }
        let root = Rng::new(spec.seed);
        let input = spec.shared_dim + spec.private_dim;
        Ok(Self {
            g1: Generator::draw(&mut root.derive(1), input, spec.hidden, spec.ambient_dim),
            g2: Generator::draw(&mut root.derive(2), input, spec.hidden, spec.ambient_dim),
            spec: spec.clone(),
        })
    }

    pub fn factor_dim(&self) -> usize {
        self.spec.shared_dim + 2 * self.spec.private_dim
    }

    /// Renders `(x1, x2)` from a factor row `[f^S, f^1, f^2]`.
    pub fn render(&self, f: &[f64], x1: &mut [f64], x2: &mut [f64]) {
        let (s, p) = (self.spec.shared_dim, self.spec.private_dim);
        let mut in1 = f[..s].to_vec();
        in1.extend_from_slice(&f[s..s + p]);
        let mut in2 = f[..s].to_vec();
        in2.extend_from_slice(&f[s + p..s + 2 * p]);
        self.g1.apply(&in1, x1);
        self.g2.apply(&in2, x2);
    }

    pub fn render_split(&self, factors: Tensor) -> Result<Split> {
        let (n, d) = (factors.rows(), self.spec.ambient_dim);
        let mut x1 = vec![0.0; n * d];
        let mut x2 = vec![0.0; n * d];
        for i in 0..n {
            self.render(
                factors.row(i),
                &mut x1[i * d..(i + 1) * d],
                &mut x2[i * d..(i + 1) * d],
            );
        }
        Split::new(
            Tensor::new(vec![n, d], x1)?,
            Tensor::new(vec![n, d], x2)?,
            Some(factors),
        )
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<PairedDataset> {
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Config(
            "synth needs non-empty train and test sets".into(),
        ));
    }
    let gen = SynthGenerator::new(spec)?;
    let root = Rng::new(spec.seed);
    let k = gen.factor_dim();
    let draw = |tag: u64, n: usize| gen.render_split(root.derive(tag).normal_tensor(&[n, k]));
    let (train, test) = (draw(3, spec.n_train)?, draw(4, spec.n_test)?);
    Ok(PairedDataset {
        kind: DatasetKind::Synth,
        seed: spec.seed,
        train: Arc::new(train),
        test: Arc::new(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_train: 10_000,
            n_test: 50,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn dims_match_layout() {
        let d = synth_generate(&small(1)).unwrap();
        assert_eq!(d.train.x1.shape(), &[10_000, 50]);
        assert_eq!(d.train.x2.shape(), &[10_000, 50]);
        assert_eq!(d.train.factors.as_ref().unwrap().shape(), &[10_000, 4]);
        assert_eq!(d.test.len(), 50);
    }

    #[test]
    fn factors_are_standard_normal() {
        let d = synth_generate(&small(2)).unwrap();
        let f = d.train.factors.as_ref().unwrap();
        for k in 0..4 {
            let col: Vec<f64> = (0..f.rows()).map(|i| f.row(i)[k]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 0.05 && (s - 1.0).abs() < 0.05, "col {k}: {m} {s}");
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(
            synth_generate(&small(3)).unwrap(),
            synth_generate(&small(3)).unwrap()
        );
        assert_ne!(
            synth_generate(&small(3)).unwrap(),
            synth_generate(&small(4)).unwrap()
        );
    }

    #[test]
    fn factors_round_trip() {
        let spec = small(5);
        let d = synth_generate(&spec).unwrap();
        let gen = SynthGenerator::new(&spec).unwrap();
        let again = gen.render_split(d.test.factors.clone().unwrap()).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&again.x1), bits(&d.test.x1));
        assert_eq!(bits(&again.x2), bits(&d.test.x2));
    }

    #[test]
    fn private_factor_only_moves_its_modality() {
        let gen = SynthGenerator::new(&small(6)).unwrap();
        let (mut a1, mut a2, mut b1, mut b2) =
            (vec![0.0; 50], vec![0.0; 50], vec![0.0; 50], vec![0.0; 50]);
        gen.render(&[0.3, -0.2, 1.0, 0.5], &mut a1, &mut a2);
        gen.render(&[0.3, -0.2, 1.0, -1.5], &mut b1, &mut b2);
        assert_eq!(a1, b1);
        assert_ne!(a2, b2);
    }
}
