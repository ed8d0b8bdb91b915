//! Closed-form diagonal-Gaussian KL against a Monte-Carlo estimate, and the
//! reparameterised sample that the ELBO differentiates through.

use rivae::numkit::{Graph, Rng, Tensor};
use rivae::rivae::{gaussian_log_prob, kl_diag, GaussianVar};

fn main() -> rivae::Result<()> {
    let mut rng = Rng::new(3);
    let g = Graph::new();
    let t = |v: Vec<f64>| g.constant(Tensor::new(vec![3], v).unwrap());
    let q = GaussianVar {
        mean: t(vec![0.3, -1.0, 2.0]),
        log_var: t(vec![-0.5, 0.2, 0.0]),
    };
    let p = GaussianVar {
        mean: t(vec![0.0, 0.0, 1.5]),
        log_var: t(vec![0.0, 0.4, -0.3]),
    };
    let closed = kl_diag(&q, &p)?.item();

    let n = 200_000;
    let eps = rng.normal_tensor(&[n, 3]);
    let qn = GaussianVar {
        mean: q.mean.broadcast_rows(n),
        log_var: q.log_var.broadcast_rows(n),
    };
    let pn = GaussianVar {
        mean: p.mean.broadcast_rows(n),
        log_var: p.log_var.broadcast_rows(n),
    };
    let z = qn.sample(&eps)?;
    let mc = gaussian_log_prob(&qn, z)?
        .sub(gaussian_log_prob(&pn, z)?)?
        .mean()
        .item();
    println!("KL(q‖p) closed form {closed:.5}   Monte Carlo ({n} draws) {mc:.5}");
    Ok(())
}
