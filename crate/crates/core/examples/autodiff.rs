//! Reverse-mode gradients on a small tape, a finite-difference cross-check,
//! and Adam minimising a quadratic bowl.

use rivae::numkit::{AdamConfig, AdamState, Graph, ParamStore, Rng, Tensor};

fn main() -> rivae::Result<()> {
    let mut rng = Rng::new(0);
    let x = rng.normal_tensor(&[4, 3]);
    let w = rng.normal_tensor(&[3, 2]);

    // loss = Σ tanh(x·w)²
    let loss_of = |w: &Tensor| -> rivae::Result<f64> {
        let g = Graph::new();
        Ok(g.constant(x.clone())
            .matmul(g.constant(w.clone()))?
            .tanh()
            .square()
            .sum()
            .item())
    };
    let g = Graph::new();
    let wv = g.leaf(w.clone().with_requires_grad(true));
    let loss = g.constant(x.clone()).matmul(wv)?.tanh().square().sum();
    let grads = g.backward(loss)?;
    let analytic = grads.wrt(wv).expect("leaf gradient").to_vec();

    let h = 1e-6;
    for (i, a) in analytic.iter().enumerate() {
        let (mut p, mut m) = (w.clone(), w.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let fd = (loss_of(&p)? - loss_of(&m)?) / (2.0 * h);
        println!("dL/dw[{i}] autodiff {a:+.8}  central difference {fd:+.8}");
    }

    // Adam on ½‖θ − t‖²
    let target = [1.0, -2.0, 0.5];
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::zeros(&[3]).with_requires_grad(true));
    let mut opt = AdamState::new(AdamConfig::with_lr(0.05), vec![id], &store);
    for step in 0..=500 {
        let g = Graph::new();
        let d = g
            .param(&store, id)
            .sub(g.constant(Tensor::new(vec![3], target.to_vec())?))?;
        let loss = d.square().sum().scale(0.5);
        if step % 100 == 0 {
            println!("step {step:3}  loss {:.3e}", loss.item());
        }
        g.backward_into(loss, &mut store)?;
        drop(g);
        opt.step(&mut store)?;
    }
    println!("theta = {:?}", store.get(id).data());
    Ok(())
}
