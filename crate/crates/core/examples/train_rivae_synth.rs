//! Trains RIVAE on Synth with the library API directly: Cos-Sim embedder
//! warm start, stage 1 on frozen embeddings, then joint training. Prints
//! the loss terms and retrieval quality as training goes.
//!
//!     cargo run --release --example train_rivae_synth -- [epochs] [seed]

use rivae::cli::{evaluate_model, pretrain_cossim, ModelKind, RunConfig};
use rivae::datagen::{synth_generate, DatasetKind};
use rivae::numkit::Rng;
use rivae::rivae::{RivaeModel, Trainer};

fn main() -> rivae::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(600, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let mut cfg = RunConfig::defaults(DatasetKind::Synth, ModelKind::Rivae).synth_calibrated();
    cfg.seed = seed;
    cfg.schedule.epochs = epochs;
    cfg.schedule.decay_epochs.retain(|&d| d < epochs);
    cfg.eval.trials = 3;
    let data = synth_generate(&cfg.synth_spec())?;
    println!("{}", data.summary());

    let spec = cfg.embed_spec(data.x1_dim(), data.x2_dim());
    let mut model = RivaeModel::new(cfg.rivae_config(), &spec, &Rng::new(seed))?;
    let (cs, _) = pretrain_cossim(&cfg, &data, false)?;
    model.params.copy_prefix_from(&cs.params, "e1.")?;
    model.params.copy_prefix_from(&cs.params, "e2.")?;

    let rng = Rng::new(seed).derive(9);
    let mut t = Trainer::new(
        model,
        &data.train.x1,
        &data.train.x2,
        cfg.schedule.clone(),
        cfg.loss,
        rng,
    )?;
    let every = (epochs / 6).max(1);
    println!("epoch  stage   L_LB        L_Retr     L_Reg      c         R@1/R@5/R@10/Med-R");
    t.run(|tr, row| {
        if row.epoch % every == 0 || tr.finished() {
            let rep = evaluate_model(&cfg, &tr.model, &data)?;
            println!(
                "{:5}  {:?}  {:10.3} {:10.4} {:10.6} {:.5}   {}",
                row.epoch,
                row.stage,
                row.lb,
                row.retr,
                row.reg,
                tr.model.reg_c(),
                rep.csv_row()
            );
        }
        Ok(())
    })?;
    Ok(())
}
