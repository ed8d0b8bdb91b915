//! Trains the three baselines and RIVAE on Synth from the same seed and
//! prints one retrieval row per model.
//!
//!     cargo run --release --example baselines_synth -- [epochs] [seed]

use rivae::cli::{evaluate_model, train, ModelKind, RunConfig};
use rivae::datagen::{synth_generate, DatasetKind};

fn main() -> rivae::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(400, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    println!("{:12} R@1,R@5,R@10,Med-R", "model");
    for kind in [
        ModelKind::CossimLvm,
        ModelKind::BivaeOnV,
        ModelKind::Rbivae,
        ModelKind::Rivae,
    ] {
        let mut cfg = RunConfig::defaults(DatasetKind::Synth, kind).synth_calibrated();
        cfg.seed = seed;
        cfg.schedule.epochs = epochs;
        cfg.schedule.decay_epochs.retain(|&d| d < epochs);
        cfg.eval.trials = 3;
        // Cos-Sim-LVM's own schedule is the pretraining schedule
        if kind == ModelKind::CossimLvm {
            cfg.pretrain.embed_epochs = epochs / 2;
            cfg.pretrain.bottleneck_epochs = epochs / 2;
        }
        let data = synth_generate(&cfg.synth_spec())?;
        let t = std::time::Instant::now();
        let trained = train(&cfg, &data, None, |_, _| Ok(()))?;
        let rep = evaluate_model(&cfg, &trained.model, &data)?;
        println!(
            "{:12} {}   ({:.0}s)",
            kind.name(),
            rep.csv_row(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
