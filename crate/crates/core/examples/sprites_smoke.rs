//! The Sprites smoke recipe (`configs/sprites_smoke.toml`): renders the
//! 6144 square/oval pairs, trains the conv embedders and RIVAE, and reports
//! retrieval with the wall-clock time. Takes several minutes on one core.
//!
//!     cargo run --release --example sprites_smoke -- [seed]

use std::time::Instant;

use rivae::cli::{evaluate_model, train, CheckpointEvent, RunConfig};
use rivae::datagen::sprites_generate;

fn main() -> rivae::Result<()> {
    let mut cfg = RunConfig::from_toml_overlay(include_str!("../configs/sprites_smoke.toml"), None, None)?;
    cfg.seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let t = Instant::now();
    let data = sprites_generate(&cfg.sprites_spec())?;
    println!("{} ({:.1}s)", data.summary(), t.elapsed().as_secs_f64());

    let trained = train(&cfg, &data, None, |event, ckpt| {
        if event == CheckpointEvent::Final {
            println!("trained {} epochs after {} alignment epochs ({:.0}s)", ckpt.epoch, cfg.pretrain.embed_epochs,
                t.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    let rep = evaluate_model(&cfg, &trained.model, &data)?;
    println!("R@1 {:.3}  R@5 {:.3}  R@10 {:.3}  Med-R {:.1}  ({:.0}s total)", rep.recall(1), rep.recall(5),
        rep.recall(10), rep.med_r, t.elapsed().as_secs_f64());
    Ok(())
}
