//! Trains a small RIVAE, stops at a learning-rate decay checkpoint, resumes
//! from the saved file and checks that the result is bit-identical to an
//! uninterrupted run.

use rivae::cli::{train, Checkpoint, CheckpointEvent, ModelKind, RunConfig};
use rivae::datagen::{synth_generate, DatasetKind};

fn main() -> rivae::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::defaults(DatasetKind::Synth, ModelKind::Rivae);
    cfg.data.n_train = 1000;
    cfg.data.n_test = 200;
    cfg.schedule.epochs = 12;
    cfg.schedule.joint_start = 4;
    cfg.schedule.decay_epochs = vec![6];
    cfg.pretrain.embed_epochs = 3;
    let data = synth_generate(&cfg.synth_spec())?;

    let mid = dir.path().join("epoch-6.ckpt");
    let full = train(&cfg, &data, None, |event, ckpt| {
        if event == CheckpointEvent::Decay(6) {
            ckpt.save(&mid)?;
        }
        Ok(())
    })?;

    let saved = Checkpoint::load(&mid)?;
    println!(
        "checkpoint: model {}, {} epochs done, {} parameter arrays, {} bytes",
        saved.model,
        saved.epoch,
        saved.params.len(),
        std::fs::metadata(&mid)?.len()
    );
    let resumed = train(&cfg, &data, Some(&saved), |_, _| Ok(()))?;
    let same = resumed.checkpoint.encode() == full.checkpoint.encode();
    println!("resumed run matches the uninterrupted run bit for bit: {same}");
    print!("{}", resumed.loss_csv);
    Ok(())
}
