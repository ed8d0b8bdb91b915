//! Builds the Synth and Sprites datasets, writes them to the binary
//! container and reads them back. Pass a directory with the four MNIST IDX
//! files to also build Split-MNIST.
//!
//!     cargo run --release --example generate_datasets -- [idx_dir]

use std::path::PathBuf;

use rivae::datagen::{
    load_dataset, save_dataset, split_mnist_load, sprites_generate, synth_generate, SplitMnistSpec,
    SpritesSpec, SynthSpec,
};

fn main() -> rivae::Result<()> {
    let dir = tempfile::tempdir()?;
    let synth = synth_generate(&SynthSpec::default())?;
    let sprites = sprites_generate(&SpritesSpec::default())?;
    for d in [&synth, &sprites] {
        let path = dir.path().join(format!("{}.rivd", d.kind));
        save_dataset(d, &path)?;
        let back = load_dataset(&path)?;
        assert_eq!(&back, d);
        println!(
            "{}  ({} bytes on disk)",
            back.summary(),
            std::fs::metadata(&path)?.len()
        );
    }

    // one Synth pair: shared factors drive both modalities, each private factor only its own
    let f = synth.train.factors.as_ref().expect("synth has factors");
    println!("synth pair 0 factors [fS1 fS2 f1 f2] = {:.3?}", f.row(0));
    println!("  x1[..5] = {:.3?}", &synth.train.x1.row(0)[..5]);
    println!("  x2[..5] = {:.3?}", &synth.train.x2.row(0)[..5]);

    let f = sprites.train.factors.as_ref().expect("sprites has factors");
    println!(
        "sprite 777 (x, y, scale) = {:?}, square px {}, oval px {}",
        f.row(777),
        sprites.train.x1.row(777).iter().sum::<f64>(),
        sprites.train.x2.row(777).iter().sum::<f64>()
    );

    if let Some(idx_dir) = std::env::args().nth(1).map(PathBuf::from) {
        let mnist = split_mnist_load(&SplitMnistSpec { idx_dir })?;
        println!("{}", mnist.summary());
    }
    Ok(())
}
