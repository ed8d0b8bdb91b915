//! The embedder-regulariser ablation through the command-line entry point:
//! `generate` then `ablate`, which trains with the configured λ_Reg and with
//! λ_Reg = 0 from the same data and seed and writes `ablation.csv`.
//!
//!     cargo run --release --example ablation -- [synth|sprites] [out_dir]
//!
//! Synth uses a short schedule; Sprites uses the smoke recipe (twice, so
//! expect roughly twenty minutes).

use rivae::cli::main_with_args;

const SYNTH_SHORT: &str = r#"
dataset = "synth"
[loss]
retr_latent = "prior"
[schedule]
learning_rate = 0.001
epochs = 400
decay_epochs = [200]
"#;

fn main() {
    let dataset = std::env::args().nth(1).unwrap_or_else(|| "synth".into());
    let out = std::env::args().nth(2).map(std::path::PathBuf::from).unwrap_or_else(|| {
        std::env::temp_dir().join("rivae-ablation")
    });
    let text = match dataset.as_str() {
        "sprites" => include_str!("../configs/sprites_smoke.toml"),
        _ => SYNTH_SHORT,
    };
    std::fs::create_dir_all(&out).expect("out dir");
    let cfg = out.join("ablation.toml");
    std::fs::write(&cfg, text).expect("write config");
    for verb in ["generate", "ablate"] {
        let code = main_with_args(["rivae", verb, "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
        if code != 0 {
            std::process::exit(code);
        }
    }
}
