//! Command-line front end: `generate`, `train`, `eval`, `probe`, `ablate`.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence.

mod checkpoint;
mod config;
mod session;

pub use checkpoint::{Checkpoint, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    DataConfig, EvalConfig, ModelConfig, ModelKind, PathConfig, PretrainConfig, ProbeConfig,
    RbiConfig, RunConfig,
};
pub use session::{
    echo_json, evaluate_model, pretrain_cossim, probe_model, probe_split, restore_model, train,
    AnyModel, CheckpointEvent, Trained,
};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::datagen::{
    load_dataset, save_dataset, split_mnist_load, sprites_generate, synth_generate,
};
use crate::datagen::{DatasetKind, PairedDataset, SplitMnistSpec};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Format { .. }
        | Error::Io(_)
        | Error::Unsupported { .. }
        | Error::Dimension { .. } => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "rivae",
    version,
    about = "Retrieval latent-variable models on paired bi-modal data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a dataset container and its factor table
    Generate(Flags),
    /// Two-stage training; checkpoints at decay epochs and at the end
    Train(Flags),
    /// Retrieval evaluation of a checkpoint
    Eval(Flags),
    /// Latent traversal, correlation table and D/C/I or digit-transition metrics
    Probe(Flags),
    /// Train with and without the embedder regulariser and compare
    Ablate(Flags),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// TOML file overlaying the per-dataset defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// synth | sprites | split_mnist
    #[arg(long)]
    pub dataset: Option<String>,
    /// rivae | rbivae | bivae_on_v | cossim_lvm
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// set the embedder regulariser weight to 0
    #[arg(long)]
    pub no_reg: bool,
    #[arg(long)]
    pub db_size: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// directory holding the four MNIST IDX files
    #[arg(long)]
    pub idx_dir: Option<PathBuf>,
    /// checkpoint to evaluate / probe, or to resume training from
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Flags {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let dataset = self
            .dataset
            .as_deref()
            .map(str::parse::<DatasetKind>)
            .transpose()?;
        let model = self
            .model
            .as_deref()
            .map(str::parse::<ModelKind>)
            .transpose()?;
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, dataset, model)?,
            None => RunConfig::from_toml_overlay("", dataset, model)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.no_reg {
            cfg.loss.lambda_reg = 0.0;
        }
        if let Some(n) = self.db_size {
            cfg.eval.db_size = n;
        }
        if let Some(n) = self.trials {
            cfg.eval.trials = n;
        }
        if let Some(d) = &self.out_dir {
            cfg.paths.out_dir = d.clone();
        }
        if let Some(d) = &self.idx_dir {
            cfg.data.idx_dir = Some(d.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.paths.checkpoint = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Errors go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Generate(f) => cmd_generate(&f.resolve()?).map(|_| ()),
        Command::Train(f) => cmd_train(&f.resolve()?).map(|_| ()),
        Command::Eval(f) => cmd_eval(&f.resolve()?).map(|_| ()),
        Command::Probe(f) => cmd_probe(&f.resolve()?).map(|_| ()),
        Command::Ablate(f) => cmd_ablate(&f.resolve()?).map(|_| ()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn factor_csv(d: &PairedDataset) -> String {
    let names = d.kind.factor_names();
    let mut s = String::from("split,index");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    let splits: Vec<(&str, _)> = if d.test_is_train() {
        vec![("all", &d.train)]
    } else {
        vec![("train", &d.train), ("test", &d.test)]
    };
    for (name, split) in splits {
        if let Some(f) = &split.factors {
            for i in 0..f.rows() {
                s.push_str(&format!("{name},{i}"));
                for v in f.row(i) {
                    s.push_str(&format!(",{v}"));
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Builds the configured dataset, writes the container and `factors.csv`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PairedDataset> {
    let d = match cfg.dataset {
        DatasetKind::Synth => synth_generate(&cfg.synth_spec())?,
        DatasetKind::Sprites => sprites_generate(&cfg.sprites_spec())?,
        DatasetKind::SplitMnist => {
            let dir = cfg.data.idx_dir.clone().ok_or_else(|| {
                Error::Config("split_mnist needs --idx-dir with the MNIST IDX files".into())
            })?;
            split_mnist_load(&SplitMnistSpec { idx_dir: dir })?
        }
    };
    let path = cfg.data_file();
    save_dataset(&d, &path)?;
    write(&path.with_extension("factors.csv"), factor_csv(&d))?;
    println!("{}", d.summary());
    println!("wrote {}", path.display());
    Ok(d)
}

fn load_data(cfg: &RunConfig) -> Result<PairedDataset> {
    let path = cfg.data_file();
    let d = load_dataset(&path)?;
    if d.kind != cfg.dataset {
        return Err(Error::contract(format!(
            "{} holds `{}`, config names `{}`",
            path.display(),
            d.kind,
            cfg.dataset
        )));
    }
    Ok(d)
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .out_dir
        .join(format!("{}-{}-{}", cfg.dataset, cfg.model, cfg.seed))
}

/// Trains into `<out_dir>/<dataset>-<model>-<seed>/`: `epoch-<n>.ckpt` at
/// decay epochs, `final.ckpt`, `loss.csv` and `config.toml`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Trained> {
    let data = load_data(cfg)?;
    train_into(cfg, &data, &run_dir(cfg))
}

fn train_into(cfg: &RunConfig, data: &PairedDataset, dir: &Path) -> Result<Trained> {
    let resume = cfg
        .paths
        .checkpoint
        .as_deref()
        .map(Checkpoint::load)
        .transpose()?;
    write(&dir.join("config.toml"), cfg.to_toml())?;
    let result = train(cfg, data, resume.as_ref(), |event, ckpt| {
        let path = match event {
            CheckpointEvent::Decay(e) => dir.join(format!("epoch-{e}.ckpt")),
            CheckpointEvent::Final => dir.join("final.ckpt"),
            CheckpointEvent::LastGood => dir.join("last-good.ckpt"),
        };
        ckpt.save(&path)?;
        if event == CheckpointEvent::LastGood {
            eprintln!(
                "training diverged; last good checkpoint: {}",
                path.display()
            );
        }
        Ok(())
    })?;
    write(&dir.join("loss.csv"), &result.loss_csv)?;
    println!(
        "trained {} on {}: {}",
        cfg.model,
        cfg.dataset,
        dir.join("final.ckpt").display()
    );
    Ok(result)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| run_dir(cfg).join("final.ckpt"))
}

#[derive(Serialize)]
struct EvalBody<'a> {
    checkpoint: String,
    report: &'a RetrievalReport,
}

/// Writes `eval.json` (with the effective config) and `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<RetrievalReport> {
    let data = load_data(cfg)?;
    let ckpt_path = checkpoint_path(cfg);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = restore_model(cfg, &data, &ckpt)?;
    let report = evaluate_model(cfg, &model, &data)?;
    let dir = run_dir(cfg);
    let body = EvalBody {
        checkpoint: ckpt_path.display().to_string(),
        report: &report,
    };
    write(&dir.join("eval.json"), echo_json(cfg, &body))?;
    write(&dir.join("eval.csv"), report.to_csv())?;
    println!("{}", crate::retrieval::RetrievalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(report)
}

/// Writes `probe/`: `correlation.csv`, `dci.json` or `transitions.csv` +
/// `overlap.json`, and `traversal.json` with per-dimension retrieved items.
pub fn cmd_probe(cfg: &RunConfig) -> Result<crate::probe::ProbeReport> {
    let data = load_data(cfg)?;
    let ckpt = Checkpoint::load(&checkpoint_path(cfg))?;
    let model = restore_model(cfg, &data, &ckpt)?;
    let report = probe_model(cfg, &model, &data)?;
    let dir = run_dir(cfg).join("probe");
    let names: Vec<&str> = if cfg.probe.factor_columns.is_empty() {
        data.kind.factor_names().to_vec()
    } else {
        cfg.probe
            .factor_columns
            .iter()
            .map(|&c| data.kind.factor_names().get(c).copied().unwrap_or("f"))
            .collect()
    };
    write(
        &dir.join("correlation.csv"),
        report.correlation.to_csv(&names),
    )?;
    write(
        &dir.join("traversal.json"),
        serde_json::to_string(&report.traversal).expect("serialises"),
    )?;
    match (&report.transitions, report.overlap, report.coverage) {
        (Some(t), overlap, coverage) => {
            write(&dir.join("transitions.csv"), t.to_csv())?;
            #[derive(Serialize)]
            struct Oc {
                overlap: Option<f64>,
                coverage: Option<f64>,
            }
            write(
                &dir.join("overlap.json"),
                echo_json(cfg, &Oc { overlap, coverage }),
            )?;
            println!("overlap {overlap:?} coverage {coverage:?}");
        }
        _ => {
            write(&dir.join("dci.json"), echo_json(cfg, &report.dci))?;
            let s = report.dci;
            println!(
                "D {:.4} C {:.4} I {:.4}",
                s.disentanglement, s.completeness, s.informativeness
            );
        }
    }
    Ok(report)
}

/// Side-by-side retrieval with and without the embedder regulariser.
#[derive(Clone, Debug, Serialize)]
pub struct Ablation {
    pub with_reg: RetrievalReport,
    pub without_reg: RetrievalReport,
}

impl Ablation {
    pub fn to_csv(&self) -> String {
        format!(
            "Reg,{}\nYes,{}\nNo,{}\n",
            RetrievalReport::CSV_HEADER,
            self.with_reg.csv_row(),
            self.without_reg.csv_row()
        )
    }
}

/// Trains twice from the same dataset file and seed, with the configured
/// λ_Reg and with λ_Reg = 0, and writes `ablation.{csv,json}`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Ablation> {
    let data = load_data(cfg)?;
    let dir = run_dir(cfg).join("ablate");
    let mut base = cfg.clone();
    base.paths.checkpoint = None;
    let with = train_into(&base, &data, &dir.join("reg"))?;
    let without_cfg = base.clone().without_reg();
    let without = train_into(&without_cfg, &data, &dir.join("no_reg"))?;
    let ab = Ablation {
        with_reg: evaluate_model(&base, &with.model, &data)?.without_ranks(),
        without_reg: evaluate_model(&without_cfg, &without.model, &data)?.without_ranks(),
    };
    write(&dir.join("ablation.csv"), ab.to_csv())?;
    write(&dir.join("ablation.json"), echo_json(cfg, &ab))?;
    print!("{}", ab.to_csv());
    Ok(ab)
}
