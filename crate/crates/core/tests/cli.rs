use std::path::Path;
use std::process::Command;

use rivae::cli::{main_with_args, AnyModel, Checkpoint, Flags, RunConfig};
use rivae::datagen::load_dataset;

const TINY: &str = r#"
[data]
n_train = 256
n_test = 120
[schedule]
epochs = 6
joint_start = 2
decay_epochs = [3]
[pretrain]
embed_epochs = 2
bottleneck_epochs = 2
[eval]
db_size = 100
trials = 2
[probe]
n_points = 10
n_refs = 3
db_size = 100
"#;

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("rivae").chain(args.iter().copied()))
}

#[test]
fn generate_synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let code = cli(&[
            "generate",
            "--config",
            &cfg,
            "--dataset",
            "synth",
            "--seed",
            "7",
            "--out-dir",
            d.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let read = |d: &Path| std::fs::read(d.join("synth-7.rivd")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(a.join("synth-7.factors.csv").exists());
}

#[test]
fn generate_sprites_has_6144_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        cli(&["generate", "--dataset", "sprites", "--out-dir", out]),
        0
    );
    let d = load_dataset(&dir.path().join("sprites.rivd")).unwrap();
    assert_eq!(d.train.len(), 6144);
}

#[test]
fn split_mnist_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // no IDX directory configured
    assert_eq!(
        cli(&["generate", "--dataset", "split_mnist", "--out-dir", out]),
        2
    );
    // directory without the files
    assert_eq!(
        cli(&[
            "generate",
            "--dataset",
            "split_mnist",
            "--out-dir",
            out,
            "--idx-dir",
            out
        ]),
        3
    );
    assert_eq!(cli(&["generate", "--dataset", "nope"]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
}

#[test]
fn binary_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_rivae"))
            .args(args)
            .output()
            .unwrap()
    };
    let o = run(&[
        "generate",
        "--dataset",
        "split_mnist",
        "--out-dir",
        out,
        "--idx-dir",
        out,
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-images-idx3-ubyte"));
    let o = run(&["eval", "--dataset", "synth", "--out-dir", out]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "missing dataset file is a data error"
    );
}

#[test]
fn train_eval_probe_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(cli(&["generate", "--config", &cfg, "--out-dir", o]), 0);
    assert_eq!(
        cli(&["train", "--config", &cfg, "--out-dir", o, "--no-reg"]),
        0
    );
    let run = out.join("synth-rivae-0");
    for f in ["config.toml", "loss.csv", "epoch-3.ckpt", "final.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows
        .iter()
        .all(|r| r.split(',').nth(3).unwrap().parse::<f64>().unwrap() == 0.0));
    assert!(std::fs::read_to_string(run.join("config.toml"))
        .unwrap()
        .contains("lambda_reg = 0.0"));

    assert_eq!(cli(&["eval", "--config", &cfg, "--out-dir", o]), 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    for k in ["R@1", "R@5", "R@10"] {
        assert!(json["report"]["r_at"][k].is_number());
    }
    assert_eq!(json["config"]["eval"]["db_size"], 100);
    assert_eq!(cli(&["probe", "--config", &cfg, "--out-dir", o]), 0);
    let first = std::fs::read(run.join("probe/dci.json")).unwrap();
    assert_eq!(cli(&["probe", "--config", &cfg, "--out-dir", o]), 0);
    assert_eq!(std::fs::read(run.join("probe/dci.json")).unwrap(), first);
    let corr = std::fs::read_to_string(run.join("probe/correlation.csv")).unwrap();
    assert_eq!(corr.lines().next().unwrap(), "z,fS1,fS2");
    assert_eq!(corr.lines().count(), 3);

    // config and checkpoint disagree on the dataset
    assert_eq!(
        cli(&[
            "eval",
            "--config",
            &cfg,
            "--out-dir",
            o,
            "--dataset",
            "sprites",
            "--checkpoint",
            run.join("final.ckpt").to_str().unwrap()
        ]),
        3,
        "sprites container is missing"
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny(dir.path());
    let out = dir.path().join("out");
    let flags = Flags {
        config: Some(cfg_path.into()),
        out_dir: Some(out.clone()),
        ..Flags::default()
    };
    let cfg = flags.resolve().unwrap();
    rivae::cli::cmd_generate(&cfg).unwrap();
    let full = rivae::cli::cmd_train(&cfg).unwrap();
    let mid = out.join("synth-rivae-0/epoch-3.ckpt");
    let mut resumed_cfg = cfg.clone();
    resumed_cfg.paths.checkpoint = Some(mid);
    resumed_cfg.paths.out_dir = dir.path().join("resumed");
    resumed_cfg.paths.data_file = Some(cfg.data_file());
    let resumed = rivae::cli::cmd_train(&resumed_cfg).unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(resumed.loss_csv, full.loss_csv);
}

#[test]
fn rbivae_and_cossim_train_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny(dir.path());
    for model in ["rbivae", "bivae_on_v", "cossim_lvm"] {
        let out = dir.path().join(model);
        let flags = Flags {
            config: Some(cfg_path.clone().into()),
            model: Some(model.into()),
            out_dir: Some(out.clone()),
            ..Flags::default()
        };
        let mut cfg = flags.resolve().unwrap();
        cfg.rbivae.disc_hidden = 16;
        rivae::cli::cmd_generate(&cfg).unwrap();
        let full = rivae::cli::cmd_train(&cfg).unwrap();
        let back = Checkpoint::load(&out.join(format!("synth-{model}-0/final.ckpt"))).unwrap();
        assert_eq!(back, full.checkpoint);
        let report = rivae::cli::cmd_eval(&cfg).unwrap();
        assert!(report.med_r >= 1.0);
        if model != "cossim_lvm" {
            let mut r = cfg.clone();
            r.paths.checkpoint = Some(out.join(format!("synth-{model}-0/epoch-3.ckpt")));
            r.paths.out_dir = dir.path().join(format!("{model}-resumed"));
            r.paths.data_file = Some(cfg.data_file());
            assert_eq!(
                rivae::cli::cmd_train(&r).unwrap().checkpoint.params,
                full.checkpoint.params,
                "{model}"
            );
        }
    }
}

#[test]
fn untrained_model_ranks_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(
        rivae::datagen::DatasetKind::Synth,
        rivae::cli::ModelKind::Rivae,
    );
    cfg.paths.out_dir = dir.path().to_path_buf();
    cfg.data.n_train = 100;
    let data = rivae::cli::cmd_generate(&cfg).unwrap();
    let model = AnyModel::build(&cfg, data.x1_dim(), data.x2_dim()).unwrap();
    let report = rivae::cli::evaluate_model(&cfg, &model, &data).unwrap();
    // db_size 1000: chance Med-R is 500
    assert!(
        report.med_r > 250.0 && report.med_r < 1000.0,
        "{}",
        report.med_r
    );
}

fn write_fake_idx(dir: &Path, count: usize) {
    let mut rng = rivae::numkit::Rng::new(5);
    let mut img = Vec::new();
    for v in [0x0803u32, count as u32, 28, 28] {
        img.extend(v.to_be_bytes());
    }
    img.extend((0..count * 784).map(|_| rng.below(256) as u8));
    let mut lab = Vec::new();
    for v in [0x0801u32, count as u32] {
        lab.extend(v.to_be_bytes());
    }
    lab.extend((0..count).map(|i| (i % 10) as u8));
    for (name, bytes) in rivae::datagen::IDX_FILES
        .iter()
        .zip([&img, &lab, &img, &lab])
    {
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

#[test]
fn split_mnist_probe_emits_transition_table() {
    let dir = tempfile::tempdir().unwrap();
    write_fake_idx(dir.path(), 200);
    let cfg_path = dir.path().join("m.toml");
    std::fs::write(
        &cfg_path,
        "[schedule]\nepochs = 2\njoint_start = 1\ndecay_epochs = []\n[pretrain]\nenabled = false\n[eval]\ndb_size = 150\n[probe]\nn_points = 20\nn_refs = 4\ndb_size = 150\n",
    )
    .unwrap();
    let (c, o, i) = (
        cfg_path.to_str().unwrap(),
        dir.path().join("out"),
        dir.path().to_str().unwrap(),
    );
    let o = o.to_str().unwrap();
    let base = ["--config", c, "--dataset", "split_mnist", "--out-dir", o];
    let with = |verb: &'static str, extra: &[&'static str]| {
        let mut a = vec![verb];
        a.extend(base);
        a.extend(extra);
        a
    };
    let mut g = with("generate", &[]);
    g.extend(["--idx-dir", i]);
    assert_eq!(cli(&g), 0);
    assert_eq!(cli(&with("train", &[])), 0);
    assert_eq!(cli(&with("probe", &[])), 0);
    let t = std::fs::read_to_string(
        dir.path()
            .join("out/split_mnist-rivae-0/probe/transitions.csv"),
    )
    .unwrap();
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines.iter().all(|l| l.split(',').count() == 46));
    assert!(lines[0].starts_with("z,0-1,0-2"));
    let oc: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            dir.path()
                .join("out/split_mnist-rivae-0/probe/overlap.json"),
        )
        .unwrap(),
    )
    .unwrap();
    assert!(oc["coverage"].is_number());
}

#[test]
fn shipped_configs_parse() {
    let tuned = RunConfig::from_toml_overlay(include_str!("../configs/synth_tuned.toml"), None, None).unwrap();
    let expected = RunConfig::defaults(rivae::datagen::DatasetKind::Synth, rivae::cli::ModelKind::Rivae).synth_calibrated();
    assert_eq!(tuned, expected);
    let smoke = RunConfig::from_toml_overlay(include_str!("../configs/sprites_smoke.toml"), None, None).unwrap();
    assert_eq!(smoke.dataset, rivae::datagen::DatasetKind::Sprites);
    assert_eq!(smoke.schedule.epochs - smoke.schedule.joint_start, 1);
}
