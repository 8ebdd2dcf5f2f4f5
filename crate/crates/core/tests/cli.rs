use std::fs;
use std::path::Path;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = seqrq::cli::run(std::iter::once("seqrq").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 16] = [
    "--set",
    "train_utterances=40",
    "--set",
    "dev_utterances=6",
    "--set",
    "test_utterances=6",
    "--set",
    "paired_utterances=8",
    "--set",
    "encoder_hidden=8",
    "--set",
    "decoder_hidden=8",
    "--set",
    "conv_channels=8",
    "--set",
    "batch_unpaired=8",
];

fn gen_data(dir: &Path) {
    let mut args = vec!["gen-data", "--out", s(dir), "--seed", "3"];
    args.extend(SMALL);
    let (code, out) = run(&args);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("paired=8 unpaired=32 dev=6 test=6"), "{out}");
}

fn train(dir: &Path, tag: &str, variant: &str) -> (String, String, String) {
    let ckpt = dir.join(format!("{tag}.srqc"));
    let metrics = dir.join(format!("{tag}.csv"));
    let mut args = vec![
        "train",
        "--manifest",
        s(&dir.join("manifest.csv")).to_owned().leak(),
        "--dev",
        s(&dir.join("dev.csv")).to_owned().leak(),
        "--checkpoint",
        s(&ckpt).to_owned().leak(),
        "--metrics",
        s(&metrics).to_owned().leak(),
        "--epochs",
        "2",
        "--variant",
        variant,
        "--seed",
        "5",
    ];
    args.extend(SMALL);
    let (code, out) = run(&args);
    assert_eq!(code, 0, "{out}");
    (out, ckpt.to_str().unwrap().to_owned(), metrics.to_str().unwrap().to_owned())
}

#[test]
fn pipeline_runs_from_an_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d);
    for f in ["manifest.csv", "dev.csv", "test.csv", "boundaries.csv"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let (out, ckpt, metrics) = train(d, "seqrq", "seqrq");
    assert!(out.contains("best_epoch="), "{out}");
    let log = fs::read_to_string(&metrics).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let hyp = d.join("hyp.csv");
    let test = d.join("test.csv");
    let mut args = vec!["recognize", "--checkpoint", &ckpt, "--manifest", s(&test), "--beam", "4"];
    args.extend(["--out", s(&hyp)]);
    assert_eq!(run(&args).0, 0);
    let (code, out) = run(&["eval-per", "--ref", s(&test), "--hyp", s(&hyp)]);
    assert_eq!(code, 0);
    assert!(out.starts_with("per="), "{out}");

    let (code, out) = run(&[
        "eval-boundaries",
        "--checkpoint",
        &ckpt,
        "--manifest",
        s(&test),
        "--boundaries",
        s(&d.join("boundaries.csv")),
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("f1="), "{out}");

    let cb = d.join("codebook.csv");
    assert_eq!(run(&["export-codebook", "--checkpoint", &ckpt, "--out", s(&cb)]).0, 0);
    let csv = fs::read_to_string(&cb).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    assert!(csv.lines().last().unwrap().starts_with("blank,"));

    let align = d.join("align.csv");
    let (code, out) = run(&[
        "eval-alignment",
        "--checkpoint",
        &ckpt,
        "--manifest",
        s(&test),
        "--out",
        s(&align),
        "--grid",
        "10",
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("diagonal_mass="), "{out}");
    assert_eq!(fs::read_to_string(&align).unwrap().lines().count(), 11);

    let recon = d.join("recon");
    let (code, out) = run(&[
        "reconstruct",
        "--checkpoint",
        &ckpt,
        "--manifest",
        s(&test),
        "--out",
        s(&recon),
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("utterances=6"), "{out}");
}

#[test]
fn training_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d);
    let (out_a, ckpt_a, metrics_a) = train(d, "a", "seqrq");
    let (out_b, ckpt_b, metrics_b) = train(d, "b", "seqrq");
    assert_eq!(out_a, out_b);
    assert_eq!(fs::read(metrics_a).unwrap(), fs::read(metrics_b).unwrap());
    assert_eq!(fs::read(ckpt_a).unwrap(), fs::read(ckpt_b).unwrap());
}

#[test]
fn every_variant_trains_and_baseline_has_no_codebook() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_data(d);
    for variant in ["no_codebook", "baseline_asr"] {
        let (_, ckpt, _) = train(d, variant, variant);
        let (code, _) = run(&["export-codebook", "--checkpoint", &ckpt, "--out", s(&d.join("x.csv"))]);
        assert_eq!(code, 1, "{variant}");
    }
}

#[test]
fn identical_reference_and_hypothesis_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r.csv");
    fs::write(&r, "utterance_id,units\nu1,1 2 3\nu2,4\n").unwrap();
    let (code, out) = run(&["eval-per", "--ref", s(&r), "--hyp", s(&r)]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().next().unwrap(), "per=0.000");
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(run(&["transmogrify"]).0, 1);
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["gen-data", "--out", s(&out), "--set", "no_such_key=1"]).0, 1);
    assert_eq!(run(&["gen-data", "--out", s(&out), "--set", "epochs"]).0, 1);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "units = \"eight\"\n").unwrap();
    assert_eq!(run(&["gen-data", "--out", s(&out), "--config", s(&cfg)]).0, 1);
    assert_eq!(run(&["gen-data", "--out", s(&out), "--config", s(&dir.path().join("missing.toml"))]).0, 1);
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, _) = run(&[
        "train",
        "--manifest",
        s(&d.join("nope.csv")),
        "--checkpoint",
        s(&d.join("c")),
        "--metrics",
        s(&d.join("m")),
    ]);
    assert_eq!(code, 2);
    let r = d.join("r.csv");
    let h = d.join("h.csv");
    fs::write(&r, "utterance_id,units\nu1,1 2 3\nu2,4\n").unwrap();
    fs::write(&h, "utterance_id,units\nu1,1 2 3\n").unwrap();
    assert_eq!(run(&["eval-per", "--ref", s(&r), "--hyp", s(&h)]).0, 2);
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.toml");
    fs::write(&cfg, "train_utterances = 12\ndev_utterances = 2\ntest_utterances = 2\npaired_utterances = 3\nseed = 1\n").unwrap();
    let a = d.join("a");
    let b = d.join("b");
    let (code, out) = run(&["gen-data", "--out", s(&a), "--config", s(&cfg), "--set", "paired_utterances=4"]);
    assert_eq!(code, 0);
    assert!(out.contains("paired=4 unpaired=8 dev=2 test=2"), "{out}");
    run(&["gen-data", "--out", s(&b), "--config", s(&cfg), "--set", "paired_utterances=4"]);
    assert_eq!(
        fs::read(a.join("manifest.csv")).unwrap(),
        fs::read(b.join("manifest.csv")).unwrap()
    );
    run(&["gen-data", "--out", s(&b), "--config", s(&cfg), "--seed", "2", "--set", "paired_utterances=4"]);
    assert_ne!(
        fs::read(a.join("boundaries.csv")).unwrap(),
        fs::read(b.join("boundaries.csv")).unwrap()
    );
}
