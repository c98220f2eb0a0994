use std::path::Path;
use std::process::{Command, Output};

use mocha_cli::{parse_args, parse_edges, train_config, Command as Verb, EXIT_RUNTIME, EXIT_USAGE};

fn mocha(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mocha")).args(args).current_dir(cwd).env("MOCHA_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &["epochs=1", "toy_train=6", "toy_dev=3", "enc_hidden=6", "dec_hidden=6", "attn_dim=4", "emb_dim=3"];

#[test]
fn parses_train_with_overrides() {
    let cli = parse_args(["mocha", "train", "--config", "c.cfg", "lambda_sync=0.5", "--seed", "9"]).unwrap();
    assert_eq!(cli.seed, Some(9));
    let Verb::Train(args) = cli.command else { panic!("expected train") };
    assert_eq!(args.config.as_deref(), Some(Path::new("c.cfg")));
    assert_eq!(args.overrides, vec!["lambda_sync=0.5"]);
}

#[test]
fn overrides_and_seed_reach_the_config() {
    let cli = parse_args(["mocha", "--seed", "42", "train", "lambda_sync=0.5", "epochs=3"]).unwrap();
    let Verb::Train(args) = cli.command else { panic!() };
    let cfg = train_config(&args, cli.seed).unwrap();
    assert_eq!((cfg.weights.lambda_sync, cfg.epochs, cfg.seed), (0.5, 3, 42));
    let cli = parse_args(["mocha", "train", "no_such_key=1"]).unwrap();
    let Verb::Train(args) = cli.command else { panic!() };
    assert_eq!(train_config(&args, None).unwrap_err().exit_code(), EXIT_USAGE);
}

#[test]
fn config_file_is_read_before_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    std::fs::write(&path, "# stage 2 run\nstage = stage2\nepochs = 4\nlambda_sync = 0.7\n").unwrap();
    let cli = parse_args(["mocha", "train", "--config", path.to_str().unwrap(), "epochs=2"]).unwrap();
    let Verb::Train(args) = cli.command else { panic!() };
    let cfg = train_config(&args, None).unwrap();
    assert_eq!(cfg.stage.to_string(), "stage2");
    assert_eq!((cfg.epochs, cfg.weights.lambda_sync), (2, 0.7));
}

#[test]
fn unknown_verbs_and_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(parse_args(["mocha", "frobnicate"]).is_err());
    assert_eq!(mocha(&["frobnicate"], dir.path()).status.code(), Some(EXIT_USAGE));
    assert_eq!(mocha(&["decode", "--bogus"], dir.path()).status.code(), Some(EXIT_USAGE));
    assert_eq!(mocha(&["train", "stage=stage2"], dir.path()).status.code(), Some(EXIT_USAGE));
    assert_eq!(mocha(&["selftest", "--filter", "nothing-matches"], dir.path()).status.code(), Some(EXIT_USAGE));
    assert_eq!(mocha(&["--help"], dir.path()).status.code(), Some(0));
    assert!(parse_edges("5,x").is_err());
}

#[test]
fn missing_files_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = mocha(&["decode", "--checkpoint", "nope.txt", "--data", "nope.json", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    let o = mocha(&["report", "--results", "nope.tsv"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
}

#[test]
fn selftest_filter_runs_only_ctc() {
    let dir = tempfile::tempdir().unwrap();
    let o = mocha(&["selftest", "--filter", "ctc"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.starts_with("PASS ctc/")), "{out}");
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn stage2_without_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s2.cfg"), "stage = stage2\n").unwrap();
    let o = mocha(&["train", "--config", "s2.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage1 checkpoint"));
}

#[test]
fn train_decode_align_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let mut args = vec!["train", "--out", "s1", "--seed", "5"];
    args.extend_from_slice(SMALL);
    let o = mocha(&args, cwd);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.txt", "metrics.tsv", "train.json", "dev.json"] {
        assert!(cwd.join("s1").join(f).exists(), "{f}");
    }

    // Same seed, same checkpoint bytes.
    let mut again = vec!["train", "--out", "s1b", "--seed", "5"];
    again.extend_from_slice(SMALL);
    assert_eq!(mocha(&again, cwd).status.code(), Some(0));
    let read = |p: &str| std::fs::read(cwd.join(p)).unwrap();
    assert_eq!(read("s1/checkpoint.txt"), read("s1b/checkpoint.txt"));

    let mut s2 = vec!["train", "--out", "s2", "--seed-checkpoint", "s1/checkpoint.txt", "--config", "s2.cfg"];
    std::fs::write(cwd.join("s2.cfg"), "stage = stage2\n").unwrap();
    s2.extend_from_slice(SMALL);
    let o = mocha(&s2, cwd);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let o = mocha(&["decode", "--checkpoint", "s2/checkpoint.txt", "--data", "s1/dev.json", "--out", "dec", "--beam", "3"], cwd);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wer\t"));
    let results = std::fs::read_to_string(cwd.join("dec/results.tsv")).unwrap();
    assert_eq!(results.lines().count(), 4);

    let o = mocha(&["align", "--checkpoint", "s1/checkpoint.txt", "--data", "s1/dev.json", "--out", "trace.tsv"], cwd);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(cwd.join("trace.tsv")).unwrap();
    assert!(trace.starts_with("utterance\tframes\tstride\ttoken"));
    assert_eq!(mocha_core::evaltool::parse_traces(&trace).unwrap().len(), 3);

    let o = mocha(&["report", "--results", "dec/results.tsv", "--buckets", "10,1000"], cwd);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("frames\tutterances"));
    let o = mocha(&["report", "--results", "dec/results.tsv"], cwd);
    assert_eq!(o.status.code(), Some(0));
    let o = mocha(&["report", "--results", "dec/results.tsv", "--buckets", "20,10"], cwd);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}
