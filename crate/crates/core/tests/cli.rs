//! End-to-end CLI runs through the file formats: generate, train, decode,
//! QE, adapt, evaluate, two-pass, grid and rescore.

use std::path::Path;
use std::process::Command;

fn run_ok(args: &[String]) -> String {
    let output =
        Command::new(env!("CARGO_BIN_EXE_adaptlab")).args(args).output().expect("spawn adaptlab");
    assert!(
        output.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

const SMALL_SETS: &[&str] = &[
    "--set",
    "seed=31",
    "--set",
    "utts_train=80",
    "--set",
    "utts_dev=32",
    "--set",
    "utts_test=32",
    "--set",
    "max_epochs=16",
    "--set",
    "min_epochs=12",
    "--set",
    "adapt_min_epochs=4",
    "--set",
    "adapt_max_epochs=6",
    "--set",
    "nbest_n=6",
    "--set",
    "nbest_beam=16",
];

#[test]
fn file_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let mut gen_args = args(&["gen"]);
    gen_args.extend(args(SMALL_SETS));
    gen_args.extend([String::from("--out"), p(&root.join("data"))]);
    run_ok(&gen_args);
    assert!(root.join("data/lexicon.tsv").exists());
    assert!(root.join("data/train/manifest.tsv").exists());
    assert!(root.join("data/test/frames").is_dir());

    let lex = p(&root.join("data/lexicon.tsv"));

    // language models
    for (order, out) in [("2", "lm2.txt"), ("3", "lm3.txt")] {
        run_ok(&args(&[
            "train-lm",
            "--corpus",
            &p(&root.join("data/train")),
            "--lexicon",
            &lex,
            "--order",
            order,
            "--out",
            &p(&root.join(out)),
        ]));
    }

    // acoustic model
    let mut am_args = args(&[
        "train-am",
        "--corpus",
        &p(&root.join("data/train")),
        "--lexicon",
        &lex,
        "--out-model",
        &p(&root.join("am.bin")),
        "--out-priors",
        &p(&root.join("priors.txt")),
    ]);
    am_args.extend(args(SMALL_SETS));
    run_ok(&am_args);

    // decode, then eval must agree on the WER
    let mut decode_args = args(&[
        "decode",
        "--corpus",
        &p(&root.join("data/test")),
        "--lexicon",
        &lex,
        "--model",
        &p(&root.join("am.bin")),
        "--priors",
        &p(&root.join("priors.txt")),
        "--lm",
        &p(&root.join("lm2.txt")),
        "--out",
        &p(&root.join("decode")),
    ]);
    decode_args.extend(args(SMALL_SETS));
    let decode_out = run_ok(&decode_args);
    let decode_wer = decode_out
        .lines()
        .find(|l| l.starts_with("decode\tWER"))
        .and_then(|l| l.split('\t').nth(2))
        .unwrap()
        .to_string();
    let eval_out = run_ok(&args(&[
        "eval",
        "--corpus",
        &p(&root.join("data/test")),
        "--lexicon",
        &lex,
        "--hyps",
        &p(&root.join("decode/hyps.tsv")),
        "--out",
        &p(&root.join("eval.tsv")),
    ]));
    assert!(
        eval_out.contains(&format!("eval\tWER\t{decode_wer}")),
        "decode said {decode_wer}, eval said {eval_out}"
    );

    // alignment lines cover every utterance
    run_ok(&args(&[
        "align",
        "--corpus",
        &p(&root.join("data/test")),
        "--lexicon",
        &lex,
        "--model",
        &p(&root.join("am.bin")),
        "--priors",
        &p(&root.join("priors.txt")),
        "--out",
        &p(&root.join("align.tsv")),
    ]));
    let align = std::fs::read_to_string(root.join("align.tsv")).unwrap();
    assert_eq!(align.lines().count(), 32);

    // QE chain: features, oracle WERs from a dev decode, train, predict
    for (corpus, out) in [("data/dev", "dev_features.tsv"), ("data/test", "test_features.tsv")] {
        let mut qe_args = args(&[
            "qe-extract",
            "--corpus",
            &p(&root.join(corpus)),
            "--train-corpus",
            &p(&root.join("data/train")),
            "--lexicon",
            &lex,
            "--model",
            &p(&root.join("am.bin")),
            "--priors",
            &p(&root.join("priors.txt")),
            "--lm",
            &p(&root.join("lm2.txt")),
            "--out",
            &p(&root.join(out)),
        ]);
        qe_args.extend(args(SMALL_SETS));
        run_ok(&qe_args);
    }
    let mut dev_decode_args = args(&[
        "decode",
        "--corpus",
        &p(&root.join("data/dev")),
        "--lexicon",
        &lex,
        "--model",
        &p(&root.join("am.bin")),
        "--priors",
        &p(&root.join("priors.txt")),
        "--lm",
        &p(&root.join("lm2.txt")),
        "--out",
        &p(&root.join("dev_decode")),
    ]);
    dev_decode_args.extend(args(SMALL_SETS));
    run_ok(&dev_decode_args);
    run_ok(&args(&[
        "qe-train",
        "--features",
        &p(&root.join("dev_features.tsv")),
        "--wer",
        &p(&root.join("dev_decode/wer.tsv")),
        "--corpus",
        &p(&root.join("data/dev")),
        "--lexicon",
        &lex,
        "--folds",
        "4",
        "--out",
        &p(&root.join("xrt.txt")),
    ]));
    run_ok(&args(&[
        "qe-predict",
        "--model",
        &p(&root.join("xrt.txt")),
        "--features",
        &p(&root.join("test_features.tsv")),
        "--out",
        &p(&root.join("preds.tsv")),
    ]));
    let preds = std::fs::read_to_string(root.join("preds.tsv")).unwrap();
    assert_eq!(preds.lines().count(), 32);
    for line in preds.lines() {
        let v: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    // adaptation with predicted selection
    let mut adapt_args = args(&[
        "adapt",
        "--corpus",
        &p(&root.join("data/test")),
        "--lexicon",
        &lex,
        "--model",
        &p(&root.join("am.bin")),
        "--priors",
        &p(&root.join("priors.txt")),
        "--lm",
        &p(&root.join("lm2.txt")),
        "--predictions",
        &p(&root.join("preds.tsv")),
        "--out-model",
        &p(&root.join("adapted.bin")),
        "--set",
        "wer_source=predicted",
        "--set",
        "selection=thr:0.3",
        "--set",
        "alpha=0.2",
    ]);
    adapt_args.extend(args(SMALL_SETS));
    let adapt_out = run_ok(&adapt_args);
    assert!(adapt_out.starts_with("adapt\tselected"));
    assert!(root.join("adapted.bin").exists());

    // rescore the n-best dump with the trigram
    let rescore_out = run_ok(&args(&[
        "rescore",
        "--corpus",
        &p(&root.join("data/test")),
        "--lexicon",
        &lex,
        "--nbest",
        &p(&root.join("decode/nbest.tsv")),
        "--lm",
        &p(&root.join("lm3.txt")),
        "--weight",
        "0.3",
        "--out",
        &p(&root.join("rescore")),
    ]));
    assert!(rescore_out.starts_with("rescore\tbefore"));
    assert!(root.join("rescore/wer_after.tsv").exists());
    assert!(root.join("rescore/rescored_hyps.tsv").exists());
}

#[test]
fn two_pass_and_grid_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = root.join("exp.conf");
    std::fs::write(
        &conf,
        "seed = 41\nutts_train = 80\nutts_dev = 40\nutts_test = 40\nmax_epochs = 16\nmin_epochs = 12\nadapt_min_epochs = 4\nadapt_max_epochs = 6\nnbest_n = 6\nnbest_beam = 16\nselection = thr:0.10\nalpha = 0.2\n",
    )
    .unwrap();

    let out = run_ok(&args(&[
        "two-pass",
        "--config",
        &p(&conf),
        "--out",
        &p(&root.join("tp")),
    ]));
    assert!(out.contains("baseline-wer"));
    assert!(out.contains("adapted-wer"));
    assert!(root.join("tp/models/adapted.bin").exists());
    let report = std::fs::read_to_string(root.join("tp/report.tsv")).unwrap();
    assert_eq!(report, out);

    let grid_out = run_ok(&args(&[
        "grid",
        "--config",
        &p(&conf),
        "--set",
        "grid_sizes=10,20",
        "--set",
        "grid_alphas=0.1,0.5",
        "--out",
        &p(&root.join("grid")),
    ]));
    let grid_tsv = std::fs::read_to_string(root.join("grid/grid.tsv")).unwrap();
    assert!(grid_out.contains(&grid_tsv));
    let lines: Vec<&str> = grid_tsv.lines().collect();
    assert_eq!(lines[0], "\t0.1\t0.5");
    assert!(lines[1].starts_with("10\t"));
    assert!(lines[2].starts_with("20\t"));
    assert!(root.join("grid/grid_argmin.tsv").exists());
}

#[test]
fn bad_input_gives_single_line_error_and_nonzero_exit() {
    let output = Command::new(env!("CARGO_BIN_EXE_adaptlab"))
        .args(["two-pass", "--set", "no_such_key=1"])
        .output()
        .expect("spawn adaptlab");
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("error\t"));

    let output = Command::new(env!("CARGO_BIN_EXE_adaptlab"))
        .args([
            "decode",
            "--corpus",
            "/nonexistent",
            "--lexicon",
            "/nonexistent",
            "--model",
            "/nonexistent",
            "--priors",
            "/nonexistent",
            "--lm",
            "/nonexistent",
            "--out",
            "/tmp/adaptlab-err-test",
        ])
        .output()
        .expect("spawn adaptlab");
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.starts_with("error\t"));
}
