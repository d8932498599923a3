//! End-to-end runs of the command-line binary: synth -> train -> eval ->
//! explain -> tokenize, plus error-path exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn vsformer(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsformer"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // synth writes a parseable corpus
    let out = vsformer(
        &[
            "synth", "--kind", "mixed", "--classes", "2", "--per-class", "12", "--vars", "2",
            "--len", "48", "--seed", "7", "--out", "corpus.ts",
        ],
        d,
    );
    assert!(out.status.success(), "synth failed: {}", stderr(&out));
    assert!(d.join("corpus.ts").exists());

    // a second corpus from the same generator serves as the test file
    let out = vsformer(
        &[
            "synth", "--kind", "mixed", "--classes", "2", "--per-class", "12", "--vars", "2",
            "--len", "48", "--seed", "7", "--out", "test.ts",
        ],
        d,
    );
    assert!(out.status.success());

    std::fs::write(
        d.join("config.json"),
        r#"{"k": 2, "M": 4, "d_model": 8, "d_ff": 32, "epochs": 8, "patience": 8, "lr": 0.005}"#,
    )
    .unwrap();

    let out = vsformer(
        &[
            "train", "--data", "corpus.ts", "--test", "test.ts", "--config", "config.json",
            "--out", "model.ckpt", "--seed", "3",
        ],
        d,
    );
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("epoch"), "progress lines expected: {text}");
    assert!(text.contains("test accuracy"), "test metrics expected: {text}");
    assert!(d.join("model.ckpt").exists());

    // eval, human and JSON forms
    let out = vsformer(&["eval", "--ckpt", "model.ckpt", "--data", "test.ts"], d);
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    assert!(stdout(&out).contains("test accuracy"));

    let out = vsformer(
        &["eval", "--ckpt", "model.ckpt", "--data", "test.ts", "--json"],
        d,
    );
    assert!(out.status.success());
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid JSON");
    let accuracy = parsed["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert!(parsed["lambdas"].as_array().unwrap().len() == 24);

    // explain prints ranked rows for both branches
    let out = vsformer(
        &[
            "explain", "--ckpt", "model.ckpt", "--data", "test.ts", "--instance", "0", "--top",
            "5",
        ],
        d,
    );
    assert!(out.status.success(), "explain failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("shape tokens by received attention"));
    assert!(text.contains("value tokens by received attention"));

    // tokenize emits a JSON dump
    let out = vsformer(
        &[
            "tokenize", "--data", "corpus.ts", "--config", "config.json", "--out", "dump.json",
        ],
        d,
    );
    assert!(out.status.success(), "tokenize failed: {}", stderr(&out));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("dump.json")).unwrap()).unwrap();
    assert_eq!(dump["instances"].as_array().unwrap().len(), 24);
    assert!(!dump["artifacts"]["prototypes"].as_array().unwrap().is_empty());
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // missing data file
    std::fs::write(d.join("config.json"), "{}").unwrap();
    let out = vsformer(
        &[
            "train", "--data", "nope.ts", "--config", "config.json", "--out", "x.ckpt",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "got: {}", stderr(&out));

    // unknown config key is rejected
    std::fs::write(d.join("bad.json"), r#"{"k": 2, "unknown_knob": 1}"#).unwrap();
    std::fs::write(
        d.join("tiny.ts"),
        "@problemName t\n@classLabel true a b\n@data\n1,2,3,4:a\n4,3,2,1:b\n",
    )
    .unwrap();
    let out = vsformer(
        &[
            "train", "--data", "tiny.ts", "--config", "bad.json", "--out", "x.ckpt",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown_knob"), "got: {}", stderr(&out));

    // corrupted checkpoint
    std::fs::write(d.join("broken.ckpt"), b"VSFCKPT1garbage").unwrap();
    let out = vsformer(&["eval", "--ckpt", "broken.ckpt", "--data", "tiny.ts"], d);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"));

    // bad synthetic parameters
    let out = vsformer(
        &[
            "synth", "--kind", "mixed", "--classes", "2", "--per-class", "4", "--vars", "1",
            "--len", "48", "--seed", "1", "--out", "no.ts",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("mixed"), "got: {}", stderr(&out));
}
