use std::path::Path;

use qamo::cli::{run, EXIT_OK};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("qamo").chain(args.iter().copied()))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(
        cli(&["gen", "--out", &s(&d.join("gen")), "--seed", "4"]),
        EXIT_OK
    );
    let train_file = s(&d.join("gen/train.jsonl"));
    let test_file = s(&d.join("gen/test.jsonl"));
    assert_eq!(
        cli(&[
            "train",
            "--data",
            &train_file,
            "--out",
            &s(&d.join("train")),
            "--set",
            "epochs=3"
        ]),
        EXIT_OK
    );
    let ck = s(&d.join("train/checkpoint.json"));
    assert_eq!(
        cli(&[
            "score",
            "--checkpoint",
            &ck,
            "--data",
            &test_file,
            "--out",
            &s(&d.join("score"))
        ]),
        EXIT_OK
    );
    assert_eq!(
        cli(&[
            "eval",
            "--scores",
            &s(&d.join("score/scores.csv")),
            "--out",
            &s(&d.join("eval"))
        ]),
        EXIT_OK
    );
    assert_eq!(
        cli(&[
            "export",
            "--checkpoint",
            &ck,
            "--data",
            &test_file,
            "--out",
            &s(&d.join("export"))
        ]),
        EXIT_OK
    );
    for f in [
        "train/checkpoint.json",
        "train/metrics.csv",
        "score/scores.csv",
        "eval/eval.json",
        "export/histogram.csv",
        "export/embeddings.csv",
        "train/manifest.json",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn bad_invocations_fail() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ne!(cli(&["train", "--no-such-flag"]), EXIT_OK);
    assert_ne!(cli(&["bogus"]), EXIT_OK);
    let missing = s(&tmp.path().join("missing.jsonl"));
    assert_ne!(
        cli(&[
            "train",
            "--data",
            &missing,
            "--out",
            &s(&tmp.path().join("o"))
        ]),
        EXIT_OK
    );
}

#[test]
fn ablation_table_has_five_rows_and_ensemble_beats_max() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(
        cli(&["gen", "--out", &s(&d.join("gen")), "--seed", "2"]),
        EXIT_OK
    );
    let out = d.join("ablate");
    assert_eq!(
        cli(&[
            "ablate",
            "--train",
            &s(&d.join("gen/train.jsonl")),
            "--test",
            &s(&d.join("gen/test.jsonl")),
            "--out",
            &s(&out),
            "--set",
            "epochs=10",
        ]),
        EXIT_OK
    );
    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (arm, eer) = (col("arm"), col("test_eer"));
    let rows: Vec<(String, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[arm].to_owned(), r[eer].parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(
        names,
        ["wce", "wce+quality", "qamo", "qamo-max", "qamo-no-quality"]
    );
    assert!(rows[2].1 <= rows[3].1);
}
