use std::fs;
use std::path::Path;

use harmlab_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("harmlab").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let (code, _, err) = call(&[
            "gen-data",
            "--seed",
            "7",
            "--count",
            "16",
            "--out",
            p(d),
            "--size",
            "32",
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(err.contains("# data.seed = 7"));
    }
    let la = listing(&a);
    assert_eq!(la.len(), 16 * 4 + 1);
    assert_eq!(la, listing(&b));
}

#[test]
fn train_eval_harmonize_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("m.ckpt");
    let report = tmp.path().join("r.csv");
    assert_eq!(
        call(&[
            "gen-data",
            "--seed",
            "1",
            "--count",
            "3",
            "--out",
            p(&data),
            "--size",
            "16"
        ])
        .0,
        EXIT_OK
    );

    let (code, _, err) = call(&[
        "train",
        "--data",
        p(&data),
        "--block",
        "srin",
        "--steps",
        "3",
        "--seed",
        "2",
        "--stages",
        "2",
        "--base-channels",
        "4",
        "--out",
        p(&ckpt),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(err.contains("# net.block = srin"));
    let log = fs::read_to_string(format!("{}.loss.csv", ckpt.display())).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("1,0.001,"));

    let (code, out, err) = call(&[
        "eval",
        "--data",
        p(&data),
        "--ckpt",
        p(&ckpt),
        "--report",
        p(&report),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("fg ratio") && out.contains("all"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("id,fg_ratio,bucket,mse,fmse,psnr\n"));
    assert_eq!(csv.lines().count(), 4);

    // an all-zero mask leaves the composite untouched
    let empty = tmp.path().join("empty.pgm");
    let mut pgm = b"P5\n16 16\n255\n".to_vec();
    pgm.extend([0u8; 256]);
    fs::write(&empty, pgm).unwrap();
    let comp = data.join("000000_comp.ppm");
    let out_img = tmp.path().join("h.ppm");
    let (code, _, err) = call(&[
        "harmonize",
        "--ckpt",
        p(&ckpt),
        "--comp",
        p(&comp),
        "--mask",
        p(&empty),
        "--sem",
        p(&data.join("000000_sem.ppm")),
        "--out",
        p(&out_img),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(fs::read(&out_img).unwrap(), fs::read(&comp).unwrap());

    // a checkpoint for 16 px inputs rejects 32 px images
    let big = tmp.path().join("big");
    assert_eq!(
        call(&["gen-data", "--count", "1", "--out", p(&big), "--size", "32"]).0,
        EXIT_OK
    );
    let (code, _, err) = call(&[
        "eval",
        "--data",
        p(&big),
        "--ckpt",
        p(&ckpt),
        "--report",
        p(&report),
    ]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("16"), "{err}");
}

#[test]
fn bt_rank_prints_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("p.csv");
    fs::write(&pairs, "winner,loser,count\nA,B,3\nB,A,1\n").unwrap();
    let (code, out, _) = call(&["bt-rank", "--pairs", p(&pairs)]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, "method,score\nA,0.75\nB,0.25\n");

    fs::write(&pairs, "A,B,1\nC,D,1\n").unwrap();
    let (code, _, err) = call(&["bt-rank", "--pairs", p(&pairs)]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("disconnected"), "{err}");
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("p.csv");
    fs::write(&pairs, "A,B,1\nB,A,1\n").unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("# ranking\nbt.pairs = {}\nbt.tol = 1e-6\n", pairs.display()),
    )
    .unwrap();
    let (code, out, err) = call(&["bt-rank", "--config", p(&cfg), "--tol", "1e-9"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(err.contains("# bt.tol = 0.000000001"), "{err}");
    assert_eq!(out, "method,score\nA,0.5\nB,0.5\n");

    fs::write(&cfg, "bt.tolerance = 1\n").unwrap();
    let (code, _, err) = call(&["bt-rank", "--config", p(&cfg), "--pairs", p(&pairs)]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("unknown key"), "{err}");
}

#[test]
fn exit_codes() {
    assert_eq!(call(&[]).0, EXIT_USAGE);
    assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(call(&["gen-data", "--count", "x"]).0, EXIT_USAGE);
    // required value missing
    assert_eq!(call(&["bt-rank"]).0, EXIT_USAGE);
    assert_eq!(
        call(&["train", "--data", "d", "--block", "bain", "--out", "m"]).0,
        EXIT_USAGE
    );
    let (code, _, err) = call(&["bt-rank", "--pairs", "/nonexistent/p.csv"]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("/nonexistent/p.csv"));
    assert_eq!(call(&["--help"]).0, EXIT_OK);
}

#[test]
fn gradcheck_passes() {
    let (code, out, err) = call(&["gradcheck", "--instances", "10"]);
    assert_eq!(code, EXIT_OK, "{out}{err}");
    assert!(out.lines().count() > 30);
    assert!(!out.contains("FAIL"));
    let (code, out, _) = call(&["gradcheck", "--tol", "1e-30", "--instances", "1"]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(out.contains("FAIL"));
}
