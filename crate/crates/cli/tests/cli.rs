use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hime_core::diffops::{bicubic_resize, Scale};
use hime_core::imaging::{load_image, save_image};
use hime_core::model::{save_checkpoint, HimeConfig, HimeModel};
use hime_core::tensor::{read_htf_file, write_htf_file};
use hime_core::Tensor;

fn hime(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hime"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn textured(h: usize, w: usize, phase: f64) -> Tensor<f64> {
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let v = 0.5 + 0.3 * ((x as f64 * 0.9 + phase).sin() * (y as f64 * 0.7 + c as f64).cos());
        (v * 255.0).round() / 255.0
    })
}

fn write_image(dir: &Path, name: &str, t: &Tensor<f64>) -> PathBuf {
    let path = dir.join(name);
    save_image(t, &path).unwrap();
    path
}

fn tiny_train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--out",
        out,
        "--iters",
        "3",
        "--scale",
        "2",
        "--hr-size",
        "16",
        "--c-f",
        "4",
        "--k-l",
        "1",
        "--k-h",
        "1",
        "--k-r",
        "1",
        "--batch",
        "2",
        "--holdout",
        "2",
        "--eval-every",
        "2",
        "--checkpoint-every",
        "2",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn corrmap_writes_visualisation_and_raw_map() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_image(dir.path(), "in.png", &textured(12, 14, 0.0));
    let out = dir.path().join("vis.png");
    let raw = dir.path().join("raw.htf");
    let o = hime(&[
        "corrmap",
        "--input",
        p(&input),
        "--k",
        "1",
        "--dilation",
        "1",
        "--out",
        p(&out),
        "--raw",
        p(&raw),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.exists());
    assert_eq!(read_htf_file(&raw).unwrap().shape(), [1, 1, 12, 14]);

    let o = hime(&["corrmap", "--input", p(&input), "--k", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(load_image::<f64>(&out).unwrap().shape(), [1, 3, 12, 14]);
}

#[test]
fn corrmap_even_window_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_image(dir.path(), "in.png", &textured(8, 8, 0.0));
    let o = hime(&[
        "corrmap",
        "--input",
        p(&input),
        "--k",
        "4",
        "--out",
        p(&dir.path().join("x.png")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("odd"), "{}", stderr(&o));
}

#[test]
fn gradcheck_suite_and_single_op() {
    let o = hime(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().count() > 20);

    let o = hime(&["gradcheck", "--op", "deformable_conv"]);
    assert_eq!(code(&o), 0);
    let rows: Vec<_> = stdout(&o).lines().skip(1).map(str::to_owned).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("deformable_conv"));

    let o = hime(&["gradcheck", "--op", "deformable_conv", "--tolerance", "1e-12"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_unknown_op_lists_the_available_ones() {
    let o = hime(&["gradcheck", "--op", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("conv2d") && stderr(&o).contains("cofa_aggregate"));
    assert_eq!(code(&hime(&["gradcheck", "--op", "block_match_flow"])), 2);
}

#[test]
fn train_without_references_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hime(&tiny_train_args(p(&out), &["--refs", "0"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("checkpoint.hmc").exists());
    assert!(out.join("config.json").exists());
    assert!(out.join("samples/iter000002_sr.png").exists());
    assert!(out.join("samples/iter000003_gt.png").exists());
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    assert!(log.starts_with("iter,l_rec,l_cor,l_per,total,psnr_holdout\n"));
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn aggregation_modes_give_distinct_logs() {
    let dir = tempfile::tempdir().unwrap();
    let logs: Vec<String> = ["cofa", "average", "cofa"]
        .iter()
        .enumerate()
        .map(|(i, agg)| {
            let out = dir.path().join(format!("run{i}"));
            let o = hime(&tiny_train_args(p(&out), &["--refs", "2", "--agg", agg]));
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            std::fs::read_to_string(out.join("log.csv")).unwrap()
        })
        .collect();
    assert_ne!(logs[0], logs[1]);
    assert_eq!(logs[0], logs[2]);
}

#[test]
fn train_rejects_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hime(&tiny_train_args(p(&out), &["--rfa", "large", "--flow-source", "none"]));
    assert_eq!(code(&o), 2);
    assert_eq!(code(&hime(&tiny_train_args(p(&out), &["--loss", "gan"]))), 2);
    assert_eq!(code(&hime(&tiny_train_args(p(&out), &["--scale", "3"]))), 2);
    assert_eq!(code(&hime(&["train", "--iters", "1"])), 2);
    assert_eq!(code(&hime(&["train", "--out", p(&out), "--bogus", "1"])), 2);

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"iters": 2, "unknown_key": 1}"#).unwrap();
    assert_eq!(code(&hime(&tiny_train_args(p(&out), &["--config", p(&cfg)]))), 2);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"iters": 5, "refs": 0, "loss": "rec+cor"}"#).unwrap();
    // tiny_train_args passes --iters 3
    let o = hime(&tiny_train_args(p(&out), &["--config", p(&cfg)]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    // l_cor column filled from the file's loss setting
    assert!(!log.lines().nth(1).unwrap().split(',').nth(2).unwrap().is_empty());
}

#[test]
fn infer_accepts_any_reference_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hime(&tiny_train_args(p(&out), &["--refs", "3"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = out.join("checkpoint.hmc");
    let lr = write_image(dir.path(), "lr.png", &textured(8, 8, 0.0));
    let refs: Vec<PathBuf> = (0..5)
        .map(|i| write_image(dir.path(), &format!("ref{i}.png"), &textured(16, 16, i as f64)))
        .collect();
    let gt = write_image(dir.path(), "gt.png", &textured(16, 16, 0.0));
    let sr = dir.path().join("sr.png");
    for n in [1, 5] {
        let mut args = vec![
            "infer",
            "--checkpoint",
            p(&ck),
            "--lr",
            p(&lr),
            "--out",
            p(&sr),
            "--gt",
            p(&gt),
            "--ref",
        ];
        args.extend(refs[..n].iter().map(|r| p(r)));
        let o = hime(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("psnr") && stdout(&o).contains("ssim"));
        assert_eq!(load_image::<f64>(&sr).unwrap().shape(), [1, 3, 16, 16]);
    }
}

#[test]
fn zero_weight_checkpoint_reproduces_bicubic() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = HimeModel::<f32>::new(HimeConfig::toy(2)).unwrap();
    model.zero_reconstructor();
    let ck = dir.path().join("zero.hmc");
    save_checkpoint(&model, &ck).unwrap();
    let lr_img = textured(6, 6, 0.3);
    let lr = write_image(dir.path(), "lr.png", &lr_img);
    let r = write_image(dir.path(), "r.png", &textured(12, 12, 1.0));
    let sr = dir.path().join("sr.png");
    let o = hime(&[
        "infer",
        "--checkpoint",
        p(&ck),
        "--lr",
        p(&lr),
        "--ref",
        p(&r),
        "--out",
        p(&sr),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let expect = bicubic_resize(&lr_img.cast::<f32>(), Scale::up(2).unwrap()).unwrap();
    let expect_path = dir.path().join("expect.png");
    save_image(&expect, &expect_path).unwrap();
    assert_eq!(std::fs::read(&sr).unwrap(), std::fs::read(&expect_path).unwrap());
}

#[test]
fn infer_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let lr = write_image(dir.path(), "lr.png", &textured(6, 6, 0.0));
    let r = write_image(dir.path(), "r.png", &textured(12, 12, 1.0));
    let out = dir.path().join("sr.png");
    let missing = dir.path().join("missing.hmc");
    assert_eq!(
        code(&hime(&[
            "infer",
            "--checkpoint",
            p(&missing),
            "--lr",
            p(&lr),
            "--out",
            p(&out)
        ])),
        2
    );

    let model = HimeModel::<f32>::new(HimeConfig {
        rfa_mode: hime_core::alignment::RfaMode::Large,
        ..HimeConfig::toy(2)
    })
    .unwrap();
    let ck = dir.path().join("large.hmc");
    save_checkpoint(&model, &ck).unwrap();
    let flow = dir.path().join("f.htf");
    write_htf_file(&Tensor::<f32>::zeros([1, 2, 6, 6]), &flow).unwrap();
    let base = ["infer", "--checkpoint", p(&ck), "--lr", p(&lr), "--out", p(&out)];
    let mut args = base.to_vec();
    args.extend(["--ref", p(&r), p(&r), "--flow", p(&flow)]);
    assert_eq!(code(&hime(&args)), 2);
    let mut args = base.to_vec();
    args.extend(["--ref", p(&r), "--flow", p(&flow)]);
    assert_eq!(code(&hime(&args)), 0);
    // flows estimated when omitted
    let mut args = base.to_vec();
    args.extend(["--ref", p(&r)]);
    assert_eq!(code(&hime(&args)), 0);
}

#[test]
fn metrics_of_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", &textured(16, 16, 0.0));
    let b = write_image(dir.path(), "b.ppm", &textured(16, 16, 0.0));
    let csv = dir.path().join("m.csv");
    let o = hime(&["metrics", "--a", p(&a), "--b", p(&b), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("file,psnr,ssim"));
    let row: Vec<_> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[1], "inf");
    assert_eq!(row[2], "1.000000");
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), text);
}

#[test]
fn metrics_size_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", &textured(16, 16, 0.0));
    let b = write_image(dir.path(), "b.png", &textured(16, 12, 0.0));
    assert_eq!(code(&hime(&["metrics", "--a", p(&a), "--b", p(&b)])), 2);
}

#[test]
fn flow_of_identical_and_shifted_images() {
    let dir = tempfile::tempdir().unwrap();
    let base = Tensor::<f64>::from_fn([1, 3, 32, 32], |_, c, y, x| {
        let h = (x * 73 + y * 151 + c * 17) % 97;
        (h as f64 / 96.0 * 255.0).round() / 255.0
    });
    let src = write_image(dir.path(), "src.png", &base);
    let out = dir.path().join("flow.htf");
    let o = hime(&[
        "flow",
        "--src",
        p(&src),
        "--dst",
        p(&src),
        "--out",
        p(&out),
        "--radius",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let flow = read_htf_file(&out).unwrap().into_tensor::<f64>();
    assert_eq!(flow.shape(), [1, 2, 32, 32]);
    assert!(flow.data().iter().all(|&v| v == 0.0));

    // dst(y, x) = src(y + 1, x + 2)
    let shifted = Tensor::<f64>::from_fn([1, 3, 32, 32], |_, c, y, x| {
        base.at(0, c, (y + 1).min(31), (x + 2).min(31))
    });
    let dst = write_image(dir.path(), "dst.png", &shifted);
    let o = hime(&[
        "flow",
        "--src",
        p(&src),
        "--dst",
        p(&dst),
        "--out",
        p(&out),
        "--radius",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    let flow = read_htf_file(&out).unwrap().into_tensor::<f64>();
    let count = |c: usize, v: f64| (0..32 * 32).filter(|&i| flow.at(0, c, i / 32, i % 32) == v).count();
    assert!(count(0, 1.0) > 32 * 32 / 2);
    assert!(count(1, 2.0) > 32 * 32 / 2);

    let small = write_image(dir.path(), "small.png", &textured(16, 16, 0.0));
    assert_eq!(
        code(&hime(&["flow", "--src", p(&src), "--dst", p(&small), "--out", p(&out)])),
        2
    );
}

#[test]
fn every_subcommand_documents_its_defaults() {
    for sub in ["corrmap", "gradcheck", "train", "infer", "metrics", "flow"] {
        let o = hime(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        assert!(text.contains("--"), "{sub}");
        if matches!(sub, "corrmap" | "gradcheck" | "train" | "flow") {
            assert!(text.contains("default"), "{sub}: {text}");
        }
    }
}
