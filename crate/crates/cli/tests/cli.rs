use std::path::Path;
use std::process::{Command, Output};

fn xlsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlsr")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xlsr(args);
    assert!(out.status.success(), "xlsr {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const QUICK: [&str; 7] = [
    "patch_size=12",
    "epochs=3",
    "minibatches_per_epoch=4",
    "batch_size=2",
    "lr_peak_epoch=1",
    "train_images=3",
    "val_images=2",
];

fn quick(mut args: Vec<&str>) -> Vec<&str> {
    for kv in QUICK {
        args.extend(["--config", kv]);
    }
    args
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = xlsr(&["train", "--data", p(&dir.path().join("nowhere")), "--out", p(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("hr"), "{err}");
}

#[test]
fn bad_override_is_rejected() {
    let out = xlsr(&["inspect", "--config", "no_such_key=1"]);
    assert!(!out.status.success());
}

#[test]
fn inspect_reports_the_default_model() {
    let text = ok(&["inspect"]);
    assert!(text.contains("total parameters\t21083"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("lint\tpass")), "{text}");
}

#[test]
fn train_quantize_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    ok(&["synth", "--out", p(&data), "--count", "5", "--size", "48"]);

    ok(&quick(vec!["train", "--data", p(&data), "--out", p(&run), "--seed", "3"]));
    let ckpt = run.join("best.ckpt");
    assert!(ckpt.is_file() && run.join("train_log.tsv").is_file() && run.join("run_manifest.json").is_file());

    ok(&quick(vec!["quantize", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&run)]));
    let qmodel = run.join("model.qmodel");
    assert!(qmodel.is_file() && run.join("quant_report.tsv").is_file());

    let lr = dir.path().join("lr.png");
    xlsr::image::write_png(&lr, &xlsr::synth::synth_image(64, 64, 9, 0)).unwrap();
    for (model, name) in [(&ckpt, "float.png"), (&qmodel, "uint8.png")] {
        let sr = dir.path().join(name);
        ok(&["infer", "--model", p(model), "--input", p(&lr), "--output", p(&sr)]);
        let img = xlsr::image::read_png(&sr).unwrap();
        assert_eq!((img.height, img.width), (192, 192));
    }

    ok(&quick(vec!["eval", "--model", p(&ckpt), "--uint8", p(&qmodel), "--data", p(&data), "--out", p(&run)]));
    let cmp = std::fs::read_to_string(run.join("comparison.tsv")).unwrap();
    assert_eq!(cmp.lines().filter(|l| !l.starts_with('#')).count(), 2, "{cmp}");

    let text = ok(&["inspect", "--model", p(&qmodel)]);
    assert!(text.contains("conv_in.weight"), "{text}");
}
