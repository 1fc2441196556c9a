use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stnlab::cli::{RunManifest, CELLS_HEADER, CHECKPOINT_FILE};
use stnlab::data::{write_mnist_idx, LabeledDataset};
use stnlab::experiments::{read_strict_csv, strict_number, HISTORY_HEADER, SWEEP_HEADER};
use stnlab::models::{self, parse_layers, LocSpec, ModelInstance, NetworkSpec};
use stnlab::Tensor;

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn stnlab(args: &[&str], data: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stnlab"))
        .args(args)
        .env("STNLAB_DATA", data)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY: &str = "\
# tiny desk run
seed = 5
model = stn_sl1
epochs = 1
batch_size = 16
learning_rate = 0.001
optimizer = adam
augmentation = rotation
augmentation_range = 45
train_size = 64
test_size = 32
backbone = small
";

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("seed = 5\n", ""));
    let out = stnlab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &mnist_dir());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("`seed`"), "{}", text(&out.stderr));
}

#[test]
fn unknown_key_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}dropout = 0.5\n"));
    let out = stnlab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &mnist_dir());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("line 13"), "{}", text(&out.stderr));
}

#[test]
fn train_writes_verified_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = stnlab(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], &mnist_dir());
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        let m = RunManifest::load(&out_dir, "train").unwrap();
        assert_eq!(m.files.len(), 3);
        assert!(m.verify(&out_dir).is_empty());
        read_strict_csv(&fs::read_to_string(out_dir.join("history.csv")).unwrap(), HISTORY_HEADER).unwrap();
        hashes.push(m.files.clone());
    }
    assert_eq!(hashes[0], hashes[1]);
    let ckpt = dir.path().join("a").join(CHECKPOINT_FILE);
    assert_eq!(models::load(&ckpt).unwrap().spec().name(), "stn_sl1");
}

/// Images whose only lit pixel encodes the label, and a dense layer that
/// reads it back.
fn oracle_fixture(dir: &Path) -> PathBuf {
    let n = 30;
    let mut img = Tensor::zeros([n, 1, 4, 4]);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 10).collect();
    for (i, &l) in labels.iter().enumerate() {
        img.set(&[i, 0, l / 4, l % 4], 1.0);
    }
    let ds = LabeledDataset::new(img, labels, 10).unwrap();
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    for split in ["train", "t10k"] {
        write_mnist_idx(
            &ds,
            data.join(format!("{split}-images-idx3-ubyte")),
            data.join(format!("{split}-labels-idx1-ubyte")),
        )
        .unwrap();
    }
    let spec = NetworkSpec::named("cnn", (1, 4, 4), parse_layers("dense(10)").unwrap(), LocSpec::default()).unwrap();
    let mut model = ModelInstance::build(&spec, 0).unwrap();
    let w = model.params().id("backbone.dense1.weight").unwrap();
    let mut eye = Tensor::zeros([10, 16]);
    for k in 0..10 {
        eye.set(&[k, k], 1.0);
    }
    *model.params_mut().get_mut(w) = eye;
    let b = model.params().id("backbone.dense1.bias").unwrap();
    *model.params_mut().get_mut(b) = Tensor::zeros([10]);
    let ckpt = dir.join("oracle").join("model.ckpt");
    fs::create_dir_all(ckpt.parent().unwrap()).unwrap();
    models::save(&model, &ckpt).unwrap();
    data
}

#[test]
fn eval_of_oracle_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = oracle_fixture(dir.path());
    let ckpt = dir.path().join("oracle/model.ckpt");
    let out = stnlab(&["eval", "--checkpoint", ckpt.to_str().unwrap()], &data);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), "error_rate,0.0000\n");
    let confusion = fs::read_to_string(dir.path().join("oracle/confusion.csv")).unwrap();
    let header = std::iter::once("true".to_string()).chain((0..10).map(|c| format!("pred{c}"))).collect::<Vec<_>>().join(",");
    assert_eq!(read_strict_csv(&confusion, &header).unwrap().len(), 10);
}

#[test]
fn sweep_of_identity_init_model_predicts_zero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::named("stn_c0", (1, 28, 28), parse_layers("conv(4) relu pool dense(10)").unwrap(), LocSpec::default()).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    models::save(&ModelInstance::build(&spec, 1).unwrap(), &ckpt).unwrap();
    let out = stnlab(&["sweep", "--checkpoint", ckpt.to_str().unwrap()], &mnist_dir());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rows = read_strict_csv(&fs::read_to_string(dir.path().join("sweep.csv")).unwrap(), SWEEP_HEADER).unwrap();
    assert_eq!(rows.len(), 7200);
    assert!(rows.iter().all(|r| strict_number(&r[2]) == Some(0.0) && strict_number(&r[1]).is_some()));
}

#[test]
fn compare_tabulates_medians() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}models = cnn,stn_c0\ncolumns = rotation:45:28,translation:4:32\n"));
    let out_dir = dir.path().join("cmp");
    let out = stnlab(
        &["compare", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seeds", "1,2"],
        &mnist_dir(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let results = read_strict_csv(&fs::read_to_string(out_dir.join("results.csv")).unwrap(), "network,rotation,translation").unwrap();
    assert_eq!(results.len(), 2);
    let cells = read_strict_csv(&fs::read_to_string(out_dir.join("cells.csv")).unwrap(), CELLS_HEADER).unwrap();
    assert_eq!(cells.len(), 8);
    let errs: Vec<f64> = cells.iter().filter(|c| c[0] == "cnn" && c[1] == "rotation").map(|c| strict_number(&c[3]).unwrap()).collect();
    let median = (errs[0] + errs[1]) / 2.0;
    assert!((strict_number(&results[0][1]).unwrap() - median).abs() < 1e-6);
    assert!(RunManifest::load(&out_dir, "compare").unwrap().verify(&out_dir).is_empty());
}

#[test]
fn align_glyph_demonstration() {
    let dir = tempfile::tempdir().unwrap();
    let out = stnlab(&["align", "--glyphs", "--out", dir.path().to_str().unwrap()], &mnist_dir());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let pgm = fs::read(dir.path().join("grid.pgm")).unwrap();
    let (w, h) = (8 * (25 + 4), 3 * (25 + 4));
    assert_eq!(pgm.len(), format!("P5\n{w} {h}\n255\n").len() + w * h);
    assert!(text(&out.stdout).contains("channel_swap_residual,0.0000"));
}

#[test]
fn failure_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = stnlab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &dir.path().join("nope"));
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"STNLABCK\x01\x00").unwrap();
    let out = stnlab(&["eval", "--checkpoint", bad.to_str().unwrap()], &mnist_dir());
    assert_eq!(out.status.code(), Some(5));

    let diverge = write_config(
        dir.path(),
        &TINY.replace("learning_rate = 0.001", "learning_rate = 1e300").replace("optimizer = adam", "optimizer = sgd_momentum"),
    );
    let out = stnlab(&["train", "--config", diverge.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &mnist_dir());
    assert_eq!(out.status.code(), Some(4), "{}", text(&out.stderr));

    let out = stnlab(&["bogus"], &mnist_dir());
    assert_eq!(out.status.code(), Some(2));
}
