use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use varloss::datasets::{encode_idx, load_matrix, save_dump, DumpDtype};
use varloss::linalg::{column_variances, VarianceKind};
use varloss::report::{read_csv, REPORT_HEADER, SCATTER_HEADER};
use varloss::Tensor;

fn varloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varloss"))
        .args(args)
        .output()
        .expect("spawn varloss")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn arg(k: &str, v: impl AsRef<Path>) -> String {
    format!("{k}={}", v.as_ref().display())
}

/// Smooth blob images in [0,1], `side`×`side`, deterministic.
fn blobs(n: usize, side: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * side * side);
    for i in 0..n {
        let cx = (i * 7 % side) as f64;
        let cy = (i * 3 % side) as f64;
        let w = 1.0 + (i % 4) as f64;
        for r in 0..side {
            for c in 0..side {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                data.push((-d2 / (2.0 * w * w)).exp());
            }
        }
    }
    Tensor::new(vec![n, side * side], data).unwrap()
}

fn write_blobs(dir: &Path, name: &str, n: usize, side: usize) -> PathBuf {
    let p = dir.join(name);
    save_dump(&p, &blobs(n, side), DumpDtype::F64).unwrap();
    p
}

fn train(dir: &Path, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(out);
    let mut args = vec![
        "train".to_string(),
        "seed=3".into(),
        arg("out_dir", &out),
        arg("dataset", data),
        "hidden=16".into(),
        "latent_dim=4".into(),
        "batch_size=20".into(),
        "epochs=2".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(varloss(&refs));
    out
}

#[test]
fn zero_epoch_training_saves_initial_model() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 60, 6);
    let out = train(dir.path(), &data, "run", &["epochs=0"]);
    assert!(out.join("checkpoint").is_dir());
    assert!(out.join("config.txt").is_file());
    let (header, rows) = read_csv(&out.join("history.csv")).unwrap();
    assert_eq!(header[0], "epoch");
    assert!(rows.is_empty());
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 80, 6);
    let a = train(dir.path(), &data, "a", &[]);
    let b = train(dir.path(), &data, "b", &[]);
    let ha = fs::read(a.join("history.csv")).unwrap();
    assert_eq!(ha, fs::read(b.join("history.csv")).unwrap());
    assert!(!ha.contains(&b'\r'));
}

#[test]
fn config_file_is_overridden_by_command_line() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 40, 6);
    let out = dir.path().join("run");
    let cfg = dir.path().join("c.txt");
    fs::write(
        &cfg,
        format!("# comment\nseed = 1\nout_dir = {}\ndataset = {}\nepochs = 5\nhidden = 8\nlatent_dim = 2\n", out.display(), data.display()),
    )
    .unwrap();
    ok(varloss(&["train", "-c", cfg.to_str().unwrap(), "epochs=1"]));
    let (_, rows) = read_csv(&out.join("history.csv")).unwrap();
    assert_eq!(rows.len(), 1);
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 20, 4);
    let out = arg("out_dir", dir.path().join("o"));
    let ds = arg("dataset", &data);
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", &out, &ds],
        vec!["train", "seed=1", &out, &ds, "colour=blue"],
        vec!["train", "seed=1", &out, &ds, "not-a-pair"],
        vec!["train", "seed=x", &out, &ds],
        vec!["train", "seed=1", &out, &ds, "latent_dim=0"],
        vec!["train", "seed=1", &out, "dataset=/nonexistent/file.vltd"],
        vec!["train", "-c", "/nonexistent/config.txt"],
        vec!["frobnicate"],
    ];
    for c in cases {
        let o = varloss(&c);
        assert_eq!(code(&o), 2, "{c:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn divergent_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 40, 6);
    let o = varloss(&[
        "train",
        "seed=1",
        &arg("out_dir", dir.path().join("o")),
        &arg("dataset", &data),
        "hidden=16",
        "latent_dim=4",
        "epochs=3",
        "learning_rate=1e300",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn diagnose_writes_report_and_rejects_width_mismatch() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 60, 6);
    let run = train(dir.path(), &data, "run", &[]);
    let diag = dir.path().join("diag");
    ok(varloss(&[
        "diagnose",
        "seed=1",
        &arg("out_dir", &diag),
        &arg("checkpoint", run.join("checkpoint")),
        &arg("dataset", &data),
        "features=pca:4",
    ]));
    let (header, rows) = read_csv(&diag.join("report.csv")).unwrap();
    assert_eq!(header, REPORT_HEADER);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "REC");
    let (_, law) = read_csv(&diag.join("variance_law.csv")).unwrap();
    assert_eq!(law.len(), 4);

    let other = write_blobs(dir.path(), "y.vltd", 20, 4);
    let o = varloss(&[
        "diagnose",
        "seed=1",
        &arg("out_dir", dir.path().join("bad")),
        &arg("checkpoint", run.join("checkpoint")),
        &arg("dataset", &other),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn untrained_model_loses_about_the_data_variance() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    ok(varloss(&[
        "train",
        "seed=5",
        &arg("out_dir", &out),
        "dataset=mnist10k",
        "dataset_limit=500",
        "epochs=0",
    ]));
    let diag = dir.path().join("diag");
    ok(varloss(&[
        "diagnose",
        "seed=5",
        &arg("out_dir", &diag),
        &arg("checkpoint", out.join("checkpoint")),
        "dataset=mnist10k",
        "dataset_limit=500",
        "features=identity",
    ]));
    let x = load_matrix(&varloss::datasets::bundled_mnist_images()).unwrap();
    let x = x.select_rows(&(0..500).collect::<Vec<_>>());
    let v = column_variances(&x, VarianceKind::Population).unwrap();
    let mean_var = v.iter().sum::<f64>() / v.len() as f64;
    let (header, rows) = read_csv(&diag.join("report.csv")).unwrap();
    let col = header.iter().position(|h| h == "loss_per_feature").unwrap();
    let loss: f64 = rows[0][col].parse().unwrap();
    assert!((loss - mean_var).abs() <= 0.3 * mean_var, "loss {loss} vs variance {mean_var}");
}

fn scatter_args(out: &Path, data: &Path, pca_ks: &str) -> Vec<String> {
    vec![
        "scatter".into(),
        "seed=2".into(),
        arg("out_dir", out),
        arg("dataset", data),
        "epochs=1".into(),
        "batch_size=20".into(),
        "grid_latent_dims=2,4".into(),
        "grid_depths=1".into(),
        "grid_betas=1".into(),
        "grid_width=16".into(),
        format!("pca_ks={pca_ks}"),
        "threads=2".into(),
    ]
}

fn run_scatter(out: &Path, data: &Path, pca_ks: &str) -> Output {
    let a = scatter_args(out, data, pca_ks);
    varloss(&a.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn scatter_is_deterministic_and_pca_cells_are_exact() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 60, 5);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(run_scatter(&a, &data, "1,3,25"));
    ok(run_scatter(&b, &data, "1,3,25"));
    let bytes = fs::read(a.join("scatter.csv")).unwrap();
    assert_eq!(bytes, fs::read(b.join("scatter.csv")).unwrap());

    let (header, rows) = read_csv(&a.join("scatter.csv")).unwrap();
    assert_eq!(header, SCATTER_HEADER);
    assert_eq!(rows.len(), 5);
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    for r in rows.iter().filter(|r| r[col("kind")] == "pca") {
        let mse: f64 = r[col("mse")].parse().unwrap();
        let loss: f64 = r[col("loss_per_feature")].parse().unwrap();
        assert!((mse - loss).abs() <= 1e-8, "{r:?}");
    }
}

#[test]
fn scatter_with_failing_cells_exits_4() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 40, 4);
    let out = dir.path().join("s");
    let o = run_scatter(&out, &data, "2,99");
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("scatter.csv")).unwrap();
    let status = header.iter().position(|h| h == "status").unwrap();
    assert_eq!(rows.iter().filter(|r| r[status] != "ok").count(), 1);
}

#[test]
fn twostage_generate_and_metric_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path(), "x.vltd", 80, 5);
    let out = dir.path().join("ts");
    ok(varloss(&[
        "twostage",
        "seed=4",
        &arg("out_dir", &out),
        &arg("dataset", &data),
        "hidden=16",
        "latent_dim=3",
        "epochs=2",
        "batch_size=20",
        "second_hidden=8",
        "second_epochs=2",
        "n_generate=50",
        "dump_samples=10",
        "features=pca:4",
    ]));
    let (header, rows) = read_csv(&out.join("report.csv")).unwrap();
    assert_eq!(header, REPORT_HEADER);
    assert_eq!(rows.len(), 9);
    for stage in ["gen1", "gen2"] {
        for mode in ["none", "latent", "pixel", "both"] {
            assert!(out.join(format!("samples/{stage}_{mode}.vltd")).is_file());
            assert!(out.join(format!("samples/{stage}_{mode}.factors.txt")).is_file());
        }
    }

    let model = out.join("model");
    let gen = dir.path().join("gen");
    ok(varloss(&[
        "generate",
        "seed=9",
        &arg("out_dir", &gen),
        &arg("model", &model),
        "n=30",
        "renorm=both",
    ]));
    let samples = load_matrix(&gen.join("samples.vltd")).unwrap();
    assert_eq!(samples.shape(), &[30, 25]);
    assert!(samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let factors = fs::read_to_string(gen.join("factors.txt")).unwrap();
    assert!(factors.contains("latent") && factors.contains("pixel"));

    let m = dir.path().join("m");
    let o = ok(varloss(&[
        "metric",
        "seed=1",
        &arg("out_dir", &m),
        &arg("real", &data),
        &arg("generated", gen.join("samples.vltd")),
        "features=pca:4",
    ]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("distance="));
    assert!(m.join("metric.csv").is_file());

    // A model without a second stage cannot produce second-stage samples.
    let manifest = model.join("twostage.txt");
    let text = fs::read_to_string(&manifest).unwrap().replace("has_second=true", "has_second=false");
    fs::write(&manifest, text).unwrap();
    let o = varloss(&["generate", "seed=9", &arg("out_dir", dir.path().join("g2")), &arg("model", &model)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    ok(varloss(&[
        "generate",
        "seed=9",
        &arg("out_dir", dir.path().join("g1")),
        &arg("model", &model),
        "stage=gen1",
        "n=5",
    ]));
}

#[test]
fn metric_of_a_file_against_itself_is_zero() {
    let dir = TempDir::new().unwrap();
    let side = 4;
    let pixels: Vec<u8> = (0..30 * side * side).map(|i| (i * 37 % 256) as u8).collect();
    let idx = dir.path().join("x.idx");
    fs::write(&idx, encode_idx(&[30, side, side], &pixels).unwrap()).unwrap();
    let o = ok(varloss(&["metric", "seed=1", &arg("real", &idx), &arg("generated", &idx)]));
    let out = String::from_utf8_lossy(&o.stdout);
    let d: f64 = out
        .split_whitespace()
        .find_map(|t| t.strip_prefix("distance="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(d.abs() <= 1e-8, "{out}");
}

fn summary(path: &Path) -> Vec<(String, f64)> {
    let (header, rows) = read_csv(path).unwrap();
    assert_eq!(rows.len(), 1);
    header.into_iter().zip(rows[0].iter().map(|v| v.parse().unwrap_or(f64::NAN))).collect()
}

fn field(s: &[(String, f64)], name: &str) -> f64 {
    s.iter().find(|(k, _)| k == name).unwrap_or_else(|| panic!("no column {name}")).1
}

#[test]
fn demos_write_consistent_summaries() {
    let dir = TempDir::new().unwrap();
    let pca = dir.path().join("pca");
    ok(varloss(&["demo-pca", "seed=7", &arg("out_dir", &pca)]));
    assert!(pca.join("pca_points.csv").is_file());
    let s = summary(&pca.join("pca_summary.csv"));
    assert!((field(&s, "mse") - field(&s, "loss_per_feature")).abs() <= 1e-8);
    assert!(field(&s, "theorem_gap") <= 1e-8);

    let sm = dir.path().join("sm");
    ok(varloss(&["demo-smoothing", "seed=7", &arg("out_dir", &sm)]));
    let s = summary(&sm.join("smoothing_summary.csv"));
    assert!(field(&s, "mean_gap").abs() <= 1e-12);
    assert!(field(&s, "mse") < field(&s, "variance_loss"));
}
