use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gndv_core::data::{make_blobs, minmax_scale};
use gndv_core::model::embedding;
use gndv_core::{checkpoint, Dataset, RandomSource};

fn gndv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gndv"))
        .args(args)
        .output()
        .expect("spawn gndv")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = gndv(args);
    assert_eq!(
        code(&out),
        0,
        "gndv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_csv(path: &Path, ds: &Dataset, with_labels: bool) {
    let mut s = String::new();
    for i in 0..ds.n() {
        let mut cells: Vec<String> = ds.x.row(i).iter().map(f64::to_string).collect();
        if with_labels {
            cells.push(ds.labels.as_ref().unwrap()[i].to_string());
        }
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn blobs_csv(dir: &Path, n: usize, d: usize, c: usize) -> (PathBuf, Dataset) {
    let ds = make_blobs(n, d, c, 20.0, &mut RandomSource::new(0)).unwrap();
    let path = dir.join(format!("blobs_{n}_{d}_{c}.csv"));
    write_csv(&path, &ds, true);
    (path, ds)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = blobs_csv(dir.path(), 60, 8, 3);
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--labels",
        "--epochs",
        "5",
        "--out-dir",
        s(&out),
    ]);
    let bytes = fs::read(out.join("model.gndv")).unwrap();
    assert_eq!(&bytes[..4], b"GNDV");
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,total,recon,kld,weight_reg,activation_reg\n"));
    assert_eq!(history.lines().count(), 6);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = train"));
    assert!(manifest.contains("seed = 0"));
}

#[test]
fn supervised_without_labels_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_blobs(20, 3, 2, 20.0, &mut RandomSource::new(0)).unwrap();
    let data = dir.path().join("x.csv");
    write_csv(&data, &ds, false);
    let out = gndv(&[
        "train",
        "--data",
        s(&data),
        "--mode",
        "sup",
        "--epochs",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels"));
}

#[test]
fn embed_shapes_and_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_blobs(3, 4, 3, 20.0, &mut RandomSource::new(1)).unwrap();
    let bare = dir.path().join("bare.csv");
    let labelled = dir.path().join("labelled.csv");
    write_csv(&bare, &ds, false);
    write_csv(&labelled, &ds, true);
    let out = dir.path().join("o");
    ok(&[
        "train",
        "--data",
        s(&bare),
        "--epochs",
        "3",
        "--hidden",
        "4",
        "--out-dir",
        s(&out),
    ]);
    let ckpt = out.join("model.gndv");

    ok(&[
        "embed",
        "--data",
        s(&bare),
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(&out),
    ]);
    let (header, rows) = read_rows(&out.join("embedding.csv"));
    assert_eq!(header, ["dim0", "dim1"]);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 2));
    let params = checkpoint::load(&ckpt).unwrap();
    let emb = embedding(&params, 3).unwrap();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.as_slice(), emb.row(i));
    }

    ok(&[
        "embed",
        "--data",
        s(&labelled),
        "--labels",
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(&out),
    ]);
    let (header, rows) = read_rows(&out.join("embedding.csv"));
    assert_eq!(header, ["dim0", "dim1", "label"]);
    assert_eq!(
        rows.iter().map(|r| r[2] as usize).collect::<Vec<_>>(),
        ds.labels.unwrap()
    );
}

#[test]
fn embed_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = blobs_csv(dir.path(), 12, 3, 3);
    let (b, _) = blobs_csv(dir.path(), 15, 3, 3);
    ok(&[
        "train",
        "--data",
        s(&a),
        "--epochs",
        "1",
        "--out-dir",
        s(dir.path()),
    ]);
    let ckpt = dir.path().join("model.gndv");
    let out = gndv(&[
        "embed",
        "--data",
        s(&b),
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn generate_counts_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = blobs_csv(dir.path(), 30, 6, 3);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--labels",
        "--epochs",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    let ckpt = dir.path().join("model.gndv");
    let gen_dir = dir.path().join("gen");
    ok(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--count",
        "10",
        "--image-h",
        "2",
        "--image-w",
        "3",
        "--out-dir",
        s(&gen_dir),
    ]);
    let (header, rows) = read_rows(&gen_dir.join("samples.csv"));
    assert_eq!(header.len(), 6);
    assert_eq!(rows.len(), 10);
    assert!(gen_dir.join("sample_009.pgm").exists());

    assert_eq!(
        code(&gndv(&[
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--count",
            "0"
        ])),
        2
    );
    assert_eq!(
        code(&gndv(&[
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--strategy",
            "bogus"
        ])),
        2
    );
    let out = gndv(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--strategy",
        "class:0",
        "--out-dir",
        s(&gen_dir),
    ]);
    assert_eq!(code(&out), 1);
}

fn centroids(ds: &Dataset) -> Vec<Vec<f64>> {
    let labels = ds.labels.as_ref().unwrap();
    let mut sums = vec![vec![0.0; ds.d()]; ds.c()];
    let mut counts = vec![0usize; ds.c()];
    for i in 0..ds.n() {
        counts[labels[i]] += 1;
        for (s, v) in sums[labels[i]].iter_mut().zip(ds.x.row(i)) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let dist = |c: &Vec<f64>| {
        c.iter()
            .zip(point)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    (0..centers.len())
        .min_by(|&a, &b| dist(&centers[a]).total_cmp(&dist(&centers[b])))
        .unwrap()
}

#[test]
fn class_conditional_samples_land_near_their_centroid() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ds) = blobs_csv(dir.path(), 200, 20, 4);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--labels",
        "--mode",
        "sup",
        "--out-dir",
        s(dir.path()),
    ]);
    ok(&[
        "generate",
        "--checkpoint",
        s(&dir.path().join("model.gndv")),
        "--strategy",
        "class:3",
        "--count",
        "100",
        "--out-dir",
        s(dir.path()),
    ]);
    let centers = centroids(&minmax_scale(&ds));
    let (_, rows) = read_rows(&dir.path().join("samples.csv"));
    let hits = rows.iter().filter(|r| nearest(r, &centers) == 3).count();
    assert!(hits >= 95, "{hits}/100 samples nearest to class 3");
}

fn pgm_size(path: &Path) -> (usize, usize, Vec<u8>) {
    let img = gndv_core::generate::read_pgm(path).unwrap();
    (img.width(), img.height(), img.pixels)
}

#[test]
fn grid_map_sizes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = blobs_csv(dir.path(), 20, 28 * 28, 2);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--labels",
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--out-dir",
        s(dir.path()),
    ]);
    let ckpt = dir.path().join("model.gndv");
    ok(&[
        "grid-map",
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(dir.path()),
    ]);
    let (w, h, _) = pgm_size(&dir.path().join("grid.pgm"));
    assert_eq!((w, h), (840, 840));

    let small = dir.path().join("small");
    ok(&[
        "grid-map",
        "--checkpoint",
        s(&ckpt),
        "--grid-res",
        "2",
        "--out-dir",
        s(&small),
    ]);
    let (w, h, pixels) = pgm_size(&small.join("grid.pgm"));
    assert_eq!((w, h), (56, 56));
    let params = checkpoint::load(&ckpt).unwrap();
    let emb = embedding(&params, 20).unwrap();
    let col = |j: usize| (0..20).map(|i| emb.get(i, j)).collect::<Vec<_>>();
    let lo = |v: Vec<f64>| v.into_iter().fold(f64::INFINITY, f64::min);
    let hi = |v: Vec<f64>| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (lo(col(0)), hi(col(0)), lo(col(1)), hi(col(1)));
    for (r, c, z) in [
        (0, 0, [x0, y1]),
        (0, 1, [x1, y1]),
        (1, 0, [x0, y0]),
        (1, 1, [x1, y0]),
    ] {
        let want: Vec<u8> = gndv_core::model::decode(&params, &z)
            .unwrap()
            .iter()
            .map(|&v| gndv_core::generate::quantize(v))
            .collect();
        let got: Vec<u8> = (0..28)
            .flat_map(|y| pixels[(r * 28 + y) * 56 + c * 28..][..28].to_vec())
            .collect();
        assert_eq!(got, want, "tile ({r},{c})");
    }

    assert_eq!(code(&gndv(&["grid-map", "--out-dir", s(dir.path())])), 2);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--labels",
        "--epochs",
        "1",
        "--hidden",
        "8",
        "--latent-dim",
        "3",
        "--out-dir",
        s(&small),
    ]);
    let out = gndv(&[
        "grid-map",
        "--checkpoint",
        s(&small.join("model.gndv")),
        "--out-dir",
        s(&small),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_on_trained_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = blobs_csv(dir.path(), 300, 50, 3);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--labels",
        "--out-dir",
        s(dir.path()),
    ]);
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--labels",
        "--checkpoint",
        s(&dir.path().join("model.gndv")),
        "--knn-k",
        "1,5",
        "--trust-k",
        "5,10",
        "--out-dir",
        s(dir.path()),
    ]);
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    let mut unique = keys.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), keys.len());
    assert_eq!(keys.len(), 2 * 4 + 2);
    let acc5: f64 = rows
        .iter()
        .find(|r| r[0] == "accuracy" && r[1] == "5")
        .unwrap()[2]
        .parse()
        .unwrap();
    assert!(acc5 >= 0.95, "5-NN accuracy {acc5}");
    assert!(dir.path().join("confusion_k5.csv").exists());
}

#[test]
fn eval_identity_embedding_is_fully_trustworthy() {
    let dir = tempfile::tempdir().unwrap();
    let ds = minmax_scale(&make_blobs(40, 5, 2, 20.0, &mut RandomSource::new(2)).unwrap());
    let data = dir.path().join("d.csv");
    write_csv(&data, &ds, false);
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--embedding",
        s(&data),
        "--knn-k",
        "--trust-k",
        "5",
        "--out-dir",
        s(dir.path()),
    ]);
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text, "metric,parameter,value\ntrustworthiness,5,1\n");

    let out = gndv(&[
        "eval",
        "--data",
        s(&data),
        "--embedding",
        s(&data),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1, "kNN on unlabelled data must fail");
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains(": ok"));
    assert_eq!(code(&gndv(&["gradcheck", "--corrupt"])), 1);
    assert_eq!(code(&gndv(&["gradcheck", "--trials", "0"])), 2);
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.txt")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_commands_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = blobs_csv(dir.path(), 40, 6, 2);
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("run{i}"));
            let o = s(&out);
            let ckpt = out.join("model.gndv");
            let c = s(&ckpt);
            let d = s(&data);
            ok(&[
                "train",
                "--data",
                d,
                "--labels",
                "--epochs",
                "4",
                "--subsample-fraction",
                "0.5",
                "--seed",
                "7",
                "--out-dir",
                o,
            ]);
            ok(&[
                "embed",
                "--data",
                d,
                "--labels",
                "--subsample-fraction",
                "0.5",
                "--seed",
                "7",
                "--checkpoint",
                c,
                "--out-dir",
                o,
            ]);
            ok(&[
                "generate",
                "--checkpoint",
                c,
                "--count",
                "5",
                "--seed",
                "3",
                "--image-h",
                "2",
                "--image-w",
                "3",
                "--out-dir",
                o,
            ]);
            ok(&[
                "grid-map",
                "--checkpoint",
                c,
                "--grid-res",
                "4",
                "--image-h",
                "3",
                "--image-w",
                "2",
                "--out-dir",
                o,
            ]);
            ok(&[
                "eval",
                "--data",
                d,
                "--labels",
                "--subsample-fraction",
                "0.5",
                "--seed",
                "7",
                "--checkpoint",
                c,
                "--knn-k",
                "3",
                "--trust-k",
                "3",
                "--out-dir",
                o,
            ]);
            artifacts(&out)
        })
        .collect();
    assert!(
        runs[0].len() >= 9,
        "{:?}",
        runs[0].iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    assert_eq!(runs[0], runs[1]);
}
