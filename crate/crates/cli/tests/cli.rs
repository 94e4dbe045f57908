use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use chrono::DateTime;
use gbwb_core::annotation::{write_records, AnnotationRecord, BBox};
use gbwb_core::dataset::{load_image, read_manifest, Split};
use gbwb_core::mapfile::{quantize, read_map, write_map};
use gbwb_core::saliency::{gb_map, ChannelReduction, SaliencyMap};
use gbwb_core::{Checkpoint, NetworkSpec, Tensor};
use serde_json::Value;

fn gbwb<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_gbwb"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    heads: PathBuf,
    model: PathBuf,
}

/// Synthetic dataset plus a two-phase model, built once for the file.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(gbwb(["synth", "--out", s(&data), "--seed", "0"]));
        let heads = dir.path().join("heads.gbwb");
        ok(gbwb([
            "train", "--data", s(&data), "--arch", s(&data.join("arch.txt")), "--phase", "heads_only",
            "--epochs", "10", "--out", s(&heads),
        ]));
        let model = dir.path().join("model.gbwb");
        ok(gbwb(["train", "--data", s(&data), "--resume", s(&heads), "--epochs", "20", "--out", s(&model)]));
        Trained { data, heads, model, _dir: dir }
    })
}

#[test]
fn synth_writes_dataset_and_arch() {
    let t = trained();
    let manifest = read_manifest(&t.data).unwrap();
    assert_eq!(manifest.len(), 100);
    assert_eq!(manifest.iter().filter(|e| e.split == Split::Test).count(), 20);
    let spec: NetworkSpec = fs::read_to_string(t.data.join("arch.txt")).unwrap().parse().unwrap();
    assert_eq!(spec.class_count(), 4);
}

#[test]
fn training_writes_sidecars_and_log() {
    let t = trained();
    let ck = Checkpoint::load(&t.model).unwrap();
    assert_eq!(ck.spec().class_count(), 4);
    let mut arch = t.model.as_os_str().to_owned();
    arch.push(".arch");
    assert!(Path::new(&arch).exists());
    let mut log = t.model.as_os_str().to_owned();
    log.push(".log.jsonl");
    let lines: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 20);
    assert!(lines.iter().all(|l| l["loss"].as_f64().is_some_and(f64::is_finite)));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.gbwb");
    ok(gbwb(["train", "--data", s(&t.data), "--resume", s(&t.heads), "--epochs", "20", "--out", s(&again)]));
    assert_eq!(fs::read(&again).unwrap(), fs::read(&t.model).unwrap());
}

#[test]
fn zero_epochs_leaves_checkpoint_unchanged() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("same.gbwb");
    ok(gbwb(["train", "--data", s(&t.data), "--resume", s(&t.model), "--epochs", "0", "--out", s(&out)]));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&t.model).unwrap());
}

#[test]
fn train_rejects_mismatched_arch() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("other.txt");
    fs::write(&arch, "input c=1 h=16 w=16\nclasses a b c d\nflatten\ndense u=4 head\nsoftmax\n").unwrap();
    let out = gbwb([
        "train", "--data", s(&t.data), "--resume", s(&t.model), "--arch", s(&arch), "--out",
        s(&dir.path().join("x.gbwb")),
    ]);
    assert!(!out.status.success());
}

fn first_test_image(t: &Trained) -> (PathBuf, String, String) {
    let entry = read_manifest(&t.data)
        .unwrap()
        .into_iter()
        .find(|e| e.split == Split::Test)
        .unwrap();
    (t.data.join(&entry.class).join(format!("{}.png", entry.image_id)), entry.image_id, entry.class)
}

#[test]
fn saliency_map_round_trips_through_disk() {
    let t = trained();
    let (image, id, class) = first_test_image(t);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("map.pgm");
    ok(gbwb([
        "saliency", "--model", s(&t.model), "--image", s(&image), "--class", &class, "--mask-top", "0.05", "--out",
        s(&out),
    ]));
    let ck = Checkpoint::load(&t.model).unwrap();
    let y = ck.spec().resolve_class(&class).unwrap();
    let input = load_image(&image, 1).unwrap();
    let expected = quantize(&gb_map(&ck, &input, y, &id, ChannelReduction::Sum).unwrap()).unwrap();
    let read = read_map(&out).unwrap();
    assert_eq!(read, expected);
    assert!(dir.path().join("map.mask.png").exists());
}

#[test]
fn saliency_dataset_mode_maps_every_test_image() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("maps");
    ok(gbwb(["saliency", "--model", s(&t.model), "--image", s(&t.data), "--out", s(&out)]));
    let pgm = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgm, 20);

    let agg = dir.path().join("agg");
    ok(gbwb([
        "aggregate", "--mode", "classifier", "--maps-dir", s(&out), "--model", s(&t.model), "--out", s(&agg),
    ]));
    let summary: Value = serde_json::from_slice(&fs::read(agg.join("classifier_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["classes"].as_array().unwrap().len(), 4);
    let r2 = summary["consistency"]["r_squared"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r2));
}

#[test]
fn saliency_rejects_equal_diff_class_and_unknown_class() {
    let t = trained();
    let (image, _, class) = first_test_image(t);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.pgm");
    let same = gbwb([
        "saliency", "--model", s(&t.model), "--image", s(&image), "--class", &class, "--diff-class", &class, "--out",
        s(&out),
    ]);
    assert!(!same.status.success());
    assert!(!out.exists());
    let unknown = gbwb(["saliency", "--model", s(&t.model), "--image", s(&image), "--class", "giraffe", "--out", s(&out)]);
    assert!(!unknown.status.success());
}

#[test]
fn saliency_difference_map_is_written() {
    let t = trained();
    let (image, _, _) = first_test_image(t);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.pgm");
    ok(gbwb([
        "saliency", "--model", s(&t.model), "--image", s(&image), "--class", "0", "--diff-class", "1", "--out", s(&out),
    ]));
    let map = read_map(&out).unwrap();
    assert!(map.values().data().iter().all(|&v| v >= 0.0));
}

fn record(person: &str, bbox: BBox, label: &str, n: usize) -> AnnotationRecord {
    AnnotationRecord {
        response_id: format!("r{n}"),
        worker_id: "w".into(),
        image_id: format!("{person}_0"),
        person_id: person.into(),
        bbox,
        label: label.into(),
        created_at: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
    }
}

fn write_store(path: &Path, records: &[AnnotationRecord]) {
    let mut bytes = Vec::new();
    write_records(&mut bytes, records).unwrap();
    fs::write(path, bytes).unwrap();
}

#[test]
fn human_histogram_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let records = vec![
        record("a", BBox::new(0, 0, 4, 4), "eyes", 0),
        record("a", BBox::new(2, 2, 8, 8), "nose", 1),
        record("a", BBox::new(1, 0, 3, 9), "eyes", 2),
        record("b", BBox::new(0, 0, 10, 10), "lips", 3),
    ];
    write_store(&store, &records);
    let out = dir.path().join("out");
    ok(gbwb(["aggregate", "--mode", "human", "--annotations", s(&store), "--size", "10x10", "--out", s(&out)]));
    let hist: Value = serde_json::from_slice(&fs::read(out.join("label_histogram.json")).unwrap()).unwrap();
    let weights = hist.as_object().unwrap();
    let total: f64 = weights.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!((weights["lips"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(out.join("human_a.heatmap.png").exists());
    assert!(out.join("human_b.highlight.png").exists());
    assert!(fs::read_to_string(out.join("label_histogram.csv")).unwrap().starts_with("label,weight\n"));
}

#[test]
fn human_mode_rejects_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("empty.jsonl");
    fs::write(&store, "").unwrap();
    let out = gbwb([
        "aggregate", "--mode", "human", "--annotations", s(&store), "--size", "10x10", "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn compare_identical_highlights_overlap_fully() {
    let (w, h) = (10usize, 10usize);
    let dir = tempfile::tempdir().unwrap();
    // Three boxes on a 3x3 core plus one full-frame box: only the core
    // rises above the 90th percentile count.
    let records: Vec<_> = (0..3)
        .map(|n| record("0", BBox::new(2, 3, 5, 6), "eyes", n))
        .chain([record("0", BBox::new(0, 0, 10, 10), "eyes", 9)])
        .collect();
    let store = dir.path().join("store.jsonl");
    write_store(&store, &records);
    // Classifier map with the same 9 pixels on top.
    let values = Tensor::from_fn([h, w], |i| {
        let (y, x) = (i / w, i % w);
        if (3..6).contains(&y) && (2..5).contains(&x) {
            2.0
        } else {
            (i as f32) / 1000.0
        }
    })
    .unwrap();
    let maps = dir.path().join("maps");
    fs::create_dir_all(&maps).unwrap();
    write_map(&maps.join("m.pgm"), &SaliencyMap::new("m", 0, values).unwrap()).unwrap();
    let out = dir.path().join("cmp");
    ok(gbwb([
        "aggregate", "--mode", "compare", "--annotations", s(&store), "--maps-dir", s(&maps), "--size", "10x10",
        "--mask-top", "0.09", "--highlight-top", "0.09", "--out", s(&out),
    ]));
    let report: Value = serde_json::from_slice(&fs::read(out.join("overlap.json")).unwrap()).unwrap();
    let score = &report["scores"][0];
    assert_eq!(score["person"], "0");
    assert_eq!(score["human_pixels"], 9);
    assert_eq!(score["jaccard"].as_f64(), Some(1.0));
    assert_eq!(report["mean_jaccard"].as_f64(), Some(1.0));
}

#[test]
fn serve_rejects_empty_pool() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir_all(&images).unwrap();
    let out = gbwb([
        "serve", "--listen", "127.0.0.1:0", "--images", s(&images), "--store", s(&dir.path().join("s.jsonl")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn serve_answers_task_requests() {
    let t = trained();
    let (image, _, _) = first_test_image(t);
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images").join("alice");
    fs::create_dir_all(&images).unwrap();
    fs::copy(&image, images.join("alice_1.png")).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_gbwb"))
        .args([
            "serve", "--listen", "127.0.0.1:0", "--images", s(&dir.path().join("images")), "--store",
            s(&dir.path().join("s.jsonl")), "--seed", "3",
        ])
        .env("RUST_LOG", "warn")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    let addr = loop {
        line.clear();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "server exited early");
        if let Some(rest) = line.trim().strip_prefix("listening on http://") {
            break rest.to_string();
        }
    };
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/task HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body = &response[response.find("\r\n\r\n").unwrap() + 4..];
    let task: Value = serde_json::from_str(body).unwrap();
    assert_eq!(task["image_id"], "alice_1");
    assert_eq!(task["person_id"], "alice");
    assert_eq!(task["image_size"], serde_json::json!([16, 16]));
    assert_eq!(task["labels"].as_array().unwrap().len(), 11);
}
