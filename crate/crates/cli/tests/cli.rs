use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn protonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protonet")).args(args).output().expect("binary runs")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny deterministic generator so fixtures need no RNG crate.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let (u, v) = (self.next().max(1e-12), self.next());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }
}

struct Row {
    path: String,
    class: &'static str,
    video: String,
    probe: &'static str,
}

fn write_manifest(dir: &Path, rows: &[Row]) -> PathBuf {
    let mut text = String::from("path,class,video_id,probe,luss\n");
    for r in rows {
        writeln!(text, "{},{},{},{},", r.path, r.class, r.video, r.probe).unwrap();
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, text).unwrap();
    path
}

/// Stripe images: horizontal for the first class, vertical for the others.
fn image_fixture(dir: &Path, classes: &[&'static str], videos: usize, frames: usize, size: u32) -> PathBuf {
    fs::create_dir_all(dir.join("img")).unwrap();
    let mut rng = Lcg(7);
    let mut rows = Vec::new();
    for (k, &class) in classes.iter().enumerate() {
        for v in 0..videos {
            for f in 0..frames {
                let phase = (rng.next() * 4.0) as u32;
                let img = image::GrayImage::from_fn(size, size, |x, y| {
                    let along = if k == 0 { y } else { x };
                    let base = if (along + phase) % 4 < 2 { 200.0 } else { 40.0 };
                    image::Luma([(base + 20.0 * rng.normal()).clamp(0.0, 255.0) as u8])
                });
                let rel = format!("img/{class}_{v}_{f}.png");
                img.save(dir.join(&rel)).unwrap();
                rows.push(Row { path: rel, class, video: format!("{class}-v{v}"), probe: "convex" });
            }
        }
    }
    write_manifest(dir, &rows)
}

/// Gaussian feature vectors, class `k` centred at `k * sep` in every coordinate.
fn feature_fixture(dir: &Path, per_video: usize, videos: usize, sep: f64) -> PathBuf {
    fs::create_dir_all(dir.join("feat")).unwrap();
    let mut rng = Lcg(11);
    let mut rows = Vec::new();
    for (k, class) in ["covid", "normal"].into_iter().enumerate() {
        for v in 0..videos {
            for f in 0..per_video {
                let values: Vec<String> = (0..8).map(|_| format!("{:.5}", k as f64 * sep + rng.normal())).collect();
                let rel = format!("feat/{class}_{v}_{f}.txt");
                fs::write(dir.join(&rel), values.join(" ")).unwrap();
                rows.push(Row { path: rel, class, video: format!("{class}-v{v}"), probe: "convex" });
            }
        }
    }
    write_manifest(dir, &rows)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn classes_in(csv: &Path) -> std::collections::BTreeSet<String> {
    fs::read_to_string(csv).unwrap().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect()
}

const FOUR: [&str; 4] = ["covid", "non_covid", "normal", "other"];

#[test]
fn prepare_remaps_two_way_and_drops_other_for_three_way() {
    let tmp = TempDir::new().unwrap();
    let manifest = image_fixture(tmp.path(), &FOUR, 3, 2, 8);
    let cfg = write_config(tmp.path(), &format!("[data]\nmanifest = {:?}\n", s(&manifest)));

    let two = tmp.path().join("two");
    let stdout = ok(protonet(&["prepare", "--config", s(&cfg), "--ways", "2", "--out", s(&two)]));
    assert!(stdout.contains("negative"), "{stdout}");
    let mut seen = classes_in(&two.join("train.csv"));
    seen.extend(classes_in(&two.join("test.csv")));
    assert_eq!(seen, ["covid", "negative"].map(String::from).into());
    let rows = |p: &Path| fs::read_to_string(p).unwrap().lines().count() - 1;
    assert_eq!(rows(&two.join("train.csv")) + rows(&two.join("test.csv")), 24);

    let three = tmp.path().join("three");
    ok(protonet(&["prepare", "--config", s(&cfg), "--ways", "3", "--out", s(&three)]));
    for split in ["train.csv", "test.csv"] {
        let text = fs::read_to_string(three.join(split)).unwrap();
        assert!(!text.contains(",other,"), "{split} still has other rows");
    }
    assert_eq!(rows(&three.join("train.csv")) + rows(&three.join("test.csv")), 18);
}

#[test]
fn prepare_is_deterministic_and_echo_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let manifest = image_fixture(tmp.path(), &FOUR, 4, 2, 8);
    let cfg = write_config(tmp.path(), &format!("seed = 5\n[data]\nmanifest = {:?}\n", s(&manifest)));
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(protonet(&["prepare", "--config", s(&cfg), "--ways", "4", "--out", s(&a)]));
    ok(protonet(&["prepare", "--config", s(&cfg), "--ways", "4", "--out", s(&b)]));
    for f in ["train.csv", "test.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // Re-using the echoed config reproduces the run.
    let echo = a.join("effective_config.toml");
    ok(protonet(&["prepare", "--config", s(&echo), "--out", s(&c)]));
    for f in ["train.csv", "test.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn effective_config_echoes_training_defaults() {
    let tmp = TempDir::new().unwrap();
    let manifest = image_fixture(tmp.path(), &FOUR, 2, 1, 8);
    let cfg = write_config(tmp.path(), &format!("[data]\nmanifest = {:?}\n", s(&manifest)));
    let out = tmp.path().join("run");
    ok(protonet(&["prepare", "--config", s(&cfg), "--ways", "4", "--out", s(&out)]));
    let echo: toml::Table = fs::read_to_string(out.join("effective_config.toml")).unwrap().parse().unwrap();
    let train = echo["train"].as_table().unwrap();
    assert_eq!(train["epochs"].as_integer(), Some(10));
    assert_eq!(train["episodes_per_epoch"].as_integer(), Some(200));
    assert_eq!(train["lr0"].as_float(), Some(0.001));
    assert_eq!(echo["scenario"]["ways"].as_integer(), Some(4));
}

#[test]
fn empty_class_after_filtering_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let mut rows = Vec::new();
    for (class, probe) in [("covid", "linear"), ("normal", "convex")] {
        for v in 0..2 {
            rows.push(Row { path: format!("{class}{v}.png"), class, video: format!("{class}{v}"), probe });
        }
    }
    let manifest = write_manifest(tmp.path(), &rows);
    let cfg = write_config(tmp.path(), &format!("[data]\nmanifest = {:?}\n", s(&manifest)));
    let out = protonet(&["prepare", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn usage_errors_exit_one() {
    let out = protonet(&["train", "--ways", "many"]);
    assert_eq!(out.status.code(), Some(1));
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nnot_a_key = 1\n");
    assert_eq!(protonet(&["prepare", "--config", s(&cfg)]).status.code(), Some(1));
}

const SWEEP: &str = "[5, 10, 20, 30, 40, 50, 75, 100]";

fn blob_run(tmp: &Path) -> (PathBuf, PathBuf) {
    let manifest = feature_fixture(tmp, 40, 8, 6.0);
    let cfg = write_config(
        tmp,
        &format!(
            "seed = 3\n\
             [data]\nmanifest = {:?}\ntrain_fraction = 0.5\naugment = false\n\
             [encoder]\narchetype = \"frozen-embed\"\n\
             [train]\nepochs = 3\nepisodes_per_epoch = 40\nlr0 = 0.01\n\
             [eval]\nepisodes = 20\nshots = {SWEEP}\n",
            s(&manifest)
        ),
    );
    let out = tmp.join("run");
    ok(protonet(&["prepare", "--config", s(&cfg), "--out", s(&out)]));
    (cfg, out)
}

#[test]
fn blob_features_train_evaluate_and_refuse_mismatches() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = blob_run(tmp.path());
    let stdout = ok(protonet(&["train", "--config", s(&cfg), "--ways", "2", "--shots", "5", "--out", s(&out)]));
    assert!(stdout.contains("10 support + 10 query per episode"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["support_per_episode"], 10);
    assert_eq!(summary["query_per_episode"], 10);
    let final_loss = summary["final_loss"].as_f64().unwrap();
    assert!(final_loss < 0.05, "final loss {final_loss}");
    assert!(out.join("best.ckpt").exists());
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 4);

    let table = ok(protonet(&["eval", "--config", s(&cfg), "--out", s(&out)]));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 8, "{table}");
    for (row, shots) in rows.iter().zip([5, 10, 20, 30, 40, 50, 75, 100]) {
        assert!(row.starts_with(&format!("2-way | {shots} | frozen-embed | 1.0000 |")), "{row}");
    }
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), table);
    let jsonl = fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["class_names"][first["positive_class"].as_u64().unwrap() as usize], "covid");

    ok(protonet(&["eval", "--config", s(&cfg), "--out", s(&out)]));
    assert_eq!(fs::read_to_string(out.join("report.jsonl")).unwrap(), jsonl, "evaluation is deterministic");

    let wrong = protonet(&["eval", "--config", s(&cfg), "--out", s(&out), "--encoder", "conv-net"]);
    assert_eq!(wrong.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("`archetype`"));

    let bad_cfg = write_config(tmp.path(), &fs::read_to_string(&cfg).unwrap().replace("[encoder]\n", "[encoder]\nembed_dim = 3\n"));
    let wrong = protonet(&["eval", "--config", s(&bad_cfg), "--out", s(&out)]);
    assert_eq!(wrong.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("`embed_dim`"));

    let explain = protonet(&["explain", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(explain.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&explain.stderr).contains("conv-net"));
}

fn conv_run(tmp: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let manifest = image_fixture(tmp, &["covid", "normal"], 4, 6, 16);
    let cfg = write_config(
        tmp,
        &format!(
            "seed = 1\n\
             [data]\nmanifest = {:?}\ntarget_size = 16\ntrain_fraction = 0.5\naugment = false\n\
             [encoder]\nconv_blocks = 2\nchannels_per_block = 4\nembed_dim = 8\n\
             [train]\nshots = 2\nquery = 3\nepochs = 1\nepisodes_per_epoch = 3\n\
             [eval]\nepisodes = 2\n\
             [explain]\nepisodes = 1\n{extra}",
            s(&manifest)
        ),
    );
    let out = tmp.join("run");
    ok(protonet(&["prepare", "--config", s(&cfg), "--out", s(&out)]));
    ok(protonet(&["train", "--config", s(&cfg), "--out", s(&out)]));
    (cfg, out)
}

fn count_ext(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)).count()
}

#[test]
fn explain_writes_one_overlay_and_grid_per_selected_query() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = conv_run(tmp.path(), "threshold = 0.0\n");
    let stdout = ok(protonet(&["explain", "--config", s(&cfg), "--out", s(&out)]));
    let dir = out.join("explain");
    // threshold 0 selects every query of the single episode: 2 classes x 3 queries.
    assert_eq!(count_ext(&dir, "png"), 6, "{stdout}");
    assert_eq!(count_ext(&dir, "json"), 6);
    let png = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().unwrap() == "png").unwrap();
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
    let grid: serde_json::Value = serde_json::from_str(&fs::read_to_string(png.with_extension("json")).unwrap()).unwrap();
    let rows = grid["grid"].as_array().unwrap();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().flat_map(|r| r.as_array().unwrap()).all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
}

#[test]
fn explain_with_nothing_selected_leaves_an_empty_directory() {
    let tmp = TempDir::new().unwrap();
    let (cfg, out) = conv_run(tmp.path(), "limit = 0\n");
    let stdout = ok(protonet(&["explain", "--config", s(&cfg), "--out", s(&out)]));
    assert!(stdout.contains("no queries selected"), "{stdout}");
    assert_eq!(fs::read_dir(out.join("explain")).unwrap().count(), 0);
}
