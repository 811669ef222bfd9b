use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use tempfile::TempDir;

use s2t_saliency::saliency::{Method, SaliencyBundle};
use s2t_saliency::oracle::TONE_BANDS;
use s2t_saliency_cli::manifest::Manifest;

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["s2t-saliency"];
    full.extend_from_slice(args);
    s2t_saliency_cli::run(full)
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// A four-utterance toy corpus and its SPES bundles, shared by the tests.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn manifest(&self) -> String {
        s(&self.root.join("corpus/manifest.json"))
    }

    fn bundles(&self) -> String {
        s(&self.root.join("bundles"))
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        assert_eq!(cli(&["make-toy-corpus", "--out", &s(&root.join("corpus")), "--n", "4"]), 0);
        let f = Fixture { _dir: dir, root };
        let code = cli(&[
            "explain", "--manifest", &f.manifest(), "--out", &f.bundles(), "--oracle", "toy", "--n-spec-iters", "600",
            "--n-tok-iters", "300",
        ]);
        assert_eq!(code, 0);
        f
    })
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn explain_is_deterministic_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(cli(&["make-toy-corpus", "--out", &s(&corpus), "--n", "2"]), 0);
    let m = s(&corpus.join("manifest.json"));
    for out in ["a", "b"] {
        let code = cli(&[
            "explain", "--manifest", &m, "--out", &s(&dir.path().join(out)), "--seed", "9", "--n-spec-iters", "100",
            "--n-tok-iters", "50",
        ]);
        assert_eq!(code, 0);
    }
    for id in ["toy0000", "toy0001"] {
        let a = std::fs::read(dir.path().join(format!("a/{id}.bundle"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b/{id}.bundle"))).unwrap();
        assert_eq!(a, b, "{id}");
    }
    let run: serde_json::Value = serde_json::from_str(&read(dir.path().join("a/run.json"))).unwrap();
    assert_eq!(run["seed"], 9);
    assert_eq!(run["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(run["utterances"].as_array().unwrap().len(), 2);
}

#[test]
fn config_echo_reproduces_the_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let echo = s(&f.root.join("bundles/config.json"));
    let out = dir.path().join("again");
    assert_eq!(cli(&["explain", "--manifest", &f.manifest(), "--out", &s(&out), "--config", &echo]), 0);
    assert_eq!(read(&echo), read(out.join("config.json")));
    let a = std::fs::read(f.root.join("bundles/toy0002.bundle")).unwrap();
    let b = std::fs::read(out.join("toy0002.bundle")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bubble_bundles_are_tagged() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let code = cli(&[
        "explain", "--manifest", &f.manifest(), "--out", &s(dir.path()), "--method", "bubble", "--n-spec-iters",
        "1000", "--n-tok-iters", "50",
    ]);
    assert_eq!(code, 0);
    let b = SaliencyBundle::load(dir.path().join("toy0000.bundle")).unwrap();
    assert_eq!(b.method, Method::Bubble);
    assert_eq!(b.config["perturbation"]["n_spec_iters"], 1000);
}

#[test]
fn unreachable_oracle_fails_every_utterance() {
    let f = fixture();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let url = format!("remote:http://127.0.0.1:{port}");
    let code = cli(&["explain", "--manifest", &f.manifest(), "--out", &s(dir.path()), "--oracle", &url]);
    assert_eq!(code, 1);
    let run: serde_json::Value = serde_json::from_str(&read(dir.path().join("run.json"))).unwrap();
    let utts = run["utterances"].as_array().unwrap();
    assert_eq!(utts.len(), 4);
    assert!(utts.iter().all(|u| u["ok"] == false && u["error"].as_str().unwrap().contains("transport")));
    assert!(!dir.path().join("toy0000.bundle").exists());
}

#[test]
fn configuration_errors_exit_with_2() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(cli(&["explain", "--manifest", &f.manifest(), "--out", &out, "--p-spec", "1.5"]), 2);
    assert_eq!(cli(&["explain", "--manifest", &f.manifest(), "--out", &out, "--oracle", "gpt"]), 2);
    assert_eq!(cli(&["explain", "--manifest", "/no/such/manifest.json", "--out", &out]), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_spec_iter": 10}"#).unwrap();
    assert_eq!(cli(&["explain", "--manifest", &f.manifest(), "--out", &out, "--config", &s(&bad)]), 2);
    assert_eq!(cli(&["explain", "--bogus-flag"]), 2);
}

#[test]
fn size_needs_no_oracle_and_deletion_gives_21_points() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let base = ["evaluate", "--manifest", &f.manifest(), "--bundles", &f.bundles(), "--out", &out];
    let mut size = base.to_vec();
    size.extend(["--metric", "size", "--oracle", "remote:http://127.0.0.1:9"]);
    assert_eq!(cli(&size), 0);
    let mut del = base.to_vec();
    del.extend(["--metric", "deletion", "--oracle", "toy"]);
    assert_eq!(cli(&del), 0);
    let csv = read(dir.path().join("deletion.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,y");
    assert_eq!(lines.len(), 22);
    assert_eq!(lines[1], "0,0");
    let json: serde_json::Value = serde_json::from_str(&read(dir.path().join("size.json"))).unwrap();
    assert_eq!(json["points"].as_array().unwrap().len(), 21);
    assert!(dir.path().join("size.config.json").is_file());
}

#[test]
fn missing_bundles_are_listed() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(f.root.join("bundles/toy0001.bundle"), dir.path().join("toy0001.bundle")).unwrap();
    let err = s2t_saliency_cli::commands::load_bundles(&Manifest::load(f.manifest()).unwrap(), dir.path())
        .unwrap_err()
        .to_string();
    assert!(err.contains("toy0000") && err.contains("toy0002") && err.contains("toy0003"));
    assert!(!err.contains("toy0001"));
    let code = cli(&[
        "evaluate", "--manifest", &f.manifest(), "--bundles", &s(dir.path()), "--metric", "size", "--out",
        &s(&dir.path().join("out")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn positions_report_has_means_and_p_values() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let code = cli(&[
        "analyze", "--manifest", &f.manifest(), "--bundles", &f.bundles(), "--report", "positions", "--out",
        &s(dir.path()),
    ]);
    assert_eq!(code, 0);
    let csv = read(dir.path().join("positions.csv"));
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["group", "n", "mean", "t_vs_it", "p_vs_it"]);
    assert_eq!(rows.iter().skip(1).map(|r| r[0]).collect::<Vec<_>>(), ["<s>", "IT", "LT"]);
    let lt_mean: f64 = rows[3][2].parse().unwrap();
    let it_mean: f64 = rows[2][2].parse().unwrap();
    let p: f64 = rows[3][4].parse().unwrap();
    assert!(lt_mean > it_mean);
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn frequency_profile_of_a_peaks_in_its_band() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let code = cli(&[
        "analyze", "--manifest", &f.manifest(), "--bundles", &f.bundles(), "--report", "frequency", "--word", "A",
        "--out", &s(dir.path()),
    ]);
    assert_eq!(code, 0);
    let csv = read(dir.path().join("frequency-A.csv"));
    let values: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 80);
    let peak = (0..80).fold(0, |a, c| if values[c] > values[a] { c } else { a });
    let (lo, hi) = TONE_BANDS[0];
    assert!((lo..=hi).contains(&peak), "peak at channel {peak}");
}

#[test]
fn reports_that_need_inputs_refuse_without_them() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut m = Manifest::load(f.manifest()).unwrap();
    for e in &mut m.entries {
        e.alignment_path = None;
        e.wav_path = f.root.join("corpus").join(&e.wav_path);
    }
    let path = dir.path().join("unaligned.json");
    m.save(&path).unwrap();
    let out = s(&dir.path().join("out"));
    let args = ["analyze", "--manifest", &s(&path), "--bundles", &f.bundles(), "--out", &out, "--report"];
    let mut time = args.to_vec();
    time.push("time");
    assert_eq!(cli(&time), 2);
    let mut freq = args.to_vec();
    freq.push("frequency");
    assert_eq!(cli(&freq), 2);
    let mut kurt = args.to_vec();
    kurt.push("kurtosis");
    assert_eq!(cli(&kurt), 0);
}

#[test]
fn tone_a_token_renders_brightest_in_its_band() {
    let f = fixture();
    let m = Manifest::load(f.manifest()).unwrap();
    let (entry, word) = m
        .entries
        .iter()
        .find_map(|e| e.reference_words().iter().position(|w| w == "A").map(|j| (e, j)))
        .expect("a toy utterance containing A");
    let token = (word + 1).to_string();
    let bundle = f.root.join(format!("bundles/{}.bundle", entry.id));
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain.png");
    let overlay = dir.path().join("overlay.png");
    let b = s(&bundle);
    assert_eq!(cli(&["render", "--bundle", &b, "--out", &s(&plain), "--token", &token, "--scale", "1"]), 0);
    assert_eq!(
        cli(&["render", "--bundle", &b, "--out", &s(&overlay), "--token", &token, "--scale", "1", "--overlay"]),
        0
    );
    let img = image::open(&plain).unwrap().to_rgb8();
    let (w, h) = img.dimensions();
    assert_eq!(image::open(&overlay).unwrap().to_rgb8().dimensions(), (w, h));
    let loaded = SaliencyBundle::load(&bundle).unwrap();
    assert_eq!((w as usize, h as usize), loaded.shape());
    // The colormap's last stop is the only pure maximum.
    let (x, y, _) = img
        .enumerate_pixels()
        .max_by_key(|(_, _, p)| p.0.iter().map(|&v| v as u32).sum::<u32>())
        .unwrap();
    let channel = h - 1 - y;
    let (lo, hi) = TONE_BANDS[0];
    assert_eq!(x as usize / 50, word, "brightest frame {x}");
    assert!((lo as u32..=hi as u32).contains(&channel), "brightest channel {channel}");
    assert_eq!(cli(&["render", "--bundle", &b, "--out", &s(&plain), "--token", "99"]), 2);
}

#[test]
fn corrupt_bundle_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("x.bundle");
    std::fs::write(&bad, b"{\"format\": \"s2t-saliency-bundle\"").unwrap();
    assert_eq!(cli(&["render", "--bundle", &s(&bad), "--out", &s(&dir.path().join("x.png"))]), 1);
    let err = SaliencyBundle::load(&bad).unwrap_err();
    assert!(matches!(err, s2t_saliency::Error::Format(_)), "{err:?}");
}

#[test]
fn featurize_and_segment_write_per_utterance_files() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(cli(&["featurize", "--manifest", &f.manifest(), "--out", &out]), 0);
    let x = s2t_saliency::audio::Spectrogram::load(dir.path().join("toy0000.spec")).unwrap();
    assert_eq!(x.n_mels(), 80);
    assert_eq!(cli(&["segment", "--manifest", &f.manifest(), "--out", &out, "--no-multiscale"]), 0);
    let seg = s2t_saliency::segmentation::SegmentationMap::load(dir.path().join("toy0000.scale0.seg")).unwrap();
    assert_eq!(seg.shape(), x.shape());
    assert!(!dir.path().join("toy0000.scale1.seg").exists());
    let echo: serde_json::Value = serde_json::from_str(&read(dir.path().join("config.json"))).unwrap();
    assert_eq!(echo["phis"], serde_json::json!([500.0]));
}
