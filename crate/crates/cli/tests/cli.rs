mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use bubbleview_cli::analyze;
use bubbleview_cli::exit;

fn bubbleview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bubbleview"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> u8 {
    o.status.code().unwrap() as u8
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const OUTPUTS: [&str; 11] = [
    "filtering.csv",
    "heatmaps/index.csv",
    "heatmaps/mix__clicks.png",
    "heatmaps/mix__fixations.png",
    "metrics.csv",
    "power_fit.csv",
    "element_importance.csv",
    "element_labels.csv",
    "element_correlation.csv",
    "center_bias.csv",
    "manifest.toml",
];

#[test]
fn analyze_writes_every_output_and_reruns_identically() {
    let fx = common::build(7, None);
    let manifest = fx.manifest_path.to_str().unwrap();
    let first = bubbleview(&["analyze", manifest]);
    assert_eq!(code(&first), exit::OK, "{}", stderr(&first));
    assert!(stdout(&first).contains("normalized_nss="), "{}", stdout(&first));

    let out = fx.path().join("out");
    let tree = read_tree(&out);
    for name in OUTPUTS {
        assert!(tree.contains_key(name), "missing {name}; have {:?}", tree.keys());
    }
    let metrics = common::read_csv(&out.join("metrics.csv"));
    assert!(metrics.iter().any(|r| r["image_id"] == common::IMAGE));
    let seed_line = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(seed_line.lines().any(|l| l.starts_with('#') && l.contains("seed")));

    let second = bubbleview(&["analyze", manifest]);
    assert_eq!(code(&second), exit::OK);
    assert_eq!(read_tree(&out), tree);
}

#[test]
fn flags_override_the_manifest() {
    let fx = common::build(7, None);
    let alt = fx.path().join("alt");
    let o = bubbleview(&[
        "--seed",
        "99",
        "--out",
        alt.to_str().unwrap(),
        "analyze",
        fx.manifest_path.to_str().unwrap(),
        "--n-splits",
        "3",
        "--participant-outlier-sd",
        "none",
    ]);
    assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    let copy = std::fs::read_to_string(alt.join("manifest.toml")).unwrap();
    assert!(copy.contains("seed = 99"), "{copy}");
    assert!(copy.contains("n_splits = 3"), "{copy}");
    assert!(!fx.path().join("out").exists());
}

#[test]
fn analyze_without_fixations_writes_click_outputs_only() {
    let fx = common::build(8, None);
    let mut m = fx.manifest();
    m.fixations = None;
    let summary = analyze::run(&m).unwrap();
    assert!(summary.metrics.is_none());
    assert!(summary.power_fit.is_none());
    let metrics = std::fs::read_to_string(m.out.join("metrics.csv")).unwrap();
    assert!(metrics.contains("metrics unavailable"), "{metrics}");
    assert!(m.out.join("heatmaps/mix__clicks.png").exists());
    assert!(!m.out.join("heatmaps/mix__fixations.png").exists());
    assert!(!m.out.join("power_fit.csv").exists());
}

#[test]
fn n_pred_beyond_participants_is_capped_with_a_warning() {
    let fx = common::build(9, None);
    let mut m = fx.manifest();
    m.n_pred = Some(40);
    let summary = analyze::run(&m).unwrap();
    assert!(summary.warnings.iter().any(|w| w.contains("capped")), "{:?}", summary.warnings);
    let capped = summary.metrics.unwrap().aggregate;

    let mut full = fx.manifest();
    full.out = fx.path().join("full");
    let reference = analyze::run(&full).unwrap().metrics.unwrap().aggregate;
    assert_eq!(capped.cc.to_bits(), reference.cc.to_bits());
}

#[test]
fn many_splits_give_a_monotone_convergence_curve() {
    let fx = common::build(2024, None);
    let mut m = fx.manifest();
    m.n_splits = 300;
    let summary = analyze::run(&m).unwrap();
    let rows = common::read_csv(&m.out.join("power_fit.csv"));
    let nss: Vec<f64> = rows.iter().map(|r| r["nss"].parse().unwrap()).collect();
    assert_eq!(nss.len(), 15);
    assert!(nss.windows(2).all(|w| w[1] >= w[0]), "{nss:?}");
    assert!(summary.power_fit.unwrap().b < 0.0);
}

#[test]
fn export_heatmaps_skips_metrics() {
    let fx = common::build(10, None);
    let o = bubbleview(&["export-heatmaps", fx.manifest_path.to_str().unwrap()]);
    assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    let out = fx.path().join("out");
    assert!(out.join("heatmaps/mix__clicks.png").exists());
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn preprocess_reuses_the_cache_until_sigma_changes() {
    let dir = tempfile::tempdir().unwrap();
    let stimuli = dir.path().join("stimuli");
    std::fs::create_dir_all(&stimuli).unwrap();
    for id in ["a", "b", "c"] {
        common::stimulus().save_png(stimuli.join(format!("{id}.png"))).unwrap();
    }
    let cache = dir.path().join("cache");
    let args = |sigma: &str| {
        vec![
            "--out".to_string(),
            cache.display().to_string(),
            "preprocess".into(),
            "--stimuli".into(),
            stimuli.display().to_string(),
            "--blur-sigma-px".into(),
            sigma.into(),
        ]
    };
    let run = |sigma: &str| {
        let a = args(sigma);
        bubbleview(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let cold = run("4");
    assert_eq!(code(&cold), exit::OK, "{}", stderr(&cold));
    assert!(stdout(&cold).contains("3 images, 3 blurred, 0 cached"), "{}", stdout(&cold));
    let warm = run("4");
    assert!(stdout(&warm).contains("0 blurred, 3 cached"), "{}", stdout(&warm));
    let changed = run("6.5");
    assert!(stdout(&changed).contains("3 blurred, 0 cached"), "{}", stdout(&changed));
    assert!(cache.join("index__sigma4.csv").exists());
    assert!(cache.join("index__sigma6p5.csv").exists());

    std::fs::write(stimuli.join("broken.png"), b"not a png").unwrap();
    let partial = run("4");
    assert_eq!(code(&partial), exit::PARTIAL, "{}", stderr(&partial));
    assert!(stdout(&partial).contains("4 images, 0 blurred, 3 cached, 1 failed"), "{}", stdout(&partial));
    assert!(stderr(&partial).contains("broken"));
}

#[test]
fn cost_prints_a_table() {
    let o = bubbleview(&["cost", "--time-per-image-s", "30", "--images-per-task", "17", "--participants", "10-15"]);
    assert_eq!(code(&o), exit::OK, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("$0.90"), "{text}");
    assert!(text.contains("$0.53–$0.79"), "{text}");
}

#[test]
fn invalid_input_exits_with_validation_code() {
    let o = bubbleview(&["cost", "--time-per-image-s", "-1", "--images-per-task", "17", "--participants", "10-15"]);
    assert_eq!(code(&o), exit::VALIDATION);
    let o = bubbleview(&["cost", "--time-per-image-s", "10"]);
    assert_eq!(code(&o), exit::VALIDATION);

    let fx = common::build(11, None);
    let o = bubbleview(&["analyze", fx.manifest_path.to_str().unwrap(), "--map-sigma-px", "-2"]);
    assert_eq!(code(&o), exit::VALIDATION, "{}", stderr(&o));
}

#[test]
fn missing_files_exit_with_io_code() {
    let fx = common::build(12, None);
    std::fs::remove_file(fx.path().join("stimuli").join("mix.png")).unwrap();
    let o = bubbleview(&["analyze", fx.manifest_path.to_str().unwrap()]);
    assert_eq!(code(&o), exit::IO, "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let o = bubbleview(&["preprocess", "--stimuli", dir.path().join("nope").to_str().unwrap(), "--blur-sigma-px", "2"]);
    assert_eq!(code(&o), exit::IO, "{}", stderr(&o));
}
