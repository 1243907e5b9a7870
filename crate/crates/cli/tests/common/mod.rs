//! Synthetic experiment: one stimulus whose clicks and fixations are drawn
//! from the same two-component Gaussian mixture.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bubbleview_cli::RunManifest;
use bubbleview_core::config::{ExperimentConfig, MouseModality, TaskType, TimeLimit};
use bubbleview_core::imaging::Image;
use bubbleview_core::store::{Catalog, EventKind, EventLog, EventRecord, Session, SessionStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const WIDTH: usize = 80;
pub const HEIGHT: usize = 60;
pub const IMAGE: &str = "mix";
pub const MAP_SIGMA: f64 = 6.0;

/// `(weight, mean_x, mean_y, sd)` components.
pub const MIXTURE: [(f64, f64, f64, f64); 2] = [(0.6, 24.0, 20.0, 7.0), (0.4, 56.0, 40.0, 9.0)];

pub fn sample_point(rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let u: f64 = rng.random();
        let (_, mx, my, sd) = if u < MIXTURE[0].0 { MIXTURE[0] } else { MIXTURE[1] };
        let x = Normal::new(mx, sd).unwrap().sample(rng);
        let y = Normal::new(my, sd).unwrap().sample(rng);
        if (0.0..WIDTH as f64).contains(&x) && (0.0..HEIGHT as f64).contains(&y) {
            return (x, y);
        }
    }
}

pub fn config() -> ExperimentConfig {
    ExperimentConfig {
        experiment_id: "synthetic".into(),
        task_type: TaskType::FreeView,
        blur_sigma_px: 4.0,
        bubble_radius_px: 6.0,
        time_limit_s: TimeLimit::Seconds(10.0),
        mouse_modality: MouseModality::Click,
        min_description_chars: 0,
        images_per_session: 1,
        image_ids: vec![IMAGE.into()],
        move_sample_hz: 100,
        qualification_note: String::new(),
    }
}

pub fn stimulus() -> Image {
    let pixels = (0..WIDTH * HEIGHT * 3)
        .map(|i| {
            let p = i / 3;
            ((p % WIDTH) as f64 / WIDTH as f64 + (p / WIDTH) as f64 / HEIGHT as f64) / 2.0
        })
        .collect();
    Image::new(WIDTH, HEIGHT, 3, pixels).unwrap()
}

pub fn catalog() -> Catalog {
    let mut c = Catalog::new();
    c.insert(config(), BTreeMap::from([(IMAGE.to_string(), (WIDTH, HEIGHT))]));
    c
}

/// One complete session with the given clicks on the fixture image.
pub fn session_events(participant: &str, clicks: &[(f64, f64)]) -> Vec<EventRecord> {
    let session = Session {
        session_id: format!("sess-{participant}"),
        participant_id: participant.into(),
        experiment_id: config().experiment_id,
        image_sequence: vec![IMAGE.into()],
        status: SessionStatus::Open,
        created_at_ms: 0,
    };
    let mut events = vec![EventRecord::session_begin(&session), EventRecord::image_begin(&session, 2, IMAGE)];
    for (i, &(x, y)) in clicks.iter().enumerate() {
        let seq = 3 + i as u64;
        events.push(EventRecord::pointer(&session, seq, EventKind::Click, IMAGE, x, y, 250.0 * i as f64));
    }
    let seq = 3 + clicks.len() as u64;
    events.push(EventRecord::image_end(&session, seq, IMAGE, 10_000.0));
    events.push(EventRecord::session_end(&session, seq + 1, false));
    events
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest_path: PathBuf,
}

impl Fixture {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest::load(&self.manifest_path).unwrap()
    }
}

/// Writes stimulus, config, event log, fixation CSV, annotations and a run
/// manifest. `clicks_per_participant` overrides the default of 20 each.
pub fn build(seed: u64, click_counts: Option<&[usize]>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    std::fs::create_dir_all(root.join("stimuli")).unwrap();
    stimulus().save_png(root.join("stimuli").join(format!("{IMAGE}.png"))).unwrap();
    std::fs::write(root.join("experiment.toml"), config().to_toml_string().unwrap()).unwrap();

    let default = [20usize; 15];
    let counts = click_counts.unwrap_or(&default);
    let mut log = EventLog::open(root.join("events.jsonl"), catalog()).unwrap();
    for (p, &n) in counts.iter().enumerate() {
        let clicks: Vec<(f64, f64)> = (0..n).map(|_| sample_point(&mut rng)).collect();
        log.append_batch(session_events(&format!("worker{p:02}"), &clicks)).unwrap();
    }

    let mut csv = String::from("image_id,observer_id,x,y,t_ms\n");
    for o in 0..15 {
        for f in 0..10 {
            let (x, y) = sample_point(&mut rng);
            let _ = writeln!(csv, "{IMAGE},eye{o:02},{x},{y},{}", 300 * f);
        }
    }
    std::fs::write(root.join("fixations.csv"), csv).unwrap();

    std::fs::create_dir_all(root.join("annotations")).unwrap();
    std::fs::write(
        root.join("annotations").join(format!("{IMAGE}.toml")),
        "[[element]]\nelement_id = \"e1\"\nlabel = \"title\"\nbox = [16, 12, 32, 28]\n\n\
         [[element]]\nelement_id = \"e2\"\nlabel = \"data\"\nbox = [48, 32, 64, 48]\n\n\
         [[element]]\nelement_id = \"e3\"\nlabel = \"legend\"\nbox = [0, 50, 12, 60]\n",
    )
    .unwrap();

    let manifest_path = root.join("run.toml");
    std::fs::write(
        &manifest_path,
        format!(
            "config = \"experiment.toml\"\nlog = \"events.jsonl\"\nstimuli = \"stimuli\"\n\
             fixations = \"fixations.csv\"\nannotations = \"annotations\"\nseed = {seed}\nout = \"out\"\n\
             map_sigma_px = {MAP_SIGMA}\nn_splits = 10\n"
        ),
    )
    .unwrap();
    Fixture { dir, manifest_path }
}

/// Parses a CSV written by the CLI, skipping `#` lines.
pub fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let Some(header) = lines.next() else {
        return Vec::new();
    };
    let cols: Vec<&str> = header.split(',').collect();
    lines
        .map(|l| cols.iter().map(|c| c.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect()
}
