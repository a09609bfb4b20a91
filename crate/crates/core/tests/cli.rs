use std::fs;
use std::path::{Path, PathBuf};

use appeal_core::acquisition::{ImageRecord, RecordStatus};
use appeal_core::cli::{dispatch, run, Cli, EXIT_INVALID, EXIT_OK, EXIT_STAGE, EXIT_USAGE};
use appeal_core::AppealError;
use clap::Parser;
use appeal_core::labeling::AppealLabel;
use appeal_core::manifest::read_jsonl;
use appeal_core::synthesis::SyntheticSample;

const DOMAIN: &str = r#"
name = "food"
nouns = ["burger", "cake", "pizza"]
positive_adjectives = ["delicious"]
lexnames = ["noun.food"]
gamma = 0.4
output_size = 64

[negative_groups]
burnt = ["burnt"]
moldy_rotten = ["moldy", "rotten"]

[synthesis_plan]
backgrounds_per_base = 2
alphas_per_background = 3
"#;

const RUN: &str = r#"
domain_config = "food.toml"
workdir = "work"
seed = 7

[pipeline]
top_k = 8
n_bases = 8
inversion_exemplars = 3
per_base_pairs = 6
n_exemplars = 8
head_hidden = [16]

[inversion]
steps = 20

[[training.stages]]
freeze_encoder = true
epochs = 2
learning_rate = 1e-3
batch_size = 16

[[training.stages]]
freeze_encoder = false
epochs = 1
learning_rate = 1e-5
batch_size = 16

[heatmap]
window = 32
stride = 16

[backends]
captioner = "mock"
segmenter = "mock"
inpainter = "mock"
inversion_trainer = "mock"
upscaler = "mock"
depth = "mock"
encoder = "mock"
image_source = "mock"
corpus = "corpus"
encoder_grid = 4
encoder_dim = 16
"#;

struct Project {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Project {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("food.toml"), DOMAIN).unwrap();
        fs::write(root.join("run.toml"), RUN).unwrap();
        fs::create_dir_all(root.join("corpus")).unwrap();
        Self { _tmp: tmp, root }
    }

    fn config(&self) -> String {
        self.root.join("run.toml").display().to_string()
    }

    fn dir(&self) -> PathBuf {
        self.root.join("work/food")
    }

    fn stage(&self, name: &str) -> i32 {
        dispatch(["appeal", name, "--config", &self.config()])
    }

    fn corpus(&self) -> i32 {
        let domain = self.root.join("food.toml").display().to_string();
        let out = self.root.join("corpus").display().to_string();
        dispatch(["appeal", "mock-corpus", "--domain", &domain, "--out", &out])
    }
}

fn bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn pipeline_runs_end_to_end_and_is_idempotent() {
    let p = Project::new();
    assert_eq!(p.corpus(), EXIT_OK);
    for stage in ["queries", "fetch", "filter", "synth", "train-comparator", "label", "train-estimator"] {
        assert_eq!(p.stage(stage), EXIT_OK, "stage {stage}");
    }
    let dir = p.dir();

    let filtered: Vec<ImageRecord> = read_jsonl(&dir.join("filtered.jsonl")).unwrap();
    assert_eq!(filtered.len(), 12 * 8);
    let count = |s: RecordStatus| filtered.iter().filter(|r| r.status == s).count();
    assert_eq!(count(RecordStatus::FilteredCaption), 12);
    assert_eq!(count(RecordStatus::FilteredArea), 12);
    assert_eq!(count(RecordStatus::Kept), 36);
    assert_eq!(count(RecordStatus::DroppedBalance), 36);
    assert!(filtered.iter().all(|r| (r.width, r.height) == (64, 64)));

    let synthetic: Vec<SyntheticSample> = read_jsonl(&dir.join("synthetic.jsonl")).unwrap();
    assert_eq!(synthetic.len(), 8 * 6);
    let labels: Vec<AppealLabel> = read_jsonl(&dir.join("labels.jsonl")).unwrap();
    assert_eq!(labels.len(), 36 - 9 - 8);
    assert!(labels.iter().all(|l| (1.0..=10.0).contains(&l.scaled)));
    assert!(dir.join("models/estimator.json").is_file());
    assert!(!dir.join(".appeal.lock").exists());

    let manifests = ["queries.jsonl", "fetched.jsonl", "filtered.jsonl", "reserved.json", "synthetic.jsonl", "pairs.jsonl", "exemplars.json", "labels.jsonl", "models/comparator.json", "models/estimator.json"];
    let before: Vec<Vec<u8>> = manifests.iter().map(|m| bytes(&dir.join(m))).collect();
    for stage in ["queries", "fetch", "filter", "synth", "train-comparator", "label", "train-estimator"] {
        assert_eq!(p.stage(stage), EXIT_OK, "rerun {stage}");
    }
    for (m, b) in manifests.iter().zip(&before) {
        assert_eq!(&bytes(&dir.join(m)), b, "{m} changed on rerun");
    }

    let image = dir.join(&filtered.iter().find(|r| r.status == RecordStatus::Kept).unwrap().path);
    let out = p.root.join("out");
    let (img, out_s, cfg) = (image.display().to_string(), out.display().to_string(), p.config());
    assert_eq!(dispatch(["appeal", "heatmap", &img, "--config", &cfg, "--out", &out_s]), EXIT_OK);
    let id = image.file_stem().unwrap().to_str().unwrap();
    assert!(out.join(format!("{id}_heatmap.png")).is_file());
    assert!(out.join(format!("{id}_overlay.png")).is_file());

    assert_eq!(dispatch(["appeal", "enhance", &img, "--config", &cfg, "--out", &out_s]), EXIT_OK);
    assert!(out.join(format!("{id}_enhanced.png")).is_file());
    let report: serde_json::Value = serde_json::from_slice(&bytes(&out.join(format!("{id}_enhanced.json")))).unwrap();
    let (b, a, d) = (report["score_before"].as_f64().unwrap(), report["score_after"].as_f64().unwrap(), report["delta"].as_f64().unwrap());
    assert!((a - b - d).abs() < 1e-12);

    let scores = p.root.join("scores.jsonl").display().to_string();
    assert_eq!(dispatch(["appeal", "score", &img, "--config", &cfg, "--out", &scores]), EXIT_OK);

    let labels_path = dir.join("labels.jsonl").display().to_string();
    assert_eq!(dispatch(["appeal", "eval-corr", "--pred", &labels_path, "--ref", &labels_path]), EXIT_OK);
}

#[test]
fn unknown_command_exits_64() {
    assert_eq!(dispatch(["appeal", "bogus"]), EXIT_USAGE);
}

fn stage_error(p: &Project, stage: &str) -> AppealError {
    let cli = Cli::try_parse_from(["appeal", stage, "--config", &p.config()]).unwrap();
    run(cli.command).unwrap_err()
}

#[test]
fn stage_without_prerequisite_names_it() {
    let p = Project::new();
    for (stage, prereq) in [("fetch", "queries"), ("label", "train-comparator"), ("train-estimator", "label")] {
        match stage_error(&p, stage) {
            AppealError::MissingPrerequisite { prerequisite, .. } => assert_eq!(prerequisite, prereq),
            other => panic!("{stage}: {other}"),
        }
        assert_eq!(p.stage(stage), EXIT_INVALID);
    }
    assert!(!p.dir().join(".appeal.lock").exists());
}

#[test]
fn held_lock_blocks_a_stage() {
    let p = Project::new();
    fs::create_dir_all(p.dir()).unwrap();
    fs::write(p.dir().join(".appeal.lock"), "1").unwrap();
    assert!(matches!(stage_error(&p, "queries"), AppealError::Stage { .. }));
    assert_eq!(p.stage("queries"), EXIT_STAGE);
    assert!(!p.dir().join("queries.jsonl").exists());
}

#[test]
fn bad_run_config_exits_1() {
    let p = Project::new();
    fs::write(p.root.join("run.toml"), format!("{RUN}\nunknown = 3\n")).unwrap();
    assert_eq!(p.stage("queries"), EXIT_INVALID);
}
