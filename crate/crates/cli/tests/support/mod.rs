#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trackmine::geom::GroundPlane;
use trackmine::io::{read_tracks, write_annotations, write_embeddings, write_proposals};
use trackmine::synth::{scene, Scene, SceneConfig};

pub fn trackmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trackmine")).args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Synthetic inputs on disk.
pub struct Inputs {
    pub dir: PathBuf,
    pub scene: Scene,
    pub proposals: PathBuf,
    pub embeddings: PathBuf,
    pub calibration: PathBuf,
    pub config: PathBuf,
}

impl Inputs {
    pub fn annotations(&self) -> PathBuf {
        self.dir.join("annotations.ndjson")
    }

    /// Annotates the tracks found in `out`, as a human labeler would.
    pub fn annotate(&self, out: &Path) -> PathBuf {
        let tracks = read_tracks(&out.join("tracks.ndjson")).unwrap();
        let path = self.annotations();
        write_annotations(&self.scene.annotate(&tracks), &path).unwrap();
        path
    }
}

/// Proposals, embeddings, calibration and a config enabling the
/// embedding gate, written into `dir`.
pub fn write_inputs(dir: &Path, cfg: &SceneConfig, seed: u64) -> Inputs {
    std::fs::create_dir_all(dir).unwrap();
    let scene = scene(cfg, seed);
    let proposals = dir.join("proposals.ndjson");
    write_proposals(&scene.proposals.records, &proposals).unwrap();
    let embeddings = dir.join("embeddings.bin");
    write_embeddings(&scene.embeddings, &embeddings).unwrap();
    let calibration = dir.join("calibration.json");
    let cal = serde_json::json!({ "intrinsics": cfg.intrinsics, "ground_plane": GroundPlane::level(1.7) });
    std::fs::write(&calibration, serde_json::to_string_pretty(&cal).unwrap()).unwrap();
    let config = dir.join("run.conf");
    std::fs::write(
        &config,
        format!(
            "# synthetic scene\nproposals = {}\nembeddings = {}\ncalibration = {}\ntracker.embedding_gate = 0.5\ndiscover.min_cluster_size = 3\n",
            proposals.display(),
            embeddings.display(),
            calibration.display()
        ),
    )
    .unwrap();
    Inputs { dir: dir.to_owned(), scene, proposals, embeddings, calibration, config }
}

/// build-tracks, discover, eval and trainset on one output directory.
pub fn run_pipeline(inputs: &Inputs, out: &Path, seed: u64) {
    let conf = s(&inputs.config);
    let seed = seed.to_string();
    let common = ["--config", conf, "--seed", &seed, "--output-dir", s(out)];
    let o = trackmine(&[&common[..], &["build-tracks"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ann = inputs.annotate(out);
    for args in [
        vec!["discover"],
        vec!["eval", "--annotations", s(&ann)],
        vec!["trainset", "--mode", "discover"],
    ] {
        let o = trackmine(&[&common[..], &args[..]].concat());
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
}

/// Every regular file in `dir` with its contents, sorted by name.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}
