//! Running the command line binary in scratch directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_metaquill")
}

pub fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.json")
}

/// Runs the binary in `cwd` with a clean thread setting and quiet logging.
pub fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(cwd)
        .args(args)
        .env_remove("METAQUILL_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_ok(cwd: &Path, args: &[&str]) -> Output {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The toy configuration cut down to a few iterations.
pub fn small_config() -> serde_json::Value {
    let text = std::fs::read_to_string(toy_config_path()).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    cfg["meta"]["max_meta_iters"] = 3.into();
    cfg["pretrain"]["iters"] = 4.into();
    cfg["pretrain"]["batch_size"] = 4.into();
    cfg["eval"]["episodes"] = 2.into();
    cfg["checkpoint_every"] = 2.into();
    cfg
}

pub fn write_config(dir: &Path, name: &str, cfg: &serde_json::Value) {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

/// Removes the wall-clock field from every row of a JSONL log.
pub fn strip_wallclock(text: &str) -> String {
    text.lines()
        .map(|line| {
            let mut row: serde_json::Value = serde_json::from_str(line).unwrap();
            if let Some(obj) = row.as_object_mut() {
                obj.remove("wallclock_ms");
            }
            format!("{row}\n")
        })
        .collect()
}

/// sha256 over the files under `dir` (sorted by relative path), with
/// `wallclock_ms` removed from `log.jsonl` files.
pub fn output_sha(dir: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, out);
            } else {
                out.push(path);
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(&f).unwrap();
        if f.file_name().is_some_and(|n| n == "log.jsonl") {
            h.update(strip_wallclock(&String::from_utf8(bytes).unwrap()).as_bytes());
        } else {
            h.update(&bytes);
        }
    }
    hex::encode(h.finalize())
}

/// The toy pipeline as a sequence of commands run from one directory with
/// relative paths: (name, output directory, arguments).
pub fn pipeline(seed: u64) -> Vec<(&'static str, &'static str, Vec<String>)> {
    let s = seed.to_string();
    let args = |v: &[&str]| v.iter().map(|a| a.to_string()).collect::<Vec<_>>();
    vec![
        ("gen-toyset", "corpus", args(&["gen-toyset", "--out", "corpus", "--seed", &s, "--images-per-cat", "12"])),
        ("pretrain", "pre", args(&["pretrain", "--config", "config.json", "--corpus", "corpus", "--seed", &s, "--out", "pre"])),
        (
            "meta-train",
            "meta",
            args(&["meta-train", "--config", "config.json", "--corpus", "corpus", "--seed", &s, "--init", "pre/checkpoint", "--out", "meta"]),
        ),
        (
            "finetune-eval",
            "eval",
            args(&["finetune-eval", "--config", "config.json", "--corpus", "corpus", "--seed", &s, "--checkpoint", "meta/checkpoint", "--out", "eval"]),
        ),
        ("score", "score", args(&["score", "--predictions", "eval/predictions.jsonl", "--out", "score"])),
    ]
}

pub struct PipelineRun {
    pub root: tempfile::TempDir,
    /// (command, sha256 over its output directory and stdout)
    pub hashes: Vec<(&'static str, String)>,
}

pub fn run_pipeline(seed: u64) -> PipelineRun {
    let root = tempfile::tempdir().unwrap();
    write_config(root.path(), "config.json", &small_config());
    let mut hashes = Vec::new();
    for (name, out, args) in pipeline(seed) {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let output = run_ok(root.path(), &args);
        let mut h = Sha256::new();
        h.update(output_sha(&root.path().join(out)).as_bytes());
        h.update(&output.stdout);
        hashes.push((name, hex::encode(h.finalize())));
    }
    PipelineRun { root, hashes }
}
