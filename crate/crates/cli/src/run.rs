//! Run directories: manifest, lock file, JSON event log and atomic writes.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use log::{info, Log, Metadata, Record};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = "run.lock";
pub const EVENTS: &str = "events.jsonl";

static EVENT_SINK: Mutex<Option<BufWriter<File>>> = Mutex::new(None);

/// Human-readable records go to stderr; every record is also appended as
/// JSON to the active run's event log.
struct TeeLogger {
    stderr: env_logger::Logger,
}

impl Log for TeeLogger {
    fn enabled(&self, metadata: &Metadata<'_>) -> bool {
        self.stderr.enabled(metadata) || metadata.level() <= log::Level::Info
    }

    fn log(&self, record: &Record<'_>) {
        if self.stderr.enabled(record.metadata()) {
            self.stderr.log(record);
        }
        if record.level() <= log::Level::Info {
            write_event(record.level().as_str(), record.target(), &record.args().to_string(), None);
        }
    }

    fn flush(&self) {
        self.stderr.flush();
        if let Ok(mut g) = EVENT_SINK.lock() {
            if let Some(w) = g.as_mut() {
                let _ = w.flush();
            }
        }
    }
}

pub fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let stderr = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).build();
    let max = stderr.filter().max(log::LevelFilter::Info);
    if log::set_boxed_logger(Box::new(TeeLogger { stderr })).is_ok() {
        log::set_max_level(max);
    }
}

fn write_event(level: &str, target: &str, message: &str, data: Option<serde_json::Value>) {
    let Ok(mut g) = EVENT_SINK.lock() else { return };
    if let Some(w) = g.as_mut() {
        let mut ev = serde_json::json!({
            "ts": chrono::Utc::now().to_rfc3339(),
            "level": level,
            "target": target,
            "message": message,
        });
        if let Some(d) = data {
            ev["data"] = d;
        }
        let _ = serde_json::to_writer(&mut *w, &ev);
        let _ = w.write_all(b"\n");
        let _ = w.flush();
    }
}

/// Structured event with a JSON payload.
pub fn event(message: &str, data: serde_json::Value) {
    write_event("INFO", "psyq::event", message, Some(data));
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write to a sibling temp file and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    /// Artifact file names, relative to the run directory.
    pub artifacts: Vec<String>,
    pub engine_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct RunDir {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// An earlier attempt with identical inputs did not finish.
    pub resumed: bool,
    lock: PathBuf,
}

pub enum Opened {
    Fresh(RunDir),
    UpToDate(PathBuf),
}

pub struct RunSpec<'a> {
    pub command: &'a str,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub force: bool,
}

impl RunDir {
    /// Lock `dir` and reconcile it with any previous run there.
    ///
    /// Identical command, config and input digests: a complete run is left
    /// alone and an unfinished one is resumed. Anything else in the
    /// directory is an error unless `force` is set, which clears the
    /// previous run's files first.
    pub fn open(dir: &Path, spec: RunSpec<'_>) -> Result<Opened> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "{} is locked by another run (delete {} if that run is gone)",
                    dir.display(),
                    lock.display()
                )
            }
            Err(e) => return Err(e).with_context(|| format!("locking {}", dir.display())),
        }
        match Self::reconcile(dir, &lock, spec) {
            Ok(o) => {
                if matches!(o, Opened::UpToDate(_)) {
                    let _ = std::fs::remove_file(&lock);
                }
                Ok(o)
            }
            Err(e) => {
                let _ = std::fs::remove_file(&lock);
                Err(e)
            }
        }
    }

    fn reconcile(dir: &Path, lock: &Path, spec: RunSpec<'_>) -> Result<Opened> {
        let canonical = serde_json::to_vec(&serde_json::json!({"command": spec.command, "config": spec.config}))?;
        let config_hash = sha256_bytes(&canonical);
        let mut inputs = BTreeMap::new();
        for p in &spec.inputs {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest_path = dir.join(MANIFEST);
        let mut resumed = false;
        if manifest_path.exists() {
            let old: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
                .with_context(|| format!("reading {}", manifest_path.display()))?;
            let same = old.command == spec.command && old.config_hash == config_hash && old.inputs == inputs;
            if same && !spec.force {
                if old.status == RunStatus::Complete && old.artifacts.iter().all(|a| dir.join(a).exists()) {
                    return Ok(Opened::UpToDate(dir.to_path_buf()));
                }
                resumed = true;
            } else if !spec.force {
                bail!(
                    "{} holds a different `{}` run; pass --force to replace it",
                    dir.display(),
                    old.command
                );
            } else {
                for a in &old.artifacts {
                    let _ = std::fs::remove_file(dir.join(a));
                }
                let _ = std::fs::remove_file(dir.join(EVENTS));
            }
        } else {
            let foreign: Vec<String> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n != LOCK)
                .collect();
            if !foreign.is_empty() && !spec.force {
                bail!(
                    "{} is not empty and has no manifest ({} entries); pass --force to use it",
                    dir.display(),
                    foreign.len()
                );
            }
        }
        let events = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(EVENTS))
            .context("opening event log")?;
        *EVENT_SINK.lock().expect("event sink poisoned") = Some(BufWriter::new(events));
        let manifest = RunManifest {
            command: spec.command.to_string(),
            config_hash,
            config: spec.config,
            seeds: spec.seeds,
            inputs,
            artifacts: Vec::new(),
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
        };
        let run = RunDir {
            dir: dir.to_path_buf(),
            manifest,
            resumed,
            lock: lock.to_path_buf(),
        };
        run.save_manifest()?;
        event("run started", serde_json::json!({"command": spec.command, "resumed": resumed}));
        if resumed {
            info!("resuming unfinished run in {}", dir.display());
        }
        Ok(Opened::Fresh(run))
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.dir.join(MANIFEST), &self.manifest)
    }

    /// Path of a named artifact, recorded in the manifest.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.artifact(name);
        write_json(&p, value)?;
        Ok(p)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.artifact(name);
        write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    pub fn finish(mut self, result: &Result<()>) -> Result<()> {
        self.manifest.finished_at = Some(chrono::Utc::now().to_rfc3339());
        match result {
            Ok(()) => self.manifest.status = RunStatus::Complete,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        event("run finished", serde_json::json!({"status": self.manifest.status}));
        let saved = self.save_manifest();
        *EVENT_SINK.lock().expect("event sink poisoned") = None;
        let _ = std::fs::remove_file(&self.lock);
        saved
    }
}
