use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use crate::commands::{Artifact, Content};
use crate::config::Resolved;

/// Render an artifact with the resolved config and its hash embedded.
/// CSV files carry them as leading `#` comment lines.
pub fn render(artifact: &Artifact, config: &Resolved) -> String {
    let hash = config.hash();
    match &artifact.content {
        Content::Json(report) => {
            let doc = json!({ "config_hash": hash, "config": config, "report": report });
            let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
            s.push('\n');
            s
        }
        Content::Csv(body) => format!("# config_hash: {hash}\n# config: {}\n{body}", config.canonical_json()),
    }
}

/// Create a fresh run directory `<hash prefix>-<unix seconds>` under `root`,
/// never reusing an existing one.
fn fresh_dir(root: &Path, hash: &str) -> std::io::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("{}-{stamp}", &hash[..16]);
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

/// Write every artifact into a new run directory and return its path.
pub fn write_run(root: &Path, config: &Resolved, artifacts: &[Artifact]) -> std::io::Result<PathBuf> {
    let dir = fresh_dir(root, &config.hash())?;
    for a in artifacts {
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(dir.join(&a.name))?;
        f.write_all(render(a, config).as_bytes())?;
    }
    Ok(dir)
}
