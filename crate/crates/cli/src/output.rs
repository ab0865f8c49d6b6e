//! Artifact directory: every file written through it is hashed into the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use marcus_nls::dynamics::Trajectory;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::SnapshotDtype;

/// Version of the CSV column layouts documented in the README.
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
struct SchemaVersions {
    csv: u32,
    snapshot: u32,
    manifest: u32,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    workers: usize,
    wall_time_s: f64,
    status: &'a str,
    schema_versions: SchemaVersions,
    files: &'a [FileRecord],
    checks: &'a [CheckRecord],
}

#[derive(Debug, Serialize)]
struct SnapshotSidecar<'a> {
    schema_version: u32,
    file: &'a str,
    dtype: &'static str,
    byte_order: &'static str,
    layout: &'static str,
    /// `[frames, n]` in one dimension, `[frames, n, n]` in two.
    shape: Vec<usize>,
    length: f64,
    times: &'a [f64],
}

pub struct ArtifactDir {
    root: PathBuf,
    files: Vec<FileRecord>,
    pub checks: Vec<CheckRecord>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            checks: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileRecord {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| anyhow::anyhow!("csv flush failed: {e}"))?;
        self.write_bytes(name, &bytes)
    }

    /// Writes the header and rows of a table whose columns are only known at run time.
    pub fn write_table(
        &mut self,
        name: &str,
        header: &[String],
        rows: &[Vec<String>],
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| anyhow::anyhow!("csv flush failed: {e}"))?;
        self.write_bytes(name, &bytes)
    }

    /// Little-endian `(re, im)` pairs, frame-major then row-major, plus a JSON sidecar.
    pub fn write_snapshots(
        &mut self,
        stem: &str,
        traj: &Trajectory,
        dtype: SnapshotDtype,
    ) -> Result<()> {
        let first = traj
            .snapshots
            .first()
            .context("trajectory has no snapshots")?;
        let grid = first.grid();
        let per_frame = grid.len();
        let width = match dtype {
            SnapshotDtype::Complex64 => 8,
            SnapshotDtype::Complex128 => 16,
        };
        let mut bytes = Vec::with_capacity(traj.snapshots.len() * per_frame * width);
        for s in &traj.snapshots {
            for v in s.values() {
                match dtype {
                    SnapshotDtype::Complex64 => {
                        bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
                        bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
                    }
                    SnapshotDtype::Complex128 => {
                        bytes.extend_from_slice(&v.re.to_le_bytes());
                        bytes.extend_from_slice(&v.im.to_le_bytes());
                    }
                }
            }
        }
        let bin = format!("{stem}.bin");
        self.write_bytes(&bin, &bytes)?;
        let mut shape = vec![traj.snapshots.len()];
        shape.extend(std::iter::repeat_n(grid.n(), grid.dim()));
        let sidecar = SnapshotSidecar {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            file: &bin,
            dtype: dtype.name(),
            byte_order: "little",
            layout: "row-major",
            shape,
            length: grid.length(),
            times: &traj.times,
        };
        self.write_json(&format!("{stem}.json"), &sidecar)
    }

    /// Writes `manifest.json`. It lists every other file with its hash.
    pub fn finish(
        self,
        subcommand: &str,
        seed: u64,
        workers: usize,
        wall_time_s: f64,
        status: &str,
    ) -> Result<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed,
            workers,
            wall_time_s,
            status,
            schema_versions: SchemaVersions {
                csv: CSV_SCHEMA_VERSION,
                snapshot: SNAPSHOT_SCHEMA_VERSION,
                manifest: MANIFEST_SCHEMA_VERSION,
            },
            files: &self.files,
            checks: &self.checks,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
