//! Path resolution against `--workdir` and staged writes: outputs go to a
//! hidden staging directory and are moved into place only once the command
//! has succeeded, so failures leave nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{runtime, CliError, CliResult};
use crate::manifest::{
    append_manifest, config_hash, find_completed, manifest_path, now, sha256_file, Artifact,
    RunManifest,
};

#[derive(Clone, Debug)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Display form of `p` relative to the root when possible.
    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .display()
            .to_string()
    }

    pub fn existing(&self, p: &Path, what: &str) -> CliResult<PathBuf> {
        let path = self.resolve(p);
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "{what} {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn input_artifact(&self, path: &Path) -> CliResult<Artifact> {
        let sha256 = if path.is_dir() {
            dir_hash(path)?
        } else {
            sha256_file(path)?
        };
        Ok(Artifact {
            path: self.relative(path),
            sha256,
        })
    }
}

/// Hash over the sorted (name, content hash) pairs of a directory's files,
/// ignoring the manifest.
pub fn dir_hash(dir: &Path) -> CliResult<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| runtime(dir.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .is_some_and(|n| n != crate::manifest::MANIFEST_FILE)
        })
        .collect();
    names.sort();
    let mut listing = String::new();
    for p in names {
        listing.push_str(&format!(
            "{} {}\n",
            p.file_name().unwrap_or_default().to_string_lossy(),
            sha256_file(&p)?
        ));
    }
    Ok(crate::manifest::sha256_hex(listing.as_bytes()))
}

/// Everything that identifies one run before it starts.
pub struct RunPlan {
    pub command: String,
    pub out_dir: PathBuf,
    /// Output file names relative to `out_dir`.
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub seed: u64,
}

pub enum Outcome {
    UpToDate(RunManifest),
    Ready(Staging),
}

impl RunPlan {
    pub fn hash(&self) -> String {
        config_hash(&self.command, &self.config, &self.inputs)
    }

    /// Returns the completed record on `--resume`, otherwise checks that no
    /// output would be overwritten and opens a staging area.
    pub fn begin(self, resume: bool) -> CliResult<Outcome> {
        let hash = self.hash();
        if self.out_dir.is_dir() && resume {
            if let Some(done) = find_completed(&self.out_dir, &self.command, &hash)? {
                return Ok(Outcome::UpToDate(done));
            }
        }
        if self.out_dir.exists() && !self.out_dir.is_dir() {
            return Err(CliError::Usage(format!(
                "{} exists and is not a directory",
                self.out_dir.display()
            )));
        }
        for name in &self.outputs {
            let p = self.out_dir.join(name);
            if p.exists() {
                return Err(CliError::Usage(format!(
                    "{} already exists and is not part of a matching completed run; use a fresh output path",
                    p.display()
                )));
            }
        }
        Staging::open(self, hash).map(Outcome::Ready)
    }
}

pub struct Staging {
    plan: RunPlan,
    hash: String,
    dir: PathBuf,
    created_out: bool,
    started_at: u64,
    done: bool,
}

impl Staging {
    fn open(plan: RunPlan, hash: String) -> CliResult<Self> {
        let created_out = !plan.out_dir.exists();
        let dir = plan
            .out_dir
            .join(format!(".staging-{}", std::process::id()));
        fs::create_dir_all(&dir).map_err(|e| runtime(dir.display(), e))?;
        Ok(Self {
            plan,
            hash,
            dir,
            created_out,
            started_at: now(),
            done: false,
        })
    }

    /// Where output `name` should be written during the run.
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn out_dir(&self) -> &Path {
        &self.plan.out_dir
    }

    /// Moves every planned output into place and appends the manifest record.
    pub fn commit(mut self, details: serde_json::Value) -> CliResult<RunManifest> {
        let mut artifacts = Vec::with_capacity(self.plan.outputs.len());
        for name in &self.plan.outputs {
            let staged = self.dir.join(name);
            let sha256 = sha256_file(&staged)?;
            let target = self.plan.out_dir.join(name);
            fs::rename(&staged, &target).map_err(|e| runtime(target.display(), e))?;
            artifacts.push(Artifact {
                path: name.clone(),
                sha256,
            });
        }
        let record = RunManifest {
            command: self.plan.command.clone(),
            config_hash: self.hash.clone(),
            code_version: trajkd::train::CODE_VERSION.to_string(),
            seed: self.plan.seed,
            started_at: self.started_at,
            finished_at: now(),
            config: self.plan.config.clone(),
            inputs: self.plan.inputs.clone(),
            artifacts,
            details,
        };
        append_manifest(&self.plan.out_dir, &record)?;
        let _ = fs::remove_dir_all(&self.dir);
        self.done = true;
        log::info!(
            "wrote {} ({} artifacts)",
            manifest_path(&self.plan.out_dir).display(),
            record.artifacts.len()
        );
        Ok(record)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        let _ = fs::remove_dir_all(&self.dir);
        if self.created_out {
            let _ = fs::remove_dir(&self.plan.out_dir);
        }
    }
}
