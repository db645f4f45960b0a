//! Grid runs over KD toggles, student modality sets and mode counts. One
//! teacher is trained per mode count at the grid root; each cell gets its own
//! run directory with a student, its evaluation and a manifest.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use trajkd::encoders::ModalitySet;
use trajkd::losses::KdToggles;
use trajkd::train::ExperimentConfig;

use crate::commands::{evaluate_command, read_metrics, train, write_report, Ctx, METRICS_FILE};
use crate::config::{load_table, resolve};
use crate::error::{CliError, CliResult};
use crate::ConfigArgs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub kd_local: Vec<bool>,
    pub kd_global: Vec<bool>,
    pub student_modalities: Vec<ModalitySet>,
    pub modes: Vec<usize>,
}

impl Default for Grid {
    /// KD local × global, off first so the undistilled student is the
    /// reference row of the report.
    fn default() -> Self {
        Self {
            kd_local: vec![false, true],
            kd_global: vec![false, true],
            student_modalities: vec![ModalitySet::X],
            modes: vec![6],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub index: usize,
    pub modes: usize,
    pub student_modalities: ModalitySet,
    pub kd: KdToggles,
}

impl GridCell {
    pub fn label(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mods: String = self
            .student_modalities
            .to_string()
            .replace('+', "")
            .to_lowercase();
        format!(
            "{:02}_f{}_{mods}_kdl-{}_kdg-{}",
            self.index,
            self.modes,
            onoff(self.kd.local),
            onoff(self.kd.global)
        )
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            modes: self.modes,
            student_modalities: self.student_modalities,
            kd: self.kd,
            ..base.clone()
        }
    }
}

impl Grid {
    /// Cells in row-major order over (modes, modalities, local, global).
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &modes in &self.modes {
            for &student_modalities in &self.student_modalities {
                for &local in &self.kd_local {
                    for &global in &self.kd_global {
                        let index = out.len();
                        out.push(GridCell {
                            index,
                            modes,
                            student_modalities,
                            kd: KdToggles { local, global },
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub experiment: ExperimentConfig,
    pub grid: Grid,
}

fn teacher_path(root: &Path, modes: usize) -> PathBuf {
    root.join(format!("teacher_f{modes}.ckpt"))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ablate(
    ctx: &Ctx,
    cfg: &ConfigArgs,
    data: &Path,
    test_data: &Path,
    out: &Path,
    epochs: Option<usize>,
    jobs: usize,
    only: Option<usize>,
) -> CliResult<()> {
    let path = cfg
        .config
        .as_deref()
        .map(|p| ctx.work.existing(p, "config file"))
        .transpose()?;
    let mut overrides = cfg.overrides.clone();
    if let Some(seed) = cfg.seed {
        overrides.push(format!("experiment.seed={seed}"));
    }
    if let Some(e) = epochs {
        overrides.push(format!("experiment.epochs={e}"));
    }
    let config: AblationConfig = resolve(load_table(path.as_deref())?, &overrides)?;
    let cells = config.grid.cells();
    if cells.is_empty() {
        return Err(CliError::Usage("ablation grid is empty".into()));
    }
    for c in &cells {
        c.apply(&config.experiment).validate()?;
    }
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let data = ctx.work.existing(data, "data directory")?;
    let test_data = ctx.work.existing(test_data, "test data directory")?;
    trajkd::scene::dataset::dataset_files(&data)?;
    trajkd::scene::dataset::dataset_files(&test_data)?;
    let root = ctx.work.resolve(out);

    let run_cell = |cell: &GridCell| -> CliResult<PathBuf> {
        let exp = cell.apply(&config.experiment);
        let dir = root.join("runs").join(cell.label());
        let teacher = teacher_path(&root, cell.modes);
        train(ctx, &exp, &data, Some(&teacher), &dir.join("student.ckpt"))?;
        evaluate_command(
            ctx,
            &dir.join("student.ckpt").display().to_string(),
            &test_data,
            &dir,
            Some(&cell.label()),
        )?;
        Ok(dir)
    };

    if let Some(k) = only {
        let cell = cells
            .get(k)
            .ok_or_else(|| CliError::Usage(format!("grid has no cell {k}")))?;
        return run_cell(cell).map(|_| ());
    }

    let mut modes: Vec<usize> = cells.iter().map(|c| c.modes).collect();
    modes.dedup();
    for &f in &modes {
        let exp = ExperimentConfig {
            modes: f,
            ..config.experiment.clone()
        };
        train(ctx, &exp, &data, None, &teacher_path(&root, f))?;
    }

    if jobs > 1 {
        run_children(ctx, &cells, jobs)?;
    } else {
        for cell in &cells {
            log::info!("ablation cell {}", cell.label());
            run_cell(cell)?;
        }
    }

    let mut reports = Vec::with_capacity(cells.len());
    let mut inputs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let dir = root.join("runs").join(cell.label());
        reports.push(read_metrics(&dir)?);
        inputs.push(ctx.work.input_artifact(&dir.join(METRICS_FILE))?);
    }
    write_report(ctx, &reports, inputs, &root, "ablate")
}

/// Runs cells as child processes of this executable, `jobs` at a time. The
/// children share the teachers already recorded at the grid root.
fn run_children(ctx: &Ctx, cells: &[crate::GridCell], jobs: usize) -> CliResult<()> {
    let exe = std::env::current_exe()
        .map_err(|e| CliError::Runtime(format!("cannot locate executable: {e}")))?;
    for batch in cells.chunks(jobs) {
        let mut children = Vec::with_capacity(batch.len());
        for cell in batch {
            let child = Command::new(&exe)
                .args(&ctx.argv[1..])
                .args(["--resume", "--jobs", "1", "--cell", &cell.index.to_string()])
                .spawn()
                .map_err(|e| {
                    CliError::Runtime(format!("cannot start cell {}: {e}", cell.label()))
                })?;
            children.push((cell, child));
        }
        for (cell, mut child) in children {
            let status = child
                .wait()
                .map_err(|e| CliError::Runtime(format!("cell {}: {e}", cell.label())))?;
            if !status.success() {
                return Err(CliError::Runtime(format!(
                    "cell {} failed with {status}",
                    cell.label()
                )));
            }
        }
    }
    Ok(())
}
