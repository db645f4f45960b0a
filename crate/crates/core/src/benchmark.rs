//! The synthetic distillation benchmark: train a full-modality teacher, a
//! trajectory-only student with and without distillation, and compare them
//! on held-out scenes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, ConstantVelocity, MetricReport};
use crate::losses::KdToggles;
use crate::par::Parallelism;
use crate::scene::Sample;
use crate::synth::{generate_dataset, GeneratorConfig};
use crate::train::{
    distill_student, train_teacher, ArchConfig, ExperimentConfig, OptimizerConfig, TrainOptions,
};

/// Offsets separating the train and test generator seeds of a run.
pub const TRAIN_SEED_BASE: u64 = 1000;
pub const TEST_SEED_BASE: u64 = 9_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub generator: GeneratorConfig,
    pub experiment: ExperimentConfig,
}

impl Default for BenchmarkConfig {
    /// Sized to finish a seed in a few minutes on one CPU core.
    fn default() -> Self {
        Self {
            train_scenes: 256,
            test_scenes: 128,
            generator: GeneratorConfig {
                pose_signal_gain: 1.0,
                ..Default::default()
            },
            experiment: ExperimentConfig {
                arch: ArchConfig {
                    dim: 32,
                    heads: 2,
                    layers: 1,
                    ..Default::default()
                },
                optimizer: OptimizerConfig {
                    learning_rate: 2e-3,
                    ..Default::default()
                },
                epochs: 20,
                batch_size: 8,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: MetricReport,
    pub teacher: MetricReport,
    pub student: MetricReport,
    pub distilled: MetricReport,
    pub teacher_hash_before: String,
    pub teacher_hash_after: String,
}

impl SeedOutcome {
    /// Relative ADE₁ reduction of the distilled student over its twin, percent.
    pub fn kd_gain_percent(&self) -> f64 {
        100.0 * (self.student.ade_1 - self.distilled.ade_1) / self.student.ade_1
    }
}

pub fn benchmark_data(config: &BenchmarkConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let make = |base: u64, count: usize| -> Result<Vec<Sample>> {
        let gen = GeneratorConfig {
            seed: base + seed,
            ..config.generator.clone()
        };
        generate_dataset(&gen, count, Parallelism::Auto)?
            .iter()
            .map(Sample::from_scene)
            .collect()
    };
    Ok((
        make(TRAIN_SEED_BASE, config.train_scenes)?,
        make(TEST_SEED_BASE, config.test_scenes)?,
    ))
}

pub fn run_seed(config: &BenchmarkConfig, seed: u64) -> Result<SeedOutcome> {
    let (train, test) = benchmark_data(config, seed)?;
    let exp = ExperimentConfig {
        seed,
        ..config.experiment.clone()
    };
    let padding = exp.padding;
    let eval = |m: &dyn crate::eval::Forecaster| evaluate(m, &test, padding, Parallelism::Auto);

    let baseline = eval(&ConstantVelocity {
        horizon: exp.future_frames,
    })?;
    let teacher = train_teacher(&exp, &train, TrainOptions::default())?;
    let teacher_hash_before = teacher.parameter_hash();
    let teacher_report = eval(&teacher)?;
    log::info!("seed {seed}: teacher ADE1 {:.4}", teacher_report.ade_1);

    let twin_cfg = ExperimentConfig {
        kd: KdToggles::OFF,
        ..exp.clone()
    };
    let twin = distill_student(&twin_cfg, &teacher, &train, TrainOptions::default())?;
    let student = eval(&twin)?;
    let distilled_model = distill_student(&exp, &teacher, &train, TrainOptions::default())?;
    let distilled = eval(&distilled_model)?.compared_to(&student);
    log::info!(
        "seed {seed}: student ADE1 {:.4}, distilled ADE1 {:.4}",
        student.ade_1,
        distilled.ade_1
    );

    Ok(SeedOutcome {
        seed,
        baseline,
        teacher: teacher_report,
        student,
        distilled,
        teacher_hash_before,
        teacher_hash_after: teacher.parameter_hash(),
    })
}

/// Median with the upper-middle element for even lengths; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.get(v.len() / 2).copied()
}
