//! Teacher pretraining and student distillation.

mod checkpoint;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, OptimizerConfig};

use crate::autograd::{Graph, Var};
use crate::encoders::{
    EncoderVariant, LatentPacket, ModalitySet, Model, ModelConfig, TemporalPooling, TextEncoderKind,
};
use crate::error::{Error, Result};
use crate::losses::{
    kd_loss_plain, kd_loss_reg, regression_loss, total_loss_var, KdDivergence, KdForm, KdToggles,
    LossReport, LossWeights, Regime, RegressionKind, Target,
};
use crate::par::{self, Parallelism};
use crate::params::Grads;
use crate::scene::{apply_mask, ModalityBundle, ObservationMask, PaddingMode, Sample};

/// Mode counts covered by the ablation grid.
pub const ALLOWED_MODES: [usize; 4] = [1, 6, 10, 20];

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Encoder sizes shared by teacher and student so their latents line up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub neighbor_radius: f64,
    pub use_relation_text: bool,
    pub temporal_pooling: TemporalPooling,
    pub text_encoder: TextEncoderKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dim: m.dim,
            heads: m.heads,
            layers: m.layers,
            neighbor_radius: m.neighbor_radius,
            use_relation_text: m.use_relation_text,
            temporal_pooling: m.temporal_pooling,
            text_encoder: m.text_encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub teacher_modalities: ModalitySet,
    pub student_modalities: ModalitySet,
    pub variant: EncoderVariant,
    pub kd: KdToggles,
    /// `None` picks cosine alignment with a prior term for the graph encoder
    /// and plain KL for the holistic one.
    pub kd_form: Option<KdForm>,
    pub kd_divergence: KdDivergence,
    pub lambda_cos: f64,
    pub lambda_reg: f64,
    pub modes: usize,
    pub obs_frames: usize,
    pub future_frames: usize,
    pub pose_dim: usize,
    /// Regression losses; `None` picks Laplace NLL for the graph encoder and
    /// winner-takes-all L2 for the holistic one.
    pub teacher_regression: Option<RegressionKind>,
    pub student_regression: Option<RegressionKind>,
    pub arch: ArchConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub padding: PaddingMode,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            teacher_modalities: ModalitySet::XPS,
            student_modalities: ModalitySet::X,
            variant: EncoderVariant::Graph,
            kd: KdToggles::ON,
            kd_form: None,
            kd_divergence: KdDivergence::Gaussian,
            lambda_cos: 0.5,
            lambda_reg: 3.0,
            modes: 6,
            obs_frames: crate::scene::DEFAULT_OBS_FRAMES,
            future_frames: crate::scene::DEFAULT_FUTURE_FRAMES,
            pose_dim: crate::scene::POSE_DIM,
            teacher_regression: None,
            student_regression: None,
            arch: ArchConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            batch_size: 8,
            padding: PaddingMode::Zero,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !self
            .student_modalities
            .is_subset_of(self.teacher_modalities)
        {
            return Err(Error::Config(format!(
                "student modalities {} are not a subset of teacher modalities {}",
                self.student_modalities, self.teacher_modalities
            )));
        }
        if !ALLOWED_MODES.contains(&self.modes) {
            return Err(Error::Config(format!(
                "mode count {} not in {ALLOWED_MODES:?}",
                self.modes
            )));
        }
        if self.obs_frames < 2 {
            return Err(Error::Config(
                "at least two observed frames are needed for the 2-frame regime".into(),
            ));
        }
        if !(self.lambda_cos >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.optimizer.learning_rate > 0.0)
            || !(0.0..=1.0).contains(&self.optimizer.min_lr_ratio)
        {
            return Err(Error::Config(
                "learning rate must be positive and min_lr_ratio within [0, 1]".into(),
            ));
        }
        self.model_config(Role::Teacher).validate()
    }

    pub fn modalities(&self, role: Role) -> ModalitySet {
        match role {
            Role::Teacher => self.teacher_modalities,
            Role::Student => self.student_modalities,
        }
    }

    pub fn regression(&self, role: Role) -> RegressionKind {
        let chosen = match role {
            Role::Teacher => self.teacher_regression,
            Role::Student => self.student_regression,
        };
        chosen.unwrap_or(match self.variant {
            EncoderVariant::Graph => RegressionKind::Nll,
            EncoderVariant::Holistic => RegressionKind::WtaL2,
        })
    }

    pub fn kd_form(&self) -> KdForm {
        self.kd_form.unwrap_or(match self.variant {
            EncoderVariant::Graph => KdForm::CosReg,
            EncoderVariant::Holistic => KdForm::Plain,
        })
    }

    pub fn model_config(&self, role: Role) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            modalities: self.modalities(role),
            dim: self.arch.dim,
            heads: self.arch.heads,
            layers: self.arch.layers,
            modes: self.modes,
            obs_frames: self.obs_frames,
            future_frames: self.future_frames,
            pose_dim: self.pose_dim,
            neighbor_radius: self.arch.neighbor_radius,
            use_relation_text: self.arch.use_relation_text,
            temporal_pooling: self.arch.temporal_pooling,
            text_encoder: self.arch.text_encoder,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_reg: self.lambda_reg,
            kd: self.kd,
        }
    }

    pub fn mask(&self, regime: Regime) -> ObservationMask {
        ObservationMask {
            keep_last: regime.keep_last(self.obs_frames),
            padding: self.padding,
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One optimizer step's record, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub role: Role,
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossReport,
}

/// Trained parameters bound to the configuration that produced them.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub role: Role,
    pub experiment: ExperimentConfig,
    pub model: Model,
    pub curve: Vec<EpochRecord>,
    pub fingerprint: String,
}

impl TrainedModel {
    pub fn new(
        role: Role,
        experiment: ExperimentConfig,
        model: Model,
        curve: Vec<EpochRecord>,
    ) -> Self {
        let fingerprint = fingerprint(role, &experiment, &model);
        Self {
            role,
            experiment,
            model,
            curve,
            fingerprint,
        }
    }

    /// SHA-256 over the parameter names, shapes and raw values only.
    pub fn parameter_hash(&self) -> String {
        parameter_hash(&self.model)
    }

    pub fn modalities(&self) -> ModalitySet {
        self.model.config.modalities
    }
}

pub fn parameter_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for (_, name, m) in model.store.iter() {
        h.update(name.as_bytes());
        h.update((m.rows as u64).to_le_bytes());
        h.update((m.cols as u64).to_le_bytes());
        for v in &m.data {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Binds parameters to role, configuration and code version.
pub fn fingerprint(role: Role, experiment: &ExperimentConfig, model: &Model) -> String {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    h.update(serde_json::to_vec(&role).expect("role serializes"));
    h.update(serde_json::to_vec(experiment).expect("config serializes"));
    h.update(parameter_hash(model).as_bytes());
    hex(&h.finalize())
}

/// Runtime options that do not affect results.
pub struct TrainOptions<'a> {
    pub parallelism: Parallelism,
    pub log: Option<&'a mut dyn Write>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            parallelism: Parallelism::Auto,
            log: None,
        }
    }
}

fn check_dataset(config: &ExperimentConfig, data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        if s.bundle.frames != config.obs_frames || s.future_frames != config.future_frames {
            return Err(Error::Shape(format!(
                "scene {i} has {}/{} observed/future frames, config expects {}/{}",
                s.bundle.frames, s.future_frames, config.obs_frames, config.future_frames
            )));
        }
        if s.bundle.pose_dim != config.pose_dim {
            return Err(Error::Shape(format!(
                "scene {i} pose dim {} != {}",
                s.bundle.pose_dim, config.pose_dim
            )));
        }
    }
    Ok(())
}

/// The three masked views of every sample, `[sample][regime]`.
fn masked_views(config: &ExperimentConfig, data: &[Sample]) -> Result<Vec<[ModalityBundle; 3]>> {
    data.iter()
        .map(|s| {
            let v = |r: Regime| apply_mask(&s.bundle, config.mask(r));
            Ok([v(Regime::Full)?, v(Regime::Two)?, v(Regime::One)?])
        })
        .collect()
}

/// Loss and parameter gradients of one scene over the three regimes.
fn scene_gradients(
    model: &Model,
    config: &ExperimentConfig,
    role: Role,
    views: &[ModalityBundle; 3],
    target: &Target,
    teacher: Option<&[LatentPacket; 3]>,
) -> Result<(Grads, LossReport)> {
    let g = Graph::new(&model.store);
    let mut comps: [Option<Var>; 9] = Default::default();
    for regime in Regime::ALL {
        let r = regime.index();
        let out = model.forward(&g, &views[r])?;
        if !g.value(out.decoded.proposals).all_finite() || !g.value(out.decoded.scales).all_finite()
        {
            return Err(Error::Diverged {
                epoch: 0,
                step: 0,
                detail: format!("non-finite forecast in the {regime:?} regime"),
            });
        }
        comps[r] = Some(regression_loss(config.regression(role), &g, &out.decoded, target)?.total);
        if let Some(packets) = teacher {
            let (local, global) = match config.kd_form() {
                KdForm::Plain => {
                    kd_loss_plain(&g, &packets[r], &out.latents, config.kd_divergence)?
                }
                KdForm::CosReg => kd_loss_reg(&g, &packets[r], &out.latents, config.lambda_cos)?,
            };
            if config.kd.local {
                comps[3 + r] = Some(local);
            }
            if config.kd.global {
                comps[6 + r] = Some(global);
            }
        }
    }
    let weights = config.loss_weights();
    let total = total_loss_var(&g, &comps, &weights);
    let values = comps.map(|c| c.map_or(0.0, |v| g.scalar(v)));
    let mut report = LossReport::from_components(values, &weights);
    report.total = g.scalar(total);
    Ok((g.backward(total).into_param_grads(&model.store), report))
}

fn run_training(
    config: &ExperimentConfig,
    role: Role,
    data: &[Sample],
    teacher_latents: Option<&[[LatentPacket; 3]]>,
    opts: &mut TrainOptions,
) -> Result<TrainedModel> {
    config.validate()?;
    check_dataset(config, data)?;
    let mut model = Model::new(config.model_config(role), config.seed)?;
    let views = masked_views(config, data)?;
    let targets: Vec<Target> = data.iter().map(Target::from_sample).collect();
    let mut adam = Adam::new(config.optimizer.clone(), &model.store);
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossReport::default();
        for batch in order.chunks(config.batch_size) {
            let results = par::map(opts.parallelism, batch, |&i| {
                scene_gradients(
                    &model,
                    config,
                    role,
                    &views[i],
                    &targets[i],
                    teacher_latents.map(|t| &t[i]),
                )
            });
            let mut grads = Grads::zeros_like(&model.store);
            let mut loss = LossReport::default();
            let share = 1.0 / batch.len() as f64;
            for r in results {
                let (g, l) = r.map_err(|e| match e {
                    Error::Diverged { detail, .. } => Error::Diverged {
                        epoch,
                        step,
                        detail,
                    },
                    other => other,
                })?;
                grads.add_assign(&g);
                loss.accumulate(&l, share);
            }
            grads.scale_in_place(share);
            let lr = config.optimizer.learning_rate_at(step, total_steps);
            let grad_norm = adam.clip(&mut grads);
            let record = StepRecord {
                role,
                epoch,
                step,
                learning_rate: lr,
                grad_norm,
                loss,
            };
            if let Some(w) = opts.log.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            if !loss.total.is_finite() || !grads.all_finite() {
                let snapshot = serde_json::to_string(&record).expect("record serializes");
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite loss or gradient; last step {snapshot}"),
                });
            }
            adam.step(&mut model.store, &grads, lr);
            epoch_loss.accumulate(&loss, batch.len() as f64 / data.len() as f64);
            step += 1;
        }
        log::info!("{role:?} epoch {epoch}: total loss {:.4}", epoch_loss.total);
        curve.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss,
        });
    }
    Ok(TrainedModel::new(role, config.clone(), model, curve))
}

/// Trains the teacher on the regression objective only.
pub fn train_teacher(
    config: &ExperimentConfig,
    data: &[Sample],
    mut opts: TrainOptions,
) -> Result<TrainedModel> {
    let mut cfg = config.clone();
    cfg.kd = KdToggles::OFF;
    run_training(&cfg, Role::Teacher, data, None, &mut opts).map(|mut t| {
        t.experiment = config.clone();
        t.fingerprint = fingerprint(Role::Teacher, config, &t.model);
        t
    })
}

/// Latent packets of the frozen teacher for each sample and regime.
pub fn teacher_latents(
    config: &ExperimentConfig,
    teacher: &TrainedModel,
    data: &[Sample],
    mode: Parallelism,
) -> Result<Vec<[LatentPacket; 3]>> {
    let views = masked_views(config, data)?;
    par::map(mode, &views, |v| -> Result<[LatentPacket; 3]> {
        Ok([
            teacher.model.predict(&v[0])?.1,
            teacher.model.predict(&v[1])?.1,
            teacher.model.predict(&v[2])?.1,
        ])
    })
    .into_iter()
    .collect()
}

/// Trains the student on the combined objective against a frozen teacher.
pub fn distill_student(
    config: &ExperimentConfig,
    teacher: &TrainedModel,
    data: &[Sample],
    mut opts: TrainOptions,
) -> Result<TrainedModel> {
    config.validate()?;
    let t_cfg = &teacher.model.config;
    if !config.student_modalities.is_subset_of(t_cfg.modalities) {
        return Err(Error::Config(format!(
            "teacher was trained on {} which does not cover student modalities {}",
            t_cfg.modalities, config.student_modalities
        )));
    }
    if t_cfg.dim != config.arch.dim || t_cfg.obs_frames != config.obs_frames {
        return Err(Error::Config(format!(
            "teacher latent size {} / horizon {} differ from student {} / {}",
            t_cfg.dim, t_cfg.obs_frames, config.arch.dim, config.obs_frames
        )));
    }
    check_dataset(config, data)?;
    let latents = if config.kd.any() {
        Some(teacher_latents(config, teacher, data, opts.parallelism)?)
    } else {
        None
    };
    if let Some(l) = &latents {
        if l.len() != data.len() {
            return Err(Error::InvalidInput(
                "teacher latents missing for some samples".into(),
            ));
        }
    }
    run_training(config, Role::Student, data, latents.as_deref(), &mut opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GeneratorConfig};

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            arch: ArchConfig {
                dim: 8,
                heads: 2,
                layers: 1,
                ..Default::default()
            },
            epochs: 2,
            batch_size: 4,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub(crate) fn tiny_data(count: usize) -> Vec<Sample> {
        let scenes = generate_dataset(
            &GeneratorConfig {
                seed: 5,
                n_agents: [2, 3],
                ..Default::default()
            },
            count,
            Parallelism::Auto,
        )
        .unwrap();
        scenes
            .iter()
            .map(|s| Sample::from_scene(s).unwrap())
            .collect()
    }

    #[test]
    fn rejects_student_outside_teacher() {
        let cfg = ExperimentConfig {
            teacher_modalities: ModalitySet::XP,
            student_modalities: ModalitySet::XS,
            ..tiny_config()
        };
        assert!(matches!(
            train_teacher(&cfg, &tiny_data(2), TrainOptions::default()),
            Err(Error::Config(_))
        ));
        let cfg = ExperimentConfig {
            modes: 5,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn teacher_training_reduces_loss_and_is_deterministic() {
        let data = tiny_data(32);
        let cfg = tiny_config();
        let mut log = Vec::new();
        let a = train_teacher(
            &cfg,
            &data,
            TrainOptions {
                parallelism: Parallelism::Auto,
                log: Some(&mut log),
            },
        )
        .unwrap();
        let b = train_teacher(
            &cfg,
            &data,
            TrainOptions {
                parallelism: Parallelism::Sequential,
                log: None,
            },
        )
        .unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.fingerprint, b.fingerprint);
        let first = a.curve.first().unwrap().mean_loss.total;
        let last = a.curve.last().unwrap().mean_loss.total;
        assert!(last.is_finite() && last < first, "{first} -> {last}");
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 2 * 8);
        let rec: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.loss.kd_local_full, 0.0);
    }

    #[test]
    fn distillation_leaves_teacher_untouched() {
        let data = tiny_data(8);
        let cfg = ExperimentConfig {
            epochs: 1,
            ..tiny_config()
        };
        let teacher = train_teacher(&cfg, &data, TrainOptions::default()).unwrap();
        let before = teacher.parameter_hash();
        let student = distill_student(&cfg, &teacher, &data, TrainOptions::default()).unwrap();
        assert_eq!(before, teacher.parameter_hash());
        assert_eq!(student.role, Role::Student);
        assert!(student.curve[0].mean_loss.kd_local_full > 0.0);
    }

    #[test]
    fn disabled_kd_matches_teacher_training_on_student_modalities() {
        let data = tiny_data(8);
        let cfg = ExperimentConfig {
            epochs: 1,
            kd: KdToggles::OFF,
            ..tiny_config()
        };
        let teacher = train_teacher(&cfg, &data, TrainOptions::default()).unwrap();
        let mut log_s = Vec::new();
        let student = distill_student(
            &cfg,
            &teacher,
            &data,
            TrainOptions {
                log: Some(&mut log_s),
                ..Default::default()
            },
        )
        .unwrap();
        let plain_cfg = ExperimentConfig {
            teacher_modalities: cfg.student_modalities,
            ..cfg.clone()
        };
        let mut log_t = Vec::new();
        let plain = train_teacher(
            &plain_cfg,
            &data,
            TrainOptions {
                log: Some(&mut log_t),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(student.model.store, plain.model.store);
        let strip = |log: Vec<u8>| -> Vec<LossReport> {
            String::from_utf8(log)
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str::<StepRecord>(l).unwrap().loss)
                .collect()
        };
        assert_eq!(strip(log_s), strip(log_t));
    }

    #[test]
    fn diverging_run_aborts() {
        let data = tiny_data(4);
        let mut cfg = tiny_config();
        cfg.optimizer.clip_norm = None;
        cfg.optimizer.learning_rate = 1e300;
        cfg.epochs = 3;
        match train_teacher(&cfg, &data, TrainOptions::default()) {
            Err(Error::Diverged { detail, .. }) => assert!(detail.contains("non-finite")),
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|m| m.fingerprint)
            ),
        }
    }
}
