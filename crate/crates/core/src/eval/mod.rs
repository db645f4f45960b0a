//! Best-of-F displacement metrics over the three observation regimes, and
//! comparison reports.

mod plot;
mod report;

use serde::{Deserialize, Serialize};

pub use plot::bar_chart_png;
pub use report::{emit_report, render_table, report_file_names, ReportFiles};

use crate::encoders::{ForecastSet, ModalitySet};
use crate::error::{Error, Result};
use crate::losses::{Regime, Target};
use crate::par::{self, Parallelism};
use crate::scene::{apply_mask, ModalityBundle, ObservationMask, PaddingMode, Sample};
use crate::train::TrainedModel;

/// Metric names in report order.
pub const METRICS: [&str; 6] = ["ADE", "ADE2", "ADE1", "FDE", "FDE2", "FDE1"];

/// Per-agent best-of-F errors `(ade, fde)`; `None` for agents with no valid future step.
pub fn per_agent_errors(forecast: &ForecastSet, target: &Target) -> Vec<Option<(f64, f64)>> {
    let t = target.horizon;
    (0..target.n_agents())
        .map(|a| {
            let valid: Vec<usize> = (0..t).filter(|&s| target.valid[a * t + s]).collect();
            let last = *valid.last()?;
            let gt = target.points.row(a);
            let mut best_ade = f64::INFINITY;
            let mut best_fde = f64::INFINITY;
            for f in 0..forecast.modes {
                let p = forecast.proposal(a, f);
                let err = |s: usize| (p[s][0] - gt[2 * s]).hypot(p[s][1] - gt[2 * s + 1]);
                let ade = valid.iter().map(|&s| err(s)).sum::<f64>() / valid.len() as f64;
                best_ade = best_ade.min(ade);
                best_fde = best_fde.min(err(last));
            }
            Some((best_ade, best_fde))
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean over agents of the minimum over modes of the mean Euclidean error.
pub fn min_ade(forecast: &ForecastSet, target: &Target) -> f64 {
    mean_of(
        per_agent_errors(forecast, target)
            .into_iter()
            .flatten()
            .map(|e| e.0),
    )
}

/// Mean over agents of the minimum over modes of the final-step Euclidean error.
pub fn min_fde(forecast: &ForecastSet, target: &Target) -> f64 {
    mean_of(
        per_agent_errors(forecast, target)
            .into_iter()
            .flatten()
            .map(|e| e.1),
    )
}

/// Anything that turns an observed bundle into forecasts.
pub trait Forecaster: Sync {
    fn name(&self) -> String;
    fn fingerprint(&self) -> Option<String> {
        None
    }
    fn modalities(&self) -> ModalitySet;
    fn forecast(&self, bundle: &ModalityBundle) -> Result<ForecastSet>;
}

impl Forecaster for TrainedModel {
    fn name(&self) -> String {
        format!("{:?} {}", self.role, self.modalities()).to_lowercase()
    }

    fn fingerprint(&self) -> Option<String> {
        Some(self.fingerprint.clone())
    }

    fn modalities(&self) -> ModalitySet {
        self.model.config.modalities
    }

    fn forecast(&self, bundle: &ModalityBundle) -> Result<ForecastSet> {
        self.model.predict(bundle).map(|p| p.0)
    }
}

/// Extrapolates the last observed displacement; stands still with one valid frame.
#[derive(Clone, Debug)]
pub struct ConstantVelocity {
    pub horizon: usize,
}

impl Forecaster for ConstantVelocity {
    fn name(&self) -> String {
        "constant velocity".into()
    }

    fn modalities(&self) -> ModalitySet {
        ModalitySet::X
    }

    fn forecast(&self, b: &ModalityBundle) -> Result<ForecastSet> {
        let n = b.n_agents();
        let t = b.frames - 1;
        let mut proposals = Vec::with_capacity(n * self.horizon * 2);
        for a in 0..n {
            let k = b.idx(a, t);
            let p = b.positions[k];
            let v = if t > 0 && b.traj_valid[k] && b.traj_valid[k - 1] {
                [p[0] - b.positions[k - 1][0], p[1] - b.positions[k - 1][1]]
            } else {
                [0.0, 0.0]
            };
            for s in 1..=self.horizon {
                proposals.extend([p[0] + v[0] * s as f64, p[1] + v[1] * s as f64]);
            }
        }
        Ok(ForecastSet {
            n_agents: n,
            modes: 1,
            horizon: self.horizon,
            proposals,
            mode_logits: crate::tensor::Mat::zeros(n, 1),
            scales: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub fingerprint: Option<String>,
    pub ade: f64,
    pub ade_2: f64,
    pub ade_1: f64,
    pub fde: f64,
    pub fde_2: f64,
    pub fde_1: f64,
    /// Agents that contributed to each metric.
    pub agents: usize,
    #[serde(default)]
    pub avg_improvement_percent: Option<f64>,
    #[serde(default)]
    pub baseline: Option<String>,
}

impl MetricReport {
    /// Values in [`METRICS`] order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.ade, self.ade_2, self.ade_1, self.fde, self.fde_2, self.fde_1,
        ]
    }

    /// Fills the improvement fields against `baseline`.
    pub fn compared_to(mut self, baseline: &MetricReport) -> Self {
        let imp = improvement_percent(&self, baseline);
        self.avg_improvement_percent = imp.percent;
        self.baseline = Some(baseline.name.clone());
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    /// `None` when every baseline metric is zero.
    pub percent: Option<f64>,
    /// Metrics left out because the baseline value is zero.
    pub excluded: Vec<&'static str>,
}

/// Mean over the six metrics of `100·(baseline − value)/baseline`.
pub fn improvement_percent(report: &MetricReport, baseline: &MetricReport) -> Improvement {
    let mut excluded = Vec::new();
    let mut parts = Vec::new();
    for ((name, v), b) in METRICS.iter().zip(report.values()).zip(baseline.values()) {
        if b > 0.0 {
            parts.push(100.0 * (b - v) / b);
        } else {
            log::warn!("baseline {name} is {b}; excluded from the average improvement");
            excluded.push(*name);
        }
    }
    let percent = (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64);
    Improvement { percent, excluded }
}

/// Checks that the dataset can feed a model needing `needs`.
fn check_modalities(needs: ModalitySet, data: &[Sample]) -> Result<()> {
    if needs.pose && !data.iter().any(|s| s.bundle.pose_valid.iter().any(|v| *v)) {
        return Err(Error::Modality(format!(
            "model uses {needs} but no scene carries pose"
        )));
    }
    if needs.text && !data.iter().any(|s| s.bundle.text_valid.iter().any(|v| *v)) {
        return Err(Error::Modality(format!(
            "model uses {needs} but no scene carries captions"
        )));
    }
    Ok(())
}

/// Runs `model` on the full, two-frame and one-frame views of every sample
/// and pools the best-of-F errors over all agents.
pub fn evaluate(
    model: &dyn Forecaster,
    data: &[Sample],
    padding: PaddingMode,
    mode: Parallelism,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation dataset is empty".into()));
    }
    check_modalities(model.modalities(), data)?;
    let per_scene = par::map(mode, data, |s| -> Result<[Vec<Option<(f64, f64)>>; 3]> {
        let target = Target::from_sample(s);
        let run = |r: Regime| -> Result<Vec<Option<(f64, f64)>>> {
            let view = apply_mask(
                &s.bundle,
                ObservationMask {
                    keep_last: r.keep_last(s.bundle.frames),
                    padding,
                },
            )?;
            let f = model.forecast(&view)?;
            Ok(per_agent_errors(&f, &target))
        };
        Ok([run(Regime::Full)?, run(Regime::Two)?, run(Regime::One)?])
    });
    let mut sums = [[0.0; 2]; 3];
    let mut agents = 0;
    for scene in per_scene {
        let scene = scene?;
        for (r, errs) in scene.iter().enumerate() {
            for e in errs.iter().flatten() {
                sums[r][0] += e.0;
                sums[r][1] += e.1;
                if r == 0 {
                    agents += 1;
                }
            }
        }
    }
    let n = agents.max(1) as f64;
    Ok(MetricReport {
        name: model.name(),
        fingerprint: model.fingerprint(),
        ade: sums[0][0] / n,
        ade_2: sums[1][0] / n,
        ade_1: sums[2][0] / n,
        fde: sums[0][1] / n,
        fde_2: sums[1][1] / n,
        fde_1: sums[2][1] / n,
        agents,
        avg_improvement_percent: None,
        baseline: None,
    })
}
