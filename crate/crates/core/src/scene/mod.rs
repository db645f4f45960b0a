//! Scene domain types, validation and the on-disk scene format.

mod bundle;
pub mod dataset;
pub mod vocab;

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bundle::{apply_mask, ModalityBundle, ObservationMask, PaddingMode, Sample};
pub use dataset::{read_dataset, read_samples, write_dataset};
pub use vocab::CaptionToken;

use crate::error::{Error, Result};

pub const SCENE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_OBS_FRAMES: usize = 8;
pub const DEFAULT_FUTURE_FRAMES: usize = 12;
pub const DEFAULT_FRAME_RATE: f64 = 2.5;
/// Joint-angle parameters per pose; the first three are the global orientation
/// (axis-angle about the vertical axis lives in component 2).
pub const POSE_DIM: usize = 72;
pub const POSE_YAW: usize = 2;

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<Point>,
    pub valid: Vec<bool>,
}

impl Trajectory {
    pub fn new(positions: Vec<Point>) -> Self {
        let valid = vec![true; positions.len()];
        Self { positions, valid }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFeature {
    pub theta: Vec<f64>,
    pub available: bool,
}

impl PoseFeature {
    pub fn unavailable(dim: usize) -> Self {
        Self {
            theta: vec![0.0; dim],
            available: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub neighbor: u32,
    pub caption: CaptionToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub trajectory_obs: Trajectory,
    pub trajectory_fut: Trajectory,
    /// World-frame heading per observed frame, radians in `[-π, π)`.
    pub heading: Vec<f64>,
    pub pose: Vec<PoseFeature>,
    /// Caption tokens per observed frame (motion caption, then obstacle caption).
    pub captions: Vec<Vec<CaptionToken>>,
    pub relations: Vec<Relation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    Point { at: Point },
    Segment { from: Point, to: Point },
}

impl Obstacle {
    /// Closest point of the obstacle to `p`.
    pub fn closest_point(&self, p: Point) -> Point {
        match *self {
            Obstacle::Point { at } => at,
            Obstacle::Segment { from, to } => {
                let d = [to[0] - from[0], to[1] - from[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                if len2 == 0.0 {
                    return from;
                }
                let t =
                    (((p[0] - from[0]) * d[0] + (p[1] - from[1]) * d[1]) / len2).clamp(0.0, 1.0);
                [from[0] + t * d[0], from[1] + t * d[1]]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub agents: Vec<AgentState>,
    pub obstacles: Vec<Obstacle>,
    pub frame_rate: f64,
}

impl Scene {
    pub fn obs_frames(&self) -> usize {
        self.agents.first().map_or(0, |a| a.trajectory_obs.len())
    }

    pub fn future_frames(&self) -> usize {
        self.agents.first().map_or(0, |a| a.trajectory_fut.len())
    }

    pub fn pose_dim(&self) -> usize {
        self.agents
            .first()
            .and_then(|a| a.pose.first())
            .map_or(POSE_DIM, |p| p.theta.len())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("<scene>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text).map_err(|e| Error::json("<scene>", e))?;
        if scene.schema_version != SCENE_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported scene schema version {} (expected {SCENE_SCHEMA_VERSION})",
                scene.schema_version
            )));
        }
        Ok(scene)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path, source),
            other => other,
        })
    }

    /// The same scene expressed in a world frame rotated by `angle` about the origin.
    pub fn rotated(&self, angle: f64) -> Scene {
        let (s, c) = angle.sin_cos();
        let rot = |p: Point| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let mut out = self.clone();
        for a in &mut out.agents {
            a.trajectory_obs
                .positions
                .iter_mut()
                .for_each(|p| *p = rot(*p));
            a.trajectory_fut
                .positions
                .iter_mut()
                .for_each(|p| *p = rot(*p));
            a.heading
                .iter_mut()
                .for_each(|h| *h = wrap_angle(*h + angle));
            for pose in &mut a.pose {
                if pose.theta.len() > POSE_YAW {
                    pose.theta[POSE_YAW] = wrap_angle(pose.theta[POSE_YAW] + angle);
                }
            }
        }
        for o in &mut out.obstacles {
            match o {
                Obstacle::Point { at } => *at = rot(*at),
                Obstacle::Segment { from, to } => {
                    *from = rot(*from);
                    *to = rot(*to);
                }
            }
        }
        out
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub agent: Option<u32>,
    pub field: String,
    pub frame: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.agent, self.frame) {
            (Some(a), Some(t)) => {
                write!(f, "agent {a}, {} frame {t}: {}", self.field, self.message)
            }
            (Some(a), None) => write!(f, "agent {a}, {}: {}", self.field, self.message),
            _ => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Every invariant violation in `scene`; empty when the scene is well formed.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |agent: Option<u32>, field: &str, frame: Option<usize>, message: String| {
        out.push(Violation {
            agent,
            field: field.to_owned(),
            frame,
            message,
        })
    };
    if scene.agents.is_empty() {
        push(None, "agents", None, "scene has no agents".into());
    }
    if !(scene.frame_rate.is_finite() && scene.frame_rate > 0.0) {
        push(
            None,
            "frame_rate",
            None,
            format!("frame rate {} is not positive", scene.frame_rate),
        );
    }
    for (k, o) in scene.obstacles.iter().enumerate() {
        let finite = match o {
            Obstacle::Point { at } => at.iter().all(|v| v.is_finite()),
            Obstacle::Segment { from, to } => from.iter().chain(to).all(|v| v.is_finite()),
        };
        if !finite {
            push(
                None,
                "obstacles",
                None,
                format!("obstacle {k} has a non-finite coordinate"),
            );
        }
    }
    let ids: HashSet<u32> = scene.agents.iter().map(|a| a.id).collect();
    let mut seen = HashSet::new();
    let t_obs = scene.obs_frames();
    let t_fut = scene.future_frames();
    let pose_dim = scene.pose_dim();
    for a in &scene.agents {
        let id = Some(a.id);
        if !seen.insert(a.id) {
            push(id, "id", None, "duplicate agent id".into());
        }
        for (name, traj, expected) in [
            ("trajectory_obs", &a.trajectory_obs, t_obs),
            ("trajectory_fut", &a.trajectory_fut, t_fut),
        ] {
            if traj.positions.len() != traj.valid.len() {
                push(
                    id,
                    name,
                    None,
                    format!(
                        "{} positions but {} validity flags",
                        traj.positions.len(),
                        traj.valid.len()
                    ),
                );
            }
            if traj.positions.len() != expected {
                push(
                    id,
                    name,
                    None,
                    format!(
                        "length {} differs from scene length {expected}",
                        traj.positions.len()
                    ),
                );
            }
            for (t, (p, v)) in traj.positions.iter().zip(&traj.valid).enumerate() {
                if *v && !(p[0].is_finite() && p[1].is_finite()) {
                    push(id, name, Some(t), "non-finite position marked valid".into());
                }
            }
        }
        if a.heading.len() != t_obs {
            push(
                id,
                "heading",
                None,
                format!("{} headings for {t_obs} observed frames", a.heading.len()),
            );
        }
        for (t, h) in a.heading.iter().enumerate() {
            if !(h.is_finite() && (-PI..PI).contains(h)) {
                push(
                    id,
                    "heading",
                    Some(t),
                    format!("heading {h} outside [-pi, pi)"),
                );
            }
        }
        if a.pose.len() != t_obs {
            push(
                id,
                "pose",
                None,
                format!("{} poses for {t_obs} observed frames", a.pose.len()),
            );
        }
        for (t, p) in a.pose.iter().enumerate() {
            if p.theta.len() != pose_dim {
                push(
                    id,
                    "pose",
                    Some(t),
                    format!(
                        "theta has {} components, expected {pose_dim}",
                        p.theta.len()
                    ),
                );
            }
            if p.available
                && !p
                    .theta
                    .iter()
                    .all(|v| v.is_finite() && (-PI..=PI).contains(v))
            {
                push(
                    id,
                    "pose",
                    Some(t),
                    "theta component non-finite or outside [-pi, pi]".into(),
                );
            }
        }
        if a.captions.len() != t_obs {
            push(
                id,
                "captions",
                None,
                format!(
                    "{} caption frames for {t_obs} observed frames",
                    a.captions.len()
                ),
            );
        }
        for (t, frame) in a.captions.iter().enumerate() {
            for tok in frame {
                if !tok.is_consistent() {
                    push(
                        id,
                        "captions",
                        Some(t),
                        format!("token {} does not match the vocabulary", tok.template_id),
                    );
                }
            }
        }
        for r in &a.relations {
            if r.neighbor == a.id {
                push(id, "relations", None, "self-relation".into());
            } else if !ids.contains(&r.neighbor) {
                push(
                    id,
                    "relations",
                    None,
                    format!("relation to missing agent {}", r.neighbor),
                );
            }
            if !r.caption.is_consistent() {
                push(
                    id,
                    "relations",
                    None,
                    format!(
                        "relation token {} does not match the vocabulary",
                        r.caption.template_id
                    ),
                );
            }
        }
    }
    out
}
