use serde::{Deserialize, Serialize};

use super::{Point, Scene};
use crate::error::{Error, Result};

/// Per-agent aligned observation payloads for one scene, stored agent-major
/// (`index = agent * frames + t`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub agent_ids: Vec<u32>,
    pub frames: usize,
    pub pose_dim: usize,
    pub positions: Vec<Point>,
    pub traj_valid: Vec<bool>,
    pub heading: Vec<f64>,
    pub pose: Vec<f64>,
    pub pose_valid: Vec<bool>,
    pub captions: Vec<Vec<usize>>,
    pub text_valid: Vec<bool>,
    /// `(neighbor index, template id)` per agent.
    pub relations: Vec<Vec<(usize, usize)>>,
}

impl ModalityBundle {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let n = scene.agents.len();
        let frames = scene.obs_frames();
        let pose_dim = scene.pose_dim();
        let mut b = ModalityBundle {
            agent_ids: scene.agents.iter().map(|a| a.id).collect(),
            frames,
            pose_dim,
            positions: Vec::with_capacity(n * frames),
            traj_valid: Vec::with_capacity(n * frames),
            heading: Vec::with_capacity(n * frames),
            pose: Vec::with_capacity(n * frames * pose_dim),
            pose_valid: Vec::with_capacity(n * frames),
            captions: Vec::with_capacity(n * frames),
            text_valid: Vec::with_capacity(n * frames),
            relations: Vec::with_capacity(n),
        };
        for a in &scene.agents {
            if a.trajectory_obs.len() != frames
                || a.heading.len() != frames
                || a.pose.len() != frames
                || a.captions.len() != frames
            {
                return Err(Error::Shape(format!(
                    "agent {} observation length differs from {frames}",
                    a.id
                )));
            }
            for t in 0..frames {
                let valid = a.trajectory_obs.valid[t];
                b.positions.push(if valid {
                    a.trajectory_obs.positions[t]
                } else {
                    [0.0, 0.0]
                });
                b.traj_valid.push(valid);
                b.heading.push(if valid { a.heading[t] } else { 0.0 });
                let pose = &a.pose[t];
                if pose.theta.len() != pose_dim {
                    return Err(Error::Shape(format!(
                        "agent {} pose dim {} != {pose_dim}",
                        a.id,
                        pose.theta.len()
                    )));
                }
                let pv = pose.available && valid;
                if pv {
                    b.pose.extend_from_slice(&pose.theta);
                } else {
                    b.pose.extend(std::iter::repeat_n(0.0, pose_dim));
                }
                b.pose_valid.push(pv);
                let tv = valid && !a.captions[t].is_empty();
                b.captions.push(if tv {
                    a.captions[t].iter().map(|c| c.template_id).collect()
                } else {
                    Vec::new()
                });
                b.text_valid.push(tv);
            }
            let rels = a
                .relations
                .iter()
                .map(|r| {
                    scene
                        .agents
                        .iter()
                        .position(|o| o.id == r.neighbor)
                        .map(|j| (j, r.caption.template_id))
                        .ok_or_else(|| {
                            Error::InvalidInput(format!(
                                "agent {} relates to missing agent {}",
                                a.id, r.neighbor
                            ))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            b.relations.push(rels);
        }
        Ok(b)
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    #[inline]
    pub fn idx(&self, agent: usize, t: usize) -> usize {
        agent * self.frames + t
    }

    pub fn pose_at(&self, agent: usize, t: usize) -> &[f64] {
        let k = self.idx(agent, t) * self.pose_dim;
        &self.pose[k..k + self.pose_dim]
    }

    pub fn last_position(&self, agent: usize) -> Point {
        self.positions[self.idx(agent, self.frames - 1)]
    }

    /// Number of valid trajectory frames for an agent.
    pub fn valid_frames(&self, agent: usize) -> usize {
        (0..self.frames)
            .filter(|&t| self.traj_valid[self.idx(agent, t)])
            .count()
    }

    /// Rotates every world-frame quantity by `angle` about the origin.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut out = self.clone();
        for (k, p) in out.positions.iter_mut().enumerate() {
            if out.traj_valid[k] {
                *p = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
                out.heading[k] = super::wrap_angle(out.heading[k] + angle);
            }
            if out.pose_valid[k] && out.pose_dim > super::POSE_YAW {
                let i = k * out.pose_dim + super::POSE_YAW;
                out.pose[i] = super::wrap_angle(out.pose[i] + angle);
            }
        }
        out
    }
}

/// A bundle with its ground-truth future.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bundle: ModalityBundle,
    pub future_frames: usize,
    pub future: Vec<Point>,
    pub future_valid: Vec<bool>,
}

impl Sample {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let bundle = ModalityBundle::from_scene(scene)?;
        let future_frames = scene.future_frames();
        let mut future = Vec::with_capacity(bundle.n_agents() * future_frames);
        let mut future_valid = Vec::with_capacity(future.capacity());
        for a in &scene.agents {
            if a.trajectory_fut.len() != future_frames {
                return Err(Error::Shape(format!(
                    "agent {} future length differs from {future_frames}",
                    a.id
                )));
            }
            for (p, v) in a
                .trajectory_fut
                .positions
                .iter()
                .zip(&a.trajectory_fut.valid)
            {
                future.push(if *v { *p } else { [0.0, 0.0] });
                future_valid.push(*v);
            }
        }
        Ok(Self {
            bundle,
            future_frames,
            future,
            future_valid,
        })
    }

    pub fn future_of(&self, agent: usize) -> &[Point] {
        &self.future[agent * self.future_frames..(agent + 1) * self.future_frames]
    }
}

/// What masked-out frames are filled with. Validity flags are cleared either way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Zero,
    /// Copy the earliest kept frame backwards.
    RepeatEdge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    pub keep_last: usize,
    #[serde(default)]
    pub padding: PaddingMode,
}

impl ObservationMask {
    pub fn keep_last(keep_last: usize) -> Self {
        Self {
            keep_last,
            padding: PaddingMode::Zero,
        }
    }
}

/// Invalidates all but the last `keep_last` frames of every modality.
pub fn apply_mask(bundle: &ModalityBundle, mask: ObservationMask) -> Result<ModalityBundle> {
    let frames = bundle.frames;
    if mask.keep_last == 0 || mask.keep_last > frames {
        return Err(Error::InvalidMask {
            keep_last: mask.keep_last,
            frames,
        });
    }
    let mut out = bundle.clone();
    let first_kept = frames - mask.keep_last;
    let dim = bundle.pose_dim;
    for a in 0..bundle.n_agents() {
        let edge = bundle.idx(a, first_kept);
        for t in 0..first_kept {
            let k = bundle.idx(a, t);
            out.traj_valid[k] = false;
            out.pose_valid[k] = false;
            out.text_valid[k] = false;
            match mask.padding {
                PaddingMode::Zero => {
                    out.positions[k] = [0.0, 0.0];
                    out.heading[k] = 0.0;
                    out.pose[k * dim..(k + 1) * dim]
                        .iter_mut()
                        .for_each(|v| *v = 0.0);
                    out.captions[k].clear();
                }
                PaddingMode::RepeatEdge => {
                    out.positions[k] = bundle.positions[edge];
                    out.heading[k] = bundle.heading[edge];
                    out.pose.copy_within(edge * dim..(edge + 1) * dim, k * dim);
                    out.captions[k] = bundle.captions[edge].clone();
                }
            }
        }
    }
    Ok(out)
}
