use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frames::Frames;
use super::{ModalitySet, ModelConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore};
use crate::scene::{vocab, ModalityBundle, POSE_YAW};
use crate::tensor::Mat;

/// Positions are divided by this before embedding, meters.
pub(crate) const POS_SCALE: f64 = 4.0;
/// Per-frame displacements are divided by this, meters.
pub(crate) const STEP_SCALE: f64 = 0.5;

/// Maps caption template ids to `D`-dimensional vectors.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// One row per entry of `rows`: the mean embedding of its template ids,
    /// or zeros for an empty list.
    fn encode(&self, g: &Graph, rows: &[&[usize]]) -> Var;
}

fn averaging_weights(rows: &[&[usize]], vocab: usize) -> Mat {
    let mut w = Mat::zeros(rows.len(), vocab);
    for (r, ids) in rows.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let share = 1.0 / ids.len() as f64;
        for &id in ids.iter() {
            let cur = w.get(r, id);
            w.set(r, id, cur + share);
        }
    }
    w
}

/// Trainable lookup table.
#[derive(Clone, Debug)]
pub struct LearnedText {
    pub table: ParamId,
    dim: usize,
}

impl LearnedText {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let table = store.register_normal(
            format!("{name}.table"),
            vocab::vocabulary_size(),
            dim,
            0.5,
            rng,
        );
        Self { table, dim }
    }
}

impl TextEncoder for LearnedText {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &Graph, rows: &[&[usize]]) -> Var {
        let w = g.constant(averaging_weights(rows, vocab::vocabulary_size()));
        g.matmul(w, g.param(self.table))
    }
}

/// Fixed pseudo-random table derived from a seed; contributes no parameters.
#[derive(Clone, Debug)]
pub struct FrozenText {
    table: Mat,
}

impl FrozenText {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let v = vocab::vocabulary_size();
        Self {
            table: Mat::from_vec(
                v,
                dim,
                (0..v * dim).map(|_| normal.sample(&mut rng)).collect(),
            ),
        }
    }
}

impl TextEncoder for FrozenText {
    fn dim(&self) -> usize {
        self.table.cols
    }

    fn encode(&self, g: &Graph, rows: &[&[usize]]) -> Var {
        let w = averaging_weights(rows, self.table.rows);
        g.constant(w.matmul(&self.table))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    #[default]
    Learned,
    Frozen,
}

#[derive(Clone, Debug)]
enum TextModule {
    Learned(LearnedText),
    Frozen(FrozenText),
}

impl TextEncoder for TextModule {
    fn dim(&self) -> usize {
        match self {
            TextModule::Learned(t) => t.dim(),
            TextModule::Frozen(t) => t.dim(),
        }
    }

    fn encode(&self, g: &Graph, rows: &[&[usize]]) -> Var {
        match self {
            TextModule::Learned(t) => t.encode(g, rows),
            TextModule::Frozen(t) => t.encode(g, rows),
        }
    }
}

/// Which agent's data, expressed in which agent's frame, at which frame index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Item {
    pub owner: usize,
    pub frame_of: usize,
    pub t: usize,
}

/// Per-frame embeddings `[N·T × D]` (agent-major) with validity masks.
/// Rows of invalid frames and absent modalities are exactly zero.
#[derive(Clone, Debug)]
pub struct ModalityEmbeddings {
    pub n_agents: usize,
    pub frames: usize,
    pub z_x: Var,
    pub z_p: Var,
    pub z_sa: Var,
    pub z_sr: Var,
    pub mask_x: Vec<bool>,
    pub mask_p: Vec<bool>,
    pub mask_sa: Vec<bool>,
    pub mask_sr: Vec<bool>,
}

impl ModalityEmbeddings {
    /// `(embedding, mask)` for each modality in token-type order X, P, S_A, S_R.
    pub fn streams(&self) -> [(Var, &[bool]); 4] {
        [
            (self.z_x, &self.mask_x),
            (self.z_p, &self.mask_p),
            (self.z_sa, &self.mask_sa),
            (self.z_sr, &self.mask_sr),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Embedder {
    traj: Mlp,
    pose: Mlp,
    text: TextModule,
    with_heading: bool,
    dim: usize,
    pose_dim: usize,
}

impl Embedder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let with_heading = config.modalities.trajectory_only();
        let traj_in = 5 + if with_heading { 2 } else { 0 };
        let pose_in = 2 + config.pose_dim - (POSE_YAW + 1);
        let d = config.dim;
        let text = match config.text_encoder {
            TextEncoderKind::Learned => {
                TextModule::Learned(LearnedText::new(store, &format!("{name}.text"), d, rng))
            }
            TextEncoderKind::Frozen => TextModule::Frozen(FrozenText::new(d, 0x7465_7874)),
        };
        Self {
            traj: Mlp::new(store, &format!("{name}.traj"), traj_in, d, d, rng),
            pose: Mlp::new(store, &format!("{name}.pose"), pose_in, d, d, rng),
            text,
            with_heading,
            dim: d,
            pose_dim: config.pose_dim,
        }
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        &self.text
    }

    fn masked(&self, g: &Graph, raw: Mat, mask: &[bool], mlp: &Mlp) -> Var {
        let h = mlp.forward(g, g.constant(raw));
        let mut m = Mat::zeros(mask.len(), self.dim);
        for (r, &v) in mask.iter().enumerate() {
            if v {
                m.row_mut(r).iter_mut().for_each(|x| *x = 1.0);
            }
        }
        g.mul(h, g.constant(m))
    }

    /// Trajectory tokens: position and last displacement in the frame of
    /// `frame_of`, a flag for whether the displacement is observed, and for
    /// trajectory-only models the heading relative to that frame.
    pub fn trajectory(
        &self,
        g: &Graph,
        b: &ModalityBundle,
        frames: &Frames,
        items: &[Item],
    ) -> (Var, Vec<bool>) {
        let cols = 5 + if self.with_heading { 2 } else { 0 };
        let mut raw = Mat::zeros(items.len(), cols);
        let mut mask = Vec::with_capacity(items.len());
        for (r, it) in items.iter().enumerate() {
            let k = b.idx(it.owner, it.t);
            let valid = b.traj_valid[k];
            mask.push(valid);
            if !valid {
                continue;
            }
            let row = raw.row_mut(r);
            let p = frames.point(it.frame_of, b.positions[k]);
            row[0] = p[0] / POS_SCALE;
            row[1] = p[1] / POS_SCALE;
            if it.t > 0 && b.traj_valid[k - 1] {
                let q = b.positions[k - 1];
                let d = frames.vector(
                    it.frame_of,
                    [b.positions[k][0] - q[0], b.positions[k][1] - q[1]],
                );
                row[2] = d[0] / STEP_SCALE;
                row[3] = d[1] / STEP_SCALE;
                row[4] = 1.0;
            }
            if self.with_heading {
                let (c, s) = frames.angle(it.frame_of, b.heading[k]);
                row[5] = c;
                row[6] = s;
            }
        }
        let z = self.masked(g, raw, &mask, &self.traj);
        (z, mask)
    }

    /// Pose tokens: global yaw relative to the frame of `frame_of` plus the body joint angles.
    pub fn pose(
        &self,
        g: &Graph,
        b: &ModalityBundle,
        frames: &Frames,
        items: &[Item],
    ) -> (Var, Vec<bool>) {
        let body = self.pose_dim - (POSE_YAW + 1);
        let mut raw = Mat::zeros(items.len(), 2 + body);
        let mut mask = Vec::with_capacity(items.len());
        for (r, it) in items.iter().enumerate() {
            let k = b.idx(it.owner, it.t);
            let valid = b.pose_valid[k];
            mask.push(valid);
            if !valid {
                continue;
            }
            let theta = b.pose_at(it.owner, it.t);
            let (c, s) = frames.angle(it.frame_of, theta[POSE_YAW]);
            let row = raw.row_mut(r);
            row[0] = c;
            row[1] = s;
            row[2..].copy_from_slice(&theta[POSE_YAW + 1..]);
        }
        let z = self.masked(g, raw, &mask, &self.pose);
        (z, mask)
    }

    /// Agent-caption tokens (mean of the frame's caption templates).
    pub fn agent_text(&self, g: &Graph, b: &ModalityBundle, items: &[Item]) -> (Var, Vec<bool>) {
        let mut rows: Vec<&[usize]> = Vec::with_capacity(items.len());
        let mut mask = Vec::with_capacity(items.len());
        for it in items {
            let k = b.idx(it.owner, it.t);
            let valid = b.text_valid[k];
            mask.push(valid);
            rows.push(if valid { &b.captions[k] } else { &[] });
        }
        (self.text.encode(g, &rows), mask)
    }

    /// Relation-caption tokens: the mean of the owner's relation templates,
    /// present on frames where the owner's text is valid.
    pub fn relation_text(&self, g: &Graph, b: &ModalityBundle, items: &[Item]) -> (Var, Vec<bool>) {
        let ids: Vec<Vec<usize>> = (0..b.n_agents())
            .map(|a| b.relations[a].iter().map(|r| r.1).collect())
            .collect();
        let mut rows: Vec<&[usize]> = Vec::with_capacity(items.len());
        let mut mask = Vec::with_capacity(items.len());
        for it in items {
            let valid = b.text_valid[b.idx(it.owner, it.t)] && !ids[it.owner].is_empty();
            mask.push(valid);
            rows.push(if valid { &ids[it.owner] } else { &[] });
        }
        (self.text.encode(g, &rows), mask)
    }

    pub fn check_bundle(&self, b: &ModalityBundle, frames: usize) -> Result<()> {
        if b.pose_dim != self.pose_dim {
            return Err(Error::Shape(format!(
                "bundle pose dim {} != model pose dim {}",
                b.pose_dim, self.pose_dim
            )));
        }
        if b.frames != frames {
            return Err(Error::Shape(format!(
                "bundle has {} observed frames, model expects {frames}",
                b.frames
            )));
        }
        Ok(())
    }

    /// Embeds every agent's own modalities in its own frame of `frames`.
    /// Modalities outside `set` come back as zeros with all-false masks.
    pub fn embed_modalities(
        &self,
        g: &Graph,
        b: &ModalityBundle,
        frames: &Frames,
        set: ModalitySet,
    ) -> Result<ModalityEmbeddings> {
        self.check_bundle(b, b.frames)?;
        let n = b.n_agents();
        let items: Vec<Item> = (0..n)
            .flat_map(|a| {
                (0..b.frames).map(move |t| Item {
                    owner: a,
                    frame_of: a,
                    t,
                })
            })
            .collect();
        let rows = items.len();
        let absent = || (g.constant(Mat::zeros(rows, self.dim)), vec![false; rows]);
        let (z_x, mask_x) = self.trajectory(g, b, frames, &items);
        let (z_p, mask_p) = if set.pose {
            self.pose(g, b, frames, &items)
        } else {
            absent()
        };
        let (z_sa, mask_sa) = if set.text {
            self.agent_text(g, b, &items)
        } else {
            absent()
        };
        let (z_sr, mask_sr) = if set.text {
            self.relation_text(g, b, &items)
        } else {
            absent()
        };
        Ok(ModalityEmbeddings {
            n_agents: n,
            frames: b.frames,
            z_x,
            z_p,
            z_sa,
            z_sr,
            mask_x,
            mask_p,
            mask_sa,
            mask_sr,
        })
    }
}
