use std::rc::Rc;

use rand::Rng;

use super::embed::{Embedder, Item, ModalityEmbeddings, POS_SCALE};
use super::frames::Frames;
use super::{ModalitySet, TemporalPooling};
use crate::autograd::{AttentionMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::scene::ModalityBundle;
use crate::tensor::Mat;

pub(crate) fn require_valid_frames(b: &ModalityBundle) -> Result<()> {
    for a in 0..b.n_agents() {
        if b.valid_frames(a) == 0 {
            return Err(Error::NoValidFrames {
                agent: b.agent_ids[a] as usize,
            });
        }
    }
    Ok(())
}

/// One class token per agent attends jointly over all of that agent's valid
/// modality tokens across time. Tokens carry a modality-type and a time embedding.
#[derive(Clone, Debug)]
pub struct LocalHolistic {
    class_token: ParamId,
    type_emb: ParamId,
    time_emb: ParamId,
    blocks: Vec<TransformerBlock>,
}

impl LocalHolistic {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        frames: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            class_token: store.register_normal(format!("{name}.cls"), 1, dim, 0.1, rng),
            type_emb: store.register_normal(format!("{name}.type"), 4, dim, 0.1, rng),
            time_emb: store.register_normal(format!("{name}.time"), frames, dim, 0.1, rng),
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), dim, heads, rng))
                .collect(),
        }
    }

    /// Returns `q` as `[N × D]`. `include` selects which of the X, P, S_A, S_R
    /// streams take part; excluded streams contribute no tokens.
    pub fn encode(&self, g: &Graph, z: &ModalityEmbeddings, include: [bool; 4]) -> Result<Var> {
        let (n, t_p) = (z.n_agents, z.frames);
        for a in 0..n {
            if !(0..t_p).any(|t| z.mask_x[a * t_p + t]) {
                return Err(Error::NoValidFrames { agent: a });
            }
        }
        let time_idx: Vec<usize> = (0..n * t_p).map(|k| k % t_p).collect();
        let time = g.gather_rows(g.param(self.time_emb), &time_idx);
        let mut parts = vec![g.gather_rows(g.param(self.class_token), &vec![0; n])];
        let mut allowed: Vec<Vec<usize>> = (0..n).map(|a| vec![a]).collect();
        let mut offset = n;
        for (m, (stream, mask)) in z.streams().into_iter().enumerate() {
            if !include[m] {
                continue;
            }
            let typ = g.slice_rows(g.param(self.type_emb), m, 1);
            parts.push(g.add_row(g.add(stream, time), typ));
            for (k, &valid) in mask.iter().enumerate() {
                if valid {
                    allowed[k / t_p].push(offset + k);
                }
            }
            offset += n * t_p;
        }
        // Every valid token attends over its own agent's valid tokens; invalid
        // tokens neither attend nor are attended to.
        let mut full = vec![Vec::new(); offset];
        for keys in &allowed {
            for &k in keys {
                full[k] = keys.clone();
            }
        }
        let mask: AttentionMask = Rc::new(full);
        let mut x = g.concat_rows(&parts);
        for block in &self.blocks {
            x = block.forward(g, x, mask.clone());
        }
        Ok(g.slice_rows(x, 0, n))
    }
}

/// Per-frame neighbourhood fusion in each agent's heading frame, followed by
/// a temporal transformer that pools the frames into `q`.
#[derive(Clone, Debug)]
pub struct LocalGraph {
    edge: Mlp,
    spatial: Vec<TransformerBlock>,
    class_token: ParamId,
    time_emb: ParamId,
    temporal: Vec<TransformerBlock>,
    pooling: TemporalPooling,
    radius: f64,
    neighbor_text: bool,
}

pub(crate) struct GraphLocalOutput {
    pub q: Var,
    /// Per-frame latents `[N·T × D]`, agent-major.
    #[allow(dead_code)]
    pub per_frame: Var,
}

impl LocalGraph {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        frames: usize,
        radius: f64,
        neighbor_text: bool,
        pooling: TemporalPooling,
        rng: &mut R,
    ) -> Self {
        Self {
            edge: Mlp::new(store, &format!("{name}.edge"), 3, dim, dim, rng),
            spatial: (0..layers)
                .map(|l| {
                    TransformerBlock::new(store, &format!("{name}.spatial{l}"), dim, heads, rng)
                })
                .collect(),
            class_token: store.register_normal(format!("{name}.cls"), 1, dim, 0.1, rng),
            time_emb: store.register_normal(format!("{name}.time"), frames, dim, 0.1, rng),
            temporal: (0..layers)
                .map(|l| {
                    TransformerBlock::new(store, &format!("{name}.temporal{l}"), dim, heads, rng)
                })
                .collect(),
            pooling,
            radius,
            neighbor_text,
        }
    }

    fn neighbours(&self, b: &ModalityBundle, i: usize, t: usize) -> Vec<usize> {
        let ki = b.idx(i, t);
        let pi = b.positions[ki];
        (0..b.n_agents())
            .filter(|&j| {
                let kj = b.idx(j, t);
                j != i && b.traj_valid[kj] && {
                    let pj = b.positions[kj];
                    (pj[0] - pi[0]).hypot(pj[1] - pi[1]) <= self.radius
                }
            })
            .collect()
    }

    pub(crate) fn encode(
        &self,
        g: &Graph,
        embed: &Embedder,
        b: &ModalityBundle,
        frames: &Frames,
        set: ModalitySet,
    ) -> Result<GraphLocalOutput> {
        require_valid_frames(b)?;
        let (n, t_p) = (b.n_agents(), b.frames);
        // Self tokens come first (one per agent and frame), neighbour tokens after.
        let mut items: Vec<Item> = (0..n)
            .flat_map(|a| {
                (0..t_p).map(move |t| Item {
                    owner: a,
                    frame_of: a,
                    t,
                })
            })
            .collect();
        let mut allowed: Vec<Vec<usize>> = vec![Vec::new(); n * t_p];
        for i in 0..n {
            for t in 0..t_p {
                let q = b.idx(i, t);
                if !b.traj_valid[q] {
                    continue;
                }
                allowed[q].push(q);
                for j in self.neighbours(b, i, t) {
                    allowed[q].push(items.len());
                    items.push(Item {
                        owner: j,
                        frame_of: i,
                        t,
                    });
                }
            }
        }
        let self_rows = n * t_p;
        let mut token = embed.trajectory(g, b, frames, &items).0;
        if set.pose {
            token = g.add(token, embed.pose(g, b, frames, &items).0);
        }
        if set.text {
            let own = embed.agent_text(g, b, &items[..self_rows]).0;
            let text = if self.neighbor_text && items.len() > self_rows {
                let others = embed.agent_text(g, b, &items[self_rows..]).0;
                g.concat_rows(&[own, others])
            } else {
                let zeros = g.constant(Mat::zeros(items.len() - self_rows, embed_dim(g, own)));
                g.concat_rows(&[own, zeros])
            };
            token = g.add(token, text);
        }
        // Edge feature: vector from neighbour to ego agent at the last observed
        // frame, in the ego frame, plus its length. Zero for the self token.
        let last = t_p - 1;
        let mut edge = Mat::zeros(items.len(), 3);
        for (r, it) in items.iter().enumerate().skip(self_rows) {
            let pi = b.positions[b.idx(it.frame_of, last)];
            let pj = b.positions[b.idx(it.owner, last)];
            let v = frames.vector(it.frame_of, [pi[0] - pj[0], pi[1] - pj[1]]);
            edge.set(r, 0, v[0] / POS_SCALE);
            edge.set(r, 1, v[1] / POS_SCALE);
            edge.set(r, 2, v[0].hypot(v[1]) / POS_SCALE);
        }
        let memory = g.add(token, self.edge.forward(g, g.constant(edge)));
        let mask: AttentionMask = Rc::new(allowed);
        let mut x = g.slice_rows(memory, 0, self_rows);
        for block in &self.spatial {
            x = block.forward_cross(g, x, memory, mask.clone());
        }
        let per_frame = x;

        let valid: Vec<bool> = (0..self_rows).map(|k| b.traj_valid[k]).collect();
        let q = match self.pooling {
            TemporalPooling::Mean => {
                let mut w = Mat::zeros(n, self_rows);
                for a in 0..n {
                    let count = b.valid_frames(a) as f64;
                    for t in 0..t_p {
                        if valid[a * t_p + t] {
                            w.set(a, a * t_p + t, 1.0 / count);
                        }
                    }
                }
                g.matmul(g.constant(w), per_frame)
            }
            TemporalPooling::ClassToken => {
                let time_idx: Vec<usize> = (0..self_rows).map(|k| k % t_p).collect();
                let frames_tok = g.add(per_frame, g.gather_rows(g.param(self.time_emb), &time_idx));
                let cls = g.gather_rows(g.param(self.class_token), &vec![0; n]);
                let mut full = vec![Vec::new(); n + self_rows];
                for a in 0..n {
                    let mut keys = vec![a];
                    keys.extend(
                        (0..t_p)
                            .map(|t| a * t_p + t)
                            .filter(|&k| valid[k])
                            .map(|k| n + k),
                    );
                    for &k in &keys {
                        full[k] = keys.clone();
                    }
                }
                let mask: AttentionMask = Rc::new(full);
                let mut x = g.concat_rows(&[cls, frames_tok]);
                for block in &self.temporal {
                    x = block.forward(g, x, mask.clone());
                }
                g.slice_rows(x, 0, n)
            }
        };
        Ok(GraphLocalOutput { q, per_frame })
    }
}

fn embed_dim(g: &Graph, v: Var) -> usize {
    g.shape(v).1
}
