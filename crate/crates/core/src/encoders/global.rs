use std::rc::Rc;

use rand::Rng;

use super::embed::{Embedder, POS_SCALE};
use super::frames::Frames;
use crate::autograd::{AttentionMask, Graph, Var};
use crate::nn::{Mlp, TransformerBlock};
use crate::params::ParamStore;
use crate::scene::ModalityBundle;
use crate::tensor::Mat;

/// Self-attention over the agent axis.
#[derive(Clone, Debug)]
pub struct GlobalPlain {
    blocks: Vec<TransformerBlock>,
}

impl GlobalPlain {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), dim, heads, rng))
                .collect(),
        }
    }

    pub fn encode(&self, g: &Graph, q: Var) -> Var {
        let n = g.shape(q).0;
        let mask: AttentionMask = Rc::new(vec![(0..n).collect(); n]);
        let mut x = q;
        for block in &self.blocks {
            x = block.forward(g, x, mask.clone());
        }
        x
    }
}

/// Graph attention over all agent pairs. The key for pair `(i, j)` is
/// `q_j` plus an embedding of `v_ji` in agent `i`'s frame plus the relation
/// caption embedding for that pair (zero when there is none or when relation
/// text is disabled).
#[derive(Clone, Debug)]
pub struct GlobalGraph {
    edge: Mlp,
    blocks: Vec<TransformerBlock>,
    pub use_relation_text: bool,
}

impl GlobalGraph {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        use_relation_text: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            edge: Mlp::new(store, &format!("{name}.edge"), 3, dim, dim, rng),
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), dim, heads, rng))
                .collect(),
            use_relation_text,
        }
    }

    /// Relation templates for every ordered pair, row `i·N + j`.
    fn pair_relations(b: &ModalityBundle) -> Vec<Vec<usize>> {
        let n = b.n_agents();
        let mut out = vec![Vec::new(); n * n];
        for i in 0..n {
            for &(j, template) in &b.relations[i] {
                out[i * n + j].push(template);
            }
        }
        out
    }

    pub fn encode(
        &self,
        g: &Graph,
        q: Var,
        embed: &Embedder,
        b: &ModalityBundle,
        frames: &Frames,
        text: bool,
    ) -> Var {
        let n = b.n_agents();
        let last = b.frames - 1;
        let mut edge = Mat::zeros(n * n, 3);
        for i in 0..n {
            let pi = b.positions[b.idx(i, last)];
            for j in 0..n {
                let pj = b.positions[b.idx(j, last)];
                let v = frames.vector(i, [pi[0] - pj[0], pi[1] - pj[1]]);
                let row = edge.row_mut(i * n + j);
                row[0] = v[0] / POS_SCALE;
                row[1] = v[1] / POS_SCALE;
                row[2] = v[0].hypot(v[1]) / POS_SCALE;
            }
        }
        let sources: Vec<usize> = (0..n * n).map(|r| r % n).collect();
        let mut pair_static = self.edge.forward(g, g.constant(edge));
        if text && self.use_relation_text {
            let rel = Self::pair_relations(b);
            let rows: Vec<&[usize]> = rel.iter().map(Vec::as_slice).collect();
            pair_static = g.add(pair_static, embed.text_encoder().encode(g, &rows));
        }
        let mask: AttentionMask = Rc::new((0..n).map(|i| (i * n..(i + 1) * n).collect()).collect());
        let mut x = q;
        for block in &self.blocks {
            let memory = g.add(g.gather_rows(x, &sources), pair_static);
            x = block.forward_cross(g, x, memory, mask.clone());
        }
        x
    }
}
