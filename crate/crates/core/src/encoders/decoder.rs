use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{Linear, Mlp};
use crate::params::ParamStore;
use crate::scene::Point;
use crate::tensor::Mat;

/// Lower bound added to the softplus scale output.
pub(crate) const MIN_SCALE: f64 = 1e-3;

/// Concrete forecasts. `proposals` and `scales` are flat `[N][F][T_f][2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub n_agents: usize,
    pub modes: usize,
    pub horizon: usize,
    pub proposals: Vec<f64>,
    pub mode_logits: Mat,
    pub scales: Option<Vec<f64>>,
}

impl ForecastSet {
    /// Proposal `f` of agent `n` as `T_f` points.
    pub fn proposal(&self, n: usize, f: usize) -> Vec<Point> {
        let k = (n * self.modes + f) * self.horizon * 2;
        self.proposals[k..k + self.horizon * 2]
            .chunks_exact(2)
            .map(|p| [p[0], p[1]])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.proposals.iter().all(|v| v.is_finite())
            && self.mode_logits.all_finite()
            && self
                .scales
                .as_ref()
                .is_none_or(|s| s.iter().all(|v| v.is_finite() && *v > 0.0))
    }
}

/// Graph-level decoder outputs, all with one row per agent.
#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    /// `[N × F·T_f·2]`, world frame, meters.
    pub proposals: Var,
    /// `[N × F]`.
    pub mode_logits: Var,
    /// `[N × F·T_f·2]`, strictly positive; equal across the two coordinates.
    pub scales: Var,
}

/// MLP decoder from `H` to `F` proposals of `T_f` offsets from the last
/// observed position, plus mode logits and Laplace scales.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub offsets: Mlp,
    pub logits: Linear,
    pub scale: Linear,
    pub modes: usize,
    pub horizon: usize,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        modes: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            offsets: Mlp::new(
                store,
                &format!("{name}.offsets"),
                dim,
                2 * dim,
                modes * horizon * 2,
                rng,
            ),
            logits: Linear::new(store, &format!("{name}.logits"), dim, modes, rng),
            scale: Linear::new(store, &format!("{name}.scale"), dim, modes * horizon, rng),
            modes,
            horizon,
        }
    }

    /// `rotations[n]` maps agent `n`'s frame back to world (identity for a
    /// shared unrotated frame); `anchors[n]` is its last observed position.
    pub fn forward(
        &self,
        g: &Graph,
        h: Var,
        rotations: &[(f64, f64)],
        anchors: &[Point],
    ) -> DecodedVars {
        let width = self.modes * self.horizon * 2;
        let local = self.offsets.forward(g, h);
        let world = g.rotate_pairs(local, rotations);
        let mut anchor = Mat::zeros(anchors.len(), width);
        for (r, p) in anchors.iter().enumerate() {
            for pair in anchor.row_mut(r).chunks_exact_mut(2) {
                pair[0] = p[0];
                pair[1] = p[1];
            }
        }
        let proposals = g.add(world, g.constant(anchor));
        let mode_logits = self.logits.forward(g, h);
        let mut dup = Mat::zeros(self.modes * self.horizon, width);
        for k in 0..self.modes * self.horizon {
            dup.set(k, 2 * k, 1.0);
            dup.set(k, 2 * k + 1, 1.0);
        }
        let raw = g.add_scalar(g.softplus(self.scale.forward(g, h)), MIN_SCALE);
        let scales = g.matmul(raw, g.constant(dup));
        DecodedVars {
            proposals,
            mode_logits,
            scales,
        }
    }

    pub fn materialize(&self, g: &Graph, out: &DecodedVars) -> ForecastSet {
        let proposals = g.to_mat(out.proposals);
        ForecastSet {
            n_agents: proposals.rows,
            modes: self.modes,
            horizon: self.horizon,
            proposals: proposals.data,
            mode_logits: g.to_mat(out.mode_logits),
            scales: Some(g.to_mat(out.scales).data),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder(modes: usize) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let d = Decoder::new(
            &mut store,
            "dec",
            4,
            modes,
            3,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        (store, d)
    }

    #[test]
    fn single_mode_shapes() {
        let (store, d) = decoder(1);
        let g = Graph::inference(&store);
        let h = g.constant(Mat::filled(2, 4, 0.3));
        let out = d.forward(&g, h, &[(1.0, 0.0); 2], &[[0.0, 0.0]; 2]);
        let f = d.materialize(&g, &out);
        assert_eq!(f.mode_logits.shape(), (2, 1));
        assert_eq!(f.proposals.len(), 2 * 3 * 2);
        assert!(f.is_finite());
    }

    #[test]
    fn identical_rows_give_identical_proposals() {
        let (store, d) = decoder(6);
        let g = Graph::inference(&store);
        let h = g.constant(Mat::from_rows(&[
            vec![0.1, 0.2, -0.3, 0.4],
            vec![0.1, 0.2, -0.3, 0.4],
        ]));
        let f = d.materialize(&g, &d.forward(&g, h, &[(1.0, 0.0); 2], &[[0.0, 0.0]; 2]));
        for m in 0..6 {
            assert_eq!(f.proposal(0, m), f.proposal(1, m));
        }
    }

    #[test]
    fn zero_decoder_repeats_last_position() {
        let (mut store, d) = decoder(2);
        store
            .values_mut()
            .for_each(|m| m.data.iter_mut().for_each(|v| *v = 0.0));
        let g = Graph::inference(&store);
        let anchors = [[1.5, -2.0], [0.0, 4.0]];
        let f = d.materialize(
            &g,
            &d.forward(&g, g.constant(Mat::zeros(2, 4)), &[(0.6, 0.8); 2], &anchors),
        );
        for (n, a) in anchors.iter().enumerate() {
            for m in 0..2 {
                assert_eq!(f.proposal(n, m), vec![*a; 3]);
            }
        }
    }
}
