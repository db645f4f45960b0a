use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{DecodedVars, Decoder, ForecastSet};
use super::embed::Embedder;
use super::frames::Frames;
use super::global::{GlobalGraph, GlobalPlain};
use super::heads::DistributionHead;
use super::local::{LocalGraph, LocalHolistic};
use super::{EncoderVariant, ModelConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scene::{ModalityBundle, Point};
use crate::tensor::Mat;

/// Gaussian readings of the local latents `Q` and global latents `H`, `[N × D]` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPacket {
    pub q_mean: Mat,
    pub q_logvar: Mat,
    pub h_mean: Mat,
    pub h_logvar: Mat,
}

impl LatentPacket {
    pub fn is_finite(&self) -> bool {
        [&self.q_mean, &self.q_logvar, &self.h_mean, &self.h_logvar]
            .iter()
            .all(|m| m.all_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub q_mean: Var,
    pub q_logvar: Var,
    pub h_mean: Var,
    pub h_logvar: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub latents: LatentVars,
    pub decoded: DecodedVars,
}

#[derive(Clone, Debug)]
enum Encoders {
    Holistic {
        local: LocalHolistic,
        global: GlobalPlain,
    },
    Graph {
        local: LocalGraph,
        global: GlobalGraph,
    },
}

/// Embedders, local and global encoders, latent heads and decoder, with the
/// parameters they read.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    embed: Embedder,
    encoders: Encoders,
    q_head: DistributionHead,
    h_head: DistributionHead,
    decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, l) = (config.dim, config.heads, config.layers);
        let embed = Embedder::new(&mut store, "embed", &config, &mut rng);
        let encoders = match config.variant {
            EncoderVariant::Holistic => Encoders::Holistic {
                local: LocalHolistic::new(
                    &mut store,
                    "local",
                    d,
                    h,
                    l,
                    config.obs_frames,
                    &mut rng,
                ),
                global: GlobalPlain::new(&mut store, "global", d, h, l, &mut rng),
            },
            EncoderVariant::Graph => Encoders::Graph {
                local: LocalGraph::new(
                    &mut store,
                    "local",
                    d,
                    h,
                    l,
                    config.obs_frames,
                    config.neighbor_radius,
                    config.use_relation_text,
                    config.temporal_pooling,
                    &mut rng,
                ),
                global: GlobalGraph::new(
                    &mut store,
                    "global",
                    d,
                    h,
                    l,
                    config.use_relation_text,
                    &mut rng,
                ),
            },
        };
        let q_head = DistributionHead::new(&mut store, "q_head", d, &mut rng);
        let h_head = DistributionHead::new(&mut store, "h_head", d, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            d,
            config.modes,
            config.future_frames,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            embed,
            encoders,
            q_head,
            h_head,
            decoder,
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn frames(&self, bundle: &ModalityBundle) -> Frames {
        match self.encoders {
            Encoders::Holistic { .. } => Frames::world(bundle),
            Encoders::Graph { .. } => Frames::ego(bundle),
        }
    }

    /// Builds the forward pass on `g`, which must read `self.store`.
    pub fn forward(&self, g: &Graph, bundle: &ModalityBundle) -> Result<ModelOutput> {
        self.embed.check_bundle(bundle, self.config.obs_frames)?;
        if bundle.n_agents() == 0 {
            return Err(Error::InvalidInput("scene has no agents".into()));
        }
        let set = self.config.modalities;
        let frames = self.frames(bundle);
        let (q, h) = match &self.encoders {
            Encoders::Holistic { local, global } => {
                let z = self.embed.embed_modalities(g, bundle, &frames, set)?;
                let include = [
                    true,
                    set.pose,
                    set.text,
                    set.text && self.config.use_relation_text,
                ];
                let q = local.encode(g, &z, include)?;
                let (q_mean, q_logvar) = self.q_head.forward(g, q);
                ((q_mean, q_logvar), global.encode(g, q_mean))
            }
            Encoders::Graph { local, global } => {
                let q = local.encode(g, &self.embed, bundle, &frames, set)?.q;
                let (q_mean, q_logvar) = self.q_head.forward(g, q);
                (
                    (q_mean, q_logvar),
                    global.encode(g, q_mean, &self.embed, bundle, &frames, set.text),
                )
            }
        };
        let (h_mean, h_logvar) = self.h_head.forward(g, h);
        let anchors: Vec<Point> = (0..bundle.n_agents())
            .map(|a| bundle.last_position(a))
            .collect();
        let decoded = self
            .decoder
            .forward(g, h_mean, frames.to_world_rotations(), &anchors);
        Ok(ModelOutput {
            latents: LatentVars {
                q_mean: q.0,
                q_logvar: q.1,
                h_mean,
                h_logvar,
            },
            decoded,
        })
    }

    pub fn latent_packet(g: &Graph, out: &ModelOutput) -> LatentPacket {
        LatentPacket {
            q_mean: g.to_mat(out.latents.q_mean),
            q_logvar: g.to_mat(out.latents.q_logvar),
            h_mean: g.to_mat(out.latents.h_mean),
            h_logvar: g.to_mat(out.latents.h_logvar),
        }
    }

    /// Inference-only forward pass.
    pub fn predict(&self, bundle: &ModalityBundle) -> Result<(ForecastSet, LatentPacket)> {
        let g = Graph::inference(&self.store);
        let out = self.forward(&g, bundle)?;
        Ok((
            self.decoder.materialize(&g, &out.decoded),
            Self::latent_packet(&g, &out),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ModalitySet, TemporalPooling};
    use crate::scene::{apply_mask, ObservationMask, Scene};
    use crate::synth::{generate_scene, scene_seed, GeneratorConfig};

    fn small(variant: EncoderVariant) -> ModelConfig {
        ModelConfig {
            variant,
            dim: 16,
            heads: 2,
            layers: 2,
            ..Default::default()
        }
    }

    fn scene(seed: u64) -> Scene {
        generate_scene(&GeneratorConfig {
            seed,
            n_agents: [3, 5],
            ..Default::default()
        })
        .unwrap()
    }

    fn permuted(s: &Scene, perm: &[usize]) -> Scene {
        let mut out = s.clone();
        out.agents = perm.iter().map(|&i| s.agents[i].clone()).collect();
        out
    }

    fn rel_diff(a: &Mat, b: &Mat) -> f64 {
        let d: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        d / a.norm()
    }

    #[test]
    fn graph_local_latent_is_rotation_invariant() {
        let model = Model::new(small(EncoderVariant::Graph), 1).unwrap();
        for seed in 0..5 {
            let s = scene(scene_seed(11, seed));
            let base = model
                .predict(&ModalityBundle::from_scene(&s).unwrap())
                .unwrap()
                .1;
            for theta in [0.3, 1.7, -2.9, std::f64::consts::PI] {
                let rot = model
                    .predict(&ModalityBundle::from_scene(&s.rotated(theta)).unwrap())
                    .unwrap()
                    .1;
                assert!(rel_diff(&base.q_mean, &rot.q_mean) < 1e-4);
                assert!(rel_diff(&base.h_mean, &rot.h_mean) < 1e-4);
            }
        }
    }

    #[test]
    fn graph_forecast_rotates_with_the_world() {
        let model = Model::new(small(EncoderVariant::Graph), 2).unwrap();
        let s = scene(5);
        let theta = 0.8_f64;
        let base = model
            .predict(&ModalityBundle::from_scene(&s).unwrap())
            .unwrap()
            .0;
        let rot = model
            .predict(&ModalityBundle::from_scene(&s.rotated(theta)).unwrap())
            .unwrap()
            .0;
        let (sn, cs) = theta.sin_cos();
        for (p, r) in base
            .proposals
            .chunks_exact(2)
            .zip(rot.proposals.chunks_exact(2))
        {
            let want = [cs * p[0] - sn * p[1], sn * p[0] + cs * p[1]];
            assert!((want[0] - r[0]).abs() < 1e-8 && (want[1] - r[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn both_variants_are_permutation_equivariant() {
        for variant in [EncoderVariant::Holistic, EncoderVariant::Graph] {
            let model = Model::new(small(variant), 3).unwrap();
            let s = scene(21);
            let n = s.agents.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let (fa, la) = model
                .predict(&ModalityBundle::from_scene(&s).unwrap())
                .unwrap();
            let (fb, lb) = model
                .predict(&ModalityBundle::from_scene(&permuted(&s, &perm)).unwrap())
                .unwrap();
            for (r, &i) in perm.iter().enumerate() {
                assert_eq!(lb.h_mean.row(r), la.h_mean.row(i), "{variant:?}");
                assert_eq!(lb.q_mean.row(r), la.q_mean.row(i), "{variant:?}");
                for f in 0..fa.modes {
                    assert_eq!(fb.proposal(r, f), fa.proposal(i, f), "{variant:?}");
                }
            }
        }
    }

    #[test]
    fn changes_in_masked_frames_are_invisible() {
        for variant in [EncoderVariant::Holistic, EncoderVariant::Graph] {
            let model = Model::new(small(variant), 4).unwrap();
            let s = scene(8);
            let full = ModalityBundle::from_scene(&s).unwrap();
            for keep in [1, 2] {
                let a = apply_mask(&full, ObservationMask::keep_last(keep)).unwrap();
                let mut b = a.clone();
                for agent in 0..b.n_agents() {
                    for t in 0..8 - keep {
                        let k = b.idx(agent, t);
                        b.positions[k] = [t as f64 * 3.0, -1.0];
                        b.heading[k] = 2.0;
                        b.captions[k] = vec![0, 5];
                    }
                }
                assert_eq!(
                    model.predict(&a).unwrap(),
                    model.predict(&b).unwrap(),
                    "{variant:?} keep {keep}"
                );
            }
        }
    }

    #[test]
    fn isolated_agent_matches_single_agent_scene() {
        let model = Model::new(
            ModelConfig {
                use_relation_text: false,
                ..small(EncoderVariant::Graph)
            },
            5,
        )
        .unwrap();
        let mut s = scene(13);
        s.agents.truncate(2);
        for a in &mut s.agents {
            a.relations.clear();
        }
        let tau = model.config.neighbor_radius;
        // Place agent 1 far from agent 0 at every frame.
        let shift = [100.0, 0.0];
        let far = &mut s.agents[1];
        for p in far
            .trajectory_obs
            .positions
            .iter_mut()
            .chain(far.trajectory_fut.positions.iter_mut())
        {
            p[0] += shift[0] + tau + 1.0;
        }
        let mut alone = s.clone();
        alone.agents.truncate(1);
        let (_, both) = model
            .predict(&ModalityBundle::from_scene(&s).unwrap())
            .unwrap();
        let (_, single) = model
            .predict(&ModalityBundle::from_scene(&alone).unwrap())
            .unwrap();
        assert_eq!(both.q_mean.row(0), single.q_mean.row(0));
    }

    #[test]
    fn relation_toggle_matches_zeroed_relations() {
        let on = Model::new(small(EncoderVariant::Graph), 6).unwrap();
        let mut off = on.clone();
        off.config.use_relation_text = false;
        if let Encoders::Graph { local, global } = &mut off.encoders {
            global.use_relation_text = false;
            *local = match &on.encoders {
                Encoders::Graph { local, .. } => local.clone(),
                _ => unreachable!(),
            };
        }
        let s = crate::scene::tests::two_agent_scene();
        let mut stripped = s.clone();
        stripped.agents.iter_mut().for_each(|a| a.relations.clear());
        let g = Graph::inference(&on.store);
        let b = ModalityBundle::from_scene(&s).unwrap();
        let bs = ModalityBundle::from_scene(&stripped).unwrap();
        let frames = Frames::ego(&b);
        let q = g.constant(Mat::filled(2, 16, 0.2));
        let (Encoders::Graph { global: g_on, .. }, Encoders::Graph { global: g_off, .. }) =
            (&on.encoders, &off.encoders)
        else {
            unreachable!()
        };
        let h_off = g.to_mat(g_off.encode(&g, q, &on.embed, &b, &frames, true));
        let h_zero = g.to_mat(g_on.encode(&g, q, &on.embed, &bs, &frames, true));
        let h_on = g.to_mat(g_on.encode(&g, q, &on.embed, &b, &frames, true));
        assert_eq!(h_off, h_zero);
        assert_ne!(h_on, h_off);
    }

    #[test]
    fn every_configuration_runs() {
        for variant in [EncoderVariant::Holistic, EncoderVariant::Graph] {
            for modalities in [
                ModalitySet::X,
                ModalitySet::XP,
                ModalitySet::XS,
                ModalitySet::XPS,
            ] {
                for temporal_pooling in [TemporalPooling::ClassToken, TemporalPooling::Mean] {
                    let cfg = ModelConfig {
                        modalities,
                        temporal_pooling,
                        modes: 1,
                        ..small(variant)
                    };
                    let model = Model::new(cfg, 7).unwrap();
                    let (f, l) = model
                        .predict(&ModalityBundle::from_scene(&scene(3)).unwrap())
                        .unwrap();
                    assert!(f.is_finite() && l.is_finite());
                    assert_eq!(f.mode_logits.cols, 1);
                }
            }
        }
    }

    #[test]
    fn wrong_horizon_is_a_shape_error() {
        let model = Model::new(
            ModelConfig {
                obs_frames: 6,
                ..small(EncoderVariant::Graph)
            },
            1,
        )
        .unwrap();
        let b = ModalityBundle::from_scene(&scene(1)).unwrap();
        assert!(matches!(model.predict(&b), Err(Error::Shape(_))));
    }
}
