//! Goal-seeking pedestrian simulator producing fully annotated scenes.
//!
//! Agents walk at a constant preferred speed towards a goal, steer away from
//! nearby agents and obstacles with a quadratic repulsion, and may switch to
//! a new goal around the end of the observation window. Their pose encodes
//! speed and (scaled by `pose_signal_gain`) the heading change over the
//! forecast horizon, so pose carries information the trajectory alone lacks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::captions::{caption_motion, caption_obstacle, CaptionRules};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::scene::vocab::{STANDING_TOGETHER, WALKING_TOGETHER};
use crate::scene::{
    wrap_angle, AgentState, CaptionToken, Obstacle, Point, PoseFeature, Relation, Scene,
    Trajectory, POSE_DIM, POSE_YAW, SCENE_SCHEMA_VERSION,
};

/// Seed of the fixed map lifting pose factors to joint angles.
const POSE_LIFT_SEED: u64 = 0x706f_7365_6c69_6674;
const WARMUP_FRAMES: usize = 2;
/// Number of latent factors behind each pose: speed and upcoming turn.
const POSE_FACTORS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Inclusive range of agents per scene.
    pub n_agents: [usize; 2],
    pub group_probability: f64,
    pub obstacle_count: usize,
    /// Standard deviation of goal placement noise, meters.
    pub goal_noise_std: f64,
    pub pose_signal_gain: f64,
    pub seed: u64,
    pub obs_frames: usize,
    pub future_frames: usize,
    pub frame_rate: f64,
    /// Half-width of the square spawn region, meters.
    pub world_extent: f64,
    /// Preferred walking speed range, m/s.
    pub speed_range: [f64; 2],
    pub still_probability: f64,
    pub turn_probability: f64,
    pub max_turn_deg: f64,
    /// Maximum heading change per frame, degrees.
    pub max_turn_rate_deg: f64,
    pub position_noise_std: f64,
    pub pose_noise_std: f64,
    pub pose_dim: usize,
    pub captions: CaptionRules,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_agents: [2, 6],
            group_probability: 0.3,
            obstacle_count: 4,
            goal_noise_std: 0.3,
            pose_signal_gain: 1.0,
            seed: 0,
            obs_frames: crate::scene::DEFAULT_OBS_FRAMES,
            future_frames: crate::scene::DEFAULT_FUTURE_FRAMES,
            frame_rate: crate::scene::DEFAULT_FRAME_RATE,
            world_extent: 6.0,
            speed_range: [0.5, 1.6],
            still_probability: 0.1,
            turn_probability: 0.8,
            max_turn_deg: 90.0,
            max_turn_rate_deg: 30.0,
            position_noise_std: 0.01,
            pose_noise_std: 0.02,
            pose_dim: POSE_DIM,
            captions: CaptionRules::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_agents[0] == 0 || self.n_agents[0] > self.n_agents[1] {
            return bad(format!(
                "n_agents range {:?} must satisfy 1 <= min <= max",
                self.n_agents
            ));
        }
        for (name, p) in [
            ("group_probability", self.group_probability),
            ("still_probability", self.still_probability),
            ("turn_probability", self.turn_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.obs_frames < 2 || self.future_frames == 0 {
            return bad("need at least 2 observed and 1 future frame".into());
        }
        if !(self.frame_rate > 0.0 && self.world_extent > 0.0) {
            return bad("frame_rate and world_extent must be positive".into());
        }
        if !(self.speed_range[0] >= 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            return bad(format!("speed_range {:?} invalid", self.speed_range));
        }
        for (name, v) in [
            ("goal_noise_std", self.goal_noise_std),
            ("position_noise_std", self.position_noise_std),
            ("pose_noise_std", self.pose_noise_std),
            ("pose_signal_gain", self.pose_signal_gain),
            ("max_turn_deg", self.max_turn_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.pose_dim <= POSE_YAW {
            return bad(format!("pose_dim {} too small", self.pose_dim));
        }
        self.captions.validate()
    }
}

/// Per-scene seed for the `index`-th scene of a dataset rooted at `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes with seeds [`scene_seed`]`(config.seed, i)`.
pub fn generate_dataset(
    config: &GeneratorConfig,
    count: usize,
    mode: Parallelism,
) -> Result<Vec<Scene>> {
    config.validate()?;
    par::map_range(mode, 0..count, |i| {
        let mut c = config.clone();
        c.seed = scene_seed(config.seed, i);
        generate_scene(&c)
    })
    .into_iter()
    .collect()
}

struct SimAgent {
    pos: Point,
    heading: f64,
    speed: f64,
    goals: [Point; 2],
    switch_step: usize,
    group: usize,
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n > 0.0 {
        [v[0] / n, v[1] / n]
    } else {
        [0.0, 0.0]
    }
}

fn pose_lift(pose_dim: usize) -> Vec<[f64; POSE_FACTORS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(POSE_LIFT_SEED);
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    (0..pose_dim)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect()
}

pub fn generate_scene(config: &GeneratorConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dt = 1.0 / config.frame_rate;
    let ext = config.world_extent;
    let n = rng.random_range(config.n_agents[0]..=config.n_agents[1]);
    let goal_noise = Normal::new(0.0, config.goal_noise_std.max(1e-12)).expect("finite std");

    let obstacles: Vec<Obstacle> = (0..config.obstacle_count)
        .map(|_| Obstacle::Point {
            at: [rng.random_range(-ext..ext), rng.random_range(-ext..ext)],
        })
        .collect();

    let horizon = WARMUP_FRAMES + config.obs_frames + config.future_frames;
    let boundary = WARMUP_FRAMES + config.obs_frames;
    let mut agents: Vec<SimAgent> = Vec::with_capacity(n);
    let mut group_count = 0;
    while agents.len() < n {
        let joins = agents.last().is_some_and(|prev| {
            agents.iter().filter(|a| a.group == prev.group).count() == 1
                && rng.random_bool(config.group_probability)
        });
        if joins {
            let leader = agents.last().expect("non-empty");
            let side = [-leader.heading.sin(), leader.heading.cos()];
            let off = 0.7;
            let shift = |p: Point| [p[0] + side[0] * off, p[1] + side[1] * off];
            let follower = SimAgent {
                pos: shift(leader.pos),
                heading: leader.heading,
                speed: leader.speed,
                goals: [shift(leader.goals[0]), shift(leader.goals[1])],
                switch_step: leader.switch_step,
                group: leader.group,
            };
            agents.push(follower);
            continue;
        }
        let mut pos = [0.0, 0.0];
        for _ in 0..64 {
            pos = [rng.random_range(-ext..ext), rng.random_range(-ext..ext)];
            let clear_agents = agents
                .iter()
                .all(|a| (a.pos[0] - pos[0]).hypot(a.pos[1] - pos[1]) > 1.0);
            let clear_obstacles = obstacles.iter().all(|o| {
                let c = o.closest_point(pos);
                (c[0] - pos[0]).hypot(c[1] - pos[1]) > 1.0
            });
            if clear_agents && clear_obstacles {
                break;
            }
        }
        let heading = rng.random_range(-PI..PI);
        let still = rng.random_bool(config.still_probability);
        let speed = if still {
            0.0
        } else {
            rng.random_range(config.speed_range[0]..=config.speed_range[1])
        };
        let far = 30.0;
        let g0 = [
            pos[0] + far * heading.cos() + goal_noise.sample(&mut rng),
            pos[1] + far * heading.sin() + goal_noise.sample(&mut rng),
        ];
        let turn = if rng.random_bool(config.turn_probability) {
            rng.random_range(-config.max_turn_deg..=config.max_turn_deg)
                .to_radians()
        } else {
            0.0
        };
        let switch_step =
            rng.random_range(boundary.saturating_sub(3)..=boundary + config.future_frames / 2);
        let new_heading = heading + turn;
        let g1 = [
            g0[0] + (far * 3.0) * new_heading.cos(),
            g0[1] + (far * 3.0) * new_heading.sin(),
        ];
        agents.push(SimAgent {
            pos,
            heading,
            speed,
            goals: [g0, g1],
            switch_step,
            group: group_count,
        });
        group_count += 1;
    }

    // positions[k][step], headings[k][step]
    let mut positions = vec![Vec::with_capacity(horizon); n];
    let mut headings = vec![Vec::with_capacity(horizon); n];
    for (k, a) in agents.iter().enumerate() {
        positions[k].push(a.pos);
        headings[k].push(wrap_angle(a.heading));
    }
    let max_rate = config.max_turn_rate_deg.to_radians();
    for step in 1..horizon {
        let snapshot: Vec<(Point, usize)> = agents.iter().map(|a| (a.pos, a.group)).collect();
        for (k, a) in agents.iter_mut().enumerate() {
            if a.speed == 0.0 {
                positions[k].push(a.pos);
                headings[k].push(wrap_angle(a.heading));
                continue;
            }
            // After the switch step the agent heads for its second goal.
            let goal = if step >= a.switch_step {
                a.goals[1]
            } else {
                a.goals[0]
            };
            let mut desired = unit([goal[0] - a.pos[0], goal[1] - a.pos[1]]);
            for (j, &(p, group)) in snapshot.iter().enumerate() {
                if j == k {
                    continue;
                }
                let radius = if group == a.group { 0.5 } else { 1.5 };
                let d = (a.pos[0] - p[0]).hypot(a.pos[1] - p[1]);
                if d < radius && d > 0.0 {
                    let w = 3.0 * ((radius - d) / radius).powi(2);
                    desired[0] += w * (a.pos[0] - p[0]) / d;
                    desired[1] += w * (a.pos[1] - p[1]) / d;
                }
            }
            for o in &obstacles {
                let c = o.closest_point(a.pos);
                let d = (a.pos[0] - c[0]).hypot(a.pos[1] - c[1]);
                let radius = 1.5;
                if d < radius && d > 0.0 {
                    let w = 3.0 * ((radius - d) / radius).powi(2);
                    desired[0] += w * (a.pos[0] - c[0]) / d;
                    desired[1] += w * (a.pos[1] - c[1]) / d;
                }
            }
            if desired != [0.0, 0.0] {
                let target = desired[1].atan2(desired[0]);
                a.heading += wrap_angle(target - a.heading).clamp(-max_rate, max_rate);
            }
            a.pos = [
                a.pos[0] + a.speed * dt * a.heading.cos(),
                a.pos[1] + a.speed * dt * a.heading.sin(),
            ];
            positions[k].push(a.pos);
            headings[k].push(wrap_angle(a.heading));
        }
    }

    let lift = pose_lift(config.pose_dim);
    let pos_noise = Normal::new(0.0, config.position_noise_std.max(1e-12)).expect("finite std");
    let pose_noise = Normal::new(0.0, config.pose_noise_std.max(1e-12)).expect("finite std");
    let noisy = |p: Point, rng: &mut ChaCha8Rng| {
        if config.position_noise_std > 0.0 {
            [p[0] + pos_noise.sample(rng), p[1] + pos_noise.sample(rng)]
        } else {
            p
        }
    };

    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        let obs_steps = WARMUP_FRAMES..boundary;
        let obs: Vec<Point> = obs_steps
            .clone()
            .map(|s| noisy(positions[k][s], &mut rng))
            .collect();
        let fut: Vec<Point> = (boundary..horizon)
            .map(|s| noisy(positions[k][s], &mut rng))
            .collect();
        let mut pose = Vec::with_capacity(config.obs_frames);
        let mut captions = Vec::with_capacity(config.obs_frames);
        for s in obs_steps {
            let p = positions[k][s];
            let prev = positions[k][s - 1];
            let disp = (p[0] - prev[0]).hypot(p[1] - prev[1]);
            let speed = disp / dt;
            let upcoming_turn = wrap_angle(headings[k][s + config.future_frames] - headings[k][s]);
            let factors = [
                speed / 1.5 - 0.5,
                config.pose_signal_gain * upcoming_turn / (PI / 2.0),
            ];
            let mut theta = vec![0.0; config.pose_dim];
            theta[POSE_YAW] = headings[k][s];
            for (d, w) in lift.iter().enumerate().skip(POSE_YAW + 1) {
                let mut v = w[0] * factors[0] + w[1] * factors[1];
                if config.pose_noise_std > 0.0 {
                    v += pose_noise.sample(&mut rng);
                }
                theta[d] = v.clamp(-PI, PI);
            }
            pose.push(PoseFeature {
                theta,
                available: true,
            });

            let heading_vec = if disp > 0.0 {
                [p[0] - prev[0], p[1] - prev[1]]
            } else {
                [headings[k][s].cos(), headings[k][s].sin()]
            };
            captions.push(vec![
                caption_motion(disp, &config.captions)?,
                caption_obstacle(p, heading_vec, &obstacles, &config.captions)?,
            ]);
        }
        let relations = (0..n)
            .filter(|&j| j != k && agents[j].group == agents[k].group)
            .map(|j| Relation {
                neighbor: j as u32,
                caption: CaptionToken::of(if agents[k].speed == 0.0 {
                    STANDING_TOGETHER
                } else {
                    WALKING_TOGETHER
                }),
            })
            .collect();
        states.push(AgentState {
            id: k as u32,
            trajectory_obs: Trajectory::new(obs),
            trajectory_fut: Trajectory::new(fut),
            heading: headings[k][WARMUP_FRAMES..boundary].to_vec(),
            pose,
            captions,
            relations,
        });
    }
    Ok(Scene {
        schema_version: SCENE_SCHEMA_VERSION,
        agents: states,
        obstacles,
        frame_rate: config.frame_rate,
    })
}

/// Heading change from the last observed frame to the final future frame,
/// measured on the noise-free headings implied by the future trajectory.
pub fn future_turn(agent: &AgentState) -> f64 {
    let fut = &agent.trajectory_fut.positions;
    let last = agent.heading.last().copied().unwrap_or(0.0);
    if fut.len() < 2 {
        return 0.0;
    }
    let a = fut[fut.len() - 2];
    let b = fut[fut.len() - 1];
    if (b[0] - a[0]).hypot(b[1] - a[1]) < 1e-3 {
        return 0.0;
    }
    wrap_angle((b[1] - a[1]).atan2(b[0] - a[0]) - last)
}
