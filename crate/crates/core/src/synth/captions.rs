//! Rule-based agent captions from speed and the nearest obstacle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::vocab::*;
use crate::scene::{CaptionToken, Obstacle, Point};

/// Thresholds for the rule-based captioner.
///
/// `still_threshold` and `slow_threshold` are displacements per frame in the
/// units of the positions being captioned. [`CaptionRules::pixels`] holds the
/// image-space values; the default is the meter-scaled variant used by the
/// synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRules {
    pub still_threshold: f64,
    pub slow_threshold: f64,
    /// Obstacles at or beyond this distance are ignored.
    pub obstacle_gate: f64,
    /// Inner and outer bearing bin edges in degrees.
    pub bearing_bins: [f64; 2],
}

impl Default for CaptionRules {
    fn default() -> Self {
        Self {
            still_threshold: 0.06,
            slow_threshold: 0.8,
            obstacle_gate: 5.0,
            bearing_bins: [30.0, 100.0],
        }
    }
}

impl CaptionRules {
    pub fn pixels() -> Self {
        Self {
            still_threshold: 1.5,
            slow_threshold: 20.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [inner, outer] = self.bearing_bins;
        if !(self.still_threshold > 0.0
            && self.still_threshold < self.slow_threshold
            && self.slow_threshold.is_finite())
        {
            return Err(Error::Config(format!(
                "caption speed thresholds must satisfy 0 < still ({}) < slow ({})",
                self.still_threshold, self.slow_threshold
            )));
        }
        if !(inner > 0.0 && inner < outer && outer <= 180.0) {
            return Err(Error::Config(format!(
                "bearing bins must be ascending in (0, 180]: {inner}, {outer}"
            )));
        }
        if !(self.obstacle_gate > 0.0) {
            return Err(Error::Config(format!(
                "obstacle gate must be positive, got {}",
                self.obstacle_gate
            )));
        }
        Ok(())
    }
}

pub fn caption_motion(displacement: f64, rules: &CaptionRules) -> Result<CaptionToken> {
    if !(displacement >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "displacement must be non-negative, got {displacement}"
        )));
    }
    let id = if displacement < rules.still_threshold {
        STANDING_STILL
    } else if displacement < rules.slow_threshold {
        WALKING_SLOWLY
    } else {
        WALKING
    };
    Ok(CaptionToken::of(id))
}

/// Signed angle in degrees from `from` to `to`, counterclockwise positive, in `(-180, 180]`.
pub fn signed_bearing_deg(from: [f64; 2], to: [f64; 2]) -> f64 {
    let cross = from[0] * to[1] - from[1] * to[0];
    let dot = from[0] * to[0] + from[1] * to[1];
    let deg = cross.atan2(dot).to_degrees();
    if deg <= -180.0 {
        deg + 360.0
    } else {
        deg
    }
}

/// Caption for the nearest obstacle relative to the heading direction.
///
/// Bin edges are exclusive on both sides, so a bearing exactly on an edge
/// falls through to "no obstacle in the heading direction".
pub fn caption_obstacle(
    agent_pos: Point,
    heading_vec: [f64; 2],
    obstacles: &[Obstacle],
    rules: &CaptionRules,
) -> Result<CaptionToken> {
    if !(heading_vec[0].is_finite() && heading_vec[1].is_finite()) || heading_vec == [0.0, 0.0] {
        return Err(Error::InvalidInput(
            "heading vector must be finite and nonzero".into(),
        ));
    }
    let nearest = obstacles
        .iter()
        .map(|o| {
            let c = o.closest_point(agent_pos);
            let v = [c[0] - agent_pos[0], c[1] - agent_pos[1]];
            (v[0].hypot(v[1]), v)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((dist, obstacle_vec)) = nearest else {
        return Ok(CaptionToken::of(NO_OBSTACLE));
    };
    if !(dist < rules.obstacle_gate) {
        return Ok(CaptionToken::of(NO_OBSTACLE));
    }
    Ok(caption_bearing(
        signed_bearing_deg(heading_vec, obstacle_vec),
        rules,
    ))
}

/// Bearing bin for an in-range obstacle `sigma` degrees from the heading.
pub fn caption_bearing(sigma: f64, rules: &CaptionRules) -> CaptionToken {
    let [inner, outer] = rules.bearing_bins;
    let id = if sigma > inner && sigma < outer {
        OBSTACLE_RIGHT
    } else if sigma < inner && sigma > -inner {
        OBSTACLE_FRONT
    } else if sigma < -inner && sigma > -outer {
        OBSTACLE_LEFT
    } else {
        OBSTACLE_NOT_AHEAD
    };
    CaptionToken::of(id)
}
