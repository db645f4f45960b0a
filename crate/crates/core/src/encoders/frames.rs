//! Reference frames: the shared world frame and per-agent heading frames.

use crate::scene::{ModalityBundle, Point};

/// Expresses `points` in the frame whose x-axis points along `heading`
/// (a rotation by `-heading`).
pub fn rotate_to_heading(points: &[Point], heading: f64) -> Vec<Point> {
    let (s, c) = heading.sin_cos();
    points
        .iter()
        .map(|p| [c * p[0] + s * p[1], -s * p[0] + c * p[1]])
        .collect()
}

/// One reference frame per agent: an origin plus the heading of its x-axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub origin: Vec<Point>,
    pub heading: Vec<f64>,
    cos_sin: Vec<(f64, f64)>,
}

impl Frames {
    fn new(origin: Vec<Point>, heading: Vec<f64>) -> Self {
        let cos_sin = heading.iter().map(|h| (h.cos(), h.sin())).collect();
        Self {
            origin,
            heading,
            cos_sin,
        }
    }

    /// Every agent shares an unrotated frame centred on the mean last observed
    /// position. The mean is accumulated over sorted coordinates so it does
    /// not depend on agent order.
    pub fn world(bundle: &ModalityBundle) -> Self {
        let n = bundle.n_agents();
        let last: Vec<Point> = (0..n).map(|a| bundle.last_position(a)).collect();
        let mean = |axis: usize| {
            let mut v: Vec<f64> = last.iter().map(|p| p[axis]).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / n.max(1) as f64
        };
        let centre = [mean(0), mean(1)];
        Self::new(vec![centre; n], vec![0.0; n])
    }

    /// Per-agent frame at the last observed position. The heading is the
    /// direction of the final observed displacement when the last two frames
    /// are valid and distinct, otherwise the stored heading of the last frame.
    pub fn ego(bundle: &ModalityBundle) -> Self {
        let n = bundle.n_agents();
        let t = bundle.frames - 1;
        let mut origin = Vec::with_capacity(n);
        let mut heading = Vec::with_capacity(n);
        for a in 0..n {
            let k = bundle.idx(a, t);
            let p = bundle.positions[k];
            origin.push(p);
            let from_motion = (t > 0 && bundle.traj_valid[k] && bundle.traj_valid[k - 1])
                .then(|| {
                    let q = bundle.positions[k - 1];
                    [p[0] - q[0], p[1] - q[1]]
                })
                .filter(|d| d[0] != 0.0 || d[1] != 0.0)
                .map(|d| d[1].atan2(d[0]));
            heading.push(from_motion.unwrap_or(bundle.heading[k]));
        }
        Self::new(origin, heading)
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// World point `p` in the frame of agent `f`.
    #[inline]
    pub fn point(&self, f: usize, p: Point) -> [f64; 2] {
        self.vector(f, [p[0] - self.origin[f][0], p[1] - self.origin[f][1]])
    }

    /// World vector `v` in the frame of agent `f`.
    #[inline]
    pub fn vector(&self, f: usize, v: [f64; 2]) -> [f64; 2] {
        let (c, s) = self.cos_sin[f];
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// World angle relative to the x-axis of frame `f`, as `(cos, sin)`.
    #[inline]
    pub fn angle(&self, f: usize, a: f64) -> (f64, f64) {
        let (c, s) = self.cos_sin[f];
        let (sa, ca) = a.sin_cos();
        (ca * c + sa * s, sa * c - ca * s)
    }

    /// `(cos, sin)` of each frame heading, for mapping frame vectors back to world.
    pub fn to_world_rotations(&self) -> &[(f64, f64)] {
        &self.cos_sin
    }
}
