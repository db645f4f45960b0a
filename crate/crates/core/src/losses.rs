//! Regression losses, latent distillation losses and the combined objective
//! over the full, two-frame and one-frame observation regimes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{DecodedVars, LatentPacket, LatentVars};
use crate::error::{Error, Result};
use crate::scene::{Point, Sample};
use crate::tensor::Mat;

/// Observation regimes: everything observed, or only the last two / last frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Full,
    Two,
    One,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Full, Regime::Two, Regime::One];

    pub fn keep_last(self, obs_frames: usize) -> usize {
        match self {
            Regime::Full => obs_frames,
            Regime::Two => 2.min(obs_frames),
            Regime::One => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionKind {
    #[default]
    WtaL2,
    Nll,
}

/// Ground-truth futures: `points` is `[N × T_f·2]`, `valid` is agent-major `N·T_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub horizon: usize,
    pub points: Mat,
    pub valid: Vec<bool>,
}

impl Target {
    pub fn new(futures: &[Vec<Point>]) -> Self {
        let horizon = futures.first().map_or(0, Vec::len);
        let rows: Vec<Vec<f64>> = futures
            .iter()
            .map(|f| f.iter().flat_map(|p| [p[0], p[1]]).collect())
            .collect();
        Self {
            horizon,
            points: Mat::from_rows(&rows),
            valid: vec![true; futures.len() * horizon],
        }
    }

    pub fn from_sample(s: &Sample) -> Self {
        let n = s.bundle.n_agents();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|a| s.future_of(a).iter().flat_map(|p| [p[0], p[1]]).collect())
            .collect();
        Self {
            horizon: s.future_frames,
            points: Mat::from_rows(&rows),
            valid: s.future_valid.clone(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.points.rows
    }

    fn valid_steps(&self, a: usize) -> usize {
        self.valid[a * self.horizon..(a + 1) * self.horizon]
            .iter()
            .filter(|v| **v)
            .count()
    }

    /// Target tiled once per mode, `[N × F·T_f·2]`.
    fn tiled(&self, modes: usize) -> Mat {
        let w = self.horizon * 2;
        let mut out = Mat::zeros(self.n_agents(), modes * w);
        for a in 0..self.n_agents() {
            for f in 0..modes {
                out.row_mut(a)[f * w..(f + 1) * w].copy_from_slice(self.points.row(a));
            }
        }
        out
    }
}

/// A regression loss split into its parts; `total = regression + classification`.
#[derive(Clone, Debug)]
pub struct RegressionTerms {
    pub regression: Var,
    pub classification: Var,
    pub total: Var,
    /// Winning mode per agent; `None` for agents without a valid future step.
    pub winners: Vec<Option<usize>>,
}

fn check_shapes(g: &Graph, out: &DecodedVars, target: &Target) -> Result<usize> {
    let (n, f) = g.shape(out.mode_logits);
    if f == 0 {
        return Err(Error::InvalidInput("forecast has zero modes".into()));
    }
    if n != target.n_agents() || g.shape(out.proposals) != (n, f * target.horizon * 2) {
        return Err(Error::Shape(format!(
            "forecast {:?} with {f} modes does not match target with {} agents and {} steps",
            g.shape(out.proposals),
            target.n_agents(),
            target.horizon
        )));
    }
    Ok(f)
}

/// Per-(agent, mode) scores `[N × F]` become a loss by picking the lowest
/// score per agent, averaging those, and adding winner cross-entropy.
fn select_and_classify(g: &Graph, scores: Var, logits: Var, target: &Target) -> RegressionTerms {
    let (n, f) = g.shape(scores);
    let values = g.to_mat(scores);
    let winners: Vec<Option<usize>> = (0..n)
        .map(|a| {
            (target.valid_steps(a) > 0).then(|| {
                let row = values.row(a);
                (0..f).fold(0, |best, m| if row[m] < row[best] { m } else { best })
            })
        })
        .collect();
    let counted = winners.iter().flatten().count();
    let mut pick = Mat::zeros(n, f);
    for (a, w) in winners.iter().enumerate() {
        if let Some(m) = w {
            pick.set(a, *m, 1.0 / counted as f64);
        }
    }
    let pick = g.constant(pick);
    let regression = g.sum(g.mul(scores, pick));
    let classification = g.scale(g.sum(g.mul(g.log_softmax_rows(logits), pick)), -1.0);
    RegressionTerms {
        regression,
        classification,
        total: g.add(regression, classification),
        winners,
    }
}

/// Winner-takes-all mean Euclidean error plus winner cross-entropy.
pub fn wta_l2(g: &Graph, out: &DecodedVars, target: &Target) -> Result<RegressionTerms> {
    let f = check_shapes(g, out, target)?;
    let (n, t) = (target.n_agents(), target.horizon);
    let diff = g.sub(out.proposals, g.constant(target.tiled(f)));
    let dist = g.reshape(g.row_norm(g.reshape(diff, n * f * t, 2)), n * f, t);
    let mut w = Mat::zeros(n * f, t);
    for a in 0..n {
        let count = target.valid_steps(a);
        for m in 0..f {
            for s in 0..t {
                if target.valid[a * t + s] {
                    w.set(a * f + m, s, 1.0 / count as f64);
                }
            }
        }
    }
    let err = g.reshape(g.sum_cols(g.mul(dist, g.constant(w))), n, f);
    Ok(select_and_classify(g, err, out.mode_logits, target))
}

/// Laplace negative log-likelihood summed over steps and coordinates, under
/// the most likely mode, plus winner cross-entropy.
pub fn nll_loss(g: &Graph, out: &DecodedVars, target: &Target) -> Result<RegressionTerms> {
    let f = check_shapes(g, out, target)?;
    if let Some(bad) = g.value(out.scales).data.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "Laplace scale must be positive, got {bad}"
        )));
    }
    let (n, t) = (target.n_agents(), target.horizon);
    let diff = g.sub(out.proposals, g.constant(target.tiled(f)));
    let per = g.add(
        g.ln(g.scale(out.scales, 2.0)),
        g.div(g.abs(diff), out.scales),
    );
    let per = g.reshape(per, n * f, 2 * t);
    let mut w = Mat::zeros(n * f, 2 * t);
    for a in 0..n {
        for m in 0..f {
            for s in 0..t {
                if target.valid[a * t + s] {
                    w.set(a * f + m, 2 * s, 1.0);
                    w.set(a * f + m, 2 * s + 1, 1.0);
                }
            }
        }
    }
    let nll = g.reshape(g.sum_cols(g.mul(per, g.constant(w))), n, f);
    Ok(select_and_classify(g, nll, out.mode_logits, target))
}

pub fn regression_loss(
    kind: RegressionKind,
    g: &Graph,
    out: &DecodedVars,
    target: &Target,
) -> Result<RegressionTerms> {
    match kind {
        RegressionKind::WtaL2 => wta_l2(g, out, target),
        RegressionKind::Nll => nll_loss(g, out, target),
    }
}

/// `KL(A ‖ B)` between diagonal Gaussians, summed over columns and averaged over rows.
pub fn gaussian_kl(g: &Graph, mean_a: Var, logvar_a: Var, mean_b: Var, logvar_b: Var) -> Var {
    let rows = g.shape(mean_a).0.max(1);
    let ratio = g.div(
        g.add(g.exp(logvar_a), g.square(g.sub(mean_a, mean_b))),
        g.exp(logvar_b),
    );
    let term = g.add_scalar(g.add(g.sub(logvar_b, logvar_a), ratio), -1.0);
    g.scale(g.sum(term), 0.5 / rows as f64)
}

/// Direct evaluation of [`gaussian_kl`] on plain matrices.
pub fn gaussian_kl_value(mean_a: &Mat, logvar_a: &Mat, mean_b: &Mat, logvar_b: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..mean_a.len() {
        let (ma, la, mb, lb) = (
            mean_a.data[i],
            logvar_a.data[i],
            mean_b.data[i],
            logvar_b.data[i],
        );
        total += 0.5 * (lb - la + (la.exp() + (ma - mb).powi(2)) / lb.exp() - 1.0);
    }
    total / mean_a.rows.max(1) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdForm {
    /// `KL(teacher ‖ student)` on both latents.
    #[default]
    Plain,
    /// Cosine alignment of means plus a standard-normal prior on the student.
    CosReg,
}

/// Divergence used by [`KdForm::Plain`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDivergence {
    #[default]
    Gaussian,
    /// KL between softmax distributions over the latent dimensions of the means.
    SoftmaxOverDim,
}

/// Teacher latents enter as constants, so no gradient can reach the teacher.
fn check_packet(g: &Graph, teacher: &LatentPacket, student: &LatentVars) -> Result<()> {
    let pairs = [
        (teacher.q_mean.shape(), g.shape(student.q_mean)),
        (teacher.q_logvar.shape(), g.shape(student.q_logvar)),
        (teacher.h_mean.shape(), g.shape(student.h_mean)),
        (teacher.h_logvar.shape(), g.shape(student.h_logvar)),
    ];
    for (t, s) in pairs {
        if t != s {
            return Err(Error::Shape(format!(
                "teacher latent {t:?} vs student latent {s:?}"
            )));
        }
    }
    Ok(())
}

fn softmax_kl(g: &Graph, teacher_mean: &Mat, student_mean: Var) -> Var {
    let gt = Graph::detached();
    let log_p = gt.to_mat(gt.log_softmax_rows(gt.constant(teacher_mean.clone())));
    let p = log_p.map(f64::exp);
    let log_q = g.log_softmax_rows(student_mean);
    let inner = g.mul(g.constant(p), g.sub(g.constant(log_p), log_q));
    g.scale(g.sum(inner), 1.0 / teacher_mean.rows.max(1) as f64)
}

/// Returns `(kd_local, kd_global)`.
pub fn kd_loss_plain(
    g: &Graph,
    teacher: &LatentPacket,
    student: &LatentVars,
    divergence: KdDivergence,
) -> Result<(Var, Var)> {
    check_packet(g, teacher, student)?;
    Ok(match divergence {
        KdDivergence::Gaussian => {
            let local = gaussian_kl(
                g,
                g.constant(teacher.q_mean.clone()),
                g.constant(teacher.q_logvar.clone()),
                student.q_mean,
                student.q_logvar,
            );
            let global = gaussian_kl(
                g,
                g.constant(teacher.h_mean.clone()),
                g.constant(teacher.h_logvar.clone()),
                student.h_mean,
                student.h_logvar,
            );
            (local, global)
        }
        KdDivergence::SoftmaxOverDim => (
            softmax_kl(g, &teacher.q_mean, student.q_mean),
            softmax_kl(g, &teacher.h_mean, student.h_mean),
        ),
    })
}

/// Mean over rows of `1 − cos(teacher_i, student_i)`. A row pair where both
/// vectors are zero counts as identical (0); exactly one zero vector counts as
/// maximally dissimilar (1).
pub fn cosine_distance(g: &Graph, teacher: &Mat, student: Var) -> Var {
    let n = teacher.rows;
    let s_val = g.to_mat(student);
    let mut regular = Vec::new();
    let mut fixed = 0.0;
    for i in 0..n {
        let (tz, sz) = (
            teacher.row(i).iter().all(|v| *v == 0.0),
            s_val.row(i).iter().all(|v| *v == 0.0),
        );
        match (tz, sz) {
            (false, false) => regular.push(i),
            (true, true) => {}
            _ => {
                log::warn!("zero-norm latent mean for agent row {i}; cosine distance set to 1");
                fixed += 1.0;
            }
        }
    }
    let mut dist = g.constant(Mat::scalar(fixed / n.max(1) as f64));
    if !regular.is_empty() {
        let unit = Mat::from_rows(
            &regular
                .iter()
                .map(|&i| {
                    let r = teacher.row(i);
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.iter().map(|v| v / norm).collect()
                })
                .collect::<Vec<_>>(),
        );
        let s = g.gather_rows(student, &regular);
        let cos = g.div(g.sum_cols(g.mul(s, g.constant(unit))), g.row_norm(s));
        let part = g.scale(g.add_scalar(g.scale(cos, -1.0), 1.0), 1.0 / n as f64);
        dist = g.add(dist, g.sum(part));
    }
    dist
}

/// Returns `(kd_local, kd_global)`, each `λ_cos·(1 − cos) + KL(N(0, I) ‖ student)`.
pub fn kd_loss_reg(
    g: &Graph,
    teacher: &LatentPacket,
    student: &LatentVars,
    lambda_cos: f64,
) -> Result<(Var, Var)> {
    check_packet(g, teacher, student)?;
    let prior = |mean: Var, logvar: Var| {
        let zeros = g.constant(Mat::zeros(g.shape(mean).0, g.shape(mean).1));
        gaussian_kl(g, zeros, zeros, mean, logvar)
    };
    let term = |t_mean: &Mat, s_mean: Var, s_logvar: Var| {
        let kl = prior(s_mean, s_logvar);
        if lambda_cos == 0.0 {
            kl
        } else {
            g.add(g.scale(cosine_distance(g, t_mean, s_mean), lambda_cos), kl)
        }
    };
    Ok((
        term(&teacher.q_mean, student.q_mean, student.q_logvar),
        term(&teacher.h_mean, student.h_mean, student.h_logvar),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KdToggles {
    pub local: bool,
    pub global: bool,
}

impl KdToggles {
    pub const ON: KdToggles = KdToggles {
        local: true,
        global: true,
    };
    pub const OFF: KdToggles = KdToggles {
        local: false,
        global: false,
    };

    pub fn any(self) -> bool {
        self.local || self.global
    }
}

impl Default for KdToggles {
    fn default() -> Self {
        Self::ON
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub kd: KdToggles,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 3.0,
            kd: KdToggles::ON,
        }
    }
}

/// Per-regime loss components of one training step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub reg_full: f64,
    pub reg_2: f64,
    pub reg_1: f64,
    pub kd_local_full: f64,
    pub kd_local_2: f64,
    pub kd_local_1: f64,
    pub kd_global_full: f64,
    pub kd_global_2: f64,
    pub kd_global_1: f64,
    pub total: f64,
}

impl LossReport {
    /// Components in the order `reg[F,2,1]`, `kd_local[F,2,1]`, `kd_global[F,2,1]`.
    pub fn components(&self) -> [f64; 9] {
        [
            self.reg_full,
            self.reg_2,
            self.reg_1,
            self.kd_local_full,
            self.kd_local_2,
            self.kd_local_1,
            self.kd_global_full,
            self.kd_global_2,
            self.kd_global_1,
        ]
    }

    pub fn from_components(c: [f64; 9], weights: &LossWeights) -> Self {
        let mut r = Self {
            reg_full: c[0],
            reg_2: c[1],
            reg_1: c[2],
            kd_local_full: c[3],
            kd_local_2: c[4],
            kd_local_1: c[5],
            kd_global_full: c[6],
            kd_global_2: c[7],
            kd_global_1: c[8],
            total: 0.0,
        };
        r.total = total_loss(&r, weights);
        r
    }

    /// Accumulates `other` into `self` component-wise, including the total.
    pub fn accumulate(&mut self, other: &LossReport, weight: f64) {
        let mut c = self.components();
        for (a, b) in c.iter_mut().zip(other.components()) {
            *a += weight * b;
        }
        let total = self.total + weight * other.total;
        *self = Self {
            total,
            ..Self::from_components(c, &LossWeights::default())
        };
    }
}

/// Coefficients of the nine components in the total, matching [`LossReport::components`].
pub fn total_coefficients(w: &LossWeights) -> [f64; 9] {
    let l = if w.kd.local { 1.0 } else { 0.0 };
    let gl = if w.kd.global { 1.0 } else { 0.0 };
    [w.lambda_reg, 1.0, 1.0, l, l, l, gl, gl, gl]
}

/// `λ_reg·reg_full + reg_2 + reg_1` plus every enabled KD term over the three regimes.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> f64 {
    report
        .components()
        .iter()
        .zip(total_coefficients(weights))
        .filter(|(_, k)| *k != 0.0)
        .map(|(c, k)| k * c)
        .sum()
}

/// Graph version of [`total_loss`]; `None` components count as zero.
pub fn total_loss_var(g: &Graph, components: &[Option<Var>; 9], weights: &LossWeights) -> Var {
    let mut acc: Option<Var> = None;
    for (c, k) in components.iter().zip(total_coefficients(weights)) {
        if let (Some(v), true) = (c, k != 0.0) {
            let term = if k == 1.0 { *v } else { g.scale(*v, k) };
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
    }
    acc.unwrap_or_else(|| g.constant(Mat::scalar(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradient_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        )
    }

    fn decoded(g: &Graph, proposals: Mat, logits: Mat, scales: Mat) -> DecodedVars {
        DecodedVars {
            proposals: g.constant(proposals),
            mode_logits: g.constant(logits),
            scales: g.constant(scales),
        }
    }

    fn offsets_target(t: usize) -> Target {
        Target::new(&[(0..t).map(|s| [s as f64, 0.5 * s as f64]).collect()])
    }

    /// Proposal `m` of a single agent is the target shifted by `(off[m], 0)`.
    fn shifted(target: &Target, offs: &[f64]) -> Mat {
        let mut row = Vec::new();
        for &o in offs {
            for p in target.points.row(0).chunks_exact(2) {
                row.extend([p[0] + o, p[1]]);
            }
        }
        Mat::row_vector(row)
    }

    #[test]
    fn wta_exact_proposal_has_zero_regression() {
        let target = offsets_target(12);
        let g = Graph::detached();
        let out = decoded(
            &g,
            shifted(&target, &[0.7, 0.0]),
            Mat::zeros(1, 2),
            Mat::filled(1, 48, 1.0),
        );
        let terms = wta_l2(&g, &out, &target).unwrap();
        assert_eq!(g.scalar(terms.regression), 0.0);
        assert_eq!(terms.winners, vec![Some(1)]);
        assert!((g.scalar(terms.classification) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wta_picks_the_closer_constant_offset() {
        let target = offsets_target(12);
        let g = Graph::detached();
        let out = decoded(
            &g,
            shifted(&target, &[2.0, 1.0]),
            Mat::zeros(1, 2),
            Mat::filled(1, 48, 1.0),
        );
        let terms = wta_l2(&g, &out, &target).unwrap();
        assert!((g.scalar(terms.regression) - 1.0).abs() < 1e-12);
        assert_eq!(terms.winners, vec![Some(1)]);
    }

    #[test]
    fn wta_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, f, t) = (4, 3, 5);
            let gt: Vec<Vec<Point>> = (0..n)
                .map(|_| {
                    (0..t)
                        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                        .collect()
                })
                .collect();
            let target = Target::new(&gt);
            let props = rand_mat(&mut rng, n, f * t * 2, 3.0);
            let mut expect = 0.0;
            for a in 0..n {
                let mut best = f64::INFINITY;
                for m in 0..f {
                    let mut e = 0.0;
                    for s in 0..t {
                        let k = (m * t + s) * 2;
                        e += (props.get(a, k) - gt[a][s][0])
                            .hypot(props.get(a, k + 1) - gt[a][s][1]);
                    }
                    best = best.min(e / t as f64);
                }
                expect += best / n as f64;
            }
            let g = Graph::detached();
            let out = decoded(&g, props, Mat::zeros(n, f), Mat::filled(n, f * t * 2, 1.0));
            assert!(
                (g.scalar(wta_l2(&g, &out, &target).unwrap().regression) - expect).abs() < 1e-9
            );
        }
    }

    #[test]
    fn zero_modes_is_an_error() {
        let g = Graph::detached();
        let target = offsets_target(3);
        let out = decoded(&g, Mat::zeros(1, 0), Mat::zeros(1, 0), Mat::zeros(1, 0));
        assert!(matches!(
            wta_l2(&g, &out, &target),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn invalid_future_steps_are_ignored() {
        let mut target = offsets_target(4);
        target.valid[3] = false;
        let g = Graph::detached();
        let mut props = shifted(&target, &[0.0]);
        props.data[6] += 100.0;
        let out = decoded(&g, props, Mat::zeros(1, 1), Mat::filled(1, 8, 1.0));
        assert_eq!(g.scalar(wta_l2(&g, &out, &target).unwrap().regression), 0.0);
    }

    #[test]
    fn nll_at_mode_location_is_log_two_per_coordinate() {
        let target = offsets_target(12);
        let g = Graph::detached();
        let out = decoded(
            &g,
            shifted(&target, &[0.0]),
            Mat::zeros(1, 1),
            Mat::filled(1, 24, 1.0),
        );
        let terms = nll_loss(&g, &out, &target).unwrap();
        assert!((g.scalar(terms.regression) - 24.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(g.scalar(terms.classification), 0.0);
    }

    #[test]
    fn nll_doubling_residuals_adds_their_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = offsets_target(6);
        let residual = rand_mat(&mut rng, 1, 12, 1.0);
        let run = |k: f64| {
            let mut p = target.points.clone();
            p.data
                .iter_mut()
                .zip(&residual.data)
                .for_each(|(x, r)| *x += k * r);
            let g = Graph::detached();
            let out = decoded(&g, p, Mat::zeros(1, 1), Mat::filled(1, 12, 1.0));
            g.scalar(nll_loss(&g, &out, &target).unwrap().regression)
        };
        let sum: f64 = residual.data.iter().map(|r| r.abs()).sum();
        assert!((run(2.0) - run(1.0) - sum).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_density_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, f, t) = (3, 4, 5);
        let gt: Vec<Vec<Point>> = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                    .collect()
            })
            .collect();
        let target = Target::new(&gt);
        let props = rand_mat(&mut rng, n, f * t * 2, 2.0);
        let scales = rand_mat(&mut rng, n, f * t * 2, 1.0).map(|v| v.abs() + 0.1);
        let logits = rand_mat(&mut rng, n, f, 1.0);
        let mut expect = 0.0;
        for a in 0..n {
            let mut best = (f64::INFINITY, 0);
            for m in 0..f {
                let mut nll = 0.0;
                for s in 0..t {
                    for c in 0..2 {
                        let k = (m * t + s) * 2 + c;
                        let b = scales.get(a, k);
                        let density =
                            (-(props.get(a, k) - gt[a][s][c]).abs() / b).exp() / (2.0 * b);
                        nll -= density.ln();
                    }
                }
                if nll < best.0 {
                    best = (nll, m);
                }
            }
            let row = logits.row(a);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += (best.0 + lse - row[best.1]) / n as f64;
        }
        let g = Graph::detached();
        let out = decoded(&g, props, logits, scales);
        assert!((g.scalar(nll_loss(&g, &out, &target).unwrap().total) - expect).abs() < 1e-9);
    }

    #[test]
    fn nll_rejects_nonpositive_scale() {
        let target = offsets_target(2);
        let g = Graph::detached();
        let mut s = Mat::filled(1, 4, 1.0);
        s.data[2] = 0.0;
        let out = decoded(&g, shifted(&target, &[0.0]), Mat::zeros(1, 1), s);
        assert!(nll_loss(&g, &out, &target).is_err());
    }

    #[test]
    fn kl_closed_form_cases() {
        let m = Mat::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]);
        let lv = Mat::from_rows(&[vec![0.5, -0.4], vec![0.0, 1.5]]);
        assert_eq!(gaussian_kl_value(&m, &lv, &m, &lv), 0.0);
        let mu = Mat::row_vector(vec![1.5, -0.5, 2.0]);
        let z = Mat::zeros(1, 3);
        let expect: f64 = mu.data.iter().map(|v| v * v / 2.0).sum();
        assert!((gaussian_kl_value(&mu, &z, &z, &z) - expect).abs() < 1e-15);
        let g = Graph::detached();
        let kl = gaussian_kl(&g, g_c(&g, &mu), g_c(&g, &z), g_c(&g, &z), g_c(&g, &z));
        assert!((g.scalar(kl) - expect).abs() < 1e-15);

        fn g_c(g: &Graph, m: &Mat) -> Var {
            g.constant(m.clone())
        }
    }

    fn packet(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LatentPacket {
        LatentPacket {
            q_mean: rand_mat(rng, n, d, 1.0),
            q_logvar: rand_mat(rng, n, d, 0.5),
            h_mean: rand_mat(rng, n, d, 1.0),
            h_logvar: rand_mat(rng, n, d, 0.5),
        }
    }

    fn as_vars(g: &Graph, p: &LatentPacket) -> LatentVars {
        LatentVars {
            q_mean: g.input(p.q_mean.clone()),
            q_logvar: g.input(p.q_logvar.clone()),
            h_mean: g.input(p.h_mean.clone()),
            h_logvar: g.input(p.h_logvar.clone()),
        }
    }

    #[test]
    fn kd_plain_matches_kl_oracle_and_vanishes_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, s) = (packet(&mut rng, 3, 5), packet(&mut rng, 3, 5));
        let g = Graph::detached();
        let (l, gl) = kd_loss_plain(&g, &t, &as_vars(&g, &s), KdDivergence::Gaussian).unwrap();
        assert!(
            (g.scalar(l) - gaussian_kl_value(&t.q_mean, &t.q_logvar, &s.q_mean, &s.q_logvar)).abs()
                < 1e-12
        );
        assert!(
            (g.scalar(gl) - gaussian_kl_value(&t.h_mean, &t.h_logvar, &s.h_mean, &s.h_logvar))
                .abs()
                < 1e-12
        );
        let (l, gl) = kd_loss_plain(&g, &t, &as_vars(&g, &t), KdDivergence::Gaussian).unwrap();
        assert_eq!((g.scalar(l), g.scalar(gl)), (0.0, 0.0));
        let (l, _) = kd_loss_plain(&g, &t, &as_vars(&g, &t), KdDivergence::SoftmaxOverDim).unwrap();
        assert!(g.scalar(l).abs() < 1e-15);
    }

    #[test]
    fn kd_shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, s) = (packet(&mut rng, 3, 5), packet(&mut rng, 2, 5));
        let g = Graph::detached();
        assert!(matches!(
            kd_loss_plain(&g, &t, &as_vars(&g, &s), KdDivergence::Gaussian),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            kd_loss_reg(&g, &t, &as_vars(&g, &s), 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn kd_reg_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Identical means, student heads at the standard normal.
        let zero = LatentPacket {
            q_mean: Mat::zeros(2, 4),
            q_logvar: Mat::zeros(2, 4),
            h_mean: Mat::zeros(2, 4),
            h_logvar: Mat::zeros(2, 4),
        };
        let g = Graph::detached();
        let (l, gl) = kd_loss_reg(&g, &zero, &as_vars(&g, &zero), 0.5).unwrap();
        assert_eq!((g.scalar(l), g.scalar(gl)), (0.0, 0.0));

        let (t, s) = (packet(&mut rng, 3, 4), packet(&mut rng, 3, 4));
        let (l, _) = kd_loss_reg(&g, &t, &as_vars(&g, &s), 0.0).unwrap();
        let z = Mat::zeros(3, 4);
        assert!((g.scalar(l) - gaussian_kl_value(&z, &z, &s.q_mean, &s.q_logvar)).abs() < 1e-12);

        let cos_of = |student: &Mat| {
            let g = Graph::detached();
            g.scalar(cosine_distance(&g, &t.q_mean, g.constant(student.clone())))
        };
        let base = cos_of(&s.q_mean);
        assert!((cos_of(&s.q_mean.scale(3.7)) - base).abs() < 1e-12);
        let mut oracle = 0.0;
        for i in 0..3 {
            let (a, b) = (t.q_mean.row(i), s.q_mean.row(i));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            oracle += (1.0 - dot / (na * nb)) / 3.0;
        }
        assert!((base - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_student_mean_counts_as_dissimilar() {
        let t = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let s = Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![2.0, 1.0]]);
        let g = Graph::detached();
        assert!((g.scalar(cosine_distance(&g, &t, g.constant(s))) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, s) = (packet(&mut rng, 2, 3), packet(&mut rng, 2, 3));
        let g = Graph::detached();
        let tv = g.input(t.q_mean.clone());
        let sv = as_vars(&g, &s);
        let (l, gl) = kd_loss_reg(
            &g,
            &LatentPacket {
                q_mean: g.to_mat(tv),
                ..t.clone()
            },
            &sv,
            0.5,
        )
        .unwrap();
        let grads = g.backward(g.add(l, gl));
        assert!(grads
            .wrt(tv)
            .is_none_or(|m| m.data.iter().all(|v| *v == 0.0)));
        assert!(grads.wrt(sv.q_mean).is_some());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, f, t) = (2, 3, 4);
        let gt: Vec<Vec<Point>> = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                    .collect()
            })
            .collect();
        let target = Target::new(&gt);
        let inputs = vec![
            rand_mat(&mut rng, n, f * t * 2, 2.0),
            rand_mat(&mut rng, n, f, 1.0),
            rand_mat(&mut rng, n, f * t * 2, 1.0),
        ];
        let build = |kind: RegressionKind| {
            let target = target.clone();
            move |g: &Graph, v: &[Var]| {
                let out = DecodedVars {
                    proposals: v[0],
                    mode_logits: v[1],
                    scales: g.add_scalar(g.softplus(v[2]), 0.1),
                };
                regression_loss(kind, g, &out, &target).unwrap().total
            }
        };
        assert!(gradient_check(&inputs, &build(RegressionKind::WtaL2)) < 1e-4);
        assert!(gradient_check(&inputs, &build(RegressionKind::Nll)) < 1e-4);

        let tp = packet(&mut rng, n, 4);
        let sp = packet(&mut rng, n, 4);
        let student_inputs = vec![
            sp.q_mean.clone(),
            sp.q_logvar.clone(),
            sp.h_mean.clone(),
            sp.h_logvar.clone(),
        ];
        let vars = |v: &[Var]| LatentVars {
            q_mean: v[0],
            q_logvar: v[1],
            h_mean: v[2],
            h_logvar: v[3],
        };
        for div in [KdDivergence::Gaussian, KdDivergence::SoftmaxOverDim] {
            let err = gradient_check(&student_inputs, &|g, v| {
                let (a, b) = kd_loss_plain(g, &tp, &vars(v), div).unwrap();
                g.add(a, b)
            });
            assert!(err < 1e-4, "{div:?}: {err}");
        }
        let err = gradient_check(&student_inputs, &|g, v| {
            let (a, b) = kd_loss_reg(g, &tp, &vars(v), 0.5).unwrap();
            g.add(a, b)
        });
        assert!(err < 1e-4);
        let err = gradient_check(&student_inputs, &|g, v| {
            let (a, b) = kd_loss_reg(g, &tp, &vars(v), 0.5).unwrap();
            let (c, d) = kd_loss_plain(g, &tp, &vars(v), KdDivergence::Gaussian).unwrap();
            let comps = [
                Some(a),
                Some(b),
                Some(c),
                Some(d),
                Some(a),
                Some(c),
                Some(b),
                Some(d),
                Some(a),
            ];
            total_loss_var(g, &comps, &LossWeights::default())
        });
        assert!(err < 1e-4);
    }

    #[test]
    fn total_with_unit_components_is_eight() {
        let w = LossWeights {
            lambda_reg: 3.0,
            kd: KdToggles::ON,
        };
        let mut c = [1.0; 9];
        // Each regime's KD term is local + global = 1.
        c[3..].iter_mut().for_each(|v| *v = 0.5);
        assert_eq!(LossReport::from_components(c, &w).total, 8.0);
        assert_eq!(LossReport::from_components([1.0; 9], &w).total, 11.0);
    }

    #[test]
    fn total_without_kd() {
        let w = LossWeights {
            lambda_reg: 3.0,
            kd: KdToggles::OFF,
        };
        let r = LossReport::from_components([0.7, 0.2, 0.4, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0], &w);
        assert!((r.total - (3.0 * 0.7 + 0.2 + 0.4)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn total_is_linear_in_each_component(
            c in prop::array::uniform9(-5.0f64..5.0),
            k in 0usize..9,
            delta in -3.0f64..3.0,
            local: bool,
            global: bool,
        ) {
            let w = LossWeights { lambda_reg: 3.0, kd: KdToggles { local, global } };
            let base = LossReport::from_components(c, &w).total;
            let mut c2 = c;
            c2[k] += delta;
            let moved = LossReport::from_components(c2, &w).total;
            let coeff = total_coefficients(&w)[k];
            prop_assert!((moved - base - coeff * delta).abs() < 1e-9);
        }

        #[test]
        fn kl_is_nonnegative(
            ma in prop::collection::vec(-3.0f64..3.0, 6),
            la in prop::collection::vec(-3.0f64..3.0, 6),
            mb in prop::collection::vec(-3.0f64..3.0, 6),
            lb in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let m = |v: Vec<f64>| Mat::from_vec(2, 3, v);
            let (ma, la) = (m(ma), m(la));
            prop_assert!(gaussian_kl_value(&ma, &la, &m(mb), &m(lb)) >= -1e-12);
            prop_assert!(gaussian_kl_value(&ma, &la, &ma, &la).abs() <= 1e-12);
        }

        #[test]
        fn moving_winner_toward_truth_never_increases_wta(
            offs in prop::collection::vec(0.1f64..3.0, 3),
            shrink in 0.0f64..1.0,
        ) {
            let target = offsets_target(5);
            let run = |o: &[f64]| {
                let g = Graph::detached();
                let out = decoded(&g, shifted(&target, o), Mat::zeros(1, 3), Mat::filled(1, 30, 1.0));
                let t = wta_l2(&g, &out, &target).unwrap();
                (g.scalar(t.regression), t.winners[0].unwrap())
            };
            let (before, w) = run(&offs);
            let mut moved = offs.clone();
            moved[w] *= shrink;
            prop_assert!(run(&moved).0 <= before + 1e-12);
        }
    }
}
