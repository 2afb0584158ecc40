//! Gradient descent directly on a logit vector.
//!
//! Softmax regression with a one-hot input updates exactly one column of
//! `θ`, which is the logit vector itself, so these simulations stand in for
//! that model without carrying `θ` around.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelVector;
use crate::losses::{self, LossKind, LossParams};
use crate::numkit::softmax;

/// Initial allowed probabilities closer than this are treated as tied.
pub const TIE_TOL: f64 = 1e-12;
/// Grid points with any coordinate below this are skipped.
pub const BOUNDARY_MARGIN: f64 = 1e-3;

/// Three starts on the `{A, B}` face of the ternary plot, `(p_A, p_B, p_C)`.
pub const AB_STARTS: [[f64; 3]; 3] = [[0.25, 0.05, 0.7], [0.13, 0.17, 0.7], [0.05, 0.25, 0.7]];
/// Three starts for the two-sample `{A, B}`, `{A, C}` problem.
pub const AB_AC_STARTS: [[f64; 3]; 3] = [[0.003, 0.99, 0.007], [0.05, 0.05, 0.9], [0.01, 0.44, 0.55]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    ProbAbove { index: usize, threshold: f64 },
    ProbBelow { index: usize, threshold: f64 },
    /// Largest absolute logit gradient below `eps`.
    GradNormBelow { eps: f64 },
}

impl StopRule {
    fn validate(&self, m: usize) -> Result<()> {
        match *self {
            StopRule::ProbAbove { index, threshold } | StopRule::ProbBelow { index, threshold } => {
                if index >= m {
                    return Err(Error::invalid(format!("stop index {index} out of range for m = {m}")));
                }
                if !(threshold > 0.0 && threshold < 1.0) {
                    return Err(Error::invalid(format!("stop threshold {threshold} not in (0, 1)")));
                }
            }
            StopRule::GradNormBelow { eps } => {
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(Error::invalid("gradient-norm threshold must be positive"));
                }
            }
        }
        Ok(())
    }

    fn holds(&self, p: &[f64], grad: &[f64]) -> bool {
        match *self {
            StopRule::ProbAbove { index, threshold } => p[index] > threshold,
            StopRule::ProbBelow { index, threshold } => p[index] < threshold,
            StopRule::GradNormBelow { eps } => grad.iter().all(|g| g.abs() < eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub loss: LossKind,
    pub params: LossParams,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub stop: Vec<StopRule>,
    /// Keep every n-th point. The first and last points are always kept.
    pub record_every: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Libra,
            params: LossParams::default(),
            learning_rate: 1.0,
            max_steps: 10_000,
            stop: Vec::new(),
            record_every: 1,
        }
    }
}

impl DynamicsConfig {
    pub fn new(loss: LossKind, learning_rate: f64, max_steps: usize) -> Self {
        Self {
            loss,
            learning_rate,
            max_steps,
            ..Self::default()
        }
    }

    pub fn with_stop(mut self, rule: StopRule) -> Self {
        self.stop.push(rule);
        self
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be at least 1"));
        }
        self.params.validate_for(self.loss)?;
        self.stop.iter().try_for_each(|r| r.validate(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    /// `rule` indexes `DynamicsConfig::stop`.
    StopRule { rule: usize, step: usize },
    MaxSteps,
    Error { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn first(&self) -> &TrajectoryPoint {
        &self.points[0]
    }

    pub fn last(&self) -> &TrajectoryPoint {
        self.points.last().expect("a trajectory has at least its start point")
    }

    pub fn m(&self) -> usize {
        self.first().z.len()
    }

    /// Steps taken before termination.
    pub fn steps(&self) -> usize {
        self.last().t
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let m = self.m();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|i| format!("z_{i}")));
        header.extend((1..=m).map(|i| format!("p_{i}")));
        header.push("loss".into());
        w.write_record(&header)?;
        for pt in &self.points {
            let mut row = vec![pt.t.to_string()];
            row.extend(pt.z.iter().chain(&pt.p).map(|v| v.to_string()));
            row.push(pt.loss.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Summed loss and logit gradient over every label set.
pub fn total_gradient(
    kind: LossKind,
    z: &[f64],
    labels: &[LabelVector],
    params: &LossParams,
) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; z.len()];
    for y in labels {
        let r = losses::evaluate(kind, z, y, params)?;
        value += r.value;
        grad.iter_mut().zip(&r.grad_logits).for_each(|(g, d)| *g += d);
    }
    Ok((value, grad))
}

/// Iterate `z ← z - λ Σ_y ∇_z L(softmax(z), y)`.
pub fn simulate(z0: &[f64], labels: &[LabelVector], config: &DynamicsConfig) -> Result<Trajectory> {
    if labels.is_empty() {
        return Err(Error::invalid("at least one label set is required"));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial logits".into()));
    }
    for y in labels {
        y.check_len(z0.len())?;
    }
    config.validate(z0.len())?;

    let mut z = z0.to_vec();
    let mut points = Vec::new();
    let mut t = 0;
    let termination = loop {
        let p = match softmax(&z) {
            Ok(p) => p,
            Err(e) => break Termination::Error { step: t, message: e.to_string() },
        };
        let (loss, grad) = match total_gradient(config.loss, &z, labels, &config.params) {
            Ok(r) => r,
            Err(e) => break Termination::Error { step: t, message: e.to_string() },
        };
        let stop = config.stop.iter().position(|r| r.holds(&p, &grad));
        let done = stop.is_some() || t == config.max_steps;
        if done || t % config.record_every == 0 {
            points.push(TrajectoryPoint { t, z: z.clone(), p, loss });
        }
        if let Some(rule) = stop {
            break Termination::StopRule { rule, step: t };
        }
        if t == config.max_steps {
            break Termination::MaxSteps;
        }
        z.iter_mut().zip(&grad).for_each(|(z, g)| *z -= config.learning_rate * g);
        t += 1;
    };
    if points.is_empty() {
        // The start point itself failed to evaluate.
        return Err(match termination {
            Termination::Error { message, .. } => Error::Domain(message),
            _ => unreachable!("only an error can end the loop before recording"),
        });
    }
    Ok(Trajectory { points, termination })
}

/// Logits whose softmax is `p` (`z = ln p`).
pub fn logits_from_probs(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("probabilities must be strictly positive".into()));
    }
    Ok(p.iter().map(|v| v.ln()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    /// Allowed outputs sharing the maximal initial probability.
    pub winners: Vec<usize>,
    /// Final distribution of the trajectory.
    pub limit: Vec<f64>,
    pub converged: bool,
}

/// Compare the end of `traj` with the uniform distribution over the
/// allowed outputs that were maximal at `t = 0`.
pub fn detect_winner_take_all(traj: &Trajectory, y: &LabelVector, tol: f64) -> LimitReport {
    let p0 = &traj.first().p;
    let best = y.allowed().map(|i| p0[i]).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = y.allowed().filter(|&i| best - p0[i] <= TIE_TOL).collect();
    let limit = traj.last().p.clone();
    let share = 1.0 / winners.len() as f64;
    let converged = limit.iter().enumerate().all(|(i, &v)| {
        let target = if winners.contains(&i) { share } else { 0.0 };
        (v - target).abs() <= tol
    });
    LimitReport { winners, limit, converged }
}

/// Index of the first recorded point satisfying `pred`.
pub fn step_count_to(traj: &Trajectory, pred: impl Fn(&TrajectoryPoint) -> bool) -> Option<usize> {
    traj.points.iter().find(|pt| pred(pt)).map(|pt| pt.t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub p: Vec<f64>,
    /// Logit velocity `-∇_z L`.
    pub dz: Vec<f64>,
    /// Induced probability velocity `J_softmax · dz`.
    pub dp: Vec<f64>,
}

impl FieldSample {
    pub fn magnitude(&self) -> f64 {
        self.dp.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradient-flow direction at each of the given interior points.
pub fn vector_field_at(
    kind: LossKind,
    labels: &[LabelVector],
    params: &LossParams,
    points: &[Vec<f64>],
) -> Result<Vec<FieldSample>> {
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let z = logits_from_probs(p)?;
        let (_, grad) = total_gradient(kind, &z, labels, params)?;
        let dz: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mean: f64 = p.iter().zip(&dz).map(|(p, d)| p * d).sum();
        let dp = p.iter().zip(&dz).map(|(p, d)| p * (d - mean)).collect();
        out.push(FieldSample { p: p.clone(), dz, dp });
    }
    Ok(out)
}

/// Barycentric lattice `(i, j, n - i - j) / n` on the 2-simplex, minus
/// points within [`BOUNDARY_MARGIN`] of an edge.
pub fn simplex_grid(resolution: usize) -> Result<Vec<Vec<f64>>> {
    if resolution < 3 {
        return Err(Error::invalid("grid resolution must be at least 3"));
    }
    let n = resolution as f64;
    let mut pts = Vec::new();
    for i in 0..=resolution {
        for j in 0..=resolution - i {
            let p = vec![i as f64 / n, j as f64 / n, (resolution - i - j) as f64 / n];
            if p.iter().all(|&v| v >= BOUNDARY_MARGIN) {
                pts.push(p);
            }
        }
    }
    Ok(pts)
}

/// Ternary vector field for `m = 3`.
pub fn vector_field(
    kind: LossKind,
    labels: &[LabelVector],
    params: &LossParams,
    resolution: usize,
) -> Result<Vec<FieldSample>> {
    if labels.iter().any(|y| y.m() != 3) {
        return Err(Error::invalid("the ternary field needs m = 3; use vector_field_at otherwise"));
    }
    vector_field_at(kind, labels, params, &simplex_grid(resolution)?)
}

pub fn write_field_csv<W: Write>(field: &[FieldSample], out: W) -> Result<()> {
    let Some(first) = field.first() else {
        return Ok(());
    };
    let m = first.p.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=m).map(|i| format!("p_{i}")).collect();
    header.extend((1..=m).map(|i| format!("dz_{i}")));
    header.extend((1..=m).map(|i| format!("dp_{i}")));
    header.push("magnitude".into());
    w.write_record(&header)?;
    for s in field {
        let mut row: Vec<String> = s.p.iter().chain(&s.dz).chain(&s.dp).map(|v| v.to_string()).collect();
        row.push(s.magnitude().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn y(bits: &[u8]) -> LabelVector {
        LabelVector::from_binary(bits).unwrap()
    }

    #[test]
    fn libra_keeps_allowed_ratio() {
        let cfg = DynamicsConfig::new(LossKind::Libra, 1.0, 50);
        let traj = simulate(&[0.0, 1.0, 2.0], &[y(&[1, 1, 0])], &cfg).unwrap();
        let r0 = (-1.0f64).exp();
        for pt in &traj.points {
            assert!((pt.p[0] / pt.p[1] / r0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_ratio_strictly_increases() {
        let cfg = DynamicsConfig::new(LossKind::Nll, 1.0, 200);
        let traj = simulate(&[0.5, 0.0, 1.0], &[y(&[1, 1, 0])], &cfg).unwrap();
        let ratios: Vec<f64> = traj.points.iter().map(|pt| pt.p[0] / pt.p[1]).collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sag_binary_moves_logits_linearly() {
        let cfg = DynamicsConfig::new(LossKind::Sag, 0.3, 20);
        let traj = simulate(&[0.0, 0.0], &[y(&[1, 0])], &cfg).unwrap();
        for pt in &traj.points {
            let t = pt.t as f64;
            assert!((pt.z[0] - 0.3 * t).abs() < 1e-12);
            assert!((pt.z[1] + 0.3 * t).abs() < 1e-12);
        }
        assert!(traj.points.windows(2).all(|w| w[1].p[0] > w[0].p[0]));
    }

    #[test]
    fn stop_rules_and_step_counts() {
        let cfg = DynamicsConfig::new(LossKind::Sag, 1.0, 1000).with_stop(StopRule::ProbAbove {
            index: 0,
            threshold: 0.99,
        });
        let traj = simulate(&[0.0, 0.0], &[y(&[1, 0])], &cfg).unwrap();
        assert!(matches!(traj.termination, Termination::StopRule { rule: 0, .. }));
        assert!(traj.last().p[0] > 0.99);
        assert!(traj.points[traj.points.len() - 2].p[0] <= 0.99);
        assert_eq!(step_count_to(&traj, |_| true), Some(0));
        assert_eq!(step_count_to(&traj, |pt| pt.p[0] > 2.0), None);
    }

    #[test]
    fn length_bound_and_record_every() {
        let mut cfg = DynamicsConfig::new(LossKind::Nll, 0.1, 25);
        let traj = simulate(&[0.0, 0.2, 0.1], &[y(&[1, 1, 0])], &cfg).unwrap();
        assert_eq!(traj.points.len(), 26);
        assert_eq!(traj.termination, Termination::MaxSteps);
        cfg.record_every = 10;
        let thin = simulate(&[0.0, 0.2, 0.1], &[y(&[1, 1, 0])], &cfg).unwrap();
        let ts: Vec<usize> = thin.points.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![0, 10, 20, 25]);
        assert_eq!(thin.last(), traj.last());
    }

    #[test]
    fn invalid_configs_rejected() {
        let labels = [y(&[1, 0, 0])];
        assert!(simulate(&[0.0; 3], &labels, &DynamicsConfig::new(LossKind::Nll, 0.0, 5)).is_err());
        assert!(simulate(&[0.0; 3], &labels, &DynamicsConfig::new(LossKind::Nll, 1.0, 0)).is_err());
        assert!(simulate(&[0.0; 3], &[], &DynamicsConfig::new(LossKind::Nll, 1.0, 5)).is_err());
        assert!(simulate(&[0.0, f64::NAN, 0.0], &labels, &DynamicsConfig::new(LossKind::Nll, 1.0, 5)).is_err());
        let bad = DynamicsConfig::new(LossKind::Nll, 1.0, 5).with_stop(StopRule::ProbAbove { index: 0, threshold: 1.0 });
        assert!(simulate(&[0.0; 3], &labels, &bad).is_err());
    }

    #[test]
    fn winner_take_all_single_and_tied() {
        let labels = [y(&[1, 1, 1, 0, 0])];
        let z0 = logits_from_probs(&[0.4, 0.15, 0.1, 0.2, 0.15]).unwrap();
        let traj = simulate(&z0, &labels, &DynamicsConfig::new(LossKind::Nll, 1.0, 20_000)).unwrap();
        // Losers decay polynomially once the disallowed mass is gone.
        let rep = detect_winner_take_all(&traj, &labels[0], 1e-2);
        assert_eq!(rep.winners, vec![0]);
        assert!(rep.converged, "{:?}", rep.limit);

        let z0 = [1.0, 1.0, -1.0, 0.1, -0.2];
        let traj = simulate(&z0, &labels, &DynamicsConfig::new(LossKind::Nll, 1.0, 20_000)).unwrap();
        let rep = detect_winner_take_all(&traj, &labels[0], 1e-3);
        assert_eq!(rep.winners, vec![0, 1]);
        assert!(rep.converged, "{:?}", rep.limit);
    }

    #[test]
    fn libra_is_not_winner_take_all() {
        let labels = [y(&[1, 1, 1, 0, 0])];
        let z0 = logits_from_probs(&[0.25, 0.2, 0.15, 0.2, 0.2]).unwrap();
        let traj = simulate(&z0, &labels, &DynamicsConfig::new(LossKind::Libra, 1.0, 200)).unwrap();
        assert!(!detect_winner_take_all(&traj, &labels[0], 1e-3).converged);
        let (a, b) = (traj.first(), traj.last());
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(((b.p[i] / b.p[j]) / (a.p[i] / a.p[j]) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn libra_faster_than_nll_from_ab_starts() {
        let labels = [y(&[1, 1, 0])];
        for start in AB_STARTS {
            let z0 = logits_from_probs(&start).unwrap();
            let stop = StopRule::ProbBelow { index: 2, threshold: 1e-4 };
            let run = |kind| {
                let cfg = DynamicsConfig::new(kind, 1.0, 100_000).with_stop(stop);
                simulate(&z0, &labels, &cfg).unwrap().steps()
            };
            let (libra, nll) = (run(LossKind::Libra), run(LossKind::Nll));
            assert!(nll >= 10 * libra, "libra {libra} nll {nll}");
        }
    }

    #[test]
    fn libra_field_has_no_ratio_component() {
        let labels = [y(&[1, 1, 0])];
        for s in vector_field(LossKind::Libra, &labels, &LossParams::default(), 20).unwrap() {
            // d/dt log(p1/p2) = dp1/p1 - dp2/p2
            assert!((s.dp[0] / s.p[0] - s.dp[1] / s.p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_field_preserves_diagonal() {
        let labels = [y(&[1, 1, 0])];
        let field = vector_field(LossKind::Nll, &labels, &LossParams::default(), 40).unwrap();
        let diag: Vec<_> = field.iter().filter(|s| s.p[0] == s.p[1]).collect();
        assert!(!diag.is_empty());
        for s in diag {
            assert!((s.dp[0] - s.dp[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn sag_field_constant_in_logits() {
        let labels = [y(&[1, 0, 0])];
        for s in vector_field(LossKind::Sag, &labels, &LossParams::default(), 15).unwrap() {
            assert_eq!(s.dz, vec![1.0, -0.5, -0.5]);
        }
    }

    #[test]
    fn grid_skips_boundary() {
        let g = simplex_grid(10).unwrap();
        assert_eq!(g.len(), 36);
        assert!(g.iter().all(|p| p.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn csv_layout() {
        let cfg = DynamicsConfig::new(LossKind::Sag, 1.0, 2);
        let traj = simulate(&[0.0, 0.0], &[y(&[1, 0])], &cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,z_1,z_2,p_1,p_2,loss");
        assert_eq!(lines.len(), 4);
        let back: Trajectory = serde_json::from_str(&traj.to_json().unwrap()).unwrap();
        assert_eq!(back, traj);
    }
}
