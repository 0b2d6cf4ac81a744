//! Projected gradient descent with backtracking and equal arc-length
//! re-discretization, plus the staged-`eps` continuation driver.
//!
//! The loop is generic: a [`DescentPlan`] knows how to flatten, project and
//! re-discretize itself, and a [`DescentProblem`] supplies the objective and
//! its gradient in the same flattened layout.

use serde::{Deserialize, Serialize};

use crate::error::{RamifyError, Result};
use crate::geometry::Point;
use crate::kernels::KernelSpec;
use crate::mollified::{path_energy, path_energy_grad, Functional};
use crate::objective::{
    branch_coords, evaluate, gradient_unchecked, set_branch_coords, ObjectiveConfig, ObjectiveValue,
};
use crate::plan::{Branch, BranchPlan, PathPlan, Segmented};

/// Number of consecutive small decreases that end a stage.
pub const STALL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentConfig {
    /// Initial trial step; `None` means a tenth of the plan diameter.
    pub tau0: Option<f64>,
    pub j_max: usize,
    pub backtrack_factor: f64,
    pub backtrack_limit: usize,
    pub rediscretize_every: usize,
    pub stop_tol: f64,
    pub eps_schedule: Vec<f64>,
    /// Initial leaf density for branch fans.
    pub m_init: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            tau0: None,
            j_max: 500,
            backtrack_factor: 0.5,
            backtrack_limit: 30,
            rediscretize_every: 5,
            stop_tol: 1e-7,
            eps_schedule: vec![0.1],
            m_init: 0.1,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tau0 {
            if !(t > 0.0 && t.is_finite()) {
                return Err(RamifyError::Config("tau0 must be positive".into()));
            }
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(RamifyError::Config("backtrack_factor must lie in (0, 1)".into()));
        }
        if self.backtrack_limit == 0 || self.rediscretize_every == 0 {
            return Err(RamifyError::Config("backtrack_limit and rediscretize_every must be positive".into()));
        }
        if !(self.stop_tol >= 0.0 && self.stop_tol.is_finite()) {
            return Err(RamifyError::Config("stop_tol must be nonnegative".into()));
        }
        if !(self.m_init >= 0.0 && self.m_init.is_finite()) {
            return Err(RamifyError::Config("m_init must be nonnegative".into()));
        }
        if self.eps_schedule.is_empty() {
            return Err(RamifyError::Config("eps_schedule must not be empty".into()));
        }
        if self.eps_schedule.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(RamifyError::Config("eps_schedule entries must be positive".into()));
        }
        if self.eps_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(RamifyError::Config("eps_schedule must be strictly decreasing".into()));
        }
        Ok(())
    }
}

/// A plan the descent loop can move.
pub trait DescentPlan: Clone {
    /// Flattened coordinates, in the layout of the problem's gradient.
    fn coords(&self) -> Vec<f64>;
    fn set_coords(&mut self, coords: &[f64]);
    /// Restores the constraints in place.
    fn project(&mut self);
    /// Moves knots to equal arc-length spacing.
    fn rediscretize(&self) -> Self;
    fn diameter(&self) -> f64;
    fn is_feasible(&self) -> bool;
}

/// Objective and gradient evaluators for one plan type.
pub trait DescentProblem {
    type Plan: DescentPlan;
    fn eps(&self) -> f64;
    fn evaluate(&self, plan: &Self::Plan) -> Result<ObjectiveValue>;
    fn gradient(&self, plan: &Self::Plan) -> Result<Vec<f64>>;
}

/// Cumulative arc length at every vertex.
fn arc_lengths(v: &[Point]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(v.len());
    cum.push(0.0);
    for w in v.windows(2) {
        cum.push(cum.last().unwrap() + w[0].dist(w[1]));
    }
    cum
}

fn point_at_arc(v: &[Point], cum: &[f64], s: f64) -> Point {
    // First interval whose end is at or beyond s.
    let q = cum[1..].partition_point(|&c| c < s).min(v.len() - 2);
    let len = cum[q + 1] - cum[q];
    if len == 0.0 {
        return v[q];
    }
    v[q].lerp(v[q + 1], ((s - cum[q]) / len).clamp(0.0, 1.0))
}

/// Resamples a polyline with `k` equal arc-length intervals; both endpoints
/// are copied exactly. A zero-length polyline is returned unchanged when
/// `k` matches its interval count.
pub fn resample_polyline(v: &[Point], k: usize) -> Vec<Point> {
    assert!(v.len() >= 2 && k >= 1);
    let cum = arc_lengths(v);
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return if v.len() == k + 1 { v.to_vec() } else { vec![v[0]; k + 1] };
    }
    let mut out = Vec::with_capacity(k + 1);
    out.push(v[0]);
    for j in 1..k {
        out.push(point_at_arc(v, &cum, total * j as f64 / k as f64));
    }
    out.push(*v.last().unwrap());
    out
}

fn rediscretize_branch(b: &Branch) -> Branch {
    let old = b.vertices();
    let k = b.segments();
    let cum = arc_lengths(&old);
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return b.clone();
    }
    let new = resample_polyline(&old, k);
    let knots: Vec<f64> = (0..=k).map(|j| total * j as f64 / k as f64).collect();
    let mut m = vec![0.0; k];
    let mut q = 0;
    for p in 0..k {
        let (lo, hi) = (knots[p], if p + 1 == k { total } else { knots[p + 1] });
        let mut mass = 0.0;
        while q < k && cum[q + 1] <= lo {
            q += 1;
        }
        let mut r = q;
        while r < k && cum[r] < hi {
            let overlap = cum[r + 1].min(hi) - cum[r].max(lo);
            if overlap > 0.0 {
                mass += b.m[r] * overlap;
            }
            r += 1;
        }
        let len = new[p].dist(new[p + 1]);
        m[p] = if len > 0.0 { mass / len } else { 0.0 };
    }
    Branch { x: new.iter().map(|v| v.x).collect(), y: new.iter().map(|v| v.y).collect(), m }
}

impl DescentPlan for BranchPlan {
    fn coords(&self) -> Vec<f64> {
        branch_coords(self)
    }

    fn set_coords(&mut self, coords: &[f64]) {
        set_branch_coords(self, coords);
    }

    fn project(&mut self) {
        for b in &mut self.branches {
            b.x[0] = 0.0;
            b.y[0] = 0.0;
            b.y.iter_mut().chain(b.m.iter_mut()).for_each(|v| *v = v.max(0.0));
        }
    }

    fn rediscretize(&self) -> Self {
        BranchPlan { branches: self.branches.iter().map(rediscretize_branch).collect() }
    }

    fn diameter(&self) -> f64 {
        BranchPlan::diameter(self)
    }

    fn is_feasible(&self) -> bool {
        self.validate().is_ok()
    }
}

/// Path plans flatten as `(x, y)` pairs, path by path, vertex by vertex.
impl DescentPlan for PathPlan {
    fn coords(&self) -> Vec<f64> {
        self.paths.iter().flat_map(|p| p.vertices.iter().flat_map(|v| [v.x, v.y])).collect()
    }

    fn set_coords(&mut self, coords: &[f64]) {
        let mut it = coords.chunks_exact(2);
        for p in &mut self.paths {
            for v in &mut p.vertices {
                let c = it.next().expect("coordinate vector too short");
                *v = Point::new(c[0], c[1]);
            }
        }
    }

    fn project(&mut self) {
        for p in &mut self.paths {
            p.vertices[0] = Point::ORIGIN;
            if p.terminal_fixed {
                *p.vertices.last_mut().unwrap() = p.target;
            }
        }
    }

    fn rediscretize(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.paths {
            p.vertices = resample_polyline(&p.vertices, p.segments());
        }
        out
    }

    fn diameter(&self) -> f64 {
        PathPlan::diameter(self)
    }

    fn is_feasible(&self) -> bool {
        self.validate().is_ok()
    }
}

/// Tree-shape objective on branch plans at one `eps`.
#[derive(Debug, Clone, Copy)]
pub struct TreeProblem {
    pub cfg: ObjectiveConfig,
}

impl DescentProblem for TreeProblem {
    type Plan = BranchPlan;

    fn eps(&self) -> f64 {
        self.cfg.eps
    }

    fn evaluate(&self, plan: &BranchPlan) -> Result<ObjectiveValue> {
        evaluate(plan, &self.cfg)
    }

    /// The analytic gradient, except that on intervals carrying no flux the
    /// density entry is clamped to be nonnegative when `alpha < 1`. There
    /// the one-sided slope of the interval's own cost is infinite, so the
    /// descent direction must not push mass into it.
    fn gradient(&self, plan: &BranchPlan) -> Result<Vec<f64>> {
        let table = plan.segment_table();
        let mut g = gradient_unchecked(plan, &table, &self.cfg)?;
        if self.cfg.alpha < 1.0 {
            for s in &table.segments {
                if s.flux * s.length == 0.0 {
                    let i = g.m_index(s.owner, s.interval);
                    g.data[i] = g.data[i].max(0.0);
                }
            }
        }
        Ok(g.data)
    }
}

/// Mollified irrigation energy on path plans at one `eps`. Roots and pinned
/// terminals are masked out of the gradient.
#[derive(Debug, Clone, Copy)]
pub struct PathProblem {
    pub functional: Functional,
    pub alpha: f64,
    pub eps: f64,
    pub kernel: KernelSpec,
}

impl DescentProblem for PathProblem {
    type Plan = PathPlan;

    fn eps(&self) -> f64 {
        self.eps
    }

    fn evaluate(&self, plan: &PathPlan) -> Result<ObjectiveValue> {
        let e = path_energy(plan, self.functional, self.alpha, self.eps, self.kernel)?.value;
        if !e.is_finite() {
            return Err(RamifyError::NonFinite(format!("energy evaluated to {e}")));
        }
        Ok(ObjectiveValue { j: e, i: e, p: 0.0, h: 0.0 })
    }

    fn gradient(&self, plan: &PathPlan) -> Result<Vec<f64>> {
        let (_, grad) = path_energy_grad(plan, self.functional, self.alpha, self.eps, self.kernel)?;
        let mut out = Vec::with_capacity(2 * plan.segment_count() + 2 * plan.paths.len());
        for (path, g) in plan.paths.iter().zip(grad) {
            let last = g.len() - 1;
            for (p, v) in g.into_iter().enumerate() {
                let pinned = p == 0 || (p == last && path.terminal_fixed);
                if pinned {
                    out.extend([0.0, 0.0]);
                } else {
                    out.extend([v.x, v.y]);
                }
            }
        }
        Ok(out)
    }
}

/// Accepted line-search step.
#[derive(Debug, Clone)]
pub struct Step<P> {
    pub plan: P,
    pub tau: f64,
    pub value: ObjectiveValue,
    pub backtracks: usize,
}

/// Tries `tau, tau * factor, ...` and returns the first projected candidate
/// whose objective is strictly below `current`. Candidates whose evaluation
/// fails count as rejected trials. `None` means every trial failed.
pub fn backtracking_step<Pr: DescentProblem>(
    plan: &Pr::Plan,
    grad: &[f64],
    tau: f64,
    cfg: &DescentConfig,
    problem: &Pr,
    current: f64,
) -> Option<Step<Pr::Plan>> {
    let base = plan.coords();
    let mut trial_tau = tau;
    let mut candidate = plan.clone();
    let mut coords = vec![0.0; base.len()];
    for t in 0..cfg.backtrack_limit {
        for ((c, b), g) in coords.iter_mut().zip(&base).zip(grad) {
            *c = b - trial_tau * g;
        }
        candidate.set_coords(&coords);
        candidate.project();
        if let Ok(value) = problem.evaluate(&candidate) {
            if value.j < current {
                return Some(Step { plan: candidate, tau: trial_tau, value, backtracks: t });
            }
        }
        trial_tau *= cfg.backtrack_factor;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: usize,
    pub iter: usize,
    pub eps: f64,
    /// Objective before the step.
    pub j_before: f64,
    /// Objective after the accepted step, before any re-discretization.
    pub j: f64,
    pub i: f64,
    pub p: f64,
    pub h: f64,
    pub tau: f64,
    pub gnorm: f64,
    pub backtracks: usize,
    pub rediscretized: bool,
}

pub const TRACE_HEADER: &str = "iter,eps,J,I,P,H,tau,gnorm,backtracks";

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter, self.eps, self.j, self.i, self.p, self.h, self.tau, self.gnorm, self.backtracks
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Stalled,
    LineSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub eps: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub initial: ObjectiveValue,
    pub last: ObjectiveValue,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<IterationRecord>,
    pub stages: Vec<StageSummary>,
}

impl RunTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Hooks for streaming a run to disk.
pub trait Observer<P> {
    fn on_iteration(&mut self, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }

    fn on_stage(&mut self, _stage: usize, _plan: &P, _summary: &StageSummary) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl<P> Observer<P> for NoopObserver {}

fn descent_stage<Pr: DescentProblem>(
    plan: Pr::Plan,
    problem: &Pr,
    cfg: &DescentConfig,
    stage: usize,
    trace: &mut RunTrace,
    observer: &mut dyn Observer<Pr::Plan>,
) -> Result<Pr::Plan> {
    let mut plan = plan;
    let mut value = problem.evaluate(&plan)?;
    if !value.j.is_finite() {
        return Err(RamifyError::NonFinite("objective at the initial plan".into()));
    }
    let initial = value;
    let tau0 = cfg.tau0.unwrap_or(0.1 * plan.diameter());
    if !(tau0 > 0.0 && tau0.is_finite()) {
        return Err(RamifyError::Config("initial step is zero; set tau0 explicitly".into()));
    }
    let mut stop = StopReason::MaxIterations;
    let mut stall = 0;
    let mut iterations = 0;
    for iter in 0..cfg.j_max {
        let grad = problem.gradient(&plan)?;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let Some(step) = backtracking_step(&plan, &grad, tau0, cfg, problem, value.j) else {
            stop = StopReason::LineSearch;
            break;
        };
        let j_before = value.j;
        plan = step.plan;
        value = step.value;
        iterations += 1;
        let rel = (j_before - value.j) / j_before.abs().max(f64::MIN_POSITIVE);
        stall = if rel < cfg.stop_tol { stall + 1 } else { 0 };
        let mut rediscretized = false;
        if (iter + 1) % cfg.rediscretize_every == 0 {
            let moved = plan.rediscretize();
            // A re-discretized plan that cannot be evaluated is dropped.
            if let Ok(v) = problem.evaluate(&moved) {
                plan = moved;
                value = v;
                rediscretized = true;
            }
        }
        let record = IterationRecord {
            stage,
            iter,
            eps: problem.eps(),
            j_before,
            j: step.value.j,
            i: step.value.i,
            p: step.value.p,
            h: step.value.h,
            tau: step.tau,
            gnorm,
            backtracks: step.backtracks,
            rediscretized,
        };
        observer.on_iteration(&record)?;
        trace.records.push(record);
        if stall >= STALL_WINDOW {
            stop = StopReason::Stalled;
            break;
        }
    }
    let summary = StageSummary { eps: problem.eps(), iterations, stop, initial, last: value };
    observer.on_stage(stage, &plan, &summary)?;
    trace.stages.push(summary);
    Ok(plan)
}

/// Runs the descent loop at the problem's fixed `eps`.
pub fn run_descent<Pr: DescentProblem>(
    plan: &Pr::Plan,
    problem: &Pr,
    cfg: &DescentConfig,
) -> Result<(Pr::Plan, RunTrace)> {
    run_descent_observed(plan, problem, cfg, &mut NoopObserver)
}

pub fn run_descent_observed<Pr: DescentProblem>(
    plan: &Pr::Plan,
    problem: &Pr,
    cfg: &DescentConfig,
    observer: &mut dyn Observer<Pr::Plan>,
) -> Result<(Pr::Plan, RunTrace)> {
    cfg.validate()?;
    if !plan.is_feasible() {
        return Err(RamifyError::InvalidPlan("initial plan violates the constraints".into()));
    }
    let mut trace = RunTrace::default();
    let out = descent_stage(plan.clone(), problem, cfg, 0, &mut trace, observer)?;
    Ok((out, trace))
}

/// Output of [`eps_continuation`].
#[derive(Debug, Clone)]
pub struct Continuation<P> {
    pub plan: P,
    pub stages: Vec<P>,
    pub trace: RunTrace,
}

/// Runs one descent per entry of `cfg.eps_schedule`, warm-starting each
/// stage from the previous one. `make_problem` builds the evaluator for a
/// given `eps`.
pub fn eps_continuation<Pr, F>(plan: &Pr::Plan, make_problem: F, cfg: &DescentConfig) -> Result<Continuation<Pr::Plan>>
where
    Pr: DescentProblem,
    F: Fn(f64) -> Pr,
{
    eps_continuation_observed(plan, make_problem, cfg, &mut NoopObserver)
}

pub fn eps_continuation_observed<Pr, F>(
    plan: &Pr::Plan,
    make_problem: F,
    cfg: &DescentConfig,
    observer: &mut dyn Observer<Pr::Plan>,
) -> Result<Continuation<Pr::Plan>>
where
    Pr: DescentProblem,
    F: Fn(f64) -> Pr,
{
    cfg.validate()?;
    if !plan.is_feasible() {
        return Err(RamifyError::InvalidPlan("initial plan violates the constraints".into()));
    }
    let mut trace = RunTrace::default();
    let mut current = plan.clone();
    let mut stages = Vec::with_capacity(cfg.eps_schedule.len());
    for (s, &eps) in cfg.eps_schedule.iter().enumerate() {
        let problem = make_problem(eps);
        current = descent_stage(current, &problem, cfg, s, &mut trace, observer)?;
        stages.push(current.clone());
    }
    Ok(Continuation { plan: current, stages, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_fan_branches, build_star_plan, half_circle_targets, Path};

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    /// One free coordinate with objective `w^2`.
    #[derive(Debug, Clone, PartialEq)]
    struct Scalar(f64);

    impl DescentPlan for Scalar {
        fn coords(&self) -> Vec<f64> {
            vec![self.0]
        }
        fn set_coords(&mut self, c: &[f64]) {
            self.0 = c[0];
        }
        fn project(&mut self) {}
        fn rediscretize(&self) -> Self {
            self.clone()
        }
        fn diameter(&self) -> f64 {
            1.0
        }
        fn is_feasible(&self) -> bool {
            true
        }
    }

    struct Square;

    impl DescentProblem for Square {
        type Plan = Scalar;
        fn eps(&self) -> f64 {
            1.0
        }
        fn evaluate(&self, s: &Scalar) -> Result<ObjectiveValue> {
            let j = s.0 * s.0;
            Ok(ObjectiveValue { j, i: j, p: 0.0, h: 0.0 })
        }
        fn gradient(&self, s: &Scalar) -> Result<Vec<f64>> {
            Ok(vec![2.0 * s.0])
        }
    }

    #[test]
    fn surrogate_step_matches_hand_computation() {
        let cfg = DescentConfig::default();
        let step = backtracking_step(&Scalar(1.0), &[2.0], 0.4, &cfg, &Square, 1.0).unwrap();
        assert!((step.plan.0 - 0.2).abs() < 1e-15);
        assert!((step.value.j - 0.04).abs() < 1e-15);
        assert_eq!(step.backtracks, 0);
        assert_eq!(step.tau, 0.4);
    }

    #[test]
    fn zero_gradient_is_rejected() {
        let cfg = DescentConfig::default();
        assert!(backtracking_step(&Scalar(1.0), &[0.0], 0.4, &cfg, &Square, 1.0).is_none());
    }

    #[test]
    fn j_max_zero_returns_initial_plan() {
        let cfg = DescentConfig { j_max: 0, ..Default::default() };
        let (out, trace) = run_descent(&Scalar(0.7), &Square, &cfg).unwrap();
        assert_eq!(out, Scalar(0.7));
        assert!(trace.records.is_empty());
    }

    #[test]
    fn surrogate_run_is_monotone_and_stops() {
        let cfg = DescentConfig { tau0: Some(0.3), ..Default::default() };
        let (out, trace) = run_descent(&Scalar(1.0), &Square, &cfg).unwrap();
        assert!(out.0.abs() < 1e-6);
        for r in &trace.records {
            assert!(r.j < r.j_before);
        }
        assert_ne!(trace.stages[0].stop, StopReason::MaxIterations);
    }

    #[test]
    fn project_branch_plan() {
        let mut plan = build_fan_branches(2, 1.0, 1.0, 4, 0.3).unwrap();
        let before = plan.clone();
        plan.project();
        assert_eq!(plan, before);
        plan.branches[0].y[3] = -0.2;
        plan.branches[1].m[1] = -1.0;
        plan.branches[1].x[0] = 0.1;
        plan.project();
        assert_eq!(plan.branches[0].y[3], 0.0);
        assert_eq!(plan.branches[1].m[1], 0.0);
        assert_eq!(plan.branches[1].x[0], 0.0);
        assert_eq!(plan.branches[0].x, before.branches[0].x);
    }

    #[test]
    fn project_path_plan_restores_terminal() {
        let targets = half_circle_targets(3, 1.0, 1.0).unwrap();
        let plan = build_star_plan(&targets, 4).unwrap();
        let mut moved = plan.clone();
        let c: Vec<f64> = moved.coords().iter().map(|v| v + 0.01).collect();
        moved.set_coords(&c);
        moved.project();
        for (a, b) in moved.paths.iter().zip(&plan.paths) {
            assert_eq!(a.vertices[0], Point::ORIGIN);
            assert_eq!(a.vertices.last(), b.vertices.last());
        }
    }

    #[test]
    fn resample_l_shape() {
        let l = [p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0)];
        assert_eq!(resample_polyline(&l, 2), l.to_vec());
        let r = resample_polyline(&l, 4);
        let expected = [p(0.0, 0.0), p(0.5, 0.0), p(1.0, 0.0), p(1.0, 0.5), p(1.0, 1.0)];
        for (a, b) in r.iter().zip(expected) {
            assert!(a.dist(b) < 1e-15);
        }
    }

    #[test]
    fn equally_spaced_branch_is_fixed_point() {
        let plan = build_fan_branches(3, 1.2, 1.3, 7, 0.4).unwrap();
        let out = plan.rediscretize();
        for (a, b) in plan.coords().iter().zip(out.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rediscretize_conserves_mass_and_endpoints() {
        let b = Branch {
            x: vec![0.0, 0.05, 0.5, 0.55, 1.2],
            y: vec![0.0, 0.4, 0.45, 0.9, 1.0],
            m: vec![0.3, 1.7, 0.0, 0.9],
        };
        let plan = BranchPlan::new(vec![b.clone()]).unwrap();
        let out = plan.rediscretize();
        let nb = &out.branches[0];
        assert!((nb.leaf_mass() - b.leaf_mass()).abs() < 1e-9 * b.leaf_mass());
        assert_eq!((nb.x[0], nb.y[0]), (0.0, 0.0));
        assert_eq!((nb.x[4], nb.y[4]), (1.2, 1.0));
        let lens: Vec<f64> = out.segment_table().segments.iter().map(|s| s.length).collect();
        // Chords of an equal arc-length split never exceed the arc step.
        let arc = crate::geometry::polyline_length(&b.vertices()) / 4.0;
        assert!(lens.iter().all(|&l| l <= arc + 1e-12));
        assert!(out.is_feasible());
    }

    #[test]
    fn zero_length_branch_unchanged() {
        let b = Branch { x: vec![0.0; 3], y: vec![0.0; 3], m: vec![0.0, 0.0] };
        let plan = BranchPlan::new(vec![b]).unwrap();
        assert_eq!(plan.rediscretize(), plan);
    }

    #[test]
    fn schedule_of_one_matches_run_descent() {
        let plan = build_fan_branches(3, 1.0, 1.0, 4, 0.3).unwrap();
        let obj = ObjectiveConfig { alpha: 0.5, eps: 0.3, c1: 0.4, c2: 1.0, ..Default::default() };
        let cfg = DescentConfig { j_max: 15, eps_schedule: vec![0.3], ..Default::default() };
        let (a, ta) = run_descent(&plan, &TreeProblem { cfg: obj }, &cfg).unwrap();
        let c = eps_continuation(&plan, |eps| TreeProblem { cfg: obj.with_eps(eps) }, &cfg).unwrap();
        assert_eq!(a, c.plan);
        assert_eq!(ta, c.trace);
    }

    #[test]
    fn tree_descent_preserves_feasibility_and_decreases() {
        let plan = build_fan_branches(4, 1.2, 1.0, 5, 0.2).unwrap();
        let obj = ObjectiveConfig { alpha: 0.4, eps: 0.3, c1: 0.4, c2: 1.4, ..Default::default() };
        let cfg =
            DescentConfig { j_max: 40, rediscretize_every: 3, eps_schedule: vec![0.3, 0.1], ..Default::default() };
        let c = eps_continuation(&plan, |eps| TreeProblem { cfg: obj.with_eps(eps) }, &cfg).unwrap();
        assert!(!c.trace.records.is_empty());
        for r in &c.trace.records {
            assert!(r.j < r.j_before);
        }
        for s in &c.stages {
            assert!(s.is_feasible());
        }
        let first = c.trace.stages[0].initial.j;
        assert!(c.trace.stages[0].last.j < first);
    }

    #[test]
    fn path_gradient_masks_pinned_vertices() {
        let plan = PathPlan::new(vec![
            Path::new(vec![p(0.0, 0.0), p(0.3, 0.5), p(0.7, 0.7)], 0.5, true),
            Path::new(vec![p(0.0, 0.0), p(-0.3, 0.5), p(-0.7, 0.7)], 0.5, false),
        ])
        .unwrap();
        let prob = PathProblem { functional: Functional::Avg, alpha: 0.5, eps: 0.3, kernel: KernelSpec::Triangular };
        let g = prob.gradient(&plan).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(&g[0..2], &[0.0, 0.0]);
        assert_eq!(&g[4..6], &[0.0, 0.0]);
        assert_eq!(&g[6..8], &[0.0, 0.0]);
        assert!(g[10] != 0.0 || g[11] != 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(DescentConfig::default().validate().is_ok());
        let bad = DescentConfig { eps_schedule: vec![0.1, 0.2], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DescentConfig { tau0: Some(0.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DescentConfig { backtrack_factor: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trace_csv_format() {
        let cfg = DescentConfig { tau0: Some(0.3), j_max: 2, ..Default::default() };
        let (_, trace) = run_descent(&Scalar(1.0), &Square, &cfg).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        assert_eq!(lines.clone().count(), 2);
        assert!(lines.next().unwrap().starts_with("0,1,"));
    }
}
