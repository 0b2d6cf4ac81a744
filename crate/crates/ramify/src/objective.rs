//! Tree-shape objective `J = I + c1 P - c2 H` on branch plans.
//!
//! * `I`: mollified irrigation cost of the leaf fluxes;
//! * `P`: pairwise crowding penalty between leaf masses;
//! * `H`: total leaf mass.
//!
//! Gradients are taken with respect to every knot coordinate and every
//! density, in the layout of [`GradientVector`].

use serde::{Deserialize, Serialize};

use crate::error::{RamifyError, Result};
use crate::geometry::Point;
use crate::mollified::{boundary_gap, irrigation_cost_branches_grad, irrigation_cost_floored};
use crate::plan::{BranchPlan, SegmentTable, Segmented};

/// Distance from the bump-support boundary below which the analytic
/// gradient is reported as undefined.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKernel {
    /// `exp(-beta |x - y|^2)`
    Gaussian,
    /// `|x - y|^(-gamma)`
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub kernel: PenaltyKernel,
    pub beta: f64,
    pub gamma: f64,
    /// Weight leaf densities by segment length (`m L`) rather than by the
    /// parameter step (`m / K`).
    pub arc_length: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { kernel: PenaltyKernel::Gaussian, beta: 1.0, gamma: 0.5, arc_length: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub penalty: PenaltyConfig,
    /// Floor on the mollified flux; zero turns degenerate midpoints into errors.
    pub f_min: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { alpha: 0.5, eps: 0.25, c1: 0.5, c2: 1.5, penalty: PenaltyConfig::default(), f_min: 1e-12 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.eps, self.c1, self.c2, self.penalty.beta, self.penalty.gamma, self.f_min]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(RamifyError::Config("objective fields must be finite".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(RamifyError::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.eps > 0.0) {
            return Err(RamifyError::Config("eps must be positive".into()));
        }
        if self.c1 < 0.0 || self.c2 < 0.0 || self.f_min < 0.0 {
            return Err(RamifyError::Config("c1, c2 and f_min must be nonnegative".into()));
        }
        match self.penalty.kernel {
            PenaltyKernel::Gaussian if !(self.penalty.beta > 0.0) => {
                Err(RamifyError::Config("penalty.beta must be positive".into()))
            }
            PenaltyKernel::Power if !(self.penalty.gamma > 0.0 && self.penalty.gamma < 1.0) => {
                Err(RamifyError::Config("penalty.gamma must lie in (0, 1)".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        ObjectiveConfig { eps, ..*self }
    }
}

/// Objective value with its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub j: f64,
    pub i: f64,
    pub p: f64,
    pub h: f64,
}

/// Gradient over a branch plan, branch-major; each branch holds its `x`
/// block (`K + 1`), then `y` (`K + 1`), then `m` (`K`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub data: Vec<f64>,
    offsets: Vec<usize>,
    segments: Vec<usize>,
}

impl GradientVector {
    pub fn zeros_like(plan: &BranchPlan) -> Self {
        let segments: Vec<usize> = plan.branches.iter().map(|b| b.segments()).collect();
        let mut offsets = vec![0];
        for &k in &segments {
            offsets.push(offsets.last().unwrap() + 3 * k + 2);
        }
        let len = *offsets.last().unwrap();
        GradientVector { data: vec![0.0; len], offsets, segments }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn x_index(&self, k: usize, p: usize) -> usize {
        self.offsets[k] + p
    }

    pub fn y_index(&self, k: usize, p: usize) -> usize {
        self.offsets[k] + self.segments[k] + 1 + p
    }

    pub fn m_index(&self, k: usize, p: usize) -> usize {
        self.offsets[k] + 2 * (self.segments[k] + 1) + p
    }

    pub fn dx(&self, k: usize) -> &[f64] {
        let s = self.x_index(k, 0);
        &self.data[s..s + self.segments[k] + 1]
    }

    pub fn dy(&self, k: usize) -> &[f64] {
        let s = self.y_index(k, 0);
        &self.data[s..s + self.segments[k] + 1]
    }

    pub fn dm(&self, k: usize) -> &[f64] {
        let s = self.m_index(k, 0);
        &self.data[s..s + self.segments[k]]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Whether entry `i` is a pinned root coordinate.
    pub fn is_pinned(&self, i: usize) -> bool {
        (0..self.segments.len()).any(|k| i == self.x_index(k, 0) || i == self.y_index(k, 0))
    }

    fn add_point(&mut self, k: usize, p: usize, g: Point) {
        let (ix, iy) = (self.x_index(k, p), self.y_index(k, p));
        self.data[ix] += g.x;
        self.data[iy] += g.y;
    }

    fn clear_pinned(&mut self) {
        for k in 0..self.segments.len() {
            let (ix, iy) = (self.x_index(k, 0), self.y_index(k, 0));
            self.data[ix] = 0.0;
            self.data[iy] = 0.0;
        }
    }
}

/// Flattened coordinates of a branch plan in [`GradientVector`] layout.
pub fn branch_coords(plan: &BranchPlan) -> Vec<f64> {
    plan.branches.iter().flat_map(|b| b.x.iter().chain(&b.y).chain(&b.m).copied()).collect()
}

/// Inverse of [`branch_coords`] on a plan of the same shape.
pub fn set_branch_coords(plan: &mut BranchPlan, coords: &[f64]) {
    let mut it = coords.iter().copied();
    for b in &mut plan.branches {
        for v in b.x.iter_mut().chain(b.y.iter_mut()).chain(b.m.iter_mut()) {
            *v = it.next().expect("coordinate vector too short");
        }
    }
}

/// Total leaf mass `sum m L`.
pub fn payoff_h(plan: &BranchPlan) -> f64 {
    plan.segment_table().segments.iter().map(|s| s.leaf_mass).sum()
}

fn penalty_weights(plan: &BranchPlan, table: &SegmentTable, arc_length: bool) -> Vec<f64> {
    table
        .segments
        .iter()
        .map(|s| {
            if arc_length {
                s.leaf_mass
            } else {
                let b = &plan.branches[s.owner];
                b.m[s.interval] / b.segments() as f64
            }
        })
        .collect()
}

fn penalty_from_table(plan: &BranchPlan, table: &SegmentTable, cfg: &PenaltyConfig) -> Result<f64> {
    let w = penalty_weights(plan, table, cfg.arc_length);
    let segs = &table.segments;
    let mut total = 0.0;
    for i in 0..segs.len() {
        if w[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..segs.len() {
            if w[j] == 0.0 {
                continue;
            }
            let r2 = (segs[i].midpoint - segs[j].midpoint).norm_sq();
            row += match cfg.kernel {
                PenaltyKernel::Gaussian => (-cfg.beta * r2).exp() * w[j],
                PenaltyKernel::Power => {
                    if i == j {
                        continue;
                    }
                    if r2 == 0.0 {
                        return Err(RamifyError::PenaltySingularity { first: i.min(j), second: i.max(j) });
                    }
                    r2.powf(-0.5 * cfg.gamma) * w[j]
                }
            };
        }
        total += w[i] * row;
    }
    Ok(total)
}

/// Midpoint-rule crowding penalty `sum_ij K(mid_i, mid_j) w_i w_j`.
pub fn penalty_p(plan: &BranchPlan, cfg: &ObjectiveConfig) -> Result<f64> {
    penalty_from_table(plan, &plan.segment_table(), &cfg.penalty)
}

/// Evaluates `J` without checking plan feasibility.
pub(crate) fn evaluate(plan: &BranchPlan, cfg: &ObjectiveConfig) -> Result<ObjectiveValue> {
    let table = plan.segment_table();
    let i = irrigation_cost_floored(&table, cfg.alpha, cfg.eps, cfg.f_min)?.value;
    let p = if cfg.c1 != 0.0 { penalty_from_table(plan, &table, &cfg.penalty)? } else { 0.0 };
    let h: f64 = table.segments.iter().map(|s| s.leaf_mass).sum();
    let j = i + cfg.c1 * p - cfg.c2 * h;
    if !j.is_finite() {
        return Err(RamifyError::NonFinite(format!("objective evaluated to {j}")));
    }
    Ok(ObjectiveValue { j, i, p, h })
}

pub fn objective_j(plan: &BranchPlan, cfg: &ObjectiveConfig) -> Result<ObjectiveValue> {
    cfg.validate()?;
    plan.validate()?;
    evaluate(plan, cfg)
}

/// Analytic gradient of [`objective_j`].
///
/// Fails on configurations where the objective is not differentiable: a
/// midpoint within [`BOUNDARY_TOL`] of a bump-support boundary, or a
/// zero-length interval carrying positive density.
pub fn grad_objective(plan: &BranchPlan, cfg: &ObjectiveConfig) -> Result<GradientVector> {
    cfg.validate()?;
    plan.validate()?;
    let table = plan.segment_table();
    let layout = GradientVector::zeros_like(plan);
    for s in &table.segments {
        if s.length == 0.0 && plan.branches[s.owner].m[s.interval] > 0.0 {
            return Err(RamifyError::NonDifferentiable {
                index: layout.m_index(s.owner, s.interval),
                reason: "zero-length interval with positive density".into(),
            });
        }
    }
    if let Some((i, gap)) = boundary_gap(&table, cfg.eps) {
        if gap < BOUNDARY_TOL {
            let s = &table.segments[i];
            return Err(RamifyError::NonDifferentiable {
                index: layout.x_index(s.owner, s.interval),
                reason: format!("midpoint within {gap:e} of a kernel-support boundary"),
            });
        }
    }
    gradient_unchecked(plan, &table, cfg)
}

/// Gradient without the differentiability checks; one-sided values are
/// used at kinks. Used inside the descent loop.
pub(crate) fn gradient_unchecked(
    plan: &BranchPlan,
    table: &SegmentTable,
    cfg: &ObjectiveConfig,
) -> Result<GradientVector> {
    let mut g = GradientVector::zeros_like(plan);
    let segs = &table.segments;
    let n = segs.len();

    let cost = irrigation_cost_branches_grad(table, cfg.alpha, cfg.eps, cfg.f_min)?;
    let mut d_start = cost.d_start;
    let mut d_end = cost.d_end;
    let mut d_density = cost.d_density;
    // Adjoint of each interval length from P and H (distributed below).
    let mut g_len = vec![0.0; n];

    // H = sum m L
    for (q, s) in segs.iter().enumerate() {
        let m = plan.branches[s.owner].m[s.interval];
        d_density[q] -= cfg.c2 * s.length;
        g_len[q] -= cfg.c2 * m;
    }

    if cfg.c1 != 0.0 {
        let pc = &cfg.penalty;
        let w = penalty_weights(plan, table, pc.arc_length);
        let mut g_w = vec![0.0; n];
        let mut g_mid = vec![Point::ORIGIN; n];
        for i in 0..n {
            for j in 0..n {
                if w[j] == 0.0 {
                    continue;
                }
                let diff = segs[i].midpoint - segs[j].midpoint;
                let r2 = diff.norm_sq();
                let (k, dk_dr2) = match pc.kernel {
                    PenaltyKernel::Gaussian => {
                        let k = (-pc.beta * r2).exp();
                        (k, -pc.beta * k)
                    }
                    PenaltyKernel::Power => {
                        if i == j {
                            continue;
                        }
                        if r2 == 0.0 {
                            return Err(RamifyError::PenaltySingularity { first: i.min(j), second: i.max(j) });
                        }
                        let k = r2.powf(-0.5 * pc.gamma);
                        (k, -0.5 * pc.gamma * k / r2)
                    }
                };
                // Symmetric double sum: each ordered pair appears twice.
                g_w[i] += 2.0 * k * w[j];
                if i != j {
                    g_mid[i] = g_mid[i] + diff * (4.0 * dk_dr2 * w[i] * w[j]);
                }
            }
        }
        for q in 0..n {
            let s = &segs[q];
            let b = &plan.branches[s.owner];
            if pc.arc_length {
                d_density[q] += cfg.c1 * g_w[q] * s.length;
                g_len[q] += cfg.c1 * g_w[q] * b.m[s.interval];
            } else {
                d_density[q] += cfg.c1 * g_w[q] / b.segments() as f64;
            }
            let half = g_mid[q] * (0.5 * cfg.c1);
            d_start[q] = d_start[q] + half;
            d_end[q] = d_end[q] + half;
        }
    }

    for (q, s) in segs.iter().enumerate() {
        if s.length > 0.0 && g_len[q] != 0.0 {
            let u = (s.end - s.start) * (g_len[q] / s.length);
            d_end[q] = d_end[q] + u;
            d_start[q] = d_start[q] - u;
        }
        g.add_point(s.owner, s.interval, d_start[q]);
        g.add_point(s.owner, s.interval + 1, d_end[q]);
        let im = g.m_index(s.owner, s.interval);
        g.data[im] += d_density[q];
    }
    g.clear_pinned();
    Ok(g)
}

/// Central-difference gradient of [`objective_j`] over all free
/// coordinates; pinned root coordinates are left at zero.
pub fn fd_gradient(plan: &BranchPlan, cfg: &ObjectiveConfig, h: f64) -> Result<GradientVector> {
    if !(h > 0.0) {
        return Err(RamifyError::InvalidInput("finite-difference step must be positive".into()));
    }
    cfg.validate()?;
    plan.validate()?;
    let mut g = GradientVector::zeros_like(plan);
    let base = branch_coords(plan);
    let mut work = plan.clone();
    let mut coords = base.clone();
    for i in 0..base.len() {
        if g.is_pinned(i) {
            continue;
        }
        coords[i] = base[i] + h;
        set_branch_coords(&mut work, &coords);
        let plus = evaluate(&work, cfg)?.j;
        coords[i] = base[i] - h;
        set_branch_coords(&mut work, &coords);
        let minus = evaluate(&work, cfg)?.j;
        coords[i] = base[i];
        g.data[i] = (plus - minus) / (2.0 * h);
    }
    Ok(g)
}
