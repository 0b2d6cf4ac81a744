//! Mollified multiplicities and irrigation costs.
//!
//! Path plans support two multiplicity models:
//!
//! * max form: every path counts with `J(dist(x, path) / eps)`, its mass
//!   weighted by the kernel at the path's closest approach to `x`;
//! * average form: every path counts with the capped integral
//!   `min(1, int (1/eps) J(|path(s) - x| / eps) ds)`.
//!
//! Branch plans use the mollified flux `F_eps`, a kernel-weighted integral of
//! the downstream flux of all branches with the quadratic bump kernel.
//!
//! All outer integrals are midpoint rules on the plan's own intervals.
//! Evaluations parallelize over target midpoints; every target sums its
//! sources in a fixed order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{RamifyError, Result};
use crate::exact::check_alpha;
use crate::geometry::{point_polyline_dist_sq, point_segment_dist_sq, Point};
use crate::kernels::{bump_segment_integral_grad, segment_integral_grad, GaussLegendre, KernelSpec};
use crate::plan::{BranchPlan, PathPlan, Segment, SegmentTable, Segmented};

/// Gauss-Legendre points for the average form with non-bump kernels.
pub const DEFAULT_QUAD_POINTS: usize = 16;

/// Targets per parallel work item in gradient accumulation.
const CHUNK: usize = 16;

/// Value of a mollified cost with its per-interval breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifiedEval {
    pub value: f64,
    /// Contribution of every interval, in segment-table order.
    pub per_segment: Option<Vec<f64>>,
}

impl MollifiedEval {
    fn from_terms(terms: Vec<f64>) -> Self {
        MollifiedEval { value: terms.iter().sum(), per_segment: Some(terms) }
    }
}

/// Which multiplicity model a path-plan cost uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Functional {
    Max,
    #[default]
    Avg,
}

impl std::str::FromStr for Functional {
    type Err = RamifyError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Functional::Max),
            "avg" => Ok(Functional::Avg),
            _ => Err(RamifyError::Config(format!("unknown functional '{s}' (expected max|avg)"))),
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(RamifyError::InvalidInput(format!("eps must be positive, got {eps}")))
    }
}

/// `W^(alpha-1) * weight`, with zero-weight terms contributing nothing.
fn discounted(w: f64, alpha: f64, weight: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        w.powf(alpha - 1.0) * weight
    }
}

/// Exact multiplicity of `x`: total mass of the paths passing within `tol`.
pub fn exact_multiplicity(plan: &PathPlan, x: Point, tol: f64) -> f64 {
    plan.paths.iter().filter(|p| point_polyline_dist_sq(&p.vertices, x).0 <= tol * tol).map(|p| p.mass).sum()
}

/// Max-form multiplicity `sum_k m_k J(dist(x, path_k) / eps)`.
pub fn w_max(x: Point, plan: &PathPlan, eps: f64, spec: KernelSpec) -> f64 {
    plan.paths.iter().map(|p| p.mass * spec.eval(point_polyline_dist_sq(&p.vertices, x).0.sqrt() / eps)).sum()
}

/// Max-form multiplicity at the midpoint of an interval of path `own`; the
/// own path contributes its full mass exactly.
fn w_max_on_path(x: Point, own: usize, plan: &PathPlan, eps: f64, spec: KernelSpec) -> f64 {
    plan.paths
        .iter()
        .enumerate()
        .map(
            |(j, p)| {
                if j == own {
                    p.mass
                } else {
                    p.mass * spec.eval(point_polyline_dist_sq(&p.vertices, x).0.sqrt() / eps)
                }
            },
        )
        .sum()
}

pub fn energy_max(plan: &PathPlan, alpha: f64, eps: f64, spec: KernelSpec) -> Result<MollifiedEval> {
    check_alpha(alpha)?;
    check_eps(eps)?;
    let table = plan.segment_table();
    let terms = table
        .segments
        .par_iter()
        .map(|s| {
            let w = w_max_on_path(s.midpoint, s.owner, plan, eps, spec);
            discounted(w, alpha, s.flux * s.length)
        })
        .collect();
    Ok(MollifiedEval::from_terms(terms))
}

/// Average-form multiplicity `sum_k m_k min(1, int (1/eps) J(...) ds)`.
pub fn w_avg(x: Point, plan: &PathPlan, eps: f64, spec: KernelSpec) -> f64 {
    let rule = GaussLegendre::new(DEFAULT_QUAD_POINTS);
    w_avg_with(x, plan, eps, spec, &rule)
}

fn path_integral(vertices: &[Point], x: Point, eps: f64, spec: KernelSpec, rule: &GaussLegendre) -> f64 {
    vertices.windows(2).map(|w| segment_integral_grad(spec, rule, w[0], w[1], x, eps).value).sum()
}

fn w_avg_with(x: Point, plan: &PathPlan, eps: f64, spec: KernelSpec, rule: &GaussLegendre) -> f64 {
    plan.paths.iter().map(|p| p.mass * path_integral(&p.vertices, x, eps, spec, rule).min(1.0)).sum()
}

pub fn energy_avg(plan: &PathPlan, alpha: f64, eps: f64, spec: KernelSpec) -> Result<MollifiedEval> {
    check_alpha(alpha)?;
    check_eps(eps)?;
    let rule = GaussLegendre::new(DEFAULT_QUAD_POINTS);
    let table = plan.segment_table();
    let terms = table
        .segments
        .par_iter()
        .map(|s| {
            let weight = s.flux * s.length;
            if weight == 0.0 {
                return Ok(0.0);
            }
            let w = w_avg_with(s.midpoint, plan, eps, spec, &rule);
            if w <= 0.0 {
                return Err(RamifyError::DegenerateFlux { index: table.offsets[s.owner] + s.interval });
            }
            Ok(discounted(w, alpha, weight))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MollifiedEval::from_terms(terms))
}

pub fn path_energy(
    plan: &PathPlan,
    functional: Functional,
    alpha: f64,
    eps: f64,
    spec: KernelSpec,
) -> Result<MollifiedEval> {
    match functional {
        Functional::Max => energy_max(plan, alpha, eps, spec),
        Functional::Avg => energy_avg(plan, alpha, eps, spec),
    }
}

/// Gradient of a path-plan energy: one entry per vertex, path-major.
pub type PathGradient = Vec<Vec<Point>>;

fn vertex_offsets(plan: &PathPlan) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(plan.paths.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for p in &plan.paths {
        acc += p.vertices.len();
        offsets.push(acc);
    }
    offsets
}

fn unflatten(plan: &PathPlan, flat: Vec<Point>) -> PathGradient {
    let offsets = vertex_offsets(plan);
    (0..plan.paths.len()).map(|k| flat[offsets[k]..offsets[k + 1]].to_vec()).collect()
}

/// Adds the gradient of `coef * L` and the midpoint contribution `g_mid`
/// of interval `s` onto its two vertices.
fn push_interval(acc: &mut [Point], base: usize, s: &Segment, coef_len: f64, g_mid: Point) {
    let (ia, ib) = (base + s.interval, base + s.interval + 1);
    if s.length > 0.0 && coef_len != 0.0 {
        let u = (s.end - s.start) * (coef_len / s.length);
        acc[ib] = acc[ib] + u;
        acc[ia] = acc[ia] - u;
    }
    let half = g_mid * 0.5;
    acc[ia] = acc[ia] + half;
    acc[ib] = acc[ib] + half;
}

/// Sums per-chunk dense gradients in chunk order.
fn reduce_chunks(parts: Vec<Vec<Point>>, len: usize) -> Vec<Point> {
    let mut out = vec![Point::ORIGIN; len];
    for part in parts {
        for (o, p) in out.iter_mut().zip(part) {
            *o = *o + p;
        }
    }
    out
}

/// Max-form energy and its gradient with respect to every vertex.
///
/// Distances enter through `d^2`, whose gradient is taken at the closest
/// point. Where a foreign path passes exactly through a midpoint the kernel
/// may have a kink; the zero subgradient is used there.
pub fn energy_max_grad(plan: &PathPlan, alpha: f64, eps: f64, spec: KernelSpec) -> Result<(f64, PathGradient)> {
    check_alpha(alpha)?;
    check_eps(eps)?;
    let table = plan.segment_table();
    let voff = vertex_offsets(plan);
    let nv = *voff.last().unwrap();
    let targets: Vec<usize> = (0..table.len()).collect();
    let parts: Vec<(f64, Vec<Point>)> = targets
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![Point::ORIGIN; nv];
            let mut value = 0.0;
            for &i in chunk {
                let s = &table.segments[i];
                let weight = s.flux * s.length;
                if weight == 0.0 {
                    continue;
                }
                // Closest approach of every foreign path.
                let mut w = 0.0;
                let mut closest = Vec::with_capacity(plan.paths.len());
                for (j, p) in plan.paths.iter().enumerate() {
                    if j == s.owner {
                        w += p.mass;
                        closest.push(None);
                        continue;
                    }
                    let (d2, q, t) = point_polyline_dist_sq(&p.vertices, s.midpoint);
                    let d = d2.sqrt();
                    w += p.mass * spec.eval(d / eps);
                    closest.push(Some((d, q, t)));
                }
                value += discounted(w, alpha, weight);
                let g_w = (alpha - 1.0) * w.powf(alpha - 2.0) * weight;
                let mut g_mid = Point::ORIGIN;
                for (j, c) in closest.into_iter().enumerate() {
                    let Some((d, q, t)) = c else { continue };
                    if d == 0.0 {
                        continue;
                    }
                    let p = &plan.paths[j];
                    // d(J(d/eps))/d(d^2) = J'(d/eps) / (2 eps d)
                    let coef = g_w * p.mass * spec.deriv(d / eps) / (2.0 * eps * d);
                    if coef == 0.0 {
                        continue;
                    }
                    let a = p.vertices[q];
                    let b = p.vertices[q + 1];
                    let r = s.midpoint - a.lerp(b, t);
                    g_mid = g_mid + r * (2.0 * coef);
                    acc[voff[j] + q] = acc[voff[j] + q] - r * (2.0 * coef * (1.0 - t));
                    acc[voff[j] + q + 1] = acc[voff[j] + q + 1] - r * (2.0 * coef * t);
                }
                let coef_len = w.powf(alpha - 1.0) * s.flux;
                push_interval(&mut acc, voff[s.owner], s, coef_len, g_mid);
            }
            (value, acc)
        })
        .collect();
    let value = parts.iter().map(|p| p.0).sum();
    let grad = reduce_chunks(parts.into_iter().map(|p| p.1).collect(), nv);
    Ok((value, unflatten(plan, grad)))
}

/// Average-form energy and its gradient with respect to every vertex.
/// Paths whose capped integral is saturated contribute no gradient.
pub fn energy_avg_grad(plan: &PathPlan, alpha: f64, eps: f64, spec: KernelSpec) -> Result<(f64, PathGradient)> {
    check_alpha(alpha)?;
    check_eps(eps)?;
    let rule = GaussLegendre::new(DEFAULT_QUAD_POINTS);
    let table = plan.segment_table();
    let voff = vertex_offsets(plan);
    let nv = *voff.last().unwrap();
    let targets: Vec<usize> = (0..table.len()).collect();
    let parts: Vec<Result<(f64, Vec<Point>)>> = targets
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![Point::ORIGIN; nv];
            let mut value = 0.0;
            let mut grads = Vec::new();
            for &i in chunk {
                let s = &table.segments[i];
                let weight = s.flux * s.length;
                if weight == 0.0 {
                    continue;
                }
                let x = s.midpoint;
                let mut w = 0.0;
                let mut uncapped = Vec::with_capacity(plan.paths.len());
                for (j, p) in plan.paths.iter().enumerate() {
                    let integral = path_integral(&p.vertices, x, eps, spec, &rule);
                    w += p.mass * integral.min(1.0);
                    if integral < 1.0 {
                        uncapped.push(j);
                    }
                }
                if w <= 0.0 {
                    return Err(RamifyError::DegenerateFlux { index: i });
                }
                value += discounted(w, alpha, weight);
                let g_w = (alpha - 1.0) * w.powf(alpha - 2.0) * weight;
                let mut g_mid = Point::ORIGIN;
                for j in uncapped {
                    let p = &plan.paths[j];
                    let coef = g_w * p.mass;
                    grads.clear();
                    grads.extend(p.vertices.windows(2).map(|v| segment_integral_grad(spec, &rule, v[0], v[1], x, eps)));
                    for (q, g) in grads.iter().enumerate() {
                        acc[voff[j] + q] = acc[voff[j] + q] + g.d_start * coef;
                        acc[voff[j] + q + 1] = acc[voff[j] + q + 1] + g.d_end * coef;
                        g_mid = g_mid + g.d_x * coef;
                    }
                }
                let coef_len = w.powf(alpha - 1.0) * s.flux;
                push_interval(&mut acc, voff[s.owner], s, coef_len, g_mid);
            }
            Ok((value, acc))
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let value = parts.iter().map(|p| p.0).sum();
    let grad = reduce_chunks(parts.into_iter().map(|p| p.1).collect(), nv);
    Ok((value, unflatten(plan, grad)))
}

pub fn path_energy_grad(
    plan: &PathPlan,
    functional: Functional,
    alpha: f64,
    eps: f64,
    spec: KernelSpec,
) -> Result<(f64, PathGradient)> {
    match functional {
        Functional::Max => energy_max_grad(plan, alpha, eps, spec),
        Functional::Avg => energy_avg_grad(plan, alpha, eps, spec),
    }
}

/// Mollified flux `F_eps` at every midpoint of a branch plan, in
/// segment-table order.
pub fn mollified_flux(plan: &BranchPlan, eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    Ok(flux_at_midpoints(&plan.segment_table(), eps))
}

pub(crate) fn flux_at_midpoints(table: &SegmentTable, eps: f64) -> Vec<f64> {
    table
        .segments
        .par_iter()
        .map(|t| {
            table
                .segments
                .iter()
                .filter(|s| s.flux != 0.0)
                .map(|s| s.flux * bump_segment_integral_grad(s.start, s.end, t.midpoint, eps).value)
                .sum()
        })
        .collect()
}

/// Mollified irrigation cost `sum F^(alpha-1) f L` of a branch plan.
///
/// A midpoint carrying positive `f L` with zero mollified flux makes the
/// cost infinite for `alpha < 1` and is reported as an error.
pub fn irrigation_cost_branches(plan: &BranchPlan, alpha: f64, eps: f64) -> Result<MollifiedEval> {
    irrigation_cost_floored(&plan.segment_table(), alpha, eps, 0.0)
}

/// Cost with an optional floor on `F`; a zero floor disables clamping.
pub(crate) fn irrigation_cost_floored(table: &SegmentTable, alpha: f64, eps: f64, f_min: f64) -> Result<MollifiedEval> {
    check_alpha(alpha)?;
    check_eps(eps)?;
    let flux = flux_at_midpoints(table, eps);
    let mut terms = Vec::with_capacity(table.len());
    for (i, (s, &f_eps)) in table.segments.iter().zip(&flux).enumerate() {
        let weight = s.flux * s.length;
        if weight == 0.0 {
            terms.push(0.0);
            continue;
        }
        let f_eps = floored(f_eps, f_min, i)?;
        terms.push(discounted(f_eps, alpha, weight));
    }
    Ok(MollifiedEval::from_terms(terms))
}

fn floored(f_eps: f64, f_min: f64, index: usize) -> Result<f64> {
    if f_eps < f_min {
        Ok(f_min)
    } else if f_eps <= 0.0 {
        Err(RamifyError::DegenerateFlux { index })
    } else {
        Ok(f_eps)
    }
}

/// Gradient of the branch irrigation cost, per segment-table row.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BranchCostGrad {
    pub value: f64,
    /// `d/d start` and `d/d end` of every interval.
    pub d_start: Vec<Point>,
    pub d_end: Vec<Point>,
    /// `d/d m` of every interval.
    pub d_density: Vec<f64>,
}

/// Reverse-mode gradient of `sum_i F_i^(alpha-1) f_i L_i` through the
/// closed-form bump integrals, the downstream fluxes and the lengths.
pub(crate) fn irrigation_cost_branches_grad(
    table: &SegmentTable,
    alpha: f64,
    eps: f64,
    f_min: f64,
) -> Result<BranchCostGrad> {
    check_alpha(alpha)?;
    check_eps(eps)?;
    let n = table.len();
    let segs = &table.segments;
    let raw_flux = flux_at_midpoints(table, eps);

    // Direct partials and the adjoint of F at every target.
    let mut value = 0.0;
    let mut g_f = vec![0.0; n];
    let mut g_len = vec![0.0; n];
    let mut g_big_f = vec![0.0; n];
    for i in 0..n {
        let s = &segs[i];
        if s.flux * s.length == 0.0 {
            // A massless interval contributes nothing; its one-sided slope is
            // infinite for alpha < 1, so it is given a zero subgradient.
            continue;
        }
        let clamped = raw_flux[i] < f_min;
        let f_eps = if clamped { f_min } else { raw_flux[i] };
        if f_eps <= 0.0 {
            if s.flux * s.length > 0.0 {
                return Err(RamifyError::DegenerateFlux { index: i });
            }
            continue;
        }
        let pow = f_eps.powf(alpha - 1.0);
        value += discounted(f_eps, alpha, s.flux * s.length);
        g_f[i] += pow * s.length;
        g_len[i] += pow * s.flux;
        if !clamped {
            g_big_f[i] = (alpha - 1.0) * f_eps.powf(alpha - 2.0) * s.flux * s.length;
        }
    }

    // Pair contributions, chunked over targets for a deterministic reduction.
    let targets: Vec<usize> = (0..n).collect();
    let parts: Vec<(Vec<f64>, Vec<Point>, Vec<Point>)> = targets
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut gf = vec![0.0; n];
            let mut ga = vec![Point::ORIGIN; n];
            let mut gb = vec![Point::ORIGIN; n];
            for &i in chunk {
                let gi = g_big_f[i];
                if gi == 0.0 {
                    continue;
                }
                let x = segs[i].midpoint;
                let mut g_mid = Point::ORIGIN;
                for (q, s) in segs.iter().enumerate() {
                    let g = bump_segment_integral_grad(s.start, s.end, x, eps);
                    if g.value == 0.0 && g.d_x == Point::ORIGIN {
                        continue;
                    }
                    gf[q] += gi * g.value;
                    let c = gi * s.flux;
                    if c != 0.0 {
                        ga[q] = ga[q] + g.d_start * c;
                        gb[q] = gb[q] + g.d_end * c;
                        g_mid = g_mid + g.d_x * c;
                    }
                }
                let half = g_mid * 0.5;
                ga[i] = ga[i] + half;
                gb[i] = gb[i] + half;
            }
            (gf, ga, gb)
        })
        .collect();
    let mut d_start = vec![Point::ORIGIN; n];
    let mut d_end = vec![Point::ORIGIN; n];
    for (gf, ga, gb) in parts {
        for q in 0..n {
            g_f[q] += gf[q];
            d_start[q] = d_start[q] + ga[q];
            d_end[q] = d_end[q] + gb[q];
        }
    }

    // f_p = w_p / 2 + sum_{q > p} w_q within each branch, with w = m L.
    let mut d_density = vec![0.0; n];
    for k in 0..table.owners() {
        let (lo, hi) = (table.offsets[k], table.offsets[k + 1]);
        let mut upstream = 0.0;
        for q in lo..hi {
            let g_w = 0.5 * g_f[q] + upstream;
            upstream += g_f[q];
            let s = &segs[q];
            if s.length > 0.0 {
                d_density[q] += g_w * s.length;
                g_len[q] += g_w * s.leaf_mass / s.length;
            }
        }
    }
    for q in 0..n {
        let s = &segs[q];
        if s.length > 0.0 && g_len[q] != 0.0 {
            let u = (s.end - s.start) * (g_len[q] / s.length);
            d_end[q] = d_end[q] + u;
            d_start[q] = d_start[q] - u;
        }
    }
    Ok(BranchCostGrad { value, d_start, d_end, d_density })
}

/// Closed-form mollified cost of the two-path example in the saturated
/// regime: `[m1 + m2 l2]^(alpha-1) (m1 l1 + m2 l2)`.
pub fn counterexample_cost(m1: f64, m2: f64, l1: f64, l2: f64, alpha: f64) -> f64 {
    (m1 + m2 * l2).powf(alpha - 1.0) * (m1 * l1 + m2 * l2)
}

/// Derivative of [`counterexample_cost`] with respect to `l2`.
pub fn counterexample_derivative(m1: f64, m2: f64, l1: f64, l2: f64, alpha: f64) -> f64 {
    let base = m1 + m2 * l2;
    base.powf(alpha - 1.0) * m2 * (1.0 - (1.0 - alpha) * (m1 * l1 + m2 * l2) / base)
}

/// Minimum distance from `x` to any interval of a table, used to detect
/// points on the bump-support boundary.
pub(crate) fn boundary_gap(table: &SegmentTable, eps: f64) -> Option<(usize, f64)> {
    let mut worst: Option<(usize, f64)> = None;
    for (i, t) in table.segments.iter().enumerate() {
        for s in &table.segments {
            let (d2, _) = point_segment_dist_sq(s.start, s.end, t.midpoint);
            let gaps =
                [(d2.sqrt() - eps).abs(), (s.start.dist(t.midpoint) - eps).abs(), (s.end.dist(t.midpoint) - eps).abs()];
            let gap = gaps.into_iter().fold(f64::INFINITY, f64::min);
            if worst.is_none_or(|w| gap < w.1) {
                worst = Some((i, gap));
            }
        }
    }
    worst
}
