//! Exact (un-mollified) irrigation cost on explicit trees.
//!
//! On a finite tree the irrigation cost collapses to the Gilbert energy
//! `sum_edges length * flux^alpha`. These routines are the ground truth the
//! mollified functionals are compared against.

use crate::error::{RamifyError, Result};
use crate::geometry::Point;
use crate::plan::{extract_topology, PathPlan, TargetMeasure, TreeTopology};

/// Default brute-force grid resolution per axis.
pub const DEFAULT_GRID: usize = 200;

/// `flux^alpha` with the conventions `0^alpha = 0` and `flux^0 = 1` for
/// positive flux.
pub fn flux_power(flux: f64, alpha: f64) -> f64 {
    if flux == 0.0 {
        0.0
    } else if alpha == 0.0 {
        1.0
    } else {
        flux.powf(alpha)
    }
}

pub fn gilbert_energy(topo: &TreeTopology, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let mut total = 0.0;
    for (i, e) in topo.edges.iter().enumerate() {
        if !(e.flux >= 0.0) {
            return Err(RamifyError::InvalidInput(format!("edge {i} has negative flux {}", e.flux)));
        }
        total += e.length * flux_power(e.flux, alpha);
    }
    Ok(total)
}

/// Gilbert energy of the tree extracted from `plan` at `merge_tol`.
pub fn exact_plan_cost(plan: &PathPlan, alpha: f64, merge_tol: f64) -> Result<f64> {
    gilbert_energy(&extract_topology(plan, merge_tol)?, alpha)
}

/// Result of the two-atom bifurcation search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bifurcation {
    /// Optimal branching point; the origin for the V-shape.
    pub point: Point,
    pub cost: f64,
    /// Cost of the V-shape (two straight paths, no shared trunk).
    pub v_cost: f64,
}

/// Cost of the Y-shaped tree with branching point `b`.
pub fn y_cost(b: Point, p1: Point, m1: f64, p2: Point, m2: f64, alpha: f64) -> f64 {
    b.norm() * flux_power(m1 + m2, alpha) + flux_power(m1, alpha) * p1.dist(b) + flux_power(m2, alpha) * p2.dist(b)
}

/// Grid search for the optimal branching point of a two-atom measure over
/// the triangle `(0, P1, P2)`, refined twice by a factor 10 around the
/// incumbent. The V-shape is returned when it is at least as cheap.
pub fn brute_force_bifurcation(targets: &TargetMeasure, alpha: f64, grid: usize) -> Result<Bifurcation> {
    check_alpha(alpha)?;
    if targets.len() != 2 {
        return Err(RamifyError::InvalidInput(format!("bifurcation search needs 2 atoms, got {}", targets.len())));
    }
    if grid < 2 {
        return Err(RamifyError::InvalidInput("grid must have at least 2 points per axis".into()));
    }
    let [a1, a2] = [targets.atoms()[0], targets.atoms()[1]];
    let cost = |b: Point| y_cost(b, a1.position, a1.mass, a2.position, a2.mass, alpha);
    let tri = [Point::ORIGIN, a1.position, a2.position];

    let xs = tri.iter().map(|p| p.x);
    let ys = tri.iter().map(|p| p.y);
    let (mut x0, mut x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));

    let v_cost = cost(Point::ORIGIN);
    let mut best = (Point::ORIGIN, v_cost);
    for level in 0..3 {
        let hx = (x1 - x0) / (grid - 1) as f64;
        let hy = (y1 - y0) / (grid - 1) as f64;
        for i in 0..grid {
            for j in 0..grid {
                let b = Point::new(x0 + hx * i as f64, y0 + hy * j as f64);
                if level == 0 && !in_triangle(b, tri) {
                    continue;
                }
                let c = cost(b);
                if c < best.1 {
                    best = (b, c);
                }
            }
        }
        // Window around the incumbent sized so the next spacing is a tenth
        // of the current one.
        let wx = hx * (grid - 1) as f64 / 20.0;
        let wy = hy * (grid - 1) as f64 / 20.0;
        x0 = best.0.x - wx;
        x1 = best.0.x + wx;
        y0 = best.0.y - wy;
        y1 = best.0.y + wy;
    }
    Ok(Bifurcation { point: best.0, cost: best.1, v_cost })
}

fn in_triangle(p: Point, t: [Point; 3]) -> bool {
    let cross = |a: Point, b: Point, c: Point| (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let d1 = cross(t[0], t[1], p);
    let d2 = cross(t[1], t[2], p);
    let d3 = cross(t[2], t[0], p);
    let slack = 1e-12;
    let has_neg = d1 < -slack || d2 < -slack || d3 < -slack;
    let has_pos = d1 > slack || d2 > slack || d3 > slack;
    !(has_neg && has_pos)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(RamifyError::InvalidInput(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_star_plan, half_circle_targets, Atom, Edge, Path};
    use std::collections::BTreeMap;

    fn topo(edges: &[(usize, usize, f64, f64)], nodes: Vec<Point>) -> TreeTopology {
        TreeTopology {
            nodes,
            edges: edges.iter().map(|&(parent, child, length, flux)| Edge { parent, child, length, flux }).collect(),
            leaves: BTreeMap::new(),
        }
    }

    #[test]
    fn single_edge() {
        let t = topo(&[(0, 1, 1.0, 0.3)], vec![Point::ORIGIN, Point::new(1.0, 0.0)]);
        assert!((gilbert_energy(&t, 0.4).unwrap() - 0.3f64.powf(0.4)).abs() < 1e-15);
    }

    #[test]
    fn y_tree() {
        let nodes = vec![Point::ORIGIN, Point::new(0.0, 0.5), Point::new(-0.3, 0.9), Point::new(0.3, 0.9)];
        let t = topo(&[(0, 1, 0.5, 1.0), (1, 2, 0.5, 0.5), (1, 3, 0.5, 0.5)], nodes);
        let expected = 0.5 + 2.0 * 0.5 * 0.5f64.sqrt();
        assert!((gilbert_energy(&t, 0.5).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 1.20711).abs() < 1e-5);
    }

    #[test]
    fn negative_flux_rejected() {
        let t = topo(&[(0, 1, 1.0, -0.1)], vec![Point::ORIGIN, Point::new(1.0, 0.0)]);
        assert!(gilbert_energy(&t, 0.5).is_err());
    }

    #[test]
    fn zero_flux_and_zero_alpha_conventions() {
        assert_eq!(flux_power(0.0, 0.0), 0.0);
        assert_eq!(flux_power(0.0, 0.5), 0.0);
        assert_eq!(flux_power(0.3, 0.0), 1.0);
    }

    #[test]
    fn half_circle_star() {
        let t = half_circle_targets(25, 1.0, 1.0).unwrap();
        let plan = build_star_plan(&t, 16).unwrap();
        let by_sum: f64 = t.atoms().iter().map(|a| a.mass.powf(0.4) * a.position.norm()).sum();
        let e = exact_plan_cost(&plan, 0.4, 0.0).unwrap();
        assert!((e - 25f64.powf(0.6)).abs() < 1e-12);
        assert!((e - by_sum).abs() < 1e-12);
        assert!((e - 6.89865).abs() < 1e-5);
    }

    #[test]
    fn alpha_one_star_is_first_moment() {
        let atoms = vec![
            Atom { position: Point::new(0.3, 0.4), mass: 0.2 },
            Atom { position: Point::new(-1.0, 2.0), mass: 0.7 },
            Atom { position: Point::new(2.0, 0.1), mass: 0.1 },
        ];
        let t = TargetMeasure::new(atoms.clone()).unwrap();
        let plan = build_star_plan(&t, 5).unwrap();
        let moment: f64 = atoms.iter().map(|a| a.mass * a.position.norm()).sum();
        assert!((exact_plan_cost(&plan, 1.0, 0.0).unwrap() - moment).abs() < 1e-12);
    }

    #[test]
    fn overlapping_paths_share_flux() {
        let v = vec![Point::ORIGIN, Point::new(0.0, 1.0)];
        let plan = PathPlan::new(vec![Path::new(v.clone(), 0.3, true), Path::new(v, 0.7, true)]).unwrap();
        assert!((exact_plan_cost(&plan, 0.5, 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn collinear_vertices_do_not_change_cost() {
        let plan = PathPlan::new(vec![Path::new(vec![Point::ORIGIN, Point::new(0.6, 0.8)], 0.4, true)]).unwrap();
        let refined = PathPlan::new(vec![Path::new(
            vec![Point::ORIGIN, Point::new(0.15, 0.2), Point::new(0.45, 0.6), Point::new(0.6, 0.8)],
            0.4,
            true,
        )])
        .unwrap();
        let a = exact_plan_cost(&plan, 0.3, 0.0).unwrap();
        let b = exact_plan_cost(&refined, 0.3, 0.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn two_atoms(p1: Point, p2: Point, m: f64) -> TargetMeasure {
        TargetMeasure::new(vec![Atom { position: p1, mass: m }, Atom { position: p2, mass: m }]).unwrap()
    }

    #[test]
    fn alpha_one_prefers_straight_lines() {
        let t = two_atoms(Point::new(0.3, 1.0), Point::new(-0.2, 0.8), 0.5);
        let b = brute_force_bifurcation(&t, 1.0, DEFAULT_GRID).unwrap();
        let straight = 0.5 * Point::new(0.3, 1.0).norm() + 0.5 * Point::new(-0.2, 0.8).norm();
        assert!((b.cost - straight).abs() < 1e-12);
        assert_eq!(b.point, Point::ORIGIN);
    }

    #[test]
    fn near_zero_alpha_recovers_steiner_tree() {
        // Steiner tree of (0,0), (1,1), (-1,1) has length 1 + sqrt(3).
        let t = two_atoms(Point::new(1.0, 1.0), Point::new(-1.0, 1.0), 0.5);
        let b = brute_force_bifurcation(&t, 1e-6, DEFAULT_GRID).unwrap();
        let steiner = 1.0 + 3f64.sqrt();
        assert!((b.cost - steiner).abs() < 1e-4, "{} vs {steiner}", b.cost);
        assert!((b.point.x).abs() < 1e-4);
        assert!((b.point.y - (1.0 - 1.0 / 3f64.sqrt())).abs() < 1e-3);
    }

    #[test]
    fn right_angle_fixture_is_critical() {
        // At alpha = 1/2 the branching condition is met exactly at a 90 degree
        // opening, so the V-shape is already optimal for this fixture.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let t = two_atoms(Point::new(s, s), Point::new(-s, s), 0.5);
        let b = brute_force_bifurcation(&t, 0.5, DEFAULT_GRID).unwrap();
        assert!((b.v_cost - 2.0 * 0.5f64.sqrt()).abs() < 1e-12);
        assert!(b.cost <= b.v_cost);
        assert!((b.cost - b.v_cost).abs() < 1e-12);
    }

    #[test]
    fn narrow_fixture_branches_strictly() {
        let t = two_atoms(Point::new(0.3, 1.0), Point::new(-0.3, 1.0), 0.5);
        for alpha in [0.2, 0.5, 0.8] {
            let b = brute_force_bifurcation(&t, alpha, DEFAULT_GRID).unwrap();
            assert!(b.cost < b.v_cost, "alpha {alpha}");
            assert!(b.point.y > 0.0);
        }
        let b = brute_force_bifurcation(&t, 1.0, DEFAULT_GRID).unwrap();
        assert!((b.cost - b.v_cost).abs() < 1e-12);
    }

    #[test]
    fn bifurcation_needs_two_atoms() {
        let t = half_circle_targets(3, 1.0, 1.0).unwrap();
        assert!(brute_force_bifurcation(&t, 0.5, 50).is_err());
    }

    #[test]
    fn flux_terms_are_monotone_in_alpha() {
        for flux in [0.01, 0.2, 0.5, 0.99] {
            let mut prev = f64::INFINITY;
            for i in 0..=20 {
                let term = flux_power(flux, i as f64 / 20.0);
                assert!(term <= prev);
                prev = term;
            }
        }
    }
}
