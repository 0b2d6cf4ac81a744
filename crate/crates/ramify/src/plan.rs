//! Irrigation plans and the data they are built from.
//!
//! Two plan flavours share the machinery downstream:
//!
//! * [`PathPlan`]: one polyline per target atom, each carrying that atom's
//!   mass from the origin. Used for the half-circle irrigation runs.
//! * [`BranchPlan`]: polylines with piecewise-constant leaf densities per
//!   unit length. Used for the tree-shape runs, where the transported flux
//!   is produced by the leaves themselves.
//!
//! Both flatten into a [`SegmentTable`] (length, midpoint and downstream flux
//! per interval), which is what the cost functionals consume.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{RamifyError, Result};
use crate::geometry::{point_segment_dist_sq, Point};

/// Default number of segments per path for irrigation runs.
pub const DEFAULT_SEGMENTS: usize = 16;

/// Relative tolerance for the total-mass invariant.
const MASS_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub position: Point,
    pub mass: f64,
}

/// A finite atomic measure: the target to irrigate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMeasure {
    atoms: Vec<Atom>,
    total_mass: f64,
}

impl TargetMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for (i, a) in atoms.iter().enumerate() {
            if !a.position.is_finite() {
                return Err(RamifyError::InvalidInput(format!("atom {i} has a non-finite position")));
            }
            if !(a.mass > 0.0 && a.mass.is_finite()) {
                return Err(RamifyError::InvalidInput(format!("atom {i} has non-positive mass {}", a.mass)));
            }
        }
        for i in 0..atoms.len() {
            for j in (i + 1)..atoms.len() {
                if atoms[i].position == atoms[j].position {
                    return Err(RamifyError::InvalidInput(format!(
                        "atoms {i} and {j} share position ({}, {})",
                        atoms[i].position.x, atoms[i].position.y
                    )));
                }
            }
        }
        let total_mass = atoms.iter().map(|a| a.mass).sum();
        Ok(TargetMeasure { atoms, total_mass })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// `n` equal atoms spread uniformly over the upper half circle of the given
/// radius, endpoints included, starting at `(radius, 0)`.
pub fn half_circle_targets(n: usize, radius: f64, total_mass: f64) -> Result<TargetMeasure> {
    if n == 0 {
        return Err(RamifyError::InvalidInput("half circle needs at least one atom".into()));
    }
    if !(radius > 0.0) || !(total_mass > 0.0) {
        return Err(RamifyError::InvalidInput("radius and total mass must be positive".into()));
    }
    let mass = total_mass / n as f64;
    let atoms = (0..n)
        .map(|i| {
            let theta = if n == 1 { 0.0 } else { PI * i as f64 / (n - 1) as f64 };
            Atom { position: Point::new(radius * theta.cos(), radius * theta.sin()), mass }
        })
        .collect();
    TargetMeasure::new(atoms)
}

/// One mass-carrying polyline of a [`PathPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PathRepr", into = "PathRepr")]
pub struct Path {
    pub vertices: Vec<Point>,
    pub mass: f64,
    pub terminal_fixed: bool,
    /// Pinned terminal position; equals the last vertex when the path was built.
    pub target: Point,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathRepr {
    mass: f64,
    vertices: Vec<Point>,
    terminal_fixed: bool,
}

impl From<PathRepr> for Path {
    fn from(r: PathRepr) -> Self {
        let target = r.vertices.last().copied().unwrap_or(Point::ORIGIN);
        Path { vertices: r.vertices, mass: r.mass, terminal_fixed: r.terminal_fixed, target }
    }
}

impl From<Path> for PathRepr {
    fn from(p: Path) -> Self {
        PathRepr { mass: p.mass, vertices: p.vertices, terminal_fixed: p.terminal_fixed }
    }
}

impl Path {
    pub fn new(vertices: Vec<Point>, mass: f64, terminal_fixed: bool) -> Self {
        let target = vertices.last().copied().unwrap_or(Point::ORIGIN);
        Path { vertices, mass, terminal_fixed, target }
    }

    pub fn segments(&self) -> usize {
        self.vertices.len().saturating_sub(1)
    }

    pub fn length(&self) -> f64 {
        crate::geometry::polyline_length(&self.vertices)
    }
}

/// Discrete Lagrangian irrigation plan: `n` polylines from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathPlan {
    pub paths: Vec<Path>,
}

impl PathPlan {
    pub fn new(paths: Vec<Path>) -> Result<Self> {
        let plan = PathPlan { paths };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.paths.iter().enumerate() {
            if p.vertices.len() < 2 {
                return Err(RamifyError::InvalidPlan(format!("path {k} has fewer than two vertices")));
            }
            if p.vertices[0] != Point::ORIGIN {
                return Err(RamifyError::InvalidPlan(format!("path {k} does not start at the origin")));
            }
            if !(p.mass > 0.0 && p.mass.is_finite()) {
                return Err(RamifyError::InvalidPlan(format!("path {k} has non-positive mass")));
            }
            if p.vertices.iter().any(|v| !v.is_finite()) {
                return Err(RamifyError::InvalidPlan(format!("path {k} has non-finite vertices")));
            }
            if p.terminal_fixed && *p.vertices.last().unwrap() != p.target {
                return Err(RamifyError::InvalidPlan(format!("path {k} terminal moved off its target")));
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.paths.iter().map(|p| p.mass).sum()
    }

    /// Largest distance between any two vertices of the plan.
    pub fn diameter(&self) -> f64 {
        diameter(self.paths.iter().flat_map(|p| p.vertices.iter().copied()))
    }

    pub fn segment_count(&self) -> usize {
        self.paths.iter().map(Path::segments).sum()
    }
}

/// Straight initial plan: one path per atom, equally spaced vertices from
/// the origin to the atom, terminal pinned.
pub fn build_star_plan(targets: &TargetMeasure, segments_per_path: usize) -> Result<PathPlan> {
    if targets.is_empty() {
        return Err(RamifyError::InvalidInput("cannot build a plan for an empty measure".into()));
    }
    if segments_per_path == 0 {
        return Err(RamifyError::InvalidInput("segments_per_path must be at least 1".into()));
    }
    debug_assert!(check_total_mass(targets));
    let paths = targets
        .atoms()
        .iter()
        .map(|atom| {
            let mut vertices: Vec<Point> =
                (0..segments_per_path).map(|p| atom.position * (p as f64 / segments_per_path as f64)).collect();
            vertices.push(atom.position);
            Path::new(vertices, atom.mass, true)
        })
        .collect();
    PathPlan::new(paths)
}

/// One branch of a [`BranchPlan`]: `K + 1` knots and `K` leaf densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub m: Vec<f64>,
}

impl Branch {
    pub fn segments(&self) -> usize {
        self.m.len()
    }

    pub fn vertex(&self, p: usize) -> Point {
        Point::new(self.x[p], self.y[p])
    }

    pub fn vertices(&self) -> Vec<Point> {
        self.x.iter().zip(&self.y).map(|(&x, &y)| Point::new(x, y)).collect()
    }

    /// Total leaf mass `sum_p m[p] L[p]` on this branch.
    pub fn leaf_mass(&self) -> f64 {
        (0..self.segments()).map(|p| self.m[p] * self.vertex(p).dist(self.vertex(p + 1))).sum()
    }
}

/// Tree-shape plan: branches from the origin with leaf densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchPlan {
    pub branches: Vec<Branch>,
}

impl BranchPlan {
    pub fn new(branches: Vec<Branch>) -> Result<Self> {
        let plan = BranchPlan { branches };
        plan.validate()?;
        Ok(plan)
    }

    /// Checks the shape invariants and the feasibility constraints
    /// `x[0] = y[0] = 0`, `y >= 0`, `m >= 0`.
    pub fn validate(&self) -> Result<()> {
        for (k, b) in self.branches.iter().enumerate() {
            if b.m.is_empty() || b.x.len() != b.m.len() + 1 || b.y.len() != b.x.len() {
                return Err(RamifyError::InvalidPlan(format!(
                    "branch {k} needs K+1 knots and K densities (got {}, {}, {})",
                    b.x.len(),
                    b.y.len(),
                    b.m.len()
                )));
            }
            if b.x[0] != 0.0 || b.y[0] != 0.0 {
                return Err(RamifyError::InvalidPlan(format!("branch {k} root is not at the origin")));
            }
            if b.x.iter().chain(&b.y).chain(&b.m).any(|v| !v.is_finite()) {
                return Err(RamifyError::InvalidPlan(format!("branch {k} has non-finite entries")));
            }
            if b.y.iter().any(|&v| v < 0.0) {
                return Err(RamifyError::InvalidPlan(format!("branch {k} leaves the upper half plane")));
            }
            if b.m.iter().any(|&v| v < 0.0) {
                return Err(RamifyError::InvalidPlan(format!("branch {k} has a negative density")));
            }
        }
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        self.branches.iter().map(Branch::segments).sum()
    }

    pub fn diameter(&self) -> f64 {
        diameter(self.branches.iter().flat_map(|b| b.vertices()))
    }
}

/// Fan of straight branches into the upper half plane, directions equally
/// spaced across `spread_angle` and centred on the vertical.
pub fn build_fan_branches(
    n: usize,
    spread_angle: f64,
    length0: f64,
    segments: usize,
    m_init: f64,
) -> Result<BranchPlan> {
    if n == 0 || segments == 0 {
        return Err(RamifyError::InvalidInput("fan needs at least one branch and one segment".into()));
    }
    if !(spread_angle > 0.0 && spread_angle < PI) {
        return Err(RamifyError::InvalidInput("spread angle must lie in (0, pi)".into()));
    }
    if !(length0 > 0.0) || !(m_init >= 0.0) {
        return Err(RamifyError::InvalidInput("length0 must be positive and m_init nonnegative".into()));
    }
    let branches = (0..n)
        .map(|i| {
            let theta = if n == 1 { PI / 2.0 } else { PI / 2.0 - spread_angle * (0.5 - i as f64 / (n - 1) as f64) };
            let dir = Point::new(theta.cos(), theta.sin());
            let mut x = Vec::with_capacity(segments + 1);
            let mut y = Vec::with_capacity(segments + 1);
            for p in 0..=segments {
                let s = length0 * p as f64 / segments as f64;
                x.push(if p == 0 { 0.0 } else { s * dir.x });
                y.push(if p == 0 { 0.0 } else { (s * dir.y).max(0.0) });
            }
            Branch { x, y, m: vec![m_init; segments] }
        })
        .collect();
    BranchPlan::new(branches)
}

/// Per-interval geometry and flux.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// Owning path or branch.
    pub owner: usize,
    /// Interval index `p` within the owner.
    pub interval: usize,
    pub start: Point,
    pub end: Point,
    pub length: f64,
    pub midpoint: Point,
    /// Downstream flux at the midpoint.
    pub flux: f64,
    /// Leaf mass `m[p] L[p]` on the interval (zero for path plans).
    pub leaf_mass: f64,
}

/// Flattened per-interval table, owner-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTable {
    pub segments: Vec<Segment>,
    /// `offsets[k]..offsets[k + 1]` are the rows of owner `k`.
    pub offsets: Vec<usize>,
}

impl SegmentTable {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn owner(&self, k: usize) -> &[Segment] {
        &self.segments[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn owners(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Anything that flattens into a [`SegmentTable`].
pub trait Segmented {
    fn segment_table(&self) -> SegmentTable;
}

impl Segmented for PathPlan {
    fn segment_table(&self) -> SegmentTable {
        let mut segments = Vec::with_capacity(self.segment_count());
        let mut offsets = vec![0];
        for (k, path) in self.paths.iter().enumerate() {
            for (p, w) in path.vertices.windows(2).enumerate() {
                segments.push(Segment {
                    owner: k,
                    interval: p,
                    start: w[0],
                    end: w[1],
                    length: w[0].dist(w[1]),
                    midpoint: w[0].midpoint(w[1]),
                    flux: path.mass,
                    leaf_mass: 0.0,
                });
            }
            offsets.push(segments.len());
        }
        SegmentTable { segments, offsets }
    }
}

impl Segmented for BranchPlan {
    fn segment_table(&self) -> SegmentTable {
        let mut segments = Vec::with_capacity(self.segment_count());
        let mut offsets = vec![0];
        for (k, branch) in self.branches.iter().enumerate() {
            let start = segments.len();
            for p in 0..branch.segments() {
                let a = branch.vertex(p);
                let b = branch.vertex(p + 1);
                let length = a.dist(b);
                segments.push(Segment {
                    owner: k,
                    interval: p,
                    start: a,
                    end: b,
                    length,
                    midpoint: a.midpoint(b),
                    flux: 0.0,
                    leaf_mass: branch.m[p] * length,
                });
            }
            // Downstream flux: half of the own interval plus everything beyond it.
            let mut beyond = 0.0;
            for s in segments[start..].iter_mut().rev() {
                s.flux = 0.5 * s.leaf_mass + beyond;
                beyond += s.leaf_mass;
            }
            offsets.push(segments.len());
        }
        SegmentTable { segments, offsets }
    }
}

pub fn segment_table<P: Segmented>(plan: &P) -> SegmentTable {
    plan.segment_table()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub length: f64,
    pub flux: f64,
}

/// Explicit rooted transport tree; node 0 is the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTopology {
    pub nodes: Vec<Point>,
    pub edges: Vec<Edge>,
    /// Leaf node -> delivered mass.
    pub leaves: BTreeMap<usize, f64>,
}

impl TreeTopology {
    /// Mass passing through `x`: the largest flux among edges within `tol`
    /// of `x`, or the total outflow when `x` is the root.
    pub fn multiplicity(&self, x: Point, tol: f64) -> f64 {
        let tol_sq = tol * tol;
        if (x - self.nodes[0]).norm_sq() <= tol_sq {
            return self.edges.iter().filter(|e| e.parent == 0).map(|e| e.flux).sum();
        }
        self.edges
            .iter()
            .filter(|e| point_segment_dist_sq(self.nodes[e.parent], self.nodes[e.child], x).0 <= tol_sq)
            .map(|e| e.flux)
            .fold(0.0, f64::max)
    }

    /// Checks the tree and flux-conservation invariants.
    pub fn validate(&self, rel_tol: f64) -> Result<()> {
        let mut parent = vec![None; self.nodes.len()];
        for e in &self.edges {
            if e.child == 0 || parent[e.child].is_some() {
                return Err(RamifyError::Topology(format!("node {} has two parents", e.child)));
            }
            parent[e.child] = Some(e.parent);
            let expected = self.nodes[e.parent].dist(self.nodes[e.child]);
            if (e.length - expected).abs() > 1e-12 * expected.max(1.0) {
                return Err(RamifyError::Topology("edge length disagrees with node positions".into()));
            }
        }
        let mut inflow = vec![0.0; self.nodes.len()];
        for e in &self.edges {
            inflow[e.child] += e.flux;
        }
        let mut outflow = vec![0.0; self.nodes.len()];
        for e in &self.edges {
            outflow[e.parent] += e.flux;
        }
        for node in 1..self.nodes.len() {
            let delivered = self.leaves.get(&node).copied().unwrap_or(0.0);
            let balance = inflow[node] - outflow[node] - delivered;
            if balance.abs() > rel_tol * inflow[node].max(1e-300) {
                return Err(RamifyError::Topology(format!("flux not conserved at node {node}")));
            }
        }
        Ok(())
    }
}

/// Builds an explicit tree from a path plan by identifying vertices that lie
/// within `merge_tol` of an existing node. Paths are processed in order from
/// the root outward, so shared prefixes collapse onto the same chain of nodes.
pub fn extract_topology(plan: &PathPlan, merge_tol: f64) -> Result<TreeTopology> {
    if !(merge_tol >= 0.0) {
        return Err(RamifyError::InvalidInput("merge_tol must be nonnegative".into()));
    }
    let mut nodes = vec![Point::ORIGIN];
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut edge_index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut leaves: BTreeMap<usize, f64> = BTreeMap::new();
    let tol_sq = merge_tol * merge_tol;

    for (k, path) in plan.paths.iter().enumerate() {
        let mut current = 0usize;
        let mut visited = vec![0usize];
        for v in &path.vertices[1..] {
            // Nearest existing node within tolerance, else a fresh node.
            let found = nodes
                .iter()
                .enumerate()
                .map(|(i, n)| (i, (*n - *v).norm_sq()))
                .filter(|&(_, d2)| d2 <= tol_sq)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
            let node = match found {
                Some(i) => i,
                None => {
                    nodes.push(*v);
                    parent.push(None);
                    nodes.len() - 1
                }
            };
            if node == current {
                continue;
            }
            if visited.contains(&node) {
                return Err(RamifyError::Topology(format!("path {k} revisits node {node}")));
            }
            if node == 0 {
                return Err(RamifyError::Topology(format!("path {k} returns to the root")));
            }
            match parent[node] {
                None => parent[node] = Some(current),
                Some(p) if p == current => {}
                Some(_) => {
                    return Err(RamifyError::Topology(format!(
                        "path {k} reaches node {node} through a second parent (cycle)"
                    )))
                }
            }
            let idx = *edge_index.entry((current, node)).or_insert_with(|| {
                edges.push(Edge { parent: current, child: node, length: nodes[current].dist(nodes[node]), flux: 0.0 });
                edges.len() - 1
            });
            edges[idx].flux += path.mass;
            visited.push(node);
            current = node;
        }
        *leaves.entry(current).or_insert(0.0) += path.mass;
    }
    Ok(TreeTopology { nodes, edges, leaves })
}

/// Default topology merge tolerance: `1e-6` times the plan diameter.
pub fn default_merge_tol(plan: &PathPlan) -> f64 {
    1e-6 * plan.diameter()
}

fn diameter(points: impl Iterator<Item = Point>) -> f64 {
    let pts: Vec<Point> = points.collect();
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            best = best.max((pts[i] - pts[j]).norm_sq());
        }
    }
    best.sqrt()
}

pub(crate) fn check_total_mass(measure: &TargetMeasure) -> bool {
    let sum: f64 = measure.atoms.iter().map(|a| a.mass).sum();
    (sum - measure.total_mass).abs() <= MASS_REL_TOL * measure.total_mass
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn half_circle_single_atom() {
        let t = half_circle_targets(1, 1.0, 1.0).unwrap();
        assert_eq!(t.atoms(), &[Atom { position: Point::new(1.0, 0.0), mass: 1.0 }]);
    }

    #[test]
    fn half_circle_twenty_five() {
        let t = half_circle_targets(25, 1.0, 1.0).unwrap();
        assert_eq!(t.len(), 25);
        assert!(t.atoms().iter().all(|a| close(a.mass, 0.04, 1e-15)));
        assert_eq!(t.atoms()[0].position, Point::new(1.0, 0.0));
        let last = t.atoms()[24].position;
        assert!(close(last.x, -1.0, 1e-15) && close(last.y, 0.0, 1e-15));
        assert!(check_total_mass(&t));
    }

    #[test]
    fn half_circle_three() {
        let t = half_circle_targets(3, 2.0, 3.0).unwrap();
        let expected = [(2.0, 0.0), (0.0, 2.0), (-2.0, 0.0)];
        for (a, (x, y)) in t.atoms().iter().zip(expected) {
            assert!(close(a.position.x, x, 1e-15) && close(a.position.y, y, 1e-15));
            assert_eq!(a.mass, 1.0);
        }
    }

    #[test]
    fn half_circle_rejects_zero() {
        assert!(half_circle_targets(0, 1.0, 1.0).is_err());
    }

    #[test]
    fn measure_rejects_duplicates_and_bad_mass() {
        let p = Point::new(1.0, 1.0);
        assert!(TargetMeasure::new(vec![Atom { position: p, mass: 1.0 }, Atom { position: p, mass: 2.0 }]).is_err());
        assert!(TargetMeasure::new(vec![Atom { position: p, mass: 0.0 }]).is_err());
    }

    #[test]
    fn star_plan_interpolates() {
        let t = TargetMeasure::new(vec![Atom { position: Point::new(1.0, 0.0), mass: 1.0 }]).unwrap();
        let plan = build_star_plan(&t, 2).unwrap();
        assert_eq!(plan.paths[0].vertices, vec![Point::new(0.0, 0.0), Point::new(0.5, 0.0), Point::new(1.0, 0.0)]);
        assert!(plan.paths[0].terminal_fixed);

        let t = TargetMeasure::new(vec![Atom { position: Point::new(0.0, 2.0), mass: 0.5 }]).unwrap();
        let plan = build_star_plan(&t, 4).unwrap();
        let ys: Vec<f64> = plan.paths[0].vertices.iter().map(|v| v.y).collect();
        assert_eq!(ys, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(plan.paths[0].vertices.iter().all(|v| v.x == 0.0));
    }

    #[test]
    fn star_plan_ends_on_atoms() {
        let t = half_circle_targets(25, 1.0, 1.0).unwrap();
        let plan = build_star_plan(&t, 8).unwrap();
        assert_eq!(plan.paths.len(), 25);
        for (p, a) in plan.paths.iter().zip(t.atoms()) {
            assert_eq!(*p.vertices.last().unwrap(), a.position);
            assert_eq!(p.vertices.len(), 9);
            assert_eq!(p.mass, a.mass);
        }
        assert!(close(plan.total_mass(), 1.0, 1e-12));
    }

    #[test]
    fn star_plan_rejects_empty() {
        let t = TargetMeasure::new(vec![]).unwrap();
        assert!(build_star_plan(&t, 4).is_err());
    }

    #[test]
    fn fan_single_branch_is_vertical() {
        let plan = build_fan_branches(1, 1.0, 1.0, 4, 0.1).unwrap();
        let b = &plan.branches[0];
        assert!(close(b.x[4], 0.0, 1e-15) && close(b.y[4], 1.0, 1e-15));
    }

    #[test]
    fn fan_eleven_branches_feasible() {
        let plan = build_fan_branches(11, PI / 2.0, 1.0, 10, 0.1).unwrap();
        assert_eq!(plan.branches.len(), 11);
        for b in &plan.branches {
            assert!(b.y[1..].iter().all(|&y| y > 0.0));
            assert!(b.m.iter().all(|&m| m == 0.1));
        }
        plan.validate().unwrap();
    }

    #[test]
    fn fan_two_branches_at_45_and_135() {
        let plan = build_fan_branches(2, PI / 2.0, 1.0, 1, 0.0).unwrap();
        let a0 = plan.branches[0].y[1].atan2(plan.branches[0].x[1]);
        let a1 = plan.branches[1].y[1].atan2(plan.branches[1].x[1]);
        assert!(close(a0, PI / 4.0, 1e-14));
        assert!(close(a1, 3.0 * PI / 4.0, 1e-14));
    }

    #[test]
    fn segment_table_single_branch() {
        let plan = BranchPlan::new(vec![Branch { x: vec![0.0, 0.0], y: vec![0.0, 1.0], m: vec![2.0] }]).unwrap();
        let t = plan.segment_table();
        assert_eq!(t.segments[0].length, 1.0);
        assert_eq!(t.segments[0].midpoint, Point::new(0.0, 0.5));
        assert_eq!(t.segments[0].flux, 1.0);
    }

    #[test]
    fn segment_table_two_intervals() {
        let plan = BranchPlan::new(vec![Branch { x: vec![0.0, 0.0, 0.0], y: vec![0.0, 1.0, 2.0], m: vec![0.0, 3.0] }])
            .unwrap();
        let t = plan.segment_table();
        assert_eq!(t.segments[0].flux, 3.0);
        assert_eq!(t.segments[1].flux, 1.5);
    }

    #[test]
    fn segment_table_path_flux_is_mass() {
        let plan =
            PathPlan::new(vec![Path::new(vec![Point::ORIGIN, Point::new(0.3, 0.1), Point::new(0.2, 0.9)], 0.04, true)])
                .unwrap();
        assert!(plan.segment_table().segments.iter().all(|s| s.flux == 0.04));
    }

    #[test]
    fn collinear_insertion_keeps_leaf_mass() {
        let plan = BranchPlan::new(vec![Branch { x: vec![0.0, 0.4, 0.9], y: vec![0.0, 0.3, 0.7], m: vec![1.3, 0.7] }])
            .unwrap();
        let b = &plan.branches[0];
        let mid = b.vertex(0).midpoint(b.vertex(1));
        let refined = BranchPlan::new(vec![Branch {
            x: vec![0.0, mid.x, 0.4, 0.9],
            y: vec![0.0, mid.y, 0.3, 0.7],
            m: vec![1.3, 1.3, 0.7],
        }])
        .unwrap();
        let total = |p: &BranchPlan| -> f64 { p.segment_table().segments.iter().map(|s| s.leaf_mass).sum() };
        assert!(close(total(&plan), total(&refined), 1e-12));
    }

    #[test]
    fn branch_plan_rejects_infeasible() {
        let bad = BranchPlan::new(vec![Branch { x: vec![0.0, 1.0], y: vec![0.0, -0.1], m: vec![1.0] }]);
        assert!(bad.is_err());
        let bad = BranchPlan::new(vec![Branch { x: vec![0.1, 1.0], y: vec![0.0, 1.0], m: vec![1.0] }]);
        assert!(bad.is_err());
    }

    fn path(vs: &[(f64, f64)], mass: f64) -> Path {
        Path::new(vs.iter().map(|&(x, y)| Point::new(x, y)).collect(), mass, true)
    }

    #[test]
    fn topology_of_star_has_no_sharing() {
        let t = half_circle_targets(5, 1.0, 1.0).unwrap();
        let plan = build_star_plan(&t, 3).unwrap();
        let topo = extract_topology(&plan, 0.0).unwrap();
        assert_eq!(topo.edges.len(), 15);
        assert!(topo.edges.iter().all(|e| close(e.flux, 0.2, 1e-15)));
        topo.validate(1e-12).unwrap();
    }

    #[test]
    fn topology_of_identical_paths_merges() {
        let plan =
            PathPlan::new(vec![path(&[(0.0, 0.0), (0.0, 1.0)], 0.5), path(&[(0.0, 0.0), (0.0, 1.0)], 0.5)]).unwrap();
        let topo = extract_topology(&plan, 0.0).unwrap();
        assert_eq!(topo.edges.len(), 1);
        assert_eq!(topo.edges[0].flux, 1.0);
    }

    #[test]
    fn topology_of_shared_trunk() {
        let plan = PathPlan::new(vec![
            path(&[(0.0, 0.0), (0.0, 1.0), (-1.0, 2.0)], 0.25),
            path(&[(0.0, 0.0), (0.0, 1.0 + 1e-12), (1.0, 2.0)], 0.75),
        ])
        .unwrap();
        let topo = extract_topology(&plan, 1e-9).unwrap();
        assert_eq!(topo.edges.len(), 3);
        let trunk = topo.edges.iter().find(|e| e.parent == 0).unwrap();
        assert_eq!(trunk.flux, 1.0);
        let mut arms: Vec<f64> = topo.edges.iter().filter(|e| e.parent != 0).map(|e| e.flux).collect();
        arms.sort_by(f64::total_cmp);
        assert_eq!(arms, vec![0.25, 0.75]);
        topo.validate(1e-12).unwrap();
        assert_eq!(topo.multiplicity(Point::new(0.0, 0.5), 1e-12), 1.0);
        assert_eq!(topo.multiplicity(Point::new(0.0, 1.0), 1e-9), 1.0);
        assert_eq!(topo.multiplicity(Point::new(0.5, 1.5), 1e-12), 0.75);
        assert_eq!(topo.multiplicity(Point::new(5.0, 5.0), 1e-12), 0.0);
        assert_eq!(topo.multiplicity(Point::ORIGIN, 1e-12), 1.0);
    }

    #[test]
    fn topology_rejects_cycles() {
        // Second path reaches (0,1) via (1,1) after the first reached it from the root.
        let plan =
            PathPlan::new(vec![path(&[(0.0, 0.0), (0.0, 1.0)], 0.5), path(&[(0.0, 0.0), (1.0, 1.0), (0.0, 1.0)], 0.5)])
                .unwrap();
        assert!(extract_topology(&plan, 0.0).is_err());
        let plan = PathPlan::new(vec![path(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (1.0, 0.0)], 1.0)]).unwrap();
        assert!(extract_topology(&plan, 0.0).is_err());
    }

    #[test]
    fn plan_json_schema() {
        let plan = PathPlan::new(vec![path(&[(0.0, 0.0), (1.0, 0.5)], 0.5)]).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(json, r#"{"paths":[{"mass":0.5,"vertices":[[0.0,0.0],[1.0,0.5]],"terminal_fixed":true}]}"#);
        let back: PathPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);

        let bp = build_fan_branches(1, 1.0, 1.0, 1, 0.25).unwrap();
        let json = serde_json::to_string(&bp).unwrap();
        assert_eq!(json, r#"{"branches":[{"x":[0.0,6.123233995736766e-17],"y":[0.0,1.0],"m":[0.25]}]}"#);
        assert!(serde_json::from_str::<BranchPlan>(r#"{"branches":[],"extra":1}"#).is_err());
    }
}
