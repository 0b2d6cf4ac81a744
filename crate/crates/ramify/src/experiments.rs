//! The command implementations behind the `ramify` binary.
//!
//! Every command returns a [`CommandOutcome`]: a JSON summary plus the list
//! of numerical assertions that failed. Errors are reserved for invalid
//! input and degenerate configurations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CounterexampleConfig, Experiment, RunConfig};
use crate::error::{RamifyError, Result};
use crate::exact::exact_plan_cost;
use crate::geometry::{point_segment_dist_sq, Point};
use crate::mollified::{counterexample_cost, counterexample_derivative, energy_avg, energy_max, path_energy};
use crate::objective::{fd_gradient, grad_objective, objective_j, GradientVector, ObjectiveConfig, ObjectiveValue};
use crate::optimizer::{
    eps_continuation_observed, IterationRecord, Observer, PathProblem, RunTrace, StageSummary, TreeProblem,
    TRACE_HEADER,
};
use crate::plan::{
    build_fan_branches, build_star_plan, default_merge_tol, half_circle_targets, Branch, BranchPlan, Path, PathPlan,
    Segmented,
};
use crate::svg::{render_svg, Render, SvgStyle};

/// Summary document plus failed assertions of one command.
#[derive(Debug, Clone)]
pub struct CommandOutcome {
    pub summary: Value,
    pub failures: Vec<String>,
}

impl CommandOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Dispatches to the command for `experiment`.
pub fn run_experiment(experiment: Experiment, cfg: &RunConfig) -> Result<CommandOutcome> {
    cfg.check_experiment(experiment)?;
    match experiment {
        Experiment::Irrigate => cmd_irrigate(cfg),
        Experiment::Treeopt => cmd_treeopt(cfg),
        Experiment::GammaTable => cmd_gamma_table(cfg),
        Experiment::Counterexample => cmd_counterexample(cfg),
        Experiment::Gradcheck => cmd_gradcheck(cfg),
    }
}

fn io_err(path: &FsPath, e: std::io::Error) -> RamifyError {
    RamifyError::InvalidInput(format!("{}: {e}", path.display()))
}

/// Writes `bytes` and syncs the file before returning.
fn write_durable(path: &FsPath, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))?;
    f.sync_all().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &FsPath, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RamifyError::InvalidInput(e.to_string()))?;
    text.push('\n');
    write_durable(path, text.as_bytes())
}

fn prepare_dir(dir: &FsPath) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Streams the trace and writes one plan snapshot and drawing per stage.
struct RunWriter {
    dir: PathBuf,
    csv: BufWriter<File>,
    csv_path: PathBuf,
    style: SvgStyle,
}

impl RunWriter {
    fn new(dir: &FsPath, style: SvgStyle) -> Result<Self> {
        let csv_path = dir.join("trace.csv");
        let file = File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        let mut csv = BufWriter::new(file);
        writeln!(csv, "{TRACE_HEADER}").map_err(|e| io_err(&csv_path, e))?;
        csv.flush().map_err(|e| io_err(&csv_path, e))?;
        Ok(RunWriter { dir: dir.to_path_buf(), csv, csv_path, style })
    }

    fn snapshot<P: Serialize + Render>(&self, index: usize, plan: &P) -> Result<()> {
        write_json(&self.dir.join(format!("plan_stage_{index}.json")), plan)?;
        write_durable(&self.dir.join(format!("stage_{index}.svg")), render_svg(plan, &self.style).as_bytes())
    }
}

impl<P: Serialize + Render> Observer<P> for RunWriter {
    fn on_iteration(&mut self, record: &IterationRecord) -> Result<()> {
        writeln!(self.csv, "{}", record.csv_row()).map_err(|e| io_err(&self.csv_path, e))?;
        self.csv.flush().map_err(|e| io_err(&self.csv_path, e))
    }

    fn on_stage(&mut self, stage: usize, plan: &P, _summary: &StageSummary) -> Result<()> {
        self.snapshot(stage + 1, plan)
    }
}

/// Number of trunk clusters: each path's first crossing of the circle of
/// the given radius, grouped by single linkage on polar angle with the
/// given maximal gap. Paths that never reach the circle are ignored.
pub fn trunk_clusters(plan: &PathPlan, radius: f64, gap: f64) -> usize {
    let mut angles: Vec<f64> = plan
        .paths
        .iter()
        .filter_map(|p| {
            p.vertices.windows(2).find_map(|w| {
                let (a, b) = (w[0].norm(), w[1].norm());
                if a <= radius && b >= radius && a != b {
                    let q = w[0].lerp(w[1], (radius - a) / (b - a));
                    Some(q.y.atan2(q.x))
                } else {
                    None
                }
            })
        })
        .collect();
    if angles.is_empty() {
        return 0;
    }
    angles.sort_by(f64::total_cmp);
    1 + angles.windows(2).filter(|w| w[1] - w[0] > gap).count()
}

#[derive(Debug, Clone, Serialize)]
struct StageReport {
    eps: f64,
    iterations: usize,
    stop: crate::optimizer::StopReason,
    initial: ObjectiveValue,
    last: ObjectiveValue,
    #[serde(skip_serializing_if = "Option::is_none")]
    clusters: Option<usize>,
}

fn stage_reports(trace: &RunTrace, clusters: Option<&[usize]>) -> Vec<StageReport> {
    trace
        .stages
        .iter()
        .enumerate()
        .map(|(s, st)| StageReport {
            eps: st.eps,
            iterations: st.iterations,
            stop: st.stop,
            initial: st.initial,
            last: st.last,
            clusters: clusters.map(|c| c[s]),
        })
        .collect()
}

/// Irrigation of equal masses on a half circle, starting from the star.
pub fn cmd_irrigate(cfg: &RunConfig) -> Result<CommandOutcome> {
    let m = &cfg.measure;
    let alpha = cfg.objective.alpha;
    let targets = half_circle_targets(m.n, m.radius, m.total_mass)?;
    let plan0 = build_star_plan(&targets, m.segments)?;
    prepare_dir(&cfg.output_dir)?;
    let mut writer = RunWriter::new(&cfg.output_dir, cfg.svg.with_alpha(alpha))?;
    writer.snapshot(0, &plan0)?;
    let (functional, kernel) = (cfg.functional, cfg.kernel);
    let run = eps_continuation_observed(
        &plan0,
        |eps| PathProblem { functional, alpha, eps, kernel },
        &cfg.descent,
        &mut writer,
    )?;
    let final_eps = *cfg.descent.eps_schedule.last().unwrap();
    let energy = path_energy(&run.plan, functional, alpha, final_eps, kernel)?.value;
    let merge_tol = cfg.merge_tol.unwrap_or_else(|| default_merge_tol(&run.plan));
    let exact = exact_plan_cost(&run.plan, alpha, merge_tol);
    let (c, gap) = (cfg.clusters.radius, cfg.clusters.gap);
    let initial_clusters = trunk_clusters(&plan0, c, gap);
    let clusters: Vec<usize> = run.stages.iter().map(|p| trunk_clusters(p, c, gap)).collect();
    let summary = json!({
        "experiment": "irrigate",
        "n": m.n,
        "alpha": alpha,
        "functional": functional,
        "kernel": kernel,
        "eps_schedule": cfg.descent.eps_schedule,
        "final_mollified_energy": energy,
        "merge_tol": merge_tol,
        "exact_plan_cost": exact.as_ref().ok(),
        "exact_plan_cost_error": exact.as_ref().err().map(|e| e.to_string()),
        "initial_star_cost": exact_plan_cost(&plan0, alpha, default_merge_tol(&plan0))?,
        "trunk_clusters": { "radius": c, "gap": gap, "initial": initial_clusters, "stages": clusters },
        "iterations": run.trace.records.len(),
        "stages": stage_reports(&run.trace, Some(&clusters)),
    });
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(CommandOutcome { summary, failures: vec![] })
}

/// Tree-shape optimization from a fan of straight branches.
pub fn cmd_treeopt(cfg: &RunConfig) -> Result<CommandOutcome> {
    let f = &cfg.fan;
    let plan0 = build_fan_branches(f.branches, f.spread, f.length, f.segments, cfg.descent.m_init)?;
    let obj = cfg.objective;
    prepare_dir(&cfg.output_dir)?;
    let mut writer = RunWriter::new(&cfg.output_dir, cfg.svg.with_alpha(obj.alpha))?;
    writer.snapshot(0, &plan0)?;
    let first_eps = cfg.descent.eps_schedule[0];
    let final_eps = *cfg.descent.eps_schedule.last().unwrap();
    let initial = objective_j(&plan0, &obj.with_eps(first_eps))?;
    let run =
        eps_continuation_observed(&plan0, |eps| TreeProblem { cfg: obj.with_eps(eps) }, &cfg.descent, &mut writer)?;
    let last = objective_j(&run.plan, &obj.with_eps(final_eps))?;
    let initial_at_final_eps = objective_j(&plan0, &obj.with_eps(final_eps))?;
    let summary = json!({
        "experiment": "treeopt",
        "branches": f.branches,
        "objective": obj,
        "eps_schedule": cfg.descent.eps_schedule,
        "f_min": obj.f_min,
        "initial": initial,
        "initial_at_final_eps": initial_at_final_eps,
        "final": last,
        "iterations": run.trace.records.len(),
        "stages": stage_reports(&run.trace, None),
    });
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(CommandOutcome { summary, failures: vec![] })
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaRow {
    pub eps: f64,
    pub e_exact: f64,
    pub e_max: f64,
    pub e_avg: f64,
    pub gap_max: f64,
    pub gap_avg: f64,
}

pub const GAMMA_HEADER: &str = "eps,E_exact,E_max,E_avg,gap_max,gap_avg";

/// Exact and mollified energies of a fixed plan over a grid of `eps`.
/// Gaps are relative: `(E_exact - E) / E_exact`.
pub fn gamma_rows(
    plan: &PathPlan,
    alpha: f64,
    eps_grid: &[f64],
    kernel: crate::kernels::KernelSpec,
) -> Result<Vec<GammaRow>> {
    let e_exact = exact_plan_cost(plan, alpha, default_merge_tol(plan))?;
    eps_grid
        .iter()
        .map(|&eps| {
            let e_max = energy_max(plan, alpha, eps, kernel)?.value;
            let e_avg = energy_avg(plan, alpha, eps, kernel)?.value;
            Ok(GammaRow {
                eps,
                e_exact,
                e_max,
                e_avg,
                gap_max: (e_exact - e_max) / e_exact,
                gap_avg: (e_exact - e_avg) / e_exact,
            })
        })
        .collect()
}

/// Violations of the table's invariants: the max form stays below the
/// exact cost (up to `rel_tol`) and grows as `eps` shrinks.
pub fn gamma_violations(rows: &[GammaRow], rel_tol: f64) -> Vec<String> {
    let mut out = vec![];
    for r in rows {
        if r.e_max > r.e_exact * (1.0 + rel_tol) {
            out.push(format!(
                "eps={}: E_max={} exceeds E_exact={} beyond rel_tol {rel_tol}",
                r.eps, r.e_max, r.e_exact
            ));
        }
    }
    for w in rows.windows(2) {
        if w[1].e_max < w[0].e_max * (1.0 - 1e-12) {
            out.push(format!(
                "eps={} -> {}: E_max decreased from {} to {}",
                w[0].eps, w[1].eps, w[0].e_max, w[1].e_max
            ));
        }
    }
    out
}

pub fn cmd_gamma_table(cfg: &RunConfig) -> Result<CommandOutcome> {
    let g = &cfg.gamma;
    let m = &cfg.measure;
    let targets = half_circle_targets(m.n, m.radius, m.total_mass)?;
    let plan = build_star_plan(&targets, m.segments)?;
    let rows = gamma_rows(&plan, g.alpha, &g.eps_grid, g.kernel)?;
    let mut failures = gamma_violations(&rows, g.rel_tol);

    // At alpha = 1 every energy reduces to the mass-weighted length.
    let control = gamma_rows(&plan, 1.0, &g.eps_grid, g.kernel)?;
    let mut control_dev: f64 = 0.0;
    for r in &control {
        let dev = (r.e_max - r.e_exact).abs().max((r.e_avg - r.e_exact).abs()) / r.e_exact;
        control_dev = control_dev.max(dev);
        if dev > 1e-9 {
            failures.push(format!("alpha=1, eps={}: energies differ by {dev:e}", r.eps));
        }
    }

    prepare_dir(&cfg.output_dir)?;
    let mut csv = String::from(GAMMA_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.eps, r.e_exact, r.e_max, r.e_avg, r.gap_max, r.gap_avg));
    }
    write_durable(&cfg.output_dir.join("gamma_table.csv"), csv.as_bytes())?;
    let summary = json!({
        "experiment": "gamma-table",
        "n": m.n,
        "segments": m.segments,
        "alpha": g.alpha,
        "kernel": g.kernel,
        "rows": rows,
        "alpha_one_max_rel_deviation": control_dev,
        "failures": failures,
    });
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(CommandOutcome { summary, failures })
}

/// Explicit two-path geometry for the lower-semicontinuity counterexample.
///
/// The long path is coiled into a narrow zigzag so that, at a saturating
/// `eps`, every pair of points on either path sits well inside the kernel
/// support. Returns the plan with the short second path and the plan where
/// that path is replaced by a zigzag longer by `delta`.
pub fn counterexample_plans(c: &CounterexampleConfig) -> Result<(PathPlan, PathPlan)> {
    const COIL_WIDTH: f64 = 0.04;
    const COIL_HEIGHT: f64 = 0.06;
    const TEETH: usize = 4;
    let n = (c.l1 / COIL_WIDTH).ceil().max(1.0) as usize;
    let seg = c.l1 / n as f64;
    let rise = COIL_HEIGHT / n as f64;
    let run = (seg * seg - rise * rise).max(0.0).sqrt();
    let coil: Vec<Point> = (0..=n).map(|i| Point::new(if i % 2 == 1 { run } else { 0.0 }, rise * i as f64)).collect();

    let straight = vec![Point::ORIGIN, Point::new(0.0, c.l2)];
    let tooth = (c.l2 + c.delta) / TEETH as f64;
    let step = c.l2 / TEETH as f64;
    let amp = (tooth * tooth - step * step).sqrt();
    let zigzag: Vec<Point> =
        (0..=TEETH).map(|i| Point::new(if i % 2 == 1 { -amp } else { 0.0 }, step * i as f64)).collect();

    let short = PathPlan::new(vec![Path::new(coil.clone(), c.m1, true), Path::new(straight, c.m2, true)])?;
    let long = PathPlan::new(vec![Path::new(coil, c.m1, true), Path::new(zigzag, c.m2, true)])?;
    Ok((short, long))
}

pub fn cmd_counterexample(cfg: &RunConfig) -> Result<CommandOutcome> {
    let c = &cfg.counterexample;
    let mut failures = vec![];
    let cost_short = counterexample_cost(c.m1, c.m2, c.l1, c.l2, c.alpha);
    let cost_long = counterexample_cost(c.m1, c.m2, c.l1, c.l2 + c.delta, c.alpha);
    let derivative = counterexample_derivative(c.m1, c.m2, c.l1, c.l2, c.alpha);
    if !(cost_long < cost_short) {
        failures.push(format!("closed form: longer path not cheaper ({cost_long} vs {cost_short})"));
    }
    if !(derivative < 0.0) {
        failures.push(format!("closed form: derivative {derivative} is not negative"));
    }

    let (short, long) = counterexample_plans(c)?;
    let e_short = energy_avg(&short, c.alpha, c.eps, c.kernel)?.value;
    let e_long = energy_avg(&long, c.alpha, c.eps, c.kernel)?.value;
    if !(e_long < e_short) {
        failures.push(format!("explicit geometry: longer path not cheaper ({e_long} vs {e_short})"));
    }

    // Control: at alpha = 1 the cost is a weighted length, so the order flips.
    let control_short = counterexample_cost(c.m1, c.m2, c.l1, c.l2, 1.0);
    let control_long = counterexample_cost(c.m1, c.m2, c.l1, c.l2 + c.delta, 1.0);
    let control_e_short = energy_avg(&short, 1.0, c.eps, c.kernel)?.value;
    let control_e_long = energy_avg(&long, 1.0, c.eps, c.kernel)?.value;
    if !(control_long > control_short && control_e_long > control_e_short) {
        failures.push("alpha=1 control: longer path is not costlier".into());
    }

    let summary = json!({
        "experiment": "counterexample",
        "fixture": c,
        "closed_form": { "short": cost_short, "long": cost_long, "derivative": derivative },
        "explicit": { "short": e_short, "long": e_long },
        "alpha_one_control": {
            "closed_form": { "short": control_short, "long": control_long },
            "explicit": { "short": control_e_short, "long": control_e_long },
        },
        "failures": failures,
    });
    prepare_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(CommandOutcome { summary, failures })
}

/// A random strictly feasible branch plan: up to `max_branches` upward
/// random walks of up to `max_segments` steps, densities in `[0.2, 1.5]`.
pub fn random_branch_plan(rng: &mut ChaCha8Rng, max_branches: usize, max_segments: usize) -> BranchPlan {
    use std::f64::consts::PI;
    let n = rng.gen_range(1..=max_branches);
    let branches = (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=max_segments);
            let (mut x, mut y) = (vec![0.0], vec![0.0]);
            for _ in 0..k {
                let theta = rng.gen_range(0.2 * PI..0.8 * PI);
                let len = rng.gen_range(0.15..0.45);
                x.push(x.last().unwrap() + len * f64::cos(theta));
                y.push(y.last().unwrap() + len * f64::sin(theta));
            }
            let m = (0..k).map(|_| rng.gen_range(0.2..1.5)).collect();
            Branch { x, y, m }
        })
        .collect();
    BranchPlan { branches }
}

/// A random tree of up to `max_nodes` non-root nodes grown upward from the
/// origin, returned as one path per leaf. Paths through a common node share
/// their vertices exactly, so extracted multiplicities exceed single masses.
pub fn random_tree_plan(rng: &mut ChaCha8Rng, max_nodes: usize) -> PathPlan {
    use std::f64::consts::PI;
    let count = rng.gen_range(1..=max_nodes.max(1));
    let mut nodes = vec![Point::ORIGIN];
    let mut parent = vec![usize::MAX];
    for _ in 0..count {
        let p = rng.gen_range(0..nodes.len());
        let theta = rng.gen_range(0.1 * PI..0.9 * PI);
        let len = rng.gen_range(0.1..0.4);
        nodes.push(nodes[p] + Point::new(theta.cos(), theta.sin()) * len);
        parent.push(p);
    }
    let mut has_child = vec![false; nodes.len()];
    for &p in &parent[1..] {
        has_child[p] = true;
    }
    let paths = (1..nodes.len())
        .filter(|&leaf| !has_child[leaf])
        .map(|leaf| {
            let mut chain = vec![leaf];
            while parent[*chain.last().unwrap()] != usize::MAX {
                chain.push(parent[*chain.last().unwrap()]);
            }
            let vertices = chain.iter().rev().map(|&i| nodes[i]).collect();
            Path::new(vertices, rng.gen_range(0.1..1.0), true)
        })
        .collect();
    PathPlan { paths }
}

/// Marks the coordinates of every interval taking part in a (target,
/// source) pair whose distances come within `tol` of the support radius.
fn boundary_adjacent(plan: &BranchPlan, eps: f64, tol: f64) -> Vec<bool> {
    let table = plan.segment_table();
    let layout = GradientVector::zeros_like(plan);
    let mut mask = vec![false; layout.len()];
    let mut mark = |s: &crate::plan::Segment| {
        for v in [s.interval, s.interval + 1] {
            mask[layout.x_index(s.owner, v)] = true;
            mask[layout.y_index(s.owner, v)] = true;
        }
    };
    for t in &table.segments {
        for s in &table.segments {
            let (d2, _) = point_segment_dist_sq(s.start, s.end, t.midpoint);
            let near =
                [d2.sqrt(), s.start.dist(t.midpoint), s.end.dist(t.midpoint)].iter().any(|d| (d - eps).abs() < tol);
            if near {
                mark(t);
                mark(s);
            }
        }
    }
    mask
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub samples: usize,
    pub compared: usize,
    pub excluded_boundary: usize,
    pub skipped_samples: usize,
    pub worst_rel_error: f64,
    pub worst_sample: Option<usize>,
    pub worst_index: Option<usize>,
    pub worst_abs_error: f64,
}

/// Compares [`grad_objective`] with [`fd_gradient`] over seeded random plans.
pub fn gradcheck(obj: &ObjectiveConfig, gc: &crate::config::GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut report = GradcheckReport {
        samples: gc.samples,
        compared: 0,
        excluded_boundary: 0,
        skipped_samples: 0,
        worst_rel_error: 0.0,
        worst_sample: None,
        worst_index: None,
        worst_abs_error: 0.0,
    };
    for sample in 0..gc.samples {
        let plan = random_branch_plan(&mut rng, gc.max_branches, gc.max_segments);
        let mut analytic = match grad_objective(&plan, obj) {
            Ok(g) => g,
            Err(RamifyError::NonDifferentiable { .. }) => {
                report.skipped_samples += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if gc.corrupt {
            if let Some(i) = (0..analytic.len()).find(|&i| !analytic.is_pinned(i)) {
                analytic.data[i] += 1e-3 * analytic.data[i].abs().max(1.0);
            }
        }
        let fd = fd_gradient(&plan, obj, gc.h)?;
        let mask = boundary_adjacent(&plan, obj.eps, gc.boundary_exclusion);
        for (i, &excluded) in mask.iter().enumerate() {
            if analytic.is_pinned(i) {
                continue;
            }
            if excluded {
                report.excluded_boundary += 1;
                continue;
            }
            let (a, f) = (analytic.data[i], fd.data[i]);
            let scale = a.abs().max(f.abs());
            if scale <= gc.min_magnitude {
                continue;
            }
            report.compared += 1;
            let rel = (a - f).abs() / scale;
            if rel > report.worst_rel_error {
                report.worst_rel_error = rel;
                report.worst_sample = Some(sample);
                report.worst_index = Some(i);
                report.worst_abs_error = (a - f).abs();
            }
        }
    }
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<CommandOutcome> {
    let gc = &cfg.gradcheck;
    let report = gradcheck(&cfg.objective, gc)?;
    let mut failures = vec![];
    if report.worst_rel_error > gc.threshold {
        failures.push(format!(
            "worst relative error {:e} exceeds {:e} (sample {:?}, component {:?})",
            report.worst_rel_error, gc.threshold, report.worst_sample, report.worst_index
        ));
    }
    if report.compared == 0 {
        failures.push("no gradient components were compared".into());
    }
    let summary = json!({
        "experiment": "gradcheck",
        "objective": cfg.objective,
        "gradcheck": gc,
        "report": report,
        "failures": failures,
    });
    prepare_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(CommandOutcome { summary, failures })
}
