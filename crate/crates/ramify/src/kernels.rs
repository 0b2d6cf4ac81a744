//! Mollifier kernels `J` and their integrals along straight segments.
//!
//! Every kernel is non-increasing on `[0, inf)` with `J(0) = 1` and vanishes
//! at infinity. The rescaled kernel at scale `eps` is `J(r / eps)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RamifyError, Result};
use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelSpec {
    /// `exp(-r)`
    #[serde(rename = "exp")]
    Exponential,
    /// `1 / (1 + r)`
    #[serde(rename = "rational")]
    Rational,
    /// `max(0, 1 - r)`
    #[serde(rename = "triangular")]
    Triangular,
    /// `max(0, 1 - r^2)`
    #[serde(rename = "bump")]
    QuadraticBump,
}

impl KernelSpec {
    pub const ALL: [KernelSpec; 4] =
        [KernelSpec::Exponential, KernelSpec::Rational, KernelSpec::Triangular, KernelSpec::QuadraticBump];

    pub fn name(self) -> &'static str {
        match self {
            KernelSpec::Exponential => "exp",
            KernelSpec::Rational => "rational",
            KernelSpec::Triangular => "triangular",
            KernelSpec::QuadraticBump => "bump",
        }
    }

    pub fn has_compact_support(self) -> bool {
        matches!(self, KernelSpec::Triangular | KernelSpec::QuadraticBump)
    }

    /// `J(r)` without argument checking; `r` must be nonnegative.
    pub fn eval(self, r: f64) -> f64 {
        match self {
            KernelSpec::Exponential => (-r).exp(),
            KernelSpec::Rational => 1.0 / (1.0 + r),
            KernelSpec::Triangular => (1.0 - r).max(0.0),
            KernelSpec::QuadraticBump => (1.0 - r * r).max(0.0),
        }
    }

    /// `J'(r)`, taking the right derivative at kinks.
    pub fn deriv(self, r: f64) -> f64 {
        match self {
            KernelSpec::Exponential => -(-r).exp(),
            KernelSpec::Rational => -1.0 / ((1.0 + r) * (1.0 + r)),
            KernelSpec::Triangular => {
                if r < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            KernelSpec::QuadraticBump => {
                if r < 1.0 {
                    -2.0 * r
                } else {
                    0.0
                }
            }
        }
    }

    /// `int_0^inf J(r) dr`; infinite for the rational kernel.
    pub fn half_line_integral(self) -> f64 {
        match self {
            KernelSpec::Exponential => 1.0,
            KernelSpec::Rational => f64::INFINITY,
            KernelSpec::Triangular => 0.5,
            KernelSpec::QuadraticBump => 2.0 / 3.0,
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelSpec {
    type Err = RamifyError;

    fn from_str(s: &str) -> Result<Self> {
        KernelSpec::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RamifyError::Config(format!("unknown kernel '{s}' (expected exp|rational|triangular|bump)")))
    }
}

/// `J(r)` for the chosen kernel. Negative `r` is rejected.
pub fn kernel_eval(spec: KernelSpec, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(RamifyError::InvalidInput(format!("kernel argument must be nonnegative, got {r}")));
    }
    Ok(spec.eval(r))
}

/// Value and partial derivatives of a segment integral with respect to the
/// segment endpoints and the evaluation point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SegmentIntegralGrad {
    pub value: f64,
    pub d_start: Point,
    pub d_end: Point,
    pub d_x: Point,
}

/// Exact `int_0^1 (1/eps) max(0, 1 - R(u)^2/eps^2) |b - a| du` with
/// `R(u) = |a + u (b - a) - x|`.
pub fn bump_segment_integral(a: Point, b: Point, x: Point, eps: f64) -> f64 {
    bump_segment_integral_grad(a, b, x, eps).value
}

/// [`bump_segment_integral`] together with its gradient.
///
/// `R(u)^2` is the quadratic `|c + u d|^2` with `c = a - x`, `d = b - a`. The
/// integrand is supported between the roots of `R(u)^2 = eps^2`, clipped to
/// `[0, 1]`. The integrand vanishes at an unclipped root, so the moving
/// limits contribute nothing to the derivative.
pub fn bump_segment_integral_grad(a: Point, b: Point, x: Point, eps: f64) -> SegmentIntegralGrad {
    let d = b - a;
    let c = a - x;
    let qa = d.norm_sq();
    if qa == 0.0 {
        return SegmentIntegralGrad::default();
    }
    let eps2 = eps * eps;
    // Centered at the foot u0 of the perpendicular, c + u d = p + t d with
    // t = u - u0 and p orthogonal to d. Working in t avoids cancellation
    // when eps is small compared with the distance to the segment's start.
    let u0 = -c.dot(d) / qa;
    let foot = c + d * u0;
    let rho_sq = foot.norm_sq();
    if rho_sq >= eps2 {
        return SegmentIntegralGrad::default();
    }
    let half = ((eps2 - rho_sq) / qa).sqrt();
    let lo = (u0 - half).max(0.0);
    let hi = (u0 + half).min(1.0);
    if hi <= lo {
        return SegmentIntegralGrad::default();
    }
    let (t_lo, t_hi) = (lo - u0, hi - u0);
    let s0 = hi - lo;
    let t1 = 0.5 * (t_hi * t_hi - t_lo * t_lo);
    let t2 = (t_hi * t_hi * t_hi - t_lo * t_lo * t_lo) / 3.0;
    let g = s0 * (1.0 - rho_sq / eps2) - qa * t2 / eps2;
    let len = qa.sqrt();
    let value = (len / eps * g).max(0.0);

    // int (c + u d) du and int u (c + u d) du over [lo, hi].
    let m0 = foot * s0 + d * t1;
    let m1 = foot * (u0 * s0 + t1) + d * (u0 * t1 + t2);
    let dg_dc = m0 * (-2.0 / eps2);
    let dg_dd = m1 * (-2.0 / eps2);
    let di_dc = dg_dc * (len / eps);
    let di_dd = d * (g / (eps * len)) + dg_dd * (len / eps);
    SegmentIntegralGrad { value, d_start: di_dc - di_dd, d_end: di_dd, d_x: -di_dc }
}

/// Gauss-Legendre rule on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Newton iteration on P_n starting from the Chebyshev-like guess.
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, z);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            // Map [-1, 1] -> [0, 1].
            nodes[i] = 0.5 * (1.0 - z);
            nodes[n - 1 - i] = 0.5 * (1.0 + z);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, dp)
}

/// Gauss-Legendre approximation of `int_0^1 (1/eps) J(R(u)/eps) |b - a| du`.
pub fn kernel_segment_integral(spec: KernelSpec, a: Point, b: Point, x: Point, eps: f64, quad_points: usize) -> f64 {
    let rule = GaussLegendre::new(quad_points.max(1));
    kernel_segment_integral_grad(spec, &rule, a, b, x, eps).value
}

/// Breakpoints in `[0, 1]` that split the segment into pieces on which the
/// integrand is smooth and varies on the scale of the piece.
///
/// The integrand peaks at the foot `u0` of the perpendicular from `x`, so
/// the pieces grow geometrically away from it, starting at `eps`. Compact
/// kernels are clipped to the part of the segment inside the support, which
/// also puts a breakpoint on the kink at its edge.
fn quadrature_breakpoints(spec: KernelSpec, c: Point, d: Point, eps: f64) -> Vec<f64> {
    let qa = d.norm_sq();
    let len = qa.sqrt();
    let u0 = -c.dot(d) / qa;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if spec.has_compact_support() {
        let rho_sq = (c + d * u0).norm_sq();
        if rho_sq >= eps * eps {
            return vec![];
        }
        let half = (eps * eps - rho_sq).sqrt() / len;
        lo = lo.max(u0 - half);
        hi = hi.min(u0 + half);
        if hi <= lo {
            return vec![];
        }
    }
    let mut points = vec![lo, hi];
    if u0 > lo && u0 < hi {
        points.push(u0);
    }
    let mut step = eps / len;
    while step < hi - lo {
        for u in [u0 - step, u0 + step] {
            if u > lo && u < hi {
                points.push(u);
            }
        }
        step *= 4.0;
    }
    points.sort_by(f64::total_cmp);
    points
}

/// Quadrature segment integral with its gradient, reusing a prepared rule.
///
/// The rule is applied on each piece between [`quadrature_breakpoints`].
/// The integrand is continuous across interior breakpoints and vanishes at
/// a clipped support edge, so moving breakpoints do not contribute to the
/// gradient.
pub fn kernel_segment_integral_grad(
    spec: KernelSpec,
    rule: &GaussLegendre,
    a: Point,
    b: Point,
    x: Point,
    eps: f64,
) -> SegmentIntegralGrad {
    let d = b - a;
    let len = d.norm();
    if len == 0.0 {
        return SegmentIntegralGrad::default();
    }
    let c = a - x;
    let mut sum_j = 0.0;
    let mut g_c = Point::ORIGIN;
    let mut g_d = Point::ORIGIN;
    for piece in quadrature_breakpoints(spec, c, d, eps).windows(2) {
        let (u_lo, width) = (piece[0], piece[1] - piece[0]);
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            let u = u_lo + width * t;
            let w = w * width;
            let v = c + d * u;
            let r = v.norm();
            sum_j += w * spec.eval(r / eps);
            if r > 0.0 {
                let dj = w * spec.deriv(r / eps) / (eps * r);
                g_c = g_c + v * dj;
                g_d = g_d + v * (dj * u);
            }
        }
    }
    let value = len / eps * sum_j;
    let di_dc = g_c * (len / eps);
    let di_dd = d * (sum_j / (eps * len)) + g_d * (len / eps);
    SegmentIntegralGrad { value, d_start: di_dc - di_dd, d_end: di_dd, d_x: -di_dc }
}

/// Segment integral with the exact closed form for the bump kernel and
/// quadrature otherwise.
pub fn segment_integral_grad(
    spec: KernelSpec,
    rule: &GaussLegendre,
    a: Point,
    b: Point,
    x: Point,
    eps: f64,
) -> SegmentIntegralGrad {
    match spec {
        KernelSpec::QuadraticBump => bump_segment_integral_grad(a, b, x, eps),
        _ => kernel_segment_integral_grad(spec, rule, a, b, x, eps),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    /// Adaptive Simpson quadrature, independent of the closed forms.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn oracle(spec: KernelSpec, a: Point, b: Point, x: Point, eps: f64) -> f64 {
        let len = a.dist(b);
        adaptive_simpson(&|u: f64| spec.eval(a.lerp(b, u).dist(x) / eps) / eps * len, 0.0, 1.0, 1e-13)
    }

    #[test]
    fn kernels_at_zero_and_samples() {
        for k in KernelSpec::ALL {
            assert_eq!(kernel_eval(k, 0.0).unwrap(), 1.0);
        }
        assert_eq!(kernel_eval(KernelSpec::Rational, 1.0).unwrap(), 0.5);
        assert_eq!(kernel_eval(KernelSpec::QuadraticBump, 2.0).unwrap(), 0.0);
        assert_eq!(kernel_eval(KernelSpec::Triangular, 0.25).unwrap(), 0.75);
        assert!(kernel_eval(KernelSpec::Exponential, -1e-3).is_err());
    }

    #[test]
    fn kernel_names_round_trip() {
        for k in KernelSpec::ALL {
            assert_eq!(k.name().parse::<KernelSpec>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("gauss".parse::<KernelSpec>().is_err());
    }

    #[test]
    fn bump_integral_examples() {
        assert_eq!(bump_segment_integral(p(1.0, 1.0), p(1.0, 1.0), p(1.0, 1.0), 0.5), 0.0);
        assert_eq!(bump_segment_integral(p(0.0, 0.0), p(1.0, 0.0), p(5.0, 5.0), 1.0), 0.0);
        let v = bump_segment_integral(p(0.0, 0.0), p(1.0, 0.0), p(0.5, 0.0), 1.0);
        assert!((v - 11.0 / 12.0).abs() < 1e-15);
        let o = oracle(KernelSpec::QuadraticBump, p(0.0, 0.0), p(1.0, 0.0), p(0.5, 0.0), 1.0);
        assert!((o - 11.0 / 12.0).abs() < 1e-10);
    }

    #[test]
    fn quadrature_examples() {
        let v = kernel_segment_integral(KernelSpec::QuadraticBump, p(0.0, 0.0), p(1.0, 0.0), p(0.5, 0.0), 1.0, 32);
        assert!((v - 0.9166667).abs() < 1e-7);
        assert_eq!(
            kernel_segment_integral(KernelSpec::Exponential, p(1.0, 2.0), p(1.0, 2.0), p(0.0, 0.0), 1.0, 8),
            0.0
        );
        let v = kernel_segment_integral(KernelSpec::Exponential, p(0.0, 0.0), p(0.0, 1.0), p(0.0, 0.0), 1.0, 16);
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..=20 {
            let rule = GaussLegendre::new(n);
            let wsum: f64 = rule.weights.iter().sum();
            assert!((wsum - 1.0).abs() < 1e-13, "n={n}");
            let deg = 2 * n - 1;
            let integral: f64 = rule.nodes.iter().zip(&rule.weights).map(|(u, w)| w * u.powi(deg as i32)).sum();
            assert!((integral - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn bump_closed_form_matches_adaptive_quadrature() {
        let cases = [
            (p(0.0, 0.0), p(1.0, 0.0), p(0.3, 0.2), 0.5),
            (p(-0.2, 0.1), p(0.7, 0.9), p(0.1, 0.1), 0.3),
            (p(0.0, 0.0), p(3.0, 0.0), p(1.5, 0.95), 1.0),
            (p(0.4, 0.4), p(0.5, 0.6), p(0.45, 0.5), 2.0),
        ];
        for (a, b, x, eps) in cases {
            let exact = bump_segment_integral(a, b, x, eps);
            let o = oracle(KernelSpec::QuadraticBump, a, b, x, eps);
            assert!((exact - o).abs() <= 1e-9 * o.max(1e-12), "{exact} vs {o}");
        }
    }

    #[test]
    fn bump_gradient_matches_finite_differences() {
        let a = p(0.1, 0.2);
        let b = p(0.8, 0.5);
        let x = p(0.4, 0.45);
        let eps = 0.4;
        let g = bump_segment_integral_grad(a, b, x, eps);
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        let checks = [
            (g.d_start.x, fd(&|t| bump_segment_integral(a + p(t, 0.0), b, x, eps))),
            (g.d_start.y, fd(&|t| bump_segment_integral(a + p(0.0, t), b, x, eps))),
            (g.d_end.x, fd(&|t| bump_segment_integral(a, b + p(t, 0.0), x, eps))),
            (g.d_end.y, fd(&|t| bump_segment_integral(a, b + p(0.0, t), x, eps))),
            (g.d_x.x, fd(&|t| bump_segment_integral(a, b, x + p(t, 0.0), eps))),
            (g.d_x.y, fd(&|t| bump_segment_integral(a, b, x + p(0.0, t), eps))),
        ];
        for (an, num) in checks {
            assert!((an - num).abs() < 1e-8 * an.abs().max(1.0), "{an} vs {num}");
        }
    }

    #[test]
    fn quadrature_resolves_narrow_kernels() {
        let rule = GaussLegendre::new(16);
        let (a, b) = (p(0.0, 0.0), p(0.0, 0.4));
        for eps in [0.05, 0.01, 1e-3, 1e-5] {
            let x = p(0.0, 0.137);
            let tri = kernel_segment_integral_grad(KernelSpec::Triangular, &rule, a, b, x, eps).value;
            assert!((tri - 1.0).abs() < 1e-12, "eps={eps}: {tri}");
            let bump = kernel_segment_integral_grad(KernelSpec::QuadraticBump, &rule, a, b, x, eps).value;
            assert!((bump - 4.0 / 3.0).abs() < 1e-12, "eps={eps}: {bump}");
            let exp = kernel_segment_integral_grad(KernelSpec::Exponential, &rule, a, b, x, eps).value;
            let expected = 2.0 - (-0.137 / eps).exp() - (-0.263 / eps).exp();
            assert!((exp - expected).abs() < 1e-12, "eps={eps}: {exp}");
            let off = p(0.3 * eps, 0.2);
            let closed = bump_segment_integral(a, b, off, eps);
            let quad = kernel_segment_integral_grad(KernelSpec::QuadraticBump, &rule, a, b, off, eps).value;
            assert!((closed - quad).abs() < 1e-12 * closed, "eps={eps}: {closed} vs {quad}");
        }
    }

    #[test]
    fn narrow_quadrature_gradient_matches_finite_differences() {
        let rule = GaussLegendre::new(16);
        let (a, b, x, eps) = (p(0.1, 0.2), p(0.8, 0.5), p(0.4, 0.34), 0.02);
        for spec in KernelSpec::ALL {
            let g = kernel_segment_integral_grad(spec, &rule, a, b, x, eps);
            let f = |a: Point, b: Point, x: Point| kernel_segment_integral_grad(spec, &rule, a, b, x, eps).value;
            let h = 1e-7;
            let checks = [
                (g.d_start.x, (f(a + p(h, 0.0), b, x) - f(a - p(h, 0.0), b, x)) / (2.0 * h)),
                (g.d_end.y, (f(a, b + p(0.0, h), x) - f(a, b - p(0.0, h), x)) / (2.0 * h)),
                (g.d_x.x, (f(a, b, x + p(h, 0.0)) - f(a, b, x - p(h, 0.0))) / (2.0 * h)),
                (g.d_x.y, (f(a, b, x + p(0.0, h)) - f(a, b, x - p(0.0, h))) / (2.0 * h)),
            ];
            for (an, num) in checks {
                assert!((an - num).abs() < 1e-6 * an.abs().max(1.0), "{spec}: {an} vs {num}");
            }
        }
    }

    #[test]
    fn quadrature_gradient_matches_finite_differences() {
        let rule = GaussLegendre::new(24);
        let a = p(0.1, 0.2);
        let b = p(0.8, 0.5);
        let x = p(0.4, 0.65);
        for spec in [KernelSpec::Exponential, KernelSpec::Rational] {
            let g = kernel_segment_integral_grad(spec, &rule, a, b, x, 0.3);
            let f = |a: Point, b: Point, x: Point| kernel_segment_integral_grad(spec, &rule, a, b, x, 0.3).value;
            let h = 1e-6;
            let num = (f(a, b + p(0.0, h), x) - f(a, b - p(0.0, h), x)) / (2.0 * h);
            assert!((g.d_end.y - num).abs() < 1e-8);
            let num = (f(a + p(h, 0.0), b, x) - f(a - p(h, 0.0), b, x)) / (2.0 * h);
            assert!((g.d_start.x - num).abs() < 1e-8);
            let num = (f(a, b, x + p(0.0, h)) - f(a, b, x - p(0.0, h))) / (2.0 * h);
            assert!((g.d_x.y - num).abs() < 1e-8);
        }
    }
}
