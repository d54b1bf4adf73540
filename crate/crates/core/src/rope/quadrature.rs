//! Large-dimension limit of the normalized similarity curve,
//! `∫₀¹ cos(x·θ^{-p}) dp`.
//!
//! The integrand oscillates fast near `p = 0` once `x` is large (the phase
//! `x·θ^{-p}` sweeps from `x` down to `x/θ`), so panels are placed uniformly in
//! a graded coordinate `w(p) = p + (x − x·θ^{-p}) / max(x, 1)` that advances
//! with the accumulated phase. Each panel then spans at most ~2 radians.

/// Default panel count.
pub const DEFAULT_IDEAL_STEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuadratureRule {
    /// Composite midpoint on a uniform grid in `p`.
    Midpoint,
    /// Composite 5-point Gauss–Legendre on the phase-graded grid.
    #[default]
    GradedGaussLegendre,
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// `lim_{d→∞} (1/d)·Σ_j 2·cos(x·θ_j)` evaluated by quadrature with `steps`
/// panels of the default rule.
pub fn ideal_curve(theta: f64, x: f64, steps: usize) -> f64 {
    ideal_curve_with(theta, x, steps, QuadratureRule::default())
}

pub fn ideal_curve_with(theta: f64, x: f64, steps: usize, rule: QuadratureRule) -> f64 {
    let steps = steps.max(1);
    if x == 0.0 {
        return 1.0;
    }
    let integrand = |p: f64| (x * theta.powf(-p)).cos();
    match rule {
        QuadratureRule::Midpoint => {
            let h = 1.0 / steps as f64;
            (0..steps).map(|i| integrand((i as f64 + 0.5) * h)).sum::<f64>() * h
        }
        QuadratureRule::GradedGaussLegendre => {
            let scale = x.abs().max(1.0);
            let graded = |p: f64| p + (x - x * theta.powf(-p)) / scale;
            let slope = |p: f64| 1.0 + x * theta.ln() * theta.powf(-p) / scale;
            let total = graded(1.0);
            let mut acc = 0.0;
            let mut left = 0.0;
            for i in 1..=steps {
                let right = if i == steps {
                    1.0
                } else {
                    invert_concave(&graded, &slope, total * i as f64 / steps as f64, left)
                };
                let (mid, half) = (0.5 * (left + right), 0.5 * (right - left));
                let panel: f64 = GL5_NODES
                    .iter()
                    .zip(GL5_WEIGHTS)
                    .map(|(&t, w)| w * integrand(mid + half * t))
                    .sum();
                acc += half * panel;
                left = right;
            }
            acc
        }
    }
}

/// Solves `f(p) = target` on `[lo, 1]` for increasing concave `f` with
/// `f(lo) <= target`. Newton steps from the left never overshoot.
fn invert_concave(f: &impl Fn(f64) -> f64, df: &impl Fn(f64) -> f64, target: f64, lo: f64) -> f64 {
    let mut p = lo;
    for _ in 0..100 {
        let r = target - f(p);
        if r <= 0.0 {
            break;
        }
        let step = r / df(p);
        p += step;
        if step <= f64::EPSILON * p {
            break;
        }
    }
    p.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    // (Ci(x) − Ci(x/θ)) / ln θ for θ = 10⁴, via scipy.special.sici
    const CLOSED_FORM: [(f64, f64); 6] = [
        (1.0, 0.973_962_771_209_820_9),
        (10.0, 0.682_394_263_104_480_9),
        (100.0, 0.436_773_293_208_558_9),
        (1000.0, 0.187_690_642_511_778_97),
        (5000.0, 0.019_281_207_010_358_185),
        (10000.0, -0.036_636_482_604_311_42),
    ];

    #[test]
    fn zero_distance_is_one_for_any_theta() {
        for theta in [2.0, 500.0, 10000.0, 1e6] {
            assert_eq!(ideal_curve(theta, 0.0, DEFAULT_IDEAL_STEPS), 1.0);
        }
    }

    #[test]
    fn matches_cosine_integral_closed_form() {
        for (x, want) in CLOSED_FORM {
            let got = ideal_curve(10000.0, x, DEFAULT_IDEAL_STEPS);
            assert!((got - want).abs() < 1e-9, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn refinement_changes_little() {
        for x in [1.0, 10.0, 100.0, 1000.0, 3000.0, 7000.0, 10000.0] {
            let coarse = ideal_curve(10000.0, x, 10_000);
            let fine = ideal_curve(10000.0, x, 100_000);
            assert!((coarse - fine).abs() < 1e-6, "x={x}");
            let doubled = ideal_curve(10000.0, x, 2 * DEFAULT_IDEAL_STEPS);
            assert!((doubled - fine).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn midpoint_agrees_at_moderate_distance() {
        for x in [1.0, 10.0, 100.0] {
            let m = ideal_curve_with(10000.0, x, DEFAULT_IDEAL_STEPS, QuadratureRule::Midpoint);
            let g = ideal_curve(10000.0, x, DEFAULT_IDEAL_STEPS);
            assert!((m - g).abs() < 1e-6);
        }
    }
}
