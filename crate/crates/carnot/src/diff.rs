//! Derivative probes for Lipschitz functions on step-2 groups: directional
//! derivatives along horizontal flows, difference-quotient scans over a
//! gauge sphere, the maximality test, the perturbed-line construction, and
//! the two-curve deviation estimate.
//!
//! Differentiability is never decided by a boolean: scans report residual
//! curves and the caller quantifies their decay.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::algebra::{
    exp_horizontal, free_pairs, horizontal_isometry, same_structure, GroupPoint, GroupStructure,
    HorizontalVector, IsometryMap,
};
use crate::curves::{ControlCurve, Segment};
use crate::distance::{cc_bracket, koranyi, synthesize_curve};
use crate::error::{CarnotError, Result};
use crate::optim::OptimizerBudget;

/// A real-valued function on the group, with an optional analytic
/// Lipschitz constant for tests that need the exact value.
pub struct ScalarField {
    evaluator: Box<dyn Fn(&GroupPoint) -> f64 + Sync + Send>,
    declared_lipschitz: Option<f64>,
}

impl ScalarField {
    pub fn new(
        evaluator: impl Fn(&GroupPoint) -> f64 + Sync + Send + 'static,
        declared_lipschitz: Option<f64>,
    ) -> ScalarField {
        ScalarField {
            evaluator: Box::new(evaluator),
            declared_lipschitz,
        }
    }

    /// The group-linear function `x -> <p(x), v>`; its Lipschitz constant
    /// is `|v|`.
    pub fn g_linear(v: Vec<f64>) -> ScalarField {
        let lip = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        ScalarField::new(
            move |x: &GroupPoint| {
                x.horizontal()
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            },
            Some(lip),
        )
    }

    /// The coordinate function `x -> x_i` on the horizontal layer.
    pub fn coordinate(i: usize) -> ScalarField {
        ScalarField::new(move |x: &GroupPoint| x.horizontal()[i], Some(1.0))
    }

    /// Distance from the origin evaluated through bracket midpoints.
    pub fn distance_from_origin(budget: OptimizerBudget) -> ScalarField {
        ScalarField::new(
            move |x: &GroupPoint| {
                let zero = GroupPoint::zero(x.structure());
                match cc_bracket(&zero, x, &budget) {
                    Ok(b) => b.midpoint(),
                    Err(_) => f64::NAN,
                }
            },
            Some(1.0),
        )
    }

    pub fn evaluate(&self, x: &GroupPoint) -> Result<f64> {
        let v = (self.evaluator)(x);
        if !v.is_finite() {
            return Err(CarnotError::Evaluation(
                "scalar field produced a non-finite value".into(),
            ));
        }
        Ok(v)
    }

    pub fn declared_lipschitz(&self) -> Option<f64> {
        self.declared_lipschitz
    }

    /// Check `|f(x) - f(y)| <= c * upper(d(x, y))` on sample pairs for the
    /// declared constant.
    pub fn validate_declared(
        &self,
        pairs: &[(GroupPoint, GroupPoint)],
        budget: &OptimizerBudget,
    ) -> Result<bool> {
        let c = self.declared_lipschitz.ok_or_else(|| {
            CarnotError::InvalidArgument("no declared Lipschitz constant".into())
        })?;
        for (x, y) in pairs {
            let df = (self.evaluate(x)? - self.evaluate(y)?).abs();
            let upper = cc_bracket(x, y, budget)?.upper;
            if df > c * upper + 1e-9 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Geometric step schedule `0.1 * 2^{-k}`, `k = 0..7`.
pub fn default_schedule() -> Vec<f64> {
    (0..8).map(|k| 0.1 * 0.5f64.powi(k)).collect()
}

fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.len() < 4 {
        return Err(CarnotError::InvalidArgument(
            "schedule needs at least 4 steps".into(),
        ));
    }
    for w in schedule.windows(2) {
        if !(w[1] < w[0]) {
            return Err(CarnotError::InvalidArgument(
                "schedule must be strictly decreasing".into(),
            ));
        }
    }
    if schedule.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(CarnotError::InvalidArgument(
            "schedule steps must be positive".into(),
        ));
    }
    Ok(())
}

/// Difference-quotient record for one directional derivative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    /// Extrapolated limit of the symmetric quotients.
    pub value: f64,
    pub step_schedule: Vec<f64>,
    pub quotients: Vec<f64>,
    /// `|quotient_k - value|`, one per step.
    pub residuals: Vec<f64>,
}

/// Symmetric difference quotients of `f` along the horizontal flow
/// `t -> x exp(t E)`, with a Richardson-extrapolated limit.
pub fn directional_derivative(
    f: &ScalarField,
    x: &GroupPoint,
    direction: &HorizontalVector,
    schedule: &[f64],
) -> Result<DerivativeEstimate> {
    validate_schedule(schedule)?;
    let mut quotients = Vec::with_capacity(schedule.len());
    for &t in schedule {
        let fp = f.evaluate(&x.flow_line(direction, t)?)?;
        let fm = f.evaluate(&x.flow_line(direction, -t)?)?;
        quotients.push((fp - fm) / (2.0 * t));
    }
    // Two-point Richardson step on the finest pair, assuming the symmetric
    // quotient error is quadratic in the step.
    let n = schedule.len();
    let (t_prev, t_last) = (schedule[n - 2], schedule[n - 1]);
    let (q_prev, q_last) = (quotients[n - 2], quotients[n - 1]);
    let denom = t_prev * t_prev - t_last * t_last;
    let value = (q_last * t_prev * t_prev - q_prev * t_last * t_last) / denom;
    let residuals = quotients.iter().map(|q| (q - value).abs()).collect();
    Ok(DerivativeEstimate {
        value,
        step_schedule: schedule.to_vec(),
        quotients,
        residuals,
    })
}

/// Deterministic sample of `count` directions of gauge one. Always contains
/// the horizontal directions `+-e_i` and the pure vertical directions; the
/// rest comes from a Kronecker low-discrepancy sequence normalized onto the
/// gauge sphere by dilations.
pub fn gauge_shell(structure: &Arc<GroupStructure>, count: usize) -> Result<Vec<GroupPoint>> {
    let r = structure.rank();
    let m = structure.vertical_dim();
    let dim = structure.dim();
    let mut shell = Vec::with_capacity(count);

    for i in 0..r {
        for sign in [1.0, -1.0] {
            let mut c = vec![0.0; dim];
            c[i] = sign;
            shell.push(GroupPoint::from_coordinates(structure, &c)?);
        }
    }
    for k in 0..m {
        for sign in [1.0, -1.0] {
            let mut c = vec![0.0; dim];
            c[r + k] = sign;
            shell.push(GroupPoint::from_coordinates(structure, &c)?);
        }
    }

    // Kronecker sequence driven by the generalized golden ratio of the
    // coordinate dimension.
    let mut gamma = 1.5f64;
    for _ in 0..64 {
        gamma = (1.0 + gamma).powf(1.0 / (dim as f64 + 1.0));
    }
    let alphas: Vec<f64> = (1..=dim).map(|i| (1.0 / gamma.powi(i as i32)).fract()).collect();
    let mut n = 0u64;
    while shell.len() < count {
        n += 1;
        let coords: Vec<f64> = alphas
            .iter()
            .map(|a| 2.0 * ((0.5 + a * n as f64).fract()) - 1.0)
            .collect();
        let raw = GroupPoint::from_coordinates(structure, &coords)?;
        let g = koranyi(&raw);
        if g < 1e-3 {
            continue;
        }
        shell.push(raw.dilate(1.0 / g)?);
    }
    shell.truncate(count.max(shell.len().min(count)));
    Ok(shell)
}

/// Result of a difference-quotient scan over a gauge shell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PansuScanReport {
    /// Least-squares fit `V` of the finest quotients against `p(xi)`.
    pub candidate: Vec<f64>,
    /// Max residual `|quotient - <p(xi), V>|` over the shell and the two
    /// finest steps.
    pub worst_residual: f64,
    pub schedule: Vec<f64>,
    /// Max residual over the shell, one entry per step.
    pub per_step_max_residual: Vec<f64>,
    pub directions: usize,
    pub flags: Vec<String>,
}

impl PansuScanReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

/// Scan the quotients `(f(x delta_t(xi)) - f(x)) / t` over a shell of
/// directions. A small, decaying residual is numerical evidence that the
/// quotients converge to a group-linear map of `xi`; growth is evidence
/// against.
pub fn pansu_scan(
    f: &ScalarField,
    x: &GroupPoint,
    shell: &[GroupPoint],
    schedule: &[f64],
) -> Result<PansuScanReport> {
    validate_schedule(schedule)?;
    if shell.is_empty() {
        return Err(CarnotError::InvalidArgument("shell must be nonempty".into()));
    }
    let structure = x.structure();
    let r = structure.rank();
    let fx = f.evaluate(x)?;

    let mut quotients = vec![vec![0.0; schedule.len()]; shell.len()];
    for (si, xi) in shell.iter().enumerate() {
        if !same_structure(structure, xi.structure()) {
            return Err(CarnotError::StructureMismatch(
                "shell direction in a different group".into(),
            ));
        }
        for (ti, &t) in schedule.iter().enumerate() {
            let point = x.multiply(&xi.dilate(t)?)?;
            quotients[si][ti] = (f.evaluate(&point)? - fx) / t;
        }
    }

    // Fit the candidate on the finest step.
    let last = schedule.len() - 1;
    let mut ata = DMatrix::zeros(r, r);
    let mut atb = DVector::zeros(r);
    for (si, xi) in shell.iter().enumerate() {
        let p = DVector::from_column_slice(xi.horizontal());
        ata += &p * p.transpose();
        atb += &p * quotients[si][last];
    }
    let candidate = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| CarnotError::Evaluation("shell projections are degenerate".into()))?;

    let residual = |si: usize, ti: usize| -> f64 {
        let lin: f64 = shell[si]
            .horizontal()
            .iter()
            .zip(candidate.iter())
            .map(|(a, b)| a * b)
            .sum();
        (quotients[si][ti] - lin).abs()
    };
    let per_step_max_residual: Vec<f64> = (0..schedule.len())
        .map(|ti| (0..shell.len()).map(|si| residual(si, ti)).fold(0.0, f64::max))
        .collect();
    let worst_residual = per_step_max_residual[schedule.len().saturating_sub(2)..]
        .iter()
        .fold(0.0f64, |a, &b| a.max(b));

    Ok(PansuScanReport {
        candidate: candidate.as_slice().to_vec(),
        worst_residual,
        schedule: schedule.to_vec(),
        per_step_max_residual,
        directions: shell.len(),
        flags: Vec::new(),
    })
}

/// Random sampling plan for derivative-based Lipschitz estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSpec {
    pub count: usize,
    pub radius: f64,
    pub seed: u64,
}

/// Lower estimate of the Lipschitz constant as the supremum of
/// `|directional derivative|` over sampled base points and unit directions.
/// The basis directions and a pilot gradient direction are always included,
/// so group-linear functions evaluate exactly.
pub fn lipschitz_from_derivatives(
    f: &ScalarField,
    structure: &Arc<GroupStructure>,
    spec: &SampleSpec,
    schedule: &[f64],
) -> Result<f64> {
    use rand::prelude::*;
    validate_schedule(schedule)?;
    let r = structure.rank();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sup: f64 = 0.0;

    let eval_at = |x: &GroupPoint, e: &HorizontalVector, sup: &mut f64| -> Result<()> {
        let d = directional_derivative(f, x, e, schedule)?;
        *sup = sup.max(d.value.abs());
        Ok(())
    };

    let zero = GroupPoint::zero(structure);
    let mut gradient = vec![0.0; r];
    for i in 0..r {
        let e = HorizontalVector::basis(r, i);
        let d = directional_derivative(f, &zero, &e, schedule)?;
        gradient[i] = d.value;
        sup = sup.max(d.value.abs());
    }
    let gnorm: f64 = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    if gnorm > 1e-12 {
        let e = HorizontalVector::new(gradient.iter().map(|g| g / gnorm).collect())?;
        eval_at(&zero, &e, &mut sup)?;
    }

    for _ in 0..spec.count {
        let coords: Vec<f64> = (0..structure.dim())
            .map(|_| rng.gen_range(-spec.radius..spec.radius))
            .collect();
        let x = GroupPoint::from_coordinates(structure, &coords)?;
        let raw: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = match HorizontalVector::new(raw)?.normalized() {
            Ok(e) => e,
            Err(_) => continue,
        };
        eval_at(&x, &e, &mut sup)?;
        for i in 0..r {
            eval_at(&x, &HorizontalVector::basis(r, i), &mut sup)?;
        }
    }
    Ok(sup)
}

/// Parameters of the perturbed-line construction. `delta` plays the role of
/// the aspect ratio between the perturbation radius and the window
/// half-width `s = radius / delta`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationParams {
    pub eta: f64,
    pub delta: f64,
    pub radius: f64,
}

impl PerturbationParams {
    pub fn s(&self) -> f64 {
        self.radius / self.delta
    }
}

/// Largest `delta` for which the construction certifies the Lipschitz bound
/// `1 + eta * delta`, derived from the synthesis constants.
pub fn delta_threshold(eta: f64, structure: &GroupStructure) -> f64 {
    let p = (structure.rank() * (structure.rank() - 1) / 2) as f64;
    let quarter: f64 = 0.25 * (1.0 - 1e-9);
    quarter
        .min(eta / 16.0)
        .min(eta / (32.0 * p.powi(4)))
        .min(eta / (576.0 * p * p))
}

/// Worst-case bound on `|(p . g)' - p(E)| / delta` for curves produced by
/// [`perturbed_line`] under valid parameters.
pub fn deviation_ratio_bound(structure: &GroupStructure) -> f64 {
    let p = (structure.rank() * (structure.rank() - 1) / 2) as f64;
    f64::max(8.0 * p * p, 48.0 * p) + 4.0
}

/// Output of the perturbed-line construction. The curve parameter `t` of
/// the underlying statement corresponds to curve time `t + param_origin`.
#[derive(Debug, Clone)]
pub struct PerturbedLineReport {
    pub curve: ControlCurve,
    pub zeta: f64,
    pub s: f64,
    pub param_origin: f64,
    /// Certified Lipschitz bound `1 + eta * delta`.
    pub lip_bound: f64,
    pub measured_lipschitz: f64,
    /// Max over segments of `|control - p(E)|`.
    pub measured_deviation: f64,
    /// `measured_deviation / delta`.
    pub deviation_ratio: f64,
}

/// Half-window curve: from `0` to `(s, 0, ..., 0) . delta_radius(u)` on
/// `[0, s + zeta]`, built as a synthesis piece up to `(s/2, 0, ..., 0, *)`
/// followed by the lift of a straight planar line.
fn claim_half(
    structure: &Arc<GroupStructure>,
    s: f64,
    radius: f64,
    u: &GroupPoint,
    zeta: f64,
) -> Result<ControlCurve> {
    let r = structure.rank();
    let mut shift = vec![0.0; structure.dim()];
    shift[0] = s;
    let far = GroupPoint::from_coordinates(structure, &shift)?;
    let y = far.multiply(&u.dilate(radius)?)?;

    // Straight-line lift from y back to horizontal point (s/2, 0, ..., 0).
    let mut mid_h = vec![0.0; r];
    mid_h[0] = s / 2.0;
    let back: Vec<f64> = mid_h
        .iter()
        .zip(y.horizontal())
        .map(|(m, h)| m - h)
        .collect();
    let to_mid = ControlCurve::new(
        y.clone(),
        vec![Segment {
            duration: 1.0,
            control: back,
        }],
    )?;
    let z = to_mid.endpoint().clone();

    let synth = synthesize_curve(&z)?;
    let alpha = synth.curve.time_rescaled(s / 2.0)?;

    let beta_duration = s / 2.0 + zeta;
    if beta_duration <= 0.0 {
        return Err(CarnotError::InvalidArgument(
            "window too narrow for the line piece".into(),
        ));
    }
    let beta_control: Vec<f64> = y
        .horizontal()
        .iter()
        .zip(z.horizontal())
        .map(|(a, b)| (a - b) / beta_duration)
        .collect();
    let beta = ControlCurve::new(
        z,
        vec![Segment {
            duration: beta_duration,
            control: beta_control,
        }],
    )?;
    alpha.concat(&beta)
}

/// Perturb the horizontal line `t -> x + t E(x)` so that it passes through
/// `x . delta_radius(u)` at parameter `zeta = radius <u, E(0)>`, while
/// keeping the Lipschitz constant within `1 + eta * delta` and the planar
/// velocity within `O(delta)` of `p(E)`.
pub fn perturbed_line(
    x: &GroupPoint,
    u: &GroupPoint,
    direction: &HorizontalVector,
    params: &PerturbationParams,
) -> Result<PerturbedLineReport> {
    let structure = x.structure();
    if !structure.is_free() {
        return Err(CarnotError::InvalidArgument(
            "perturbed lines require the free structure".into(),
        ));
    }
    if !same_structure(structure, u.structure()) {
        return Err(CarnotError::StructureMismatch(
            "perturbation target in a different group".into(),
        ));
    }
    if (direction.omega() - 1.0).abs() > 1e-12 {
        return Err(CarnotError::InvalidArgument(
            "direction must have unit norm".into(),
        ));
    }
    if koranyi(u) > 1.0 + 1e-12 {
        return Err(CarnotError::InvalidArgument(
            "perturbation target must have gauge at most one".into(),
        ));
    }
    let (eta, delta, radius) = (params.eta, params.delta, params.radius);
    if !(eta > 0.0) || !(delta > 0.0) || !(radius > 0.0) {
        return Err(CarnotError::InvalidArgument(
            "perturbation parameters must be positive".into(),
        ));
    }
    if delta >= 0.25 || radius >= delta {
        return Err(CarnotError::InvalidArgument(
            "need radius < delta < 1/4".into(),
        ));
    }
    if delta > delta_threshold(eta, structure) {
        return Err(CarnotError::InvalidArgument(format!(
            "delta {delta} exceeds the certified threshold {}",
            delta_threshold(eta, structure)
        )));
    }

    // Reduce to x = 0 and direction e_1.
    let align = horizontal_isometry(&exp_horizontal(structure, direction)?)?;
    let u_aligned = align.apply(u)?;
    let s = params.s();
    let zeta = radius * u_aligned.horizontal()[0];

    let first = claim_half(structure, s, radius, &u_aligned, zeta)?;

    // Mirror across the e_1 = 0 hyperplane for the outgoing half.
    let r = structure.rank();
    let mut mirror_mat = DMatrix::identity(r, r);
    mirror_mat[(0, 0)] = -1.0;
    let mirror = IsometryMap::from_orthogonal(structure, mirror_mat)?;
    let u_mirrored = mirror.apply(&u_aligned)?;
    let second_forward = claim_half(structure, s, radius, &u_mirrored, -zeta)?.mapped(&mirror)?;
    let second = second_forward.reversed();

    let mut start_c = vec![0.0; structure.dim()];
    start_c[0] = -2.0 * s;
    let start = GroupPoint::from_coordinates(structure, &start_c)?;
    let mut e1 = vec![0.0; r];
    e1[0] = 1.0;

    let mut segments: Vec<Segment> = vec![Segment {
        duration: s,
        control: e1.clone(),
    }];
    segments.extend(first.segments().iter().cloned());
    segments.extend(second.segments().iter().cloned());
    segments.push(Segment {
        duration: s,
        control: e1,
    });
    let reduced = ControlCurve::new(start, segments)?;

    let curve = reduced.mapped(&align.inverse())?.translated(x)?;

    let measured_lipschitz = curve.measure().lipschitz;
    let p_e = direction.coefficients();
    let measured_deviation = curve
        .segments()
        .iter()
        .map(|seg| {
            seg.control
                .iter()
                .zip(p_e)
                .map(|(c, e)| (c - e) * (c - e))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);

    Ok(PerturbedLineReport {
        curve,
        zeta,
        s,
        param_origin: 2.0 * s,
        lip_bound: 1.0 + eta * delta,
        measured_lipschitz,
        measured_deviation,
        deviation_ratio: measured_deviation / delta,
    })
}

/// Result of the coordinatewise two-curve deviation estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviationReport {
    pub ok: bool,
    pub worst_ratio: f64,
    pub samples: usize,
}

/// Check the coordinate form of the deviation estimate: two curves with
/// Lipschitz constant at most `S`, equal at time `c`, whose planar
/// velocities differ by at most `A <= 1`, satisfy
///
/// ```text
/// sum_i |h_i - g_i| + sum_{i>j} |h_ij - g_ij + (g_i h_j - g_j h_i)/2|^{1/2}
///     <= (r + 2 P sqrt(S)) sqrt(A) |t - c|
/// ```
///
/// at every sampled `t`.
pub fn deviation_check(
    g: &ControlCurve,
    h: &ControlCurve,
    s_bound: f64,
    a_bound: f64,
    c: f64,
) -> Result<DeviationReport> {
    let structure = g.structure();
    if !structure.is_free() {
        return Err(CarnotError::InvalidArgument(
            "the coordinate form is stated on the free structure".into(),
        ));
    }
    if !same_structure(structure, h.structure()) {
        return Err(CarnotError::StructureMismatch(
            "curves live on different groups".into(),
        ));
    }
    if !(0.0 <= a_bound && a_bound <= 1.0) {
        return Err(CarnotError::InvalidArgument(
            "velocity deviation bound must lie in [0, 1]".into(),
        ));
    }
    let total = g.total_duration();
    if (total - h.total_duration()).abs() > 1e-12 * total.max(1.0) {
        return Err(CarnotError::InvalidArgument(
            "curves must share their time domain".into(),
        ));
    }
    if c < -1e-12 || c > total + 1e-12 {
        return Err(CarnotError::InvalidArgument(
            "meeting time outside the domain".into(),
        ));
    }
    let gc = g.point_at(c)?;
    let hc = h.point_at(c)?;
    let meet_err = gc
        .coordinates()
        .iter()
        .zip(hc.coordinates())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if meet_err > 1e-9 {
        return Err(CarnotError::InvalidArgument(format!(
            "curves do not meet at time {c} (off by {meet_err:.3e})"
        )));
    }
    for curve in [g, h] {
        if curve.measure().lipschitz > s_bound * (1.0 + 1e-9) {
            return Err(CarnotError::InvalidArgument(
                "curve exceeds the declared Lipschitz bound".into(),
            ));
        }
    }

    // Velocity gap on the merged breakpoint partition.
    let mut cuts: Vec<f64> = vec![0.0, total];
    for curve in [g, h] {
        let mut t = 0.0;
        for s in curve.segments() {
            t += s.duration;
            cuts.push(t);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let control_at = |curve: &ControlCurve, t: f64| -> Vec<f64> {
        let mut acc = 0.0;
        for s in curve.segments() {
            if t < acc + s.duration {
                return s.control.clone();
            }
            acc += s.duration;
        }
        curve
            .segments()
            .last()
            .map(|s| s.control.clone())
            .unwrap_or_else(|| vec![0.0; structure.rank()])
    };
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let cg = control_at(g, mid);
        let ch = control_at(h, mid);
        let gap: f64 = cg
            .iter()
            .zip(&ch)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if gap > a_bound * (1.0 + 1e-9) {
            return Err(CarnotError::InvalidArgument(
                "planar velocities differ by more than the declared bound".into(),
            ));
        }
    }

    // Sample the estimate at breakpoints and interior points.
    let r = structure.rank();
    let p = free_pairs(r);
    let rhs_const = r as f64 + 2.0 * p.len() as f64 * s_bound.sqrt();
    let mut samples = Vec::new();
    for w in cuts.windows(2) {
        for frac in [0.0, 0.25, 0.5, 0.75] {
            samples.push(w[0] + frac * (w[1] - w[0]));
        }
    }
    samples.push(total);

    let mut worst_ratio: f64 = 0.0;
    let mut used = 0;
    for &t in &samples {
        if (t - c).abs() < 1e-12 {
            continue;
        }
        used += 1;
        let gp = g.point_at(t)?;
        let hp = h.point_at(t)?;
        let mut lhs: f64 = gp
            .horizontal()
            .iter()
            .zip(hp.horizontal())
            .map(|(a, b)| (b - a).abs())
            .sum();
        for (slot, &(i, j)) in p.iter().enumerate() {
            let cross = 0.5
                * (gp.horizontal()[i] * hp.horizontal()[j]
                    - gp.horizontal()[j] * hp.horizontal()[i]);
            lhs += (hp.vertical()[slot] - gp.vertical()[slot] + cross).abs().sqrt();
        }
        let rhs = rhs_const * a_bound.sqrt() * (t - c).abs();
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        } else if lhs > 1e-12 {
            worst_ratio = f64::INFINITY;
        }
    }

    Ok(DeviationReport {
        ok: worst_ratio <= 1.0 + 1e-9,
        worst_ratio,
        samples: used,
    })
}

/// Outcome of the maximality probe at a point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaximalityReport {
    /// Whether the directional derivative attains the declared Lipschitz
    /// constant within the stated tolerance.
    pub maximal: bool,
    pub derivative: DerivativeEstimate,
    pub declared_lipschitz: f64,
    /// Fitted candidate differential.
    pub candidate: Vec<f64>,
    /// `Lip(f) * p(E)`, the differential a maximal derivative predicts.
    pub expected: Vec<f64>,
    /// `|candidate - expected|_inf`.
    pub max_deviation: f64,
    pub scan: PansuScanReport,
    pub flags: Vec<String>,
}

impl MaximalityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

/// Test the chain "maximal directional derivative => differential equals
/// `Lip(f) <p(.), p(E)>`". Runs the scan even when the maximality
/// precondition fails, flagging it.
pub fn maximality_test(
    f: &ScalarField,
    x: &GroupPoint,
    direction: &HorizontalVector,
    shell: &[GroupPoint],
    schedule: &[f64],
    tolerance: f64,
) -> Result<MaximalityReport> {
    let lip = f.declared_lipschitz().ok_or_else(|| {
        CarnotError::InvalidArgument("maximality test needs a declared Lipschitz constant".into())
    })?;
    if (direction.omega() - 1.0).abs() > 1e-9 {
        return Err(CarnotError::InvalidArgument(
            "direction must have unit norm".into(),
        ));
    }
    let derivative = directional_derivative(f, x, direction, schedule)?;
    let maximal = (derivative.value - lip).abs() <= tolerance * lip.max(1.0);
    let mut flags = Vec::new();
    if !maximal {
        flags.push(format!(
            "not maximal: derivative {} vs declared {}",
            derivative.value, lip
        ));
    }
    let scan = pansu_scan(f, x, shell, schedule)?;
    let expected: Vec<f64> = direction.coefficients().iter().map(|c| lip * c).collect();
    let max_deviation = scan
        .candidate
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(MaximalityReport {
        maximal,
        derivative,
        declared_lipschitz: lip,
        candidate: scan.candidate.clone(),
        expected,
        max_deviation,
        scan,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn g2() -> Arc<GroupStructure> {
        GroupStructure::free(2).unwrap()
    }

    fn quick_budget() -> OptimizerBudget {
        OptimizerBudget {
            starts: 6,
            segments: 8,
            max_iters: 60,
            seed: 12,
            rel_improvement: 1e-4,
            max_segments: 32,
        }
    }

    #[test]
    fn linear_field_derivative_is_exact() {
        let g = g2();
        let e = HorizontalVector::new(vec![0.6, 0.8]).unwrap();
        let f = ScalarField::g_linear(e.coefficients().to_vec());
        let x = GroupPoint::from_coordinates(&g, &[0.3, -0.7, 0.2]).unwrap();
        let d = directional_derivative(&f, &x, &e, &default_schedule()).unwrap();
        // Derivative of <., E(0)> along E is omega(E)^2 = 1.
        assert!((d.value - 1.0).abs() < 1e-12);
        assert!(d.residuals.iter().all(|r| *r < 1e-12));
    }

    #[test]
    fn orthogonal_coordinate_derivative_vanishes() {
        let g = g2();
        let f = ScalarField::coordinate(0);
        let e2 = HorizontalVector::basis(2, 1);
        let x = GroupPoint::from_coordinates(&g, &[0.1, 0.2, -0.3]).unwrap();
        let d = directional_derivative(&f, &x, &e2, &default_schedule()).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn distance_derivative_along_its_ray() {
        let g = g2();
        let f = ScalarField::distance_from_origin(quick_budget());
        let e1 = HorizontalVector::basis(2, 0);
        let x = exp_horizontal(&g, &e1).unwrap();
        let d = directional_derivative(&f, &x, &e1, &default_schedule()).unwrap();
        assert!((d.value - 1.0).abs() < 0.01, "got {}", d.value);
    }

    #[test]
    fn chain_consistency_under_left_translation() {
        let g = g2();
        let f = ScalarField::new(
            |x: &GroupPoint| x.horizontal()[0].powi(2) + x.vertical()[0].sin(),
            None,
        );
        let shift = GroupPoint::from_coordinates(&g, &[0.4, -0.2, 0.1]).unwrap();
        let shift2 = shift.clone();
        let translated = ScalarField::new(
            move |x: &GroupPoint| {
                let y = shift2.multiply(x).unwrap();
                y.horizontal()[0].powi(2) + y.vertical()[0].sin()
            },
            None,
        );
        let e = HorizontalVector::new(vec![0.6, -0.8]).unwrap();
        let sched = default_schedule();
        let a = directional_derivative(&translated, &GroupPoint::zero(&g), &e, &sched).unwrap();
        let b = directional_derivative(&f, &shift, &e, &sched).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn shell_contains_forced_directions_at_gauge_one() {
        let g = g2();
        let shell = gauge_shell(&g, 64).unwrap();
        assert_eq!(shell.len(), 64);
        for xi in &shell {
            assert!((koranyi(xi) - 1.0).abs() < 1e-12);
        }
        // +-e_1, +-e_2 and the pure vertical pair come first.
        assert_eq!(shell[0].coordinates(), vec![1.0, 0.0, 0.0]);
        assert_eq!(shell[1].coordinates(), vec![-1.0, 0.0, 0.0]);
        assert_eq!(shell[4].coordinates(), vec![0.0, 0.0, 1.0]);
        assert_eq!(shell[5].coordinates(), vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn scan_recovers_linear_candidates_exactly() {
        let g = g2();
        let v = vec![0.3, -0.9];
        let f = ScalarField::g_linear(v.clone());
        let shell = gauge_shell(&g, 32).unwrap();
        let x = GroupPoint::from_coordinates(&g, &[0.2, 0.1, -0.4]).unwrap();
        let report = pansu_scan(&f, &x, &shell, &default_schedule()).unwrap();
        assert!(report.worst_residual < 1e-9);
        for (a, b) in report.candidate.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lipschitz_estimates() {
        let g = g2();
        let sched = default_schedule();
        let spec = SampleSpec {
            count: 60,
            radius: 1.0,
            seed: 3,
        };
        let f = ScalarField::g_linear(vec![0.6, 0.8]);
        let lip = lipschitz_from_derivatives(&f, &g, &spec, &sched).unwrap();
        assert!((lip - 1.0).abs() < 1e-9);

        let constant = ScalarField::new(|_: &GroupPoint| 2.5, Some(0.0));
        let lip = lipschitz_from_derivatives(&constant, &g, &spec, &sched).unwrap();
        assert_eq!(lip, 0.0);

        let fmax = ScalarField::new(
            |x: &GroupPoint| x.horizontal()[0].max(x.horizontal()[1]),
            Some(1.0),
        );
        let lip = lipschitz_from_derivatives(&fmax, &g, &spec, &sched).unwrap();
        assert!((lip - 1.0).abs() < 0.01, "got {lip}");
    }

    fn coord_diff(a: &GroupPoint, b: &GroupPoint) -> f64 {
        a.coordinates()
            .iter()
            .zip(b.coordinates())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn perturbed_line_hits_target_and_bounds() {
        let g = g2();
        let e1 = HorizontalVector::basis(2, 0);
        let eta = 0.8;
        let delta = 0.9 * delta_threshold(eta, &g);
        let params = PerturbationParams {
            eta,
            delta,
            radius: 0.5 * delta,
        };
        let x = GroupPoint::from_coordinates(&g, &[0.1, -0.3, 0.2]).unwrap();
        let u = GroupPoint::from_coordinates(&g, &[0.0, 0.5, 0.1]).unwrap();
        assert!(koranyi(&u) <= 1.0);
        let report = perturbed_line(&x, &u, &e1, &params).unwrap();

        // Passes through x . delta_radius(u) at parameter zeta.
        let target = x.multiply(&u.dilate(params.radius).unwrap()).unwrap();
        let at = report
            .curve
            .point_at(report.zeta + report.param_origin)
            .unwrap();
        assert!(coord_diff(&at, &target) < 1e-9);

        // Agrees with the straight line outside the window.
        for t in [-report.s, report.s, 1.5 * report.s, -1.7 * report.s] {
            let line = x.flow_line(&e1, t).unwrap();
            let here = report.curve.point_at(t + report.param_origin).unwrap();
            assert!(coord_diff(&here, &line) < 1e-9, "at t = {t}");
        }

        assert!(report.measured_lipschitz <= report.lip_bound + 1e-12);
        assert!(report.deviation_ratio <= deviation_ratio_bound(&g));
    }

    #[test]
    fn perturbed_line_degenerate_cases() {
        let g = g2();
        let e1 = HorizontalVector::basis(2, 0);
        let eta = 0.5;
        let delta = 0.9 * delta_threshold(eta, &g);
        let params = PerturbationParams {
            eta,
            delta,
            radius: 0.5 * delta,
        };
        let x = GroupPoint::zero(&g);

        // Target on the line: the curve is the unperturbed line everywhere.
        let u = exp_horizontal(&g, &e1).unwrap();
        let report = perturbed_line(&x, &u, &e1, &params).unwrap();
        assert!((report.zeta - params.radius).abs() < 1e-15);
        assert!(report.measured_deviation < 1e-12);
        assert!((report.measured_lipschitz - 1.0).abs() < 1e-12);

        // Target at the base point: zeta = 0 and again a straight line.
        let u = GroupPoint::zero(&g);
        let report = perturbed_line(&x, &u, &e1, &params).unwrap();
        assert_eq!(report.zeta, 0.0);
        let mid = report.curve.point_at(report.param_origin).unwrap();
        assert!(coord_diff(&mid, &x) < 1e-12);

        // Parameter violations are rejected.
        let bad = PerturbationParams {
            eta,
            delta: 0.3,
            radius: 0.1,
        };
        assert!(perturbed_line(&x, &u, &e1, &bad).is_err());
    }

    #[test]
    fn deviation_check_cases() {
        let g = g2();
        let start = GroupPoint::zero(&g);
        let segs = vec![
            (0.5, vec![1.0, 0.2]),
            (0.5, vec![0.8, -0.1]),
            (0.5, vec![1.1, 0.0]),
        ];
        let gcurve = ControlCurve::from_controls(start.clone(), segs.clone()).unwrap();

        // Identical curves: ratio zero.
        let report = deviation_check(&gcurve, &gcurve, 2.0, 0.5, 0.0).unwrap();
        assert!(report.ok);
        assert_eq!(report.worst_ratio, 0.0);

        // Parallel drift in one coordinate.
        let a = 0.25;
        let drift: Vec<(f64, Vec<f64>)> = segs
            .iter()
            .map(|(d, c)| (*d, vec![c[0] + a, c[1]]))
            .collect();
        let hcurve = ControlCurve::from_controls(start, drift).unwrap();
        let report = deviation_check(&gcurve, &hcurve, 2.0, a, 0.0).unwrap();
        assert!(report.ok, "ratio {}", report.worst_ratio);

        // Precondition violations are errors.
        assert!(deviation_check(&gcurve, &hcurve, 2.0, a / 10.0, 0.0).is_err());
    }

    #[test]
    fn deviation_check_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for r in [2usize, 3] {
            let g = GroupStructure::free(r).unwrap();
            for _ in 0..40 {
                let a_bound = rng.gen_range(0.01..1.0);
                let nseg = rng.gen_range(2..6);
                let mut gsegs = Vec::new();
                let mut hsegs = Vec::new();
                for _ in 0..nseg {
                    let dur = rng.gen_range(0.1..0.8);
                    let base: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.2..1.2)).collect();
                    let mut pert: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let pn: f64 = pert.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scale = if pn > 0.0 {
                        rng.gen_range(0.0..1.0) * a_bound / pn
                    } else {
                        0.0
                    };
                    pert = pert.iter().map(|v| v * scale).collect();
                    let shifted: Vec<f64> =
                        base.iter().zip(&pert).map(|(b, p)| b + p).collect();
                    gsegs.push((dur, base));
                    hsegs.push((dur, shifted));
                }
                let start = GroupPoint::zero(&g);
                let gc = ControlCurve::from_controls(start.clone(), gsegs).unwrap();
                let hc = ControlCurve::from_controls(start, hsegs).unwrap();
                let s_bound = gc
                    .measure()
                    .lipschitz
                    .max(hc.measure().lipschitz)
                    .max(1.0);
                let report = deviation_check(&gc, &hc, s_bound, a_bound, 0.0).unwrap();
                assert!(
                    report.ok,
                    "ratio {} for A = {a_bound}, r = {r}",
                    report.worst_ratio
                );
            }
        }
    }

    #[test]
    fn maximality_for_linear_fields() {
        let g = g2();
        let e = HorizontalVector::new(vec![0.6, 0.8]).unwrap();
        let f = ScalarField::g_linear(e.coefficients().to_vec());
        let shell = gauge_shell(&g, 24).unwrap();
        let x = GroupPoint::from_coordinates(&g, &[0.5, 0.5, 0.5]).unwrap();
        let report =
            maximality_test(&f, &x, &e, &shell, &default_schedule(), 1e-9).unwrap();
        assert!(report.maximal);
        assert!(report.max_deviation < 1e-9);
    }
}
