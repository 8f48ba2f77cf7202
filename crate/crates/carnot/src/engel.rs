//! The rank-2, step-3 group in exponential coordinates of the second kind:
//! group law, horizontal curve integration, distance bracketing, the
//! submersion onto the Martinet geometry, and the cube-root scan along the
//! abnormal direction.
//!
//! The horizontal frame is `X_1 = d_1` and
//! `X_2 = d_2 - x_1 d_3 + (x_1^2 / 2) d_4`, so a constant-control segment
//! integrates in closed form: `x_3`, `x_4` are polynomials of degree at
//! most 3 in time.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CarnotError, Result};
use crate::optim::{
    optimize_word, perturbed_word, ControlSystem, OptimizerBudget, WordSearch,
};

/// Point of the step-3 group, coordinates of the second kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngelPoint {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
}

pub const ENGEL_ZERO: EngelPoint = EngelPoint {
    x1: 0.0,
    x2: 0.0,
    x3: 0.0,
    x4: 0.0,
};

impl EngelPoint {
    pub fn new(x1: f64, x2: f64, x3: f64, x4: f64) -> Result<EngelPoint> {
        let p = EngelPoint { x1, x2, x3, x4 };
        if p.coordinates().iter().any(|v| !v.is_finite()) {
            return Err(CarnotError::InvalidArgument(
                "coordinates must be finite".into(),
            ));
        }
        Ok(p)
    }

    pub fn coordinates(&self) -> [f64; 4] {
        [self.x1, self.x2, self.x3, self.x4]
    }

    /// Group product in coordinates of the second kind.
    pub fn multiply(&self, y: &EngelPoint) -> EngelPoint {
        EngelPoint {
            x1: self.x1 + y.x1,
            x2: self.x2 + y.x2,
            x3: self.x3 + y.x3 - self.x1 * y.x2,
            x4: self.x4 + y.x4 - self.x1 * y.x3 + 0.5 * self.x1 * self.x1 * y.x2,
        }
    }

    /// Solve `x . z = 0` in closed form.
    pub fn inverse(&self) -> EngelPoint {
        EngelPoint {
            x1: -self.x1,
            x2: -self.x2,
            x3: -self.x3 - self.x1 * self.x2,
            x4: -self.x4 - self.x1 * self.x3 - 0.5 * self.x1 * self.x1 * self.x2,
        }
    }

    /// Dilation with weights `(1, 1, 2, 3)`; a group homomorphism for the
    /// law above (asserted by tests).
    pub fn dilate(&self, lambda: f64) -> Result<EngelPoint> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(CarnotError::InvalidArgument(format!(
                "dilation factor must be positive and finite, got {lambda}"
            )));
        }
        Ok(EngelPoint {
            x1: lambda * self.x1,
            x2: lambda * self.x2,
            x3: lambda * lambda * self.x3,
            x4: lambda * lambda * lambda * self.x4,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.coordinates().iter().all(|&v| v == 0.0)
    }

    /// Homogeneous quasi-norm compatible with the dilation weights:
    /// `(|(x1, x2)|^6 + |x3|^3 + x4^2)^{1/6}`.
    pub fn gauge(&self) -> f64 {
        let h2 = self.x1 * self.x1 + self.x2 * self.x2;
        (h2.powi(3) + self.x3.abs().powi(3) + self.x4 * self.x4).powf(1.0 / 6.0)
    }

    pub fn horizontal_displacement(&self, other: &EngelPoint) -> f64 {
        let dx = other.x1 - self.x1;
        let dy = other.x2 - self.x2;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Closed-form horizontal flow of the constant control `(u1, u2)` for time
/// `t` from `p`.
pub fn engel_flow(p: &EngelPoint, control: [f64; 2], t: f64) -> EngelPoint {
    let [u1, u2] = control;
    EngelPoint {
        x1: p.x1 + u1 * t,
        x2: p.x2 + u2 * t,
        x3: p.x3 - u2 * (p.x1 * t + 0.5 * u1 * t * t),
        x4: p.x4
            + 0.5
                * u2
                * (p.x1 * p.x1 * t + p.x1 * u1 * t * t + u1 * u1 * t * t * t / 3.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngelSegment {
    pub duration: f64,
    pub control: [f64; 2],
}

impl EngelSegment {
    pub fn control_norm(&self) -> f64 {
        (self.control[0] * self.control[0] + self.control[1] * self.control[1]).sqrt()
    }
}

/// Piecewise-constant-control horizontal curve in the step-3 group.
#[derive(Debug, Clone)]
pub struct EngelCurve {
    start: EngelPoint,
    segments: Vec<EngelSegment>,
    endpoint: EngelPoint,
}

impl EngelCurve {
    pub fn new(start: EngelPoint, segments: Vec<EngelSegment>) -> Result<EngelCurve> {
        let mut kept = Vec::with_capacity(segments.len());
        for s in segments {
            if !s.duration.is_finite()
                || s.duration < 0.0
                || s.control.iter().any(|v| !v.is_finite())
            {
                return Err(CarnotError::InvalidArgument(
                    "segment durations must be finite and nonnegative, controls finite".into(),
                ));
            }
            if s.duration > 0.0 {
                kept.push(s);
            }
        }
        let mut endpoint = start;
        for s in &kept {
            endpoint = engel_flow(&endpoint, s.control, s.duration);
        }
        Ok(EngelCurve {
            start,
            segments: kept,
            endpoint,
        })
    }

    pub fn from_controls(start: EngelPoint, segments: Vec<(f64, [f64; 2])>) -> Result<EngelCurve> {
        EngelCurve::new(
            start,
            segments
                .into_iter()
                .map(|(duration, control)| EngelSegment { duration, control })
                .collect(),
        )
    }

    pub fn constant(start: EngelPoint) -> EngelCurve {
        EngelCurve {
            start,
            segments: Vec::new(),
            endpoint: start,
        }
    }

    pub fn start(&self) -> &EngelPoint {
        &self.start
    }

    pub fn endpoint(&self) -> &EngelPoint {
        &self.endpoint
    }

    pub fn segments(&self) -> &[EngelSegment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn length(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.duration * s.control_norm())
            .sum()
    }

    pub fn lipschitz(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.control_norm())
            .fold(0.0, f64::max)
    }

    pub fn point_at(&self, t: f64) -> Result<EngelPoint> {
        let total = self.total_duration();
        if !t.is_finite() || t < -1e-12 || t > total + 1e-12 {
            return Err(CarnotError::InvalidArgument(format!(
                "time {t} outside the curve domain [0, {total}]"
            )));
        }
        let mut remaining = t.clamp(0.0, total);
        let mut pos = self.start;
        for s in &self.segments {
            if remaining <= 0.0 {
                break;
            }
            let dt = remaining.min(s.duration);
            pos = engel_flow(&pos, s.control, dt);
            remaining -= dt;
        }
        Ok(pos)
    }

    pub fn concat(&self, other: &EngelCurve) -> Result<EngelCurve> {
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().cloned());
        EngelCurve::new(self.start, segments)
    }

    pub fn translated(&self, g: &EngelPoint) -> Result<EngelCurve> {
        EngelCurve::new(g.multiply(&self.start), self.segments.clone())
    }

    /// Controls scale linearly under the dilation, durations are kept.
    pub fn dilated(&self, lambda: f64) -> Result<EngelCurve> {
        let start = self.start.dilate(lambda)?;
        let segments = self
            .segments
            .iter()
            .map(|s| EngelSegment {
                duration: s.duration,
                control: [lambda * s.control[0], lambda * s.control[1]],
            })
            .collect();
        EngelCurve::new(start, segments)
    }

    /// Reparametrize to unit speed: durations absorb the control norms.
    /// The traced path and length are unchanged.
    pub fn unit_speed(&self) -> Result<EngelCurve> {
        let segments = self
            .segments
            .iter()
            .filter(|s| s.control_norm() > 0.0)
            .map(|s| {
                let norm = s.control_norm();
                EngelSegment {
                    duration: s.duration * norm,
                    control: [s.control[0] / norm, s.control[1] / norm],
                }
            })
            .collect();
        EngelCurve::new(self.start, segments)
    }

    pub fn to_json(&self) -> String {
        let segments: Vec<(f64, Vec<f64>)> = self
            .segments
            .iter()
            .map(|s| (s.duration, s.control.to_vec()))
            .collect();
        serde_json::json!({
            "start": self.start.coordinates().to_vec(),
            "segments": segments,
        })
        .to_string()
    }
}

/// Endpoint map of the step-3 control system for the optimizer; the word
/// always starts at the origin (queries reduce there by left invariance).
struct EngelSystem;

impl ControlSystem for EngelSystem {
    fn control_dim(&self) -> usize {
        2
    }

    fn constraint_dim(&self) -> usize {
        4
    }

    fn endpoint(&self, theta: &[f64], k: usize) -> Vec<f64> {
        let tau = 1.0 / k as f64;
        let mut s = 0.0; // running sum of the first controls
        let (mut x1, mut x2, mut x3, mut x4) = (0.0, 0.0, 0.0, 0.0);
        for m in 0..k {
            let a = theta[2 * m];
            let b = theta[2 * m + 1];
            x3 -= tau * tau * b * (s + 0.5 * a);
            x4 += 0.5 * tau.powi(3) * b * (s * s + s * a + a * a / 3.0);
            s += a;
            x1 += tau * a;
            x2 += tau * b;
        }
        vec![x1, x2, x3, x4]
    }

    fn jacobian(&self, theta: &[f64], k: usize) -> DMatrix<f64> {
        let tau = 1.0 / k as f64;
        let n = 2 * k;
        let mut jac = DMatrix::zeros(4, n);

        let a = |m: usize| theta[2 * m];
        let b = |m: usize| theta[2 * m + 1];
        let mut prefix = vec![0.0; k]; // s_m = sum_{l<m} a_l
        for m in 1..k {
            prefix[m] = prefix[m - 1] + a(m - 1);
        }
        // Backward sums over m > l.
        let mut suf_b = vec![0.0; k + 1];
        let mut suf_b_lin = vec![0.0; k + 1]; // sum b_m (2 s_m + a_m)
        for m in (0..k).rev() {
            suf_b[m] = suf_b[m + 1] + b(m);
            suf_b_lin[m] = suf_b_lin[m + 1] + b(m) * (2.0 * prefix[m] + a(m));
        }

        for l in 0..k {
            jac[(0, 2 * l)] = tau;
            jac[(1, 2 * l + 1)] = tau;
            jac[(2, 2 * l)] = -tau * tau * (suf_b[l + 1] + 0.5 * b(l));
            jac[(2, 2 * l + 1)] = -tau * tau * (prefix[l] + 0.5 * a(l));
            jac[(3, 2 * l)] = 0.5
                * tau.powi(3)
                * (suf_b_lin[l + 1] + b(l) * (prefix[l] + 2.0 * a(l) / 3.0));
            jac[(3, 2 * l + 1)] =
                0.5 * tau.powi(3) * (prefix[l] * prefix[l] + prefix[l] * a(l) + a(l) * a(l) / 3.0);
        }
        jac
    }

    fn weighted_hessian(&self, theta: &[f64], k: usize, nu: &[f64]) -> DMatrix<f64> {
        let tau = 1.0 / k as f64;
        let n = 2 * k;
        let mut h = DMatrix::zeros(n, n);
        let a = |m: usize| theta[2 * m];
        let b = |m: usize| theta[2 * m + 1];
        let mut prefix = vec![0.0; k];
        for m in 1..k {
            prefix[m] = prefix[m - 1] + a(m - 1);
        }
        let mut suf_b = vec![0.0; k + 1];
        for m in (0..k).rev() {
            suf_b[m] = suf_b[m + 1] + b(m);
        }

        let w3 = nu[2];
        let w4 = nu[3];
        // x3 cross terms a_l, b_m.
        for l in 0..k {
            for m in 0..k {
                let factor = if l < m {
                    1.0
                } else if l == m {
                    0.5
                } else {
                    0.0
                };
                if factor != 0.0 {
                    let v = -w3 * tau * tau * factor;
                    h[(2 * l, 2 * m + 1)] += v;
                    h[(2 * m + 1, 2 * l)] += v;
                }
            }
        }
        // x4 second derivatives.
        for l in 0..k {
            for j in 0..k {
                let mx = l.max(j);
                let mut v = 2.0 * suf_b[mx + 1];
                if l == j {
                    v += (2.0 / 3.0) * b(l);
                } else {
                    v += b(mx);
                }
                let val = 0.5 * w4 * tau.powi(3) * v;
                h[(2 * l, 2 * j)] += val;
            }
        }
        for l in 0..k {
            for m in 0..k {
                let v = if l < m {
                    2.0 * prefix[m] + a(m)
                } else if l == m {
                    prefix[m] + 2.0 * a(m) / 3.0
                } else {
                    0.0
                };
                if v != 0.0 {
                    let val = 0.5 * w4 * tau.powi(3) * v;
                    h[(2 * l, 2 * m + 1)] += val;
                    h[(2 * m + 1, 2 * l)] += val;
                }
            }
        }
        h
    }
}

/// Exactly feasible word reaching any target: two rectangular loops create
/// the vertical part (a loop with legs `(c, d)` adds exactly
/// `(0, 0, -cd, c^2 d / 2)` in these coordinates), then straight flows fix
/// the horizontal coordinates.
fn engel_reach_word(target: &EngelPoint) -> Result<EngelCurve> {
    let t1 = target.x1;
    let t2 = target.x2;
    let v3 = target.x3 + t1 * t2;
    let v4 = target.x4 - 0.5 * t1 * t1 * t2;

    // Loops with first legs 1 and 2: -b - 2d = v3, (b + 4d)/2 = v4.
    let d = 0.5 * v3 + v4;
    let b = -2.0 * v3 - 2.0 * v4;

    let mut segs: Vec<(f64, [f64; 2])> = Vec::new();
    let push_loop = |c: f64, leg: f64, segs: &mut Vec<(f64, [f64; 2])>| {
        if leg != 0.0 {
            segs.push((1.0, [c, 0.0]));
            segs.push((1.0, [0.0, leg]));
            segs.push((1.0, [-c, 0.0]));
            segs.push((1.0, [0.0, -leg]));
        }
    };
    push_loop(1.0, b, &mut segs);
    push_loop(2.0, d, &mut segs);
    segs.push((1.0, [t1, 0.0]));
    segs.push((1.0, [0.0, t2]));
    EngelCurve::from_controls(ENGEL_ZERO, segs)
}

/// Sample the planar velocity of `curve` into a `k`-segment word.
fn engel_resample(curve: &EngelCurve, k: usize) -> Result<Vec<f64>> {
    let total = curve.total_duration();
    if total == 0.0 {
        return Ok(vec![0.0; 2 * k]);
    }
    let mut word = Vec::with_capacity(2 * k);
    let mut prev = curve.point_at(0.0)?;
    for m in 1..=k {
        let here = curve.point_at(total * m as f64 / k as f64)?;
        word.push((here.x1 - prev.x1) * k as f64);
        word.push((here.x2 - prev.x2) * k as f64);
        prev = here;
    }
    Ok(word)
}

/// Distance bracket in the step-3 group; mirrors
/// [`crate::distance::DistanceBracket`] with a step-3 witness curve.
#[derive(Debug, Clone)]
pub struct EngelBracket {
    pub lower: f64,
    pub upper: f64,
    pub witness: EngelCurve,
    pub converged: bool,
    /// Length gained by the last refinement; proxy for the remaining
    /// discretization error of the upper bound.
    pub refinement_gap: f64,
}

impl EngelBracket {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Bracket the CC distance of the step-3 group (frame `X_1, X_2`).
/// Lower bound: the planar projection `(x_1, x_2)` is 1-Lipschitz.
/// Upper bound: control-word search, with an exact loop-word fallback.
pub fn engel_cc_bracket(
    x: &EngelPoint,
    y: &EngelPoint,
    budget: &OptimizerBudget,
) -> Result<EngelBracket> {
    engel_cc_bracket_with_candidates(x, y, budget, &[])
}

/// Like [`engel_cc_bracket`], with extra candidate curves from `0` to
/// `x^{-1} y` that seed the search and cap the upper bound.
pub fn engel_cc_bracket_with_candidates(
    x: &EngelPoint,
    y: &EngelPoint,
    budget: &OptimizerBudget,
    candidates: &[EngelCurve],
) -> Result<EngelBracket> {
    let z = x.inverse().multiply(y);
    if z.is_zero() {
        return Ok(EngelBracket {
            lower: 0.0,
            upper: 0.0,
            witness: EngelCurve::constant(*x),
            converged: true,
            refinement_gap: 0.0,
        });
    }

    let lower = (z.x1 * z.x1 + z.x2 * z.x2).sqrt();

    // Straight-flow targets: one constant control reaches them and the
    // projection bound matches its length, so the bracket collapses.
    let scale = z.coordinates().iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if lower > 0.0
        && (z.x3 + 0.5 * z.x1 * z.x2).abs() <= 1e-13 * scale
        && (z.x4 - z.x1 * z.x1 * z.x2 / 6.0).abs() <= 1e-13 * scale
    {
        let witness = EngelCurve::from_controls(*x, vec![(1.0, [z.x1, z.x2])])?;
        return Ok(EngelBracket {
            lower,
            upper: witness.length(),
            witness,
            converged: true,
            refinement_gap: 0.0,
        });
    }

    let gauge = z.gauge();
    let z_norm = z.dilate(1.0 / gauge)?;
    let target = z_norm.coordinates().to_vec();

    let fallback = engel_reach_word(&z_norm)?;
    let system = EngelSystem;
    let k0 = budget.segments.max(2);

    let mut inits: Vec<Vec<f64>> = Vec::new();
    let mut straight = Vec::with_capacity(2 * k0);
    for _ in 0..k0 {
        straight.push(z_norm.x1);
        straight.push(z_norm.x2);
    }
    inits.push(straight.clone());
    inits.push(engel_resample(&fallback.unit_speed()?, k0)?);
    for cand in candidates {
        inits.push(engel_resample(&cand.unit_speed()?.dilated(1.0 / gauge)?, k0)?);
    }

    // Figure-eight words: x_1 oscillating at the base frequency against a
    // doubled frequency in the second control produces third-layer motion
    // with no net planar drift; good seeds for vertical-heavy targets.
    let vert_amp = z_norm.x3.abs().sqrt() + z_norm.x4.abs().powf(1.0 / 3.0);
    if vert_amp > 0.05 {
        use std::f64::consts::PI;
        for (sa, sb) in [(1.0f64, 1.0f64), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let mut word = Vec::with_capacity(2 * k0);
            for m in 0..k0 {
                let t = (m as f64 + 0.5) / k0 as f64;
                let u1 = z_norm.x1 + sa * 3.0 * vert_amp * (2.0 * PI * t).cos();
                let u2 = z_norm.x2 + sb * 3.0 * vert_amp * (4.0 * PI * t).cos();
                word.push(u1);
                word.push(u2);
            }
            inits.push(word);
        }
    }

    let amp = 1.0 + 2.0 * (z_norm.x3.abs() + z_norm.x4.abs()).sqrt();
    let mut idx = 0u64;
    while inits.len() < budget.starts.max(1) {
        inits.push(perturbed_word(&straight, amp, budget.seed ^ (0x517c + idx)));
        idx += 1;
    }

    let search = optimize_word(&system, &target, budget, &inits);
    let (witness_norm, converged, refinement_gap) = match search {
        Some(WordSearch {
            controls,
            k,
            length,
            refinement_gap,
            ..
        }) if length <= fallback.length() => {
            let tau = 1.0 / k as f64;
            let segs: Vec<(f64, [f64; 2])> = (0..k)
                .map(|m| (tau, [controls[2 * m], controls[2 * m + 1]]))
                .collect();
            (
                EngelCurve::from_controls(ENGEL_ZERO, segs)?,
                true,
                refinement_gap,
            )
        }
        Some(ws) => (fallback.clone(), true, ws.refinement_gap),
        None => {
            let len = fallback.length();
            (fallback.clone(), false, len)
        }
    };

    let mut witness = witness_norm.dilated(gauge)?.translated(x)?;
    let mut refinement_gap = refinement_gap * gauge;
    for cand in candidates {
        if cand.length() < witness.length() {
            witness = cand.translated(x)?;
            refinement_gap = refinement_gap.min(witness.length() - lower);
        }
    }
    let upper = witness.length();
    Ok(EngelBracket {
        lower: lower.min(upper),
        upper,
        witness,
        converged,
        refinement_gap,
    })
}

/// Submersion onto the Martinet geometry: forget the third coordinate and
/// swap the first two, `F(x1, x2, x3, x4) = (x2, x1, x4)`.
pub fn martinet_project(p: &EngelPoint) -> [f64; 3] {
    [p.x2, p.x1, p.x4]
}

/// Max error of the frame pushforward identities `dF(X_1) = Y` and
/// `dF(X_2) = X` at `p`; zero up to rounding for every point.
pub fn martinet_pushforward_error(p: &EngelPoint) -> f64 {
    // dF is constant: rows (0,1,0,0), (1,0,0,0), (0,0,0,1).
    let df = |v: [f64; 4]| [v[1], v[0], v[3]];
    let image = martinet_project(p);

    let x1_field = [1.0, 0.0, 0.0, 0.0];
    let y_frame = [0.0, 1.0, 0.0]; // d_y at the image
    let push1 = df(x1_field);
    let e1: f64 = push1
        .iter()
        .zip(&y_frame)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let x2_field = [0.0, 1.0, -p.x1, 0.5 * p.x1 * p.x1];
    let x_frame = [1.0, 0.0, 0.5 * image[1] * image[1]]; // d_x + (y^2/2) d_z
    let push2 = df(x2_field);
    let e2: f64 = push2
        .iter()
        .zip(&x_frame)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    e1.max(e2)
}

/// Closed-form flow of the Martinet frame `X = d_x + (y^2/2) d_z`,
/// `Y = d_y` with constant control `(a, b)` (coefficients of `X`, `Y`).
pub fn martinet_flow(p: [f64; 3], control: [f64; 2], t: f64) -> [f64; 3] {
    let [a, b] = control;
    let [x, y, z] = p;
    [
        x + a * t,
        y + b * t,
        z + 0.5 * a * (y * y * t + y * b * t * t + b * b * t * t * t / 3.0),
    ]
}

/// Integrate a control list through the Martinet frame.
pub fn martinet_lift(start: [f64; 3], controls: &[(f64, [f64; 2])]) -> [f64; 3] {
    let mut pos = start;
    for (dur, ctrl) in controls {
        pos = martinet_flow(pos, *ctrl, *dur);
    }
    pos
}

/// Martinet control system from a fixed start point (the geometry is not a
/// group, so the start cannot be translated away).
struct MartinetSystem {
    start: [f64; 3],
}

impl ControlSystem for MartinetSystem {
    fn control_dim(&self) -> usize {
        2
    }

    fn constraint_dim(&self) -> usize {
        3
    }

    fn endpoint(&self, theta: &[f64], k: usize) -> Vec<f64> {
        let tau = 1.0 / k as f64;
        let mut pos = self.start;
        for m in 0..k {
            pos = martinet_flow(pos, [theta[2 * m], theta[2 * m + 1]], tau);
        }
        pos.to_vec()
    }

    fn jacobian(&self, theta: &[f64], k: usize) -> DMatrix<f64> {
        let tau = 1.0 / k as f64;
        let n = 2 * k;
        let mut jac = DMatrix::zeros(3, n);
        let a = |m: usize| theta[2 * m];
        let b = |m: usize| theta[2 * m + 1];
        let mut y = vec![0.0; k]; // y at the start of segment m
        y[0] = self.start[1];
        for m in 1..k {
            y[m] = y[m - 1] + tau * b(m - 1);
        }
        let mut suf_a = vec![0.0; k + 1];
        let mut suf_a_lin = vec![0.0; k + 1]; // sum a_m (2 y_m + tau b_m)
        for m in (0..k).rev() {
            suf_a[m] = suf_a[m + 1] + a(m);
            suf_a_lin[m] = suf_a_lin[m + 1] + a(m) * (2.0 * y[m] + tau * b(m));
        }
        for l in 0..k {
            jac[(0, 2 * l)] = tau;
            jac[(1, 2 * l + 1)] = tau;
            jac[(2, 2 * l)] =
                0.5 * (y[l] * y[l] * tau + y[l] * b(l) * tau * tau + b(l) * b(l) * tau.powi(3) / 3.0);
            jac[(2, 2 * l + 1)] = 0.5 * tau * tau * suf_a_lin[l + 1]
                + 0.5 * a(l) * (y[l] * tau * tau + 2.0 * b(l) * tau.powi(3) / 3.0);
        }
        jac
    }

    fn weighted_hessian(&self, theta: &[f64], k: usize, nu: &[f64]) -> DMatrix<f64> {
        let tau = 1.0 / k as f64;
        let n = 2 * k;
        let mut h = DMatrix::zeros(n, n);
        let a = |m: usize| theta[2 * m];
        let b = |m: usize| theta[2 * m + 1];
        let mut y = vec![0.0; k];
        y[0] = self.start[1];
        for m in 1..k {
            y[m] = y[m - 1] + tau * b(m - 1);
        }
        let mut suf_a = vec![0.0; k + 1];
        for m in (0..k).rev() {
            suf_a[m] = suf_a[m + 1] + a(m);
        }
        let w = nu[2];

        // d^2 z / (da_m db_l)
        for m in 0..k {
            for l in 0..k {
                let v = if l < m {
                    tau * tau * (y[m] + 0.5 * tau * b(m))
                } else if l == m {
                    0.5 * (y[m] * tau * tau + 2.0 * b(m) * tau.powi(3) / 3.0)
                } else {
                    0.0
                };
                if v != 0.0 {
                    h[(2 * m, 2 * l + 1)] += w * v;
                    h[(2 * l + 1, 2 * m)] += w * v;
                }
            }
        }
        // d^2 z / (db_l db_j)
        for l in 0..k {
            for j in 0..k {
                let mx = l.max(j);
                let mut v = tau.powi(3) * suf_a[mx + 1];
                if l == j {
                    v += tau.powi(3) * a(l) / 3.0;
                } else {
                    v += 0.5 * tau.powi(3) * a(mx);
                }
                h[(2 * l + 1, 2 * j + 1)] += w * v;
            }
        }
        h
    }
}

/// Martinet distance bracket between explicit points; lower bound from the
/// 1-Lipschitz planar projection `(x, y)`.
pub fn martinet_cc_bracket(
    from: [f64; 3],
    to: [f64; 3],
    budget: &OptimizerBudget,
) -> Result<EngelBracketScalar> {
    let lower = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
    if from == to {
        return Ok(EngelBracketScalar {
            lower: 0.0,
            upper: 0.0,
            converged: true,
        });
    }
    let system = MartinetSystem { start: from };
    let k0 = budget.segments.max(2);
    let mut inits: Vec<Vec<f64>> = Vec::new();
    let mut straight = Vec::with_capacity(2 * k0);
    for _ in 0..k0 {
        straight.push(to[0] - from[0]);
        straight.push(to[1] - from[1]);
    }
    inits.push(straight.clone());
    let mut idx = 0u64;
    while inits.len() < budget.starts.max(1) {
        inits.push(perturbed_word(&straight, 1.5, budget.seed ^ (0x31ab + idx)));
        idx += 1;
    }
    let search = optimize_word(&system, &to, budget, &inits);
    match search {
        Some(ws) => Ok(EngelBracketScalar {
            lower: lower.min(ws.length),
            upper: ws.length,
            converged: true,
        }),
        None => Ok(EngelBracketScalar {
            lower,
            upper: f64::INFINITY,
            converged: false,
        }),
    }
}

/// Bracket without a stored witness, for auxiliary queries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EngelBracketScalar {
    pub lower: f64,
    pub upper: f64,
    pub converged: bool,
}

/// One sample of the cube-root scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CubeRootPoint {
    pub zeta: f64,
    pub lower: f64,
    pub upper: f64,
    /// `D = upper - 1`, the excess over the distance to the base point.
    pub excess: f64,
    /// `D / zeta^{1/3}`; bounded away from zero along the scan.
    pub pansu_ratio: f64,
    /// Convergence-based uncertainty of the upper bound.
    pub gap_estimate: f64,
    pub flagged: bool,
}

/// Full scan result along the abnormal direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CubeRootScan {
    pub points: Vec<CubeRootPoint>,
    /// Log-log slope of `D` against `zeta` over unflagged points.
    pub slope: f64,
    pub unflagged: usize,
    /// Difference quotient of the distance along the second frame direction
    /// at `(0, 1, 0, 0)`; equals one exactly.
    pub x2_quotient: f64,
    /// Upper estimate of the distance from the origin to `(0, 0, 0, 1)`.
    pub vertical_unit_distance: f64,
}

impl CubeRootScan {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scan serialization cannot fail")
    }
}

/// Probe `D(zeta) = d(0, (0, 1, 0, -zeta)) - 1` over a decreasing grid of
/// `zeta` in `(0, 0.01]` and fit the growth exponent. The scan also
/// reports the directional quotient along the second frame direction at
/// `(0, 1, 0, 0)`, which stays exactly one while `D(zeta)` follows a
/// cube-root law; together these witness a maximal directional derivative
/// without first-order behavior of the distance.
pub fn cube_root_scan(zetas: &[f64], budget: &OptimizerBudget) -> Result<CubeRootScan> {
    if zetas.len() < 5 {
        return Err(CarnotError::InvalidArgument(
            "scan needs at least 5 points".into(),
        ));
    }
    if zetas.iter().any(|z| !(*z > 0.0 && *z <= 0.01)) {
        return Err(CarnotError::InvalidArgument(
            "scan points must lie in (0, 0.01]".into(),
        ));
    }

    // Distance to the unit vertical point; its witness transports to every
    // zeta by dilation, giving the concatenation candidate
    // line + dilated loop with length 1 + C' zeta^{1/3}.
    let vertical = EngelPoint::new(0.0, 0.0, 0.0, -1.0)?;
    let vbracket = engel_cc_bracket(&ENGEL_ZERO, &vertical, budget)?;
    let c_prime = vbracket.upper;
    let base = EngelPoint::new(0.0, 1.0, 0.0, 0.0)?;

    let mut points = Vec::with_capacity(zetas.len());
    for &zeta in zetas {
        let target = EngelPoint::new(0.0, 1.0, 0.0, -zeta)?;
        let scale = zeta.powf(1.0 / 3.0);

        // Candidate: straight segment to the base point, then the
        // transported witness of the unit vertical distance.
        let line = EngelCurve::from_controls(ENGEL_ZERO, vec![(1.0, [0.0, 1.0])])?;
        let tail = vbracket.witness.dilated(scale)?.translated(&base)?;
        let concat = line.concat(&tail)?;
        debug_assert!(
            (concat.endpoint().x4 + zeta).abs() < 1e-12,
            "concatenation misses the target"
        );

        let bracket = engel_cc_bracket_with_candidates(
            &ENGEL_ZERO,
            &target,
            budget,
            std::slice::from_ref(&concat),
        )?;

        // Uncertainty proxy for the upper bound: the better of the direct
        // search refinement trend and the transported witness's own trend.
        let gap_estimate = bracket
            .refinement_gap
            .min(vbracket.refinement_gap * scale + (bracket.upper - concat.length()).max(0.0));
        let excess = bracket.upper - 1.0;
        let flagged = !bracket.converged || excess <= 0.0 || gap_estimate > 0.2 * excess;
        points.push(CubeRootPoint {
            zeta,
            lower: bracket.lower,
            upper: bracket.upper,
            excess,
            pansu_ratio: excess / scale,
            gap_estimate,
            flagged,
        });
    }

    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| !p.flagged)
        .map(|p| (p.zeta.ln(), p.excess.ln()))
        .collect();
    let unflagged = fit.len();
    let slope = if unflagged >= 2 {
        let n = unflagged as f64;
        let mx = fit.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my = fit.iter().map(|(_, y)| y).sum::<f64>() / n;
        let sxx: f64 = fit.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        let sxy: f64 = fit.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };

    // Directional quotient along the second frame direction at the base
    // point; dyadic steps keep the arithmetic exact.
    let t = 0.25;
    let shifted = EngelPoint::new(0.0, 1.0 + t, 0.0, 0.0)?;
    let d_shifted = engel_cc_bracket(&ENGEL_ZERO, &shifted, budget)?;
    let d_base = engel_cc_bracket(&ENGEL_ZERO, &base, budget)?;
    let x2_quotient = (d_shifted.upper - d_base.upper) / t;

    Ok(CubeRootScan {
        points,
        slope,
        unflagged,
        x2_quotient,
        vertical_unit_distance: c_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng) -> EngelPoint {
        EngelPoint::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        )
        .unwrap()
    }

    fn coord_diff(a: &EngelPoint, b: &EngelPoint) -> f64 {
        a.coordinates()
            .iter()
            .zip(b.coordinates())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn group_law_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let x = random_point(&mut rng);
            assert_eq!(coord_diff(&x.multiply(&ENGEL_ZERO), &x), 0.0);
            assert!(coord_diff(&x.multiply(&x.inverse()), &ENGEL_ZERO) < 1e-13);
        }
        let a = 1.3;
        let b = -0.7;
        let x = EngelPoint::new(a, 0.0, 0.0, 0.0).unwrap();
        let y = EngelPoint::new(0.0, b, 0.0, 0.0).unwrap();
        let xy = x.multiply(&y);
        assert!((xy.x3 + a * b).abs() < 1e-15);
        assert!((xy.x4 - 0.5 * a * a * b).abs() < 1e-15);
    }

    #[test]
    fn associativity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let x = random_point(&mut rng);
            let y = random_point(&mut rng);
            let z = random_point(&mut rng);
            let a = x.multiply(&y).multiply(&z);
            let b = x.multiply(&y.multiply(&z));
            assert!(coord_diff(&a, &b) < 1e-10);
        }
    }

    #[test]
    fn dilation_is_automorphism() {
        let x = EngelPoint::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(x.dilate(2.0).unwrap().x4, 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..1000 {
            let x = random_point(&mut rng);
            let y = random_point(&mut rng);
            let l = rng.gen_range(0.1..3.0);
            let lhs = x.multiply(&y).dilate(l).unwrap();
            let rhs = x.dilate(l).unwrap().multiply(&y.dilate(l).unwrap());
            assert!(coord_diff(&lhs, &rhs) < 1e-10);
            let m = rng.gen_range(0.1..3.0);
            let a = x.dilate(l).unwrap().dilate(m).unwrap();
            let b = x.dilate(l * m).unwrap();
            assert!(coord_diff(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn flow_closed_forms() {
        let from_zero = engel_flow(&ENGEL_ZERO, [1.0, 0.0], 2.5);
        assert_eq!(from_zero.coordinates(), [2.5, 0.0, 0.0, 0.0]);

        let unit_x2 = engel_flow(&ENGEL_ZERO, [0.0, 1.0], 1.0);
        assert_eq!(unit_x2.coordinates(), [0.0, 1.0, 0.0, 0.0]);

        let a = 0.8;
        let start = EngelPoint::new(a, 0.0, 0.0, 0.0).unwrap();
        let moved = engel_flow(&start, [0.0, 1.0], 1.0);
        assert!((moved.x1 - a).abs() < 1e-15);
        assert!((moved.x2 - 1.0).abs() < 1e-15);
        assert!((moved.x3 + a).abs() < 1e-15);
        assert!((moved.x4 - 0.5 * a * a).abs() < 1e-15);
    }

    #[test]
    fn flow_is_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let p = random_point(&mut rng);
            let ctrl = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let t = rng.gen_range(0.0..2.0);
            let direct = engel_flow(&p, ctrl, t);
            let via_group = p.multiply(&engel_flow(&ENGEL_ZERO, ctrl, t));
            assert!(coord_diff(&direct, &via_group) < 1e-12);
        }
    }

    #[test]
    fn curve_concat_matches_group_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..50 {
            let c1 = EngelCurve::from_controls(
                ENGEL_ZERO,
                (0..3)
                    .map(|_| {
                        (
                            rng.gen_range(0.1..1.0),
                            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        )
                    })
                    .collect(),
            )
            .unwrap();
            let c2 = EngelCurve::from_controls(
                ENGEL_ZERO,
                (0..3)
                    .map(|_| {
                        (
                            rng.gen_range(0.1..1.0),
                            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        )
                    })
                    .collect(),
            )
            .unwrap();
            let joined = c1.concat(&c2).unwrap();
            let product = c1.endpoint().multiply(c2.endpoint());
            assert!(coord_diff(joined.endpoint(), &product) < 1e-12);
        }
    }

    #[test]
    fn lift_endpoint_matches_quadrature() {
        // Runge-Kutta integration of the frame ODE as an independent check.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..20 {
            let segs: Vec<(f64, [f64; 2])> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0.1..1.0),
                        [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    )
                })
                .collect();
            let start = random_point(&mut rng);
            let curve = EngelCurve::from_controls(start, segs.clone()).unwrap();

            let mut state = start.coordinates();
            for (dur, ctrl) in &segs {
                let steps = 4000;
                let h = dur / steps as f64;
                for _ in 0..steps {
                    let deriv = |s: [f64; 4]| {
                        [
                            ctrl[0],
                            ctrl[1],
                            -s[0] * ctrl[1],
                            0.5 * s[0] * s[0] * ctrl[1],
                        ]
                    };
                    let k1 = deriv(state);
                    let mid1 = [
                        state[0] + 0.5 * h * k1[0],
                        state[1] + 0.5 * h * k1[1],
                        state[2] + 0.5 * h * k1[2],
                        state[3] + 0.5 * h * k1[3],
                    ];
                    let k2 = deriv(mid1);
                    let mid2 = [
                        state[0] + 0.5 * h * k2[0],
                        state[1] + 0.5 * h * k2[1],
                        state[2] + 0.5 * h * k2[2],
                        state[3] + 0.5 * h * k2[3],
                    ];
                    let k3 = deriv(mid2);
                    let end = [
                        state[0] + h * k3[0],
                        state[1] + h * k3[1],
                        state[2] + h * k3[2],
                        state[3] + h * k3[3],
                    ];
                    let k4 = deriv(end);
                    for i in 0..4 {
                        state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
            }
            let err = curve
                .endpoint()
                .coordinates()
                .iter()
                .zip(state)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "closed form vs integrator: {err:.3e}");
        }
    }

    #[test]
    fn reach_word_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..100 {
            let target = random_point(&mut rng);
            let word = engel_reach_word(&target).unwrap();
            assert!(coord_diff(word.endpoint(), &target) < 1e-10);
        }
    }

    #[test]
    fn engel_system_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let k = 4;
        let theta: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        crate::optim::test_support::check_derivatives(&EngelSystem, &theta, k);

        let sys = MartinetSystem {
            start: [0.3, -0.5, 0.2],
        };
        let theta: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        crate::optim::test_support::check_derivatives(&sys, &theta, k);
    }

    fn quick_budget() -> OptimizerBudget {
        OptimizerBudget {
            starts: 8,
            segments: 12,
            max_iters: 70,
            seed: 3,
            rel_improvement: 1e-4,
            max_segments: 48,
        }
    }

    #[test]
    fn straight_flow_targets_collapse() {
        let budget = quick_budget();
        let t = 1.7;
        let target = EngelPoint::new(t, 0.0, 0.0, 0.0).unwrap();
        let b = engel_cc_bracket(&ENGEL_ZERO, &target, &budget).unwrap();
        assert_eq!(b.lower, t);
        assert_eq!(b.upper, t);

        let p_bar = EngelPoint::new(0.0, 1.0, 0.0, 0.0).unwrap();
        let b = engel_cc_bracket(&ENGEL_ZERO, &p_bar, &budget).unwrap();
        assert_eq!(b.lower, 1.0);
        assert_eq!(b.upper, 1.0);

        // Generic single-flow endpoint.
        let flowed = engel_flow(&ENGEL_ZERO, [0.6, -0.8], 1.0);
        let b = engel_cc_bracket(&ENGEL_ZERO, &flowed, &budget).unwrap();
        assert!((b.upper - 1.0).abs() < 1e-12);
        assert!((b.lower - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bracket_left_invariance() {
        let budget = quick_budget();
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        for _ in 0..4 {
            let g = random_point(&mut rng);
            let x = random_point(&mut rng);
            let raw = random_point(&mut rng);
            let gauge = raw.gauge().max(0.3);
            let y = x.multiply(&raw.dilate(1.0 / gauge).unwrap());
            let base = engel_cc_bracket(&x, &y, &budget).unwrap();
            let moved = engel_cc_bracket(&g.multiply(&x), &g.multiply(&y), &budget).unwrap();
            // Brackets of translated pairs overlap within 2%.
            let lo = base.lower.max(moved.lower);
            let hi = base.upper.min(moved.upper);
            assert!(
                lo <= hi * 1.02,
                "brackets disjoint: [{}, {}] vs [{}, {}]",
                base.lower,
                base.upper,
                moved.lower,
                moved.upper
            );
        }
    }

    #[test]
    fn martinet_projection_examples() {
        let p = EngelPoint::new(0.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(martinet_project(&p), [1.0, 0.0, 0.0]);
        assert_eq!(martinet_project(&ENGEL_ZERO), [0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let p = random_point(&mut rng);
            assert!(martinet_pushforward_error(&p) < 1e-15);
        }
    }

    #[test]
    fn projection_intertwines_lifts_with_swapped_controls() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..50 {
            let start = random_point(&mut rng);
            let segs: Vec<(f64, [f64; 2])> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0.1..1.0),
                        [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    )
                })
                .collect();
            let engel = EngelCurve::from_controls(start, segs.clone()).unwrap();
            // X picks up the second control, Y the first.
            let swapped: Vec<(f64, [f64; 2])> =
                segs.iter().map(|(d, c)| (*d, [c[1], c[0]])).collect();
            let image = martinet_lift(martinet_project(&start), &swapped);
            let expected = martinet_project(engel.endpoint());
            let err = image
                .iter()
                .zip(expected)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn martinet_bracket_below_engel_bracket() {
        let budget = quick_budget();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..4 {
            let raw = random_point(&mut rng);
            let gauge = raw.gauge().max(0.5);
            let p = raw.dilate(1.0 / gauge).unwrap();
            let engel = engel_cc_bracket(&ENGEL_ZERO, &p, &budget).unwrap();
            let mart =
                martinet_cc_bracket([0.0; 3], martinet_project(&p), &budget).unwrap();
            assert!(
                mart.lower <= engel.upper * 1.02 + 1e-9,
                "projection bound {} above engel upper {}",
                mart.lower,
                engel.upper
            );
        }
    }
}

#[cfg(test)]
mod debug_probe {
    use super::*;
    use crate::optim::solve_word;

    #[test]
    #[ignore]
    fn trace_vertical_start() {
        let k = 24;
        let target = vec![0.0, 0.0, 0.0, -1.0];
        use std::f64::consts::PI;
        for (sa, sb) in [(1.0f64, 1.0f64), (1.0, -1.0), (-1.0, 1.0)] {
            let mut w = Vec::new();
            for m in 0..k {
                let t = (m as f64 + 0.5) / k as f64;
                w.push(sa * 3.0 * (2.0 * PI * t).cos());
                w.push(sb * 3.0 * (4.0 * PI * t).cos());
            }
            let sol = solve_word(&EngelSystem, &target, k, &w, 90);
            println!(
                "fig8({sa},{sb}): converged={} feas={:.3e} length={:.6}",
                sol.converged, sol.feasibility, sol.length
            );
        }
    }

    #[test]
    #[ignore]
    fn trace_abnormal_starts() {
        let k = 12;
        let target = vec![0.0, 1.0, 0.0, -0.01];
        use std::f64::consts::PI;
        let vert_amp = 0.01f64.powf(1.0 / 3.0);
        for (label, word) in [
            ("straight", {
                let mut w = Vec::new();
                for _ in 0..k {
                    w.push(0.0);
                    w.push(1.0);
                }
                w
            }),
            ("fig8", {
                let mut w = Vec::new();
                for m in 0..k {
                    let t = (m as f64 + 0.5) / k as f64;
                    w.push(3.0 * vert_amp * (2.0 * PI * t).cos());
                    w.push(1.0 + 3.0 * vert_amp * (4.0 * PI * t).cos());
                }
                w
            }),
        ] {
            let sol = solve_word(&EngelSystem, &target, k, &word, 200);
            println!(
                "{label}: converged={} feas={:.3e} length={:.6}",
                sol.converged, sol.feasibility, sol.length
            );
        }
    }
}
