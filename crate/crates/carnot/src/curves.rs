//! Horizontal curves stored as control programs.
//!
//! A curve is a start point plus a list of `(duration, control)` segments;
//! on each segment the curve follows the horizontal flow of the constant
//! control, so the whole path is a concatenation of horizontal lines. All
//! endpoint arithmetic is closed-form: one group multiplication per segment.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::algebra::{
    same_structure, GroupPoint, GroupStructure, HomomorphismSpec, HorizontalVector, IsometryMap,
};
use crate::error::{CarnotError, Result};

/// One constant-control piece of a horizontal curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub control: Vec<f64>,
}

impl Segment {
    pub fn control_norm(&self) -> f64 {
        self.control.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Piecewise-linear horizontal curve: start point plus control segments.
/// Zero-duration segments are dropped at construction.
#[derive(Debug, Clone)]
pub struct ControlCurve {
    start: GroupPoint,
    segments: Vec<Segment>,
    endpoint: GroupPoint,
}

/// Length and Lipschitz constant of a control curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMeasure {
    pub length: f64,
    pub lipschitz: f64,
}

/// Serialization form of a curve: `{ "start": [...], "segments": [[duration, [control...]], ...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveData {
    pub start: Vec<f64>,
    pub segments: Vec<(f64, Vec<f64>)>,
}

impl ControlCurve {
    pub fn new(start: GroupPoint, segments: Vec<Segment>) -> Result<ControlCurve> {
        let rank = start.structure().rank();
        let mut kept = Vec::with_capacity(segments.len());
        for s in segments {
            if s.control.len() != rank {
                return Err(CarnotError::InvalidArgument(format!(
                    "control has {} components, rank is {rank}",
                    s.control.len()
                )));
            }
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
        let endpoint = propagate(&start, &kept)?;
        Ok(ControlCurve {
            start,
            segments: kept,
            endpoint,
        })
    }

    pub fn from_controls(start: GroupPoint, segments: Vec<(f64, Vec<f64>)>) -> Result<ControlCurve> {
        ControlCurve::new(
            start,
            segments
                .into_iter()
                .map(|(duration, control)| Segment { duration, control })
                .collect(),
        )
    }

    /// A curve that stays at `start`.
    pub fn constant(start: GroupPoint) -> ControlCurve {
        let endpoint = start.clone();
        ControlCurve {
            start,
            segments: Vec::new(),
            endpoint,
        }
    }

    pub fn structure(&self) -> &Arc<GroupStructure> {
        self.start.structure()
    }

    pub fn start(&self) -> &GroupPoint {
        &self.start
    }

    pub fn endpoint(&self) -> &GroupPoint {
        &self.endpoint
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Length `int |u|` and Lipschitz constant `max |u|` of the
    /// time-parametrized curve.
    pub fn measure(&self) -> CurveMeasure {
        let length = self
            .segments
            .iter()
            .map(|s| s.duration * s.control_norm())
            .sum();
        let lipschitz = self
            .segments
            .iter()
            .map(|s| s.control_norm())
            .fold(0.0, f64::max);
        CurveMeasure { length, lipschitz }
    }

    pub fn length(&self) -> f64 {
        self.measure().length
    }

    /// Position at time `t` in `[0, total_duration]`.
    pub fn point_at(&self, t: f64) -> Result<GroupPoint> {
        let total = self.total_duration();
        if !t.is_finite() || t < -1e-12 || t > total + 1e-12 {
            return Err(CarnotError::InvalidArgument(format!(
                "time {t} outside the curve domain [0, {total}]"
            )));
        }
        let mut remaining = t.clamp(0.0, total);
        let mut pos = self.start.clone();
        for s in &self.segments {
            if remaining <= 0.0 {
                break;
            }
            let dt = remaining.min(s.duration);
            let ctrl = HorizontalVector::new(s.control.clone())?;
            pos = pos.flow_line(&ctrl, dt)?;
            remaining -= dt;
        }
        Ok(pos)
    }

    /// Same control program traversed backwards; returns to the original
    /// start point exactly.
    pub fn reversed(&self) -> ControlCurve {
        let segments: Vec<Segment> = self
            .segments
            .iter()
            .rev()
            .map(|s| Segment {
                duration: s.duration,
                control: s.control.iter().map(|v| -v).collect(),
            })
            .collect();
        ControlCurve {
            start: self.endpoint.clone(),
            segments,
            endpoint: self.start.clone(),
        }
    }

    /// Continue with the control program of `other`, re-based at this
    /// curve's endpoint.
    pub fn concat(&self, other: &ControlCurve) -> Result<ControlCurve> {
        if !same_structure(self.structure(), other.structure()) {
            return Err(CarnotError::StructureMismatch(
                "cannot concatenate curves from different groups".into(),
            ));
        }
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().cloned());
        ControlCurve::new(self.start.clone(), segments)
    }

    /// Left translation by `g`: same controls, translated start.
    pub fn translated(&self, g: &GroupPoint) -> Result<ControlCurve> {
        ControlCurve::new(g.multiply(&self.start)?, self.segments.clone())
    }

    /// Image under the dilation: controls scale linearly, durations are kept.
    pub fn dilated(&self, lambda: f64) -> Result<ControlCurve> {
        let start = self.start.dilate(lambda)?;
        let segments = self
            .segments
            .iter()
            .map(|s| Segment {
                duration: s.duration,
                control: s.control.iter().map(|v| lambda * v).collect(),
            })
            .collect();
        ControlCurve::new(start, segments)
    }

    /// Image under a graded isometry: controls rotate by the horizontal part.
    pub fn mapped(&self, f: &IsometryMap) -> Result<ControlCurve> {
        let start = f.apply(&self.start)?;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let c = f.apply_vector(&HorizontalVector::new(s.control.clone())?);
                Ok(Segment {
                    duration: s.duration,
                    control: c.coefficients().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ControlCurve::new(start, segments)
    }

    /// Rescale time by `factor` (> 0): durations multiply by `factor`,
    /// controls divide by it. The traced path is unchanged.
    pub fn time_rescaled(&self, factor: f64) -> Result<ControlCurve> {
        if !(factor > 0.0) {
            return Err(CarnotError::InvalidArgument(
                "time rescale factor must be positive".into(),
            ));
        }
        let segments = self
            .segments
            .iter()
            .map(|s| Segment {
                duration: s.duration * factor,
                control: s.control.iter().map(|v| v / factor).collect(),
            })
            .collect();
        ControlCurve::new(self.start.clone(), segments)
    }

    pub fn to_data(&self) -> CurveData {
        CurveData {
            start: self.start.coordinates(),
            segments: self
                .segments
                .iter()
                .map(|s| (s.duration, s.control.clone()))
                .collect(),
        }
    }

    pub fn from_data(structure: &Arc<GroupStructure>, data: &CurveData) -> Result<ControlCurve> {
        let start = GroupPoint::from_coordinates(structure, &data.start)?;
        ControlCurve::from_controls(start, data.segments.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_data()).expect("curve serialization cannot fail")
    }

    pub fn from_json(structure: &Arc<GroupStructure>, text: &str) -> Result<ControlCurve> {
        let data: CurveData =
            serde_json::from_str(text).map_err(|e| CarnotError::Serialization(e.to_string()))?;
        ControlCurve::from_data(structure, &data)
    }
}

fn propagate(start: &GroupPoint, segments: &[Segment]) -> Result<GroupPoint> {
    let mut pos = start.clone();
    for s in segments {
        let ctrl = HorizontalVector::new(s.control.clone())?;
        pos = pos.flow_line(&ctrl, s.duration)?;
    }
    Ok(pos)
}

/// Horizontal lift of a planar polyline starting at `start`. Each polyline
/// edge becomes a unit-duration segment whose control is the edge vector;
/// the vertical coordinates then satisfy the lift integral exactly, because
/// the per-edge increment `1/2 (phi_i(a) dphi_j - phi_j(a) dphi_i)` is the
/// same closed form the group product applies.
pub fn lift(planar: &[Vec<f64>], start: &GroupPoint) -> Result<ControlCurve> {
    let rank = start.structure().rank();
    if planar.is_empty() {
        return Ok(ControlCurve::constant(start.clone()));
    }
    for v in planar {
        if v.len() != rank {
            return Err(CarnotError::InvalidArgument(format!(
                "polyline vertex has {} components, rank is {rank}",
                v.len()
            )));
        }
    }
    let mismatch = planar[0]
        .iter()
        .zip(start.horizontal())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if mismatch > 1e-9 {
        return Err(CarnotError::InvalidArgument(format!(
            "polyline must start at the horizontal projection of the start point (off by {mismatch:.3e})"
        )));
    }
    let segments = planar
        .windows(2)
        .map(|w| Segment {
            duration: 1.0,
            control: w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect(),
        })
        .collect();
    ControlCurve::new(start.clone(), segments)
}

/// Is the tangent vector `v` (full coordinates) horizontal at `p`?
/// True when the vertical components match the twist of the horizontal
/// ones within `1e-9` absolute.
pub fn check_horizontal(v: &[f64], p: &GroupPoint) -> Result<bool> {
    let structure = p.structure();
    if v.len() != structure.dim() {
        return Err(CarnotError::InvalidArgument(format!(
            "tangent vector has {} components, expected {}",
            v.len(),
            structure.dim()
        )));
    }
    let r = structure.rank();
    let expected = structure.bracket_term(p.horizontal(), &v[..r]);
    Ok(v[r..]
        .iter()
        .zip(expected)
        .all(|(a, b)| (a - b).abs() <= 1e-9))
}

/// Lift a curve of the target group through a layer-preserving
/// homomorphism: the source curve reuses the same controls, so its image
/// retraces the input and lengths agree exactly.
pub fn lift_through_hom(
    hom: &HomomorphismSpec,
    curve: &ControlCurve,
    start: &GroupPoint,
) -> Result<ControlCurve> {
    if !same_structure(hom.target(), curve.structure()) {
        return Err(CarnotError::StructureMismatch(
            "curve does not live in the homomorphism target".into(),
        ));
    }
    if !same_structure(hom.source(), start.structure()) {
        return Err(CarnotError::StructureMismatch(
            "start point does not live in the homomorphism source".into(),
        ));
    }
    let mismatch = start
        .horizontal()
        .iter()
        .zip(curve.start().horizontal())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if mismatch > 1e-9 {
        return Err(CarnotError::InvalidArgument(
            "start point must project onto the curve start".into(),
        ));
    }
    ControlCurve::new(start.clone(), curve.segments().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::build_quotient;
    use crate::algebra::BracketEntry;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn g2() -> Arc<GroupStructure> {
        GroupStructure::free(2).unwrap()
    }

    /// Composite-Simpson evaluation of the lift integral; independent of the
    /// closed-form segment update.
    fn lift_quadrature(planar: &[Vec<f64>], start: &GroupPoint) -> Vec<f64> {
        let structure = start.structure();
        let r = structure.rank();
        let mut vertical = start.vertical().to_vec();
        let steps = 2000;
        for w in planar.windows(2) {
            let a = &w[0];
            let b = &w[1];
            let vel: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
            let h = 1.0 / steps as f64;
            let pos = |t: f64| -> Vec<f64> {
                (0..r).map(|i| a[i] + t * vel[i]).collect()
            };
            let integrand = |t: f64| structure.bracket_term(&pos(t), &vel);
            for s in 0..steps {
                let t0 = s as f64 * h;
                let f0 = integrand(t0);
                let fm = integrand(t0 + 0.5 * h);
                let f1 = integrand(t0 + h);
                for k in 0..structure.vertical_dim() {
                    vertical[k] += h / 6.0 * (f0[k] + 4.0 * fm[k] + f1[k]);
                }
            }
        }
        vertical
    }

    #[test]
    fn radial_segment_has_no_vertical_part() {
        let g = g2();
        let start = GroupPoint::zero(&g);
        let curve = lift(&[vec![0.0, 0.0], vec![1.0, 1.0]], &start).unwrap();
        let end = curve.endpoint().coordinates();
        assert_eq!(end, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn unit_square_loop() {
        let g = g2();
        let start = GroupPoint::zero(&g);
        let square = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
        ];
        let curve = lift(&square, &start).unwrap();
        let end = curve.endpoint().coordinates();
        assert!((end[0]).abs() < 1e-15);
        assert!((end[1]).abs() < 1e-15);
        assert!((end[2] + 1.0).abs() < 1e-12);
        assert_eq!(curve.measure().length, 4.0);

        let quad = lift_quadrature(&square, &start);
        assert!((quad[0] - end[2]).abs() < 1e-9);
    }

    #[test]
    fn empty_polyline_is_constant() {
        let g = g2();
        let start = GroupPoint::from_coordinates(&g, &[0.5, -0.5, 0.25]).unwrap();
        let curve = lift(&[], &start).unwrap();
        assert_eq!(curve.endpoint().coordinates(), start.coordinates());
        assert_eq!(curve.segments().len(), 0);
    }

    #[test]
    fn lift_start_mismatch_errors() {
        let g = g2();
        let start = GroupPoint::zero(&g);
        let err = lift(&[vec![1.0, 0.0], vec![2.0, 0.0]], &start);
        assert!(err.is_err());
    }

    #[test]
    fn lift_matches_quadrature_on_random_polylines() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for r in [2usize, 3] {
            let g = GroupStructure::free(r).unwrap();
            for _ in 0..10 {
                let mut vertex = vec![0.0; r];
                let mut planar = vec![vertex.clone()];
                for _ in 0..5 {
                    vertex = vertex.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
                    planar.push(vertex.clone());
                }
                let start = GroupPoint::zero(&g);
                let curve = lift(&planar, &start).unwrap();
                let quad = lift_quadrature(&planar, &start);
                for (a, b) in curve.endpoint().vertical().iter().zip(quad) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn loop_vertical_parts_are_signed_areas() {
        // For a lifted loop, start^{-1} . end has vertical slot (i, j) equal
        // to the shoelace area of the loop projected to the (x_i, x_j) plane.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = GroupStructure::free(3).unwrap();
        for _ in 0..20 {
            let mut planar = vec![vec![0.0; 3]];
            for _ in 0..6 {
                planar.push((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            planar.push(vec![0.0; 3]);
            let start = GroupPoint::from_coordinates(
                &g,
                &(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
            )
            .unwrap();
            let translated: Vec<Vec<f64>> = planar
                .iter()
                .map(|v| v.iter().zip(start.horizontal()).map(|(a, b)| a + b).collect())
                .collect();
            let curve = lift(&translated, &start).unwrap();
            let hol = start.inverse().multiply(curve.endpoint()).unwrap();
            for (k, &(i, j)) in crate::algebra::free_pairs(3).iter().enumerate() {
                let shoelace: f64 = planar
                    .windows(2)
                    .map(|w| 0.5 * (w[0][i] * w[1][j] - w[1][i] * w[0][j]))
                    .sum();
                assert!((hol.vertical()[k] - shoelace).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn left_invariance_of_lifting() {
        let g = g2();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let controls: Vec<(f64, Vec<f64>)> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0.1..1.0),
                        vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    )
                })
                .collect();
            let base = ControlCurve::from_controls(GroupPoint::zero(&g), controls.clone()).unwrap();
            let shift = GroupPoint::from_coordinates(
                &g,
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
            .unwrap();
            let moved = base.translated(&shift).unwrap();
            let expected = shift.multiply(base.endpoint()).unwrap();
            let diff: f64 = moved
                .endpoint()
                .coordinates()
                .iter()
                .zip(expected.coordinates())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn reversal_returns_to_start() {
        let g = g2();
        let curve = ControlCurve::from_controls(
            GroupPoint::from_coordinates(&g, &[0.3, 0.1, -0.2]).unwrap(),
            vec![
                (0.5, vec![1.0, 2.0]),
                (0.25, vec![-1.0, 0.5]),
                (1.0, vec![0.0, -1.0]),
            ],
        )
        .unwrap();
        let back = curve.reversed();
        let diff: f64 = back
            .endpoint()
            .coordinates()
            .iter()
            .zip(curve.start().coordinates())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-14);
    }

    #[test]
    fn concatenation_endpoint() {
        let g = g2();
        let c1 = ControlCurve::from_controls(
            GroupPoint::zero(&g),
            vec![(1.0, vec![1.0, 0.0]), (1.0, vec![0.0, 1.0])],
        )
        .unwrap();
        let c2 = ControlCurve::from_controls(
            GroupPoint::zero(&g),
            vec![(0.5, vec![-1.0, 1.0])],
        )
        .unwrap();
        let joined = c1.concat(&c2).unwrap();
        let rebased = ControlCurve::from_controls(
            c1.endpoint().clone(),
            vec![(0.5, vec![-1.0, 1.0])],
        )
        .unwrap();
        assert_eq!(
            joined.endpoint().coordinates(),
            rebased.endpoint().coordinates()
        );
    }

    #[test]
    fn horizontality_checks() {
        let g = g2();
        let p = GroupPoint::from_coordinates(&g, &[0.7, -0.4, 0.2]).unwrap();
        let e1 = HorizontalVector::basis(2, 0);
        let v = e1.field_value(&p).unwrap();
        assert!(check_horizontal(&v, &p).unwrap());

        let vertical = vec![0.0, 0.0, 1.0];
        assert!(!check_horizontal(&vertical, &GroupPoint::zero(&g)).unwrap());

        // At p = (0, 1, 0) the twist of velocity e_1 is +1/2.
        let p = GroupPoint::from_coordinates(&g, &[0.0, 1.0, 0.0]).unwrap();
        assert!(check_horizontal(&[1.0, 0.0, 0.5], &p).unwrap());
        assert!(!check_horizontal(&[1.0, 0.0, -0.5], &p).unwrap());
    }

    #[test]
    fn hom_lift_preserves_length_and_endpoint_image() {
        let target = GroupStructure::from_constants(
            3,
            1,
            vec![
                BracketEntry { k: 0, i: 1, j: 0, value: 1.0 },
                BracketEntry { k: 0, i: 2, j: 0, value: 1.0 },
                BracketEntry { k: 0, i: 2, j: 1, value: 1.0 },
            ],
        )
        .unwrap();
        let hom = build_quotient(&target).unwrap();

        // Square loop in the first two controls.
        let loop_controls = vec![
            (1.0, vec![1.0, 0.0, 0.0]),
            (1.0, vec![0.0, 1.0, 0.0]),
            (1.0, vec![-1.0, 0.0, 0.0]),
            (1.0, vec![0.0, -1.0, 0.0]),
        ];
        let down = ControlCurve::from_controls(GroupPoint::zero(&target), loop_controls).unwrap();
        let up = lift_through_hom(&hom, &down, &GroupPoint::zero(hom.source())).unwrap();
        assert!((up.length() - down.length()).abs() < 1e-12);
        let image = hom.apply(up.endpoint()).unwrap();
        let diff: f64 = image
            .coordinates()
            .iter()
            .zip(down.endpoint().coordinates())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9);

        // Identity homomorphism returns the translated input.
        let free = GroupStructure::free(3).unwrap();
        let id = build_quotient(&free).unwrap();
        let base = ControlCurve::from_controls(
            GroupPoint::zero(&free),
            vec![(1.0, vec![0.2, -0.3, 0.4])],
        )
        .unwrap();
        let lifted = lift_through_hom(&id, &base, &GroupPoint::zero(&free)).unwrap();
        assert_eq!(lifted.segments(), base.segments());
    }

    #[test]
    fn zero_duration_segments_are_dropped() {
        let g = g2();
        let curve = ControlCurve::from_controls(
            GroupPoint::zero(&g),
            vec![(0.0, vec![5.0, 5.0]), (1.0, vec![1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(curve.segments().len(), 1);
        assert_eq!(curve.endpoint().coordinates(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn curve_json_round_trip() {
        let g = g2();
        let curve = ControlCurve::from_controls(
            GroupPoint::from_coordinates(&g, &[0.1, 0.2, 0.3]).unwrap(),
            vec![(0.5, vec![1.0, -1.0]), (0.25, vec![0.0, 2.0])],
        )
        .unwrap();
        let text = curve.to_json();
        let parsed = ControlCurve::from_json(&g, &text).unwrap();
        assert_eq!(parsed.segments(), curve.segments());
        assert_eq!(
            parsed.endpoint().coordinates(),
            curve.endpoint().coordinates()
        );
    }
}
