//! Covering arithmetic for tube neighborhoods of horizontal segments:
//! equally spaced ball covers, Hausdorff premeasure sums, and the stage
//! sums of a shrinking tube family. Only finite stages are computed; the
//! decay of the stage sums is the quantitative content.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{same_structure, GroupPoint, HomomorphismSpec, HorizontalVector};
use crate::distance::{cc_bracket, koranyi};
use crate::error::{CarnotError, Result};
use crate::optim::OptimizerBudget;

/// A unit-speed horizontal segment of length at most one. Its endpoints are
/// at exact CC distance `length` from each other.
#[derive(Debug, Clone)]
pub struct HorizontalSegment {
    start: GroupPoint,
    direction: HorizontalVector,
    length: f64,
}

impl HorizontalSegment {
    pub fn new(
        start: GroupPoint,
        direction: HorizontalVector,
        length: f64,
    ) -> Result<HorizontalSegment> {
        if (direction.omega() - 1.0).abs() > 1e-12 {
            return Err(CarnotError::InvalidArgument(
                "segment direction must have unit norm".into(),
            ));
        }
        if !(length > 0.0 && length <= 1.0) {
            return Err(CarnotError::InvalidArgument(format!(
                "segment length must lie in (0, 1], got {length}"
            )));
        }
        if direction.coefficients().len() != start.structure().rank() {
            return Err(CarnotError::InvalidArgument(
                "direction rank does not match the start point".into(),
            ));
        }
        Ok(HorizontalSegment {
            start,
            direction,
            length,
        })
    }

    pub fn start(&self) -> &GroupPoint {
        &self.start
    }

    pub fn direction(&self) -> &HorizontalVector {
        &self.direction
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn point_at(&self, t: f64) -> Result<GroupPoint> {
        if t < -1e-12 || t > self.length + 1e-12 {
            return Err(CarnotError::InvalidArgument(
                "parameter outside the segment".into(),
            ));
        }
        self.start.flow_line(&self.direction, t.clamp(0.0, self.length))
    }

    pub fn endpoint(&self) -> Result<GroupPoint> {
        self.point_at(self.length)
    }
}

/// Hausdorff premeasure of a `k`-ball cover with diameter `4/k`:
/// `k (4/k)^{r} = 4^{r} k^{1-r}`. Integer exponents use exact power
/// arithmetic; `r = 1` gives `4` identically.
pub fn premeasure(k: usize, r_exp: f64) -> f64 {
    if r_exp == 1.0 {
        return 4.0;
    }
    if r_exp.fract() == 0.0 && r_exp > 0.0 && r_exp < 32.0 {
        let n = r_exp as i32;
        return 4f64.powi(n) * (k as f64).powi(1 - n);
    }
    k as f64 * (4.0 / k as f64).powf(r_exp)
}

/// A cover of the `1/k`-tube around a segment by `k` balls of diameter
/// `4/k` centered along the segment.
#[derive(Debug, Clone)]
pub struct CoverReport {
    pub k: usize,
    pub ball_centers: Vec<GroupPoint>,
    pub ball_diameter: f64,
    segment_length: f64,
    direction_first_coord: f64,
}

impl CoverReport {
    pub fn premeasure(&self, r_exp: f64) -> f64 {
        premeasure(self.k, r_exp)
    }

    /// Exact lower bound for the Lebesgue measure of the first-coordinate
    /// projection of the cover: the span of the center projections.
    pub fn projection_span(&self) -> f64 {
        self.direction_first_coord.abs() * self.segment_length * (self.k - 1) as f64
            / self.k as f64
    }
}

/// Cover the `1/k`-tube of a segment with `k` balls of diameter `4/k`,
/// centers equally spaced at parameters `(j + 1/2) length / k`.
pub fn tube_cover(segment: &HorizontalSegment, k: usize) -> Result<CoverReport> {
    if k < 4 {
        return Err(CarnotError::InvalidArgument(format!(
            "need at least 4 balls, got {k}"
        )));
    }
    let mut centers = Vec::with_capacity(k);
    for j in 0..k {
        let t = (j as f64 + 0.5) * segment.length / k as f64;
        centers.push(segment.point_at(t)?);
    }
    Ok(CoverReport {
        k,
        ball_centers: centers,
        ball_diameter: 4.0 / k as f64,
        segment_length: segment.length,
        direction_first_coord: segment.direction.coefficients()[0],
    })
}

/// Stage-`i` covering sum of a finite segment family: segment `j`
/// (1-based) is covered at scale `2^{i+j}`, contributing
/// `4^{r} (2^{i+j})^{1-r}`. Decays by the factor `2^{1-r}` per stage.
pub fn stage_cover(lines: &[HorizontalSegment], stage: usize, r_exp: f64) -> Result<f64> {
    if !(r_exp > 1.0) {
        return Err(CarnotError::InvalidArgument(
            "stage sums certify decay only for exponents above one".into(),
        ));
    }
    let rho = 2f64.powf(1.0 - r_exp);
    let coef = 4f64.powf(r_exp);
    let mut p = 1.0;
    for _ in 0..stage {
        p *= rho;
    }
    let mut sum = 0.0;
    for _ in lines {
        p *= rho;
        sum += coef * p;
    }
    Ok(sum)
}

/// Push a segment family through a layer-preserving homomorphism: starts
/// map through, directions and lengths are unchanged, so the images are
/// horizontal segments of the same length.
pub fn image_under_hom(
    hom: &HomomorphismSpec,
    segments: &[HorizontalSegment],
) -> Result<Vec<HorizontalSegment>> {
    segments
        .iter()
        .map(|s| {
            if !same_structure(hom.source(), s.start.structure()) {
                return Err(CarnotError::StructureMismatch(
                    "segment does not live in the homomorphism source".into(),
                ));
            }
            HorizontalSegment::new(
                hom.apply(&s.start)?,
                s.direction.clone(),
                s.length,
            )
        })
        .collect()
}

/// Outcome of sampling the tube and certifying ball membership through
/// distance brackets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembershipReport {
    pub samples: usize,
    /// Samples with a witnessed distance to the nearest center within the
    /// ball radius `2/k`.
    pub certified: usize,
    /// Samples whose certified lower bound exceeds the radius: impossible
    /// for points of the tube, so any nonzero count is a defect.
    pub certified_violations: usize,
    /// Samples the bracket could not decide either way.
    pub undecided: usize,
}

impl MembershipReport {
    pub fn certified_fraction(&self) -> f64 {
        self.certified as f64 / self.samples.max(1) as f64
    }
}

/// Sample points of the `1/k`-tube around the segment (gauge-ball
/// perturbations shrunk by `margin` keep the samples inside the CC tube)
/// and certify that each lies in the cover ball of its nearest center.
pub fn certify_tube_membership(
    segment: &HorizontalSegment,
    k: usize,
    samples: usize,
    margin: f64,
    budget: &OptimizerBudget,
    seed: u64,
) -> Result<MembershipReport> {
    if margin < 1.0 {
        return Err(CarnotError::InvalidArgument(
            "margin must be at least one".into(),
        ));
    }
    let cover = tube_cover(segment, k)?;
    let structure = segment.start.structure().clone();
    let q_hom = structure.homogeneous_dim() as f64;
    let radius_ball = 2.0 / k as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut certified = 0;
    let mut certified_violations = 0;
    let mut undecided = 0;
    for _ in 0..samples {
        let t = rng.gen_range(0.0..segment.length);
        let base = segment.point_at(t)?;
        // Gauge-uniform perturbation of radius 1/(margin k).
        let xi = loop {
            let coords: Vec<f64> = (0..structure.dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let p = GroupPoint::from_coordinates(&structure, &coords)?;
            let g = koranyi(&p);
            if g > 1e-3 {
                break p.dilate(1.0 / g)?;
            }
        };
        let rho = (1.0 / (margin * k as f64)) * rng.gen_range(0.0f64..1.0).powf(1.0 / q_hom);
        let point = if rho > 0.0 {
            base.multiply(&xi.dilate(rho)?)?
        } else {
            base
        };

        let j = ((t * k as f64 / segment.length) as usize).min(k - 1);
        let center = &cover.ball_centers[j];
        let bracket = cc_bracket(&point, center, budget)?;
        if bracket.upper <= radius_ball {
            certified += 1;
        } else if bracket.lower > radius_ball {
            certified_violations += 1;
        } else {
            undecided += 1;
        }
    }
    Ok(MembershipReport {
        samples,
        certified,
        certified_violations,
        undecided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{build_quotient, BracketEntry, GroupStructure};
    use std::sync::Arc;

    fn g2() -> Arc<GroupStructure> {
        GroupStructure::free(2).unwrap()
    }

    fn x1_segment(structure: &Arc<GroupStructure>, length: f64) -> HorizontalSegment {
        HorizontalSegment::new(
            GroupPoint::zero(structure),
            HorizontalVector::basis(structure.rank(), 0),
            length,
        )
        .unwrap()
    }

    #[test]
    fn premeasure_values() {
        for k in [4usize, 10, 100, 1000] {
            assert_eq!(premeasure(k, 1.0), 4.0);
        }
        assert!((premeasure(100, 1.5) - 0.8).abs() < 1e-12);
        for k in [4usize, 8, 64] {
            assert_eq!(premeasure(k, 2.0), 16.0 / k as f64);
        }
    }

    #[test]
    fn tube_cover_centers_and_projection() {
        let g = g2();
        let seg = x1_segment(&g, 1.0);
        let cover = tube_cover(&seg, 8).unwrap();
        assert_eq!(cover.ball_centers.len(), 8);
        assert_eq!(cover.ball_diameter, 0.5);
        assert_eq!(cover.ball_centers[0].horizontal()[0], 0.0625);
        // First-coordinate projection keeps almost the full length.
        assert!(cover.projection_span() >= seg.length() - 2.0 / 8.0);
        assert!(tube_cover(&seg, 3).is_err());
    }

    #[test]
    fn stage_sums() {
        let g = g2();
        let line = x1_segment(&g, 1.0);
        // Single line, exponent 2, stage 0: 16 * 2^{-1}.
        let s = stage_cover(std::slice::from_ref(&line), 0, 2.0).unwrap();
        assert!((s - 8.0).abs() < 1e-12);

        let lines: Vec<HorizontalSegment> = (0..5).map(|_| x1_segment(&g, 1.0)).collect();
        for r_exp in [1.5f64, 2.0, 2.5] {
            let factor = 2f64.powf(1.0 - r_exp);
            let mut prev = stage_cover(&lines, 0, r_exp).unwrap();
            for i in 1..6 {
                let here = stage_cover(&lines, i, r_exp).unwrap();
                assert!((here - factor * prev).abs() <= 1e-12 * prev);
                assert!(here < prev);
                prev = here;
            }
        }
        assert_eq!(stage_cover(&[], 3, 2.0).unwrap(), 0.0);
        assert!(stage_cover(&lines, 0, 1.0).is_err());
    }

    #[test]
    fn segment_endpoints_at_exact_distance() {
        let g = g2();
        let seg = x1_segment(&g, 0.75);
        let budget = OptimizerBudget {
            starts: 4,
            segments: 8,
            max_iters: 40,
            seed: 1,
            rel_improvement: 1e-3,
            max_segments: 16,
        };
        let b = cc_bracket(seg.start(), &seg.endpoint().unwrap(), &budget).unwrap();
        assert_eq!(b.lower, 0.75);
        assert_eq!(b.upper, 0.75);
    }

    #[test]
    fn hom_image_preserves_segments() {
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
        let free = hom.source().clone();
        let seg = HorizontalSegment::new(
            GroupPoint::from_coordinates(&free, &[0.1, 0.2, 0.3, 0.0, -0.1, 0.2]).unwrap(),
            HorizontalVector::basis(3, 0),
            0.5,
        )
        .unwrap();
        let images = image_under_hom(&hom, std::slice::from_ref(&seg)).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].length(), 0.5);
        // The image segment is the image of the segment pointwise.
        let mid_src = seg.point_at(0.25).unwrap();
        let mid_img = images[0].point_at(0.25).unwrap();
        let expected = hom.apply(&mid_src).unwrap();
        let err: f64 = mid_img
            .coordinates()
            .iter()
            .zip(expected.coordinates())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn membership_certification_smoke() {
        let g = g2();
        let seg = x1_segment(&g, 1.0);
        let budget = OptimizerBudget {
            starts: 4,
            segments: 8,
            max_iters: 40,
            seed: 2,
            rel_improvement: 1e-3,
            max_segments: 16,
        };
        let report = certify_tube_membership(&seg, 8, 40, 6.0, &budget, 77).unwrap();
        assert_eq!(report.certified_violations, 0);
        assert!(report.certified_fraction() >= 0.99, "{report:?}");
    }
}
