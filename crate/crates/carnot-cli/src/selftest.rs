//! Property suite run by `carnot selftest`: group laws, curve arithmetic,
//! synthesis and perturbation certificates, bracket consistency, covering
//! arithmetic, and the step-3 group checks. Any theorem-backed inequality
//! that fails turns the exit code to 2.

use clap::Args;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use carnot::algebra::{
    build_quotient, exp_horizontal, horizontal_isometry, BracketEntry, GroupPoint,
    GroupStructure, HorizontalVector,
};
use carnot::curves::ControlCurve;
use carnot::diff::{
    delta_threshold, deviation_check, deviation_ratio_bound, perturbed_line, PerturbationParams,
};
use carnot::distance::{
    cc_bracket, estimate_ck, koranyi, lower_bound_check, metric_comparison, synthesize_curve,
};
use carnot::engel::{
    engel_cc_bracket, engel_flow, martinet_pushforward_error, EngelPoint, ENGEL_ZERO,
};
use carnot::uds::{certify_tube_membership, premeasure, stage_cover, HorizontalSegment};
use carnot::OptimizerBudget;

#[derive(Args)]
pub struct SelftestArgs {
    /// Rank of the free group the step-2 suites run on.
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale factor for the sample counts.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

struct Suite {
    violations: Vec<String>,
}

impl Suite {
    fn new() -> Suite {
        Suite {
            violations: Vec::new(),
        }
    }

    fn run(&mut self, name: &str, result: Result<(), String>) {
        match result {
            Ok(()) => println!("selftest {name}: ok"),
            Err(msg) => {
                println!("selftest {name}: VIOLATION ({msg})");
                self.violations.push(format!("{name}: {msg}"));
            }
        }
    }
}

fn quick_budget(seed: u64) -> OptimizerBudget {
    OptimizerBudget {
        starts: 8,
        segments: 8,
        max_iters: 60,
        seed,
        rel_improvement: 1e-4,
        max_segments: 64,
    }
}

fn random_point(structure: &Arc<GroupStructure>, rng: &mut ChaCha8Rng, span: f64) -> GroupPoint {
    let coords: Vec<f64> = (0..structure.dim())
        .map(|_| rng.gen_range(-span..span))
        .collect();
    GroupPoint::from_coordinates(structure, &coords).expect("random coordinates are finite")
}

fn coord_gap(a: &GroupPoint, b: &GroupPoint) -> f64 {
    a.coordinates()
        .iter()
        .zip(b.coordinates())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn algebra_laws(structure: &Arc<GroupStructure>, rng: &mut ChaCha8Rng, n: usize) -> Result<(), String> {
    for i in 0..n {
        let x = random_point(structure, rng, 2.0);
        let y = random_point(structure, rng, 2.0);
        let z = random_point(structure, rng, 2.0);
        let a = x.multiply(&y).unwrap().multiply(&z).unwrap();
        let b = x.multiply(&y.multiply(&z).unwrap()).unwrap();
        let scale = a.coordinates().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if coord_gap(&a, &b) > 1e-9 * scale {
            return Err(format!("associativity failed at case {i}"));
        }
        if coord_gap(&x.multiply(&x.inverse()).unwrap(), &GroupPoint::zero(structure)) > 1e-12 {
            return Err(format!("inverse failed at case {i}"));
        }
        let l = rng.gen_range(0.1..3.0);
        let lhs = x.multiply(&y).unwrap().dilate(l).unwrap();
        let rhs = x.dilate(l).unwrap().multiply(&y.dilate(l).unwrap()).unwrap();
        if coord_gap(&lhs, &rhs) > 1e-9 * scale {
            return Err(format!("dilation homomorphism failed at case {i}"));
        }
    }
    Ok(())
}

fn quotient_laws(rng: &mut ChaCha8Rng, n: usize) -> Result<(), String> {
    let target = GroupStructure::from_constants(
        3,
        1,
        vec![
            BracketEntry { k: 0, i: 1, j: 0, value: 1.0 },
            BracketEntry { k: 0, i: 2, j: 0, value: 1.0 },
            BracketEntry { k: 0, i: 2, j: 1, value: 1.0 },
        ],
    )
    .map_err(|e| e.to_string())?;
    let hom = build_quotient(&target).map_err(|e| e.to_string())?;
    let free = hom.source().clone();
    for i in 0..n {
        let x = random_point(&free, rng, 2.0);
        let y = random_point(&free, rng, 2.0);
        let lhs = hom.apply(&x.multiply(&y).unwrap()).unwrap();
        let rhs = hom.apply(&x).unwrap().multiply(&hom.apply(&y).unwrap()).unwrap();
        if coord_gap(&lhs, &rhs) > 1e-9 {
            return Err(format!("homomorphism law failed at case {i}"));
        }
    }
    Ok(())
}

fn curve_laws(structure: &Arc<GroupStructure>, rng: &mut ChaCha8Rng, n: usize) -> Result<(), String> {
    let r = structure.rank();
    for i in 0..n {
        let segs: Vec<(f64, Vec<f64>)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.1..1.0),
                    (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let curve = ControlCurve::from_controls(GroupPoint::zero(structure), segs).unwrap();
        let back = curve.reversed();
        if coord_gap(back.endpoint(), curve.start()) > 1e-12 {
            return Err(format!("reversal failed at case {i}"));
        }
        let g = random_point(structure, rng, 1.0);
        let moved = curve.translated(&g).unwrap();
        let expected = g.multiply(curve.endpoint()).unwrap();
        if coord_gap(moved.endpoint(), &expected) > 1e-10 {
            return Err(format!("left invariance failed at case {i}"));
        }
    }
    Ok(())
}

fn synthesis_certificates(
    structure: &Arc<GroupStructure>,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<(), String> {
    let r = structure.rank();
    for i in 0..n {
        let mut coords = vec![0.0; structure.dim()];
        coords[0] = rng.gen_range(0.3..2.0);
        for v in coords.iter_mut().skip(r) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let y = GroupPoint::from_coordinates(structure, &coords).unwrap();
        let report = synthesize_curve(&y).map_err(|e| e.to_string())?;
        let err = coord_gap(report.curve.endpoint(), &y);
        if err > 1e-9 {
            return Err(format!("endpoint off by {err:.2e} at case {i}"));
        }
        if report.measured_lipschitz > report.lip_bound * (1.0 + 1e-12) {
            return Err(format!("Lipschitz certificate failed at case {i}"));
        }
        if report.measured_deviation > report.deriv_deviation_bound * (1.0 + 1e-12) + 1e-15 {
            return Err(format!("deviation certificate failed at case {i}"));
        }
    }
    Ok(())
}

fn line_collapse(
    structure: &Arc<GroupStructure>,
    rng: &mut ChaCha8Rng,
    budget: &OptimizerBudget,
    n: usize,
) -> Result<(), String> {
    let zero = GroupPoint::zero(structure);
    for i in 0..n {
        let raw: Vec<f64> = (0..structure.rank()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = match HorizontalVector::new(raw).unwrap().normalized() {
            Ok(e) => e,
            Err(_) => continue,
        };
        let t = rng.gen_range(0.1..3.0);
        let target = exp_horizontal(structure, &e.scale(t)).unwrap();
        let bracket = cc_bracket(&zero, &target, budget).map_err(|e| e.to_string())?;
        if (bracket.upper - t).abs() > 0.005 * t || (bracket.lower - t).abs() > 0.005 * t {
            return Err(format!(
                "horizontal ray collapse failed at case {i}: [{}, {}] vs {t}",
                bracket.lower, bracket.upper
            ));
        }
    }
    Ok(())
}

fn heisenberg_vertical(budget: &OptimizerBudget) -> Result<(), String> {
    let g = GroupStructure::free(2).map_err(|e| e.to_string())?;
    let zero = GroupPoint::zero(&g);
    let target = GroupPoint::from_coordinates(&g, &[0.0, 0.0, 1.0]).unwrap();
    let mut budget = budget.clone();
    budget.starts = budget.starts.max(12);
    budget.max_segments = 128;
    let bracket = cc_bracket(&zero, &target, &budget).map_err(|e| e.to_string())?;
    let exact = 2.0 * std::f64::consts::PI.sqrt();
    if bracket.upper < exact * (1.0 - 1e-9) {
        return Err(format!(
            "upper bound {} beats the exact vertical distance {exact}",
            bracket.upper
        ));
    }
    if bracket.upper > exact * 1.01 {
        return Err(format!(
            "upper bound {} misses the vertical distance {exact} by more than 1%",
            bracket.upper
        ));
    }
    Ok(())
}

fn perturbed_line_certificates(
    structure: &Arc<GroupStructure>,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<(), String> {
    let r = structure.rank();
    let ratio_cap = deviation_ratio_bound(structure);
    for i in 0..n {
        let eta = rng.gen_range(0.05..1.0);
        let delta = delta_threshold(eta, structure) * rng.gen_range(0.2..0.95);
        let params = PerturbationParams {
            eta,
            delta,
            radius: delta * rng.gen_range(0.1..0.9),
        };
        let x = random_point(structure, rng, 1.0);
        let raw: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = match HorizontalVector::new(raw).unwrap().normalized() {
            Ok(e) => e,
            Err(_) => continue,
        };
        let u_raw = random_point(structure, rng, 1.0);
        let g = koranyi(&u_raw).max(1e-6);
        let u = u_raw.dilate(rng.gen_range(0.05..1.0) / g).unwrap();

        let report = perturbed_line(&x, &u, &e, &params).map_err(|e| e.to_string())?;
        let target = x.multiply(&u.dilate(params.radius).unwrap()).unwrap();
        let at = report
            .curve
            .point_at(report.zeta + report.param_origin)
            .map_err(|e| e.to_string())?;
        if coord_gap(&at, &target) > 1e-9 {
            return Err(format!("interpolation point missed at case {i}"));
        }
        let line = x.flow_line(&e, report.s).unwrap();
        let seam = report
            .curve
            .point_at(report.s + report.param_origin)
            .map_err(|e| e.to_string())?;
        if coord_gap(&seam, &line) > 1e-9 {
            return Err(format!("line seam missed at case {i}"));
        }
        if report.measured_lipschitz > report.lip_bound * (1.0 + 1e-12) {
            return Err(format!("Lipschitz certificate failed at case {i}"));
        }
        if report.deviation_ratio > ratio_cap {
            return Err(format!("deviation ratio {} above cap at case {i}", report.deviation_ratio));
        }
    }
    Ok(())
}

fn deviation_certificates(
    structure: &Arc<GroupStructure>,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<(), String> {
    let r = structure.rank();
    for i in 0..n {
        let a_bound = rng.gen_range(0.01..1.0);
        let mut gsegs = Vec::new();
        let mut hsegs = Vec::new();
        for _ in 0..rng.gen_range(2..6) {
            let dur = rng.gen_range(0.1..0.8);
            let base: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let mut pert: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pn: f64 = pert.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if pn > 0.0 {
                rng.gen_range(0.0..1.0) * a_bound / pn
            } else {
                0.0
            };
            pert.iter_mut().for_each(|v| *v *= s);
            hsegs.push((dur, base.iter().zip(&pert).map(|(b, p)| b + p).collect()));
            gsegs.push((dur, base));
        }
        let gc = ControlCurve::from_controls(GroupPoint::zero(structure), gsegs).unwrap();
        let hc = ControlCurve::from_controls(GroupPoint::zero(structure), hsegs).unwrap();
        let s_bound = gc.measure().lipschitz.max(hc.measure().lipschitz).max(1.0);
        let report = deviation_check(&gc, &hc, s_bound, a_bound, 0.0).map_err(|e| e.to_string())?;
        if !report.ok {
            return Err(format!(
                "deviation estimate violated at case {i}: ratio {}",
                report.worst_ratio
            ));
        }
    }
    Ok(())
}

fn bracket_consistency(
    structure: &Arc<GroupStructure>,
    rng: &mut ChaCha8Rng,
    budget: &OptimizerBudget,
    n: usize,
) -> Result<(), String> {
    let e1 = HorizontalVector::basis(structure.rank(), 0);
    let u = exp_horizontal(structure, &e1).unwrap();
    for i in 0..n {
        let raw = random_point(structure, rng, 0.5);
        let g = koranyi(&raw).max(1e-6);
        let z = raw.dilate(rng.gen_range(0.05..0.5) / g).unwrap();
        let ok = lower_bound_check(&u, &z, budget).map_err(|e| e.to_string())?;
        if !ok {
            return Err(format!("first-order lower bound violated at case {i}"));
        }
    }
    Ok(())
}

fn covering_arithmetic(
    structure: &Arc<GroupStructure>,
    budget: &OptimizerBudget,
    seed: u64,
    samples: usize,
) -> Result<(), String> {
    for k in [4usize, 10, 100] {
        if premeasure(k, 1.0) != 4.0 {
            return Err(format!("premeasure(1) not exact for k = {k}"));
        }
    }
    let seg = HorizontalSegment::new(
        GroupPoint::zero(structure),
        HorizontalVector::basis(structure.rank(), 0),
        1.0,
    )
    .unwrap();
    let lines = vec![
        seg,
        HorizontalSegment::new(
            GroupPoint::zero(structure),
            HorizontalVector::basis(structure.rank(), 0),
            0.5,
        )
        .unwrap(),
    ];
    for r_exp in [1.5f64, 2.0] {
        let factor = 2f64.powf(1.0 - r_exp);
        let mut prev = stage_cover(&lines, 0, r_exp).map_err(|e| e.to_string())?;
        for i in 1..5 {
            let here = stage_cover(&lines, i, r_exp).map_err(|e| e.to_string())?;
            if (here - factor * prev).abs() > 1e-12 * prev {
                return Err(format!("stage decay inexact at stage {i}, exponent {r_exp}"));
            }
            prev = here;
        }
    }
    if samples > 0 {
        let report = certify_tube_membership(&lines[0], 8, samples, 6.0, budget, seed)
            .map_err(|e| e.to_string())?;
        if report.certified_violations > 0 {
            return Err(format!(
                "{} tube samples certified outside their ball",
                report.certified_violations
            ));
        }
        if report.certified_fraction() < 0.99 {
            return Err(format!(
                "certified fraction {} below 99%",
                report.certified_fraction()
            ));
        }
    }
    Ok(())
}

fn engel_laws(rng: &mut ChaCha8Rng, budget: &OptimizerBudget, n: usize) -> Result<(), String> {
    for i in 0..n {
        let rand_pt = |rng: &mut ChaCha8Rng| {
            EngelPoint::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            )
            .unwrap()
        };
        let x = rand_pt(rng);
        let y = rand_pt(rng);
        let z = rand_pt(rng);
        let a = x.multiply(&y).multiply(&z);
        let b = x.multiply(&y.multiply(&z));
        let gap = a
            .coordinates()
            .iter()
            .zip(b.coordinates())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        if gap > 1e-10 {
            return Err(format!("associativity failed at case {i}"));
        }
        let l = rng.gen_range(0.1..3.0);
        let lhs = x.multiply(&y).dilate(l).unwrap();
        let rhs = x.dilate(l).unwrap().multiply(&y.dilate(l).unwrap());
        let gap = lhs
            .coordinates()
            .iter()
            .zip(rhs.coordinates())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        if gap > 1e-10 {
            return Err(format!("dilation homomorphism failed at case {i}"));
        }
        if martinet_pushforward_error(&x) > 1e-12 {
            return Err(format!("frame pushforward failed at case {i}"));
        }
    }

    // Straight frame flows are exactly optimal.
    let flowed = engel_flow(&ENGEL_ZERO, [0.6, -0.8], 1.0);
    let bracket = engel_cc_bracket(&ENGEL_ZERO, &flowed, budget).map_err(|e| e.to_string())?;
    if (bracket.upper - 1.0).abs() > 1e-12 {
        return Err(format!("straight flow bracket did not collapse: {}", bracket.upper));
    }
    let base = EngelPoint::new(0.0, 1.0, 0.0, 0.0).unwrap();
    let shifted = EngelPoint::new(0.0, 1.25, 0.0, 0.0).unwrap();
    let q = (engel_cc_bracket(&ENGEL_ZERO, &shifted, budget)
        .map_err(|e| e.to_string())?
        .upper
        - engel_cc_bracket(&ENGEL_ZERO, &base, budget)
            .map_err(|e| e.to_string())?
            .upper)
        / 0.25;
    if q != 1.0 {
        return Err(format!("frame-direction quotient is {q} instead of 1"));
    }
    Ok(())
}

pub fn run(args: &SelftestArgs) -> Result<u8, String> {
    let rank = args.rank.max(2);
    let structure = GroupStructure::free(rank).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let budget = quick_budget(args.seed);
    let scale = |n: usize| ((n as f64 * args.scale).ceil() as usize).max(1);

    let mut suite = Suite::new();
    suite.run(
        "algebra-laws",
        algebra_laws(&structure, &mut rng, scale(1000)),
    );
    suite.run("quotient-homomorphism", quotient_laws(&mut rng, scale(200)));
    suite.run("curve-laws", curve_laws(&structure, &mut rng, scale(100)));
    suite.run(
        "synthesis-certificates",
        synthesis_certificates(&structure, &mut rng, scale(200)),
    );
    suite.run(
        "horizontal-ray-collapse",
        line_collapse(&structure, &mut rng, &budget, scale(25)),
    );
    suite.run("vertical-distance", heisenberg_vertical(&budget));
    suite.run(
        "perturbed-line-certificates",
        perturbed_line_certificates(&structure, &mut rng, scale(100)),
    );
    suite.run(
        "deviation-estimate",
        deviation_certificates(&structure, &mut rng, scale(100)),
    );
    suite.run(
        "first-order-lower-bound",
        bracket_consistency(&structure, &mut rng, &budget, scale(100)),
    );
    suite.run(
        "covering-arithmetic",
        covering_arithmetic(&structure, &budget, args.seed, scale(20)),
    );
    suite.run("step3-laws", engel_laws(&mut rng, &budget, scale(500)));

    // Empirical comparison constants: reported, not asserted.
    let ck = estimate_ck(&structure, scale(16), &budget, args.seed).map_err(|e| e.to_string())?;
    println!(
        "selftest gauge-comparison (report only): d/koranyi in [{:.4}, {:.4}] over {} samples",
        ck.min_ratio, ck.max_ratio, ck.samples
    );
    let mc =
        metric_comparison(&structure, scale(16), &budget, args.seed).map_err(|e| e.to_string())?;
    println!(
        "selftest metric-comparison (report only): min d/|x-y| = {:.4}, max d/|x-y|^(1/2) = {:.4}",
        mc.min_linear_ratio, mc.max_sqrt_ratio
    );

    // The isometry round trip stays within 1e-12.
    let mut worst = 0.0f64;
    for _ in 0..scale(50) {
        let y = random_point(&structure, &mut rng, 2.0);
        if y.horizontal_norm() < 1e-6 {
            continue;
        }
        let f = horizontal_isometry(&y).unwrap();
        let x = random_point(&structure, &mut rng, 2.0);
        let round = f.inverse().apply(&f.apply(&x).unwrap()).unwrap();
        worst = worst.max(coord_gap(&round, &x));
    }
    if worst > 1e-12 {
        suite.run(
            "isometry-round-trip",
            Err(format!("round trip error {worst:.2e}")),
        );
    } else {
        suite.run("isometry-round-trip", Ok(()));
    }

    if suite.violations.is_empty() {
        println!("selftest: all suites passed");
        Ok(super::EXIT_OK)
    } else {
        eprintln!("selftest: {} violation(s)", suite.violations.len());
        for v in &suite.violations {
            eprintln!("  {v}");
        }
        Ok(super::EXIT_CERTIFICATE)
    }
}
