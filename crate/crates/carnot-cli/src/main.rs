//! Batch experiment runner: distance queries, curve synthesis
//! certificates, differentiability scans, the step-3 cube-root scan,
//! covering sums, and the self-test suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 certificate violation (a
//! theorem-backed inequality failed, which always indicates a defect in
//! the numerics, never in the mathematics).

mod selftest;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use carnot::algebra::{GroupPoint, GroupStructure};
use carnot::diff::{
    default_schedule, gauge_shell, maximality_test, pansu_scan, ScalarField,
};
use carnot::distance::{cc_bracket, synthesize_curve};
use carnot::engel::{cube_root_scan, engel_cc_bracket, EngelPoint, ENGEL_ZERO};
use carnot::error::CarnotError;
use carnot::uds::{certify_tube_membership, stage_cover, tube_cover, HorizontalSegment};
use carnot::OptimizerBudget;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_CERTIFICATE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "carnot",
    version,
    about = "Carnot group experiments: distance brackets, curve synthesis, differentiability scans, covering sums"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bracket a CC distance between two points.
    Dist(DistArgs),
    /// Synthesize the explicit curve to an aligned target and print its
    /// certificate.
    Synth(SynthArgs),
    /// Difference-quotient scan of a scalar field over a gauge shell.
    DiffScan(DiffScanArgs),
    /// Cube-root scan along the abnormal direction of the step-3 group.
    EngelScan(EngelScanArgs),
    /// Tube covers, premeasure values, and stage sums.
    UdsCover(UdsCoverArgs),
    /// Run the full property suite.
    Selftest(selftest::SelftestArgs),
}

#[derive(Args, Clone)]
struct GroupArgs {
    /// Rank of the free step-2 group.
    #[arg(long, conflicts_with_all = ["structure_file", "engel"])]
    rank: Option<usize>,
    /// JSON file with structure constants of a step-2 group.
    #[arg(long, conflicts_with = "engel")]
    structure_file: Option<PathBuf>,
    /// Use the step-3 group instead of a step-2 group.
    #[arg(long)]
    engel: bool,
}

impl GroupArgs {
    fn structure(&self) -> Result<Arc<GroupStructure>, String> {
        if let Some(path) = &self.structure_file {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            return GroupStructure::from_json(&text).map_err(|e| e.to_string());
        }
        GroupStructure::free(self.rank.unwrap_or(2)).map_err(|e| e.to_string())
    }
}

#[derive(Args, Clone)]
struct BudgetArgs {
    /// JSON budget file: { "starts", "segments", "max_iters", "seed" }.
    #[arg(long)]
    budget_file: Option<PathBuf>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rel_improvement: Option<f64>,
    #[arg(long)]
    max_segments: Option<usize>,
}

impl BudgetArgs {
    fn resolve(&self) -> Result<OptimizerBudget, String> {
        let mut budget = match &self.budget_file {
            Some(path) => {
                let text =
                    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                OptimizerBudget::from_json(&text).map_err(|e| e.to_string())?
            }
            None => OptimizerBudget::default(),
        };
        if let Some(v) = self.starts {
            budget.starts = v;
        }
        if let Some(v) = self.segments {
            budget.segments = v;
        }
        if let Some(v) = self.max_iters {
            budget.max_iters = v;
        }
        if let Some(v) = self.seed {
            budget.seed = v;
        }
        if let Some(v) = self.rel_improvement {
            budget.rel_improvement = v;
        }
        if let Some(v) = self.max_segments {
            budget.max_segments = v;
        }
        Ok(budget)
    }
}

#[derive(Args, Clone)]
struct OutputArgs {
    /// Prefix for output files (PREFIX.json, PREFIX.csv, PREFIX.meta.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutputArgs {
    fn emit(&self, config: &serde_json::Value, json: &str, csv: &str) -> Result<(), String> {
        let Some(prefix) = &self.out else {
            return Ok(());
        };
        let base = prefix.to_string_lossy().to_string();
        let hash = {
            let mut hasher = Sha256::new();
            hasher.update(config.to_string().as_bytes());
            format!("{:x}", hasher.finalize())
        };
        let meta = serde_json::json!({
            "config": config,
            "config_hash": hash,
            "tool_version": env!("CARGO_PKG_VERSION"),
        });
        fs::write(format!("{base}.json"), json).map_err(|e| e.to_string())?;
        fs::write(format!("{base}.csv"), csv).map_err(|e| e.to_string())?;
        fs::write(format!("{base}.meta.json"), meta.to_string()).map_err(|e| e.to_string())?;
        Ok(())
    }
}

fn parse_csv_floats(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number {p:?}: {e}"))
        })
        .collect()
}

#[derive(Args)]
struct DistArgs {
    #[command(flatten)]
    group: GroupArgs,
    /// Start point coordinates (defaults to the identity).
    #[arg(long)]
    from: Option<String>,
    /// Target point coordinates.
    #[arg(long)]
    to: String,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    output: OutputArgs,
}

fn run_dist(args: &DistArgs) -> Result<u8, String> {
    let budget = args.budget.resolve()?;
    let to = parse_csv_floats(&args.to)?;

    let (summary, json, csv, lower, upper) = if args.group.engel {
        let target = engel_point(&to)?;
        let from = match &args.from {
            Some(f) => engel_point(&parse_csv_floats(f)?)?,
            None => ENGEL_ZERO,
        };
        let bracket = engel_cc_bracket(&from, &target, &budget).map_err(|e| e.to_string())?;
        let json = serde_json::json!({
            "lower": bracket.lower,
            "upper": bracket.upper,
            "converged": bracket.converged,
            "refinement_gap": bracket.refinement_gap,
            "witness": serde_json::from_str::<serde_json::Value>(&bracket.witness.to_json()).unwrap(),
        })
        .to_string();
        let csv = format!(
            "lower,upper,width,converged\n{},{},{},{}\n",
            bracket.lower,
            bracket.upper,
            bracket.width(),
            bracket.converged
        );
        (
            format!(
                "dist(engel): lower={} upper={} converged={}",
                bracket.lower, bracket.upper, bracket.converged
            ),
            json,
            csv,
            bracket.lower,
            bracket.upper,
        )
    } else {
        let structure = args.group.structure()?;
        let target =
            GroupPoint::from_coordinates(&structure, &to).map_err(|e| e.to_string())?;
        let from = match &args.from {
            Some(f) => GroupPoint::from_coordinates(&structure, &parse_csv_floats(f)?)
                .map_err(|e| e.to_string())?,
            None => GroupPoint::zero(&structure),
        };
        let bracket = cc_bracket(&from, &target, &budget).map_err(|e| e.to_string())?;
        let json = bracket.to_json();
        let csv = format!(
            "lower,upper,width,converged\n{},{},{},{}\n",
            bracket.lower,
            bracket.upper,
            bracket.width(),
            bracket.converged
        );
        (
            format!(
                "dist: lower={} upper={} converged={} method={:?}",
                bracket.lower, bracket.upper, bracket.converged, bracket.upper_method
            ),
            json,
            csv,
            bracket.lower,
            bracket.upper,
        )
    };

    let config = serde_json::json!({
        "command": "dist",
        "engel": args.group.engel,
        "rank": args.group.rank,
        "structure_file": args.group.structure_file.as_ref().map(|p| p.to_string_lossy()),
        "from": args.from,
        "to": args.to,
        "budget": serde_json::from_str::<serde_json::Value>(&budget.to_json()).unwrap(),
    });
    args.output.emit(&config, &json, &csv)?;
    println!("{summary}");

    // The bracket ordering is theorem-backed.
    if lower > upper * (1.0 + 1e-12) {
        eprintln!("certificate violation: lower bound {lower} exceeds upper bound {upper}");
        return Ok(EXIT_CERTIFICATE);
    }
    Ok(EXIT_OK)
}

fn engel_point(coords: &[f64]) -> Result<EngelPoint, String> {
    if coords.len() != 4 {
        return Err(format!("expected 4 coordinates, got {}", coords.len()));
    }
    EngelPoint::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    group: GroupArgs,
    /// Aligned target coordinates: first horizontal positive, remaining
    /// horizontal zero.
    #[arg(long)]
    target: String,
    #[command(flatten)]
    output: OutputArgs,
}

fn run_synth(args: &SynthArgs) -> Result<u8, String> {
    if args.group.engel {
        return Err("curve synthesis works on step-2 groups only".into());
    }
    let structure = args.group.structure()?;
    let coords = parse_csv_floats(&args.target)?;
    let target = GroupPoint::from_coordinates(&structure, &coords).map_err(|e| e.to_string())?;
    let report = synthesize_curve(&target).map_err(|e| e.to_string())?;

    let json = serde_json::json!({
        "a_max": report.a_max,
        "b_max": report.b_max,
        "lip_bound": report.lip_bound,
        "deriv_deviation_bound": report.deriv_deviation_bound,
        "p_intervals": report.p_intervals,
        "measured_lipschitz": report.measured_lipschitz,
        "measured_deviation": report.measured_deviation,
        "curve": serde_json::from_str::<serde_json::Value>(&report.curve.to_json()).unwrap(),
    })
    .to_string();
    let mut csv = String::from("segment,duration,control\n");
    for (i, seg) in report.curve.segments().iter().enumerate() {
        let ctrl = seg
            .control
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        csv.push_str(&format!("{i},{},{ctrl}\n", seg.duration));
    }

    let config = serde_json::json!({
        "command": "synth",
        "rank": args.group.rank,
        "structure_file": args.group.structure_file.as_ref().map(|p| p.to_string_lossy()),
        "target": args.target,
    });
    args.output.emit(&config, &json, &csv)?;
    println!(
        "synth: segments={} lipschitz={} (bound {}) deviation={} (bound {})",
        report.curve.segments().len(),
        report.measured_lipschitz,
        report.lip_bound,
        report.measured_deviation,
        report.deriv_deviation_bound
    );

    if report.measured_lipschitz > report.lip_bound * (1.0 + 1e-12)
        || report.measured_deviation > report.deriv_deviation_bound * (1.0 + 1e-12) + 1e-15
    {
        eprintln!("certificate violation: synthesized curve exceeds its certified bounds");
        return Ok(EXIT_CERTIFICATE);
    }
    Ok(EXIT_OK)
}

#[derive(Args)]
struct DiffScanArgs {
    #[command(flatten)]
    group: GroupArgs,
    /// Base point coordinates (defaults to exp of the first basis field).
    #[arg(long)]
    at: Option<String>,
    /// Horizontal direction for the maximality probe.
    #[arg(long)]
    direction: Option<String>,
    /// Field to scan: "dist", "coord:i", or "linear:v1,v2,...".
    #[arg(long, default_value = "dist")]
    field: String,
    /// Step schedule (decreasing, comma separated).
    #[arg(long)]
    schedule: Option<String>,
    /// Number of shell directions.
    #[arg(long, default_value_t = 64)]
    shell: usize,
    /// Also run the maximality probe along --direction.
    #[arg(long)]
    maximality: bool,
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    output: OutputArgs,
}

fn run_diff_scan(args: &DiffScanArgs) -> Result<u8, String> {
    if args.group.engel {
        return Err("diff-scan works on step-2 groups; use engel-scan for the step-3 group".into());
    }
    let structure = args.group.structure()?;
    let r = structure.rank();
    let budget = args.budget.resolve()?;

    let field = match args.field.as_str() {
        "dist" => ScalarField::distance_from_origin(budget.clone()),
        other => {
            if let Some(rest) = other.strip_prefix("coord:") {
                let i: usize = rest.parse().map_err(|e| format!("bad coordinate: {e}"))?;
                if i >= r {
                    return Err(format!("coordinate {i} out of range for rank {r}"));
                }
                ScalarField::coordinate(i)
            } else if let Some(rest) = other.strip_prefix("linear:") {
                let v = parse_csv_floats(rest)?;
                if v.len() != r {
                    return Err(format!("linear field needs {r} coefficients"));
                }
                ScalarField::g_linear(v)
            } else {
                return Err(format!("unknown field {other:?}"));
            }
        }
    };

    let at = match &args.at {
        Some(text) => GroupPoint::from_coordinates(&structure, &parse_csv_floats(text)?)
            .map_err(|e| e.to_string())?,
        None => {
            let mut coords = vec![0.0; structure.dim()];
            coords[0] = 1.0;
            GroupPoint::from_coordinates(&structure, &coords).map_err(|e| e.to_string())?
        }
    };
    let schedule = match &args.schedule {
        Some(text) => parse_csv_floats(text)?,
        None => default_schedule(),
    };
    let shell = gauge_shell(&structure, args.shell).map_err(|e| e.to_string())?;

    let (json, summary) = if args.maximality {
        let direction = match &args.direction {
            Some(text) => carnot::algebra::HorizontalVector::new(parse_csv_floats(text)?)
                .and_then(|v| v.normalized())
                .map_err(|e| e.to_string())?,
            None => carnot::algebra::HorizontalVector::basis(r, 0),
        };
        let report = maximality_test(&field, &at, &direction, &shell, &schedule, args.tolerance)
            .map_err(|e| e.to_string())?;
        let summary = format!(
            "diff-scan: maximal={} candidate_deviation={} worst_residual={}",
            report.maximal, report.max_deviation, report.scan.worst_residual
        );
        (report.to_json(), summary)
    } else {
        let report = pansu_scan(&field, &at, &shell, &schedule).map_err(|e| e.to_string())?;
        let summary = format!(
            "diff-scan: candidate={:?} worst_residual={}",
            report.candidate, report.worst_residual
        );
        (report.to_json(), summary)
    };

    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    let mut csv = String::from("step,max_residual\n");
    if let (Some(steps), Some(resid)) = (
        parsed.pointer("/schedule").or_else(|| parsed.pointer("/scan/schedule")),
        parsed
            .pointer("/per_step_max_residual")
            .or_else(|| parsed.pointer("/scan/per_step_max_residual")),
    ) {
        let steps = steps.as_array().unwrap();
        let resid = resid.as_array().unwrap();
        for (s, r) in steps.iter().zip(resid) {
            csv.push_str(&format!("{s},{r}\n"));
        }
    }

    let config = serde_json::json!({
        "command": "diff-scan",
        "rank": args.group.rank,
        "structure_file": args.group.structure_file.as_ref().map(|p| p.to_string_lossy()),
        "at": args.at,
        "direction": args.direction,
        "field": args.field,
        "schedule": args.schedule,
        "shell": args.shell,
        "maximality": args.maximality,
        "tolerance": args.tolerance,
        "budget": serde_json::from_str::<serde_json::Value>(&budget.to_json()).unwrap(),
    });
    args.output.emit(&config, &json, &csv)?;
    println!("{summary}");
    Ok(EXIT_OK)
}

#[derive(Args)]
struct EngelScanArgs {
    /// Smallest scan value.
    #[arg(long, default_value_t = 1e-4)]
    zeta_min: f64,
    /// Largest scan value.
    #[arg(long, default_value_t = 1e-2)]
    zeta_max: f64,
    /// Number of log-spaced points.
    #[arg(long, default_value_t = 7)]
    points: usize,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    output: OutputArgs,
}

fn run_engel_scan(args: &EngelScanArgs) -> Result<u8, String> {
    let mut budget = args.budget.resolve()?;
    if args.budget.segments.is_none() && args.budget.budget_file.is_none() {
        budget.segments = 24;
    }
    if !(args.zeta_min > 0.0 && args.zeta_min < args.zeta_max && args.zeta_max <= 1e-2) {
        return Err("need 0 < zeta-min < zeta-max <= 1e-2".into());
    }
    let n = args.points.max(5);
    let zetas: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            args.zeta_min * (args.zeta_max / args.zeta_min).powf(t)
        })
        .collect();
    let scan = cube_root_scan(&zetas, &budget).map_err(|e| e.to_string())?;

    let mut csv = String::from("zeta,lower,upper,D,fitted_slope\n");
    for p in &scan.points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.zeta, p.lower, p.upper, p.excess, scan.slope
        ));
    }
    let json = scan.to_json();
    let config = serde_json::json!({
        "command": "engel-scan",
        "zeta_min": args.zeta_min,
        "zeta_max": args.zeta_max,
        "points": args.points,
        "budget": serde_json::from_str::<serde_json::Value>(&budget.to_json()).unwrap(),
    });
    args.output.emit(&config, &json, &csv)?;
    println!(
        "engel-scan: slope={} unflagged={} x2_quotient={} vertical_unit_distance={}",
        scan.slope, scan.unflagged, scan.x2_quotient, scan.vertical_unit_distance
    );

    // The directional quotient along the straight frame flow is exact.
    if scan.x2_quotient != 1.0 {
        eprintln!(
            "certificate violation: quotient along the second frame direction is {} instead of 1",
            scan.x2_quotient
        );
        return Ok(EXIT_CERTIFICATE);
    }
    Ok(EXIT_OK)
}

#[derive(Args)]
struct UdsCoverArgs {
    #[command(flatten)]
    group: GroupArgs,
    /// JSON file: list of { "start": [...], "direction": [...], "length": l }.
    #[arg(long)]
    lines_file: Option<PathBuf>,
    /// Balls in the tube cover.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Premeasure exponent.
    #[arg(long, default_value_t = 1.5)]
    r_exp: f64,
    /// Highest stage of the stage sums.
    #[arg(long, default_value_t = 8)]
    stage: usize,
    /// Sample count for membership certification (0 disables).
    #[arg(long, default_value_t = 0)]
    certify: usize,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    output: OutputArgs,
}

fn load_segments(
    structure: &Arc<GroupStructure>,
    path: Option<&PathBuf>,
) -> Result<Vec<HorizontalSegment>, String> {
    match path {
        None => {
            let seg = HorizontalSegment::new(
                GroupPoint::zero(structure),
                carnot::algebra::HorizontalVector::basis(structure.rank(), 0),
                1.0,
            )
            .map_err(|e| e.to_string())?;
            Ok(vec![seg])
        }
        Some(path) => {
            #[derive(serde::Deserialize)]
            struct SegData {
                start: Vec<f64>,
                direction: Vec<f64>,
                length: f64,
            }
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let data: Vec<SegData> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            data.into_iter()
                .map(|d| {
                    let start = GroupPoint::from_coordinates(structure, &d.start)
                        .map_err(|e| e.to_string())?;
                    let dir = carnot::algebra::HorizontalVector::new(d.direction)
                        .and_then(|v| v.normalized())
                        .map_err(|e| e.to_string())?;
                    HorizontalSegment::new(start, dir, d.length).map_err(|e| e.to_string())
                })
                .collect()
        }
    }
}

fn run_uds_cover(args: &UdsCoverArgs) -> Result<u8, String> {
    if args.group.engel {
        return Err("uds-cover works on step-2 groups".into());
    }
    let structure = args.group.structure()?;
    let segments = load_segments(&structure, args.lines_file.as_ref())?;
    let budget = args.budget.resolve()?;

    let mut csv = String::from("record,index,value\n");
    let cover = tube_cover(&segments[0], args.k).map_err(|e| e.to_string())?;
    csv.push_str(&format!("ball_diameter,0,{}\n", cover.ball_diameter));
    csv.push_str(&format!("premeasure,0,{}\n", cover.premeasure(args.r_exp)));
    let mut stages = Vec::new();
    for i in 0..=args.stage {
        let s = stage_cover(&segments, i, args.r_exp.max(1.0 + 1e-9))
            .map_err(|e| e.to_string())?;
        csv.push_str(&format!("stage_sum,{i},{s}\n"));
        stages.push(s);
    }

    let mut membership = None;
    let mut exit = EXIT_OK;
    if args.certify > 0 {
        let report = certify_tube_membership(
            &segments[0],
            args.k,
            args.certify,
            6.0,
            &budget,
            budget.seed,
        )
        .map_err(|e| e.to_string())?;
        csv.push_str(&format!("certified,0,{}\n", report.certified));
        csv.push_str(&format!(
            "certified_violations,0,{}\n",
            report.certified_violations
        ));
        if report.certified_violations > 0 {
            eprintln!(
                "certificate violation: {} tube samples certified outside their cover ball",
                report.certified_violations
            );
            exit = EXIT_CERTIFICATE;
        }
        membership = Some(report);
    }

    let json = serde_json::json!({
        "k": args.k,
        "r_exp": args.r_exp,
        "ball_diameter": cover.ball_diameter,
        "premeasure": cover.premeasure(args.r_exp),
        "projection_span": cover.projection_span(),
        "stage_sums": stages,
        "membership": membership,
    })
    .to_string();
    let config = serde_json::json!({
        "command": "uds-cover",
        "rank": args.group.rank,
        "structure_file": args.group.structure_file.as_ref().map(|p| p.to_string_lossy()),
        "lines_file": args.lines_file.as_ref().map(|p| p.to_string_lossy()),
        "k": args.k,
        "r_exp": args.r_exp,
        "stage": args.stage,
        "certify": args.certify,
        "budget": serde_json::from_str::<serde_json::Value>(&budget.to_json()).unwrap(),
    });
    args.output.emit(&config, &json, &csv)?;
    println!(
        "uds-cover: k={} premeasure({})={} stages=0..{}",
        args.k,
        args.r_exp,
        cover.premeasure(args.r_exp),
        args.stage
    );
    Ok(exit)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successful exits.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    let result = match &cli.command {
        Command::Dist(args) => run_dist(args),
        Command::Synth(args) => run_synth(args),
        Command::DiffScan(args) => run_diff_scan(args),
        Command::EngelScan(args) => run_engel_scan(args),
        Command::UdsCover(args) => run_uds_cover(args),
        Command::Selftest(args) => selftest::run(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

#[allow(dead_code)]
fn map_carnot_error(e: CarnotError) -> String {
    e.to_string()
}
