//! Constrained control-word optimization.
//!
//! Distance upper bounds are computed by minimizing the energy of a
//! `k`-segment control word subject to the endpoint reaching the target,
//! via a damped Newton iteration on the KKT system. Multi-start handles the
//! nonconvexity; `k` is doubled (splitting each segment in two) until the
//! relative improvement drops below the budget threshold.
//!
//! Energy minimizers with fixed equal durations run at constant speed, so
//! the reported length `tau * sum |u_m|` matches the shortest word found.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Search budget for a distance query. Parses from
/// `{ "starts": n, "segments": k, "max_iters": m, "seed": s }`; the
/// remaining knobs have defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerBudget {
    /// Independent starts at the base segment count.
    pub starts: usize,
    /// Base number of segments in a control word.
    pub segments: usize,
    /// Newton iteration cap per start.
    pub max_iters: usize,
    /// Seed for the deterministic start generation.
    pub seed: u64,
    /// Stop doubling once the relative length improvement falls below this.
    pub rel_improvement: f64,
    /// Cap on the segment count reached by doubling.
    pub max_segments: usize,
}

impl Default for OptimizerBudget {
    fn default() -> Self {
        OptimizerBudget {
            starts: 16,
            segments: 8,
            max_iters: 64,
            seed: 0,
            rel_improvement: 1e-3,
            max_segments: 128,
        }
    }
}

impl OptimizerBudget {
    pub fn from_json(text: &str) -> crate::error::Result<OptimizerBudget> {
        serde_json::from_str(text)
            .map_err(|e| crate::error::CarnotError::Serialization(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("budget serialization cannot fail")
    }
}

/// Endpoint map of a control system with controls in `R^q` and endpoint
/// constraints in `R^c`, for words of `k` equal-duration segments on `[0, 1]`.
pub(crate) trait ControlSystem: Sync {
    fn control_dim(&self) -> usize;
    fn constraint_dim(&self) -> usize;
    /// Endpoint coordinates for the flattened control word.
    fn endpoint(&self, theta: &[f64], k: usize) -> Vec<f64>;
    /// `c x (k q)` Jacobian of the endpoint map.
    fn jacobian(&self, theta: &[f64], k: usize) -> DMatrix<f64>;
    /// Hessian of `nu . endpoint` (constraint curvature only).
    fn weighted_hessian(&self, theta: &[f64], k: usize, nu: &[f64]) -> DMatrix<f64>;
}

const FEAS_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct WordSolution {
    pub controls: Vec<f64>,
    pub k: usize,
    pub length: f64,
    pub feasibility: f64,
    pub converged: bool,
}

pub(crate) fn word_length(theta: &[f64], k: usize, q: usize) -> f64 {
    let tau = 1.0 / k as f64;
    (0..k)
        .map(|m| {
            let u = &theta[m * q..(m + 1) * q];
            tau * u.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .sum()
}

/// Split every segment in two, keeping the traced path identical.
pub(crate) fn resample_double(theta: &[f64], k: usize, q: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * theta.len());
    for m in 0..k {
        let u = &theta[m * q..(m + 1) * q];
        out.extend_from_slice(u);
        out.extend_from_slice(u);
    }
    out
}

fn constraint(sys: &dyn ControlSystem, target: &[f64], theta: &[f64], k: usize) -> DVector<f64> {
    let end = sys.endpoint(theta, k);
    DVector::from_iterator(target.len(), end.iter().zip(target).map(|(e, t)| e - t))
}

/// Solve `min tau sum |u_m|^2  s.t. endpoint(theta) = target` from one
/// start.
///
/// Feasibility comes first: a Levenberg-Marquardt descent on `|c(theta)|^2`
/// restores the endpoint constraint (near-abnormal targets make the plain
/// KKT system singular, so a pure saddle-point iteration stalls there).
/// A Newton iteration on the KKT system then improves the word, with every
/// accepted iterate projected back onto the constraint manifold by
/// min-norm Newton steps; the shortest feasible projection wins, so the
/// returned word is feasible to machine precision regardless of where the
/// polish stops.
pub(crate) fn solve_word(
    sys: &dyn ControlSystem,
    target: &[f64],
    k: usize,
    theta0: &[f64],
    max_iters: usize,
) -> WordSolution {
    let q = sys.control_dim();
    let nc = sys.constraint_dim();
    let n = k * q;
    debug_assert_eq!(theta0.len(), n);
    debug_assert_eq!(target.len(), nc);

    let tau = 1.0 / k as f64;
    let scale = target.iter().fold(1.0f64, |a, t| a.max(t.abs()));
    let feas_goal = FEAS_TOL * scale;

    // Min-norm Newton projection onto the constraint manifold; `None` when
    // it cannot reach feasibility from here.
    let project = |start: &DVector<f64>| -> Option<(DVector<f64>, f64)> {
        let mut theta = start.clone();
        for _ in 0..20 {
            let c = constraint(sys, target, theta.as_slice(), k);
            if c.amax() <= 1e-14 * scale {
                return Some((theta, c.amax()));
            }
            let jac = sys.jacobian(theta.as_slice(), k);
            let gram = &jac * jac.transpose() + DMatrix::identity(nc, nc) * 1e-13;
            let lam = gram.lu().solve(&c)?;
            let step = jac.transpose() * lam;
            theta -= step;
        }
        let feas = constraint(sys, target, theta.as_slice(), k).amax();
        (feas <= feas_goal).then(|| (theta.clone(), feas))
    };

    // Phase 1: Levenberg-Marquardt feasibility restoration.
    let mut theta = DVector::from_column_slice(theta0);
    let mut lm_lambda = 1e-3f64;
    let mut c = constraint(sys, target, theta.as_slice(), k);
    for _ in 0..60 {
        if c.amax() <= 1e-13 * scale {
            break;
        }
        let jac = sys.jacobian(theta.as_slice(), k);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &c;
        let mut moved = false;
        for _ in 0..16 {
            let mut h = jtj.clone();
            for i in 0..n {
                h[(i, i)] += lm_lambda;
            }
            if let Some(step) = h.lu().solve(&(-&grad)) {
                let trial = &theta + &step;
                let c_trial = constraint(sys, target, trial.as_slice(), k);
                if c_trial.norm_squared() < c.norm_squared() {
                    theta = trial;
                    c = c_trial;
                    lm_lambda = (lm_lambda * 0.25).max(1e-12);
                    moved = true;
                    break;
                }
            }
            lm_lambda *= 10.0;
            if lm_lambda > 1e12 {
                break;
            }
        }
        if !moved {
            break;
        }
    }

    let mut best: Option<(DVector<f64>, f64, f64)> = project(&theta).map(|(t, f)| {
        let len = word_length(t.as_slice(), k, q);
        (t, f, len)
    });
    let Some(ref b) = best else {
        let feas = constraint(sys, target, theta.as_slice(), k).amax();
        return WordSolution {
            controls: theta.as_slice().to_vec(),
            k,
            length: word_length(theta.as_slice(), k, q),
            feasibility: feas,
            converged: false,
        };
    };
    theta = b.0.clone();

    // Phase 2: Newton on the KKT system, tracking the best feasible
    // projection of the iterates.
    let jac = sys.jacobian(theta.as_slice(), k);
    let gram = &jac * jac.transpose() + DMatrix::identity(nc, nc) * 1e-12;
    let rhs = -(&jac * (&theta * (2.0 * tau)));
    let mut nu = gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(nc));

    let kkt_res = |theta: &DVector<f64>, nu: &DVector<f64>| -> DVector<f64> {
        let jac = sys.jacobian(theta.as_slice(), k);
        let grad_l = theta * (2.0 * tau) + jac.transpose() * nu;
        let c = constraint(sys, target, theta.as_slice(), k);
        let mut f = DVector::zeros(n + nc);
        f.rows_mut(0, n).copy_from(&grad_l);
        f.rows_mut(n, nc).copy_from(&c);
        f
    };

    let mut f = kkt_res(&theta, &nu);
    let mut damping = 0.0f64;
    for _ in 0..max_iters {
        if f.amax() <= 1e-12 * (scale + theta.amax() * 2.0 * tau) {
            break;
        }
        let jac = sys.jacobian(theta.as_slice(), k);
        let hess = sys.weighted_hessian(theta.as_slice(), k, nu.as_slice());
        let mut kkt = DMatrix::zeros(n + nc, n + nc);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = hess[(i, j)];
            }
            kkt[(i, i)] += 2.0 * tau + damping;
        }
        kkt.view_mut((0, n), (n, nc)).copy_from(&jac.transpose());
        kkt.view_mut((n, 0), (nc, n)).copy_from(&jac);
        for i in 0..nc {
            kkt[(n + i, n + i)] = -1e-14;
        }
        let step = match kkt.lu().solve(&(-&f)) {
            Some(s) => s,
            None => {
                damping = (damping * 10.0).max(1e-8);
                continue;
            }
        };
        let f0 = f.norm_squared();
        let mut accepted = false;
        let mut alpha = 1.0f64;
        while alpha >= 1.0 / 1024.0 {
            let theta_try = &theta + step.rows(0, n) * alpha;
            let nu_try = &nu + step.rows(n, nc) * alpha;
            let f_try = kkt_res(&theta_try, &nu_try);
            if f_try.norm_squared() <= (1.0 - 1e-4 * alpha) * f0 {
                theta = theta_try;
                nu = nu_try;
                f = f_try;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if accepted {
            damping *= 0.25;
            if damping < 1e-12 {
                damping = 0.0;
            }
            if let Some((tp, fp)) = project(&theta) {
                let len = word_length(tp.as_slice(), k, q);
                if best.as_ref().map_or(true, |(_, _, bl)| len < *bl) {
                    best = Some((tp, fp, len));
                }
            }
        } else {
            damping = (damping * 10.0).max(1e-8);
            if damping > 1e8 {
                break;
            }
        }
    }

    let (controls, feasibility, length) = best.expect("a feasible word was recorded");
    WordSolution {
        controls: controls.as_slice().to_vec(),
        k,
        length,
        feasibility,
        converged: feasibility <= feas_goal && length.is_finite(),
    }
}

#[derive(Debug, Clone)]
pub(crate) struct WordSearch {
    pub controls: Vec<f64>,
    pub k: usize,
    pub length: f64,
    /// Absolute length gain of the last accepted doubling; a proxy for the
    /// remaining discretization error.
    pub refinement_gap: f64,
}

/// Multi-start search at the base segment count, then doubling refinement.
/// Returns `None` when no start reaches feasibility.
pub(crate) fn optimize_word(
    sys: &dyn ControlSystem,
    target: &[f64],
    budget: &OptimizerBudget,
    inits: &[Vec<f64>],
) -> Option<WordSearch> {
    let q = sys.control_dim();
    let k0 = budget.segments.max(2);

    let solutions: Vec<(usize, WordSolution)> = inits
        .par_iter()
        .enumerate()
        .map(|(idx, theta0)| (idx, solve_word(sys, target, k0, theta0, budget.max_iters)))
        .collect();
    let mut best: Option<(usize, WordSolution)> = None;
    for (idx, sol) in solutions {
        if !sol.converged || !sol.length.is_finite() || sol.feasibility > 1e-9 {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bidx, bsol)) => {
                sol.length < bsol.length || (sol.length == bsol.length && idx < *bidx)
            }
        };
        if better {
            best = Some((idx, sol));
        }
    }
    let (_, mut best) = best?;
    let mut refinement_gap = f64::INFINITY;

    let mut k = k0;
    while 2 * k <= budget.max_segments {
        let warm = resample_double(&best.controls, k, q);
        let sol = solve_word(sys, target, 2 * k, &warm, budget.max_iters);
        if !sol.converged {
            break;
        }
        let improvement = best.length - sol.length;
        refinement_gap = improvement.max(0.0);
        if sol.length < best.length {
            best = sol;
        }
        k *= 2;
        if improvement < budget.rel_improvement * best.length {
            break;
        }
    }

    Some(WordSearch {
        controls: best.controls,
        k: best.k,
        length: best.length,
        refinement_gap: if refinement_gap.is_finite() {
            refinement_gap
        } else {
            best.length * budget.rel_improvement
        },
    })
}

/// Deterministic perturbation of a control word.
pub(crate) fn perturbed_word(theta: &[f64], amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    theta
        .iter()
        .map(|v| v + amplitude * rng.gen_range(-1.0..1.0))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_json_defaults() {
        let b = OptimizerBudget::from_json(r#"{"starts": 4, "segments": 6, "max_iters": 30, "seed": 7}"#)
            .unwrap();
        assert_eq!(b.starts, 4);
        assert_eq!(b.segments, 6);
        assert_eq!(b.max_iters, 30);
        assert_eq!(b.seed, 7);
        assert_eq!(b.max_segments, OptimizerBudget::default().max_segments);

        let d = OptimizerBudget::from_json("{}").unwrap();
        assert_eq!(d.starts, 16);
        assert_eq!(d.segments, 8);
    }

    #[test]
    fn resample_keeps_word_length() {
        let theta = vec![1.0, 2.0, 3.0, 4.0];
        let doubled = resample_double(&theta, 2, 2);
        assert_eq!(doubled, vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let l1 = word_length(&theta, 2, 2);
        let l2 = word_length(&doubled, 4, 2);
        assert!((l1 - l2).abs() < 1e-14);
    }
}
