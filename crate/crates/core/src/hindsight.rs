//! Hindsight planning: the occupancy-measure linear program for the best
//! feasible policy, its constraint dual, and the Slater margin of a model.
//!
//! The primal maximizes expected reward over occupancy measures `mu_h(x, a)`
//! subject to flow conservation and the expected-utility floor. The policy is
//! read off by conditioning `mu` on states; the utility constraint's LP dual
//! is the Lagrange multiplier the online optimizer competes against.

use serde::{Deserialize, Serialize};

use crate::cmdp::{Channel, CmdpModel, DensePolicy, PolicySlate};
use crate::error::{Error, Result};
use crate::simplex::{solve, LpOutcome, LpProblem, LpSolution};

/// Occupancy mass below which a state is treated as unvisited and given a
/// uniform action row.
const MASS_FLOOR: f64 = 1e-12;

/// Certified solution of the hindsight planning problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HindsightSolution {
    /// Best feasible policy extracted from the occupancy measure.
    pub optimal_policy: DensePolicy,
    /// Its expected cumulative reward from the initial state.
    pub optimal_value: f64,
    /// Lagrange multiplier of the utility floor (nonnegative).
    pub optimal_dual: f64,
    /// Slater margin: highest achievable expected utility minus the floor.
    pub slater_gap: f64,
    /// Dual-variable cap `2 H / slater_gap`; infinite when the margin is zero.
    pub dual_cap: f64,
    /// Certified primal-dual objective gap of the occupancy LP.
    pub duality_gap: f64,
    /// Utility-maximizing policy backing the Slater margin estimate.
    pub slater_policy: DensePolicy,
}

/// Builds the occupancy LP. Variables are `mu_h(x, a)` in `(h, x, a)` order,
/// plus one surplus variable when the utility floor row is included.
fn occupancy_lp(model: &CmdpModel, objective: Channel, with_floor: bool) -> LpProblem {
    let (s, a, horizon) = (model.num_states(), model.num_actions(), model.horizon());
    let idx = |h: usize, x: usize, act: usize| (h * s + x) * a + act;
    let n_mu = horizon * s * a;
    let num_vars = n_mu + usize::from(with_floor);
    let num_rows = horizon * s + usize::from(with_floor);

    let mut rows = vec![vec![0.0; num_vars]; num_rows];
    let mut rhs = vec![0.0; num_rows];

    // Step 0: all mass sits on the initial state.
    for x in 0..s {
        for act in 0..a {
            rows[x][idx(0, x, act)] = 1.0;
        }
        rhs[x] = if x == model.initial_state() { 1.0 } else { 0.0 };
    }
    // Flow conservation into each later step.
    for h in 1..horizon {
        for x_next in 0..s {
            let r = h * s + x_next;
            for act in 0..a {
                rows[r][idx(h, x_next, act)] = 1.0;
            }
            for x in 0..s {
                for act in 0..a {
                    rows[r][idx(h - 1, x, act)] -= model.kernel_row(h - 1, x, act)[x_next];
                }
            }
        }
    }
    // Expected utility meets the floor: g . mu - surplus = b.
    if with_floor {
        let r = horizon * s;
        for h in 0..horizon {
            for x in 0..s {
                for act in 0..a {
                    rows[r][idx(h, x, act)] = model.feedback(Channel::Utility, h, x, act);
                }
            }
        }
        rows[r][n_mu] = -1.0;
        rhs[r] = model.utility_floor();
    }

    let mut objective_vec = vec![0.0; num_vars];
    for h in 0..horizon {
        for x in 0..s {
            for act in 0..a {
                objective_vec[idx(h, x, act)] = model.feedback(objective, h, x, act);
            }
        }
    }
    LpProblem {
        num_vars,
        objective: objective_vec,
        rows,
        rhs,
    }
}

/// Conditions an occupancy measure into a policy; states with no mass at a
/// step get a uniform action row.
pub fn policy_from_occupancy(
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    mu: &[f64],
) -> Result<DensePolicy> {
    if mu.len() < horizon * num_states * num_actions {
        return Err(Error::Structural(format!(
            "occupancy vector has {} entries, expected at least {}",
            mu.len(),
            horizon * num_states * num_actions
        )));
    }
    let mut probs = vec![0.0; horizon * num_states * num_actions];
    for h in 0..horizon {
        for x in 0..num_states {
            let start = (h * num_states + x) * num_actions;
            let mass: f64 = mu[start..start + num_actions]
                .iter()
                .map(|&m| m.max(0.0))
                .sum();
            if mass <= MASS_FLOOR {
                probs[start..start + num_actions].fill(1.0 / num_actions as f64);
            } else {
                for act in 0..num_actions {
                    probs[start + act] = mu[start + act].max(0.0) / mass;
                }
            }
        }
    }
    DensePolicy::from_probs(horizon, num_states, num_actions, probs)
}

fn solve_occupancy(problem: &LpProblem) -> Result<Option<LpSolution>> {
    match solve(problem)? {
        LpOutcome::Optimal(sol) => Ok(Some(sol)),
        LpOutcome::Infeasible => Ok(None),
        LpOutcome::Unbounded => Err(Error::Numeric(
            "occupancy polytope reported unbounded; it is compact by construction".into(),
        )),
    }
}

/// Highest achievable expected utility margin over the floor, with the
/// utility-maximizing policy that attains it. The margin is clamped at zero.
pub fn estimate_slater_gap(model: &CmdpModel) -> Result<(f64, DensePolicy)> {
    let problem = occupancy_lp(model, Channel::Utility, false);
    let sol = solve_occupancy(&problem)?.ok_or_else(|| {
        Error::Numeric("unconstrained occupancy polytope reported infeasible".into())
    })?;
    let policy = policy_from_occupancy(
        model.horizon(),
        model.num_states(),
        model.num_actions(),
        &sol.primal,
    )?;
    Ok(((sol.objective - model.utility_floor()).max(0.0), policy))
}

/// Lagrangian dual function `D(y) = max_policy [V_r + y (V_g - b)]`, computed
/// by exact dynamic programming on the combined feedback `r + y g`.
pub fn dual_function(model: &CmdpModel, y: f64) -> Result<f64> {
    if !y.is_finite() || y < 0.0 {
        return Err(Error::Contract(format!(
            "dual point must be finite and nonnegative, got {y}"
        )));
    }
    Ok(max_weighted_value(model, 1.0, y) - y * model.utility_floor())
}

/// `max_policy V` for the combined feedback `w_r r + w_g g`, by backward
/// induction with a greedy max over actions.
pub(crate) fn max_weighted_value(model: &CmdpModel, w_r: f64, w_g: f64) -> f64 {
    let (s, a) = (model.num_states(), model.num_actions());
    let mut v_next = vec![0.0; s];
    for h in (0..model.horizon()).rev() {
        let mut v = vec![0.0; s];
        for x in 0..s {
            let mut best = f64::NEG_INFINITY;
            for act in 0..a {
                let combined = w_r * model.feedback(Channel::Reward, h, x, act)
                    + w_g * model.feedback(Channel::Utility, h, x, act);
                let expect: f64 = model
                    .kernel_row(h, x, act)
                    .iter()
                    .zip(&v_next)
                    .map(|(&p, &vn)| p * vn)
                    .sum();
                best = best.max(combined + expect);
            }
            v[x] = best;
        }
        v_next = v;
    }
    v_next[model.initial_state()]
}

/// Solves the hindsight planning problem and certifies the solution: primal
/// feasibility of the extracted policy, sign and boundedness of the dual, and
/// the LP's primal-dual gap.
pub fn solve_hindsight(model: &CmdpModel) -> Result<HindsightSolution> {
    let (slater_gap, slater_policy) = estimate_slater_gap(model)?;

    let problem = occupancy_lp(model, Channel::Reward, true);
    let Some(sol) = solve_occupancy(&problem)? else {
        let slater_values =
            crate::cmdp::evaluate_policy_exact(model, &PolicySlate::Dense(slater_policy))?;
        let max_achievable =
            slater_values.initial_value(Channel::Utility, model.initial_state());
        return Err(Error::InfeasibleConstraint {
            required: model.utility_floor(),
            max_achievable,
        });
    };

    let optimal_policy = policy_from_occupancy(
        model.horizon(),
        model.num_states(),
        model.num_actions(),
        &sol.primal,
    )?;
    let utility_row = model.horizon() * model.num_states();
    let raw_dual = -sol.duals[utility_row];
    if raw_dual < -1e-9 {
        return Err(Error::Numeric(format!(
            "utility-floor dual has the wrong sign: {raw_dual}"
        )));
    }
    let optimal_dual = raw_dual.max(0.0);

    let values =
        crate::cmdp::evaluate_policy_exact(model, &PolicySlate::Dense(optimal_policy.clone()))?;
    let x1 = model.initial_state();
    let v_r = values.initial_value(Channel::Reward, x1);
    let v_g = values.initial_value(Channel::Utility, x1);
    if v_g < model.utility_floor() - 1e-9 {
        return Err(Error::Numeric(format!(
            "extracted hindsight policy misses the utility floor: {v_g} < {}",
            model.utility_floor()
        )));
    }
    if (v_r - sol.objective).abs() > 1e-7 {
        return Err(Error::Numeric(format!(
            "policy value {v_r} disagrees with LP objective {}",
            sol.objective
        )));
    }

    // Dual boundedness under a positive Slater margin: the multiplier is at
    // most the reward forfeited by the utility-maximizing policy, per margin.
    if slater_gap > 0.0 {
        let slater_values =
            crate::cmdp::evaluate_policy_exact(model, &PolicySlate::Dense(slater_policy.clone()))?;
        let bound =
            (sol.objective - slater_values.initial_value(Channel::Reward, x1)) / slater_gap;
        if optimal_dual > bound + 1e-6 {
            return Err(Error::Numeric(format!(
                "utility dual {optimal_dual} exceeds its Slater bound {bound}"
            )));
        }
    }

    let dual_cap = if slater_gap > 0.0 {
        2.0 * model.horizon() as f64 / slater_gap
    } else {
        f64::INFINITY
    };

    Ok(HindsightSolution {
        optimal_policy,
        optimal_value: sol.objective,
        optimal_dual,
        slater_gap,
        dual_cap,
        duality_gap: sol.gap,
        slater_policy,
    })
}
