//! Synthetic environment generators. Every generator returns a fully
//! validated model with a certified Slater margin, so downstream schedules
//! can always form a finite dual cap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::cmdp::{Channel, CmdpModel};
use crate::error::{Error, Result};
use crate::hindsight::{estimate_slater_gap, solve_hindsight};
use crate::linalg::SparseVec;
use crate::lstd::FeatureMaps;

/// Smallest accepted Slater margin; keeps the dual cap `2H / margin`
/// moderate enough to be exercised.
pub const MIN_SLATER_GAP: f64 = 0.05;
const MAX_REJECTS: usize = 100;

fn check_floor(utility_floor: f64, horizon: usize) -> Result<()> {
    if !(utility_floor > 0.0) || utility_floor > horizon as f64 {
        return Err(Error::Config(format!(
            "utility floor must lie in (0, {}], got {utility_floor}",
            horizon
        )));
    }
    Ok(())
}

fn dirichlet_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    // Normalized unit-rate exponentials.
    let mut row: Vec<f64> = (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            -(1.0 - u).ln().max(1e-300)
        })
        .collect();
    let sum: f64 = row.iter().sum();
    for p in &mut row {
        *p /= sum;
    }
    row
}

/// Random dense tabular model: Dirichlet(1) kernel rows and uniform
/// feedback, resampled until the Slater margin reaches [`MIN_SLATER_GAP`].
pub fn make_tabular_random(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    utility_floor: f64,
    seed: u64,
) -> Result<CmdpModel> {
    if num_states == 0 || num_actions == 0 || horizon == 0 {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    check_floor(utility_floor, horizon)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..MAX_REJECTS {
        let mut kernel = Vec::with_capacity(horizon);
        let mut reward = Vec::with_capacity(horizon);
        let mut utility = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut k_layer = Vec::with_capacity(num_states);
            let mut r_layer = Vec::with_capacity(num_states);
            let mut g_layer = Vec::with_capacity(num_states);
            for _ in 0..num_states {
                let mut k_row = Vec::with_capacity(num_actions);
                let mut r_row = Vec::with_capacity(num_actions);
                let mut g_row = Vec::with_capacity(num_actions);
                for _ in 0..num_actions {
                    k_row.push(dirichlet_row(&mut rng, num_states));
                    r_row.push(rng.random());
                    g_row.push(rng.random());
                }
                k_layer.push(k_row);
                r_layer.push(r_row);
                g_layer.push(g_row);
            }
            kernel.push(k_layer);
            reward.push(r_layer);
            utility.push(g_layer);
        }
        let model = CmdpModel::from_tables(
            num_states,
            num_actions,
            horizon,
            0,
            utility_floor,
            &kernel,
            &reward,
            &utility,
        )?;
        let (gap, _) = estimate_slater_gap(&model)?;
        if gap >= MIN_SLATER_GAP {
            return Ok(model);
        }
    }
    Err(Error::Generation(format!(
        "no draw reached a Slater margin of {MIN_SLATER_GAP} in {MAX_REJECTS} attempts; \
         lower the utility floor"
    )))
}

const GRID_ACTIONS: usize = 4;

fn grid_neighbor(width: usize, height: usize, cell: usize, dir: usize) -> usize {
    let (row, col) = (cell / width, cell % width);
    match dir {
        0 if row > 0 => cell - width,
        1 if row + 1 < height => cell + width,
        2 if col > 0 => cell - 1,
        3 if col + 1 < width => cell + 1,
        _ => cell,
    }
}

fn gridworld_with_slip(
    width: usize,
    height: usize,
    horizon: usize,
    hazards: &[usize],
    utility_floor: f64,
    slip: f64,
) -> Result<CmdpModel> {
    if width < 2 || height == 0 || horizon == 0 {
        return Err(Error::Config(
            "grid needs width at least 2, positive height and horizon".into(),
        ));
    }
    check_floor(utility_floor, horizon)?;
    let num_states = width * height;
    // Start at the top-left corner, goal at the top-right; with a single row
    // this is a plain corridor.
    let goal = width - 1;
    let mut is_hazard = vec![false; num_states];
    for &cell in hazards {
        if cell >= num_states {
            return Err(Error::Structural(format!(
                "hazard cell {cell} outside the {num_states}-cell grid"
            )));
        }
        if cell == goal {
            return Err(Error::Structural(format!(
                "hazard cell {cell} coincides with the goal"
            )));
        }
        if is_hazard[cell] {
            return Err(Error::Structural(format!("hazard cell {cell} repeated")));
        }
        is_hazard[cell] = true;
    }

    let mut step_kernel = vec![vec![vec![0.0; num_states]; GRID_ACTIONS]; num_states];
    for (cell, rows) in step_kernel.iter_mut().enumerate() {
        for (action, row) in rows.iter_mut().enumerate() {
            for dir in 0..GRID_ACTIONS {
                let p = if dir == action {
                    1.0 - slip
                } else {
                    slip / (GRID_ACTIONS - 1) as f64
                };
                row[grid_neighbor(width, height, cell, dir)] += p;
            }
        }
    }
    let step_reward: Vec<Vec<f64>> = (0..num_states)
        .map(|cell| vec![if cell == goal { 1.0 } else { 0.0 }; GRID_ACTIONS])
        .collect();
    let step_utility: Vec<Vec<f64>> = (0..num_states)
        .map(|cell| vec![if is_hazard[cell] { 0.0 } else { 1.0 }; GRID_ACTIONS])
        .collect();

    let kernel = vec![step_kernel; horizon];
    let reward = vec![step_reward; horizon];
    let utility = vec![step_utility; horizon];
    let model = CmdpModel::from_tables(
        num_states,
        GRID_ACTIONS,
        horizon,
        0,
        utility_floor,
        &kernel,
        &reward,
        &utility,
    )?;
    // Surfaces an infeasible floor now, with the achievable maximum.
    solve_hindsight(&model)?;
    Ok(model)
}

/// Slippery gridworld: four move actions with slip probability 0.1, reward 1
/// on the goal cell, utility 0 on hazard cells and 1 elsewhere. The layout
/// is deterministic; the seed is accepted for interface uniformity.
pub fn make_hazard_gridworld(
    width: usize,
    height: usize,
    horizon: usize,
    hazards: &[usize],
    utility_floor: f64,
    _seed: u64,
) -> Result<CmdpModel> {
    gridworld_with_slip(width, height, horizon, hazards, utility_floor, 0.1)
}

/// Model whose kernel is an exact per-step simplex mixture of `num_base`
/// random base kernels, with feedback linear in the same base tables. The
/// kernel feature dimension equals `num_base`; the value feature dimension
/// is `2 * num_base`.
pub fn make_linear_mixture(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    num_base: usize,
    utility_floor: f64,
    seed: u64,
) -> Result<(CmdpModel, FeatureMaps)> {
    if num_states == 0 || num_actions == 0 || horizon == 0 || num_base == 0 {
        return Err(Error::Config("dimensions must be positive".into()));
    }
    check_floor(utility_floor, horizon)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pairs = num_states * num_actions;
    for _ in 0..MAX_REJECTS {
        // Step-independent base tables; the mixture weights vary with h.
        let base_kernels: Vec<Vec<Vec<f64>>> = (0..num_base)
            .map(|_| (0..pairs).map(|_| dirichlet_row(&mut rng, num_states)).collect())
            .collect();
        let base_reward: Vec<Vec<f64>> = (0..num_base)
            .map(|_| (0..pairs).map(|_| rng.random()).collect())
            .collect();
        let base_utility: Vec<Vec<f64>> = (0..num_base)
            .map(|_| (0..pairs).map(|_| rng.random()).collect())
            .collect();
        let kernel_weights: Vec<Vec<f64>> =
            (0..horizon).map(|_| dirichlet_row(&mut rng, num_base)).collect();
        let reward_weights: Vec<Vec<f64>> =
            (0..horizon).map(|_| dirichlet_row(&mut rng, num_base)).collect();
        let utility_weights: Vec<Vec<f64>> =
            (0..horizon).map(|_| dirichlet_row(&mut rng, num_base)).collect();

        let mut kernel = Vec::with_capacity(horizon);
        let mut reward = Vec::with_capacity(horizon);
        let mut utility = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let mut k_layer = Vec::with_capacity(num_states);
            let mut r_layer = Vec::with_capacity(num_states);
            let mut g_layer = Vec::with_capacity(num_states);
            for x in 0..num_states {
                let mut k_row = Vec::with_capacity(num_actions);
                let mut r_row = Vec::with_capacity(num_actions);
                let mut g_row = Vec::with_capacity(num_actions);
                for a in 0..num_actions {
                    let pair = x * num_actions + a;
                    let mut row = vec![0.0; num_states];
                    for m in 0..num_base {
                        let w = kernel_weights[h][m];
                        for (next, p) in row.iter_mut().enumerate() {
                            *p += w * base_kernels[m][pair][next];
                        }
                    }
                    k_row.push(row);
                    r_row.push(
                        (0..num_base)
                            .map(|m| reward_weights[h][m] * base_reward[m][pair])
                            .sum(),
                    );
                    g_row.push(
                        (0..num_base)
                            .map(|m| utility_weights[h][m] * base_utility[m][pair])
                            .sum(),
                    );
                }
                k_layer.push(k_row);
                r_layer.push(r_row);
                g_layer.push(g_row);
            }
            kernel.push(k_layer);
            reward.push(r_layer);
            utility.push(g_layer);
        }
        let model = CmdpModel::from_tables(
            num_states,
            num_actions,
            horizon,
            0,
            utility_floor,
            &kernel,
            &reward,
            &utility,
        )?;

        // psi stacks the base kernel values; varphi stacks both feedback
        // tables, scaled so its norm stays within 1.
        let scale = 1.0 / (2.0 * num_base as f64).sqrt();
        let mut varphi = Vec::with_capacity(pairs);
        let mut psi = Vec::with_capacity(pairs * num_states);
        for pair in 0..pairs {
            let mut dense = Vec::with_capacity(2 * num_base);
            for m in 0..num_base {
                dense.push(base_reward[m][pair] * scale);
            }
            for m in 0..num_base {
                dense.push(base_utility[m][pair] * scale);
            }
            varphi.push(SparseVec::from_dense(&dense));
        }
        for pair in 0..pairs {
            for next in 0..num_states {
                let dense: Vec<f64> =
                    (0..num_base).map(|m| base_kernels[m][pair][next]).collect();
                psi.push(SparseVec::from_dense(&dense));
            }
        }
        let maps = FeatureMaps::new(num_states, num_actions, varphi, psi)?;
        maps.verify_kernel(&model, &kernel_weights)?;

        let (gap, _) = estimate_slater_gap(&model)?;
        if gap >= MIN_SLATER_GAP {
            return Ok((model, maps));
        }
    }
    Err(Error::Generation(format!(
        "no mixture reached a Slater margin of {MIN_SLATER_GAP} in {MAX_REJECTS} attempts; \
         lower the utility floor"
    )))
}

/// Indicator features for any tabular model.
pub fn canonical_features(model: &CmdpModel) -> FeatureMaps {
    FeatureMaps::canonical(model.num_states(), model.num_actions())
}

/// Kernel parameters under the canonical embedding: `theta_h` is the
/// flattened transition layer, so `<psi(x,a,x'), theta_h>` reproduces the
/// kernel exactly.
pub fn canonical_kernel_params(model: &CmdpModel) -> Vec<Vec<f64>> {
    let (s, a) = (model.num_states(), model.num_actions());
    (0..model.horizon())
        .map(|h| {
            let mut theta = Vec::with_capacity(s * a * s);
            for x in 0..s {
                for act in 0..a {
                    theta.extend_from_slice(model.kernel_row(h, x, act));
                }
            }
            theta
        })
        .collect()
}

/// Feedback parameters under the canonical embedding: the flattened
/// feedback layer per channel.
pub fn canonical_feedback_params(model: &CmdpModel, channel: Channel) -> Vec<Vec<f64>> {
    let (s, a) = (model.num_states(), model.num_actions());
    (0..model.horizon())
        .map(|h| {
            let mut theta = Vec::with_capacity(s * a);
            for x in 0..s {
                for act in 0..a {
                    theta.push(model.feedback(channel, h, x, act));
                }
            }
            theta
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstd::integrate_value_feature;
    use approx::assert_abs_diff_eq;

    #[test]
    fn random_models_are_seed_determined_with_certified_margin() {
        let a = make_tabular_random(4, 3, 3, 0.8, 11).unwrap();
        let b = make_tabular_random(4, 3, 3, 0.8, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let (gap, _) = estimate_slater_gap(&a).unwrap();
        assert!(gap >= MIN_SLATER_GAP, "margin {gap}");

        let c = make_tabular_random(4, 3, 3, 0.8, 12).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn hopeless_floors_are_rejected() {
        // In range but unreachable: the margin would need utility above H.
        assert!(matches!(
            make_tabular_random(3, 2, 2, 1.99, 0),
            Err(Error::Generation(_))
        ));
        assert!(matches!(
            make_tabular_random(3, 2, 2, 0.0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_tabular_random(3, 2, 2, 2.01, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hazard_free_grid_has_margin_horizon_minus_floor() {
        let model = make_hazard_gridworld(3, 2, 4, &[], 1.5, 0).unwrap();
        let (gap, _) = estimate_slater_gap(&model).unwrap();
        assert_abs_diff_eq!(gap, 4.0 - 1.5, epsilon = 1e-8);
    }

    #[test]
    fn deterministic_corridor_value_matches_hand_count() {
        // Slip 0 on one row: walk right once, then sit on the goal. Reward
        // accrues at the goal from step 1 onward.
        let model = gridworld_with_slip(2, 1, 3, &[], 1.0, 0.0).unwrap();
        let solution = solve_hindsight(&model).unwrap();
        assert_abs_diff_eq!(solution.optimal_value, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn blocking_hazard_costs_reward_at_a_tight_floor() {
        // 3x3, goal top-right, hazard between start and goal. The fast lane
        // crosses the hazard; a utility floor of 0.8 H forces a detour mix.
        let tight = make_hazard_gridworld(3, 3, 5, &[1], 4.0, 0).unwrap();
        let constrained = solve_hindsight(&tight).unwrap();
        let loose = tight.with_utility_floor(0.05).unwrap();
        let unconstrained = solve_hindsight(&loose).unwrap();
        assert!(
            constrained.optimal_value < unconstrained.optimal_value - 1e-3,
            "constrained {} vs unconstrained {}",
            constrained.optimal_value,
            unconstrained.optimal_value
        );
    }

    #[test]
    fn misplaced_hazards_are_rejected() {
        assert!(matches!(
            make_hazard_gridworld(3, 1, 3, &[2], 1.0, 0),
            Err(Error::Structural(_))
        ));
        assert!(matches!(
            make_hazard_gridworld(3, 1, 3, &[9], 1.0, 0),
            Err(Error::Structural(_))
        ));
        assert!(matches!(
            make_hazard_gridworld(3, 1, 3, &[1, 1], 1.0, 0),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn corridor_with_unavoidable_hazard_reports_achievable_maximum() {
        // Every path to the goal crosses cell 1, so a floor of H is
        // unreachable and the error carries the true maximum.
        match make_hazard_gridworld(3, 1, 4, &[1], 4.0, 0) {
            Err(Error::InfeasibleConstraint { max_achievable, .. }) => {
                assert!(max_achievable < 4.0);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_mixture_reproduces_its_single_base() {
        let (model, maps) = make_linear_mixture(3, 2, 2, 1, 0.4, 5).unwrap();
        // One base model: psi(x, a, x') is the scalar base probability and
        // theta_h = 1, so the kernel must equal the base table at every h.
        for x in 0..3 {
            for a in 0..2 {
                for next in 0..3 {
                    let psi = maps.psi(x, a, next);
                    let base = psi.dot_dense(&[1.0]);
                    assert_abs_diff_eq!(
                        model.kernel_row(0, x, a)[next],
                        base,
                        epsilon = 1e-12
                    );
                    assert_abs_diff_eq!(
                        model.kernel_row(1, x, a)[next],
                        base,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn mixture_construction_is_exactly_linear() {
        // verify_kernel already runs inside the generator; spot-check a few
        // coordinates independently here.
        let (model, maps) = make_linear_mixture(4, 2, 3, 3, 0.5, 21).unwrap();
        assert_eq!(maps.kernel_dim(), 3);
        assert_eq!(maps.value_dim(), 6);
        let (gap, _) = estimate_slater_gap(&model).unwrap();
        assert!(gap >= MIN_SLATER_GAP);
        for x in 0..4 {
            for a in 0..2 {
                assert!(maps.varphi(x, a).norm() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn canonical_embedding_satisfies_the_norm_bounds() {
        let model = make_tabular_random(3, 2, 4, 1.0, 33).unwrap();
        let maps = canonical_features(&model);
        assert_eq!(maps.kernel_dim(), 3 * 3 * 2);
        assert_eq!(maps.value_dim(), 3 * 2);

        let thetas = canonical_kernel_params(&model);
        maps.verify_kernel(&model, &thetas).unwrap();
        for theta in &thetas {
            let norm: f64 = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
            assert!(norm <= (maps.kernel_dim() as f64).sqrt() + 1e-12);
        }
        for channel in Channel::BOTH {
            let params = canonical_feedback_params(&model, channel);
            for (h, theta) in params.iter().enumerate() {
                for x in 0..3 {
                    for a in 0..2 {
                        assert_abs_diff_eq!(
                            maps.varphi(x, a).dot_dense(theta),
                            model.feedback(channel, h, x, a),
                            epsilon = 1e-15
                        );
                    }
                }
            }
        }

        // Integrated canonical features keep at most |S| nonzeros and norm
        // at most sqrt(|S|) H.
        let h_cap = model.horizon() as f64;
        let v = vec![h_cap; 3];
        let phis = integrate_value_feature(&maps, &v, h_cap).unwrap();
        for phi in &phis {
            assert!(phi.nnz() <= 3);
            assert!(phi.norm() <= 3f64.sqrt() * h_cap + 1e-12);
        }
    }
}
