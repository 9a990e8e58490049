//! Count-based optimistic evaluation for tabular models.
//!
//! Visitation counters and a last-feedback archive determine a shrunk
//! empirical model: kernel rows `n(x,a,x') / (n(x,a) + ridge)`, feedback
//! `n * observed / (n + ridge)`, and a bonus `beta / sqrt(n + ridge)` that
//! enters action values with a factor of two. Estimates for episode `k`
//! always come from counters over episodes before `k`.

use serde::{Deserialize, Serialize};

use crate::cmdp::{Channel, CmdpModel, PolicySlate, StateActionTable, StateTable, Trajectory, ValueFunctions};
use crate::error::{Error, Result};
use crate::opdop::{BackendKind, EvalDiagnostics, EvalEstimates};

/// Visit counts per step for state-action pairs and transitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisitCounters {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    pair: Vec<u64>,
    triple: Vec<u64>,
}

impl VisitCounters {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        VisitCounters {
            horizon,
            num_states,
            num_actions,
            pair: vec![0; horizon * num_states * num_actions],
            triple: vec![0; horizon * num_states * num_actions * num_states],
        }
    }

    fn pair_idx(&self, h: usize, x: usize, a: usize) -> usize {
        (h * self.num_states + x) * self.num_actions + a
    }

    pub fn pair_count(&self, h: usize, x: usize, a: usize) -> u64 {
        self.pair[self.pair_idx(h, x, a)]
    }

    pub fn triple_count(&self, h: usize, x: usize, a: usize, next: usize) -> u64 {
        self.triple[self.pair_idx(h, x, a) * self.num_states + next]
    }

    /// Both conservation laws: transition counts sum to the pair count, and
    /// each step holds exactly one visit per absorbed episode.
    pub fn check_conservation(&self, episodes: u64) -> Result<()> {
        for h in 0..self.horizon {
            let mut step_total = 0;
            for x in 0..self.num_states {
                for a in 0..self.num_actions {
                    let pair = self.pair_count(h, x, a);
                    let spread: u64 = (0..self.num_states)
                        .map(|next| self.triple_count(h, x, a, next))
                        .sum();
                    if spread != pair {
                        return Err(Error::Numeric(format!(
                            "transition counts at ({h}, {x}, {a}) sum to {spread}, pair count is {pair}"
                        )));
                    }
                    step_total += pair;
                }
            }
            if step_total != episodes {
                return Err(Error::Numeric(format!(
                    "step {h} holds {step_total} visits after {episodes} episodes"
                )));
            }
        }
        Ok(())
    }
}

/// Adds one visit per step of `traj` to the counters.
pub fn update_counters(counters: &mut VisitCounters, traj: &Trajectory) -> Result<()> {
    if traj.steps.len() != counters.horizon {
        return Err(Error::Structural(format!(
            "trajectory covers {} steps, counters expect {}",
            traj.steps.len(),
            counters.horizon
        )));
    }
    for (h, step) in traj.steps.iter().enumerate() {
        let next = traj.state_at(h + 1);
        if step.state >= counters.num_states
            || step.action >= counters.num_actions
            || next >= counters.num_states
        {
            return Err(Error::Structural(format!(
                "trajectory index out of range at step {h}"
            )));
        }
        let idx = counters.pair_idx(h, step.state, step.action);
        counters.pair[idx] += 1;
        counters.triple[idx * counters.num_states + next] += 1;
    }
    Ok(())
}

/// Last observed reward and utility per step and pair. Feedback is
/// deterministic, so one retained sample reproduces the full empirical sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackArchive {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    last: Vec<[f64; 2]>,
}

impl FeedbackArchive {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        FeedbackArchive {
            horizon,
            num_states,
            num_actions,
            last: vec![[0.0; 2]; horizon * num_states * num_actions],
        }
    }

    fn idx(&self, h: usize, x: usize, a: usize) -> usize {
        (h * self.num_states + x) * self.num_actions + a
    }

    pub fn record(&mut self, traj: &Trajectory) {
        for (h, step) in traj.steps.iter().enumerate() {
            let idx = self.idx(h, step.state, step.action);
            self.last[idx] = [step.reward, step.utility];
        }
    }

    pub fn last(&self, h: usize, x: usize, a: usize) -> [f64; 2] {
        self.last[self.idx(h, x, a)]
    }
}

/// Shrunk empirical model with its exploration bonus.
#[derive(Debug, Clone)]
pub struct EmpiricalModel {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    kernel: Vec<f64>,
    feedback: [Vec<f64>; 2],
    bonus: Vec<f64>,
}

impl EmpiricalModel {
    pub fn kernel_row(&self, h: usize, x: usize, a: usize) -> &[f64] {
        let idx = ((h * self.num_states + x) * self.num_actions + a) * self.num_states;
        &self.kernel[idx..idx + self.num_states]
    }

    pub fn feedback(&self, channel: Channel, h: usize, x: usize, a: usize) -> f64 {
        self.feedback[channel.idx()][(h * self.num_states + x) * self.num_actions + a]
    }

    pub fn bonus(&self, h: usize, x: usize, a: usize) -> f64 {
        self.bonus[(h * self.num_states + x) * self.num_actions + a]
    }

    /// Ground-truth injection: the true kernel and feedback with zero bonus.
    /// With this input the optimistic backup reduces to exact evaluation.
    pub fn from_model(model: &CmdpModel) -> Self {
        let (horizon, s, a) = (model.horizon(), model.num_states(), model.num_actions());
        let mut kernel = Vec::with_capacity(horizon * s * a * s);
        let mut reward = Vec::with_capacity(horizon * s * a);
        let mut utility = Vec::with_capacity(horizon * s * a);
        for h in 0..horizon {
            for x in 0..s {
                for act in 0..a {
                    kernel.extend_from_slice(model.kernel_row(h, x, act));
                    reward.push(model.feedback(Channel::Reward, h, x, act));
                    utility.push(model.feedback(Channel::Utility, h, x, act));
                }
            }
        }
        EmpiricalModel {
            horizon,
            num_states: s,
            num_actions: a,
            kernel,
            feedback: [reward, utility],
            bonus: vec![0.0; horizon * s * a],
        }
    }
}

/// Builds the empirical model from counters and archived feedback: kernel
/// rows and feedback shrunk by `ridge` in the denominator, bonus
/// `bonus_scale / sqrt(n + ridge)`.
pub fn estimate_model(
    counters: &VisitCounters,
    archive: &FeedbackArchive,
    ridge: f64,
    bonus_scale: f64,
) -> Result<EmpiricalModel> {
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::Config(format!("ridge must be positive, got {ridge}")));
    }
    if bonus_scale < 0.0 || !bonus_scale.is_finite() {
        return Err(Error::Config(format!(
            "bonus scale must be nonnegative, got {bonus_scale}"
        )));
    }
    let (horizon, s, a) = (counters.horizon, counters.num_states, counters.num_actions);
    let mut kernel = vec![0.0; horizon * s * a * s];
    let mut reward = vec![0.0; horizon * s * a];
    let mut utility = vec![0.0; horizon * s * a];
    let mut bonus = vec![0.0; horizon * s * a];
    for h in 0..horizon {
        for x in 0..s {
            for act in 0..a {
                let idx = (h * s + x) * a + act;
                let n = counters.pair_count(h, x, act) as f64;
                let denom = n + ridge;
                let mut row_sum = 0.0;
                for next in 0..s {
                    let p = counters.triple_count(h, x, act, next) as f64 / denom;
                    kernel[idx * s + next] = p;
                    row_sum += p;
                }
                // Strict subprobability: mass n/(n + ridge) < 1.
                if row_sum >= 1.0 {
                    return Err(Error::Numeric(format!(
                        "empirical kernel row at ({h}, {x}, {act}) reached mass {row_sum}"
                    )));
                }
                let [r, g] = archive.last(h, x, act);
                reward[idx] = n * r / denom;
                utility[idx] = n * g / denom;
                bonus[idx] = bonus_scale / denom.sqrt();
            }
        }
    }
    Ok(EmpiricalModel {
        horizon,
        num_states: s,
        num_actions: a,
        kernel,
        feedback: [reward, utility],
        bonus,
    })
}

/// Optimistic backup through the empirical model:
/// `Q = clamp(feedback + kernel . V_next + 2 * bonus, 0, H - h)` and
/// `V(x) = <Q(x, .), policy(. | x)>`, from the last step backward.
pub fn evaluate_empirical(emp: &EmpiricalModel, policy: &PolicySlate) -> Result<EvalEstimates> {
    let (horizon, s, a) = (emp.horizon, emp.num_states, emp.num_actions);
    if policy.horizon() != horizon || policy.num_states() != s || policy.num_actions() != a {
        return Err(Error::Structural(
            "policy shape does not match the empirical model".into(),
        ));
    }
    let mut q_tabs = [
        StateActionTable::zeros(horizon, s, a),
        StateActionTable::zeros(horizon, s, a),
    ];
    let mut v_tabs = [StateTable::zeros(horizon, s), StateTable::zeros(horizon, s)];
    for h in (0..horizon).rev() {
        let cap = (horizon - h) as f64;
        for x in 0..s {
            let pi_row = policy.row(h, x);
            for ci in 0..2 {
                let mut v_acc = 0.0;
                let v_next = v_tabs[ci].layer(h + 1).to_vec();
                for act in 0..a {
                    let expect: f64 = emp
                        .kernel_row(h, x, act)
                        .iter()
                        .zip(&v_next)
                        .map(|(&p, &v)| p * v)
                        .sum();
                    let channel = Channel::BOTH[ci];
                    let raw = emp.feedback(channel, h, x, act) + expect + 2.0 * emp.bonus(h, x, act);
                    let q = raw.clamp(0.0, cap);
                    q_tabs[ci].set(h, x, act, q);
                    v_acc += q * pi_row[act];
                }
                v_tabs[ci].set(h, x, v_acc);
            }
        }
    }
    let [q_reward, q_utility] = q_tabs;
    let [v_reward, v_utility] = v_tabs;
    Ok(EvalEstimates {
        values: ValueFunctions {
            q_reward,
            q_utility,
            v_reward,
            v_utility,
        },
        backend: BackendKind::Tabular,
    })
}

/// Counter state for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularState {
    counters: VisitCounters,
    archive: FeedbackArchive,
    ridge: f64,
    bonus_scale: f64,
    episodes_absorbed: usize,
}

impl TabularState {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        ridge: f64,
        bonus_scale: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(Error::Structural(
                "tabular state needs positive dimensions".into(),
            ));
        }
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(Error::Config(format!("ridge must be positive, got {ridge}")));
        }
        if bonus_scale < 0.0 || !bonus_scale.is_finite() {
            return Err(Error::Config(format!(
                "bonus scale must be nonnegative, got {bonus_scale}"
            )));
        }
        Ok(TabularState {
            counters: VisitCounters::new(horizon, num_states, num_actions),
            archive: FeedbackArchive::new(horizon, num_states, num_actions),
            ridge,
            bonus_scale,
            episodes_absorbed: 0,
        })
    }

    pub fn episodes_absorbed(&self) -> usize {
        self.episodes_absorbed
    }

    pub fn counters(&self) -> &VisitCounters {
        &self.counters
    }
}

/// Evaluates `policy` from episodes before this one, then folds the new
/// trajectory into the counters and checks conservation.
pub fn evaluate_tabular(
    state: &mut TabularState,
    policy: &PolicySlate,
    trajectory: &Trajectory,
) -> Result<(EvalEstimates, EvalDiagnostics)> {
    let emp = estimate_model(&state.counters, &state.archive, state.ridge, state.bonus_scale)?;
    let estimates = evaluate_empirical(&emp, policy)?;

    let horizon = emp.horizon;
    if trajectory.steps.len() != horizon {
        return Err(Error::Structural(format!(
            "trajectory covers {} steps, state expects {horizon}",
            trajectory.steps.len()
        )));
    }
    let mut band_widths = vec![[0.0; 2]; horizon];
    let mut bonus_sum = 0.0;
    for (h, step) in trajectory.steps.iter().enumerate() {
        let gamma = emp.bonus(h, step.state, step.action);
        band_widths[h] = [4.0 * gamma; 2];
        bonus_sum += 2.0 * (2.0 * gamma);
    }

    update_counters(&mut state.counters, trajectory)?;
    state.archive.record(trajectory);
    state.episodes_absorbed += 1;
    state
        .counters
        .check_conservation(state.episodes_absorbed as u64)?;

    Ok((
        estimates,
        EvalDiagnostics {
            value_quad_forms: Vec::new(),
            band_widths,
            bonus_sum,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{evaluate_policy_exact, run_episode, TrajStep};
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_model() -> CmdpModel {
        let kernel = vec![
            vec![
                vec![vec![0.6, 0.4], vec![0.1, 0.9]],
                vec![vec![0.8, 0.2], vec![0.3, 0.7]],
            ];
            2
        ];
        let reward = vec![vec![vec![0.9, 0.1], vec![0.4, 0.6]]; 2];
        let utility = vec![vec![vec![0.2, 0.8], vec![0.7, 0.3]]; 2];
        CmdpModel::from_tables(2, 2, 2, 0, 0.5, &kernel, &reward, &utility).unwrap()
    }

    fn manual_trajectory(states: &[usize], actions: &[usize], model: &CmdpModel) -> Trajectory {
        let steps = (0..actions.len())
            .map(|h| TrajStep {
                state: states[h],
                action: actions[h],
                reward: model.feedback(Channel::Reward, h, states[h], actions[h]),
                utility: model.feedback(Channel::Utility, h, states[h], actions[h]),
            })
            .collect();
        Trajectory {
            episode: 0,
            steps,
            terminal_state: states[actions.len()],
        }
    }

    #[test]
    fn counters_accumulate_and_conserve() {
        let model = toy_model();
        let mut counters = VisitCounters::new(2, 2, 2);
        counters.check_conservation(0).unwrap();
        assert_eq!(counters.pair_count(0, 0, 0), 0);

        let traj = manual_trajectory(&[0, 1, 0], &[1, 0], &model);
        update_counters(&mut counters, &traj).unwrap();
        update_counters(&mut counters, &traj).unwrap();
        assert_eq!(counters.pair_count(0, 0, 1), 2);
        assert_eq!(counters.triple_count(0, 0, 1, 1), 2);
        assert_eq!(counters.triple_count(0, 0, 1, 0), 0);
        counters.check_conservation(2).unwrap();

        let policy = PolicySlate::uniform(2, 2, 2);
        let mut counters = VisitCounters::new(2, 2, 2);
        for seed in 0..100 {
            let traj = run_episode(&model, &policy, seed).unwrap();
            update_counters(&mut counters, &traj).unwrap();
        }
        counters.check_conservation(100).unwrap();
    }

    #[test]
    fn estimates_shrink_toward_observations() {
        let model = toy_model();
        let mut counters = VisitCounters::new(2, 2, 2);
        let mut archive = FeedbackArchive::new(2, 2, 2);
        // Unvisited: zero model, maximal bonus.
        let emp = estimate_model(&counters, &archive, 1.0, 0.7).unwrap();
        assert!(emp.kernel_row(0, 0, 0).iter().all(|&p| p == 0.0));
        assert_eq!(emp.feedback(Channel::Reward, 0, 0, 0), 0.0);
        assert_abs_diff_eq!(emp.bonus(0, 0, 0), 0.7, epsilon = 1e-15);

        // Three visits of (0, 0) at h = 0, all landing in state 1; the
        // recorded reward there is 0.9.
        let traj = manual_trajectory(&[0, 1, 1], &[0, 1], &model);
        for _ in 0..3 {
            update_counters(&mut counters, &traj).unwrap();
            archive.record(&traj);
        }
        let emp = estimate_model(&counters, &archive, 1.0, 0.7).unwrap();
        assert_abs_diff_eq!(emp.kernel_row(0, 0, 0)[1], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(emp.kernel_row(0, 0, 0)[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            emp.feedback(Channel::Reward, 0, 0, 0),
            3.0 * 0.9 / 4.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(emp.bonus(0, 0, 0), 0.7 / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn first_episode_is_pure_bonus() {
        let mut state = TabularState::new(2, 2, 2, 1.0, 0.3).unwrap();
        let policy = PolicySlate::uniform(2, 2, 2);
        let traj = run_episode(&toy_model(), &policy, 5).unwrap();
        let (est, diag) = evaluate_tabular(&mut state, &policy, &traj).unwrap();
        // Q = clamp(2 beta / sqrt(ridge), 0, H - h): 0.6 everywhere here.
        for h in 0..2 {
            for x in 0..2 {
                for a in 0..2 {
                    assert_abs_diff_eq!(est.values.q_reward.get(h, x, a), 0.6, epsilon = 1e-12);
                    assert_abs_diff_eq!(est.values.q_utility.get(h, x, a), 0.6, epsilon = 1e-12);
                }
            }
        }
        assert_eq!(est.backend, BackendKind::Tabular);
        assert!(diag.value_quad_forms.is_empty());
        assert_abs_diff_eq!(diag.band_widths[0][0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(diag.bonus_sum, 2.0 * 2.0 * 0.6, epsilon = 1e-12);
        est.check_consistency(&policy).unwrap();
    }

    #[test]
    fn ground_truth_injection_recovers_exact_values() {
        let model = toy_model();
        let policy = PolicySlate::uniform(2, 2, 2);
        let emp = EmpiricalModel::from_model(&model);
        let est = evaluate_empirical(&emp, &policy).unwrap();
        let exact = evaluate_policy_exact(&model, &policy).unwrap();
        for channel in Channel::BOTH {
            for h in 0..2 {
                for x in 0..2 {
                    assert_abs_diff_eq!(
                        est.values.v(channel).get(h, x),
                        exact.v(channel).get(h, x),
                        epsilon = 1e-10
                    );
                    for a in 0..2 {
                        assert_abs_diff_eq!(
                            est.values.q(channel).get(h, x, a),
                            exact.q(channel).get(h, x, a),
                            epsilon = 1e-10
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn forced_visits_converge_in_l1() {
        let model = toy_model();
        let truth = model.kernel_row(0, 0, 0);
        let mut counters = VisitCounters::new(1, 2, 2);
        let mut rng = StdRng::seed_from_u64(17);
        let n = 2000;
        for _ in 0..n {
            let draw: f64 = rng.random();
            let next = if draw < truth[0] { 0 } else { 1 };
            let idx = counters.pair_idx(0, 0, 0);
            counters.pair[idx] += 1;
            counters.triple[idx * 2 + next] += 1;
        }
        let archive = FeedbackArchive::new(1, 2, 2);
        let emp = estimate_model(&counters, &archive, 1.0, 0.0).unwrap();
        let l1: f64 = emp
            .kernel_row(0, 0, 0)
            .iter()
            .zip(truth)
            .map(|(&p, &q)| (p - q).abs())
            .sum();
        assert!(l1 <= 3.0 * (2.0f64 / n as f64).sqrt(), "l1 drift {l1}");
    }
}
