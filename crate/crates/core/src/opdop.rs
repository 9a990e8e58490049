//! Online primal-dual optimizer: per-episode policy mixing, closed-form
//! exponentiated policy improvement, projected dual ascent, and dispatch to
//! an optimistic policy-evaluation backend.
//!
//! One run is strictly sequential. Episode `k` improves the policy using the
//! previous episode's estimates and dual variable, plays one trajectory,
//! ascends the dual on the previous utility estimate, then evaluates. A final
//! bookkeeping episode `K + 1` completes the dual and evaluation traces but
//! is excluded from scoring.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{
    self, evaluate_policy_exact, run_episode_with, CmdpModel, Channel, DensePolicy, LazyPolicy,
    PolicySlate, StateActionTable, Trajectory, ValueFunctions,
};
use crate::error::{Error, Result};
use crate::harness::{DualPoint, EllipticalParams, LedgerMeta, RegretLedger};
use crate::hindsight::HindsightSolution;
use crate::lstd::{evaluate_lstd, FeatureMaps, LstdState};
use crate::tabular::{evaluate_tabular, TabularState};

/// Which optimistic evaluation backend produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Lstd,
    Tabular,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::Lstd => write!(f, "lstd"),
            BackendKind::Tabular => write!(f, "tabular"),
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lstd" => Ok(BackendKind::Lstd),
            "tabular" => Ok(BackendKind::Tabular),
            other => Err(format!("unknown backend {other:?}, expected lstd or tabular")),
        }
    }
}

/// Optimistic value estimates produced by a backend for one episode.
#[derive(Debug, Clone)]
pub struct EvalEstimates {
    pub values: ValueFunctions,
    pub backend: BackendKind,
}

impl EvalEstimates {
    /// Truncation and backup consistency: every Q sits in `[0, H - h]`
    /// (0-based) and V is the policy average of Q within 1e-10.
    pub fn check_consistency(&self, policy: &PolicySlate) -> Result<()> {
        let horizon = self.values.v_reward.horizon();
        let (s, a) = (
            self.values.q_reward.num_states(),
            self.values.q_reward.num_actions(),
        );
        for channel in Channel::BOTH {
            let q = self.values.q(channel);
            let v = self.values.v(channel);
            for h in 0..horizon {
                let cap = (horizon - h) as f64;
                for x in 0..s {
                    let row = policy.row(h, x);
                    let mut avg = 0.0;
                    for act in 0..a {
                        let qv = q.get(h, x, act);
                        if !(0.0..=cap).contains(&qv) {
                            return Err(Error::Numeric(format!(
                                "estimate {channel} Q[{h}][{x}][{act}] = {qv} outside [0, {cap}]"
                            )));
                        }
                        avg += qv * row[act];
                    }
                    if (avg - v.get(h, x)).abs() > 1e-10 {
                        return Err(Error::Numeric(format!(
                            "estimate {channel} V[{h}][{x}] = {} is not the policy average {avg}",
                            v.get(h, x)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-episode backend measurements consumed by the ledger.
#[derive(Debug, Clone)]
pub struct EvalDiagnostics {
    /// Pre-update quadratic form of the visited value feature per step;
    /// empty for the tabular backend.
    pub value_quad_forms: Vec<f64>,
    /// Width of the model-error optimism band at the visited pair, per step
    /// and channel.
    pub band_widths: Vec<[f64; 2]>,
    /// Total bonus injected into Q along the trajectory, both channels.
    pub bonus_sum: f64,
}

/// Hyperparameters of one optimizer run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpdopConfig {
    /// Policy improvement step size (alpha).
    pub step_size: f64,
    /// Bonus multiplier (beta).
    pub bonus_scale: f64,
    /// Dual ascent step (eta).
    pub dual_step: f64,
    /// Uniform mixing weight (theta).
    pub mixing: f64,
    /// Gram ridge weight (lambda).
    pub ridge: f64,
    /// Projection cap for the dual variable (chi).
    pub dual_cap: f64,
    /// Scored episodes K; one extra bookkeeping episode always runs.
    pub episodes: usize,
    /// Failure probability budget p for the confidence bonuses.
    pub failure_prob: f64,
}

impl OpdopConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.step_size > 0.0 && self.step_size.is_finite(), "step_size must be positive"),
            (self.bonus_scale >= 0.0 && self.bonus_scale.is_finite(), "bonus_scale must be nonnegative"),
            (self.dual_step > 0.0 && self.dual_step.is_finite(), "dual_step must be positive"),
            (self.mixing > 0.0 && self.mixing <= 1.0, "mixing must lie in (0, 1]"),
            (self.ridge > 0.0 && self.ridge.is_finite(), "ridge must be positive"),
            (self.dual_cap > 0.0 && self.dual_cap.is_finite(), "dual_cap must be positive and finite"),
            (self.episodes >= 1, "episodes must be at least 1"),
            (self.failure_prob > 0.0 && self.failure_prob < 1.0, "failure_prob must lie in (0, 1)"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

fn base_schedule(
    num_actions: usize,
    horizon: usize,
    episodes: usize,
    slater_gap: f64,
) -> Result<(f64, f64, f64, f64)> {
    if num_actions < 2 || horizon == 0 || episodes == 0 {
        return Err(Error::Config(
            "schedule needs at least two actions, a positive horizon, and episodes".into(),
        ));
    }
    if !(slater_gap > 0.0) {
        return Err(Error::Config(
            "schedule requires a positive Slater margin; pass an explicit dual cap otherwise"
                .into(),
        ));
    }
    let k = episodes as f64;
    let h = horizon as f64;
    let step_size = (num_actions as f64).ln().sqrt() / (h * h * k);
    let dual_step = 1.0 / k.sqrt();
    let mixing = 1.0 / k;
    let dual_cap = 2.0 * h / slater_gap;
    Ok((step_size, dual_step, mixing, dual_cap))
}

/// Theoretical schedule for the linear backend: the published step sizes with
/// ridge 1, dual cap `2H / slater_gap`, and the bonus multiplier left as the
/// knob `c1` (the analysis only fixes it up to an absolute constant).
pub fn default_schedule(
    num_actions: usize,
    horizon: usize,
    episodes: usize,
    feature_dim: usize,
    failure_prob: f64,
    slater_gap: f64,
    c1: f64,
) -> Result<OpdopConfig> {
    if feature_dim == 0 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    let (step_size, dual_step, mixing, dual_cap) =
        base_schedule(num_actions, horizon, episodes, slater_gap)?;
    let d = feature_dim as f64;
    let h = horizon as f64;
    let t = h * episodes as f64;
    let bonus_scale = c1 * (d * h * h * (d * t / failure_prob).ln()).sqrt();
    let config = OpdopConfig {
        step_size,
        bonus_scale,
        dual_step,
        mixing,
        ridge: 1.0,
        dual_cap,
        episodes,
        failure_prob,
    };
    config.validate()?;
    Ok(config)
}

/// Theoretical schedule for the tabular backend; differs from
/// [`default_schedule`] only in the bonus multiplier.
pub fn tabular_schedule(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    episodes: usize,
    failure_prob: f64,
    slater_gap: f64,
    c1: f64,
) -> Result<OpdopConfig> {
    if num_states == 0 {
        return Err(Error::Config("state count must be positive".into()));
    }
    let (step_size, dual_step, mixing, dual_cap) =
        base_schedule(num_actions, horizon, episodes, slater_gap)?;
    let s = num_states as f64;
    let a = num_actions as f64;
    let h = horizon as f64;
    let t = h * episodes as f64;
    let bonus_scale = c1 * h * (s * (s * a * t / failure_prob).ln()).sqrt();
    let config = OpdopConfig {
        step_size,
        bonus_scale,
        dual_step,
        mixing,
        ridge: 1.0,
        dual_cap,
        episodes,
        failure_prob,
    };
    config.validate()?;
    Ok(config)
}

/// Uniform mixing: every action probability is pulled up to at least
/// `mixing / |A|`. Returns a dense policy.
pub fn mix_policy(policy: &PolicySlate, mixing: f64) -> Result<PolicySlate> {
    if !(mixing > 0.0 && mixing <= 1.0) {
        return Err(Error::Config(format!(
            "mixing weight must lie in (0, 1], got {mixing}"
        )));
    }
    let (horizon, s, a) = (policy.horizon(), policy.num_states(), policy.num_actions());
    let mut out = DensePolicy::uniform(horizon, s, a);
    for h in 0..horizon {
        for x in 0..s {
            let mixed = cmdp::mix_row(&policy.row(h, x), mixing);
            out.set_row(h, x, &mixed);
        }
    }
    Ok(PolicySlate::Dense(out))
}

/// Closed-form mirror-descent improvement: each row becomes proportional to
/// `mixed * exp(step_size * (q_r + dual * q_g))`, normalized in log space.
pub fn policy_improve(
    mixed: &PolicySlate,
    q_reward: &StateActionTable,
    q_utility: &StateActionTable,
    dual: f64,
    step_size: f64,
) -> Result<PolicySlate> {
    let (horizon, s, a) = (mixed.horizon(), mixed.num_states(), mixed.num_actions());
    if q_reward.horizon() != horizon
        || q_reward.num_states() != s
        || q_reward.num_actions() != a
        || q_utility.horizon() != horizon
        || q_utility.num_states() != s
        || q_utility.num_actions() != a
    {
        return Err(Error::Structural(
            "action-value tables do not match the policy shape".into(),
        ));
    }
    if !q_reward.is_finite() || !q_utility.is_finite() {
        return Err(Error::Numeric(
            "policy improvement received non-finite action values".into(),
        ));
    }
    if !dual.is_finite() || dual < 0.0 {
        return Err(Error::Numeric(format!(
            "dual variable must be finite and nonnegative, got {dual}"
        )));
    }
    if !(step_size > 0.0) || !step_size.is_finite() {
        return Err(Error::Config(format!(
            "step size must be positive and finite, got {step_size}"
        )));
    }
    let mut out = DensePolicy::uniform(horizon, s, a);
    for h in 0..horizon {
        for x in 0..s {
            let row = cmdp::improve_row(
                &mixed.row(h, x),
                q_reward.row(h, x),
                q_utility.row(h, x),
                dual,
                step_size,
            );
            cmdp::check_distribution(&row, cmdp::SIMPLEX_TOL)?;
            if row.iter().any(|&p| p <= 0.0) {
                return Err(Error::Numeric(format!(
                    "policy improvement produced a zero probability at step {h}, state {x}"
                )));
            }
            out.set_row(h, x, &row);
        }
    }
    Ok(PolicySlate::Dense(out))
}

/// Projected dual variable with its ascent history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualState {
    value: f64,
    cap: f64,
    pub history: Vec<DualPoint>,
}

impl DualState {
    /// Starts at zero with projection range `[0, cap]`.
    pub fn new(cap: f64) -> Result<Self> {
        if !(cap > 0.0) || !cap.is_finite() {
            return Err(Error::Config(format!(
                "dual cap must be positive and finite, got {cap}"
            )));
        }
        Ok(DualState {
            value: 0.0,
            cap,
            history: Vec::new(),
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// One projected ascent step on the violation signal
    /// `utility_floor - utility_estimate`.
    pub fn update(
        &mut self,
        episode: usize,
        utility_floor: f64,
        utility_estimate: f64,
        dual_step: f64,
    ) -> Result<f64> {
        let signal = utility_floor - utility_estimate;
        if !signal.is_finite() || !dual_step.is_finite() {
            return Err(Error::Numeric(format!(
                "dual update received non-finite inputs (signal {signal}, step {dual_step})"
            )));
        }
        self.value = (self.value + dual_step * signal).clamp(0.0, self.cap);
        self.history.push(DualPoint {
            episode,
            value: self.value,
            signal,
        });
        Ok(self.value)
    }
}

/// Evaluation backend selection for [`run_opdop`].
#[derive(Debug, Clone, Copy)]
pub enum BackendChoice<'a> {
    /// Least-squares evaluation over the given feature maps.
    Lstd(&'a FeatureMaps),
    /// Count-based empirical-model evaluation.
    Tabular,
}

impl BackendChoice<'_> {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendChoice::Lstd(_) => BackendKind::Lstd,
            BackendChoice::Tabular => BackendKind::Tabular,
        }
    }
}

enum BackendState<'a> {
    Lstd {
        maps: &'a FeatureMaps,
        state: LstdState,
    },
    Tabular(TabularState),
}

impl BackendState<'_> {
    fn evaluate(
        &mut self,
        policy: &PolicySlate,
        trajectory: &Trajectory,
    ) -> Result<(EvalEstimates, EvalDiagnostics)> {
        match self {
            BackendState::Lstd { maps, state } => evaluate_lstd(state, maps, policy, trajectory),
            BackendState::Tabular(state) => evaluate_tabular(state, policy, trajectory),
        }
    }
}

/// Runs the full optimizer loop for `config.episodes` scored episodes plus
/// the bookkeeping episode, scoring each policy against `hindsight`.
pub fn run_opdop(
    model: &CmdpModel,
    hindsight: &HindsightSolution,
    config: &OpdopConfig,
    backend: BackendChoice<'_>,
    seed: u64,
) -> Result<RegretLedger> {
    config.validate()?;
    let (horizon, s, a) = (model.horizon(), model.num_states(), model.num_actions());
    let x1 = model.initial_state();
    let floor = model.utility_floor();

    let mut backend_state = match backend {
        BackendChoice::Lstd(maps) => {
            maps.check_shape(model)?;
            BackendState::Lstd {
                maps,
                state: LstdState::new(maps, horizon, config.ridge, config.bonus_scale)?,
            }
        }
        BackendChoice::Tabular => BackendState::Tabular(TabularState::new(
            s,
            a,
            horizon,
            config.ridge,
            config.bonus_scale,
        )?),
    };

    let elliptical = match backend {
        BackendChoice::Lstd(maps) => Some(EllipticalParams {
            feature_dim: maps.value_dim(),
            ridge: config.ridge,
        }),
        BackendChoice::Tabular => None,
    };
    let mut ledger = RegretLedger::new(LedgerMeta {
        backend: backend.kind(),
        seed,
        episodes: config.episodes,
        horizon,
        utility_floor: floor,
        dual_cap: config.dual_cap,
        hindsight_value: hindsight.optimal_value,
        elliptical,
    });

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Line-1 initialization: zero action values, uniform policy, utility
    // estimate pinned at the floor, dual at zero.
    let mut policy = match backend {
        BackendChoice::Lstd(_) => PolicySlate::Lazy(LazyPolicy::new(horizon, s, a)),
        BackendChoice::Tabular => PolicySlate::uniform(horizon, s, a),
    };
    let mut q_prev = (
        Rc::new(StateActionTable::zeros(horizon, s, a)),
        Rc::new(StateActionTable::zeros(horizon, s, a)),
    );
    let mut dual = DualState::new(config.dual_cap)?;
    let mut utility_estimate = floor;

    for k in 1..=config.episodes + 1 {
        // Improvement uses the previous episode's estimates and dual value.
        let dual_prev = dual.value();
        match &mut policy {
            PolicySlate::Lazy(lazy) => lazy.push_step(
                Rc::clone(&q_prev.0),
                Rc::clone(&q_prev.1),
                dual_prev,
                config.step_size,
                config.mixing,
            )?,
            dense => {
                let mixed = mix_policy(dense, config.mixing)?;
                *dense = policy_improve(
                    &mixed,
                    &q_prev.0,
                    &q_prev.1,
                    dual_prev,
                    config.step_size,
                )?;
            }
        }

        let mut trajectory = run_episode_with(model, &policy, &mut rng)?;
        trajectory.episode = k;

        // Ascent on the previous episode's utility estimate.
        dual.update(k, floor, utility_estimate, config.dual_step)?;

        let (estimates, diagnostics) = backend_state.evaluate(&policy, &trajectory)?;
        estimates.check_consistency(&policy)?;

        // Policy hygiene: rows stay strictly positive probability vectors.
        let mut min_prob = f64::INFINITY;
        for h in 0..horizon {
            for x in 0..s {
                let row = policy.row(h, x);
                cmdp::check_distribution(&row, cmdp::SIMPLEX_TOL)?;
                for &p in row.iter() {
                    if p <= 0.0 {
                        return Err(Error::Numeric(format!(
                            "policy lost strict positivity at episode {k}, step {h}, state {x}"
                        )));
                    }
                    min_prob = min_prob.min(p);
                }
            }
        }
        ledger.observe_action_prob(min_prob);

        let true_values = evaluate_policy_exact(model, &policy)?;
        if k <= config.episodes {
            ledger.push_row(
                k,
                true_values.initial_value(Channel::Reward, x1),
                true_values.initial_value(Channel::Utility, x1),
                estimates.values.initial_value(Channel::Reward, x1),
                estimates.values.initial_value(Channel::Utility, x1),
                dual.value(),
                diagnostics.bonus_sum,
            )?;

            // Model prediction error at the visited pairs, against the true
            // kernel; optimism puts it in [-band, 0] with high probability.
            for (h, step) in trajectory.steps.iter().enumerate() {
                for channel in Channel::BOTH {
                    let v_next = estimates.values.v(channel).layer(h + 1);
                    let expect: f64 = model
                        .kernel_row(h, step.state, step.action)
                        .iter()
                        .zip(v_next)
                        .map(|(&p, &v)| p * v)
                        .sum();
                    let backed_up =
                        model.feedback(channel, h, step.state, step.action) + expect;
                    let iota =
                        backed_up - estimates.values.q(channel).get(h, step.state, step.action);
                    let band = diagnostics.band_widths[h][channel.idx()];
                    let within = iota <= 1e-9 && iota >= -band - 1e-9;
                    ledger.count_optimism(channel, within);
                }
            }
            if !diagnostics.value_quad_forms.is_empty() {
                ledger.add_elliptical_terms(&diagnostics.value_quad_forms)?;
            }
        }

        utility_estimate = estimates.values.initial_value(Channel::Utility, x1);
        q_prev = (
            Rc::new(estimates.values.q_reward),
            Rc::new(estimates.values.q_utility),
        );
    }

    ledger.set_dual_trace(dual.history);
    ledger.verify()?;
    Ok(ledger)
}
