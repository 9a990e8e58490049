//! Constrained episodic MDP primitives: models, policies, trajectories, and
//! exact policy evaluation.
//!
//! Conventions: steps are 0-based (`h` in `0..horizon`), state-value tables
//! carry one extra all-zero terminal layer at `h == horizon`, and every
//! probability row is validated against [`SIMPLEX_TOL`].

use std::borrow::Cow;
use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for probability vectors summing to one.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Kernel rows whose sums deviate from one by at most this much are
/// renormalized on load; larger deviations are rejected.
pub const KERNEL_RENORM_TOL: f64 = 1e-9;

/// Scalar feedback channel of a constrained MDP: the objective being
/// maximized or the utility that must stay above the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Reward,
    Utility,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::Reward, Channel::Utility];

    pub(crate) fn idx(self) -> usize {
        match self {
            Channel::Reward => 0,
            Channel::Utility => 1,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Reward => write!(f, "reward"),
            Channel::Utility => write!(f, "utility"),
        }
    }
}

/// Dense `[h][x][a]` table over steps, states, and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl StateActionTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        StateActionTable {
            horizon,
            num_states,
            num_actions,
            data: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    fn offset(&self, h: usize, x: usize, a: usize) -> usize {
        debug_assert!(h < self.horizon && x < self.num_states && a < self.num_actions);
        (h * self.num_states + x) * self.num_actions + a
    }

    #[inline]
    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.data[self.offset(h, x, a)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, x: usize, a: usize, value: f64) {
        let i = self.offset(h, x, a);
        self.data[i] = value;
    }

    /// Action slice for one `(h, x)`.
    pub fn row(&self, h: usize, x: usize) -> &[f64] {
        let start = self.offset(h, x, 0);
        &self.data[start..start + self.num_actions]
    }

    pub fn row_mut(&mut self, h: usize, x: usize) -> &mut [f64] {
        let start = self.offset(h, x, 0);
        &mut self.data[start..start + self.num_actions]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense `[h][x]` table with `horizon + 1` layers; the final layer holds the
/// terminal values used by backward recursions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTable {
    horizon: usize,
    num_states: usize,
    data: Vec<f64>,
}

impl StateTable {
    pub fn zeros(horizon: usize, num_states: usize) -> Self {
        StateTable {
            horizon,
            num_states,
            data: vec![0.0; (horizon + 1) * num_states],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    #[inline]
    pub fn get(&self, h: usize, x: usize) -> f64 {
        debug_assert!(h <= self.horizon && x < self.num_states);
        self.data[h * self.num_states + x]
    }

    #[inline]
    pub fn set(&mut self, h: usize, x: usize, value: f64) {
        debug_assert!(h <= self.horizon && x < self.num_states);
        self.data[h * self.num_states + x] = value;
    }

    /// State slice for one step; valid for `h` up to and including `horizon`.
    pub fn layer(&self, h: usize) -> &[f64] {
        debug_assert!(h <= self.horizon);
        &self.data[h * self.num_states..(h + 1) * self.num_states]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Q and V tables for both channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunctions {
    pub q_reward: StateActionTable,
    pub q_utility: StateActionTable,
    pub v_reward: StateTable,
    pub v_utility: StateTable,
}

impl ValueFunctions {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        ValueFunctions {
            q_reward: StateActionTable::zeros(horizon, num_states, num_actions),
            q_utility: StateActionTable::zeros(horizon, num_states, num_actions),
            v_reward: StateTable::zeros(horizon, num_states),
            v_utility: StateTable::zeros(horizon, num_states),
        }
    }

    pub fn q(&self, channel: Channel) -> &StateActionTable {
        match channel {
            Channel::Reward => &self.q_reward,
            Channel::Utility => &self.q_utility,
        }
    }

    pub fn v(&self, channel: Channel) -> &StateTable {
        match channel {
            Channel::Reward => &self.v_reward,
            Channel::Utility => &self.v_utility,
        }
    }

    /// Value of the initial state on the given channel.
    pub fn initial_value(&self, channel: Channel, initial_state: usize) -> f64 {
        self.v(channel).get(0, initial_state)
    }
}

/// On-disk model layout. Field names are the file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawModel {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    b: f64,
    initial_state: usize,
    /// `transitions[h][x][a][x']`
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `reward[h][x][a]`
    reward: Vec<Vec<Vec<f64>>>,
    /// `utility[h][x][a]`
    utility: Vec<Vec<Vec<f64>>>,
}

/// Finite-horizon constrained MDP with known deterministic reward and utility
/// tables and a fixed initial state.
///
/// The constraint requires the expected cumulative utility to reach
/// `utility_floor`. A random initial-state distribution would generalize
/// `initial_state` to a probability vector; only the fixed case is supported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct CmdpModel {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    utility_floor: f64,
    transitions: Vec<f64>,
    reward: Vec<f64>,
    utility: Vec<f64>,
}

impl TryFrom<RawModel> for CmdpModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        CmdpModel::from_tables(
            raw.num_states,
            raw.num_actions,
            raw.horizon,
            raw.initial_state,
            raw.b,
            &raw.transitions,
            &raw.reward,
            &raw.utility,
        )
    }
}

impl From<CmdpModel> for RawModel {
    fn from(model: CmdpModel) -> RawModel {
        let (s, a, h) = (model.num_states, model.num_actions, model.horizon);
        let mut transitions = vec![vec![vec![vec![0.0; s]; a]; s]; h];
        let mut reward = vec![vec![vec![0.0; a]; s]; h];
        let mut utility = vec![vec![vec![0.0; a]; s]; h];
        for step in 0..h {
            for x in 0..s {
                for act in 0..a {
                    transitions[step][x][act].copy_from_slice(model.kernel_row(step, x, act));
                    reward[step][x][act] = model.feedback(Channel::Reward, step, x, act);
                    utility[step][x][act] = model.feedback(Channel::Utility, step, x, act);
                }
            }
        }
        RawModel {
            num_states: s,
            num_actions: a,
            horizon: h,
            b: model.utility_floor,
            initial_state: model.initial_state,
            transitions,
            reward,
            utility,
        }
    }
}

fn check_feedback_value(name: &str, h: usize, x: usize, a: usize, v: f64) -> Result<f64> {
    if !v.is_finite() || !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v) {
        return Err(Error::Structural(format!(
            "{name}[{h}][{x}][{a}] = {v} is outside [0, 1]"
        )));
    }
    Ok(v.clamp(0.0, 1.0))
}

impl CmdpModel {
    /// Validating constructor from nested tables in file-format layout.
    ///
    /// Kernel rows summing to one within [`KERNEL_RENORM_TOL`] are
    /// renormalized; anything further off is rejected. Rewards and utilities
    /// must sit in `[0, 1]`. The floor `b` must be positive and finite; floors
    /// above the horizon construct fine and surface later as infeasibility
    /// with the achievable maximum attached.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tables(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        utility_floor: f64,
        transitions: &[Vec<Vec<Vec<f64>>>],
        reward: &[Vec<Vec<f64>>],
        utility: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(Error::Structural(format!(
                "dimensions must be positive: {num_states} states, {num_actions} actions, horizon {horizon}"
            )));
        }
        if initial_state >= num_states {
            return Err(Error::Structural(format!(
                "initial state {initial_state} out of range for {num_states} states"
            )));
        }
        if !utility_floor.is_finite() || utility_floor <= 0.0 {
            return Err(Error::Structural(format!(
                "utility floor must be positive and finite, got {utility_floor}"
            )));
        }

        let mut flat_p = Vec::with_capacity(horizon * num_states * num_actions * num_states);
        let mut flat_r = Vec::with_capacity(horizon * num_states * num_actions);
        let mut flat_g = Vec::with_capacity(horizon * num_states * num_actions);

        if transitions.len() != horizon || reward.len() != horizon || utility.len() != horizon {
            return Err(Error::Structural(
                "table layer count does not match horizon".into(),
            ));
        }
        for h in 0..horizon {
            if transitions[h].len() != num_states
                || reward[h].len() != num_states
                || utility[h].len() != num_states
            {
                return Err(Error::Structural(format!(
                    "state dimension mismatch at step {h}"
                )));
            }
            for x in 0..num_states {
                if transitions[h][x].len() != num_actions
                    || reward[h][x].len() != num_actions
                    || utility[h][x].len() != num_actions
                {
                    return Err(Error::Structural(format!(
                        "action dimension mismatch at step {h}, state {x}"
                    )));
                }
                for a in 0..num_actions {
                    let row = &transitions[h][x][a];
                    if row.len() != num_states {
                        return Err(Error::Structural(format!(
                            "kernel row ({h}, {x}, {a}) has {} entries, expected {num_states}",
                            row.len()
                        )));
                    }
                    let mut sum = 0.0;
                    for &p in row {
                        if !p.is_finite() || p < -SIMPLEX_TOL {
                            return Err(Error::Structural(format!(
                                "kernel row ({h}, {x}, {a}) has invalid probability {p}"
                            )));
                        }
                        sum += p.max(0.0);
                    }
                    if (sum - 1.0).abs() > KERNEL_RENORM_TOL {
                        return Err(Error::Structural(format!(
                            "kernel row ({h}, {x}, {a}) sums to {sum}, beyond renormalization tolerance"
                        )));
                    }
                    flat_p.extend(row.iter().map(|&p| p.max(0.0) / sum));
                    flat_r.push(check_feedback_value("reward", h, x, a, reward[h][x][a])?);
                    flat_g.push(check_feedback_value("utility", h, x, a, utility[h][x][a])?);
                }
            }
        }

        Ok(CmdpModel {
            num_states,
            num_actions,
            horizon,
            initial_state,
            utility_floor,
            transitions: flat_p,
            reward: flat_r,
            utility: flat_g,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Required expected cumulative utility (the constraint threshold).
    pub fn utility_floor(&self) -> f64 {
        self.utility_floor
    }

    /// Copy of the model with a different utility floor.
    pub fn with_utility_floor(&self, utility_floor: f64) -> Result<Self> {
        if !utility_floor.is_finite() || utility_floor <= 0.0 {
            return Err(Error::Structural(format!(
                "utility floor must be positive and finite, got {utility_floor}"
            )));
        }
        let mut out = self.clone();
        out.utility_floor = utility_floor;
        Ok(out)
    }

    /// Transition probabilities `P_h(. | x, a)`.
    #[inline]
    pub fn kernel_row(&self, h: usize, x: usize, a: usize) -> &[f64] {
        let start = ((h * self.num_states + x) * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    /// Deterministic scalar feedback `r_h(x, a)` or `g_h(x, a)`.
    #[inline]
    pub fn feedback(&self, channel: Channel, h: usize, x: usize, a: usize) -> f64 {
        let i = (h * self.num_states + x) * self.num_actions + a;
        match channel {
            Channel::Reward => self.reward[i],
            Channel::Utility => self.utility[i],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Checks that `row` is a probability vector within `tol` of summing to one.
pub(crate) fn check_distribution(row: &[f64], tol: f64) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Numeric(format!(
                "distribution entry {p} is negative or non-finite"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > tol {
        return Err(Error::Numeric(format!(
            "distribution sums to {sum}, off by more than {tol}"
        )));
    }
    Ok(())
}

/// `(1 - mixing) * row + mixing / |A|`: pulls every action probability up to
/// at least `mixing / |A|`.
pub(crate) fn mix_row(row: &[f64], mixing: f64) -> Vec<f64> {
    let floor = mixing / row.len() as f64;
    row.iter().map(|&p| (1.0 - mixing) * p + floor).collect()
}

/// Exponentiated update of a strictly positive row: `p_a` proportional to
/// `row_a * exp(step_size * (q_r_a + dual * q_g_a))`, normalized in a
/// max-shifted log domain. Callers guarantee finite inputs.
pub(crate) fn improve_row(
    row: &[f64],
    q_r: &[f64],
    q_g: &[f64],
    dual: f64,
    step_size: f64,
) -> Vec<f64> {
    let logits: Vec<f64> = row
        .iter()
        .zip(q_r.iter().zip(q_g))
        .map(|(&p, (&qr, &qg))| p.ln() + step_size * (qr + dual * qg))
        .collect();
    let shift = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - shift).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Explicit per-step action distribution table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensePolicy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl DensePolicy {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        DensePolicy {
            horizon,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    /// Builds from a flat `[h][x][a]` probability table, validating each row.
    pub fn from_probs(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != horizon * num_states * num_actions {
            return Err(Error::Structural(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                horizon * num_states * num_actions
            )));
        }
        for h in 0..horizon {
            for x in 0..num_states {
                let start = (h * num_states + x) * num_actions;
                check_distribution(&probs[start..start + num_actions], SIMPLEX_TOL)?;
            }
        }
        Ok(DensePolicy {
            horizon,
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, h: usize, x: usize) -> &[f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub(crate) fn set_row(&mut self, h: usize, x: usize, row: &[f64]) {
        let start = (h * self.num_states + x) * self.num_actions;
        self.probs[start..start + self.num_actions].copy_from_slice(row);
    }
}

/// One mixing-plus-improvement stage of a lazily evaluated policy chain.
#[derive(Debug, Clone)]
pub struct LazyStep {
    pub q_reward: Rc<StateActionTable>,
    pub q_utility: Rc<StateActionTable>,
    pub dual: f64,
    pub step_size: f64,
    pub mixing: f64,
}

#[derive(Debug, Clone)]
struct MemoRow {
    version: usize,
    probs: Vec<f64>,
}

/// Policy stored as the uniform root plus a per-episode update chain.
///
/// Rows materialize on demand and are memoized, so advancing a warm row by
/// one episode costs a single mixing and exponentiated update; the first
/// touch of a row replays the whole chain for that `(h, x)`.
#[derive(Debug, Clone)]
pub struct LazyPolicy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    steps: Vec<LazyStep>,
    memo: RefCell<Vec<MemoRow>>,
}

impl LazyPolicy {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        let uniform = vec![1.0 / num_actions as f64; num_actions];
        let memo = vec![
            MemoRow {
                version: 0,
                probs: uniform,
            };
            horizon * num_states
        ];
        LazyPolicy {
            horizon,
            num_states,
            num_actions,
            steps: Vec::new(),
            memo: RefCell::new(memo),
        }
    }

    /// Appends one update stage. Q tables must be finite and shaped like the
    /// policy; `mixing` in `(0, 1]`, `step_size > 0`, `dual >= 0`.
    pub fn push_step(
        &mut self,
        q_reward: Rc<StateActionTable>,
        q_utility: Rc<StateActionTable>,
        dual: f64,
        step_size: f64,
        mixing: f64,
    ) -> Result<()> {
        for q in [&q_reward, &q_utility] {
            if q.horizon() != self.horizon
                || q.num_states() != self.num_states
                || q.num_actions() != self.num_actions
            {
                return Err(Error::Structural(
                    "policy update tables do not match policy shape".into(),
                ));
            }
            if !q.is_finite() {
                return Err(Error::Numeric(
                    "policy update received non-finite action values".into(),
                ));
            }
        }
        if !(mixing > 0.0 && mixing <= 1.0) {
            return Err(Error::Config(format!("mixing must lie in (0, 1], got {mixing}")));
        }
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::Config(format!(
                "step size must be positive and finite, got {step_size}"
            )));
        }
        if !dual.is_finite() || dual < 0.0 {
            return Err(Error::Numeric(format!(
                "dual variable must be finite and nonnegative, got {dual}"
            )));
        }
        self.steps.push(LazyStep {
            q_reward,
            q_utility,
            dual,
            step_size,
            mixing,
        });
        Ok(())
    }

    /// Number of update stages applied so far.
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// Materialized action distribution at `(h, x)`, advancing the memo to
    /// the current chain head.
    pub fn row(&self, h: usize, x: usize) -> Vec<f64> {
        let mut memo = self.memo.borrow_mut();
        let slot = &mut memo[h * self.num_states + x];
        while slot.version < self.steps.len() {
            let step = &self.steps[slot.version];
            let mixed = mix_row(&slot.probs, step.mixing);
            slot.probs = improve_row(
                &mixed,
                step.q_reward.row(h, x),
                step.q_utility.row(h, x),
                step.dual,
                step.step_size,
            );
            slot.version += 1;
        }
        slot.probs.clone()
    }
}

/// Policy representation: a dense table or a lazy update chain. Both answer
/// row queries; everything downstream works off rows.
#[derive(Debug, Clone)]
pub enum PolicySlate {
    Dense(DensePolicy),
    Lazy(LazyPolicy),
}

impl PolicySlate {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        PolicySlate::Dense(DensePolicy::uniform(horizon, num_states, num_actions))
    }

    pub fn horizon(&self) -> usize {
        match self {
            PolicySlate::Dense(p) => p.horizon,
            PolicySlate::Lazy(p) => p.horizon,
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            PolicySlate::Dense(p) => p.num_states,
            PolicySlate::Lazy(p) => p.num_states,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            PolicySlate::Dense(p) => p.num_actions,
            PolicySlate::Lazy(p) => p.num_actions,
        }
    }

    /// Action distribution at `(h, x)`; borrows for dense storage,
    /// materializes for lazy chains.
    pub fn row(&self, h: usize, x: usize) -> Cow<'_, [f64]> {
        match self {
            PolicySlate::Dense(p) => Cow::Borrowed(p.row(h, x)),
            PolicySlate::Lazy(p) => Cow::Owned(p.row(h, x)),
        }
    }

    /// Materializes every row into a dense table.
    pub fn to_dense(&self) -> DensePolicy {
        match self {
            PolicySlate::Dense(p) => p.clone(),
            PolicySlate::Lazy(p) => {
                let mut out =
                    DensePolicy::uniform(p.horizon, p.num_states, p.num_actions);
                for h in 0..p.horizon {
                    for x in 0..p.num_states {
                        out.set_row(h, x, &p.row(h, x));
                    }
                }
                out
            }
        }
    }

    pub fn check_shape(&self, model: &CmdpModel) -> Result<()> {
        if self.horizon() != model.horizon()
            || self.num_states() != model.num_states()
            || self.num_actions() != model.num_actions()
        {
            return Err(Error::Structural(format!(
                "policy shape ({}, {}, {}) does not match model ({}, {}, {})",
                self.horizon(),
                self.num_states(),
                self.num_actions(),
                model.horizon(),
                model.num_states(),
                model.num_actions()
            )));
        }
        Ok(())
    }
}

/// One interaction step: the visited pair and its observed feedback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub utility: f64,
}

/// One episode of interaction: exactly `horizon` steps plus the state the
/// episode terminated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Episode index assigned by the caller; zero when standalone.
    pub episode: usize,
    pub steps: Vec<TrajStep>,
    pub terminal_state: usize,
}

impl Trajectory {
    /// State observed entering step `h`, including `h == horizon`.
    pub fn state_at(&self, h: usize) -> usize {
        if h < self.steps.len() {
            self.steps[h].state
        } else {
            self.terminal_state
        }
    }
}

/// Samples an index from a probability row using one uniform draw. The final
/// index absorbs any floating-point slack.
pub(crate) fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Plays one episode of `policy` on `model` with the supplied generator.
pub fn run_episode_with<R: Rng>(
    model: &CmdpModel,
    policy: &PolicySlate,
    rng: &mut R,
) -> Result<Trajectory> {
    policy.check_shape(model)?;
    let mut state = model.initial_state();
    let mut steps = Vec::with_capacity(model.horizon());
    for h in 0..model.horizon() {
        let row = policy.row(h, state);
        let action = sample_categorical(&row, rng);
        steps.push(TrajStep {
            state,
            action,
            reward: model.feedback(Channel::Reward, h, state, action),
            utility: model.feedback(Channel::Utility, h, state, action),
        });
        state = sample_categorical(model.kernel_row(h, state, action), rng);
    }
    Ok(Trajectory {
        episode: 0,
        steps,
        terminal_state: state,
    })
}

/// Plays one episode from a fixed seed; identical seeds give identical
/// trajectories.
pub fn run_episode(model: &CmdpModel, policy: &PolicySlate, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    run_episode_with(model, policy, &mut rng)
}

/// One-step expected backup `feedback_h + P_h v_next` for every state-action
/// pair at step `h`, flattened `[x][a]`.
pub fn bellman_apply(
    model: &CmdpModel,
    channel: Channel,
    h: usize,
    v_next: &[f64],
) -> Result<Vec<f64>> {
    if h >= model.horizon() {
        return Err(Error::Contract(format!(
            "step {h} out of range for horizon {}",
            model.horizon()
        )));
    }
    if v_next.len() != model.num_states() {
        return Err(Error::Contract(format!(
            "next-step values have {} entries, expected {}",
            v_next.len(),
            model.num_states()
        )));
    }
    let mut out = Vec::with_capacity(model.num_states() * model.num_actions());
    for x in 0..model.num_states() {
        for a in 0..model.num_actions() {
            let expect: f64 = model
                .kernel_row(h, x, a)
                .iter()
                .zip(v_next)
                .map(|(&p, &v)| p * v)
                .sum();
            out.push(model.feedback(channel, h, x, a) + expect);
        }
    }
    Ok(out)
}

/// Exact dynamic-programming evaluation of `policy` on both channels under
/// the true model.
pub fn evaluate_policy_exact(model: &CmdpModel, policy: &PolicySlate) -> Result<ValueFunctions> {
    policy.check_shape(model)?;
    let (s, a) = (model.num_states(), model.num_actions());
    let mut values = ValueFunctions::zeros(model.horizon(), s, a);
    for h in (0..model.horizon()).rev() {
        for channel in Channel::BOTH {
            let backup = bellman_apply(model, channel, h, match channel {
                Channel::Reward => values.v_reward.layer(h + 1),
                Channel::Utility => values.v_utility.layer(h + 1),
            })?;
            for x in 0..s {
                let row = policy.row(h, x);
                let q_row = &backup[x * a..(x + 1) * a];
                let v: f64 = q_row.iter().zip(row.iter()).map(|(&q, &p)| q * p).sum();
                match channel {
                    Channel::Reward => {
                        values.q_reward.row_mut(h, x).copy_from_slice(q_row);
                        values.v_reward.set(h, x, v);
                    }
                    Channel::Utility => {
                        values.q_utility.row_mut(h, x).copy_from_slice(q_row);
                        values.v_utility.set(h, x, v);
                    }
                }
            }
        }
    }
    Ok(values)
}
