//! Least-squares temporal-difference evaluation with confidence bonuses.
//!
//! The transition kernel is linear in a next-state feature map psi and the
//! per-step feedback is linear in a state-action feature map varphi. Each
//! step keeps ridge-regularized Gram matrices as Cholesky factors: one over
//! the visited varphi, and one per channel over the archived integrated
//! features. Regression features are frozen at the episode that produced
//! them; the factors always contain strictly earlier episodes when an
//! estimate is formed.

use serde::{Deserialize, Serialize};

use crate::cmdp::{
    Channel, CmdpModel, PolicySlate, StateActionTable, StateTable, Trajectory, ValueFunctions,
};
use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, Cholesky, SparseVec};
use crate::opdop::{BackendKind, EvalDiagnostics, EvalEstimates};

/// Archive-vs-incremental Gram agreement required by the periodic audit.
const GRAM_AUDIT_TOL: f64 = 1e-9;
/// Factor agreement required by the periodic audit.
const FACTOR_AUDIT_TOL: f64 = 1e-8;
/// Episodes between factorization audits.
const AUDIT_PERIOD: usize = 64;

/// State-action and next-state feature maps shared by every step.
///
/// `varphi(x, a)` carries the feedback representation, `psi(x, a, x')` the
/// kernel representation. Value feature norms are capped at 1 so that the
/// logged exploration totals obey their closed-form budget unconditionally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMaps {
    num_states: usize,
    num_actions: usize,
    value_dim: usize,
    kernel_dim: usize,
    varphi: Vec<SparseVec>,
    psi: Vec<SparseVec>,
}

impl FeatureMaps {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        varphi: Vec<SparseVec>,
        psi: Vec<SparseVec>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Structural(
                "feature maps need at least one state and action".into(),
            ));
        }
        if varphi.len() != num_states * num_actions {
            return Err(Error::Structural(format!(
                "expected {} value features, got {}",
                num_states * num_actions,
                varphi.len()
            )));
        }
        if psi.len() != num_states * num_actions * num_states {
            return Err(Error::Structural(format!(
                "expected {} kernel features, got {}",
                num_states * num_actions * num_states,
                psi.len()
            )));
        }
        let value_dim = varphi.first().map_or(0, SparseVec::dim);
        let kernel_dim = psi.first().map_or(0, SparseVec::dim);
        if value_dim == 0 || kernel_dim == 0 {
            return Err(Error::Structural("feature dimensions must be positive".into()));
        }
        for v in &varphi {
            if v.dim() != value_dim {
                return Err(Error::Structural("inconsistent value feature dimension".into()));
            }
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite value feature".into()));
            }
            if v.norm() > 1.0 + 1e-12 {
                return Err(Error::Structural(format!(
                    "value feature norm {} exceeds 1; rescale the map",
                    v.norm()
                )));
            }
        }
        for p in &psi {
            if p.dim() != kernel_dim {
                return Err(Error::Structural("inconsistent kernel feature dimension".into()));
            }
            if !p.is_finite() {
                return Err(Error::Numeric("non-finite kernel feature".into()));
            }
        }
        Ok(FeatureMaps {
            num_states,
            num_actions,
            value_dim,
            kernel_dim,
            varphi,
            psi,
        })
    }

    /// Indicator features: varphi spans state-action pairs, psi spans
    /// state-action-next-state triples. Reconstructs any tabular model.
    pub fn canonical(num_states: usize, num_actions: usize) -> Self {
        let d2 = num_states * num_actions;
        let d1 = d2 * num_states;
        let varphi = (0..d2).map(|i| SparseVec::unit(d2, i)).collect();
        let psi = (0..d1).map(|i| SparseVec::unit(d1, i)).collect();
        FeatureMaps::new(num_states, num_actions, varphi, psi).expect("canonical maps are valid")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel_dim
    }

    pub fn varphi(&self, x: usize, a: usize) -> &SparseVec {
        &self.varphi[x * self.num_actions + a]
    }

    pub fn psi(&self, x: usize, a: usize, next: usize) -> &SparseVec {
        &self.psi[(x * self.num_actions + a) * self.num_states + next]
    }

    pub fn check_shape(&self, model: &CmdpModel) -> Result<()> {
        if model.num_states() != self.num_states || model.num_actions() != self.num_actions {
            return Err(Error::Structural(format!(
                "feature maps cover {} states and {} actions, model has {} and {}",
                self.num_states,
                self.num_actions,
                model.num_states(),
                model.num_actions()
            )));
        }
        Ok(())
    }

    /// Confirms the model's kernel is exactly `<psi(x,a,x'), theta_h>`.
    pub fn verify_kernel(&self, model: &CmdpModel, thetas: &[Vec<f64>]) -> Result<()> {
        self.check_shape(model)?;
        if thetas.len() != model.horizon() {
            return Err(Error::Structural(format!(
                "expected {} kernel parameter vectors, got {}",
                model.horizon(),
                thetas.len()
            )));
        }
        for (h, theta) in thetas.iter().enumerate() {
            if theta.len() != self.kernel_dim {
                return Err(Error::Structural(
                    "kernel parameter dimension does not match psi".into(),
                ));
            }
            for x in 0..self.num_states {
                for a in 0..self.num_actions {
                    let row = model.kernel_row(h, x, a);
                    for (next, &p) in row.iter().enumerate() {
                        let lin = self.psi(x, a, next).dot_dense(theta);
                        if (lin - p).abs() > 1e-10 {
                            return Err(Error::Structural(format!(
                                "kernel mismatch at h={h}, x={x}, a={a}, next={next}: \
                                 linear form {lin} vs kernel {p}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reduction of the next-state feature map against a value function.
pub trait KernelIntegrator {
    fn integrate(&self, maps: &FeatureMaps, x: usize, a: usize, v_next: &[f64]) -> SparseVec;
}

/// Exact finite sum over the enumerated next states.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactIntegrator;

impl KernelIntegrator for ExactIntegrator {
    fn integrate(&self, maps: &FeatureMaps, x: usize, a: usize, v_next: &[f64]) -> SparseVec {
        let mut acc = vec![0.0; maps.kernel_dim()];
        for (next, &v) in v_next.iter().enumerate() {
            if v != 0.0 {
                maps.psi(x, a, next).add_scaled_into(v, &mut acc);
            }
        }
        SparseVec::from_dense(&acc)
    }
}

/// Integrated kernel features `phi(x, a) = sum_x' psi(x, a, x') v_next(x')`
/// for every pair, with `v_next` required to sit in `[0, cap]`.
pub fn integrate_value_feature(
    maps: &FeatureMaps,
    v_next: &[f64],
    cap: f64,
) -> Result<Vec<SparseVec>> {
    if v_next.len() != maps.num_states() {
        return Err(Error::Contract(format!(
            "value function covers {} states, feature maps expect {}",
            v_next.len(),
            maps.num_states()
        )));
    }
    for &v in v_next {
        if !v.is_finite() || v < -1e-9 || v > cap + 1e-9 {
            return Err(Error::Contract(format!(
                "next-step value {v} escapes [0, {cap}]"
            )));
        }
    }
    let integrator = ExactIntegrator;
    let mut out = Vec::with_capacity(maps.num_states() * maps.num_actions());
    for x in 0..maps.num_states() {
        for a in 0..maps.num_actions() {
            out.push(integrator.integrate(maps, x, a, v_next));
        }
    }
    Ok(out)
}

/// One archived regression sample: the features and targets exactly as they
/// were at the episode that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchivedStep {
    varphi: SparseVec,
    feedback: [f64; 2],
    integrated: [SparseVec; 2],
    targets: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChannelBlock {
    gram: Cholesky,
    rhs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepBlock {
    value_gram: Cholesky,
    value_rhs: [Vec<f64>; 2],
    kernel: [ChannelBlock; 2],
}

/// Per-step regression state for one run: Cholesky factors of the ridge
/// Grams, their right-hand sides, and the sample archive that reproduces
/// them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstdState {
    ridge: f64,
    bonus_scale: f64,
    steps: Vec<StepBlock>,
    archive: Vec<Vec<ArchivedStep>>,
    episodes_absorbed: usize,
}

impl LstdState {
    pub fn new(maps: &FeatureMaps, horizon: usize, ridge: f64, bonus_scale: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Structural("horizon must be positive".into()));
        }
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(Error::Config(format!("ridge must be positive, got {ridge}")));
        }
        if bonus_scale < 0.0 || !bonus_scale.is_finite() {
            return Err(Error::Config(format!(
                "bonus scale must be nonnegative, got {bonus_scale}"
            )));
        }
        let block = StepBlock {
            value_gram: Cholesky::scaled_identity(maps.value_dim(), ridge)?,
            value_rhs: [vec![0.0; maps.value_dim()], vec![0.0; maps.value_dim()]],
            kernel: [
                ChannelBlock {
                    gram: Cholesky::scaled_identity(maps.kernel_dim(), ridge)?,
                    rhs: vec![0.0; maps.kernel_dim()],
                },
                ChannelBlock {
                    gram: Cholesky::scaled_identity(maps.kernel_dim(), ridge)?,
                    rhs: vec![0.0; maps.kernel_dim()],
                },
            ],
        };
        Ok(LstdState {
            ridge,
            bonus_scale,
            steps: vec![block; horizon],
            archive: vec![Vec::new(); horizon],
            episodes_absorbed: 0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn episodes_absorbed(&self) -> usize {
        self.episodes_absorbed
    }

    pub fn bonus_scale(&self) -> f64 {
        self.bonus_scale
    }

    /// `beta * sqrt(varphi' inv(Lambda_h) varphi)`.
    fn value_bonus(&self, h: usize, varphi: &SparseVec) -> f64 {
        self.bonus_scale * self.steps[h].value_gram.quad_form_inv(varphi).max(0.0).sqrt()
    }

    /// `beta * sqrt(phi' inv(Lambda_{channel,h}) phi)`.
    fn kernel_bonus(&self, h: usize, channel: Channel, phi: &SparseVec) -> f64 {
        self.bonus_scale
            * self.steps[h].kernel[channel.idx()]
                .gram
                .quad_form_inv(phi)
                .max(0.0)
                .sqrt()
    }

    /// Pre-update quadratic form of a value feature, the per-episode term of
    /// the exploration budget.
    pub fn value_quad_form(&self, h: usize, varphi: &SparseVec) -> f64 {
        self.steps[h].value_gram.quad_form_inv(varphi)
    }

    fn factors_healthy(&self, h: usize) -> bool {
        let block = &self.steps[h];
        let ok = |c: &Cholesky| c.is_finite() && c.min_diag() > 0.0;
        ok(&block.value_gram) && block.kernel.iter().all(|k| ok(&k.gram))
    }

    /// Dense ridge Gram accumulated from archived features.
    fn scratch_gram<'a>(
        dim: usize,
        ridge: f64,
        feats: impl Iterator<Item = &'a SparseVec>,
    ) -> Vec<f64> {
        let mut gram = vec![0.0; dim * dim];
        for i in 0..dim {
            gram[i * dim + i] = ridge;
        }
        for f in feats {
            for &(i, vi) in f.entries() {
                for &(j, vj) in f.entries() {
                    gram[i * dim + j] += vi * vj;
                }
            }
        }
        gram
    }

    /// Refactorizes every Gram at step `h` from the archive.
    fn rebuild_factors(&mut self, h: usize) -> Result<()> {
        let d2 = self.steps[h].value_gram.dim();
        let d1 = self.steps[h].kernel[0].gram.dim();
        let value = Self::scratch_gram(d2, self.ridge, self.archive[h].iter().map(|s| &s.varphi));
        self.steps[h].value_gram = Cholesky::from_gram(d2, &value)?;
        for ci in 0..2 {
            let kernel = Self::scratch_gram(
                d1,
                self.ridge,
                self.archive[h].iter().map(|s| &s.integrated[ci]),
            );
            self.steps[h].kernel[ci].gram = Cholesky::from_gram(d1, &kernel)?;
        }
        Ok(())
    }

    /// Folds one step's sample into the Grams, right-hand sides, and
    /// archive. A factor that loses positivity is rebuilt from the archive
    /// once before giving up.
    fn absorb_step(&mut self, h: usize, step: ArchivedStep) -> Result<()> {
        self.archive[h].push(step);
        let step = self.archive[h].last().expect("just pushed");
        let varphi = step.varphi.clone();
        let feedback = step.feedback;
        let integrated = step.integrated.clone();
        let targets = step.targets;

        let block = &mut self.steps[h];
        block.value_gram.rank_one_update(&varphi);
        for ci in 0..2 {
            varphi.add_scaled_into(feedback[ci], &mut block.value_rhs[ci]);
            block.kernel[ci].gram.rank_one_update(&integrated[ci]);
            integrated[ci].add_scaled_into(targets[ci], &mut block.kernel[ci].rhs);
        }
        if !self.factors_healthy(h) {
            self.rebuild_factors(h)?;
            if !self.factors_healthy(h) {
                return Err(Error::Numeric(format!(
                    "Gram factor at step {h} lost positive definiteness and could not be rebuilt"
                )));
            }
        }
        Ok(())
    }

    /// Compares every incremental factor with a from-scratch factorization
    /// of the archived Gram.
    pub fn audit(&self) -> Result<()> {
        for h in 0..self.steps.len() {
            let block = &self.steps[h];
            let samples = &self.archive[h];
            let checks = [
                (
                    &block.value_gram,
                    Self::scratch_gram(
                        block.value_gram.dim(),
                        self.ridge,
                        samples.iter().map(|s| &s.varphi),
                    ),
                    "value",
                ),
                (
                    &block.kernel[0].gram,
                    Self::scratch_gram(
                        block.kernel[0].gram.dim(),
                        self.ridge,
                        samples.iter().map(|s| &s.integrated[0]),
                    ),
                    "reward kernel",
                ),
                (
                    &block.kernel[1].gram,
                    Self::scratch_gram(
                        block.kernel[1].gram.dim(),
                        self.ridge,
                        samples.iter().map(|s| &s.integrated[1]),
                    ),
                    "utility kernel",
                ),
            ];
            for (factor, gram, label) in checks {
                let scale = 1.0 + gram.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                let diff = max_abs_diff(&factor.reconstruct(), &gram);
                if diff > GRAM_AUDIT_TOL * scale {
                    return Err(Error::Numeric(format!(
                        "{label} Gram at step {h} drifted from its archive by {diff:.3e}"
                    )));
                }
                let fresh = Cholesky::from_gram(factor.dim(), &gram)?;
                let fscale = 1.0 + fresh.lower().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                let fdiff = max_abs_diff(factor.lower(), fresh.lower());
                if fdiff > FACTOR_AUDIT_TOL * fscale {
                    return Err(Error::Numeric(format!(
                        "{label} factor at step {h} drifted from a fresh factorization by {fdiff:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Regression weights at step `h` for one channel: the kernel weights `w`
/// over integrated features and the feedback weights `u` over value
/// features, both from strictly earlier episodes. A non-finite solve
/// triggers one rebuild from the archive before failing.
pub fn ridge_solve(
    state: &mut LstdState,
    h: usize,
    channel: Channel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ci = channel.idx();
    for attempt in 0..2 {
        let block = &state.steps[h];
        let w = block.kernel[ci].gram.solve(&block.kernel[ci].rhs);
        let u = block.value_gram.solve(&block.value_rhs[ci]);
        if w.iter().all(|v| v.is_finite()) && u.iter().all(|v| v.is_finite()) {
            return Ok((w, u));
        }
        if attempt == 0 {
            state.rebuild_factors(h)?;
        }
    }
    Err(Error::Numeric(format!(
        "ridge solve at step {h} stayed non-finite after a rebuild"
    )))
}

/// Confidence widths at `(x, a)`: the value-Gram bonus and the kernel-Gram
/// bonus for the given integrated feature.
pub fn ucb_bonus(
    state: &LstdState,
    h: usize,
    channel: Channel,
    varphi: &SparseVec,
    integrated: &SparseVec,
) -> (f64, f64) {
    (
        state.value_bonus(h, varphi),
        state.kernel_bonus(h, channel, integrated),
    )
}

/// Optimistic evaluation of `policy` from all earlier episodes, then
/// absorption of `trajectory` for future calls.
///
/// The backward pass forms, per step and channel,
/// `Q = clamp(varphi . u + phi . w + value_bonus + kernel_bonus, 0, H - h)`
/// and `V(x) = <Q(x, .), policy(. | x)>`; integrated features use this
/// episode's own next-step values. Audits the factorization every
/// [`AUDIT_PERIOD`] episodes.
pub fn evaluate_lstd(
    state: &mut LstdState,
    maps: &FeatureMaps,
    policy: &PolicySlate,
    trajectory: &Trajectory,
) -> Result<(EvalEstimates, EvalDiagnostics)> {
    let horizon = state.horizon();
    let (s, a) = (maps.num_states(), maps.num_actions());
    if trajectory.steps.len() != horizon {
        return Err(Error::Structural(format!(
            "trajectory covers {} steps, state expects {horizon}",
            trajectory.steps.len()
        )));
    }
    if policy.horizon() != horizon || policy.num_states() != s || policy.num_actions() != a {
        return Err(Error::Structural("policy shape does not match feature maps".into()));
    }

    let mut q_tabs = [
        StateActionTable::zeros(horizon, s, a),
        StateActionTable::zeros(horizon, s, a),
    ];
    let mut v_tabs = [StateTable::zeros(horizon, s), StateTable::zeros(horizon, s)];
    let mut band_widths = vec![[0.0; 2]; horizon];
    let mut quad_forms = vec![0.0; horizon];
    let mut bonus_sum = 0.0;
    let mut pending: Vec<(usize, ArchivedStep)> = Vec::with_capacity(horizon);

    for h in (0..horizon).rev() {
        let cap = (horizon - h) as f64;
        let mut weights = Vec::with_capacity(2);
        for channel in Channel::BOTH {
            weights.push(ridge_solve(state, h, channel)?);
        }
        let mut integrated = Vec::with_capacity(2);
        for ci in 0..2 {
            integrated.push(integrate_value_feature(
                maps,
                v_tabs[ci].layer(h + 1),
                horizon as f64,
            )?);
        }

        for x in 0..s {
            let pi_row = policy.row(h, x);
            let mut v_acc = [0.0; 2];
            for act in 0..a {
                let varphi = maps.varphi(x, act);
                let g_value = state.value_bonus(h, varphi);
                for ci in 0..2 {
                    let channel = Channel::BOTH[ci];
                    let phi = &integrated[ci][x * a + act];
                    let g_kernel = state.kernel_bonus(h, channel, phi);
                    let (w, u) = &weights[ci];
                    let raw = varphi.dot_dense(u) + phi.dot_dense(w) + g_value + g_kernel;
                    if !raw.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite estimate at step {h}, state {x}, action {act}"
                        )));
                    }
                    let q = raw.clamp(0.0, cap);
                    q_tabs[ci].set(h, x, act, q);
                    v_acc[ci] += q * pi_row[act];
                }
            }
            for ci in 0..2 {
                v_tabs[ci].set(h, x, v_acc[ci]);
            }
        }

        // Diagnostics and the future regression sample at the visited pair.
        let step = &trajectory.steps[h];
        let varphi_vis = maps.varphi(step.state, step.action).clone();
        quad_forms[h] = state.value_quad_form(h, &varphi_vis);
        let g_value = state.value_bonus(h, &varphi_vis);
        let next = trajectory.state_at(h + 1);
        let mut integrated_vis: [SparseVec; 2] =
            [SparseVec::zeros(maps.kernel_dim()), SparseVec::zeros(maps.kernel_dim())];
        let mut targets = [0.0; 2];
        for ci in 0..2 {
            let channel = Channel::BOTH[ci];
            let phi = integrated[ci][step.state * a + step.action].clone();
            let g_kernel = state.kernel_bonus(h, channel, &phi);
            band_widths[h][ci] = 2.0 * (g_value + g_kernel);
            bonus_sum += g_value + g_kernel;
            targets[ci] = v_tabs[ci].get(h + 1, next);
            integrated_vis[ci] = phi;
        }
        pending.push((
            h,
            ArchivedStep {
                varphi: varphi_vis,
                feedback: [step.reward, step.utility],
                integrated: integrated_vis,
                targets,
            },
        ));
    }

    for (h, step) in pending {
        state.absorb_step(h, step)?;
    }
    state.episodes_absorbed += 1;
    if state.episodes_absorbed.is_multiple_of(AUDIT_PERIOD) {
        state.audit()?;
    }

    let [q_reward, q_utility] = q_tabs;
    let [v_reward, v_utility] = v_tabs;
    Ok((
        EvalEstimates {
            values: ValueFunctions {
                q_reward,
                q_utility,
                v_reward,
                v_utility,
            },
            backend: BackendKind::Lstd,
        },
        EvalDiagnostics {
            value_quad_forms: quad_forms,
            band_widths,
            bonus_sum,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::run_episode;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_maps() -> FeatureMaps {
        FeatureMaps::canonical(2, 2)
    }

    fn random_sparse(rng: &mut StdRng, dim: usize, scale: f64) -> SparseVec {
        let dense: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..scale)).collect();
        SparseVec::from_dense(&dense)
    }

    #[test]
    fn canonical_maps_have_indicator_shape() {
        let maps = toy_maps();
        assert_eq!(maps.value_dim(), 4);
        assert_eq!(maps.kernel_dim(), 8);
        assert_eq!(maps.varphi(1, 0).entries(), &[(2, 1.0)]);
        assert_eq!(maps.psi(1, 0, 1).entries(), &[(5, 1.0)]);
    }

    #[test]
    fn oversized_value_features_are_rejected() {
        let varphi = vec![SparseVec::new(1, vec![(0, 1.5)]); 4];
        let psi = vec![SparseVec::unit(8, 0); 8];
        assert!(matches!(
            FeatureMaps::new(2, 2, varphi, psi),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn integration_is_the_exact_kernel_sum() {
        let maps = toy_maps();
        // Zero value function integrates to nothing.
        let zeros = integrate_value_feature(&maps, &[0.0, 0.0], 2.0).unwrap();
        assert!(zeros.iter().all(|v| v.nnz() == 0));

        // Indicator psi scatters v over the (x, a, x') block.
        let phis = integrate_value_feature(&maps, &[0.3, 0.9], 2.0).unwrap();
        let phi = &phis[2];
        assert_eq!(phi.entries(), &[(4, 0.3), (5, 0.9)]);

        assert!(matches!(
            integrate_value_feature(&maps, &[0.3, 5.0], 2.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn integration_commutes_with_linear_kernels() {
        // For any theta, <phi(x,a), theta> = sum_x' <psi(x,a,x'), theta> v(x').
        let mut rng = StdRng::seed_from_u64(7);
        let (s, a, d1) = (3, 2, 5);
        let varphi = (0..s * a).map(|i| SparseVec::unit(s * a, i)).collect();
        let psi = (0..s * a * s).map(|_| random_sparse(&mut rng, d1, 1.0)).collect();
        let maps = FeatureMaps::new(s, a, varphi, psi).unwrap();
        let v: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..2.0)).collect();
        let theta: Vec<f64> = (0..d1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phis = integrate_value_feature(&maps, &v, 2.0).unwrap();
        for x in 0..s {
            for act in 0..a {
                let direct: f64 = (0..s)
                    .map(|next| maps.psi(x, act, next).dot_dense(&theta) * v[next])
                    .sum();
                let lifted = phis[x * a + act].dot_dense(&theta);
                assert_abs_diff_eq!(direct, lifted, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn empty_archive_solves_to_zero_weights() {
        let maps = toy_maps();
        let mut state = LstdState::new(&maps, 2, 1.0, 1.0).unwrap();
        let (w, u) = ridge_solve(&mut state, 0, Channel::Reward).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_sample_halves_the_target() {
        // (I + e1 e1')^{-1} e1 = e1 / 2 for both regressions.
        let maps = toy_maps();
        let mut state = LstdState::new(&maps, 1, 1.0, 1.0).unwrap();
        state
            .absorb_step(
                0,
                ArchivedStep {
                    varphi: SparseVec::unit(4, 0),
                    feedback: [1.0, 0.0],
                    integrated: [SparseVec::unit(8, 0), SparseVec::zeros(8)],
                    targets: [1.0, 0.0],
                },
            )
            .unwrap();
        let (w, u) = ridge_solve(&mut state, 0, Channel::Reward).unwrap();
        assert_abs_diff_eq!(u[0], 0.5, epsilon = 1e-12);
        assert!(u[1..].iter().all(|&v| v == 0.0));
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-12);
        assert!(w[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ridge_solve_matches_dense_normal_equations() {
        let mut rng = StdRng::seed_from_u64(42);
        let d = 4;
        let varphi = (0..d).map(|i| SparseVec::unit(d, i)).collect();
        let psi = (0..8).map(|i| SparseVec::unit(16, i)).collect();
        let maps = FeatureMaps::new(2, 2, varphi, psi).unwrap();
        let mut state = LstdState::new(&maps, 1, 1.0, 1.0).unwrap();

        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for i in 0..d {
            gram[i * d + i] = 1.0;
        }
        for _ in 0..50 {
            let dense: Vec<f64> = (0..d).map(|_| rng.random_range(-0.4..0.4)).collect();
            let target: f64 = rng.random_range(0.0..1.0);
            let feat = SparseVec::from_dense(&dense);
            for i in 0..d {
                for j in 0..d {
                    gram[i * d + j] += dense[i] * dense[j];
                }
                rhs[i] += dense[i] * target;
            }
            state
                .absorb_step(
                    0,
                    ArchivedStep {
                        varphi: feat,
                        feedback: [target, target],
                        integrated: [SparseVec::zeros(16), SparseVec::zeros(16)],
                        targets: [0.0, 0.0],
                    },
                )
                .unwrap();
        }
        let (_, u) = ridge_solve(&mut state, 0, Channel::Reward).unwrap();

        // Gauss-Jordan on the dense normal equations, independent of the
        // Cholesky path.
        let mut aug = vec![0.0; d * (d + 1)];
        for i in 0..d {
            for j in 0..d {
                aug[i * (d + 1) + j] = gram[i * d + j];
            }
            aug[i * (d + 1) + d] = rhs[i];
        }
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&r1, &r2| {
                    aug[r1 * (d + 1) + col]
                        .abs()
                        .total_cmp(&aug[r2 * (d + 1) + col].abs())
                })
                .unwrap();
            for j in 0..=d {
                aug.swap(col * (d + 1) + j, pivot * (d + 1) + j);
            }
            let p = aug[col * (d + 1) + col];
            for j in 0..=d {
                aug[col * (d + 1) + j] /= p;
            }
            for row in 0..d {
                if row != col {
                    let f = aug[row * (d + 1) + col];
                    for j in 0..=d {
                        aug[row * (d + 1) + j] -= f * aug[col * (d + 1) + j];
                    }
                }
            }
        }
        for i in 0..d {
            assert_abs_diff_eq!(u[i], aug[i * (d + 1) + d], epsilon = 1e-9);
        }
    }

    #[test]
    fn bonuses_follow_the_inverse_gram() {
        let maps = toy_maps();
        let mut state = LstdState::new(&maps, 1, 1.0, 2.0).unwrap();
        let e1v = SparseVec::unit(4, 0);
        let e1k = SparseVec::unit(8, 0);
        // Identity Gram: bonus equals the scale.
        let (gv, gk) = ucb_bonus(&state, 0, Channel::Reward, &e1v, &e1k);
        assert_abs_diff_eq!(gv, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gk, 2.0, epsilon = 1e-12);

        // Zero scale silences both.
        let greedy = LstdState::new(&maps, 1, 1.0, 0.0).unwrap();
        let (gv, gk) = ucb_bonus(&greedy, 0, Channel::Reward, &e1v, &e1k);
        assert_eq!((gv, gk), (0.0, 0.0));

        // After n repeats of a unit feature the bonus is beta / sqrt(n + 1).
        for _ in 0..100 {
            state
                .absorb_step(
                    0,
                    ArchivedStep {
                        varphi: e1v.clone(),
                        feedback: [0.5, 0.5],
                        integrated: [e1k.clone(), e1k.clone()],
                        targets: [0.0, 0.0],
                    },
                )
                .unwrap();
        }
        let (gv, gk) = ucb_bonus(&state, 0, Channel::Reward, &e1v, &e1k);
        assert_abs_diff_eq!(gv, 2.0 / 101f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(gk, 2.0 / 101f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn quad_forms_shrink_as_data_accumulates() {
        let maps = toy_maps();
        let mut state = LstdState::new(&maps, 1, 1.0, 1.0).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let probe = SparseVec::from_dense(&[0.4, -0.2, 0.6, 0.1]);
        let mut last = state.value_quad_form(0, &probe);
        for _ in 0..40 {
            let feat = random_sparse(&mut rng, 4, 0.5);
            state
                .absorb_step(
                    0,
                    ArchivedStep {
                        varphi: feat,
                        feedback: [0.0, 0.0],
                        integrated: [SparseVec::zeros(8), SparseVec::zeros(8)],
                        targets: [0.0, 0.0],
                    },
                )
                .unwrap();
            let now = state.value_quad_form(0, &probe);
            assert!(now <= last + 1e-12, "quadratic form grew: {last} -> {now}");
            last = now;
        }
    }

    fn two_state_model() -> CmdpModel {
        let kernel = vec![
            vec![
                vec![vec![0.7, 0.3], vec![0.2, 0.8]],
                vec![vec![0.5, 0.5], vec![0.9, 0.1]],
            ];
            2
        ];
        let reward = vec![vec![vec![1.0, 0.0], vec![0.3, 0.6]]; 2];
        let utility = vec![vec![vec![0.0, 1.0], vec![0.5, 0.2]]; 2];
        CmdpModel::from_tables(2, 2, 2, 0, 0.4, &kernel, &reward, &utility).unwrap()
    }

    #[test]
    fn first_episode_estimates_are_pure_bonus() {
        let model = two_state_model();
        let maps = FeatureMaps::canonical(2, 2);
        let mut state = LstdState::new(&maps, 2, 1.0, 0.25).unwrap();
        let policy = PolicySlate::uniform(2, 2, 2);
        let traj = run_episode(&model, &policy, 9).unwrap();
        let (est, diag) = evaluate_lstd(&mut state, &maps, &policy, &traj).unwrap();

        // h = 1: V_2 = 0 so integrated features vanish; Q is the value bonus
        // alone (the kernel quad form of a zero vector is zero).
        for x in 0..2 {
            for a in 0..2 {
                assert_abs_diff_eq!(est.values.q_reward.get(1, x, a), 0.25, epsilon = 1e-12);
            }
        }
        // h = 0: V_1 = 0.25 everywhere, integrated feature norm is
        // sqrt(sum_x' 0.25^2 * 1) over the two-coordinate block.
        let phi_norm = (2.0 * 0.25f64 * 0.25).sqrt();
        let expect = 0.25 + 0.25 * phi_norm;
        for x in 0..2 {
            for a in 0..2 {
                assert_abs_diff_eq!(est.values.q_reward.get(0, x, a), expect, epsilon = 1e-12);
            }
        }
        assert_eq!(est.backend, BackendKind::Lstd);
        assert_eq!(diag.value_quad_forms.len(), 2);
        assert_abs_diff_eq!(diag.value_quad_forms[0], 1.0, epsilon = 1e-12);
        est.check_consistency(&policy).unwrap();
    }

    #[test]
    fn estimates_clamp_at_the_remaining_horizon() {
        let model = two_state_model();
        let maps = FeatureMaps::canonical(2, 2);
        // Huge bonus forces the truncation everywhere.
        let mut state = LstdState::new(&maps, 2, 1.0, 100.0).unwrap();
        let policy = PolicySlate::uniform(2, 2, 2);
        let traj = run_episode(&model, &policy, 1).unwrap();
        let (est, _) = evaluate_lstd(&mut state, &maps, &policy, &traj).unwrap();
        for x in 0..2 {
            for a in 0..2 {
                assert_eq!(est.values.q_reward.get(0, x, a), 2.0);
                assert_eq!(est.values.q_reward.get(1, x, a), 1.0);
                assert_eq!(est.values.q_utility.get(1, x, a), 1.0);
            }
        }
    }

    #[test]
    fn audit_accepts_a_long_incremental_run() {
        let model = two_state_model();
        let maps = FeatureMaps::canonical(2, 2);
        let mut state = LstdState::new(&maps, 2, 1.0, 0.5).unwrap();
        let policy = PolicySlate::uniform(2, 2, 2);
        // Crosses the periodic audit once and finishes with an explicit one.
        for k in 0..70 {
            let traj = run_episode(&model, &policy, k).unwrap();
            evaluate_lstd(&mut state, &maps, &policy, &traj).unwrap();
        }
        assert_eq!(state.episodes_absorbed(), 70);
        state.audit().unwrap();
    }
}
