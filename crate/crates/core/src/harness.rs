//! Experiment orchestration: per-run metric ledger, multi-seed execution,
//! CSV and JSON artifacts, aggregation, and the power-law slope fit used to
//! judge sublinearity.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmdp::{Channel, CmdpModel};
use crate::error::{Error, Result};
use crate::hindsight::{solve_hindsight, HindsightSolution};
use crate::lstd::FeatureMaps;
use crate::opdop::{
    default_schedule, run_opdop, tabular_schedule, BackendChoice, BackendKind, OpdopConfig,
};
use crate::svg::{self, Series};

/// Stable per-seed CSV schema.
pub const CSV_HEADER: &str = "k,v_r_true,v_g_true,v_r_est,v_g_est,dual,bonus_sum,regret_cum,violation_cum";

/// One dual ascent step as recorded during a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub episode: usize,
    pub value: f64,
    /// Ascent signal `utility_floor - previous utility estimate`.
    pub signal: f64,
}

/// Dimensions behind the exploration budget of a linear-backend run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticalParams {
    pub feature_dim: usize,
    pub ridge: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerMeta {
    pub backend: BackendKind,
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
    pub utility_floor: f64,
    pub dual_cap: f64,
    /// Constrained optimum the regret is scored against.
    pub hindsight_value: f64,
    /// Present only for the linear backend.
    pub elliptical: Option<EllipticalParams>,
}

/// One scored episode. Cumulative columns fold left to right over episodes;
/// the violation column carries the positive part of the running signed sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub episode: usize,
    pub v_r_true: f64,
    pub v_g_true: f64,
    pub v_r_est: f64,
    pub v_g_est: f64,
    pub dual: f64,
    pub bonus_sum: f64,
    pub regret_cum: f64,
    pub violation_cum: f64,
}

/// How often the model prediction error stayed inside its optimism band.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct OptimismCounter {
    pub within: u64,
    pub total: u64,
}

impl OptimismCounter {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.within as f64 / self.total as f64
        }
    }
}

/// Full record of one run: scored rows, the dual trace including the
/// bookkeeping episode, optimism counts, per-step exploration sums, and the
/// smallest action probability ever played.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretLedger {
    pub meta: LedgerMeta,
    pub rows: Vec<LedgerRow>,
    pub dual_trace: Vec<DualPoint>,
    pub optimism: [OptimismCounter; 2],
    /// Per step h: running sum of `min(1, quad form)` of visited value
    /// features; empty for the tabular backend.
    pub elliptical_sums: Vec<f64>,
    pub min_action_prob: f64,
    signed_violation: f64,
}

impl RegretLedger {
    pub fn new(meta: LedgerMeta) -> Self {
        let elliptical_sums = match meta.elliptical {
            Some(_) => vec![0.0; meta.horizon],
            None => Vec::new(),
        };
        RegretLedger {
            meta,
            rows: Vec::new(),
            dual_trace: Vec::new(),
            optimism: [OptimismCounter::default(); 2],
            elliptical_sums,
            min_action_prob: f64::INFINITY,
            signed_violation: 0.0,
        }
    }

    /// Appends one scored episode. Regret accumulates the gap to the
    /// hindsight optimum using true values; the violation column is the
    /// positive part of the accumulated signed floor deficit.
    #[allow(clippy::too_many_arguments)]
    pub fn push_row(
        &mut self,
        episode: usize,
        v_r_true: f64,
        v_g_true: f64,
        v_r_est: f64,
        v_g_est: f64,
        dual: f64,
        bonus_sum: f64,
    ) -> Result<()> {
        if episode != self.rows.len() + 1 {
            return Err(Error::Contract(format!(
                "episode {episode} pushed after {} rows",
                self.rows.len()
            )));
        }
        let vals = [v_r_true, v_g_true, v_r_est, v_g_est, dual, bonus_sum];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite ledger entry at episode {episode}: {vals:?}"
            )));
        }
        let regret_prev = self.rows.last().map_or(0.0, |r| r.regret_cum);
        let regret_cum = regret_prev + (self.meta.hindsight_value - v_r_true);
        self.signed_violation += self.meta.utility_floor - v_g_true;
        self.rows.push(LedgerRow {
            episode,
            v_r_true,
            v_g_true,
            v_r_est,
            v_g_est,
            dual,
            bonus_sum,
            regret_cum,
            violation_cum: self.signed_violation.max(0.0),
        });
        Ok(())
    }

    pub fn set_dual_trace(&mut self, trace: Vec<DualPoint>) {
        self.dual_trace = trace;
    }

    pub fn count_optimism(&mut self, channel: Channel, within: bool) {
        let counter = &mut self.optimism[channel.idx()];
        counter.total += 1;
        if within {
            counter.within += 1;
        }
    }

    /// Adds this episode's `min(1, quad form)` terms, one per step.
    pub fn add_elliptical_terms(&mut self, quad_forms: &[f64]) -> Result<()> {
        if self.meta.elliptical.is_none() {
            return Err(Error::Contract(
                "exploration terms pushed on a run without a feature dimension".into(),
            ));
        }
        if quad_forms.len() != self.elliptical_sums.len() {
            return Err(Error::Contract(format!(
                "expected {} per-step terms, got {}",
                self.elliptical_sums.len(),
                quad_forms.len()
            )));
        }
        for (sum, &q) in self.elliptical_sums.iter_mut().zip(quad_forms) {
            if !q.is_finite() || q < -1e-12 {
                return Err(Error::Numeric(format!(
                    "invalid exploration term {q}"
                )));
            }
            *sum += q.clamp(0.0, 1.0);
        }
        Ok(())
    }

    pub fn observe_action_prob(&mut self, p: f64) {
        self.min_action_prob = self.min_action_prob.min(p);
    }

    /// Closed-form cap on each per-step exploration sum:
    /// `2 d log((d K + ridge) / ridge)` for `K` scored episodes.
    pub fn elliptical_bound(&self) -> Option<f64> {
        self.meta.elliptical.map(|p| {
            let d = p.feature_dim as f64;
            let k = self.rows.len() as f64;
            2.0 * d * ((d * k + p.ridge) / p.ridge).ln()
        })
    }

    pub fn regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.regret_cum)
    }

    pub fn violation(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.violation_cum)
    }

    pub fn optimism_rates(&self) -> [f64; 2] {
        [self.optimism[0].rate(), self.optimism[1].rate()]
    }

    /// Recomputes every cumulative column and checks all recorded bounds:
    /// row ordering, dual projection range, exploration budget, and strict
    /// policy positivity.
    pub fn verify(&self) -> Result<()> {
        let mut regret = 0.0;
        let mut signed = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            if row.episode != i + 1 {
                return Err(Error::Contract(format!(
                    "row {i} carries episode {}",
                    row.episode
                )));
            }
            regret += self.meta.hindsight_value - row.v_r_true;
            signed += self.meta.utility_floor - row.v_g_true;
            if (row.regret_cum - regret).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "cumulative regret at episode {} is {}, recomputed {regret}",
                    row.episode, row.regret_cum
                )));
            }
            if (row.violation_cum - signed.max(0.0)).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "cumulative violation at episode {} is {}, recomputed {}",
                    row.episode,
                    row.violation_cum,
                    signed.max(0.0)
                )));
            }
        }
        for point in &self.dual_trace {
            if !point.value.is_finite()
                || point.value < -1e-12
                || point.value > self.meta.dual_cap + 1e-12
            {
                return Err(Error::Numeric(format!(
                    "dual value {} at episode {} escapes [0, {}]",
                    point.value, point.episode, self.meta.dual_cap
                )));
            }
        }
        if let Some(bound) = self.elliptical_bound() {
            for (h, &sum) in self.elliptical_sums.iter().enumerate() {
                if sum > bound + 1e-9 {
                    return Err(Error::Numeric(format!(
                        "exploration sum {sum} at step {h} exceeds its budget {bound}"
                    )));
                }
            }
        }
        if !self.rows.is_empty() && !(self.min_action_prob > 0.0) {
            return Err(Error::Numeric(format!(
                "policy positivity failed: smallest action probability {}",
                self.min_action_prob
            )));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.episode,
                r.v_r_true,
                r.v_g_true,
                r.v_r_est,
                r.v_g_est,
                r.dual,
                r.bonus_sum,
                r.regret_cum,
                r.violation_cum
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Least-squares slope of `log(mean cumulative regret)` against `log k`
/// over the final nine tenths of the horizon, seed-averaged first.
/// Nonpositive means are floored at 1e-12 before the log.
pub fn fit_regret_slope(curves: &[Vec<f64>]) -> Result<f64> {
    let k_max = curves.first().map_or(0, Vec::len);
    if curves.is_empty() || k_max < 100 {
        return Err(Error::Contract(
            "slope fit needs at least one curve with 100 episodes".into(),
        ));
    }
    if curves.iter().any(|c| c.len() != k_max) {
        return Err(Error::Contract("curves differ in length".into()));
    }
    let lo = (k_max / 10).max(1);
    let mut xs = Vec::with_capacity(k_max - lo + 1);
    let mut ys = Vec::with_capacity(k_max - lo + 1);
    for k in lo..=k_max {
        let mean: f64 =
            curves.iter().map(|c| c[k - 1]).sum::<f64>() / curves.len() as f64;
        xs.push((k as f64).ln());
        ys.push(mean.max(1e-12).ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::Numeric("degenerate episode window for slope fit".into()));
    }
    Ok(sxy / sxx)
}

/// Seed-averaged curves and endpoint statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateStats {
    pub episodes: usize,
    pub seeds: usize,
    pub mean_regret: Vec<f64>,
    pub stderr_regret: Vec<f64>,
    pub mean_violation: Vec<f64>,
    pub stderr_violation: Vec<f64>,
    pub mean_dual: Vec<f64>,
    /// Mean cumulative regret divided by k.
    pub mean_regret_rate: Vec<f64>,
    pub final_regret: f64,
    pub final_violation: f64,
    /// Power-law slope of the mean regret curve; absent below 100 episodes.
    pub regret_slope: Option<f64>,
    /// Pooled in-band fraction per channel.
    pub optimism_rate: [f64; 2],
}

pub fn aggregate(ledgers: &[RegretLedger]) -> Result<AggregateStats> {
    let Some(first) = ledgers.first() else {
        return Err(Error::Contract("no ledgers to aggregate".into()));
    };
    let episodes = first.rows.len();
    if ledgers.iter().any(|l| l.rows.len() != episodes) {
        return Err(Error::Contract("ledgers cover different episode counts".into()));
    }
    let n = ledgers.len() as f64;
    let mut mean_regret = vec![0.0; episodes];
    let mut stderr_regret = vec![0.0; episodes];
    let mut mean_violation = vec![0.0; episodes];
    let mut stderr_violation = vec![0.0; episodes];
    let mut mean_dual = vec![0.0; episodes];
    for k in 0..episodes {
        let rs: Vec<f64> = ledgers.iter().map(|l| l.rows[k].regret_cum).collect();
        let vs: Vec<f64> = ledgers.iter().map(|l| l.rows[k].violation_cum).collect();
        mean_regret[k] = rs.iter().sum::<f64>() / n;
        mean_violation[k] = vs.iter().sum::<f64>() / n;
        mean_dual[k] = ledgers.iter().map(|l| l.rows[k].dual).sum::<f64>() / n;
        if ledgers.len() > 1 {
            let var_r = rs.iter().map(|r| (r - mean_regret[k]).powi(2)).sum::<f64>() / (n - 1.0);
            let var_v =
                vs.iter().map(|v| (v - mean_violation[k]).powi(2)).sum::<f64>() / (n - 1.0);
            stderr_regret[k] = (var_r / n).sqrt();
            stderr_violation[k] = (var_v / n).sqrt();
        }
    }
    let mean_regret_rate = mean_regret
        .iter()
        .enumerate()
        .map(|(k, &r)| r / (k + 1) as f64)
        .collect();
    let regret_slope = if episodes >= 100 {
        let curves: Vec<Vec<f64>> = ledgers
            .iter()
            .map(|l| l.rows.iter().map(|r| r.regret_cum).collect())
            .collect();
        Some(fit_regret_slope(&curves)?)
    } else {
        None
    };
    let mut pooled = [OptimismCounter::default(); 2];
    for l in ledgers {
        for ci in 0..2 {
            pooled[ci].within += l.optimism[ci].within;
            pooled[ci].total += l.optimism[ci].total;
        }
    }
    Ok(AggregateStats {
        episodes,
        seeds: ledgers.len(),
        final_regret: mean_regret.last().copied().unwrap_or(0.0),
        final_violation: mean_violation.last().copied().unwrap_or(0.0),
        mean_regret,
        stderr_regret,
        mean_violation,
        stderr_violation,
        mean_dual,
        mean_regret_rate,
        regret_slope,
        optimism_rate: [pooled[0].rate(), pooled[1].rate()],
    })
}

fn default_c1() -> f64 {
    1.0
}

fn default_failure_prob() -> f64 {
    0.1
}

/// One experiment request; the config file mirrors the run flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: PathBuf,
    pub backend: BackendKind,
    pub episodes: usize,
    pub seeds: usize,
    /// Replaces the model's utility floor when set.
    #[serde(default)]
    pub utility_floor: Option<f64>,
    /// Bonus-multiplier constant of the schedule.
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_failure_prob")]
    pub failure_prob: f64,
}

/// Everything needed to reproduce and inspect one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: RunSpec,
    pub model_sha256: String,
    pub schedule: OpdopConfig,
    pub seeds: Vec<u64>,
    pub hindsight: HindsightSolution,
    pub ledger_files: Vec<String>,
    pub csv_files: Vec<String>,
    pub aggregate_file: Option<String>,
    pub plot_files: Vec<String>,
    pub wall_clock_seconds: f64,
    pub per_seed_seconds: Vec<f64>,
    pub completed: bool,
    pub failure: Option<String>,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Schedule derived from the run spec: published step sizes, the backend's
/// bonus form, and the LP's Slater margin for the dual cap.
pub fn schedule_for(spec: &RunSpec, model: &CmdpModel, slater_gap: f64) -> Result<OpdopConfig> {
    let (s, a, h) = (model.num_states(), model.num_actions(), model.horizon());
    match spec.backend {
        BackendKind::Lstd => {
            // Canonical embedding: the bonus dimension is the larger of the
            // kernel and value feature dimensions.
            let d = (s * s * a).max(s * a);
            default_schedule(a, h, spec.episodes, d, spec.failure_prob, slater_gap, spec.c1)
        }
        BackendKind::Tabular => {
            tabular_schedule(s, a, h, spec.episodes, spec.failure_prob, slater_gap, spec.c1)
        }
    }
}

/// Runs the experiment: solves hindsight once, executes every seed
/// (concurrently where the host allows), writes per-seed artifacts, the
/// aggregate, plots, and the manifest. Any seed failure still writes the
/// manifest, flagged incomplete, before the error propagates.
pub fn run_experiment(spec: &RunSpec, out_dir: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let mut model = CmdpModel::load(&spec.model)?;
    if let Some(floor) = spec.utility_floor {
        model = model.with_utility_floor(floor)?;
    }
    let model_sha256 = file_sha256(&spec.model)?;
    let hindsight = solve_hindsight(&model)?;
    let schedule = if spec.episodes == 0 {
        // Vacuous run: keep a placeholder schedule in the manifest.
        OpdopConfig {
            step_size: 1.0,
            bonus_scale: 0.0,
            dual_step: 1.0,
            mixing: 1.0,
            ridge: 1.0,
            dual_cap: hindsight.dual_cap.clamp(1.0, 1e12),
            episodes: 0,
            failure_prob: spec.failure_prob,
        }
    } else {
        schedule_for(spec, &model, hindsight.slater_gap)?
    };
    let seeds: Vec<u64> = (0..spec.seeds as u64).collect();
    let maps = match spec.backend {
        BackendKind::Lstd => Some(FeatureMaps::canonical(
            model.num_states(),
            model.num_actions(),
        )),
        BackendKind::Tabular => None,
    };

    let mut results: Vec<(Result<RegretLedger>, f64)> = Vec::new();
    if spec.episodes == 0 {
        for &seed in &seeds {
            let meta = LedgerMeta {
                backend: spec.backend,
                seed,
                episodes: 0,
                horizon: model.horizon(),
                utility_floor: model.utility_floor(),
                dual_cap: schedule.dual_cap,
                hindsight_value: hindsight.optimal_value,
                elliptical: None,
            };
            results.push((Ok(RegretLedger::new(meta)), 0.0));
        }
    } else {
        results = seeds
            .par_iter()
            .map(|&seed| {
                let t = Instant::now();
                let backend = match &maps {
                    Some(m) => BackendChoice::Lstd(m),
                    None => BackendChoice::Tabular,
                };
                let out = run_opdop(&model, &hindsight, &schedule, backend, seed);
                (out, t.elapsed().as_secs_f64())
            })
            .collect();
    }

    let mut ledger_files = Vec::new();
    let mut csv_files = Vec::new();
    let mut per_seed_seconds = Vec::new();
    let mut failure: Option<String> = None;
    let mut ledgers = Vec::new();
    for (result, secs) in results {
        per_seed_seconds.push(secs);
        match result {
            Ok(ledger) => {
                let stem = format!("seed_{:04}", ledger.meta.seed);
                let csv_path = out_dir.join(format!("{stem}.csv"));
                ledger.write_csv(&csv_path)?;
                let json_path = out_dir.join(format!("{stem}.ledger.json"));
                fs::write(&json_path, serde_json::to_vec_pretty(&ledger)?)?;
                csv_files.push(format!("{stem}.csv"));
                ledger_files.push(format!("{stem}.ledger.json"));
                ledgers.push(ledger);
            }
            Err(e) => {
                failure.get_or_insert(e.to_string());
            }
        }
    }

    let mut aggregate_file = None;
    let mut plot_files = Vec::new();
    if failure.is_none() && !ledgers.is_empty() && spec.episodes > 0 {
        let stats = aggregate(&ledgers)?;
        fs::write(
            out_dir.join("aggregate.json"),
            serde_json::to_vec_pretty(&stats)?,
        )?;
        aggregate_file = Some("aggregate.json".into());
        plot_files = write_plots(&stats, out_dir)?;
    }

    let manifest = RunManifest {
        spec: spec.clone(),
        model_sha256,
        schedule,
        seeds,
        hindsight,
        ledger_files,
        csv_files,
        aggregate_file,
        plot_files,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        per_seed_seconds,
        completed: failure.is_none(),
        failure: failure.clone(),
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    if let Some(msg) = failure {
        return Err(Error::Numeric(format!("seed failure: {msg}")));
    }
    Ok(manifest)
}

fn curve(values: &[f64]) -> Vec<(f64, f64)> {
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| ((k + 1) as f64, v))
        .collect()
}

fn band(mean: &[f64], err: &[f64], sign: f64) -> Vec<(f64, f64)> {
    mean.iter()
        .zip(err)
        .enumerate()
        .map(|(k, (&m, &e))| ((k + 1) as f64, m + sign * e))
        .collect()
}

fn write_plots(stats: &AggregateStats, out_dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let regret = vec![
        Series {
            name: "mean cumulative regret".into(),
            color: "#1f6fb2".into(),
            width: 1.8,
            points: curve(&stats.mean_regret),
        },
        Series {
            name: "+1 stderr".into(),
            color: "#9db8d2".into(),
            width: 0.8,
            points: band(&stats.mean_regret, &stats.stderr_regret, 1.0),
        },
        Series {
            name: "-1 stderr".into(),
            color: "#9db8d2".into(),
            width: 0.8,
            points: band(&stats.mean_regret, &stats.stderr_regret, -1.0),
        },
    ];
    svg::line_chart(
        "Cumulative regret",
        "episode k",
        "regret",
        &regret,
        &out_dir.join("regret_curve.svg"),
    )?;
    files.push("regret_curve.svg".into());

    let violation = vec![
        Series {
            name: "mean cumulative violation".into(),
            color: "#b2491f".into(),
            width: 1.8,
            points: curve(&stats.mean_violation),
        },
        Series {
            name: "+1 stderr".into(),
            color: "#d7a893".into(),
            width: 0.8,
            points: band(&stats.mean_violation, &stats.stderr_violation, 1.0),
        },
        Series {
            name: "-1 stderr".into(),
            color: "#d7a893".into(),
            width: 0.8,
            points: band(&stats.mean_violation, &stats.stderr_violation, -1.0),
        },
    ];
    svg::line_chart(
        "Cumulative constraint violation",
        "episode k",
        "violation",
        &violation,
        &out_dir.join("violation_curve.svg"),
    )?;
    files.push("violation_curve.svg".into());

    let rate = vec![
        Series {
            name: "regret / k".into(),
            color: "#2a7d4f".into(),
            width: 1.8,
            points: curve(&stats.mean_regret_rate),
        },
        Series {
            name: "dual".into(),
            color: "#7d2a6f".into(),
            width: 1.2,
            points: curve(&stats.mean_dual),
        },
    ];
    svg::line_chart(
        "Per-episode regret rate and dual variable",
        "episode k",
        "value",
        &rate,
        &out_dir.join("regret_rate.svg"),
    )?;
    files.push("regret_rate.svg".into());
    Ok(files)
}

/// Re-aggregates a finished run directory from its ledger files and
/// rewrites the aggregate and plots.
pub fn report(dir: &Path) -> Result<AggregateStats> {
    let manifest_bytes = fs::read(dir.join("manifest.json"))?;
    let manifest: RunManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.ledger_files.is_empty() {
        return Err(Error::Contract("manifest lists no ledgers".into()));
    }
    let mut ledgers = Vec::with_capacity(manifest.ledger_files.len());
    for name in &manifest.ledger_files {
        let bytes = fs::read(dir.join(name))?;
        let ledger: RegretLedger = serde_json::from_slice(&bytes)?;
        ledger.verify()?;
        ledgers.push(ledger);
    }
    let stats = aggregate(&ledgers)?;
    fs::write(dir.join("aggregate.json"), serde_json::to_vec_pretty(&stats)?)?;
    write_plots(&stats, dir)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "seeds {}  episodes {}  final regret {:.6}  final violation {:.6}  slope {}",
        stats.seeds,
        stats.episodes,
        stats.final_regret,
        stats.final_violation,
        stats
            .regret_slope
            .map_or("n/a".into(), |s| format!("{s:.4}")),
    )?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn meta(episodes: usize) -> LedgerMeta {
        LedgerMeta {
            backend: BackendKind::Tabular,
            seed: 0,
            episodes,
            horizon: 2,
            utility_floor: 1.0,
            dual_cap: 4.0,
            hindsight_value: 1.5,
            elliptical: None,
        }
    }

    #[test]
    fn optimal_play_accumulates_nothing() {
        let mut ledger = RegretLedger::new(meta(3));
        for k in 1..=3 {
            ledger.push_row(k, 1.5, 1.2, 1.5, 1.2, 0.0, 0.0).unwrap();
        }
        assert_eq!(ledger.regret(), 0.0);
        assert_eq!(ledger.violation(), 0.0);
        ledger.verify().unwrap();
    }

    #[test]
    fn violation_clamps_the_running_sum() {
        // Overshooting the floor leaves no violation.
        let mut ledger = RegretLedger::new(meta(1));
        ledger.push_row(1, 1.0, 2.0, 1.0, 2.0, 0.0, 0.0).unwrap();
        assert_eq!(ledger.violation(), 0.0);

        // Signals -1 then +2 clamp to 1, not 2.
        let mut ledger = RegretLedger::new(meta(2));
        ledger.push_row(1, 1.0, 2.0, 1.0, 2.0, 0.0, 0.0).unwrap();
        ledger.push_row(2, 1.0, -1.0, 1.0, -1.0, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(ledger.violation(), 1.0, epsilon = 1e-12);
        // The intermediate row still shows the clamp at zero.
        assert_eq!(ledger.rows[0].violation_cum, 0.0);
    }

    #[test]
    fn rows_must_arrive_in_order() {
        let mut ledger = RegretLedger::new(meta(2));
        assert!(ledger.push_row(2, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).is_err());
        ledger.push_row(1, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(ledger
            .push_row(2, f64::NAN, 1.0, 1.0, 1.0, 0.0, 0.0)
            .is_err());
    }

    #[test]
    fn verify_rejects_tampered_cumulatives() {
        let mut ledger = RegretLedger::new(meta(2));
        ledger.push_row(1, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        ledger.push_row(2, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        ledger.verify().unwrap();
        ledger.rows[1].regret_cum += 0.5;
        assert!(ledger.verify().is_err());
    }

    #[test]
    fn dual_trace_outside_the_cap_fails_verification() {
        let mut ledger = RegretLedger::new(meta(1));
        ledger.push_row(1, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        ledger.set_dual_trace(vec![DualPoint {
            episode: 1,
            value: 5.0,
            signal: 0.0,
        }]);
        assert!(ledger.verify().is_err());
    }

    #[test]
    fn slope_fit_recovers_power_laws() {
        let sqrt_curve: Vec<f64> = (1..=1000).map(|k| (k as f64).sqrt()).collect();
        let slope = fit_regret_slope(&[sqrt_curve]).unwrap();
        assert!((slope - 0.5).abs() < 0.01, "slope {slope}");

        let linear_curve: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        let slope = fit_regret_slope(&[linear_curve]).unwrap();
        assert!((slope - 1.0).abs() < 0.01, "slope {slope}");

        assert!(fit_regret_slope(&[vec![1.0; 50]]).is_err());
    }

    #[test]
    fn aggregation_averages_and_pools() {
        let mut a = RegretLedger::new(meta(2));
        a.push_row(1, 1.0, 1.0, 1.0, 1.0, 0.5, 0.0).unwrap();
        a.push_row(2, 1.0, 1.0, 1.0, 1.0, 0.5, 0.0).unwrap();
        a.count_optimism(Channel::Reward, true);
        let mut b = RegretLedger::new(meta(2));
        b.push_row(1, 1.5, 0.0, 1.5, 0.0, 1.5, 0.0).unwrap();
        b.push_row(2, 1.5, 0.0, 1.5, 0.0, 1.5, 0.0).unwrap();
        b.count_optimism(Channel::Reward, false);

        let stats = aggregate(&[a, b]).unwrap();
        assert_eq!(stats.seeds, 2);
        // Regrets 0.5 and 0 per episode: means 0.25 and 0.5 cumulative.
        assert_abs_diff_eq!(stats.mean_regret[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.mean_regret[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.mean_dual[0], 1.0, epsilon = 1e-12);
        assert!(stats.stderr_regret[0] > 0.0);
        assert_abs_diff_eq!(stats.optimism_rate[0], 0.5, epsilon = 1e-12);
        assert!(stats.regret_slope.is_none());
    }
}
