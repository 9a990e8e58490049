//! Dense two-phase revised simplex with Bland's rule.
//!
//! Solves `max c.x` subject to `A x = rhs`, `x >= 0`. Small and deliberately
//! boring: an explicit basis inverse, artificial variables for phase one, and
//! smallest-index pivoting so degenerate problems terminate. Every optimal
//! solution is certified (primal feasibility, dual feasibility, and the
//! primal-dual gap) before being returned.

use crate::error::{Error, Result};

/// Reduced-cost and pivot tolerance.
const PIVOT_TOL: f64 = 1e-10;
/// Phase-one objective above this means the program is infeasible.
const FEAS_TOL: f64 = 1e-9;
/// Certification tolerance for the primal-dual objective gap.
const GAP_TOL: f64 = 1e-8;

/// Equality-form linear program `max objective . x` with `rows . x = rhs`.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

/// Certified optimal point of an [`LpProblem`].
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub primal: Vec<f64>,
    pub objective: f64,
    /// Row duals in max convention: `duals . rhs == objective` and
    /// `duals . column >= objective coefficient` for every column.
    pub duals: Vec<f64>,
    /// Certified `|primal objective - dual objective|`.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(LpSolution),
    Infeasible,
    Unbounded,
}

struct Tableau {
    num_rows: usize,
    /// Structural columns plus one artificial per row, column-major.
    cols: Vec<Vec<f64>>,
    basis: Vec<usize>,
    binv: Vec<f64>,
    xb: Vec<f64>,
}

impl Tableau {
    fn new(problem: &LpProblem) -> Result<Self> {
        let m = problem.rows.len();
        let n = problem.num_vars;
        if problem.objective.len() != n || problem.rhs.len() != m {
            return Err(Error::Structural(
                "objective or rhs length does not match problem shape".into(),
            ));
        }
        for row in &problem.rows {
            if row.len() != n {
                return Err(Error::Structural("constraint row length mismatch".into()));
            }
        }
        let all = problem
            .rows
            .iter()
            .flatten()
            .chain(&problem.objective)
            .chain(&problem.rhs);
        for &v in all {
            if !v.is_finite() {
                return Err(Error::Numeric("linear program contains non-finite data".into()));
            }
        }

        // Flip rows with negative rhs so artificial variables start feasible.
        let mut cols = vec![vec![0.0; m]; n + m];
        let mut rhs = problem.rhs.clone();
        let sign: Vec<f64> = rhs.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
        for i in 0..m {
            rhs[i] *= sign[i];
            for j in 0..n {
                cols[j][i] = problem.rows[i][j] * sign[i];
            }
            cols[n + i][i] = 1.0;
        }
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        Ok(Tableau {
            num_rows: m,
            cols,
            basis: (n..n + m).collect(),
            binv,
            xb: rhs,
        })
    }

    fn direction(&self, col: usize) -> Vec<f64> {
        let m = self.num_rows;
        let a = &self.cols[col];
        let mut w = vec![0.0; m];
        for (i, wi) in w.iter_mut().enumerate() {
            let mut sum = 0.0;
            for k in 0..m {
                sum += self.binv[i * m + k] * a[k];
            }
            *wi = sum;
        }
        w
    }

    fn duals(&self, costs: &[f64]) -> Vec<f64> {
        let m = self.num_rows;
        let mut y = vec![0.0; m];
        for (j, yj) in y.iter_mut().enumerate() {
            let mut sum = 0.0;
            for (i, &bi) in self.basis.iter().enumerate() {
                sum += costs[bi] * self.binv[i * m + j];
            }
            *yj = sum;
        }
        y
    }

    fn pivot(&mut self, row: usize, col: usize, w: &[f64]) {
        let m = self.num_rows;
        let wr = w[row];
        for k in 0..m {
            self.binv[row * m + k] /= wr;
        }
        self.xb[row] /= wr;
        for i in 0..m {
            if i != row && w[i] != 0.0 {
                let factor = w[i];
                for k in 0..m {
                    self.binv[i * m + k] -= factor * self.binv[row * m + k];
                }
                self.xb[i] -= factor * self.xb[row];
            }
        }
        self.basis[row] = col;
    }

    /// Runs Bland-rule simplex on the given costs (min convention) over the
    /// allowed column range. Returns false if an unbounded ray was found.
    fn optimize(&mut self, costs: &[f64], allowed_cols: usize, max_iters: usize) -> Result<bool> {
        for _ in 0..max_iters {
            let y = self.duals(costs);
            let mut entering = None;
            for j in 0..allowed_cols {
                if self.basis.contains(&j) {
                    continue;
                }
                let reduced = costs[j]
                    - y.iter()
                        .zip(&self.cols[j])
                        .map(|(&yi, &aij)| yi * aij)
                        .sum::<f64>();
                if reduced < -PIVOT_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return Ok(true);
            };
            let w = self.direction(col);
            let mut leaving: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..self.num_rows {
                if w[i] > PIVOT_TOL {
                    let ratio = self.xb[i] / w[i];
                    let better = ratio < best_ratio - PIVOT_TOL
                        || (ratio < best_ratio + PIVOT_TOL
                            && leaving.is_some_and(|l| self.basis[i] < self.basis[l]));
                    if leaving.is_none() || better {
                        leaving = Some(i);
                        best_ratio = ratio;
                    }
                }
            }
            let Some(row) = leaving else {
                return Ok(false);
            };
            self.pivot(row, col, &w);
        }
        Err(Error::Numeric(
            "simplex iteration cap exceeded; possible numerical cycling".into(),
        ))
    }

    /// Pivots basic artificial variables onto structural columns when
    /// possible; leftover artificials sit at zero on redundant rows.
    fn drive_out_artificials(&mut self, num_structural: usize) {
        for row in 0..self.num_rows {
            if self.basis[row] < num_structural {
                continue;
            }
            for j in 0..num_structural {
                if self.basis.contains(&j) {
                    continue;
                }
                let w = self.direction(j);
                if w[row].abs() > PIVOT_TOL {
                    self.pivot(row, j, &w);
                    break;
                }
            }
        }
    }
}

/// Solves the program, certifying any optimal outcome.
pub fn solve(problem: &LpProblem) -> Result<LpOutcome> {
    let m = problem.rows.len();
    let n = problem.num_vars;
    let mut tab = Tableau::new(problem)?;
    let max_iters = 200 * (n + m + 1);

    // Phase one: minimize the sum of artificials.
    let mut phase1 = vec![0.0; n + m];
    for c in phase1.iter_mut().skip(n) {
        *c = 1.0;
    }
    if !tab.optimize(&phase1, n + m, max_iters)? {
        return Err(Error::Numeric("phase-one simplex reported unbounded".into()));
    }
    let residual: f64 = tab
        .basis
        .iter()
        .zip(&tab.xb)
        .filter(|(&b, _)| b >= n)
        .map(|(_, &v)| v)
        .sum();
    if residual > FEAS_TOL {
        return Ok(LpOutcome::Infeasible);
    }
    tab.drive_out_artificials(n);

    // Phase two: minimize the negated objective over structural columns.
    let mut phase2 = vec![0.0; n + m];
    for j in 0..n {
        phase2[j] = -problem.objective[j];
    }
    if !tab.optimize(&phase2, n, max_iters)? {
        return Ok(LpOutcome::Unbounded);
    }

    let mut primal = vec![0.0; n];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            primal[b] = tab.xb[i];
        }
    }
    let objective: f64 = primal
        .iter()
        .zip(&problem.objective)
        .map(|(&x, &c)| x * c)
        .sum();
    // Max-convention duals; undo the internal row sign flips.
    let y_min = tab.duals(&phase2);
    let duals: Vec<f64> = y_min
        .iter()
        .zip(&problem.rhs)
        .map(|(&y, &b)| if b < 0.0 { y } else { -y })
        .collect();
    let solution = certify(problem, primal, objective, duals)?;
    Ok(LpOutcome::Optimal(solution))
}

/// Verifies feasibility, dual feasibility, and the objective gap.
fn certify(
    problem: &LpProblem,
    primal: Vec<f64>,
    objective: f64,
    duals: Vec<f64>,
) -> Result<LpSolution> {
    for &x in &primal {
        if x < -1e-9 || !x.is_finite() {
            return Err(Error::Numeric(format!(
                "simplex produced an infeasible primal value {x}"
            )));
        }
    }
    for (i, row) in problem.rows.iter().enumerate() {
        let lhs: f64 = row.iter().zip(&primal).map(|(&a, &x)| a * x).sum();
        if (lhs - problem.rhs[i]).abs() > 1e-7 {
            return Err(Error::Numeric(format!(
                "constraint {i} violated by {:e}",
                (lhs - problem.rhs[i]).abs()
            )));
        }
    }
    for j in 0..problem.num_vars {
        let slack: f64 = problem
            .rows
            .iter()
            .zip(&duals)
            .map(|(row, &y)| row[j] * y)
            .sum::<f64>()
            - problem.objective[j];
        if slack < -1e-7 {
            return Err(Error::Numeric(format!(
                "dual feasibility violated at column {j} by {:e}",
                -slack
            )));
        }
    }
    let dual_objective: f64 = duals.iter().zip(&problem.rhs).map(|(&y, &b)| y * b).sum();
    let gap = (objective - dual_objective).abs();
    if gap > GAP_TOL {
        return Err(Error::Numeric(format!(
            "primal-dual gap {gap:e} exceeds {GAP_TOL:e}"
        )));
    }
    Ok(LpSolution {
        primal,
        objective,
        duals,
        gap,
    })
}
