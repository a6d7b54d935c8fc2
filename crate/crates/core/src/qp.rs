//! Minimum-deviation projection QP.
//!
//! ```text
//!     minimize    ||u - u_nom||^2 + ||r||^2
//!     subject to  a_i . u - w_i r_{idx(i)} >= c_i
//! ```
//!
//! The Hessian is the identity, so the dual is solved by Hildreth-style
//! coordinate ascent: each multiplier update is a scalar clamp and the primal
//! iterate is kept as `z = z_nom + sum_i lambda_i g_i` with
//! `g_i = (a_i, -w_i e_idx(i))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("row {row} has a vanishing gradient but requires {offset} > 0")]
    InfeasibleHardRow { row: usize, offset: f64 },
    #[error("malformed problem: {0}")]
    Malformed(String),
}

/// `a . u - w r[relax_index] >= offset`, with `a` stored sparsely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub entries: Vec<(usize, f64)>,
    pub offset: f64,
    pub relax_weight: f64,
    pub relax_index: Option<usize>,
}

impl ConstraintRow {
    pub fn hard(entries: Vec<(usize, f64)>, offset: f64) -> Self {
        Self {
            entries,
            offset,
            relax_weight: 0.0,
            relax_index: None,
        }
    }

    pub fn is_hard(&self) -> bool {
        self.relax_index.is_none() || self.relax_weight == 0.0
    }

    /// `a . u - w r`.
    pub fn lhs(&self, u: &[f64], r: &[f64]) -> f64 {
        let mut acc: f64 = self.entries.iter().map(|(i, a)| a * u[*i]).sum();
        if let Some(idx) = self.relax_index {
            acc -= self.relax_weight * r[idx];
        }
        acc
    }

    fn norm_sq(&self) -> f64 {
        let a: f64 = self.entries.iter().map(|(_, a)| a * a).sum();
        match self.relax_index {
            Some(_) => a + self.relax_weight * self.relax_weight,
            None => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionProblem {
    pub u_nom: Vec<f64>,
    pub rows: Vec<ConstraintRow>,
    pub relax_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSolution {
    pub u_star: Vec<f64>,
    pub r_star: Vec<f64>,
    pub duals: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ProjectionSolution {
    /// True when no row carries a positive multiplier, i.e. `u_star == u_nom`.
    pub fn is_inactive(&self) -> bool {
        self.duals.iter().all(|l| *l == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 10_000,
        }
    }
}

impl ProjectionProblem {
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.u_nom.len();
        if self.u_nom.iter().any(|v| !v.is_finite()) {
            return Err(QpError::Malformed("nominal velocity is not finite".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !row.offset.is_finite() {
                return Err(QpError::Malformed(format!("row {i} offset is not finite")));
            }
            if let Some((idx, a)) = row.entries.iter().find(|(idx, a)| *idx >= n || !a.is_finite()) {
                return Err(QpError::Malformed(format!(
                    "row {i} entry ({idx}, {a}) out of range or not finite"
                )));
            }
            if !(row.relax_weight >= 0.0) || !row.relax_weight.is_finite() {
                return Err(QpError::Malformed(format!("row {i} relax weight must be >= 0")));
            }
            match row.relax_index {
                Some(idx) if idx >= self.relax_dim => {
                    return Err(QpError::Malformed(format!(
                        "row {i} relax index {idx} >= relax_dim {}",
                        self.relax_dim
                    )))
                }
                None if row.relax_weight > 0.0 => {
                    return Err(QpError::Malformed(format!(
                        "row {i} has a relax weight but no relaxation variable"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn objective(&self, u: &[f64], r: &[f64]) -> f64 {
        let du: f64 = u
            .iter()
            .zip(&self.u_nom)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        du + r.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Solves the projection QP by dual coordinate ascent over the rows in
/// insertion order.
///
/// A solve that exhausts `max_iter` sweeps still returns the last iterate,
/// with `converged == false`.
pub fn solve_projection(
    problem: &ProjectionProblem,
    settings: &SolverSettings,
) -> Result<ProjectionSolution, QpError> {
    problem.validate()?;
    let mut u = problem.u_nom.clone();
    let mut r = vec![0.0; problem.relax_dim];
    let mut duals = vec![0.0; problem.rows.len()];
    let norms: Vec<f64> = problem.rows.iter().map(ConstraintRow::norm_sq).collect();

    for (i, (row, norm)) in problem.rows.iter().zip(&norms).enumerate() {
        if *norm == 0.0 && row.offset > 0.0 {
            return Err(QpError::InfeasibleHardRow {
                row: i,
                offset: row.offset,
            });
        }
    }

    let mut iterations = 0;
    let mut converged = problem.rows.is_empty();
    while !converged && iterations < settings.max_iter {
        iterations += 1;
        for (i, row) in problem.rows.iter().enumerate() {
            if norms[i] == 0.0 {
                continue;
            }
            let slack = row.lhs(&u, &r) - row.offset;
            let next = (duals[i] - slack / norms[i]).max(0.0);
            let step = next - duals[i];
            if step == 0.0 {
                continue;
            }
            duals[i] = next;
            for (idx, a) in &row.entries {
                u[*idx] += step * a;
            }
            if let Some(idx) = row.relax_index {
                r[idx] -= step * row.relax_weight;
            }
        }
        converged = sweep_residual(problem, &u, &r, &duals) <= settings.tol;
    }

    let mut solution = ProjectionSolution {
        u_star: u,
        r_star: r,
        duals,
        kkt_residual: 0.0,
        iterations,
        converged,
    };
    solution.kkt_residual = kkt_residual(problem, &solution);
    Ok(solution)
}

fn sweep_residual(problem: &ProjectionProblem, u: &[f64], r: &[f64], duals: &[f64]) -> f64 {
    problem
        .rows
        .iter()
        .zip(duals)
        .map(|(row, l)| {
            let slack = row.lhs(u, r) - row.offset;
            (-slack).max(0.0).max((l * slack).abs())
        })
        .fold(0.0, f64::max)
}

/// Max of stationarity, primal violation, dual negativity and
/// complementary slackness.
pub fn kkt_residual(problem: &ProjectionProblem, solution: &ProjectionSolution) -> f64 {
    let u = &solution.u_star;
    let r = &solution.r_star;
    let mut grad_u: Vec<f64> = u.iter().zip(&problem.u_nom).map(|(a, b)| a - b).collect();
    let mut grad_r = r.clone();
    let mut worst: f64 = 0.0;
    for (row, l) in problem.rows.iter().zip(&solution.duals) {
        for (idx, a) in &row.entries {
            grad_u[*idx] -= l * a;
        }
        if let Some(idx) = row.relax_index {
            grad_r[idx] += l * row.relax_weight;
        }
        let slack = row.lhs(u, r) - row.offset;
        worst = worst.max((-slack).max(0.0)).max((-l).max(0.0)).max((l * slack).abs());
    }
    grad_u
        .iter()
        .chain(&grad_r)
        .fold(worst, |acc, g| acc.max(g.abs()))
}

/// Exact minimizer for a single hard row:
/// `u_nom + max(0, c - a.u_nom) / ||a||^2 * a`.
pub fn closed_form_single(u_nom: &[f64], row: &ConstraintRow) -> Result<Vec<f64>, QpError> {
    if !row.is_hard() {
        return Err(QpError::Malformed("closed form requires a hard row".into()));
    }
    let norm = row.norm_sq();
    let gap = row.offset - row.lhs(u_nom, &[]);
    let mut u = u_nom.to_vec();
    if gap <= 0.0 {
        return Ok(u);
    }
    if norm == 0.0 {
        return Err(QpError::InfeasibleHardRow {
            row: 0,
            offset: row.offset,
        });
    }
    for (idx, a) in &row.entries {
        u[*idx] += gap / norm * a;
    }
    Ok(u)
}

/// Structured text record of a problem and (optionally) its solution.
pub fn debug_record(problem: &ProjectionProblem, solution: Option<&ProjectionSolution>) -> String {
    serde_json::json!({ "problem": problem, "solution": solution }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dense_row(a: &[f64], c: f64) -> ConstraintRow {
        ConstraintRow::hard(a.iter().copied().enumerate().collect(), c)
    }

    #[test]
    fn interior_point_is_unchanged() {
        let p = ProjectionProblem {
            u_nom: vec![3.0, 1.0],
            rows: vec![dense_row(&[1.0, 0.0], 2.0), dense_row(&[0.0, 1.0], -4.0)],
            relax_dim: 0,
        };
        let s = solve_projection(&p, &SolverSettings::default()).unwrap();
        assert_eq!(s.u_star, p.u_nom);
        assert_eq!(s.duals, vec![0.0, 0.0]);
        assert!(s.is_inactive());
        assert!(s.converged);
    }

    #[test]
    fn single_half_space() {
        let p = ProjectionProblem {
            u_nom: vec![0.0, 0.0],
            rows: vec![dense_row(&[1.0, 0.0], 2.0)],
            relax_dim: 0,
        };
        let s = solve_projection(&p, &SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(s.u_star[0], 2.0);
        assert_abs_diff_eq!(s.u_star[1], 0.0);
        assert_abs_diff_eq!(s.duals[0], 2.0);
        assert_eq!(closed_form_single(&p.u_nom, &p.rows[0]).unwrap(), vec![2.0, 0.0]);
        assert!(kkt_residual(&p, &s) < 1e-12);
    }

    #[test]
    fn two_separable_rows() {
        let p = ProjectionProblem {
            u_nom: vec![0.0, 0.0],
            rows: vec![dense_row(&[1.0, 0.0], 1.0), dense_row(&[0.0, 1.0], 1.0)],
            relax_dim: 0,
        };
        let s = solve_projection(&p, &SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(s.u_star[0], 1.0);
        assert_abs_diff_eq!(s.u_star[1], 1.0);
    }

    #[test]
    fn residual_of_unprojected_point_is_violation() {
        let p = ProjectionProblem {
            u_nom: vec![0.0, 0.0],
            rows: vec![dense_row(&[1.0, 0.0], 2.0)],
            relax_dim: 0,
        };
        let s = ProjectionSolution {
            u_star: vec![0.0, 0.0],
            r_star: vec![],
            duals: vec![0.0],
            kkt_residual: 0.0,
            iterations: 0,
            converged: false,
        };
        assert_abs_diff_eq!(kkt_residual(&p, &s), 2.0);
    }

    #[test]
    fn vanishing_gradient_hard_row_is_infeasible() {
        let p = ProjectionProblem {
            u_nom: vec![0.0],
            rows: vec![dense_row(&[0.0], 0.5)],
            relax_dim: 0,
        };
        assert_eq!(
            solve_projection(&p, &SolverSettings::default()).unwrap_err(),
            QpError::InfeasibleHardRow { row: 0, offset: 0.5 }
        );
    }

    #[test]
    fn relaxed_rows_stay_feasible_with_zero_gradient() {
        let p = ProjectionProblem {
            u_nom: vec![0.0, 0.0],
            rows: vec![
                ConstraintRow {
                    entries: vec![(0, 0.0)],
                    offset: 3.0,
                    relax_weight: 2.0,
                    relax_index: Some(0),
                },
                ConstraintRow {
                    entries: vec![(1, 1.0)],
                    offset: 1.0,
                    relax_weight: 1.0,
                    relax_index: Some(0),
                },
            ],
            relax_dim: 1,
        };
        let s = solve_projection(&p, &SolverSettings::default()).unwrap();
        assert!(s.converged);
        assert!(s.kkt_residual <= 1e-9);
        // Only the relaxation can satisfy the first row.
        assert!(s.r_star[0] <= -1.5 + 1e-9);
    }

    #[test]
    fn malformed_problems_rejected() {
        let p = ProjectionProblem {
            u_nom: vec![0.0],
            rows: vec![ConstraintRow {
                entries: vec![(0, 1.0)],
                offset: 0.0,
                relax_weight: 1.0,
                relax_index: Some(3),
            }],
            relax_dim: 1,
        };
        assert!(matches!(
            solve_projection(&p, &SolverSettings::default()),
            Err(QpError::Malformed(_))
        ));
        let p = ProjectionProblem {
            u_nom: vec![0.0],
            rows: vec![dense_row(&[1.0, 1.0], 0.0)],
            relax_dim: 0,
        };
        assert!(solve_projection(&p, &SolverSettings::default()).is_err());
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        // Nearly parallel rows converge slowly under coordinate ascent.
        let p = ProjectionProblem {
            u_nom: vec![0.0, 0.0],
            rows: vec![dense_row(&[1.0, 1e-3], 1.0), dense_row(&[1.0, -1e-3], 1.0)],
            relax_dim: 0,
        };
        let s = solve_projection(&p, &SolverSettings { tol: 1e-14, max_iter: 3 }).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 3);
    }

    #[test]
    fn debug_record_is_json() {
        let p = ProjectionProblem {
            u_nom: vec![0.0],
            rows: vec![dense_row(&[1.0], 1.0)],
            relax_dim: 0,
        };
        let s = solve_projection(&p, &SolverSettings::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&debug_record(&p, Some(&s))).unwrap();
        assert_eq!(v["solution"]["iterations"], 1);
    }

    fn random_problem() -> impl Strategy<Value = ProjectionProblem> {
        (1usize..=8, 1usize..=12).prop_flat_map(|(n, m)| {
            (
                proptest::collection::vec(-2.0f64..2.0, n),
                proptest::collection::vec(-2.0f64..2.0, n),
                proptest::collection::vec(
                    (proptest::collection::vec(-1.0f64..1.0, n), 0.0f64..1.0),
                    m,
                ),
            )
                .prop_map(|(u_nom, feasible, rows)| ProjectionProblem {
                    u_nom,
                    // Offsets keep `feasible` inside every row.
                    rows: rows
                        .into_iter()
                        .map(|(a, slack)| {
                            let c = a.iter().zip(&feasible).map(|(x, y)| x * y).sum::<f64>() - slack;
                            dense_row(&a, c)
                        })
                        .collect(),
                    relax_dim: 0,
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn projection_is_idempotent(p in random_problem()) {
            let s = solve_projection(&p, &SolverSettings::default()).unwrap();
            prop_assume!(s.converged);
            let again = ProjectionProblem { u_nom: s.u_star.clone(), ..p.clone() };
            let s2 = solve_projection(&again, &SolverSettings::default()).unwrap();
            for (a, b) in s.u_star.iter().zip(&s2.u_star) {
                prop_assert!((a - b).abs() <= 2e-9 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn converged_solves_meet_tolerance(p in random_problem()) {
            let s = solve_projection(&p, &SolverSettings::default()).unwrap();
            if s.converged {
                prop_assert!(s.kkt_residual <= 1e-9);
            }
            prop_assert!(s.duals.iter().all(|l| *l >= 0.0));
        }
    }
}
