use serde::{Deserialize, Serialize};

use super::Maze;
use crate::diffusion::Trajectory;
use crate::invariance::barrier_matrix;
use crate::specs::{BarrierSpec, ClassifiedSpec, SpecClass, SpecError};

/// `(min, mean)` of `b` over every planning step and spec. Both are
/// `+inf` for an empty spec set.
pub fn spec_satisfaction(tau: &Trajectory, specs: &[BarrierSpec]) -> Result<(f64, f64), SpecError> {
    let values: Vec<f64> = barrier_matrix(tau, specs)?.into_iter().flatten().collect();
    if values.is_empty() {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min, values.iter().sum::<f64>() / values.len() as f64))
}

/// Mean of `max(0, -b)` over every planning step and spec.
pub fn violation_mean(tau: &Trajectory, specs: &[BarrierSpec]) -> Result<f64, SpecError> {
    let values: Vec<f64> = barrier_matrix(tau, specs)?.into_iter().flatten().collect();
    if values.is_empty() {
        return Ok(0.0);
    }
    Ok(values.iter().map(|b| (-b).max(0.0)).sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub s_min: Option<f64>,
    pub s_mean: Option<f64>,
    pub c_min: Option<f64>,
    pub c_mean: Option<f64>,
    pub per_spec_min: Vec<f64>,
}

/// Satisfaction split by reporting class. A class with no specs reports `None`.
pub fn class_satisfaction(tau: &Trajectory, specs: &[ClassifiedSpec]) -> Result<ClassStats, SpecError> {
    let plain: Vec<BarrierSpec> = specs.iter().map(|c| c.spec.clone()).collect();
    let matrix = barrier_matrix(tau, &plain)?;
    let per_spec_min = matrix
        .iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let pick = |class: SpecClass| -> (Option<f64>, Option<f64>) {
        let values: Vec<f64> = matrix
            .iter()
            .zip(specs)
            .filter(|(_, s)| s.class == class)
            .flat_map(|(row, _)| row.iter().copied())
            .collect();
        if values.is_empty() {
            return (None, None);
        }
        (
            Some(values.iter().copied().fold(f64::INFINITY, f64::min)),
            Some(values.iter().sum::<f64>() / values.len() as f64),
        )
    };
    let (s_min, s_mean) = pick(SpecClass::Simple);
    let (c_min, c_mean) = pick(SpecClass::Complex);
    Ok(ClassStats {
        s_min,
        s_mean,
        c_min,
        c_mean,
        per_spec_min,
    })
}

/// `0.5 [min distance of the last `window` states to the goal <= r_goal]
/// + 0.5 (fraction of states in free cells)`, in world coordinates.
pub fn score(path: &[[f64; 2]], maze: &Maze, goal: [f64; 2], r_goal: f64, window: usize) -> f64 {
    if path.is_empty() {
        return 0.0;
    }
    let tail = &path[path.len().saturating_sub(window.max(1))..];
    let reached = tail
        .iter()
        .map(|p| ((p[0] - goal[0]).powi(2) + (p[1] - goal[1]).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
        <= r_goal;
    let free = path.iter().filter(|p| maze.is_free_point(**p)).count();
    0.5 * f64::from(u8::from(reached)) + 0.5 * free as f64 / path.len() as f64
}

/// States that sit near a pocket boundary (`min_s b_s < band`) while
/// separated from a neighbour by more than `gap_threshold`.
pub fn count_trapped(
    tau: &Trajectory,
    pocket: &[BarrierSpec],
    band: f64,
    gap_threshold: f64,
) -> Result<usize, SpecError> {
    if pocket.is_empty() {
        return Ok(0);
    }
    let matrix = barrier_matrix(tau, pocket)?;
    let gap = |a: usize, b: usize| {
        tau.state(a)
            .iter()
            .zip(tau.state(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let h = tau.horizon();
    Ok((0..=h)
        .filter(|&k| {
            let near = matrix.iter().map(|row| row[k]).fold(f64::INFINITY, f64::min) < band;
            let before = k > 0 && gap(k - 1, k) > gap_threshold;
            let after = k < h && gap(k, k + 1) > gap_threshold;
            near && (before || after)
        })
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::MazeConfig;
    use crate::specs::{make_ellipse, make_floor, make_quartic_superellipse};

    fn traj(points: &[[f64; 2]]) -> Trajectory {
        Trajectory::from_rows(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn satisfaction_examples() {
        let e = make_ellipse([0.0, 0.0], [1.0, 1.0]).unwrap();
        let at_center = traj(&[[0.0, 0.0]; 4]);
        assert_eq!(spec_satisfaction(&at_center, &[e.clone()]).unwrap(), (-1.0, -1.0));
        let outside = traj(&[[2.0, 0.0], [3.0, 1.0]]);
        assert!(spec_satisfaction(&outside, &[e]).unwrap().0 > 0.0);
        let floor = make_floor(0.0, 1).unwrap();
        let straddle = traj(&[[0.0, 1.0], [0.0, -0.3], [0.0, -0.1]]);
        let (min, mean) = spec_satisfaction(&straddle, &[floor.clone()]).unwrap();
        assert_eq!(min, -0.3);
        assert!(min <= mean);
        assert!((violation_mean(&straddle, &[floor]).unwrap() - 0.4 / 3.0).abs() < 1e-15);
        assert_eq!(spec_satisfaction(&straddle, &[]).unwrap().0, f64::INFINITY);
    }

    #[test]
    fn class_split() {
        let specs = vec![
            ClassifiedSpec {
                spec: make_ellipse([0.0, 0.0], [1.0, 1.0]).unwrap(),
                class: SpecClass::Simple,
            },
            ClassifiedSpec {
                spec: make_quartic_superellipse([5.0, 0.0], [1.0, 1.0]).unwrap(),
                class: SpecClass::Complex,
            },
        ];
        let t = traj(&[[0.0, 0.0], [3.0, 0.0]]);
        let stats = class_satisfaction(&t, &specs).unwrap();
        assert_eq!(stats.s_min, Some(-1.0));
        assert_eq!(stats.per_spec_min.len(), 2);
        assert!(stats.c_min.unwrap() > 0.0);
        let only_simple = class_satisfaction(&t, &specs[..1]).unwrap();
        assert_eq!(only_simple.c_min, None);
    }

    #[test]
    fn score_examples() {
        let maze = Maze::from_config(&MazeConfig::default()).unwrap();
        let straight: Vec<[f64; 2]> = (0..8).map(|i| [0.5 + i as f64, 3.5]).collect();
        assert_eq!(score(&straight, &maze, [7.5, 3.5], 0.5, 3), 1.0);
        let blocked = vec![[3.5, 0.5]; 5];
        assert_eq!(score(&blocked, &maze, [7.5, 7.5], 0.5, 3), 0.0);
        assert_eq!(score(&straight, &maze, [7.5, 5.5], 0.5, 3), 0.5);
    }

    #[test]
    fn trap_counting() {
        let pocket = vec![make_ellipse([0.0, 0.0], [1.0, 1.0]).unwrap()];
        let smooth = traj(&[[-2.0, 2.0], [-1.0, 2.0], [0.0, 2.0], [1.0, 2.0]]);
        assert_eq!(count_trapped(&smooth, &pocket, 0.2, 1.5).unwrap(), 0);
        // State stuck on the boundary with a jump to its successor.
        let stuck = traj(&[[-2.0, 0.0], [-1.0, 0.0], [2.0, 2.0], [3.0, 2.0]]);
        assert_eq!(count_trapped(&stuck, &pocket, 0.2, 1.5).unwrap(), 1);
        assert_eq!(count_trapped(&stuck, &[], 0.2, 1.5).unwrap(), 0);
    }
}
