use petgraph::algo::{astar, connected_components};
use petgraph::graph::{NodeIndex, UnGraph};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataConfig, HarnessError, MazeConfig};
use crate::diffusion::Trajectory;
use crate::specs::{build_spec_set, BarrierSpec, ClassifiedSpec, NormalizationStats};

/// Grid maze with evaluation obstacles. Cell `(row, col)` covers
/// `[col, col + 1] x [row, row + 1]` times the cell size.
#[derive(Debug, Clone)]
pub struct Maze {
    blocked: Vec<Vec<bool>>,
    cell: f64,
    start_columns: [usize; 2],
    goal_columns: [usize; 2],
    specs: Vec<ClassifiedSpec>,
    graph: UnGraph<(usize, usize), f64>,
    nodes: Vec<Vec<Option<NodeIndex>>>,
}

impl Maze {
    pub fn from_config(cfg: &MazeConfig) -> Result<Self, HarnessError> {
        let rows = cfg.layout.len();
        let cols = cfg.layout.first().map_or(0, |r| r.chars().count());
        if rows == 0 || cols == 0 || cfg.layout.iter().any(|r| r.chars().count() != cols) {
            return Err(HarnessError::Config("maze layout must be a non-empty rectangle".into()));
        }
        for range in [cfg.start_columns, cfg.goal_columns] {
            if range[0] > range[1] || range[1] >= cols {
                return Err(HarnessError::Config(format!("column range {range:?} outside the maze")));
            }
        }
        let blocked: Vec<Vec<bool>> = cfg
            .layout
            .iter()
            .map(|r| r.chars().map(|c| c == '#').collect())
            .collect();

        let mut graph = UnGraph::new_undirected();
        let mut nodes = vec![vec![None; cols]; rows];
        for r in 0..rows {
            for c in 0..cols {
                if !blocked[r][c] {
                    nodes[r][c] = Some(graph.add_node((r, c)));
                }
            }
        }
        let free = |r: isize, c: isize| {
            r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols && !blocked[r as usize][c as usize]
        };
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                if !free(r, c) {
                    continue;
                }
                // Forward half of the 8-neighbourhood; diagonals never cut corners.
                for (dr, dc) in [(0, 1), (1, 0), (1, 1), (1, -1)] {
                    let (nr, nc) = (r + dr, c + dc);
                    if !free(nr, nc) {
                        continue;
                    }
                    let diagonal = dr != 0 && dc != 0;
                    if diagonal && !(free(r + dr, c) && free(r, c + dc)) {
                        continue;
                    }
                    let w = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
                    let a = nodes[r as usize][c as usize].expect("free");
                    let b = nodes[nr as usize][nc as usize].expect("free");
                    graph.add_edge(a, b, w);
                }
            }
        }
        if graph.node_count() == 0 || connected_components(&graph) != 1 {
            return Err(HarnessError::Config("maze free space must be connected".into()));
        }
        let maze = Self {
            blocked,
            cell: cfg.cell_size,
            start_columns: cfg.start_columns,
            goal_columns: cfg.goal_columns,
            specs: build_spec_set(&cfg.specs)?,
            graph,
            nodes,
        };
        for range in [maze.start_columns, maze.goal_columns] {
            if maze.free_cells_in(range).is_empty() {
                return Err(HarnessError::Config(format!("no free cell in columns {range:?}")));
            }
        }
        Ok(maze)
    }

    pub fn rows(&self) -> usize {
        self.blocked.len()
    }

    pub fn cols(&self) -> usize {
        self.blocked[0].len()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// `[x_max, y_max]`; the lower corner is the origin.
    pub fn extent(&self) -> [f64; 2] {
        [self.cols() as f64 * self.cell, self.rows() as f64 * self.cell]
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row][col]
    }

    /// Evaluation obstacles in world coordinates.
    pub fn specs(&self) -> &[ClassifiedSpec] {
        &self.specs
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let [w, h] = self.extent();
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w && p[1] < h) {
            return None;
        }
        Some(((p[1] / self.cell) as usize, (p[0] / self.cell) as usize))
    }

    pub fn is_free_point(&self, p: [f64; 2]) -> bool {
        self.cell_of(p).is_some_and(|(r, c)| !self.blocked[r][c])
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [(col as f64 + 0.5) * self.cell, (row as f64 + 0.5) * self.cell]
    }

    fn free_cells_in(&self, cols: [usize; 2]) -> Vec<(usize, usize)> {
        (0..self.rows())
            .flat_map(|r| (cols[0]..=cols[1]).map(move |c| (r, c)))
            .filter(|(r, c)| !self.blocked[*r][*c])
            .collect()
    }

    /// Uniform-cost shortest cell path, endpoints included.
    pub fn shortest_path(&self, start: (usize, usize), goal: (usize, usize)) -> Option<Vec<(usize, usize)>> {
        let s = (*self.nodes.get(start.0)?.get(start.1)?)?;
        let g = (*self.nodes.get(goal.0)?.get(goal.1)?)?;
        let (_, path) = astar(&self.graph, s, |n| n == g, |e| *e.weight(), |_| 0.0)?;
        Some(path.into_iter().map(|n| self.graph[n]).collect())
    }
}

/// Linear interpolation of a polyline at `n` points evenly spaced in arc
/// length. A zero-length polyline yields `n` copies of its first point.
pub fn resample_path(points: &[[f64; 2]], n: usize) -> Vec<[f64; 2]> {
    assert!(!points.is_empty() && n >= 2, "need points and at least two samples");
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![points[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 1 < points.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (points[seg], points[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out[n - 1] = *points.last().unwrap();
    out
}

fn clear_of(specs: &[BarrierSpec], p: [f64; 2], margin: f64) -> bool {
    specs.iter().all(|s| {
        let single = s.terminal_fallback().unwrap_or_else(|| s.clone());
        single.eval(&p, None).is_ok_and(|b| b >= margin)
    })
}

fn random_point_in<R: Rng + ?Sized>(maze: &Maze, cell: (usize, usize), rng: &mut R) -> [f64; 2] {
    let c = maze.cell_center(cell.0, cell.1);
    let q = 0.25 * maze.cell;
    [c[0] + rng.random_range(-q..q), c[1] + rng.random_range(-q..q)]
}

/// Random start in the start columns and goal in the goal columns, both in
/// free cells and clear of `specs` (world coordinates) by `margin`.
pub fn sample_endpoints<R: Rng + ?Sized>(
    maze: &Maze,
    specs: &[BarrierSpec],
    margin: f64,
    rng: &mut R,
) -> Result<([f64; 2], [f64; 2]), HarnessError> {
    let starts = maze.free_cells_in(maze.start_columns);
    let goals = maze.free_cells_in(maze.goal_columns);
    let pick = |cells: &[(usize, usize)], rng: &mut R| -> Option<[f64; 2]> {
        (0..1000).find_map(|_| {
            let cell = cells[rng.random_range(0..cells.len())];
            let p = random_point_in(maze, cell, rng);
            clear_of(specs, p, margin).then_some(p)
        })
    };
    let start = pick(&starts, rng)
        .ok_or_else(|| HarnessError::Config("no start position clear of the specs".into()))?;
    let goal = pick(&goals, rng)
        .ok_or_else(|| HarnessError::Config("no goal position clear of the specs".into()))?;
    Ok((start, goal))
}

/// Normalized training trajectories with their statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub horizon: usize,
    pub dim: usize,
    pub stats: NormalizationStats,
    /// Median distance between consecutive normalized states.
    pub median_gap: f64,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn to_world(&self, tau: &Trajectory) -> Vec<[f64; 2]> {
        (0..tau.len())
            .map(|k| {
                let w = self.stats.denormalize_state(tau.state(k));
                [w[0], w[1]]
            })
            .collect()
    }
}

pub(crate) fn median_gap(trajs: &[Trajectory]) -> f64 {
    let mut gaps: Vec<f64> = trajs
        .iter()
        .flat_map(|t| {
            (0..t.horizon()).map(move |k| {
                t.state(k)
                    .iter()
                    .zip(t.state(k + 1))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect();
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.sort_by(f64::total_cmp);
    let m = gaps.len() / 2;
    if gaps.len() % 2 == 1 {
        gaps[m]
    } else {
        0.5 * (gaps[m - 1] + gaps[m])
    }
}

/// Paths between random start and goal positions: uniform-cost cell path,
/// arc-length resampling to `H + 1` points, Gaussian jitter on the interior
/// points, min-max normalization to `[-1, 1]`.
pub fn generate_dataset<R: Rng + ?Sized>(
    maze: &Maze,
    cfg: &DataConfig,
    rng: &mut R,
) -> Result<Dataset, HarnessError> {
    let starts = maze.free_cells_in(maze.start_columns);
    let goals = maze.free_cells_in(maze.goal_columns);
    let jitter = Normal::new(0.0, cfg.jitter * maze.cell)
        .map_err(|e| HarnessError::Config(format!("jitter: {e}")))?;
    let n = cfg.horizon + 1;
    let mut world: Vec<Vec<[f64; 2]>> = Vec::with_capacity(cfg.n_traj);
    for _ in 0..cfg.n_traj {
        let mut found = None;
        let mut last = ((0, 0), (0, 0));
        for _ in 0..cfg.max_retries.max(1) {
            let s = starts[rng.random_range(0..starts.len())];
            let g = goals[rng.random_range(0..goals.len())];
            last = (s, g);
            if let Some(path) = maze.shortest_path(s, g) {
                found = Some(path);
                break;
            }
        }
        let path = found.ok_or(HarnessError::Unreachable {
            start: last.0,
            goal: last.1,
            tries: cfg.max_retries,
        })?;
        let start = random_point_in(maze, path[0], rng);
        let goal = random_point_in(maze, *path.last().unwrap(), rng);
        let mut pts = vec![start];
        if path.len() > 2 {
            pts.extend(path[1..path.len() - 1].iter().map(|(r, c)| maze.cell_center(*r, *c)));
        }
        pts.push(goal);
        let mut samples = resample_path(&pts, n);
        for p in &mut samples[1..n - 1] {
            p[0] += jitter.sample(rng);
            p[1] += jitter.sample(rng);
        }
        world.push(samples);
    }

    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in world.iter().flatten() {
        for i in 0..2 {
            min[i] = min[i].min(p[i]);
            max[i] = max[i].max(p[i]);
        }
    }
    let stats = NormalizationStats::new(min.to_vec(), max.to_vec())?;
    let trajectories = world
        .iter()
        .map(|pts| {
            let flat = pts.iter().flat_map(|p| stats.normalize_state(p)).collect();
            Trajectory::from_flat(cfg.horizon, 2, flat)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        horizon: cfg.horizon,
        dim: 2,
        median_gap: median_gap(&trajectories),
        stats,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specs::make_ellipse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maze() -> Maze {
        Maze::from_config(&MazeConfig::default()).unwrap()
    }

    #[test]
    fn layout_and_cells() {
        let m = maze();
        assert_eq!((m.rows(), m.cols()), (8, 8));
        assert!(m.is_blocked(0, 3));
        assert!(!m.is_blocked(3, 3));
        assert!(m.is_free_point([4.0, 4.0]));
        assert!(!m.is_free_point([3.5, 0.5]));
        assert!(!m.is_free_point([-0.1, 1.0]));
        assert_eq!(m.cell_center(1, 2), [2.5, 1.5]);
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut cfg = MazeConfig::default();
        cfg.layout = vec!["..#".into(), ".#".into()];
        assert!(Maze::from_config(&cfg).is_err());
        cfg.layout = vec!["..#..".into()];
        cfg.start_columns = [0, 0];
        cfg.goal_columns = [4, 4];
        assert!(matches!(Maze::from_config(&cfg), Err(HarnessError::Config(_))));
    }

    #[test]
    fn shortest_path_crosses_the_gateway() {
        let m = maze();
        let path = m.shortest_path((0, 0), (0, 7)).unwrap();
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(0, 7)));
        assert!(path.iter().all(|(r, c)| !m.is_blocked(*r, *c)));
        assert!(path.iter().any(|(r, c)| (3..=4).contains(r) && *c == 3));
        // Consecutive cells are neighbours and diagonals never cut corners.
        for w in path.windows(2) {
            let (dr, dc) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
            assert!(dr.abs() <= 1 && dc.abs() <= 1);
            if dr != 0 && dc != 0 {
                assert!(!m.is_blocked(w[1].0, w[0].1) && !m.is_blocked(w[0].0, w[1].1));
            }
        }
        assert_eq!(m.shortest_path((2, 2), (2, 2)), Some(vec![(2, 2)]));
        assert_eq!(m.shortest_path((0, 3), (0, 0)), None);
    }

    #[test]
    fn resampling() {
        let same = resample_path(&[[1.0, 2.0], [1.0, 2.0]], 5);
        assert_eq!(same, vec![[1.0, 2.0]; 5]);
        let line = resample_path(&[[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]], 5);
        for (i, p) in line.iter().enumerate() {
            assert!((p[0] - i as f64).abs() < 1e-12 && p[1] == 0.0);
        }
    }

    #[test]
    fn dataset_is_normalized_and_inside_the_world() {
        let m = maze();
        let cfg = DataConfig {
            n_traj: 1000,
            ..DataConfig::default()
        };
        let data = generate_dataset(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(data.trajectories.len(), 1000);
        let [w, h] = m.extent();
        for t in &data.trajectories {
            assert_eq!(t.len(), 49);
            assert!(t.as_flat().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            for p in data.to_world(t) {
                assert!(p[0] > 0.0 && p[0] < w && p[1] > 0.0 && p[1] < h);
            }
        }
        assert!(data.median_gap > 0.0);
        // Round trip of the normalization.
        let x = [3.3, 6.1];
        let back = data.stats.denormalize_state(&data.stats.normalize_state(&x));
        assert!((back[0] - x[0]).abs() < 1e-12 && (back[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn straight_corridor_is_collinear() {
        let cfg = MazeConfig {
            layout: vec![".....".into()],
            start_columns: [0, 0],
            goal_columns: [4, 4],
            specs: vec![],
            ..MazeConfig::default()
        };
        let m = Maze::from_config(&cfg).unwrap();
        let data_cfg = DataConfig {
            n_traj: 5,
            horizon: 10,
            jitter: 0.0,
            ..DataConfig::default()
        };
        let data = generate_dataset(&m, &data_cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for t in &data.trajectories {
            // Between the first and last cell centers the path is the
            // corridor's center line.
            let p = data.to_world(t);
            for q in p.iter().filter(|q| (1.5..=3.5).contains(&q[0])) {
                assert!((q[1] - 0.5).abs() < 1e-9);
            }
            assert!(p.windows(2).all(|w| w[1][0] >= w[0][0]));
        }
    }

    #[test]
    fn endpoints_avoid_specs() {
        let m = maze();
        let specs = vec![make_ellipse([1.5, 1.5], [2.0, 2.0]).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (s, g) = sample_endpoints(&m, &specs, 0.1, &mut rng).unwrap();
            assert!(m.is_free_point(s) && m.is_free_point(g));
            assert!(specs[0].eval(&s, None).unwrap() >= 0.1);
            assert!(s[0] < 3.0 && g[0] > 5.0);
        }
    }
}
