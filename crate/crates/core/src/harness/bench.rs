use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::maze::{sample_endpoints, Dataset, Maze};
use super::metrics::{class_satisfaction, count_trapped, score, violation_mean, ClassStats};
use super::output::ArtifactHeader;
use super::{HarnessConfig, HarnessError, Method};
use crate::baselines::{guided_sample, truncate_sample};
use crate::diffusion::{
    Conditioning, DenoiserModel, DiffusionSchedule, SampleOptions, Trajectory, TrainingLog,
};
use crate::invariance::{safe_sample, GammaSchedule, SafetyMode, StepRecord};
use crate::specs::{build_spec_set, BarrierSpec, ClassifiedSpec, NormalizationStats, SpecEntry};

/// Minimum barrier value required of random start and goal positions.
const ENDPOINT_MARGIN: f64 = 0.1;

/// Trained model plus everything needed to plan in the maze.
#[derive(Debug, Clone)]
pub struct Planner {
    pub config: HarnessConfig,
    pub maze: Maze,
    pub model: DenoiserModel,
    pub sched: DiffusionSchedule,
    pub stats: NormalizationStats,
    pub median_gap: f64,
    /// Maze obstacles mapped into the normalized planning space.
    pub specs: Vec<ClassifiedSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointExtra {
    header: ArtifactHeader,
    stats: NormalizationStats,
    median_gap: f64,
    #[serde(default)]
    training: Option<TrainingLog>,
}

impl Planner {
    pub fn new(
        config: HarnessConfig,
        model: DenoiserModel,
        stats: NormalizationStats,
        median_gap: f64,
    ) -> Result<Self, HarnessError> {
        let maze = Maze::from_config(&config.maze)?;
        let sched = config.schedule.build()?;
        let specs = maze
            .specs()
            .iter()
            .map(|c| {
                Ok(ClassifiedSpec {
                    spec: c.spec.normalize(&stats)?,
                    class: c.class,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(Self {
            config,
            maze,
            model,
            sched,
            stats,
            median_gap,
            specs,
        })
    }

    pub fn plain_specs(&self) -> Vec<BarrierSpec> {
        self.specs.iter().map(|c| c.spec.clone()).collect()
    }

    pub fn world_specs(&self) -> Vec<BarrierSpec> {
        self.maze.specs().iter().map(|c| c.spec.clone()).collect()
    }

    pub fn normalize_entries(&self, entries: &[SpecEntry]) -> Result<Vec<BarrierSpec>, HarnessError> {
        build_spec_set(entries)?
            .into_iter()
            .map(|c| Ok(c.spec.normalize(&self.stats)?))
            .collect()
    }

    pub fn to_world(&self, tau: &Trajectory) -> Vec<[f64; 2]> {
        (0..tau.len())
            .map(|k| {
                let w = self.stats.denormalize_state(tau.state(k));
                [w[0], w[1]]
            })
            .collect()
    }

    pub fn conditioning(&self, start: [f64; 2], goal: [f64; 2]) -> Result<Conditioning, HarnessError> {
        Ok(Conditioning::new(
            self.stats.normalize_state(&start),
            self.stats.normalize_state(&goal),
        )?)
    }

    /// Writes the checkpoint with the normalization it was trained under.
    pub fn save_checkpoint(
        config: &HarnessConfig,
        model: &DenoiserModel,
        dataset: &Dataset,
        training: Option<&TrainingLog>,
    ) -> Result<(), HarnessError> {
        let extra = CheckpointExtra {
            header: config.header("checkpoint"),
            stats: dataset.stats.clone(),
            median_gap: dataset.median_gap,
            training: training.cloned(),
        };
        let path = config.resolve(&config.model.checkpoint);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let value = serde_json::to_value(extra).expect("checkpoint metadata serializes");
        model.save(&path, value)?;
        Ok(())
    }
}

/// Loads the checkpoint named by the configuration.
pub fn load_planner(config: &HarnessConfig) -> Result<Planner, HarnessError> {
    let path = config.resolve(&config.model.checkpoint);
    if !path.exists() {
        return Err(HarnessError::MissingCheckpoint(path));
    }
    let (model, extra) = DenoiserModel::load(&path)?;
    let extra: CheckpointExtra = serde_json::from_value(extra).map_err(|e| HarnessError::Parse {
        what: path.display().to_string(),
        message: format!("checkpoint metadata: {e}"),
    })?;
    Planner::new(config.clone(), model, extra.stats, extra.median_gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub method: Method,
    pub episode: usize,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Normalized planning-space trajectory.
    pub trajectory: Trajectory,
    pub satisfaction: ClassStats,
    pub min_barrier: f64,
    pub violation_mean: f64,
    pub score: f64,
    pub step_time_s: f64,
    pub unsupported: Vec<usize>,
    /// Reverse steps that needed the QP relaxation fallback.
    pub fallback_steps: usize,
    pub steps: Option<Vec<StepRecord>>,
    pub gamma: Option<GammaSchedule>,
}

fn episode_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn safety_mode(method: Method) -> Option<SafetyMode> {
    match method {
        Method::Off => Some(SafetyMode::Off),
        Method::Ros => Some(SafetyMode::RoS),
        Method::Res => Some(SafetyMode::ReS),
        Method::Tvs => Some(SafetyMode::TVS),
        _ => None,
    }
}

struct Plan {
    trajectory: Trajectory,
    step_time_s: f64,
    unsupported: Vec<usize>,
    fallback_steps: usize,
    steps: Option<Vec<StepRecord>>,
    gamma: Option<GammaSchedule>,
}

fn plan(
    planner: &Planner,
    method: Method,
    cond: &Conditioning,
    specs: &[BarrierSpec],
    keep_steps: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Plan, HarnessError> {
    let cfg = &planner.config;
    let opts = SampleOptions {
        inject_noise: cfg.invariance.inject_noise,
    };
    let (model, sched) = (&planner.model, &planner.sched);
    let out = match safety_mode(method) {
        Some(mode) => {
            let mut inv = cfg.invariance.clone();
            inv.mode = mode;
            inv.record_barriers = keep_steps;
            let s = safe_sample(model, sched, Some(cond), specs, &inv, rng)?;
            Plan {
                step_time_s: s.mean_step_time(),
                fallback_steps: s.steps.iter().filter(|r| r.fallback.is_some()).count(),
                trajectory: s.trajectory,
                unsupported: Vec::new(),
                steps: keep_steps.then_some(s.steps),
                gamma: s.gamma,
            }
        }
        None => {
            let b = match method {
                Method::Truncate => truncate_sample(model, sched, Some(cond), specs, opts, rng)?,
                Method::Guided => guided_sample(model, sched, Some(cond), specs, &cfg.guidance, opts, rng)?,
                _ => guided_sample(model, sched, Some(cond), specs, &cfg.guidance_eps, opts, rng)?,
            };
            Plan {
                step_time_s: b.mean_step_time(),
                trajectory: b.trajectory,
                unsupported: b.unsupported,
                fallback_steps: 0,
                steps: None,
                gamma: None,
            }
        }
    };
    Ok(out)
}

/// One benchmark episode. Start and goal come from the episode's own RNG
/// stream, so every method sees the same endpoints and the same noise.
pub fn run_episode(
    planner: &Planner,
    method: Method,
    episode: usize,
    keep_steps: bool,
) -> Result<EpisodeResult, HarnessError> {
    let cfg = &planner.config;
    let mut rng = episode_rng(cfg.seed, episode);
    let (start, goal) = sample_endpoints(&planner.maze, &planner.world_specs(), ENDPOINT_MARGIN, &mut rng)?;
    let cond = planner.conditioning(start, goal)?;
    let specs = planner.plain_specs();
    let p = plan(planner, method, &cond, &specs, keep_steps, &mut rng)?;
    let satisfaction = class_satisfaction(&p.trajectory, &planner.specs)?;
    let world = planner.to_world(&p.trajectory);
    Ok(EpisodeResult {
        method,
        episode,
        start,
        goal,
        min_barrier: satisfaction.per_spec_min.iter().copied().fold(f64::INFINITY, f64::min),
        satisfaction,
        violation_mean: violation_mean(&p.trajectory, &specs)?,
        score: score(&world, &planner.maze, goal, cfg.bench.r_goal, cfg.bench.goal_window),
        trajectory: p.trajectory,
        step_time_s: p.step_time_s,
        unsupported: p.unsupported,
        fallback_steps: p.fallback_steps,
        steps: p.steps,
        gamma: p.gamma,
    })
}

/// Episodes `0..episodes` of one method. With `threads > 1` the episodes are
/// spread over scoped workers; results are always returned in episode order.
pub fn run_method(
    planner: &Planner,
    method: Method,
    episodes: usize,
    threads: usize,
    keep_steps: bool,
) -> Result<Vec<EpisodeResult>, HarnessError> {
    let threads = threads.clamp(1, episodes.max(1));
    if threads == 1 {
        return (0..episodes)
            .map(|e| run_episode(planner, method, e, keep_steps))
            .collect();
    }
    let mut results: Vec<Result<EpisodeResult, HarnessError>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || {
                    (w..episodes)
                        .step_by(threads)
                        .map(|e| run_episode(planner, method, e, keep_steps))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("episode worker panicked"))
            .collect()
    });
    results.sort_by_key(|r| r.as_ref().map_or(0, |e| e.episode));
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub n_episodes: usize,
    pub seed: u64,
    pub s_spec_min: Option<f64>,
    pub s_spec_mean: Option<f64>,
    pub c_spec_min: Option<f64>,
    pub c_spec_mean: Option<f64>,
    pub per_spec_min: Vec<f64>,
    pub violation_mean: f64,
    /// Episodes whose minimum barrier value is negative.
    pub episodes_violating: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub step_time_mean_s: f64,
    pub unsupported_specs: Vec<usize>,
    pub fallback_steps: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

fn min_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.flatten().reduce(f64::min)
}

impl MethodReport {
    pub fn aggregate(method: Method, seed: u64, episodes: &[EpisodeResult]) -> Self {
        let n = episodes.len();
        let score_mean = mean(episodes.iter().map(|e| e.score));
        let score_var = mean(episodes.iter().map(|e| (e.score - score_mean).powi(2)));
        let mean_opt = |f: fn(&ClassStats) -> Option<f64>| {
            let vals: Vec<f64> = episodes.iter().filter_map(|e| f(&e.satisfaction)).collect();
            (!vals.is_empty()).then(|| mean(vals.into_iter()))
        };
        let n_specs = episodes.first().map_or(0, |e| e.satisfaction.per_spec_min.len());
        let mut unsupported: Vec<usize> = episodes.iter().flat_map(|e| e.unsupported.iter().copied()).collect();
        unsupported.sort_unstable();
        unsupported.dedup();
        Self {
            method,
            n_episodes: n,
            seed,
            s_spec_min: min_opt(episodes.iter().map(|e| e.satisfaction.s_min)),
            s_spec_mean: mean_opt(|s| s.s_mean),
            c_spec_min: min_opt(episodes.iter().map(|e| e.satisfaction.c_min)),
            c_spec_mean: mean_opt(|s| s.c_mean),
            per_spec_min: (0..n_specs)
                .map(|s| {
                    episodes
                        .iter()
                        .map(|e| e.satisfaction.per_spec_min[s])
                        .fold(f64::INFINITY, f64::min)
                })
                .collect(),
            violation_mean: mean(episodes.iter().map(|e| e.violation_mean)),
            episodes_violating: episodes.iter().filter(|e| e.min_barrier < 0.0).count(),
            score_mean,
            score_std: score_var.sqrt(),
            step_time_mean_s: mean(episodes.iter().map(|e| e.step_time_s)),
            unsupported_specs: unsupported,
            fallback_steps: episodes.iter().map(|e| e.fallback_steps).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n_episodes: usize,
    pub seed: u64,
    pub methods: Vec<MethodReport>,
}

impl BenchmarkReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Every configured method over the configured episodes.
pub fn run_benchmark(planner: &Planner) -> Result<(BenchmarkReport, Vec<Vec<EpisodeResult>>), HarnessError> {
    let cfg = &planner.config;
    let mut reports = Vec::new();
    let mut all = Vec::new();
    for &method in &cfg.bench.methods {
        log::info!("benchmark: {method} x {} episodes", cfg.bench.episodes);
        let episodes = run_method(planner, method, cfg.bench.episodes, cfg.bench.threads, false)?;
        reports.push(MethodReport::aggregate(method, cfg.seed, &episodes));
        all.push(episodes);
    }
    Ok((
        BenchmarkReport {
            n_episodes: cfg.bench.episodes,
            seed: cfg.seed,
            methods: reports,
        },
        all,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapMethodReport {
    pub method: Method,
    pub trapped_total: usize,
    pub trapped_per_seed: Vec<usize>,
    /// Minimum pocket barrier over every seed's output.
    pub min_barrier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapReport {
    pub seeds: usize,
    pub seed: u64,
    pub gap_threshold: f64,
    pub band: f64,
    pub methods: Vec<TrapMethodReport>,
}

/// Fixed start and goal on either side of the pocket; every method runs on
/// the same seeds. Returns the report and each method's trajectories.
pub fn run_trap_scenario(planner: &Planner) -> Result<(TrapReport, Vec<Vec<Trajectory>>), HarnessError> {
    let cfg = &planner.config;
    let trap = &cfg.trap;
    let pocket = planner.normalize_entries(&trap.pocket)?;
    let cond = planner.conditioning(trap.start, trap.goal)?;
    let gap_threshold = trap.gap_factor * planner.median_gap;
    let mut methods = Vec::new();
    let mut trajectories = Vec::new();
    for &method in &trap.methods {
        let mut per_seed = Vec::with_capacity(trap.seeds);
        let mut trajs = Vec::with_capacity(trap.seeds);
        let mut min_barrier = f64::INFINITY;
        for s in 0..trap.seeds {
            let mut rng = episode_rng(cfg.seed, s);
            let p = plan(planner, method, &cond, &pocket, false, &mut rng)?;
            per_seed.push(count_trapped(&p.trajectory, &pocket, trap.band, gap_threshold)?);
            let (min, _) = super::metrics::spec_satisfaction(&p.trajectory, &pocket)?;
            min_barrier = min_barrier.min(min);
            trajs.push(p.trajectory);
        }
        methods.push(TrapMethodReport {
            method,
            trapped_total: per_seed.iter().sum(),
            trapped_per_seed: per_seed,
            min_barrier,
        });
        trajectories.push(trajs);
    }
    Ok((
        TrapReport {
            seeds: trap.seeds,
            seed: cfg.seed,
            gap_threshold,
            band: trap.band,
            methods,
        },
        trajectories,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Architecture;
    use crate::harness::{BenchConfig, DataConfig, ScheduleConfig, TrapConfig};

    fn small_planner() -> Planner {
        let mut config = HarnessConfig {
            schedule: ScheduleConfig {
                steps: 8,
                beta_min: 1e-3,
                beta_max: 0.5,
            },
            bench: BenchConfig {
                episodes: 3,
                methods: Method::ALL.to_vec(),
                ..BenchConfig::default()
            },
            trap: TrapConfig {
                seeds: 2,
                ..TrapConfig::default()
            },
            ..HarnessConfig::default()
        };
        config.invariance.n_extra = 3;
        // With 8 steps the default TVS margin asks for more than one QP step can give.
        config.invariance.gamma_margin = 0.0;
        config.data = DataConfig {
            n_traj: 20,
            horizon: 8,
            ..DataConfig::default()
        };
        let maze = Maze::from_config(&config.maze).unwrap();
        let data = super::super::generate_dataset(&maze, &config.data, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let arch = Architecture {
            horizon: 8,
            state_dim: 2,
            time_embedding: 8,
            hidden: 16,
            hidden_layers: 1,
        };
        let model = DenoiserModel::random(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Planner::new(config, model, data.stats.clone(), data.median_gap).unwrap()
    }

    #[test]
    fn benchmark_is_deterministic_and_finite() {
        let planner = small_planner();
        let (a, eps) = run_benchmark(&planner).unwrap();
        let (b, _) = run_benchmark(&planner).unwrap();
        assert_eq!(a.methods.len(), 7);
        for (x, y) in a.methods.iter().zip(&b.methods) {
            assert_eq!(x.n_episodes, 3);
            assert_eq!(x.s_spec_min, y.s_spec_min);
            assert_eq!(x.c_spec_mean, y.c_spec_mean);
            assert_eq!(x.score_mean, y.score_mean);
            assert!(x.score_mean.is_finite() && x.step_time_mean_s > 0.0);
        }
        // Every method sees the same endpoints.
        for e in 0..3 {
            assert!(eps.iter().all(|m| m[e].start == eps[0][e].start && m[e].goal == eps[0][e].goal));
        }
        for m in [Method::Ros, Method::Res, Method::Tvs] {
            assert!(a.method(m).unwrap().per_spec_min.iter().all(|v| *v >= -1e-5), "{m} {:?}", a.method(m).unwrap().per_spec_min);
        }
    }

    #[test]
    fn threaded_run_matches_serial() {
        let planner = small_planner();
        let serial = run_method(&planner, Method::Ros, 4, 1, false).unwrap();
        let threaded = run_method(&planner, Method::Ros, 4, 3, false).unwrap();
        for (s, t) in serial.iter().zip(&threaded) {
            assert_eq!(s.episode, t.episode);
            assert_eq!(s.trajectory, t.trajectory);
        }
    }

    #[test]
    fn trap_scenario_runs() {
        let planner = small_planner();
        let (report, trajs) = run_trap_scenario(&planner).unwrap();
        assert_eq!(report.methods.len(), 3);
        assert_eq!(trajs[0].len(), 2);
        assert!(report.methods[0].min_barrier >= -1e-5);
        let mut empty = planner.clone();
        empty.config.trap.pocket.clear();
        let (report, _) = run_trap_scenario(&empty).unwrap();
        assert!(report.methods.iter().all(|m| m.trapped_total == 0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut planner = small_planner();
        planner.config.out_dir = dir.path().to_path_buf();
        assert!(matches!(load_planner(&planner.config), Err(HarnessError::MissingCheckpoint(_))));
        let data = Dataset {
            horizon: 8,
            dim: 2,
            stats: planner.stats.clone(),
            median_gap: planner.median_gap,
            trajectories: vec![],
        };
        Planner::save_checkpoint(&planner.config, &planner.model, &data, None).unwrap();
        let back = load_planner(&planner.config).unwrap();
        assert_eq!(back.model, planner.model);
        assert_eq!(back.stats, planner.stats);
    }
}
