//! The pipeline stages behind the command-line subcommands.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    emit_json, emit_plot, emit_report, emit_trajectory, generate_dataset, load_planner, read_json,
    run_benchmark, run_episode, run_trap_scenario, ArtifactHeader, Dataset, HarnessConfig,
    HarnessError, Maze, Method, PlotLayer, Planner,
};
use crate::diffusion::{train, DenoiserModel};

/// Generates the dataset and a preview plot. Returns a JSON summary.
pub fn gen_data(cfg: &HarnessConfig) -> Result<serde_json::Value, HarnessError> {
    let maze = Maze::from_config(&cfg.maze)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = generate_dataset(&maze, &cfg.data, &mut rng)?;
    let path = cfg.resolve(&cfg.data.path);
    emit_json(&path, &cfg.header("dataset"), &data)?;
    let layers: Vec<PlotLayer> = data
        .trajectories
        .iter()
        .take(20)
        .enumerate()
        .map(|(i, t)| PlotLayer {
            label: format!("sample {i}"),
            points: data.to_world(t),
        })
        .collect();
    let plot = cfg.out_dir.join("dataset.svg");
    let specs: Vec<_> = maze.specs().iter().map(|c| c.spec.clone()).collect();
    emit_plot(&plot, &cfg.header("plot"), &maze, &specs, &layers)?;
    Ok(json!({
        "dataset": path,
        "plot": plot,
        "trajectories": data.trajectories.len(),
        "median_gap": data.median_gap,
    }))
}

/// Trains the denoiser on the dataset written by [`gen_data`] and saves a checkpoint.
pub fn train_model(cfg: &HarnessConfig) -> Result<serde_json::Value, HarnessError> {
    let path = cfg.resolve(&cfg.data.path);
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "dataset {} not found; run gen-data first",
            path.display()
        )));
    }
    let data = read_json::<Dataset>(&path)?.body;
    let sched = cfg.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DenoiserModel::random(cfg.model.architecture(data.horizon, data.dim), &mut rng)?;
    let log = train(&mut model, &data.trajectories, &sched, &cfg.train.to_train_config(), &mut rng)?;
    Planner::save_checkpoint(cfg, &model, &data, Some(&log))?;
    let log_path = cfg.out_dir.join("training.json");
    emit_json(&log_path, &cfg.header("training"), &log)?;
    Ok(json!({
        "checkpoint": cfg.resolve(&cfg.model.checkpoint),
        "final_loss": log.final_loss(),
        "steps": log.steps,
    }))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, header: &ArtifactHeader, rows: &[T]) -> Result<(), HarnessError> {
    let io = |e| HarnessError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{}", json!({ "header": header })).map_err(io)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Plans `episodes` episodes (default 1) with `method` (default RoS).
pub fn plan(cfg: &HarnessConfig, method: Option<Method>, episodes: Option<usize>) -> Result<serde_json::Value, HarnessError> {
    let planner = load_planner(cfg)?;
    let method = method.unwrap_or(Method::Ros);
    let mut written = Vec::new();
    for e in 0..episodes.unwrap_or(1) {
        let result = run_episode(&planner, method, e, true)?;
        let stem = format!("plan_{method}_{e}");
        let csv = cfg.out_dir.join(format!("{stem}.csv"));
        emit_trajectory(&csv, &cfg.header("trajectory"), &result.trajectory)?;
        let world = planner.to_world(&result.trajectory);
        let world_csv = cfg.out_dir.join(format!("{stem}_world.csv"));
        let world_tau = crate::diffusion::Trajectory::from_rows(
            &world.iter().map(|p| p.to_vec()).collect::<Vec<_>>(),
        )?;
        emit_trajectory(&world_csv, &cfg.header("trajectory_world"), &world_tau)?;
        if let Some(steps) = &result.steps {
            write_jsonl(&cfg.out_dir.join(format!("{stem}_steps.jsonl")), &cfg.header("step_log"), steps)?;
        }
        let mut summary = result.clone();
        summary.steps = None;
        emit_report(&cfg.out_dir.join(format!("{stem}.json")), &cfg.header("episode"), &summary)?;
        emit_plot(
            &cfg.out_dir.join(format!("{stem}.svg")),
            &cfg.header("plot"),
            &planner.maze,
            &planner.world_specs(),
            &[PlotLayer {
                label: format!("{method} episode {e}"),
                points: world,
            }],
        )?;
        written.push(json!({
            "episode": e,
            "trajectory": csv,
            "min_barrier": result.min_barrier,
            "score": result.score,
        }));
    }
    Ok(json!({ "method": method, "episodes": written }))
}

pub fn bench(cfg: &HarnessConfig) -> Result<serde_json::Value, HarnessError> {
    let planner = load_planner(cfg)?;
    let (report, episodes) = run_benchmark(&planner)?;
    let path = cfg.out_dir.join("report.json");
    emit_report(&path, &cfg.header("benchmark"), &report)?;
    let layers: Vec<PlotLayer> = episodes
        .iter()
        .filter_map(|m| m.first())
        .map(|e| PlotLayer {
            label: format!("{} episode 0", e.method),
            points: planner.to_world(&e.trajectory),
        })
        .collect();
    emit_plot(&cfg.out_dir.join("bench.svg"), &cfg.header("plot"), &planner.maze, &planner.world_specs(), &layers)?;
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

pub fn trap(cfg: &HarnessConfig) -> Result<serde_json::Value, HarnessError> {
    let planner = load_planner(cfg)?;
    let (report, trajectories) = run_trap_scenario(&planner)?;
    emit_report(&cfg.out_dir.join("trap_report.json"), &cfg.header("trap"), &report)?;
    for (m, trajs) in report.methods.iter().zip(&trajectories) {
        for (s, t) in trajs.iter().enumerate() {
            let world = planner.to_world(t).iter().map(|p| p.to_vec()).collect::<Vec<_>>();
            let world = crate::diffusion::Trajectory::from_rows(&world)?;
            emit_trajectory(&cfg.out_dir.join(format!("trap_{}_{s}.csv", m.method)), &cfg.header("trajectory_world"), &world)?;
        }
    }
    let pocket: Vec<_> = crate::specs::build_spec_set(&cfg.trap.pocket)?
        .into_iter()
        .map(|c| c.spec)
        .collect();
    let layers: Vec<PlotLayer> = report
        .methods
        .iter()
        .zip(&trajectories)
        .filter_map(|(m, t)| {
            t.first().map(|t| PlotLayer {
                label: format!("{} seed 0 (trapped {})", m.method, m.trapped_per_seed[0]),
                points: planner.to_world(t),
            })
        })
        .collect();
    emit_plot(&cfg.out_dir.join("trap.svg"), &cfg.header("plot"), &planner.maze, &pocket, &layers)?;
    Ok(serde_json::to_value(&report).expect("report serializes"))
}
