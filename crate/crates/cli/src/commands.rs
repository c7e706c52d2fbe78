use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use cpp_core::config::Config;
use cpp_core::coverage::{generate_scenario, load_map, load_scenario, Scenario, ScenarioFile};
use cpp_core::dynamics::{Action, UavState};
use cpp_core::env::{FixedTargets, GeneratedScenarios, ScenarioSource, World};
use cpp_core::eval::{
    batch_eval, paired_rpd, replay, summarize, write_csv, EpisodeStats, GroundedActor, RandomActor,
};
use cpp_core::grid::{parse_map, random_map, Cell, GridMap, RandomMapConfig};
use cpp_core::heuristic::{run_heuristic, HeuristicActor};
use cpp_core::par::Execution;
use cpp_core::render::Scene;
use cpp_core::safety::{mask, MaskLevel};
use cpp_core::trace::{read_jsonl, write_jsonl};
use cpp_core::trainer::{train as train_policy, write_curves, PolicyActor, TabularPolicy};

use crate::error::{io_err, CliError, CliResult};
use crate::{EvalArgs, HeuristicArgs, Report, RenderArgs, RolloutArgs, TrainArgs};

const PROBE_MAP: &str = "cpp-map v1\nsize 3\nL..\n...\n...\n";

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn read_map(path: &Path) -> CliResult<GridMap> {
    if !path.is_file() {
        return Err(CliError::Io {
            path: path.into(),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    Ok(load_map(path)?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Expands directories to their `*.map` files, sorted by name.
fn map_files(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "map"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Invalid("no map files found".into()));
    }
    Ok(out)
}

fn worlds(paths: &[PathBuf], cfg: &Config) -> CliResult<Vec<Arc<World>>> {
    map_files(paths)?
        .iter()
        .map(|p| Ok(Arc::new(World::new(stem(p), Arc::new(read_map(p)?), cfg.fov))))
        .collect()
}

fn scenario_world(path: &Path, cfg: &Config) -> CliResult<(Arc<World>, Scenario, ScenarioFile)> {
    let (s, file) = load_scenario(path)?;
    s.validate(cfg.battery.b_max, cfg.scenario.beta)?;
    let world = Arc::new(World::new(stem(&file.map), s.map.clone(), cfg.fov));
    Ok((world, s, file))
}

fn stats_line(s: &EpisodeStats) -> String {
    format!(
        "steps {}  solved {}  crashed {}  truncated {}  coverage {:.3}  passes {}  return {:.4}\n",
        s.steps, s.solved, s.crashed, s.truncated, s.coverage_ratio, s.n_passes, s.ret
    )
}

pub fn map_check(files: &[PathBuf], cfg: &Config) -> CliResult<Report> {
    let mut text = String::new();
    let mut rows = Vec::new();
    for path in files {
        let map = read_map(path)?;
        let world = World::new(stem(path), Arc::new(map), cfg.fov);
        let map = &world.map;
        let count = |f: &dyn Fn(Cell) -> bool| map.cells().filter(|&c| f(c)).count();
        let landing = map.landing_cells().len();
        let nfz = count(&|c| map.is_nfz(c));
        let high = count(&|c| map.is_high_obstacle(c));
        let low = count(&|c| map.is_obstacle(c) && !map.is_high_obstacle(c));
        let flyable = map.n_cells() - nfz;
        let reachable = map.cells().filter(|&c| world.dfield.get(c).is_some()).count();
        if landing == 0 {
            log::warn!("{}: no landing cells", path.display());
        }
        let _ = writeln!(
            text,
            "{}: {m}x{m}, landing {landing}, nfz {nfz} (high obstacles {high}), low obstacles {low}, \
             reachable {reachable}/{flyable}",
            path.display(),
            m = map.size()
        );
        rows.push(json!({
            "file": path,
            "size": map.size(),
            "landing": landing,
            "nfz": nfz,
            "high_obstacles": high,
            "low_obstacles": low,
            "flyable": flyable,
            "reachable": reachable,
        }));
    }
    Ok(Report {
        text,
        json: json!({ "maps": rows }),
    })
}

pub fn map_gen(size: usize, landing: usize, out: Option<&Path>, seed: u64) -> CliResult<Report> {
    if size == 0 || landing == 0 || landing > size * size {
        return Err(CliError::Invalid(format!(
            "need size >= 1 and 1 <= landing <= {}",
            size * size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RandomMapConfig {
        landing_cells: landing,
        ..Default::default()
    };
    let text = random_map(size, &cfg, &mut rng).to_text();
    match out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            Ok(Report {
                text: format!("wrote {}\n", p.display()),
                json: json!({ "out": p, "size": size, "seed": seed }),
            })
        }
        None => Ok(Report {
            json: json!({ "map": text, "size": size, "seed": seed }),
            text,
        }),
    }
}

/// Map path as stored in a scenario file: relative to the scenario's
/// directory when the map lives under it, absolute otherwise.
fn map_ref(map: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    let abs = fs::canonicalize(map).map_err(io_err(map))?;
    let dir = out
        .and_then(|o| o.parent())
        .map(|d| if d.as_os_str().is_empty() { Path::new(".") } else { d })
        .and_then(|d| fs::canonicalize(d).ok());
    Ok(match dir.and_then(|d| abs.strip_prefix(d).ok().map(Path::to_path_buf)) {
        Some(rel) => rel,
        None => abs,
    })
}

pub fn scenario_gen(map: &Path, out: Option<&Path>, cfg: &Config, seed: u64) -> CliResult<Report> {
    let grid = Arc::new(read_map(map)?);
    if let Some(o) = out.and_then(|o| o.parent()).filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(o).map_err(io_err(o))?;
    }
    let s = generate_scenario(grid, seed, &cfg.generator, cfg.battery.b_max, cfg.scenario.beta)?;
    let file = ScenarioFile::from_scenario(&s, map_ref(map, out)?, Some(seed));
    let body = serde_json::to_string_pretty(&file).map_err(cpp_core::Error::from)?;
    let summary = format!(
        "{} targets, p0 {}, b0 {}, timeout {}\n",
        file.targets.len(),
        file.p0,
        file.b0,
        file.timeout
    );
    match out {
        Some(p) => {
            write_file(p, format!("{body}\n").as_bytes())?;
            Ok(Report {
                text: format!("wrote {}: {summary}", p.display()),
                json: json!({ "out": p, "targets": file.targets.len(), "p0": file.p0, "b0": file.b0 }),
            })
        }
        None => Ok(Report {
            text: format!("{body}\n"),
            json: serde_json::to_value(&file).map_err(cpp_core::Error::from)?,
        }),
    }
}

pub fn heuristic(a: &HeuristicArgs, cfg: &Config) -> CliResult<Report> {
    let (world, s, _) = scenario_world(&a.scenario, cfg)?;
    let want_trace = a.trace.is_some() || a.render.is_some() || a.ascii;
    let r = run_heuristic(world, s, cfg.env_config(), want_trace)?;
    let mut text = stats_line(&r.stats);
    if let Some(trace) = &r.trace {
        if let Some(p) = &a.trace {
            let mut w = create(p)?;
            write_jsonl(&mut w, trace)?;
            w.flush().map_err(io_err(p))?;
        }
        let scene = Scene::from_trace(trace)?;
        if let Some(p) = &a.render {
            write_file(p, &scene.ppm(16))?;
        }
        if a.ascii {
            text.push_str(&scene.ascii());
        }
    }
    for (i, p) in r.passes.iter().enumerate() {
        let _ = writeln!(
            text,
            "pass {}: take-off {:?} landing {:?} covered {}",
            i + 1,
            p.takeoff,
            p.landing,
            p.covered
        );
    }
    Ok(Report {
        text,
        json: json!({
            "stats": r.stats,
            "passes": r.passes,
            "actions": r.actions,
        }),
    })
}

fn parse_actions(arg: &str) -> CliResult<Vec<Action>> {
    let body = match arg.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).map_err(io_err(path))?,
        None => arg.to_string(),
    };
    body.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Action>().map_err(CliError::Invalid))
        .collect()
}

pub fn rollout(a: &RolloutArgs, cfg: &Config, seed: u64) -> CliResult<Report> {
    let (world, s, _) = scenario_world(&a.scenario, cfg)?;
    cfg.observation.validate_for(world.map.size())?;
    let script = parse_actions(&a.actions)?;
    let mut obs_out = a.obs.as_deref().map(create).transpose()?;
    let mut n_obs = 0usize;
    let r = replay(world, s, cfg.env_config(), &script, seed, |o| {
        n_obs += 1;
        if let Some(w) = obs_out.as_mut() {
            o.write_to(w)?;
        }
        Ok(())
    })?;
    if let (Some(w), Some(p)) = (obs_out.as_mut(), &a.obs) {
        w.flush().map_err(io_err(p))?;
    }
    if let (Some(trace), Some(p)) = (&r.trace, &a.trace) {
        let mut w = create(p)?;
        write_jsonl(&mut w, trace)?;
        w.flush().map_err(io_err(p))?;
    }
    if r.actions.len() < script.len() {
        log::warn!(
            "episode ended after {} of {} scripted actions",
            r.actions.len(),
            script.len()
        );
    }
    Ok(Report {
        text: stats_line(&r.stats),
        json: json!({ "stats": r.stats, "played": r.actions.len(), "observations": n_obs }),
    })
}

pub fn train(a: &TrainArgs, mut cfg: Config, seed: Option<u64>, exec: Execution) -> CliResult<Report> {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let source: Box<dyn ScenarioSource> = match &a.scenario {
        Some(path) => {
            let (world, s, file) = scenario_world(path, &cfg)?;
            Box::new(FixedTargets {
                world,
                targets: file.targets,
                b_max: cfg.battery.b_max,
                beta: cfg.scenario.beta,
                objective: cfg.generator.objective,
                timeout: Some(s.timeout),
            })
        }
        None => Box::new(GeneratedScenarios {
            worlds: worlds(&a.maps, &cfg)?,
            generator: cfg.generator.clone(),
            b_max: cfg.battery.b_max,
            beta: cfg.scenario.beta,
        }),
    };
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let env_cfg = cfg.env_config();
    let report = train_policy(TabularPolicy::new(), source.as_ref(), &env_cfg, &cfg.train, exec, |row| {
        log::info!(
            "iter {:>4} step {:>8} episodes {:>4} solved {:.3} crash {:.3} steps {:.1} loss {:.4}",
            row.iteration,
            row.step,
            row.episodes,
            row.solved_ratio,
            row.crash_ratio,
            row.episode_steps,
            row.loss
        );
    })?;

    let curves = a.out.join("curves.csv");
    let mut w = create(&curves)?;
    write_curves(&mut w, &report.curves)?;
    w.flush().map_err(io_err(&curves))?;
    let ckpt = a.out.join("policy.json");
    let mut w = create(&ckpt)?;
    report.model.save(&mut w)?;
    w.flush().map_err(io_err(&ckpt))?;
    write_file(&a.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let last = report.curves.last().cloned().unwrap_or_default();
    Ok(Report {
        text: format!(
            "{} iterations, {} env steps, {} table entries\n\
             last iteration: solved {:.3}, crash {:.3}, episode steps {:.1}\n\
             wrote {}, {}\n",
            report.curves.len(),
            report.env_steps,
            report.model.len(),
            last.solved_ratio,
            last.crash_ratio,
            last.episode_steps,
            curves.display(),
            ckpt.display()
        ),
        json: json!({
            "iterations": report.curves.len(),
            "env_steps": report.env_steps,
            "entries": report.model.len(),
            "last": last,
            "curves": curves,
            "checkpoint": ckpt,
        }),
    })
}

fn load_policy(path: &str) -> CliResult<TabularPolicy> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(TabularPolicy::load(BufReader::new(f))?)
}

fn run_actor(
    arg: &str,
    sc: &[(Arc<World>, Scenario)],
    cfg: &Config,
    seed: u64,
    exec: Execution,
) -> CliResult<Vec<EpisodeStats>> {
    let env_cfg = cfg.env_config();
    let stats = match arg.split_once(':') {
        None if arg == "heuristic" => batch_eval(sc, env_cfg, HeuristicActor::default, seed, exec)?,
        None if arg == "random" => batch_eval(sc, env_cfg, || RandomActor, seed, exec)?,
        None if arg == "grounded" => batch_eval(sc, env_cfg, || GroundedActor, seed, exec)?,
        Some((kind @ ("policy" | "greedy"), path)) => {
            let model = load_policy(path)?;
            let deterministic = kind == "greedy";
            batch_eval(
                sc,
                env_cfg,
                || PolicyActor {
                    model: &model,
                    deterministic,
                },
                seed,
                exec,
            )?
        }
        _ => return Err(CliError::Usage(format!("unknown actor `{arg}`"))),
    };
    Ok(stats)
}

pub fn eval(a: &EvalArgs, cfg: &Config, seed: Option<u64>, exec: Execution) -> CliResult<Report> {
    let n = a.n.unwrap_or(cfg.eval.episodes);
    let seed = seed.unwrap_or(cfg.eval.seed);
    let source = GeneratedScenarios {
        worlds: worlds(&a.maps, cfg)?,
        generator: cfg.generator.clone(),
        b_max: cfg.battery.b_max,
        beta: cfg.scenario.beta,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = (0..n)
        .map(|_| source.sample(&mut rng))
        .collect::<Result<Vec<_>, _>>()?;

    let mut runs = Vec::with_capacity(a.actors.len());
    for arg in &a.actors {
        runs.push((arg.as_str(), run_actor(arg, &sc, cfg, seed, exec)?));
    }
    let reference = runs.iter().find(|(s, _)| *s == "heuristic").map(|(_, r)| r);

    let mut text = format!("{n} episodes, seed {seed}; std is over episodes\n");
    let mut rows = Vec::new();
    for (arg, stats) in &runs {
        let s = summarize(stats);
        let rpd = reference.filter(|_| *arg != "heuristic").map(|r| paired_rpd(stats, r));
        let _ = write!(
            text,
            "{arg:<24} solved {:.3}  crash {:.3}  steps {:.1} ± {:.1}  coverage {:.3}",
            s.solved_rate, s.crash_rate, s.mean_steps, s.std_steps, s.mean_coverage
        );
        if let Some(r) = &rpd {
            let _ = write!(text, "  rpd {:+.3} ± {:.3} over {}", r.mean, r.std, r.joint);
        }
        text.push('\n');
        rows.push(json!({ "actor": arg, "summary": s, "rpd_vs_heuristic": rpd }));
    }
    if let Some(p) = &a.out {
        let borrowed: Vec<(&str, &[EpisodeStats])> =
            runs.iter().map(|(s, r)| (*s, r.as_slice())).collect();
        let mut w = create(p)?;
        write_csv(&mut w, &borrowed)?;
        w.flush().map_err(io_err(p))?;
        let _ = writeln!(text, "wrote {}", p.display());
    }
    Ok(Report {
        text,
        json: json!({ "episodes": n, "seed": seed, "actors": rows, "out": a.out }),
    })
}

pub fn render(a: &RenderArgs) -> CliResult<Report> {
    let f = File::open(&a.trace).map_err(io_err(&a.trace))?;
    let records = read_jsonl(BufReader::new(f))?;
    let scene = Scene::from_trace(&records)?;
    let mut text = String::new();
    if let Some(p) = &a.out {
        write_file(p, &scene.ppm(a.scale))?;
        let _ = writeln!(text, "wrote {}", p.display());
    }
    let ascii = scene.ascii();
    if a.ascii || a.out.is_none() {
        text.push_str(&ascii);
    }
    let passes = scene.path.iter().map(|&(_, p)| p).max().unwrap_or(0);
    Ok(Report {
        text,
        json: json!({
            "steps": records.len() - 1,
            "passes": passes,
            "targets": scene.targets0.len(),
            "covered": scene.covered.len(),
            "out": a.out,
            "ascii": ascii.lines().collect::<Vec<_>>(),
        }),
    })
}

/// Parses `landed,b=1,p=0:0`; `flying` or `airborne` for the other flag.
fn parse_state(arg: &str, map: &GridMap) -> CliResult<UavState> {
    let mut landed = None;
    let mut battery = None;
    let mut position = None;
    let bad = |t: &str| CliError::Invalid(format!("bad state token `{t}`"));
    for tok in arg.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok.split_once('=') {
            None if tok == "landed" => landed = Some(true),
            None if tok == "flying" || tok == "airborne" => landed = Some(false),
            Some(("b", v)) => battery = Some(v.parse::<u32>().map_err(|_| bad(tok))?),
            Some(("p", v)) => {
                let (x, y) = v.split_once(':').ok_or_else(|| bad(tok))?;
                position = Some(Cell::new(
                    x.parse().map_err(|_| bad(tok))?,
                    y.parse().map_err(|_| bad(tok))?,
                ));
            }
            _ => return Err(bad(tok)),
        }
    }
    let position = match position {
        Some(p) => p,
        None => *map
            .landing_cells()
            .first()
            .ok_or_else(|| CliError::Invalid("map has no landing cell; give p=x:y".into()))?,
    };
    if !map.contains(position) {
        return Err(CliError::Invalid(format!("position {position} is off the map")));
    }
    let battery = battery.ok_or_else(|| CliError::Invalid("state needs b=<battery>".into()))?;
    Ok(UavState::new(position, battery, landed.unwrap_or(true)))
}

pub fn mask_probe(arg: &str, map: Option<&Path>, cfg: &Config) -> CliResult<Report> {
    let grid = match map {
        Some(p) => read_map(p)?,
        None => parse_map(PROBE_MAP)?,
    };
    let state = parse_state(arg, &grid)?;
    let world = World::new("probe", Arc::new(grid), cfg.fov);
    let b_max = cfg.battery.b_max;
    if state.battery > b_max {
        return Err(CliError::Invalid(format!("b = {} exceeds b_max = {b_max}", state.battery)));
    }
    let d = world.dfield.get(state.position);
    let mut text = format!(
        "p {}  b {}  {}  landing distance {}\n",
        state.position,
        state.battery,
        if state.landed { "landed" } else { "flying" },
        d.map_or("unreachable".to_string(), |d| d.to_string())
    );
    let mut levels = serde_json::Map::new();
    for level in [MaskLevel::Valid, MaskLevel::Immediate, MaskLevel::Invariant] {
        let m = mask(&world.map, &world.dfield, &state, level, b_max);
        let names: Vec<&str> = m.actions().map(Action::name).collect();
        let _ = writeln!(text, "{:<10} {}", level.name(), names.join(" "));
        let detail: serde_json::Map<String, Value> = Action::ALL
            .iter()
            .map(|a| (a.name().to_string(), Value::Bool(m.allows(*a))))
            .collect();
        levels.insert(level.name().into(), Value::Object(detail));
    }
    Ok(Report {
        text,
        json: json!({
            "state": state,
            "b_max": b_max,
            "landing_distance": d,
            "masks": levels,
        }),
    })
}

pub fn config_dump(cfg: &Config) -> CliResult<Report> {
    Ok(Report {
        text: cfg.to_toml()?,
        json: serde_json::to_value(cfg).map_err(cpp_core::Error::from)?,
    })
}
