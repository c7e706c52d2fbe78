use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

use cpp_core::coverage::{load_scenario, FovConfig};
use cpp_core::env::{EnvConfig, World};
use cpp_core::eval::replay;
use cpp_core::observation::Observation;
use cpp_core::trace::write_jsonl;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn maps() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/maps")
}

fn cpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpp"))
        .args(args)
        .env_remove("CPP_CONFIG")
        .output()
        .expect("spawn cpp")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&o.stdout));
    })
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn obs_digests(path: &Path) -> Vec<String> {
    let mut r = BufReader::new(fs::File::open(path).unwrap());
    let mut out = Vec::new();
    while !r.fill_buf().unwrap().is_empty() {
        let o = Observation::read_from(&mut r).unwrap();
        out.push(sha_hex(&o.to_bytes()));
    }
    out
}

fn run_golden(dir: &Path) -> (Vec<u8>, Vec<String>) {
    let trace = dir.join("trace.jsonl");
    let obs = dir.join("obs.bin");
    let script = format!("@{}", golden("script.txt").display());
    let o = cpp(&[
        "rollout",
        "--scenario",
        golden("village.scenario.json").to_str().unwrap(),
        "--actions",
        &script,
        "--trace",
        trace.to_str().unwrap(),
        "--obs",
        obs.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (fs::read(trace).unwrap(), obs_digests(&obs))
}

#[test]
fn scripted_rollout_matches_golden_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (trace, digests) = run_golden(dir.path());
    assert!(trace == fs::read(golden("trace.jsonl")).unwrap(), "trace differs from golden");
    let expected: Vec<String> = fs::read_to_string(golden("obs.sha256"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(digests.len(), 101);
    assert_eq!(digests, expected);
}

#[test]
fn library_replay_reproduces_golden_trace() {
    let (s, file) = load_scenario(&golden("village.scenario.json")).unwrap();
    let world = std::sync::Arc::new(World::new("village_12", s.map.clone(), FovConfig::default()));
    let script: Vec<_> = fs::read_to_string(golden("script.txt"))
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(script.len(), 100);
    assert_eq!(file.targets.len(), 2);
    let mut digests = Vec::new();
    let r = replay(world, s, EnvConfig::default(), &script, 0, |o| {
        digests.push(sha_hex(&o.to_bytes()));
        Ok(())
    })
    .unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, r.trace.as_deref().unwrap()).unwrap();
    assert!(buf == fs::read(golden("trace.jsonl")).unwrap());
    assert_eq!(digests.join("\n") + "\n", fs::read_to_string(golden("obs.sha256")).unwrap());
    // Reward telescopes: r_c * covered - r_m * T.
    assert!((r.stats.ret - (0.01 * 1.0 - 0.02 * 100.0)).abs() < 1e-12);
}

#[test]
fn map_check_good_map() {
    let o = cpp(&["map", "check", maps().join("village_12.map").to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["maps"][0]["size"], 12);
    assert_eq!(v["maps"][0]["landing"], 3);
}

#[test]
fn map_check_bad_map_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.map");
    fs::write(&p, "cpp-map v1\nsize 3\nL..\n.Q.\n...\n").unwrap();
    let o = cpp(&["map", "check", p.to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 2);
    assert_eq!(json(&o)["kind"], "validation");
}

#[test]
fn missing_file_is_a_runtime_error() {
    let o = cpp(&["map", "check", "/definitely/not/here.map"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_errors_exit_one() {
    let o = cpp(&["eval"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--maps"));
    assert_eq!(code(&cpp(&["frobnicate"])), 1);
    assert_eq!(code(&cpp(&["map", "check", "x.map", "--no-such-flag"])), 1);
    assert_eq!(code(&cpp(&["--help"])), 0);
}

#[test]
fn mask_probe_landed_with_one_step_left() {
    let o = cpp(&["mask", "probe", "--state", "landed,b=1", "--json"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    let inv = &v["masks"]["invariant"];
    assert_eq!(inv["charge"], true);
    assert_eq!(inv["take_off"], false);
    assert_eq!(v["masks"]["valid"]["take_off"], true);
    for a in ["east", "north", "west", "south", "land"] {
        assert_eq!(inv[a], false, "{a}");
    }
}

#[test]
fn mask_flag_sets_the_level() {
    let o = cpp(&["config", "dump", "--mask", "immediate", "--json"]);
    assert_eq!(json(&o)["safety"]["mask"], "immediate");
    assert_eq!(code(&cpp(&["config", "dump", "--mask", "bogus"])), 1);
}

#[test]
fn config_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = cpp(&["config", "dump", "--set", "battery.b_max=64", "--set", "train.discount.gamma_s=1000.0", "--set", "reward.r_c=0.5"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let p = dir.path().join("c.toml");
    fs::write(&p, &first.stdout).unwrap();
    let second = cpp(&["config", "dump", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&second), 0);
    assert_eq!(first.stdout, second.stdout);
    let env = Command::new(env!("CARGO_BIN_EXE_cpp"))
        .args(["config", "dump", "--json"])
        .env("CPP_CONFIG", &p)
        .env("CPP__FOV__HALF_WIDTH", "4")
        .output()
        .unwrap();
    let v = json(&env);
    assert_eq!(v["battery"]["b_max"], 64);
    assert_eq!(v["fov"]["half_width"], 4);
}

#[test]
fn invalid_config_exits_two() {
    assert_eq!(code(&cpp(&["config", "dump", "--set", "battery.b_max=1"])), 2);
    assert_eq!(code(&cpp(&["config", "dump", "--set", "battery.nonsense=3"])), 2);
    assert_eq!(code(&cpp(&["config", "dump", "--set", "train.discount.mode=\"fixed\""])), 2);
}

#[test]
fn scenario_gen_then_heuristic_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.json");
    let t = dir.path().join("t.jsonl");
    let img = dir.path().join("t.ppm");
    let map = maps().join("campus_16.map");
    let o = cpp(&["scenario", "gen", "--map", map.to_str().unwrap(), "--out", s.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cpp(&[
        "heuristic",
        "--scenario",
        s.to_str().unwrap(),
        "--trace",
        t.to_str().unwrap(),
        "--render",
        img.to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["stats"]["solved"], true);
    let steps = v["stats"]["steps"].as_u64().unwrap();
    assert_eq!(fs::read_to_string(&t).unwrap().lines().count() as u64, steps + 1);
    assert!(fs::read(&img).unwrap().starts_with(b"P6\n256 256\n255\n"));

    let o = cpp(&["render", "--trace", t.to_str().unwrap(), "--ascii"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(text.contains('@') && !text.contains('x'));
}

#[test]
fn scenario_gen_is_deterministic_given_seed() {
    let map = maps().join("harbor_20.map");
    let a = cpp(&["scenario", "gen", "--map", map.to_str().unwrap(), "--seed", "11"]);
    let b = cpp(&["scenario", "gen", "--map", map.to_str().unwrap(), "--seed", "11"]);
    let c = cpp(&["scenario", "gen", "--map", map.to_str().unwrap(), "--seed", "12"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn masked_script_action_is_rejected() {
    let o = cpp(&[
        "rollout",
        "--scenario",
        golden("village.scenario.json").to_str().unwrap(),
        "--actions",
        "take_off,south",
        "--json",
    ]);
    assert_eq!(code(&o), 2);
    assert!(json(&o)["error"].as_str().unwrap().contains("south"));
}

#[test]
fn eval_is_deterministic_and_thread_count_free() {
    let dir = tempfile::tempdir().unwrap();
    let a_csv = dir.path().join("a.csv");
    let b_csv = dir.path().join("b.csv");
    let m = maps();
    let run = |jobs: &str, out: &Path| {
        cpp(&[
            "eval",
            "--maps",
            m.to_str().unwrap(),
            "--actors",
            "heuristic,random",
            "--n",
            "40",
            "--seed",
            "7",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
            "--json",
        ])
    };
    let a = run("1", &a_csv);
    let b = run("3", &b_csv);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(json(&a)["actors"], json(&b)["actors"]);
    assert_eq!(fs::read(&a_csv).unwrap(), fs::read(&b_csv).unwrap());
    let v = json(&a);
    assert_eq!(v["actors"][0]["summary"]["solved_rate"], 1.0);
    assert_eq!(v["actors"][1]["summary"]["crash_rate"], 0.0);
    assert_eq!(fs::read_to_string(&a_csv).unwrap().lines().count(), 81);
}

#[test]
fn train_writes_curves_and_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let m = maps().join("tiny_5.map");
    let o = cpp(&[
        "train",
        "--maps",
        m.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.iterations=3",
        "--set",
        "train.workers=2",
        "--set",
        "train.steps_per_worker=64",
        "--set",
        "battery.b_max=30",
        "--set",
        "fov.half_width=1",
        "--seed",
        "4",
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["env_steps"], 384);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    let header = curves.lines().next().unwrap();
    for col in ["step", "coverage_ratio", "crash_ratio", "solved_ratio", "episode_steps"] {
        assert!(header.split(',').any(|c| c == col), "{col}");
    }
    assert_eq!(curves.lines().count(), 4);
    let ckpt = format!("greedy:{}", out.join("policy.json").display());
    let e = cpp(&[
        "eval", "--maps", m.to_str().unwrap(), "--actors", &ckpt, "--n", "8", "--set", "battery.b_max=30", "--json",
    ]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(json(&e)["actors"][0]["summary"]["crash_rate"], 0.0);

    let again = dir.path().join("again");
    let o2 = cpp(&[
        "train",
        "--maps",
        m.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "--set",
        "train.iterations=3",
        "--set",
        "train.workers=2",
        "--set",
        "train.steps_per_worker=64",
        "--set",
        "battery.b_max=30",
        "--set",
        "fov.half_width=1",
        "--seed",
        "4",
        "--jobs",
        "1",
    ]);
    assert_eq!(code(&o2), 0);
    assert_eq!(
        fs::read(out.join("policy.json")).unwrap(),
        fs::read(again.join("policy.json")).unwrap()
    );
}

#[test]
fn train_needs_a_source() {
    assert_eq!(code(&cpp(&["train", "--out", "/tmp/never"])), 1);
}
