use std::path::Path;
use std::process::{Command, Output};

use tfdp_core::geometry::Point3;
use tfdp_core::simenv::{check_success, Dataset, Env, Scene, TaskName};
use tfdp_harness::render::parse_polylines;
use tfdp_harness::report::ResultsTable;

fn tfdp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfdp"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("MA2_OUT")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn pgm_pixels(bytes: &[u8]) -> &[u8] {
    let mut fields = 0;
    let mut i = 0;
    while fields < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    &bytes[i + 1..]
}

#[test]
fn gen_data_writes_the_requested_demonstrations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kp.ma2d");
    ok(&tfdp(dir.path(), &["gen-data", "--task", "key_press", "--n", "3", "--seed", "4", "--output", path.to_str().unwrap()]));
    let ds = Dataset::read_from(std::fs::read(&path).unwrap().as_slice()).unwrap();
    assert_eq!(ds.demos.len(), 3);
    assert_eq!(ds.task, TaskName::KeyPress);
    assert_eq!(ds.scene_hash, Scene::default_scene().hash());
}

#[test]
fn untrained_checkpoint_rarely_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("u.ck");
    ok(&tfdp(
        dir.path(),
        &["train", "--task", "alternating_place", "--variant", "tf_full", "--sampler", "ddim", "--epochs", "0", "--output", ck.to_str().unwrap()],
    ));
    ok(&tfdp(dir.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--trials", "10"]));
    let table = ResultsTable::parse_csv(&std::fs::read_to_string(dir.path().join("eval.csv")).unwrap()).unwrap();
    let rows = table.sorted();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].trials, 10);
    assert!((rows[0].successes as f64) < 0.1 * 10.0);
    assert!(dir.path().join("eval.txt").exists());
}

#[test]
fn empty_trace_gives_a_black_modulated_image() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tfdp(dir.path(), &["render-field", "--task", "two_drawer", "--points", "0"]));
    let field = dir.path().join("field");
    let modulated = std::fs::read(field.join("modulated.pgm")).unwrap();
    assert!(pgm_pixels(&modulated).iter().all(|&b| b == 0));
    let global = std::fs::read(field.join("global.pgm")).unwrap();
    assert!(pgm_pixels(&global).iter().any(|&b| b > 0));
    let raw = std::fs::read(field.join("field.f32")).unwrap();
    assert_eq!(raw.len(), 8 + 32 * 32 * 4);
    assert_eq!(&raw[..8], &[32, 0, 0, 0, 32, 0, 0, 0]);
    assert!(raw[8..].iter().all(|&b| b == 0));
}

#[test]
fn full_trace_field_is_lit_along_the_path() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tfdp(dir.path(), &["render-field", "--task", "key_press"]));
    let modulated = std::fs::read(dir.path().join("field").join("modulated.pgm")).unwrap();
    assert!(pgm_pixels(&modulated).iter().any(|&b| b > 0));
}

#[test]
fn plotted_polylines_replay_to_the_logged_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tfdp(dir.path(), &["plot", "--task", "alternating_place", "--trials", "2"]));
    let text = std::fs::read_to_string(dir.path().join("plot").join("polylines.csv")).unwrap();
    let episodes = parse_polylines(&text).unwrap();
    assert_eq!(episodes.len(), 2);
    let env = Env::new(&Scene::default_scene(), TaskName::AlternatingPlace).unwrap();
    for (trial, logged, points) in episodes {
        let mut state = env.reset(1000 + trial as u64, 0).unwrap();
        assert_eq!(state.ee, points[0]);
        let mut states = vec![state.clone()];
        for &p in &points[1..] {
            state = env.step(&state, p).unwrap();
            assert_eq!(state.ee, p);
            states.push(state.clone());
        }
        assert_eq!(check_success(&states, &env.task).0, logged);
        assert!(logged, "the expert completes the task");
    }
    assert!(dir.path().join("plot").join("overlay.pgm").exists());
}

#[test]
fn tiny_ablation_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        "tasks = key_press\nvariants = dp tf_full\nsamplers = ddim\ntrials = 2\ndemos = 2\nepochs = 1\nhidden = 16, 16\nout = run\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&tfdp(&out, &["ablate", "--config", cfg.to_str().unwrap()]));
        let csv = std::fs::read(out.join("ablate.csv")).unwrap();
        assert!(out.join("ablate.txt").exists());
        csvs.push(csv);
    }
    assert_eq!(csvs[0], csvs[1]);
    let table = ResultsTable::parse_csv(std::str::from_utf8(&csvs[0]).unwrap()).unwrap();
    assert_eq!(table.sorted().len(), 2);
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tfdp(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(tfdp(dir.path(), &["gen-data", "--task", "juggling"]).status.code(), Some(1));
    let missing = dir.path().join("missing.ck");
    let o = tfdp(dir.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(tfdp(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn plot_replay_helper_keeps_positions_exact() {
    let text = "trial,step,x,y,z,u,v,stage,success\n0,0,0.1,0.2,0.30000000000000004,1,2,0,1\n0,1,0.1,0.2,0.3,1,2,0,1\n";
    let parsed = parse_polylines(text).unwrap();
    assert_eq!(parsed[0].2[0], Point3::new(0.1, 0.2, 0.30000000000000004));
    assert!(parse_polylines("h\n1,2,3\n").is_err());
}
