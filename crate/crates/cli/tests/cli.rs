use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("shepherd-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn shepherd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shepherd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = shepherd(args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_TRAINING: [&str; 12] = [
    "--set",
    "ppo.horizon=32",
    "--set",
    "ppo.num_actors=2",
    "--set",
    "ppo.minibatch_size=16",
    "--set",
    "ppo.epochs=2",
    "--set",
    "episode.max_steps=80",
    "--set",
    "episode.success_window=20",
];

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

fn assert_same_csvs(a: &Path, b: &Path) {
    let files = csv_files(a);
    assert!(!files.is_empty(), "no CSV output in {}", a.display());
    assert_eq!(files, csv_files(b));
    for f in files {
        assert_eq!(
            std::fs::read(a.join(&f)).unwrap(),
            std::fs::read(b.join(&f)).unwrap(),
            "{f} differs"
        );
    }
}

/// Runs `args` into `first`, then re-runs the same subcommand from the echoed
/// config into a fresh directory and checks every CSV is byte-identical.
fn run_and_replay(sub: &str, first: &Path, args: &[&str]) {
    let mut full = vec![sub, "--out", s(first)];
    full.extend_from_slice(args);
    ok(&full);
    let replay = first.with_extension("replay");
    let echoed = first.join("config.toml");
    ok(&[sub, "--out", s(&replay), "--config", s(&echoed)]);
    assert_same_csvs(first, &replay);
    assert_eq!(
        std::fs::read(&echoed).unwrap(),
        std::fs::read(replay.join("config.toml")).unwrap()
    );
}

#[test]
fn full_pipeline_is_reproducible_from_echoed_configs() {
    let root = scratch("pipeline");
    let drive = root.join("drive");
    let mut args = vec!["--seed", "3", "--episodes", "4"];
    args.extend_from_slice(&TINY_TRAINING);
    run_and_replay("train-driving", &drive, &args);
    assert!(drive.join("driving.ckpt").is_file());

    let select = root.join("select");
    let mut args = vec!["--seed", "4", "--episodes", "2", "--checkpoint", s(&drive)];
    args.extend_from_slice(&TINY_TRAINING);
    args.extend_from_slice(&[
        "--set",
        "ppo.horizon=2",
        "--set",
        "ppo.minibatch_size=4",
        "--set",
        "episode.max_steps=300",
    ]);
    run_and_replay("train-selection", &select, &args);
    assert!(select.join("selection.ckpt").is_file() && select.join("driving.ckpt").is_file());

    let eval_args = [
        "--episodes",
        "3",
        "--checkpoint",
        s(&select),
        "--set",
        "episode.max_steps=200",
    ];
    let validate = root.join("validate");
    run_and_replay("validate", &validate, &eval_args);
    let episodes = std::fs::read_to_string(validate.join("episodes.csv")).unwrap();
    assert_eq!(
        episodes.lines().count(),
        1 + 2 * 3,
        "two controllers, three episodes each"
    );
    assert!(
        validate.join("report.txt").is_file() && validate.join("trajectory_learned.csv").is_file()
    );

    let robust = root.join("robust");
    run_and_replay("robustness", &robust, &eval_args);
    let echoed = std::fs::read_to_string(robust.join("config.toml")).unwrap();
    assert!(echoed.contains("enabled = true"), "{echoed}");

    let scale = root.join("scale");
    run_and_replay(
        "scale",
        &scale,
        &[
            "--checkpoint",
            s(&select),
            "--set",
            "episode.max_steps=100",
            "--set",
            "episode.success_window=50",
        ],
    );
    let trace = std::fs::read_to_string(scale.join("scale_trace.csv")).unwrap();
    assert_eq!(
        trace.lines().next(),
        Some("step,mean_radius,std_radius,min_radius,max_radius,chi")
    );

    for (dir, expected) in [
        (&drive, vec!["driving_curve.svg"]),
        (
            &validate,
            vec![
                "boxplots.svg",
                "trajectory_heuristic.svg",
                "trace_learned_radius.svg",
            ],
        ),
        (
            &scale,
            vec!["scale_trajectory.svg", "scale_trace_radius.svg"],
        ),
    ] {
        let figs = dir.join("figures");
        ok(&["plot", "--input", s(dir), "--out", s(&figs)]);
        for name in expected {
            let svg = std::fs::read_to_string(figs.join(name))
                .unwrap_or_else(|_| panic!("{name} missing"));
            assert!(svg.starts_with("<svg"), "{name}");
        }
    }
    let curve = std::fs::read_to_string(drive.join("figures/driving_curve.svg")).unwrap();
    assert!(curve.contains("moving average over 200 episodes"));
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn empty_config_gives_defaults() {
    let root = scratch("empty");
    let cfg = root.join("empty.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = root.join("out");
    ok(&[
        "validate",
        "--scenario",
        "drive-1v1",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--episodes",
        "2",
    ]);
    let echoed: toml::Table =
        toml::from_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let sim = echoed["sim"].as_table().unwrap();
    for (key, value) in [
        ("goal_radius", 5.0),
        ("arena_half_width", 25.0),
        ("herder_max_speed", 8.0),
        ("D", 0.5),
        ("lambda", 2.5),
        ("kT", 3.0),
        ("dt", 0.05),
    ] {
        assert_eq!(sim[key].as_float(), Some(value), "{key}");
    }
    let ppo = echoed["ppo"].as_table().unwrap();
    assert_eq!(ppo["stepsize"].as_float(), Some(5e-4));
    assert_eq!(ppo["gamma"].as_float(), Some(0.98));
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn configuration_errors_exit_with_one() {
    let root = scratch("errors");
    let out = root.join("out");
    let o = shepherd(&["validate", "--out", s(&out), "--set", "sim.kT=4"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("herder_max_speed"), "{}", stderr(&o));
    assert!(!out.exists(), "nothing is written for a rejected config");

    let o = shepherd(&["validate", "--out", s(&out), "--set", "sim.typo=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sim.typo"));

    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[sim\nD = 1").unwrap();
    assert_eq!(
        code(&shepherd(&[
            "validate",
            "--out",
            s(&out),
            "--config",
            s(&bad)
        ])),
        1
    );
    assert_eq!(
        code(&shepherd(&[
            "validate",
            "--out",
            s(&out),
            "--config",
            s(&root.join("missing.toml"))
        ])),
        1
    );
    assert_eq!(
        code(&shepherd(&["train-selection", "--out", s(&out)])),
        1,
        "driver checkpoint is required"
    );
    assert_eq!(
        code(&shepherd(&[
            "scale",
            "--out",
            s(&out),
            "--checkpoint",
            s(&root)
        ])),
        1
    );
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&shepherd(&[])), 1);
    assert_eq!(code(&shepherd(&["validate"])), 1, "--out is required");
    assert_eq!(code(&shepherd(&["fly", "--out", "x"])), 1);
    assert_eq!(code(&shepherd(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let root = scratch("runtime");
    let ckpt = root.join("driving.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = shepherd(&[
        "train-selection",
        "--out",
        s(&root.join("out")),
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn plotting_empty_input_fails_without_output() {
    let root = scratch("plot-empty");
    let figs = root.join("figs");
    assert_eq!(
        code(&shepherd(&["plot", "--input", s(&root), "--out", s(&figs)])),
        1
    );
    std::fs::write(
        root.join("driving_curve.csv"),
        "episode_index,cumulative_reward,moving_average\n",
    )
    .unwrap();
    assert_eq!(
        code(&shepherd(&["plot", "--input", s(&root), "--out", s(&figs)])),
        1
    );
    assert!(!figs.exists());
    std::fs::remove_dir_all(&root).unwrap();
}
