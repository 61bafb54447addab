//! End-to-end checks of the binary: pipeline outputs, stage sequencing,
//! deterministic reruns, exit codes, and sweep summaries. Everything runs on
//! a deliberately tiny mesh and chain so the whole file stays fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dopinv")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("dopinv_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(out_dir: &Path) -> String {
    format!(
        "mesh.nx = 6\n\
         mesh.ny = 6\n\
         sampler.n_total = 400\n\
         sampler.n_burn = 80\n\
         sampler.thin = 5\n\
         output.trace_nodes = 1,20,40\n\
         output.directory = {}\n",
        out_dir.display()
    )
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_writes_outputs_and_reruns_identically() {
    let root = fresh_dir("full");
    let out_a = root.join("a");
    let out_b = root.join("b");
    let cfg_a = write_config(&root, &tiny_config(&out_a));

    let first = run(&["full", "--config", cfg_a.to_str().unwrap()]);
    assert_exit(&first, 0);
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("mse_doping="), "stdout: {stdout}");

    for name in [
        "mesh_nodes.csv",
        "c_true.csv",
        "v_e_true.csv",
        "u_hat_true.csv",
        "y.csv",
        "prior_mean.csv",
        "posterior_mean.csv",
        "posterior_var.csv",
        "c_rec.csv",
        "doping.csv",
        "chain_summary.json",
        "metrics.json",
        "report.json",
        "manifest.json",
        "trace_node_1.csv",
        "trace_node_20.csv",
        "trace_node_40.csv",
    ] {
        assert!(out_a.join(name).is_file(), "missing output file {name}");
    }

    // The same config pointed at a second directory must reproduce every
    // sampled number bit for bit.
    let second = run(&[
        "full",
        "--config",
        cfg_a.to_str().unwrap(),
        "--set",
        &format!("output.directory={}", out_b.display()),
    ]);
    assert_exit(&second, 0);
    for name in ["y.csv", "posterior_mean.csv", "c_rec.csv", "metrics.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "rerun changed {name}");
    }
}

#[test]
fn staged_run_matches_and_tampered_data_fails_invert() {
    let root = fresh_dir("stages");
    let out = root.join("out");
    let cfg = write_config(&root, &tiny_config(&out));
    let cfg_s = cfg.to_str().unwrap();

    for stage in ["forward", "synth", "invert", "reconstruct"] {
        let res = run(&[stage, "--config", cfg_s]);
        assert_exit(&res, 0);
    }
    assert!(out.join("c_rec.csv").is_file());

    // Corrupting one measurement row must abort the inversion stage with
    // its dedicated exit code.
    let y_path = out.join("y.csv");
    let text = std::fs::read_to_string(&y_path).unwrap();
    let tampered: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            if i == 4 {
                let mut cols: Vec<&str> = line.split(',').collect();
                cols[2] = "not_a_number";
                cols.join(",")
            } else {
                line.to_string()
            }
        })
        .collect();
    std::fs::write(&y_path, tampered.join("\n") + "\n").unwrap();
    let res = run(&["invert", "--config", cfg_s]);
    assert_exit(&res, 5);
}

#[test]
fn config_errors_exit_with_code_2() {
    let root = fresh_dir("badcfg");
    let out = root.join("out");
    let cfg = write_config(&root, &tiny_config(&out));

    let unknown_key = run(&[
        "full",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "nosuch.key=1",
    ]);
    assert_exit(&unknown_key, 2);

    let missing_file = run(&["full", "--config", "/nonexistent/exp.cfg"]);
    assert_exit(&missing_file, 2);

    let bad_value = run(&[
        "full",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "sampler.beta=2.5",
    ]);
    assert_exit(&bad_value, 2);
}

#[test]
fn shipped_configs_parse_and_match_the_builtin_defaults() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");

    let default = dopinv::ExperimentConfig::load(&root.join("default.cfg")).unwrap();
    assert_eq!(default, dopinv::ExperimentConfig::default());

    let coarse = dopinv::ExperimentConfig::load(&root.join("coarse-mesh.cfg")).unwrap();
    coarse.validate().unwrap();
    assert_eq!((coarse.mesh.nx, coarse.mesh.ny), (10, 10));

    for (name, cases) in [("sweep-bias.cfg", 3), ("sweep-truncation.cfg", 2)] {
        let text = std::fs::read_to_string(root.join(name)).unwrap();
        let expanded = dopinv::config::expand_sweep(&text).unwrap();
        assert_eq!(expanded.len(), cases, "{name}");
    }
}

#[test]
fn sweep_runs_the_matrix_and_writes_a_summary() {
    let root = fresh_dir("sweep");
    let out = root.join("out");
    let cfg = write_config(&root, &tiny_config(&out));
    let matrix = root.join("matrix.cfg");
    std::fs::write(&matrix, "device.u = 2, 5\n").unwrap();

    let res = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--matrix",
        matrix.to_str().unwrap(),
    ]);
    assert_exit(&res, 0);

    let summary = std::fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "label,mse_doping,mse_potential,acceptance_rate,wall_time_seconds"
    );
    assert_eq!(lines.len(), 3, "summary: {summary}");
    for line in &lines[1..] {
        let label = line.split(',').next().unwrap();
        assert!(out.join(label).join("report.json").is_file());
    }
}
