//! End-to-end runs of the binary.

use std::path::Path;
use std::process::{Command, Output};

use orvec_sam::graph::FactorGraph;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orvec-sam")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn simulate_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn simulate_then_solve() {
    let dir = tempfile::tempdir().unwrap();
    let sim_dir = dir.path().join("sim");
    let out = simulate_into(&sim_dir, &["--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["graph.txt", "truth.txt", "plot.csv"] {
        assert!(sim_dir.join(f).is_file(), "missing {f}");
    }

    let solve_dir = dir.path().join("solve");
    let hess = dir.path().join("hessian.csv");
    let out = run(&[
        "solve",
        "--graph",
        sim_dir.join("graph.txt").to_str().unwrap(),
        "--out",
        solve_dir.to_str().unwrap(),
        "--dump-hessian",
        hess.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("grad_tol"), "{stdout}");

    let solved = FactorGraph::load_str(&std::fs::read_to_string(solve_dir.join("solved.txt")).unwrap()).unwrap();
    let input = FactorGraph::load_str(&std::fs::read_to_string(sim_dir.join("graph.txt")).unwrap()).unwrap();
    assert_eq!(solved.len(), input.len());
    assert_eq!(solved.odometry(), input.odometry());
    assert_ne!(solved.poses(), input.poses());

    let trace = std::fs::read_to_string(solve_dir.join("trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);
    assert!(solve_dir.join("summary.txt").is_file());
    let triplets = std::fs::read_to_string(&hess).unwrap();
    assert!(triplets.lines().count() > 29 * 5);
}

#[test]
fn solve_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), &["--seed", "4"]);
    let graph = dir.path().join("graph.txt");
    let mut results = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["solve", "--graph", graph.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        results.push(std::fs::read(out_dir.join("solved.txt")).unwrap());
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn single_lane_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate_into(dir.path(), &["--lanes", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lane"));
}

#[test]
fn malformed_graph_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("bad.txt");
    std::fs::write(&graph, "POSE 1 0 0 1 0 FIXED\nPOSE 2 oops 0 1 0\n").unwrap();
    let out = run(&["solve", "--graph", graph.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn bad_fixed_pose_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), &[]);
    let graph = dir.path().join("graph.txt");
    let g = graph.to_str().unwrap();
    let out_dir = dir.path().join("o");
    let o = out_dir.to_str().unwrap();
    assert_eq!(code(&run(&["solve", "--graph", g, "--out", o, "--fixed-pose", "0"])), 2);
    assert_eq!(code(&run(&["solve", "--graph", g, "--out", o, "--fixed-pose", "31"])), 2);
    assert_eq!(code(&run(&["solve", "--graph", g, "--out", o, "--mu", "-1"])), 2);
    assert_eq!(code(&run(&["solve", "--graph", g, "--out", o, "--t1", "3"])), 2);
    assert_eq!(code(&run(&["solve", "--graph", g, "--out", o, "--fixed-pose", "15"])), 0);
}

#[test]
fn iteration_limit_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), &[]);
    let g = dir.path().join("graph.txt");
    let out = run(&[
        "solve",
        "--graph",
        g.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--max-iters",
        "2",
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max_iters"));
}

#[test]
fn divergent_seed_exits_diverged() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), &["--seed", "9"]);
    let g = dir.path().join("graph.txt");
    let out = run(&["solve", "--graph", g.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("diverged"));
}

#[test]
fn missing_input_is_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve", "--graph", dir.path().join("nope.txt").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn check_derivatives_passes() {
    let out = run(&["check-derivatives", "--samples", "10", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("constraint") && stdout.contains("H_pp'"));
}

#[test]
fn check_derivatives_threshold_breach() {
    let out = run(&["check-derivatives", "--samples", "5", "--grad-threshold", "1e-20"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAILED"));
}
