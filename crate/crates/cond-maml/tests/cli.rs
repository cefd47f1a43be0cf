//! End-to-end checks of the `cond-maml` binary: the full
//! train/eval/trace loop through real processes, plus the exit-code
//! contract (0 success, 1 usage, 2 numeric failure, 3 I/O).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cond-maml"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("process should exit, not be killed")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A config small enough that a full training run takes well under a
/// second, writing artifacts into `dir`.
fn tiny_config(dir: &Path) -> String {
    format!(
        "# tiny smoke-test run\n\
         source = gaussian\n\
         dim = 4\n\
         n_way = 3\n\
         k_shot = 1\n\
         q_queries = 4\n\
         hidden = 8\n\
         k_steps = 2\n\
         alpha = 0.4\n\
         beta = 0.01\n\
         gamma = 0.5\n\
         meta_batch = 2\n\
         subset = cls\n\
         episodes = 4\n\
         eval_every = 2\n\
         eval_episodes = 4\n\
         eval_steps = 1,2\n\
         trace_episodes = 2\n\
         seed = 11\n\
         output_dir = {}\n",
        dir.join("run").display()
    )
}

/// One trained tiny run shared by every test that needs real artifacts.
struct Fixture {
    #[allow(dead_code)]
    keep: tempfile::TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
    run_dir: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let keep = tempfile::tempdir().unwrap();
        let config = keep.path().join("run.cfg");
        std::fs::write(&config, tiny_config(keep.path())).unwrap();
        let out = run(&["train", "--config", config.to_str().unwrap()]);
        assert_eq!(
            code(&out),
            0,
            "train failed\nstdout: {}\nstderr: {}",
            stdout(&out),
            stderr(&out)
        );
        let run_dir = keep.path().join("run");
        Fixture {
            checkpoint: run_dir.join("checkpoint-final.json"),
            run_dir,
            config,
            keep,
        }
    })
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("train"), "help should list subcommands");

    let version = run(&["--version"]);
    assert_eq!(code(&version), 0);
    assert!(stdout(&version).contains("cond-maml"));

    let sub_help = run(&["eval", "--help"]);
    assert_eq!(code(&sub_help), 0);
    assert!(stdout(&sub_help).contains("--checkpoint"));
}

#[test]
fn usage_errors_exit_one() {
    // Unknown subcommand, unknown flag, missing required flag: all usage.
    assert_eq!(code(&run(&["transmogrify"])), 1);
    assert_eq!(code(&run(&["train", "--confi", "x"])), 1);
    assert_eq!(code(&run(&["train"])), 1);
    // A structurally valid call with semantically bad arguments.
    let f = fixture();
    let out = run(&[
        "eval",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--steps",
        "5,3",
    ]);
    assert_eq!(code(&out), 1, "descending steps: {}", stderr(&out));
    assert!(stderr(&out).contains("ascending"));
}

#[test]
fn train_writes_the_advertised_artifacts() {
    let f = fixture();
    for name in [
        "eval.csv",
        "trace.csv",
        "manifest.json",
        "checkpoint-final.json",
        "checkpoint-best.json",
    ] {
        let path = f.run_dir.join(name);
        assert!(path.is_file(), "missing artifact {name}");
        assert!(path.metadata().unwrap().len() > 0, "empty artifact {name}");
    }
    let eval = std::fs::read_to_string(f.run_dir.join("eval.csv")).unwrap();
    let mut lines = eval.lines();
    assert!(lines.next().unwrap().starts_with("# run "));
    assert_eq!(
        lines.next().unwrap(),
        "iteration,step,mean_accuracy,ci_halfwidth,episodes"
    );
}

#[test]
fn eval_prints_one_row_per_step() {
    let f = fixture();
    let out = run(&[
        "eval",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--episodes",
        "6",
        "--steps",
        "1,3",
        "--split",
        "val",
    ]);
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,mean_accuracy,ci_halfwidth,episodes"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "expected a row per step: {text}");
    assert!(rows[0].starts_with("1,") && rows[1].starts_with("3,"));
    for row in rows {
        let acc: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc), "accuracy {acc} out of range");
    }
}

#[test]
fn trace_prints_per_step_condition_numbers() {
    let f = fixture();
    let out = run(&[
        "trace",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--episodes",
        "2",
    ]);
    assert_eq!(code(&out), 0, "trace failed: {}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("iteration,inner_step,subset_kappa,full_kappa,condition_loss")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "one row per inner step: {text}");
    // Without --full the full_kappa column stays empty.
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("")));

    let full = run(&[
        "trace",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
        "--episodes",
        "2",
        "--full",
    ]);
    assert_eq!(code(&full), 0, "trace --full failed: {}", stderr(&full));
    let text = stdout(&full);
    assert!(
        text.lines()
            .skip(1)
            .all(|r| !r.split(',').nth(3).unwrap().is_empty()),
        "--full should fill the full_kappa column: {text}"
    );
}

#[test]
fn demo_quadratic_prints_full_trajectories() {
    let out = run(&["demo-quadratic", "--kappa", "1,50", "--lr", "0.5", "--steps", "10"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kappa,step,theta1,theta2,loss,distance"));
    assert_eq!(lines.count(), 22, "2 bowls x 11 stages");
}

#[test]
fn missing_files_exit_three_and_name_the_path() {
    let out = run(&["train", "--config", "/nonexistent/nowhere.cfg"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("nowhere.cfg"), "stderr should name the file");

    let f = fixture();
    let out = run(&[
        "eval",
        "--checkpoint",
        "/nonexistent/model.json",
        "--config",
        f.config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn corrupt_inputs_exit_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();

    let bad_ckpt = dir.path().join("bad.json");
    std::fs::write(&bad_ckpt, "{ this is not json").unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        bad_ckpt.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));

    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "hidden_layers = 8\n").unwrap();
    let out = run(&["train", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("unknown key"));
}

#[test]
fn checkpoint_config_mismatch_exits_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let other = dir.path().join("wider.cfg");
    let text = tiny_config(dir.path()).replace("hidden = 8", "hidden = 16");
    std::fs::write(&other, text).unwrap();

    let out = run(&[
        "eval",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--config",
        other.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("hidden_dims"),
        "stderr should explain the mismatch: {}",
        stderr(&out)
    );
}

#[test]
fn numeric_divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("explode.cfg");
    // An absurd inner learning rate overflows the adapted parameters within
    // the first meta update (two ~1e200 layers multiply past f64::MAX).
    let text = tiny_config(dir.path())
        .replace("alpha = 0.4", "alpha = 1e200")
        .replace("gamma = 0.5", "gamma = 0")
        .replace("subset = cls\n", "subset = cls\nconditioning = false\n");
    std::fs::write(&cfg, text).unwrap();

    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(
        code(&out),
        2,
        "stdout: {}\nstderr: {}",
        stdout(&out),
        stderr(&out)
    );
}
