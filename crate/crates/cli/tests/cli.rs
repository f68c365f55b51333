use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::process::{Command, Output};

fn evo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evoharness"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn init_refuses_existing_run_and_bad_config() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("r");
    let o = evo(&["init", arg(&run), "--n", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("initialized"));
    assert!(run.join("program.db").exists() && run.join("config.toml").exists());

    let again = evo(&["init", arg(&run), "--n", "3"]);
    assert_eq!(again.status.code(), Some(2));

    let bad = evo(&["init", arg(&d.path().join("b")), "--parallel", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!d.path().join("b").join("program.db").exists());
}

#[test]
fn run_single_circle_and_report() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("r");
    let o = evo(&["run", arg(&run), "--n", "1", "--budget", "1000000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("best      0.50000") || out.contains("best      0.49999"), "{out}");
    assert!(out.contains("BudgetExhausted"));

    let mismatch = evo(&["run", arg(&run), "--n", "2"]);
    assert_eq!(mismatch.status.code(), Some(2));

    let o = evo(&["report", arg(&run), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let algos = v["table"]["algorithms"].as_u64().unwrap();
    let csv = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let jsonl = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    let rows = jsonl.lines().count() as u64;
    assert_eq!(csv.lines().count() as u64, rows + 1);
    assert!(rows >= algos && algos > 0);
    assert!((v["table"]["best"].as_f64().unwrap() - 0.5).abs() < 1e-6);

    let table = stdout(&evo(&["report", arg(&run)]));
    assert!(table.contains("Raw Best") && table.contains("Hack%"));

    let o = evo(&["status", arg(&run), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["live_agents"].as_u64(), Some(0));
    assert!(stdout(&evo(&["status", arg(&run)])).contains("island 0:"));
}

#[test]
fn run_json_summary_parses() {
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("r");
    let o = evo(&["run", arg(&run), "--n", "2", "--budget", "300000", "--json", "--parallel", "2", "--ordered"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["tokens_spent"].as_u64().unwrap() >= 300_000);
    assert_eq!(v["max_parallel_agents"].as_u64(), Some(2));
    assert!(run.join("summary.json").exists());
}

#[test]
fn gate_off_lets_a_planted_hack_through_but_not_into_best() {
    let d = tempfile::tempdir().unwrap();
    let script = d.path().join("hack.sh");
    std::fs::write(
        &script,
        "#!/bin/sh\n\
         cat > /dev/null\n\
         printf '0.5 0.5 0.5\\n0.5 0.5 0.5\\n' > candidate/packing.txt\n\
         printf 'n_circles = 2\\ntolerance = 1000000.0\\n' > eval/evaluator.toml\n\
         mkdir -p .evo\n\
         echo '{\"approach_summary\":\"stacked\",\"improvement_ideas\":\"\",\"tokens_used\":100000}' > \"$EVO_RESULT_FILE\"\n",
    )
    .unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let backend = format!("command:{}", script.display());

    let run = d.path().join("off");
    let o = evo(&["run", arg(&run), "--n", "2", "--budget", "300000", "--gate", "off", "--backend", &backend, "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["raw_best"]["score"].as_f64(), Some(1.0));
    assert!(v["best"]["score"].as_f64().unwrap() < 1.0);
    assert!(v["verification_mismatches"].as_u64().unwrap() > 0);

    let run = d.path().join("on");
    let o = evo(&["run", arg(&run), "--n", "2", "--budget", "300000", "--backend", &backend, "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["hacks"]["hacks"], v["hacks"]["completed"]);
    assert_eq!(v["best"]["score"], v["raw_best"]["score"]);
}

#[test]
fn scaffold_then_init_from_seed_dir() {
    let d = tempfile::tempdir().unwrap();
    let seed = d.path().join("seed");
    let o = evo(&["scaffold", arg(&seed), "--n", "4"]);
    assert!(o.status.success());
    assert!(seed.join("candidate/packing.txt").exists());
    let o = evo(&["init", arg(&d.path().join("r")), "--seed-dir", arg(&seed), "--n", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(seed.join("candidate/packing.txt"), "2 2 1\n").unwrap();
    let o = evo(&["init", arg(&d.path().join("r2")), "--seed-dir", arg(&seed), "--n", "4"]);
    assert_eq!(o.status.code(), Some(3));
}
