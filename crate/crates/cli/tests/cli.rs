use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[bench]\npredictor_traces = 8\nmonitor_traces = 40\neval_queries = 12\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prefetch-rag"));
    c.env_remove("PREFETCH_RAG_CONFIG");
    c
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(dir: &Path, cfg: &str) -> String {
    let p = dir.join("params");
    ok(bin()
        .args(["--config", cfg, "train", "--out", p.to_str().unwrap()])
        .output()
        .unwrap());
    p.to_str().unwrap().to_string()
}

#[test]
fn bench_outputs_are_byte_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let params = train(d.path(), &cfg);
    let mut runs = Vec::new();
    for (i, extra) in [None, Some("--sequential")].into_iter().enumerate() {
        let out = d.path().join(format!("b{i}"));
        let mut c = bin();
        c.args(["--config", &cfg]);
        if let Some(x) = extra {
            c.arg(x);
        }
        ok(c.args(["bench", "--params", &params, "--out", out.to_str().unwrap()])
            .output()
            .unwrap());
        runs.push(out);
    }
    for f in ["report.json", "report.csv", "events.jsonl", "rewards.jsonl"] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert!(!a.is_empty(), "{f} is empty");
        assert_eq!(a, b, "{f} differs");
    }
    let csv = std::fs::read_to_string(runs[0].join("report.csv")).unwrap();
    assert!(csv.starts_with("version,config_hash,seed,mode,"));
    assert_eq!(csv.lines().count(), 1 + 7);
}

#[test]
fn latency_sweep_writes_one_row_per_grid_point() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let params = train(d.path(), &cfg);
    let out = d.path().join("s");
    ok(bin()
        .args([
            "--config",
            &cfg,
            "sweep",
            "--params",
            &params,
            "--grid",
            "50,200,1000",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("version,config_hash,seed,latency_ms"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert!(json["header"]["config_hash"].is_string());
}

#[test]
fn report_compares_selected_modes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let out = d.path().join("b");
    ok(bin()
        .args([
            "--config",
            &cfg,
            "bench",
            "--mode",
            "sync_reactive,fixed_interval",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    let rep = ok(bin()
        .args([
            "report",
            "--input",
            out.join("report.json").to_str().unwrap(),
            "--compare",
            "sync_reactive,fixed_interval",
        ])
        .output()
        .unwrap());
    let text = String::from_utf8(rep.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    for col in [
        "version",
        "config_hash",
        "seed",
        "mode",
        "ttft_ms",
        "e2e_ms",
        "efficiency",
        "qal",
        "ttft_reduction",
        "e2e_reduction",
    ] {
        assert!(header.contains(&col), "missing column {col}");
    }
    let red = header.iter().position(|c| *c == "e2e_reduction").unwrap();
    assert_eq!(lines[1].split(',').nth(red).unwrap().parse::<f64>().unwrap(), 0.0);

    let missing = bin()
        .args([
            "report",
            "--input",
            out.join("report.json").to_str().unwrap(),
            "--compare",
            "sync_reactive,predictive",
        ])
        .output()
        .unwrap();
    assert!(!missing.status.success());
}

#[test]
fn environment_overrides_config_flag() {
    let d = tempfile::tempdir().unwrap();
    let good = small_config(d.path());
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "[runtime]\nworkers = 0\n").unwrap();
    let traces = d.path().join("t.jsonl");
    let args = ["synth", "--count", "2", "--tokens", "40", "--out", traces.to_str().unwrap()];

    ok(bin()
        .args(["--config", bad.to_str().unwrap()])
        .args(args)
        .env("PREFETCH_RAG_CONFIG", &good)
        .output()
        .unwrap());
    let failed = bin()
        .args(["--config", &good])
        .args(args)
        .env("PREFETCH_RAG_CONFIG", &bad)
        .output()
        .unwrap();
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("bad.toml"));
}

#[test]
fn synth_and_label_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let traces = d.path().join("t.jsonl");
    let labels = d.path().join("l.jsonl");
    let run = |seed: &str, out: &Path| {
        ok(bin()
            .args([
                "synth",
                "--seed",
                seed,
                "--count",
                "3",
                "--tokens",
                "120",
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap());
    };
    run("5", &traces);
    let again = d.path().join("t2.jsonl");
    run("5", &again);
    assert_eq!(std::fs::read(&traces).unwrap(), std::fs::read(&again).unwrap());
    ok(bin()
        .args(["label", "--traces", traces.to_str().unwrap(), "--out", labels.to_str().unwrap()])
        .output()
        .unwrap());
    for line in std::fs::read_to_string(&labels).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.is_object());
    }
}
