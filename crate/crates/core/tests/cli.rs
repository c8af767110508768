use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use enfed::experiment::{read_metrics, COLUMNS};

const BASE: &str = r#"scenario = "enfed"
seed = 42

[dataset]
source = "synthetic"
classes = 6
per_class = 60
dim = 4
separation = 8.0

[topology]
devices = 6

[model]
hidden = [16]
epochs = 15
batch_size = 16
learning_rate = 0.01
"#;

fn enfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enfed")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(config: &Path, out: &Path) -> Output {
    enfed(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(run(&cfg, &a).status.success());
    assert!(run(&cfg, &b).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
    let rows = read_metrics(&a).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].collaborators, 5);
    assert_eq!(rows[0].loss_values().len(), rows[0].rounds_executed as usize + 1);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let out = dir.path().join("m.csv");
    let status = enfed(&["run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(status.status.success());
    assert_eq!(read_metrics(&out).unwrap()[0].seed, 7);
}

#[test]
fn unknown_key_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &BASE.replace("epochs = 15", "epochs = 15\nepocs = 3"));
    let out = dir.path().join("m.csv");
    let o = run(&cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epocs"));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn sweep_writes_one_row_per_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{BASE}\n[sweep]\ncollaborators = [2, 3, 4, 5]\n"));
    let out = dir.path().join("m.csv");
    assert!(run(&cfg, &out).status.success());
    let rows = read_metrics(&out).unwrap();
    assert_eq!(rows.iter().map(|r| r.collaborators).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
}

#[test]
fn everyone_rejecting_exits_with_no_collaborators_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{BASE}\n[enfed]\nincentive = 1.0\nreserve_prices = [2.0]\n"));
    let out = dir.path().join("m.csv");
    let o = run(&cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(read_metrics(&out).unwrap()[0].stop_reason, "no_collaborators");
}

#[test]
fn baselines_run_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for scenario in ["enfed", "dfl", "cfl", "cloud"] {
        let cfg = write(dir.path(), &format!("{scenario}.toml"), &BASE.replace("\"enfed\"", &format!("\"{scenario}\"")));
        let out = dir.path().join(format!("{scenario}.csv"));
        assert!(run(&cfg, &out).status.success(), "{scenario}");
        assert_eq!(read_metrics(&out).unwrap()[0].scenario, scenario);
        files.push(out.to_str().unwrap().to_string());
    }
    let mut args = vec!["report"];
    args.extend(files.iter().map(String::as_str));
    let o = enfed(&args);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("enfed vs dfl: time reduced by"), "{text}");
    assert!(text.contains("enfed vs cloud"), "{text}");
}

#[test]
fn report_names_missing_field() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "m.csv", "scenario,accuracy,time_total\nenfed,0.9,1.0\n");
    let o = enfed(&["report", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("energy_total"));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = enfed(&["gradcheck"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck: PASS"));
    let o = enfed(&["gradcheck", "--corrupt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck: FAIL"));
}

#[test]
fn partition_inspect_prints_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &BASE.replace("devices = 6", "devices = 4\npartition = { kind = \"label_skew\", alpha = 0.3 }"));
    let o = enfed(&["partition", "--config", cfg.to_str().unwrap(), "--inspect"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    let total: usize = text
        .lines()
        .map(|l| l.split("rows=").nth(1).unwrap().split_whitespace().next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 360);
}

#[test]
fn csv_dataset_resolves_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("130 lb,155 lb,180 lb,205 lb,Calories per kg\n");
    for i in 0..300 {
        let c = 0.2 + (i % 5) as f64 * 0.25 + (i as f64 * 0.37).sin() * 0.02;
        body.push_str(&format!("{},{},{},{},{c}\n", c * 130.0, c * 155.0, c * 180.0, c * 205.0));
    }
    write(dir.path(), "calories.csv", &body);
    let cfg = write(
        dir.path(),
        "c.toml",
        "scenario = \"enfed\"\n[dataset]\nsource = \"csv\"\npath = \"calories.csv\"\npreset = \"calorie\"\n[topology]\ndevices = 4\n[model]\nhidden = [16]\nepochs = 10\nbatch_size = 16\nlearning_rate = 0.01\n",
    );
    let out = dir.path().join("m.csv");
    let o = run(&cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_metrics(&out).unwrap()[0].f1.is_some());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            enfed::experiment::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
