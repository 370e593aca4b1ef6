use std::path::Path;
use std::process::{Command, Output};

fn everadapt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_everadapt"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("EVERADAPT_OUT")
        .output()
        .unwrap()
}

fn quick_config(dir: &Path) -> String {
    let p = dir.join("quick.toml");
    std::fs::write(&p, "[train]\nepochs = 1\n").unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = everadapt(&["gen-data", "--config", "/nonexistent/cfg.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_field_exits_2_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "[train]\nbatch_size = 1\n").unwrap();
    let o = everadapt(&["gen-data", "--config", p.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));

    std::fs::write(&p, "[train]\nepochz = 3\n").unwrap();
    let o = everadapt(&["gen-data", "--config", p.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = everadapt(&["run", "--seeds", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_of_range_fractions_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for f in ["0", "1.5", "-0.1"] {
        let o = everadapt(&["replay-study", "--fractions", f], tmp.path());
        assert_eq!(o.status.code(), Some(2), "fraction {f}");
    }
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(everadapt(&["gen-data"], &a).status.success());
    assert!(everadapt(&["gen-data"], &b).status.success());
    let domains: Vec<_> = std::fs::read_dir(a.join("data"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name())
        .collect();
    assert_eq!(domains.len(), 4);
    for d in &domains {
        for split in ["train", "test"] {
            for f in ["manifest.json", "segments.bin", "labels.bin"] {
                let rel = Path::new("data").join(d).join(split).join(f);
                assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap());
            }
        }
    }
}

#[test]
fn run_report_and_studies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = quick_config(tmp.path());
    assert!(everadapt(&["gen-data", "--config", &cfg], &out).status.success());

    let o = everadapt(&["run", "--config", &cfg, "--seeds", "1"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scenario,mode,seed,acc,acc_std,bwt,bwt_std,adapt,adapt_std");
    assert_eq!(lines.len(), 3);
    let summary: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(summary[2], "summary");
    for i in [4, 6, 8] {
        assert_eq!(summary[i].parse::<f64>().unwrap(), 0.0);
    }
    for f in ["result_matrix.csv", "metrics.json", "manifest.json", "runs/everadapt/seed_0/stage_3.ckpt"] {
        assert!(out.join("run").join(f).exists(), "{f}");
    }
    let o = everadapt(&["report"], &out);
    assert!(String::from_utf8_lossy(&o.stdout).contains("everadapt"));

    let o = everadapt(&["replay-study", "--config", &cfg, "--seeds", "1"], &out);
    assert!(o.status.success());
    let rows = std::fs::read_to_string(out.join("replay_study/replay_study.csv")).unwrap();
    assert_eq!(rows.lines().count(), 7);

    let o = everadapt(&["stability-study", "--config", &cfg, "--seeds", "1"], &out);
    assert!(o.status.success());
    let rows = std::fs::read_to_string(out.join("stability_study/stability.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn five_seeds_give_five_rows_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let p = tmp.path().join("tiny.toml");
    std::fs::write(&p, "[train]\nepochs = 1\n[data]\ntrain_per_class = 20\ntest_per_class = 10\n").unwrap();
    let cfg = p.to_string_lossy();
    assert!(everadapt(&["gen-data", "--config", &cfg], &out).status.success());
    assert!(everadapt(&["run", "--config", &cfg], &out).status.success());
    let csv = std::fs::read_to_string(out.join("run/metrics.csv")).unwrap();
    let seeds: Vec<String> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect();
    assert_eq!(seeds, ["0", "1", "2", "3", "4", "summary"]);
}
