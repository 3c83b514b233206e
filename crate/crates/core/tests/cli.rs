use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const LADDER: &str = r#"
version = 1
seed = 3
trials = 4

[problem]
num_blocks = 20
block_size = 10

[shuffle]
n = 5

[train]
epochs = 12
x0 = [10.5]
"#;

fn corgi2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corgi2")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    corgi2(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn every_subcommand_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ladder.toml", LADDER);
    for cmd in ["gen", "shuffle", "train", "stats", "complexity"] {
        let a = tmp.path().join(format!("{cmd}-a"));
        let b = tmp.path().join(format!("{cmd}-b"));
        for out in [&a, &b] {
            let o = run(cmd, &cfg, out, &[]);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
        let mut files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        assert!(files.iter().any(|f| f.to_string_lossy().ends_with(".csv")), "{cmd} wrote no csv");
        for f in files {
            let (pa, pb) = (a.join(&f), b.join(&f));
            if pa.is_file() {
                assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap(), "{cmd}/{f:?} differs");
            }
        }
    }
}

#[test]
fn csv_rows_carry_the_config_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ladder.toml", LADDER);
    let out = tmp.path().join("train");
    assert!(run("train", &cfg, &out, &[]).status.success());
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let hash = summary.lines().find_map(|l| l.strip_prefix("config_hash: ")).unwrap().to_string();
    for name in ["rounds.csv", "rate.csv"] {
        let mut reader = csv::Reader::from_path(out.join(name)).unwrap();
        let col = reader.headers().unwrap().iter().position(|h| h == "config_hash").unwrap();
        let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| &r[col] == hash.as_str()), "{name}");
    }
    let rounds = csv::Reader::from_path(out.join("rounds.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(
        rounds.iter().take(8).collect::<Vec<_>>(),
        [
            "run_id",
            "strategy",
            "seed",
            "round",
            "T_seen",
            "eta",
            "suboptimality",
            "suboptimality_of_weighted_avg"
        ]
    );
    // 3 strategies x 4 seeds x 12 epochs x 4 rounds per epoch
    let count = csv::Reader::from_path(out.join("rounds.csv")).unwrap().records().count();
    assert_eq!(count, 3 * 4 * 12 * 4);
}

#[test]
fn seed_override_changes_hash_and_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ladder.toml", LADDER);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run("shuffle", &cfg, &a, &[]).status.success());
    assert!(run("shuffle", &cfg, &b, &["--seed", "4"]).status.success());
    assert_ne!(fs::read(a.join("ledger.csv")).unwrap(), fs::read(b.join("ledger.csv")).unwrap());
}

#[test]
fn complexity_rows_match_closed_forms() {
    let tmp = TempDir::new().unwrap();
    let text = "version = 1\n[problem]\nnum_blocks = 100\nblock_size = 10\n[shuffle]\nn = 5\n";
    let cfg = write_config(tmp.path(), "c.toml", text);
    let out = tmp.path().join("c");
    let o = run("complexity", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(out.join("complexity.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "config_hash",
            "strategy",
            "m",
            "b",
            "T",
            "predicted_offline",
            "predicted_online",
            "measured_offline",
            "measured_online",
            "match"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| &r[9] == "true"));
    let corgi2_t10 = rows.iter().find(|r| &r[1] == "corgi2" && &r[4] == "10").unwrap();
    let total: u64 = corgi2_t10[7].parse::<u64>().unwrap() + corgi2_t10[8].parse::<u64>().unwrap();
    assert_eq!(total, 1200);
}

#[test]
fn reconciliation_failure_exits_3() {
    // offline blocks of 5 double the writes the closed form charges
    let tmp = TempDir::new().unwrap();
    let text = LADDER.replace("n = 5", "n = 5\noffline_block_size = 5");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("c");
    let o = run("complexity", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("offline"));
    assert!(out.join("complexity.csv").exists());
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        (LADDER.replace("block_size = 10", "block_size = \"ten\""), "problem.block_size"),
        (LADDER.replace("n = 5", "n = 5\nbuffer = 2"), "shuffle.buffer"),
        (LADDER.replace("version = 1", "version = 9"), "version"),
        (LADDER.replace("x0 = [10.5]", "x0 = [1.0, 2.0]"), "train.x0"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}.toml"), text);
        let out = tmp.path().join(format!("bad{i}"));
        let o = run("gen", &cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{field}");
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
        assert!(!out.exists());
    }
}

#[test]
fn existing_output_dir_is_refused_without_force() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ladder.toml", LADDER);
    let out = tmp.path().join("gen");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = run("gen", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("keep.txt").exists());
    let o = run("gen", &cfg, &out, &["--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.join("keep.txt").exists());
    assert!(out.join("dataset.csv").exists());
}

#[test]
fn divergence_exits_4() {
    let tmp = TempDir::new().unwrap();
    let text = LADDER.replace("x0 = [10.5]", "x0 = [10.5]\neta = 3.0");
    let cfg = write_config(tmp.path(), "d.toml", &text);
    let o = run("train", &cfg, &tmp.path().join("d"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn uniformity_with_replacement_is_a_contract_error() {
    // with-replacement offline output is not a permutation
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "u.toml", LADDER);
    let o = run("uniformity", &cfg, &tmp.path().join("u"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn uniformity_reports_every_strategy() {
    let tmp = TempDir::new().unwrap();
    let text = LADDER.replace("n = 5", "n = 5\nreplacement = \"without\"");
    let cfg = write_config(tmp.path(), "u.toml", &text);
    let out = tmp.path().join("u");
    let o = run("uniformity", &cfg, &out, &["--trials", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<csv::StringRecord> =
        csv::Reader::from_path(out.join("uniformity.csv")).unwrap().records().map(|r| r.unwrap()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.get(1).unwrap()).collect();
    assert_eq!(names, ["sequential", "shuffle_once", "full_shuffle", "corgipile", "corgi2"]);
    assert!(rows.iter().all(|r| &r[2] == "3"));
}

#[test]
fn missing_config_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = run("gen", &tmp.path().join("nope.toml"), &tmp.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(2));
}
