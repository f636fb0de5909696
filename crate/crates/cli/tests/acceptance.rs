//! Runs the full acceptance suite through the `cdlab` binary, twice, and
//! prints one pass/fail line per criterion 1 to 10.
//!
//! The second run compares its CSV outputs against the first (criterion 10);
//! this target also compares the two output trees byte for byte on its own.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

#[derive(Debug)]
struct Row {
    name: String,
    metric: String,
    value: String,
    bound: String,
    pass: bool,
}

fn run_suite(out: &Path, baseline: Option<&Path>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cdlab"));
    cmd.arg("acceptance").arg("--out").arg(out).env_remove("CDL_THREADS");
    if let Some(b) = baseline {
        cmd.arg("--set").arg(format!("acceptance.baseline={}", b.display()));
    }
    cmd.output().expect("cdlab binary runs")
}

fn read_rows(dir: &Path) -> BTreeMap<u32, Vec<Row>> {
    let mut rdr = csv::Reader::from_path(dir.join("acceptance.csv")).expect("acceptance.csv exists");
    let mut out: BTreeMap<u32, Vec<Row>> = BTreeMap::new();
    for rec in rdr.records() {
        let r = rec.expect("well-formed record");
        out.entry(r[0].parse().expect("criterion id")).or_default().push(Row {
            name: r[1].to_string(),
            metric: r[2].to_string(),
            value: r[3].to_string(),
            bound: r[4].to_string(),
            pass: &r[5] == "1",
        });
    }
    out
}

/// `id seconds budget within_budget` per line; budget is `-` when unbounded.
fn read_timings(dir: &Path) -> BTreeMap<u32, (f64, Option<f64>)> {
    let text = std::fs::read_to_string(dir.join("timings.txt")).expect("timings.txt exists");
    text.lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            assert_eq!(f.len(), 4, "timing line {l:?}");
            let id = f[0].parse().expect("criterion id");
            let secs = f[1].parse().expect("seconds");
            let budget = (f[2] != "-").then(|| f[2].parse().expect("budget"));
            (id, (secs, budget))
        })
        .collect()
}

fn csv_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("output tree readable") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, acc);
            } else if path.extension().is_some_and(|e| e == "csv") && path.file_name().is_some_and(|n| n != "report.csv") {
                let rel = path.strip_prefix(root).expect("inside tree").to_string_lossy().into_owned();
                acc.insert(rel, std::fs::read(&path).expect("csv readable"));
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

/// Plain `main` (no test harness) so the criterion lines always reach stdout.
fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");

    let out1 = run_suite(&first, None);
    assert!(out1.status.success(), "first run failed:\n{}", String::from_utf8_lossy(&out1.stdout));
    let out2 = run_suite(&second, Some(&first));

    let rows = read_rows(&second);
    let timings = read_timings(&second);
    let mut verdicts = Vec::new();
    for id in 1..=9u32 {
        let metrics = rows.get(&id).unwrap_or_else(|| panic!("criterion {id} missing from acceptance.csv"));
        let (secs, budget) = timings[&id];
        let in_budget = budget.map_or(true, |b| secs <= b);
        let pass = metrics.iter().all(|m| m.pass) && in_budget;
        let detail: Vec<String> =
            metrics.iter().map(|m| format!("{} = {} ({})", m.metric, m.value, m.bound)).collect();
        let budget_note = budget.map_or(String::new(), |b| format!("; {secs:.2} s of {b} s"));
        println!(
            "criterion {id:>2} {:<28} {}: {}{budget_note}",
            metrics[0].name,
            if pass { "PASS" } else { "FAIL" },
            detail.join("; ")
        );
        verdicts.push((id, pass));
    }

    let tree1 = csv_tree(&first);
    let tree2 = csv_tree(&second);
    let differing: Vec<&String> = tree1.keys().filter(|k| tree2.get(*k) != tree1.get(*k)).collect();
    let missing: Vec<&String> = tree2.keys().filter(|k| !tree1.contains_key(*k)).collect();
    let binary_line = std::fs::read_to_string(second.join("determinism.txt")).unwrap_or_default();
    let binary_pass = binary_line.contains("PASS");
    let pass10 = differing.is_empty() && missing.is_empty() && !tree1.is_empty() && binary_pass;
    println!(
        "criterion 10 {:<28} {}: {} of {} CSV files differ between identical runs; binary self-check {}",
        "determinism",
        if pass10 { "PASS" } else { "FAIL" },
        differing.len() + missing.len(),
        tree1.len(),
        if binary_pass { "PASS" } else { "FAIL" }
    );
    verdicts.push((10, pass10));

    let failed: Vec<u32> = verdicts.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failing criteria {failed:?}; differing files {differing:?} {missing:?}");
    assert!(out2.status.success(), "second run exited with {:?}", out2.status.code());
    println!("acceptance: all 10 criteria pass");
}
