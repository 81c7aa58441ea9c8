//! Aggregation over seeds: per-target and leave-one-domain-out means with
//! their standard deviations, recomputed from the metrics files of each run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{run_id, ExperimentConfig};
use crate::error::{Error, Result};
use crate::runner::{read_csv, write_csv, CellRow};

/// One aggregated cell. `target` is a domain index or `mean` for the
/// leave-one-domain-out average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggRow {
    pub variant: String,
    pub target: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rows in `order` of variants, targets ascending, then `mean`.
pub fn aggregate(cells: &[CellRow], order: &[String]) -> Vec<AggRow> {
    let mut out = Vec::new();
    for v in order {
        let mine: Vec<&CellRow> = cells.iter().filter(|c| &c.variant == v).collect();
        let mut by_target: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for c in &mine {
            by_target.entry(c.target).or_default().push(c.accuracy);
            by_seed.entry(c.seed).or_default().push(c.accuracy);
        }
        for (t, xs) in &by_target {
            let (mean, std) = mean_std(xs);
            out.push(AggRow {
                variant: v.clone(),
                target: t.to_string(),
                seeds: xs.len(),
                mean,
                std,
            });
        }
        let lodo: Vec<f64> = by_seed
            .values()
            .map(|xs| xs.iter().sum::<f64>() / xs.len() as f64)
            .collect();
        if !lodo.is_empty() {
            let (mean, std) = mean_std(&lodo);
            out.push(AggRow {
                variant: v.clone(),
                target: "mean".into(),
                seeds: lodo.len(),
                mean,
                std,
            });
        }
    }
    out
}

fn variants_in_order(rows: &[AggRow]) -> Vec<&str> {
    let mut v: Vec<&str> = Vec::new();
    for r in rows {
        if !v.contains(&r.variant.as_str()) {
            v.push(&r.variant);
        }
    }
    v
}

/// One line per variant: per-target means, then the LODO mean and its std.
pub fn wide_csv(rows: &[AggRow]) -> String {
    let mut targets: Vec<usize> = rows.iter().filter_map(|r| r.target.parse().ok()).collect();
    targets.sort_unstable();
    targets.dedup();
    let targets: Vec<String> = targets.iter().map(usize::to_string).collect();
    let mut s = String::from("variant");
    for t in &targets {
        write!(s, ",t{t}").unwrap();
    }
    s.push_str(",mean,std\n");
    for v in variants_in_order(rows) {
        s.push_str(v);
        for t in &targets {
            match rows.iter().find(|r| r.variant == v && r.target == *t) {
                Some(r) => write!(s, ",{}", r.mean).unwrap(),
                None => s.push(','),
            }
        }
        match rows.iter().find(|r| r.variant == v && r.target == "mean") {
            Some(r) => writeln!(s, ",{},{}", r.mean, r.std).unwrap(),
            None => s.push_str(",,\n"),
        }
    }
    s
}

/// Fixed-width table of accuracies in percent.
pub fn render(rows: &[AggRow]) -> String {
    let csv = wide_csv(rows);
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        write!(out, "{:<20}", cells[0]).unwrap();
        for c in &cells[1..] {
            if i == 0 {
                write!(out, "{c:>8}").unwrap();
            } else {
                match c.parse::<f64>() {
                    Ok(x) => write!(out, "{:>8.2}", 100.0 * x).unwrap(),
                    Err(_) => write!(out, "{:>8}", "-").unwrap(),
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Deserialize)]
struct MetricProbe {
    target: usize,
    kind: String,
    eval_accuracy: Option<f64>,
}

/// Final held-out accuracy per target, read back from `metrics.jsonl`.
pub fn accuracies_from_metrics(run: &Path) -> Result<BTreeMap<usize, f64>> {
    let path = run.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let mut last = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let p: MetricProbe = serde_json::from_str(line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
        if p.kind == "epoch" {
            if let Some(a) = p.eval_accuracy {
                last.insert(p.target, a);
            }
        }
    }
    Ok(last)
}

fn load_snapshot(run: &Path) -> Result<ExperimentConfig> {
    let path = run.join("config.toml");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    toml::from_str(&text).map_err(|e| Error::format(&path, e))
}

/// Cells gathered from grid directories (their `cells.csv` names the runs)
/// or bare run directories (labelled by their attached modules).
fn collect(paths: &[PathBuf]) -> Result<(Vec<(String, PathBuf)>, Vec<String>)> {
    let mut runs = Vec::new();
    let mut order = Vec::new();
    for p in paths {
        let cells_path = p.join("cells.csv");
        if cells_path.exists() {
            let root = p.parent().unwrap_or(Path::new("."));
            let cells: Vec<CellRow> = read_csv(&cells_path)?;
            for c in cells {
                if !order.contains(&c.variant) {
                    order.push(c.variant.clone());
                }
                let run = root.join("runs").join(&c.run_id);
                if !runs.contains(&(c.variant.clone(), run.clone())) {
                    runs.push((c.variant, run));
                }
            }
        } else if p.join("metrics.jsonl").exists() {
            let label = load_snapshot(p)?.modules.label().to_string();
            if !order.contains(&label) {
                order.push(label.clone());
            }
            runs.push((label, p.clone()));
        } else {
            return Err(Error::format(p, "neither a grid nor a run directory"));
        }
    }
    Ok((runs, order))
}

#[derive(Debug, Clone)]
pub struct Export {
    pub dir: PathBuf,
    pub rows: Vec<AggRow>,
    pub table: String,
}

/// Aggregate `paths` into `<out>/export-<id>/`. Runs of one variant must
/// share a config up to the seed unless `force`.
pub fn export_results(paths: &[PathBuf], out: &Path, force: bool) -> Result<Export> {
    let (runs, order) = collect(paths)?;
    let mut cells = Vec::new();
    let mut reference: BTreeMap<String, (PathBuf, String)> = BTreeMap::new();
    for (variant, run) in &runs {
        let cfg = load_snapshot(run)?;
        let seed = cfg.seeds[0];
        let norm = cfg.for_seed(0).to_toml();
        match reference.get(variant) {
            Some((first, r)) if *r != norm && !force => {
                return Err(Error::Config(format!(
                    "runs {} and {} of `{variant}` differ in more than the seed (pass --force to aggregate anyway)",
                    first.display(),
                    run.display()
                )));
            }
            Some(_) => {}
            None => {
                reference.insert(variant.clone(), (run.clone(), norm));
            }
        }
        for (target, accuracy) in accuracies_from_metrics(run)? {
            cells.push(CellRow {
                variant: variant.clone(),
                seed,
                target,
                accuracy,
                run_id: String::new(),
            });
        }
    }
    let rows = aggregate(&cells, &order);
    let key: String = runs
        .iter()
        .map(|(v, r)| format!("{v}={}\n", r.display()))
        .collect();
    let dir = out.join(format!("export-{}", run_id("export", &key)));
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    write_csv(&dir.join("aggregate.csv"), &rows)?;
    let table = render(&rows);
    fs::write(dir.join("summary.txt"), &table).map_err(Error::io(&dir))?;
    Ok(Export { dir, rows, table })
}
