//! Result tables and their CSV / plot-data files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! reparsed table equals the in-memory one exactly.

use std::fs;
use std::path::{Path, PathBuf};

use mmvm_core::Matrix;

use crate::error::{HarnessError, Result};
use crate::experiments::GenerationRow;

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    /// `z_f`, `z_l` or `z_j`.
    pub representation: String,
    pub label: String,
    pub seed: u64,
    /// Labeled-set size for sweep tables.
    pub size: Option<usize>,
    pub auroc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Mean and sample standard deviation over seeds; `std` is `None` for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Stat { n, mean, std }
    }
}

/// Rows grouped by `key`, groups and their seed lists in first-appearance order.
fn group_by<K: PartialEq + Clone>(items: impl IntoIterator<Item = (K, u64, f64)>) -> Vec<(K, Vec<(u64, f64)>)> {
    let mut groups: Vec<(K, Vec<(u64, f64)>)> = Vec::new();
    for (k, seed, v) in items {
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, vs)) => vs.push((seed, v)),
            None => groups.push((k, vec![(seed, v)])),
        }
    }
    groups
}

/// Per-seed average of the values sharing a seed, seeds in first-appearance order.
fn per_seed_mean(values: &[(u64, f64)]) -> Vec<(u64, f64)> {
    group_by(values.iter().map(|&(s, v)| ((), s, v)))
        .into_iter()
        .flat_map(|(_, vs)| vs)
        .fold(Vec::<(u64, f64, usize)>::new(), |mut acc, (s, v)| {
            match acc.iter_mut().find(|(t, _, _)| *t == s) {
                Some(e) => {
                    e.1 += v;
                    e.2 += 1;
                }
                None => acc.push((s, v, 1)),
            }
            acc
        })
        .into_iter()
        .map(|(s, sum, c)| (s, sum / c as f64))
        .collect()
}

impl ResultTable {
    pub fn has_sizes(&self) -> bool {
        self.rows.iter().any(|r| r.size.is_some())
    }

    /// Per-(method, representation, label, size) statistics over seeds.
    pub fn per_label(&self) -> Vec<((String, String, String, Option<usize>), Stat)> {
        group_by(self.rows.iter().map(|r| {
            ((r.method.clone(), r.representation.clone(), r.label.clone(), r.size), r.seed, r.auroc)
        }))
        .into_iter()
        .map(|(k, vs)| (k, Stat::of(&vs.iter().map(|v| v.1).collect::<Vec<_>>())))
        .collect()
    }

    /// Macro-AUROC per seed for rows matching `keep`: the mean over labels
    /// (and representations) within each seed.
    pub fn macro_by_seed(&self, keep: impl Fn(&ResultRow) -> bool) -> Vec<(u64, f64)> {
        let vals: Vec<(u64, f64)> = self.rows.iter().filter(|r| keep(r)).map(|r| (r.seed, r.auroc)).collect();
        per_seed_mean(&vals)
    }

    /// Per-(method, representation, size) macro-AUROC statistics over seeds.
    pub fn macro_by_representation(&self) -> Vec<((String, String, Option<usize>), Stat)> {
        self.macro_groups(|r| (r.method.clone(), r.representation.clone(), r.size))
    }

    /// Per-(method, size) macro-AUROC over labels and representations.
    pub fn macro_by_method(&self) -> Vec<((String, Option<usize>), Stat)> {
        self.macro_groups(|r| (r.method.clone(), r.size))
    }

    fn macro_groups<K: PartialEq + Clone>(&self, key: impl Fn(&ResultRow) -> K) -> Vec<(K, Stat)> {
        group_by(self.rows.iter().map(|r| (key(r), r.seed, r.auroc)))
            .into_iter()
            .map(|(k, vs)| {
                let per_seed: Vec<f64> = per_seed_mean(&vs).into_iter().map(|v| v.1).collect();
                (k, Stat::of(&per_seed))
            })
            .collect()
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_std(s: Option<f64>) -> String {
    s.map(fmt_f).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    mmvm_core::Error::Io { path: path.display().to_string(), source: e }.into()
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => HarnessError::Data(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Columns `method,representation,label,seed[,size],auroc`.
pub fn write_results_csv(path: &Path, table: &ResultTable) -> Result<()> {
    let sized = table.has_sizes();
    let mut header = vec!["method", "representation", "label", "seed"];
    if sized {
        header.push("size");
    }
    header.push("auroc");
    let rows = table.rows.iter().map(|r| {
        let mut rec = vec![r.method.clone(), r.representation.clone(), r.label.clone(), r.seed.to_string()];
        if sized {
            rec.push(r.size.map(|s| s.to_string()).unwrap_or_default());
        }
        rec.push(fmt_f(r.auroc));
        rec
    });
    write_rows(path, &header, rows)
}

pub fn read_results_csv(path: &Path) -> Result<ResultTable> {
    let bad = |msg: String| HarnessError::Data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let sized = match header.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["method", "representation", "label", "seed", "auroc"] => false,
        ["method", "representation", "label", "seed", "size", "auroc"] => true,
        _ => return Err(bad(format!("unexpected header {header:?}"))),
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |k: usize| rec.get(k).ok_or_else(|| bad(format!("row {}: missing column {k}", i + 1)));
        let num_err = |what: &str| bad(format!("row {}: invalid {what}", i + 1));
        let size = if sized { Some(field(4)?.parse().map_err(|_| num_err("size"))?) } else { None };
        rows.push(ResultRow {
            method: field(0)?.to_string(),
            representation: field(1)?.to_string(),
            label: field(2)?.to_string(),
            seed: field(3)?.parse().map_err(|_| num_err("seed"))?,
            size,
            auroc: field(if sized { 5 } else { 4 })?.parse().map_err(|_| num_err("auroc"))?,
        });
    }
    Ok(ResultTable { rows })
}

/// `{prefix}_results.csv`, `{prefix}_summary.csv` (per label),
/// `{prefix}_macro.csv` (per representation) and, for sweep tables,
/// `{prefix}_curve.csv` plus the whitespace-separated `{prefix}_curve.dat`
/// (one row per size, mean and std columns per method; `NaN` marks a missing
/// std or method).
pub fn write_report(table: &ResultTable, prefix: &str, out: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(HarnessError::Data(format!("no {prefix} results to report")));
    }
    let sized = table.has_sizes();
    let size_col = |s: Option<usize>| s.map(|v| v.to_string()).unwrap_or_default();
    let mut written = Vec::new();

    let path = out.join(format!("{prefix}_results.csv"));
    write_results_csv(&path, table)?;
    written.push(path);

    let path = out.join(format!("{prefix}_summary.csv"));
    let mut header = vec!["method", "representation", "label"];
    if sized {
        header.push("size");
    }
    header.extend(["n_seeds", "mean", "std"]);
    let rows = table.per_label().into_iter().map(|((m, r, l, s), st)| {
        let mut rec = vec![m, r, l];
        if sized {
            rec.push(size_col(s));
        }
        rec.extend([st.n.to_string(), fmt_f(st.mean), fmt_std(st.std)]);
        rec
    });
    write_rows(&path, &header, rows)?;
    written.push(path);

    let path = out.join(format!("{prefix}_macro.csv"));
    let mut header = vec!["method", "representation"];
    if sized {
        header.push("size");
    }
    header.extend(["n_seeds", "mean", "std"]);
    let rows = table.macro_by_representation().into_iter().map(|((m, r, s), st)| {
        let mut rec = vec![m, r];
        if sized {
            rec.push(size_col(s));
        }
        rec.extend([st.n.to_string(), fmt_f(st.mean), fmt_std(st.std)]);
        rec
    });
    write_rows(&path, &header, rows)?;
    written.push(path);

    if sized {
        let curve = table.macro_by_method();
        let path = out.join(format!("{prefix}_curve.csv"));
        let rows = curve.iter().map(|((m, s), st)| {
            vec![m.clone(), size_col(*s), st.n.to_string(), fmt_f(st.mean), fmt_std(st.std)]
        });
        write_rows(&path, &["method", "size", "n_seeds", "mean", "std"], rows)?;
        written.push(path);

        let mut methods: Vec<&str> = Vec::new();
        let mut sizes: Vec<usize> = Vec::new();
        for ((m, s), _) in &curve {
            if !methods.contains(&m.as_str()) {
                methods.push(m);
            }
            if let Some(s) = s {
                if !sizes.contains(s) {
                    sizes.push(*s);
                }
            }
        }
        sizes.sort_unstable();
        let mut text = String::from("# size");
        for m in &methods {
            text.push_str(&format!(" {m}_mean {m}_std"));
        }
        text.push('\n');
        for s in &sizes {
            text.push_str(&s.to_string());
            for m in &methods {
                let st = curve.iter().find(|((cm, cs), _)| cm == m && *cs == Some(*s)).map(|(_, st)| st);
                let mean = st.map_or(f64::NAN, |st| st.mean);
                let std = st.and_then(|st| st.std).unwrap_or(f64::NAN);
                text.push_str(&format!(" {} {}", fmt_f(mean), fmt_f(std)));
            }
            text.push('\n');
        }
        let path = out.join(format!("{prefix}_curve.dat"));
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// `generation_mse.csv`: one row per (method, seed).
pub fn write_generation_csv(path: &Path, rows: &[GenerationRow]) -> Result<()> {
    let recs = rows.iter().map(|r| {
        vec![r.method.clone(), r.seed.to_string(), r.count.to_string(), fmt_f(r.mse_conditional), fmt_f(r.mse_prior)]
    });
    write_rows(path, &["method", "seed", "count", "mse_conditional", "mse_prior"], recs)
}

/// Matrix rows as CSV with header `v0,v1,...`.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let header: Vec<String> = (0..m.cols()).map(|j| format!("v{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..m.rows()).map(|i| m.row(i).iter().map(|&v| fmt_f(v)).collect());
    write_rows(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, rep: &str, label: &str, seed: u64, size: Option<usize>, auroc: f64) -> ResultRow {
        ResultRow { method: method.into(), representation: rep.into(), label: label.into(), seed, size, auroc }
    }

    #[test]
    fn single_seed_has_no_std() {
        let s = Stat::of(&[0.7]);
        assert_eq!((s.n, s.mean, s.std), (1, 0.7, None));
        let s = Stat::of(&[0.5, 0.7]);
        assert!((s.std.unwrap() - 0.1f64.hypot(0.1)).abs() < 1e-15);
    }

    #[test]
    fn macro_averages() {
        let t = ResultTable {
            rows: vec![
                row("a", "z_f", "x", 0, None, 0.6),
                row("a", "z_f", "y", 0, None, 0.8),
                row("a", "z_l", "x", 0, None, 0.5),
                row("a", "z_f", "x", 1, None, 0.9),
                row("a", "z_f", "y", 1, None, 0.7),
                row("a", "z_l", "x", 1, None, 0.6),
            ],
        };
        assert_eq!(t.macro_by_seed(|r| r.representation == "z_f"), vec![(0, 0.7), (1, 0.8)]);
        let by_rep = t.macro_by_representation();
        assert_eq!(by_rep[0].0 .1, "z_f");
        assert!((by_rep[0].1.mean - 0.75).abs() < 1e-15);
        let m = t.macro_by_method();
        assert_eq!(m.len(), 1);
        assert!((m[0].1.mean - (1.9 / 3.0 + 2.2 / 3.0) / 2.0).abs() < 1e-15);
    }
}
