//! CSV and JSON output for benchmark runs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::Method;
use crate::runner::{BenchResult, ResultRow, Scatter, TraceSet};
use crate::BenchError;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESULTS_HEADER: &str = "method,d,m,sigma,matrix,sw,failures,seconds";

/// Mean SW over matrices for one `(method, d, m, sigma)` setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    /// Matrices with a finite SW.
    pub matrices: usize,
    pub aborted: usize,
    pub mean_sw: Option<f64>,
    /// Half-width of the normal 95% interval, `1.96 * sd / sqrt(n)`.
    pub ci95: Option<f64>,
}

/// Group rows by setting in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, usize, usize, u64)> = Vec::new();
    for r in rows {
        let k = (r.method, r.d, r.m, r.sigma.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, d, m, sigma_bits)| {
            let group: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| (r.method, r.d, r.m, r.sigma.to_bits()) == (method, d, m, sigma_bits))
                .collect();
            let sws: Vec<f64> = group.iter().map(|r| r.sw).filter(|v| v.is_finite()).collect();
            let n = sws.len();
            let mean = (n > 0).then(|| sws.iter().sum::<f64>() / n as f64);
            let ci95 = mean.map(|mu| {
                if n < 2 {
                    0.0
                } else {
                    let var = sws.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
                    1.96 * (var / n as f64).sqrt()
                }
            });
            SummaryRow {
                method,
                d,
                m,
                sigma: f64::from_bits(sigma_bits),
                matrices: n,
                aborted: group.len() - n,
                mean_sw: mean,
                ci95,
            }
        })
        .collect()
}

fn sigma_tag(sigma: f64) -> String {
    format!("{sigma:e}")
}

pub fn scatter_file_name(s: &Scatter) -> String {
    format!("scatter_d{}_m{}_s{}.csv", s.d, s.m, sigma_tag(s.sigma))
}

pub fn trace_file_name(t: &TraceSet) -> String {
    format!("trace_{}_d{}_m{}_s{}.csv", t.method, t.d, t.m, sigma_tag(t.sigma))
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<(), BenchError> {
    if rows.is_empty() {
        let mut f = fs::File::create(path).map_err(|e| BenchError::io(path, e))?;
        return writeln!(f, "{RESULTS_HEADER}").map_err(|e| BenchError::io(path, e));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::csv(path, e))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, BenchError> {
    #[derive(serde::Deserialize)]
    struct Raw {
        method: Method,
        d: usize,
        m: usize,
        sigma: f64,
        matrix: usize,
        sw: f64,
        failures: usize,
        seconds: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    r.deserialize()
        .map(|row| {
            let x: Raw = row.map_err(|e| BenchError::csv(path, e))?;
            Ok(ResultRow {
                method: x.method,
                d: x.d,
                m: x.m,
                sigma: x.sigma,
                matrix: x.matrix,
                sw: x.sw,
                failures: x.failures,
                seconds: x.seconds,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), BenchError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| BenchError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| BenchError::io(path, e))
}

pub fn write_scatter(s: &Scatter, path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    w.write_record(["source", "x0", "x1"]).map_err(|e| BenchError::csv(path, e))?;
    for (src, a, b) in &s.points {
        w.write_record([src.as_str(), &a.to_string(), &b.to_string()])
            .map_err(|e| BenchError::csv(path, e))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

#[derive(Serialize)]
struct TraceRow {
    chain_id: usize,
    t: usize,
    residual_sq: Option<f64>,
    cg_iters_mean: Option<usize>,
    cg_iters_noise: Option<usize>,
}

pub fn write_trace(set: &TraceSet, num_steps: usize, path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    for (chain_id, tr) in &set.traces {
        let first = TraceRow {
            chain_id: *chain_id,
            t: num_steps,
            residual_sq: tr.initial_residual_sq,
            cg_iters_mean: None,
            cg_iters_noise: None,
        };
        w.serialize(first).map_err(|e| BenchError::csv(path, e))?;
        for rec in &tr.steps {
            let row = TraceRow {
                chain_id: *chain_id,
                t: rec.t,
                residual_sq: rec.residual_sq,
                cg_iters_mean: rec.cg_iters_mean,
                cg_iters_noise: rec.cg_iters_noise,
            };
            w.serialize(row).map_err(|e| BenchError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

/// Write `results.csv`, `summary.json` and any scatter or trace files into `out_dir`.
pub fn emit_results(result: &BenchResult, num_steps: usize, out_dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(out_dir).map_err(|e| BenchError::io(out_dir, e))?;
    write_results_csv(&result.rows, &out_dir.join(RESULTS_FILE))?;
    write_json(&summarize(&result.rows), &out_dir.join(SUMMARY_FILE))?;
    for s in &result.scatters {
        write_scatter(s, &out_dir.join(scatter_file_name(s)))?;
    }
    for t in &result.traces {
        write_trace(t, num_steps, &out_dir.join(trace_file_name(t)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, matrix: usize, sw: f64) -> ResultRow {
        ResultRow {
            method,
            d: 8,
            m: 1,
            sigma: 0.01,
            matrix,
            sw,
            failures: 0,
            seconds: 0.0,
        }
    }

    #[test]
    fn summary_mean_and_interval() {
        let rows = vec![
            row(Method::Cdps, 0, 1.0),
            row(Method::Cdps, 1, 2.0),
            row(Method::Cdps, 2, 3.0),
            row(Method::Dps, 0, 5.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].mean_sw, Some(2.0));
        let ci = s[0].ci95.unwrap();
        assert!((ci - 1.96 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].mean_sw, Some(5.0));
        assert_eq!(s[1].ci95, Some(0.0));
    }

    #[test]
    fn aborted_rows_are_excluded() {
        let rows = vec![row(Method::Cdps, 0, f64::NAN), row(Method::Cdps, 1, 4.0)];
        let s = summarize(&rows);
        assert_eq!((s[0].matrices, s[0].aborted, s[0].mean_sw), (1, 1, Some(4.0)));
        let all_nan = summarize(&rows[..1]);
        assert_eq!(all_nan[0].mean_sw, None);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![row(Method::ScoreSde, 3, 0.25), row(Method::Ilvr, 4, f64::NAN)];
        write_results_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);
        let back = read_results_csv(&path).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].sw.is_nan());
    }

    #[test]
    fn empty_results_have_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results_csv(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{RESULTS_HEADER}\n"));
    }
}
