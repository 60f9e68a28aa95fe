//! CSV artifacts for tables and figures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use super::data::{list_process_files, read_process_file};
use super::experiment::{BaselineResult, Evaluation, RobustnessResult};
use crate::error::{Error, Result};
use crate::metrics::{MetricSummary, StepMetrics};
use crate::td3::{read_gains_csv, write_atomic};

fn csv_bytes(path: &Path, f: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::DataFile { path: path.to_path_buf(), msg: e.to_string() })?;
    write_atomic(path, &bytes)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

const STEP_HEADER: [&str; 10] =
    ["step", "iae", "ise", "tv", "tv_u", "percent_os", "settling_time", "epsilon", "raw_tv", "ms"];

fn step_row(label: &str, s: &StepMetrics) -> Vec<String> {
    vec![
        label.to_string(),
        s.iae.to_string(),
        s.ise.to_string(),
        s.tv.to_string(),
        fmt_opt(s.tv_u),
        s.percent_os.to_string(),
        fmt_opt(s.settling_time),
        s.epsilon.to_string(),
        s.raw_tv.to_string(),
        String::new(),
    ]
}

fn mean_row(label: &str, m: &MetricSummary, ms: Option<f64>) -> Vec<String> {
    let mut row = vec![label.to_string()];
    row.extend(m.to_array().iter().map(f64::to_string));
    row.extend([String::new(), String::new(), fmt_opt(ms)]);
    row
}

/// `{name}_steps.csv` (one row per step change plus a `mean` row) and
/// `{name}_timeseries.csv`.
pub fn write_evaluation(dir: &Path, name: &str, eval: &Evaluation) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let steps = dir.join(format!("{name}_steps.csv"));
    csv_bytes(&steps, |w| {
        w.write_record(STEP_HEADER)?;
        for (k, s) in eval.report.steps.iter().enumerate() {
            w.write_record(step_row(&(k + 1).to_string(), s))?;
        }
        w.write_record(mean_row("mean", &eval.report.mean, eval.report.ms))?;
        Ok(())
    })?;
    let series = dir.join(format!("{name}_timeseries.csv"));
    csv_bytes(&series, |w| {
        if eval.rows.is_empty() {
            w.write_record(["t_s"])?;
        }
        for r in &eval.rows {
            w.serialize(r)?;
        }
        Ok(())
    })?;
    Ok(vec![steps, series])
}

/// Mean ± std across conditions, one row per metric.
pub fn write_robustness_table(path: &Path, r: &RobustnessResult) -> Result<()> {
    csv_bytes(path, |w| {
        let mut header = vec!["metric".to_string()];
        header.extend(r.conditions.iter().map(|c| c.name.to_string()));
        header.extend(["mean".to_string(), "std".to_string(), "mean_pm_std".to_string()]);
        w.write_record(&header)?;
        let mean = r.summary.mean.to_array();
        let std = r.summary.std.to_array();
        for (k, name) in MetricSummary::FIELDS.iter().enumerate() {
            let mut row = vec![name.to_string()];
            row.extend(r.conditions.iter().map(|c| c.evaluation.report.mean.to_array()[k].to_string()));
            row.push(mean[k].to_string());
            row.push(std[k].to_string());
            row.push(format!("{:.3} ± {:.3}", mean[k], std[k]));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

pub fn write_baseline_table(path: &Path, b: &BaselineResult) -> Result<()> {
    csv_bytes(path, |w| {
        w.write_record([
            "tc", "k", "tau1", "theta_d", "k_p", "k_i", "k_d", "k_tau", "iae", "ise", "tv", "tv_u", "percent_os",
            "settling_time", "ms",
        ])?;
        for row in &b.rows {
            let g = row.evaluation.gains;
            let m = row.evaluation.report.mean.to_array();
            let mut rec: Vec<String> = [row.tc, b.model.k, b.model.tau1, b.model.theta_d, g.kp, g.ki, g.kd, g.ktau]
                .iter()
                .chain(m.iter())
                .map(f64::to_string)
                .collect();
            rec.push(fmt_opt(row.evaluation.report.ms));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Level bins for occupancy histograms; samples outside are counted in the
/// edge bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapGrid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HeatmapGrid {
    fn default() -> Self {
        Self { lo: 55.0, hi: 70.0, bins: 60 }
    }
}

impl HeatmapGrid {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn bin(&self, level: f64) -> usize {
        let k = ((level - self.lo) / self.width()).floor();
        if k.is_nan() || k < 0.0 {
            0
        } else {
            (k as usize).min(self.bins - 1)
        }
    }
}

/// Level occupancy per episode cycle.
pub fn level_heatmap(per_cycle: &BTreeMap<usize, Vec<f64>>, grid: HeatmapGrid) -> BTreeMap<usize, Vec<u64>> {
    per_cycle
        .iter()
        .map(|(c, levels)| {
            let mut h = vec![0u64; grid.bins];
            for &l in levels {
                h[grid.bin(l)] += 1;
            }
            (*c, h)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    source: &'a str,
    iae: &'a str,
    ise: &'a str,
    tv: &'a str,
    tv_u: &'a str,
    percent_os: &'a str,
    settling_time: &'a str,
    ms: &'a str,
}

/// Collects experiment artifacts in `dir` into `dir/report/`: a scorecard of
/// every evaluation's mean row, the gains trajectory, and per-cycle level
/// heatmaps from the process data. Missing pieces produce warnings and
/// header-only tables.
pub fn emit_report(dir: &Path) -> Result<ReportSummary> {
    let out = dir.join("report");
    std::fs::create_dir_all(&out)?;
    let mut summary = ReportSummary::default();
    let warn_on = |s: &mut ReportSummary, msg: String| {
        warn!("{msg}");
        s.warnings.push(msg);
    };

    // scorecard
    let mut sources: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_steps.csv")))
        .collect();
    sources.sort();
    if sources.is_empty() {
        warn_on(&mut summary, "no evaluation tables found".into());
    }
    let score = out.join("scorecard.csv");
    let mut rows: Vec<(String, csv::StringRecord)> = Vec::new();
    for p in &sources {
        let name = p.file_name().unwrap().to_str().unwrap().trim_end_matches("_steps.csv").to_string();
        let mut r = csv::Reader::from_path(p).map_err(|e| Error::DataFile { path: p.clone(), msg: e.to_string() })?;
        match r.records().filter_map(|x| x.ok()).find(|rec| rec.get(0) == Some("mean")) {
            Some(rec) => rows.push((name, rec)),
            None => warn_on(&mut summary, format!("{} has no mean row", p.display())),
        }
    }
    csv_bytes(&score, |w| {
        if rows.is_empty() {
            w.write_record(["source", "iae", "ise", "tv", "tv_u", "percent_os", "settling_time", "ms"])?;
        }
        for (name, rec) in &rows {
            let get = |i: usize| rec.get(i).unwrap_or("");
            w.serialize(ScoreRow {
                source: name,
                iae: get(1),
                ise: get(2),
                tv: get(3),
                tv_u: get(4),
                percent_os: get(5),
                settling_time: get(6),
                ms: get(9),
            })?;
        }
        Ok(())
    })?;
    summary.written.push(score);

    // gains trajectory
    let traj = out.join("gains_trajectory.csv");
    let gains_path = dir.join("gains.csv");
    let gains = if gains_path.exists() {
        read_gains_csv(&gains_path)?
    } else {
        warn_on(&mut summary, "no gains.csv found".into());
        Vec::new()
    };
    csv_bytes(&traj, |w| {
        w.write_record(["update", "timestamp", "k_p", "k_i", "k_d", "k_tau"])?;
        for (k, g) in gains.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend([g.timestamp, g.k_p, g.k_i, g.k_d, g.k_tau].iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    summary.written.push(traj);

    // heatmaps
    let files = list_process_files(&dir.join("process"))?;
    if files.is_empty() {
        warn_on(&mut summary, "no process data found".into());
    }
    let mut per_cycle: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for f in &files {
        let rows = read_process_file(&f.path)?;
        per_cycle.entry(f.cycle).or_default().extend(rows.iter().map(|r| r.level_cm));
    }
    let grid = HeatmapGrid::default();
    let heat = level_heatmap(&per_cycle, grid);
    let heat_path = out.join("heatmap.csv");
    csv_bytes(&heat_path, |w| {
        w.write_record(["cycle", "bin_lo_cm", "bin_hi_cm", "count"])?;
        for (c, h) in &heat {
            for (k, n) in h.iter().enumerate() {
                let lo = grid.lo + k as f64 * grid.width();
                w.write_record([c.to_string(), lo.to_string(), (lo + grid.width()).to_string(), n.to_string()])?;
            }
        }
        Ok(())
    })?;
    summary.written.push(heat_path);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_evaluation, write_process_file, ExperimentConfig, ProcessFile};
    use crate::plant::LogRecord;

    #[test]
    fn empty_directory_gives_empty_tables() {
        let dir = tempfile::tempdir().unwrap();
        let s = emit_report(dir.path()).unwrap();
        assert_eq!(s.written.len(), 3);
        assert_eq!(s.warnings.len(), 3);
        let heat = std::fs::read_to_string(dir.path().join("report/heatmap.csv")).unwrap();
        assert_eq!(heat.lines().count(), 1);
    }

    #[test]
    fn heatmap_conserves_samples() {
        let mut per_cycle = BTreeMap::new();
        per_cycle.insert(1, vec![40.0, 55.0, 60.1, 64.9, 99.0, f64::NAN]);
        per_cycle.insert(2, vec![60.0; 17]);
        let h = level_heatmap(&per_cycle, HeatmapGrid::default());
        assert_eq!(h[&1].iter().sum::<u64>(), 6);
        assert_eq!(h[&2].iter().sum::<u64>(), 17);
    }

    #[test]
    fn perfect_tracking_fills_setpoint_bins() {
        let grid = HeatmapGrid::default();
        let levels: Vec<f64> = (0..100).map(|i| if i < 50 { 60.0 } else { 65.0 }).collect();
        let mut m = BTreeMap::new();
        m.insert(1, levels);
        let h = &level_heatmap(&m, grid)[&1];
        assert_eq!(h[grid.bin(60.0)], 50);
        assert_eq!(h[grid.bin(65.0)], 50);
        assert_eq!(h.iter().filter(|n| **n > 0).count(), 2);
    }

    #[test]
    fn report_collects_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let eval = run_evaluation(cfg.safe_gains, &cfg).unwrap();
        write_evaluation(dir.path(), "evaluation", &eval).unwrap();
        let pdir = dir.path().join("process");
        std::fs::create_dir_all(&pdir).unwrap();
        let rows: Vec<LogRecord> = eval.rows[..240].to_vec();
        write_process_file(&pdir.join(ProcessFile::name(1, 1)), &rows).unwrap();
        let s = emit_report(dir.path()).unwrap();
        assert_eq!(s.warnings, vec!["no gains.csv found".to_string()]);
        let score = std::fs::read_to_string(dir.path().join("report/scorecard.csv")).unwrap();
        let line = score.lines().nth(1).unwrap();
        assert!(line.starts_with(&format!("evaluation,{}", eval.report.mean.iae)));
        let heat = std::fs::read_to_string(dir.path().join("report/heatmap.csv")).unwrap();
        let total: u64 = heat.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(total, 240);
    }
}
