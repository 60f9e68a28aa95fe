//! Process-data CSV files exchanged between the control loop and the trainer.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::plant::LogRecord;
use crate::td3::write_atomic;

/// A process file name encodes its episode cycle and episode:
/// `c{cycle:03}_e{episode:05}.csv`, so lexical order is chronological.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProcessFile {
    pub cycle: usize,
    pub episode: u32,
    pub path: PathBuf,
}

impl ProcessFile {
    pub fn name(cycle: usize, episode: u32) -> String {
        format!("c{cycle:03}_e{episode:05}.csv")
    }

    fn parse(path: &Path) -> Option<Self> {
        let stem = path.file_name()?.to_str()?.strip_suffix(".csv")?;
        let (c, e) = stem.strip_prefix('c')?.split_once("_e")?;
        Some(Self { cycle: c.parse().ok()?, episode: e.parse().ok()?, path: path.to_path_buf() })
    }
}

pub fn write_process_file(path: &Path, rows: &[LogRecord]) -> Result<()> {
    if rows.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
        return Err(Error::DataFile { path: path.to_path_buf(), msg: "timestamps must increase".into() });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["t_s", "level_sp_cm", "level_cm", "flow_sp", "flow", "pump_pct", "u_hat", "u", "episode_id"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::DataFile { path: path.to_path_buf(), msg: e.to_string() })?;
    write_atomic(path, &bytes)
}

pub fn read_process_file(path: &Path) -> Result<Vec<LogRecord>> {
    let err = |msg: String| Error::DataFile { path: path.to_path_buf(), msg };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let rows: Vec<LogRecord> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| err(e.to_string()))?;
    if rows.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
        return Err(err("timestamps must increase".into()));
    }
    Ok(rows)
}

/// Process files in `dir`, oldest first. Other files are ignored.
pub fn list_process_files(dir: &Path) -> Result<Vec<ProcessFile>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<ProcessFile> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| ProcessFile::parse(&e.path()))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64) -> LogRecord {
        LogRecord {
            t_s: t,
            level_sp_cm: 65.0,
            level_cm: 60.0 + t / 7.0,
            flow_sp: 35.1,
            flow: 35.0,
            pump_pct: 11.7,
            u_hat: 35.1,
            u: 35.1,
            episode_id: 4,
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ProcessFile::name(2, 7));
        let rows: Vec<LogRecord> = (0..5).map(|i| rec(i as f64)).collect();
        write_process_file(&path, &rows).unwrap();
        assert_eq!(read_process_file(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t_s,level_sp_cm,level_cm,flow_sp,flow,pump_pct,u_hat,u,episode_id\n"));
        let listed = list_process_files(dir.path()).unwrap();
        assert_eq!(listed.len(), 1);
        assert_eq!((listed[0].cycle, listed[0].episode), (2, 7));
    }

    #[test]
    fn rejects_unordered_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        assert!(write_process_file(&path, &[rec(1.0), rec(1.0)]).is_err());
        std::fs::write(&path, "t_s,level_sp_cm,level_cm,flow_sp,flow,pump_pct,u_hat,u,episode_id\n1,0,0,0,0,0,0,0,0\n0,0,0,0,0,0,0,0,0\n").unwrap();
        assert!(read_process_file(&path).is_err());
    }

    #[test]
    fn listing_orders_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        for (c, e) in [(1, 3), (0, 1), (0, 2)] {
            write_process_file(&dir.path().join(ProcessFile::name(c, e)), &[rec(0.0)]).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let eps: Vec<u32> = list_process_files(dir.path()).unwrap().iter().map(|f| f.episode).collect();
        assert_eq!(eps, vec![1, 2, 3]);
        assert!(list_process_files(&dir.path().join("missing")).unwrap().is_empty());
    }
}
