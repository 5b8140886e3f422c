//! Append-only CSV progress log shared by all fitting stages.

use std::fs::{File, OpenOptions};
use std::path::Path;
use std::time::Instant;

use crate::error::Result;

/// Loss terms of one iteration; stages leave unused terms empty.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub rgb: Option<f64>,
    pub flow: Option<f64>,
    pub scale: Option<f64>,
    pub rigid: Option<f64>,
    pub background: Option<f64>,
    pub depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: String,
    pub terms: LossTerms,
    pub total: f64,
    pub wall_ms: u128,
}

const HEADER: [&str; 10] = ["iteration", "stage", "rgb", "flow", "scale", "rigid", "background", "depth", "total", "wall_ms"];

pub struct ProgressLog {
    writer: Option<csv::Writer<File>>,
    start: Instant,
    pub rows: Vec<LogRow>,
}

impl Default for ProgressLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl ProgressLog {
    pub fn in_memory() -> Self {
        Self { writer: None, start: Instant::now(), rows: Vec::new() }
    }

    /// Appends to `path`, writing the header only when the file is new.
    pub fn to_file(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(HEADER)?;
        }
        Ok(Self { writer: Some(writer), start: Instant::now(), rows: Vec::new() })
    }

    pub fn record(&mut self, stage: &str, iteration: usize, terms: LossTerms, total: f64) -> Result<()> {
        let row = LogRow { iteration, stage: stage.to_string(), terms, total, wall_ms: self.start.elapsed().as_millis() };
        if let Some(w) = self.writer.as_mut() {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let t = &row.terms;
            w.write_record([
                row.iteration.to_string(),
                row.stage.clone(),
                opt(t.rgb),
                opt(t.flow),
                opt(t.scale),
                opt(t.rigid),
                opt(t.background),
                opt(t.depth),
                row.total.to_string(),
                row.wall_ms.to_string(),
            ])?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    /// Totals recorded for `stage`, in order.
    pub fn totals(&self, stage: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.stage == stage).map(|r| r.total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        {
            let mut log = ProgressLog::to_file(&path).unwrap();
            log.record("static", 0, LossTerms { rgb: Some(0.5), ..Default::default() }, 0.5).unwrap();
        }
        {
            let mut log = ProgressLog::to_file(&path).unwrap();
            log.record("motion", 0, LossTerms { rgb: Some(0.25), flow: Some(1.0), ..Default::default() }, 0.75).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "iteration,stage,rgb,flow,scale,rigid,background,depth,total,wall_ms");
        assert!(lines[1].starts_with("0,static,0.5,,,,,,0.5,"));
        assert!(lines[2].starts_with("0,motion,0.25,1,,,,,0.75,"));
    }
}
