use std::path::Path;
use std::time::Instant;

use crate::error::{bail, Error, Result};

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: f32,
    pub accuracy: Option<f32>,
    pub wall_ms: u64,
}

/// Rows in step order. Wall time is measured from construction.
#[derive(Debug)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    start: Instant,
    wall_clock: bool,
}

impl MetricsLog {
    /// With `wall_clock` off every row records 0 ms, which keeps files
    /// byte-identical across runs.
    pub fn new(wall_clock: bool) -> Self {
        Self {
            rows: Vec::new(),
            start: Instant::now(),
            wall_clock,
        }
    }

    pub fn push(&mut self, step: usize, split: &str, loss: f32, accuracy: Option<f32>) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if step < last.step {
                bail!(State, "metrics step {step} after step {}", last.step);
            }
        }
        let wall_ms = if self.wall_clock {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        };
        self.rows.push(MetricsRow {
            step,
            split: split.to_string(),
            loss,
            accuracy,
            wall_ms,
        });
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Rows of one split, in order.
    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Writes `step,split,loss,accuracy,wall_ms`; a missing accuracy is an empty field.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "split", "loss", "accuracy", "wall_ms"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            w.write_record([
                r.step.to_string(),
                r.split.clone(),
                r.loss.to_string(),
                acc,
                r.wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_monotone_and_written_with_header() {
        let mut log = MetricsLog::new(false);
        log.push(1, "train", 2.5, Some(0.25)).unwrap();
        log.push(10, "train", 1.5, None).unwrap();
        log.push(10, "test", 1.75, Some(0.5)).unwrap();
        assert!(log.push(9, "train", 1.0, None).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "step,split,loss,accuracy,wall_ms\n1,train,2.5,0.25,0\n10,train,1.5,,0\n10,test,1.75,0.5,0\n"
        );
        assert_eq!(log.split("test").count(), 1);
    }
}
