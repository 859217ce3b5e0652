use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frame: u64,
    pub mean_return: f64,
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    run_id: String,
    seed: u64,
    frame: u64,
    mean_return: f64,
}

/// Evaluation returns against training frames, strictly increasing in frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub run_id: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(run_id: impl Into<String>, seed: u64) -> Self {
        Self { run_id: run_id.into(), seed, points: Vec::new() }
    }

    pub fn from_points(run_id: impl Into<String>, seed: u64, pts: &[(u64, f64)]) -> Result<Self> {
        let mut c = Self::new(run_id, seed);
        for &(f, r) in pts {
            c.push(f, r)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, frame: u64, mean_return: f64) -> Result<()> {
        if let Some(last) = self.points.last() {
            if frame <= last.frame {
                return Err(Error::Config(format!("curve frames must increase: {frame} after {}", last.frame)));
            }
        }
        self.points.push(CurvePoint { frame, mean_return });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frames(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.frame).collect()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_return).collect()
    }

    pub fn final_frame(&self) -> u64 {
        self.points.last().map_or(0, |p| p.frame)
    }

    pub fn first_return(&self) -> Option<f64> {
        self.points.first().map(|p| p.mean_return)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_rows(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_rows<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for p in &self.points {
            w.serialize(CurveRow { run_id: self.run_id.clone(), seed: self.seed, frame: p.frame, mean_return: p.mean_return })?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut curve: Option<Self> = None;
        for row in rd.deserialize() {
            let row: CurveRow = row?;
            let c = curve.get_or_insert_with(|| Self::new(row.run_id.clone(), row.seed));
            c.push(row.frame, row.mean_return)?;
        }
        curve.ok_or_else(|| Error::Config(format!("empty curve file {}", path.display())))
    }
}
