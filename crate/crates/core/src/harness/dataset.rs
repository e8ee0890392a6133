use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LampoError, Result};
use crate::promp::Trajectory;

/// One demonstration: a context and the `(t, q₁, q₂, …)` rows of its trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoRecord {
    pub context: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
}

impl DemoRecord {
    pub fn new(context: Vec<f64>, traj: &Trajectory) -> Self {
        Self {
            context,
            trajectory: traj.to_rows(),
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::from_rows(&self.trajectory)
    }
}

pub fn write_dataset(path: &Path, records: &[DemoRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DemoRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DemoRecord = serde_json::from_str(&line)
            .map_err(|e| LampoError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(LampoError::InsufficientData(format!("{} holds no records", path.display())));
    }
    Ok(out)
}
