use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::csv_err;

use crate::error::Result;

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: String,
    pub campaign: String,
    pub support_loss: Option<f64>,
    pub query_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, step: usize, stage: &str, campaign: &str, support_loss: Option<f64>, query_loss: Option<f64>) {
        self.rows.push(LogRow { step, stage: stage.into(), campaign: campaign.into(), support_loss, query_loss });
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>().map_err(csv_err)?;
        Ok(TrainLog { rows })
    }

    /// Mean of `f` over the rows of `stage` whose value is present.
    pub fn mean(&self, stage: &str, f: impl Fn(&LogRow) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.stage == stage).filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}
