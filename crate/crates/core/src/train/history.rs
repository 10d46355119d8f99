use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Per-epoch training curve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Comma-separated text with a header row and LF line endings. Values use
    /// the shortest representation that parses back to the same float.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(TrainError::History(format!("expected header {HISTORY_HEADER:?}")));
        }
        let epochs = lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let bad = || TrainError::History(format!("malformed row {}: {line:?}", i + 2));
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 5 {
                    return Err(bad());
                }
                let f = |j: usize| cols[j].parse::<f64>().map_err(|_| bad());
                Ok(EpochRecord {
                    epoch: cols[0].parse().map_err(|_| bad())?,
                    train_loss: f(1)?,
                    train_acc: f(2)?,
                    val_loss: f(3)?,
                    val_acc: f(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(History { epochs })
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_csv()).map_err(|e| TrainError::Io(path.as_ref().display().to_string(), e))
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            fs::read_to_string(path.as_ref()).map_err(|e| TrainError::Io(path.as_ref().display().to_string(), e))?;
        Self::parse_csv(&text)
    }
}
