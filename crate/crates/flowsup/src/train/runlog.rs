//! JSON-lines run log: one record per training step, evaluation snapshot,
//! and divergence event. Records carry no timestamps, so identically-seeded
//! runs produce byte-identical logs; wall-clock progress goes to stderr.

use crate::losses::LossBreakdown;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunRecord {
    Meta {
        seed: u64,
        teacher: String,
        config_hash: String,
    },
    Step {
        step: u64,
        lr: f64,
        #[serde(flatten)]
        losses: LossBreakdown,
    },
    Snapshot {
        step: u64,
        split: String,
        model: String,
        epe: f64,
        fl_all: f64,
        n_pixels: usize,
    },
    Divergence {
        step: u64,
    },
}

/// Append-only record sink, optionally mirrored to a JSONL file.
pub struct RunLog {
    records: Vec<RunRecord>,
    writer: Option<BufWriter<std::fs::File>>,
    last_step: Option<u64>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            writer: None,
            last_step: None,
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            records: Vec::new(),
            writer: Some(BufWriter::new(std::fs::File::create(path)?)),
            last_step: None,
        })
    }

    pub fn push(&mut self, record: RunRecord) -> Result<()> {
        if let RunRecord::Step { step, .. } = &record {
            if let Some(last) = self.last_step {
                if *step != last + 1 {
                    return Err(Error::Data(format!(
                        "non-contiguous step index: {last} -> {step}"
                    )));
                }
            }
            self.last_step = Some(*step);
        }
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vec<RunRecord>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    /// Final snapshot for a split/model pair, if any.
    pub fn final_snapshot(&self, split: &str, model: &str) -> Option<(u64, f64, f64)> {
        self.records.iter().rev().find_map(|r| match r {
            RunRecord::Snapshot {
                step,
                split: s,
                model: m,
                epe,
                fl_all,
                ..
            } if s == split && m == model => Some((*step, *epe, *fl_all)),
            _ => None,
        })
    }

    pub fn diverged_at(&self) -> Option<u64> {
        self.records.iter().find_map(|r| match r {
            RunRecord::Divergence { step } => Some(*step),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_roundtrip_and_contiguity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut log = RunLog::create(&path).unwrap();
        log.push(RunRecord::Meta {
            seed: 7,
            teacher: "fs".into(),
            config_hash: "abc".into(),
        })
        .unwrap();
        for step in 1..=3 {
            log.push(RunRecord::Step {
                step,
                lr: 1e-5,
                losses: LossBreakdown {
                    total: step as f64,
                    ..Default::default()
                },
            })
            .unwrap();
        }
        log.push(RunRecord::Divergence { step: 3 }).unwrap();
        log.flush().unwrap();

        let loaded = RunLog::load(&path).unwrap();
        assert_eq!(loaded, log.records());
        assert_eq!(log.diverged_at(), Some(3));

        // Skipping a step index is rejected.
        let err = log.push(RunRecord::Step {
            step: 5,
            lr: 1e-5,
            losses: LossBreakdown::default(),
        });
        assert!(err.is_err());
    }

    #[test]
    fn step_record_serializes_flat() {
        let record = RunRecord::Step {
            step: 1,
            lr: 2e-4,
            losses: LossBreakdown {
                total: 1.5,
                l_sup: 1.0,
                l_fs: 0.5,
                ..Default::default()
            },
        };
        let json = serde_json::to_value(&record).unwrap();
        assert_eq!(json["kind"], "step");
        assert_eq!(json["total"], 1.5);
        assert_eq!(json["l_sup"], 1.0);
        assert!(json.get("losses").is_none(), "breakdown must be flattened");
    }
}
