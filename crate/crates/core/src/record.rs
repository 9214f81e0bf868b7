//! Per-run trace: one row per optimizer iteration plus event markers.
//!
//! The CSV layout is stable and is the interface plotting tools consume;
//! event markers and the config echo go to a JSON sidecar instead of
//! being smeared into the rows. The parameter trajectory itself is kept
//! in memory (classification and constant estimation need ‖θₖ − θₙ‖²)
//! but is not serialized.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ParamVector;

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    /// Iteration index n (1-based: row n describes the step that produced θₙ).
    pub iteration: u64,
    /// Inner product of the current and previous stochastic gradients;
    /// 0 for the first step, which has no predecessor.
    pub inner_product: f64,
    /// Diagnostic running sum S after this iteration.
    #[serde(rename = "statistic_S")]
    pub statistic_s: f64,
    /// Minibatch loss at the pre-step iterate.
    pub loss_estimate: f64,
    /// ‖θₙ − θ⋆‖² when the data's optimum is known, empty otherwise.
    pub dist_to_optimum_sq: Option<f64>,
    /// Squared norm of the minibatch gradient.
    pub grad_norm_sq: f64,
    /// Cosine similarity of the current and previous gradients;
    /// 0 for the first step.
    pub cosine_prev: f64,
    /// Learning rate used for this step.
    pub gamma_in_effect: f64,
    /// Momentum used for this step.
    pub beta_in_effect: f64,
}

/// Event markers and config echo that accompany the rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunEvents {
    /// Iteration at which the momentum switch fired, if it did.
    pub momentum_switch_at: Option<u64>,
    /// Iteration at which the diagnostic declared convergence, if it did.
    pub diagnostic_activation_at: Option<u64>,
    /// Iterations at which the schedule reduced the learning rate.
    pub lr_reductions: Vec<u64>,
    /// Resolved configuration of the run that produced this record.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
}

/// Full trace of one training run.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    rows: Vec<RecordRow>,
    events: RunEvents,
    thetas: Vec<ParamVector>,
}

impl RunRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a row; iteration indices must be strictly increasing.
    pub fn push_row(&mut self, row: RecordRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(Error::InvalidArgument(format!(
                    "iteration {} not after {}",
                    row.iteration, last.iteration
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[RecordRow] {
        &self.rows
    }

    pub fn events(&self) -> &RunEvents {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Record the momentum-switch iteration (first call wins).
    pub fn mark_momentum_switch(&mut self, n: u64) {
        self.events.momentum_switch_at.get_or_insert(n);
    }

    /// Record the diagnostic activation (first call wins). The switch,
    /// when present, always precedes activation.
    pub fn mark_activation(&mut self, n: u64) {
        debug_assert!(
            self.events.momentum_switch_at.map_or(true, |s| s <= n),
            "activation before momentum switch"
        );
        self.events.diagnostic_activation_at.get_or_insert(n);
    }

    /// Record a learning-rate reduction at iteration `n`.
    pub fn mark_lr_reduction(&mut self, n: u64) {
        self.events.lr_reductions.push(n);
    }

    pub fn set_config_echo(&mut self, echo: serde_json::Value) {
        self.events.config_echo = Some(echo);
    }

    /// Store θ₀ (before any row) or θₙ for row n, in order.
    pub fn push_theta(&mut self, theta: ParamVector) {
        self.thetas.push(theta);
    }

    /// The recorded trajectory: `thetas()[n]` is θₙ with `thetas()[0] = θ₀`.
    /// Empty when trajectory recording was off.
    pub fn thetas(&self) -> &[ParamVector] {
        &self.thetas
    }

    /// Drop the stored trajectory (bulk experiments that only need
    /// aggregate statistics can shed the memory).
    pub fn discard_thetas(&mut self) {
        self.thetas = Vec::new();
    }

    /// Append another record whose iterations continue after this one's.
    pub fn extend(&mut self, other: RunRecord) -> Result<()> {
        for row in other.rows {
            self.push_row(row)?;
        }
        if let Some(s) = other.events.momentum_switch_at {
            self.mark_momentum_switch(s);
        }
        if let Some(a) = other.events.diagnostic_activation_at {
            self.mark_activation(a);
        }
        self.events.lr_reductions.extend(other.events.lr_reductions);
        let skip_initial = !self.thetas.is_empty() && !other.thetas.is_empty();
        self.thetas
            .extend(other.thetas.into_iter().skip(usize::from(skip_initial)));
        Ok(())
    }

    /// Write rows as CSV with the stable header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                row: 0,
                column: String::new(),
                detail: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }

    /// Read rows back from a CSV written by [`write_csv`](Self::write_csv).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut reader = csv::Reader::from_reader(BufReader::new(file));
        let mut record = RunRecord::new();
        for (i, row) in reader.deserialize::<RecordRow>().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                row: i + 2,
                column: String::new(),
                detail: e.to_string(),
            })?;
            record.push_row(row)?;
        }
        Ok(record)
    }

    /// Write the JSON sidecar (event markers + config echo).
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.events).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e),
        })?;
        w.write_all(b"\n").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }
}
