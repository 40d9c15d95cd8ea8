use std::io::Write;

use serde::Serialize;

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Iteration {
        iteration: u64,
        epoch: usize,
        phase: &'static str,
        enhancer_loss: f64,
        enhancer_grad_norm: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        generator_objective: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        generator_grad_norm: Option<f64>,
        /// Batch-mean mixture weight of each operator, averaged over steps.
        weights: Vec<f64>,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        train_psnr: f64,
    },
}

impl Record {
    pub fn is_finite(&self) -> bool {
        match self {
            Record::Iteration {
                enhancer_loss,
                enhancer_grad_norm,
                generator_objective,
                generator_grad_norm,
                weights,
                ..
            } => {
                enhancer_loss.is_finite()
                    && enhancer_grad_norm.is_finite()
                    && generator_objective.map_or(true, f64::is_finite)
                    && generator_grad_norm.map_or(true, f64::is_finite)
                    && weights.iter().all(|w| w.is_finite())
            }
            Record::Epoch { mean_loss, .. } => mean_loss.is_finite(),
        }
    }
}

/// Line-delimited JSON records, optionally streamed to a writer.
#[derive(Default)]
pub struct RunLog {
    pub records: Vec<Record>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for RunLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunLog").field("records", &self.records.len()).finish()
    }
}

impl RunLog {
    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        Self {
            records: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn push(&mut self, r: Record) -> std::io::Result<()> {
        if let Some(w) = self.sink.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&r).expect("records serialise"))?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialise") + "\n")
            .collect()
    }

    pub fn iterations(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| matches!(r, Record::Iteration { .. }))
    }
}
