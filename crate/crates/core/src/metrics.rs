//! Line-delimited JSON metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Appends one JSON object per line; a log without a sink only keeps the count.
pub struct MetricsLog {
    sink: Option<Box<dyn Write + Send>>,
    records: usize,
}

impl MetricsLog {
    pub fn discard() -> Self {
        Self { sink: None, records: 0 }
    }

    pub fn to_writer(w: impl Write + Send + 'static) -> Self {
        Self { sink: Some(Box::new(w)), records: 0 }
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::to_writer(BufWriter::new(File::create(path)?)))
    }

    pub fn record(&mut self, value: &impl Serialize) -> Result<()> {
        self.records += 1;
        if let Some(out) = &mut self.sink {
            serde_json::to_writer(&mut *out, value).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }
}
