//! Evaluation harness: metrics, image files and distortion sweeps.

pub mod bitstr;
pub mod imageio;
pub mod metrics;
pub mod sweep;

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// One header row from the field names, then one row per record.
pub fn write_csv<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
