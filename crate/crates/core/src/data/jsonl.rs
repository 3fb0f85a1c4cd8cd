//! JSONL persistence: one example per line, stable field order, UTF-8.
//! This is also the ingestion path for externally tokenized data.

use super::{DataError, Dataset, Example};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    for example in &dataset.examples {
        // Infallible for this type; field order follows the struct.
        let line = serde_json::to_string(example).expect("example serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset back. The class count is the smallest one covering the
/// labels seen, with a floor of two.
pub fn read_jsonl(path: &Path) -> Result<Dataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        examples.push(example);
    }
    let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(2).max(2);
    Dataset::new(examples, num_classes)
}
