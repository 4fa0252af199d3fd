//! Line-delimited JSON manifests: one pair record per line.
//!
//! ```text
//! {"query":{"instruction":[2,3],"content":[17,9,40,11],"image":[[0.1, ...], ...]},
//!  "target":{"instruction":[2,3],"content":[16,41,12,8],"image":null},
//!  "combo":"TI_T","task_tag":"retrieval","split":"IND","class_id":5}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{ModalInput, PairRecord};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Line {
    query: ModalInput,
    target: ModalInput,
    combo: String,
    task_tag: String,
    split: String,
    class_id: usize,
}

fn to_line(r: &PairRecord) -> Line {
    Line {
        query: r.query.clone(),
        target: r.target.clone(),
        combo: r.combo.tag().to_string(),
        task_tag: r.task.tag().to_string(),
        split: r.split.tag().to_string(),
        class_id: r.class_id,
    }
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn encode_record(r: &PairRecord) -> String {
    serde_json::to_string(&to_line(r)).expect("records always serialize")
}

/// Parses one manifest line; `path` and `line` only label errors.
pub fn decode_record(text: &str, path: &str, line: usize) -> Result<PairRecord> {
    let raw: Line = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_string(),
        line,
        message: e.to_string(),
    })?;
    let schema = |message: String| Error::Schema {
        path: path.to_string(),
        line,
        message,
    };
    let record = PairRecord {
        query: raw.query,
        target: raw.target,
        combo: raw.combo.parse().map_err(|e: Error| schema(e.to_string()))?,
        task: raw.task_tag.parse().map_err(|e: Error| schema(e.to_string()))?,
        split: raw.split.parse().map_err(|e: Error| schema(e.to_string()))?,
        class_id: raw.class_id,
    };
    if !record.is_consistent() {
        return Err(schema(format!(
            "image presence does not match combination {}",
            record.combo
        )));
    }
    Ok(record)
}

pub fn write_manifest(records: &[PairRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", encode_record(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_record(&line, &label, i + 1)?);
    }
    Ok(out)
}
