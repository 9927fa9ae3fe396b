//! JSON Lines trace files. Line 1 is the metadata record, every following
//! non-blank line one [`PromptTrace`]. Files ending in `.gz` are gzip streams.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde_json::error::Category;

use super::{PromptTrace, TraceMetadata, TraceSet};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub(super) fn line_error(path: &Path, line: usize, err: serde_json::Error) -> Error {
    let message = err.to_string();
    let path = path.to_path_buf();
    match err.classify() {
        Category::Data => Error::Schema {
            path,
            line,
            message,
        },
        Category::Io | Category::Syntax | Category::Eof => Error::Parse {
            path,
            line,
            message,
        },
    }
}

/// Reads a trace set from any buffered reader; `path` is used in errors.
pub fn read_traces<R: BufRead>(reader: R, path: &Path) -> Result<TraceSet> {
    let mut metadata: Option<TraceMetadata> = None;
    let mut traces = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match metadata {
            None => {
                metadata = Some(serde_json::from_str(&line).map_err(|e| line_error(path, lineno, e))?)
            }
            Some(_) => traces.push(
                serde_json::from_str::<PromptTrace>(&line).map_err(|e| line_error(path, lineno, e))?,
            ),
        }
    }
    let metadata = metadata.ok_or_else(|| Error::EmptyTraceFile(path.to_path_buf()))?;
    Ok(TraceSet::new(metadata, traces))
}

/// Loads a trace file, recording the SHA-256 of its bytes as the set's hash.
pub fn load_traces(path: impl AsRef<Path>) -> Result<TraceSet> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let hash = sha256_hex(&raw);
    let mut set = if is_gzip(path) {
        read_traces(BufReader::new(GzDecoder::new(raw.as_slice())), path)?
    } else {
        read_traces(raw.as_slice(), path)?
    };
    set.source_hash = Some(hash);
    Ok(set)
}

/// Serializes a trace set in the wire format.
pub fn write_traces_to<W: Write>(mut w: W, set: &TraceSet) -> Result<()> {
    serde_json::to_writer(&mut w, &set.metadata)?;
    w.write_all(b"\n")?;
    for t in &set.traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_traces(path: impl AsRef<Path>, set: &TraceSet) -> Result<()> {
    let path = path.as_ref();
    let file = BufWriter::new(File::create(path)?);
    if is_gzip(path) {
        // Fixed header fields keep gzip output byte-stable.
        let mut enc = GzEncoder::new(file, Compression::default());
        write_traces_to(&mut enc, set)?;
        enc.finish()?.flush()?;
    } else {
        write_traces_to(file, set)?;
    }
    Ok(())
}

/// SHA-256 of a file's bytes.
pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let mut raw = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut raw)?;
    Ok(sha256_hex(&raw))
}
