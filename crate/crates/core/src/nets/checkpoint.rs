//! Text checkpoint format.
//!
//! ```text
//! METAREF-CKPT 1
//! meta <key> <value>
//! tensor <name> <rows> <cols>
//! <rows*cols space-separated values, row-major>
//! ```
//!
//! `meta` lines hold scalar metadata (network shapes, training state); keys
//! contain no whitespace and values run to the end of the line. Values are
//! written in shortest round-trip form, so a save/load cycle is exact.

use super::{Head, MetaRefParams, ModelParams, ModelShape, NetError, RefereeShape};
use crate::diffengine::Tensor;
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "METAREF-CKPT 1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint is missing {0}")]
    Missing(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        assert!(
            !key.is_empty() && !key.contains(char::is_whitespace),
            "meta keys must be non-empty and contain no whitespace"
        );
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(format!("meta key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| CheckpointError::Parse {
            line: 0,
            message: format!("meta {key:?} has unparseable value {raw:?}"),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(format!("tensor {name:?}")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, t) in &self.tensors {
            writeln!(w, "tensor {name} {} {}", t.rows(), t.cols())?;
            let line: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, CheckpointError> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, message: String| CheckpointError::Parse {
            line: line + 1,
            message,
        };
        match lines.next() {
            Some((_, Ok(first))) if first.trim_end() == CHECKPOINT_MAGIC => {}
            Some((i, Ok(other))) => {
                return Err(parse_err(i, format!("bad magic header {other:?}")));
            }
            Some((_, Err(e))) => return Err(e.into()),
            None => return Err(parse_err(0, "empty file".into())),
        }
        let mut ckpt = Checkpoint::new();
        while let Some((i, line)) = lines.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| parse_err(i, "meta line without value".into()))?;
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(parse_err(i, "tensor header needs name, rows, cols".into()));
                };
                let rows: usize = rows
                    .parse()
                    .map_err(|_| parse_err(i, format!("bad row count {rows:?}")))?;
                let cols: usize = cols
                    .parse()
                    .map_err(|_| parse_err(i, format!("bad column count {cols:?}")))?;
                let (j, body) = lines
                    .next()
                    .ok_or_else(|| parse_err(i, format!("tensor {name} has no data line")))?;
                let body = body?;
                let values = body
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| parse_err(j, format!("tensor {name}: {e}")))?;
                if values.len() != rows * cols {
                    return Err(parse_err(
                        j,
                        format!(
                            "tensor {name}: expected {} values, found {}",
                            rows * cols,
                            values.len()
                        ),
                    ));
                }
                ckpt.tensors
                    .push((name.to_string(), Tensor::new(rows, cols, values)));
            } else {
                return Err(parse_err(i, format!("unrecognised line {line:?}")));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = fs::File::open(path)?;
        Self::read_from(BufReader::new(f))
    }

    pub fn put_model(&mut self, params: &ModelParams) {
        let s = params.shape();
        self.set_meta("model.input_dim", s.input_dim);
        self.set_meta("model.width", s.width);
        self.set_meta("model.depth", s.depth);
        self.set_meta("model.head", s.head);
        for ((name, _), t) in s.layout().into_iter().zip(params.tensors()) {
            self.tensors.push((name, t.clone()));
        }
    }

    pub fn model(&self) -> Result<ModelParams, CheckpointError> {
        let head: Head = self.meta("model.head")?.parse()?;
        let shape = ModelShape::new(
            self.meta_parse("model.input_dim")?,
            self.meta_parse("model.width")?,
            self.meta_parse("model.depth")?,
            head,
        )?;
        let tensors = shape
            .layout()
            .iter()
            .map(|(name, _)| self.tensor(name).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelParams::from_tensors(shape, tensors)?)
    }

    pub fn put_referee(&mut self, params: &MetaRefParams) {
        let s = params.shape();
        self.set_meta("referee.embedding_dim", s.embedding_dim);
        self.set_meta("referee.hidden", s.hidden);
        for ((name, _), t) in s.layout().into_iter().zip(params.tensors()) {
            self.tensors.push((name, t.clone()));
        }
    }

    /// The referee, if this checkpoint carries one.
    pub fn referee(&self) -> Result<Option<MetaRefParams>, CheckpointError> {
        if !self.meta.contains_key("referee.hidden") {
            return Ok(None);
        }
        let shape = RefereeShape::new(
            self.meta_parse("referee.embedding_dim")?,
            self.meta_parse("referee.hidden")?,
        )?;
        let tensors = shape
            .layout()
            .iter()
            .map(|(name, _)| self.tensor(name).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Some(MetaRefParams::from_tensors(shape, tensors)?))
    }
}
