//! Checkpoint files.
//!
//! ```text
//! S3CKPT1\n
//! @<key> <value>\n          metadata, at least stage, config_hash, steps
//! <name> <dim>... <offset>\n  one per tensor, offset in bytes into the payload
//! \n
//! <little-endian f32 payload>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, Parameters};
use crate::tensor::Tensor;

const MAGIC: &str = "S3CKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "I",
            Stage::Two => "II",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Stage::One),
            "II" | "2" => Ok(Stage::Two),
            _ => Err(Error::Invalid(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_hash: String,
    pub steps: usize,
    /// Further `@key value` pairs, in file order.
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

/// Normalization running statistics are the only non-learned tensors.
fn kind_of(name: &str) -> ParamKind {
    if name.ends_with(".running_mean") || name.ends_with(".running_var") {
        ParamKind::Buffer
    } else {
        ParamKind::Learnable
    }
}

impl Checkpoint {
    pub fn from_model<P: Parameters + ?Sized>(
        stage: Stage,
        config_hash: &str,
        steps: usize,
        model: &P,
    ) -> Self {
        let mut entries = Vec::new();
        model.visit("", &mut |name, t, kind| {
            entries.push(Entry {
                name,
                shape: t.shape().to_vec(),
                kind,
                data: t.data().iter().map(|&v| v as f32).collect(),
            });
        });
        Self {
            stage,
            config_hash: config_hash.to_string(),
            steps,
            meta: Vec::new(),
            entries,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks @{key}")))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.data.len())
            .sum()
    }

    /// Copies every model tensor from the entry of the same name. Names and
    /// shapes must match exactly.
    pub fn load_into<P: Parameters + ?Sized>(&self, model: &mut P) -> Result<()> {
        self.load_renamed(model, "", "")?;
        let mut n = 0;
        model.visit("", &mut |_, _, _| n += 1);
        if n != self.entries.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, model has {n}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    /// Loads the entries named `from + rest` into the model tensors named
    /// `to + rest`. Model tensors outside `to` are left untouched.
    pub fn load_renamed<P: Parameters + ?Sized>(
        &self,
        model: &mut P,
        from: &str,
        to: &str,
    ) -> Result<()> {
        let mut result = Ok(());
        model.visit_mut("", &mut |name, t, _| {
            if result.is_err() {
                return;
            }
            let Some(rest) = name.strip_prefix(to) else {
                return;
            };
            let source = format!("{from}{rest}");
            match self.entry(&source) {
                None => result = Err(Error::Invalid(format!("checkpoint lacks tensor {source}"))),
                Some(e) if e.shape != t.shape() => {
                    result = Err(Error::shape(format!(
                        "{source}: checkpoint shape {:?}, model shape {:?}",
                        e.shape,
                        t.shape()
                    )))
                }
                Some(e) => {
                    for (dst, &src) in t.data_mut().iter_mut().zip(&e.data) {
                        *dst = src as f64;
                    }
                }
            }
        });
        result
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n");
        header.push_str(&format!("@stage {}\n", self.stage.as_str()));
        header.push_str(&format!("@config_hash {}\n", self.config_hash));
        header.push_str(&format!("@steps {}\n", self.steps));
        for (k, v) in &self.meta {
            header.push_str(&format!("@{k} {v}\n"));
        }
        let mut offset = 0;
        for e in &self.entries {
            header.push_str(&e.name);
            for d in &e.shape {
                header.push_str(&format!(" {d}"));
            }
            header.push_str(&format!(" {offset}\n"));
            offset += 4 * e.data.len();
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<(usize, &str)> {
            let start = *pos;
            let rest = &bytes[start..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(start, "unterminated manifest line"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::format(start, "manifest is not ASCII"))?;
            *pos = start + end + 1;
            Ok((start, line))
        };
        let (_, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let (mut stage, mut hash, mut steps) = (None, None, None);
        let mut meta = Vec::new();
        let mut manifest: Vec<(usize, String, ParamKind, Vec<usize>, usize)> = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            if let Some(kv) = line.strip_prefix('@') {
                let (k, v) = kv.split_once(' ').ok_or_else(|| {
                    Error::format(at, format!("metadata line {line:?} has no value"))
                })?;
                match k {
                    "stage" => {
                        stage = Some(Stage::parse(v).map_err(|e| Error::format(at, e.to_string()))?)
                    }
                    "config_hash" => hash = Some(v.to_string()),
                    "steps" => {
                        steps = Some(
                            v.parse::<usize>()
                                .map_err(|_| Error::format(at, format!("bad step count {v:?}")))?,
                        )
                    }
                    _ => meta.push((k.to_string(), v.to_string())),
                }
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() < 2 {
                return Err(Error::format(
                    at,
                    format!("manifest line {line:?} is too short"),
                ));
            }
            let kind = kind_of(fields[0]);
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(at, format!("unparseable manifest line {line:?}")))?;
            let (offset, shape) = nums.split_last().expect("at least one number");
            manifest.push((at, fields[0].to_string(), kind, shape.to_vec(), *offset));
        }
        let payload = &bytes[pos..];
        let mut entries = Vec::with_capacity(manifest.len());
        for (i, (at, name, kind, shape, offset)) in manifest.iter().enumerate() {
            let end = manifest.get(i + 1).map_or(payload.len(), |m| m.4);
            let expected = *offset;
            let running: usize = entries.iter().map(|e: &Entry| 4 * e.data.len()).sum();
            if expected != running {
                return Err(Error::format(
                    *at,
                    format!("{name}: offset {offset} is not contiguous (expected {running})"),
                ));
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(*at, format!("{name}: shape overflows")))?;
            if end < *offset || end - offset != 4 * count {
                return Err(Error::format(
                    *at,
                    format!(
                        "{name}: shape {shape:?} holds {} bytes but its span is {}",
                        4 * count,
                        end.saturating_sub(*offset)
                    ),
                ));
            }
            let data = payload[*offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry {
                name: name.clone(),
                shape: shape.clone(),
                kind: *kind,
                data,
            });
        }
        if manifest.is_empty() && !payload.is_empty() {
            return Err(Error::format(pos, "payload without manifest entries"));
        }
        let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::format(0, format!("tensor {} listed twice", w[0])));
        }
        Ok(Self {
            stage: stage.ok_or_else(|| Error::format(0, "missing @stage"))?,
            config_hash: hash.ok_or_else(|| Error::format(0, "missing @config_hash"))?,
            steps: steps.ok_or_else(|| Error::format(0, "missing @steps"))?,
            meta,
            entries,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

/// `Tensor` view of an entry.
pub fn entry_tensor(e: &Entry) -> Result<Tensor> {
    Tensor::new(&e.shape, e.data.iter().map(|&v| v as f64).collect())
}
