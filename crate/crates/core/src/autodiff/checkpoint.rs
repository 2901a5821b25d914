//! Plain-text container of named tensors.
//!
//! ```text
//! stdet-checkpoint 1
//! meta <key>=<value>
//! tensor <name> <d0>x<d1>x...
//! <row-major values, space separated>
//! ```
//!
//! Values use the shortest round-trip decimal form, so saving the same
//! parameters twice yields identical bytes and loading is lossless.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ParamStore;

pub const CHECKPOINT_MAGIC: &str = "stdet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("unencodable meta entry `{k}`")));
            }
            writeln!(buf, "meta {k}={v}").unwrap();
        }
        for (_, p) in self.params.iter() {
            if p.name.contains(char::is_whitespace) {
                return Err(Error::Format(format!(
                    "tensor name `{}` has whitespace",
                    p.name
                )));
            }
            let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            writeln!(buf, "tensor {} {}", p.name, dims.join("x")).unwrap();
            let mut first = true;
            for v in p.value.data() {
                if !first {
                    buf.push(' ');
                }
                first = false;
                write!(buf, "{v}").unwrap();
            }
            buf.push('\n');
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Format("not a checkpoint file".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut ckpt = Checkpoint::default();
        while let Some(line) = lines.next().transpose()? {
            if line.is_empty() {
                continue;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("bad meta line `{line}`")))?;
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Format(format!("bad tensor line `{line}`")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format(format!("bad shape `{dims}`: {e}")))?;
                let values = lines
                    .next()
                    .transpose()?
                    .ok_or_else(|| Error::Format(format!("tensor `{name}` has no values")))?;
                let data = values
                    .split_ascii_whitespace()
                    .map(str::parse::<f64>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format(format!("bad value in `{name}`: {e}")))?;
                if ckpt.params.find(name).is_some() {
                    return Err(Error::Format(format!("duplicate tensor `{name}`")));
                }
                ckpt.params.add(name, Tensor::new(&shape, data)?);
            } else {
                return Err(Error::Format(format!("unexpected line `{line}`")));
            }
        }
        Ok(ckpt)
    }
}
