//! Checkpoint file format: versioned header (magic, format version,
//! architecture descriptor), little-endian f64 parameter payload, optional
//! optimizer moments, and a trailing FNV-1a checksum.

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, OptimizerState, PosteriorModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FTCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    model: &PosteriorModel,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    save_checkpoint_with_meta(path, model, optimizer, &[])
}

/// Save with extra `key=value` lines appended to the descriptor block (e.g.
/// the run's config hash); unknown keys are ignored on load.
pub fn save_checkpoint_with_meta(
    path: &Path,
    model: &PosteriorModel,
    optimizer: Option<&OptimizerState>,
    meta: &[(&str, &str)],
) -> Result<()> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut descriptor = model.arch.descriptor();
    for (k, v) in meta {
        descriptor.push_str(&format!("{k}={v}\n"));
    }
    write_block(&mut body, descriptor.as_bytes());
    write_f64s(&mut body, model.params());
    match optimizer {
        Some(opt) => {
            body.push(1);
            write_block(&mut body, opt.descriptor().as_bytes());
            let (m, v) = opt.moments();
            write_f64s(&mut body, m);
            write_f64s(&mut body, v);
        }
        None => body.push(0),
    }
    let checksum = fnv1a(&body);
    body.extend_from_slice(&checksum.to_le_bytes());
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&body)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PosteriorModel, Option<OptimizerState>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint("file too short for a checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint(
            "checksum mismatch: checkpoint is corrupted".into(),
        ));
    }
    let mut cursor = Cursor { bytes: body, at: 0 };
    if cursor.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let desc = String::from_utf8(cursor.block()?.to_vec())
        .map_err(|_| Error::Checkpoint("architecture descriptor is not utf-8".into()))?;
    let arch = Architecture::from_descriptor(&desc)?;
    let params = cursor.f64s()?;
    let model = PosteriorModel::from_parts(arch, params)?;
    let optimizer = match cursor.take(1)?[0] {
        0 => None,
        1 => {
            let opt_desc = String::from_utf8(cursor.block()?.to_vec())
                .map_err(|_| Error::Checkpoint("optimizer descriptor is not utf-8".into()))?;
            let m = cursor.f64s()?;
            let v = cursor.f64s()?;
            Some(OptimizerState::from_descriptor(&opt_desc, m, v)?)
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad optimizer flag byte {other}"
            )))
        }
    };
    Ok((model, optimizer))
}

/// Errors when the checkpointed architecture differs from the expected one,
/// printing both descriptors.
pub fn check_architecture(loaded: &Architecture, expected: &Architecture) -> Result<()> {
    if loaded == expected {
        return Ok(());
    }
    Err(Error::Checkpoint(format!(
        "architecture mismatch\n--- checkpoint ---\n{}--- expected ---\n{}",
        loaded.descriptor(),
        expected.descriptor()
    )))
}

fn write_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

use crate::fnv1a64 as fnv1a;

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        self.take(len)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        if len > (self.bytes.len() - self.at) / 8 {
            return Err(Error::Checkpoint("parameter payload truncated".into()));
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok(out)
    }
}
