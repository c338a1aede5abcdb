//! Named-tensor checkpoint files.
//!
//! Layout: the magic line `MSTDIM1`, a textual manifest, then the raw
//! little-endian payload.
//!
//! ```text
//! MSTDIM1
//! tensors 2
//! encoder.conv0.weight f32 32,1,8,8 0 8192
//! encoder.conv0.bias f32 32 8192 128
//! end
//! <payload bytes>
//! ```
//!
//! Each manifest row is `name dtype dims offset nbytes`; offsets count from
//! the first payload byte. Scalars use `-` for dims.

use std::fmt::Write as _;
use std::path::Path;

use super::{Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &str = "MSTDIM1";

pub fn encode<T: Real>(tensors: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut header = format!("{MAGIC}\ntensors {}\n", tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        let _ = writeln!(
            header,
            "{name} {} {dims} {offset} {}",
            T::DTYPE,
            payload.len() - offset
        );
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(bad("manifest is not terminated by `end`".into()));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| bad("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let payload = &bytes[pos..];
    let mut lines = lines.into_iter();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing magic `{MAGIC}`")));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("tensors "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing `tensors <n>` line".into()))?;
    let rows: Vec<&str> = lines.collect();
    if rows.len() != count {
        return Err(bad(format!("manifest declares {count} tensors, lists {}", rows.len())));
    }
    let mut out = Vec::with_capacity(count);
    for row in rows {
        let fields: Vec<&str> = row.split(' ').collect();
        let [name, dtype, dims, offset, nbytes] = fields[..] else {
            return Err(bad(format!("malformed manifest row {row:?}")));
        };
        if dtype != T::DTYPE {
            return Err(bad(format!(
                "tensor {name} stored as {dtype}, requested {}",
                T::DTYPE
            )));
        }
        let shape: Vec<usize> = if dims == "-" {
            vec![]
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dims for {name}"))))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
        let nbytes: usize = nbytes.parse().map_err(|_| bad(format!("bad size for {name}")))?;
        let len: usize = shape.iter().product();
        if nbytes != len * T::BYTES || offset + nbytes > payload.len() {
            return Err(bad(format!("payload range for {name} is inconsistent")));
        }
        let data = payload[offset..offset + nbytes]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        out.push((name.to_string(), Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
