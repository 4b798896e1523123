//! Named-tensor serialization: a UTF-8 header listing (name, shape, dtype)
//! followed by concatenated little-endian IEEE-754 payloads.

use std::io::{BufRead, Write};

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use std::path::Path;

const HEADER_TAG: &str = "steerer-tensors";
const VERSION: u32 = 1;

/// Write `(name, tensor)` pairs. Names must contain no whitespace.
pub fn write_named_tensors<W: Write>(
    out: &mut W,
    items: &[(String, &Tensor)],
    origin: &Path,
) -> Result<()> {
    let io_err = |e| Error::io(origin, e);
    writeln!(out, "{HEADER_TAG} v{VERSION} {}", items.len()).map_err(io_err)?;
    for (name, t) in items {
        if name.chars().any(|c| c.is_whitespace()) || name.is_empty() {
            return Err(Error::invalid(
                "write_named_tensors",
                format!("tensor name `{name}` must be nonempty without whitespace"),
            ));
        }
        let s = t.shape();
        writeln!(out, "{name} {} {} {} {} f64", s.n, s.c, s.h, s.w).map_err(io_err)?;
    }
    for (_, t) in items {
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Read pairs written by [`write_named_tensors`].
pub fn read_named_tensors<R: BufRead>(input: &mut R, origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let io_err = |e| Error::io(origin, e);
    let mut line = String::new();
    input.read_line(&mut line).map_err(io_err)?;
    let mut parts = line.split_whitespace();
    let tag = parts.next().unwrap_or("");
    let ver = parts.next().unwrap_or("");
    let count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(origin, 1, "bad tensor block header"))?;
    if tag != HEADER_TAG || ver != format!("v{VERSION}") {
        return Err(Error::parse(origin, 1, "bad tensor block header"));
    }

    let mut metas = Vec::with_capacity(count);
    for i in 0..count {
        line.clear();
        input.read_line(&mut line).map_err(io_err)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let lineno = i + 2;
        if fields.len() != 6 {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected `name n c h w dtype`, got {} fields", fields.len()),
            ));
        }
        if fields[5] != "f64" {
            return Err(Error::parse(
                origin,
                lineno,
                format!("unsupported dtype `{}`", fields[5]),
            ));
        }
        let dims: Vec<usize> = fields[1..5]
            .iter()
            .map(|f| {
                f.parse()
                    .map_err(|_| Error::parse(origin, lineno, format!("bad dimension `{f}`")))
            })
            .collect::<Result<_>>()?;
        metas.push((
            fields[0].to_string(),
            Shape::new(dims[0], dims[1], dims[2], dims[3]),
        ));
    }

    let mut out = Vec::with_capacity(count);
    for (name, shape) in metas {
        let mut buf = vec![0u8; shape.numel() * 8];
        input.read_exact(&mut buf).map_err(io_err)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
