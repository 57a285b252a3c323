//! `FPN1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FPN1"                      magic
//! u32                         layer count
//! per layer:
//!   u32                       kind tag (0 = dense, 1 = conv2d)
//!   u32 rank, rank x u32      weight shape
//!   prod(shape) x f64         weights
//!   shape[0] x f64            biases (one per output unit / channel)
//!   prod(shape) x u8          mask, one byte per entry, 0 or 1
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerState, NetworkState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FPN1";

pub fn write_checkpoint<W: Write>(state: &NetworkState, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    put_u32(&mut out, state.layers.len())?;
    for layer in &state.layers {
        out.write_all(&layer.kind_tag.to_le_bytes())?;
        put_u32(&mut out, layer.shape.len())?;
        for &d in &layer.shape {
            put_u32(&mut out, d)?;
        }
        for w in &layer.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        if layer.bias.len() != layer.shape.first().copied().unwrap_or(0) {
            return Err(std::io::Error::other(
                "bias count must equal the leading weight dimension",
            ));
        }
        for b in &layer.bias {
            out.write_all(&b.to_le_bytes())?;
        }
        let mask: Vec<u8> = layer.mask.iter().map(|&m| u8::from(m)).collect();
        out.write_all(&mask)?;
    }
    out.flush()
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<NetworkState> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::parse("checkpoint", format!("bad magic {magic:?}")));
    }
    let count = get_u32(&mut input, "layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for k in 0..count {
        let ctx = |what: &str| format!("layer {k} {what}");
        let kind_tag = get_u32(&mut input, &ctx("kind tag"))? as u32;
        let rank = get_u32(&mut input, &ctx("rank"))?;
        let shape = (0..rank)
            .map(|_| get_u32(&mut input, &ctx("shape")))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse("checkpoint", ctx("shape overflows")))?;
        let weights = get_f64s(&mut input, n, &ctx("weights"))?;
        let nb = shape.first().copied().unwrap_or(0);
        let bias = get_f64s(&mut input, nb, &ctx("biases"))?;
        let mut raw = vec![0u8; n];
        read_exact(&mut input, &mut raw, &ctx("mask"))?;
        let mask = raw
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::parse("checkpoint", ctx(&format!("mask byte {other}")))),
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerState {
            kind_tag,
            shape,
            weights,
            bias,
            mask,
        });
    }
    let mut trailing = [0u8; 1];
    if input
        .read(&mut trailing)
        .map_err(|e| Error::parse("checkpoint", e.to_string()))?
        != 0
    {
        return Err(Error::parse("checkpoint", "trailing bytes after last layer"));
    }
    Ok(NetworkState { layers })
}

pub fn write_checkpoint_file(state: &NetworkState, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(state, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_file(path: &Path) -> Result<NetworkState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::parse(path.display().to_string(), detail),
        other => other,
    })
}

fn put_u32<W: Write>(out: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::parse("checkpoint", format!("{what}: {e}")))
}

fn get_u32<R: Read>(input: &mut R, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s<R: Read>(input: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n.min(1 << 20));
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(input, &mut b, what)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
