//! MRtrix TCK tractogram files.
//!
//! Layout: an ASCII header of `key: value` lines opened by `mrtrix tracks`
//! and closed by `END`, then little-endian float32 triplets from the offset
//! named in `file: . <offset>`. Streamlines are separated by a NaN triplet
//! and the stream ends with an Inf triplet.

use std::fs;
use std::path::Path;

use super::{Streamline, Tractogram};
use crate::{Error, Result, Vec3};

const MAGIC_LINE: &str = "mrtrix tracks";

fn push_triplet(out: &mut Vec<u8>, v: [f32; 3]) {
    for c in v {
        out.extend_from_slice(&c.to_le_bytes());
    }
}

fn header(count: usize) -> String {
    let body = format!("{MAGIC_LINE}\ncount: {count}\ndatatype: Float32LE\n");
    // The offset's own digit count feeds back into the header length.
    let mut offset = body.len() + "file: . \nEND\n".len() + 1;
    loop {
        let text = format!("{body}file: . {offset}\nEND\n");
        if text.len() <= offset {
            return format!("{text}{}", "\0".repeat(offset - text.len()));
        }
        offset = text.len();
    }
}

pub fn encode_tck(tractogram: &Tractogram) -> Vec<u8> {
    let mut out = header(tractogram.len()).into_bytes();
    for (i, s) in tractogram.streamlines.iter().enumerate() {
        if i > 0 {
            push_triplet(&mut out, [f32::NAN; 3]);
        }
        for p in &s.points {
            push_triplet(&mut out, [p.x as f32, p.y as f32, p.z as f32]);
        }
    }
    push_triplet(&mut out, [f32::INFINITY; 3]);
    out
}

pub fn parse_tck(bytes: &[u8]) -> Result<Tractogram> {
    let end_marker = b"\nEND\n";
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| Error::format("TCK header has no END line"))?;
    let text = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format("TCK header is not valid UTF-8"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(MAGIC_LINE) {
        return Err(Error::format("missing \"mrtrix tracks\" magic line"));
    }
    let mut datatype = None;
    let mut offset = None;
    for line in lines {
        let Some((key, value)) = line.split_once(':') else { continue };
        match key.trim() {
            "datatype" => datatype = Some(value.trim().to_string()),
            "file" => {
                let mut parts = value.split_whitespace();
                if parts.next() != Some(".") {
                    return Err(Error::format("only inline TCK data (file: . <offset>) is supported"));
                }
                let off = parts
                    .next()
                    .and_then(|o| o.parse::<usize>().ok())
                    .ok_or_else(|| Error::format("bad file offset"))?;
                offset = Some(off);
            }
            _ => {}
        }
    }
    match datatype.as_deref() {
        Some("Float32LE") => {}
        Some(other) => return Err(Error::UnsupportedDatatype(format!("TCK datatype {other}"))),
        None => return Err(Error::format("TCK header lacks a datatype")),
    }
    let offset = offset.ok_or_else(|| Error::format("TCK header lacks a file offset"))?;
    if offset < header_end + end_marker.len() || offset > bytes.len() {
        return Err(Error::format(format!("file offset {offset} is out of range")));
    }

    let mut streamlines = Vec::new();
    let mut current = Vec::new();
    let mut pos = offset;
    loop {
        if pos + 12 > bytes.len() {
            return Err(Error::format("binary section truncated before the Inf terminator"));
        }
        let mut t = [0f32; 3];
        for (c, slot) in t.iter_mut().enumerate() {
            let o = pos + 4 * c;
            *slot = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        }
        pos += 12;
        if t.iter().all(|v| v.is_infinite()) {
            break;
        }
        if t.iter().any(|v| v.is_nan()) {
            if !current.is_empty() {
                streamlines.push(Streamline::new(std::mem::take(&mut current)));
            }
            continue;
        }
        current.push(Vec3::new(t[0] as f64, t[1] as f64, t[2] as f64));
    }
    if !current.is_empty() {
        streamlines.push(Streamline::new(current));
    }
    Ok(Tractogram::new(streamlines))
}

pub fn read_tck(path: &Path) -> Result<Tractogram> {
    parse_tck(&fs::read(path)?)
}

pub fn write_tck(tractogram: &Tractogram, path: &Path) -> Result<()> {
    fs::write(path, encode_tck(tractogram))?;
    Ok(())
}
