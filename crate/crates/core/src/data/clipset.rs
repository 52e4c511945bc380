//! `CLPS` clip-set files and plain-text manifests.
//!
//! ```text
//! "CLPS" | u32 version | u32 count
//! per clip: u32 label | u32 L | u32 H | u32 W | f32 RGB (L*3*H*W) | f32 depth (L*H*W)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::VideoClip;
use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CLPS";
pub const VERSION: u32 = 1;
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_clips<W: Write>(w: &mut W, clips: &[VideoClip]) -> Result<()> {
    w.write_all(MAGIC)?;
    binio::write_u32(w, VERSION)?;
    binio::write_u32(w, clips.len() as u32)?;
    for c in clips {
        for v in [c.label, c.len(), c.height(), c.width()] {
            binio::write_u32(w, v as u32)?;
        }
        binio::write_f32s(w, c.frames.data().iter().copied())?;
        binio::write_f32s(w, c.depth.data().iter().copied())?;
    }
    Ok(())
}

pub fn read_clips<R: Read>(r: &mut ByteReader<R>) -> Result<Vec<VideoClip>> {
    r.expect_magic(MAGIC)?;
    let at = r.offset();
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::parse(at, format!("unsupported clip-set version {version}")));
    }
    let count = r.read_u32()?;
    let mut clips = Vec::new();
    for _ in 0..count {
        let at = r.offset();
        let label = r.read_u32()? as usize;
        let (l, h, w) = (r.read_u32()? as usize, r.read_u32()? as usize, r.read_u32()? as usize);
        let n = (l * h * w) as u64;
        if l == 0 || h == 0 || w == 0 || n * 3 > MAX_ELEMENTS {
            return Err(Error::parse(at, format!("implausible clip extent {l}x{h}x{w}")));
        }
        let frames = Tensor::new(&[l, 3, h, w], r.read_f32_vec(l * 3 * h * w)?)?;
        let depth = Tensor::new(&[l, 1, h, w], r.read_f32_vec(l * h * w)?)?;
        clips.push(VideoClip::new(frames, depth, label)?);
    }
    Ok(clips)
}

pub fn write_clipset(path: &Path, clips: &[VideoClip]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_clips(&mut w, clips)?;
    w.flush()?;
    Ok(())
}

pub fn read_clipset(path: &Path) -> Result<Vec<VideoClip>> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?));
    let clips = read_clips(&mut r)?;
    r.at_eof()?;
    Ok(clips)
}

/// One line per clip: `relative/path<TAB>label`.
pub fn write_manifest(path: &Path, entries: &[(PathBuf, usize)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (p, label) in entries {
        writeln!(w, "{}\t{label}", p.display())?;
    }
    w.flush()?;
    Ok(())
}

/// Entries of a manifest, paths resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end();
        if !trimmed.is_empty() {
            let (p, label) = trimmed
                .split_once('\t')
                .ok_or_else(|| Error::parse(offset, "manifest line needs <path>\\t<label>"))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::parse(offset, format!("bad label {label:?}")))?;
            out.push((base.join(p), label));
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Load every clip listed in a manifest, checking labels agree.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoClip>> {
    let mut clips = Vec::new();
    for (p, label) in read_manifest(path)? {
        for c in read_clipset(&p)? {
            if c.label != label {
                return Err(Error::config(format!(
                    "{} holds label {} but the manifest says {label}",
                    p.display(),
                    c.label
                )));
            }
            clips.push(c);
        }
    }
    Ok(clips)
}
