//! Framed binary protocol spoken with external model processes.
//!
//! Every frame is little-endian:
//!
//! ```text
//! u32 magic | u32 height | u32 width | u32 channels | height*width*channels f32 values
//! ```
//!
//! Values are channel-major (`C x H x W`), rows top to bottom. Requests carry
//! [`REQUEST_MAGIC`] and the `T*B` input channels; responses carry
//! [`RESPONSE_MAGIC`] and one channel per class. The engine sends one request
//! per patch and waits for its response before sending the next; closing the
//! child's stdin ends the session.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::tiler::Patch;

/// `b"FSRQ"` read as a little-endian u32.
pub const REQUEST_MAGIC: u32 = u32::from_le_bytes(*b"FSRQ");
/// `b"FSRP"` read as a little-endian u32.
pub const RESPONSE_MAGIC: u32 = u32::from_le_bytes(*b"FSRP");

/// Upper bound on values per frame (1 GiB of f32).
const MAX_VALUES: usize = 1 << 28;

pub fn write_frame<W: Write>(out: &mut W, magic: u32, patch: &Patch) -> Result<()> {
    let dims = [patch.height, patch.width, patch.channels];
    let mut buf = Vec::with_capacity(16 + patch.data.len() * 4);
    buf.extend_from_slice(&magic.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Protocol(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in &patch.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before the header.
pub fn read_frame<R: Read>(input: &mut R, magic: u32) -> Result<Option<Patch>> {
    let mut header = [0u8; 16];
    let mut filled = 0;
    while filled < header.len() {
        match input.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("truncated frame header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let word = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(Error::Protocol(format!(
            "bad magic 0x{:08x}, expected 0x{magic:08x}",
            word(0)
        )));
    }
    let (height, width, channels) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .filter(|&n| n <= MAX_VALUES)
        .ok_or_else(|| Error::Protocol(format!("frame {channels}x{height}x{width} too large")))?;
    let mut payload = vec![0u8; count * 4];
    input.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Protocol("truncated frame payload".into())
        } else {
            e.into()
        }
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Patch::new(channels, height, width, data).map(Some)
}

pub fn write_request<W: Write>(out: &mut W, patch: &Patch) -> Result<()> {
    write_frame(out, REQUEST_MAGIC, patch)
}

pub fn read_request<R: Read>(input: &mut R) -> Result<Option<Patch>> {
    read_frame(input, REQUEST_MAGIC)
}

pub fn write_response<W: Write>(out: &mut W, logits: &Patch) -> Result<()> {
    write_frame(out, RESPONSE_MAGIC, logits)
}

pub fn read_response<R: Read>(input: &mut R) -> Result<Patch> {
    read_frame(input, RESPONSE_MAGIC)?.ok_or_else(|| Error::Protocol("model closed its output".into()))
}

/// Serves requests from `input` until end of stream, answering with `predict`.
pub fn serve<R: Read, W: Write>(
    input: &mut R,
    output: &mut W,
    mut predict: impl FnMut(&Patch) -> Result<Patch>,
) -> Result<usize> {
    let mut served = 0;
    while let Some(request) = read_request(input)? {
        let logits = predict(&request)?;
        write_response(output, &logits)?;
        served += 1;
    }
    Ok(served)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn header_layout_is_exact() {
        let p = Patch::new(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_request(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"FSRQ");
        assert_eq!(&buf[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&buf[20..], &(-2.5f32).to_le_bytes());
        let back = read_request(&mut Cursor::new(buf)).unwrap().unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let p = Patch::new(2, 2, 2, vec![0.5; 8]).unwrap();
        let mut buf = Vec::new();
        write_response(&mut buf, &p).unwrap();
        assert!(matches!(read_request(&mut Cursor::new(buf.clone())), Err(Error::Protocol(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_response(&mut Cursor::new(buf)), Err(Error::Protocol(_))));
        assert!(read_request(&mut Cursor::new(Vec::new())).unwrap().is_none());
        assert!(matches!(read_request(&mut Cursor::new(vec![b'F', b'S'])), Err(Error::Protocol(_))));
    }

    #[test]
    fn serve_loop_answers_each_request() {
        let mut input = Vec::new();
        for v in [1.0f32, 2.0] {
            write_request(&mut input, &Patch::new(1, 1, 1, vec![v]).unwrap()).unwrap();
        }
        let mut output = Vec::new();
        let served = serve(&mut Cursor::new(input), &mut output, |p| {
            Patch::new(2, 1, 1, vec![p.data[0], -p.data[0]])
        })
        .unwrap();
        assert_eq!(served, 2);
        let mut cur = Cursor::new(output);
        assert_eq!(read_response(&mut cur).unwrap().data, vec![1.0, -1.0]);
        assert_eq!(read_response(&mut cur).unwrap().data, vec![2.0, -2.0]);
    }
}
