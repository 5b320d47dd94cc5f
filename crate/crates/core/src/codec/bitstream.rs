//! Container format: fixed header, then length-prefixed range-coded sections.

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub const MAGIC: [u8; 4] = *b"DLIC";
pub const VERSION: u16 = 1;

/// Latent geometry of one branch as recorded in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneDims {
    pub latent: Shape,
    pub hyper: Shape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub model_id: u32,
    pub rate_point: u8,
    pub width: u16,
    pub height: u16,
    pub planes: Vec<PlaneDims>,
}

impl Header {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.push(self.rate_point);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.planes.len() as u8);
        for p in &self.planes {
            for s in [p.latent, p.hyper] {
                for d in [s.channels, s.height, s.width] {
                    out.extend_from_slice(&(d as u16).to_le_bytes());
                }
            }
        }
    }

    pub fn parse(r: &mut Reader<'_>) -> Result<Header> {
        if r.take(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let model_id = r.u32()?;
        let rate_point = r.u8()?;
        let width = r.u16()?;
        let height = r.u16()?;
        if width == 0 || height == 0 {
            return Err(Error::Bitstream("zero image dimension".into()));
        }
        let n = r.u8()?;
        let mut planes = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let mut shape = || -> Result<Shape> {
                Ok(Shape::new(r.u16()? as usize, r.u16()? as usize, r.u16()? as usize))
            };
            let latent = shape()?;
            let hyper = shape()?;
            planes.push(PlaneDims { latent, hyper });
        }
        Ok(Header {
            model_id,
            rate_point,
            width,
            height,
            planes,
        })
    }

    pub fn encoded_len(&self) -> usize {
        4 + 2 + 4 + 1 + 2 + 2 + 1 + 12 * self.planes.len()
    }
}

/// Bounds-checked little-endian reader.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Bitstream(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// A `u32` length followed by that many bytes.
    pub fn section(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn write_section(out: &mut Vec<u8>, data: &[u8]) -> Result<()> {
    let n = u32::try_from(data.len()).map_err(|_| Error::Bitstream("section over 4 GiB".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(data);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let h = Header {
            model_id: 0xdead_beef,
            rate_point: 3,
            width: 100,
            height: 67,
            planes: vec![
                PlaneDims {
                    latent: Shape::new(64, 8, 8),
                    hyper: Shape::new(8, 4, 4),
                },
                PlaneDims {
                    latent: Shape::new(128, 4, 4),
                    hyper: Shape::new(8, 2, 2),
                },
            ],
        };
        let mut bytes = Vec::new();
        h.write(&mut bytes);
        assert_eq!(bytes.len(), h.encoded_len());
        assert_eq!(&bytes[..4], b"DLIC");
        let mut r = Reader::new(&bytes);
        assert_eq!(Header::parse(&mut r).unwrap(), h);
        assert_eq!(r.remaining(), 0);

        for cut in 0..bytes.len() {
            assert!(Header::parse(&mut Reader::new(&bytes[..cut])).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Header::parse(&mut Reader::new(&bad)).is_err());
    }

    #[test]
    fn sections() {
        let mut out = Vec::new();
        write_section(&mut out, b"abc").unwrap();
        write_section(&mut out, b"").unwrap();
        let mut r = Reader::new(&out);
        assert_eq!(r.section().unwrap(), b"abc");
        assert_eq!(r.section().unwrap(), b"");
        assert!(r.section().is_err());
    }
}
