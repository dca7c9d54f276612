//! `.mrt` container: a fixed little-endian header followed by the hyper
//! and latent payloads.
//!
//! ```text
//! offset size field
//!      0    4 magic "MRT1"
//!      4    1 version
//!      5    4 original width
//!      9    4 original height
//!     13    4 padded width
//!     17    4 padded height
//!     21    1 lambda index
//!     22    1 c_z
//!     23    4 hyper payload length
//!     27    4 latent payload length
//!     31    4 CRC-32 of bytes 0..31 and both payloads
//!     35      hyper payload, then latent payload
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRT1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 35;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub orig_width: u32,
    pub orig_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub lambda_index: u8,
    pub c_z: u8,
    pub hyper_len: u32,
    pub latent_len: u32,
    pub checksum: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MrtBitstream {
    pub header: Header,
    pub hyper: Vec<u8>,
    pub latent: Vec<u8>,
}

/// Bytes of the header covered by the checksum.
const CHECKED_PREFIX: usize = 31;

fn checksum(prefix: &[u8], hyper: &[u8], latent: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(prefix);
    h.update(hyper);
    h.update(latent);
    h.finalize()
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

impl MrtBitstream {
    /// Fills in the payload lengths and checksum.
    pub fn new(
        orig: (u32, u32),
        padded: (u32, u32),
        lambda_index: u8,
        c_z: u8,
        hyper: Vec<u8>,
        latent: Vec<u8>,
    ) -> Result<Self> {
        let len = |v: &[u8]| u32::try_from(v.len()).map_err(|_| Error::InvalidArgument("payload over 4 GiB".into()));
        let mut header = Header {
            orig_width: orig.0,
            orig_height: orig.1,
            padded_width: padded.0,
            padded_height: padded.1,
            lambda_index,
            c_z,
            hyper_len: len(&hyper)?,
            latent_len: len(&latent)?,
            checksum: 0,
        };
        let prefix = Self::header_bytes(&header);
        header.checksum = checksum(&prefix[..CHECKED_PREFIX], &hyper, &latent);
        Ok(Self { header, hyper, latent })
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.hyper.len() + self.latent.len()
    }

    /// Total bits over original pixels.
    pub fn bpp(&self) -> f64 {
        let pixels = f64::from(self.header.orig_width) * f64::from(self.header.orig_height);
        (self.total_bytes() * 8) as f64 / pixels
    }

    fn header_bytes(h: &Header) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [h.orig_width, h.orig_height, h.padded_width, h.padded_height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(h.lambda_index);
        out.push(h.c_z);
        for v in [h.hyper_len, h.latent_len, h.checksum] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::header_bytes(&self.header);
        out.reserve(self.hyper.len() + self.latent.len());
        out.extend_from_slice(&self.hyper);
        out.extend_from_slice(&self.latent);
        out
    }

    /// Parses the header alone.
    pub fn read_header(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < 5 {
            return Err(Error::Corrupt("truncated header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version(bytes[4]));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let h = Header {
            orig_width: u32_at(bytes, 5),
            orig_height: u32_at(bytes, 9),
            padded_width: u32_at(bytes, 13),
            padded_height: u32_at(bytes, 17),
            lambda_index: bytes[21],
            c_z: bytes[22],
            hyper_len: u32_at(bytes, 23),
            latent_len: u32_at(bytes, 27),
            checksum: u32_at(bytes, 31),
        };
        if h.orig_width == 0 || h.orig_height == 0 || h.padded_width < h.orig_width || h.padded_height < h.orig_height {
            return Err(Error::Corrupt("inconsistent image dimensions".into()));
        }
        Ok(h)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Self::read_header(bytes)?;
        let hyper_end = HEADER_LEN + header.hyper_len as usize;
        let end = hyper_end + header.latent_len as usize;
        if bytes.len() < end {
            return Err(Error::Corrupt(format!("truncated payload: {} of {end} bytes", bytes.len())));
        }
        if bytes.len() > end {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - end)));
        }
        let (hyper, latent) = (&bytes[HEADER_LEN..hyper_end], &bytes[hyper_end..end]);
        if checksum(&bytes[..CHECKED_PREFIX], hyper, latent) != header.checksum {
            return Err(Error::Corrupt("payload checksum mismatch".into()));
        }
        Ok(Self { header, hyper: hyper.to_vec(), latent: latent.to_vec() })
    }
}
