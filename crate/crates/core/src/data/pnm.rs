//! Binary portable pixmap (P6, RGB) and graymap (P5) files, maxval 255.
//!
//! Layout: `P6` or `P5`, whitespace, width, whitespace, height, whitespace,
//! `255`, one whitespace byte, then `width * height * channels` raw bytes in
//! row-major order. Writers emit `P6\n<w> <h>\n255\n`; readers also accept
//! `#` comments in the header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 3 for P6, 1 for P5.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pnm {
    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Pnm {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Pnm {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            kind: "pnm",
            path: path.to_path_buf(),
            msg,
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fmt("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let channels = match fields[0].as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(fmt(format!("unsupported magic {m:?}"))),
        };
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| fmt(format!("bad {what} {s:?}")));
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        if num(&fields[3], "maxval")? != 255 {
            return Err(fmt(format!("maxval {} (only 255 is supported)", fields[3])));
        }
        let n = width * height * channels;
        if bytes.len() < pos || bytes.len() - pos != n {
            return Err(fmt(format!(
                "expected {n} raster bytes, found {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            data: bytes[pos..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
