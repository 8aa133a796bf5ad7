//! Offset-tracking binary file helpers shared by the checkpoint and
//! feature-file formats. Every read failure reports the byte offset where
//! parsing stopped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
    offset: u64,
}

impl<'a> Reader<'a> {
    pub fn open(path: &'a Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Reader {
            inner: BufReader::new(file),
            path,
            offset: 0,
        })
    }

    pub fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset: self.offset,
            detail: detail.into(),
        }
    }

    pub fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| self.fail(format!("truncated while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.exact(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    /// None on a clean end of file, the value otherwise. A partial read is a
    /// truncation error.
    pub fn u32_or_eof(&mut self, what: &str) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut read = 0;
        while read < 4 {
            let n = self
                .inner
                .read(&mut buf[read..])
                .map_err(|_| self.fail(format!("read error in {what}")))?;
            if n == 0 {
                if read == 0 {
                    return Ok(None);
                }
                self.offset += read as u64;
                return Err(self.fail(format!("truncated while reading {what}")));
            }
            read += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(buf)))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let mut buf = [0u8; 4];
        self.exact(&mut buf, what)?;
        Ok(f32::from_le_bytes(buf))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.exact(&mut buf, what)?;
        Ok(f64::from_le_bytes(buf))
    }
}

pub(crate) struct Writer {
    inner: BufWriter<File>,
    path: PathBuf,
}

impl Writer {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Writer {
            inner: BufWriter::new(file),
            path: PathBuf::from(path),
        })
    }

    pub fn bytes(&mut self, data: &[u8]) -> Result<()> {
        self.inner
            .write_all(data)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}
