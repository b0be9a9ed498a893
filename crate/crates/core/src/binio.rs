//! Shared pieces of the binary artifact formats.
//!
//! Every file starts with an 8-byte magic, a little-endian `u32` format
//! version and a `u64` byte length followed by that many bytes of UTF-8
//! TOML describing the payload.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_preamble<W: Write>(w: &mut W, magic: &[u8; 8], version: u32, header: &str) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    Ok(())
}

/// Reads and checks the preamble, returning the header text.
pub fn read_preamble<R: Read>(r: &mut R, magic: &[u8; 8], version: u32, what: &str) -> Result<String> {
    let mut m = [0u8; 8];
    read_exact(r, &mut m, what)?;
    if &m != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&m).into_owned(),
        });
    }
    let found = read_u32(r, what)?;
    if found != version {
        return Err(Error::VersionMismatch {
            found,
            expected: version,
        });
    }
    let len = read_u64(r, what)?;
    const MAX_HEADER: u64 = 64 << 20;
    if len > MAX_HEADER {
        return Err(Error::Format(format!("{what} header length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("{what} header is not UTF-8: {e}")))
}

pub fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("{what} ended early")),
        _ => Error::Io(e),
    })
}

pub fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r, what)?))
}

/// Writes through a sibling temporary file and renames it into place, so
/// readers never observe a partial artifact.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preamble_round_trip() {
        let mut buf = Vec::new();
        write_preamble(&mut buf, b"TESTMAG\0", 3, "a = 1\n").unwrap();
        let text = read_preamble(&mut buf.as_slice(), b"TESTMAG\0", 3, "test").unwrap();
        assert_eq!(text, "a = 1\n");
        assert!(matches!(
            read_preamble(&mut buf.as_slice(), b"OTHERMG\0", 3, "test"),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            read_preamble(&mut buf.as_slice(), b"TESTMAG\0", 4, "test"),
            Err(Error::VersionMismatch { found: 3, expected: 4 })
        ));
        assert!(matches!(
            read_preamble(&mut &buf[..buf.len() - 2], b"TESTMAG\0", 3, "test"),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, |w| Ok(w.write_all(b"one")?)).unwrap();
        write_atomic(&p, |w| Ok(w.write_all(b"two")?)).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
