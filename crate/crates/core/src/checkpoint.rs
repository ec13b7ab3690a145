//! MMCK parameter files.
//!
//! Layout: `b"MMCK"`, `u32` version (1), `u32` count, then per parameter a
//! `u16` name length, the UTF-8 name, and the value as an inline MMTF record.
//! Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::param::ParamSet;
use crate::tensor::Tensor;

pub const MMCK_MAGIC: &[u8; 4] = b"MMCK";
pub const MMCK_VERSION: u32 = 1;

pub fn encode(entries: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MMCK_MAGIC);
    out.extend_from_slice(&MMCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    }
    Ok(out)
}

pub fn decode<R: Read>(r: &mut R) -> std::result::Result<ParamSet, String> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|e| format!("truncated header: {e}"))?;
    if &head[..4] != MMCK_MAGIC {
        return Err(format!("bad magic {:?}, expected \"MMCK\"", &head[..4]));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != MMCK_VERSION {
        return Err(format!("unsupported MMCK version {version}"));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let mut params = ParamSet::new();
    for i in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(|e| format!("truncated entry {i}: {e}"))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|e| format!("truncated name of entry {i}: {e}"))?;
        let name = String::from_utf8(name).map_err(|_| format!("entry {i}: name is not UTF-8"))?;
        let t = read_tensor(r).map_err(|e| format!("parameter `{name}`: {e}"))?;
        params.insert(name, t).map_err(|e| e.to_string())?;
    }
    Ok(params)
}

pub fn save(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let params = decode(&mut r).map_err(|msg| Error::format(path, msg))?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(params),
        Ok(_) => Err(Error::format(path, "trailing bytes after last parameter")),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_order_and_values() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.5, -3.0, 0.125]).unwrap();
        let b = Tensor::vector(vec![7.0]).unwrap();
        let bytes = encode(&[("w", &a), ("bias", &b)]).unwrap();
        assert_eq!(&bytes[..4], b"MMCK");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(&bytes[14..15], b"w");
        assert_eq!(&bytes[15..19], b"MMTF");
        let p = decode(&mut &bytes[..]).unwrap();
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, ["w", "bias"]);
        assert_eq!(p.value("w").unwrap(), &a);
        assert_eq!(p.value("bias").unwrap(), &b);
    }

    #[test]
    fn corrupt_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mmck");
        let t = Tensor::scalar(1.0);
        let bytes = encode(&[("x", &t)]).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let msg = load(&path).unwrap_err().to_string();
        assert!(msg.contains("model.mmck") && msg.contains("truncated"), "{msg}");
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("magic"));
    }
}
