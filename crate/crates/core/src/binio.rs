//! Little-endian binary encoding helpers shared by the checkpoint writers.

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum BinIoError {
    #[error("unexpected end of data")]
    Truncated,
    #[error("json block: {0}")]
    Json(#[from] serde_json::Error),
}

/// Append a length-prefixed JSON block.
pub fn write_json_block<T: Serialize>(buf: &mut Vec<u8>, value: &T) -> Result<(), BinIoError> {
    let json = serde_json::to_vec(value)?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(())
}

/// Read a length-prefixed JSON block, advancing the cursor.
pub fn read_json_block<T: DeserializeOwned>(cur: &mut &[u8]) -> Result<T, BinIoError> {
    if cur.len() < 8 {
        return Err(BinIoError::Truncated);
    }
    let len = u64::from_le_bytes(cur[..8].try_into().unwrap()) as usize;
    *cur = &cur[8..];
    if cur.len() < len {
        return Err(BinIoError::Truncated);
    }
    let value = serde_json::from_slice(&cur[..len])?;
    *cur = &cur[len..];
    Ok(value)
}

/// Append `f64` values in little-endian order.
pub fn write_f64_slice(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Read exactly `n` little-endian `f64`s, advancing the cursor.
pub fn read_f64_vec(cur: &mut &[u8], n: usize) -> Result<Vec<f64>, BinIoError> {
    if cur.len() < n * 8 {
        return Err(BinIoError::Truncated);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(f64::from_le_bytes(cur[i * 8..(i + 1) * 8].try_into().unwrap()));
    }
    *cur = &cur[n * 8..];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_json_block(&mut buf, &vec![1u32, 2, 3]).unwrap();
        write_f64_slice(&mut buf, &[1.5, -2.25, f64::MIN_POSITIVE]);
        let mut cur = &buf[..];
        let v: Vec<u32> = read_json_block(&mut cur).unwrap();
        assert_eq!(v, vec![1, 2, 3]);
        let f = read_f64_vec(&mut cur, 3).unwrap();
        assert_eq!(f, vec![1.5, -2.25, f64::MIN_POSITIVE]);
        assert!(cur.is_empty());
        assert!(matches!(read_f64_vec(&mut cur, 1), Err(BinIoError::Truncated)));
    }
}
