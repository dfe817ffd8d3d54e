//! Binary tensor files.
//!
//! All integers and floats are little-endian:
//!
//! | bytes        | content                                     |
//! |--------------|---------------------------------------------|
//! | 4            | magic `CTNS`                                |
//! | 4 (u32)      | format version, currently 1                 |
//! | 4 (u32)      | order `D`                                   |
//! | 8·D (u64)    | dimensions `N_0 .. N_{D-1}`                 |
//! | 16·∏N (f64)  | `(re, im)` pairs in first-index-fastest order |

use std::io::{Read, Write};

use num_complex::Complex64;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTNS";
const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(t: &Tensor<Complex64>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.order() as u32).to_le_bytes())?;
    for &n in t.shape() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(16 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(b)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor<Complex64>> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let order = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if order == 0 || order > 32 {
        return Err(Error::Format(format!("implausible order {order}")));
    }
    let mut shape = Vec::with_capacity(order);
    for _ in 0..order {
        shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != 16 * len {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            16 * len,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[2, 1], vec![Complex64::new(1.0, -2.0), Complex64::new(0.5, 0.0)]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CTNS");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..28], &1u64.to_le_bytes());
        assert_eq!(&buf[28..36], &1.0f64.to_le_bytes());
        assert_eq!(&buf[36..44], &(-2.0f64).to_le_bytes());
        assert_eq!(buf.len(), 28 + 32);
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_tensor(&b"XXXX"[..]).is_err());
        let t = Tensor::<Complex64>::zeros(&[3]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf.pop();
        assert!(matches!(read_tensor(&buf[..]), Err(Error::Format(_))));
    }
}
