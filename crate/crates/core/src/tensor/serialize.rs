//! Parameter blob serialization: per tensor, a UTF-8 header line
//! `name dim0 dim1 ...` followed by the flat little-endian f64 payload.

use std::io::{self, BufRead, Write};

use super::Tensor;

pub fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    assert!(
        !name.is_empty() && !name.contains(char::is_whitespace),
        "tensor names must be non-empty and whitespace-free"
    );
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{} {}", name, dims.join(" "))?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensors(w: &mut impl Write, tensors: &[(String, Tensor)]) -> io::Result<()> {
    for (name, t) in tensors {
        write_tensor(w, name, t)?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl BufRead) -> io::Result<(String, Tensor)> {
    let mut header = String::new();
    let n = r.read_line(&mut header)?;
    if n == 0 {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "missing tensor header",
        ));
    }
    let mut parts = header.split_whitespace();
    let name = parts
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty tensor header"))?
        .to_string();
    let shape: Vec<usize> = parts
        .map(|p| {
            p.parse::<usize>().map_err(|_| {
                io::Error::new(io::ErrorKind::InvalidData, "bad dimension in tensor header")
            })
        })
        .collect::<io::Result<_>>()?;
    if shape.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "tensor header lists no dimensions",
        ));
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "tensor payload contains non-finite values",
        ));
    }
    Ok((name, Tensor::new(shape, data)))
}

/// Reads exactly `count` tensors in file order.
pub fn read_tensors(r: &mut impl BufRead, count: usize) -> io::Result<Vec<(String, Tensor)>> {
    (0..count).map(|_| read_tensor(r)).collect()
}
