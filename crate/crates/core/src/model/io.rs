//! Binary parameter files.
//!
//! ```text
//! magic[4]        "JCAP" | "VCAP" | "CONP"
//! version  u32    1
//! L d_a d_v k     u32 x 4
//! attention       8 matrices (JCAP/VCAP only), fixed order
//! layers   u32    head layer count
//! head            per layer: weight matrix, bias matrix
//! matrix         := rows u32, cols u32, rows*cols f64
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::baselines::{ConcatParams, VanillaCaParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{DenseLayer, Dims, FusionModel, Head, JcaParams, Model, ModelKind};

pub const PARAMS_VERSION: u32 = 1;

fn magic(kind: ModelKind) -> &'static [u8; 4] {
    match kind {
        ModelKind::Jca => b"JCAP",
        ModelKind::Concat => b"CONP",
        ModelKind::VanillaCa => b"VCAP",
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension fits in u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    put_u32(buf, m.rows());
    put_u32(buf, m.cols());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic(model.kind()));
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    let dims = model.dims();
    for v in [dims.seq_len, dims.d_a, dims.d_v, dims.k] {
        put_u32(&mut buf, v);
    }
    let params = model.params();
    let n_attention = if model.kind() == ModelKind::Concat { 0 } else { 8 };
    for m in &params[..n_attention] {
        put_matrix(&mut buf, m);
    }
    let head = model.head();
    put_u32(&mut buf, head.layers.len());
    for layer in &head.layers {
        put_matrix(&mut buf, &layer.weight);
        put_matrix(&mut buf, &layer.bias);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            Error::InvalidArgument(format!("matrix size {rows}x{cols} overflows"))
        })?;
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    let tag = r.take(4)?.to_vec();
    let kind = ModelKind::ALL
        .into_iter()
        .find(|k| magic(*k).as_slice() == tag.as_slice())
        .ok_or_else(|| Error::BadMagic {
            path: path.to_path_buf(),
            expected: "JCAP|VCAP|CONP".into(),
            found: String::from_utf8_lossy(&tag).into_owned(),
        })?;
    let version = r.u32()? as u32;
    if version != PARAMS_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            expected: PARAMS_VERSION,
            found: version,
        });
    }
    let dims = Dims::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?)?;
    let mut att = Vec::new();
    if kind != ModelKind::Concat {
        for _ in 0..8 {
            att.push(r.matrix()?);
        }
    }
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(16));
    for _ in 0..n_layers {
        let weight = r.matrix()?;
        let bias = r.matrix()?;
        layers.push(DenseLayer { weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    let head = Head { layers };
    let model = match kind {
        ModelKind::Concat => {
            let p = ConcatParams { dims, head };
            p.validate()?;
            Model::Concat(p)
        }
        ModelKind::Jca => {
            let mut it = att.into_iter();
            let mut next = || it.next().expect("eight matrices");
            let p = JcaParams {
                dims,
                w_ja: next(),
                w_jv: next(),
                w_a: next(),
                w_v: next(),
                w_ca: next(),
                w_cv: next(),
                w_ha: next(),
                w_hv: next(),
                head,
            };
            p.validate()?;
            Model::Jca(p)
        }
        ModelKind::VanillaCa => {
            let mut it = att.into_iter();
            let mut next = || it.next().expect("eight matrices");
            let p = VanillaCaParams {
                dims,
                w_xa: next(),
                w_xv: next(),
                w_a: next(),
                w_v: next(),
                w_ca: next(),
                w_cv: next(),
                w_ha: next(),
                w_hv: next(),
                head,
            };
            p.validate()?;
            Model::VanillaCa(p)
        }
    };
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadSpec;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            kind in prop::sample::select(ModelKind::ALL.to_vec()),
            l in 1usize..5, da in 1usize..5, dv in 1usize..5, k in 1usize..4,
            hidden in prop::option::of(1usize..4), outputs in 1usize..3, seed in any::<u64>(),
        ) {
            let dims = Dims::new(l, da, dv, k).unwrap();
            let m = Model::xavier(kind, dims, HeadSpec { hidden, outputs }, seed).unwrap();
            let bytes = encode(&m);
            let back = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn header_layout() {
        let dims = Dims::new(2, 1, 1, 1).unwrap();
        let m = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 0).unwrap();
        let b = encode(&m);
        assert_eq!(&b[..4], b"JCAP");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        // first matrix header: W_ja is 2x2
        assert_eq!(&b[24..28], &2u32.to_le_bytes());
        assert_eq!(&b[28..32], &2u32.to_le_bytes());
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let dims = Dims::new(2, 1, 1, 1).unwrap();
        let m = Model::xavier(ModelKind::Concat, dims, HeadSpec::linear(1), 0).unwrap();
        let mut b = encode(&m);
        assert_eq!(&b[..4], b"CONP");
        let short = &b[..b.len() - 3];
        assert!(matches!(decode(short, Path::new("x")), Err(Error::Truncated { .. })));
        b[0] = b'X';
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let dims = Dims::new(2, 1, 1, 1).unwrap();
        let m = Model::xavier(ModelKind::VanillaCa, dims, HeadSpec::linear(1), 0).unwrap();
        let mut b = encode(&m);
        b[4] = 9;
        assert!(matches!(
            decode(&b, Path::new("x")),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }
}
