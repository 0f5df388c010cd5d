//! Binary layout of one transmitted layer, all integers and floats
//! little-endian:
//!
//! ```text
//! "FDLR" | u16 version = 1 | u32 m | u32 n | u32 r | u8 mode (0 dense, 1 factored)
//! | payload f64s, row-major (dense: m*n; factored: U then V, r*(m+n))
//! | u32 bias_len | bias f64s
//! ```
//!
//! `r = 0` marks weights sent without truncation. A model is the
//! concatenation of its layer records, so its size is the sum of
//! [`layer_bytes`] over layers.

use crate::compression::{CompressedLayer, CompressedModel, FactorPair, Payload};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"FDLR";
pub const VERSION: u16 = 1;
/// Magic, version, three dims and the mode byte.
pub const HEADER_BYTES: usize = 4 + 2 + 4 * 3 + 1;
const MODE_DENSE: u8 = 0;
const MODE_FACTORED: u8 = 1;

/// Exact encoded size from the dimensions alone.
pub fn encoded_len(m: usize, n: usize, factored_rank: Option<usize>, bias_len: usize) -> usize {
    let payload = match factored_rank {
        Some(r) => r * (m + n),
        None => m * n,
    };
    HEADER_BYTES + 8 * payload + 4 + 8 * bias_len
}

pub fn layer_bytes(layer: &CompressedLayer) -> usize {
    let (m, n) = layer.shape();
    let factored = match layer.payload() {
        Payload::Factored(fp) => Some(fp.rank()),
        Payload::Dense(_) => None,
    };
    encoded_len(m, n, factored, layer.bias().len())
}

pub fn model_bytes(model: &CompressedModel) -> usize {
    model.layers().iter().map(layer_bytes).sum()
}

pub fn encode_layer(layer: &CompressedLayer, out: &mut Vec<u8>) {
    let (m, n) = layer.shape();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(layer.rank().unwrap_or(0) as u32).to_le_bytes());
    match layer.payload() {
        Payload::Dense(w) => {
            out.push(MODE_DENSE);
            put_f64s(out, w.as_slice());
        }
        Payload::Factored(fp) => {
            out.push(MODE_FACTORED);
            put_f64s(out, fp.u().as_slice());
            put_f64s(out, fp.v().as_slice());
        }
    }
    out.extend_from_slice(&(layer.bias().len() as u32).to_le_bytes());
    put_f64s(out, layer.bias());
}

pub fn encode_model(model: &CompressedModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(model_bytes(model));
    for l in model.layers() {
        encode_layer(l, &mut out);
    }
    out
}

/// Decodes one layer record and returns it with the number of bytes read.
pub fn decode_layer(bytes: &[u8]) -> Result<(CompressedLayer, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Wire(format!("unsupported version {version}")));
    }
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let mode = r.take(1)?[0];
    let payload = match mode {
        MODE_DENSE => Payload::Dense(Matrix::new(m, n, r.f64s(m * n)?)?),
        MODE_FACTORED => {
            if rank == 0 || rank > m.min(n) {
                return Err(Error::Wire(format!(
                    "factored rank {rank} invalid for {m}x{n}"
                )));
            }
            let u = Matrix::new(m, rank, r.f64s(m * rank)?)?;
            let v = Matrix::new(rank, n, r.f64s(rank * n)?)?;
            Payload::Factored(FactorPair::new(u, v)?)
        }
        other => return Err(Error::Wire(format!("unknown mode {other}"))),
    };
    let bias_len = r.u32()? as usize;
    let bias = r.f64s(bias_len)?;
    if bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("decode_layer"));
    }
    let rank = (rank > 0).then_some(rank);
    Ok((CompressedLayer::from_parts(payload, rank, bias)?, r.pos))
}

pub fn decode_model(mut bytes: &[u8]) -> Result<CompressedModel> {
    let mut layers = Vec::new();
    while !bytes.is_empty() {
        let (layer, used) = decode_layer(bytes).map_err(|e| e.in_layer(layers.len()))?;
        layers.push(layer);
        bytes = &bytes[used..];
    }
    CompressedModel::new(layers)
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Wire(format!("truncated record at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Wire("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::compress_model;
    use crate::nn::Mlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout_is_fixed() {
        let layer = CompressedLayer::uncompressed(&crate::nn::Layer {
            weight: Matrix::from_rows(&[[1.0, 2.0]]),
            bias: vec![0.5],
        });
        let mut buf = Vec::new();
        encode_layer(&layer, &mut buf);
        assert_eq!(&buf[..4], b"FDLR");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[1, 0, 0, 0]);
        assert_eq!(&buf[10..14], &[2, 0, 0, 0]);
        assert_eq!(&buf[14..18], &[0, 0, 0, 0]);
        assert_eq!(buf[18], 0);
        assert_eq!(&buf[19..27], &1.0f64.to_le_bytes());
        assert_eq!(&buf[35..39], &[1, 0, 0, 0]);
        assert_eq!(buf.len(), 19 + 16 + 4 + 8);
        assert_eq!(buf.len(), layer_bytes(&layer));
    }

    #[test]
    fn model_round_trip_and_exact_size() {
        let model = Mlp::init(&[12, 10, 3], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for c in [
            compress_model(&model, 0.6).unwrap(),
            CompressedModel::uncompressed(&model),
        ] {
            let bytes = encode_model(&c);
            assert_eq!(bytes.len(), model_bytes(&c));
            assert_eq!(decode_model(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_layer(b"FDLX").is_err());
        let model = Mlp::init(&[4, 2], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let bytes = encode_model(&CompressedModel::uncompressed(&model));
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
    }
}
