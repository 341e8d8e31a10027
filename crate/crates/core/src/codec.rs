//! Wire format for client updates and uplink bit accounting.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FQNT" | version u8 | strategy u8 | layer_count u16
//! per layer:
//!   bits u8 | count u32
//!   bits in 1..=32: scale f32 | [msqe f32] | indices, LSB-first, ceil(count*bits/8) bytes
//!   bits == 0:      [msqe f32] | count raw f32 values (full-precision baseline)
//! [dataset_size u32]                      FedAvg only
//! side_band_len u32 | side_band_len f32   biases and batch-norm tensors
//! client_id u32
//! ```
//!
//! `msqe` fields are present only for the inverse-msqe strategy.

use crate::error::{Error, Result};
use crate::federation::{AggregationStrategy, BitWidthConfig, ClientUpdate, LayerPayload, Weighting};
use crate::nn::Architecture;
use crate::quant::{QuantizedTensor, MAX_BITS, MIN_BITS};

pub const MAGIC: &[u8; 4] = b"FQNT";
pub const VERSION: u8 = 1;
/// Bytes before the first layer.
pub const HEADER_LEN: usize = 8;
/// `bits` value marking a full-precision layer.
pub const FULL_PRECISION_BITS: u8 = 0;

/// Bit-exact size of the indices of `count` elements at `bits` each.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * usize::from(bits)).div_ceil(8)
}

/// Append `values`, each `bits` wide, LSB-first.
pub fn pack_indices(values: &[u32], bits: u8, out: &mut Vec<u8>) {
    let bits = u32::from(bits);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    out.reserve(packed_len(values.len(), bits as u8));
    for &v in values {
        acc |= u64::from(v) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

/// Inverse of [`pack_indices`]; `bytes` must be exactly `packed_len` long.
pub fn unpack_indices(bytes: &[u8], count: usize, bits: u8) -> Vec<u32> {
    let mask: u64 = if bits == 32 {
        u64::from(u32::MAX)
    } else {
        (1u64 << bits) - 1
    };
    let bits = u32::from(bits);
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut src = bytes.iter();
    for _ in 0..count {
        while filled < bits {
            acc |= u64::from(*src.next().expect("length checked by caller")) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits;
    }
    out
}

fn strategy_byte(s: AggregationStrategy) -> u8 {
    match s {
        AggregationStrategy::FedAvg => 0,
        AggregationStrategy::InverseMsqe => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_err(msg: impl Into<String>) -> Error {
    Error::Encode(msg.into())
}

fn check_quantized(layer: usize, q: &QuantizedTensor) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&q.bits) {
        return Err(encode_err(format!("layer {layer}: {} bits out of range", q.bits)));
    }
    let max = if q.bits == 32 {
        u64::from(u32::MAX)
    } else {
        (1u64 << q.bits) - 1
    };
    if let Some(k) = q.levels.iter().find(|&&k| u64::from(k) > max) {
        return Err(encode_err(format!(
            "layer {layer}: level index {k} out of range for {} bits",
            q.bits
        )));
    }
    let s32 = q.scale as f32;
    if !(q.scale.is_finite() && q.scale > 0.0) || f64::from(s32) != q.scale {
        return Err(encode_err(format!(
            "layer {layer}: scale {} is not a positive f32",
            q.scale
        )));
    }
    Ok(())
}

/// Serialize one update.
pub fn encode(update: &ClientUpdate) -> Result<Vec<u8>> {
    let layer_count = u16::try_from(update.layers.len())
        .map_err(|_| encode_err(format!("{} layers exceed u16", update.layers.len())))?;
    let msqe = update.msqe();
    if let Some(e) = msqe {
        if e.len() != update.layers.len() {
            return Err(encode_err(format!(
                "{} msqe values for {} layers",
                e.len(),
                update.layers.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(encoded_len(update));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(strategy_byte(update.strategy()));
    out.extend_from_slice(&layer_count.to_le_bytes());
    for (i, layer) in update.layers.iter().enumerate() {
        let count = u32::try_from(layer.count())
            .map_err(|_| encode_err(format!("layer {i}: count exceeds u32")))?;
        match layer {
            LayerPayload::Quantized(q) => {
                check_quantized(i, q)?;
                out.push(q.bits);
                put_u32(&mut out, count);
                put_f32(&mut out, q.scale as f32);
                if let Some(e) = msqe {
                    put_f32(&mut out, e[i]);
                }
                pack_indices(&q.levels, q.bits, &mut out);
            }
            LayerPayload::Full(values) => {
                out.push(FULL_PRECISION_BITS);
                put_u32(&mut out, count);
                if let Some(e) = msqe {
                    put_f32(&mut out, e[i]);
                }
                for &v in values {
                    put_f32(&mut out, v);
                }
            }
        }
    }
    if let Weighting::DatasetSize(n) = update.weighting {
        put_u32(&mut out, n);
    }
    let side = u32::try_from(update.side_band.len())
        .map_err(|_| encode_err("side band exceeds u32"))?;
    put_u32(&mut out, side);
    for &v in &update.side_band {
        put_f32(&mut out, v);
    }
    put_u32(&mut out, update.client_id);
    Ok(out)
}

/// Exact length [`encode`] produces for a valid update.
pub fn encoded_len(update: &ClientUpdate) -> usize {
    let msqe = usize::from(update.msqe().is_some()) * 4;
    let layers: usize = update
        .layers
        .iter()
        .map(|l| match l {
            LayerPayload::Quantized(q) => 1 + 4 + 4 + msqe + packed_len(q.count(), q.bits),
            LayerPayload::Full(v) => 1 + 4 + msqe + 4 * v.len(),
        })
        .sum();
    let size = usize::from(update.dataset_size().is_some()) * 4;
    HEADER_LEN + layers + size + 4 + 4 * update.side_band.len() + 4
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptPayload(format!("truncated at byte {} reading {what}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::CorruptPayload(format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptPayload(msg.into())
}

/// Parse bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<ClientUpdate> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let has_msqe = match r.u8("strategy")? {
        0 => false,
        1 => true,
        other => return Err(corrupt(format!("unknown strategy {other}"))),
    };
    let layer_count = r.u16("layer count")?;
    let mut layers = Vec::with_capacity(usize::from(layer_count));
    let mut msqe = Vec::new();
    for i in 0..layer_count {
        let bits = r.u8("bits")?;
        let count = r.u32("count")? as usize;
        if bits == FULL_PRECISION_BITS {
            if has_msqe {
                msqe.push(r.f32("msqe")?);
            }
            layers.push(LayerPayload::Full(r.f32s(count, "weights")?));
            continue;
        }
        if bits > MAX_BITS {
            return Err(corrupt(format!("layer {i}: {bits} bits")));
        }
        let scale = r.f32("scale")?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(corrupt(format!("layer {i}: scale {scale}")));
        }
        if has_msqe {
            msqe.push(r.f32("msqe")?);
        }
        let packed = r.take(
            count
                .checked_mul(usize::from(bits))
                .ok_or_else(|| corrupt("count overflows"))?
                .div_ceil(8),
            "indices",
        )?;
        layers.push(LayerPayload::Quantized(QuantizedTensor {
            levels: unpack_indices(packed, count, bits),
            scale: f64::from(scale),
            bits,
        }));
    }
    let weighting = if has_msqe {
        Weighting::Msqe(msqe)
    } else {
        Weighting::DatasetSize(r.u32("dataset size")?)
    };
    let side_len = r.u32("side band length")? as usize;
    let side_band = r.f32s(side_len, "side band")?;
    let client_id = r.u32("client id")?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(ClientUpdate {
        client_id,
        layers,
        weighting,
        side_band,
    })
}

/// Uplink cost of the quantizable weights and their thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitBudget {
    pub quantized_bits: u64,
    pub full_precision_bits: u64,
    pub savings_ratio: f64,
}

/// Bits for one client's weights under `bits`: `Σ count·bits` plus 32 per
/// threshold, plus 32 per msqe value when the strategy sends them.
pub fn bit_budget(
    architecture: Architecture,
    bits: &BitWidthConfig,
    strategy: AggregationStrategy,
) -> BitBudget {
    let counts = architecture.quantizable_counts();
    let layers = counts.len() as u64;
    let weights: u64 = counts
        .iter()
        .zip(bits.bits())
        .map(|(&c, &b)| c as u64 * u64::from(b))
        .sum();
    let per_layer = match strategy {
        AggregationStrategy::FedAvg => 32,
        AggregationStrategy::InverseMsqe => 64,
    };
    let quantized_bits = weights + layers * per_layer;
    let full_precision_bits = architecture.total_quantizable_weights() as u64 * 32;
    BitBudget {
        quantized_bits,
        full_precision_bits,
        savings_ratio: full_precision_bits as f64 / quantized_bits as f64,
    }
}

/// Savings ratios as printed in the published table, where they differ from
/// what the row expressions evaluate to.
pub const PUBLISHED_RATIOS: &[(&str, f64)] = &[("4-2-2-4", 15.53), ("2-1-1-2", 31.12)];

/// Weight total printed in the published table next to the layer counts
/// that actually sum to 81848.
pub const PUBLISHED_TOTAL_WEIGHTS: u64 = 80848;

/// Published ratio for `bits` when it disagrees with [`bit_budget`].
pub fn published_ratio(bits: &BitWidthConfig) -> Option<f64> {
    let key = bits.to_string();
    PUBLISHED_RATIOS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|&(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(levels: Vec<u32>, bits: u8, weighting: Weighting) -> ClientUpdate {
        ClientUpdate {
            client_id: 7,
            layers: vec![LayerPayload::Quantized(QuantizedTensor {
                levels,
                scale: 0.5,
                bits,
            })],
            weighting,
            side_band: vec![1.5, -2.0],
        }
    }

    #[test]
    fn packing_example() {
        let mut out = Vec::new();
        pack_indices(&[3, 0, 1], 2, &mut out);
        assert_eq!(out, vec![0b0001_0011]);
        assert_eq!(unpack_indices(&out, 3, 2), vec![3, 0, 1]);
    }

    #[test]
    fn packing_wide_and_odd() {
        for bits in [1u8, 3, 7, 13, 31, 32] {
            let max = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
            let v: Vec<u32> = (0..37u32).map(|i| i.wrapping_mul(2654435761) & max).collect();
            let mut out = Vec::new();
            pack_indices(&v, bits, &mut out);
            assert_eq!(out.len(), packed_len(v.len(), bits));
            assert_eq!(unpack_indices(&out, v.len(), bits), v);
        }
    }

    #[test]
    fn golden_fedavg_bytes() {
        let u = one_layer(vec![3, 0, 1], 2, Weighting::DatasetSize(600));
        let bytes = encode(&u).unwrap();
        let mut expect = b"FQNT".to_vec();
        expect.extend([1, 0, 1, 0]);
        expect.extend([2, 3, 0, 0, 0]);
        expect.extend(0.5f32.to_le_bytes());
        expect.push(0b0001_0011);
        expect.extend(600u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.5f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        expect.extend(7u32.to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(bytes.len(), encoded_len(&u));
        assert_eq!(decode(&bytes).unwrap(), u);
    }

    #[test]
    fn golden_msqe_bytes_have_no_size() {
        let u = one_layer(vec![3, 0, 1], 2, Weighting::Msqe(vec![0.25]));
        let bytes = encode(&u).unwrap();
        let mut expect = b"FQNT".to_vec();
        expect.extend([1, 1, 1, 0]);
        expect.extend([2, 3, 0, 0, 0]);
        expect.extend(0.5f32.to_le_bytes());
        expect.extend(0.25f32.to_le_bytes());
        expect.push(0b0001_0011);
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.5f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        expect.extend(7u32.to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(decode(&bytes).unwrap(), u);
    }

    #[test]
    fn encode_rejects_bad_index() {
        let u = one_layer(vec![4], 2, Weighting::DatasetSize(1));
        assert!(matches!(encode(&u), Err(Error::Encode(_))));
    }

    #[test]
    fn encode_rejects_unrepresentable_scale() {
        let mut u = one_layer(vec![1], 2, Weighting::DatasetSize(1));
        if let LayerPayload::Quantized(q) = &mut u.layers[0] {
            q.scale = 0.1;
        }
        assert!(matches!(encode(&u), Err(Error::Encode(_))));
    }

    #[test]
    fn decode_rejects_corruption() {
        let bytes = encode(&one_layer(vec![3, 0, 1], 2, Weighting::DatasetSize(1))).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::CorruptPayload(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::CorruptPayload(_))));
        for cut in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::CorruptPayload(_))));
        }
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn full_precision_layer_round_trip() {
        let u = ClientUpdate {
            client_id: 1,
            layers: vec![LayerPayload::Full(vec![1.0, -0.5, f32::MIN_POSITIVE])],
            weighting: Weighting::Msqe(vec![0.0]),
            side_band: vec![],
        };
        let bytes = encode(&u).unwrap();
        assert_eq!(bytes.len(), encoded_len(&u));
        assert_eq!(decode(&bytes).unwrap(), u);
    }

    #[test]
    fn budget_rows() {
        let arch = Architecture::MnistCnn;
        let b = |s: &str| bit_budget(arch, &s.parse().unwrap(), AggregationStrategy::FedAvg);
        assert_eq!(b("2-2-2-2").quantized_bits, 163_824);
        assert_eq!(b("4-2-2-4").quantized_bits, 166_112);
        assert_eq!(b("4-4-2-4").quantized_bits, 170_720);
        assert_eq!(b("2-2-2-2").full_precision_bits, 2_619_136);
        assert_eq!(b("32-32-32-32").quantized_bits, 2_619_264);
        let msqe = bit_budget(arch, &"2-2-2-2".parse().unwrap(), AggregationStrategy::InverseMsqe);
        assert_eq!(msqe.quantized_bits, 163_824 + 128);
    }
}
