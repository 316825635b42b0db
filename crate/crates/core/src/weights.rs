//! Bit-exact binary weight container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic   b"LMDW"
//! version u16
//! count   u32
//! entry*  name_len u16, name bytes, dtype u8 (0 f32 / 1 i8), rank u8,
//!         dims u32 * rank, scale f64, zero_point i32,
//!         offset u64, length u64
//! payload raw tensor bytes, densely packed in entry order
//! ```
//!
//! Zero-length entries are legal and carry metadata only; activation
//! quantization parameters ride in the `scale`/`zero_point` fields of such
//! entries under `aq.in.<layer>` / `aq.out.<layer>` names.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::DType;

pub const MAGIC: &[u8; 4] = b"LMDW";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct WeightEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub scale: f64,
    pub zero_point: i32,
    pub payload: Vec<u8>,
}

impl WeightEntry {
    pub fn f32_tensor(name: &str, dims: Vec<usize>, values: &[f64]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * 4);
        for &v in values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        WeightEntry {
            name: name.to_string(),
            dtype: DType::F32,
            dims,
            scale: 1.0,
            zero_point: 0,
            payload,
        }
    }

    pub fn i8_tensor(name: &str, dims: Vec<usize>, data: &[i8], scale: f64, zero_point: i32) -> Self {
        WeightEntry {
            name: name.to_string(),
            dtype: DType::I8,
            dims,
            scale,
            zero_point,
            payload: data.iter().map(|&v| v as u8).collect(),
        }
    }

    /// Metadata-only entry (zero payload).
    pub fn marker(name: &str, scale: f64, zero_point: i32) -> Self {
        WeightEntry {
            name: name.to_string(),
            dtype: DType::F32,
            dims: vec![],
            scale,
            zero_point,
            payload: vec![],
        }
    }

    /// Rank-0 entries are metadata markers and carry no elements.
    pub fn element_count(&self) -> usize {
        if self.dims.is_empty() {
            0
        } else {
            self.dims.iter().product()
        }
    }

    pub fn f32_values(&self) -> Result<Vec<f64>> {
        if self.dtype != DType::F32 {
            return Err(Error::NamedTensor(format!("{} is not an f32 tensor", self.name)));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn i8_values(&self) -> Result<Vec<i8>> {
        if self.dtype != DType::I8 {
            return Err(Error::NamedTensor(format!("{} is not an i8 tensor", self.name)));
        }
        Ok(self.payload.iter().map(|&b| b as i8).collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct WeightFile {
    pub entries: Vec<WeightEntry>,
}

impl WeightFile {
    pub fn find(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());

        // Header size must be known before offsets can be fixed; measure it
        // with placeholder offsets first.
        let entry_meta_len: usize = self
            .entries
            .iter()
            .map(|e| 2 + e.name.len() + 1 + 1 + 4 * e.dims.len() + 8 + 4 + 8 + 8)
            .sum();
        let header_len = header.len() + entry_meta_len;

        let mut offset = header_len as u64;
        for e in &self.entries {
            header.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            header.extend_from_slice(e.name.as_bytes());
            header.push(match e.dtype {
                DType::F32 => 0,
                DType::I8 => 1,
                DType::F64 => unreachable!("container stores f32 or i8"),
            });
            header.push(e.dims.len() as u8);
            for &d in &e.dims {
                header.extend_from_slice(&(d as u32).to_le_bytes());
            }
            header.extend_from_slice(&e.scale.to_le_bytes());
            header.extend_from_slice(&e.zero_point.to_le_bytes());
            header.extend_from_slice(&offset.to_le_bytes());
            header.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
            offset += e.payload.len() as u64;
        }
        debug_assert_eq!(header.len(), header_len);
        let mut out = header;
        for e in &self.entries {
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        struct Cursor<'a> {
            buf: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.buf.len() {
                    return Err(Error::Format(format!(
                        "truncated weight file at byte {} (need {n} more)",
                        self.pos
                    )));
                }
                let s = &self.buf[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn u16(&mut self) -> Result<u16> {
                Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn u64(&mut self) -> Result<u64> {
                Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
            fn i32(&mut self) -> Result<i32> {
                Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn f64(&mut self) -> Result<f64> {
                Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
            fn u8(&mut self) -> Result<u8> {
                Ok(self.take(1)?[0])
            }
        }

        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a weight file".into()));
        }
        let version = c.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported weight file version {version}, expected {VERSION}"
            )));
        }
        let count = c.u32()? as usize;
        let mut metas = Vec::with_capacity(count);
        let mut names = BTreeSet::new();
        for _ in 0..count {
            let name_len = c.u16()? as usize;
            let name = String::from_utf8(c.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            let dtype = match c.u8()? {
                0 => DType::F32,
                1 => DType::I8,
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            let rank = c.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(c.u32()? as usize);
            }
            let scale = c.f64()?;
            let zero_point = c.i32()?;
            let offset = c.u64()? as usize;
            let length = c.u64()? as usize;
            metas.push((name, dtype, dims, scale, zero_point, offset, length));
        }
        let header_len = c.pos;

        // Payload accounting: offsets in bounds, non-overlapping, and dense.
        let mut total: usize = 0;
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for (name, dtype, dims, _, _, offset, length) in &metas {
            let numel: usize = if dims.is_empty() { 0 } else { dims.iter().product() };
            let want = numel * if *dtype == DType::F32 { 4 } else { 1 };
            if want != *length {
                return Err(Error::Format(format!(
                    "entry {name}: {numel} elements need {want} bytes, header says {length}"
                )));
            }
            if offset < &header_len || offset + length > bytes.len() {
                return Err(Error::Format(format!("entry {name}: payload outside file")));
            }
            if *length > 0 {
                spans.push((*offset, *length));
            }
            total += length;
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err(Error::Format("overlapping payload spans".into()));
            }
        }
        if header_len + total != bytes.len() {
            return Err(Error::Format(format!(
                "file size {} does not equal header {} + payload {}",
                bytes.len(),
                header_len,
                total
            )));
        }

        let entries = metas
            .into_iter()
            .map(|(name, dtype, dims, scale, zero_point, offset, length)| WeightEntry {
                name,
                dtype,
                dims,
                scale,
                zero_point,
                payload: bytes[offset..offset + length].to_vec(),
            })
            .collect();
        Ok(WeightFile { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Serialize every parameter as an f32 tensor.
pub fn save_params(params: &ParamSet) -> WeightFile {
    let entries = params
        .entries()
        .iter()
        .map(|e| WeightEntry::f32_tensor(&e.name, e.tensor.shape().to_vec(), e.tensor.data()))
        .collect();
    WeightFile { entries }
}

/// Restore parameters from f32 entries. The tensor table must match the
/// parameter set exactly; mismatches list the offending names.
pub fn load_params(wf: &WeightFile, params: &mut ParamSet) -> Result<()> {
    let missing: Vec<&str> = params
        .entries()
        .iter()
        .filter(|p| wf.find(&p.name).is_none())
        .map(|p| p.name.as_str())
        .collect();
    let extra: Vec<&str> = wf
        .entries
        .iter()
        .filter(|e| !e.name.starts_with("aq.") && params.find(&e.name).is_none())
        .map(|e| e.name.as_str())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::NamedTensor(format!(
            "weight table mismatch; missing: [{}], extra: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for p in params.entries_mut() {
        let e = wf.find(&p.name).expect("checked above");
        if e.dims != p.tensor.shape() {
            return Err(Error::NamedTensor(format!(
                "{}: file shape {:?} vs model shape {:?}",
                p.name,
                e.dims,
                p.tensor.shape()
            )));
        }
        let values = match e.dtype {
            DType::F32 => e.f32_values()?,
            DType::I8 => {
                let qp = crate::quant::QuantParams::new(e.scale, e.zero_point)?;
                e.i8_values()?.iter().map(|&q| qp.dequantize_value(q)).collect()
            }
            DType::F64 => unreachable!(),
        };
        let mut t = std::mem::replace(&mut p.tensor, crate::tensor::Tensor::zeros(vec![1]));
        t.data_mut().copy_from_slice(&values);
        p.tensor = t.with_dtype(DType::F32)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn sample_params() -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(71);
        ps.add("a.w", Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng), ParamKind::LinearWeight);
        ps.add("a.b", Tensor::uniform(vec![4], -1.0, 1.0, &mut rng), ParamKind::Bias);
        ps.add("n.g", Tensor::full(vec![4], 1.0), ParamKind::Norm);
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = sample_params();
        let wf = save_params(&ps);
        let bytes = wf.to_bytes();
        let wf2 = WeightFile::from_bytes(&bytes).unwrap();
        let mut ps2 = sample_params();
        load_params(&wf2, &mut ps2).unwrap();
        for (a, b) in ps.entries().iter().zip(ps2.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        // Re-serializing the loaded set reproduces the same bytes.
        assert_eq!(save_params(&ps2).to_bytes(), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let wf = save_params(&sample_params());
        let bytes = wf.to_bytes();
        for cut in [3, 8, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                WeightFile::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut} accepted"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let wf = save_params(&sample_params());
        let mut bytes = wf.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = wf.to_bytes();
        bytes[4] = 99;
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn table_mismatch_lists_names() {
        let ps = sample_params();
        let mut wf = save_params(&ps);
        wf.entries.remove(1);
        wf.entries.push(WeightEntry::f32_tensor("ghost", vec![1], &[0.0]));
        let mut ps2 = sample_params();
        let err = load_params(&wf, &mut ps2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.b"), "{msg}");
        assert!(msg.contains("ghost"), "{msg}");
    }

    #[test]
    fn shape_mismatch_named() {
        let ps = sample_params();
        let mut wf = save_params(&ps);
        wf.entries[0].dims = vec![4, 3];
        let mut ps2 = sample_params();
        let err = load_params(&wf, &mut ps2).unwrap_err();
        assert!(err.to_string().contains("a.w"));
    }

    #[test]
    fn f32_file_size_is_four_bytes_per_param_plus_header() {
        let ps = sample_params();
        let wf = save_params(&ps);
        let bytes = wf.to_bytes();
        let payload: usize = 4 * ps.param_count();
        let header = bytes.len() - payload;
        assert!(header > 0 && header < 200, "header = {header}");
        assert_eq!(bytes.len(), header + 4 * ps.param_count());
    }

    #[test]
    fn marker_entries_round_trip() {
        let mut wf = save_params(&sample_params());
        wf.entries.push(WeightEntry::marker("aq.in.a", 0.125, -3));
        let bytes = wf.to_bytes();
        let wf2 = WeightFile::from_bytes(&bytes).unwrap();
        let m = wf2.find("aq.in.a").unwrap();
        assert_eq!(m.scale, 0.125);
        assert_eq!(m.zero_point, -3);
        assert!(m.payload.is_empty());
        // Markers are ignored by the loader.
        let mut ps2 = sample_params();
        load_params(&wf2, &mut ps2).unwrap();
    }

    #[test]
    fn overlapping_spans_rejected() {
        // Hand-crafted file: two one-float entries whose offsets collide,
        // with enough trailing payload that the size accounting still adds
        // up. Only the overlap check can reject it.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        let entry_meta = 2 + 1 + 1 + 1 + 4 + 8 + 4 + 8 + 8; // one-char name, rank 1
        let header_len = bytes.len() + 2 * entry_meta;
        for name in [b"p", b"q"] {
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.extend_from_slice(name.as_slice());
            bytes.push(0); // f32
            bytes.push(1); // rank
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&1.0f64.to_le_bytes());
            bytes.extend_from_slice(&0i32.to_le_bytes());
            bytes.extend_from_slice(&(header_len as u64).to_le_bytes()); // same offset
            bytes.extend_from_slice(&4u64.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 8]);
        let err = WeightFile::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }
}
