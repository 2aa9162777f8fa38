//! Binary checkpoint format.
//!
//! ```text
//! "AFCN" | u32 version=1 | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | rank x u32 extents | f32 values (row-major)
//! u32 CRC32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"AFCN";
const VERSION: u32 = 1;

pub fn encode_tensors<T: Real>(tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos as u64;
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes before checksum"));
    }
    let crc = crc32fast::hash(body);
    if crc != stored {
        return Err(Error::format(
            body.len() as u64,
            format!("checksum mismatch (stored {stored:08x}, computed {crc:08x})"),
        ));
    }
    Ok(out)
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    crate::dsp::write_atomically(path, &encode_tensors(&model.named_params()))
}

/// Builds a model for `cfg` and fills every parameter from the checkpoint.
/// Any missing, unknown or mis-shaped tensor is an error.
pub fn load_checkpoint<T: Real>(cfg: &ModelConfig, path: &Path) -> Result<Model<T>> {
    let tensors = read_tensor_file(path)?;
    let mut model = build_model::<T>(cfg, 0)?;
    let slots: HashMap<String, (usize, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .enumerate()
        .map(|(i, (n, t))| (n, (i, t.shape().to_vec())))
        .collect();
    let mut seen = vec![false; slots.len()];
    let mut problems = Vec::new();
    for (name, t) in tensors {
        match slots.get(&name) {
            None => problems.push(format!("unknown tensor {name}")),
            Some((i, shape)) if shape.as_slice() != t.shape() => {
                seen[*i] = true;
                problems.push(format!("{name}: checkpoint {:?}, model {shape:?}", t.shape()));
            }
            Some((i, _)) => {
                seen[*i] = true;
                model.set_param(*i, t.cast());
            }
        }
    }
    for (name, _) in model.named_params().iter().zip(&seen).filter(|(_, s)| !**s).map(|(p, _)| p) {
        problems.push(format!("missing tensor {name}"));
    }
    if !problems.is_empty() {
        return Err(Error::format(0, problems.join("; ")));
    }
    Ok(model)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub replaced: Vec<String>,
    /// 3-channel conv1 kernels summed down to one input channel.
    pub reduced: Vec<String>,
    pub skipped: Vec<String>,
}

/// Copies encoder tensors from a checkpoint-format file into `model`.
///
/// Only `encoder.*` names are considered; attention and classifier keep their
/// fresh initialization. A `[O, 3, k, k]` source for a `[O, 1, k, k]` target is
/// summed over its input channels unless `strict`; any other shape mismatch is
/// skipped, or rejected when `strict`.
pub fn import_encoder<T: Real>(path: &Path, model: &mut Model<T>, strict: bool) -> Result<ImportReport> {
    let tensors = read_tensor_file(path)?;
    let slots: HashMap<String, (usize, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .enumerate()
        .map(|(i, (n, t))| (n, (i, t.shape().to_vec())))
        .collect();
    let mut report = ImportReport::default();
    let mut mismatches = Vec::new();
    let mut updates = Vec::new();
    for (name, src) in tensors {
        if !name.starts_with("encoder.") {
            continue;
        }
        let Some((i, want)) = slots.get(&name) else {
            report.skipped.push(format!("{name} (not in model)"));
            continue;
        };
        if src.shape() == want.as_slice() {
            updates.push((*i, src.cast()));
            report.replaced.push(name);
        } else if !strict && is_rgb_to_mono(src.shape(), want) {
            updates.push((*i, sum_input_channels(&src).cast()));
            report.reduced.push(name);
        } else {
            let msg = format!("{name}: source {:?}, model {want:?}", src.shape());
            if strict {
                mismatches.push(msg);
            } else {
                report.skipped.push(msg);
            }
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Import(mismatches));
    }
    for (i, t) in updates {
        model.set_param(i, t);
    }
    Ok(report)
}

fn is_rgb_to_mono(src: &[usize], dst: &[usize]) -> bool {
    src.len() == 4 && dst.len() == 4 && src[1] == 3 && dst[1] == 1 && src[0] == dst[0] && src[2..] == dst[2..]
}

fn sum_input_channels(src: &Tensor<f32>) -> Tensor<f32> {
    let [o, c, kh, kw] = src.shape().try_into().unwrap();
    let plane = kh * kw;
    let d = src.data();
    Tensor::from_fn(&[o, 1, kh, kw], |i| {
        let (out, at) = (i / plane, i % plane);
        (0..c).map(|ch| d[(out * c + ch) * plane + at]).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Stack;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stack: Stack::alexnet_fine(),
            input_bins: 40,
            channel_scale: 0.125,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = build_model::<f32>(&tiny(), 4).unwrap();
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint::<f32>(&tiny(), &p).unwrap();
        for ((na, a), (nb, b)) in m.named_params().iter().zip(back.named_params()) {
            assert_eq!(na, &nb);
            let bits_a: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn bad_magic_and_checksum() {
        let m = build_model::<f32>(&tiny(), 1).unwrap();
        let mut bytes = encode_tensors(&m.named_params());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensors(&bad).unwrap_err().to_string().contains("bad magic"));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(decode_tensors(&bytes).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn truncation_and_version() {
        let m = build_model::<f32>(&tiny(), 1).unwrap();
        let bytes = encode_tensors(&m.named_params());
        let err = decode_tensors(&bytes[..bytes.len() - 100]).unwrap_err().to_string();
        assert!(err.contains("truncated") || err.contains("checksum"), "{err}");
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_tensors(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn missing_and_unknown_tensors_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("partial.ckpt");
        let m = build_model::<f32>(&tiny(), 1).unwrap();
        let params: Vec<_> = m
            .named_params()
            .into_iter()
            .filter(|(n, _)| n != "classifier.weight")
            .collect();
        fs::write(&p, encode_tensors(&params)).unwrap();
        let err = load_checkpoint::<f32>(&tiny(), &p).unwrap_err().to_string();
        assert!(err.contains("missing tensor classifier.weight"), "{err}");

        let extra = Tensor::<f32>::zeros(&[2]);
        let mut params = m.named_params();
        params.push(("decoder.x".into(), &extra));
        fs::write(&p, encode_tensors(&params)).unwrap();
        let err = load_checkpoint::<f32>(&tiny(), &p).unwrap_err().to_string();
        assert!(err.contains("unknown tensor decoder.x"), "{err}");
    }

    #[test]
    fn shape_mismatch_lists_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wide.ckpt");
        let wide = ModelConfig {
            channel_scale: 0.25,
            ..tiny()
        };
        save_checkpoint(&build_model::<f32>(&wide, 1).unwrap(), &p).unwrap();
        let err = load_checkpoint::<f32>(&tiny(), &p).unwrap_err().to_string();
        assert!(err.contains("encoder.conv1.kernels") && err.contains("attention.w"), "{err}");
    }

    #[test]
    fn import_replaces_encoder_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pre.ckpt");
        let source = build_model::<f32>(&tiny(), 77).unwrap();
        save_checkpoint(&source, &p).unwrap();
        let fresh = build_model::<f32>(&tiny(), 5).unwrap();
        let mut target = fresh.clone();
        let report = import_encoder(&p, &mut target, true).unwrap();
        assert_eq!(report.replaced.len(), 10);
        for ((name, t), (_, s)) in target.named_params().iter().zip(source.named_params()) {
            if name.starts_with("encoder.") {
                assert_eq!(*t, s);
            }
        }
        assert_eq!(target.attention, fresh.attention);
        assert_eq!(target.classifier, fresh.classifier);
    }

    #[test]
    fn import_reduces_rgb_conv1() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.ckpt");
        let rgb_cfg = ModelConfig {
            input_channels: 3,
            ..tiny()
        };
        let rgb = build_model::<f32>(&rgb_cfg, 3).unwrap();
        save_checkpoint(&rgb, &p).unwrap();

        let mut mono = build_model::<f32>(&tiny(), 8).unwrap();
        let err = import_encoder(&p, &mut mono.clone(), true).unwrap_err();
        assert!(matches!(err, Error::Import(ref v) if v[0].contains("encoder.conv1.kernels")));

        let report = import_encoder(&p, &mut mono, false).unwrap();
        assert_eq!(report.reduced, vec!["encoder.conv1.kernels".to_string()]);
        let src = rgb.named_params()[0].1.clone();
        let got = mono.named_params()[0].1.clone();
        let [o, _, kh, kw] = src.shape().try_into().unwrap();
        for out in 0..o {
            for y in 0..kh {
                for x in 0..kw {
                    let want: f32 = (0..3).map(|c| src.get(&[out, c, y, x]).unwrap()).sum();
                    assert_eq!(got.get(&[out, 0, y, x]).unwrap(), want);
                }
            }
        }
    }
}
