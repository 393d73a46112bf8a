//! Binary checkpoints of trained bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "SUBNETENS\0"          10 bytes
//! version  u32
//! length   u64                    payload byte count
//! payload  length bytes
//! sha256   32 bytes               over everything before it
//! ```
//!
//! The header is checked in order (magic, version, length) and the digest
//! is verified before any payload field is interpreted. Tensors are stored
//! as 32-bit floats; masks as packed 64-bit words with a popcount per layer.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masks::{LayerBits, Mask, MaskSet};
use crate::nn::{ArchSpec, BatchNormVariant, ClassifierHead, Variant, WeightStore};
use crate::trainer::{LogRecord, Method, ModelBundle, Phase, Split, TrainConfig};
use crate::Tensor;

pub const MAGIC: &[u8; 10] = b"SUBNETENS\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = MAGIC.len() + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, v: &[f32]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.f32(x));
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.len(t.shape().len());
        t.shape().iter().for_each(|&d| self.len(d));
        t.data().iter().for_each(|&x| self.f32(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed(format!("payload ends early at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// A count, bounded by the bytes left so corrupt lengths cannot trigger
    /// huge allocations.
    fn len(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(item_size.max(1) as u64) > left {
            return Err(malformed(format!("length {n} exceeds remaining payload")));
        }
        Ok(n as usize)
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(malformed(format!("bad flag byte {b}"))),
        }
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.len(1)?;
        std::str::from_utf8(self.take(n)?).map_err(|_| malformed("string is not UTF-8"))
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.len(8)?;
        let shape = (0..rank).map(|_| self.len(0)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed("tensor shape overflows"))?;
        if count.saturating_mul(4) > self.bytes.len() - self.pos {
            return Err(malformed("tensor larger than remaining payload"));
        }
        let data = (0..count).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
}

fn method_code(m: Method) -> u8 {
    match m {
        Method::Orthogonal => 0,
        Method::McDropout => 1,
        Method::EnsembleMember => 2,
        Method::Single => 3,
    }
}

fn method_from(code: u8) -> Result<Method> {
    Ok(match code {
        0 => Method::Orthogonal,
        1 => Method::McDropout,
        2 => Method::EnsembleMember,
        3 => Method::Single,
        _ => return Err(malformed(format!("unknown method code {code}"))),
    })
}

fn phase_code(p: Phase) -> u8 {
    match p {
        Phase::Pretrain => 0,
        Phase::Prune => 1,
        Phase::Finetune => 2,
        Phase::Train => 3,
    }
}

fn phase_from(code: u8) -> Result<Phase> {
    Ok(match code {
        0 => Phase::Pretrain,
        1 => Phase::Prune,
        2 => Phase::Finetune,
        3 => Phase::Train,
        _ => return Err(malformed(format!("unknown phase code {code}"))),
    })
}

fn write_store(w: &mut Writer, store: &WeightStore<f32>) {
    w.str(&store.arch.to_string());
    w.u64(store.version);
    w.len(store.weights.len());
    store.weights.iter().for_each(|t| w.tensor(t));
    w.len(store.variants.len());
    for v in &store.variants {
        w.len(v.biases.len());
        v.biases.iter().for_each(|b| w.floats(b));
        w.len(v.batchnorms.len());
        for bn in &v.batchnorms {
            w.floats(&bn.gamma);
            w.floats(&bn.beta);
            w.floats(&bn.running_mean);
            w.floats(&bn.running_var);
            w.f32(bn.momentum);
            w.f32(bn.epsilon);
        }
    }
    w.len(store.heads.len());
    for h in &store.heads {
        w.tensor(&h.weight);
        w.floats(&h.bias);
        w.u8(h.frozen as u8);
    }
}

fn read_store(r: &mut Reader<'_>) -> Result<WeightStore<f32>> {
    let arch: ArchSpec = r.str()?.parse().map_err(|e| malformed(format!("architecture: {e}")))?;
    let version = r.u64()?;
    let n = r.len(8)?;
    let weights = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let n = r.len(16)?;
    let mut variants = Vec::with_capacity(n);
    for _ in 0..n {
        let nb = r.len(8)?;
        let biases = (0..nb).map(|_| r.floats()).collect::<Result<Vec<_>>>()?;
        let nbn = r.len(40)?;
        let mut batchnorms = Vec::with_capacity(nbn);
        for _ in 0..nbn {
            batchnorms.push(BatchNormVariant {
                gamma: r.floats()?,
                beta: r.floats()?,
                running_mean: r.floats()?,
                running_var: r.floats()?,
                momentum: r.f32()?,
                epsilon: r.f32()?,
            });
        }
        variants.push(Variant { biases, batchnorms });
    }
    let n = r.len(17)?;
    let mut heads = Vec::with_capacity(n);
    for _ in 0..n {
        heads.push(ClassifierHead {
            weight: r.tensor()?,
            bias: r.floats()?,
            frozen: r.bool()?,
        });
    }
    WeightStore::from_parts(arch, weights, variants, heads, version)
        .map_err(|e| malformed(format!("weight store: {e}")))
}

fn write_bits(w: &mut Writer, bits: &LayerBits) {
    w.len(bits.count_ones());
    let words = bits.as_raw_slice();
    w.len(words.len());
    words.iter().for_each(|&x| w.u64(x));
}

fn read_bits(r: &mut Reader<'_>, size: usize) -> Result<LayerBits> {
    let popcount = r.len(0)?;
    let n = r.len(8)?;
    if n != size.div_ceil(64) {
        return Err(malformed("mask word count does not match its layer"));
    }
    let words = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let mut bits = LayerBits::from_vec(words);
    if bits[size..].any() {
        return Err(malformed("mask has bits set past its layer"));
    }
    bits.truncate(size);
    if bits.count_ones() != popcount {
        return Err(malformed("mask popcount header disagrees with its bits"));
    }
    Ok(bits)
}

fn write_masks(w: &mut Writer, masks: &MaskSet) {
    w.len(masks.k());
    w.len(masks.layer_sizes().len());
    masks.layer_sizes().iter().for_each(|&s| w.len(s));
    for mask in masks.masks() {
        match mask {
            None => w.u8(0),
            Some(m) => {
                w.u8(1);
                m.layers().iter().for_each(|bits| write_bits(w, bits));
            }
        }
    }
}

fn read_masks(r: &mut Reader<'_>) -> Result<MaskSet> {
    let k = r.len(1)?;
    let n = r.len(8)?;
    let sizes = (0..n).map(|_| r.len(0)).collect::<Result<Vec<_>>>()?;
    let mut masks = Vec::with_capacity(k);
    for _ in 0..k {
        masks.push(if r.bool()? {
            let layers = sizes.iter().map(|&s| read_bits(r, s)).collect::<Result<Vec<_>>>()?;
            Some(Mask::from_layers(layers))
        } else {
            None
        });
    }
    MaskSet::from_parts(sizes, masks)
}

fn write_bundle(w: &mut Writer, b: &ModelBundle) {
    w.u8(method_code(b.method));
    w.str(&b.config.to_kv());
    write_store(w, &b.store);
    match &b.masks {
        None => w.u8(0),
        Some(m) => {
            w.u8(1);
            write_masks(w, m);
        }
    }
    w.len(b.logs.len());
    for log in &b.logs {
        w.u8(phase_code(log.phase));
        w.len(log.subnetwork);
        w.len(log.epoch);
        w.u8(matches!(log.split, Split::Test) as u8);
        w.f64(log.loss);
        w.f64(log.accuracy);
    }
}

fn read_bundle(r: &mut Reader<'_>) -> Result<ModelBundle> {
    let method = method_from(r.u8()?)?;
    let config = TrainConfig::from_kv(r.str()?).map_err(|e| malformed(format!("config: {e}")))?;
    let store = read_store(r)?;
    let masks = if r.bool()? { Some(read_masks(r)?) } else { None };
    if let Some(m) = &masks {
        if m.layer_sizes() != store.maskable_sizes() {
            return Err(malformed("masks do not match the weight store"));
        }
    }
    let n = r.len(34)?;
    let mut logs = Vec::with_capacity(n);
    for _ in 0..n {
        logs.push(LogRecord {
            phase: phase_from(r.u8()?)?,
            subnetwork: r.len(0)?,
            epoch: r.len(0)?,
            split: if r.bool()? { Split::Test } else { Split::Train },
            loss: r.f64()?,
            accuracy: r.f64()?,
        });
    }
    Ok(ModelBundle {
        method,
        store,
        masks,
        config,
        logs,
    })
}

/// Serialize bundles into one checkpoint image.
pub fn encode(bundles: &[ModelBundle]) -> Vec<u8> {
    let mut payload = Writer::default();
    payload.len(bundles.len());
    bundles.iter().for_each(|b| write_bundle(&mut payload, b));

    let mut out = Vec::with_capacity(HEADER_LEN + payload.buf.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.buf.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload.buf);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parse a checkpoint image produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Vec<ModelBundle>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(malformed("header is truncated"));
    }
    let version = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let length = u64::from_le_bytes(bytes[14..22].try_into().expect("8 bytes"));
    let expected = (HEADER_LEN + DIGEST_LEN) as u64 + length;
    if bytes.len() as u64 != expected {
        return Err(malformed(format!(
            "file is {} bytes, header promises {expected}",
            bytes.len()
        )));
    }
    let body_end = bytes.len() - DIGEST_LEN;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(Error::ChecksumMismatch);
    }

    let mut r = Reader {
        bytes: &bytes[HEADER_LEN..body_end],
        pos: 0,
    };
    let n = r.len(1)?;
    let bundles = (0..n).map(|_| read_bundle(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.pos != r.bytes.len() {
        return Err(malformed("trailing bytes after the last bundle"));
    }
    Ok(bundles)
}

/// Write atomically: the file appears complete or not at all.
pub fn save(path: impl AsRef<Path>, bundles: &[ModelBundle]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(bundles);
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<ModelBundle>> {
    decode(&fs::read(path)?)
}
