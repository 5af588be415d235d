//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSIS" | version u32 | metadata length u32 | metadata (UTF-8 JSON)
//! tensor count u32
//! per tensor: name length u32 | name | rank u32 | extents u64 × rank
//! per tensor, same order: values as f64 × numel
//! ```
//!
//! Checkpoints store every parameter plus the adapter's running statistics;
//! the metadata carries the model configuration. Protocol messages use the
//! same container with the message envelope as metadata.

use fedsis_core::model::{HeadInput, ModelBundle, ModelConfig};
use fedsis_core::param::ParamSet;
use fedsis_core::protocol::{Message, MessageKind, RequestId};
use fedsis_core::{Real, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"FSIS";
pub const VERSION: u32 = 1;

pub type Named = (String, Tensor);

pub fn encode(metadata: &str, tensors: &[Named]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, metadata.len() as u32);
    out.extend_from_slice(metadata.as_bytes());
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Named>)> {
    let mut r = Reader::new(bytes, "FSIS file");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(LabError::format("FSIS file", format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|e| LabError::format("FSIS file", e.to_string()))?;
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| LabError::format("FSIS file", e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        headers.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64().map(|v| v as Real)).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok((metadata, tensors))
}

/// Metadata stored alongside checkpoint tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub head_input: HeadInput,
    pub mode: String,
    pub seed: u64,
    pub rounds: u32,
}

const NORMS: [&str; 2] = ["adapter.bn1", "adapter.bn2"];

fn running_names(i: usize) -> (String, String) {
    (format!("{}.running_mean", NORMS[i]), format!("{}.running_var", NORMS[i]))
}

/// Every stored tensor of a bundle, in a fixed order.
pub fn bundle_tensors(bundle: &ModelBundle) -> Vec<Named> {
    let mut out = Vec::new();
    let mut add = |set: &ParamSet| out.extend(set.iter().map(|p| (p.name.clone(), p.value.clone())));
    add(&bundle.tokenizer.params);
    bundle.encoder.groups.iter().for_each(&mut add);
    add(&bundle.adapter.params);
    add(&bundle.head.params);
    for (i, stats) in bundle.adapter.running.iter().enumerate() {
        let (mean, var) = running_names(i);
        out.push((mean, Tensor::new(&[stats.mean.len()], stats.mean.clone()).unwrap()));
        out.push((var, Tensor::new(&[stats.var.len()], stats.var.clone()).unwrap()));
    }
    out
}

pub fn encode_checkpoint(bundle: &ModelBundle, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    Ok(encode(&serde_json::to_string(meta)?, &bundle_tensors(bundle)))
}

type Stored = std::collections::BTreeMap<String, Tensor>;

fn take(stored: &mut Stored, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = stored
        .remove(name)
        .ok_or_else(|| LabError::format("checkpoint", format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(LabError::format("checkpoint", format!("{name} has shape {:?}, model expects {shape:?}", t.shape())));
    }
    Ok(t)
}

fn fill(stored: &mut Stored, set: &mut ParamSet) -> Result<()> {
    for p in set.iter_mut() {
        p.value = take(stored, &p.name, p.value.shape())?;
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ModelBundle)> {
    let (metadata, tensors) = decode(bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&metadata)?;
    // Any initialization works: every value is overwritten below.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut bundle = ModelBundle::init(meta.model, meta.head_input, &mut rng)?;
    let mut stored: Stored = tensors.into_iter().collect();
    let stored = &mut stored;
    fill(stored, &mut bundle.tokenizer.params)?;
    for g in &mut bundle.encoder.groups {
        fill(stored, g)?;
    }
    fill(stored, &mut bundle.adapter.params)?;
    fill(stored, &mut bundle.head.params)?;
    for i in 0..2 {
        let (mean, var) = running_names(i);
        let d = bundle.adapter.running[i].mean.len();
        bundle.adapter.running[i].mean = take(stored, &mean, &[d])?.into_data();
        bundle.adapter.running[i].var = take(stored, &var, &[d])?.into_data();
    }
    if let Some(extra) = stored.keys().next() {
        return Err(LabError::format("checkpoint", format!("unexpected tensor {extra}")));
    }
    Ok((meta, bundle))
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    kind: MessageKind,
    round: u32,
    client: usize,
    request: Option<RequestId>,
}

/// Wire form of a protocol message.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let env = Envelope {
        kind: msg.kind,
        round: msg.round,
        client: msg.client,
        request: msg.request,
    };
    let tensors: Vec<Named> = msg.payload.iter().enumerate().map(|(i, t)| (format!("payload.{i}"), t.clone())).collect();
    encode(&serde_json::to_string(&env).expect("envelope serializes"), &tensors)
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let (metadata, tensors) = decode(bytes)?;
    let env: Envelope = serde_json::from_str(&metadata)?;
    Ok(Message {
        kind: env.kind,
        round: env.round,
        client: env.client,
        request: env.request,
        payload: tensors.into_iter().map(|(_, t)| t).collect(),
    })
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Bounds-checked little-endian reads.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            LabError::format(self.what, format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(LabError::format(self.what, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(LabError::format(self.what, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsis_core::model::ModelConfig;

    fn bundle() -> ModelBundle {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut b = ModelBundle::init(ModelConfig::tiny(), HeadInput::PseudoClass, &mut rng).unwrap();
        b.adapter.running[1].mean[3] = 0.25;
        b.adapter.running[0].var[0] = 1.5;
        b
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            model: ModelConfig::tiny(),
            head_input: HeadInput::PseudoClass,
            mode: "fedsis".into(),
            seed: 4,
            rounds: 0,
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let b = bundle();
        let bytes = encode_checkpoint(&b, &meta()).unwrap();
        let (m, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back, b);
    }

    #[test]
    fn running_stats_are_named_tensors() {
        let names: Vec<String> = bundle_tensors(&bundle()).into_iter().map(|t| t.0).collect();
        for n in ["adapter.bn1.running_mean", "adapter.bn1.running_var", "adapter.bn2.running_mean", "adapter.bn2.running_var"] {
            assert!(names.iter().any(|x| x == n), "{n}");
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode("", &[("w".into(), t)]);
        assert_eq!(&bytes[..4], b"FSIS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // magic, version, meta len, count, name len, "w", rank, extent, 2 floats
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 4 + 1 + 4 + 8 + 16);
        assert_eq!(f64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()), -2.0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&bundle(), &meta()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn missing_tensor_is_named() {
        let b = bundle();
        let mut tensors = bundle_tensors(&b);
        tensors.retain(|t| t.0 != "head.bias");
        let bytes = encode(&serde_json::to_string(&meta()).unwrap(), &tensors);
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("head.bias"), "{err}");
    }

    #[test]
    fn messages_round_trip() {
        let msg = Message {
            kind: MessageKind::TokenGrad,
            round: 3,
            client: 1,
            request: Some(RequestId { client: 1, seq: 7 }),
            payload: vec![Tensor::from_fn(&[2, 3], |i| i as Real * 0.5)],
        };
        assert_eq!(decode_message(&encode_message(&msg)).unwrap(), msg);
    }
}
