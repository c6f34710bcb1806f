//! Binary artifacts: the frozen pretrained backbone and full training
//! checkpoints. Both share one layout — an 8-byte magic, a length-prefixed
//! JSON header, length-prefixed binary sections, and a SHA-256 trailer over
//! everything before it — so truncation and bit rot are always caught.
//!
//! Parameter payloads store every value as little-endian f64 in declaration
//! order. That round-trips f32 stores losslessly (f32 → f64 → f32 is exact),
//! which is what makes resumed training trace-equivalent to an uninterrupted
//! run.

use crate::autodiff::Scalar;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{AdamGroup, AdamState, ParamStore};
use crate::pretrain::{PretrainReport, PretrainedGenerator};
use ndarray::{ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

pub const PRETRAIN_MAGIC: &[u8; 8] = b"TVPPRE01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TVPCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct PretrainHeader {
    /// Digest over the config sections the backbone depends on.
    scope: String,
    report: PretrainReport,
}

fn push_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn write_array<T: Scalar>(buf: &mut Vec<u8>, value: &ArrayD<T>) {
    buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
    for &d in value.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in value.iter() {
        buf.extend_from_slice(&Scalar::to_f64(v).to_le_bytes());
    }
}

/// Serialize a store's values in declaration order, names included.
fn write_params<T: Scalar>(buf: &mut Vec<u8>, store: &ParamStore<T>) {
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for i in 0..store.len() {
        let (name, value) = store.by_index(i);
        push_bytes(buf, name.as_bytes());
        write_array(buf, value);
    }
}

fn write_moments<T: Scalar>(buf: &mut Vec<u8>, opt: &AdamGroup<T>) {
    buf.extend_from_slice(&opt.t().to_le_bytes());
    buf.extend_from_slice(&(opt.states().len() as u32).to_le_bytes());
    for st in opt.states() {
        let (m, v) = st.moments();
        write_array(buf, m);
        write_array(buf, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "artifact truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn array<T: Scalar>(&mut self) -> Result<ArrayD<T>> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("array rank {ndim} is implausible")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let vals: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&shape), vals)
            .map_err(|e| Error::Format(format!("array shape: {e}")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Read a parameter section into an already-declared store; names and shapes
/// must match declaration order exactly.
fn read_params_into<T: Scalar>(r: &mut Reader, store: &mut ParamStore<T>) -> Result<()> {
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::Format(format!(
            "artifact holds {count} parameters, model declares {}",
            store.len()
        )));
    }
    for i in 0..store.len() {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let value: ArrayD<T> = r.array()?;
        let (expect_name, expect) = store.by_index(i);
        if name != expect_name {
            return Err(Error::Format(format!(
                "parameter {i} is {name:?}, model declares {expect_name:?}"
            )));
        }
        if value.shape() != expect.shape() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {:?}, model declares {:?}",
                value.shape(),
                expect.shape()
            )));
        }
        *store.by_index_mut(i) = value;
    }
    Ok(())
}

fn read_moments<T: Scalar>(r: &mut Reader, store: &ParamStore<T>) -> Result<AdamGroup<T>> {
    let t = r.u64()?;
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::Format(format!(
            "artifact holds moments for {count} parameters, store has {}",
            store.len()
        )));
    }
    let mut states = Vec::with_capacity(count);
    for i in 0..count {
        let m: ArrayD<T> = r.array()?;
        let v: ArrayD<T> = r.array()?;
        let expect = store.by_index(i).1.shape();
        if m.shape() != expect || v.shape() != expect {
            return Err(Error::Format(format!(
                "moment shapes for parameter {i} do not match the store"
            )));
        }
        states.push(AdamState::from_moments(m, v));
    }
    Ok(AdamGroup::from_parts(states, t))
}

fn seal(magic: &[u8; 8], header: &impl Serialize, body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 256);
    out.extend_from_slice(magic);
    let header_json = serde_json::to_vec(header).expect("header serializes");
    push_bytes(&mut out, &header_json);
    out.extend_from_slice(&body);
    let mut h = Sha256::new();
    h.update(&out);
    let trailer: [u8; 32] = h.finalize().into();
    out.extend_from_slice(&trailer);
    out
}

fn open<H: DeserializeOwned>(magic: &[u8; 8], raw: &[u8], what: &str) -> Result<(H, usize)> {
    if raw.len() < 8 + 4 + 32 {
        return Err(Error::Format(format!("{what} is too short to be valid")));
    }
    if &raw[..8] != magic {
        return Err(Error::Format(format!(
            "{what} has wrong magic {:?}",
            &raw[..8.min(raw.len())]
        )));
    }
    let (payload, trailer) = raw.split_at(raw.len() - 32);
    let mut h = Sha256::new();
    h.update(payload);
    if trailer != h.finalize().as_slice() {
        return Err(Error::Integrity(format!(
            "{what} digest mismatch: file is corrupt or truncated"
        )));
    }
    let mut r = Reader::new(&payload[8..]);
    let header_bytes = r.bytes()?;
    let header: H = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("{what} header: {e}")))?;
    Ok((header, 8 + 4 + header_bytes.len()))
}

fn read_file(path: &Path, what: &str, run_first: &str) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(raw) => Ok(raw),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingPrerequisite {
            what: format!("{what} {}", path.display()),
            run_first: run_first.to_string(),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Write the frozen backbone (generator + encoder) with its report.
pub fn save_pretrained<T: Scalar>(
    path: &Path,
    cfg: &Config,
    pre: &PretrainedGenerator<T>,
) -> Result<()> {
    let header = PretrainHeader {
        scope: cfg.pretrain_scope_digest(),
        report: pre.report.clone(),
    };
    let mut body = Vec::new();
    write_params(&mut body, &pre.store);
    std::fs::write(path, seal(PRETRAIN_MAGIC, &header, body))?;
    Ok(())
}

/// Load a backbone saved by [`save_pretrained`], verifying that it was made
/// under the same dataset/model/pretrain configuration and that its weights
/// still hash to the digest recorded at save time.
pub fn load_pretrained<T: Scalar>(path: &Path, cfg: &Config) -> Result<PretrainedGenerator<T>> {
    let raw = read_file(path, "pretrained generator", "pretrain-gen")?;
    let (header, body_at) = open::<PretrainHeader>(PRETRAIN_MAGIC, &raw, "pretrained generator")?;
    if header.scope != cfg.pretrain_scope_digest() {
        return Err(Error::Config(
            "pretrained generator was built under a different dataset/model/pretrain \
             configuration; re-run pretrain-gen"
                .into(),
        ));
    }
    let (mut store, gen, enc) = PretrainedGenerator::<T>::declare(cfg);
    let mut r = Reader::new(&raw[body_at..raw.len() - 32]);
    read_params_into(&mut r, &mut store)?;
    if !r.done() {
        return Err(Error::Format(
            "pretrained generator has trailing bytes".into(),
        ));
    }
    store.validate_finite()?;
    if store.digest_hex() != header.report.digest {
        return Err(Error::Integrity(
            "pretrained generator weights do not hash to the recorded digest".into(),
        ));
    }
    Ok(PretrainedGenerator {
        store,
        gen,
        enc,
        report: header.report,
    })
}

/// Header of a full training checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    /// Digest of the complete resolved config.
    pub config_digest: String,
    pub variant: String,
    /// Generator updates completed.
    pub g_updates: u64,
    /// Discriminator updates completed.
    pub d_updates: u64,
    /// Combined schedule ticks completed (g + d).
    pub ticks: u64,
    /// Digest of the frozen backbone this run trains against.
    pub backbone_digest: String,
}

/// Everything a paused run needs to continue bit-for-bit.
pub struct CheckpointState<T: Scalar> {
    pub header: CheckpointHeader,
    pub model_store: ParamStore<T>,
    pub model_opt: AdamGroup<T>,
    pub disc_store: ParamStore<T>,
    pub disc_opt: AdamGroup<T>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &CheckpointState<T>) -> Result<()> {
    let mut body = Vec::new();
    write_params(&mut body, &state.model_store);
    write_moments(&mut body, &state.model_opt);
    write_params(&mut body, &state.disc_store);
    write_moments(&mut body, &state.disc_opt);
    std::fs::write(path, seal(CHECKPOINT_MAGIC, &state.header, body))?;
    Ok(())
}

/// Load a checkpoint into freshly declared stores. The caller declares the
/// stores (fixing names/shapes) and passes them in empty-initialized; values
/// and optimizer moments are overwritten from the file.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &Config,
    mut model_store: ParamStore<T>,
    mut disc_store: ParamStore<T>,
) -> Result<CheckpointState<T>> {
    let raw = read_file(path, "checkpoint", "train")?;
    let (header, body_at) = open::<CheckpointHeader>(CHECKPOINT_MAGIC, &raw, "checkpoint")?;
    if header.config_digest != cfg.digest_hex() {
        return Err(Error::Config(
            "checkpoint was written under a different configuration".into(),
        ));
    }
    let mut r = Reader::new(&raw[body_at..raw.len() - 32]);
    read_params_into(&mut r, &mut model_store)?;
    let model_opt = read_moments(&mut r, &model_store)?;
    read_params_into(&mut r, &mut disc_store)?;
    let disc_opt = read_moments(&mut r, &disc_store)?;
    if !r.done() {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    model_store.validate_finite()?;
    disc_store.validate_finite()?;
    Ok(CheckpointState {
        header,
        model_store,
        model_opt,
        disc_store,
        disc_opt,
    })
}

/// Read just the header of a checkpoint (for listings and resume decisions).
pub fn peek_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingPrerequisite {
            what: format!("checkpoint {}", path.display()),
            run_first: "train".to_string(),
        },
        _ => Error::Io(e),
    })?;
    let mut head = Vec::with_capacity(4096);
    file.take(1 << 20).read_to_end(&mut head)?;
    if head.len() < 12 || &head[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut r = Reader::new(&head[8..]);
    let header_bytes = r.bytes()?;
    serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("header: {e}")))
}
