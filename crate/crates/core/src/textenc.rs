//! Caption encoder: maps token ids to word-level embeddings u_1..u_M and a
//! sentence summary u_cls (the encoder output at position 0).
//!
//! The encoder is a trainable token table plus learned positional embeddings,
//! optionally followed by one or two single-head self-attention blocks
//! (residual, no layer norm — the blocks are small enough that normalization
//! buys nothing at this scale). Padded positions are zeroed after encoding so
//! they contribute nothing downstream. An import path accepts externally
//! computed embeddings in the same (u, u_cls, mask) contract, for wiring in a
//! full pretrained language model where one is available.

use crate::autodiff::{Scalar, Tape, Var};
use crate::dataset::TokenizedCaption;
use crate::error::{Error, Result};
use crate::nn::{uniform_init, Binding, LinearP, ParamStore, PId};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use std::io::{Read as _, Write as _};
use std::path::Path;

#[derive(Debug, Clone, Copy)]
struct AttnBlock {
    wq: LinearP,
    wk: LinearP,
    wv: LinearP,
    wo: LinearP,
}

/// Parameter layout of the text encoder inside a [`ParamStore`].
pub struct TextEncoder {
    pub vocab_size: usize,
    pub m: usize,
    pub d_u: usize,
    pub depth: usize,
    tok: PId,
    pos: PId,
    blocks: Vec<AttnBlock>,
}

impl TextEncoder {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        vocab_size: usize,
        m: usize,
        d_u: usize,
        depth: usize,
    ) -> Self {
        assert!(depth <= 2, "text encoder depth is 0, 1, or 2");
        let bound = 1.0 / (d_u as f64).sqrt();
        let tok = store.declare(
            "textenc.tok",
            uniform_init(rng, &[vocab_size, d_u], bound),
        );
        let pos = store.declare("textenc.pos", uniform_init(rng, &[m, d_u], bound));
        let blocks = (0..depth)
            .map(|b| AttnBlock {
                wq: LinearP::declare(store, rng, &format!("textenc.b{b}.wq"), d_u, d_u, false),
                wk: LinearP::declare(store, rng, &format!("textenc.b{b}.wk"), d_u, d_u, false),
                wv: LinearP::declare(store, rng, &format!("textenc.b{b}.wv"), d_u, d_u, false),
                wo: LinearP::declare(store, rng, &format!("textenc.b{b}.wo"), d_u, d_u, false),
            })
            .collect();
        TextEncoder {
            vocab_size,
            m,
            d_u,
            depth,
            tok,
            pos,
            blocks,
        }
    }

    /// Encode a batch of tokenized captions into (u, u_cls, mask) on `tape`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        tokens: &[TokenizedCaption],
    ) -> Result<EncodedText> {
        let b = tokens.len();
        if b == 0 {
            return Err(Error::Validation("empty caption batch".into()));
        }
        let m = self.m;
        let mut ids = Vec::with_capacity(b * m);
        let mut mask = Array2::<bool>::default((b, m));
        for (bi, tok) in tokens.iter().enumerate() {
            if tok.ids.len() != m || tok.mask.len() != m {
                return Err(Error::Validation(format!(
                    "caption tokenized to {} positions, encoder expects {m}",
                    tok.ids.len()
                )));
            }
            for (j, &id) in tok.ids.iter().enumerate() {
                if id as usize >= self.vocab_size {
                    return Err(Error::Validation(format!(
                        "token id {id} out of range for vocabulary of {}",
                        self.vocab_size
                    )));
                }
                ids.push(id as usize);
                mask[(bi, j)] = tok.mask[j];
            }
        }
        // Positions gathered alongside tokens keep everything on (B·M, d) maps.
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
        let tok_rows = tape.gather_rows(bind.var(self.tok), &ids);
        let pos_rows = tape.gather_rows(bind.var(self.pos), &pos_ids);
        let mut x = tape.add(tok_rows, pos_rows);

        if !self.blocks.is_empty() {
            // Every query row attends over its own caption's real positions.
            let mut attn_mask = Array2::<bool>::default((b * m, m));
            for bi in 0..b {
                for i in 0..m {
                    for j in 0..m {
                        attn_mask[(bi * m + i, j)] = mask[(bi, j)];
                    }
                }
            }
            let scale = 1.0 / (self.d_u as f64).sqrt();
            for blk in &self.blocks {
                let q = tape.reshape(blk.wq.forward(tape, bind, x), &[b, m, self.d_u]);
                let k = tape.reshape(blk.wk.forward(tape, bind, x), &[b, m, self.d_u]);
                let v = tape.reshape(blk.wv.forward(tape, bind, x), &[b, m, self.d_u]);
                let scores = tape.mul_scalar(tape.bmm(q, k, true), scale);
                let flat = tape.reshape(scores, &[b * m, m]);
                let attn = tape.masked_softmax(flat, &attn_mask);
                let attn3 = tape.reshape(attn, &[b, m, m]);
                let ctx = tape.bmm(attn3, v, false);
                let ctx2 = tape.reshape(ctx, &[b * m, self.d_u]);
                x = tape.add(x, blk.wo.forward(tape, bind, ctx2));
            }
        }

        // Zero padded rows so masked positions are exactly absent downstream.
        let mut keep = ArrayD::<T>::zeros(IxDyn(&[b * m, self.d_u]));
        for bi in 0..b {
            for j in 0..m {
                if mask[(bi, j)] {
                    for d in 0..self.d_u {
                        keep[[bi * m + j, d]] = T::one();
                    }
                }
            }
        }
        let x = tape.mul(x, tape.constant(keep));

        // Row b·M of the flat layout is caption b's position 0 ([CLS]).
        let mut select = ArrayD::<T>::zeros(IxDyn(&[b, b * m]));
        for bi in 0..b {
            select[[bi, bi * m]] = T::one();
        }
        let u_cls = tape.matmul(tape.constant(select), x);
        let u = tape.reshape(x, &[b, m, self.d_u]);
        Ok(EncodedText { u, u_cls, mask })
    }
}

/// Batched encoder output on a tape: u (B, M, d_u), u_cls (B, d_u).
#[derive(Debug)]
pub struct EncodedText {
    pub u: Var,
    pub u_cls: Var,
    pub mask: Array2<bool>,
}

impl EncodedText {
    /// Lift value-level embeddings (e.g. imported ones) onto a tape as
    /// constants, in the same contract `encode` produces.
    pub fn from_values<T: Scalar>(tape: &Tape<T>, rows: &[WordEmbeddings]) -> Result<EncodedText> {
        let b = rows.len();
        if b == 0 {
            return Err(Error::Validation("empty embedding batch".into()));
        }
        let (m, d_u) = (rows[0].u.nrows(), rows[0].u.ncols());
        let mut u = ArrayD::<T>::zeros(IxDyn(&[b, m, d_u]));
        let mut cls = ArrayD::<T>::zeros(IxDyn(&[b, d_u]));
        let mut mask = Array2::<bool>::default((b, m));
        for (bi, row) in rows.iter().enumerate() {
            if row.u.nrows() != m || row.u.ncols() != d_u {
                return Err(Error::Validation(
                    "embedding batch mixes shapes".into(),
                ));
            }
            for j in 0..m {
                mask[(bi, j)] = row.mask[j];
                for d in 0..d_u {
                    u[[bi, j, d]] = T::from_f64(row.u[(j, d)] as f64);
                }
            }
            for d in 0..d_u {
                cls[[bi, d]] = T::from_f64(row.u_cls[d] as f64);
            }
        }
        Ok(EncodedText {
            u: tape.constant(u),
            u_cls: tape.constant(cls),
            mask,
        })
    }
}

/// Value-level embeddings for one caption (import/export form).
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddings {
    pub u: Array2<f32>,
    pub u_cls: Array1<f32>,
    pub mask: Vec<bool>,
}

/// Read embeddings from the binary interchange format: little-endian header
/// {M: u32, d_u: u32}, M·d_u row-major f32 values, then M mask bytes.
pub fn import_external_embeddings(
    path: &Path,
    expect_m: usize,
    expect_d_u: usize,
) -> Result<WordEmbeddings> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("embeddings {}: {e}", path.display())))?;
    let mut head = [0u8; 8];
    file.read_exact(&mut head)
        .map_err(|_| Error::Format("embeddings file shorter than its header".into()))?;
    let m = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let d_u = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    if m != expect_m || d_u != expect_d_u {
        return Err(Error::Format(format!(
            "embeddings declare {m}×{d_u}, configuration expects {expect_m}×{expect_d_u}"
        )));
    }
    let mut data = vec![0u8; m * d_u * 4];
    file.read_exact(&mut data)
        .map_err(|_| Error::Format("embeddings file truncated in the value block".into()))?;
    let mut mask_bytes = vec![0u8; m];
    file.read_exact(&mut mask_bytes)
        .map_err(|_| Error::Format("embeddings file truncated in the mask block".into()))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).unwrap_or(0) != 0 {
        return Err(Error::Format("embeddings file has trailing bytes".into()));
    }

    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let u = Array2::from_shape_vec((m, d_u), values).unwrap();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embeddings contain non-finite values".into()));
    }
    let mut mask = Vec::with_capacity(m);
    for (j, &byte) in mask_bytes.iter().enumerate() {
        match byte {
            0 => mask.push(false),
            1 => mask.push(true),
            other => {
                return Err(Error::Format(format!(
                    "mask byte at position {j} is {other}, expected 0 or 1"
                )))
            }
        }
    }
    if !mask[0] {
        return Err(Error::Validation(
            "embeddings mask out position 0 ([CLS])".into(),
        ));
    }
    for j in 0..m {
        if !mask[j] && u.row(j).iter().any(|&v| v != 0.0) {
            return Err(Error::Validation(format!(
                "masked-out row {j} holds nonzero values"
            )));
        }
    }
    let u_cls = u.row(0).to_owned();
    Ok(WordEmbeddings { u, u_cls, mask })
}

/// Counterpart writer for the interchange format.
pub fn write_external_embeddings(path: &Path, emb: &WordEmbeddings) -> Result<()> {
    let (m, d_u) = (emb.u.nrows(), emb.u.ncols());
    if emb.mask.len() != m {
        return Err(Error::Validation("mask length != row count".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(m as u32).to_le_bytes())?;
    out.write_all(&(d_u as u32).to_le_bytes())?;
    for &v in emb.u.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    for &b in &emb.mask {
        out.write_all(&[u8::from(b)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CLS_ID, PAD_ID};
    use crate::rng::{stream_rng, Stream};

    fn toks(ids: &[u32], real: usize) -> TokenizedCaption {
        TokenizedCaption {
            ids: ids.to_vec(),
            mask: (0..ids.len()).map(|i| i < real).collect(),
            original_length: real,
        }
    }

    fn small_encoder(depth: usize) -> (ParamStore<f64>, TextEncoder) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(5, Stream::Init, 0);
        let enc = TextEncoder::declare(&mut store, &mut rng, 8, 4, 8, depth);
        (store, enc)
    }

    #[test]
    fn zero_depth_is_table_lookup_plus_position() {
        let (mut store, enc) = small_encoder(0);
        // Token table = identity, positions = distinct known rows.
        let tok = store.get_mut(store.id_by_name("textenc.tok").unwrap());
        tok.fill(0.0);
        for k in 0..8 {
            tok[IxDyn(&[k, k])] = 1.0;
        }
        let pos = store.get_mut(store.id_by_name("textenc.pos").unwrap());
        pos.fill(0.0);
        for p in 0..4 {
            pos[IxDyn(&[p, 7 - p])] = 0.5 * (p + 1) as f64;
        }
        let t = Tape::<f64>::new();
        let bind = store.bind(&t, false);
        let out = enc
            .encode(&t, &bind, &[toks(&[CLS_ID, 5, 3, PAD_ID], 3)])
            .unwrap();
        let u = t.value(out.u);
        let ids = [1usize, 5, 3];
        for (j, &id) in ids.iter().enumerate() {
            for d in 0..8 {
                let mut expect = if d == id { 1.0 } else { 0.0 };
                if d == 7 - j {
                    expect += 0.5 * (j + 1) as f64;
                }
                assert_eq!(u[[0, j, d]], expect);
            }
        }
        for d in 0..8 {
            assert_eq!(u[[0, 3, d]], 0.0, "padded row must be zero");
        }
        let cls = t.value(out.u_cls);
        for d in 0..8 {
            assert_eq!(cls[[0, d]], u[[0, 0, d]]);
        }
    }

    #[test]
    fn padded_rows_zero_at_any_depth() {
        for depth in [0, 1, 2] {
            let (store, enc) = small_encoder(depth);
            let t = Tape::<f64>::new();
            let bind = store.bind(&t, false);
            let out = enc
                .encode(&t, &bind, &[toks(&[CLS_ID, 4, PAD_ID, PAD_ID], 2)])
                .unwrap();
            let u = t.value(out.u);
            for j in 2..4 {
                for d in 0..8 {
                    assert_eq!(u[[0, j, d]], 0.0, "depth {depth} row {j}");
                }
            }
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, enc) = small_encoder(2);
        let run = || {
            let t = Tape::<f64>::new();
            let bind = store.bind(&t, false);
            let out = enc
                .encode(&t, &bind, &[toks(&[CLS_ID, 6, 2, 7], 4)])
                .unwrap();
            t.value_clone(out.u)
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn out_of_range_id_is_a_validation_error() {
        let (store, enc) = small_encoder(0);
        let t = Tape::<f64>::new();
        let bind = store.bind(&t, false);
        let err = enc
            .encode(&t, &bind, &[toks(&[CLS_ID, 99, PAD_ID, PAD_ID], 2)])
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn swapping_real_tokens_changes_the_encoding() {
        let (store, enc) = small_encoder(1);
        let t = Tape::<f64>::new();
        let bind = store.bind(&t, false);
        let a = enc
            .encode(&t, &bind, &[toks(&[CLS_ID, 5, 3, PAD_ID], 3)])
            .unwrap();
        let b = enc
            .encode(&t, &bind, &[toks(&[CLS_ID, 3, 5, PAD_ID], 3)])
            .unwrap();
        assert_ne!(t.value_clone(a.u), t.value_clone(b.u));
    }

    #[test]
    fn unused_and_padded_table_rows_get_zero_gradient() {
        let (store, enc) = small_encoder(0);
        let t = Tape::<f64>::new();
        let bind = store.bind(&t, true);
        let out = enc
            .encode(&t, &bind, &[toks(&[CLS_ID, 5, PAD_ID, PAD_ID], 2)])
            .unwrap();
        let loss = t.sum_all(out.u);
        let g = t.backward(loss);
        let tok_var = bind.var(enc.tok);
        let gt = g.get(tok_var).expect("table reached by backward");
        for row in 0..8 {
            let used = row == CLS_ID as usize || row == 5;
            let row_sum: f64 = (0..8).map(|d| gt[[row, d]].abs()).sum();
            if used {
                assert!(row_sum > 0.0, "row {row} should receive gradient");
            } else {
                assert_eq!(row_sum, 0.0, "row {row} must not receive gradient");
            }
        }
    }

    #[test]
    fn external_embedding_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("emb.bin");
        let mut u = Array2::<f32>::zeros((4, 3));
        u[(0, 0)] = 0.5;
        u[(1, 2)] = -1.25;
        let emb = WordEmbeddings {
            u: u.clone(),
            u_cls: u.row(0).to_owned(),
            mask: vec![true, true, false, false],
        };
        write_external_embeddings(&path, &emb).unwrap();
        let back = import_external_embeddings(&path, 4, 3).unwrap();
        assert_eq!(back, emb);

        assert!(matches!(
            import_external_embeddings(&path, 4, 5).unwrap_err(),
            Error::Format(_)
        ));
        assert!(matches!(
            import_external_embeddings(&path, 5, 3).unwrap_err(),
            Error::Format(_)
        ));
    }

    #[test]
    fn nonzero_padded_row_is_rejected_on_import() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("emb.bin");
        let mut u = Array2::<f32>::zeros((3, 2));
        u[(2, 0)] = 1.0;
        let emb = WordEmbeddings {
            u: u.clone(),
            u_cls: u.row(0).to_owned(),
            mask: vec![true, true, false],
        };
        write_external_embeddings(&path, &emb).unwrap();
        assert!(matches!(
            import_external_embeddings(&path, 3, 2).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("emb.bin");
        let emb = WordEmbeddings {
            u: Array2::<f32>::zeros((3, 2)),
            u_cls: Array1::<f32>::zeros(2),
            mask: vec![true, false, false],
        };
        write_external_embeddings(&path, &emb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            import_external_embeddings(&path, 3, 2).unwrap_err(),
            Error::Format(_)
        ));
    }
}
