//! Synthetic moving-digit clips: sprite rendering, out-and-back
//! trajectories, caption templating, tokenization, and manifest I/O.
//!
//! A dataset on disk is a directory of per-clip PNG folders plus a JSONL
//! manifest (first line: global metadata; following lines: one record per
//! clip) and a JSON vocabulary. Externally produced caption-labeled clips in
//! the same layout load through the same manifest path.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use ndarray::{Array4, s};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// 8×8 glyph bitmaps for digits 0–9; bit 7 is the leftmost pixel of a row.
const GLYPHS: [[u8; 8]; 10] = [
    [0x7C, 0xC6, 0xCE, 0xDE, 0xF6, 0xE6, 0x7C, 0x00],
    [0x30, 0x70, 0x30, 0x30, 0x30, 0x30, 0xFC, 0x00],
    [0x78, 0xCC, 0x0C, 0x38, 0x60, 0xCC, 0xFC, 0x00],
    [0x78, 0xCC, 0x0C, 0x38, 0x0C, 0xCC, 0x78, 0x00],
    [0x1C, 0x3C, 0x6C, 0xCC, 0xFE, 0x0C, 0x1E, 0x00],
    [0xFC, 0xC0, 0xF8, 0x0C, 0x0C, 0xCC, 0x78, 0x00],
    [0x38, 0x60, 0xC0, 0xF8, 0xCC, 0xCC, 0x78, 0x00],
    [0xFC, 0xCC, 0x0C, 0x18, 0x30, 0x30, 0x30, 0x00],
    [0x78, 0xCC, 0xCC, 0x78, 0xCC, 0xCC, 0x78, 0x00],
    [0x78, 0xCC, 0xCC, 0x7C, 0x0C, 0x18, 0x70, 0x00],
];

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternId {
    UpThenDown,
    LeftThenRight,
    DownThenUp,
    RightThenLeft,
}

impl PatternId {
    pub const ALL: [PatternId; 4] = [
        PatternId::UpThenDown,
        PatternId::LeftThenRight,
        PatternId::DownThenUp,
        PatternId::RightThenLeft,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            PatternId::UpThenDown => "up then down",
            PatternId::LeftThenRight => "left then right",
            PatternId::DownThenUp => "down then up",
            PatternId::RightThenLeft => "right then left",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionPattern {
    pub id: PatternId,
    /// Peak displacement in pixels; the trajectory returns to its start.
    pub amplitude: u32,
}

impl MotionPattern {
    pub fn new(id: PatternId, amplitude: u32) -> Result<Self> {
        if amplitude < 1 {
            return Err(Error::Validation("pattern amplitude must be ≥ 1".into()));
        }
        Ok(MotionPattern { id, amplitude })
    }
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    /// (T, H, W, 3) pixels in [0, 255].
    pub frames: Array4<u8>,
    pub caption: String,
    /// Synthetic-only provenance; absent on externally loaded clips.
    pub digit_id: Option<u8>,
    pub pattern: Option<PatternId>,
    pub clip_seed: u64,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

pub struct ClipDims {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

/// Triangle wave over frame indices: 0 at both ends, peaking mid-clip.
fn tri(j: usize, t: usize) -> f64 {
    let p = j as f64 / (t - 1) as f64;
    1.0 - (2.0 * p - 1.0).abs()
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Per-frame (dy, dx) offsets of a pattern with amplitude `a` over `t` frames.
pub fn trajectory_offsets(id: PatternId, a: u32, t: usize) -> Vec<(i64, i64)> {
    (0..t)
        .map(|j| {
            let d = round_half_up(a as f64 * tri(j, t));
            match id {
                PatternId::UpThenDown => (-d, 0),
                PatternId::DownThenUp => (d, 0),
                PatternId::LeftThenRight => (0, -d),
                PatternId::RightThenLeft => (0, d),
            }
        })
        .collect()
}

/// Sprite side length for a frame of the given dims (8×8 glyph, integer scale).
pub fn sprite_side(height: usize, width: usize) -> usize {
    8 * (height.min(width) / 16).max(1)
}

/// Render one clip: a single digit sprite translating along the pattern's
/// out-and-back path on a black background, white and replicated to RGB.
/// Deterministic in all arguments; `clip_seed` picks the start position
/// inside the safe box.
pub fn generate_clip(
    digit_id: u8,
    pattern: MotionPattern,
    clip_seed: u64,
    dims: &ClipDims,
) -> Result<VideoClip> {
    if digit_id > 9 {
        return Err(Error::Validation(format!(
            "digit_id must be 0–9, got {digit_id}"
        )));
    }
    if dims.frames < 3 {
        return Err(Error::Validation("clips need at least 3 frames".into()));
    }
    let (h, w, t) = (dims.height, dims.width, dims.frames);
    let side = sprite_side(h, w);
    let a = pattern.amplitude as usize;

    // The offset range is one-sided per pattern; the base position must keep
    // the sprite inside the frame at peak displacement.
    let (y_lo, y_hi, x_lo, x_hi) = match pattern.id {
        PatternId::UpThenDown => (a as i64, (h as i64) - side as i64, 0, (w as i64) - side as i64),
        PatternId::DownThenUp => (0, (h as i64) - (side + a) as i64, 0, (w as i64) - side as i64),
        PatternId::LeftThenRight => (0, (h as i64) - side as i64, a as i64, (w as i64) - side as i64),
        PatternId::RightThenLeft => (0, (h as i64) - side as i64, 0, (w as i64) - (side + a) as i64),
    };
    if y_lo > y_hi || x_lo > x_hi {
        return Err(Error::Bounds(format!(
            "amplitude {a} pushes a {side}×{side} sprite out of a {h}×{w} frame"
        )));
    }
    let mut rng = stream_rng(clip_seed, Stream::ClipGen, 0);
    let base_y = rng.gen_range(y_lo..=y_hi);
    let base_x = rng.gen_range(x_lo..=x_hi);

    let offsets = trajectory_offsets(pattern.id, pattern.amplitude, t);
    let glyph = &GLYPHS[digit_id as usize];
    let scale = side / 8;
    let mut frames = Array4::<u8>::zeros((t, h, w, 3));
    for (j, &(dy, dx)) in offsets.iter().enumerate() {
        let oy = base_y + dy;
        let ox = base_x + dx;
        debug_assert!(oy >= 0 && ox >= 0);
        for gy in 0..8 {
            let row = glyph[gy];
            for gx in 0..8 {
                if row & (0x80 >> gx) == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let py = oy as usize + gy * scale + sy;
                        let px = ox as usize + gx * scale + sx;
                        for c in 0..3 {
                            frames[(j, py, px, c)] = 255;
                        }
                    }
                }
            }
        }
    }
    Ok(VideoClip {
        frames,
        caption: format!("the digit {digit_id} is moving {}", pattern.id.phrase()),
        digit_id: Some(digit_id),
        pattern: Some(pattern.id),
        clip_seed,
    })
}

/// Indices selected when sampling `n` frames from a length-`t` clip:
/// round(j·(t−1)/(n−1)), round-half-up, for j = 0..n−1.
pub fn sample_indices(t: usize, n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Validation("need at least 2 sampled frames".into()));
    }
    if t < n {
        return Err(Error::Validation(format!(
            "cannot sample {n} frames from a {t}-frame clip"
        )));
    }
    Ok((0..n)
        .map(|j| (2 * j * (t - 1) + (n - 1)) / (2 * (n - 1)))
        .collect())
}

/// Uniformly sample `n` frames (first and last always included).
pub fn sample_frames(clip: &VideoClip, n: usize) -> Result<VideoClip> {
    let t = clip.len();
    let idx = sample_indices(t, n)?;
    let (h, w) = (clip.height(), clip.width());
    let mut frames = Array4::<u8>::zeros((n, h, w, 3));
    for (row, &src) in idx.iter().enumerate() {
        frames
            .slice_mut(s![row, .., .., ..])
            .assign(&clip.frames.slice(s![src, .., .., ..]));
    }
    Ok(VideoClip {
        frames,
        caption: clip.caption.clone(),
        digit_id: clip.digit_id,
        pattern: clip.pattern,
        clip_seed: clip.clip_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    map: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.map.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.map).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        let v = Vocabulary { map };
        for (tok, id) in [("[pad]", PAD_ID), ("[cls]", CLS_ID), ("[unk]", UNK_ID)] {
            if v.map.get(tok) != Some(&id) {
                return Err(Error::Format(format!(
                    "vocabulary missing reserved token {tok} at id {id}"
                )));
            }
        }
        Ok(v)
    }
}

/// Lowercased whitespace tokenization; sorted tokens for stable ids;
/// reserved ids 0–2 first.
pub fn build_vocabulary<'a>(captions: impl IntoIterator<Item = &'a str>) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = Vec::new();
    let mut any = false;
    for caption in captions {
        any = true;
        for tok in caption.to_lowercase().split_whitespace() {
            tokens.push(tok.to_string());
        }
    }
    if !any || tokens.is_empty() {
        return Err(Error::Validation(
            "cannot build a vocabulary from no tokens".into(),
        ));
    }
    tokens.sort();
    tokens.dedup();
    let mut map = BTreeMap::new();
    map.insert("[pad]".to_string(), PAD_ID);
    map.insert("[cls]".to_string(), CLS_ID);
    map.insert("[unk]".to_string(), UNK_ID);
    let mut next = 3u32;
    for tok in tokens {
        if !map.contains_key(&tok) {
            map.insert(tok, next);
            next += 1;
        }
    }
    Ok(Vocabulary { map })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCaption {
    /// Length exactly M; position 0 is [CLS].
    pub ids: Vec<u32>,
    /// True at non-pad positions (a prefix of trues).
    pub mask: Vec<bool>,
    /// Token count before padding/truncation, [CLS] included.
    pub original_length: usize,
}

pub fn tokenize(caption: &str, vocab: &Vocabulary, m: usize) -> Result<TokenizedCaption> {
    if m < 2 {
        return Err(Error::Validation("max token length must be ≥ 2".into()));
    }
    let mut ids = vec![CLS_ID];
    for tok in caption.to_lowercase().split_whitespace() {
        ids.push(vocab.id(tok));
    }
    let original_length = ids.len();
    ids.truncate(m);
    let real = ids.len();
    ids.resize(m, PAD_ID);
    let mask = (0..m).map(|i| i < real).collect();
    Ok(TokenizedCaption {
        ids,
        mask,
        original_length,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestMeta {
    pub height: usize,
    pub width: usize,
    pub clip_frames: usize,
    pub vocab: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub caption: String,
    pub split: String,
    pub clip_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub records: Vec<ManifestRecord>,
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

fn save_frame_png(path: &Path, frame: ndarray::ArrayView3<u8>) -> Result<()> {
    let (h, w, _) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let raw: Vec<u8> = frame.iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("raw buffer sized for the image");
    img.save(path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

fn load_frame_png(path: &Path) -> Result<ndarray::Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Integrity(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(ndarray::Array3::from_shape_vec((h as usize, w as usize, 3), raw)
        .expect("raw buffer sized for the image"))
}

/// Write clips and a manifest under `dir`. Returns the manifest written.
pub fn write_dataset(
    clips: &[(VideoClip, String)],
    dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    if clips.is_empty() {
        return Err(Error::Validation("no clips to write".into()));
    }
    let (h, w, t) = (
        clips[0].0.height(),
        clips[0].0.width(),
        clips[0].0.len(),
    );
    for (clip, _) in clips {
        if clip.height() != h || clip.width() != w || clip.len() != t {
            return Err(Error::Validation(
                "all clips in a dataset must share dimensions".into(),
            ));
        }
    }
    std::fs::create_dir_all(dir.join("clips"))?;
    let vocab = build_vocabulary(clips.iter().map(|(c, _)| c.caption.as_str()))?;
    std::fs::write(dir.join("vocab.json"), vocab.to_json())?;

    let mut records = Vec::with_capacity(clips.len());
    for (i, (clip, split)) in clips.iter().enumerate() {
        let rel = format!("clips/clip_{i:05}");
        let clip_dir = dir.join(&rel);
        std::fs::create_dir_all(&clip_dir)?;
        for j in 0..clip.len() {
            save_frame_png(
                &clip_dir.join(frame_name(j)),
                clip.frames.slice(s![j, .., .., ..]),
            )?;
        }
        records.push(ManifestRecord {
            path: rel,
            caption: clip.caption.clone(),
            split: split.clone(),
            clip_seed: clip.clip_seed,
        });
    }
    let meta = ManifestMeta {
        height: h,
        width: w,
        clip_frames: t,
        vocab: "vocab.json".to_string(),
        seed,
    };
    let manifest = DatasetManifest {
        meta: meta.clone(),
        records,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    writeln!(out, "{}", serde_json::to_string(&meta).unwrap())?;
    for rec in &manifest.records {
        writeln!(out, "{}", serde_json::to_string(rec).unwrap())?;
    }
    out.flush()?;
    Ok(manifest)
}

/// A dataset opened from disk; clips load lazily by record index.
#[derive(Debug)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = std::fs::File::open(&manifest_path).map_err(|e| {
        Error::Integrity(format!("manifest {}: {e}", manifest_path.display()))
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Format("manifest is empty".into()))??;
    let meta: ManifestMeta = serde_json::from_str(&meta_line)
        .map_err(|e| Error::Format(format!("manifest metadata: {e}")))?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest record: {e}")))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Format("manifest lists no clips".into()));
    }
    for rec in &records {
        if !dir.join(&rec.path).is_dir() {
            return Err(Error::Integrity(format!(
                "manifest references missing clip {}",
                rec.path
            )));
        }
    }
    let vocab_text = std::fs::read_to_string(dir.join(&meta.vocab))
        .map_err(|e| Error::Integrity(format!("vocabulary {}: {e}", meta.vocab)))?;
    let vocab = Vocabulary::from_json(&vocab_text)?;
    Ok(LoadedDataset {
        dir: dir.to_path_buf(),
        manifest: DatasetManifest { meta, records },
        vocab,
    })
}

impl LoadedDataset {
    pub fn load_clip(&self, index: usize) -> Result<VideoClip> {
        let rec = self
            .manifest
            .records
            .get(index)
            .ok_or_else(|| Error::Bounds(format!("clip index {index} out of range")))?;
        let clip_dir = self.dir.join(&rec.path);
        let t = self.manifest.meta.clip_frames;
        let (h, w) = (self.manifest.meta.height, self.manifest.meta.width);
        let mut frames = Array4::<u8>::zeros((t, h, w, 3));
        for j in 0..t {
            let frame = load_frame_png(&clip_dir.join(frame_name(j)))?;
            if frame.shape() != [h, w, 3] {
                return Err(Error::Integrity(format!(
                    "{}/{} has shape {:?}, manifest says {h}×{w}",
                    rec.path,
                    frame_name(j),
                    frame.shape()
                )));
            }
            frames.slice_mut(s![j, .., .., ..]).assign(&frame);
        }
        Ok(VideoClip {
            frames,
            caption: rec.caption.clone(),
            digit_id: None,
            pattern: None,
            clip_seed: rec.clip_seed,
        })
    }

    pub fn indices_for_split(&self, split: &str) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Synthesize a balanced dataset per the config and write it under `dir`.
/// Clips cycle round-robin through the 4 patterns × 10 digits; every
/// ⌈1/val_fraction⌉-ish index lands in the validation split so that the val
/// count is exactly ⌊clips · val_fraction⌋.
pub fn make_dataset(cfg: &crate::config::DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    if cfg.clips == 0 {
        return Err(Error::Validation("dataset.clips must be > 0".into()));
    }
    let dims = ClipDims {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.clip_frames,
    };
    let mut clips = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let cell = i % 40;
        let digit = (cell / 4) as u8;
        let pattern = MotionPattern::new(PatternId::ALL[cell % 4], cfg.amplitude)?;
        let clip_seed = stream_rng(cfg.seed, Stream::ClipGen, i as u64).gen::<u64>();
        let clip = generate_clip(digit, pattern, clip_seed, &dims)?;
        let val_before = ((i as f64) * cfg.val_fraction).floor() as usize;
        let val_after = ((i as f64 + 1.0) * cfg.val_fraction).floor() as usize;
        let split = if val_after > val_before { "val" } else { "train" };
        clips.push((clip, split.to_string()));
    }
    write_dataset(&clips, dir, cfg.seed)
}

/// Normalize (T,H,W,3) u8 frames to a model tensor (T,3,H,W) in [−1,1].
pub fn clip_to_model_tensor(frames: &Array4<u8>) -> ndarray::ArrayD<f32> {
    let (t, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    let mut out = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[t, 3, h, w]));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[ti, c, y, x]] = frames[(ti, y, x, c)] as f32 / 127.5 - 1.0;
                }
            }
        }
    }
    out
}
