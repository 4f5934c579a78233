//! Files on disk: `.atnp` stacks, checkpoints with JSON config sidecars,
//! PGM images and the `manifest.jsonl` dataset layout.
//!
//! A dataset directory holds
//!
//! ```text
//! <root>/manifest.jsonl   one ManifestEntry per line
//! <root>/stacks/*.atnp    attention stacks, paths relative to <root>
//! <root>/images/*.pgm     final images, when the generator produced any
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use diffprobe_core::data::{
    AttentionStack, Image, Prompt, Provenance, QualityLabel, Schedule, Split, StackMeta, TrajectoryRecord,
    NORMALIZATION_TOL,
};
use diffprobe_core::format::{decode_stack, encode_stack};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn write_stack(stack: &AttentionStack, path: &Path) -> CliResult<()> {
    write_bytes(path, &encode_stack(stack.shape(), stack.maps())?)
}

/// Reads a stack payload and attaches `meta`, which the binary does not carry.
pub fn read_stack(path: &Path, meta: StackMeta) -> CliResult<AttentionStack> {
    let (shape, maps) = decode_stack(&read_bytes(path)?)?;
    Ok(AttentionStack::new(meta, shape, maps)?)
}

/// Reads a stack file without a manifest: token slots that are zero in
/// every block count as padding, and the stack counts as normalized when
/// every other slice sums to one.
pub fn read_bare_stack(path: &Path) -> CliResult<AttentionStack> {
    let (shape, maps) = decode_stack(&read_bytes(path)?)?;
    let cells = shape.cells();
    let slice = |b: usize, t: usize| &maps[(b * shape.n_tokens + t) * cells..][..cells];
    let mut meta = StackMeta::anonymous(shape);
    meta.token_mask = (0..shape.n_tokens).map(|t| (0..shape.n_blocks).any(|b| slice(b, t).iter().any(|&v| v != 0.0))).collect();
    meta.normalized = (0..shape.n_blocks).all(|b| {
        (0..shape.n_tokens)
            .filter(|&t| meta.token_mask[t])
            .all(|t| (slice(b, t).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOL)
    });
    Ok(AttentionStack::new(meta, shape, maps)?)
}

/// Checkpoint path `p` keeps its config in `p` with a `.json` extension.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn save_checkpoint<C: Serialize>(path: &Path, bytes: &[u8], config: &C) -> CliResult<()> {
    write_bytes(path, bytes)?;
    write_json(&sidecar(path), config)
}

pub fn load_checkpoint<C: DeserializeOwned>(path: &Path) -> CliResult<(Vec<u8>, C)> {
    let bytes = read_bytes(path)?;
    let config = read_json(&sidecar(path))?;
    Ok((bytes, config))
}

/// Binary (P5) 8-bit graymap.
pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> CliResult<(usize, usize, Vec<u8>)> {
    let bad = || CliError::runtime("malformed PGM".to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != width * height {
        return Err(bad());
    }
    Ok((height, width, data.to_vec()))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// First channel of `image`, quantized to 8 bits.
pub fn image_pgm(image: &Image) -> Vec<u8> {
    let plane = &image.data[..image.height * image.width];
    encode_pgm(image.height, image.width, &plane.iter().map(|&v| to_byte(v as f64)).collect::<Vec<_>>())
}

/// A heatmap scaled so its maximum maps to 255; all-zero maps stay black.
pub fn heatmap_pgm(map: &[f32], height: usize, width: usize) -> Vec<u8> {
    let max = map.iter().fold(0.0f32, |m, &v| m.max(v));
    let pixels: Vec<u8> =
        map.iter().map(|&v| if max > 0.0 { to_byte(v as f64 / max as f64) } else { 0 }).collect();
    encode_pgm(height, width, &pixels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub metric: String,
    pub value: f64,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackEntry {
    pub step: u32,
    pub path: String,
}

/// One trajectory record of a dataset. Stack metadata that the `.atnp`
/// binary omits (token mask, block ids, normalization) lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub version: u32,
    pub prompt_id: String,
    pub prompt: String,
    pub tokens: Vec<String>,
    pub seed: u64,
    pub split: String,
    pub total_steps: u32,
    pub capture_step: u32,
    pub block_ids: Vec<u32>,
    pub token_mask: Vec<bool>,
    pub normalized: bool,
    pub stacks: Vec<StackEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub labels: Vec<LabelEntry>,
}

impl ManifestEntry {
    pub fn label(&self, metric: &str) -> Option<f64> {
        self.labels.iter().find(|l| l.metric == metric).map(|l| l.value)
    }

    /// The first label's metric, which datasets use as their ground truth.
    pub fn primary_metric(&self) -> Option<&str> {
        self.labels.first().map(|l| l.metric.as_str())
    }
}

/// A dataset directory and its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), entries: Vec::new() }
    }

    pub fn open(root: &Path) -> CliResult<Self> {
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| CliError::runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        let ds = Self { root: root.to_path_buf(), entries };
        ds.validate()?;
        Ok(ds)
    }

    /// Unique paths, known versions and splits, and no prompt in both splits.
    pub fn validate(&self) -> CliResult<()> {
        let mut paths = HashSet::new();
        let mut train = HashSet::new();
        let mut test = HashSet::new();
        for e in &self.entries {
            if e.version != MANIFEST_VERSION {
                return Err(CliError::runtime(format!("unsupported manifest version {}", e.version)));
            }
            match e.split.as_str() {
                "train" => train.insert(e.prompt_id.as_str()),
                "test" => test.insert(e.prompt_id.as_str()),
                other => return Err(CliError::runtime(format!("unknown split {other:?}"))),
            };
            for p in e.stacks.iter().map(|s| &s.path).chain(&e.image) {
                if !paths.insert(p.as_str()) {
                    return Err(CliError::runtime(format!("path {p} listed twice")));
                }
            }
        }
        if let Some(p) = train.intersection(&test).next() {
            return Err(CliError::runtime(format!("prompt {p} appears in both splits")));
        }
        Ok(())
    }

    /// Writes `record`'s stacks and image under the dataset root and appends its entry.
    pub fn add(&mut self, record: &TrajectoryRecord, split: Split) -> CliResult<()> {
        record.validate()?;
        let index = self.entries.len();
        let first = record.stacks.first();
        let mut stacks = Vec::with_capacity(record.stacks.len());
        for s in &record.stacks {
            let rel = format!("stacks/{index:06}_s{:02}.atnp", s.step());
            write_stack(s, &self.root.join(&rel))?;
            stacks.push(StackEntry { step: s.step(), path: rel });
        }
        let image = match &record.final_image {
            Some(img) => {
                let rel = format!("images/{index:06}.pgm");
                write_bytes(&self.root.join(&rel), &image_pgm(img))?;
                Some(rel)
            }
            None => None,
        };
        self.entries.push(ManifestEntry {
            version: MANIFEST_VERSION,
            prompt_id: record.prompt_id.clone(),
            prompt: record.prompt.text.clone(),
            tokens: record.prompt.tokens.clone(),
            seed: record.seed,
            split: split.as_str().to_string(),
            total_steps: record.schedule.total_steps,
            capture_step: record.schedule.capture_step,
            block_ids: first.map(|s| s.meta().block_ids.clone()).unwrap_or_default(),
            token_mask: first.map(|s| s.token_mask().to_vec()).unwrap_or_default(),
            normalized: first.is_some_and(|s| s.is_normalized()),
            stacks,
            image,
            labels: record
                .labels
                .iter()
                .map(|l| LabelEntry {
                    metric: l.metric_name.clone(),
                    value: l.value,
                    provenance: l.provenance.as_str().to_string(),
                })
                .collect(),
        });
        Ok(())
    }

    pub fn save(&self) -> CliResult<()> {
        self.validate()?;
        fs::create_dir_all(&self.root)?;
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        write_bytes(&self.root.join(MANIFEST_FILE), &out)
    }

    pub fn entries_in<'a>(&'a self, split: Option<&'a str>) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| split.map_or(true, |s| e.split == s))
    }

    /// The stack captured at `step` for `entry`.
    pub fn stack(&self, entry: &ManifestEntry, step: u32) -> CliResult<AttentionStack> {
        let s = entry.stacks.iter().find(|s| s.step == step).ok_or_else(|| {
            CliError::input(format!("record ({}, {}) has no stack at step {step}", entry.prompt_id, entry.seed))
        })?;
        let meta = StackMeta {
            prompt_id: entry.prompt_id.clone(),
            seed: entry.seed,
            step,
            total_steps: entry.total_steps,
            block_ids: entry.block_ids.clone(),
            token_mask: entry.token_mask.clone(),
            normalized: entry.normalized,
        };
        read_stack(&self.root.join(&s.path), meta)
    }

    /// Rebuilds the full record (stacks and labels; images are not decoded).
    pub fn record(&self, entry: &ManifestEntry) -> CliResult<TrajectoryRecord> {
        let stacks = entry.stacks.iter().map(|s| self.stack(entry, s.step)).collect::<CliResult<Vec<_>>>()?;
        let labels = entry
            .labels
            .iter()
            .map(|l| Ok(QualityLabel::new(l.metric.clone(), l.value, Provenance::parse(&l.provenance)?)?))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(TrajectoryRecord {
            prompt_id: entry.prompt_id.clone(),
            prompt: Prompt { text: entry.prompt.clone(), tokens: entry.tokens.clone() },
            seed: entry.seed,
            schedule: Schedule { total_steps: entry.total_steps, capture_step: entry.capture_step },
            stacks,
            final_image: None,
            labels,
        })
    }
}
