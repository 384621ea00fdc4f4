//! Binary persistence: model checkpoints, per-round message traces, and the
//! dataset cache. All formats share one tensor framing and are bit-exact on
//! round-trip.
//!
//! Checkpoint framing, after the `PFSIS1\n` header, per tensor:
//! name length (u16 LE), name bytes, tag byte (0 = Global, 1 = Personalized),
//! rank (u8), extents (u32 LE each), then f32 LE data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SiteDataset, SiteStyle, StyleStats};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::params::{FlatParams, ParamTag, ParameterStore};

pub const CHECKPOINT_MAGIC: &[u8] = b"PFSIS1\n";
pub const TRACE_MAGIC: &[u8] = b"PFSTRC1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn tag_byte(tag: ParamTag) -> u8 {
    match tag {
        ParamTag::Global => 0,
        ParamTag::Personalized => 1,
    }
}

fn byte_tag(b: u8) -> Result<ParamTag> {
    match b {
        0 => Ok(ParamTag::Global),
        1 => Ok(ParamTag::Personalized),
        other => Err(Error::Format(format!("unknown tag byte {other}"))),
    }
}

fn write_entry(w: &mut impl Write, e: &TensorEntry) -> Result<()> {
    let name = e.name.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(Error::Format(format!("name too long: {}", e.name)));
    }
    if e.shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank too large: {}", e.shape.len())));
    }
    let numel: usize = e.shape.iter().product();
    if numel != e.data.len() {
        return Err(Error::Format(format!(
            "entry {}: shape {:?} vs {} values",
            e.name,
            e.shape,
            e.data.len()
        )));
    }
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&[tag_byte(e.tag), e.shape.len() as u8])?;
    for &d in &e.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &e.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_opt(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    // Distinguishes clean EOF (no more entries) from a truncated entry.
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Format("truncated entry".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_entry(r: &mut impl Read) -> Result<Option<TensorEntry>> {
    let mut len2 = [0u8; 2];
    if !read_exact_opt(r, &mut len2)? {
        return Ok(None);
    }
    let name_len = u16::from_le_bytes(len2) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    let tag = byte_tag(hdr[0])?;
    let rank = hdr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0f32; numel];
    let mut quad = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut quad)?;
        *v = f32::from_le_bytes(quad);
    }
    Ok(Some(TensorEntry { name, tag, shape, data }))
}

pub fn write_tensors(w: &mut impl Write, magic: &[u8], entries: &[TensorEntry]) -> Result<()> {
    w.write_all(magic)?;
    for e in entries {
        write_entry(w, e)?;
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read, magic: &[u8]) -> Result<Vec<TensorEntry>> {
    let mut got = vec![0u8; magic.len()];
    r.read_exact(&mut got)?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut out = Vec::new();
    while let Some(e) = read_entry(r)? {
        out.push(e);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

pub fn store_entries(store: &ParameterStore) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|e| TensorEntry {
            name: e.name.clone(),
            tag: e.tag,
            shape: e.tensor.shape().to_vec(),
            data: e.tensor.to_vec(),
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, store: &ParameterStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, CHECKPOINT_MAGIC, &store_entries(store))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<TensorEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensors(&mut r, CHECKPOINT_MAGIC)
}

/// Overwrite a store bitwise from checkpoint entries (layout must match).
pub fn restore_store(store: &ParameterStore, entries: &[TensorEntry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Layout(format!(
            "checkpoint has {} tensors, store has {}",
            entries.len(),
            store.len()
        )));
    }
    for (e, s) in entries.iter().zip(store.iter()) {
        if e.name != s.name || e.tag != s.tag || e.shape != s.tensor.shape() {
            return Err(Error::Layout(format!(
                "checkpoint entry {} does not match store entry {}",
                e.name, s.name
            )));
        }
        s.tensor.set_data(&e.data);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Round traces
// ---------------------------------------------------------------------------

/// Per-round metadata needed to re-verify the aggregation arithmetic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceMeta {
    pub round: usize,
    pub mode: String,
    pub sites: usize,
    pub ape: bool,
    pub sge: bool,
    pub sens_signed: bool,
    pub sge_temperature: f32,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TraceRound {
    pub meta: TraceMeta,
    pub tensors: Vec<TensorEntry>,
}

pub fn flat_entries(prefix: &str, tag: ParamTag, flat: &FlatParams) -> Vec<TensorEntry> {
    flat.entries
        .iter()
        .map(|(n, v)| TensorEntry {
            name: format!("{prefix}/{n}"),
            tag,
            shape: vec![v.len()],
            data: v.clone(),
        })
        .collect()
}

/// Collect entries under `prefix/` back into a flat parameter list,
/// preserving order.
pub fn collect_flat(entries: &[TensorEntry], prefix: &str) -> FlatParams {
    let want = format!("{prefix}/");
    FlatParams {
        entries: entries
            .iter()
            .filter(|e| e.name.starts_with(&want))
            .map(|e| (e.name[want.len()..].to_string(), e.data.clone()))
            .collect(),
    }
}

pub fn save_trace(path: &Path, round: &TraceRound) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRACE_MAGIC)?;
    let meta = serde_json::to_vec(&round.meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    for e in &round.tensors {
        write_entry(&mut w, e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<TraceRound> {
    let mut r = BufReader::new(File::open(path)?);
    let mut got = vec![0u8; TRACE_MAGIC.len()];
    r.read_exact(&mut got)?;
    if got != TRACE_MAGIC {
        return Err(Error::Format("bad trace magic".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut meta = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut meta)?;
    let meta: TraceMeta =
        serde_json::from_slice(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut tensors = Vec::new();
    while let Some(e) = read_entry(&mut r)? {
        tensors.push(e);
    }
    Ok(TraceRound { meta, tensors })
}

// ---------------------------------------------------------------------------
// Dataset cache
// ---------------------------------------------------------------------------

/// JSON sidecar stored next to each cached site file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub site: usize,
    pub img_size: usize,
    pub n_samples: usize,
    pub style: SiteStyle,
    pub stats: StyleStats,
}

pub fn save_dataset_cache(dir: &Path, dataset: &SiteDataset, stats: &StyleStats) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.samples.len() * 2);
    let s = dataset.img_size;
    for (i, sample) in dataset.samples.iter().enumerate() {
        entries.push(TensorEntry {
            name: format!("img/{i:05}"),
            tag: ParamTag::Global,
            shape: vec![3, s, s],
            data: sample.image.clone(),
        });
        entries.push(TensorEntry {
            name: format!("mask/{i:05}"),
            tag: ParamTag::Global,
            shape: vec![s, s],
            data: sample.mask.labels.iter().map(|&l| l as f32).collect(),
        });
    }
    let bin = dir.join(format!("site_{}.bin", dataset.site));
    let mut w = BufWriter::new(File::create(bin)?);
    write_tensors(&mut w, CHECKPOINT_MAGIC, &entries)?;
    w.flush()?;
    let sidecar = DatasetSidecar {
        site: dataset.site,
        img_size: dataset.img_size,
        n_samples: dataset.samples.len(),
        style: dataset.style.clone(),
        stats: *stats,
    };
    let json =
        serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(format!("site_{}.json", dataset.site)), json)?;
    Ok(())
}

pub fn load_dataset_cache(dir: &Path, site: usize) -> Result<(SiteDataset, StyleStats)> {
    let json = std::fs::read(dir.join(format!("site_{site}.json")))?;
    let sidecar: DatasetSidecar =
        serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    let mut r = BufReader::new(File::open(dir.join(format!("site_{site}.bin")))?);
    let entries = read_tensors(&mut r, CHECKPOINT_MAGIC)?;
    let s = sidecar.img_size;
    let mut samples = Vec::with_capacity(sidecar.n_samples);
    for i in 0..sidecar.n_samples {
        let img = entries
            .iter()
            .find(|e| e.name == format!("img/{i:05}"))
            .ok_or_else(|| Error::Format(format!("cache missing image {i}")))?;
        let mask = entries
            .iter()
            .find(|e| e.name == format!("mask/{i:05}"))
            .ok_or_else(|| Error::Format(format!("cache missing mask {i}")))?;
        let labels: Vec<u8> = mask.data.iter().map(|&v| v as u8).collect();
        samples.push(crate::data::Sample {
            image: img.data.clone(),
            mask: Mask::new(crate::data::CLASSES, s, s, labels)?,
        });
    }
    Ok((
        SiteDataset {
            site: sidecar.site,
            img_size: s,
            style: sidecar.style,
            samples,
        },
        sidecar.stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_site;
    use crate::model::{ModelConfig, SegModel};
    use crate::rng;

    #[test]
    fn checkpoint_bytes_are_pinned() {
        // A one-tensor checkpoint has exactly the documented framing.
        let mut store = ParameterStore::new();
        store.add(
            "ab",
            ParamTag::Personalized,
            crate::tensor::Tensor::from_vec(vec![1, 2], vec![1.0, -2.0], true).unwrap(),
        );
        let mut buf = Vec::new();
        write_tensors(&mut buf, CHECKPOINT_MAGIC, &store_entries(&store)).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"PFSIS1\n");
        expect.extend_from_slice(&2u16.to_le_bytes()); // name len
        expect.extend_from_slice(b"ab");
        expect.push(1); // personalized
        expect.push(2); // rank
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn model_checkpoint_roundtrips_bitwise() {
        let mut r = rng::stream(3, &[1]);
        let cfg = ModelConfig {
            img_size: 8,
            embed_dim: 8,
            heads: 2,
            decoder_channels: 4,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let m = SegModel::new(cfg.clone(), &mut r, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &m.store).unwrap();
        let entries = load_checkpoint(&path).unwrap();
        let mut r2 = rng::stream(4, &[2]);
        let m2 = SegModel::new(cfg, &mut r2, true).unwrap();
        restore_store(&m2.store, &entries).unwrap();
        assert_eq!(m.store.flatten_all(), m2.store.flatten_all());
        // And the rewritten file is byte-identical.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &m2.store).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn restore_rejects_layout_mismatch() {
        let mut store = ParameterStore::new();
        store.add(
            "a",
            ParamTag::Global,
            crate::tensor::Tensor::zeros(vec![2], true),
        );
        let entries = vec![TensorEntry {
            name: "b".into(),
            tag: ParamTag::Global,
            shape: vec![2],
            data: vec![0.0; 2],
        }];
        assert!(matches!(
            restore_store(&store, &entries).unwrap_err(),
            Error::Layout(_)
        ));
    }

    #[test]
    fn trace_roundtrips() {
        let meta = TraceMeta {
            round: 7,
            mode: "pfedsis".into(),
            sites: 2,
            ape: true,
            sge: true,
            sens_signed: false,
            sge_temperature: 1.0,
            counts: vec![10, 20],
        };
        let flat = FlatParams {
            entries: vec![("x".into(), vec![1.0, 2.0]), ("y".into(), vec![-0.5])],
        };
        let tensors = flat_entries("up/0/theta_g", ParamTag::Global, &flat);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_0007.trc");
        save_trace(
            &path,
            &TraceRound {
                meta: meta.clone(),
                tensors: tensors.clone(),
            },
        )
        .unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded.meta.round, meta.round);
        assert_eq!(loaded.tensors, tensors);
        let back = collect_flat(&loaded.tensors, "up/0/theta_g");
        assert_eq!(back, flat);
    }

    #[test]
    fn dataset_cache_roundtrips_bitwise() {
        let d = generate_site(1, 3, 99, 32, 1.0);
        let stats = crate::data::compute_stats(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_cache(dir.path(), &d, &stats).unwrap();
        let (loaded, lstats) = load_dataset_cache(dir.path(), 1).unwrap();
        assert_eq!(lstats, stats);
        assert_eq!(loaded.samples.len(), d.samples.len());
        for (a, b) in loaded.samples.iter().zip(&d.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }
}
