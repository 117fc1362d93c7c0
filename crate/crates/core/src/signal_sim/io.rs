//! Utterance and manifest file formats.
//!
//! An utterance is stored as `<id>.f32` (32-bit float little-endian PCM,
//! channels interleaved per sample, order: primary, aux1, aux2) plus a
//! `<id>.json` sidecar carrying channel count, sample rate, the label array,
//! and the SNR tag. Manifests are line-delimited, tab-separated records.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry, MultiChannelUtterance, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    utterance_id: String,
    channels: u8,
    sample_rate: u32,
    /// Textual so the +inf sentinel survives JSON.
    snr_db: String,
    labels: Vec<usize>,
}

fn format_snr(v: f64) -> String {
    format!("{v}")
}

fn parse_snr(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("bad snr_db field: {s}")))
}

/// Write `<id>.f32` + `<id>.json` under `dir`; returns the PCM path.
pub fn write_utterance(dir: &Path, utt: &MultiChannelUtterance) -> Result<PathBuf> {
    utt.validate()?;
    let pcm_path = dir.join(format!("{}.f32", utt.utterance_id));
    let sidecar_path = dir.join(format!("{}.json", utt.utterance_id));

    let channels = utt.num_channels();
    let n = utt.num_samples();
    let mut bytes = Vec::with_capacity(n * channels * 4);
    for i in 0..n {
        bytes.extend_from_slice(&(utt.primary[i] as f32).to_le_bytes());
        for aux in &utt.auxiliary {
            bytes.extend_from_slice(&(aux[i] as f32).to_le_bytes());
        }
    }
    std::fs::write(&pcm_path, &bytes).map_err(Error::io(&pcm_path))?;

    let sidecar = Sidecar {
        utterance_id: utt.utterance_id.clone(),
        channels: channels as u8,
        sample_rate: utt.sample_rate,
        snr_db: format_snr(utt.snr_db),
        labels: utt.labels.clone(),
    };
    let json = serde_json::to_vec(&sidecar)
        .map_err(|e| Error::InvalidInput(format!("sidecar encoding failed: {e}")))?;
    std::fs::write(&sidecar_path, &json).map_err(Error::io(&sidecar_path))?;
    Ok(pcm_path)
}

/// Read an utterance back from its PCM path (sidecar found by extension).
pub fn read_utterance(pcm_path: &Path) -> Result<MultiChannelUtterance> {
    let sidecar_path = pcm_path.with_extension("json");
    let mut json = String::new();
    std::fs::File::open(&sidecar_path)
        .map_err(Error::io(&sidecar_path))?
        .read_to_string(&mut json)
        .map_err(Error::io(&sidecar_path))?;
    let sidecar: Sidecar = serde_json::from_str(&json)
        .map_err(|e| Error::InvalidInput(format!("bad sidecar {}: {e}", sidecar_path.display())))?;

    let bytes = std::fs::read(pcm_path).map_err(Error::io(pcm_path))?;
    let channels = sidecar.channels as usize;
    if channels == 0 || bytes.len() % (4 * channels) != 0 {
        return Err(Error::InvalidInput(format!(
            "PCM size {} inconsistent with {} channels",
            bytes.len(),
            channels
        )));
    }
    let n = bytes.len() / (4 * channels);
    let mut waves = vec![Vec::with_capacity(n); channels];
    for i in 0..n {
        for (ch, wave) in waves.iter_mut().enumerate() {
            let off = (i * channels + ch) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            wave.push(f64::from(v));
        }
    }
    let mut waves = waves.into_iter();
    let utt = MultiChannelUtterance {
        utterance_id: sidecar.utterance_id,
        sample_rate: sidecar.sample_rate,
        primary: waves.next().unwrap(),
        auxiliary: waves.collect(),
        labels: sidecar.labels,
        snr_db: parse_snr(&sidecar.snr_db)?,
    };
    utt.validate()?;
    Ok(utt)
}

/// Manifest format: a `#` header line with split and sample rate, then one
/// tab-separated record per utterance:
/// `utterance_id  path  channels  snr_db  num_frames`.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let mut out = String::new();
    out.push_str(&format!(
        "# split={}\tsample_rate={}\n",
        manifest.split.label(),
        manifest.sample_rate
    ));
    for e in &manifest.entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.utterance_id,
            e.path.display(),
            e.channels,
            format_snr(e.snr_db),
            e.num_frames
        ));
    }
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(out.as_bytes()).map_err(Error::io(path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let base_dir = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("empty manifest {}", path.display())))?;
    let (split, sample_rate) = parse_manifest_header(header)
        .ok_or_else(|| Error::InvalidInput(format!("bad manifest header: {header}")))?;

    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidInput(format!(
                "manifest line {}: expected 5 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let entry = ManifestEntry {
            utterance_id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            channels: fields[2]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad channel count: {}", fields[2])))?,
            snr_db: parse_snr(fields[3])?,
            num_frames: fields[4]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad frame count: {}", fields[4])))?,
        };
        let resolved = base_dir.join(&entry.path);
        if !resolved.exists() {
            return Err(Error::InvalidInput(format!(
                "manifest references missing file {}",
                resolved.display()
            )));
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        split,
        sample_rate,
        entries,
        base_dir,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn parse_manifest_header(header: &str) -> Option<(Split, u32)> {
    let rest = header.strip_prefix("# ")?;
    let mut split = None;
    let mut rate = None;
    for part in rest.split('\t') {
        if let Some(v) = part.strip_prefix("split=") {
            split = Split::from_label(v);
        } else if let Some(v) = part.strip_prefix("sample_rate=") {
            rate = v.parse().ok();
        }
    }
    Some((split?, rate?))
}

/// Load every utterance referenced by a manifest, in manifest order.
pub fn load_manifest_utterances(manifest: &DatasetManifest) -> Result<Vec<MultiChannelUtterance>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let utt = read_utterance(&manifest.resolve(e))?;
            if utt.num_channels() != e.channels as usize {
                return Err(Error::InvalidInput(format!(
                    "{}: channel count differs from manifest",
                    e.utterance_id
                )));
            }
            if utt.labels.len() != e.num_frames {
                return Err(Error::InvalidInput(format!(
                    "{}: frame count differs from manifest",
                    e.utterance_id
                )));
            }
            Ok(utt)
        })
        .collect()
}
