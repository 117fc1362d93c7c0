//! Dataset generation: seeded corpora of synthetic utterances plus the
//! tab-separated manifests that index them.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    io, synthesize_utterance, ArrayGeometry, MultiChannelUtterance, SourceKind, SourceSpec,
    SynthesisConfig, INFINITE_SNR,
};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn from_label(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// Path of the PCM file, relative to the manifest location.
    pub path: PathBuf,
    pub channels: u8,
    pub snr_db: f64,
    pub num_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to (the manifest's home).
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.utterance_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate utterance_id {}",
                    e.utterance_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }
}

/// Scene layout and corpus sizes for one generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_train_sc: usize,
    pub num_train_mc: usize,
    pub num_test: usize,
    /// Stacked frames per utterance (= labels per utterance).
    pub frames_per_utterance: usize,
    /// Nominal length of one constant-class label run, in stacked frames.
    pub class_run_frames: usize,
    pub train_snrs_db: Vec<f64>,
    pub test_snrs_db: Vec<f64>,
    pub target_azimuth: f64,
    pub interferer_azimuth: f64,
    pub interferer_level_db: f64,
    pub diffuse_level_db: f64,
    pub mic_spacing_m: f64,
    pub speed_of_sound: f64,
    pub synthesis: SynthesisConfig,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthesis.validate()?;
        if self.frames_per_utterance == 0 || self.class_run_frames == 0 {
            return Err(Error::Config("frame counts must be positive".into()));
        }
        if self.train_snrs_db.is_empty() || self.test_snrs_db.is_empty() {
            return Err(Error::Config("SNR sweeps must be non-empty".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ArrayGeometry {
        ArrayGeometry::two_mic(self.mic_spacing_m, self.speed_of_sound)
    }
}

/// Random label sequence built from constant-class runs.
fn random_class_sequence(
    frames: usize,
    run_frames: usize,
    num_classes: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let mut seq = Vec::with_capacity(frames);
    while seq.len() < frames {
        let class = rng.random_range(0..num_classes);
        let run = run_frames + rng.random_range(0..=2);
        for _ in 0..run {
            if seq.len() == frames {
                break;
            }
            seq.push(class);
        }
    }
    seq
}

/// Synthesize one corpus utterance: tone target at the configured azimuth,
/// one competing-tone directional interferer, and a diffuse noise floor.
fn generate_one(
    cfg: &DatasetConfig,
    geometry: &ArrayGeometry,
    snr_db: f64,
    seed: u64,
    id: &str,
) -> Result<MultiChannelUtterance> {
    let mut rng = rng::rng_from_seed(derive_seed(seed, 100));
    let target = SourceSpec {
        class_sequence: random_class_sequence(
            cfg.frames_per_utterance,
            cfg.class_run_frames,
            cfg.synthesis.num_classes,
            &mut rng,
        ),
        azimuth: cfg.target_azimuth,
        level_db: 0.0,
        kind: SourceKind::Target,
    };
    let interferers = if snr_db == INFINITE_SNR {
        vec![]
    } else {
        vec![
            SourceSpec {
                class_sequence: random_class_sequence(
                    cfg.frames_per_utterance,
                    cfg.class_run_frames,
                    cfg.synthesis.num_classes,
                    &mut rng,
                ),
                azimuth: cfg.interferer_azimuth,
                level_db: cfg.interferer_level_db,
                kind: SourceKind::DirectionalInterferer,
            },
            SourceSpec {
                class_sequence: vec![],
                azimuth: 0.0,
                level_db: cfg.diffuse_level_db,
                kind: SourceKind::DiffuseNoise,
            },
        ]
    };
    synthesize_utterance(
        &target,
        &interferers,
        geometry,
        &cfg.synthesis,
        snr_db,
        seed,
        id,
    )
}

/// Generate train and test corpora under `out_dir` and return their
/// manifests. Pure function of (config, seed): regeneration is bit-identical.
///
/// Train entries mix single-channel utterances (auxiliary channels dropped at
/// generation time) with full three-channel ones; the test split is entirely
/// multi-channel so every inference path can be evaluated on it.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    cfg.validate()?;
    let geometry = cfg.geometry();
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;

    let mut train_entries = Vec::new();
    let n_train = cfg.num_train_sc + cfg.num_train_mc;
    for i in 0..n_train {
        let is_mc = i < cfg.num_train_mc;
        let id = format!("train-{i:05}");
        let snr = cfg.train_snrs_db[i % cfg.train_snrs_db.len()];
        let mut utt = generate_one(cfg, &geometry, snr, derive_seed(cfg.seed, i as u64), &id)?;
        if !is_mc {
            utt.auxiliary.clear();
        }
        let path = io::write_utterance(out_dir, &utt)?;
        train_entries.push(ManifestEntry {
            utterance_id: id,
            path: path.strip_prefix(out_dir).unwrap().to_path_buf(),
            channels: utt.num_channels() as u8,
            snr_db: utt.snr_db,
            num_frames: utt.labels.len(),
        });
    }

    let mut test_entries = Vec::new();
    for i in 0..cfg.num_test {
        let id = format!("test-{i:05}");
        let snr = cfg.test_snrs_db[i % cfg.test_snrs_db.len()];
        let utt = generate_one(
            cfg,
            &geometry,
            snr,
            derive_seed(cfg.seed, (1 << 32) + i as u64),
            &id,
        )?;
        let path = io::write_utterance(out_dir, &utt)?;
        test_entries.push(ManifestEntry {
            utterance_id: id,
            path: path.strip_prefix(out_dir).unwrap().to_path_buf(),
            channels: utt.num_channels() as u8,
            snr_db: utt.snr_db,
            num_frames: utt.labels.len(),
        });
    }

    let train = DatasetManifest {
        split: Split::Train,
        sample_rate: cfg.synthesis.sample_rate,
        entries: train_entries,
        base_dir: out_dir.to_path_buf(),
    };
    let test = DatasetManifest {
        split: Split::Test,
        sample_rate: cfg.synthesis.sample_rate,
        entries: test_entries,
        base_dir: out_dir.to_path_buf(),
    };
    train.validate()?;
    test.validate()?;
    io::write_manifest(&out_dir.join("train.manifest"), &train)?;
    io::write_manifest(&out_dir.join("test.manifest"), &test)?;
    Ok((train, test))
}
