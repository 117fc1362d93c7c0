//! Synthetic microphone-array utterance generator.
//!
//! Produces multi-channel utterances with a known per-frame class sequence,
//! controllable SNR, and directional interference, using a far-field
//! plane-wave propagation model with frequency-domain fractional delays.
//! The target signal is a class-dependent sum of three band-limited tones,
//! which keeps per-frame labels unambiguous without any lexicon.

mod dataset;
mod io;

pub use dataset::{generate_dataset, DatasetConfig, DatasetManifest, ManifestEntry, Split};
pub use io::{
    load_manifest_utterances, read_manifest, read_utterance, write_manifest, write_utterance,
};

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fftu;
use crate::rng::{self, derive_seed};

/// Sentinel for "no noise present".
pub const INFINITE_SNR: f64 = f64::INFINITY;

/// Microphone positions in meters plus the propagation speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<[f64; 3]>,
    pub speed_of_sound: f64,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>, speed_of_sound: f64) -> Result<Self> {
        let geo = ArrayGeometry {
            mic_positions,
            speed_of_sound,
        };
        geo.validate()?;
        Ok(geo)
    }

    /// Two microphones on the x-axis, centered on the origin.
    pub fn two_mic(spacing_m: f64, speed_of_sound: f64) -> Self {
        ArrayGeometry {
            mic_positions: vec![[-spacing_m / 2.0, 0.0, 0.0], [spacing_m / 2.0, 0.0, 0.0]],
            speed_of_sound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::InvalidInput(
                "geometry needs at least 1 microphone".into(),
            ));
        }
        if !self
            .mic_positions
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidInput("non-finite microphone position".into()));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidInput(format!(
                "speed of sound must be positive, got {}",
                self.speed_of_sound
            )));
        }
        Ok(())
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    /// Propagation delay of microphone `m` for a plane wave from `azimuth`
    /// (radians, xy-plane): tau_m = (u . p_m) / c.
    pub fn delay_secs(&self, m: usize, azimuth: f64) -> f64 {
        let u = [azimuth.cos(), azimuth.sin(), 0.0];
        let p = self.mic_positions[m];
        (u[0] * p[0] + u[1] * p[1] + u[2] * p[2]) / self.speed_of_sound
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    Target,
    DirectionalInterferer,
    DiffuseNoise,
}

/// One acoustic source in a synthesized scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Target class per stacked frame. Unused for diffuse noise.
    pub class_sequence: Vec<usize>,
    pub azimuth: f64,
    pub level_db: f64,
    pub kind: SourceKind,
}

impl SourceSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..2.0 * PI).contains(&self.azimuth) {
            return Err(Error::InvalidInput(format!(
                "azimuth {} outside [0, 2pi)",
                self.azimuth
            )));
        }
        if self.kind != SourceKind::DiffuseNoise {
            if let Some(&c) = self.class_sequence.iter().find(|&&c| c >= num_classes) {
                return Err(Error::InvalidInput(format!(
                    "class id {c} out of range (num_classes={num_classes})"
                )));
            }
        }
        Ok(())
    }
}

/// One utterance: the always-present primary channel, optionally two raw
/// auxiliary microphone channels, and per-stacked-frame class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelUtterance {
    pub utterance_id: String,
    pub sample_rate: u32,
    pub primary: Vec<f64>,
    /// Either empty (single-channel) or exactly two raw microphone channels.
    pub auxiliary: Vec<Vec<f64>>,
    /// Class label per stacked frame.
    pub labels: Vec<usize>,
    pub snr_db: f64,
}

impl MultiChannelUtterance {
    pub fn validate(&self) -> Result<()> {
        if !(self.auxiliary.is_empty() || self.auxiliary.len() == 2) {
            return Err(Error::InvalidInput(format!(
                "auxiliary channel count must be 0 or 2, got {}",
                self.auxiliary.len()
            )));
        }
        if self.auxiliary.iter().any(|a| a.len() != self.primary.len()) {
            return Err(Error::InvalidInput("channel length mismatch".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::InvalidInput("snr_db must be finite or +inf".into()));
        }
        Ok(())
    }

    pub fn is_multi_channel(&self) -> bool {
        self.auxiliary.len() == 2
    }

    pub fn num_channels(&self) -> usize {
        1 + self.auxiliary.len()
    }

    pub fn num_samples(&self) -> usize {
        self.primary.len()
    }
}

/// SNR bin boundaries: below 10 dB is low, 10..=20 dB is medium, above 20 dB
/// is high.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SnrBin {
    Low,
    Medium,
    High,
}

impl SnrBin {
    pub const ALL: [SnrBin; 3] = [SnrBin::Low, SnrBin::Medium, SnrBin::High];

    pub fn label(self) -> &'static str {
        match self {
            SnrBin::Low => "low",
            SnrBin::Medium => "medium",
            SnrBin::High => "high",
        }
    }
}

pub fn snr_bin(snr_db: f64) -> SnrBin {
    assert!(!snr_db.is_nan(), "snr_db must be finite or +inf");
    if snr_db < 10.0 {
        SnrBin::Low
    } else if snr_db <= 20.0 {
        SnrBin::Medium
    } else {
        SnrBin::High
    }
}

/// Shift a signal by a fractional number of samples via a per-frequency
/// phase ramp. The shift is circular and unit-modulus, so energy is
/// preserved up to the Nyquist-bin correction that keeps the output real.
pub fn fractional_delay(x: &[f64], delay_samples: f64) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fftu::fft_forward(&mut buf);
    for (i, v) in buf.iter_mut().enumerate() {
        let freq_idx = if i <= n / 2 {
            i as f64
        } else {
            i as f64 - n as f64
        };
        let phase = -2.0 * PI * freq_idx * delay_samples / n as f64;
        if n % 2 == 0 && i == n / 2 {
            *v *= phase.cos();
        } else {
            *v *= Complex64::from_polar(1.0, phase);
        }
    }
    fftu::fft_inverse(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// Far-field plane-wave propagation: one delayed copy of the source per
/// microphone, tau_m = (u(azimuth) . p_m) / c applied as a fractional delay.
pub fn simulate_propagation(
    source: &[f64],
    azimuth: f64,
    geometry: &ArrayGeometry,
    sample_rate: u32,
) -> Result<Vec<Vec<f64>>> {
    geometry.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidInput("empty source waveform".into()));
    }
    if !source.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite samples in source".into()));
    }
    Ok((0..geometry.num_mics())
        .map(|m| {
            let tau = geometry.delay_secs(m, azimuth);
            fractional_delay(source, tau * f64::from(sample_rate))
        })
        .collect())
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Measured SNR of clean components on the primary reference; +inf when the
/// noise carries no energy.
pub fn measure_snr(target_primary: &[f64], noise_primary: &[f64]) -> f64 {
    let en = energy(noise_primary);
    if en == 0.0 {
        return INFINITE_SNR;
    }
    10.0 * (energy(target_primary) / en).log10()
}

/// Rescale `noise` so the energy ratio on channel 0 equals `snr_db`, then
/// return target + scaled noise per channel. `snr_db = +inf` returns the
/// target unchanged.
pub fn mix_at_snr(target: &[Vec<f64>], noise: &[Vec<f64>], snr_db: f64) -> Result<Vec<Vec<f64>>> {
    if snr_db == INFINITE_SNR {
        return Ok(target.to_vec());
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidInput("snr_db is NaN".into()));
    }
    if target.len() != noise.len() || target.is_empty() {
        return Err(Error::InvalidInput(format!(
            "channel count mismatch: target {} vs noise {}",
            target.len(),
            noise.len()
        )));
    }
    if target
        .iter()
        .zip(noise)
        .any(|(t, n)| t.len() != n.len() || t.len() != target[0].len())
    {
        return Err(Error::InvalidInput("channel length mismatch".into()));
    }
    let et = energy(&target[0]);
    let en = energy(&noise[0]);
    if en == 0.0 {
        return Err(Error::DegenerateInput("zero-energy noise".into()));
    }
    if et == 0.0 {
        return Err(Error::DegenerateInput("zero-energy target".into()));
    }
    let alpha = (et / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(target
        .iter()
        .zip(noise)
        .map(|(t, n)| t.iter().zip(n).map(|(a, b)| a + alpha * b).collect())
        .collect())
}

/// On-device fixed beamformer: advance every channel toward the assumed
/// azimuth and average (delay-and-sum, 1/M scaling).
pub fn compute_primary_channel(
    mic_waveforms: &[Vec<f64>],
    geometry: &ArrayGeometry,
    assumed_azimuth: f64,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    geometry.validate()?;
    if mic_waveforms.len() != geometry.num_mics() {
        return Err(Error::InvalidInput(format!(
            "got {} channels for {} microphones",
            mic_waveforms.len(),
            geometry.num_mics()
        )));
    }
    if mic_waveforms[0].is_empty() {
        return Err(Error::InvalidInput("empty input".into()));
    }
    let n = mic_waveforms[0].len();
    if mic_waveforms.iter().any(|w| w.len() != n) {
        return Err(Error::InvalidInput("channel length mismatch".into()));
    }
    let m = mic_waveforms.len() as f64;
    let mut out = vec![0.0; n];
    for (mi, w) in mic_waveforms.iter().enumerate() {
        let tau = geometry.delay_secs(mi, assumed_azimuth);
        let aligned = if tau == 0.0 {
            w.clone()
        } else {
            fractional_delay(w, -tau * f64::from(sample_rate))
        };
        for (o, v) in out.iter_mut().zip(&aligned) {
            *o += v / m;
        }
    }
    Ok(out)
}

/// Frame-alignment and tone-table parameters for utterance synthesis. The
/// frame fields mirror the feature extractor so labels land exactly one per
/// stacked frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub num_bins: usize,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub stack: usize,
    pub num_classes: usize,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stack == 0 || self.hop_samples == 0 || self.window_samples == 0 {
            return Err(Error::Config("frame parameters must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for c in 0..self.num_classes {
            if class_tone_bins(c).iter().any(|&b| b >= self.num_bins) {
                return Err(Error::Config(format!(
                    "tone bins for class {c} exceed num_bins {}",
                    self.num_bins
                )));
            }
        }
        Ok(())
    }

    /// Samples needed so `frames` stacked frames exist with no padding:
    /// T = stack * frames analysis frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.hop_samples * (self.stack * frames - 1) + self.window_samples
    }

    /// Samples owned by one stacked frame (the label segment length).
    pub fn segment_samples(&self) -> usize {
        self.stack * self.hop_samples
    }
}

/// Frequency bins carrying the three tones of one class. Distinct per class,
/// all below bin 52 so they stay inside a 64-bin feature space.
pub fn class_tone_bins(class: usize) -> [usize; 3] {
    [5 + class, 15 + 2 * class, 30 + 3 * class]
}

/// Class-dependent multi-tone waveform: each stacked-frame segment plays the
/// three tones of its class, with per-(class, tone) random phase.
fn tone_waveform(
    class_sequence: &[usize],
    cfg: &SynthesisConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let n = cfg.samples_for_frames(class_sequence.len());
    let seg = cfg.segment_samples();
    // Fixed draw order over every class keeps the stream layout independent
    // of which classes actually appear.
    let phases: Vec<[f64; 3]> = (0..cfg.num_classes)
        .map(|_| {
            [
                rng::uniform(rng, 0.0, 2.0 * PI),
                rng::uniform(rng, 0.0, 2.0 * PI),
                rng::uniform(rng, 0.0, 2.0 * PI),
            ]
        })
        .collect();
    let mut out = vec![0.0; n];
    for (i, v) in out.iter_mut().enumerate() {
        let class = class_sequence[(i / seg).min(class_sequence.len() - 1)];
        let bins = class_tone_bins(class);
        let mut s = 0.0;
        for (tone, &b) in bins.iter().enumerate() {
            let w = 2.0 * PI * b as f64 / cfg.fft_size as f64;
            s += (w * i as f64 + phases[class][tone]).sin();
        }
        *v = s / 3.0;
    }
    out
}

/// Synthesize one three-channel utterance: target plus interferers mixed at
/// the requested SNR (measured on the primary channel), primary channel from
/// the on-device delay-and-sum, labels one per stacked frame. Deterministic
/// in `seed`.
pub fn synthesize_utterance(
    target: &SourceSpec,
    interferers: &[SourceSpec],
    geometry: &ArrayGeometry,
    cfg: &SynthesisConfig,
    snr_db: f64,
    seed: u64,
    utterance_id: &str,
) -> Result<MultiChannelUtterance> {
    cfg.validate()?;
    geometry.validate()?;
    if geometry.num_mics() != 2 {
        return Err(Error::InvalidInput(
            "utterance synthesis expects a two-microphone geometry".into(),
        ));
    }
    if target.kind != SourceKind::Target {
        return Err(Error::InvalidInput("target spec must have kind Target".into()));
    }
    if target.class_sequence.is_empty() {
        return Err(Error::InvalidInput("empty class_sequence".into()));
    }
    target.validate(cfg.num_classes)?;
    for spec in interferers {
        if spec.kind == SourceKind::Target {
            return Err(Error::InvalidInput("interferer with kind Target".into()));
        }
        spec.validate(cfg.num_classes)?;
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidInput("snr_db is NaN".into()));
    }

    let n = cfg.samples_for_frames(target.class_sequence.len());
    let mics = geometry.num_mics();

    // Target at the microphones.
    let mut rng_t = rng::rng_from_seed(derive_seed(seed, 0));
    let target_gain = 10f64.powf(target.level_db / 20.0);
    let mut target_wave = tone_waveform(&target.class_sequence, cfg, &mut rng_t);
    for v in target_wave.iter_mut() {
        *v *= target_gain;
    }
    let target_mics = simulate_propagation(&target_wave, target.azimuth, geometry, cfg.sample_rate)?;

    // Sum of interferers at the microphones.
    let mut noise_mics = vec![vec![0.0; n]; mics];
    let mut have_noise = false;
    for (j, spec) in interferers.iter().enumerate() {
        let mut rng_i = rng::rng_from_seed(derive_seed(seed, 1 + j as u64));
        let gain = 10f64.powf(spec.level_db / 20.0);
        match spec.kind {
            SourceKind::DirectionalInterferer => {
                if spec.class_sequence.len() != target.class_sequence.len() {
                    return Err(Error::InvalidInput(
                        "interferer class_sequence length differs from target".into(),
                    ));
                }
                let wave = tone_waveform(&spec.class_sequence, cfg, &mut rng_i);
                let prop = simulate_propagation(&wave, spec.azimuth, geometry, cfg.sample_rate)?;
                for (acc, ch) in noise_mics.iter_mut().zip(&prop) {
                    for (a, v) in acc.iter_mut().zip(ch) {
                        *a += gain * v;
                    }
                }
            }
            SourceKind::DiffuseNoise => {
                for acc in noise_mics.iter_mut() {
                    for a in acc.iter_mut() {
                        *a += gain * rng::standard_normal(&mut rng_i);
                    }
                }
            }
            SourceKind::Target => unreachable!(),
        }
        have_noise = true;
    }

    // Primary channels of the clean components, then mix at the target SNR.
    let target_primary =
        compute_primary_channel(&target_mics, geometry, target.azimuth, cfg.sample_rate)?;
    let target_stack = vec![
        target_primary,
        target_mics[0].clone(),
        target_mics[1].clone(),
    ];
    let mixed = if have_noise {
        let noise_primary =
            compute_primary_channel(&noise_mics, geometry, target.azimuth, cfg.sample_rate)?;
        let noise_stack = vec![noise_primary, noise_mics[0].clone(), noise_mics[1].clone()];
        mix_at_snr(&target_stack, &noise_stack, snr_db)?
    } else {
        if snr_db != INFINITE_SNR {
            return Err(Error::DegenerateInput(
                "finite snr_db requested but no interferers given".into(),
            ));
        }
        target_stack
    };

    let mut channels = mixed.into_iter();
    let utt = MultiChannelUtterance {
        utterance_id: utterance_id.to_string(),
        sample_rate: cfg.sample_rate,
        primary: channels.next().unwrap(),
        auxiliary: channels.collect(),
        labels: target.class_sequence.clone(),
        snr_db,
    };
    utt.validate()?;
    Ok(utt)
}
