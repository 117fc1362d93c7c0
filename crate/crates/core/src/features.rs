//! Feature extraction shared by both frontends: global mean/variance
//! normalization, complex STFT, low-frame-rate stacking, log-power, and the
//! frequency-major reordering applied before the frequency LSTMs.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_sim::MultiChannelUtterance;

/// STFT and stacking parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub fft_size: usize,
    /// Bins kept per frame (lowest `num_bins` of the transform).
    pub num_bins: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    /// Consecutive frames stacked into one model step.
    pub stack: usize,
    pub log_floor: f64,
}

impl FeatureConfig {
    /// 512-point transform keeping 256 bins, 25 ms windows at 10 ms hops,
    /// stack of three.
    pub fn paper_scale() -> Self {
        FeatureConfig {
            fft_size: 512,
            num_bins: 256,
            window_ms: 25.0,
            hop_ms: 10.0,
            stack: 3,
            log_floor: 1e-10,
        }
    }

    /// Small configuration for fast end-to-end runs: same framing, 64 bins.
    pub fn desk() -> Self {
        FeatureConfig {
            num_bins: 64,
            ..FeatureConfig::paper_scale()
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.num_bins == 0 || self.num_bins > self.fft_size / 2 + 1 {
            return Err(Error::Config(format!(
                "num_bins {} must be in 1..={}",
                self.num_bins,
                self.fft_size / 2 + 1
            )));
        }
        if self.stack == 0 {
            return Err(Error::Config("stack must be >= 1".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        let window = self.window_samples(sample_rate);
        if window == 0 || self.hop_samples(sample_rate) == 0 {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        if window > self.fft_size {
            return Err(Error::Config(format!(
                "window ({window} samples) exceeds fft_size {}",
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * f64::from(sample_rate) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * f64::from(sample_rate) / 1000.0).round() as usize
    }

    /// Analysis frames for a waveform of `n` samples.
    pub fn num_frames(&self, n: usize, sample_rate: u32) -> Result<usize> {
        let window = self.window_samples(sample_rate);
        if n < window {
            return Err(Error::InvalidInput(format!(
                "waveform of {n} samples shorter than the {window}-sample window"
            )));
        }
        Ok((n - window) / self.hop_samples(sample_rate) + 1)
    }

    /// Stacked frames for `t` analysis frames (last group padded).
    pub fn num_stacked(&self, t: usize) -> usize {
        t.div_ceil(self.stack)
    }
}

/// Which input stream a waveform or spectrogram came from. Normalization
/// statistics are tracked per role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelRole {
    Primary,
    Aux1,
    Aux2,
}

/// Corpus-level mean and variance of raw waveform samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmv {
    pub mean: f64,
    pub variance: f64,
}

impl Gmv {
    pub fn identity() -> Self {
        Gmv {
            mean: 0.0,
            variance: 1.0,
        }
    }
}

/// Global mean/variance per channel role. Auxiliary stats exist only when
/// the corpus contains multi-channel utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub primary: Gmv,
    pub aux1: Option<Gmv>,
    pub aux2: Option<Gmv>,
}

impl NormalizationStats {
    pub fn identity() -> Self {
        NormalizationStats {
            primary: Gmv::identity(),
            aux1: Some(Gmv::identity()),
            aux2: Some(Gmv::identity()),
        }
    }

    pub fn for_role(&self, role: ChannelRole) -> Result<Gmv> {
        match role {
            ChannelRole::Primary => Ok(self.primary),
            ChannelRole::Aux1 => self.aux1.ok_or_else(|| {
                Error::Config(
                    "no aux1 normalization stats (corpus had no multi-channel data)".into(),
                )
            }),
            ChannelRole::Aux2 => self.aux2.ok_or_else(|| {
                Error::Config(
                    "no aux2 normalization stats (corpus had no multi-channel data)".into(),
                )
            }),
        }
    }
}

const VARIANCE_FLOOR: f64 = 1e-8;

/// Pooled waveform mean/variance over a corpus, computed separately for the
/// primary and each auxiliary role. Variance is floored at 1e-8 so constant
/// corpora stay usable.
pub fn compute_gmv_stats<'a, I>(utterances: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a MultiChannelUtterance>,
{
    struct Acc {
        sum: f64,
        sumsq: f64,
        count: u64,
    }
    impl Acc {
        fn new() -> Self {
            Acc {
                sum: 0.0,
                sumsq: 0.0,
                count: 0,
            }
        }
        fn push_all(&mut self, xs: &[f64]) {
            for &x in xs {
                self.sum += x;
                self.sumsq += x * x;
            }
            self.count += xs.len() as u64;
        }
        fn finish(&self) -> Option<Gmv> {
            if self.count == 0 {
                return None;
            }
            let n = self.count as f64;
            let mean = self.sum / n;
            let variance = (self.sumsq / n - mean * mean).max(VARIANCE_FLOOR);
            Some(Gmv { mean, variance })
        }
    }

    let mut primary = Acc::new();
    let mut aux1 = Acc::new();
    let mut aux2 = Acc::new();
    for utt in utterances {
        primary.push_all(&utt.primary);
        if utt.is_multi_channel() {
            aux1.push_all(&utt.auxiliary[0]);
            aux2.push_all(&utt.auxiliary[1]);
        }
    }
    let primary = primary
        .finish()
        .ok_or_else(|| Error::InvalidInput("empty corpus".into()))?;
    Ok(NormalizationStats {
        primary,
        aux1: aux1.finish(),
        aux2: aux2.finish(),
    })
}

/// Complex STFT of one channel: `frames[(t, k)]` holds bin `k` of frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: Array2<Complex64>,
    pub hop: usize,
    pub role: ChannelRole,
}

impl ComplexSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }
}

pub(crate) fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Normalize by the role's global stats, window (periodic Hann), transform,
/// keep the lowest `num_bins` bins.
pub fn stft(
    waveform: &[f64],
    config: &FeatureConfig,
    sample_rate: u32,
    gmv: &Gmv,
    role: ChannelRole,
) -> Result<ComplexSpectrogram> {
    config.validate(sample_rate)?;
    let window = config.window_samples(sample_rate);
    let hop = config.hop_samples(sample_rate);
    let t = config.num_frames(waveform.len(), sample_rate)?;
    let win = periodic_hann(window);
    let inv_std = 1.0 / gmv.variance.sqrt();

    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(config.fft_size);
    let mut frames = Array2::from_elem((t, config.num_bins), Complex64::new(0.0, 0.0));
    let mut buf = vec![Complex64::new(0.0, 0.0); config.fft_size];
    for ti in 0..t {
        let start = ti * hop;
        for b in buf.iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        for i in 0..window {
            let x = (waveform[start + i] - gmv.mean) * inv_std;
            buf[i] = Complex64::new(x * win[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..config.num_bins {
            frames[(ti, k)] = buf[k];
        }
    }
    if frames.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numerical("non-finite STFT output".into()));
    }
    Ok(ComplexSpectrogram { frames, hop, role })
}

/// Group `stack` consecutive frames into one vector (frame-major layout:
/// frame r of the group occupies indices `r*K..(r+1)*K`). The last group is
/// padded by repeating the final frame.
pub fn stack_frames(spec: &ComplexSpectrogram, stack: usize) -> Vec<Vec<Complex64>> {
    let t = spec.num_frames();
    let k = spec.num_bins();
    let s = t.div_ceil(stack);
    let mut out = Vec::with_capacity(s);
    for si in 0..s {
        let mut v = Vec::with_capacity(stack * k);
        for r in 0..stack {
            let ti = (si * stack + r).min(t - 1);
            v.extend(spec.frames.row(ti).iter().copied());
        }
        out.push(v);
    }
    out
}

/// Elementwise ln(|z|^2 + floor).
pub fn log_power(values: &[Complex64], log_floor: f64) -> Vec<f64> {
    values
        .iter()
        .map(|z| (z.norm_sqr() + log_floor).ln())
        .collect()
}

/// Gradient of [`log_power`] with respect to the real and imaginary parts of
/// each input, packed as a complex number (re = dL/d re z, im = dL/d im z).
pub fn log_power_backward(values: &[Complex64], log_floor: f64, d_out: &[f64]) -> Vec<Complex64> {
    values
        .iter()
        .zip(d_out)
        .map(|(z, g)| {
            let denom = z.norm_sqr() + log_floor;
            Complex64::new(2.0 * z.re * g / denom, 2.0 * z.im * g / denom)
        })
        .collect()
}

/// Whether a stacked frame is still in its natural (frame-major) layout or
/// has been permuted to the frequency-major layout the FLSTMs consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderingTag {
    Raw,
    Reordered,
}

/// One stacked feature frame (real-valued, after log-power).
#[derive(Clone, Debug, PartialEq)]
pub struct StackedFrame {
    pub values: Vec<f64>,
    pub tag: OrderingTag,
}

/// Permutation taking the raw layout (channel-major, then frame, then
/// frequency: index `(c*stack + r)*K + k`) to the frequency-major layout
/// (index `k*channels*stack + c*stack + r`). `perm[raw] = reordered`.
pub fn reorder_permutation(num_bins: usize, stack: usize, channels: usize) -> Vec<usize> {
    let len = num_bins * stack * channels;
    let mut perm = vec![0; len];
    for c in 0..channels {
        for r in 0..stack {
            for k in 0..num_bins {
                let raw = (c * stack + r) * num_bins + k;
                perm[raw] = k * channels * stack + c * stack + r;
            }
        }
    }
    perm
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn apply_permutation(values: &[f64], perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = values[i];
    }
    out
}

fn reorder(
    frame: &StackedFrame,
    num_bins: usize,
    stack: usize,
    channels: usize,
) -> Result<StackedFrame> {
    if frame.tag != OrderingTag::Raw {
        return Err(Error::InvalidInput("frame is already reordered".into()));
    }
    let expect = num_bins * stack * channels;
    if frame.values.len() != expect {
        return Err(Error::InvalidInput(format!(
            "stacked frame length {} != {expect}",
            frame.values.len()
        )));
    }
    let perm = reorder_permutation(num_bins, stack, channels);
    Ok(StackedFrame {
        values: apply_permutation(&frame.values, &perm),
        tag: OrderingTag::Reordered,
    })
}

/// Single-channel reorder: (frame r, bin k) moves from `r*K + k` to
/// `k*stack + r`, clustering equal frequencies.
pub fn reorder_sc(frame: &StackedFrame, num_bins: usize, stack: usize) -> Result<StackedFrame> {
    reorder(frame, num_bins, stack, 1)
}

/// Multi-channel reorder over look directions plus the primary channel:
/// (channel c, frame r, bin k) moves from `(c*stack + r)*K + k` to
/// `k*channels*stack + c*stack + r`.
pub fn reorder_mc(
    frame: &StackedFrame,
    num_bins: usize,
    stack: usize,
    channels: usize,
) -> Result<StackedFrame> {
    reorder(frame, num_bins, stack, channels)
}

/// Full single-channel feature pipeline after the STFT: stack, log-power,
/// reorder. Returns the frames plus the stacked complex values needed by the
/// backward pass.
pub fn sc_feature_frames(
    spec: &ComplexSpectrogram,
    config: &FeatureConfig,
) -> (Vec<StackedFrame>, ScFeatureCache) {
    let stacked = stack_frames(spec, config.stack);
    let perm = reorder_permutation(config.num_bins, config.stack, 1);
    let frames = stacked
        .iter()
        .map(|v| StackedFrame {
            values: apply_permutation(&log_power(v, config.log_floor), &perm),
            tag: OrderingTag::Reordered,
        })
        .collect();
    let cache = ScFeatureCache {
        stacked,
        t_frames: spec.num_frames(),
    };
    (frames, cache)
}

/// Complex stacked values retained for the feature backward pass.
#[derive(Clone, Debug)]
pub struct ScFeatureCache {
    pub stacked: Vec<Vec<Complex64>>,
    pub t_frames: usize,
}
