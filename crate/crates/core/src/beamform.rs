//! Neural beamforming layer.
//!
//! A block affine transform over the auxiliary-channel spectra: for every
//! look direction d and frequency bin k,
//!
//!   Y_d(w_k) = w^H(w_k, p_d) X(w_k) + b_{d,k}
//!
//! with complex weights w (one per microphone) and a complex bias. The
//! weights are trained as independent real/imaginary parts, equivalent to
//! Wirtinger calculus for real-valued losses, and are initialized with
//! super-directive beamformer weights: an MVDR solution under a diffuse
//! (spherically isotropic) noise field,
//!
//!   w = (Gamma + lambda I)^-1 v / (v^H (Gamma + lambda I)^-1 v),
//!
//! where Gamma_ij = sinc(w_k |p_i - p_j| / c) and v is the steering vector.
//! The log-power features of the look directions and of the primary channel
//! are concatenated and reordered for the multi-channel frequency LSTM.

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    apply_permutation, inverse_permutation, log_power, log_power_backward, reorder_permutation,
    ComplexSpectrogram, FeatureConfig, OrderingTag, StackedFrame,
};
use crate::signal_sim::ArrayGeometry;

/// Steering directions of the beamformer, strictly increasing azimuths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookDirectionGrid {
    pub azimuths: Vec<f64>,
}

impl LookDirectionGrid {
    /// `d` azimuths uniform over [0, 2pi).
    pub fn uniform(d: usize) -> Self {
        LookDirectionGrid {
            azimuths: (0..d)
                .map(|i| 2.0 * std::f64::consts::PI * i as f64 / d as f64)
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuths.is_empty() {
            return Err(Error::Config("need at least one look direction".into()));
        }
        if !self.azimuths.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("azimuths must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.azimuths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.azimuths.is_empty()
    }
}

/// Per-frequency phase pattern of a plane wave across the array.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector {
    pub values: Vec<Complex64>,
}

/// Angular frequency of bin `k`.
pub fn omega_for_bin(k: usize, sample_rate: u32, fft_size: usize) -> f64 {
    2.0 * std::f64::consts::PI * k as f64 * f64::from(sample_rate) / fft_size as f64
}

/// Entry m is exp(-j w tau_m(azimuth)), matching the propagation model's
/// delay convention.
pub fn steering_vector(geometry: &ArrayGeometry, azimuth: f64, omega: f64) -> SteeringVector {
    SteeringVector {
        values: (0..geometry.num_mics())
            .map(|m| Complex64::from_polar(1.0, -omega * geometry.delay_secs(m, azimuth)))
            .collect(),
    }
}

/// Diffuse-field coherence matrix at one frequency:
/// Gamma_ij = sinc(w |p_i - p_j| / c).
fn diffuse_coherence(geometry: &ArrayGeometry, omega: f64) -> Array2<f64> {
    let m = geometry.num_mics();
    Array2::from_shape_fn((m, m), |(i, j)| {
        let pi = geometry.mic_positions[i];
        let pj = geometry.mic_positions[j];
        let dist = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2) + (pi[2] - pj[2]).powi(2))
            .sqrt();
        let x = omega * dist / geometry.speed_of_sound;
        if x.abs() < 1e-12 {
            1.0
        } else {
            x.sin() / x
        }
    })
}

/// Solve A x = b for a small complex system by Gaussian elimination with
/// partial pivoting.
fn solve_complex(mut a: Array2<Complex64>, mut b: Vec<Complex64>) -> Result<Vec<Complex64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].norm().total_cmp(&a[(j, col)].norm()))
            .unwrap();
        if a[(pivot, col)].norm() < 1e-14 {
            return Err(Error::Numerical("singular system in beamformer init".into()));
        }
        if pivot != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(pivot, j)];
                a[(pivot, j)] = tmp;
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = a[(row, col)] / a[(col, col)];
            for j in col..n {
                let v = a[(col, j)];
                a[(row, j)] -= factor * v;
            }
            let bv = b[col];
            b[row] -= factor * bv;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[(row, j)] * x[j];
        }
        x[row] = acc / a[(row, row)];
    }
    Ok(x)
}

/// Distortionless minimum-variance weight for one (direction, frequency):
/// w = (Gamma + lambda I)^-1 v / (v^H (Gamma + lambda I)^-1 v). The loading
/// is `loading * trace(Gamma) / M` on the diagonal.
pub fn mvdr_weight(
    coherence: ArrayView2<f64>,
    steering: &[Complex64],
    loading: f64,
) -> Result<Vec<Complex64>> {
    let m = steering.len();
    let trace: f64 = (0..m).map(|i| coherence[(i, i)]).sum();
    let lambda = loading * trace / m as f64;
    let a = Array2::from_shape_fn((m, m), |(i, j)| {
        let diag = if i == j { lambda } else { 0.0 };
        Complex64::new(coherence[(i, j)] + diag, 0.0)
    });
    let x = solve_complex(a, steering.to_vec())?;
    let vhx: Complex64 = steering
        .iter()
        .zip(&x)
        .map(|(v, xi)| v.conj() * xi)
        .sum();
    if vhx.norm() < 1e-14 {
        return Err(Error::Numerical("degenerate normalization in beamformer init".into()));
    }
    Ok(x.into_iter().map(|xi| xi / vhx).collect())
}

/// The trainable block affine transform's parameters: complex weights
/// indexed (direction, frequency, microphone) and a complex bias per
/// (direction, frequency), stored as independent real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformerWeights {
    pub dirs: usize,
    pub bins: usize,
    pub mics: usize,
    pub w_re: Vec<f64>,
    pub w_im: Vec<f64>,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
}

impl BeamformerWeights {
    pub fn zeros(dirs: usize, bins: usize, mics: usize) -> Self {
        BeamformerWeights {
            dirs,
            bins,
            mics,
            w_re: vec![0.0; dirs * bins * mics],
            w_im: vec![0.0; dirs * bins * mics],
            b_re: vec![0.0; dirs * bins],
            b_im: vec![0.0; dirs * bins],
        }
    }

    /// Super-directive initialization across all directions and bins; bias
    /// zero. Must succeed for any loading >= 1e-4.
    pub fn superdirective(
        geometry: &ArrayGeometry,
        grid: &LookDirectionGrid,
        num_bins: usize,
        sample_rate: u32,
        fft_size: usize,
        loading: f64,
    ) -> Result<Self> {
        geometry.validate()?;
        grid.validate()?;
        if !(loading > 0.0) {
            return Err(Error::Config("diagonal loading must be positive".into()));
        }
        let mics = geometry.num_mics();
        let mut out = BeamformerWeights::zeros(grid.len(), num_bins, mics);
        for k in 0..num_bins {
            let omega = omega_for_bin(k, sample_rate, fft_size);
            let gamma = diffuse_coherence(geometry, omega);
            for (d, &azimuth) in grid.azimuths.iter().enumerate() {
                let v = steering_vector(geometry, azimuth, omega);
                let w = mvdr_weight(gamma.view(), &v.values, loading)?;
                for (m, wm) in w.iter().enumerate() {
                    let idx = out.w_index(d, k, m);
                    out.w_re[idx] = wm.re;
                    out.w_im[idx] = wm.im;
                }
            }
        }
        Ok(out)
    }

    pub fn w_index(&self, d: usize, k: usize, m: usize) -> usize {
        (d * self.bins + k) * self.mics + m
    }

    pub fn b_index(&self, d: usize, k: usize) -> usize {
        d * self.bins + k
    }

    pub fn w(&self, d: usize, k: usize, m: usize) -> Complex64 {
        let i = self.w_index(d, k, m);
        Complex64::new(self.w_re[i], self.w_im[i])
    }

    pub fn bias(&self, d: usize, k: usize) -> Complex64 {
        let i = self.b_index(d, k);
        Complex64::new(self.b_re[i], self.b_im[i])
    }

    pub fn as_ref(&self) -> BatRef<'_> {
        BatRef {
            dirs: self.dirs,
            bins: self.bins,
            mics: self.mics,
            w_re: &self.w_re,
            w_im: &self.w_im,
            b_re: &self.b_re,
            b_im: &self.b_im,
        }
    }
}

/// Borrowed view of the transform's parameters (typically slices owned by a
/// parameter store).
#[derive(Clone, Copy, Debug)]
pub struct BatRef<'a> {
    pub dirs: usize,
    pub bins: usize,
    pub mics: usize,
    pub w_re: &'a [f64],
    pub w_im: &'a [f64],
    pub b_re: &'a [f64],
    pub b_im: &'a [f64],
}

impl<'a> BatRef<'a> {
    fn w(&self, d: usize, k: usize, m: usize) -> Complex64 {
        let i = (d * self.bins + k) * self.mics + m;
        Complex64::new(self.w_re[i], self.w_im[i])
    }

    fn bias(&self, d: usize, k: usize) -> Complex64 {
        let i = d * self.bins + k;
        Complex64::new(self.b_re[i], self.b_im[i])
    }

    fn validate_against(&self, aux: &[&ComplexSpectrogram]) -> Result<usize> {
        if aux.len() != self.mics {
            return Err(Error::InvalidInput(format!(
                "expected {} auxiliary spectrograms, got {}",
                self.mics,
                aux.len()
            )));
        }
        let t = aux[0].num_frames();
        for s in aux {
            if s.num_frames() != t {
                return Err(Error::InvalidInput("frame count mismatch across channels".into()));
            }
            if s.num_bins() != self.bins {
                return Err(Error::InvalidInput(format!(
                    "spectrogram has {} bins, weights expect {}",
                    s.num_bins(),
                    self.bins
                )));
            }
        }
        Ok(t)
    }
}

/// Apply the transform at frame `t`: a (dirs x bins) complex output.
pub fn apply_bat(
    bat: &BatRef<'_>,
    aux: &[&ComplexSpectrogram],
    t: usize,
) -> Result<Array2<Complex64>> {
    let frames = bat.validate_against(aux)?;
    if t >= frames {
        return Err(Error::InvalidInput(format!("frame {t} out of range ({frames})")));
    }
    let mut y = Array2::from_elem((bat.dirs, bat.bins), Complex64::new(0.0, 0.0));
    for d in 0..bat.dirs {
        for k in 0..bat.bins {
            let mut acc = bat.bias(d, k);
            for (m, spec) in aux.iter().enumerate() {
                acc += bat.w(d, k, m).conj() * spec.frames[(t, k)];
            }
            y[(d, k)] = acc;
        }
    }
    Ok(y)
}

/// Apply the transform to every frame: (frames x dirs x bins).
pub fn bat_forward(bat: &BatRef<'_>, aux: &[&ComplexSpectrogram]) -> Result<Array3<Complex64>> {
    let t = bat.validate_against(aux)?;
    let mut y = Array3::from_elem((t, bat.dirs, bat.bins), Complex64::new(0.0, 0.0));
    for ti in 0..t {
        for d in 0..bat.dirs {
            for k in 0..bat.bins {
                let mut acc = bat.bias(d, k);
                for (m, spec) in aux.iter().enumerate() {
                    acc += bat.w(d, k, m).conj() * spec.frames[(ti, k)];
                }
                y[(ti, d, k)] = acc;
            }
        }
    }
    Ok(y)
}

/// Gradients of a real loss with respect to the transform's real/imaginary
/// parameters and its complex input. Gradient complex numbers pack
/// (dL/d re, dL/d im).
#[derive(Clone, Debug)]
pub struct BatGrads {
    pub w_re: Vec<f64>,
    pub w_im: Vec<f64>,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
    pub x: Vec<Array2<Complex64>>,
}

/// Backward pass of [`bat_forward`]. `d_y[(t, d, k)]` packs the loss
/// gradient with respect to the real and imaginary parts of Y.
pub fn bat_backward(
    bat: &BatRef<'_>,
    aux: &[&ComplexSpectrogram],
    d_y: &Array3<Complex64>,
) -> Result<BatGrads> {
    let t = bat.validate_against(aux)?;
    if d_y.shape() != [t, bat.dirs, bat.bins] {
        return Err(Error::InvalidInput("upstream gradient shape mismatch".into()));
    }
    let mut grads = BatGrads {
        w_re: vec![0.0; bat.w_re.len()],
        w_im: vec![0.0; bat.w_im.len()],
        b_re: vec![0.0; bat.b_re.len()],
        b_im: vec![0.0; bat.b_im.len()],
        x: aux
            .iter()
            .map(|s| Array2::from_elem((t, s.num_bins()), Complex64::new(0.0, 0.0)))
            .collect(),
    };
    for ti in 0..t {
        for d in 0..bat.dirs {
            for k in 0..bat.bins {
                let g = d_y[(ti, d, k)];
                let bi = d * bat.bins + k;
                grads.b_re[bi] += g.re;
                grads.b_im[bi] += g.im;
                for (m, spec) in aux.iter().enumerate() {
                    let x = spec.frames[(ti, k)];
                    let w = bat.w(d, k, m);
                    let wi = (d * bat.bins + k) * bat.mics + m;
                    // Y = conj(w) x: with w = a+ib, x = u+iv,
                    // Re Y = au + bv, Im Y = av - bu
                    grads.w_re[wi] += g.re * x.re + g.im * x.im;
                    grads.w_im[wi] += g.re * x.im - g.im * x.re;
                    let gx = &mut grads.x[m][(ti, k)];
                    gx.re += g.re * w.re - g.im * w.im;
                    gx.im += g.re * w.im + g.im * w.re;
                }
            }
        }
    }
    Ok(grads)
}

/// Stacked, log-power, frequency-major features over the look directions
/// plus the primary channel (channel order: directions 0..D-1, then
/// primary). Output length per frame: (D+1) * num_bins * stack.
pub fn assemble_mc_features(
    y: &Array3<Complex64>,
    primary: &ComplexSpectrogram,
    config: &FeatureConfig,
) -> Result<(Vec<StackedFrame>, McAssembleCache)> {
    let (t, dirs, bins) = y.dim();
    if primary.num_frames() != t {
        return Err(Error::InvalidInput(format!(
            "primary has {} frames, look directions have {t}",
            primary.num_frames()
        )));
    }
    if primary.num_bins() != bins || bins != config.num_bins {
        return Err(Error::InvalidInput("bin count mismatch".into()));
    }
    let channels = dirs + 1;
    let stack = config.stack;
    let s = t.div_ceil(stack);
    let perm = reorder_permutation(bins, stack, channels);

    let mut frames = Vec::with_capacity(s);
    let mut stacked_complex = Vec::with_capacity(s);
    for si in 0..s {
        let mut raw = Vec::with_capacity(channels * stack * bins);
        for c in 0..channels {
            for r in 0..stack {
                let ti = (si * stack + r).min(t - 1);
                for k in 0..bins {
                    let z = if c < dirs {
                        y[(ti, c, k)]
                    } else {
                        primary.frames[(ti, k)]
                    };
                    raw.push(z);
                }
            }
        }
        let lp = log_power(&raw, config.log_floor);
        frames.push(StackedFrame {
            values: apply_permutation(&lp, &perm),
            tag: OrderingTag::Reordered,
        });
        stacked_complex.push(raw);
    }
    Ok((
        frames,
        McAssembleCache {
            stacked_complex,
            t_frames: t,
            dirs,
            bins,
            stack,
            log_floor: config.log_floor,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct McAssembleCache {
    stacked_complex: Vec<Vec<Complex64>>,
    t_frames: usize,
    dirs: usize,
    bins: usize,
    stack: usize,
    log_floor: f64,
}

/// Backward pass of [`assemble_mc_features`]: routes frame gradients back to
/// the look-direction tensor and the primary spectrogram.
pub fn assemble_mc_backward(
    cache: &McAssembleCache,
    d_frames: &[Vec<f64>],
) -> (Array3<Complex64>, Array2<Complex64>) {
    let (t, dirs, bins, stack) = (cache.t_frames, cache.dirs, cache.bins, cache.stack);
    let channels = dirs + 1;
    let perm = reorder_permutation(bins, stack, channels);
    let inv = inverse_permutation(&perm);
    let mut d_y = Array3::from_elem((t, dirs, bins), Complex64::new(0.0, 0.0));
    let mut d_primary = Array2::from_elem((t, bins), Complex64::new(0.0, 0.0));
    for (si, d_frame) in d_frames.iter().enumerate() {
        let d_raw = apply_permutation(d_frame, &inv);
        let d_complex = log_power_backward(&cache.stacked_complex[si], cache.log_floor, &d_raw);
        let mut idx = 0;
        for c in 0..channels {
            for r in 0..stack {
                let ti = (si * stack + r).min(t - 1);
                for k in 0..bins {
                    let g = d_complex[idx];
                    idx += 1;
                    if c < dirs {
                        let acc = &mut d_y[(ti, c, k)];
                        acc.re += g.re;
                        acc.im += g.im;
                    } else {
                        let acc = &mut d_primary[(ti, k)];
                        acc.re += g.re;
                        acc.im += g.im;
                    }
                }
            }
        }
    }
    (d_y, d_primary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ChannelRole;
    use approx::assert_relative_eq;

    const FS: u32 = 16_000;
    const NFFT: usize = 512;

    fn geo() -> ArrayGeometry {
        ArrayGeometry::two_mic(0.1, 343.0)
    }

    #[test]
    fn steering_of_origin_mic_is_unity() {
        let g = ArrayGeometry::new(vec![[0.0, 0.0, 0.0]], 343.0).unwrap();
        for k in [0, 7, 200] {
            let v = steering_vector(&g, 1.1, omega_for_bin(k, FS, NFFT));
            assert!((v.values[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn steering_at_zero_frequency_is_all_ones() {
        let v = steering_vector(&geo(), 0.9, 0.0);
        for e in &v.values {
            assert!((e - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn steering_phase_difference_endfire_1khz() {
        // 0.1 m apart along the arrival direction at 1 kHz:
        // delta phase = 2 pi * 1000 * (0.1 / 343) = 1.8316 rad
        let omega = 2.0 * std::f64::consts::PI * 1000.0;
        let v = steering_vector(&geo(), 0.0, omega);
        let dphase = (v.values[0] * v.values[1].conj()).arg().abs();
        assert_relative_eq!(dphase, 2.0 * std::f64::consts::PI * 1000.0 * 0.1 / 343.0, epsilon = 1e-9);
    }

    #[test]
    fn single_mic_weights_are_unity() {
        let g = ArrayGeometry::new(vec![[0.0, 0.0, 0.0]], 343.0).unwrap();
        let grid = LookDirectionGrid::uniform(3);
        let w = BeamformerWeights::superdirective(&g, &grid, 16, FS, NFFT, 1e-2).unwrap();
        for d in 0..3 {
            for k in 0..16 {
                assert!((w.w(d, k, 0) - Complex64::new(1.0, 0.0)).norm() < 1e-10);
                assert_eq!(w.bias(d, k), Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn identity_coherence_reduces_to_delay_and_sum() {
        // with Gamma = I the minimum-variance solution is v / M
        let g = geo();
        let omega = omega_for_bin(40, FS, NFFT);
        let v = steering_vector(&g, 0.7, omega);
        let eye = Array2::eye(2);
        let w = mvdr_weight(eye.view(), &v.values, 1e-12).unwrap();
        for (wm, vm) in w.iter().zip(&v.values) {
            assert!((wm - vm / 2.0).norm() < 1e-9);
        }
    }

    /// Independent oracle: direct 2x2 complex solve via the explicit inverse.
    fn mvdr_2x2_oracle(gamma: &Array2<f64>, v: &[Complex64], loading: f64) -> Vec<Complex64> {
        let lam = loading * (gamma[(0, 0)] + gamma[(1, 1)]) / 2.0;
        let a = Complex64::new(gamma[(0, 0)] + lam, 0.0);
        let b = Complex64::new(gamma[(0, 1)], 0.0);
        let c = Complex64::new(gamma[(1, 0)], 0.0);
        let d = Complex64::new(gamma[(1, 1)] + lam, 0.0);
        let det = a * d - b * c;
        let x0 = (d * v[0] - b * v[1]) / det;
        let x1 = (-c * v[0] + a * v[1]) / det;
        let vhx = v[0].conj() * x0 + v[1].conj() * x1;
        vec![x0 / vhx, x1 / vhx]
    }

    #[test]
    fn superdirective_matches_direct_solve_and_is_distortionless() {
        let g = geo();
        let grid = LookDirectionGrid::uniform(12);
        let num_bins = 256;
        let w = BeamformerWeights::superdirective(&g, &grid, num_bins, FS, NFFT, 1e-2).unwrap();

        // broadside direction, bin 64 against the independent 2x2 oracle
        let d = 3; // 90 degrees
        let k = 64;
        let omega = omega_for_bin(k, FS, NFFT);
        let gamma = diffuse_coherence(&g, omega);
        let v = steering_vector(&g, grid.azimuths[d], omega);
        let oracle = mvdr_2x2_oracle(&gamma, &v.values, 1e-2);
        for m in 0..2 {
            assert!((w.w(d, k, m) - oracle[m]).norm() < 1e-10);
        }

        // distortionless across every direction and bin
        for d in 0..grid.len() {
            for k in 0..num_bins {
                let omega = omega_for_bin(k, FS, NFFT);
                let v = steering_vector(&g, grid.azimuths[d], omega);
                let gain: Complex64 = (0..2).map(|m| w.w(d, k, m).conj() * v.values[m]).sum();
                assert!(
                    (gain - Complex64::new(1.0, 0.0)).norm() <= 1e-8,
                    "direction {d} bin {k}: gain {gain}"
                );
            }
        }
    }

    #[test]
    fn superdirective_succeeds_at_small_loading() {
        let g = geo();
        let grid = LookDirectionGrid::uniform(12);
        assert!(BeamformerWeights::superdirective(&g, &grid, 64, FS, NFFT, 1e-4).is_ok());
    }

    fn spec_from(frames: Array2<Complex64>, role: ChannelRole) -> ComplexSpectrogram {
        ComplexSpectrogram {
            frames,
            hop: 160,
            role,
        }
    }

    #[test]
    fn bat_zero_input_zero_bias_gives_zero() {
        let w = BeamformerWeights::zeros(4, 8, 2);
        let aux1 = spec_from(Array2::from_elem((3, 8), Complex64::new(0.0, 0.0)), ChannelRole::Aux1);
        let aux2 = spec_from(Array2::from_elem((3, 8), Complex64::new(0.0, 0.0)), ChannelRole::Aux2);
        let y = apply_bat(&w.as_ref(), &[&aux1, &aux2], 1).unwrap();
        assert!(y.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn bat_mic_selector_passes_first_channel_through() {
        // w = e_1 for every (d, k): output equals channel 1's spectrum
        let mut w = BeamformerWeights::zeros(4, 8, 2);
        for d in 0..4 {
            for k in 0..8 {
                let i = w.w_index(d, k, 0);
                w.w_re[i] = 1.0;
            }
        }
        let mut rng = crate::rng::rng_from_seed(1);
        let rnd = |rng: &mut rand_chacha::ChaCha8Rng| {
            Complex64::new(
                crate::rng::uniform(rng, -1.0, 1.0),
                crate::rng::uniform(rng, -1.0, 1.0),
            )
        };
        let aux1 = spec_from(Array2::from_shape_fn((3, 8), |_| rnd(&mut rng)), ChannelRole::Aux1);
        let aux2 = spec_from(Array2::from_shape_fn((3, 8), |_| rnd(&mut rng)), ChannelRole::Aux2);
        for t in 0..3 {
            let y = apply_bat(&w.as_ref(), &[&aux1, &aux2], t).unwrap();
            for d in 0..4 {
                for k in 0..8 {
                    assert!((y[(d, k)] - aux1.frames[(t, k)]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bat_rejects_shape_mismatch() {
        let w = BeamformerWeights::zeros(4, 8, 2);
        let aux1 = spec_from(Array2::from_elem((3, 8), Complex64::new(0.0, 0.0)), ChannelRole::Aux1);
        assert!(apply_bat(&w.as_ref(), &[&aux1], 0).is_err());
        let short = spec_from(Array2::from_elem((3, 4), Complex64::new(0.0, 0.0)), ChannelRole::Aux2);
        assert!(apply_bat(&w.as_ref(), &[&aux1, &short], 0).is_err());
    }

    /// Mean per-direction power of the transform's response to a noiseless
    /// plane wave from `d_star`.
    fn beam_powers(
        w: &BeamformerWeights,
        g: &ArrayGeometry,
        grid: &LookDirectionGrid,
        bins: usize,
        d_star: usize,
    ) -> Vec<f64> {
        let mk = |m: usize| {
            spec_from(
                Array2::from_shape_fn((1, bins), |(_, k)| {
                    let omega = omega_for_bin(k, FS, NFFT);
                    steering_vector(g, grid.azimuths[d_star], omega).values[m]
                }),
                ChannelRole::Aux1,
            )
        };
        let aux1 = mk(0);
        let aux2 = mk(1);
        let y = apply_bat(&w.as_ref(), &[&aux1, &aux2], 0).unwrap();
        (0..grid.len())
            .map(|d| (0..bins).map(|k| y[(d, k)].norm_sqr()).sum::<f64>() / bins as f64)
            .collect()
    }

    #[test]
    fn delay_and_sum_beams_peak_at_the_source_direction() {
        // With Gamma = I the weights are v/M and |w_d^H v*| <= 1 by
        // Cauchy-Schwarz, with equality exactly on the source direction (and
        // its front-back mirror, which a two-mic line array cannot resolve).
        let g = geo();
        let grid = LookDirectionGrid::uniform(12);
        let bins = 64;
        let mut w = BeamformerWeights::zeros(12, bins, 2);
        let eye = Array2::eye(2);
        for k in 0..bins {
            let omega = omega_for_bin(k, FS, NFFT);
            for (d, &az) in grid.azimuths.iter().enumerate() {
                let v = steering_vector(&g, az, omega);
                let wm = mvdr_weight(eye.view(), &v.values, 1e-12).unwrap();
                for m in 0..2 {
                    let i = w.w_index(d, k, m);
                    w.w_re[i] = wm[m].re;
                    w.w_im[i] = wm[m].im;
                }
            }
        }
        for d_star in 0..12 {
            let mean_pow = beam_powers(&w, &g, &grid, bins, d_star);
            let best = mean_pow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(
                mean_pow[d_star] >= best - 1e-9,
                "direction {d_star}: {mean_pow:?}"
            );
            let argmax = mean_pow
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let mirror = (12 - d_star) % 12;
            assert!(
                argmax == d_star || argmax == mirror,
                "direction {d_star}: argmax {argmax}"
            );
        }
    }

    #[test]
    fn superdirective_beams_hold_unit_gain_and_suppress_far_sources() {
        // Super-directive beams are distortionless on their own direction
        // (response exactly 1 at every bin) but may exceed unit response for
        // nearby directions at low frequencies, so the discriminative check
        // is against well-separated beams. A two-mic line array resolves
        // directions only through cos(azimuth), so separation is measured
        // there.
        let g = geo();
        let grid = LookDirectionGrid::uniform(12);
        let bins = 64;
        let w = BeamformerWeights::superdirective(&g, &grid, bins, FS, NFFT, 1e-2).unwrap();
        for d_star in 0..12 {
            let mean_pow = beam_powers(&w, &g, &grid, bins, d_star);
            assert_relative_eq!(mean_pow[d_star], 1.0, epsilon = 1e-10);
            for d in 0..12 {
                let sep = (grid.azimuths[d].cos() - grid.azimuths[d_star].cos()).abs();
                if sep >= 1.0 {
                    assert!(
                        mean_pow[d] < mean_pow[d_star],
                        "source {d_star}, beam {d}: {mean_pow:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn bat_backward_zero_upstream_gives_zero_grads() {
        let w = BeamformerWeights::zeros(2, 3, 2);
        let mut rng = crate::rng::rng_from_seed(2);
        let rnd = |rng: &mut rand_chacha::ChaCha8Rng| {
            Complex64::new(
                crate::rng::uniform(rng, -1.0, 1.0),
                crate::rng::uniform(rng, -1.0, 1.0),
            )
        };
        let aux1 = spec_from(Array2::from_shape_fn((2, 3), |_| rnd(&mut rng)), ChannelRole::Aux1);
        let aux2 = spec_from(Array2::from_shape_fn((2, 3), |_| rnd(&mut rng)), ChannelRole::Aux2);
        let d_y = Array3::from_elem((2, 2, 3), Complex64::new(0.0, 0.0));
        let grads = bat_backward(&w.as_ref(), &[&aux1, &aux2], &d_y).unwrap();
        assert!(grads.w_re.iter().all(|&v| v == 0.0));
        assert!(grads.w_im.iter().all(|&v| v == 0.0));
        assert!(grads.b_re.iter().all(|&v| v == 0.0));
        assert!(grads.b_im.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bat_bias_gradient_is_upstream_pass_through() {
        let w = BeamformerWeights::zeros(2, 3, 2);
        let aux1 = spec_from(Array2::from_elem((1, 3), Complex64::new(0.5, 0.0)), ChannelRole::Aux1);
        let aux2 = spec_from(Array2::from_elem((1, 3), Complex64::new(0.0, 0.5)), ChannelRole::Aux2);
        let mut d_y = Array3::from_elem((1, 2, 3), Complex64::new(0.0, 0.0));
        d_y[(0, 1, 2)] = Complex64::new(2.0, -3.0);
        let grads = bat_backward(&w.as_ref(), &[&aux1, &aux2], &d_y).unwrap();
        assert_eq!(grads.b_re[1 * 3 + 2], 2.0);
        assert_eq!(grads.b_im[1 * 3 + 2], -3.0);
        assert!(grads.b_re.iter().sum::<f64>() == 2.0);
    }

    #[test]
    fn bat_backward_matches_finite_differences() {
        // random small case M=2, D=2, K=3; loss = sum of alpha*ReY + beta*ImY
        let (dirs, bins, mics, t) = (2, 3, 2, 2);
        let mut rng = crate::rng::rng_from_seed(3);
        let mut draw = |rng: &mut rand_chacha::ChaCha8Rng| crate::rng::uniform(rng, -1.0, 1.0);
        let mut w = BeamformerWeights::zeros(dirs, bins, mics);
        for v in w
            .w_re
            .iter_mut()
            .chain(w.w_im.iter_mut())
            .chain(w.b_re.iter_mut())
            .chain(w.b_im.iter_mut())
        {
            *v = draw(&mut rng);
        }
        let aux1 = spec_from(
            Array2::from_shape_fn((t, bins), |_| Complex64::new(draw(&mut rng), draw(&mut rng))),
            ChannelRole::Aux1,
        );
        let aux2 = spec_from(
            Array2::from_shape_fn((t, bins), |_| Complex64::new(draw(&mut rng), draw(&mut rng))),
            ChannelRole::Aux2,
        );
        let d_y = Array3::from_shape_fn((t, dirs, bins), |_| {
            Complex64::new(draw(&mut rng), draw(&mut rng))
        });
        let loss = |w: &BeamformerWeights, a1: &ComplexSpectrogram, a2: &ComplexSpectrogram| {
            let y = bat_forward(&w.as_ref(), &[a1, a2]).unwrap();
            y.iter()
                .zip(d_y.iter())
                .map(|(yv, g)| g.re * yv.re + g.im * yv.im)
                .sum::<f64>()
        };
        let analytic = bat_backward(&w.as_ref(), &[&aux1, &aux2], &d_y).unwrap();

        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut check = |analytic_v: f64, perturb: &mut dyn FnMut(f64) -> f64| {
            let lp = perturb(step);
            let lm = perturb(-step);
            let numeric = (lp - lm) / (2.0 * step);
            let rel = (analytic_v - numeric).abs() / analytic_v.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        };
        for i in 0..w.w_re.len() {
            let mut wc = w.clone();
            check(analytic.w_re[i], &mut |h| {
                wc.w_re[i] = w.w_re[i] + h;
                let l = loss(&wc, &aux1, &aux2);
                wc.w_re[i] = w.w_re[i];
                l
            });
            let mut wc = w.clone();
            check(analytic.w_im[i], &mut |h| {
                wc.w_im[i] = w.w_im[i] + h;
                let l = loss(&wc, &aux1, &aux2);
                wc.w_im[i] = w.w_im[i];
                l
            });
        }
        for i in 0..w.b_re.len() {
            let mut wc = w.clone();
            check(analytic.b_re[i], &mut |h| {
                wc.b_re[i] = w.b_re[i] + h;
                let l = loss(&wc, &aux1, &aux2);
                wc.b_re[i] = w.b_re[i];
                l
            });
        }
        // input gradient
        for ti in 0..t {
            for k in 0..bins {
                let mut a1 = aux1.clone();
                check(analytic.x[0][(ti, k)].re, &mut |h| {
                    a1.frames[(ti, k)].re = aux1.frames[(ti, k)].re + h;
                    let l = loss(&w, &a1, &aux2);
                    a1.frames[(ti, k)].re = aux1.frames[(ti, k)].re;
                    l
                });
                let mut a2 = aux2.clone();
                check(analytic.x[1][(ti, k)].im, &mut |h| {
                    a2.frames[(ti, k)].im = aux2.frames[(ti, k)].im + h;
                    let l = loss(&w, &aux1, &a2);
                    a2.frames[(ti, k)].im = aux2.frames[(ti, k)].im;
                    l
                });
            }
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn assembled_feature_lengths() {
        // 12 directions + primary at 256 bins, stack 3: 13 * 256 * 3 = 9984
        let cfg = FeatureConfig::paper_scale();
        let t = 5;
        let y = Array3::from_elem((t, 12, 256), Complex64::new(0.1, 0.0));
        let primary = spec_from(
            Array2::from_elem((t, 256), Complex64::new(0.2, 0.0)),
            ChannelRole::Primary,
        );
        let (frames, _) = assemble_mc_features(&y, &primary, &cfg).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].values.len(), 9984);
        assert_eq!(frames[0].tag, OrderingTag::Reordered);

        // scaled-down shape: one direction, one bin, stack 1: length 2
        let cfg = FeatureConfig {
            fft_size: 512,
            num_bins: 1,
            window_ms: 25.0,
            hop_ms: 10.0,
            stack: 1,
            log_floor: 1e-10,
        };
        let y = Array3::from_elem((2, 1, 1), Complex64::new(0.3, 0.0));
        let primary = spec_from(
            Array2::from_elem((2, 1), Complex64::new(0.4, 0.0)),
            ChannelRole::Primary,
        );
        let (frames, _) = assemble_mc_features(&y, &primary, &cfg).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].values.len(), 2);
    }

    #[test]
    fn assembled_zero_spectra_give_log_floor() {
        let cfg = FeatureConfig::desk();
        let y = Array3::from_elem((3, 12, 64), Complex64::new(0.0, 0.0));
        let primary = spec_from(
            Array2::from_elem((3, 64), Complex64::new(0.0, 0.0)),
            ChannelRole::Primary,
        );
        let (frames, _) = assemble_mc_features(&y, &primary, &cfg).unwrap();
        let expect = cfg.log_floor.ln();
        for f in &frames {
            assert!(f.values.iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn assemble_rejects_frame_misalignment() {
        let cfg = FeatureConfig::desk();
        let y = Array3::from_elem((3, 12, 64), Complex64::new(0.0, 0.0));
        let primary = spec_from(
            Array2::from_elem((4, 64), Complex64::new(0.0, 0.0)),
            ChannelRole::Primary,
        );
        assert!(assemble_mc_features(&y, &primary, &cfg).is_err());
    }

    #[test]
    fn assemble_backward_matches_finite_differences() {
        let cfg = FeatureConfig {
            fft_size: 512,
            num_bins: 3,
            window_ms: 25.0,
            hop_ms: 10.0,
            stack: 2,
            log_floor: 1e-10,
        };
        let (t, dirs, bins) = (3, 2, 3);
        let mut rng = crate::rng::rng_from_seed(4);
        let mut draw = |rng: &mut rand_chacha::ChaCha8Rng| crate::rng::uniform(rng, 0.2, 1.0);
        let y = Array3::from_shape_fn((t, dirs, bins), |_| {
            Complex64::new(draw(&mut rng), draw(&mut rng))
        });
        let primary = spec_from(
            Array2::from_shape_fn((t, bins), |_| Complex64::new(draw(&mut rng), draw(&mut rng))),
            ChannelRole::Primary,
        );
        let (frames, cache) = assemble_mc_features(&y, &primary, &cfg).unwrap();
        // random linear loss over the assembled features
        let d_frames: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| (0..f.values.len()).map(|_| draw(&mut rng)).collect())
            .collect();
        let loss = |y: &Array3<Complex64>, p: &ComplexSpectrogram| {
            let (frames, _) = assemble_mc_features(y, p, &cfg).unwrap();
            frames
                .iter()
                .zip(&d_frames)
                .map(|(f, d)| f.values.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let (d_y, d_primary) = assemble_mc_backward(&cache, &d_frames);
        let step = 1e-6;
        let mut max_rel: f64 = 0.0;
        for ti in 0..t {
            for d in 0..dirs {
                for k in 0..bins {
                    let mut yp = y.clone();
                    yp[(ti, d, k)].re += step;
                    let mut ym = y.clone();
                    ym[(ti, d, k)].re -= step;
                    let numeric = (loss(&yp, &primary) - loss(&ym, &primary)) / (2.0 * step);
                    let analytic = d_y[(ti, d, k)].re;
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                    max_rel = max_rel.max(rel);
                }
            }
            for k in 0..bins {
                let mut pp = primary.clone();
                pp.frames[(ti, k)].im += step;
                let mut pm = primary.clone();
                pm.frames[(ti, k)].im -= step;
                let numeric = (loss(&y, &pp) - loss(&y, &pm)) / (2.0 * step);
                let analytic = d_primary[(ti, k)].im;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }
}
