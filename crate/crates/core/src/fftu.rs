//! Thin helpers over rustfft shared by the simulator and feature extractor.

use num_complex::Complex64;
use rustfft::FftPlanner;

pub fn fft_forward(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(buf.len()).process(buf);
}

/// Inverse transform, normalized by 1/N (rustfft leaves it unnormalized).
pub fn fft_inverse(buf: &mut [Complex64]) {
    let n = buf.len();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(n).process(buf);
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}
