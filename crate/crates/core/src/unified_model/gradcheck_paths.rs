//! End-to-end finite-difference checks of both inference paths at a tiny
//! configuration, plus the combined report used by the gradcheck command.

use rand::Rng;

use super::{model_backward, model_forward, Model, ModelConfig, ModelMode, MC_CHANNELS};
use crate::beamform::LookDirectionGrid;
use crate::error::Result;
use crate::features::{FeatureConfig, NormalizationStats};
use crate::neural_core::gradcheck::{DEFAULT_COORDS, DEFAULT_STEP};
use crate::neural_core::{
    finite_diff_max_rel_err, kernel_gradcheck_reports, softmax_ce, BackendConfig, GradCheckReport,
    MvFlstmConfig,
};
use crate::rng::{rng_from_seed, standard_normal};
use crate::signal_sim::{ArrayGeometry, MultiChannelUtterance};

const LOSS_SCALE: f64 = 1e-3;

/// Smallest configuration that satisfies the structural invariants: 2 bins,
/// stack of 2, one 2-cell view, 12 look directions, 800 Hz audio.
fn tiny_config() -> ModelConfig {
    let sc = MvFlstmConfig {
        view_windows: vec![2],
        view_hops: vec![1],
        layers: 1,
        cells: 2,
        input_len: 4,
    };
    let mc = sc.mc_scaled(MC_CHANNELS);
    ModelConfig {
        sample_rate: 800,
        features: FeatureConfig {
            fft_size: 32,
            num_bins: 2,
            window_ms: 25.0,
            hop_ms: 10.0,
            stack: 2,
            log_floor: 1e-10,
        },
        sc_flstm: sc,
        mc_flstm: mc,
        backend: BackendConfig {
            projection_out: 4,
            tlstm_layers: 1,
            tlstm_cells: 3,
            num_classes: 3,
        },
        grid: LookDirectionGrid::uniform(12),
        geometry: ArrayGeometry::two_mic(0.1, 343.0),
        mode: ModelMode::Unified,
        bat_loading: 1e-2,
    }
}

fn tiny_utterance(config: &ModelConfig, multi_channel: bool, seed: u64) -> MultiChannelUtterance {
    let mut rng = rng_from_seed(seed);
    let window = config.features.window_samples(config.sample_rate);
    let hop = config.features.hop_samples(config.sample_rate);
    let frames = 2usize;
    let n = hop * (config.features.stack * frames - 1) + window;
    let wave = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| standard_normal(rng)).collect()
    };
    let mut label_rng = rng_from_seed(seed ^ 0x51);
    MultiChannelUtterance {
        utterance_id: "gradcheck".into(),
        sample_rate: config.sample_rate,
        primary: wave(&mut rng),
        auxiliary: if multi_channel {
            vec![wave(&mut rng), wave(&mut rng)]
        } else {
            vec![]
        },
        labels: (0..frames)
            .map(|_| label_rng.random_range(0..config.backend.num_classes))
            .collect(),
        snr_db: 0.0,
    }
}

fn check_path(op: &str, multi_channel: bool, seed: u64) -> Result<GradCheckReport> {
    let config = tiny_config();
    let stats = NormalizationStats::identity();
    let model = Model::new(config.clone(), stats.clone(), seed)?;
    let utt = tiny_utterance(&config, multi_channel, seed ^ 0x77);

    let loss = |store: &crate::ParameterStore| {
        let (logits, _) = model_forward(&config, &stats, store, &utt).unwrap();
        LOSS_SCALE * softmax_ce(logits.view(), &utt.labels).unwrap().0
    };
    let (logits, cache) = model.forward_with_cache(&utt)?;
    let (_, mut d_logits) = softmax_ce(logits.view(), &utt.labels)?;
    d_logits *= LOSS_SCALE;
    let analytic = model_backward(&config, &model.store, &cache, &d_logits)?;

    let (err, coords) = finite_diff_max_rel_err(
        &model.store,
        loss,
        &analytic,
        DEFAULT_STEP,
        DEFAULT_COORDS,
        seed,
    );
    Ok(GradCheckReport {
        op: op.into(),
        max_rel_err: err,
        coords_checked: coords,
    })
}

/// Finite-difference reports for the full single- and multi-channel paths
/// (STFT -> beamformer -> features -> views -> backend -> cross-entropy).
pub fn path_gradcheck_reports(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_path("sc_path", false, seed)?,
        check_path("mc_path", true, seed)?,
    ])
}

/// The complete verification suite: every neural kernel plus both
/// end-to-end paths.
pub fn run_full_gradcheck(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = kernel_gradcheck_reports(seed);
    reports.extend(path_gradcheck_reports(seed)?);
    Ok(reports)
}
