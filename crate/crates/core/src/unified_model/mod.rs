//! The assembled model: a single-channel frontend and a multi-channel
//! frontend (neural beamformer + its own multi-view frequency LSTM) sharing
//! one backend. Input routing picks the frontend per utterance; the tensor
//! catalog partitions every trainable into sc_fe / mc_fe / backend, which is
//! what the trainer's gradient routing rides on.

mod checkpoint;
mod gradcheck_paths;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use gradcheck_paths::{path_gradcheck_reports, run_full_gradcheck};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::beamform::{
    assemble_mc_backward, assemble_mc_features, bat_backward, bat_forward, BatRef,
    BeamformerWeights, LookDirectionGrid, McAssembleCache,
};
use crate::error::{Error, Result};
use crate::features::{
    sc_feature_frames, stft, ChannelRole, ComplexSpectrogram, FeatureConfig, NormalizationStats,
};
use crate::neural_core::{
    backend_backward, backend_forward, backend_tensor_specs, mv_flstm_backward, mv_flstm_forward,
    mv_flstm_tensor_specs, BackendCache, BackendConfig, MvFlstmCache, MvFlstmConfig,
};
use crate::params::{
    init_store_from_specs, GradStore, InitKind, ParameterStore, Partition, TensorSpec,
};
use crate::signal_sim::{ArrayGeometry, MultiChannelUtterance};

/// Which frontends a model carries and how inputs route through them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelMode {
    /// Both frontends; each input type takes its own.
    Unified,
    /// Single-channel frontend only; multi-channel input is consumed through
    /// its primary channel.
    ScOnly,
    /// Multi-channel frontend only; single-channel input is rejected.
    McOnly,
    /// Multi-channel frontend only; single-channel input has its missing
    /// auxiliary channels filled with zeros and takes the multi-channel path.
    ZeroPad,
}

impl ModelMode {
    pub fn label(self) -> &'static str {
        match self {
            ModelMode::Unified => "unified",
            ModelMode::ScOnly => "sc_only",
            ModelMode::McOnly => "mc_only",
            ModelMode::ZeroPad => "zero_pad",
        }
    }

    pub fn from_label(s: &str) -> Option<ModelMode> {
        match s {
            "unified" => Some(ModelMode::Unified),
            "sc_only" => Some(ModelMode::ScOnly),
            "mc_only" => Some(ModelMode::McOnly),
            "zero_pad" => Some(ModelMode::ZeroPad),
            _ => None,
        }
    }

    pub fn has_sc_fe(self) -> bool {
        matches!(self, ModelMode::Unified | ModelMode::ScOnly)
    }

    pub fn has_mc_fe(self) -> bool {
        matches!(self, ModelMode::Unified | ModelMode::McOnly | ModelMode::ZeroPad)
    }

    pub fn required_partitions(self) -> Vec<Partition> {
        let mut p = Vec::new();
        if self.has_sc_fe() {
            p.push(Partition::ScFe);
        }
        if self.has_mc_fe() {
            p.push(Partition::McFe);
        }
        p.push(Partition::Backend);
        p
    }
}

pub const AUX_MICS: usize = 2;
pub const LOOK_DIRECTIONS: usize = 12;
/// Look directions plus the primary channel.
pub const MC_CHANNELS: usize = LOOK_DIRECTIONS + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub features: FeatureConfig,
    pub sc_flstm: MvFlstmConfig,
    pub mc_flstm: MvFlstmConfig,
    pub backend: BackendConfig,
    pub grid: LookDirectionGrid,
    pub geometry: ArrayGeometry,
    pub mode: ModelMode,
    /// Diagonal loading of the super-directive initialization, relative to
    /// the coherence matrix trace.
    pub bat_loading: f64,
}

impl ModelConfig {
    /// Small end-to-end configuration: 64 feature bins, one-layer 8-cell
    /// views, a two-layer 64-cell time LSTM, 8 classes.
    pub fn desk(mode: ModelMode) -> Self {
        let sc = MvFlstmConfig::sc_desk();
        let mc = sc.mc_scaled(MC_CHANNELS);
        ModelConfig {
            sample_rate: 16_000,
            features: FeatureConfig::desk(),
            sc_flstm: sc,
            mc_flstm: mc,
            backend: BackendConfig::desk(),
            grid: LookDirectionGrid::uniform(LOOK_DIRECTIONS),
            geometry: ArrayGeometry::two_mic(0.1, 343.0),
            mode,
            bat_loading: 1e-2,
        }
    }

    /// Full-scale configuration (256 bins, four 3-layer 32-cell views,
    /// five-layer 768-cell time LSTM); used for shape and count checks.
    pub fn paper_scale(mode: ModelMode, num_classes: usize) -> Self {
        let sc = MvFlstmConfig::sc_paper_scale();
        let mc = sc.mc_scaled(MC_CHANNELS);
        ModelConfig {
            sample_rate: 16_000,
            features: FeatureConfig::paper_scale(),
            sc_flstm: sc,
            mc_flstm: mc,
            backend: BackendConfig::paper_scale(num_classes),
            grid: LookDirectionGrid::uniform(LOOK_DIRECTIONS),
            geometry: ArrayGeometry::two_mic(0.1, 343.0),
            mode,
            bat_loading: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate(self.sample_rate)?;
        self.sc_flstm.validate()?;
        self.mc_flstm.validate()?;
        self.backend.validate()?;
        self.grid.validate()?;
        self.geometry.validate()?;
        if !(self.bat_loading > 0.0) {
            return Err(Error::Config("bat_loading must be positive".into()));
        }
        if self.geometry.num_mics() != AUX_MICS {
            return Err(Error::Config(format!(
                "geometry must have {AUX_MICS} microphones for the two auxiliary channels"
            )));
        }
        if self.grid.len() != LOOK_DIRECTIONS {
            return Err(Error::Config(format!(
                "expected {LOOK_DIRECTIONS} look directions, got {}",
                self.grid.len()
            )));
        }
        let expect_sc_len = self.features.num_bins * self.features.stack;
        if self.sc_flstm.input_len != expect_sc_len {
            return Err(Error::Config(format!(
                "sc view input length {} != bins*stack = {expect_sc_len}",
                self.sc_flstm.input_len
            )));
        }
        // the multi-channel views must be the channel-scaled twin of the
        // single-channel views so the shared backend sees one width
        let scaled = self.sc_flstm.mc_scaled(MC_CHANNELS);
        if self.mc_flstm != scaled {
            return Err(Error::Config(format!(
                "mc views must be the sc views scaled by {MC_CHANNELS}"
            )));
        }
        if self.sc_flstm.output_len() != self.mc_flstm.output_len() {
            return Err(Error::Config(
                "frontend output lengths differ; the shared backend needs one width".into(),
            ));
        }
        Ok(())
    }
}

/// Counts of trainable scalars per partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartitionCounts {
    pub sc_fe: usize,
    pub mc_fe: usize,
    pub backend: usize,
}

impl PartitionCounts {
    pub fn total(&self) -> usize {
        self.sc_fe + self.mc_fe + self.backend
    }
}

fn bat_tensor_specs(dirs: usize, bins: usize, mics: usize) -> Vec<TensorSpec> {
    let p = Partition::McFe;
    vec![
        TensorSpec {
            name: "mc_fe.bat.w_re".into(),
            shape: vec![dirs, bins, mics],
            partition: p,
            init: InitKind::Superdirective,
        },
        TensorSpec {
            name: "mc_fe.bat.w_im".into(),
            shape: vec![dirs, bins, mics],
            partition: p,
            init: InitKind::Superdirective,
        },
        TensorSpec {
            name: "mc_fe.bat.b_re".into(),
            shape: vec![dirs, bins],
            partition: p,
            init: InitKind::Zeros,
        },
        TensorSpec {
            name: "mc_fe.bat.b_im".into(),
            shape: vec![dirs, bins],
            partition: p,
            init: InitKind::Zeros,
        },
    ]
}

/// Every tensor of a model in a fixed, deterministic order. Initialization,
/// counting, and checkpoint validation all walk this one list.
pub fn tensor_catalog(config: &ModelConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    if config.mode.has_sc_fe() {
        specs.extend(mv_flstm_tensor_specs("sc_fe", &config.sc_flstm, Partition::ScFe));
    }
    if config.mode.has_mc_fe() {
        specs.extend(bat_tensor_specs(
            config.grid.len(),
            config.features.num_bins,
            AUX_MICS,
        ));
        specs.extend(mv_flstm_tensor_specs("mc_fe", &config.mc_flstm, Partition::McFe));
    }
    specs.extend(backend_tensor_specs(
        "backend",
        &config.backend,
        config.sc_flstm.output_len(),
    ));
    specs
}

/// Exact per-partition parameter counts from the tensor catalog.
pub fn param_count(config: &ModelConfig) -> PartitionCounts {
    let mut counts = PartitionCounts::default();
    for spec in tensor_catalog(config) {
        match spec.partition {
            Partition::ScFe => counts.sc_fe += spec.len(),
            Partition::McFe => counts.mc_fe += spec.len(),
            Partition::Backend => counts.backend += spec.len(),
        }
    }
    counts
}

/// The model: configuration, corpus normalization statistics, and the
/// parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stats: NormalizationStats,
    pub store: ParameterStore,
}

/// Which frontend an utterance takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    ScPath,
    McPath { zero_pad_aux: bool },
}

pub fn route_for(mode: ModelMode, is_multi_channel: bool) -> Result<Route> {
    match (mode, is_multi_channel) {
        (ModelMode::Unified, true) | (ModelMode::McOnly, true) | (ModelMode::ZeroPad, true) => {
            Ok(Route::McPath { zero_pad_aux: false })
        }
        (ModelMode::Unified, false) | (ModelMode::ScOnly, _) => Ok(Route::ScPath),
        (ModelMode::McOnly, false) => Err(Error::InvalidInput(
            "single-channel input to a multi-channel-only model".into(),
        )),
        (ModelMode::ZeroPad, false) => Ok(Route::McPath { zero_pad_aux: true }),
    }
}

impl Model {
    /// Initialize with seeded weights and super-directive beamformer values.
    pub fn new(config: ModelConfig, stats: NormalizationStats, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = init_store_from_specs(&tensor_catalog(&config), seed);
        if config.mode.has_mc_fe() {
            let weights = BeamformerWeights::superdirective(
                &config.geometry,
                &config.grid,
                config.features.num_bins,
                config.sample_rate,
                config.features.fft_size,
                config.bat_loading,
            )?;
            store.get_mut("mc_fe.bat.w_re")?.data = weights.w_re;
            store.get_mut("mc_fe.bat.w_im")?.data = weights.w_im;
        }
        Ok(Model {
            config,
            stats,
            store,
        })
    }

    pub fn route(&self, utt: &MultiChannelUtterance) -> Result<Route> {
        utt.validate()?;
        route_for(self.config.mode, utt.is_multi_channel())
    }

    pub fn forward(&self, utt: &MultiChannelUtterance) -> Result<Array2<f64>> {
        Ok(self.forward_with_cache(utt)?.0)
    }

    pub fn forward_with_cache(
        &self,
        utt: &MultiChannelUtterance,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        model_forward(&self.config, &self.stats, &self.store, utt)
    }

    /// Per-item backward: gradients land only on the tensors of the path the
    /// item took, plus the backend.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>) -> Result<GradStore> {
        model_backward(&self.config, &self.store, cache, d_logits)
    }
}

/// Forward state of one utterance, for the backward pass.
pub struct ForwardCache {
    route: Route,
    flstm: Vec<MvFlstmCache>,
    backend: BackendCache,
    mc: Option<McPathCache>,
}

struct McPathCache {
    aux_specs: [ComplexSpectrogram; AUX_MICS],
    assemble: McAssembleCache,
}

impl ForwardCache {
    pub fn route(&self) -> Route {
        self.route
    }
}

fn bat_ref<'a>(config: &ModelConfig, store: &'a ParameterStore) -> Result<BatRef<'a>> {
    Ok(BatRef {
        dirs: config.grid.len(),
        bins: config.features.num_bins,
        mics: AUX_MICS,
        w_re: &store.get("mc_fe.bat.w_re")?.data,
        w_im: &store.get("mc_fe.bat.w_im")?.data,
        b_re: &store.get("mc_fe.bat.b_re")?.data,
        b_im: &store.get("mc_fe.bat.b_im")?.data,
    })
}

fn frames_to_matrix(frames: Vec<Vec<f64>>) -> Array2<f64> {
    let rows = frames.len();
    let cols = frames.first().map(|f| f.len()).unwrap_or(0);
    let flat: Vec<f64> = frames.into_iter().flatten().collect();
    Array2::from_shape_vec((rows, cols), flat).expect("consistent frame lengths")
}

/// Forward pass as a free function of the store, which is what the
/// finite-difference checks perturb.
pub fn model_forward(
    config: &ModelConfig,
    stats: &NormalizationStats,
    store: &ParameterStore,
    utt: &MultiChannelUtterance,
) -> Result<(Array2<f64>, ForwardCache)> {
    utt.validate()?;
    let model_route = route_for(config.mode, utt.is_multi_channel())?;
    if utt.sample_rate != config.sample_rate {
        return Err(Error::InvalidInput(format!(
            "utterance sample rate {} != model sample rate {}",
            utt.sample_rate, config.sample_rate
        )));
    }
    match model_route {
        Route::ScPath => {
            let gmv = stats.for_role(ChannelRole::Primary)?;
            let spec = stft(
                &utt.primary,
                &config.features,
                config.sample_rate,
                &gmv,
                ChannelRole::Primary,
            )?;
            let (frames, _feat_cache) = sc_feature_frames(&spec, &config.features);
            let mut flstm_caches = Vec::with_capacity(frames.len());
            let mut feature_rows = Vec::with_capacity(frames.len());
            for frame in &frames {
                let (out, cache) =
                    mv_flstm_forward(store, "sc_fe", &config.sc_flstm, &frame.values)?;
                feature_rows.push(out);
                flstm_caches.push(cache);
            }
            let features = frames_to_matrix(feature_rows);
            let (logits, backend_cache) =
                backend_forward(store, "backend", &config.backend, features)?;
            Ok((
                logits,
                ForwardCache {
                    route: model_route,
                    flstm: flstm_caches,
                    backend: backend_cache,
                    mc: None,
                },
            ))
        }
        Route::McPath { zero_pad_aux } => {
            let zeros;
            let (aux1_wave, aux2_wave): (&[f64], &[f64]) = if zero_pad_aux {
                zeros = vec![0.0; utt.primary.len()];
                (&zeros, &zeros)
            } else {
                (&utt.auxiliary[0], &utt.auxiliary[1])
            };
            let primary_spec = stft(
                &utt.primary,
                &config.features,
                config.sample_rate,
                &stats.for_role(ChannelRole::Primary)?,
                ChannelRole::Primary,
            )?;
            let aux1_spec = stft(
                aux1_wave,
                &config.features,
                config.sample_rate,
                &stats.for_role(ChannelRole::Aux1)?,
                ChannelRole::Aux1,
            )?;
            let aux2_spec = stft(
                aux2_wave,
                &config.features,
                config.sample_rate,
                &stats.for_role(ChannelRole::Aux2)?,
                ChannelRole::Aux2,
            )?;
            let bat = bat_ref(config, store)?;
            let y = bat_forward(&bat, &[&aux1_spec, &aux2_spec])?;
            let (frames, assemble_cache) =
                assemble_mc_features(&y, &primary_spec, &config.features)?;
            let mut flstm_caches = Vec::with_capacity(frames.len());
            let mut feature_rows = Vec::with_capacity(frames.len());
            for frame in &frames {
                let (out, cache) =
                    mv_flstm_forward(store, "mc_fe", &config.mc_flstm, &frame.values)?;
                feature_rows.push(out);
                flstm_caches.push(cache);
            }
            let features = frames_to_matrix(feature_rows);
            let (logits, backend_cache) =
                backend_forward(store, "backend", &config.backend, features)?;
            Ok((
                logits,
                ForwardCache {
                    route: model_route,
                    flstm: flstm_caches,
                    backend: backend_cache,
                    mc: Some(McPathCache {
                        aux_specs: [aux1_spec, aux2_spec],
                        assemble: assemble_cache,
                    }),
                },
            ))
        }
    }
}

/// Backward pass matching [`model_forward`].
pub fn model_backward(
    config: &ModelConfig,
    store: &ParameterStore,
    cache: &ForwardCache,
    d_logits: &Array2<f64>,
) -> Result<GradStore> {
    let mut grads = GradStore::new();
    let d_features = backend_backward(
        store,
        "backend",
        &config.backend,
        &cache.backend,
        d_logits,
        &mut grads,
    )?;
    match cache.route {
        Route::ScPath => {
            for (si, flstm_cache) in cache.flstm.iter().enumerate() {
                let d_out = d_features.row(si).to_vec();
                mv_flstm_backward(
                    store,
                    "sc_fe",
                    &config.sc_flstm,
                    flstm_cache,
                    &d_out,
                    &mut grads,
                )?;
            }
        }
        Route::McPath { .. } => {
            let mc = cache.mc.as_ref().expect("mc cache on mc path");
            let mut d_frames = Vec::with_capacity(cache.flstm.len());
            for (si, flstm_cache) in cache.flstm.iter().enumerate() {
                let d_out = d_features.row(si).to_vec();
                let d_frame = mv_flstm_backward(
                    store,
                    "mc_fe",
                    &config.mc_flstm,
                    flstm_cache,
                    &d_out,
                    &mut grads,
                )?;
                d_frames.push(d_frame);
            }
            let (d_y, _d_primary) = assemble_mc_backward(&mc.assemble, &d_frames);
            let bat = bat_ref(config, store)?;
            let bat_grads = bat_backward(&bat, &[&mc.aux_specs[0], &mc.aux_specs[1]], &d_y)?;
            grads.accumulate("mc_fe.bat.w_re", &bat_grads.w_re);
            grads.accumulate("mc_fe.bat.w_im", &bat_grads.w_im);
            grads.accumulate("mc_fe.bat.b_re", &bat_grads.b_re);
            grads.accumulate("mc_fe.bat.b_im", &bat_grads.b_im);
        }
    }
    Ok(grads)
}
