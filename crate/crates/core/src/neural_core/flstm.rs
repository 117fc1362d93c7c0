//! Multi-view frequency LSTM.
//!
//! Each view slides a window across the frequency axis of one (reordered)
//! stacked frame with a hop of half the window. Every window position is one
//! step of a bidirectional LSTM stack that runs across frequency, so
//! bidirectionality never looks ahead in time. The per-step outputs of the
//! top layer (forward and backward halves concatenated) are flattened and
//! the views' outputs concatenated into the frame's feature vector.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::lstm::{lstm_seq_backward, lstm_seq_forward, LstmCache};
use super::lstm_params;
use crate::error::{Error, Result};
use crate::params::{GradStore, InitKind, ParameterStore, Partition, TensorSpec};

/// Window sizes, hop sizes (= window / 2), stack depth, and cell count of
/// the views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvFlstmConfig {
    pub view_windows: Vec<usize>,
    pub view_hops: Vec<usize>,
    pub layers: usize,
    pub cells: usize,
    pub input_len: usize,
}

impl MvFlstmConfig {
    /// Full-scale single-channel views over 256 bins x 3 stacked frames.
    pub fn sc_paper_scale() -> Self {
        MvFlstmConfig {
            view_windows: vec![24, 48, 96, 192],
            view_hops: vec![12, 24, 48, 96],
            layers: 3,
            cells: 32,
            input_len: 768,
        }
    }

    /// Small single-channel views over 64 bins x 3 stacked frames.
    pub fn sc_desk() -> Self {
        MvFlstmConfig {
            view_windows: vec![8, 16, 32],
            view_hops: vec![4, 8, 16],
            layers: 1,
            cells: 8,
            input_len: 192,
        }
    }

    /// The multi-channel twin of a single-channel configuration: window,
    /// hop, and input length scale by the channel count so each view spans
    /// the same frequency range, which keeps the step counts (and therefore
    /// the output length) identical.
    pub fn mc_scaled(&self, channels: usize) -> Self {
        MvFlstmConfig {
            view_windows: self.view_windows.iter().map(|w| w * channels).collect(),
            view_hops: self.view_hops.iter().map(|h| h * channels).collect(),
            layers: self.layers,
            cells: self.cells,
            input_len: self.input_len * channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_windows.is_empty() || self.view_windows.len() != self.view_hops.len() {
            return Err(Error::Config("views and hops must be non-empty and matched".into()));
        }
        if self.layers == 0 || self.cells == 0 {
            return Err(Error::Config("layers and cells must be positive".into()));
        }
        for (v, (&w, &h)) in self.view_windows.iter().zip(&self.view_hops).enumerate() {
            if w == 0 || h == 0 {
                return Err(Error::Config(format!("view {v}: zero window or hop")));
            }
            if h * 2 != w {
                return Err(Error::Config(format!(
                    "view {v}: hop {h} must be half the window {w}"
                )));
            }
            if w > self.input_len || (self.input_len - w) % h != 0 {
                return Err(Error::Config(format!(
                    "view {v}: window {w} / hop {h} do not tile input length {}",
                    self.input_len
                )));
            }
        }
        Ok(())
    }

    /// Steps of view `v`: (input_len - window) / hop + 1.
    pub fn view_steps(&self, v: usize) -> usize {
        (self.input_len - self.view_windows[v]) / self.view_hops[v] + 1
    }

    /// Length of the concatenated per-step outputs over all views.
    pub fn output_len(&self) -> usize {
        (0..self.view_windows.len())
            .map(|v| self.view_steps(v) * 2 * self.cells)
            .sum()
    }
}

fn layer_prefix(prefix: &str, view: usize, layer: usize, dir: &str) -> String {
    format!("{prefix}.v{view}.l{layer}.{dir}")
}

/// Tensor declarations for one multi-view FLSTM under `prefix`.
pub fn mv_flstm_tensor_specs(
    prefix: &str,
    config: &MvFlstmConfig,
    partition: Partition,
) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    for v in 0..config.view_windows.len() {
        for l in 0..config.layers {
            let input_dim = if l == 0 {
                config.view_windows[v]
            } else {
                2 * config.cells
            };
            for dir in ["fw", "bw"] {
                let p = layer_prefix(prefix, v, l, dir);
                specs.push(TensorSpec {
                    name: format!("{p}.w_x"),
                    shape: vec![4 * config.cells, input_dim],
                    partition,
                    init: InitKind::UniformFanIn(input_dim),
                });
                specs.push(TensorSpec {
                    name: format!("{p}.w_h"),
                    shape: vec![4 * config.cells, config.cells],
                    partition,
                    init: InitKind::UniformFanIn(config.cells),
                });
                specs.push(TensorSpec {
                    name: format!("{p}.b"),
                    shape: vec![4 * config.cells],
                    partition,
                    init: InitKind::LstmBias {
                        hidden: config.cells,
                    },
                });
            }
        }
    }
    specs
}

/// Per-layer cache of one bidirectional stack.
#[derive(Clone, Debug)]
struct BiLayerCache {
    fw: LstmCache,
    bw: LstmCache,
}

/// Run a bidirectional LSTM stack over a step sequence. The backward
/// direction sees the steps reversed; per step the two top-layer hidden
/// states are concatenated (forward cells first).
fn bilstm_forward(
    store: &ParameterStore,
    prefix: &str,
    view: usize,
    layers: usize,
    inputs: Array2<f64>,
) -> Result<(Array2<f64>, Vec<BiLayerCache>)> {
    let mut caches = Vec::with_capacity(layers);
    let mut cur = inputs;
    for l in 0..layers {
        let fw = lstm_params(store, &layer_prefix(prefix, view, l, "fw"))?;
        let bw = lstm_params(store, &layer_prefix(prefix, view, l, "bw"))?;
        let (h_fw, cache_fw) = lstm_seq_forward(&fw, cur.view());
        let reversed = cur.slice(s![..;-1, ..]).to_owned();
        let (h_bw_rev, cache_bw) = lstm_seq_forward(&bw, reversed.view());
        let h_bw = h_bw_rev.slice(s![..;-1, ..]).to_owned();
        let n = h_fw.nrows();
        let hidden = h_fw.ncols();
        let mut merged = Array2::zeros((n, 2 * hidden));
        merged.slice_mut(s![.., ..hidden]).assign(&h_fw);
        merged.slice_mut(s![.., hidden..]).assign(&h_bw);
        caches.push(BiLayerCache {
            fw: cache_fw,
            bw: cache_bw,
        });
        cur = merged;
    }
    Ok((cur, caches))
}

fn bilstm_backward(
    store: &ParameterStore,
    prefix: &str,
    view: usize,
    layers: usize,
    caches: &[BiLayerCache],
    d_out: Array2<f64>,
    grads: &mut GradStore,
) -> Result<Array2<f64>> {
    let mut d_cur = d_out;
    for l in (0..layers).rev() {
        let hidden = d_cur.ncols() / 2;
        let fw_name = layer_prefix(prefix, view, l, "fw");
        let bw_name = layer_prefix(prefix, view, l, "bw");
        let fw = lstm_params(store, &fw_name)?;
        let bw = lstm_params(store, &bw_name)?;
        let d_fw = d_cur.slice(s![.., ..hidden]).to_owned();
        let d_bw_rev = d_cur.slice(s![..;-1, hidden..]).to_owned();
        let g_fw = lstm_seq_backward(&fw, &caches[l].fw, &d_fw);
        let g_bw = lstm_seq_backward(&bw, &caches[l].bw, &d_bw_rev);
        grads.accumulate(&format!("{fw_name}.w_x"), g_fw.w_x.as_slice().unwrap());
        grads.accumulate(&format!("{fw_name}.w_h"), g_fw.w_h.as_slice().unwrap());
        grads.accumulate(&format!("{fw_name}.b"), g_fw.b.as_slice().unwrap());
        grads.accumulate(&format!("{bw_name}.w_x"), g_bw.w_x.as_slice().unwrap());
        grads.accumulate(&format!("{bw_name}.w_h"), g_bw.w_h.as_slice().unwrap());
        grads.accumulate(&format!("{bw_name}.b"), g_bw.b.as_slice().unwrap());
        let d_bw_in = g_bw.inputs.slice(s![..;-1, ..]).to_owned();
        d_cur = g_fw.inputs + d_bw_in;
    }
    Ok(d_cur)
}

/// Forward state kept for the frame's backward pass.
#[derive(Clone, Debug)]
pub struct MvFlstmCache {
    view_caches: Vec<Vec<BiLayerCache>>,
}

/// Feature vector of one reordered stacked frame: concatenation over views
/// of all per-step bidirectional outputs.
pub fn mv_flstm_forward(
    store: &ParameterStore,
    prefix: &str,
    config: &MvFlstmConfig,
    frame: &[f64],
) -> Result<(Vec<f64>, MvFlstmCache)> {
    if frame.len() != config.input_len {
        return Err(Error::Config(format!(
            "frame length {} != configured input length {}",
            frame.len(),
            config.input_len
        )));
    }
    let mut out = Vec::with_capacity(config.output_len());
    let mut view_caches = Vec::with_capacity(config.view_windows.len());
    for v in 0..config.view_windows.len() {
        let (window, hop) = (config.view_windows[v], config.view_hops[v]);
        let steps = config.view_steps(v);
        let mut inputs = Array2::zeros((steps, window));
        for sidx in 0..steps {
            let start = sidx * hop;
            inputs
                .row_mut(sidx)
                .assign(&ndarray::ArrayView1::from(&frame[start..start + window]));
        }
        let (h, caches) = bilstm_forward(store, prefix, v, config.layers, inputs)?;
        out.extend(h.iter().copied());
        view_caches.push(caches);
    }
    Ok((out, MvFlstmCache { view_caches }))
}

/// Backward pass: accumulates parameter gradients and returns the gradient
/// with respect to the input frame (window overlaps summed).
pub fn mv_flstm_backward(
    store: &ParameterStore,
    prefix: &str,
    config: &MvFlstmConfig,
    cache: &MvFlstmCache,
    d_out: &[f64],
    grads: &mut GradStore,
) -> Result<Vec<f64>> {
    if d_out.len() != config.output_len() {
        return Err(Error::Config(format!(
            "upstream gradient length {} != output length {}",
            d_out.len(),
            config.output_len()
        )));
    }
    let mut d_frame = vec![0.0; config.input_len];
    let mut offset = 0;
    for v in 0..config.view_windows.len() {
        let (window, hop) = (config.view_windows[v], config.view_hops[v]);
        let steps = config.view_steps(v);
        let seg = steps * 2 * config.cells;
        let d_view = Array2::from_shape_vec(
            (steps, 2 * config.cells),
            d_out[offset..offset + seg].to_vec(),
        )
        .expect("segment shape");
        offset += seg;
        let d_inputs = bilstm_backward(
            store,
            prefix,
            v,
            config.layers,
            &cache.view_caches[v],
            d_view,
            grads,
        )?;
        for sidx in 0..steps {
            let start = sidx * hop;
            for j in 0..window {
                d_frame[start + j] += d_inputs[(sidx, j)];
            }
        }
    }
    Ok(d_frame)
}
