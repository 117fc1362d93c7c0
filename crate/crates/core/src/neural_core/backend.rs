//! Shared backend: a linear projection down from the frontend feature
//! width, a stack of unidirectional LSTMs over time (strictly causal), and
//! a linear classification layer producing per-frame logits.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::lstm::{lstm_seq_backward, lstm_seq_forward, LstmCache};
use super::lstm_params;
use crate::error::{Error, Result};
use crate::params::{GradStore, InitKind, ParameterStore, Partition, TensorSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub projection_out: usize,
    pub tlstm_layers: usize,
    pub tlstm_cells: usize,
    pub num_classes: usize,
}

impl BackendConfig {
    pub fn desk() -> Self {
        BackendConfig {
            projection_out: 320,
            tlstm_layers: 2,
            tlstm_cells: 64,
            num_classes: 8,
        }
    }

    /// Full-scale backend: 768-wide projection into a five-layer, 768-cell
    /// time LSTM. The classifier width is the caller's choice.
    pub fn paper_scale(num_classes: usize) -> Self {
        BackendConfig {
            projection_out: 768,
            tlstm_layers: 5,
            tlstm_cells: 768,
            num_classes,
        }
    }

    /// `tlstm_layers` may be zero (projection straight into the classifier);
    /// the dimensions must be positive.
    pub fn validate(&self) -> Result<()> {
        if self.projection_out == 0 || self.tlstm_cells == 0 || self.num_classes == 0 {
            return Err(Error::Config("backend dimensions must be positive".into()));
        }
        Ok(())
    }

    fn classifier_input(&self) -> usize {
        if self.tlstm_layers == 0 {
            self.projection_out
        } else {
            self.tlstm_cells
        }
    }
}

/// Tensor declarations for the backend under `prefix` (feature width =
/// frontend output length).
pub fn backend_tensor_specs(
    prefix: &str,
    config: &BackendConfig,
    feature_len: usize,
) -> Vec<TensorSpec> {
    let p = Partition::Backend;
    let mut specs = vec![
        TensorSpec {
            name: format!("{prefix}.proj.w"),
            shape: vec![config.projection_out, feature_len],
            partition: p,
            init: InitKind::UniformFanIn(feature_len),
        },
        TensorSpec {
            name: format!("{prefix}.proj.b"),
            shape: vec![config.projection_out],
            partition: p,
            init: InitKind::Zeros,
        },
    ];
    for l in 0..config.tlstm_layers {
        let input_dim = if l == 0 {
            config.projection_out
        } else {
            config.tlstm_cells
        };
        let lp = format!("{prefix}.tlstm.l{l}");
        specs.push(TensorSpec {
            name: format!("{lp}.w_x"),
            shape: vec![4 * config.tlstm_cells, input_dim],
            partition: p,
            init: InitKind::UniformFanIn(input_dim),
        });
        specs.push(TensorSpec {
            name: format!("{lp}.w_h"),
            shape: vec![4 * config.tlstm_cells, config.tlstm_cells],
            partition: p,
            init: InitKind::UniformFanIn(config.tlstm_cells),
        });
        specs.push(TensorSpec {
            name: format!("{lp}.b"),
            shape: vec![4 * config.tlstm_cells],
            partition: p,
            init: InitKind::LstmBias {
                hidden: config.tlstm_cells,
            },
        });
    }
    specs.push(TensorSpec {
        name: format!("{prefix}.cls.w"),
        shape: vec![config.num_classes, config.classifier_input()],
        partition: p,
        init: InitKind::UniformFanIn(config.classifier_input()),
    });
    specs.push(TensorSpec {
        name: format!("{prefix}.cls.b"),
        shape: vec![config.num_classes],
        partition: p,
        init: InitKind::Zeros,
    });
    specs
}

#[derive(Clone, Debug)]
pub struct BackendCache {
    features: Array2<f64>,
    proj_out: Array2<f64>,
    tlstm_caches: Vec<LstmCache>,
    cls_input: Array2<f64>,
}

/// Features (frames x feature_len) to logits (frames x classes). Strictly
/// causal: logits at frame t depend only on features at frames <= t.
pub fn backend_forward(
    store: &ParameterStore,
    prefix: &str,
    config: &BackendConfig,
    features: Array2<f64>,
) -> Result<(Array2<f64>, BackendCache)> {
    config.validate()?;
    let w_proj = store.get(&format!("{prefix}.proj.w"))?.as_mat().to_owned();
    if features.ncols() != w_proj.ncols() {
        return Err(Error::Config(format!(
            "feature width {} != projection input {}",
            features.ncols(),
            w_proj.ncols()
        )));
    }
    let b_proj = store.get(&format!("{prefix}.proj.b"))?.data.clone();
    let mut proj_out = features.dot(&w_proj.t());
    for mut row in proj_out.rows_mut() {
        for (v, b) in row.iter_mut().zip(&b_proj) {
            *v += b;
        }
    }

    let mut cur = proj_out.clone();
    let mut tlstm_caches = Vec::with_capacity(config.tlstm_layers);
    for l in 0..config.tlstm_layers {
        let params = lstm_params(store, &format!("{prefix}.tlstm.l{l}"))?;
        let (h, cache) = lstm_seq_forward(&params, cur.view());
        tlstm_caches.push(cache);
        cur = h;
    }

    let w_cls = store.get(&format!("{prefix}.cls.w"))?.as_mat().to_owned();
    let b_cls = store.get(&format!("{prefix}.cls.b"))?.data.clone();
    let mut logits = cur.dot(&w_cls.t());
    for mut row in logits.rows_mut() {
        for (v, b) in row.iter_mut().zip(&b_cls) {
            *v += b;
        }
    }
    Ok((
        logits,
        BackendCache {
            features,
            proj_out,
            tlstm_caches,
            cls_input: cur,
        },
    ))
}

/// Backward pass: accumulates backend parameter gradients and returns the
/// gradient with respect to the input features.
pub fn backend_backward(
    store: &ParameterStore,
    prefix: &str,
    config: &BackendConfig,
    cache: &BackendCache,
    d_logits: &Array2<f64>,
    grads: &mut GradStore,
) -> Result<Array2<f64>> {
    let w_cls = store.get(&format!("{prefix}.cls.w"))?.as_mat().to_owned();
    let d_w_cls = d_logits.t().dot(&cache.cls_input);
    let d_b_cls = d_logits.sum_axis(Axis(0));
    grads.accumulate(&format!("{prefix}.cls.w"), d_w_cls.as_slice().unwrap());
    grads.accumulate(&format!("{prefix}.cls.b"), d_b_cls.as_slice().unwrap());
    let mut d_cur = d_logits.dot(&w_cls);

    for l in (0..config.tlstm_layers).rev() {
        let name = format!("{prefix}.tlstm.l{l}");
        let params = lstm_params(store, &name)?;
        let g = lstm_seq_backward(&params, &cache.tlstm_caches[l], &d_cur);
        grads.accumulate(&format!("{name}.w_x"), g.w_x.as_slice().unwrap());
        grads.accumulate(&format!("{name}.w_h"), g.w_h.as_slice().unwrap());
        grads.accumulate(&format!("{name}.b"), g.b.as_slice().unwrap());
        d_cur = g.inputs;
    }
    let _ = &cache.proj_out;

    let w_proj = store.get(&format!("{prefix}.proj.w"))?.as_mat().to_owned();
    let d_w_proj = d_cur.t().dot(&cache.features);
    let d_b_proj = d_cur.sum_axis(Axis(0));
    grads.accumulate(&format!("{prefix}.proj.w"), d_w_proj.as_slice().unwrap());
    grads.accumulate(&format!("{prefix}.proj.b"), d_b_proj.as_slice().unwrap());
    Ok(d_cur.dot(&w_proj))
}
