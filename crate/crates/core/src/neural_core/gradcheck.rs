//! Finite-difference verification of backward passes.
//!
//! Central differences per coordinate on a random subsample of parameter
//! coordinates; the reported figure is the max relative error with
//! denominator max(|analytic|, |numeric|, 1e-8).

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;

use super::backend::{backend_backward, backend_forward, backend_tensor_specs, BackendConfig};
use super::flstm::{mv_flstm_backward, mv_flstm_forward, mv_flstm_tensor_specs, MvFlstmConfig};
use super::loss::softmax_ce;
use crate::beamform::{bat_backward, bat_forward, BatRef};
use crate::features::{ChannelRole, ComplexSpectrogram};
use crate::params::{
    init_store_from_specs, GradStore, InitKind, ParameterStore, Partition, TensorSpec,
};
use crate::rng::{rng_from_seed, uniform};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_COORDS: usize = 200;

/// Probe losses are scaled down so that coordinates whose true gradient sits
/// below what 64-bit central differences can resolve fall under the 1e-8
/// absolute floor of the error denominator instead of reporting noise.
const LOSS_SCALE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Check `analytic` against central differences of `loss_fn`, sampling up to
/// `max_coords` coordinates from tensors whose name satisfies `filter`.
pub fn finite_diff_max_rel_err_filtered<F, P>(
    store: &ParameterStore,
    loss_fn: F,
    analytic: &GradStore,
    step: f64,
    max_coords: usize,
    seed: u64,
    filter: P,
) -> (f64, usize)
where
    F: Fn(&ParameterStore) -> f64,
    P: Fn(&str) -> bool,
{
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, g) in analytic.iter() {
        if filter(name) {
            for idx in 0..g.len() {
                coords.push((name.clone(), idx));
            }
        }
    }
    // partial Fisher-Yates: the first max_coords entries become the sample
    let mut rng = rng_from_seed(seed);
    let n_sample = coords.len().min(max_coords);
    for i in 0..n_sample {
        let j = i + rng.random_range(0..coords.len() - i);
        coords.swap(i, j);
    }
    coords.truncate(n_sample);

    let mut work = store.clone();
    let mut max_rel: f64 = 0.0;
    for (name, idx) in &coords {
        let orig = work.get(name).unwrap().data[*idx];
        work.get_mut(name).unwrap().data[*idx] = orig + step;
        let lp = loss_fn(&work);
        work.get_mut(name).unwrap().data[*idx] = orig - step;
        let lm = loss_fn(&work);
        work.get_mut(name).unwrap().data[*idx] = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic.get(name).unwrap()[*idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    (max_rel, coords.len())
}

pub fn finite_diff_max_rel_err<F>(
    store: &ParameterStore,
    loss_fn: F,
    analytic: &GradStore,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> (f64, usize)
where
    F: Fn(&ParameterStore) -> f64,
{
    finite_diff_max_rel_err_filtered(store, loss_fn, analytic, step, max_coords, seed, |_| true)
}

fn random_spectrogram(t: usize, bins: usize, role: ChannelRole, rng: &mut rand_chacha::ChaCha8Rng) -> ComplexSpectrogram {
    ComplexSpectrogram {
        frames: Array2::from_shape_fn((t, bins), |_| {
            Complex64::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0))
        }),
        hop: 1,
        role,
    }
}

fn bat_store(dirs: usize, bins: usize, mics: usize, seed: u64) -> ParameterStore {
    let specs = vec![
        TensorSpec {
            name: "mc_fe.bat.w_re".into(),
            shape: vec![dirs, bins, mics],
            partition: Partition::McFe,
            init: InitKind::UniformFanIn(mics),
        },
        TensorSpec {
            name: "mc_fe.bat.w_im".into(),
            shape: vec![dirs, bins, mics],
            partition: Partition::McFe,
            init: InitKind::UniformFanIn(mics),
        },
        TensorSpec {
            name: "mc_fe.bat.b_re".into(),
            shape: vec![dirs, bins],
            partition: Partition::McFe,
            init: InitKind::UniformFanIn(1),
        },
        TensorSpec {
            name: "mc_fe.bat.b_im".into(),
            shape: vec![dirs, bins],
            partition: Partition::McFe,
            init: InitKind::UniformFanIn(1),
        },
    ];
    init_store_from_specs(&specs, seed)
}

pub(crate) fn bat_ref_from_store<'a>(
    store: &'a ParameterStore,
    dirs: usize,
    bins: usize,
    mics: usize,
) -> BatRef<'a> {
    BatRef {
        dirs,
        bins,
        mics,
        w_re: &store.get("mc_fe.bat.w_re").unwrap().data,
        w_im: &store.get("mc_fe.bat.w_im").unwrap().data,
        b_re: &store.get("mc_fe.bat.b_re").unwrap().data,
        b_im: &store.get("mc_fe.bat.b_im").unwrap().data,
    }
}

fn check_bat(seed: u64) -> GradCheckReport {
    let (dirs, bins, mics, t) = (2, 3, 2, 2);
    let store = bat_store(dirs, bins, mics, seed);
    let mut rng = rng_from_seed(seed ^ 0xbeef);
    let aux1 = random_spectrogram(t, bins, ChannelRole::Aux1, &mut rng);
    let aux2 = random_spectrogram(t, bins, ChannelRole::Aux2, &mut rng);
    let d_y = ndarray::Array3::from_shape_fn((t, dirs, bins), |_| {
        Complex64::new(
            LOSS_SCALE * uniform(&mut rng, -1.0, 1.0),
            LOSS_SCALE * uniform(&mut rng, -1.0, 1.0),
        )
    });
    let loss = |s: &ParameterStore| {
        let bat = bat_ref_from_store(s, dirs, bins, mics);
        let y = bat_forward(&bat, &[&aux1, &aux2]).unwrap();
        y.iter()
            .zip(d_y.iter())
            .map(|(yv, g)| g.re * yv.re + g.im * yv.im)
            .sum()
    };
    let bat = bat_ref_from_store(&store, dirs, bins, mics);
    let bg = bat_backward(&bat, &[&aux1, &aux2], &d_y).unwrap();
    let mut analytic = GradStore::new();
    analytic.accumulate("mc_fe.bat.w_re", &bg.w_re);
    analytic.accumulate("mc_fe.bat.w_im", &bg.w_im);
    analytic.accumulate("mc_fe.bat.b_re", &bg.b_re);
    analytic.accumulate("mc_fe.bat.b_im", &bg.b_im);
    let (err, coords) =
        finite_diff_max_rel_err(&store, loss, &analytic, DEFAULT_STEP, DEFAULT_COORDS, seed);
    GradCheckReport {
        op: "bat".into(),
        max_rel_err: err,
        coords_checked: coords,
    }
}

fn check_flstm(op: &str, cfg: MvFlstmConfig, seed: u64) -> GradCheckReport {
    cfg.validate().unwrap();
    let specs = mv_flstm_tensor_specs("fe", &cfg, Partition::ScFe);
    let store = init_store_from_specs(&specs, seed);
    let mut rng = rng_from_seed(seed ^ 0xf00d);
    let frame: Vec<f64> = (0..cfg.input_len).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let weights: Vec<f64> = (0..cfg.output_len())
        .map(|_| LOSS_SCALE * uniform(&mut rng, -1.0, 1.0))
        .collect();
    let loss = |s: &ParameterStore| {
        let (out, _) = mv_flstm_forward(s, "fe", &cfg, &frame).unwrap();
        out.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = mv_flstm_forward(&store, "fe", &cfg, &frame).unwrap();
    let mut analytic = GradStore::new();
    mv_flstm_backward(&store, "fe", &cfg, &cache, &weights, &mut analytic).unwrap();
    let (err, coords) =
        finite_diff_max_rel_err(&store, loss, &analytic, DEFAULT_STEP, DEFAULT_COORDS, seed);
    GradCheckReport {
        op: op.into(),
        max_rel_err: err,
        coords_checked: coords,
    }
}

/// Backend components share one check through the real cross-entropy path;
/// each report row restricts the sampled coordinates to its own tensors.
fn check_backend_components(seed: u64) -> Vec<GradCheckReport> {
    let cfg = BackendConfig {
        projection_out: 4,
        tlstm_layers: 2,
        tlstm_cells: 3,
        num_classes: 3,
    };
    let feature_len = 6;
    let t = 4;
    let store = init_store_from_specs(&backend_tensor_specs("backend", &cfg, feature_len), seed);
    let mut rng = rng_from_seed(seed ^ 0xcafe);
    let features = Array2::from_shape_fn((t, feature_len), |_| uniform(&mut rng, -1.0, 1.0));
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let loss = |s: &ParameterStore| {
        let (logits, _) = backend_forward(s, "backend", &cfg, features.clone()).unwrap();
        LOSS_SCALE * softmax_ce(logits.view(), &labels).unwrap().0
    };
    let (logits, cache) = backend_forward(&store, "backend", &cfg, features.clone()).unwrap();
    let (_, mut d_logits) = softmax_ce(logits.view(), &labels).unwrap();
    d_logits *= LOSS_SCALE;
    let mut analytic = GradStore::new();
    backend_backward(&store, "backend", &cfg, &cache, &d_logits, &mut analytic).unwrap();

    [
        ("projection", "backend.proj."),
        ("tlstm", "backend.tlstm."),
        ("classifier", "backend.cls."),
    ]
    .iter()
    .map(|(op, prefix)| {
        let (err, coords) = finite_diff_max_rel_err_filtered(
            &store,
            loss,
            &analytic,
            DEFAULT_STEP,
            DEFAULT_COORDS,
            seed,
            |name| name.starts_with(prefix),
        );
        GradCheckReport {
            op: (*op).into(),
            max_rel_err: err,
            coords_checked: coords,
        }
    })
    .collect()
}

fn check_softmax_ce(seed: u64) -> GradCheckReport {
    let (t, classes) = (4, 3);
    let specs = vec![TensorSpec {
        name: "logits".into(),
        shape: vec![t, classes],
        partition: Partition::Backend,
        init: InitKind::UniformFanIn(1),
    }];
    let store = init_store_from_specs(&specs, seed);
    let mut rng = rng_from_seed(seed ^ 0xabcd);
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..classes)).collect();
    let loss = |s: &ParameterStore| {
        let logits = s.get("logits").unwrap().as_mat().to_owned();
        LOSS_SCALE * softmax_ce(logits.view(), &labels).unwrap().0
    };
    let logits = store.get("logits").unwrap().as_mat().to_owned();
    let (_, mut grad) = softmax_ce(logits.view(), &labels).unwrap();
    grad *= LOSS_SCALE;
    let mut analytic = GradStore::new();
    analytic.accumulate("logits", grad.as_slice().unwrap());
    let (err, coords) =
        finite_diff_max_rel_err(&store, loss, &analytic, DEFAULT_STEP, DEFAULT_COORDS, seed);
    GradCheckReport {
        op: "softmax_ce".into(),
        max_rel_err: err,
        coords_checked: coords,
    }
}

/// Finite-difference reports for every neural kernel at tiny configurations.
/// Full single- and multi-channel path checks live with the assembled model.
pub fn kernel_gradcheck_reports(seed: u64) -> Vec<GradCheckReport> {
    let mut reports = vec![check_bat(seed)];
    reports.push(check_flstm(
        "flstm_view",
        MvFlstmConfig {
            view_windows: vec![6],
            view_hops: vec![3],
            layers: 2,
            cells: 3,
            input_len: 12,
        },
        seed,
    ));
    reports.push(check_flstm(
        "mv_flstm",
        MvFlstmConfig {
            view_windows: vec![4, 8],
            view_hops: vec![2, 4],
            layers: 2,
            cells: 3,
            input_len: 16,
        },
        seed,
    ));
    reports.extend(check_backend_components(seed));
    reports.push(check_softmax_ce(seed));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_checks_to_near_machine_precision() {
        // central differences are exact for a linear map up to rounding
        let specs = vec![TensorSpec {
            name: "w".into(),
            shape: vec![8],
            partition: Partition::Backend,
            init: InitKind::UniformFanIn(1),
        }];
        let store = init_store_from_specs(&specs, 1);
        let coeff: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) * 0.3).collect();
        let loss = |s: &ParameterStore| {
            s.get("w")
                .unwrap()
                .data
                .iter()
                .zip(&coeff)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut analytic = GradStore::new();
        analytic.accumulate("w", &coeff);
        let (err, coords) = finite_diff_max_rel_err(&store, loss, &analytic, 1e-5, 200, 2);
        assert_eq!(coords, 8);
        assert!(err <= 1e-9, "error {err}");
    }

    #[test]
    fn all_kernel_reports_pass_tolerance() {
        for report in kernel_gradcheck_reports(99) {
            assert!(
                report.passes(1e-4),
                "{}: max rel err {}",
                report.op,
                report.max_rel_err
            );
            assert!(report.coords_checked > 0);
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // 5% corruption on a real backward pass must push the error past 1e-2
        let cfg = MvFlstmConfig {
            view_windows: vec![4],
            view_hops: vec![2],
            layers: 1,
            cells: 2,
            input_len: 8,
        };
        let specs = mv_flstm_tensor_specs("fe", &cfg, Partition::ScFe);
        let store = init_store_from_specs(&specs, 3);
        let mut rng = rng_from_seed(4);
        let frame: Vec<f64> = (0..8).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let weights: Vec<f64> = (0..cfg.output_len()).map(|_| uniform(&mut rng, 0.5, 1.0)).collect();
        let loss = |s: &ParameterStore| {
            let (out, _) = mv_flstm_forward(s, "fe", &cfg, &frame).unwrap();
            out.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = mv_flstm_forward(&store, "fe", &cfg, &frame).unwrap();
        let mut analytic = GradStore::new();
        mv_flstm_backward(&store, "fe", &cfg, &cache, &weights, &mut analytic).unwrap();
        let (clean_err, _) = finite_diff_max_rel_err(&store, loss, &analytic, 1e-5, 200, 5);
        assert!(clean_err <= 1e-4);
        // corrupt every gradient by 5%
        let mut corrupted = GradStore::new();
        for (name, g) in analytic.iter() {
            let bad: Vec<f64> = g.iter().map(|v| v * 1.05).collect();
            corrupted.accumulate(name, &bad);
        }
        let (err, _) = finite_diff_max_rel_err(&store, loss, &corrupted, 1e-5, 200, 5);
        assert!(err > 1e-2, "checker failed to flag corruption: {err}");
    }
}
