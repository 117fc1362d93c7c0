//! LSTM sequence kernel.
//!
//! Standard recurrence, gate order i, f, g, o stacked in blocks of H:
//!   i_t = sigmoid(Wx_i x_t + Wh_i h_{t-1} + b_i)
//!   f_t = sigmoid(Wx_f x_t + Wh_f h_{t-1} + b_f)
//!   g_t = tanh(Wx_g x_t + Wh_g h_{t-1} + b_g)
//!   o_t = sigmoid(Wx_o x_t + Wh_o h_{t-1} + b_o)
//!   c_t = f_t * c_{t-1} + i_t * g_t
//!   h_t = o_t * tanh(c_t)
//!
//! The input-to-hidden product for the whole sequence is one GEMM; only the
//! recurrent part runs step by step.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Borrowed parameters of one layer-direction: `w_x` is (4H, In), `w_h` is
/// (4H, H), `b` has length 4H.
#[derive(Clone, Copy, Debug)]
pub struct LstmParamsRef<'a> {
    pub w_x: ArrayView2<'a, f64>,
    pub w_h: ArrayView2<'a, f64>,
    pub b: &'a [f64],
}

impl<'a> LstmParamsRef<'a> {
    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Everything the backward pass needs, one row per step.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub inputs: Array2<f64>,
    pub h_prev: Array2<f64>,
    pub c_prev: Array2<f64>,
    pub i: Array2<f64>,
    pub f: Array2<f64>,
    pub g: Array2<f64>,
    pub o: Array2<f64>,
    pub tanh_c: Array2<f64>,
}

/// One recurrence step from explicit previous states.
pub fn lstm_step(
    params: &LstmParamsRef<'_>,
    x: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
    c_prev: ArrayView1<'_, f64>,
) -> (Array1<f64>, Array1<f64>) {
    let hidden = params.hidden();
    let z = params.w_x.dot(&x) + params.w_h.dot(&h_prev) + Array1::from(params.b.to_vec());
    let mut h = Array1::zeros(hidden);
    let mut c = Array1::zeros(hidden);
    for j in 0..hidden {
        let i_g = sigmoid(z[j]);
        let f_g = sigmoid(z[hidden + j]);
        let g_g = z[2 * hidden + j].tanh();
        let o_g = sigmoid(z[3 * hidden + j]);
        c[j] = f_g * c_prev[j] + i_g * g_g;
        h[j] = o_g * c[j].tanh();
    }
    (h, c)
}

/// Run the recurrence over a sequence (one row per step) starting from zero
/// states. Returns the hidden states (n, H) and the cache for backward.
pub fn lstm_seq_forward(params: &LstmParamsRef<'_>, inputs: ArrayView2<'_, f64>) -> (Array2<f64>, LstmCache) {
    let n = inputs.nrows();
    let hidden = params.hidden();
    // input-to-hidden for all steps at once
    let xg = inputs.dot(&params.w_x.t());

    let mut cache = LstmCache {
        inputs: inputs.to_owned(),
        h_prev: Array2::zeros((n, hidden)),
        c_prev: Array2::zeros((n, hidden)),
        i: Array2::zeros((n, hidden)),
        f: Array2::zeros((n, hidden)),
        g: Array2::zeros((n, hidden)),
        o: Array2::zeros((n, hidden)),
        tanh_c: Array2::zeros((n, hidden)),
    };
    let mut out = Array2::zeros((n, hidden));
    let mut h = Array1::<f64>::zeros(hidden);
    let mut c = Array1::<f64>::zeros(hidden);
    for t in 0..n {
        cache.h_prev.row_mut(t).assign(&h);
        cache.c_prev.row_mut(t).assign(&c);
        let rec = params.w_h.dot(&h);
        for j in 0..hidden {
            let zi = xg[(t, j)] + rec[j] + params.b[j];
            let zf = xg[(t, hidden + j)] + rec[hidden + j] + params.b[hidden + j];
            let zg = xg[(t, 2 * hidden + j)] + rec[2 * hidden + j] + params.b[2 * hidden + j];
            let zo = xg[(t, 3 * hidden + j)] + rec[3 * hidden + j] + params.b[3 * hidden + j];
            let i_g = sigmoid(zi);
            let f_g = sigmoid(zf);
            let g_g = zg.tanh();
            let o_g = sigmoid(zo);
            let c_new = f_g * c[j] + i_g * g_g;
            let tc = c_new.tanh();
            cache.i[(t, j)] = i_g;
            cache.f[(t, j)] = f_g;
            cache.g[(t, j)] = g_g;
            cache.o[(t, j)] = o_g;
            cache.tanh_c[(t, j)] = tc;
            c[j] = c_new;
            h[j] = o_g * tc;
        }
        out.row_mut(t).assign(&h);
    }
    (out, cache)
}

/// Parameter and input gradients of one layer-direction.
#[derive(Clone, Debug)]
pub struct LstmSeqGrads {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
    pub inputs: Array2<f64>,
}

/// Backpropagation through time given the loss gradient of every hidden
/// state.
pub fn lstm_seq_backward(
    params: &LstmParamsRef<'_>,
    cache: &LstmCache,
    d_h_seq: &Array2<f64>,
) -> LstmSeqGrads {
    let n = cache.inputs.nrows();
    let hidden = params.hidden();
    let mut dz_all = Array2::<f64>::zeros((n, 4 * hidden));
    let mut dh_rec = Array1::<f64>::zeros(hidden);
    let mut dc_next = Array1::<f64>::zeros(hidden);
    for t in (0..n).rev() {
        for j in 0..hidden {
            let dh = d_h_seq[(t, j)] + dh_rec[j];
            let tc = cache.tanh_c[(t, j)];
            let o = cache.o[(t, j)];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            let i_g = cache.i[(t, j)];
            let f_g = cache.f[(t, j)];
            let g_g = cache.g[(t, j)];
            let d_i = dc * g_g;
            let d_g = dc * i_g;
            let d_f = dc * cache.c_prev[(t, j)];
            dc_next[j] = dc * f_g;
            dz_all[(t, j)] = d_i * i_g * (1.0 - i_g);
            dz_all[(t, hidden + j)] = d_f * f_g * (1.0 - f_g);
            dz_all[(t, 2 * hidden + j)] = d_g * (1.0 - g_g * g_g);
            dz_all[(t, 3 * hidden + j)] = d_o * o * (1.0 - o);
        }
        dh_rec = dz_all.row(t).dot(&params.w_h);
    }
    LstmSeqGrads {
        w_x: dz_all.t().dot(&cache.inputs),
        w_h: dz_all.t().dot(&cache.h_prev),
        b: dz_all.sum_axis(ndarray::Axis(0)),
        inputs: dz_all.dot(&params.w_x),
    }
}
