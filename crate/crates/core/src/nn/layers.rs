//! Linear, LSTM, bidirectional LSTM and attentive pooling layers with
//! hand-written reverse-mode gradients (full BPTT, no truncation).
//!
//! Layers hold only parameter *names*; tensors live in a [`ParamSet`] and
//! gradients are accumulated into a matching [`Gradients`].

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{Gradients, ParamSet};
use crate::error::{PvadError, Result};
use crate::rng::Rng;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_cols(path: &str, x: &ArrayView2<f64>, cols: usize) -> Result<()> {
    if x.ncols() != cols {
        return Err(PvadError::Shape {
            path: path.to_string(),
            expected: vec![x.nrows(), cols],
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// `y = x Wᵀ + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            input,
            output,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let bound = 1.0 / (self.input as f64).sqrt();
        params.insert_uniform(&self.w, &[self.output, self.input], bound, rng);
        params.insert_filled(&self.b, &[self.output], 0.0);
    }

    pub fn forward(&self, params: &ParamSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols(&self.w, &x, self.input)?;
        let w = params.matrix(&self.w, self.output, self.input)?;
        let b = params.vector(&self.b, self.output)?;
        Ok(x.dot(&w.t()) + &b)
    }

    /// Accumulates weight gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let w = params.matrix(&self.w, self.output, self.input)?;
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grads.matrix_mut(&self.w)?);
        {
            let mut g = grads.vector_mut(&self.b)?;
            g += &dy.sum_axis(Axis(0));
        }
        Ok(dy.dot(&w))
    }
}

/// Fixed per-dimension standardization `(x - mean) · inv_std`. Its
/// parameters are frozen statistics of the training data.
#[derive(Debug, Clone)]
pub struct Standardize {
    mean: String,
    inv_std: String,
    pub dim: usize,
}

impl Standardize {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            mean: format!("{prefix}.mean"),
            inv_std: format!("{prefix}.inv_std"),
            dim,
        }
    }

    /// Identity statistics.
    pub fn init(&self, params: &mut ParamSet) {
        self.set_stats(params, &Array1::zeros(self.dim), &Array1::ones(self.dim));
    }

    /// Stores `mean` and `1 / max(std, 1e-3)` as frozen parameters.
    pub fn set_stats(&self, params: &mut ParamSet, mean: &Array1<f64>, std: &Array1<f64>) {
        let inv = std.mapv(|s| 1.0 / s.max(1e-3));
        params.insert(&self.mean, mean.clone().into_dyn(), false);
        params.insert(&self.inv_std, inv.into_dyn(), false);
    }

    /// Mean and population standard deviation over all rows of `seqs`.
    pub fn fit<'a>(
        &self,
        params: &mut ParamSet,
        seqs: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    ) -> Result<()> {
        let mut sum = Array1::<f64>::zeros(self.dim);
        let mut sq = Array1::<f64>::zeros(self.dim);
        let mut n = 0usize;
        for x in seqs {
            check_cols(&self.mean, &x, self.dim)?;
            sum += &x.sum_axis(Axis(0));
            sq += &x.mapv(|v| v * v).sum_axis(Axis(0));
            n += x.nrows();
        }
        if n == 0 {
            return Err(PvadError::EmptyDataset("no frames to fit normalization statistics".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - &mean * &mean).mapv(|v| v.max(0.0));
        self.set_stats(params, &mean, &var.mapv(f64::sqrt));
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_cols(&self.mean, &x, self.dim)?;
        let mean = params.vector(&self.mean, self.dim)?;
        let inv = params.vector(&self.inv_std, self.dim)?;
        Ok((&x - &mean) * &inv)
    }

    pub fn backward(&self, params: &ParamSet, dy: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(&dy * &params.vector(&self.inv_std, self.dim)?)
    }
}

/// Unidirectional LSTM. Gate order in the stacked weights is `[i, f, g, o]`.
///
/// An optional time-invariant input (`static_dim` wide) is appended to every
/// frame; its contribution is folded into the bias once per sequence.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: String,
    w_hh: String,
    b: String,
    pub input_dim: usize,
    pub static_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array2<f64>,
    static_input: Option<Array1<f64>>,
    /// Post-activation gates, `T × 4H`.
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

impl LstmCache {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.h.view()
    }

    pub fn into_output(self) -> Array2<f64> {
        self.h
    }
}

impl Lstm {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize) -> Self {
        Self::with_static_input(prefix, input_dim, 0, hidden)
    }

    pub fn with_static_input(prefix: &str, input_dim: usize, static_dim: usize, hidden: usize) -> Self {
        Self {
            w_ih: format!("{prefix}.w_ih"),
            w_hh: format!("{prefix}.w_hh"),
            b: format!("{prefix}.b"),
            input_dim,
            static_dim,
            hidden,
        }
    }

    fn in_width(&self) -> usize {
        self.input_dim + self.static_dim
    }

    /// Uniform(±1/√fan_in) weights; forget-gate bias 1, other biases 0.
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let h = self.hidden;
        params.insert_uniform(
            &self.w_ih,
            &[4 * h, self.in_width()],
            1.0 / (self.in_width() as f64).sqrt(),
            rng,
        );
        params.insert_uniform(&self.w_hh, &[4 * h, h], 1.0 / (h as f64).sqrt(), rng);
        let mut b = Array1::<f64>::zeros(4 * h);
        b.slice_mut(s![h..2 * h]).fill(1.0);
        params.insert(&self.b, b.into_dyn(), true);
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
        static_input: Option<ArrayView1<f64>>,
    ) -> Result<LstmCache> {
        let h = self.hidden;
        let g4 = 4 * h;
        check_cols(&self.w_ih, &x, self.input_dim)?;
        let w_ih = params.matrix(&self.w_ih, g4, self.in_width())?;
        // Hᵀ layout so the recurrent product is a sequence of axpys over 4H lanes.
        let w_hh_t = params.matrix(&self.w_hh, g4, h)?.t().as_standard_layout().into_owned();
        let w_hh_t = w_hh_t.as_slice().expect("standard layout");
        let mut bias = params.vector(&self.b, g4)?.to_owned();
        match (static_input, self.static_dim) {
            (None, 0) => {}
            (Some(e), d) if e.len() == d && d > 0 => {
                bias += &w_ih.slice(s![.., self.input_dim..]).dot(&e);
            }
            (got, d) => {
                return Err(PvadError::Shape {
                    path: format!("{} (static input)", self.w_ih),
                    expected: vec![d],
                    got: vec![got.map_or(0, |e| e.len())],
                })
            }
        }

        let t_len = x.nrows();
        let mut gates = x.dot(&w_ih.slice(s![.., ..self.input_dim]).t());
        gates += &bias;
        let mut c = Array2::<f64>::zeros((t_len, h));
        let mut tanh_c = Array2::<f64>::zeros((t_len, h));
        let mut hs = Array2::<f64>::zeros((t_len, h));
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];

        for t in 0..t_len {
            let mut z_row = gates.row_mut(t);
            let z = z_row.as_slice_mut().expect("row-major gates");
            for (k, &hk) in h_prev.iter().enumerate() {
                let w = &w_hh_t[k * g4..(k + 1) * g4];
                for (zr, wr) in z.iter_mut().zip(w) {
                    *zr += hk * wr;
                }
            }
            let (zi, rest) = z.split_at_mut(h);
            let (zf, rest) = rest.split_at_mut(h);
            let (zg, zo) = rest.split_at_mut(h);
            let mut c_row = c.row_mut(t);
            let mut tc_row = tanh_c.row_mut(t);
            let mut h_row = hs.row_mut(t);
            for k in 0..h {
                let i = sigmoid(zi[k]);
                let f = sigmoid(zf[k]);
                let g = zg[k].tanh();
                let o = sigmoid(zo[k]);
                let ck = f * c_prev[k] + i * g;
                let tck = ck.tanh();
                zi[k] = i;
                zf[k] = f;
                zg[k] = g;
                zo[k] = o;
                c_row[k] = ck;
                tc_row[k] = tck;
                h_row[k] = o * tck;
                c_prev[k] = ck;
                h_prev[k] = o * tck;
            }
        }

        Ok(LstmCache {
            x: x.to_owned(),
            static_input: static_input.map(|e| e.to_owned()),
            gates,
            c,
            tanh_c,
            h: hs,
        })
    }

    /// Backpropagates `dL/dh` (T × H) through time. Accumulates parameter
    /// gradients and returns `dL/dx` for the per-frame input.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &LstmCache,
        dh_out: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let dz = self.backward_gates(params, cache, dh_out, grads)?;
        let w_ih = params.matrix(&self.w_ih, 4 * self.hidden, self.in_width())?;
        Ok(dz.dot(&w_ih.slice(s![.., ..self.input_dim])))
    }

    /// Parameter gradients only, for a first layer whose input needs none.
    pub fn backward_params(
        &self,
        params: &ParamSet,
        cache: &LstmCache,
        dh_out: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.backward_gates(params, cache, dh_out, grads).map(drop)
    }

    /// Accumulates parameter gradients; returns `dL/dz` of the gates.
    fn backward_gates(
        &self,
        params: &ParamSet,
        cache: &LstmCache,
        dh_out: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let h = self.hidden;
        let g4 = 4 * h;
        let t_len = cache.x.nrows();
        if dh_out.shape() != [t_len, h] {
            return Err(PvadError::Shape {
                path: format!("{} (output gradient)", self.w_hh),
                expected: vec![t_len, h],
                got: dh_out.shape().to_vec(),
            });
        }
        let w_hh_view = params.matrix(&self.w_hh, g4, h)?;
        let w_hh_std = w_hh_view.as_standard_layout();
        let w_hh = w_hh_std.as_slice().expect("standard layout");

        let mut dz = Array2::<f64>::zeros((t_len, g4));
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..t_len).rev() {
            let gates = cache.gates.row(t);
            let tc = cache.tanh_c.row(t);
            let mut dz_row = dz.row_mut(t);
            let dz_t = dz_row.as_slice_mut().expect("row-major");
            for k in 0..h {
                let i = gates[k];
                let f = gates[h + k];
                let g = gates[2 * h + k];
                let o = gates[3 * h + k];
                let c_prev = if t > 0 { cache.c[[t - 1, k]] } else { 0.0 };
                let dh = dh_out[[t, k]] + dh_next[k];
                let dc = dh * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
                dz_t[k] = dc * g * i * (1.0 - i);
                dz_t[h + k] = dc * c_prev * f * (1.0 - f);
                dz_t[2 * h + k] = dc * i * (1.0 - g * g);
                dz_t[3 * h + k] = dh * tc[k] * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for (r, &d) in dz_t.iter().enumerate() {
                let w = &w_hh[r * h..(r + 1) * h];
                for (acc, wk) in dh_next.iter_mut().zip(w) {
                    *acc += d * wk;
                }
            }
        }

        {
            let mut gw = grads.matrix_mut(&self.w_ih)?;
            general_mat_mul(
                1.0,
                &dz.t(),
                &cache.x,
                1.0,
                &mut gw.slice_mut(s![.., ..self.input_dim]),
            );
            if let Some(e) = &cache.static_input {
                let dsum = dz.sum_axis(Axis(0));
                let mut gs = gw.slice_mut(s![.., self.input_dim..]);
                for (r, d) in dsum.iter().enumerate() {
                    gs.row_mut(r).scaled_add(*d, e);
                }
            }
        }
        if t_len > 1 {
            general_mat_mul(
                1.0,
                &dz.slice(s![1.., ..]).t(),
                &cache.h.slice(s![..t_len - 1, ..]),
                1.0,
                &mut grads.matrix_mut(&self.w_hh)?,
            );
        }
        {
            let mut g = grads.vector_mut(&self.b)?;
            g += &dz.sum_axis(Axis(0));
        }
        Ok(dz)
    }
}

/// Two independent LSTMs, the second run over reversed time; per-frame
/// output is `[forward, backward]`.
#[derive(Debug, Clone)]
pub struct Blstm {
    fwd: Lstm,
    bwd: Lstm,
}

#[derive(Debug, Clone)]
pub struct BlstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
    out: Array2<f64>,
}

impl BlstmCache {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.out.view()
    }
}

impl Blstm {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize) -> Self {
        Self {
            fwd: Lstm::new(&format!("{prefix}.fwd"), input_dim, hidden),
            bwd: Lstm::new(&format!("{prefix}.bwd"), input_dim, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        self.fwd.init(params, rng);
        self.bwd.init(params, rng);
    }

    pub fn forward(&self, params: &ParamSet, x: ArrayView2<f64>) -> Result<BlstmCache> {
        let h = self.hidden();
        let fwd = self.fwd.forward(params, x, None)?;
        let bwd = self.bwd.forward(params, x.slice(s![..;-1, ..]), None)?;
        let mut out = Array2::<f64>::zeros((x.nrows(), 2 * h));
        out.slice_mut(s![.., ..h]).assign(&fwd.output());
        out.slice_mut(s![.., h..]).assign(&bwd.output().slice(s![..;-1, ..]));
        Ok(BlstmCache { fwd, bwd, out })
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &BlstmCache,
        d_out: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let h = self.hidden();
        let dx_f = self
            .fwd
            .backward(params, &cache.fwd, d_out.slice(s![.., ..h]), grads)?;
        let dx_b = self
            .bwd
            .backward(params, &cache.bwd, d_out.slice(s![..;-1, h..]), grads)?;
        Ok(dx_f + &dx_b.slice(s![..;-1, ..]))
    }
}

/// Softmax-weighted mean over frames: `a = softmax_t(vᵀ tanh(W h_t + b))`,
/// `e = Σ_t a_t h_t`.
#[derive(Debug, Clone)]
pub struct AttentivePooling {
    w: String,
    b: String,
    v: String,
    pub dim: usize,
    pub attention_dim: usize,
}

#[derive(Debug, Clone)]
pub struct PoolingCache {
    h: Array2<f64>,
    u: Array2<f64>,
    pub weights: Array1<f64>,
    pub pooled: Array1<f64>,
}

impl AttentivePooling {
    pub fn new(prefix: &str, dim: usize, attention_dim: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            v: format!("{prefix}.v"),
            dim,
            attention_dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        params.insert_uniform(
            &self.w,
            &[self.attention_dim, self.dim],
            1.0 / (self.dim as f64).sqrt(),
            rng,
        );
        params.insert_filled(&self.b, &[self.attention_dim], 0.0);
        params.insert_uniform(
            &self.v,
            &[self.attention_dim],
            1.0 / (self.attention_dim as f64).sqrt(),
            rng,
        );
    }

    pub fn forward(&self, params: &ParamSet, h: ArrayView2<f64>) -> Result<PoolingCache> {
        if h.nrows() == 0 {
            return Err(PvadError::invalid("attentive pooling over zero frames"));
        }
        check_cols(&self.w, &h, self.dim)?;
        let w = params.matrix(&self.w, self.attention_dim, self.dim)?;
        let b = params.vector(&self.b, self.attention_dim)?;
        let v = params.vector(&self.v, self.attention_dim)?;
        let u = (h.dot(&w.t()) + &b).mapv(f64::tanh);
        let scores = u.dot(&v);
        let weights = softmax_vec(scores.view());
        let pooled = weights.dot(&h);
        Ok(PoolingCache {
            h: h.to_owned(),
            u,
            weights,
            pooled,
        })
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &PoolingCache,
        d_pooled: ArrayView1<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let w = params.matrix(&self.w, self.attention_dim, self.dim)?;
        let v = params.vector(&self.v, self.attention_dim)?;
        let a = &cache.weights;
        let da = cache.h.dot(&d_pooled);
        let mean = a.dot(&da);
        let ds = a * &(da - mean);

        let mut dh = Array2::<f64>::zeros(cache.h.raw_dim());
        for (t, mut row) in dh.rows_mut().into_iter().enumerate() {
            row.scaled_add(a[t], &d_pooled);
        }
        {
            let mut g = grads.vector_mut(&self.v)?;
            g += &cache.u.t().dot(&ds);
        }
        let mut dpre = cache.u.mapv(|x| 1.0 - x * x);
        for (t, mut row) in dpre.rows_mut().into_iter().enumerate() {
            row *= &(&v * ds[t]);
        }
        general_mat_mul(1.0, &dpre.t(), &cache.h, 1.0, &mut grads.matrix_mut(&self.w)?);
        {
            let mut g = grads.vector_mut(&self.b)?;
            g += &dpre.sum_axis(Axis(0));
        }
        dh += &dpre.dot(&w);
        Ok(dh)
    }
}

pub fn softmax_vec(x: ArrayView1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}
