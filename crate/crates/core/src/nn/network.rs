use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{DenseSlot, Layout, LstmSlot};
use super::{FinalActivation, NetworkSpec, NnError};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A batch of equal-length sequences, stored time-major: one
/// `batch × dim` matrix per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    steps: Vec<Array2<f64>>,
}

impl SeqBatch {
    pub fn new(steps: Vec<Array2<f64>>) -> Result<Self, NnError> {
        let Some(first) = steps.first() else {
            return Err(NnError::Shape("empty sequence".into()));
        };
        let dim = first.dim();
        if dim.0 == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        if steps.iter().any(|m| m.dim() != dim) {
            return Err(NnError::Shape("steps differ in shape".into()));
        }
        Ok(Self { steps })
    }

    /// Single-step batch, one row per sample.
    pub fn from_rows(rows: Array2<f64>) -> Self {
        Self { steps: vec![rows] }
    }

    /// Builds a batch by filling each `(step, sample)` feature slice.
    pub fn from_fn(
        seq_len: usize,
        batch: usize,
        dim: usize,
        mut fill: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let steps = (0..seq_len)
            .map(|t| {
                let mut m = Array2::zeros((batch, dim));
                for (b, mut row) in m.rows_mut().into_iter().enumerate() {
                    fill(t, b, row.as_slice_mut().expect("row-major"));
                }
                m
            })
            .collect();
        Self { steps }
    }

    pub fn seq_len(&self) -> usize {
        self.steps.len()
    }

    pub fn batch_size(&self) -> usize {
        self.steps[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].ncols()
    }

    pub fn steps(&self) -> &[Array2<f64>] {
        &self.steps
    }
}

struct LstmCache {
    /// `[x_t, h_{t-1}]` per step.
    xh: Vec<Array2<f64>>,
    /// Post-activation gates (i, f, g, o) per step.
    gates: Vec<Array2<f64>>,
    c_prev: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
}

struct DenseCache {
    input: Array2<f64>,
    /// Normalized pre-activations and their per-row inverse std.
    norm: Option<(Array2<f64>, Array1<f64>)>,
    pre_relu: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Intermediate values recorded by [`Network::forward_cached`].
pub struct ForwardCache {
    lstm: Vec<LstmCache>,
    dense: Vec<DenseCache>,
    out_input: Array2<f64>,
    out_pre: Array2<f64>,
    output: Array2<f64>,
    batch: usize,
    seq_len: usize,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter gradient plus the gradient with respect to each input step.
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<Array2<f64>>,
}

/// Recurrent/dense function approximator with a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
    mode: Mode,
    layout: Layout,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Network {
    /// Initializes every layer uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// where fan_in is `input + hidden` for LSTM layers. Layer-norm gains
    /// start at 1 and shifts at 0.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.n_params];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.gen_range(-bound..=bound);
            }
        };
        for l in &layout.lstm {
            fill(l.w..l.b + 4 * l.hidden, l.input + l.hidden, &mut rng);
        }
        for d in layout.dense.iter().chain(std::iter::once(&layout.output)) {
            fill(d.w..d.b + d.units, d.input, &mut rng);
        }
        for d in &layout.dense {
            if let Some((g, _)) = d.norm {
                params[g..g + d.units].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        Ok(Self { spec, params, mode: Mode::Eval, layout })
    }

    pub fn from_parameters(spec: NetworkSpec, params: Vec<f64>) -> Result<Self, NnError> {
        spec.validate()?;
        let layout = spec.layout();
        if params.len() != layout.n_params {
            return Err(NnError::Shape(format!(
                "expected {} parameters, got {}",
                layout.n_params,
                params.len()
            )));
        }
        Ok(Self { spec, params, mode: Mode::Eval, layout })
    }

    /// Network whose pre-activation output is `bias` for every input: all
    /// weights are zero (layer-norm gains stay one).
    pub fn constant(spec: NetworkSpec, bias: &[f64]) -> Result<Self, NnError> {
        let mut net = Self::build(spec, 0)?;
        if bias.len() != net.spec.output_dim {
            return Err(NnError::Shape(format!("bias of length {} for {} outputs", bias.len(), net.spec.output_dim)));
        }
        let gains: Vec<usize> = net.layout.dense.iter().filter_map(|d| d.norm.map(|(g, _)| g)).collect();
        net.params.iter_mut().for_each(|p| *p = 0.0);
        for (g, d) in gains.iter().zip(net.layout.dense.iter().filter(|d| d.norm.is_some())) {
            net.params[*g..*g + d.units].iter_mut().for_each(|v| *v = 1.0);
        }
        let b = net.layout.output.b;
        net.params[b..b + bias.len()].copy_from_slice(bias);
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn mat(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols]).expect("layout")
    }

    fn vec(&self, off: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[off..off + len])
    }

    /// Deterministic inference; dropout is never applied.
    pub fn forward(&self, input: &SeqBatch) -> Result<Array2<f64>, NnError> {
        self.run(input, None, false).map(|c| c.output)
    }

    /// Forward pass recording what [`backward`](Self::backward) needs.
    ///
    /// In [`Mode::Train`] with a positive dropout rate a mask stream is
    /// required; masks are drawn from it on every call.
    pub fn forward_cached(
        &self,
        input: &SeqBatch,
        masks: Option<&mut dyn RngCore>,
    ) -> Result<ForwardCache, NnError> {
        let dropout = self.mode == Mode::Train && self.spec.dropout_rate > 0.0;
        if dropout && masks.is_none() {
            return Err(NnError::MissingMasks);
        }
        self.run(input, if dropout { masks } else { None }, true)
    }

    fn run(
        &self,
        input: &SeqBatch,
        mut masks: Option<&mut dyn RngCore>,
        record: bool,
    ) -> Result<ForwardCache, NnError> {
        if input.dim() != self.spec.input_dim {
            return Err(NnError::Shape(format!(
                "input dim {} but network expects {}",
                input.dim(),
                self.spec.input_dim
            )));
        }
        if self.layout.lstm.is_empty() && input.seq_len() != 1 {
            return Err(NnError::Shape("feed-forward network takes single-step input".into()));
        }
        let batch = input.batch_size();
        let mut lstm_caches = Vec::new();
        let mut seq: Vec<Array2<f64>> = input.steps.clone();
        for slot in &self.layout.lstm {
            let (hs, cache) = self.lstm_forward(slot, &seq);
            seq = hs;
            if record {
                lstm_caches.push(cache);
            }
        }
        let mut x = seq.pop().expect("non-empty");
        let mut dense_caches = Vec::new();
        for slot in &self.layout.dense {
            let (y, cache) = self.dense_forward(slot, x, &mut masks);
            x = y;
            dense_caches.push(cache);
        }
        let out = &self.layout.output;
        let mut pre = x.dot(&self.mat(out.w, out.input, out.units));
        pre += &self.vec(out.b, out.units);
        let output = self.apply_final(&pre);
        Ok(ForwardCache {
            lstm: lstm_caches,
            dense: if record { dense_caches } else { Vec::new() },
            out_input: x,
            out_pre: pre,
            output,
            batch,
            seq_len: input.seq_len(),
        })
    }

    fn lstm_forward(&self, slot: &LstmSlot, xs: &[Array2<f64>]) -> (Vec<Array2<f64>>, LstmCache) {
        let hsz = slot.hidden;
        let batch = xs[0].nrows();
        let w = self.mat(slot.w, slot.input + hsz, 4 * hsz);
        let bias = self.vec(slot.b, 4 * hsz);
        let mut h = Array2::<f64>::zeros((batch, hsz));
        let mut c = Array2::<f64>::zeros((batch, hsz));
        let mut cache = LstmCache {
            xh: Vec::with_capacity(xs.len()),
            gates: Vec::with_capacity(xs.len()),
            c_prev: Vec::with_capacity(xs.len()),
            tanh_c: Vec::with_capacity(xs.len()),
        };
        let mut hs = Vec::with_capacity(xs.len());
        for x in xs {
            let xh = concatenate![Axis(1), x.view(), h.view()];
            let mut z = xh.dot(&w);
            z += &bias;
            let mut c_new = Array2::<f64>::zeros((batch, hsz));
            let mut tc = Array2::<f64>::zeros((batch, hsz));
            let mut h_new = Array2::<f64>::zeros((batch, hsz));
            for b in 0..batch {
                let zr = z.row_mut(b).into_slice().expect("row-major");
                for v in &mut zr[..2 * hsz] {
                    *v = sigmoid(*v);
                }
                for v in &mut zr[2 * hsz..3 * hsz] {
                    *v = v.tanh();
                }
                for v in &mut zr[3 * hsz..] {
                    *v = sigmoid(*v);
                }
                for j in 0..hsz {
                    let cv = zr[hsz + j] * c[[b, j]] + zr[j] * zr[2 * hsz + j];
                    let t = cv.tanh();
                    c_new[[b, j]] = cv;
                    tc[[b, j]] = t;
                    h_new[[b, j]] = zr[3 * hsz + j] * t;
                }
            }
            cache.xh.push(xh);
            cache.gates.push(z);
            cache.c_prev.push(std::mem::replace(&mut c, c_new));
            cache.tanh_c.push(tc);
            h = h_new;
            hs.push(h.clone());
        }
        (hs, cache)
    }

    fn dense_forward(
        &self,
        slot: &DenseSlot,
        x: Array2<f64>,
        masks: &mut Option<&mut dyn RngCore>,
    ) -> (Array2<f64>, DenseCache) {
        let mut z = x.dot(&self.mat(slot.w, slot.input, slot.units));
        z += &self.vec(slot.b, slot.units);
        let norm = slot.norm.map(|(g, sh)| {
            let n = slot.units as f64;
            let mut inv = Array1::zeros(z.nrows());
            for (r, mut row) in z.rows_mut().into_iter().enumerate() {
                let mean = row.sum() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                row.mapv_inplace(|v| (v - mean) * is);
                inv[r] = is;
            }
            let xhat = z.clone();
            z *= &self.vec(g, slot.units);
            z += &self.vec(sh, slot.units);
            (xhat, inv)
        });
        let pre_relu = z;
        let mut y = pre_relu.mapv(|v| v.max(0.0));
        let mask = masks.as_mut().map(|rng| {
            let p = self.spec.dropout_rate;
            let keep = 1.0 / (1.0 - p);
            let m = Array2::from_shape_fn(y.dim(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
            y *= &m;
            m
        });
        (y, DenseCache { input: x, norm, pre_relu, mask })
    }

    fn apply_final(&self, pre: &Array2<f64>) -> Array2<f64> {
        match self.spec.final_activation {
            FinalActivation::None => pre.clone(),
            FinalActivation::Relu => pre.mapv(|v| v.max(0.0)),
            FinalActivation::SoftmaxPerGroup(g) => {
                let mut out = pre.clone();
                for mut row in out.rows_mut() {
                    for chunk in row.as_slice_mut().expect("row-major").chunks_mut(g) {
                        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in chunk.iter_mut() {
                            *v = (*v - m).exp();
                            sum += *v;
                        }
                        chunk.iter_mut().for_each(|v| *v /= sum);
                    }
                }
                out
            }
        }
    }

    /// Back-propagates `adjoint` (d loss / d output) through a recorded pass.
    pub fn backward(&self, cache: &ForwardCache, adjoint: &Array2<f64>) -> Result<Gradients, NnError> {
        if adjoint.dim() != cache.output.dim() {
            return Err(NnError::Shape(format!(
                "adjoint {:?} does not match output {:?}",
                adjoint.dim(),
                cache.output.dim()
            )));
        }
        let mut grads = vec![0.0; self.layout.n_params];
        let d_pre = match self.spec.final_activation {
            FinalActivation::None => adjoint.clone(),
            FinalActivation::Relu => {
                let mut d = adjoint.clone();
                d.zip_mut_with(&cache.out_pre, |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                d
            }
            FinalActivation::SoftmaxPerGroup(g) => {
                let mut d = adjoint.clone();
                for (mut drow, prow) in d.rows_mut().into_iter().zip(cache.output.rows()) {
                    let ds = drow.as_slice_mut().expect("row-major");
                    let ps = prow.to_slice().expect("row-major");
                    for (dc, pc) in ds.chunks_mut(g).zip(ps.chunks(g)) {
                        let dot: f64 = dc.iter().zip(pc).map(|(a, b)| a * b).sum();
                        for (dv, &pv) in dc.iter_mut().zip(pc) {
                            *dv = pv * (*dv - dot);
                        }
                    }
                }
                d
            }
        };
        let mut dx = self.linear_backward(&self.layout.output, &cache.out_input, &d_pre, &mut grads);
        for (slot, dc) in self.layout.dense.iter().zip(&cache.dense).rev() {
            dx = self.dense_backward(slot, dc, dx, &mut grads);
        }
        let mut d_steps: Vec<Array2<f64>> = Vec::new();
        if self.layout.lstm.is_empty() {
            d_steps.push(dx);
        } else {
            let mut ext: Vec<Option<Array2<f64>>> = vec![None; cache.seq_len];
            ext[cache.seq_len - 1] = Some(dx);
            for (slot, lc) in self.layout.lstm.iter().zip(&cache.lstm).rev() {
                let dxs = self.lstm_backward(slot, lc, &ext, cache.batch, &mut grads);
                ext = dxs.into_iter().map(Some).collect();
            }
            d_steps = ext.into_iter().map(|m| m.expect("filled")).collect();
        }
        Ok(Gradients { params: grads, input: d_steps })
    }

    fn linear_backward(
        &self,
        slot: &DenseSlot,
        input: &Array2<f64>,
        dz: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let (inp, units) = (slot.input, slot.units);
        {
            let mut dw = ArrayViewMut2::from_shape((inp, units), &mut grads[slot.w..slot.w + inp * units])
                .expect("layout");
            general_mat_mul(1.0, &input.t(), dz, 1.0, &mut dw);
        }
        let mut db = ArrayViewMut1::from(&mut grads[slot.b..slot.b + units]);
        db += &dz.sum_axis(Axis(0));
        dz.dot(&self.mat(slot.w, inp, units).t())
    }

    fn dense_backward(
        &self,
        slot: &DenseSlot,
        cache: &DenseCache,
        mut d: Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        if let Some(mask) = &cache.mask {
            d *= mask;
        }
        d.zip_mut_with(&cache.pre_relu, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        if let (Some((g_off, s_off)), Some((xhat, inv))) = (slot.norm, &cache.norm) {
            let units = slot.units;
            {
                let mut dg = ArrayViewMut1::from(&mut grads[g_off..g_off + units]);
                dg += &(&d * xhat).sum_axis(Axis(0));
            }
            {
                let mut ds = ArrayViewMut1::from(&mut grads[s_off..s_off + units]);
                ds += &d.sum_axis(Axis(0));
            }
            let gain = self.vec(g_off, units);
            let n = units as f64;
            let mut dz = &d * &gain;
            for ((mut row, xr), &is) in dz.rows_mut().into_iter().zip(xhat.rows()).zip(inv.iter()) {
                let sum: f64 = row.sum();
                let dotx: f64 = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                for (v, &xh) in row.iter_mut().zip(xr.iter()) {
                    *v = is / n * (n * *v - sum - xh * dotx);
                }
            }
            d = dz;
        }
        self.linear_backward(slot, &cache.input, &d, grads)
    }

    fn lstm_backward(
        &self,
        slot: &LstmSlot,
        cache: &LstmCache,
        ext: &[Option<Array2<f64>>],
        batch: usize,
        grads: &mut [f64],
    ) -> Vec<Array2<f64>> {
        let hsz = slot.hidden;
        let rows = slot.input + hsz;
        let w = self.mat(slot.w, rows, 4 * hsz);
        let steps = cache.xh.len();
        let mut dw = Array2::<f64>::zeros((rows, 4 * hsz));
        let mut db = Array1::<f64>::zeros(4 * hsz);
        let mut dh_next = Array2::<f64>::zeros((batch, hsz));
        let mut dc_next = Array2::<f64>::zeros((batch, hsz));
        let mut dxs = vec![Array2::<f64>::zeros((0, 0)); steps];
        let mut dz = Array2::<f64>::zeros((batch, 4 * hsz));
        for t in (0..steps).rev() {
            let gates = &cache.gates[t];
            let tc = &cache.tanh_c[t];
            let cp = &cache.c_prev[t];
            for b in 0..batch {
                let gr = gates.row(b);
                let gr = gr.to_slice().expect("row-major");
                let dzr = dz.row_mut(b).into_slice().expect("row-major");
                for j in 0..hsz {
                    let mut dh = dh_next[[b, j]];
                    if let Some(e) = &ext[t] {
                        dh += e[[b, j]];
                    }
                    let (i, f, g, o) = (gr[j], gr[hsz + j], gr[2 * hsz + j], gr[3 * hsz + j]);
                    let tcv = tc[[b, j]];
                    let dc = dh * o * (1.0 - tcv * tcv) + dc_next[[b, j]];
                    dzr[j] = dc * g * i * (1.0 - i);
                    dzr[hsz + j] = dc * cp[[b, j]] * f * (1.0 - f);
                    dzr[2 * hsz + j] = dc * i * (1.0 - g * g);
                    dzr[3 * hsz + j] = dh * tcv * o * (1.0 - o);
                    dc_next[[b, j]] = dc * f;
                }
            }
            general_mat_mul(1.0, &cache.xh[t].t(), &dz, 1.0, &mut dw);
            db += &dz.sum_axis(Axis(0));
            let dxh = dz.dot(&w.t());
            dxs[t] = dxh.slice(s![.., ..slot.input]).to_owned();
            dh_next = dxh.slice(s![.., slot.input..]).to_owned();
        }
        for (g, v) in grads[slot.w..slot.w + rows * 4 * hsz].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grads[slot.b..slot.b + 4 * hsz].iter_mut().zip(db.iter()) {
            *g += v;
        }
        dxs
    }

    /// Eval-mode parameter gradient of `sum(adjoint ⊙ forward(input))`.
    pub fn gradients(&self, input: &SeqBatch, adjoint: &Array2<f64>) -> Result<Vec<f64>, NnError> {
        let cache = self.run(input, None, true)?;
        Ok(self.backward(&cache, adjoint)?.params)
    }

    /// `self ← tau·self + (1 − tau)·online`.
    pub fn soft_update_from(&mut self, online: &Network, tau: f64) -> Result<(), NnError> {
        if self.spec != online.spec {
            return Err(NnError::SpecMismatch);
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(NnError::InvalidSpec(format!("tau {tau} outside [0, 1]")));
        }
        for (t, &o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * *t + (1.0 - tau) * o;
        }
        Ok(())
    }
}
