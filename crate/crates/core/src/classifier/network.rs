//! Convolutional sub-window encoder, recurrent aggregator and softmax head
//! over one flat parameter vector, with batched forward and reverse passes.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::ClassifierError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub features: usize,
    pub classes: usize,
    /// Window length W in steps; a multiple of `sub_window`.
    pub window: usize,
    /// Sub-window length L.
    pub sub_window: usize,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub dense: usize,
    pub dropout: f64,
    pub bidirectional: bool,
    pub attention: bool,
    pub attention_dim: usize,
}

impl Architecture {
    /// The reference stack: conv(64, 3) x 2, 20-unit LSTM, dense 100.
    pub fn reference(features: usize, classes: usize, window: usize) -> Self {
        Architecture {
            features,
            classes,
            window,
            sub_window: 10,
            filters: 64,
            kernel: 3,
            hidden: 20,
            dense: 100,
            dropout: 0.5,
            bidirectional: false,
            attention: false,
            attention_dim: 20,
        }
    }

    pub fn sub_windows(&self) -> usize {
        self.window / self.sub_window
    }

    fn conv1_len(&self) -> usize {
        self.sub_window + 1 - self.kernel
    }

    fn conv2_len(&self) -> usize {
        self.conv1_len() + 1 - self.kernel
    }

    fn pooled_len(&self) -> usize {
        self.conv2_len() / 2
    }

    /// Width of one encoded sub-window.
    pub fn encoding_dim(&self) -> usize {
        self.pooled_len() * self.filters
    }

    pub fn representation_dim(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Architecture(m.to_string()));
        if self.features == 0 || self.classes < 2 || self.filters == 0 || self.hidden == 0 || self.dense == 0 {
            return bad("layer sizes must be positive and there must be at least two classes");
        }
        if self.kernel == 0 || self.sub_window < 2 * self.kernel {
            return bad("sub-window too short for two valid convolutions and pooling");
        }
        if self.window == 0 || !self.window.is_multiple_of(self.sub_window) {
            return bad("window length must be a positive multiple of the sub-window length");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout rate must lie in [0, 1)");
        }
        if self.attention && self.attention_dim == 0 {
            return bad("attention dimension must be positive");
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn view<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.range()]).expect("slot fits")
    }

    fn view_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut p[self.range()]).expect("slot fits")
    }

    fn vector<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.range()])
    }

    fn vector_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut p[self.range()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmSlots {
    /// Input weights, `D x 4H`, gate order (input, forget, cell, output).
    pub wx: Slot,
    pub wh: Slot,
    pub b: Slot,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv1_w: Slot,
    pub conv1_b: Slot,
    pub conv2_w: Slot,
    pub conv2_b: Slot,
    pub lstm_fwd: LstmSlots,
    pub lstm_bwd: Option<LstmSlots>,
    /// `(Wa, ba, v)` of the additive attention pooling.
    pub attention: Option<(Slot, Slot, Slot)>,
    pub dense_w: Slot,
    pub dense_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
    pub total: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let mut offset = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let conv1_w = slot(a.kernel * a.features, a.filters);
        let conv1_b = slot(1, a.filters);
        let conv2_w = slot(a.kernel * a.filters, a.filters);
        let conv2_b = slot(1, a.filters);
        let lstm = |slot: &mut dyn FnMut(usize, usize) -> Slot| LstmSlots {
            wx: slot(a.encoding_dim(), 4 * a.hidden),
            wh: slot(a.hidden, 4 * a.hidden),
            b: slot(1, 4 * a.hidden),
        };
        let lstm_fwd = lstm(&mut slot);
        let lstm_bwd = a.bidirectional.then(|| lstm(&mut slot));
        let rep = a.representation_dim();
        let attention = a.attention.then(|| {
            (
                slot(rep, a.attention_dim),
                slot(1, a.attention_dim),
                slot(1, a.attention_dim),
            )
        });
        let dense_w = slot(rep, a.dense);
        let dense_b = slot(1, a.dense);
        let out_w = slot(a.dense, a.classes);
        let out_b = slot(1, a.classes);
        Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            lstm_fwd,
            lstm_bwd,
            attention,
            dense_w,
            dense_b,
            out_w,
            out_b,
            total: offset,
        }
    }
}

/// Seeded initialization: He-uniform for ReLU layers, Glorot-uniform for
/// the attention and output layers, `U(-1/sqrt(H), 1/sqrt(H))` for the
/// recurrent weights, forget-gate bias 1.
pub fn init_params<R: Rng + ?Sized>(a: &Architecture, rng: &mut R) -> Vec<f64> {
    let layout = a.layout();
    let mut p = vec![0.0; layout.total];
    let mut fill = |slot: Slot, limit: f64, p: &mut [f64]| {
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        for v in &mut p[slot.range()] {
            *v = dist.sample(rng);
        }
    };
    fill(layout.conv1_w, (6.0 / layout.conv1_w.rows as f64).sqrt(), &mut p);
    fill(layout.conv2_w, (6.0 / layout.conv2_w.rows as f64).sqrt(), &mut p);
    let lstm_limit = 1.0 / (a.hidden as f64).sqrt();
    for l in std::iter::once(layout.lstm_fwd).chain(layout.lstm_bwd) {
        fill(l.wx, lstm_limit, &mut p);
        fill(l.wh, lstm_limit, &mut p);
        for v in &mut p[l.b.offset + a.hidden..l.b.offset + 2 * a.hidden] {
            *v = 1.0;
        }
    }
    if let Some((wa, _, v)) = layout.attention {
        fill(wa, (6.0 / (wa.rows + wa.cols) as f64).sqrt(), &mut p);
        fill(v, (6.0 / (1 + v.cols) as f64).sqrt(), &mut p);
    }
    fill(layout.dense_w, (6.0 / layout.dense_w.rows as f64).sqrt(), &mut p);
    fill(
        layout.out_w,
        (6.0 / (layout.out_w.rows + layout.out_w.cols) as f64).sqrt(),
        &mut p,
    );
    p
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(m: &mut Array2<f64>, b: ArrayView1<f64>) {
    m.rows_mut().into_iter().for_each(|mut r| r += &b);
}

fn check_finite(m: &Array2<f64>, layer: &'static str) -> Result<(), ClassifierError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ClassifierError::NonFinite(layer))
    }
}

struct LstmCache {
    /// Post-activation gates per (time, batch) row.
    gates: Array2<f64>,
    cell: Array2<f64>,
    cell_tanh: Array2<f64>,
    hidden: Array2<f64>,
}

/// Rows are time-major: row `t * batch + b`.
fn lstm_forward(x: &Array2<f64>, slots: &LstmSlots, p: &[f64], steps: usize, batch: usize, reverse: bool) -> LstmCache {
    let h_dim = slots.wh.rows;
    let mut pre = x.dot(&slots.wx.view(p));
    add_bias(&mut pre, slots.b.vector(p));
    let wh = slots.wh.view(p);
    let mut gates = Array2::zeros((steps * batch, 4 * h_dim));
    let mut cell = Array2::zeros((steps * batch, h_dim));
    let mut cell_tanh = Array2::zeros((steps * batch, h_dim));
    let mut hidden = Array2::zeros((steps * batch, h_dim));
    let mut h_prev = Array2::<f64>::zeros((batch, h_dim));
    let mut c_prev = Array2::<f64>::zeros((batch, h_dim));
    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        let rows = t * batch..(t + 1) * batch;
        let mut a = pre.slice(s![rows.clone(), ..]).to_owned();
        if k > 0 {
            a += &h_prev.dot(&wh);
        }
        for b in 0..batch {
            let mut ar = a.row_mut(b);
            for j in 0..h_dim {
                let i = sigmoid(ar[j]);
                let f = sigmoid(ar[h_dim + j]);
                let g = ar[2 * h_dim + j].tanh();
                let o = sigmoid(ar[3 * h_dim + j]);
                ar[j] = i;
                ar[h_dim + j] = f;
                ar[2 * h_dim + j] = g;
                ar[3 * h_dim + j] = o;
                let c = f * c_prev[(b, j)] + i * g;
                let tc = c.tanh();
                c_prev[(b, j)] = c;
                h_prev[(b, j)] = o * tc;
                cell[(t * batch + b, j)] = c;
                cell_tanh[(t * batch + b, j)] = tc;
            }
        }
        gates.slice_mut(s![rows.clone(), ..]).assign(&a);
        hidden.slice_mut(s![rows, ..]).assign(&h_prev);
    }
    LstmCache {
        gates,
        cell,
        cell_tanh,
        hidden,
    }
}

/// Backpropagation through time. `dh_ext` holds the gradient arriving at
/// each hidden output from above. Returns the input gradient and
/// accumulates parameter gradients into `grad`.
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    x: &Array2<f64>,
    cache: &LstmCache,
    slots: &LstmSlots,
    p: &[f64],
    grad: &mut [f64],
    dh_ext: &Array2<f64>,
    steps: usize,
    batch: usize,
    reverse: bool,
) -> Array2<f64> {
    let h_dim = slots.wh.rows;
    let wh = slots.wh.view(p);
    let mut d_pre = Array2::<f64>::zeros((steps * batch, 4 * h_dim));
    let mut dh_next = Array2::<f64>::zeros((batch, h_dim));
    let mut dc_next = Array2::<f64>::zeros((batch, h_dim));
    let mut d_wh = Array2::<f64>::zeros((h_dim, 4 * h_dim));
    for k in (0..steps).rev() {
        let t = if reverse { steps - 1 - k } else { k };
        let prev_t = (k > 0).then(|| if reverse { t + 1 } else { t - 1 });
        let mut da = Array2::<f64>::zeros((batch, 4 * h_dim));
        for b in 0..batch {
            let row = t * batch + b;
            let g = cache.gates.row(row);
            for j in 0..h_dim {
                let (i, f, gg, o) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
                let tc = cache.cell_tanh[(row, j)];
                let c_prev = prev_t.map_or(0.0, |pt| cache.cell[(pt * batch + b, j)]);
                let dh = dh_ext[(row, j)] + dh_next[(b, j)];
                let d_o = dh * tc;
                let dc = dc_next[(b, j)] + dh * o * (1.0 - tc * tc);
                da[(b, j)] = dc * gg * i * (1.0 - i);
                da[(b, h_dim + j)] = dc * c_prev * f * (1.0 - f);
                da[(b, 2 * h_dim + j)] = dc * i * (1.0 - gg * gg);
                da[(b, 3 * h_dim + j)] = d_o * o * (1.0 - o);
                dc_next[(b, j)] = dc * f;
            }
        }
        match prev_t {
            Some(pt) => {
                let h_prev = cache.hidden.slice(s![pt * batch..(pt + 1) * batch, ..]);
                d_wh += &h_prev.t().dot(&da);
                dh_next = da.dot(&wh.t());
            }
            None => dh_next.fill(0.0),
        }
        d_pre.slice_mut(s![t * batch..(t + 1) * batch, ..]).assign(&da);
    }
    slots.wx.view_mut(grad).scaled_add(1.0, &x.t().dot(&d_pre));
    slots.wh.view_mut(grad).scaled_add(1.0, &d_wh);
    slots.b.vector_mut(grad).scaled_add(1.0, &d_pre.sum_axis(Axis(0)));
    d_pre.dot(&slots.wx.view(p).t())
}

/// Everything the reverse pass needs from a forward pass.
pub struct ForwardCache {
    batch: usize,
    cols1: Array2<f64>,
    act1: Array2<f64>,
    cols2: Array2<f64>,
    act2: Array2<f64>,
    mask: Option<Array2<f64>>,
    pool_arg: Vec<u8>,
    encoded: Array2<f64>,
    fwd: LstmCache,
    bwd: Option<LstmCache>,
    /// Per-time recurrent outputs `(S*B x rep)`, attention only.
    outputs: Option<Array2<f64>>,
    att_u: Option<Array2<f64>>,
    att_alpha: Option<Array2<f64>>,
    rep: Array2<f64>,
    act3: Array2<f64>,
    pub probs: Array2<f64>,
}

impl Architecture {
    /// Dropout mask for a batch, inverted scaling, one draw per element.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Array2<f64>> {
        if self.dropout <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.dropout);
        let rows = self.sub_windows() * batch * self.conv2_len();
        Some(Array2::from_shape_fn((rows, self.filters), |_| {
            if rng.random::<f64>() < self.dropout {
                0.0
            } else {
                keep
            }
        }))
    }

    /// Forward pass over `batch` normalized windows laid out `[b][t][f]`.
    pub fn forward(
        &self,
        p: &[f64],
        x: &[f64],
        batch: usize,
        mask: Option<Array2<f64>>,
    ) -> Result<ForwardCache, ClassifierError> {
        let layout = self.layout();
        let (f_in, l, k, c) = (self.features, self.sub_window, self.kernel, self.filters);
        let (s_n, p1, p2, p3) = (
            self.sub_windows(),
            self.conv1_len(),
            self.conv2_len(),
            self.pooled_len(),
        );
        if x.len() != batch * self.window * f_in {
            return Err(ClassifierError::Shape {
                expected: batch * self.window * f_in,
                got: x.len(),
            });
        }
        let n = s_n * batch;

        let mut cols1 = Array2::<f64>::zeros((n * p1, k * f_in));
        for s in 0..s_n {
            for b in 0..batch {
                let sub = s * batch + b;
                for pos in 0..p1 {
                    let start = (b * self.window + s * l + pos) * f_in;
                    cols1
                        .row_mut(sub * p1 + pos)
                        .as_slice_mut()
                        .expect("contiguous")
                        .copy_from_slice(&x[start..start + k * f_in]);
                }
            }
        }
        let mut act1 = cols1.dot(&layout.conv1_w.view(p));
        add_bias(&mut act1, layout.conv1_b.vector(p));
        act1.mapv_inplace(relu);
        check_finite(&act1, "conv1")?;

        let mut cols2 = Array2::<f64>::zeros((n * p2, k * c));
        for sub in 0..n {
            for pos in 0..p2 {
                let mut row = cols2.row_mut(sub * p2 + pos);
                for kk in 0..k {
                    row.slice_mut(s![kk * c..(kk + 1) * c])
                        .assign(&act1.row(sub * p1 + pos + kk));
                }
            }
        }
        let mut act2 = cols2.dot(&layout.conv2_w.view(p));
        add_bias(&mut act2, layout.conv2_b.vector(p));
        act2.mapv_inplace(relu);
        check_finite(&act2, "conv2")?;
        let dropped = match &mask {
            Some(m) => &act2 * m,
            None => act2.clone(),
        };

        let mut encoded = Array2::<f64>::zeros((n, p3 * c));
        let mut pool_arg = vec![0u8; n * p3 * c];
        for sub in 0..n {
            for q in 0..p3 {
                let (r0, r1) = (sub * p2 + 2 * q, sub * p2 + 2 * q + 1);
                for ch in 0..c {
                    let (a, b) = (dropped[(r0, ch)], dropped[(r1, ch)]);
                    let idx = q * c + ch;
                    if b > a {
                        encoded[(sub, idx)] = b;
                        pool_arg[sub * p3 * c + idx] = 1;
                    } else {
                        encoded[(sub, idx)] = a;
                    }
                }
            }
        }

        let fwd = lstm_forward(&encoded, &layout.lstm_fwd, p, s_n, batch, false);
        check_finite(&fwd.hidden, "lstm")?;
        let bwd = layout
            .lstm_bwd
            .as_ref()
            .map(|slots| lstm_forward(&encoded, slots, p, s_n, batch, true));
        if let Some(b) = &bwd {
            check_finite(&b.hidden, "lstm_reverse")?;
        }
        let h = self.hidden;
        let rep_dim = self.representation_dim();

        let (rep, outputs, att_u, att_alpha) = if let Some((wa, ba, v)) = layout.attention {
            let mut outputs = Array2::<f64>::zeros((n, rep_dim));
            outputs.slice_mut(s![.., 0..h]).assign(&fwd.hidden);
            if let Some(b) = &bwd {
                outputs.slice_mut(s![.., h..2 * h]).assign(&b.hidden);
            }
            let mut u = outputs.dot(&wa.view(p));
            add_bias(&mut u, ba.vector(p));
            u.mapv_inplace(f64::tanh);
            let scores = u.dot(&v.vector(p));
            let mut alpha = Array2::<f64>::zeros((s_n, batch));
            let mut rep = Array2::<f64>::zeros((batch, rep_dim));
            for b in 0..batch {
                let max = (0..s_n)
                    .map(|t| scores[t * batch + b])
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..s_n).map(|t| (scores[t * batch + b] - max).exp()).sum();
                for t in 0..s_n {
                    let a = (scores[t * batch + b] - max).exp() / total;
                    alpha[(t, b)] = a;
                    rep.row_mut(b).scaled_add(a, &outputs.row(t * batch + b));
                }
            }
            check_finite(&rep, "attention")?;
            (rep, Some(outputs), Some(u), Some(alpha))
        } else {
            let mut rep = Array2::<f64>::zeros((batch, rep_dim));
            let last = (s_n - 1) * batch;
            rep.slice_mut(s![.., 0..h])
                .assign(&fwd.hidden.slice(s![last..last + batch, ..]));
            if let Some(b) = &bwd {
                rep.slice_mut(s![.., h..2 * h])
                    .assign(&b.hidden.slice(s![0..batch, ..]));
            }
            (rep, None, None, None)
        };

        let mut act3 = rep.dot(&layout.dense_w.view(p));
        add_bias(&mut act3, layout.dense_b.vector(p));
        act3.mapv_inplace(relu);
        check_finite(&act3, "dense")?;
        let mut logits = act3.dot(&layout.out_w.view(p));
        add_bias(&mut logits, layout.out_b.vector(p));
        check_finite(&logits, "output")?;
        let probs = softmax_rows(&logits);

        Ok(ForwardCache {
            batch,
            cols1,
            act1,
            cols2,
            act2,
            mask,
            pool_arg,
            encoded,
            fwd,
            bwd,
            outputs,
            att_u,
            att_alpha,
            rep,
            act3,
            probs,
        })
    }

    /// Reverse pass from the gradient of the loss with respect to the
    /// logits. Returns the flat parameter gradient.
    pub fn backward(&self, p: &[f64], cache: &ForwardCache, d_logits: &Array2<f64>) -> Vec<f64> {
        let layout = self.layout();
        let mut grad = vec![0.0; layout.total];
        let batch = cache.batch;
        let (k, c, h) = (self.kernel, self.filters, self.hidden);
        let (s_n, p1, p2, p3) = (
            self.sub_windows(),
            self.conv1_len(),
            self.conv2_len(),
            self.pooled_len(),
        );
        let n = s_n * batch;

        layout.out_w.view_mut(&mut grad).assign(&cache.act3.t().dot(d_logits));
        layout.out_b.vector_mut(&mut grad).assign(&d_logits.sum_axis(Axis(0)));
        let mut d3 = d_logits.dot(&layout.out_w.view(p).t());
        Zip::from(&mut d3).and(&cache.act3).for_each(|d, a| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        layout.dense_w.view_mut(&mut grad).assign(&cache.rep.t().dot(&d3));
        layout.dense_b.vector_mut(&mut grad).assign(&d3.sum_axis(Axis(0)));
        let d_rep = d3.dot(&layout.dense_w.view(p).t());

        let rep_dim = self.representation_dim();
        let mut d_out = Array2::<f64>::zeros((n, rep_dim));
        if let (Some((wa, ba, v)), Some(outputs), Some(u), Some(alpha)) =
            (layout.attention, &cache.outputs, &cache.att_u, &cache.att_alpha)
        {
            let mut d_scores = Array1::<f64>::zeros(n);
            for b in 0..batch {
                let d_alpha: Vec<f64> = (0..s_n)
                    .map(|t| d_rep.row(b).dot(&outputs.row(t * batch + b)))
                    .collect();
                let mean: f64 = (0..s_n).map(|t| alpha[(t, b)] * d_alpha[t]).sum();
                for t in 0..s_n {
                    let a = alpha[(t, b)];
                    d_out.row_mut(t * batch + b).scaled_add(a, &d_rep.row(b));
                    d_scores[t * batch + b] = a * (d_alpha[t] - mean);
                }
            }
            let v_view = v.vector(p);
            let mut d_pre = Array2::<f64>::zeros(u.raw_dim());
            for (r, mut row) in d_pre.rows_mut().into_iter().enumerate() {
                for j in 0..row.len() {
                    let uu = u[(r, j)];
                    row[j] = d_scores[r] * v_view[j] * (1.0 - uu * uu);
                }
            }
            v.vector_mut(&mut grad).assign(&u.t().dot(&d_scores));
            wa.view_mut(&mut grad).assign(&outputs.t().dot(&d_pre));
            ba.vector_mut(&mut grad).assign(&d_pre.sum_axis(Axis(0)));
            d_out += &d_pre.dot(&wa.view(p).t());
        } else {
            let last = (s_n - 1) * batch;
            d_out
                .slice_mut(s![last..last + batch, 0..h])
                .assign(&d_rep.slice(s![.., 0..h]));
            if self.bidirectional {
                d_out
                    .slice_mut(s![0..batch, h..2 * h])
                    .assign(&d_rep.slice(s![.., h..2 * h]));
            }
        }

        let dh_fwd = d_out.slice(s![.., 0..h]).to_owned();
        let mut d_enc = lstm_backward(
            &cache.encoded,
            &cache.fwd,
            &layout.lstm_fwd,
            p,
            &mut grad,
            &dh_fwd,
            s_n,
            batch,
            false,
        );
        if let (Some(slots), Some(bc)) = (&layout.lstm_bwd, &cache.bwd) {
            let dh_bwd = d_out.slice(s![.., h..2 * h]).to_owned();
            d_enc += &lstm_backward(&cache.encoded, bc, slots, p, &mut grad, &dh_bwd, s_n, batch, true);
        }

        let mut d2 = Array2::<f64>::zeros((n * p2, c));
        for sub in 0..n {
            for q in 0..p3 {
                for ch in 0..c {
                    let idx = q * c + ch;
                    let r = sub * p2 + 2 * q + cache.pool_arg[sub * p3 * c + idx] as usize;
                    d2[(r, ch)] = d_enc[(sub, idx)];
                }
            }
        }
        if let Some(m) = &cache.mask {
            d2 *= m;
        }
        Zip::from(&mut d2).and(&cache.act2).for_each(|d, a| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        layout.conv2_w.view_mut(&mut grad).assign(&cache.cols2.t().dot(&d2));
        layout.conv2_b.vector_mut(&mut grad).assign(&d2.sum_axis(Axis(0)));
        let d_cols2 = d2.dot(&layout.conv2_w.view(p).t());
        let mut d1 = Array2::<f64>::zeros((n * p1, c));
        for sub in 0..n {
            for pos in 0..p2 {
                let row = d_cols2.row(sub * p2 + pos);
                for kk in 0..k {
                    d1.row_mut(sub * p1 + pos + kk)
                        .scaled_add(1.0, &row.slice(s![kk * c..(kk + 1) * c]));
                }
            }
        }
        Zip::from(&mut d1).and(&cache.act1).for_each(|d, a| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        layout.conv1_w.view_mut(&mut grad).assign(&cache.cols1.t().dot(&d1));
        layout.conv1_b.vector_mut(&mut grad).assign(&d1.sum_axis(Axis(0)));
        grad
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let total = row.sum();
        row.mapv_inplace(|e| e / total);
    }
    out
}

/// ReLU that propagates NaN so the finiteness checks can see it.
fn relu(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}
