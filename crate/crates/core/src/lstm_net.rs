//! Stacked bidirectional LSTM encoder with a ReLU MLP and a linear scalar
//! head.
//!
//! For an input sequence `x_1..x_T` every layer runs a forward and a
//! backward LSTM and concatenates their hidden states per position. The top
//! layer is summarized by the forward direction's final state and the
//! backward direction's final state (the one that has read the whole
//! sequence), then
//!
//! ```text
//! g = ReLU(U h + b)      prediction = w . g
//! ```
//!
//! All computation is batched: `B` sequences of equal length are processed
//! together so the gate pre-activations are matrix products. Gate blocks are
//! stored in the order input, forget, cell, output.
//!
//! In training every prefix `x_1..x_L` (L = 1..k) of a window is encoded on
//! its own, so the backward direction never sees values after the position
//! being predicted.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::GaussianStream;

pub const GATES: usize = 4;
pub const INPUT_DIM: usize = 1;
pub const PARAMS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Stacked bidirectional LSTM layers.
    pub layers: usize,
    /// Hidden size of each direction.
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// History window length k in slots.
    pub window: usize,
    /// Dropout probability on the MLP layer during training.
    pub dropout: f64,
}

impl Default for Architecture {
    /// Two bidirectional layers of 64 units, a 64-unit MLP without dropout
    /// and a 24-slot (2 hour) window.
    fn default() -> Self {
        Self { layers: 2, hidden: 64, mlp_hidden: 64, window: 24, dropout: 0.0 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.mlp_hidden == 0 || self.window == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            INPUT_DIM
        } else {
            2 * self.hidden
        }
    }

    /// Parameters of one direction of one layer: input weights, recurrent
    /// weights and biases for all four gates.
    pub fn direction_param_count(&self, layer: usize) -> usize {
        let h = self.hidden;
        GATES * (h * self.layer_input_dim(layer) + h * h + h)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    fn layout(&self) -> Layout {
        let h = self.hidden;
        let mut offset = 0;
        let mut dirs = Vec::with_capacity(self.layers);
        for layer in 0..self.layers {
            let input = self.layer_input_dim(layer);
            let mut pair = [DirOffsets::default(); 2];
            for dir in pair.iter_mut() {
                dir.wx = offset;
                offset += GATES * h * input;
                dir.wh = offset;
                offset += GATES * h * h;
                dir.b = offset;
                offset += GATES * h;
            }
            dirs.push(pair);
        }
        let u = offset;
        offset += self.mlp_hidden * 2 * h;
        let mlp_b = offset;
        offset += self.mlp_hidden;
        let head_w = offset;
        offset += self.mlp_hidden;
        Layout { dirs, u, mlp_b, head_w, total: offset }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DirOffsets {
    wx: usize,
    wh: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    dirs: Vec<[DirOffsets; 2]>,
    u: usize,
    mlp_b: usize,
    head_w: usize,
    total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward = 0,
    Backward = 1,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Backward];

    fn name(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// Typed views into a flat parameter-shaped buffer.
struct Views<'a> {
    arch: &'a Architecture,
    layout: Layout,
    data: &'a [f64],
}

impl<'a> Views<'a> {
    fn new(arch: &'a Architecture, data: &'a [f64]) -> Self {
        Self { arch, layout: arch.layout(), data }
    }

    fn mat(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((rows, cols), &self.data[offset..offset + rows * cols]).expect("layout is consistent")
    }

    fn vec(&self, offset: usize, len: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&self.data[offset..offset + len])
    }

    fn wx(&self, layer: usize, dir: Direction) -> ArrayView2<'a, f64> {
        let o = self.layout.dirs[layer][dir as usize];
        self.mat(o.wx, GATES * self.arch.hidden, self.arch.layer_input_dim(layer))
    }

    fn wh(&self, layer: usize, dir: Direction) -> ArrayView2<'a, f64> {
        let o = self.layout.dirs[layer][dir as usize];
        self.mat(o.wh, GATES * self.arch.hidden, self.arch.hidden)
    }

    fn b(&self, layer: usize, dir: Direction) -> ArrayView1<'a, f64> {
        let o = self.layout.dirs[layer][dir as usize];
        self.vec(o.b, GATES * self.arch.hidden)
    }

    fn u(&self) -> ArrayView2<'a, f64> {
        self.mat(self.layout.u, self.arch.mlp_hidden, 2 * self.arch.hidden)
    }

    fn mlp_b(&self) -> ArrayView1<'a, f64> {
        self.vec(self.layout.mlp_b, self.arch.mlp_hidden)
    }

    fn head_w(&self) -> ArrayView1<'a, f64> {
        self.vec(self.layout.head_w, self.arch.mlp_hidden)
    }
}

fn mat_mut(data: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut data[offset..offset + rows * cols]).expect("layout is consistent")
}

/// Every trainable weight of the network in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub seed: u64,
    pub data: Vec<f64>,
}

/// Partial derivatives, laid out exactly like [`NetworkParams::data`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub arch: Architecture,
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(arch: Architecture) -> Self {
        Self { arch, data: vec![0.0; arch.param_count()] }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget-gate biases at 1.
/// LSTM biases use the hidden size as fan-in; MLP biases use the MLP input
/// width.
pub fn init_params(arch: Architecture, seed: u64) -> NetworkParams {
    let layout = arch.layout();
    let h = arch.hidden;
    let mut rng = GaussianStream::new(seed);
    let mut data = vec![0.0; layout.total];
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, data: &mut [f64]| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut data[range] {
            *v = bound * (2.0 * rng.next_uniform() - 1.0);
        }
    };
    for (layer, pair) in layout.dirs.iter().enumerate() {
        let input = arch.layer_input_dim(layer);
        for o in pair {
            fill(o.wx..o.wx + GATES * h * input, input, &mut data);
            fill(o.wh..o.wh + GATES * h * h, h, &mut data);
            fill(o.b..o.b + GATES * h, h, &mut data);
            data[o.b + h..o.b + 2 * h].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    fill(layout.u..layout.mlp_b, 2 * h, &mut data);
    fill(layout.mlp_b..layout.head_w, 2 * h, &mut data);
    fill(layout.head_w..layout.total, arch.mlp_hidden, &mut data);
    NetworkParams { arch, seed, data }
}

impl NetworkParams {
    /// All-zero parameters of the given architecture.
    pub fn zeros(arch: Architecture) -> Self {
        Self { arch, seed: 0, data: vec![0.0; arch.param_count()] }
    }

    fn views(&self) -> Views<'_> {
        Views::new(&self.arch, &self.data)
    }

    /// Human-readable name of the parameter at a flat index.
    pub fn param_name(&self, index: usize) -> String {
        let layout = self.arch.layout();
        let h = self.arch.hidden;
        for (layer, pair) in layout.dirs.iter().enumerate() {
            let input = self.arch.layer_input_dim(layer);
            for (d, o) in pair.iter().enumerate() {
                let dir = Direction::BOTH[d].name();
                if (o.wx..o.wh).contains(&index) {
                    let i = index - o.wx;
                    return format!("layer{}.{dir}.w_x[{},{}]", layer + 1, i / input, i % input);
                }
                if (o.wh..o.b).contains(&index) {
                    let i = index - o.wh;
                    return format!("layer{}.{dir}.w_h[{},{}]", layer + 1, i / h, i % h);
                }
                if (o.b..o.b + GATES * h).contains(&index) {
                    return format!("layer{}.{dir}.b[{}]", layer + 1, index - o.b);
                }
            }
        }
        if (layout.u..layout.mlp_b).contains(&index) {
            let i = index - layout.u;
            return format!("mlp.U[{},{}]", i / (2 * h), i % (2 * h));
        }
        if (layout.mlp_b..layout.head_w).contains(&index) {
            return format!("mlp.b[{}]", index - layout.mlp_b);
        }
        format!("head.w[{}]", index - layout.head_w)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh(x) = 2 sigmoid(2x) - 1`; one `exp` is markedly cheaper than the
/// library `tanh`, and the absolute error stays at rounding level.
fn tanh(x: f64) -> f64 {
    2.0 / (1.0 + (-2.0 * x).exp()) - 1.0
}

/// One LSTM step for a single input vector.
pub fn lstm_cell_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &NetworkParams,
    layer: usize,
    dir: Direction,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let arch = &params.arch;
    let hs = arch.hidden;
    if layer >= arch.layers || x.len() != arch.layer_input_dim(layer) || h_prev.len() != hs || c_prev.len() != hs {
        return Err(Error::ShapeMismatch(format!(
            "cell step layer {layer}: x {} h {} c {}",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let v = params.views();
    let z = v.wx(layer, dir).dot(&ArrayView1::from(x)) + v.wh(layer, dir).dot(&ArrayView1::from(h_prev)) + v.b(layer, dir);
    let mut h = vec![0.0; hs];
    let mut c = vec![0.0; hs];
    for j in 0..hs {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hs + j]);
        let g = tanh(z[2 * hs + j]);
        let o = sigmoid(z[3 * hs + j]);
        c[j] = f * c_prev[j] + i * g;
        h[j] = o * tanh(c[j]);
    }
    Ok((h, c))
}

/// Per-direction activations of one layer over a batch. Rows are
/// `t * batch + b`.
#[derive(Debug, Clone)]
struct DirCache {
    /// Post-activation gates [i, f, g, o].
    gates: Array2<f64>,
    cells: Array2<f64>,
    tanh_cells: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    dirs: [DirCache; 2],
}

/// Everything a backward pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub steps: usize,
    layers: Vec<LayerCache>,
    summary: Array2<f64>,
    mlp_pre: Array2<f64>,
    mlp_out: Array2<f64>,
    dropout_mask: Option<Array2<f64>>,
}

fn step_rows(t: usize, batch: usize) -> std::ops::Range<usize> {
    t * batch..(t + 1) * batch
}

fn position(step: usize, steps: usize, dir: Direction) -> usize {
    match dir {
        Direction::Forward => step,
        Direction::Backward => steps - 1 - step,
    }
}

fn run_direction(v: &Views<'_>, layer: usize, dir: Direction, input: &Array2<f64>, batch: usize, steps: usize) -> DirCache {
    let hs = v.arch.hidden;
    let gw = GATES * hs;
    let rows = batch * steps;
    // Row-major buffers so the inner loops can work on flat slices.
    let mut gates = Array2::zeros((rows, gw));
    ndarray::linalg::general_mat_mul(1.0, input, &v.wx(layer, dir).t(), 0.0, &mut gates);
    gates += &v.b(layer, dir);
    let wh_t = v.wh(layer, dir).reversed_axes();
    let mut cells = Array2::zeros((rows, hs));
    let mut tanh_cells = Array2::zeros((rows, hs));
    let mut hidden = Array2::zeros((rows, hs));
    let mut h_prev = Array2::<f64>::zeros((batch, hs));
    for step in 0..steps {
        let r = step_rows(position(step, steps, dir), batch);
        if step > 0 {
            let mut z = gates.slice_mut(s![r.clone(), ..]);
            ndarray::linalg::general_mat_mul(1.0, &h_prev, &wh_t, 1.0, &mut z);
        }
        let prev_start = (step > 0).then(|| position(step - 1, steps, dir) * batch);
        let g = gates.as_slice_mut().expect("row-major");
        let cs = cells.as_slice_mut().expect("row-major");
        let ths = tanh_cells.as_slice_mut().expect("row-major");
        let hsl = hidden.as_slice_mut().expect("row-major");
        for b in 0..batch {
            let row = r.start + b;
            let zr = &mut g[row * gw..(row + 1) * gw];
            for j in 0..hs {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[hs + j]);
                let gg = tanh(zr[2 * hs + j]);
                let o = sigmoid(zr[3 * hs + j]);
                zr[j] = i;
                zr[hs + j] = f;
                zr[2 * hs + j] = gg;
                zr[3 * hs + j] = o;
                let c_prev = prev_start.map_or(0.0, |p| cs[(p + b) * hs + j]);
                let c = f * c_prev + i * gg;
                let th = tanh(c);
                cs[row * hs + j] = c;
                ths[row * hs + j] = th;
                hsl[row * hs + j] = o * th;
            }
        }
        h_prev.assign(&hidden.slice(s![r, ..]));
    }
    DirCache { gates, cells, tanh_cells, hidden }
}

/// Encode `inputs` (batch x steps) and produce one prediction per sequence.
/// `dropout_mask` (batch x mlp_hidden) multiplies the MLP activations.
pub fn forward_batch(params: &NetworkParams, inputs: ArrayView2<'_, f64>, dropout_mask: Option<Array2<f64>>) -> Result<(Array1<f64>, ForwardCache)> {
    let arch = &params.arch;
    let (batch, steps) = inputs.dim();
    if batch == 0 || steps == 0 || params.data.len() != arch.param_count() {
        return Err(Error::ShapeMismatch(format!("forward on {batch}x{steps} inputs with {} parameters", params.data.len())));
    }
    if let Some(mask) = &dropout_mask {
        if mask.dim() != (batch, arch.mlp_hidden) {
            return Err(Error::ShapeMismatch(format!("dropout mask {:?}", mask.dim())));
        }
    }
    let hs = arch.hidden;
    let v = params.views();
    // Time-major rows: row t * batch + b holds x[b, t].
    let mut input = Array2::zeros((steps * batch, INPUT_DIM));
    for t in 0..steps {
        for b in 0..batch {
            input[[t * batch + b, 0]] = inputs[[b, t]];
        }
    }
    let mut layers = Vec::with_capacity(arch.layers);
    for layer in 0..arch.layers {
        let fwd = run_direction(&v, layer, Direction::Forward, &input, batch, steps);
        let bwd = run_direction(&v, layer, Direction::Backward, &input, batch, steps);
        let mut next = Array2::zeros((steps * batch, 2 * hs));
        next.slice_mut(s![.., ..hs]).assign(&fwd.hidden);
        next.slice_mut(s![.., hs..]).assign(&bwd.hidden);
        layers.push(LayerCache { input, dirs: [fwd, bwd] });
        input = next;
    }
    let top = layers.last().expect("at least one layer");
    let mut summary = Array2::zeros((batch, 2 * hs));
    summary.slice_mut(s![.., ..hs]).assign(&top.dirs[0].hidden.slice(s![step_rows(steps - 1, batch), ..]));
    summary.slice_mut(s![.., hs..]).assign(&top.dirs[1].hidden.slice(s![step_rows(0, batch), ..]));

    let mut mlp_pre = summary.dot(&v.u().t());
    mlp_pre += &v.mlp_b();
    let mut mlp_out = mlp_pre.mapv(|x| x.max(0.0));
    if let Some(mask) = &dropout_mask {
        mlp_out *= mask;
    }
    let predictions = mlp_out.dot(&v.head_w());
    Ok((predictions, ForwardCache { batch, steps, layers, summary, mlp_pre, mlp_out, dropout_mask }))
}

/// Back-propagate `dloss_dpred` (one entry per sequence) and add the
/// parameter gradients into `grads`.
pub fn backward_accumulate(params: &NetworkParams, cache: &ForwardCache, dloss_dpred: ArrayView1<'_, f64>, grads: &mut Gradients) -> Result<()> {
    let arch = params.arch;
    let (batch, steps) = (cache.batch, cache.steps);
    if dloss_dpred.len() != batch || grads.data.len() != params.data.len() {
        return Err(Error::ShapeMismatch(format!("backward with {} output gradients for batch {batch}", dloss_dpred.len())));
    }
    let hs = arch.hidden;
    let v = params.views();
    let layout = arch.layout();
    let g = &mut grads.data;

    {
        let dw = cache.mlp_out.t().dot(&dloss_dpred);
        g[layout.head_w..layout.total].iter_mut().zip(dw.iter()).for_each(|(a, b)| *a += b);
    }
    let mut d_pre = Array2::zeros((batch, arch.mlp_hidden));
    let head = v.head_w();
    for b in 0..batch {
        for m in 0..arch.mlp_hidden {
            let keep = cache.dropout_mask.as_ref().map_or(1.0, |mask| mask[[b, m]]);
            // ReLU subgradient at 0 is 0.
            let active = if cache.mlp_pre[[b, m]] > 0.0 { 1.0 } else { 0.0 };
            d_pre[[b, m]] = dloss_dpred[b] * head[m] * keep * active;
        }
    }
    ndarray::linalg::general_mat_mul(1.0, &d_pre.t(), &cache.summary, 1.0, &mut mat_mut(g, layout.u, arch.mlp_hidden, 2 * hs));
    let db = d_pre.sum_axis(Axis(0));
    g[layout.mlp_b..layout.head_w].iter_mut().zip(db.iter()).for_each(|(a, b)| *a += b);
    let d_summary = d_pre.dot(&v.u());

    // Gradient flowing into each direction's hidden states from above.
    let mut d_hidden = [Array2::<f64>::zeros((steps * batch, hs)), Array2::<f64>::zeros((steps * batch, hs))];
    d_hidden[0].slice_mut(s![step_rows(steps - 1, batch), ..]).assign(&d_summary.slice(s![.., ..hs]));
    d_hidden[1].slice_mut(s![step_rows(0, batch), ..]).assign(&d_summary.slice(s![.., hs..]));

    for layer in (0..arch.layers).rev() {
        let lc = &cache.layers[layer];
        let input_dim = arch.layer_input_dim(layer);
        let mut d_input = Array2::<f64>::zeros((steps * batch, input_dim));
        for dir in Direction::BOTH {
            let o = layout.dirs[layer][dir as usize];
            let dc = &lc.dirs[dir as usize];
            let (dz, h_prev_all) = bptt_direction(&v, layer, dir, dc, &d_hidden[dir as usize], batch, steps);
            ndarray::linalg::general_mat_mul(1.0, &dz.t(), &lc.input, 1.0, &mut mat_mut(g, o.wx, GATES * hs, input_dim));
            ndarray::linalg::general_mat_mul(1.0, &dz.t(), &h_prev_all, 1.0, &mut mat_mut(g, o.wh, GATES * hs, hs));
            let db = dz.sum_axis(Axis(0));
            g[o.b..o.b + GATES * hs].iter_mut().zip(db.iter()).for_each(|(a, b)| *a += b);
            ndarray::linalg::general_mat_mul(1.0, &dz, &v.wx(layer, dir), 1.0, &mut d_input);
        }
        if layer > 0 {
            d_hidden[0] = d_input.slice(s![.., ..hs]).to_owned();
            d_hidden[1] = d_input.slice(s![.., hs..]).to_owned();
        }
    }
    Ok(())
}

/// Reverse-time recursion for one direction. Returns the gate
/// pre-activation gradients and the matching previous hidden states (zero
/// at the first processed step), both row-aligned with the cache.
fn bptt_direction(
    v: &Views<'_>,
    layer: usize,
    dir: Direction,
    cache: &DirCache,
    d_hidden: &Array2<f64>,
    batch: usize,
    steps: usize,
) -> (Array2<f64>, Array2<f64>) {
    let hs = v.arch.hidden;
    let gw = GATES * hs;
    let wh = v.wh(layer, dir);
    let mut dz = Array2::<f64>::zeros((steps * batch, gw));
    let mut h_prev_all = Array2::<f64>::zeros((steps * batch, hs));
    let mut dh_next = Array2::<f64>::zeros((batch, hs));
    let mut dc_next = vec![0.0; batch * hs];
    let gates = cache.gates.as_slice().expect("row-major");
    let cells = cache.cells.as_slice().expect("row-major");
    let tanh_cells = cache.tanh_cells.as_slice().expect("row-major");
    let dh_above = d_hidden.as_slice().expect("row-major");
    for step in (0..steps).rev() {
        let r = step_rows(position(step, steps, dir), batch);
        let prev = (step > 0).then(|| step_rows(position(step - 1, steps, dir), batch));
        {
            let dzs = dz.as_slice_mut().expect("row-major");
            let dhn = dh_next.as_slice().expect("row-major");
            for b in 0..batch {
                let row = r.start + b;
                let gr = &gates[row * gw..(row + 1) * gw];
                let dzr = &mut dzs[row * gw..(row + 1) * gw];
                for j in 0..hs {
                    let (i, f, gg, o) = (gr[j], gr[hs + j], gr[2 * hs + j], gr[3 * hs + j]);
                    let th = tanh_cells[row * hs + j];
                    let c_prev = prev.as_ref().map_or(0.0, |p| cells[(p.start + b) * hs + j]);
                    let dh = dh_above[row * hs + j] + dhn[b * hs + j];
                    let dc = dc_next[b * hs + j] + dh * o * (1.0 - th * th);
                    dzr[j] = dc * gg * i * (1.0 - i);
                    dzr[hs + j] = dc * c_prev * f * (1.0 - f);
                    dzr[2 * hs + j] = dc * i * (1.0 - gg * gg);
                    dzr[3 * hs + j] = dh * th * o * (1.0 - o);
                    dc_next[b * hs + j] = dc * f;
                }
            }
        }
        if let Some(p) = prev {
            h_prev_all.slice_mut(s![r.clone(), ..]).assign(&cache.hidden.slice(s![p, ..]));
            ndarray::linalg::general_mat_mul(1.0, &dz.slice(s![r, ..]), &wh, 0.0, &mut dh_next);
        }
    }
    (dz, h_prev_all)
}

/// Predictions and caches for every prefix of one window.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    pub caches: Vec<ForwardCache>,
}

/// Prediction at every position of a window: entry `L - 1` is the forecast
/// of the value after `window[..L]`, computed from that prefix alone.
pub fn forward(window: &[f64], params: &NetworkParams) -> Result<(Vec<f64>, PrefixCache)> {
    if window.is_empty() || window.len() > params.arch.window {
        return Err(Error::ShapeMismatch(format!("window of {} slots for k = {}", window.len(), params.arch.window)));
    }
    let mut preds = Vec::with_capacity(window.len());
    let mut caches = Vec::with_capacity(window.len());
    for len in 1..=window.len() {
        let input = ArrayView2::from_shape((1, len), &window[..len]).expect("contiguous");
        let (y, cache) = forward_batch(params, input, None)?;
        preds.push(y[0]);
        caches.push(cache);
    }
    Ok((preds, PrefixCache { caches }))
}

/// Exact gradients for per-position loss gradients from [`forward`].
pub fn backward(cache: &PrefixCache, params: &NetworkParams, dloss_dpred: &[f64]) -> Result<Gradients> {
    if dloss_dpred.len() != cache.caches.len() {
        return Err(Error::ShapeMismatch(format!("{} loss gradients for {} predictions", dloss_dpred.len(), cache.caches.len())));
    }
    let mut grads = Gradients::zeros(params.arch);
    for (c, d) in cache.caches.iter().zip(dloss_dpred) {
        backward_accumulate(params, c, ArrayView1::from(std::slice::from_ref(d)), &mut grads)?;
    }
    Ok(grads)
}

/// Root mean squared error over the masked positions.
pub fn loss_rmse(predictions: &[f64], targets: &[f64], mask: &[bool]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions, {} targets, {} mask", predictions.len(), targets.len(), mask.len())));
    }
    let (sum, n) = predictions
        .iter()
        .zip(targets)
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t) * (p - t), n + 1));
    if n == 0 {
        return Err(Error::InsufficientData("RMSE over an empty mask".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// Gradient of [`loss_rmse`] with respect to each prediction.
pub fn loss_rmse_gradient(predictions: &[f64], targets: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let rmse = loss_rmse(predictions, targets, mask)?;
    let n = mask.iter().filter(|m| **m).count() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .zip(mask)
        .map(|((p, t), m)| if *m && rmse > 0.0 { (p - t) / (n * rmse) } else { 0.0 })
        .collect())
}

/// A fully observed window plus the value that follows it, in standardized
/// units. `values[L]` (or `target` for `L = k`) is the teacher-forcing
/// target of prefix `values[..L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub values: Vec<f64>,
    pub target: f64,
}

impl TrainSample {
    fn target_at(&self, len: usize) -> f64 {
        if len < self.values.len() {
            self.values[len]
        } else {
            self.target
        }
    }
}

/// Inverted-dropout mask: each unit kept with probability `1 - p` and
/// scaled by `1 / (1 - p)`.
pub fn dropout_mask(batch: usize, width: usize, p: f64, rng: &mut GaussianStream) -> Array2<f64> {
    Array2::from_shape_fn((batch, width), |_| if rng.next_uniform() >= p { 1.0 / (1.0 - p) } else { 0.0 })
}

/// Many-to-many teacher-forced RMSE over every prefix of every sample in
/// the batch, and its gradient. Prefixes of equal length are batched
/// together; the RMSE normalization is applied once at the end, which is
/// exact because the per-prediction gradient is `(y - t) / (N * rmse)`.
pub fn batch_loss_and_gradients(params: &NetworkParams, batch: &[&TrainSample], mut dropout_rng: Option<&mut GaussianStream>) -> Result<(f64, Gradients)> {
    let Some(first) = batch.first() else {
        return Err(Error::InsufficientData("empty training batch".into()));
    };
    let k = first.values.len();
    if k == 0 || batch.iter().any(|s| s.values.len() != k) || k > params.arch.window {
        return Err(Error::ShapeMismatch("training samples must share a length no longer than the window".into()));
    }
    let b = batch.len();
    let mut grads = Gradients::zeros(params.arch);
    let mut sse = 0.0;
    for len in 1..=k {
        let inputs = Array2::from_shape_fn((b, len), |(i, t)| batch[i].values[t]);
        let mask = match (&mut dropout_rng, params.arch.dropout > 0.0) {
            (Some(rng), true) => Some(dropout_mask(b, params.arch.mlp_hidden, params.arch.dropout, rng)),
            _ => None,
        };
        let (y, cache) = forward_batch(params, inputs.view(), mask)?;
        let residual = Array1::from_shape_fn(b, |i| y[i] - batch[i].target_at(len));
        sse += residual.iter().map(|r| r * r).sum::<f64>();
        backward_accumulate(params, &cache, residual.view(), &mut grads)?;
    }
    let n = (b * k) as f64;
    let rmse = (sse / n).sqrt();
    grads.scale(if rmse > 0.0 { 1.0 / (n * rmse) } else { 0.0 });
    if !rmse.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("training loss or gradient".into()));
    }
    Ok((rmse, grads))
}

/// One-step-ahead predictions from full windows (batch x k).
pub fn predict_next(params: &NetworkParams, windows: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    Ok(forward_batch(params, windows, None)?.0)
}

/// Autoregressive rollout for a batch of windows: predict, drop the oldest
/// slot, append the prediction, and repeat. Returns batch x steps
/// predictions in the units of the inputs.
pub fn rollout_batch(params: &NetworkParams, windows: ArrayView2<'_, f64>, steps: usize) -> Result<Array2<f64>> {
    let (batch, k) = windows.dim();
    let mut current = windows.to_owned();
    let mut out = Array2::zeros((batch, steps));
    for step in 0..steps {
        let y = predict_next(params, current.view())?;
        out.column_mut(step).assign(&y);
        for b in 0..batch {
            let mut row = current.row_mut(b);
            for t in 1..k {
                row[t - 1] = row[t];
            }
            row[k - 1] = y[b];
        }
    }
    Ok(out)
}

pub fn rollout(params: &NetworkParams, window: &[f64], steps: usize) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, window.len()), window).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(rollout_batch(params, view, steps)?.row(0).to_vec())
}

/// Maximum relative gradient error found by a finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error, so coordinates whose exact
/// gradient is ~0 are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compare analytic gradients of the many-to-many RMSE on a random window
/// with central finite differences. Checks every coordinate when
/// `coordinates` is `None`, otherwise that many seeded random ones.
/// `corrupt` perturbs one analytic coordinate (a self-test of the checker).
pub fn gradient_check(arch: Architecture, seed: u64, window_len: usize, eps: f64, coordinates: Option<usize>, corrupt: bool) -> Result<GradCheckReport> {
    let mut params = init_params(Architecture { window: window_len.max(arch.window), dropout: 0.0, ..arch }, seed);
    let mut rng = GaussianStream::with_stream(seed, 7);
    // Random biases keep MLP pre-activations away from the ReLU kink.
    let sample = TrainSample {
        values: (0..window_len).map(|_| rng.next_gaussian()).collect(),
        target: rng.next_gaussian(),
    };
    let batch = [&sample];
    let (_, mut grads) = batch_loss_and_gradients(&params, &batch, None)?;
    if corrupt {
        let idx = grads.data.len() - 1;
        grads.data[idx] += 1e-2 * grads.data[idx].abs().max(1.0);
    }
    let n = params.data.len();
    let indices: Vec<usize> = match coordinates {
        None => (0..n).collect(),
        Some(count) => {
            let mut idx: Vec<usize> = (0..count).map(|_| (rng.next_u64() % n as u64) as usize).collect();
            if corrupt {
                idx.push(n - 1);
            }
            idx
        }
    };
    let mut report = GradCheckReport {
        seed,
        checked: indices.len(),
        max_relative_error: 0.0,
        worst_index: 0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    for idx in indices {
        let orig = params.data[idx];
        params.data[idx] = orig + eps;
        let plus = batch_loss_and_gradients(&params, &batch, None)?.0;
        params.data[idx] = orig - eps;
        let minus = batch_loss_and_gradients(&params, &batch, None)?.0;
        params.data[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = relative_error(grads.data[idx], numeric);
        if rel > report.max_relative_error || report.worst_param.is_empty() {
            report.max_relative_error = rel;
            report.worst_index = idx;
            report.worst_param = params.param_name(idx);
            report.analytic = grads.data[idx];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header preceding the little-endian f64 payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub seed: u64,
    pub count: usize,
    pub tensors: Vec<TensorInfo>,
}

fn tensor_table(arch: &Architecture) -> Vec<TensorInfo> {
    let h = arch.hidden;
    let mut t = Vec::new();
    for layer in 0..arch.layers {
        for dir in Direction::BOTH {
            let name = |p: &str| format!("layer{}.{}.{p}", layer + 1, dir.name());
            t.push(TensorInfo { name: name("w_x"), shape: vec![GATES * h, arch.layer_input_dim(layer)] });
            t.push(TensorInfo { name: name("w_h"), shape: vec![GATES * h, h] });
            t.push(TensorInfo { name: name("b"), shape: vec![GATES * h] });
        }
    }
    t.push(TensorInfo { name: "mlp.U".into(), shape: vec![arch.mlp_hidden, 2 * h] });
    t.push(TensorInfo { name: "mlp.b".into(), shape: vec![arch.mlp_hidden] });
    t.push(TensorInfo { name: "head.w".into(), shape: vec![arch.mlp_hidden] });
    t
}

/// `u64` LE header length, JSON header, then every parameter as f64 LE in
/// layout order.
pub fn save_params(params: &NetworkParams) -> Result<Vec<u8>> {
    let header = ParamsHeader {
        schema_version: PARAMS_SCHEMA_VERSION,
        architecture: params.arch,
        seed: params.seed,
        count: params.data.len(),
        tensors: tensor_table(&params.arch),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * params.data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn load_params(bytes: &[u8]) -> Result<NetworkParams> {
    let bad = |m: &str| Error::InvalidArgument(format!("parameter blob: {m}"));
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated length"))?.try_into().expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: ParamsHeader = serde_json::from_slice(json)?;
    if header.schema_version != PARAMS_SCHEMA_VERSION {
        return Err(bad(&format!("unsupported schema version {}", header.schema_version)));
    }
    header.architecture.validate()?;
    if header.count != header.architecture.param_count() || header.tensors != tensor_table(&header.architecture) {
        return Err(bad("header does not match architecture"));
    }
    let payload = &bytes[8 + header_len..];
    if payload.len() != 8 * header.count {
        return Err(bad(&format!("expected {} payload bytes, found {}", 8 * header.count, payload.len())));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(NetworkParams { arch: header.architecture, seed: header.seed, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture { layers: 2, hidden: 4, mlp_hidden: 3, window: 8, dropout: 0.0 }
    }

    #[test]
    fn parameter_counts() {
        let a = Architecture::default();
        assert_eq!(a.direction_param_count(0), 16_896);
        assert_eq!(a.direction_param_count(1), 49_408);
        assert_eq!(a.param_count(), 2 * 16_896 + 2 * 49_408 + 64 * 128 + 64 + 64);
        assert_eq!(init_params(a, 0).data.len(), a.param_count());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(small(), 3);
        assert_eq!(a, init_params(small(), 3));
        assert_ne!(a.data, init_params(small(), 4).data);
        let v = a.views();
        assert!(v.b(0, Direction::Forward).slice(s![4..8]).iter().all(|b| *b == 1.0));
        assert!(v.wx(0, Direction::Forward).iter().all(|w| w.abs() <= 1.0));
        assert!(v.wh(1, Direction::Backward).iter().all(|w| w.abs() <= 0.5));
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let p = NetworkParams::zeros(small());
        let (h, c) = lstm_cell_step(&[3.0], &[0.5; 4], &[0.0; 4], &p, 0, Direction::Forward).unwrap();
        assert!(h.iter().chain(&c).all(|v| *v == 0.0));
        assert!(lstm_cell_step(&[3.0, 1.0], &[0.0; 4], &[0.0; 4], &p, 0, Direction::Forward).is_err());
    }

    #[test]
    fn saturated_gates_preserve_memory() {
        let arch = small();
        let mut p = NetworkParams::zeros(arch);
        let o = arch.layout().dirs[0][0];
        let h = arch.hidden;
        for j in 0..h {
            p.data[o.b + j] = -1e3; // input gate closed
            p.data[o.b + h + j] = 1e3; // forget gate open
        }
        let c_prev = [0.3, -0.7, 1.5, 0.0];
        let (hs, c) = lstm_cell_step(&[2.0], &[0.1; 4], &c_prev, &p, 0, Direction::Forward).unwrap();
        assert_eq!(c, c_prev.to_vec());
        assert!(hs.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn batched_forward_matches_cell_steps() {
        let arch = Architecture { layers: 1, ..small() };
        let p = init_params(arch, 5);
        let xs = [0.4, -1.2, 0.9];
        let (mut hf, mut cf) = (vec![0.0; 4], vec![0.0; 4]);
        for x in xs {
            (hf, cf) = lstm_cell_step(&[x], &hf, &cf, &p, 0, Direction::Forward).unwrap();
        }
        let (mut hb, mut cb) = (vec![0.0; 4], vec![0.0; 4]);
        for x in xs.iter().rev() {
            (hb, cb) = lstm_cell_step(&[*x], &hb, &cb, &p, 0, Direction::Backward).unwrap();
        }
        let summary: Vec<f64> = hf.iter().chain(&hb).copied().collect();
        let v = p.views();
        let pre = v.u().dot(&ArrayView1::from(&summary[..])) + v.mlp_b();
        let expected: f64 = pre.iter().zip(v.head_w()).map(|(z, w)| z.max(0.0) * w).sum();
        let (y, _) = forward_batch(&p, ArrayView2::from_shape((1, 3), &xs).unwrap(), None).unwrap();
        assert!((y[0] - expected).abs() < 1e-14);
        assert!(summary.iter().all(|h| h.abs() < 1.0));
    }

    #[test]
    fn zero_params_predict_zero() {
        let p = NetworkParams::zeros(small());
        let (preds, _) = forward(&[1.0, 2.0, -3.0], &p).unwrap();
        assert!(preds.iter().all(|y| *y == 0.0));
        assert!(rollout(&p, &[1.0; 8], 18).unwrap().iter().all(|y| *y == 0.0));
    }

    #[test]
    fn forward_rejects_long_window() {
        let p = init_params(small(), 0);
        assert!(forward(&[0.0; 9], &p).is_err());
    }

    #[test]
    fn prefix_prediction_ignores_later_values() {
        let p = init_params(small(), 1);
        let a = [0.1, 0.5, -0.3, 1.2, 0.7, -0.9];
        let mut b = a;
        b[3] = 8.0;
        b[5] = -4.0;
        let (pa, _) = forward(&a, &p).unwrap();
        let (pb, _) = forward(&b, &p).unwrap();
        assert_eq!(pa[..3], pb[..3]);
        assert_ne!(pa[3], pb[3]);
    }

    #[test]
    fn outputs_finite_on_bounded_inputs() {
        let p = init_params(Architecture::default(), 2);
        let window: Vec<f64> = (0..24).map(|i| -10.0 + 20.0 * i as f64 / 23.0).collect();
        assert!(rollout(&p, &window, 18).unwrap().iter().all(|y| y.is_finite()));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(loss_rmse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert!((loss_rmse(&[0.0, 0.0], &[3.0, 4.0], &[true, true]).unwrap() - 3.5355339059327378).abs() < 1e-12);
        assert_eq!(loss_rmse(&[0.0, 1e9], &[1.0, 0.0], &[true, false]).unwrap(), 1.0);
        assert!(loss_rmse(&[0.0], &[1.0], &[false]).is_err());
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let p = init_params(small(), 4);
        let (preds, cache) = forward(&[0.3, 0.2, 0.1], &p).unwrap();
        let g = backward(&cache, &p, &vec![0.0; preds.len()]).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_relu_unit_gets_no_gradient() {
        let arch = small();
        let mut p = init_params(arch, 6);
        let layout = arch.layout();
        let m = 1;
        p.data[layout.mlp_b + m] = -100.0;
        let (preds, cache) = forward(&[0.5, -0.5, 0.25], &p).unwrap();
        let dl = loss_rmse_gradient(&preds, &[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        let g = backward(&cache, &p, &dl).unwrap();
        let row = layout.u + m * 2 * arch.hidden;
        assert!(g.data[row..row + 2 * arch.hidden].iter().all(|v| *v == 0.0));
        assert_eq!(g.data[layout.mlp_b + m], 0.0);
        assert_eq!(g.data[layout.head_w + m], 0.0);
    }

    #[test]
    fn prefix_backward_matches_batched_training_gradient() {
        let p = init_params(small(), 8);
        let sample = TrainSample { values: vec![0.2, -0.4, 0.9, 0.1], target: -0.3 };
        let targets = [-0.4, 0.9, 0.1, -0.3];
        let (preds, cache) = forward(&sample.values, &p).unwrap();
        let dl = loss_rmse_gradient(&preds, &targets, &[true; 4]).unwrap();
        let g1 = backward(&cache, &p, &dl).unwrap();
        let (rmse, g2) = batch_loss_and_gradients(&p, &[&sample], None).unwrap();
        assert!((rmse - loss_rmse(&preds, &targets, &[true; 4]).unwrap()).abs() < 1e-14);
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn gradient_check_small_network() {
        for seed in 0..3 {
            let r = gradient_check(small(), seed, 8, 1e-5, None, false).unwrap();
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn gradient_check_detects_corruption() {
        let r = gradient_check(small(), 0, 8, 1e-5, None, true).unwrap();
        assert!(r.max_relative_error > 1e-4);
        assert_eq!(r.worst_param, "head.w[2]");
    }

    #[test]
    fn small_descent_step_does_not_increase_loss() {
        for seed in 0..10 {
            let mut p = init_params(small(), seed);
            let mut rng = GaussianStream::new(100 + seed);
            let samples: Vec<TrainSample> = (0..4)
                .map(|_| TrainSample { values: (0..8).map(|_| rng.next_gaussian()).collect(), target: rng.next_gaussian() })
                .collect();
            let batch: Vec<&TrainSample> = samples.iter().collect();
            let (before, g) = batch_loss_and_gradients(&p, &batch, None).unwrap();
            p.data.iter_mut().zip(&g.data).for_each(|(w, g)| *w -= 1e-5 * g);
            let (after, _) = batch_loss_and_gradients(&p, &batch, None).unwrap();
            assert!(after <= before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn rollout_shifts_predictions_into_window() {
        let p = init_params(small(), 9);
        let w = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let r = rollout(&p, &w, 3).unwrap();
        let mut w2 = w[1..].to_vec();
        w2.push(r[0]);
        let y2 = predict_next(&p, ArrayView2::from_shape((1, 8), &w2).unwrap()).unwrap();
        assert_eq!(r[1], y2[0]);
        assert_eq!(r, rollout(&p, &w, 3).unwrap());
        assert_eq!(rollout(&p, &w, 18).unwrap().len(), 18);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = GaussianStream::new(0);
        let m = dropout_mask(50, 20, 0.5, &mut rng);
        assert!(m.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = m.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn params_blob_round_trip() {
        let p = init_params(small(), 11);
        let bytes = save_params(&p).unwrap();
        assert_eq!(bytes, save_params(&p).unwrap());
        assert_eq!(load_params(&bytes).unwrap(), p);
        assert!(load_params(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn param_names() {
        let p = init_params(small(), 0);
        assert_eq!(p.param_name(0), "layer1.fwd.w_x[0,0]");
        assert_eq!(p.param_name(p.data.len() - 1), "head.w[2]");
    }
}
