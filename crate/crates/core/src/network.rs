//! Network architectures, parameter layout, masks, and masked forward graphs.
//!
//! A `Network` is an immutable architecture description plus a layout table
//! mapping every layer's weights and biases into one flat parameter vector.
//! Forward evaluation is expressed as a `Graph` over three leaves: the flat
//! parameters theta, a same-shaped binary mask, and the input batch. Masking
//! is a Hadamard product inside the graph, so masked entries get exactly zero
//! gradient from any loss built on the logits.

use crate::autodiff::{ConvGeom, Graph, NodeId, Padding, PoolGeom};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Round-half-up used by every exact-count rule (mask densities).
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, bias: bool },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: Padding, bias: bool },
    MaxPool { window: usize, stride: usize },
    Relu,
    Flatten,
    Dropout { rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Flat(usize),
    Image { ch: usize, h: usize, w: usize },
}

impl InputShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image { ch, h, w } => ch * h * w,
        }
    }
}

/// Pruning scheme: exact kept counts per layer or over all weights jointly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Layerwise(f64),
    Global(f64),
}

impl Scheme {
    pub fn density(&self) -> f64 {
        match *self {
            Scheme::Layerwise(p) | Scheme::Global(p) => p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.density();
        if p > 0.0 && p <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("density must be in (0,1], got {p}")))
        }
    }
}

/// Contiguous slices of one parameterized layer inside the flat vector.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub label: String,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
    /// Weight matrix shape: [rows, cols] with rows the fan of one output
    /// position (dense: inputs; conv: in_ch * k * k) and cols the outputs.
    pub rows: usize,
    pub cols: usize,
    /// Fans for initialization (conv fan_out counts the receptive field).
    pub fan_in: usize,
    pub fan_out: usize,
    /// Output spatial positions per sample (1 for dense layers).
    pub positions: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    name: String,
    input_shape: InputShape,
    layers: Vec<LayerSpec>,
    layout: Vec<LayerParams>,
    param_count: usize,
    class_count: usize,
}

enum ShapeState {
    Flat(usize),
    Image { ch: usize, h: usize, w: usize },
}

impl Network {
    pub fn new(name: &str, input_shape: InputShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut state = match input_shape {
            InputShape::Flat(d) => ShapeState::Flat(d),
            InputShape::Image { ch, h, w } => ShapeState::Image { ch, h, w },
        };
        let mut layout = Vec::new();
        let mut offset = 0usize;
        let mut dense_idx = 0usize;
        let mut conv_idx = 0usize;
        for spec in &layers {
            match *spec {
                LayerSpec::Dense { inputs, outputs, bias } => {
                    match state {
                        ShapeState::Flat(d) if d == inputs => {}
                        ShapeState::Flat(d) => {
                            return Err(Error::Shape(format!(
                                "dense layer expects {inputs} inputs, got {d}"
                            )))
                        }
                        ShapeState::Image { .. } => {
                            return Err(Error::Shape(
                                "dense layer applied to image input; add flatten".into(),
                            ))
                        }
                    }
                    dense_idx += 1;
                    let weight_len = inputs * outputs;
                    let bias_len = if bias { outputs } else { 0 };
                    layout.push(LayerParams {
                        label: format!("dense{dense_idx}"),
                        weight_offset: offset,
                        weight_len,
                        bias_offset: offset + weight_len,
                        bias_len,
                        rows: inputs,
                        cols: outputs,
                        fan_in: inputs,
                        fan_out: outputs,
                        positions: 1,
                    });
                    offset += weight_len + bias_len;
                    state = ShapeState::Flat(outputs);
                }
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, bias } => {
                    let (ch, h, w) = match state {
                        ShapeState::Image { ch, h, w } => (ch, h, w),
                        ShapeState::Flat(_) => {
                            return Err(Error::Shape("conv layer applied to flat input".into()))
                        }
                    };
                    if ch != in_ch {
                        return Err(Error::Shape(format!(
                            "conv layer expects {in_ch} channels, got {ch}"
                        )));
                    }
                    let geom = ConvGeom::new(1, ch, h, w, kernel, kernel, stride, padding)?;
                    conv_idx += 1;
                    let weight_len = geom.patch_len() * out_ch;
                    let bias_len = if bias { out_ch } else { 0 };
                    layout.push(LayerParams {
                        label: format!("conv{conv_idx}"),
                        weight_offset: offset,
                        weight_len,
                        bias_offset: offset + weight_len,
                        bias_len,
                        rows: geom.patch_len(),
                        cols: out_ch,
                        fan_in: in_ch * kernel * kernel,
                        fan_out: out_ch * kernel * kernel,
                        positions: geom.out_positions(),
                    });
                    offset += weight_len + bias_len;
                    state = ShapeState::Image { ch: out_ch, h: geom.oh, w: geom.ow };
                }
                LayerSpec::MaxPool { window, stride } => {
                    let (ch, h, w) = match state {
                        ShapeState::Image { ch, h, w } => (ch, h, w),
                        ShapeState::Flat(_) => {
                            return Err(Error::Shape("maxpool applied to flat input".into()))
                        }
                    };
                    let geom = PoolGeom::new(1, ch, h, w, window, stride)?;
                    state = ShapeState::Image { ch, h: geom.oh, w: geom.ow };
                }
                LayerSpec::Relu => {}
                LayerSpec::Flatten => {
                    state = match state {
                        ShapeState::Image { ch, h, w } => ShapeState::Flat(ch * h * w),
                        ShapeState::Flat(d) => ShapeState::Flat(d),
                    };
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
                    }
                }
            }
        }
        let class_count = match state {
            ShapeState::Flat(c) => c,
            ShapeState::Image { .. } => {
                return Err(Error::Shape("network must end with flat logits".into()))
            }
        };
        Ok(Network {
            name: name.to_string(),
            input_shape,
            layers,
            layout,
            param_count: offset,
            class_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> InputShape {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layout(&self) -> &[LayerParams] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn weight_count(&self) -> usize {
        self.layout.iter().map(|l| l.weight_len).sum()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_glorot(&self, rng: &mut Rng) -> Tensor {
        let mut theta = vec![0.0; self.param_count];
        for layer in &self.layout {
            let a = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for v in &mut theta[layer.weight_offset..layer.weight_offset + layer.weight_len] {
                *v = rng.uniform(-a, a);
            }
        }
        Tensor::from_vec(theta)
    }

    /// Zero-mean normal weights with variance 2/(fan_in * p), zero biases.
    pub fn init_variance_scaled(&self, rng: &mut Rng, p: f64) -> Result<Tensor> {
        if p <= 0.0 || p > 1.0 {
            return Err(Error::Config(format!("density must be in (0,1], got {p}")));
        }
        let mut theta = vec![0.0; self.param_count];
        for layer in &self.layout {
            let std = (2.0 / (layer.fan_in as f64 * p)).sqrt();
            for v in &mut theta[layer.weight_offset..layer.weight_offset + layer.weight_len] {
                *v = rng.normal(std);
            }
        }
        Ok(Tensor::from_vec(theta))
    }

    /// Multiply-adds per parameterized layer and in total: each kept weight
    /// costs one multiply-add per output position. Activations, pooling and
    /// biases are not counted.
    pub fn count_multiply_adds(&self, mask: Option<&Mask>) -> (Vec<u64>, u64) {
        let per_layer: Vec<u64> = self
            .layout
            .iter()
            .map(|layer| {
                let kept = match mask {
                    None => layer.weight_len as u64,
                    Some(m) => m.values().data()
                        [layer.weight_offset..layer.weight_offset + layer.weight_len]
                        .iter()
                        .filter(|&&v| v != 0.0)
                        .count() as u64,
                };
                kept * layer.positions as u64
            })
            .collect();
        let total = per_layer.iter().sum();
        (per_layer, total)
    }

    /// Build the forward graph for a fixed batch size. Input is fed flat as
    /// [batch, d]; image inputs are reshaped inside the graph.
    pub fn build_graph(&self, batch: usize, mode: Mode) -> NetGraph {
        assert!(batch > 0, "batch must be non-empty");
        let mut g = Graph::new();
        let theta = g.input(vec![self.param_count]);
        let mask = g.input(vec![self.param_count]);
        let x = g.input(vec![batch, self.input_shape.flat_len()]);

        let mut cur = match self.input_shape {
            InputShape::Flat(_) => x,
            InputShape::Image { ch, h, w } => g.reshape(x, vec![batch, ch, h, w]),
        };
        let mut taps = Vec::new();
        let mut dropout_slots = Vec::new();
        let mut param_idx = 0usize;

        for spec in &self.layers {
            match *spec {
                LayerSpec::Dense { bias, .. } => {
                    let layer = &self.layout[param_idx];
                    let wm = self.masked_weight(&mut g, theta, mask, layer);
                    let patches = cur;
                    let mut preact = g.matmul(patches, wm);
                    if bias {
                        let b = self.masked_bias(&mut g, theta, mask, layer);
                        preact = g.add_row_broadcast(preact, b);
                    }
                    taps.push(LayerTap { layer: param_idx, patches, preact, positions: 1 });
                    cur = preact;
                    param_idx += 1;
                }
                LayerSpec::Conv2d { out_ch, kernel, stride, padding, bias, .. } => {
                    let s = g.shape(cur).to_vec();
                    let geom =
                        ConvGeom::new(s[0], s[1], s[2], s[3], kernel, kernel, stride, padding)
                            .expect("validated at construction");
                    let layer = &self.layout[param_idx];
                    let patches = g.im2col(cur, geom);
                    let wm = self.masked_weight(&mut g, theta, mask, layer);
                    let mut preact = g.matmul(patches, wm);
                    if bias {
                        let b = self.masked_bias(&mut g, theta, mask, layer);
                        preact = g.add_row_broadcast(preact, b);
                    }
                    taps.push(LayerTap {
                        layer: param_idx,
                        patches,
                        preact,
                        positions: geom.out_positions(),
                    });
                    cur = g.conv_cols_to_nchw(preact, geom.oh, geom.ow, out_ch);
                    param_idx += 1;
                }
                LayerSpec::MaxPool { window, stride } => {
                    let s = g.shape(cur).to_vec();
                    let geom = PoolGeom::new(s[0], s[1], s[2], s[3], window, stride)
                        .expect("validated at construction");
                    let cols = g.im2col_pool(cur, geom);
                    let winner = g.row_max_mask(cols);
                    let picked = g.mul(winner, cols);
                    let pooled = g.row_sum(picked);
                    cur = g.reshape(pooled, vec![geom.n, geom.ch, geom.oh, geom.ow]);
                }
                LayerSpec::Relu => {
                    cur = g.relu(cur);
                }
                LayerSpec::Flatten => {
                    let s = g.shape(cur).to_vec();
                    let d: usize = s[1..].iter().product();
                    cur = g.reshape(cur, vec![s[0], d]);
                }
                LayerSpec::Dropout { rate } => {
                    if mode == Mode::Train && rate > 0.0 {
                        let s = g.shape(cur).to_vec();
                        let slot = g.input(s);
                        dropout_slots.push(slot);
                        cur = g.mul(cur, slot);
                    }
                }
            }
        }
        debug_assert_eq!(g.shape(cur), &[batch, self.class_count]);
        NetGraph { graph: g, theta, mask, x, logits: cur, taps, dropout_slots, batch }
    }

    fn masked_weight(
        &self,
        g: &mut Graph,
        theta: NodeId,
        mask: NodeId,
        layer: &LayerParams,
    ) -> NodeId {
        let w = g.slice_flat(theta, layer.weight_offset, layer.weight_len);
        let m = g.slice_flat(mask, layer.weight_offset, layer.weight_len);
        let wm = g.mul(w, m);
        g.reshape(wm, vec![layer.rows, layer.cols])
    }

    fn masked_bias(
        &self,
        g: &mut Graph,
        theta: NodeId,
        mask: NodeId,
        layer: &LayerParams,
    ) -> NodeId {
        let b = g.slice_flat(theta, layer.bias_offset, layer.bias_len);
        let m = g.slice_flat(mask, layer.bias_offset, layer.bias_len);
        g.mul(b, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}

/// Per-layer graph taps used by the kernel machinery: the linearized input
/// (im2col patches; the activations themselves for dense layers) and the
/// pre-activation output, both in [batch*positions, fan/out] layout.
#[derive(Debug, Clone, Copy)]
pub struct LayerTap {
    pub layer: usize,
    pub patches: NodeId,
    pub preact: NodeId,
    pub positions: usize,
}

/// A forward graph specialized to one batch size, with its input leaves.
#[derive(Debug, Clone)]
pub struct NetGraph {
    pub graph: Graph,
    pub theta: NodeId,
    pub mask: NodeId,
    pub x: NodeId,
    pub logits: NodeId,
    pub taps: Vec<LayerTap>,
    pub dropout_slots: Vec<NodeId>,
    pub batch: usize,
}

/// Binary mask over the flat parameter vector. Entries are stored as 0.0/1.0
/// so the mask can be fed straight into forward graphs. Bias entries are
/// always 1: only weights are ever pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Tensor,
    target_density: f64,
}

impl Mask {
    pub fn ones(net: &Network) -> Mask {
        Mask { values: Tensor::new(vec![net.param_count()], vec![1.0; net.param_count()]), target_density: 1.0 }
    }

    /// Build from per-weight keep decisions; bias entries are forced to 1.
    pub fn from_weight_bits(net: &Network, keep: &[bool], target_density: f64) -> Mask {
        assert_eq!(keep.len(), net.param_count());
        let mut vals = vec![1.0; net.param_count()];
        for layer in net.layout() {
            for i in layer.weight_offset..layer.weight_offset + layer.weight_len {
                vals[i] = if keep[i] { 1.0 } else { 0.0 };
            }
        }
        Mask { values: Tensor::from_vec(vals), target_density }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn target_density(&self) -> f64 {
        self.target_density
    }

    pub fn kept_weights(&self, net: &Network) -> usize {
        net.layout()
            .iter()
            .map(|l| {
                self.values.data()[l.weight_offset..l.weight_offset + l.weight_len]
                    .iter()
                    .filter(|&&v| v != 0.0)
                    .count()
            })
            .sum()
    }

    pub fn per_layer_kept(&self, net: &Network) -> Vec<(usize, usize)> {
        net.layout()
            .iter()
            .map(|l| {
                let kept = self.values.data()[l.weight_offset..l.weight_offset + l.weight_len]
                    .iter()
                    .filter(|&&v| v != 0.0)
                    .count();
                (kept, l.weight_len)
            })
            .collect()
    }

    pub fn density(&self, net: &Network) -> f64 {
        self.kept_weights(net) as f64 / net.weight_count() as f64
    }

    /// Hadamard product m (.) theta.
    pub fn apply(&self, params: &Tensor) -> Tensor {
        assert_eq!(params.len(), self.values.len());
        let out: Vec<f64> =
            params.data().iter().zip(self.values.data()).map(|(&p, &m)| p * m).collect();
        Tensor::from_vec(out)
    }

    /// Check the exact-count invariants for the given scheme.
    pub fn check_counts(&self, net: &Network, scheme: Scheme) -> Result<()> {
        for layer in net.layout() {
            for i in layer.bias_offset..layer.bias_offset + layer.bias_len {
                if self.values.data()[i] != 1.0 {
                    return Err(Error::Config(format!("bias entry {i} masked")));
                }
            }
        }
        match scheme {
            Scheme::Layerwise(p) => {
                for (layer, (kept, total)) in net.layout().iter().zip(self.per_layer_kept(net)) {
                    let want = round_half_up(p * total as f64);
                    if kept != want {
                        return Err(Error::Config(format!(
                            "layer {} kept {kept} weights, expected {want}",
                            layer.label
                        )));
                    }
                }
            }
            Scheme::Global(p) => {
                let want = round_half_up(p * net.weight_count() as f64);
                let kept = self.kept_weights(net);
                if kept != want {
                    return Err(Error::Config(format!(
                        "global mask kept {kept} weights, expected {want}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Masked forward pass. `train_rng` enables dropout with inverted scaling;
/// pass None for deterministic evaluation-mode logits.
pub fn forward_logits(
    net: &Network,
    params: &Tensor,
    mask: Option<&Mask>,
    x: &Tensor,
    mut train_rng: Option<&mut Rng>,
) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(Error::Shape("batch must be non-empty".into()));
    }
    let mode = if train_rng.is_some() { Mode::Train } else { Mode::Eval };
    let bundle = net.build_graph(x.rows(), mode);
    let ones;
    let mask_t = match mask {
        Some(m) => m.values(),
        None => {
            ones = Tensor::new(vec![net.param_count()], vec![1.0; net.param_count()]);
            &ones
        }
    };
    let dropout_tensors: Vec<Tensor> = match train_rng.as_deref_mut() {
        Some(rng) => dropout_draws(net, &bundle, rng),
        None => Vec::new(),
    };
    let mut feeds = crate::autodiff::Feeds::new(&bundle.graph);
    feeds.set(&bundle.graph, bundle.theta, params);
    feeds.set(&bundle.graph, bundle.mask, mask_t);
    feeds.set(&bundle.graph, bundle.x, x);
    for (&slot, t) in bundle.dropout_slots.iter().zip(&dropout_tensors) {
        feeds.set(&bundle.graph, slot, t);
    }
    Ok(bundle.graph.eval(&feeds, &[bundle.logits])?.remove(0))
}

/// One inverted-dropout tensor per dropout slot of a train-mode bundle.
pub fn dropout_draws(net: &Network, bundle: &NetGraph, rng: &mut Rng) -> Vec<Tensor> {
    bundle
        .dropout_slots
        .iter()
        .map(|&slot| {
            let shape = bundle.graph.shape(slot).to_vec();
            let rate = dropout_rate_for(net, bundle, slot);
            draw_dropout(rng, shape, rate)
        })
        .collect()
}

fn dropout_rate_for(net: &Network, bundle: &NetGraph, slot: NodeId) -> f64 {
    let pos = bundle.dropout_slots.iter().position(|&s| s == slot).unwrap();
    net.layers()
        .iter()
        .filter_map(|l| match *l {
            LayerSpec::Dropout { rate } if rate > 0.0 => Some(rate),
            _ => None,
        })
        .nth(pos)
        .expect("dropout slot count matches dropout layers")
}

/// Inverted dropout mask: 0 with probability `rate`, else 1/(1-rate).
pub fn draw_dropout(rng: &mut Rng, shape: Vec<usize>, rate: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let keep_scale = 1.0 / (1.0 - rate);
    let data: Vec<f64> =
        (0..n).map(|_| if rng.uniform(0.0, 1.0) < rate { 0.0 } else { keep_scale }).collect();
    Tensor::new(shape, data)
}

/// Architecture presets addressable by name.
pub fn preset(name: &str) -> Result<Network> {
    match name {
        "lenet-300-100" => lenet_300_100(),
        "lenet-300-100-toy" => lenet_300_100_toy(),
        "lenet-5-caffe" => lenet_5_caffe(),
        "lenet-5-caffe-toy" => lenet_5_caffe_toy(),
        "conv-4" => conv_4(),
        other => Err(Error::Config(format!("unknown architecture `{other}`"))),
    }
}

/// 784-300-100-10 MLP with ReLU hidden activations.
pub fn lenet_300_100() -> Result<Network> {
    Network::new(
        "lenet-300-100",
        InputShape::Flat(784),
        vec![
            LayerSpec::Dense { inputs: 784, outputs: 300, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 300, outputs: 100, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 100, outputs: 10, bias: true },
        ],
    )
}

/// The toy variant of the MLP: two linear output units for regression.
pub fn lenet_300_100_toy() -> Result<Network> {
    Network::new(
        "lenet-300-100-toy",
        InputShape::Flat(784),
        vec![
            LayerSpec::Dense { inputs: 784, outputs: 300, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 300, outputs: 100, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 100, outputs: 2, bias: true },
        ],
    )
}

/// The standard Caffe variant: conv 20 and 50 filters of 5x5 (valid, stride
/// 1), 2x2 max pooling after each, then fully connected 500 and 10.
pub fn lenet_5_caffe() -> Result<Network> {
    Network::new(
        "lenet-5-caffe",
        InputShape::Image { ch: 1, h: 28, w: 28 },
        vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 20, kernel: 5, stride: 1, padding: Padding::Valid, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv2d { in_ch: 20, out_ch: 50, kernel: 5, stride: 1, padding: Padding::Valid, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 800, outputs: 500, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 500, outputs: 10, bias: true },
        ],
    )
}

/// The toy variant of lenet-5-caffe: two linear output units for regression.
pub fn lenet_5_caffe_toy() -> Result<Network> {
    Network::new(
        "lenet-5-caffe-toy",
        InputShape::Image { ch: 1, h: 28, w: 28 },
        vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 20, kernel: 5, stride: 1, padding: Padding::Valid, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv2d { in_ch: 20, out_ch: 50, kernel: 5, stride: 1, padding: Padding::Valid, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 800, outputs: 500, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 500, outputs: 2, bias: true },
        ],
    )
}

/// Conv-4: four 3x3 convolutions (64, 64, 128, 128 filters) with max pooling
/// and dropout after each pair, then fully connected 512 and 10. Padding
/// alternates same/valid within each pair.
pub fn conv_4() -> Result<Network> {
    Network::new(
        "conv-4",
        InputShape::Image { ch: 3, h: 32, w: 32 },
        vec![
            LayerSpec::Conv2d { in_ch: 3, out_ch: 64, kernel: 3, stride: 1, padding: Padding::Same, bias: true },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_ch: 64, out_ch: 64, kernel: 3, stride: 1, padding: Padding::Valid, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Conv2d { in_ch: 64, out_ch: 128, kernel: 3, stride: 1, padding: Padding::Same, bias: true },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_ch: 128, out_ch: 128, kernel: 3, stride: 1, padding: Padding::Valid, bias: true },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 4608, outputs: 512, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Dense { inputs: 512, outputs: 10, bias: true },
        ],
    )
}

/// Plain MLP helper: ReLU between hidden layers, linear output.
pub fn mlp(name: &str, dims: &[usize], bias: bool) -> Result<Network> {
    assert!(dims.len() >= 2);
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        layers.push(LayerSpec::Dense { inputs: dims[i], outputs: dims[i + 1], bias });
        if i + 2 < dims.len() {
            layers.push(LayerSpec::Relu);
        }
    }
    Network::new(name, InputShape::Flat(dims[0]), layers)
}

/// Gather indices of kept weights for one layer: for each kept flat weight
/// index, its (row, col) coordinates in the layer's weight matrix.
pub fn kept_weight_coords(layer: &LayerParams, mask: &Mask) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let data = mask.values().data();
    for i in 0..layer.weight_len {
        if data[layer.weight_offset + i] != 0.0 {
            rows.push(i / layer.cols);
            cols.push(i % layer.cols);
        }
    }
    (rows, cols)
}

/// Shared all-ones mask tensor for unmasked evaluation.
pub fn ones_mask_tensor(net: &Network) -> Tensor {
    Tensor::new(vec![net.param_count()], vec![1.0; net.param_count()])
}

pub use crate::autodiff::Feeds;

/// Convenience: evaluate logits from an already-built bundle.
pub fn eval_logits(
    bundle: &NetGraph,
    params: &Tensor,
    mask: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    let mut feeds = Feeds::new(&bundle.graph);
    feeds.set(&bundle.graph, bundle.theta, params);
    feeds.set(&bundle.graph, bundle.mask, mask);
    feeds.set(&bundle.graph, bundle.x, x);
    Ok(bundle.graph.eval(&feeds, &[bundle.logits])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_300_100_param_count() {
        let net = lenet_300_100().unwrap();
        assert_eq!(net.param_count(), 266_610);
        assert_eq!(net.weight_count(), 266_200);
        assert_eq!(net.param_count() - net.weight_count(), 410);
        assert_eq!(net.class_count(), 10);
    }

    #[test]
    fn lenet_5_caffe_param_count() {
        let net = lenet_5_caffe().unwrap();
        assert_eq!(net.param_count(), 431_080);
    }

    #[test]
    fn conv_4_param_count() {
        let net = conv_4().unwrap();
        // conv weights 1728+36864+73728+147456, fc 2359296+5120, biases 906
        assert_eq!(net.param_count(), 2_625_098);
    }

    #[test]
    fn identity_dense_is_identity_map() {
        let net = mlp("id", &[2, 2], false).unwrap();
        let params = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::matrix(1, 2, vec![5.0, -2.0]);
        let out = forward_logits(&net, &params, None, &x, None).unwrap();
        assert_eq!(out.data(), &[5.0, -2.0]);
    }

    #[test]
    fn mask_zeroing_w00_zeroes_first_logit() {
        let net = mlp("id", &[2, 2], false).unwrap();
        let params = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        let mut keep = vec![true; 4];
        keep[0] = false;
        let mask = Mask::from_weight_bits(&net, &keep, 0.75);
        let x = Tensor::matrix(1, 2, vec![5.0, -2.0]);
        let out = forward_logits(&net, &params, Some(&mask), &x, None).unwrap();
        assert_eq!(out.data(), &[0.0, -2.0]);
    }

    #[test]
    fn all_ones_mask_matches_no_mask_bitwise() {
        let net = mlp("m", &[3, 5, 2], true).unwrap();
        let mut rng = Rng::new(7);
        let params = net.init_glorot(&mut rng);
        let x = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect());
        let a = forward_logits(&net, &params, None, &x, None).unwrap();
        let b = forward_logits(&net, &params, Some(&Mask::ones(&net)), &x, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn masked_forward_equals_hadamard_params() {
        let net = mlp("m", &[4, 6, 3], true).unwrap();
        let mut rng = Rng::new(3);
        let params = net.init_glorot(&mut rng);
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 3 != 0).collect();
        let mask = Mask::from_weight_bits(&net, &keep, 0.66);
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
        let a = forward_logits(&net, &params, Some(&mask), &x, None).unwrap();
        let b = forward_logits(&net, &mask.apply(&params), Some(&Mask::ones(&net)), &x, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn masked_entries_get_exactly_zero_gradient() {
        let net = mlp("m", &[3, 4, 2], true).unwrap();
        let mut rng = Rng::new(11);
        let params = net.init_glorot(&mut rng);
        let keep: Vec<bool> = (0..net.param_count()).map(|i| i % 2 == 0).collect();
        let mask = Mask::from_weight_bits(&net, &keep, 0.5);
        let mut bundle = net.build_graph(2, Mode::Eval);
        let sq = bundle.graph.square(bundle.logits);
        let loss = bundle.graph.sum(sq);
        let grad = bundle.graph.append_gradient(loss, &[bundle.theta])[0].unwrap();
        let x = Tensor::matrix(2, 3, vec![0.5, -0.2, 0.8, 0.1, 0.9, -0.4]);
        let mut feeds = Feeds::new(&bundle.graph);
        feeds.set(&bundle.graph, bundle.theta, &params);
        feeds.set(&bundle.graph, bundle.mask, mask.values());
        feeds.set(&bundle.graph, bundle.x, &x);
        let g = bundle.graph.eval(&feeds, &[grad]).unwrap().remove(0);
        for (i, &v) in g.data().iter().enumerate() {
            if mask.values().data()[i] == 0.0 {
                assert_eq!(v, 0.0, "masked coordinate {i} has nonzero gradient");
            }
        }
    }

    #[test]
    fn glorot_bound_and_variance() {
        let net = lenet_300_100().unwrap();
        let mut rng = Rng::new(42);
        let theta = net.init_glorot(&mut rng);
        let l0 = &net.layout()[0];
        let a = (6.0f64 / 1084.0).sqrt();
        assert!((a - 0.07440).abs() < 5e-5);
        let w = &theta.data()[l0.weight_offset..l0.weight_offset + l0.weight_len];
        assert!(w.iter().all(|&v| v.abs() <= a));
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 1084.0;
        assert!((var - target).abs() / target < 0.05, "variance {var} vs {target}");
        // Biases exactly zero.
        for l in net.layout() {
            for &b in &theta.data()[l.bias_offset..l.bias_offset + l.bias_len] {
                assert_eq!(b, 0.0);
            }
        }
    }

    #[test]
    fn variance_scaled_init_statistics() {
        // fan_in=100, p=0.02 -> Var = 1.0
        let net = mlp("vs", &[100, 200], true).unwrap();
        let mut rng = Rng::new(9);
        let theta = net.init_variance_scaled(&mut rng, 0.02).unwrap();
        let l0 = &net.layout()[0];
        let w = &theta.data()[l0.weight_offset..l0.weight_offset + l0.weight_len];
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var} vs 1.0");
        assert!(net.init_variance_scaled(&mut rng, 0.0).is_err());
    }

    #[test]
    fn multiply_add_counts() {
        let net = lenet_300_100().unwrap();
        let (per_layer, total) = net.count_multiply_adds(None);
        assert_eq!(per_layer, vec![235_200, 30_000, 1_000]);
        assert_eq!(total, 266_200);
        let (_, masked_total) = net.count_multiply_adds(Some(&Mask::ones(&net)));
        assert_eq!(masked_total, 266_200);
        // Conv positions multiply per-position kernel cost.
        let cnet = lenet_5_caffe().unwrap();
        let (per, _) = cnet.count_multiply_adds(None);
        assert_eq!(per[0], 500 * 24 * 24);
        assert_eq!(per[1], 25_000 * 8 * 8);
    }

    #[test]
    fn lenet5_forward_shape() {
        let net = lenet_5_caffe().unwrap();
        let mut rng = Rng::new(1);
        let params = net.init_glorot(&mut rng);
        let x = Tensor::matrix(2, 784, vec![0.5; 2 * 784]);
        let out = forward_logits(&net, &params, None, &x, None).unwrap();
        assert_eq!(out.shape(), &[2, 10]);
    }

    #[test]
    fn conv4_forward_shape_and_dropout_modes() {
        let net = conv_4().unwrap();
        let mut rng = Rng::new(1);
        let params = net.init_glorot(&mut rng);
        let x = Tensor::matrix(1, 3 * 32 * 32, vec![0.25; 3 * 32 * 32]);
        let eval1 = forward_logits(&net, &params, None, &x, None).unwrap();
        let eval2 = forward_logits(&net, &params, None, &x, None).unwrap();
        assert_eq!(eval1.shape(), &[1, 10]);
        assert_eq!(eval1, eval2);
        let mut druni = Rng::new(5);
        let trained = forward_logits(&net, &params, None, &x, Some(&mut druni)).unwrap();
        assert_eq!(trained.shape(), &[1, 10]);
    }

    #[test]
    fn mask_count_invariants() {
        let net = mlp("m", &[10, 10, 10], true).unwrap();
        // 100 weights per layer; p=0.03 layerwise keeps exactly 3 per layer.
        let mut keep = vec![false; net.param_count()];
        for l in net.layout() {
            for i in 0..3 {
                keep[l.weight_offset + i] = true;
            }
        }
        let mask = Mask::from_weight_bits(&net, &keep, 0.03);
        mask.check_counts(&net, Scheme::Layerwise(0.03)).unwrap();
        mask.check_counts(&net, Scheme::Global(0.03)).unwrap();
        assert!(mask.check_counts(&net, Scheme::Layerwise(0.05)).is_err());
        assert_eq!(mask.kept_weights(&net), 6);
    }

    #[test]
    fn round_half_up_rule() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(3.0), 3);
    }
}
