//! A compact layered classifier with exact hand-written backpropagation.
//!
//! Examples flow through the network one at a time; a batch is a tensor
//! whose leading axis indexes examples. Feature maps are captured after every
//! `Relu` layer and at the logits.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::Checkpoint;
pub use optim::{lr_at, sgd_step, LrSchedule, Velocity};
pub use train::{accuracy, finetune_ce, finetune_oecc, finetune_oecc_observed, train, train_observed, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, Tensor};

/// One layer of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    /// Non-overlapping `size × size` average pooling; trailing rows and
    /// columns that do not fill a window are dropped.
    AvgPool {
        size: usize,
    },
}

impl LayerSpec {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Shape(msg));
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                if input != [in_dim] {
                    return bad(format!("dense layer expects [{in_dim}], got {input:?}"));
                }
                if out_dim == 0 {
                    return bad("dense layer with zero outputs".into());
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(format!("conv2d expects [{in_channels}, H, W], got {input:?}"));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return bad("conv2d kernel, stride and out_channels must be positive".into());
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return bad(format!("conv2d kernel {kernel} exceeds padded input {h}x{w}"));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::AvgPool { size } => {
                if input.len() != 3 || size == 0 || input[1] < size || input[2] < size {
                    return bad(format!("avgpool {size} cannot pool {input:?}"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
        }
    }

    /// Weight and bias shapes, plus fan-in / fan-out for initialization.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize, usize)> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => Some((vec![out_dim, in_dim], vec![out_dim], in_dim, out_dim)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
            )),
            _ => None,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub layer: usize,
    pub name: String,
    pub value: Tensor,
}

/// Layered classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the output shape of layer `i`.
    shapes: Vec<Vec<usize>>,
    params: Vec<Param>,
    /// Indices into `params` of each layer's (weight, bias).
    layer_params: Vec<Option<(usize, usize)>>,
    capture_points: Vec<usize>,
    num_classes: usize,
    seed: u64,
}

impl Network {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, num_classes: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input_shape, layers, num_classes, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (li, layer) in net.layers.iter().enumerate() {
            if let (Some((_, _, fan_in, fan_out)), Some((w, _))) = (layer.param_shapes(), net.layer_params[li]) {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in net.params[w].value.data_mut() {
                    *v = rng.random_range(-limit..=limit);
                }
            }
        }
        Ok(net)
    }

    /// Builds a network whose parameters are all zero.
    pub fn zeros(input_shape: Vec<usize>, layers: Vec<LayerSpec>, num_classes: usize, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        let mut params = Vec::new();
        let mut layer_params = Vec::with_capacity(layers.len());
        for (li, layer) in layers.iter().enumerate() {
            current = layer
                .output_shape(&current)
                .map_err(|e| Error::Shape(format!("layer {li}: {e}")))?;
            shapes.push(current.clone());
            layer_params.push(layer.param_shapes().map(|(ws, bs, _, _)| {
                params.push(Param {
                    layer: li,
                    name: format!("layer{li}_weight"),
                    value: Tensor::zeros(&ws),
                });
                params.push(Param {
                    layer: li,
                    name: format!("layer{li}_bias"),
                    value: Tensor::zeros(&bs),
                });
                (params.len() - 2, params.len() - 1)
            }));
        }
        if current != [num_classes] {
            return Err(Error::Shape(format!(
                "final layer outputs {current:?}, expected [{num_classes}]"
            )));
        }
        let last = layers.len() - 1;
        let mut capture_points: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .map(|(i, _)| i)
            .collect();
        if capture_points.last() != Some(&last) {
            capture_points.push(last);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            params,
            layer_params,
            capture_points,
            num_classes,
            seed,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Layer indices whose outputs are captured as features.
    pub fn capture_points(&self) -> &[usize] {
        &self.capture_points
    }

    /// Shape of each captured feature map.
    pub fn capture_shapes(&self) -> Vec<Vec<usize>> {
        self.capture_points.iter().map(|&i| self.shapes[i].clone()).collect()
    }

    /// Zero tensors shaped like every parameter.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "network input is {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            let input = &activations[li];
            let out_shape = &self.shapes[li];
            let out = match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let (w, b) = self.weight_bias(li);
                    let xd = input.data();
                    let data = (0..out_dim)
                        .map(|o| b.data()[o] + dot(&w.data()[o * in_dim..(o + 1) * in_dim], xd))
                        .collect();
                    Tensor::new(out_shape.clone(), data)?
                }
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (w, b) = self.weight_bias(li);
                    conv_forward(input, w, b, kernel, stride, padding, out_shape)
                }
                LayerSpec::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
                LayerSpec::Flatten => input.clone().reshape(out_shape.clone())?,
                LayerSpec::AvgPool { size } => avgpool_forward(input, size, out_shape),
            };
            activations.push(out);
        }
        Ok(ForwardTrace {
            activations,
            capture_points: self.capture_points.clone(),
        })
    }

    /// Forward pass over every example of a batch (leading axis), in parallel.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<Vec<ForwardTrace>> {
        self.check_batch(xs)?;
        (0..xs.outer_len())
            .into_par_iter()
            .map(|i| self.forward(&self.example(xs.item_slice(i))?))
            .collect()
    }

    /// Wraps raw example values in the network's input shape.
    pub fn example(&self, values: &[f64]) -> Result<Tensor> {
        Tensor::new(self.input_shape.clone(), values.to_vec())
    }

    /// Logits of every example, `batch × K`.
    pub fn logits_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let traces = self.forward_batch(xs)?;
        stack_logits(&traces)
    }

    /// Argmax class of every example (lowest index on ties).
    pub fn predict_batch(&self, xs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits_batch(xs)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.item_slice(i))).collect())
    }

    fn check_batch(&self, xs: &Tensor) -> Result<()> {
        // Any leading-axis batch whose items hold the right number of values
        // is accepted, so image batches feed dense-only networks directly.
        let per_item: usize = self.input_shape.iter().product();
        if xs.rank() < 2 || xs.shape()[1..].iter().product::<usize>() != per_item {
            return Err(Error::Dimension(format!(
                "batch of {:?} needs shape [N, {:?}], got {:?}",
                self.input_shape,
                self.input_shape,
                xs.shape()
            )));
        }
        Ok(())
    }

    fn weight_bias(&self, layer: usize) -> (&Tensor, &Tensor) {
        let (w, b) = self.layer_params[layer].expect("parameterized layer");
        (&self.params[w].value, &self.params[b].value)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::Consistency(format!(
                "trace has {} activations, network has {} layers",
                trace.activations.len(),
                self.layers.len()
            )));
        }
        for (li, shape) in self.shapes.iter().enumerate() {
            if trace.activations[li + 1].shape() != shape.as_slice() {
                return Err(Error::Consistency(format!(
                    "layer {li} output is {:?}, network expects {shape:?}",
                    trace.activations[li + 1].shape()
                )));
            }
        }
        Ok(())
    }

    /// Parameter gradients for one example given `dloss/dlogits`.
    pub fn backward(&self, trace: &ForwardTrace, dloss_dlogits: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = self.zero_grads();
        self.accumulate_backward(trace, dloss_dlogits.data(), &mut grads)?;
        Ok(grads)
    }

    /// Sums parameter gradients over a batch; row `i` of `dloss_dlogits`
    /// belongs to `traces[i]`.
    pub fn backward_batch(&self, traces: &[ForwardTrace], dloss_dlogits: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = self.zero_grads();
        self.accumulate_backward_batch(traces, dloss_dlogits, &mut grads)?;
        Ok(grads)
    }

    pub fn accumulate_backward_batch(
        &self,
        traces: &[ForwardTrace],
        dloss_dlogits: &Tensor,
        grads: &mut [Tensor],
    ) -> Result<()> {
        if dloss_dlogits.rank() != 2 || dloss_dlogits.rows() != traces.len() {
            return Err(Error::Consistency(format!(
                "{} traces but upstream gradient {:?}",
                traces.len(),
                dloss_dlogits.shape()
            )));
        }
        for (i, trace) in traces.iter().enumerate() {
            self.accumulate_backward(trace, dloss_dlogits.item_slice(i), grads)?;
        }
        Ok(())
    }

    fn accumulate_backward(&self, trace: &ForwardTrace, dlogits: &[f64], grads: &mut [Tensor]) -> Result<()> {
        if dlogits.len() != self.num_classes {
            return Err(Error::Consistency(format!(
                "upstream gradient has {} entries, expected {}",
                dlogits.len(),
                self.num_classes
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Consistency("gradient buffer does not match parameters".into()));
        }
        self.check_trace(trace)?;
        let last = self.layers.len() - 1;
        let seed = Tensor::new(self.shapes[last].clone(), dlogits.to_vec())?;
        self.backprop(trace, last, seed, Some(grads));
        Ok(())
    }

    /// Gradient with respect to the network input of a scalar whose gradient
    /// at captured feature `capture` is `grad`.
    pub fn input_gradient(&self, trace: &ForwardTrace, capture: usize, grad: &Tensor) -> Result<Tensor> {
        self.check_trace(trace)?;
        let layer = *self
            .capture_points
            .get(capture)
            .ok_or_else(|| Error::Consistency(format!("capture point {capture} does not exist")))?;
        if grad.shape() != self.shapes[layer].as_slice() {
            return Err(Error::Dimension(format!(
                "feature gradient {:?} does not match capture shape {:?}",
                grad.shape(),
                self.shapes[layer]
            )));
        }
        Ok(self.backprop(trace, layer, grad.clone(), None))
    }

    /// Backpropagates `upstream` (the gradient at the output of layer
    /// `from`) down to the input, accumulating parameter gradients if asked.
    fn backprop(
        &self,
        trace: &ForwardTrace,
        from: usize,
        upstream: Tensor,
        mut grads: Option<&mut [Tensor]>,
    ) -> Tensor {
        let mut g = upstream;
        for li in (0..=from).rev() {
            let input = &trace.activations[li];
            let output = &trace.activations[li + 1];
            g = match *self.layers.get(li).expect("layer index") {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let (wi, bi) = self.layer_params[li].expect("dense params");
                    let w = self.params[wi].value.data();
                    if let Some(gr) = grads.as_deref_mut() {
                        let x = input.data();
                        {
                            let gw = gr[wi].data_mut();
                            for (o, &go) in g.data().iter().enumerate() {
                                if go != 0.0 {
                                    for (gwv, &xv) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(x) {
                                        *gwv += go * xv;
                                    }
                                }
                            }
                        }
                        for (gb, &go) in gr[bi].data_mut().iter_mut().zip(g.data()) {
                            *gb += go;
                        }
                    }
                    if li == 0 && grads.is_some() {
                        break;
                    }
                    let mut dx = vec![0.0; in_dim];
                    for o in 0..out_dim {
                        let go = g.data()[o];
                        if go != 0.0 {
                            for (d, &wv) in dx.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                                *d += go * wv;
                            }
                        }
                    }
                    Tensor::new(input.shape().to_vec(), dx).expect("dense input shape")
                }
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (wi, bi) = self.layer_params[li].expect("conv params");
                    let need_input = !(li == 0 && grads.is_some());
                    let dx = conv_backward(
                        input,
                        &self.params[wi].value,
                        &g,
                        kernel,
                        stride,
                        padding,
                        grads.as_deref_mut().map(|gr| {
                            let (a, b) = two_mut(gr, wi, bi);
                            (a, b)
                        }),
                        need_input,
                    );
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                LayerSpec::Relu => {
                    let data = g
                        .data()
                        .iter()
                        .zip(output.data())
                        .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                        .collect();
                    Tensor::new(input.shape().to_vec(), data).expect("relu shape")
                }
                LayerSpec::Flatten => g.reshape(input.shape().to_vec()).expect("flatten shape"),
                LayerSpec::AvgPool { size } => avgpool_backward(input.shape(), &g, size),
            };
        }
        g
    }
}

fn two_mut(v: &mut [Tensor], a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn conv_forward(
    input: &Tensor,
    w: &Tensor,
    b: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let (c_in, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let x = input.data();
    let wv = w.data();
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..c_in {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wv[((o * c_in + c) * kernel + ky) * kernel + kx]
                                * x[(c * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &Tensor,
    w: &Tensor,
    g: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    param_grads: Option<(&mut Tensor, &mut Tensor)>,
    need_input: bool,
) -> Option<Tensor> {
    let (c_in, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let x = input.data();
    let wv = w.data();
    let gd = g.data();
    let mut dx = if need_input { Some(vec![0.0; x.len()]) } else { None };
    let mut pg = param_grads;
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = gd[(o * oh + oy) * ow + ox];
                if go == 0.0 {
                    continue;
                }
                if let Some((_, gb)) = pg.as_mut() {
                    gb.data_mut()[o] += go;
                }
                for c in 0..c_in {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * wd + ix as usize;
                            let wi = ((o * c_in + c) * kernel + ky) * kernel + kx;
                            if let Some((gw, _)) = pg.as_mut() {
                                gw.data_mut()[wi] += go * x[xi];
                            }
                            if let Some(d) = dx.as_mut() {
                                d[xi] += go * wv[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx.map(|d| Tensor::new(input.shape().to_vec(), d).expect("conv input shape"))
}

fn avgpool_forward(input: &Tensor, size: usize, out_shape: &[usize]) -> Tensor {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let x = input.data();
    let norm = (size * size) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += x[(ch * h + oy * size + dy) * w + ox * size + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc / norm;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("avgpool output shape")
}

fn avgpool_backward(in_shape: &[usize], g: &Tensor, size: usize) -> Tensor {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (c, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let norm = (size * size) as f64;
    let mut dx = vec![0.0; in_shape.iter().product()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g.data()[(ch * oh + oy) * ow + ox] / norm;
                for dy in 0..size {
                    for ddx in 0..size {
                        dx[(ch * h + oy * size + dy) * w + ox * size + ddx] = go;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("avgpool input shape")
}

/// Everything one forward pass computed for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[i + 1]` the output of layer `i`.
    activations: Vec<Tensor>,
    capture_points: Vec<usize>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("non-empty trace")
    }

    /// Captured feature maps, in capture-point order.
    pub fn features(&self) -> Vec<&Tensor> {
        self.capture_points.iter().map(|&l| &self.activations[l + 1]).collect()
    }

    pub fn feature(&self, capture: usize) -> &Tensor {
        &self.activations[self.capture_points[capture] + 1]
    }

    pub fn num_features(&self) -> usize {
        self.capture_points.len()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(self.logits().data())
    }
}

pub(crate) fn stack_logits(traces: &[ForwardTrace]) -> Result<Tensor> {
    let logits: Vec<Tensor> = traces.iter().map(|t| t.logits().clone()).collect();
    Tensor::stack(&logits)
}
