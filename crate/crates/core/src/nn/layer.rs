use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::tensor::{Scalar, Tensor};
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    MaxPool2x2,
    GlobalAvgPool,
    Dense {
        inputs: usize,
        units: usize,
    },
    Dropout {
        rate: f32,
    },
    Relu,
    Softmax,
}

impl LayerSpec {
    /// Shapes of the weight and bias tensors, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => Some((vec![out_channels, in_channels, 3, 3], vec![out_channels])),
            LayerSpec::Dense { inputs, units } => Some((vec![inputs, units], vec![units])),
            _ => None,
        }
    }

    pub fn param_count(&self) -> u64 {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => 9 * in_channels as u64 * out_channels as u64 + out_channels as u64,
            LayerSpec::Dense { inputs, units } => inputs as u64 * units as u64 + units as u64,
            _ => 0,
        }
    }

    /// Fan-in used by He initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_channels, .. } => 9 * in_channels,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layers applied in order; parameters are named `{prefix}.{index}.weight|bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub prefix: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Mask(Vec<T>),
    PoolIndex(Vec<usize>),
}

/// Output of every layer (index 0 is the input) plus the state needed by backward.
#[derive(Clone, Debug)]
pub struct Activations<T = f32> {
    pub outputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs
            .last()
            .expect("activations hold at least the input")
    }
}

/// Named gradients in parameter order.
pub type Gradients<T = f32> = Vec<(String, Tensor<T>)>;

impl Sequential {
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Sequential {
            prefix: prefix.into(),
            layers,
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix)
    }

    /// `(name, shape)` of every parameter tensor, in layer order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some((w, b)) = l.param_shapes() {
                out.push((self.weight_name(i), w));
                out.push((self.bias_name(i), b));
            }
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    fn params<'w, T: Scalar>(
        &self,
        weights: &'w ModelWeights<T>,
        i: usize,
    ) -> Result<(&'w Tensor<T>, &'w Tensor<T>)> {
        let w = weights.tensor(&self.weight_name(i))?;
        let b = weights.tensor(&self.bias_name(i))?;
        Ok((w, b))
    }

    pub fn forward<T: Scalar>(
        &self,
        weights: &ModelWeights<T>,
        input: Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<Activations<T>> {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        outputs.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, a) = self.apply(i, layer, weights, outputs.last().unwrap(), mode, seed)?;
            outputs.push(out);
            aux.push(a);
        }
        Ok(Activations { outputs, aux })
    }

    /// Eval-mode forward that keeps only the final output.
    pub fn infer<T: Scalar>(
        &self,
        weights: &ModelWeights<T>,
        input: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = self.apply(i, layer, weights, &cur, Mode::Eval, 0)?.0;
        }
        Ok(cur)
    }

    fn apply<T: Scalar>(
        &self,
        i: usize,
        layer: &LayerSpec,
        weights: &ModelWeights<T>,
        x: &Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let shape = x.shape();
        let shape_err = |want: &str| {
            Error::Shape(format!(
                "layer {i} ({layer:?}) expects {want}, got {shape:?}"
            ))
        };
        match *layer {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => {
                if shape.len() != 4 || shape[1] != in_channels {
                    return Err(shape_err(&format!("[n, {in_channels}, h, w]")));
                }
                let (n, h, w) = (shape[0], shape[2], shape[3]);
                let (wt, b) = self.params(weights, i)?;
                let mut out = Tensor::zeros(&[n, out_channels, h, w]);
                kernels::conv3x3_forward(
                    x.data(),
                    wt.data(),
                    b.data(),
                    out.data_mut(),
                    n,
                    in_channels,
                    out_channels,
                    h,
                    w,
                );
                Ok((out, Aux::None))
            }
            LayerSpec::MaxPool2x2 => {
                if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
                    return Err(shape_err("[n, c, h>=2, w>=2]"));
                }
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
                let idx = kernels::maxpool_forward(x.data(), out.data_mut(), n * c, h, w);
                Ok((out, Aux::PoolIndex(idx)))
            }
            LayerSpec::GlobalAvgPool => {
                if shape.len() != 4 {
                    return Err(shape_err("[n, c, h, w]"));
                }
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let scale = T::one() / T::from_usize(plane).unwrap();
                let data = x
                    .data()
                    .chunks_exact(plane)
                    .map(|p| p.iter().copied().sum::<T>() * scale)
                    .collect();
                Ok((Tensor::from_vec(&[n, c], data)?, Aux::None))
            }
            LayerSpec::Dense { inputs, units } => {
                if shape.len() != 2 || shape[1] != inputs {
                    return Err(shape_err(&format!("[n, {inputs}]")));
                }
                let n = shape[0];
                let (wt, b) = self.params(weights, i)?;
                let mut out = Tensor::zeros(&[n, units]);
                kernels::dense_forward(
                    x.data(),
                    wt.data(),
                    b.data(),
                    out.data_mut(),
                    n,
                    inputs,
                    units,
                );
                Ok((out, Aux::None))
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Eval || rate == 0.0 {
                    return Ok((x.clone(), Aux::None));
                }
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Shape(format!("dropout rate {rate} outside [0, 1)")));
                }
                let mut rng = seed::rng(seed, &[seed::tag("dropout"), i as u64]);
                let keep_scale = T::one() / T::lit(1.0 - rate as f64);
                let mask: Vec<T> = (0..x.len())
                    .map(|_| {
                        if rng.gen::<f32>() < rate {
                            T::zero()
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                Ok((Tensor::from_vec(shape, data)?, Aux::Mask(mask)))
            }
            LayerSpec::Relu => {
                let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
                Ok((Tensor::from_vec(shape, data)?, Aux::None))
            }
            LayerSpec::Softmax => {
                if shape.len() != 2 {
                    return Err(shape_err("[n, classes]"));
                }
                let mut out = Tensor::zeros(shape);
                kernels::softmax_rows(x.data(), out.data_mut(), shape[1]);
                Ok((out, Aux::None))
            }
        }
    }

    /// Gradients of mean cross-entropy for a network ending in softmax.
    /// Frozen tensors receive no gradient.
    pub fn backward<T: Scalar>(
        &self,
        weights: &ModelWeights<T>,
        acts: &Activations<T>,
        labels: &[usize],
    ) -> Result<Gradients<T>> {
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::State(
                "cross-entropy backward needs a final softmax layer".into(),
            ));
        }
        let grad_logits = cross_entropy_grad(acts.output(), labels)?;
        let (grads, _) = self.backprop(weights, acts, self.layers.len() - 1, grad_logits, false)?;
        Ok(grads)
    }

    /// Backpropagates `grad_output` (gradient w.r.t. the final output) through
    /// every layer, also returning the gradient w.r.t. the network input.
    pub fn backward_from<T: Scalar>(
        &self,
        weights: &ModelWeights<T>,
        acts: &Activations<T>,
        grad_output: Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        let (g, gi) = self.backprop(weights, acts, self.layers.len(), grad_output, true)?;
        Ok((g, gi.expect("input gradient requested")))
    }

    fn backprop<T: Scalar>(
        &self,
        weights: &ModelWeights<T>,
        acts: &Activations<T>,
        end: usize,
        grad: Tensor<T>,
        need_input: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        if acts.outputs.len() != self.layers.len() + 1 || acts.aux.len() != self.layers.len() {
            return Err(Error::State(
                "activations do not belong to this network".into(),
            ));
        }
        if grad.shape() != acts.outputs[end].shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs activation {:?}",
                grad.shape(),
                acts.outputs[end].shape()
            )));
        }
        // earliest layer whose parameters need a gradient
        let first_trainable = (0..end).find(|&i| {
            self.layers[i].param_shapes().is_some()
                && !weights.is_frozen(&self.weight_name(i)).unwrap_or(true)
        });
        let stop = if need_input {
            0
        } else {
            first_trainable.unwrap_or(end)
        };

        let mut grads: Gradients<T> = Vec::new();
        let mut g = grad;
        for i in (stop..end).rev() {
            let x = &acts.outputs[i];
            let y = &acts.outputs[i + 1];
            let want_input = need_input || i > stop;
            let layer = self.layers[i];
            g = match layer {
                LayerSpec::Conv3x3 {
                    in_channels,
                    out_channels,
                } => {
                    let s = x.shape();
                    let (n, h, w) = (s[0], s[2], s[3]);
                    let (wt, _) = self.params(weights, i)?;
                    let trainable = !weights.is_frozen(&self.weight_name(i))?;
                    let mut gw = Tensor::zeros(wt.shape());
                    let mut gb = Tensor::zeros(&[out_channels]);
                    let mut gi = want_input.then(|| Tensor::zeros(s));
                    kernels::conv3x3_backward(
                        x.data(),
                        wt.data(),
                        g.data(),
                        trainable.then_some((gw.data_mut(), gb.data_mut())),
                        gi.as_mut().map(|t| t.data_mut()),
                        n,
                        in_channels,
                        out_channels,
                        h,
                        w,
                    );
                    if trainable {
                        grads.push((self.bias_name(i), gb));
                        grads.push((self.weight_name(i), gw));
                    }
                    gi.unwrap_or_else(|| Tensor::zeros(&[0]))
                }
                LayerSpec::Dense { inputs, units } => {
                    let n = x.shape()[0];
                    let (wt, _) = self.params(weights, i)?;
                    let trainable = !weights.is_frozen(&self.weight_name(i))?;
                    let mut gw = Tensor::zeros(wt.shape());
                    let mut gb = Tensor::zeros(&[units]);
                    let mut gi = want_input.then(|| Tensor::zeros(x.shape()));
                    kernels::dense_backward(
                        x.data(),
                        wt.data(),
                        g.data(),
                        trainable.then_some((gw.data_mut(), gb.data_mut())),
                        gi.as_mut().map(|t| t.data_mut()),
                        n,
                        inputs,
                        units,
                    );
                    if trainable {
                        grads.push((self.bias_name(i), gb));
                        grads.push((self.weight_name(i), gw));
                    }
                    gi.unwrap_or_else(|| Tensor::zeros(&[0]))
                }
                LayerSpec::MaxPool2x2 => {
                    let Aux::PoolIndex(idx) = &acts.aux[i] else {
                        return Err(Error::State(format!("layer {i}: missing pooling indices")));
                    };
                    let mut gi = Tensor::zeros(x.shape());
                    for (&src, &gv) in idx.iter().zip(g.data()) {
                        gi.data_mut()[src] += gv;
                    }
                    gi
                }
                LayerSpec::GlobalAvgPool => {
                    let s = x.shape();
                    let plane = s[2] * s[3];
                    let scale = T::one() / T::from_usize(plane).unwrap();
                    let mut gi = Tensor::zeros(s);
                    for (p, &gv) in gi.data_mut().chunks_exact_mut(plane).zip(g.data()) {
                        p.fill(gv * scale);
                    }
                    gi
                }
                LayerSpec::Dropout { .. } => match &acts.aux[i] {
                    Aux::Mask(mask) => {
                        let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                        Tensor::from_vec(x.shape(), data)?
                    }
                    _ => g,
                },
                LayerSpec::Relu => {
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    Tensor::from_vec(x.shape(), data)?
                }
                LayerSpec::Softmax => {
                    // g_in = p * (g - <g, p>) per row
                    let k = y.shape()[1];
                    let mut gi = Tensor::zeros(x.shape());
                    for ((p, gr), out) in y
                        .data()
                        .chunks_exact(k)
                        .zip(g.data().chunks_exact(k))
                        .zip(gi.data_mut().chunks_exact_mut(k))
                    {
                        let inner: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            out[j] = p[j] * (gr[j] - inner);
                        }
                    }
                    gi
                }
            };
        }
        grads.reverse();
        Ok((grads, need_input.then_some(g)))
    }
}

/// Mean cross-entropy of softmax outputs `probs` against integer labels.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    check_labels(probs, labels)?;
    let k = probs.shape()[1];
    let floor = T::min_positive_value();
    let total: T = probs
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| -(row[l].max(floor)).ln())
        .sum();
    Ok(total / T::from_usize(labels.len().max(1)).unwrap())
}

/// Gradient of mean cross-entropy w.r.t. the logits: `(p - onehot) / n`.
pub fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    check_labels(probs, labels)?;
    let k = probs.shape()[1];
    let inv_n = T::one() / T::from_usize(labels.len().max(1)).unwrap();
    let mut g = probs.clone();
    for (row, &l) in g.data_mut().chunks_exact_mut(k).zip(labels) {
        row[l] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(g)
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<()> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "probabilities {s:?} vs {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Shape(format!(
            "label {bad} outside {} classes",
            s[1]
        )));
    }
    Ok(())
}
