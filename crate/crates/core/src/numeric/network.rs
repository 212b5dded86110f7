use std::ops::Range;
use std::sync::Arc;

use super::layers::{Cache, Layer};
use super::loss::softmax_cross_entropy;
use super::params::{sgd_step, Gradients, ParamLayout, ParameterVector};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone)]
struct Tape<T> {
    /// `activations[i]` is the input of layer `i`; the last entry is the logits.
    activations: Vec<Vec<T>>,
    caches: Vec<Cache>,
    dlogits: Vec<T>,
    batch: usize,
}

impl Clone for Cache {
    fn clone(&self) -> Self {
        match self {
            Cache::None => Cache::None,
            Cache::Argmax(v) => Cache::Argmax(v.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardOptions {
    pub params: bool,
    pub input: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            params: true,
            input: false,
        }
    }
}

pub struct BackwardOutput<T> {
    pub grads: Option<Gradients<T>>,
    /// Gradient with respect to the network input, shaped like the input batch.
    pub input: Option<Tensor<T>>,
}

/// A sequential classifier with all trainable parameters in one flat buffer.
///
/// A network is single-writer: `forward_loss` with recording stores a tape
/// that the next `backward` consumes.
#[derive(Clone)]
pub struct Network<T> {
    layers: Vec<Layer>,
    layout: Arc<ParamLayout>,
    params: Vec<T>,
    input_shape: Vec<usize>,
    num_classes: usize,
    tape: Option<Tape<T>>,
}

/// Incrementally assembles layers and assigns parameter offsets.
pub struct NetworkBuilder {
    layers: Vec<Layer>,
    layout: ParamLayout,
    input_shape: Vec<usize>,
    /// Current per-sample feature geometry `(channels, h, w)`; `h = w = 1`
    /// once flattened.
    geom: (usize, usize, usize),
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        let geom = match *input_shape {
            [c, h, w] => (c, h, w),
            _ => (input_shape.iter().product(), 1, 1),
        };
        Self {
            layers: Vec::new(),
            layout: ParamLayout::default(),
            input_shape: input_shape.to_vec(),
            geom,
        }
    }

    pub fn features(&self) -> usize {
        self.geom.0 * self.geom.1 * self.geom.2
    }

    pub fn conv2d(mut self, name: &str, out_channels: usize, kernel: usize) -> Result<Self> {
        let (c, h, w) = self.geom;
        if h < kernel || w < kernel {
            return Err(Error::InvalidModel(format!(
                "{name}: {h}x{w} input is smaller than the {kernel}x{kernel} kernel"
            )));
        }
        let weight = self.offset_of(format!("{name}.weight"), vec![out_channels, c, kernel, kernel]);
        let bias = self.offset_of(format!("{name}.bias"), vec![out_channels]);
        self.layers.push(Layer::Conv2d {
            in_channels: c,
            out_channels,
            kernel,
            in_h: h,
            in_w: w,
            weight,
            bias,
        });
        self.geom = (out_channels, h + 1 - kernel, w + 1 - kernel);
        Ok(self)
    }

    pub fn max_pool(mut self, size: usize) -> Result<Self> {
        let (c, h, w) = self.geom;
        if h < size || w < size {
            return Err(Error::InvalidModel(format!(
                "{h}x{w} feature map is smaller than the {size}x{size} pooling window"
            )));
        }
        self.layers.push(Layer::MaxPool2d {
            channels: c,
            in_h: h,
            in_w: w,
            size,
        });
        self.geom = (c, h / size, w / size);
        Ok(self)
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu {
            features: self.features(),
        });
        self
    }

    pub fn linear(mut self, name: &str, outputs: usize) -> Self {
        let inputs = self.features();
        let weight = self.offset_of(format!("{name}.weight"), vec![outputs, inputs]);
        let bias = self.offset_of(format!("{name}.bias"), vec![outputs]);
        self.layers.push(Layer::Linear {
            inputs,
            outputs,
            weight,
            bias,
        });
        self.geom = (outputs, 1, 1);
        self
    }

    fn offset_of(&mut self, name: String, shape: Vec<usize>) -> usize {
        let idx = self.layout.push(name, shape);
        self.layout.entries()[idx].offset
    }

    /// Finishes the network; `init` fills each parameter block given its entry.
    pub fn build<T: Scalar>(self, mut init: impl FnMut(&super::ParamEntry, &mut [T])) -> Network<T> {
        let mut params = vec![T::zero(); self.layout.total()];
        for entry in self.layout.entries() {
            init(entry, &mut params[entry.range()]);
        }
        Network {
            num_classes: self.features(),
            layers: self.layers,
            layout: Arc::new(self.layout),
            params,
            input_shape: self.input_shape,
            tape: None,
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        self.tape = None;
        &mut self.params
    }

    pub fn flatten(&self) -> ParameterVector<T> {
        ParameterVector::new(self.layout.clone(), self.params.clone()).expect("layout matches own params")
    }

    pub fn load(&mut self, pv: &ParameterVector<T>) -> Result<()> {
        if **pv.layout() != *self.layout {
            return Err(Error::ParamMismatch(format!(
                "vector with {} values does not match a network with {} parameters",
                pv.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(pv.values());
        self.tape = None;
        Ok(())
    }

    /// `params[range] -= lr * grads[range]`, the other entries untouched.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T, range: Range<usize>) -> Result<()> {
        if **grads.layout() != *self.layout {
            return Err(Error::ParamMismatch("gradient layout differs".into()));
        }
        self.tape = None;
        sgd_step(&mut self.params[range.clone()], &grads.values()[range], lr)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let features: usize = self.input_shape.iter().product();
        let batch = x.batch_len();
        if x.shape().len() < 2 || x.shape()[1..].iter().product::<usize>() != features {
            return Err(Error::Shape(format!(
                "network expects [batch, {:?}] input, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(batch)
    }

    fn run(&self, x: &[T], batch: usize, upto: usize, keep: bool) -> Result<(Vec<Vec<T>>, Vec<Cache>)> {
        let mut acts = Vec::with_capacity(if keep { upto + 1 } else { 1 });
        let mut caches = Vec::new();
        let mut cur = x.to_vec();
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            let (out, cache) = layer.forward(&self.params, &cur, batch);
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: i });
            }
            if keep {
                acts.push(std::mem::replace(&mut cur, out));
                caches.push(cache);
            } else {
                cur = out;
            }
        }
        acts.push(cur);
        Ok((acts, caches))
    }

    /// Logits `[batch, classes]` without recording.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x)?;
        let (mut acts, _) = self.run(x.data(), batch, self.layers.len(), false)?;
        Tensor::new(vec![batch, self.num_classes], acts.pop().unwrap())
    }

    /// Input features of the final layer (the last hidden representation).
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x)?;
        let upto = self.layers.len().saturating_sub(1);
        let (mut acts, _) = self.run(x.data(), batch, upto, false)?;
        let out = acts.pop().unwrap();
        let width = out.len() / batch.max(1);
        Tensor::new(vec![batch, width], out)
    }

    /// Mean cross-entropy of the batch; with `record`, keeps the tape for
    /// a subsequent [`Network::backward`].
    pub fn forward_loss(&mut self, x: &Tensor<T>, labels: &[usize], record: bool) -> Result<(T, Tensor<T>)> {
        self.tape = None;
        let batch = self.check_input(x)?;
        if batch != labels.len() {
            return Err(Error::Shape(format!(
                "batch of {batch} inputs with {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        let (mut acts, caches) = self.run(x.data(), batch, self.layers.len(), record)?;
        let logits = acts.last().unwrap().clone();
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, self.num_classes);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        if record {
            acts.pop();
            self.tape = Some(Tape {
                activations: acts,
                caches,
                dlogits,
                batch,
            });
        }
        Ok((loss, Tensor::new(vec![batch, self.num_classes], logits)?))
    }

    pub fn backward(&mut self) -> Result<Gradients<T>> {
        let out = self.backward_with(BackwardOptions::default())?;
        Ok(out.grads.expect("parameter gradients requested"))
    }

    pub fn backward_with(&mut self, opts: BackwardOptions) -> Result<BackwardOutput<T>> {
        let tape = self.tape.take().ok_or(Error::NoRecordedForward)?;
        let mut grads = opts.params.then(|| vec![T::zero(); self.params.len()]);
        let mut dy = tape.dlogits;
        let first_needed = if opts.input {
            0
        } else {
            // below the lowest parameterized layer no gradient is needed
            self.layers
                .iter()
                .position(|l| matches!(l, Layer::Conv2d { .. } | Layer::Linear { .. }))
                .unwrap_or(self.layers.len())
        };
        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            if !opts.params && i < first_needed {
                break;
            }
            let need_dx = i > first_needed || (i == 0 && opts.input);
            let dx = self.layers[i].backward(
                &self.params,
                &tape.activations[i],
                &tape.caches[i],
                &dy,
                tape.batch,
                grads.as_deref_mut(),
                need_dx,
            );
            match dx {
                Some(d) if i == 0 => input_grad = Some(d),
                Some(d) => dy = d,
                None => break,
            }
        }
        let grads = match grads {
            Some(g) => {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("gradient"));
                }
                Some(Gradients::new(self.layout.clone(), g)?)
            }
            None => None,
        };
        let input = match input_grad {
            Some(d) => {
                let mut shape = vec![tape.batch];
                shape.extend_from_slice(&self.input_shape);
                Some(Tensor::new(shape, d)?)
            }
            None => None,
        };
        Ok(BackwardOutput { grads, input })
    }
}
