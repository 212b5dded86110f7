use crate::scalar::Scalar;

/// One stage of a sequential network. Activations are stored per sample as
/// flat row-major feature vectors; spatial layers carry their geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Valid (unpadded), stride-1 convolution.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        in_h: usize,
        in_w: usize,
        weight: usize,
        bias: usize,
    },
    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped.
    MaxPool2d {
        channels: usize,
        in_h: usize,
        in_w: usize,
        size: usize,
    },
    Relu {
        features: usize,
    },
    /// `y = x Wᵀ + b` with `W` stored as `[outputs, inputs]`.
    Linear {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
}

pub(crate) enum Cache {
    None,
    Argmax(Vec<u32>),
}

impl Layer {
    pub fn in_features(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_channels,
                in_h,
                in_w,
                ..
            } => in_channels * in_h * in_w,
            Layer::MaxPool2d {
                channels,
                in_h,
                in_w,
                ..
            } => channels * in_h * in_w,
            Layer::Relu { features } => features,
            Layer::Linear { inputs, .. } => inputs,
        }
    }

    pub fn out_features(&self) -> usize {
        match *self {
            Layer::Conv2d {
                out_channels,
                kernel,
                in_h,
                in_w,
                ..
            } => out_channels * (in_h + 1 - kernel) * (in_w + 1 - kernel),
            Layer::MaxPool2d {
                channels,
                in_h,
                in_w,
                size,
            } => channels * (in_h / size) * (in_w / size),
            Layer::Relu { features } => features,
            Layer::Linear { outputs, .. } => outputs,
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, params: &[T], x: &[T], batch: usize) -> (Vec<T>, Cache) {
        let out_f = self.out_features();
        let in_f = self.in_features();
        debug_assert_eq!(x.len(), batch * in_f);
        let mut y = vec![T::zero(); batch * out_f];
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                in_h,
                in_w,
                weight,
                bias,
            } => {
                let (oh, ow) = (in_h + 1 - kernel, in_w + 1 - kernel);
                let ohw = oh * ow;
                let ckk = in_channels * kernel * kernel;
                let w = &params[weight..weight + out_channels * ckk];
                let b = &params[bias..bias + out_channels];
                let mut col = vec![T::zero(); ckk * ohw];
                for s in 0..batch {
                    im2col(&x[s * in_f..(s + 1) * in_f], &mut col, in_channels, in_h, in_w, kernel);
                    let ys = &mut y[s * out_f..(s + 1) * out_f];
                    for (o, row) in ys.chunks_mut(ohw).enumerate() {
                        row.fill(b[o]);
                    }
                    T::gemm(
                        out_channels,
                        ckk,
                        ohw,
                        T::one(),
                        w,
                        ckk as isize,
                        1,
                        &col,
                        ohw as isize,
                        1,
                        T::one(),
                        ys,
                        ohw as isize,
                        1,
                    );
                }
                (y, Cache::None)
            }
            Layer::MaxPool2d {
                channels,
                in_h,
                in_w,
                size,
            } => {
                let (oh, ow) = (in_h / size, in_w / size);
                let mut arg = vec![0u32; batch * out_f];
                for s in 0..batch {
                    for c in 0..channels {
                        let plane = s * in_f + c * in_h * in_w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = plane + oy * size * in_w + ox * size;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let idx = plane + (oy * size + dy) * in_w + ox * size + dx;
                                        if x[idx] > x[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                let o = s * out_f + (c * oh + oy) * ow + ox;
                                y[o] = x[best];
                                arg[o] = (best - s * in_f) as u32;
                            }
                        }
                    }
                }
                (y, Cache::Argmax(arg))
            }
            Layer::Relu { .. } => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = if v > T::zero() { v } else { T::zero() };
                }
                (y, Cache::None)
            }
            Layer::Linear {
                inputs,
                outputs,
                weight,
                bias,
            } => {
                let w = &params[weight..weight + inputs * outputs];
                let b = &params[bias..bias + outputs];
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(b);
                }
                // y[B,out] += x[B,in] · Wᵀ
                T::gemm(
                    batch,
                    inputs,
                    outputs,
                    T::one(),
                    x,
                    inputs as isize,
                    1,
                    w,
                    1,
                    inputs as isize,
                    T::one(),
                    &mut y,
                    outputs as isize,
                    1,
                );
                (y, Cache::None)
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the gradient with respect to the layer input (when `need_dx`).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &[T],
        cache: &Cache,
        dy: &[T],
        batch: usize,
        grads: Option<&mut [T]>,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let out_f = self.out_features();
        let in_f = self.in_features();
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                in_h,
                in_w,
                weight,
                bias,
            } => {
                let (oh, ow) = (in_h + 1 - kernel, in_w + 1 - kernel);
                let ohw = oh * ow;
                let ckk = in_channels * kernel * kernel;
                let w = &params[weight..weight + out_channels * ckk];
                let mut dx = need_dx.then(|| vec![T::zero(); batch * in_f]);
                let mut col = vec![T::zero(); ckk * ohw];
                let mut dcol = vec![T::zero(); ckk * ohw];
                let mut grads = grads;
                for s in 0..batch {
                    let dys = &dy[s * out_f..(s + 1) * out_f];
                    if let Some(g) = grads.as_deref_mut() {
                        im2col(&x[s * in_f..(s + 1) * in_f], &mut col, in_channels, in_h, in_w, kernel);
                        // dW[O,Ckk] += dy[O,OHW] · colᵀ
                        T::gemm(
                            out_channels,
                            ohw,
                            ckk,
                            T::one(),
                            dys,
                            ohw as isize,
                            1,
                            &col,
                            1,
                            ohw as isize,
                            T::one(),
                            &mut g[weight..weight + out_channels * ckk],
                            ckk as isize,
                            1,
                        );
                        for (o, row) in dys.chunks(ohw).enumerate() {
                            g[bias + o] += row.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcol[Ckk,OHW] = Wᵀ · dy
                        T::gemm(
                            ckk,
                            out_channels,
                            ohw,
                            T::one(),
                            w,
                            1,
                            ckk as isize,
                            dys,
                            ohw as isize,
                            1,
                            T::zero(),
                            &mut dcol,
                            ohw as isize,
                            1,
                        );
                        col2im(&dcol, &mut dx[s * in_f..(s + 1) * in_f], in_channels, in_h, in_w, kernel);
                    }
                }
                dx
            }
            Layer::MaxPool2d { .. } => {
                let Cache::Argmax(arg) = cache else {
                    unreachable!("max pooling records argmax indices")
                };
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); batch * in_f];
                    for s in 0..batch {
                        for o in 0..out_f {
                            let k = s * out_f + o;
                            dx[s * in_f + arg[k] as usize] += dy[k];
                        }
                    }
                    dx
                })
            }
            Layer::Relu { .. } => need_dx.then(|| {
                x.iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect()
            }),
            Layer::Linear {
                inputs,
                outputs,
                weight,
                bias,
            } => {
                if let Some(g) = grads {
                    // dW[out,in] += dyᵀ · x
                    T::gemm(
                        outputs,
                        batch,
                        inputs,
                        T::one(),
                        dy,
                        1,
                        outputs as isize,
                        x,
                        inputs as isize,
                        1,
                        T::one(),
                        &mut g[weight..weight + inputs * outputs],
                        inputs as isize,
                        1,
                    );
                    for row in dy.chunks(outputs) {
                        for (gb, &d) in g[bias..bias + outputs].iter_mut().zip(row) {
                            *gb += d;
                        }
                    }
                }
                need_dx.then(|| {
                    let w = &params[weight..weight + inputs * outputs];
                    let mut dx = vec![T::zero(); batch * inputs];
                    T::gemm(
                        batch,
                        outputs,
                        inputs,
                        T::one(),
                        dy,
                        outputs as isize,
                        1,
                        w,
                        inputs as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        inputs as isize,
                        1,
                    );
                    dx
                })
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], col: &mut [T], channels: usize, h: usize, w: usize, k: usize) {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let ohw = oh * ow;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * ohw;
                for oy in 0..oh {
                    let src = c * h * w + (oy + ki) * w + kj;
                    col[row + oy * ow..row + (oy + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], dx: &mut [T], channels: usize, h: usize, w: usize, k: usize) {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let ohw = oh * ow;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * ohw;
                for oy in 0..oh {
                    let dst = c * h * w + (oy + ki) * w + kj;
                    for (d, &v) in dx[dst..dst + ow].iter_mut().zip(&col[row + oy * ow..row + (oy + 1) * ow]) {
                        *d += v;
                    }
                }
            }
        }
    }
}
