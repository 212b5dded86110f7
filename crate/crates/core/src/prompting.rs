//! Client-private visual prompts: template masks, masked application to
//! image batches, the prompt gradient and its SGD update.
//!
//! A prompt stores only its `C × |support|` learnable values, in
//! row-major mask order, so values outside the template support are zero
//! by construction.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sgd_step, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    /// A frame of width `p` around the image border.
    Padding,
    /// A `p × p` patch anchored at the top-left corner.
    PatchFixed,
    /// A `p × p` patch whose anchor is redrawn for every batch.
    PatchRandom,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 3] = [Self::Padding, Self::PatchFixed, Self::PatchRandom];

    fn code(self) -> u8 {
        match self {
            Self::Padding => 0,
            Self::PatchFixed => 1,
            Self::PatchRandom => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == c)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Padding => "padding",
            Self::PatchFixed => "patch-fixed",
            Self::PatchRandom => "patch-random",
        })
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::InvalidPrompt(format!("unknown template `{s}`")))
    }
}

/// How the prompt combines with the pixels under its support.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// `x + δ`
    #[default]
    Add,
    /// `δ` overwrites the covered pixels.
    Replace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptSpec {
    pub template: PromptTemplate,
    pub size: usize,
    /// `(C, H, W)`
    pub image_shape: [usize; 3],
    pub mode: PromptMode,
}

impl PromptSpec {
    pub fn new(template: PromptTemplate, size: usize, image_shape: [usize; 3]) -> Result<Self> {
        let spec = Self {
            template,
            size,
            image_shape,
            mode: PromptMode::Add,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_mode(mut self, mode: PromptMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidPrompt(format!(
                "image shape {:?} must be positive",
                self.image_shape
            )));
        }
        let side = h.min(w);
        match self.template {
            PromptTemplate::Padding if 2 * self.size >= side => Err(Error::InvalidPrompt(format!(
                "padding size {} needs 2p < {side}",
                self.size
            ))),
            PromptTemplate::PatchFixed | PromptTemplate::PatchRandom if self.size > side => {
                Err(Error::InvalidPrompt(format!(
                    "patch size {} exceeds image side {side}",
                    self.size
                )))
            }
            _ => Ok(()),
        }
    }

    /// Support at the canonical anchor (top-left for patches).
    pub fn mask(&self) -> TemplateMask {
        let [_, h, w] = self.image_shape;
        let p = self.size;
        let bits = (0..h * w)
            .map(|idx| {
                let (i, j) = (idx / w, idx % w);
                match self.template {
                    PromptTemplate::Padding => i < p || i >= h - p || j < p || j >= w - p,
                    _ => i < p && j < p,
                }
            })
            .collect();
        TemplateMask {
            height: h,
            width: w,
            bits,
        }
    }
}

/// `C·p²` for patches, `2Cp(H + W − 2p)` for padding.
pub fn prompt_param_count(spec: &PromptSpec) -> Result<usize> {
    spec.validate()?;
    let [c, h, w] = spec.image_shape;
    let p = spec.size;
    Ok(match spec.template {
        PromptTemplate::Padding => 2 * c * p * (h + w - 2 * p),
        PromptTemplate::PatchFixed | PromptTemplate::PatchRandom => c * p * p,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl TemplateMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major pixel offsets of the support.
    pub fn positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Where the prompt sits for one batch: a pixel offset added to every
/// support position (non-zero only for randomly placed patches).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Placement {
    pub shift: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptState<T> {
    spec: PromptSpec,
    owner: usize,
    support: Vec<usize>,
    /// `values[c * support.len() + k]` is added at channel `c`, pixel `support[k]`.
    values: Vec<T>,
}

/// Zero-initialized prompt, so applying it is the identity until trained.
pub fn init_prompt<T: Scalar>(spec: &PromptSpec, owner: usize) -> Result<PromptState<T>> {
    spec.validate()?;
    let support = spec.mask().positions();
    let values = vec![T::zero(); spec.image_shape[0] * support.len()];
    Ok(PromptState {
        spec: *spec,
        owner,
        support,
        values,
    })
}

impl<T: Scalar> PromptState<T> {
    pub fn spec(&self) -> &PromptSpec {
        &self.spec
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    /// Replaces the learnable values; `values` follows mask order.
    pub fn set_values(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "prompt holds {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Draws the placement for the next batch; deterministic templates never
    /// touch `rng`.
    pub fn place(&self, rng: &mut impl Rng) -> Placement {
        match self.spec.template {
            PromptTemplate::PatchRandom => {
                let [_, h, w] = self.spec.image_shape;
                let p = self.spec.size;
                let r = rng.random_range(0..=h - p);
                let c = rng.random_range(0..=w - p);
                Placement { shift: r * w + c }
            }
            _ => Placement::default(),
        }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<usize> {
        let shape = x.shape();
        let img = &self.spec.image_shape[..];
        match shape.len() {
            3 if shape == img => Ok(1),
            4 if &shape[1..] == img => Ok(shape[0]),
            _ => Err(Error::Shape(format!(
                "prompt for images {:?} applied to {:?}",
                self.spec.image_shape, shape
            ))),
        }
    }

    /// Prompted copy of `x` (`[C,H,W]` or `[B,C,H,W]`); pixels off the
    /// support are copied bit-for-bit and nothing is clamped.
    pub fn apply_at(&self, x: &Tensor<T>, placement: Placement) -> Result<Tensor<T>> {
        let batch = self.check_batch(x)?;
        let [c, h, w] = self.spec.image_shape;
        let mut out = x.clone();
        let data = out.data_mut();
        let n = self.support.len();
        for s in 0..batch {
            for ch in 0..c {
                let plane = (s * c + ch) * h * w + placement.shift;
                let vals = &self.values[ch * n..(ch + 1) * n];
                for (&pos, &v) in self.support.iter().zip(vals) {
                    match self.spec.mode {
                        PromptMode::Add => data[plane + pos] += v,
                        PromptMode::Replace => data[plane + pos] = v,
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient of the loss with respect to the prompt values, given the
    /// loss gradient with respect to the prompted batch.
    pub fn gradient(&self, input_grad: &Tensor<T>, placement: Placement) -> Result<Vec<T>> {
        let batch = self.check_batch(input_grad)?;
        let [c, h, w] = self.spec.image_shape;
        let n = self.support.len();
        let data = input_grad.data();
        let mut g = vec![T::zero(); self.values.len()];
        for s in 0..batch {
            for ch in 0..c {
                let plane = (s * c + ch) * h * w + placement.shift;
                for (gk, &pos) in g[ch * n..(ch + 1) * n].iter_mut().zip(&self.support) {
                    *gk += data[plane + pos];
                }
            }
        }
        Ok(g)
    }

    /// The prompt as a dense `[C,H,W]` grid at the canonical anchor.
    pub fn delta_grid(&self) -> Tensor<T> {
        let [c, h, w] = self.spec.image_shape;
        let mut grid = Tensor::zeros(vec![c, h, w]);
        let n = self.support.len();
        let data = grid.data_mut();
        for ch in 0..c {
            for (k, &pos) in self.support.iter().enumerate() {
                data[ch * h * w + pos] = self.values[ch * n + k];
            }
        }
        grid
    }
}

pub fn apply_prompt<T: Scalar>(x: &Tensor<T>, state: &PromptState<T>, rng: &mut impl Rng) -> Result<(Tensor<T>, Placement)> {
    let placement = state.place(rng);
    Ok((state.apply_at(x, placement)?, placement))
}

/// `δ ← δ − lr·g` on the support.
pub fn prompt_grad_step<T: Scalar>(state: &mut PromptState<T>, grads: &[T], lr: T) -> Result<()> {
    if grads.len() != state.values.len() {
        return Err(Error::Shape(format!(
            "prompt holds {} values, got {} gradients",
            state.values.len(),
            grads.len()
        )));
    }
    sgd_step(&mut state.values, grads, lr)
}

const PROMPT_MAGIC: &[u8; 8] = b"FLPRMT01";

/// `magic | template u8 | mode u8 | p, C, H, W as u32 | u32 owner |
/// u64 count | count × f32`, little-endian, values in mask order.
pub fn write_prompt<T: Scalar>(mut w: impl Write, state: &PromptState<T>) -> Result<()> {
    let s = &state.spec;
    w.write_all(PROMPT_MAGIC)?;
    w.write_all(&[s.template.code(), matches!(s.mode, PromptMode::Replace) as u8])?;
    for v in [s.size, s.image_shape[0], s.image_shape[1], s.image_shape[2], state.owner] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(state.values.len() as u64).to_le_bytes())?;
    for v in &state.values {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_prompt<T: Scalar>(mut r: impl Read) -> Result<PromptState<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PROMPT_MAGIC {
        return Err(bad("bad prompt magic"));
    }
    let mut codes = [0u8; 2];
    r.read_exact(&mut codes)?;
    let template = PromptTemplate::from_code(codes[0]).ok_or_else(|| bad("unknown template code"))?;
    let mode = match codes[1] {
        0 => PromptMode::Add,
        1 => PromptMode::Replace,
        _ => return Err(bad("unknown mode code")),
    };
    let mut fields = [0usize; 5];
    for f in fields.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *f = u32::from_le_bytes(b) as usize;
    }
    let [size, c, h, w, owner] = fields;
    let spec = PromptSpec::new(template, size, [c, h, w])?.with_mode(mode);
    let mut state = init_prompt::<T>(&spec, owner)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    if count != state.values.len() {
        return Err(bad("value count does not match the spec"));
    }
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    for (v, chunk) in state.values.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = T::from_f64_lossy(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn padding4() -> PromptSpec {
        PromptSpec::new(PromptTemplate::Padding, 4, [3, 32, 32]).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(prompt_param_count(&padding4()).unwrap(), 1344);
        let patch = PromptSpec::new(PromptTemplate::PatchFixed, 4, [3, 32, 32]).unwrap();
        assert_eq!(prompt_param_count(&patch).unwrap(), 48);
        for t in PromptTemplate::ALL {
            let s = PromptSpec::new(t, 0, [3, 32, 32]).unwrap();
            assert_eq!(prompt_param_count(&s).unwrap(), 0);
        }
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(PromptSpec::new(PromptTemplate::Padding, 16, [3, 32, 32]).is_err());
        assert!(PromptSpec::new(PromptTemplate::Padding, 15, [3, 32, 32]).is_ok());
        assert!(PromptSpec::new(PromptTemplate::PatchRandom, 33, [3, 32, 32]).is_err());
        assert!(PromptSpec::new(PromptTemplate::PatchRandom, 32, [3, 32, 32]).is_ok());
        assert!(PromptSpec::new(PromptTemplate::PatchFixed, 2, [3, 0, 32]).is_err());
    }

    #[test]
    fn padding_mask_popcount() {
        assert_eq!(padding4().mask().popcount(), 448);
    }

    #[test]
    fn zero_prompt_is_identity() {
        let s = PromptSpec::new(PromptTemplate::PatchRandom, 5, [3, 8, 8]).unwrap();
        let st = init_prompt::<f32>(&s, 0).unwrap();
        let x = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| i as f32 * 0.01 - 1.0).collect()).unwrap();
        let (y, _) = apply_prompt(&x, &st, &mut rng::stream(1, "t", &[])).unwrap();
        assert_eq!(y, x);
        assert_eq!(st, init_prompt::<f32>(&s, 0).unwrap());
    }

    #[test]
    fn unit_prompt_on_zero_image_equals_mask() {
        let spec = padding4();
        let mut st = init_prompt::<f64>(&spec, 0).unwrap();
        let ones = vec![1.0; st.param_count()];
        st.set_values(&ones).unwrap();
        let y = st.apply_at(&Tensor::zeros(vec![1, 3, 32, 32]), Placement::default()).unwrap();
        let mask = spec.mask();
        for ch in 0..3 {
            for i in 0..32 {
                for j in 0..32 {
                    let v = y.data()[ch * 1024 + i * 32 + j];
                    assert_eq!(v, if mask.get(i, j) { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn gradient_step_stays_on_mask() {
        let spec = padding4();
        let mut st = init_prompt::<f64>(&spec, 0).unwrap();
        let g = vec![0.5; st.param_count()];
        prompt_grad_step(&mut st, &g, 0.0).unwrap();
        assert!(st.values().iter().all(|&v| v == 0.0));
        prompt_grad_step(&mut st, &g, 2.0).unwrap();
        let grid = st.delta_grid();
        let mask = spec.mask();
        for (idx, &v) in grid.data().iter().enumerate() {
            let pix = idx % 1024;
            let expected = if mask.get(pix / 32, pix % 32) { -1.0 } else { 0.0 };
            assert_eq!(v, expected);
        }
        assert!(prompt_grad_step(&mut st, &[f64::NAN; 1344], 1.0).is_err());
    }

    #[test]
    fn replace_mode_overwrites_support() {
        let spec = PromptSpec::new(PromptTemplate::PatchFixed, 1, [1, 2, 2])
            .unwrap()
            .with_mode(PromptMode::Replace);
        let mut st = init_prompt::<f32>(&spec, 0).unwrap();
        st.set_values(&[7.0]).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = st.apply_at(&x, Placement::default()).unwrap();
        assert_eq!(y.data(), &[7.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let st = init_prompt::<f32>(&padding4(), 0).unwrap();
        assert!(st.apply_at(&Tensor::zeros(vec![1, 3, 16, 16]), Placement::default()).is_err());
    }

    #[test]
    fn prompt_checkpoint_round_trip() {
        let spec = PromptSpec::new(PromptTemplate::PatchRandom, 2, [3, 8, 8]).unwrap();
        let mut st = init_prompt::<f32>(&spec, 5).unwrap();
        let vals: Vec<f32> = (0..12).map(|i| i as f32 / 4.0).collect();
        st.set_values(&vals).unwrap();
        let mut buf = Vec::new();
        write_prompt(&mut buf, &st).unwrap();
        assert_eq!(buf.len(), 8 + 2 + 20 + 8 + 12 * 4);
        let back: PromptState<f32> = read_prompt(&buf[..]).unwrap();
        assert_eq!(back, st);
    }
}
