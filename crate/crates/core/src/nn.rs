//! Backbone architectures, canonical parameter flattening, the body/head
//! split used by decoupled baselines, and the parameter checkpoint format.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Layer, Network, NetworkBuilder, ParameterVector};
use crate::rng;
use crate::scalar::Scalar;

/// Layer widths of the two-conv, three-fc classifier. The defaults are the
/// reference widths; narrower variants exist for fast verification.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnWidths {
    pub conv_channels: usize,
    pub kernel: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl Default for CnnWidths {
    fn default() -> Self {
        Self {
            conv_channels: 64,
            kernel: 5,
            fc1: 394,
            fc2: 192,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// conv → relu → pool → conv → relu → pool → fc → relu → fc → relu → fc
    CnnPaper(CnnWidths),
    /// fc(hidden) → relu → fc; `hidden == 0` gives a single linear layer.
    MlpTiny { hidden: usize },
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::CnnPaper(_) => "cnn-paper",
            Architecture::MlpTiny { .. } => "mlp-tiny",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `(C, H, W)`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn cnn_paper(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            architecture: Architecture::CnnPaper(CnnWidths::default()),
            input_shape,
            num_classes,
        }
    }

    pub fn mlp_tiny(input_shape: [usize; 3], num_classes: usize, hidden: usize) -> Self {
        Self {
            architecture: Architecture::MlpTiny { hidden },
            input_shape,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!(
                "input shape {:?} must be positive",
                self.input_shape
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidModel(format!(
                "num_classes {} must be at least 2",
                self.num_classes
            )));
        }
        if let Architecture::CnnPaper(w) = &self.architecture {
            if w.conv_channels == 0 || w.kernel == 0 || w.fc1 == 0 || w.fc2 == 0 {
                return Err(Error::InvalidModel("cnn widths must be positive".into()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_shape;
        match &self.architecture {
            Architecture::CnnPaper(cw) => write!(
                f,
                "cnn-paper(c{},k{},fc{}-{}):{c}x{h}x{w}:{}",
                cw.conv_channels, cw.kernel, cw.fc1, cw.fc2, self.num_classes
            ),
            Architecture::MlpTiny { hidden } => {
                write!(f, "mlp-tiny(h{hidden}):{c}x{h}x{w}:{}", self.num_classes)
            }
        }
    }
}

/// Builds a network with seeded fan-in-scaled uniform weights
/// (`U(-1/√fan_in, 1/√fan_in)`) and zero biases. The same seed yields the
/// same values in every precision up to rounding.
pub fn build_model<T: Scalar>(spec: &ModelSpec, init_seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let builder = NetworkBuilder::new(&spec.input_shape);
    let builder = match &spec.architecture {
        Architecture::CnnPaper(w) => builder
            .conv2d("conv1", w.conv_channels, w.kernel)?
            .relu()
            .max_pool(2)?
            .conv2d("conv2", w.conv_channels, w.kernel)?
            .relu()
            .max_pool(2)?
            .linear("fc1", w.fc1)
            .relu()
            .linear("fc2", w.fc2)
            .relu()
            .linear("fc3", spec.num_classes),
        Architecture::MlpTiny { hidden: 0 } => builder.linear("fc", spec.num_classes),
        Architecture::MlpTiny { hidden } => builder
            .linear("fc1", *hidden)
            .relu()
            .linear("fc2", spec.num_classes),
    };
    let mut index = 0u64;
    Ok(builder.build(|entry, block: &mut [T]| {
        let is_bias = entry.shape.len() == 1;
        if !is_bias {
            let fan_in: usize = entry.shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut r = rng::stream(init_seed, "init", &[index]);
            for v in block.iter_mut() {
                *v = T::from_f64_lossy(r.random_range(-bound..bound));
            }
        }
        index += 1;
    }))
}

pub fn flatten_params<T: Scalar>(net: &Network<T>) -> ParameterVector<T> {
    net.flatten()
}

pub fn load_params<T: Scalar>(net: &mut Network<T>, pv: &ParameterVector<T>) -> Result<()> {
    net.load(pv)
}

/// Partition of the flat parameter vector into a shared body and a private
/// head (the final linear layer). The head is always the tail of the
/// canonical ordering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BodyHeadSplit {
    pub body: Range<usize>,
    pub head: Range<usize>,
}

impl BodyHeadSplit {
    pub fn body_len(&self) -> usize {
        self.body.len()
    }

    pub fn head_len(&self) -> usize {
        self.head.len()
    }
}

pub fn split_body_head<T: Scalar>(net: &Network<T>) -> BodyHeadSplit {
    let total = net.param_count();
    let head_start = net
        .layers()
        .iter()
        .rev()
        .find_map(|l| match *l {
            Layer::Linear { weight, .. } => Some(weight),
            _ => None,
        })
        .unwrap_or(total);
    BodyHeadSplit {
        body: 0..head_start,
        head: head_start..total,
    }
}

const PARAM_MAGIC: &[u8; 8] = b"FLPVEC01";

/// Writes `magic | u32 tag length | tag | u64 count | count × f32`, all
/// little-endian.
pub fn write_checkpoint<T: Scalar>(mut w: impl Write, tag: &str, values: &[T]) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&(tag.len() as u32).to_le_bytes())?;
    w.write_all(tag.as_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(mut r: impl Read) -> Result<(String, Vec<T>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut tag = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut tag)?;
    let tag = String::from_utf8(tag).map_err(|_| Error::Checkpoint("tag is not UTF-8".into()))?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let count = u64::from_le_bytes(len8) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::Checkpoint(format!(
            "header declares {count} values, payload holds {} bytes",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok((tag, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn cnn_parameter_count_is_pinned() {
        // conv1 64·3·25+64, conv2 64·64·25+64, fc1 1600·394+394,
        // fc2 394·192+192, fc3 192·10+10
        let net: Network<f32> = build_model(&ModelSpec::cnn_paper([3, 32, 32], 10), 0).unwrap();
        assert_eq!(net.param_count(), 815_892);
        let split = split_body_head(&net);
        assert_eq!(split.head_len(), 192 * 10 + 10);
        assert_eq!(split.body_len() + split.head_len(), 815_892);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let r = build_model::<f32>(&ModelSpec::cnn_paper([3, 12, 12], 10), 0);
        assert!(matches!(r, Err(Error::InvalidModel(_))));
        assert!(build_model::<f32>(&ModelSpec::mlp_tiny([1, 8, 8], 1, 4), 0).is_err());
        assert!(build_model::<f32>(&ModelSpec::mlp_tiny([0, 8, 8], 4, 4), 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let spec = ModelSpec::mlp_tiny([1, 8, 8], 4, 16);
        let a: Network<f32> = build_model(&spec, 7).unwrap();
        let b: Network<f32> = build_model(&spec, 7).unwrap();
        let c: Network<f32> = build_model(&spec, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for (entry, block) in a.flatten().blocks() {
            if entry.name.ends_with("bias") {
                assert!(block.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_input_gives_output_bias_logits() {
        let spec = ModelSpec::mlp_tiny([1, 8, 8], 4, 16);
        let net: Network<f64> = build_model(&spec, 3).unwrap();
        let logits = net.forward(&Tensor::zeros(vec![2, 1, 8, 8])).unwrap();
        let pv = net.flatten();
        let out_bias = pv.block(pv.layout().entries().len() - 1);
        for row in logits.data().chunks(4) {
            assert_eq!(row, out_bias);
        }
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "mlp", &[1.5f32, -2.0, 0.25]).unwrap();
        assert_eq!(&buf[..8], b"FLPVEC01");
        let (tag, vals): (String, Vec<f32>) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(tag, "mlp");
        assert_eq!(vals, vec![1.5, -2.0, 0.25]);
        assert!(read_checkpoint::<f32>(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint::<f32>(&buf[..]).is_err());
    }
}
