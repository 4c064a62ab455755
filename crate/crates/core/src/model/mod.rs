//! Classifier architectures, parameters, checkpoints and the uniform pool of
//! past classifiers.

mod checkpoint;
mod params;
mod pool;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub(crate) use checkpoint::{read_f32s, read_u32, truncated, write_f32s, write_u32};
pub use params::{
    build_model, forward, forward_with, param_leaves, ForwardPass, ParamEntry, ParamKind, Params,
};
pub use pool::{
    argmax_lowest, pool_expected_loss, pool_predict, Classifier, ClassifierPool,
    ClassifierSnapshot, SnapshotSource,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Padding;

/// Batch-norm variance stabilizer.
pub const BN_STABILIZER: f64 = 1e-5;
/// Weight of the previous value in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Whether batch norm uses batch statistics (and reports them) or the
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm,
    Relu,
    /// Fully connected; flattens a `[B, C, H, W]` input first.
    Dense { outputs: usize },
}

/// Shape of the activation flowing between layers (batch axis excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

/// Architecture: input image shape, class count and the layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelConfig {
    /// Desk-scale network: two strided 3x3 conv blocks (conv, batch norm,
    /// ReLU) and a dense classifier.
    pub fn tiny(channels: usize, side: usize, classes: usize) -> Self {
        let conv = |filters| Layer::Conv {
            filters,
            kernel: 3,
            stride: 2,
            padding: Padding::Same,
        };
        Self {
            input: [channels, side, side],
            classes,
            layers: vec![
                conv(8),
                Layer::BatchNorm,
                Layer::Relu,
                conv(16),
                Layer::BatchNorm,
                Layer::Relu,
                Layer::Dense { outputs: classes },
            ],
        }
    }

    /// VGG16-style stack adapted to 32x32 RGB input, strided convolutions in
    /// place of max pooling, batch norm between each convolution and ReLU.
    pub fn paper_vgg(classes: usize) -> Self {
        let blocks: [(usize, usize); 11] = [
            (64, 1),
            (64, 1),
            (128, 2),
            (128, 1),
            (128, 1),
            (256, 2),
            (256, 1),
            (256, 1),
            (512, 2),
            (512, 1),
            (512, 1),
        ];
        let mut layers = Vec::new();
        for (filters, stride) in blocks {
            layers.push(Layer::Conv {
                filters,
                kernel: 3,
                stride,
                padding: Padding::Same,
            });
            layers.push(Layer::BatchNorm);
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { outputs: classes });
        Self {
            input: [3, 32, 32],
            classes,
            layers,
        }
    }

    /// Resolves a built-in architecture by name (`tiny` or `paper-vgg`).
    pub fn named(name: &str, channels: usize, side: usize, classes: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(channels, side, classes)),
            "paper-vgg" => {
                if channels != 3 || side != 32 {
                    return Err(Error::ModelConfig(format!(
                        "paper-vgg expects 3x32x32 input, data is {channels}x{side}x{side}"
                    )));
                }
                Ok(Self::paper_vgg(classes))
            }
            other => Err(Error::ModelConfig(format!("unknown architecture `{other}`"))),
        }
    }

    /// Checks that consecutive layers conform and that the network ends in
    /// `classes` logits. Returns the activation shape after every layer.
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes < 2 {
            return Err(Error::ModelConfig(format!(
                "input {:?} with {} classes",
                self.input, self.classes
            )));
        }
        let mut cur = ActShape::Image { c, h, w };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (
                    Layer::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                    },
                    ActShape::Image { h, w, .. },
                ) => {
                    let pad = padding.amount(kernel);
                    if filters == 0 || kernel == 0 || stride == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad {
                        return Err(Error::ModelConfig(format!("layer {i}: bad conv {layer:?}")));
                    }
                    ActShape::Image {
                        c: filters,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    }
                }
                (Layer::BatchNorm, s @ ActShape::Image { .. }) => s,
                (Layer::Relu, s) => s,
                (Layer::Dense { outputs }, _) if outputs > 0 => ActShape::Flat(outputs),
                (layer, shape) => {
                    return Err(Error::ModelConfig(format!(
                        "layer {i}: {layer:?} cannot follow activation {shape:?}"
                    )))
                }
            };
            shapes.push(cur);
        }
        if cur != ActShape::Flat(self.classes) {
            return Err(Error::ModelConfig(format!(
                "network ends in {cur:?}, expected {} logits",
                self.classes
            )));
        }
        Ok(shapes)
    }
}

/// Compact single-line form, e.g.
/// `input=3x16x16;classes=10;layers=conv(8,3,2,same),bn,relu,dense(10)`.
impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        write!(f, "input={c}x{h}x{w};classes={};layers=", self.classes)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match layer {
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let pad = match padding {
                        Padding::Same => "same",
                        Padding::Valid => "valid",
                    };
                    write!(f, "conv({filters},{kernel},{stride},{pad})")?;
                }
                Layer::BatchNorm => f.write_str("bn")?,
                Layer::Relu => f.write_str("relu")?,
                Layer::Dense { outputs } => write!(f, "dense({outputs})")?,
            }
        }
        Ok(())
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::ModelConfig(format!("cannot parse {what} in `{s}`"));
        let mut input = None;
        let mut classes = None;
        let mut layers = None;
        for part in s.split(';') {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("section"))?;
            match key {
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("input")))
                        .collect::<Result<_>>()?;
                    let dims: [usize; 3] = dims.try_into().map_err(|_| bad("input"))?;
                    input = Some(dims);
                }
                "classes" => classes = Some(value.parse().map_err(|_| bad("classes"))?),
                "layers" => {
                    let mut list = Vec::new();
                    // Split on commas outside parentheses.
                    let mut depth = 0;
                    let mut start = 0;
                    let bytes = value.as_bytes();
                    for i in 0..=bytes.len() {
                        let at_end = i == bytes.len();
                        if !at_end {
                            match bytes[i] {
                                b'(' => depth += 1,
                                b')' => depth -= 1,
                                _ => {}
                            }
                        }
                        if at_end || (bytes[i] == b',' && depth == 0) {
                            list.push(parse_layer(&value[start..i]).ok_or_else(|| bad("layer"))?);
                            start = i + 1;
                        }
                    }
                    layers = Some(list);
                }
                _ => return Err(bad("key")),
            }
        }
        let config = ModelConfig {
            input: input.ok_or_else(|| bad("input"))?,
            classes: classes.ok_or_else(|| bad("classes"))?,
            layers: layers.ok_or_else(|| bad("layers"))?,
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_layer(s: &str) -> Option<Layer> {
    match s {
        "bn" => return Some(Layer::BatchNorm),
        "relu" => return Some(Layer::Relu),
        _ => {}
    }
    let (name, rest) = s.split_once('(')?;
    let args: Vec<&str> = rest.strip_suffix(')')?.split(',').collect();
    match (name, args.as_slice()) {
        ("dense", [n]) => Some(Layer::Dense {
            outputs: n.parse().ok()?,
        }),
        ("conv", [f, k, st, pad]) => Some(Layer::Conv {
            filters: f.parse().ok()?,
            kernel: k.parse().ok()?,
            stride: st.parse().ok()?,
            padding: match *pad {
                "same" => Padding::Same,
                "valid" => Padding::Valid,
                _ => return None,
            },
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_configs_validate() {
        let tiny = ModelConfig::tiny(3, 16, 10);
        let shapes = tiny.validate().unwrap();
        assert_eq!(shapes[0], ActShape::Image { c: 8, h: 8, w: 8 });
        assert_eq!(shapes[3], ActShape::Image { c: 16, h: 4, w: 4 });
        let vgg = ModelConfig::paper_vgg(10);
        let shapes = vgg.validate().unwrap();
        assert_eq!(shapes[shapes.len() - 2], ActShape::Image { c: 512, h: 4, w: 4 });
        assert_eq!(vgg.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count(), 11);
    }

    #[test]
    fn text_form_round_trips() {
        for cfg in [ModelConfig::tiny(3, 8, 4), ModelConfig::paper_vgg(100)] {
            let text = cfg.to_string();
            assert_eq!(text.parse::<ModelConfig>().unwrap(), cfg);
        }
    }

    #[test]
    fn malformed_configs_are_rejected() {
        let mut cfg = ModelConfig::tiny(3, 8, 4);
        cfg.layers.pop();
        assert!(matches!(cfg.validate(), Err(Error::ModelConfig(_))));
        let mut cfg = ModelConfig::tiny(3, 8, 4);
        cfg.layers.push(Layer::BatchNorm);
        assert!(cfg.validate().is_err());
        assert!("input=3x8x8;classes=4;layers=pool(2)".parse::<ModelConfig>().is_err());
        assert!(ModelConfig::named("resnet50", 3, 32, 10).is_err());
    }
}
