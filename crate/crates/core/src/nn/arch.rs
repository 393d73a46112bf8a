use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One hidden layer of a feed-forward stack. The classifier is described
/// separately by [`ClassifierSpec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub classes: usize,
    /// Must stay false: the classifier is shared by all subnetworks.
    pub maskable: bool,
}

/// Network architecture: input sample shape, hidden layers, classifier.
///
/// Text form, used by config files and checkpoints:
/// `input=1x28x28; conv:8:3:1:1; bn; relu; flatten; dense:64; bn; relu; classes=10`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classifier: ClassifierSpec,
}

impl ArchSpec {
    /// Dense → batchnorm → ReLU for every hidden width.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &units in hidden {
            layers.push(LayerSpec::Dense { units });
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::Relu);
        }
        ArchSpec {
            input: vec![input_dim],
            layers,
            classifier: ClassifierSpec {
                classes,
                maskable: false,
            },
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes
    }

    /// Resolve shapes into an execution plan.
    pub fn plan(&self) -> Result<Plan> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::invalid(format!("input shape {:?} is empty", self.input)));
        }
        if self.classifier.classes < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        let mut shape = self.input.clone();
        let mut stages = Vec::new();
        let (mut maskable, mut dense, mut bn) = (0, 0, 0);
        for (pos, layer) in self.layers.iter().enumerate() {
            let features: usize = shape.iter().product();
            match *layer {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(Error::invalid(format!("layer {pos}: dense layer with 0 units")));
                    }
                    stages.push(Stage::Dense {
                        param: maskable,
                        bias: dense,
                        inputs: features,
                        outputs: units,
                    });
                    maskable += 1;
                    dense += 1;
                    shape = vec![units];
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::invalid(format!(
                            "layer {pos}: convolution needs a CxHxW input, got {shape:?}"
                        )));
                    }
                    if channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::invalid(format!("layer {pos}: degenerate convolution")));
                    }
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::invalid(format!(
                            "layer {pos}: kernel {kernel} larger than padded input {h}x{w}"
                        )));
                    }
                    let geom = ConvGeometry {
                        in_channels: c,
                        height: h,
                        width: w,
                        out_channels: channels,
                        kernel,
                        stride,
                        padding,
                        out_height: (h + 2 * padding - kernel) / stride + 1,
                        out_width: (w + 2 * padding - kernel) / stride + 1,
                    };
                    shape = vec![channels, geom.out_height, geom.out_width];
                    stages.push(Stage::Conv { param: maskable, geom });
                    maskable += 1;
                }
                LayerSpec::BatchNorm => {
                    let (channels, spatial) = if shape.len() == 3 {
                        (shape[0], shape[1] * shape[2])
                    } else {
                        (features, 1)
                    };
                    stages.push(Stage::BatchNorm {
                        index: bn,
                        channels,
                        spatial,
                    });
                    bn += 1;
                }
                LayerSpec::Relu => stages.push(Stage::Relu),
                LayerSpec::Flatten => {
                    shape = vec![features];
                    stages.push(Stage::Flatten);
                }
            }
        }
        Ok(Plan {
            stages,
            head_inputs: shape.iter().product(),
            classes: self.classifier.classes,
            maskable_layers: maskable,
            dense_layers: dense,
            batchnorm_layers: bn,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_positions()
    }
}

/// Resolved layer with indices into the store's parameter lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Dense {
        param: usize,
        bias: usize,
        inputs: usize,
        outputs: usize,
    },
    Conv {
        param: usize,
        geom: ConvGeometry,
    },
    BatchNorm {
        index: usize,
        channels: usize,
        spatial: usize,
    },
    Relu,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub stages: Vec<Stage>,
    pub head_inputs: usize,
    pub classes: usize,
    pub maskable_layers: usize,
    pub dense_layers: usize,
    pub batchnorm_layers: usize,
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input.iter().map(|d| d.to_string()).collect();
        write!(f, "input={}", dims.join("x"))?;
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { units } => write!(f, "; dense:{units}")?,
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => write!(f, "; conv:{channels}:{kernel}:{stride}:{padding}")?,
                LayerSpec::BatchNorm => write!(f, "; bn")?,
                LayerSpec::Relu => write!(f, "; relu")?,
                LayerSpec::Flatten => write!(f, "; flatten")?,
            }
        }
        write!(f, "; classes={}", self.classifier.classes)?;
        if self.classifier.maskable {
            write!(f, ":maskable")?;
        }
        Ok(())
    }
}

fn parse_num(token: &str, what: &str) -> Result<usize> {
    token
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("arch: bad {what} `{token}`")))
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut input = None;
        let mut classifier = None;
        let mut layers = Vec::new();
        for token in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            if let Some(dims) = token.strip_prefix("input=") {
                input = Some(
                    dims.split('x')
                        .map(|d| parse_num(d, "input dimension"))
                        .collect::<Result<Vec<_>>>()?,
                );
            } else if let Some(rest) = token.strip_prefix("classes=") {
                let (classes, maskable) = match rest.split_once(':') {
                    Some((c, "maskable")) => (c, true),
                    Some((_, other)) => {
                        return Err(Error::Config(format!("arch: unknown classifier flag `{other}`")))
                    }
                    None => (rest, false),
                };
                classifier = Some(ClassifierSpec {
                    classes: parse_num(classes, "class count")?,
                    maskable,
                });
            } else {
                let parts: Vec<&str> = token.split(':').collect();
                let layer = match parts.as_slice() {
                    ["dense", units] => LayerSpec::Dense {
                        units: parse_num(units, "dense width")?,
                    },
                    ["conv", c, k, s, p] => LayerSpec::Conv {
                        channels: parse_num(c, "conv channels")?,
                        kernel: parse_num(k, "conv kernel")?,
                        stride: parse_num(s, "conv stride")?,
                        padding: parse_num(p, "conv padding")?,
                    },
                    ["bn"] => LayerSpec::BatchNorm,
                    ["relu"] => LayerSpec::Relu,
                    ["flatten"] => LayerSpec::Flatten,
                    _ => return Err(Error::Config(format!("arch: unknown layer `{token}`"))),
                };
                layers.push(layer);
            }
        }
        Ok(ArchSpec {
            input: input.ok_or_else(|| Error::Config("arch: missing `input=`".into()))?,
            layers,
            classifier: classifier.ok_or_else(|| Error::Config("arch: missing `classes=`".into()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_form_round_trips() {
        let text = "input=1x8x8; conv:4:3:1:1; bn; relu; flatten; dense:16; bn; relu; classes=3";
        let arch: ArchSpec = text.parse().unwrap();
        assert_eq!(arch.to_string(), text);
        let plan = arch.plan().unwrap();
        assert_eq!(plan.maskable_layers, 2);
        assert_eq!(plan.batchnorm_layers, 2);
        assert_eq!(plan.head_inputs, 16);
    }

    #[test]
    fn conv_geometry() {
        let arch: ArchSpec = "input=3x7x7; conv:2:3:2:0; classes=2".parse().unwrap();
        match &arch.plan().unwrap().stages[0] {
            Stage::Conv { geom, .. } => {
                assert_eq!((geom.out_height, geom.out_width), (3, 3));
                assert_eq!(geom.patch_len(), 27);
            }
            other => panic!("unexpected stage {other:?}"),
        }
    }

    #[test]
    fn conv_needs_image_input() {
        let arch: ArchSpec = "input=10; conv:2:3:1:0; classes=2".parse().unwrap();
        assert!(arch.plan().is_err());
    }
}
