//! Architecture descriptors and their text form.
//!
//! A descriptor is one layer per line, preceded by the input shape:
//!
//! ```text
//! input 1x28x28
//! conv3x3 16 relu
//! maxpool2x2
//! flatten
//! dense 2704 128 relu
//! softmax 10
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
}

/// Shape of one sample flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Flat(usize),
    Volume {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Volume {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Flat(n) => write!(f, "{n}"),
            Shape::Volume {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// 3x3 valid convolution, stride 1, followed by relu.
    Conv {
        filters: usize,
    },
    /// 2x2 max pooling, stride 2, odd edges dropped.
    MaxPool,
    Flatten,
    /// Affine map onto `classes` logits followed by softmax.
    SoftmaxOutput {
        classes: usize,
    },
}

impl LayerSpec {
    fn output_shape(&self, input: Shape) -> Result<Shape, NnError> {
        let mismatch = |what: &str| {
            Err(NnError::Architecture(format!(
                "{what} cannot take input {input}"
            )))
        };
        match (*self, input) {
            (
                LayerSpec::Dense {
                    inputs, outputs, ..
                },
                Shape::Flat(n),
            ) => {
                if inputs != n {
                    return Err(NnError::Architecture(format!(
                        "dense layer declares {inputs} inputs but receives {n}"
                    )));
                }
                if outputs == 0 {
                    return mismatch("dense layer with zero outputs");
                }
                Ok(Shape::Flat(outputs))
            }
            (LayerSpec::Dense { .. }, _) => mismatch("dense layer"),
            (LayerSpec::Conv { filters }, Shape::Volume { height, width, .. })
                if height >= 3 && width >= 3 && filters > 0 =>
            {
                Ok(Shape::Volume {
                    channels: filters,
                    height: height - 2,
                    width: width - 2,
                })
            }
            (LayerSpec::Conv { .. }, _) => mismatch("conv3x3 layer"),
            (
                LayerSpec::MaxPool,
                Shape::Volume {
                    channels,
                    height,
                    width,
                },
            ) if height >= 2 && width >= 2 => Ok(Shape::Volume {
                channels,
                height: height / 2,
                width: width / 2,
            }),
            (LayerSpec::MaxPool, _) => mismatch("maxpool2x2 layer"),
            (LayerSpec::Flatten, Shape::Volume { .. }) => Ok(Shape::Flat(input.len())),
            (LayerSpec::Flatten, _) => mismatch("flatten"),
            (LayerSpec::SoftmaxOutput { classes }, Shape::Flat(_)) if classes >= 2 => {
                Ok(Shape::Flat(classes))
            }
            (LayerSpec::SoftmaxOutput { .. }, _) => mismatch("softmax output (needs >= 2 classes)"),
        }
    }

    /// Weight and bias shapes, if the layer has parameters.
    pub(crate) fn param_shapes(&self, input: Shape) -> Option<[Vec<usize>; 2]> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => Some([vec![outputs, inputs], vec![outputs]]),
            LayerSpec::Conv { filters } => match input {
                Shape::Volume { channels, .. } => {
                    Some([vec![filters, channels, 3, 3], vec![filters]])
                }
                Shape::Flat(_) => None,
            },
            LayerSpec::SoftmaxOutput { classes } => {
                Some([vec![classes, input.len()], vec![classes]])
            }
            LayerSpec::MaxPool | LayerSpec::Flatten => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } => {
                write!(f, "dense {inputs} {outputs}")?;
                if activation == Activation::Relu {
                    write!(f, " relu")?;
                }
                Ok(())
            }
            LayerSpec::Conv { filters } => write!(f, "conv3x3 {filters} relu"),
            LayerSpec::MaxPool => write!(f, "maxpool2x2"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::SoftmaxOutput { classes } => write!(f, "softmax {classes}"),
        }
    }
}

/// Validated layer stack. Construction checks that shapes compose and that
/// exactly one softmax output layer closes the stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    input: Shape,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
}

impl Architecture {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        if input.is_empty() {
            return Err(NnError::Architecture("empty input shape".into()));
        }
        let softmax_count = layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::SoftmaxOutput { .. }))
            .count();
        if softmax_count != 1 || !matches!(layers.last(), Some(LayerSpec::SoftmaxOutput { .. })) {
            return Err(NnError::Architecture(
                "exactly one softmax output layer is required and it must be last".into(),
            ));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input);
        for layer in &layers {
            let next = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(Self {
            input,
            layers,
            shapes,
        })
    }

    /// conv(16) → pool → conv(32) → pool → flatten → dense(128) → softmax(10)
    /// over 28x28 grayscale input.
    pub fn mnist_conv() -> Self {
        Self::new(
            Shape::Volume {
                channels: 1,
                height: 28,
                width: 28,
            },
            vec![
                LayerSpec::Conv { filters: 16 },
                LayerSpec::MaxPool,
                LayerSpec::Conv { filters: 32 },
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 800,
                    outputs: 128,
                    activation: Activation::Relu,
                },
                LayerSpec::SoftmaxOutput { classes: 10 },
            ],
        )
        .expect("static architecture")
    }

    /// 784 → 256 → 128 → softmax(10).
    pub fn mnist_dense() -> Self {
        Self::new(
            Shape::Volume {
                channels: 1,
                height: 28,
                width: 28,
            },
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 784,
                    outputs: 256,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    inputs: 256,
                    outputs: 128,
                    activation: Activation::Relu,
                },
                LayerSpec::SoftmaxOutput { classes: 10 },
            ],
        )
        .expect("static architecture")
    }

    /// Dense relu stack `inputs → hidden[0] → … → softmax(classes)`.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<Self, NnError> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
                activation: Activation::Relu,
            });
            width = h;
        }
        layers.push(LayerSpec::SoftmaxOutput { classes });
        Self::new(Shape::Flat(inputs), layers)
    }

    pub fn input(&self) -> Shape {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Sample shape before layer `i` (`i == layers().len()` gives the output).
    pub fn shape_before(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxOutput { classes }) => *classes,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Width of the activation vector feeding the softmax output layer.
    pub fn feature_len(&self) -> usize {
        self.shapes[self.layers.len() - 1].len()
    }

    /// Parameter tensor shapes in declaration order (weight, bias per layer).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .zip(&self.shapes)
            .filter_map(|(layer, &input)| layer.param_shapes(input))
            .flat_map(|pair| pair.into_iter())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input {}", self.input)?;
        for layer in &self.layers {
            write!(f, "\n{layer}")?;
        }
        Ok(())
    }
}

fn parse_usize(token: Option<&str>, line: &str) -> Result<usize, NnError> {
    token
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| NnError::Architecture(format!("bad layer line `{line}`")))
}

impl FromStr for Architecture {
    type Err = NnError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let first = lines
            .next()
            .ok_or_else(|| NnError::Architecture("empty descriptor".into()))?;
        let dims = first
            .strip_prefix("input ")
            .ok_or_else(|| NnError::Architecture(format!("expected `input …`, got `{first}`")))?;
        let parts: Vec<usize> = dims
            .split('x')
            .map(|d| d.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| NnError::Architecture(format!("bad input shape `{dims}`")))?;
        let input = match parts.as_slice() {
            [n] => Shape::Flat(*n),
            [c, h, w] => Shape::Volume {
                channels: *c,
                height: *h,
                width: *w,
            },
            _ => return Err(NnError::Architecture(format!("bad input shape `{dims}`"))),
        };

        let mut layers = Vec::new();
        for line in lines {
            let mut tokens = line.split_whitespace();
            let layer = match tokens.next() {
                Some("dense") => {
                    let inputs = parse_usize(tokens.next(), line)?;
                    let outputs = parse_usize(tokens.next(), line)?;
                    let activation = match tokens.next() {
                        None => Activation::None,
                        Some("relu") => Activation::Relu,
                        Some(_) => {
                            return Err(NnError::Architecture(format!("bad layer line `{line}`")))
                        }
                    };
                    LayerSpec::Dense {
                        inputs,
                        outputs,
                        activation,
                    }
                }
                Some("conv3x3") => {
                    let filters = parse_usize(tokens.next(), line)?;
                    if tokens.next() != Some("relu") {
                        return Err(NnError::Architecture(format!("bad layer line `{line}`")));
                    }
                    LayerSpec::Conv { filters }
                }
                Some("maxpool2x2") => LayerSpec::MaxPool,
                Some("flatten") => LayerSpec::Flatten,
                Some("softmax") => LayerSpec::SoftmaxOutput {
                    classes: parse_usize(tokens.next(), line)?,
                },
                _ => return Err(NnError::Architecture(format!("unknown layer `{line}`"))),
            };
            if tokens.next().is_some() {
                return Err(NnError::Architecture(format!(
                    "trailing tokens in `{line}`"
                )));
            }
            layers.push(layer);
        }
        Architecture::new(input, layers)
    }
}
