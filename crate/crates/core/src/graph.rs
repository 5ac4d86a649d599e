//! Declarative layer graphs used for parameter instantiation and cost accounting.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Causality, ParamStore, Tensor};

/// Activation shape flowing between nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// One spatial frame `[C, H, W]`.
    Frame { channels: usize, height: usize, width: usize },
    /// One feature vector per frame.
    Vector { features: usize },
    /// A `[C, T]` temporal feature map.
    Sequence { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_height: usize,
        in_width: usize,
        bias: bool,
    },
    BatchNorm2d {
        name: String,
        channels: usize,
        height: usize,
        width: usize,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    /// Temporal convolution; `kernel == 1` is a pointwise projection.
    Conv1d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        causality: Causality,
    },
    /// Adds the activation `skip` nodes back (the graph input when that
    /// reaches before the first node) to the incoming activation.
    ResidualAdd { skip: usize },
    Softmax,
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv2d { name, .. }
            | Layer::BatchNorm2d { name, .. }
            | Layer::Linear { name, .. }
            | Layer::Conv1d { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Trainable tensors of this layer as `(name, shape, fan_in)`.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self {
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let mut v = vec![(
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    fan_in,
                )];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*out_channels], fan_in));
                }
                v
            }
            Layer::BatchNorm2d { name, channels, .. } => vec![
                (format!("{name}.weight"), vec![*channels], 1),
                (format!("{name}.bias"), vec![*channels], 1),
            ],
            Layer::Linear {
                name,
                in_features,
                out_features,
            } => vec![
                (format!("{name}.weight"), vec![*out_features, *in_features], *in_features),
                (format!("{name}.bias"), vec![*out_features], *in_features),
            ],
            Layer::Conv1d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let shape = if *kernel == 1 {
                    vec![*out_channels, *in_channels]
                } else {
                    vec![*out_channels, *in_channels, *kernel]
                };
                vec![
                    (format!("{name}.weight"), shape, in_channels * kernel),
                    (format!("{name}.bias"), vec![*out_channels], in_channels * kernel),
                ]
            }
            Layer::Relu | Layer::GlobalAvgPool | Layer::ResidualAdd { .. } | Layer::Softmax => vec![],
        }
    }

    /// Parameter count of this layer.
    pub fn params(&self) -> u64 {
        self.param_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// FLOPs (one per weight multiply, one per bias add) for a sequence of `steps` frames.
    ///
    /// Spatial layers run once (one new frame), temporal layers run over every step.
    pub fn flops(&self, steps: usize) -> u64 {
        match self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                in_height,
                in_width,
                bias,
                ..
            } => {
                let positions = in_height.div_ceil(*stride) * in_width.div_ceil(*stride);
                let per_pos = in_channels * out_channels * kernel * kernel + if *bias { *out_channels } else { 0 };
                (per_pos * positions) as u64
            }
            Layer::BatchNorm2d {
                channels,
                height,
                width,
                ..
            } => (2 * channels * height * width) as u64,
            Layer::Linear { .. } => self.params(),
            Layer::Conv1d { .. } => self.params() * steps as u64,
            Layer::Relu | Layer::GlobalAvgPool | Layer::ResidualAdd { .. } | Layer::Softmax => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub layer: Layer,
    /// How many nodes back the input comes from; `None` means the preceding
    /// node. Reaching before the first node selects the graph input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
}

/// Ordered list of layer descriptors with explicit branch sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub input: Shape,
    pub nodes: Vec<Node>,
}

/// Parameter and FLOP totals of a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub steps: usize,
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "params={} ({:.2}M) flops={} ({:.2}M) steps={}",
            self.params,
            self.params as f64 / 1e6,
            self.flops,
            self.flops as f64 / 1e6,
            self.steps
        )
    }
}

impl LayerGraph {
    pub fn new(input: Shape) -> Self {
        LayerGraph { input, nodes: Vec::new() }
    }

    /// Appends a node fed by the previous node and returns its index.
    pub fn push(&mut self, layer: Layer) -> usize {
        self.nodes.push(Node { layer, skip: None });
        self.nodes.len() - 1
    }

    /// Appends a node fed by the activation `skip` nodes back.
    pub fn push_skip(&mut self, skip: usize, layer: Layer) -> usize {
        self.nodes.push(Node { layer, skip: Some(skip) });
        self.nodes.len() - 1
    }

    pub fn extend(&mut self, layers: impl IntoIterator<Item = Layer>) {
        for l in layers {
            self.push(l);
        }
    }

    /// Appends the nodes of a fragment whose input is this graph's current output.
    pub fn append(&mut self, fragment: &LayerGraph) {
        self.nodes.extend(fragment.nodes.iter().cloned());
    }

    /// Drops every residual connection (used to show they carry no cost).
    pub fn without_residuals(&self) -> LayerGraph {
        LayerGraph {
            input: self.input,
            nodes: self
                .nodes
                .iter()
                .filter(|n| !matches!(n.layer, Layer::ResidualAdd { .. }))
                .cloned()
                .collect(),
        }
    }

    /// Output shape of every node; fails when shapes do not chain.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut out: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        let lookup = |out: &[Shape], i: usize, skip: usize| -> Result<Shape> {
            match skip {
                0 => Err(Error::Config(format!("node {i} cannot read its own output"))),
                s if s == i + 1 => Ok(self.input),
                s if s > i + 1 => Err(Error::Config(format!("node {i} reads {s} nodes back"))),
                s => Ok(out[i - s]),
            }
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let incoming = lookup(&out, i, node.skip.unwrap_or(1))?;
            let err = |msg: String| Error::Shape(format!("node {i}: {msg}"));
            let shape = match &node.layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    stride,
                    in_height,
                    in_width,
                    ..
                } => {
                    let want = Shape::Frame {
                        channels: *in_channels,
                        height: *in_height,
                        width: *in_width,
                    };
                    if incoming != want {
                        return Err(err(format!("conv2d expects {want:?}, got {incoming:?}")));
                    }
                    Shape::Frame {
                        channels: *out_channels,
                        height: in_height.div_ceil(*stride),
                        width: in_width.div_ceil(*stride),
                    }
                }
                Layer::BatchNorm2d {
                    channels,
                    height,
                    width,
                    ..
                } => {
                    let want = Shape::Frame {
                        channels: *channels,
                        height: *height,
                        width: *width,
                    };
                    if incoming != want {
                        return Err(err(format!("batch norm expects {want:?}, got {incoming:?}")));
                    }
                    incoming
                }
                Layer::Relu | Layer::Softmax => incoming,
                Layer::GlobalAvgPool => match incoming {
                    Shape::Frame { channels, .. } => Shape::Vector { features: channels },
                    other => return Err(err(format!("pooling needs a frame, got {other:?}"))),
                },
                Layer::Linear {
                    in_features,
                    out_features,
                    ..
                } => match incoming {
                    Shape::Vector { features } if features == *in_features => Shape::Vector {
                        features: *out_features,
                    },
                    other => return Err(err(format!("linear expects {in_features} features, got {other:?}"))),
                },
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    dilation,
                    kernel,
                    ..
                } => {
                    if *dilation == 0 || kernel % 2 == 0 {
                        return Err(err("conv1d needs dilation >= 1 and an odd kernel".into()));
                    }
                    match incoming {
                        Shape::Vector { features: c } | Shape::Sequence { channels: c } if c == *in_channels => {
                            Shape::Sequence {
                                channels: *out_channels,
                            }
                        }
                        other => {
                            return Err(err(format!("conv1d expects {in_channels} channels, got {other:?}")));
                        }
                    }
                }
                Layer::ResidualAdd { skip } => {
                    let other = lookup(&out, i, *skip)?;
                    if other != incoming {
                        return Err(err(format!("residual add of {other:?} and {incoming:?}")));
                    }
                    incoming
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input))
    }

    /// Exact parameter count and FLOPs for processing `steps` temporal positions.
    pub fn count(&self, steps: usize) -> CostReport {
        CostReport {
            params: self.nodes.iter().map(|n| n.layer.params()).sum(),
            flops: self.nodes.iter().map(|n| n.layer.flops(steps)).sum(),
            steps,
        }
    }

    /// Parses a graph from its JSON form; unknown layer kinds are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("layer graph: {e}")))
    }

    /// Instantiates every trainable tensor named by the graph.
    ///
    /// Weights are He-uniform (`±sqrt(6/fan_in)`), biases and batch-norm shifts zero,
    /// batch-norm scales one.
    /// He-uniform weights and zero biases. The last layer of every residual
    /// branch is shrunk by `1/sqrt(branches)` so the stack starts near identity,
    /// and the final (linear) layer uses the LeCun bound.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore<f32>> {
        self.shapes()?;
        let branches = self
            .nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::ResidualAdd { .. }))
            .count();
        let head = self.nodes.iter().rposition(|n| !n.layer.param_specs().is_empty());
        let mut store = ParamStore::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let is_bn = matches!(node.layer, Layer::BatchNorm2d { .. });
            let closes_branch = matches!(
                self.nodes.get(i + 1).map(|n| &n.layer),
                Some(Layer::ResidualAdd { .. })
            );
            for (name, shape, fan_in) in node.layer.param_specs() {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; len]
                } else if is_bn {
                    vec![1.0; len]
                } else {
                    let gain = if Some(i) == head { 3.0 } else { 6.0 };
                    let mut bound = (gain / fan_in as f64).sqrt();
                    if closes_branch {
                        bound /= (branches as f64).sqrt();
                    }
                    let bound = bound as f32;
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..len).map(|_| dist.sample(rng)).collect()
                };
                store.insert(name, Tensor::from_vec(&shape, data)?)?;
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LayerGraph {
        let mut g = LayerGraph::new(Shape::Sequence { channels: 4 });
        g.push(Layer::Conv1d {
            name: "a".into(),
            in_channels: 4,
            out_channels: 4,
            kernel: 3,
            dilation: 2,
            causality: Causality::Causal,
        });
        g.push(Layer::Relu);
        g.push(Layer::ResidualAdd { skip: 3 });
        g
    }

    #[test]
    fn counts_and_shapes() {
        let g = tiny();
        assert_eq!(g.output_shape().unwrap(), Shape::Sequence { channels: 4 });
        let c = g.count(10);
        assert_eq!(c.params, 4 * 4 * 3 + 4);
        assert_eq!(c.flops, c.params * 10);
        assert_eq!(LayerGraph::new(Shape::Vector { features: 3 }).count(48), CostReport {
            params: 0,
            flops: 0,
            steps: 48
        });
    }

    #[test]
    fn json_round_trip_and_unknown_kind() {
        let g = tiny();
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(LayerGraph::from_json(&text).unwrap(), g);
        let bad = r#"{"input":{"type":"vector","features":2},"nodes":[{"layer":{"kind":"lstm"}}]}"#;
        assert!(matches!(LayerGraph::from_json(bad), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = LayerGraph::new(Shape::Sequence { channels: 3 });
        g.push(Layer::Conv1d {
            name: "x".into(),
            in_channels: 4,
            out_channels: 4,
            kernel: 1,
            dilation: 1,
            causality: Causality::NonCausal,
        });
        assert!(matches!(g.shapes(), Err(Error::Shape(_))));
    }

    #[test]
    fn init_matches_count() {
        let g = tiny();
        let store = g.init_params(&mut rand::rng()).unwrap();
        assert_eq!(store.num_values() as u64, g.count(1).params);
    }
}
