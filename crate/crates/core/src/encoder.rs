//! Per-frame spatial encoder and the static ResNet18 descriptor used for accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerGraph, Shape};
use crate::numerics::{
    conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward, resize_bilinear,
    ParamStore, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
}

/// Plain conv/ReLU stack ending in global average pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub kernel: usize,
    pub stages: Vec<ConvStage>,
    /// Append normalized x/y coordinate planes to every frame, so pooled
    /// embeddings still tell where the hand is.
    #[serde(default)]
    pub coordinates: bool,
    /// Standardize every frame over its own pixels first, making embeddings
    /// blind to the level and gain of whatever normalizer fed them.
    #[serde(default)]
    pub standardize_frames: bool,
}

impl Default for EncoderConfig {
    /// conv3x3(16,s1) - conv3x3(32,s2) - conv3x3(64,s2) on 32x32 input, C = 64.
    fn default() -> Self {
        EncoderConfig {
            input_height: 32,
            input_width: 32,
            kernel: 3,
            stages: vec![
                ConvStage { out_channels: 16, stride: 1 },
                ConvStage { out_channels: 32, stride: 2 },
                ConvStage { out_channels: 64, stride: 2 },
            ],
            coordinates: true,
            standardize_frames: true,
        }
    }
}

impl EncoderConfig {
    pub fn embedding_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("encoder kernel must be odd".into()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("encoder input size must be positive".into()));
        }
        for s in &self.stages {
            if !(s.stride == 1 || s.stride == 2) || s.out_channels == 0 {
                return Err(Error::Config(format!("invalid encoder stage {s:?}")));
            }
        }
        Ok(())
    }

    /// Channels seen by the first convolution.
    pub fn input_channels(&self) -> usize {
        if self.coordinates {
            3
        } else {
            1
        }
    }

    pub fn layer_name(i: usize) -> String {
        format!("enc.conv{}", i + 1)
    }

    pub fn graph(&self) -> Result<LayerGraph> {
        self.validate()?;
        let mut g = LayerGraph::new(Shape::Frame {
            channels: self.input_channels(),
            height: self.input_height,
            width: self.input_width,
        });
        self.append_to(&mut g);
        g.shapes()?;
        Ok(g)
    }

    pub(crate) fn append_to(&self, g: &mut LayerGraph) {
        let (mut c, mut h, mut w) = (self.input_channels(), self.input_height, self.input_width);
        for (i, s) in self.stages.iter().enumerate() {
            g.push(Layer::Conv2d {
                name: Self::layer_name(i),
                in_channels: c,
                out_channels: s.out_channels,
                kernel: self.kernel,
                stride: s.stride,
                in_height: h,
                in_width: w,
                bias: true,
            });
            g.push(Layer::Relu);
            c = s.out_channels;
            h = h.div_ceil(s.stride);
            w = w.div_ceil(s.stride);
        }
        g.push(Layer::GlobalAvgPool);
    }

    /// Resizes `[T, h, w]` frames to the encoder input, giving `[T, 1, H, W]`.
    pub fn prepare_frames(&self, frames: &[f32], h: usize, w: usize) -> Result<Tensor<f32>> {
        if h == 0 || w == 0 || frames.len() % (h * w) != 0 || frames.is_empty() {
            return Err(Error::Shape(format!("{} values do not form {h}x{w} frames", frames.len())));
        }
        let t = frames.len() / (h * w);
        let mut data = Vec::with_capacity(t * self.input_height * self.input_width);
        for f in frames.chunks(h * w) {
            data.extend(resize_bilinear(f, h, w, self.input_height, self.input_width));
        }
        Tensor::from_vec(&[t, 1, self.input_height, self.input_width], data)
    }
}

/// `[B, 1, H, W]` to `[B, 3, H, W]`: the frame, then x and y running from -1 to 1.
fn with_coordinates<T: Scalar>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, _, h, w] = *frames.shape() else {
        return Err(Error::Shape(format!("expected [B, 1, H, W], got {:?}", frames.shape())));
    };
    let ramp = |i: usize, n: usize| T::of(if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 });
    let mut data = Vec::with_capacity(b * 3 * h * w);
    for f in frames.data().chunks(h * w) {
        data.extend_from_slice(f);
        data.extend((0..h * w).map(|p| ramp(p % w, w)));
        data.extend((0..h * w).map(|p| ramp(p / w, h)));
    }
    Tensor::from_vec(&[b, 3, h, w], data)
}

fn standardize_frames<T: Scalar>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let px = frames.shape()[2] * frames.shape()[3];
    let n = T::of(px as f64);
    let mut data = frames.data().to_vec();
    for f in data.chunks_mut(px) {
        let mean = f.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = f.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / var.sqrt().max(T::of(1e-6));
        f.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Tensor::from_vec(frames.shape(), data)
}

pub struct EncoderCache<T> {
    inputs: Vec<Tensor<T>>,
    pre_relu: Vec<Tensor<T>>,
}

/// Encodes `[B, 1, H, W]` frames into `[B, C]` embeddings.
pub fn encode_frames<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
    frames: &Tensor<T>,
) -> Result<(Tensor<T>, EncoderCache<T>)> {
    if frames.rank() != 4 || frames.shape()[1..] != [1, cfg.input_height, cfg.input_width] {
        return Err(Error::Shape(format!(
            "encoder expects [B, 1, {}, {}] frames, got {:?}",
            cfg.input_height,
            cfg.input_width,
            frames.shape()
        )));
    }
    if !frames.is_finite() {
        return Err(Error::Numeric("non-finite value in encoder input".into()));
    }
    let mut cache = EncoderCache {
        inputs: Vec::with_capacity(cfg.stages.len()),
        pre_relu: Vec::with_capacity(cfg.stages.len()),
    };
    let standardized;
    let frames = if cfg.standardize_frames {
        standardized = standardize_frames(frames)?;
        &standardized
    } else {
        frames
    };
    let mut x = if cfg.coordinates {
        with_coordinates(frames)?
    } else {
        frames.clone()
    };
    for (i, s) in cfg.stages.iter().enumerate() {
        let name = EncoderConfig::layer_name(i);
        let a = conv2d(
            &x,
            params.get(&format!("{name}.weight"))?,
            params.get(&format!("{name}.bias"))?,
            s.stride,
        )?;
        let next = relu(&a);
        cache.inputs.push(x);
        cache.pre_relu.push(a);
        x = next;
    }
    Ok((global_avg_pool(&x)?, cache))
}

/// Back-propagates `[B, C]` embedding gradients into the encoder parameters.
/// The gradient with respect to the frames is not needed and not computed.
pub fn encoder_backward<T: Scalar>(
    cfg: &EncoderConfig,
    params: &mut ParamStore<T>,
    cache: &EncoderCache<T>,
    grad_embeddings: &Tensor<T>,
) -> Result<()> {
    let last = cache
        .pre_relu
        .last()
        .ok_or_else(|| Error::Shape("empty encoder cache".into()))?;
    let mut g = global_avg_pool_backward(last.shape(), grad_embeddings)?;
    for (i, s) in cfg.stages.iter().enumerate().rev() {
        let name = EncoderConfig::layer_name(i);
        let ga = relu_backward(&cache.pre_relu[i], &g);
        let wname = format!("{name}.weight");
        let grads = conv2d_backward(&cache.inputs[i], params.get(&wname)?, &ga, s.stride, i > 0)?;
        params.accumulate(&wname, &grads.weight)?;
        params.accumulate(&format!("{name}.bias"), &grads.bias)?;
        if let Some(gi) = grads.input {
            g = gi;
        }
    }
    Ok(())
}

/// Embedding of a single normalized `[1, H, W]` frame.
pub fn encode_frame(cfg: &EncoderConfig, params: &ParamStore<f32>, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(frame.shape());
    let batch = frame.clone().reshape(&shape)?;
    let (emb, _) = encode_frames(cfg, params, &batch)?;
    emb.reshape(&[cfg.embedding_dim()])
}

/// CIFAR-style ResNet18 (3x3 stem, four stages of two basic blocks, batch norm,
/// global pooling and a linear head) on 32x32 input.
pub fn resnet18_descriptor_with(in_channels: usize, classes: usize) -> LayerGraph {
    let mut g = LayerGraph::new(Shape::Frame {
        channels: in_channels,
        height: 32,
        width: 32,
    });
    let conv = |name: String, cin, cout, k, stride, hw: usize| Layer::Conv2d {
        name,
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        in_height: hw,
        in_width: hw,
        bias: false,
    };
    let bn = |name: String, c, hw| Layer::BatchNorm2d {
        name,
        channels: c,
        height: hw,
        width: hw,
    };
    g.push(conv("stem.conv".into(), in_channels, 64, 3, 1, 32));
    g.push(bn("stem.bn".into(), 64, 32));
    g.push(Layer::Relu);
    let (mut cin, mut hw) = (64, 32);
    for (stage, (cout, first_stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if block == 0 { first_stride } else { 1 };
            let p = format!("layer{}.{block}", stage + 1);
            let out_hw = hw / stride;
            g.push(conv(format!("{p}.conv1"), cin, cout, 3, stride, hw));
            g.push(bn(format!("{p}.bn1"), cout, out_hw));
            g.push(Layer::Relu);
            g.push(conv(format!("{p}.conv2"), cout, cout, 3, 1, out_hw));
            g.push(bn(format!("{p}.bn2"), cout, out_hw));
            if stride != 1 || cin != cout {
                // projection shortcut reads the block input, six nodes back
                g.push_skip(6, conv(format!("{p}.shortcut.conv"), cin, cout, 1, stride, hw));
                g.push(bn(format!("{p}.shortcut.bn"), cout, out_hw));
                g.push(Layer::ResidualAdd { skip: 3 });
            } else {
                g.push(Layer::ResidualAdd { skip: 6 });
            }
            g.push(Layer::Relu);
            cin = cout;
            hw = out_hw;
        }
    }
    g.push(Layer::GlobalAvgPool);
    g.push(Layer::Linear {
        name: "fc".into(),
        in_features: 512,
        out_features: classes,
    });
    g
}

/// ResNet18 descriptor for single-channel thermal frames with a 10-way head.
pub fn resnet18_descriptor() -> LayerGraph {
    resnet18_descriptor_with(1, 10)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn params(cfg: &EncoderConfig, seed: u64) -> ParamStore<f32> {
        cfg.graph().unwrap().init_params(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_embedding() {
        let cfg = EncoderConfig::default();
        let mut p = params(&cfg, 1);
        for (_, prm) in p.iter_mut() {
            prm.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let e = encode_frame(&cfg, &p, &Tensor::zeros(&[1, 32, 32])).unwrap();
        assert_eq!(e.shape(), &[64]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardizing_ignores_level_and_gain() {
        let cfg = EncoderConfig::default();
        let p = params(&cfg, 5);
        let frame: Vec<f32> = (0..32 * 32).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
        let shifted: Vec<f32> = frame.iter().map(|v| 0.4 * v + 2.5).collect();
        let a = encode_frame(&cfg, &p, &Tensor::from_vec(&[1, 32, 32], frame).unwrap()).unwrap();
        let b = encode_frame(&cfg, &p, &Tensor::from_vec(&[1, 32, 32], shifted).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn symmetric_kernels_are_flip_invariant_on_constant_frames() {
        let cfg = EncoderConfig {
            coordinates: false,
            standardize_frames: false,
            ..EncoderConfig::default()
        };
        let mut p = params(&cfg, 2);
        for (name, prm) in p.iter_mut() {
            if !name.ends_with(".weight") {
                continue;
            }
            let d = prm.value.data_mut();
            for k in d.chunks_mut(3) {
                k[2] = k[0];
            }
        }
        let frame = Tensor::full(&[1, 32, 32], 0.7f32);
        let e = encode_frame(&cfg, &p, &frame).unwrap();
        let flipped: Vec<f32> = frame
            .data()
            .chunks(32)
            .flat_map(|r| r.iter().rev().copied().collect::<Vec<_>>())
            .collect();
        let ef = encode_frame(&cfg, &p, &Tensor::from_vec(&[1, 32, 32], flipped).unwrap()).unwrap();
        assert_eq!(e, ef);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cfg = EncoderConfig::default();
        let p = params(&cfg, 3);
        let mut frame = Tensor::zeros(&[1, 32, 32]);
        frame.data_mut()[10] = f32::NAN;
        assert!(matches!(encode_frame(&cfg, &p, &frame), Err(Error::Numeric(_))));
    }

    #[test]
    fn batch_matches_single_frames() {
        let cfg = EncoderConfig::default();
        let p = params(&cfg, 4);
        let frames: Vec<f32> = (0..3 * 1024).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let batch = Tensor::from_vec(&[3, 1, 32, 32], frames.clone()).unwrap();
        let (emb, _) = encode_frames(&cfg, &p, &batch).unwrap();
        for i in 0..3 {
            let single = Tensor::from_vec(&[1, 32, 32], frames[i * 1024..(i + 1) * 1024].to_vec()).unwrap();
            let e = encode_frame(&cfg, &p, &single).unwrap();
            assert_eq!(e.data(), emb.row(i));
        }
    }

    #[test]
    fn mini_encoder_is_small() {
        let c = EncoderConfig::default().graph().unwrap().count(1);
        assert_eq!(c.params, (3 * 16 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64));
    }

    #[test]
    fn resnet_descriptor_chains_and_ignores_residuals_in_counts() {
        let g = resnet18_descriptor();
        assert_eq!(g.output_shape().unwrap(), Shape::Vector { features: 10 });
        assert_eq!(g.count(48), g.without_residuals().count(48));
    }
}
