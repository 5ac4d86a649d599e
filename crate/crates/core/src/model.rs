//! Full gesture model: per-frame spatial encoder feeding the temporal network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_frames, encoder_backward, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{CostReport, LayerGraph};
use crate::numerics::{ParamStore, Tensor};
use crate::tcn::{tcn_backward, tcn_logits, ProbSequence, TcnConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tcn: TcnConfig,
}

impl Default for ModelConfig {
    /// Mini encoder with a mix2 temporal network of 2 stages x 4 blocks, 32 channels.
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let tcn = TcnConfig::mixed(2, 4, 2, 32, encoder.embedding_dim(), 10);
        ModelConfig { encoder, tcn }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.tcn.validate()?;
        if self.encoder.embedding_dim() != self.tcn.input_dim {
            return Err(Error::Config(format!(
                "encoder produces {}-d embeddings but the tcn expects {}",
                self.encoder.embedding_dim(),
                self.tcn.input_dim
            )));
        }
        Ok(())
    }

    /// Encoder followed by the temporal network, as one accounting graph.
    pub fn graph(&self) -> Result<LayerGraph> {
        self.validate()?;
        let mut g = self.encoder.graph()?;
        self.tcn.append_to(&mut g);
        g.shapes()?;
        Ok(g)
    }

    /// Encoder cost for one frame plus temporal cost over `steps` embeddings.
    pub fn cost(&self, steps: usize) -> Result<CostReport> {
        Ok(self.graph()?.count(steps))
    }
}

/// Model configuration together with its trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl GestureModel {
    /// Freshly initialized model; the seed fully determines the weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let graph = config.graph()?;
        let params = graph.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(GestureModel { config, params })
    }

    /// Wraps existing parameters after checking they match the configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let reference = GestureModel::new(config.clone(), 0)?;
        for (name, p) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        Ok(GestureModel { config, params })
    }

    pub fn classes(&self) -> usize {
        self.config.tcn.classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim()
    }

    /// `[T, C]` embeddings of normalized `[T, h, w]` frames.
    pub fn embed(&self, frames: &[f32], h: usize, w: usize) -> Result<Tensor<f32>> {
        let input = self.config.encoder.prepare_frames(frames, h, w)?;
        Ok(encode_frames(&self.config.encoder, &self.params, &input)?.0)
    }

    /// `[N, P]` logits for `[C, N]` embeddings.
    pub fn logits_from_embeddings(&self, embeddings: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(tcn_logits(&self.config.tcn, &self.params, embeddings)?.0)
    }

    /// `[T, P]` logits of normalized `[T, h, w]` frames.
    pub fn logits(&self, frames: &[f32], h: usize, w: usize) -> Result<Tensor<f32>> {
        self.logits_from_embeddings(&self.embed(frames, h, w)?.transpose())
    }

    pub fn predict(&self, frames: &[f32], h: usize, w: usize) -> Result<ProbSequence> {
        ProbSequence::from_logits(&self.logits(frames, h, w)?)
    }

    /// Forward and backward pass over a batch of normalized clips.
    ///
    /// All frames of the batch go through the encoder together. `loss` maps
    /// the `[T, P]` logits of clip `i` to its loss and logit gradient; the
    /// parameter gradients of the summed loss are accumulated into `params`.
    /// Returns the per-clip losses.
    pub fn accumulate_gradients<F>(&mut self, clips: &[(&[f32], usize, usize)], mut loss: F) -> Result<Vec<f32>>
    where
        F: FnMut(usize, &Tensor<f32>) -> Result<(f32, Tensor<f32>)>,
    {
        if clips.is_empty() {
            return Ok(Vec::new());
        }
        let mut lengths = Vec::with_capacity(clips.len());
        let mut prepared = Vec::with_capacity(clips.len());
        for &(frames, h, w) in clips {
            let t = self.config.encoder.prepare_frames(frames, h, w)?;
            lengths.push(t.dim(0));
            prepared.push(t);
        }
        let batch = if prepared.len() == 1 {
            prepared.pop().expect("one clip")
        } else {
            concat_outer(&prepared)?
        };
        let (emb, enc_cache) = encode_frames(&self.config.encoder, &self.params, &batch)?;
        let c = emb.dim(1);
        let mut grad_emb = Vec::with_capacity(emb.len());
        let mut losses = Vec::with_capacity(clips.len());
        let mut offset = 0;
        for (i, &n) in lengths.iter().enumerate() {
            let clip_emb = Tensor::from_vec(&[n, c], emb.data()[offset * c..(offset + n) * c].to_vec())?.transpose();
            let (logits, cache) = tcn_logits(&self.config.tcn, &self.params, &clip_emb)?;
            let (l, g) = loss(i, &logits)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss on batch item {i}")));
            }
            losses.push(l);
            let ge = tcn_backward(&self.config.tcn, &mut self.params, &cache, &g)?;
            grad_emb.extend_from_slice(ge.transpose().data());
            offset += n;
        }
        let grad_emb = Tensor::from_vec(&[offset, c], grad_emb)?;
        encoder_backward(&self.config.encoder, &mut self.params, &enc_cache, &grad_emb)?;
        Ok(losses)
    }
}

fn concat_outer(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let inner = &items[0].shape()[1..];
    let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
    let mut rows = 0;
    for t in items {
        if &t.shape()[1..] != inner {
            return Err(Error::Shape("batch items differ in frame shape".into()));
        }
        rows += t.dim(0);
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(inner);
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ce_clip_loss;

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut cfg = ModelConfig::default();
        cfg.tcn.input_dim = 63;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(GestureModel::new(cfg, 0).is_err());
    }

    #[test]
    fn param_count_matches_instantiation() {
        let cfg = ModelConfig::default();
        let m = GestureModel::new(cfg.clone(), 1).unwrap();
        assert_eq!(cfg.cost(48).unwrap().params, m.params.num_values() as u64);
    }

    #[test]
    fn batched_gradients_equal_sum_of_single() {
        let mut cfg = ModelConfig::default();
        cfg.tcn = TcnConfig::mixed(1, 2, 1, 8, 64, 4);
        let base = GestureModel::new(cfg, 5).unwrap();
        let a: Vec<f32> = (0..3 * 24 * 32).map(|i| ((i * 7) % 13) as f32 / 6.0 - 1.0).collect();
        let b: Vec<f32> = (0..5 * 24 * 32).map(|i| ((i * 5) % 11) as f32 / 5.0 - 1.0).collect();
        let labels = [1usize, 3];

        let mut joint = base.clone();
        joint
            .accumulate_gradients(&[(&a, 24, 32), (&b, 24, 32)], |i, z| ce_clip_loss(z, labels[i]))
            .unwrap();

        let mut single = base.clone();
        single.accumulate_gradients(&[(&a, 24, 32)], |_, z| ce_clip_loss(z, 1)).unwrap();
        single.accumulate_gradients(&[(&b, 24, 32)], |_, z| ce_clip_loss(z, 3)).unwrap();

        for (name, p) in joint.params.iter() {
            let q = single.params.param(name).unwrap();
            for (x, y) in p.grad.data().iter().zip(q.grad.data()) {
                assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{name}: {x} vs {y}");
            }
        }
    }
}
