//! Temporal convolution network: pointwise compression, stages of dilated
//! basic blocks with per-block causality, pointwise classifier and softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerGraph, Shape};
use crate::numerics::{
    conv1d_dilated, conv1d_dilated_backward, conv1x1, conv1x1_backward, relu, relu_backward, softmax, Causality,
    ParamStore, Scalar, Tensor,
};

/// Temporal kernel size of every dilated convolution.
pub const TEMPORAL_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcnConfig {
    pub stages: usize,
    pub blocks_per_stage: usize,
    /// Feature channels inside the basic blocks.
    pub channels: usize,
    /// Embedding size fed to the input projection.
    pub input_dim: usize,
    /// Output classes, including the non-gesture class.
    pub classes: usize,
    /// Leading non-causal blocks in every stage; the remaining blocks are causal.
    pub non_causal_blocks: usize,
}

impl TcnConfig {
    pub fn non_causal(stages: usize, blocks: usize, channels: usize, input_dim: usize, classes: usize) -> Self {
        Self::mixed(stages, blocks, blocks, channels, input_dim, classes)
    }

    pub fn causal(stages: usize, blocks: usize, channels: usize, input_dim: usize, classes: usize) -> Self {
        Self::mixed(stages, blocks, 0, channels, input_dim, classes)
    }

    pub fn mixed(
        stages: usize,
        blocks: usize,
        non_causal_blocks: usize,
        channels: usize,
        input_dim: usize,
        classes: usize,
    ) -> Self {
        TcnConfig {
            stages,
            blocks_per_stage: blocks,
            channels,
            input_dim,
            classes,
            non_causal_blocks,
        }
    }

    /// "TCN f64": 4 stages of 5 non-causal blocks, 64 channels on a 512-d embedding.
    pub fn reference_f64() -> Self {
        Self::non_causal(4, 5, 64, 512, 10)
    }

    /// "TCN f128": as [`TcnConfig::reference_f64`] with 128 channels.
    pub fn reference_f128() -> Self {
        Self::non_causal(4, 5, 128, 512, 10)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("tcn: {m}")));
        if self.stages == 0 {
            return fail("stages must be >= 1");
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage must be >= 1");
        }
        if self.non_causal_blocks > self.blocks_per_stage {
            return fail("non_causal_blocks exceeds blocks_per_stage");
        }
        if self.channels == 0 || self.input_dim == 0 {
            return fail("channel counts must be >= 1");
        }
        if self.classes < 2 {
            return fail("need at least 2 classes");
        }
        // 2^i must stay representable for every block index
        if self.blocks_per_stage > 30 {
            return fail("blocks_per_stage too large");
        }
        Ok(())
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << block
    }

    pub fn causality(&self, block: usize) -> Causality {
        if block < self.non_causal_blocks {
            Causality::NonCausal
        } else {
            Causality::Causal
        }
    }

    /// `(stage, block, dilation, causality)` for every block in execution order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, usize, Causality)> + '_ {
        (0..self.stages).flat_map(move |s| {
            (0..self.blocks_per_stage).map(move |b| (s, b, self.dilation(b), self.causality(b)))
        })
    }

    /// Short human label: `non-causal`, `causal` or `mixN`.
    pub fn label(&self) -> String {
        match self.non_causal_blocks {
            0 => "causal".into(),
            m if m == self.blocks_per_stage => "non-causal".into(),
            m => format!("mix{m}"),
        }
    }

    pub fn graph(&self) -> Result<LayerGraph> {
        self.validate()?;
        let mut g = LayerGraph::new(Shape::Sequence {
            channels: self.input_dim,
        });
        self.append_to(&mut g);
        g.shapes()?;
        Ok(g)
    }

    /// Appends the temporal network to a graph whose output has `input_dim` features.
    pub(crate) fn append_to(&self, g: &mut LayerGraph) {
        g.push(pointwise(names::INPUT, self.input_dim, self.channels));
        for (s, b, d, mode) in self.blocks() {
            g.append(&build_bb(&names::block(s, b), self.channels, d, mode));
        }
        g.push(pointwise(names::OUTPUT, self.channels, self.classes));
        g.push(Layer::Softmax);
    }
}

fn pointwise(name: &str, cin: usize, cout: usize) -> Layer {
    Layer::Conv1d {
        name: name.into(),
        in_channels: cin,
        out_channels: cout,
        kernel: 1,
        dilation: 1,
        causality: Causality::NonCausal,
    }
}

/// Basic block: dilated conv (k=3) -> ReLU -> pointwise conv -> residual add.
pub fn build_bb(prefix: &str, channels: usize, dilation: usize, mode: Causality) -> LayerGraph {
    let mut g = LayerGraph::new(Shape::Sequence { channels });
    g.push(Layer::Conv1d {
        name: format!("{prefix}.dilated"),
        in_channels: channels,
        out_channels: channels,
        kernel: TEMPORAL_KERNEL,
        dilation: dilation.max(1),
        causality: mode,
    });
    g.push(Layer::Relu);
    g.push(pointwise(&format!("{prefix}.pointwise"), channels, channels));
    g.push(Layer::ResidualAdd { skip: 4 });
    g
}

pub(crate) mod names {
    pub const INPUT: &str = "tcn.input";
    pub const OUTPUT: &str = "tcn.output";

    pub fn block(stage: usize, block: usize) -> String {
        format!("tcn.s{stage}.b{block}")
    }

    pub fn weight(layer: &str) -> String {
        format!("{layer}.weight")
    }

    pub fn bias(layer: &str) -> String {
        format!("{layer}.bias")
    }
}

/// Per-frame class probabilities, `[T, P]`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSequence {
    probs: Tensor<f32>,
}

impl ProbSequence {
    pub fn new(probs: Tensor<f32>) -> Result<Self> {
        let [_, p] = *probs.shape() else {
            return Err(Error::Shape(format!("probabilities must be [T, P], got {:?}", probs.shape())));
        };
        if p < 2 {
            return Err(Error::Shape("need at least 2 classes".into()));
        }
        for (t, row) in probs.data().chunks(p).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Numeric(format!("row {t} is not a distribution (sum {s})")));
            }
        }
        Ok(ProbSequence { probs })
    }

    /// Softmax over the classes of `[T, P]` logits.
    pub fn from_logits(logits: &Tensor<f32>) -> Result<Self> {
        Self::new(softmax(logits))
    }

    pub fn len(&self) -> usize {
        self.probs.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.dim(1)
    }

    pub fn row(&self, t: usize) -> &[f32] {
        self.probs.row(t)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.probs
    }

    /// Most probable class at `t`; ties go to the lowest index.
    pub fn argmax(&self, t: usize) -> (usize, f32) {
        argmax(self.row(t))
    }
}

pub(crate) fn argmax(row: &[f32]) -> (usize, f32) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Activations kept for the backward pass.
pub struct TcnCache<T> {
    input: Tensor<T>,
    block_inputs: Vec<Tensor<T>>,
    pre_relu: Vec<Tensor<T>>,
    post_relu: Vec<Tensor<T>>,
    features: Tensor<T>,
}

/// Runs the temporal network on `[C, N]` embeddings and returns `[N, P]` logits.
pub fn tcn_logits<T: Scalar>(
    cfg: &TcnConfig,
    params: &ParamStore<T>,
    embeddings: &Tensor<T>,
) -> Result<(Tensor<T>, TcnCache<T>)> {
    if embeddings.rank() != 2 || embeddings.dim(0) != cfg.input_dim {
        return Err(Error::Shape(format!(
            "tcn expects [{}, N] embeddings, got {:?}",
            cfg.input_dim,
            embeddings.shape()
        )));
    }
    let w = |l: &str| params.get(&names::weight(l));
    let b = |l: &str| params.get(&names::bias(l));
    let mut x = conv1x1(embeddings, w(names::INPUT)?, b(names::INPUT)?)?;
    let n_blocks = cfg.stages * cfg.blocks_per_stage;
    let mut cache = TcnCache {
        input: embeddings.clone(),
        block_inputs: Vec::with_capacity(n_blocks),
        pre_relu: Vec::with_capacity(n_blocks),
        post_relu: Vec::with_capacity(n_blocks),
        features: Tensor::zeros(&[1]),
    };
    for (s, blk, d, mode) in cfg.blocks() {
        let prefix = names::block(s, blk);
        let dil = format!("{prefix}.dilated");
        let pw = format!("{prefix}.pointwise");
        let a = conv1d_dilated(&x, w(&dil)?, b(&dil)?, d, mode)?;
        let r = relu(&a);
        let mut z = conv1x1(&r, w(&pw)?, b(&pw)?)?;
        z.add_assign(&x);
        cache.block_inputs.push(x);
        cache.pre_relu.push(a);
        cache.post_relu.push(r);
        x = z;
    }
    let logits = conv1x1(&x, w(names::OUTPUT)?, b(names::OUTPUT)?)?;
    cache.features = x;
    Ok((logits.transpose(), cache))
}

/// Back-propagates `[N, P]` logit gradients, accumulating parameter gradients
/// into `params`, and returns the gradient with respect to the embeddings.
pub fn tcn_backward<T: Scalar>(
    cfg: &TcnConfig,
    params: &mut ParamStore<T>,
    cache: &TcnCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g_out = grad_logits.transpose();
    let grads = conv1x1_backward(&cache.features, params.get(&names::weight(names::OUTPUT))?, &g_out)?;
    params.accumulate(&names::weight(names::OUTPUT), &grads.weight)?;
    params.accumulate(&names::bias(names::OUTPUT), &grads.bias)?;
    let mut gx = grads.input;

    let blocks: Vec<_> = cfg.blocks().collect();
    for (i, &(s, blk, d, mode)) in blocks.iter().enumerate().rev() {
        let prefix = names::block(s, blk);
        let dil = format!("{prefix}.dilated");
        let pw = format!("{prefix}.pointwise");
        let gp = conv1x1_backward(&cache.post_relu[i], params.get(&names::weight(&pw))?, &gx)?;
        params.accumulate(&names::weight(&pw), &gp.weight)?;
        params.accumulate(&names::bias(&pw), &gp.bias)?;
        let ga = relu_backward(&cache.pre_relu[i], &gp.input);
        let gd = conv1d_dilated_backward(&cache.block_inputs[i], params.get(&names::weight(&dil))?, &ga, d, mode)?;
        params.accumulate(&names::weight(&dil), &gd.weight)?;
        params.accumulate(&names::bias(&dil), &gd.bias)?;
        // residual path
        gx.add_assign(&gd.input);
    }

    let gi = conv1x1_backward(&cache.input, params.get(&names::weight(names::INPUT))?, &gx)?;
    params.accumulate(&names::weight(names::INPUT), &gi.weight)?;
    params.accumulate(&names::bias(names::INPUT), &gi.bias)?;
    Ok(gi.input)
}

/// Per-frame class probabilities for `[C, N]` embeddings.
pub fn tcn_forward(cfg: &TcnConfig, params: &ParamStore<f32>, embeddings: &Tensor<f32>) -> Result<ProbSequence> {
    let (logits, _) = tcn_logits(cfg, params, embeddings)?;
    ProbSequence::from_logits(&logits)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn zero_params(cfg: &TcnConfig) -> ParamStore<f64> {
        let mut p = cfg.graph().unwrap().init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap().cast::<f64>();
        for (_, prm) in p.iter_mut() {
            prm.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = TcnConfig::non_causal(1, 1, 3, 3, 2);
        let mut p = zero_params(&cfg);
        // identity input projection so block input == embeddings
        let w = p.value_mut("tcn.input.weight").unwrap();
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64 - 5.0).collect()).unwrap();
        let (_, cache) = tcn_logits(&cfg, &p, &x).unwrap();
        assert_eq!(cache.features, x);
    }

    #[test]
    fn bb_param_count() {
        let bb = build_bb("b", 64, 1, Causality::Causal);
        assert_eq!(bb.count(1).params, 16_512);
        assert_eq!(bb.output_shape().unwrap(), Shape::Sequence { channels: 64 });
    }

    #[test]
    fn single_frame_gives_distribution() {
        for cfg in [
            TcnConfig::non_causal(2, 3, 8, 5, 4),
            TcnConfig::causal(1, 2, 8, 5, 4),
            TcnConfig::mixed(2, 4, 2, 8, 5, 4),
        ] {
            let p = cfg.graph().unwrap().init_params(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let x = Tensor::full(&[5, 1], 0.3f32);
            let probs = tcn_forward(&cfg, &p, &x).unwrap();
            assert_eq!(probs.len(), 1);
            assert_eq!(probs.classes(), 4);
        }
    }

    #[test]
    fn rejects_wrong_embedding_size() {
        let cfg = TcnConfig::causal(1, 1, 4, 6, 3);
        let p = cfg.graph().unwrap().init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            tcn_forward(&cfg, &p, &Tensor::zeros(&[5, 8])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn validate_rejects_bad_patterns() {
        assert!(TcnConfig::mixed(1, 2, 3, 4, 4, 3).validate().is_err());
        assert!(TcnConfig::non_causal(0, 2, 4, 4, 3).validate().is_err());
        assert!(TcnConfig::non_causal(1, 2, 4, 4, 1).validate().is_err());
    }

    #[test]
    fn reference_param_counts() {
        assert_eq!(TcnConfig::reference_f64().graph().unwrap().count(48).params, 363_722);
        assert_eq!(TcnConfig::reference_f128().graph().unwrap().count(48).params, 1_382_794);
    }
}
