use rand::Rng;

use super::arch::{ArchSpec, Layer, Shape};
use super::{ModelError, Result};
use crate::rng::{stream, tag};

/// One named tensor with its gradient and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub values: Vec<f32>,
    pub grads: Vec<f32>,
    pub momentum: Vec<f32>,
}

impl ParamBlock {
    fn new(name: String, values: Vec<f32>) -> Self {
        let n = values.len();
        ParamBlock { name, values, grads: vec![0.0; n], momentum: vec![0.0; n] }
    }
}

/// Extractor parameters for every trainable layer (weight then bias, in
/// layer order) followed by the classifier weight (`embedding_dim x N`,
/// row-major) and bias (`N`).
///
/// `version` increases with every optimizer step, so a forward cache can be
/// tied to the exact parameter values that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) arch: ArchSpec,
    pub(crate) input: (usize, usize),
    pub(crate) shapes: Vec<Shape>,
    pub(crate) embedding_dim: usize,
    pub(crate) num_classes: usize,
    pub(crate) blocks: Vec<ParamBlock>,
    /// For each layer, the index of its weight block (bias follows).
    pub(crate) layer_blocks: Vec<Option<usize>>,
    pub(crate) version: u64,
}

impl ModelParams {
    /// Fan-in scaled uniform weights and zero biases drawn from `seed`.
    pub fn new(arch: ArchSpec, input: (usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let mut params = Self::zeroed(arch, input, num_classes)?;
        let mut rng = stream(seed, &[tag::INIT]);
        let classifier = params.classifier_block();
        for (i, block) in params.blocks.iter_mut().enumerate() {
            if block.name.ends_with(".bias") {
                continue;
            }
            let fan_in = if i == classifier {
                params.embedding_dim
            } else {
                let layer = block.name.split('.').next().and_then(|l| l.strip_prefix("layer")).and_then(|l| l.parse::<usize>().ok());
                layer.map_or(1, |l| fan_in(&params.arch.layers[l]))
            };
            let gain = if i == classifier { 1.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt() as f32;
            for v in &mut block.values {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    /// All parameters zero.
    pub fn zeroed(arch: ArchSpec, input: (usize, usize), num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(ModelError::Shape("classifier needs at least one class".into()));
        }
        let shapes = arch.shapes(input.0, input.1)?;
        let embedding_dim = arch.output_dim(input.0, input.1)?;
        let mut blocks = Vec::new();
        let mut layer_blocks = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            match layer.param_counts() {
                Some((w, b)) => {
                    layer_blocks.push(Some(blocks.len()));
                    blocks.push(ParamBlock::new(format!("layer{i}.weight"), vec![0.0; w]));
                    blocks.push(ParamBlock::new(format!("layer{i}.bias"), vec![0.0; b]));
                }
                None => layer_blocks.push(None),
            }
        }
        blocks.push(ParamBlock::new("classifier.weight".into(), vec![0.0; embedding_dim * num_classes]));
        blocks.push(ParamBlock::new("classifier.bias".into(), vec![0.0; num_classes]));
        Ok(ModelParams { arch, input, shapes, embedding_dim, num_classes, blocks, layer_blocks, version: 0 })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Direct parameter access. Bumps the version since values may change.
    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        self.version += 1;
        &mut self.blocks
    }

    pub(crate) fn classifier_block(&self) -> usize {
        self.blocks.len() - 2
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grads.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }
}

fn fan_in(layer: &Layer) -> usize {
    match *layer {
        Layer::Conv { in_ch, kernel, .. } => in_ch * kernel.0 * kernel.1,
        Layer::DepthwiseConv { kernel, .. } => kernel.0 * kernel.1,
        Layer::FullyConnected { inputs, .. } => inputs,
        Layer::GlobalAvgPool | Layer::Activation => 1,
    }
}

/// Momentum SGD with L2 weight decay folded into the velocity:
/// `v = momentum*v + grad + weight_decay*param; param -= lr*v`.
pub fn sgd_step(params: &mut ModelParams, lr: f32, momentum: f32, weight_decay: f32) {
    for block in &mut params.blocks {
        for ((p, v), g) in block.values.iter_mut().zip(&mut block.momentum).zip(&block.grads) {
            *v = momentum * *v + *g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    params.version += 1;
}
