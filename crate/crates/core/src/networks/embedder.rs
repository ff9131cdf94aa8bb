//! Fixed-weight VGG-style feature extractor used by the perceptual loss
//! variant and by the FID/KID/LPIPS metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Network};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::nn::layers::{Conv2d, ConvSpec, Init};
use crate::nn::{Bound, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Seed of the shipped default embedder.
pub const DEFAULT_EMBEDDER_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Channels of the five convolution blocks.
    pub widths: [usize; 5],
    /// Convolutions per block (VGG-16: 2, 2, 3, 3, 3).
    pub convs_per_block: [usize; 5],
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64, 64],
            convs_per_block: [2, 2, 3, 3, 3],
        }
    }
}

impl EmbedderConfig {
    /// Full-width VGG-16 convolution stack.
    pub fn vgg16() -> Self {
        Self {
            widths: [64, 128, 256, 512, 512],
            convs_per_block: [2, 2, 3, 3, 3],
        }
    }
}

/// Which activation map to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerTap {
    /// ReLU output of convolution `conv` (1-based) in block `block` (1-based).
    Relu { block: usize, conv: usize },
}

impl LayerTap {
    /// Default perceptual tap: the first convolution of the fifth block.
    pub const PERCEPTUAL: LayerTap = LayerTap::Relu { block: 5, conv: 1 };

    pub fn name(&self) -> String {
        match self {
            LayerTap::Relu { block, conv } => format!("relu{block}_{conv}"),
        }
    }
}

/// Activations collected in one pass.
pub struct EmbedVars {
    /// Last ReLU of each block.
    pub block_outputs: Vec<Var>,
    pub perceptual: Var,
}

#[derive(Clone, Debug)]
pub struct PerceptualEmbedder<T> {
    config: EmbedderConfig,
    seed: u64,
    params: ParamSet<T>,
    blocks: Vec<Vec<Conv2d>>,
    tap: LayerTap,
}

impl<T: Scalar> PerceptualEmbedder<T> {
    /// Randomly initialized (He-normal) embedder; deterministic in `seed`.
    pub fn build(config: &EmbedderConfig, seed: u64) -> Result<Self> {
        if config.widths.contains(&0) || config.convs_per_block.contains(&0) {
            return Err(Error::Config("embedder widths and conv counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(5);
        for (b, (&w, &n)) in config.widths.iter().zip(&config.convs_per_block).enumerate() {
            let mut convs = Vec::with_capacity(n);
            for c in 0..n {
                convs.push(Conv2d::new(
                    &mut ps,
                    &mut rng,
                    &format!("conv{}_{}", b + 1, c + 1),
                    ConvSpec::new(cin, w, 3).init(Init::He),
                ));
                cin = w;
            }
            blocks.push(convs);
        }
        Ok(Self {
            config: config.clone(),
            seed,
            params: ps,
            blocks,
            tap: LayerTap::PERCEPTUAL,
        })
    }

    /// The shipped default: small widths, fixed seed.
    pub fn default_embedder() -> Self {
        Self::build(&EmbedderConfig::default(), DEFAULT_EMBEDDER_SEED).expect("valid default")
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tap(&self) -> LayerTap {
        self.tap
    }

    pub fn with_tap(mut self, tap: LayerTap) -> Result<Self> {
        let LayerTap::Relu { block, conv } = tap;
        if block == 0 || block > 5 || conv == 0 || conv > self.config.convs_per_block[block - 1] {
            return Err(Error::Config(format!("no layer {}", tap.name())));
        }
        self.tap = tap;
        Ok(self)
    }

    /// Smallest accepted image side (four 2x poolings).
    pub fn min_size(&self) -> usize {
        16
    }

    /// Runs the stack on a 1- or 3-channel batch; gray input is replicated.
    pub fn embed_vars(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<EmbedVars> {
        let s = t.shape(x);
        if s.h < self.min_size() || s.w < self.min_size() {
            return Err(Error::Geometry(format!("embedder needs at least 16x16 input, got {s}")));
        }
        let x = match s.c {
            1 => t.concat(&[x, x, x])?,
            3 => x,
            c => return Err(Error::ShapeMismatch(format!("embedder input with {c} channels"))),
        };
        let mut y = t.affine(x, 2.0, -1.0);
        let mut block_outputs = Vec::with_capacity(5);
        let mut perceptual = None;
        let LayerTap::Relu { block: tb, conv: tc } = self.tap;
        for (b, convs) in self.blocks.iter().enumerate() {
            if b > 0 {
                y = t.max_pool2(y)?;
            }
            for (c, conv) in convs.iter().enumerate() {
                let v = conv.forward(t, p, y)?;
                y = t.relu(v);
                if b + 1 == tb && c + 1 == tc {
                    perceptual = Some(y);
                }
            }
            block_outputs.push(y);
        }
        Ok(EmbedVars {
            block_outputs,
            perceptual: perceptual.expect("tap validated"),
        })
    }

    /// Perceptual-tap features of one image.
    pub fn embed(&self, img: &ImageF<T>) -> Result<Tensor<T>> {
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let x = t.constant(Tensor::from_image(img));
        let v = self.embed_vars(&mut t, &p, x)?;
        Ok(t.value(v.perceptual).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "embedder");
        ck.set_meta("embedder_config", serde_json::to_string(&self.config).expect("serializable"));
        ck.set_meta("seed", self.seed);
        ck.insert_params("embedder", &self.params);
        ck
    }

    /// Rebuilds the stack from a checkpoint; the weights come from the file.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.meta("kind") != Some("embedder") {
            return Err(Error::Config("checkpoint is not an embedder".into()));
        }
        let config: EmbedderConfig = serde_json::from_str(ck.require_meta("embedder_config")?)
            .map_err(|e| Error::Config(format!("embedder config: {e}")))?;
        let seed = ck.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut e = Self::build(&config, seed)?;
        ck.restore_params("embedder", &mut e.params)?;
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Block-output activations of a batch, one tensor per block.
    pub fn block_features(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut t = Tape::new();
        let p = self.params.bind_frozen(&mut t);
        let x = t.constant(batch.clone());
        let v = self.embed_vars(&mut t, &p, x)?;
        Ok(v.block_outputs.iter().map(|&b| t.value(b).clone()).collect())
    }
}

impl<T: Scalar> Network<T> for PerceptualEmbedder<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn arch_tag(&self) -> String {
        format!("vgg-embedder:{}", self.tap.name())
    }

    fn forward(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.embed_vars(t, p, x)?.perceptual)
    }
}
