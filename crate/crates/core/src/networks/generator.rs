//! Student generators: the ResNet-style translator and the U-Net alternative.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvSpec, ConvTranspose2d, Padding};
use crate::nn::{Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorArch {
    /// Conv stem, two stride-2 downsamplings, residual blocks, two
    /// fractionally-strided upsamplings, conv head.
    #[serde(rename = "resnet9")]
    Resnet9,
    /// Attention-free U-Net with max-pool downsampling and
    /// nearest-upsample + conv decoding.
    #[serde(rename = "eg-unet")]
    EgUnet,
}

impl GeneratorArch {
    pub fn tag(self) -> &'static str {
        match self {
            GeneratorArch::Resnet9 => "resnet9",
            GeneratorArch::EgUnet => "eg-unet",
        }
    }
}

impl std::str::FromStr for GeneratorArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet9" => Ok(GeneratorArch::Resnet9),
            "eg-unet" => Ok(GeneratorArch::EgUnet),
            other => Err(Error::Config(format!("unknown generator architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub arch: GeneratorArch,
    /// Channels of the first layer.
    pub base_width: usize,
    /// Residual blocks (resnet9).
    pub n_blocks: usize,
    /// Downsampling levels (eg-unet).
    pub depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            arch: GeneratorArch::Resnet9,
            base_width: 64,
            n_blocks: 9,
            depth: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("generator base_width must be positive".into()));
        }
        if self.arch == GeneratorArch::EgUnet && self.depth == 0 {
            return Err(Error::Config("eg-unet depth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
struct ResnetLayout {
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
struct UnetLevel {
    down: Conv2d,
    up: Conv2d,
    merge: Conv2d,
}

#[derive(Clone, Debug)]
struct EgUnetLayout {
    stem_a: Conv2d,
    stem_b: Conv2d,
    levels: Vec<UnetLevel>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
enum Layout {
    Resnet(ResnetLayout),
    EgUnet(EgUnetLayout),
}

/// Student network mapping `N x 1 x H x W` grayscale to `N x 3 x H x W` color in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    seed: u64,
    params: ParamSet<T>,
    layout: Layout,
}

const LEAK: f64 = 0.2;

impl<T: Scalar> Generator<T> {
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = config.base_width;
        let layout = match config.arch {
            GeneratorArch::Resnet9 => {
                let stem = Conv2d::new(
                    &mut ps,
                    &mut rng,
                    "stem",
                    ConvSpec::new(1, w, 7).padding(Padding::Reflect(3)).bias(false),
                );
                let down = (0..2)
                    .map(|i| {
                        let cin = w << i;
                        Conv2d::new(&mut ps, &mut rng, &format!("down{i}"), ConvSpec::new(cin, cin * 2, 3).stride(2).bias(false))
                    })
                    .collect();
                let wide = w * 4;
                let blocks = (0..config.n_blocks)
                    .map(|i| {
                        let spec = ConvSpec::new(wide, wide, 3).padding(Padding::Reflect(1)).bias(false);
                        ResBlock {
                            a: Conv2d::new(&mut ps, &mut rng, &format!("block{i}.a"), spec),
                            b: Conv2d::new(&mut ps, &mut rng, &format!("block{i}.b"), spec),
                        }
                    })
                    .collect();
                let up = (0..2)
                    .map(|i| {
                        let cin = wide >> i;
                        ConvTranspose2d::new(&mut ps, &mut rng, &format!("up{i}"), ConvSpec::new(cin, cin / 2, 3).stride(2).bias(false))
                    })
                    .collect();
                let head = Conv2d::new(&mut ps, &mut rng, "head", ConvSpec::new(w, 3, 7).padding(Padding::Reflect(3)));
                Layout::Resnet(ResnetLayout {
                    stem,
                    down,
                    blocks,
                    up,
                    head,
                })
            }
            GeneratorArch::EgUnet => {
                let stem_a = Conv2d::new(&mut ps, &mut rng, "stem.a", ConvSpec::new(1, w, 3).bias(false));
                let stem_b = Conv2d::new(&mut ps, &mut rng, "stem.b", ConvSpec::new(w, w, 3).bias(false));
                let width = |i: usize| w * (1usize << i.min(3));
                let levels = (1..=config.depth)
                    .map(|i| {
                        let (outer, inner) = (width(i - 1), width(i));
                        UnetLevel {
                            down: Conv2d::new(&mut ps, &mut rng, &format!("level{i}.down"), ConvSpec::new(outer, inner, 3).bias(i == config.depth)),
                            up: Conv2d::new(&mut ps, &mut rng, &format!("level{i}.up"), ConvSpec::new(inner, outer, 3).bias(false)),
                            merge: Conv2d::new(&mut ps, &mut rng, &format!("level{i}.merge"), ConvSpec::new(2 * outer, outer, 3).bias(false)),
                        }
                    })
                    .collect();
                let head = Conv2d::new(&mut ps, &mut rng, "head", ConvSpec::new(w, 3, 1));
                Layout::EgUnet(EgUnetLayout {
                    stem_a,
                    stem_b,
                    levels,
                    head,
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            seed,
            params: ps,
            layout,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn norm_relu<T: Scalar>(t: &mut Tape<'_, T>, x: Var) -> Var {
    let n = t.instance_norm(x);
    t.relu(n)
}

fn norm_lrelu<T: Scalar>(t: &mut Tape<'_, T>, x: Var) -> Var {
    let n = t.instance_norm(x);
    t.leaky_relu(n, LEAK)
}

impl ResnetLayout {
    fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.stem.forward(t, p, x)?;
        let mut y = norm_relu(t, y);
        for d in &self.down {
            let v = d.forward(t, p, y)?;
            y = norm_relu(t, v);
        }
        for blk in &self.blocks {
            let a = blk.a.forward(t, p, y)?;
            let a = norm_relu(t, a);
            let b = blk.b.forward(t, p, a)?;
            let b = t.instance_norm(b);
            y = t.add(y, b)?;
        }
        for u in &self.up {
            let v = u.forward(t, p, y)?;
            y = norm_relu(t, v);
        }
        let out = self.head.forward(t, p, y)?;
        Ok(t.unit_tanh(out))
    }
}

impl EgUnetLayout {
    fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let a = self.stem_a.forward(t, p, x)?;
        let a = norm_lrelu(t, a);
        let b = self.stem_b.forward(t, p, a)?;
        let mut y = norm_lrelu(t, b);
        let mut skips = Vec::with_capacity(self.levels.len());
        let last = self.levels.len() - 1;
        for (i, lvl) in self.levels.iter().enumerate() {
            skips.push(y);
            let pooled = t.max_pool2(y)?;
            let d = lvl.down.forward(t, p, pooled)?;
            // the bottleneck may be 1x1, where instance statistics vanish
            y = if i == last { t.leaky_relu(d, LEAK) } else { norm_lrelu(t, d) };
        }
        for (lvl, skip) in self.levels.iter().zip(skips).rev() {
            let up = t.upsample2(y);
            let u = lvl.up.forward(t, p, up)?;
            let u = norm_lrelu(t, u);
            let cat = t.concat(&[u, skip])?;
            let m = lvl.merge.forward(t, p, cat)?;
            y = norm_lrelu(t, m);
        }
        let out = self.head.forward(t, p, y)?;
        Ok(t.unit_tanh(out))
    }
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn arch_tag(&self) -> String {
        self.config.arch.tag().to_string()
    }

    fn size_multiple(&self) -> usize {
        match self.config.arch {
            GeneratorArch::Resnet9 => 4,
            GeneratorArch::EgUnet => 1 << self.config.depth,
        }
    }

    fn forward(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(t, x, 1)?;
        match &self.layout {
            Layout::Resnet(l) => l.forward(t, p, x),
            Layout::EgUnet(l) => l.forward(t, p, x),
        }
    }
}
