//! Global and local patch critics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvSpec, Padding};
use crate::nn::{Bound, ParamSet, PatchCoord, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// Stride-2 layers of the full-image critic (3 gives the 70x70 receptive field).
    pub global_layers: usize,
    /// Stride-2 layers of the patch critic.
    pub local_layers: usize,
    /// Random crops per image fed to the local critic.
    pub patch_count: usize,
    pub patch_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            global_layers: 3,
            local_layers: 3,
            patch_count: 5,
            patch_size: 64,
        }
    }
}

/// Side of the score map a critic with `layers` stride-2 stages produces
/// from a `size`-pixel input, if non-empty.
pub fn score_map_size(layers: usize, size: usize) -> Option<usize> {
    let mut s = size;
    for _ in 0..layers {
        s = (s + 2).checked_sub(4)? / 2 + 1;
    }
    for _ in 0..2 {
        s = (s + 2).checked_sub(4)? + 1;
    }
    (s > 0).then_some(s)
}

impl DiscriminatorConfig {
    /// Checks critic geometry for `height x width` images.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.base_width == 0 || self.global_layers == 0 || self.local_layers == 0 {
            return Err(Error::Geometry("critic widths and depths must be positive".into()));
        }
        if self.patch_count == 0 {
            return Err(Error::Geometry("patch_count must be at least 1".into()));
        }
        if self.patch_size == 0 || self.patch_size > height || self.patch_size > width {
            return Err(Error::Geometry(format!(
                "patch_size {} does not fit {height}x{width} images",
                self.patch_size
            )));
        }
        if score_map_size(self.global_layers, height.min(width)).is_none() {
            return Err(Error::Geometry(format!(
                "{height}x{width} images too small for a {}-layer global critic",
                self.global_layers
            )));
        }
        if score_map_size(self.local_layers, self.patch_size).is_none() {
            return Err(Error::Geometry(format!(
                "{}-pixel patches too small for a {}-layer local critic",
                self.patch_size, self.local_layers
            )));
        }
        Ok(())
    }
}

/// PatchGAN-style critic: `layers` stride-2 convolutions, one stride-1
/// convolution, and a 1-channel stride-1 score head, all 4x4.
#[derive(Clone, Debug)]
struct PatchCritic {
    convs: Vec<Conv2d>,
}

impl PatchCritic {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, width: usize, layers: usize) -> Self {
        let ch = |i: usize| width * (1usize << i.min(3));
        let spec = |cin, cout, stride, bias| {
            ConvSpec::new(cin, cout, 4).stride(stride).padding(Padding::Zero(1)).bias(bias)
        };
        let mut convs = vec![Conv2d::new(ps, rng, &format!("{name}.conv0"), spec(3, width, 2, true))];
        for i in 1..layers {
            convs.push(Conv2d::new(ps, rng, &format!("{name}.conv{i}"), spec(ch(i - 1), ch(i), 2, false)));
        }
        convs.push(Conv2d::new(ps, rng, &format!("{name}.conv{layers}"), spec(ch(layers - 1), ch(layers), 1, false)));
        convs.push(Conv2d::new(ps, rng, &format!("{name}.score"), spec(ch(layers), 1, 1, true)));
        Self { convs }
    }

    fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let last = self.convs.len() - 1;
        let mut y = x;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(t, p, y)?;
            if i == last {
                break;
            }
            if i > 0 {
                y = t.instance_norm(y);
            }
            y = t.leaky_relu(y, 0.2);
        }
        Ok(y)
    }
}

/// The global (whole image) and local (random crop) critics.
#[derive(Clone, Debug)]
pub struct DiscriminatorPair<T> {
    config: DiscriminatorConfig,
    seed: u64,
    params: ParamSet<T>,
    global: PatchCritic,
    local: PatchCritic,
}

impl<T: Scalar> DiscriminatorPair<T> {
    pub fn build(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.base_width == 0 || config.global_layers == 0 || config.local_layers == 0 || config.patch_count == 0 {
            return Err(Error::Geometry("invalid critic configuration".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let global = PatchCritic::new(&mut ps, &mut rng, "global", config.base_width, config.global_layers);
        let local = PatchCritic::new(&mut ps, &mut rng, "local", config.base_width, config.local_layers);
        Ok(Self {
            config: config.clone(),
            seed,
            params: ps,
            global,
            local,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Score map of the global critic over whole images.
    pub fn forward_global(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(t, x, 3)?;
        self.global.forward(t, p, x)
    }

    /// Score maps of the local critic over crops of `x`.
    pub fn forward_local(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var, coords: &[PatchCoord]) -> Result<Var> {
        self.check_input(t, x, 3)?;
        let crops = t.patches(x, coords, self.config.patch_size)?;
        self.local.forward(t, p, crops)
    }

    /// `patch_count` crop positions per image, reproducible from `seed`.
    pub fn sample_crops(&self, batch: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PatchCoord>> {
        sample_crops(batch, height, width, self.config.patch_count, self.config.patch_size, seed)
    }
}

/// Uniform crop positions, `count` per image, fully inside the image.
pub fn sample_crops(
    batch: usize,
    height: usize,
    width: usize,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PatchCoord>> {
    if size == 0 || size > height || size > width {
        return Err(Error::Geometry(format!("{size}-pixel crop in {height}x{width} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch * count);
    for n in 0..batch {
        for _ in 0..count {
            out.push((n, rng.random_range(0..=height - size), rng.random_range(0..=width - size)));
        }
    }
    Ok(out)
}

impl<T: Scalar> Network<T> for DiscriminatorPair<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn arch_tag(&self) -> String {
        "patch-critic-pair".into()
    }

    /// The global critic's score map.
    fn forward(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_global(t, p, x)
    }
}
