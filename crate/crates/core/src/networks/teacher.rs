//! Teacher colorization network: an encoder-decoder with skip connections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvSpec, ConvTranspose2d};
use crate::nn::{Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub base_width: usize,
    /// Number of stride-2 downsamplings (and matching upsamplings).
    pub depth: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            depth: 4,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth == 0 {
            return Err(Error::Config("teacher base_width and depth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Level {
    down: Conv2d,
    up: ConvTranspose2d,
    merge: Conv2d,
}

/// Grayscale-to-color U-Net. Channel widths double per level up to 8x the
/// base width.
#[derive(Clone, Debug)]
pub struct Teacher<T> {
    config: TeacherConfig,
    seed: u64,
    params: ParamSet<T>,
    stem: Conv2d,
    levels: Vec<Level>,
    head: Conv2d,
}

impl<T: Scalar> Teacher<T> {
    pub fn build(config: &TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = config.base_width;
        let width = |i: usize| w * (1usize << i.min(3));
        let stem = Conv2d::new(&mut ps, &mut rng, "stem", ConvSpec::new(1, w, 3).bias(false));
        let levels = (1..=config.depth)
            .map(|i| {
                let (outer, inner) = (width(i - 1), width(i));
                Level {
                    down: Conv2d::new(
                        &mut ps,
                        &mut rng,
                        &format!("level{i}.down"),
                        ConvSpec::new(outer, inner, 3).stride(2).bias(i == config.depth),
                    ),
                    up: ConvTranspose2d::new(
                        &mut ps,
                        &mut rng,
                        &format!("level{i}.up"),
                        ConvSpec::new(inner, outer, 3).stride(2).bias(false),
                    ),
                    merge: Conv2d::new(
                        &mut ps,
                        &mut rng,
                        &format!("level{i}.merge"),
                        ConvSpec::new(2 * outer, outer, 3).bias(false),
                    ),
                }
            })
            .collect();
        let head = Conv2d::new(&mut ps, &mut rng, "head", ConvSpec::new(w, 3, 1));
        Ok(Self {
            config: config.clone(),
            seed,
            params: ps,
            stem,
            levels,
            head,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl<T: Scalar> Network<T> for Teacher<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn arch_tag(&self) -> String {
        "teacher-unet".into()
    }

    fn size_multiple(&self) -> usize {
        1 << self.config.depth
    }

    fn forward(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(t, x, 1)?;
        let s = self.stem.forward(t, p, x)?;
        let s = t.instance_norm(s);
        let mut y = t.relu(s);
        let mut skips = Vec::with_capacity(self.levels.len());
        let last = self.levels.len() - 1;
        for (i, lvl) in self.levels.iter().enumerate() {
            skips.push(y);
            let d = lvl.down.forward(t, p, y)?;
            // no normalization at the bottleneck, which can be 1x1
            let d = if i == last { d } else { t.instance_norm(d) };
            y = t.relu(d);
        }
        for (lvl, skip) in self.levels.iter().zip(skips).rev() {
            let u = lvl.up.forward(t, p, y)?;
            let u = t.instance_norm(u);
            let u = t.relu(u);
            let cat = t.concat(&[u, skip])?;
            let m = lvl.merge.forward(t, p, cat)?;
            let m = t.instance_norm(m);
            y = t.relu(m);
        }
        let out = self.head.forward(t, p, y)?;
        Ok(t.unit_tanh(out))
    }
}
