//! Trainable networks: student generator, teacher colorizer, critics and the
//! fixed perceptual embedder.

pub mod checkpoint;
pub mod discriminator;
pub mod embedder;
pub mod generator;
pub mod teacher;

pub use checkpoint::Checkpoint;
pub use discriminator::{sample_crops, score_map_size, DiscriminatorConfig, DiscriminatorPair};
pub use embedder::{EmbedderConfig, LayerTap, PerceptualEmbedder, DEFAULT_EMBEDDER_SEED};
pub use generator::{Generator, GeneratorArch, GeneratorConfig};
pub use teacher::{Teacher, TeacherConfig};

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Common surface of every parameterized network.
pub trait Network<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    fn arch_tag(&self) -> String;

    /// Input height and width must be multiples of this.
    fn size_multiple(&self) -> usize {
        1
    }

    /// Records the forward pass on `t`, with `p` bound from [`Network::params`].
    fn forward(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var>;

    fn check_input(&self, t: &Tape<'_, T>, x: Var, channels: usize) -> Result<()> {
        let s = t.shape(x);
        if s.c != channels {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {channels} input channels, got {s}",
                self.arch_tag()
            )));
        }
        let m = self.size_multiple();
        if s.h % m != 0 || s.w % m != 0 {
            return Err(Error::Geometry(format!(
                "{} needs spatial size divisible by {m}, got {s}",
                self.arch_tag()
            )));
        }
        Ok(())
    }

    /// Forward pass without gradient tracking.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params().bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}
