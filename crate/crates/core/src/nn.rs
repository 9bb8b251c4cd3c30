//! Dense layers and shared per-point MLPs on top of the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Glorot-uniform weights, zero bias.
    Glorot,
    /// All-zero weights and bias.
    Zero,
    /// Glorot weights shrunk by `gain`, bias set explicitly.
    Scaled { gain: f64, bias: Vec<f64> },
}

/// Registers `<name>.weight [fan_in, fan_out]` and `<name>.bias [fan_out]`.
pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    init: &Init,
) -> Result<()> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let (gain, bias) = match init {
        Init::Glorot => (1.0, vec![0.0; fan_out]),
        Init::Zero => (0.0, vec![0.0; fan_out]),
        Init::Scaled { gain, bias } => (*gain, bias.clone()),
    };
    // draw even when the gain is zero so that the RNG stream does not depend
    // on the init choice of one layer
    let w = Tensor::from_fn(&[fan_in, fan_out], |_| T::of(gain * rng.random_range(-limit..limit)));
    store.insert(format!("{name}.weight"), w)?;
    store.insert(
        format!("{name}.bias"),
        Tensor::new(vec![fan_out], bias.into_iter().map(T::of).collect())?,
    )?;
    Ok(())
}

pub fn linear<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Shared per-row MLP with SiLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
    /// Apply SiLU after the last layer as well.
    pub final_activation: bool,
}

impl Mlp {
    pub fn new(name: impl Into<String>, dims: &[usize], final_activation: bool) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            final_activation,
        }
    }

    fn layer_name(&self, i: usize) -> String {
        format!("{}.{}", self.name, i)
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("mlp needs at least one layer")
    }

    /// Initializes every layer with Glorot weights; `last` overrides the final layer.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, last: &Init) -> Result<()> {
        let layers = self.dims.len() - 1;
        for i in 0..layers {
            let init = if i + 1 == layers { last } else { &Init::Glorot };
            init_linear(store, rng, &self.layer_name(i), self.dims[i], self.dims[i + 1], init)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for i in 0..layers {
            h = linear(tape, store, &self.layer_name(i), h)?;
            if i + 1 < layers || self.final_activation {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }
}
