use rand::Rng;

use crate::params::{ParamError, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Affine map `x · W + b` applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let weight = store.init_uniform(format!("{name}.weight"), (input, output), input, 1.0, rng)?;
        let bias = store.zeros(format!("{name}.bias"), (1, output))?;
        Ok(Self { weight, bias: Some(bias), input, output })
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let weight = store.init_uniform(format!("{name}.weight"), (input, output), input, 1.0, rng)?;
        Ok(Self { weight, bias: None, input, output })
    }

    /// Zero-initialised weights; used for residual branches that start as identity.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self, ParamError> {
        let weight = store.zeros(format!("{name}.weight"), (input, output))?;
        let bias = store.zeros(format!("{name}.bias"), (1, output))?;
        Ok(Self { weight, bias: Some(bias), input, output })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}
