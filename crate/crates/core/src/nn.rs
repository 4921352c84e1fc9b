//! Small building blocks shared by the model heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Scope, Tensor, Var};
use crate::error::Result;

/// Deterministic generator used for initialization, shuffling and dropout.
pub type ModelRng = ChaCha8Rng;

/// `uniform(−1/√fan_in, 1/√fan_in)` tensor.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ModelRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Affine map `x·W (+ b)` with `W` stored `(in, out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.weight"),
            uniform_init(&[fan_in, fan_out], fan_in, rng),
        )?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Same as [`Linear::new`] but with an all-zero weight.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]))?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, scope: &mut Scope, x: Var) -> Result<Var> {
        let w = scope.param(self.weight)?;
        let y = scope.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = scope.param(b)?;
                scope.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), fan_in, hidden, true, rng)?,
            output: Linear::new(store, &format!("{name}.1"), hidden, fan_out, true, rng)?,
        })
    }

    pub fn forward(&self, scope: &mut Scope, x: Var) -> Result<Var> {
        let h = self.hidden.forward(scope, x)?;
        let h = scope.tape.relu(h)?;
        self.output.forward(scope, h)
    }
}
