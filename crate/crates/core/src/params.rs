//! Named parameter storage shared by the model, the optimizers and export.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    /// Latent weights of a binarized convolution.
    BinaryConvWeight,
    RealConvWeight,
    LinearWeight,
    Bias,
    BnGamma,
    BnBeta,
    Activation,
    ScalingFactor,
    Clip,
    FeatureBias,
}

impl ParamRole {
    /// Weight decay applies to weight tensors only.
    pub fn decays(self) -> bool {
        matches!(
            self,
            Self::BinaryConvWeight | Self::RealConvWeight | Self::LinearWeight
        )
    }

    pub fn is_binarizable(self) -> bool {
        self == Self::BinaryConvWeight
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    /// Frozen parameters are recorded as constants and never updated.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        self.push(name, role, value, true)
    }

    pub fn add_frozen(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        value: Tensor,
    ) -> ParamId {
        self.push(name, role, value, false)
    }

    fn push(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        value: Tensor,
        trainable: bool,
    ) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    /// Records the parameter on `tape`: as a differentiable leaf when
    /// trainable, as a constant otherwise.
    pub fn on_tape(&self, tape: &mut Tape, id: ParamId) -> Var {
        let p = &self.params[id];
        if p.trainable {
            tape.param(id, p.value.clone())
        } else {
            tape.constant(p.value.clone())
        }
    }
}
