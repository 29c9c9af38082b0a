//! Named-parameter Adam: one moment state per model tensor.
//!
//! Models expose their weights as `(name, tensor)` pairs; the optimizer
//! lazily creates an Adam state per name on first sight and steps every
//! parameter that received a gradient. Iteration follows the caller's
//! parameter order, never hash order, so updates are bitwise reproducible.

use std::collections::HashMap;

use crate::error::Result;
use crate::numerics::adam::AdamState;
use crate::numerics::tape::{GradTape, Gradients};
use crate::numerics::tensor::NdTensor;

/// Resolve gradients for named model weights after a backward pass.
///
/// Models register their weights on the tape internally during `forward`;
/// re-registering the same buffers here returns the existing leaf handles,
/// which is what `Gradients` is keyed by. Weights that never entered the
/// forward pass simply have no gradient and are skipped.
pub fn collect_named_grads(
    tape: &mut GradTape,
    grads: &Gradients,
    named: &[(String, NdTensor)],
) -> HashMap<String, NdTensor> {
    let mut out = HashMap::new();
    for (name, w) in named {
        let handle = tape.param(w);
        if let Some(g) = grads.get(&handle) {
            out.insert(name.clone(), g.detach());
        }
    }
    out
}

/// Adam over a named parameter set.
pub struct ModelOptimizer {
    lr: f64,
    states: HashMap<String, AdamState>,
}

impl ModelOptimizer {
    pub fn new(lr: f64) -> Self {
        ModelOptimizer {
            lr,
            states: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Change the learning rate for future steps (existing moments are
    /// kept, as in staged schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
        for s in self.states.values_mut() {
            s.set_lr(lr);
        }
    }

    /// Apply one Adam step to every parameter with an entry in `grads`.
    /// Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut NdTensor)],
        grads: &HashMap<String, NdTensor>,
    ) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            let Some(g) = grads.get(name.as_str()) else {
                continue;
            };
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(self.lr, tensor.numel()));
            state.step(tensor, g)?;
        }
        Ok(())
    }
}
