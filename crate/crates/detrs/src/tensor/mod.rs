//! The numeric substrate: NCHW kernels, a reverse-mode tape, and named
//! parameter storage.

pub mod infer;
pub mod kernels;
pub mod params;
pub mod tape;

use std::collections::HashMap;

pub use infer::InferCtx;
pub use kernels::RoiRef;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, Tape, TensorId};

/// Whether a forward pass uses batch statistics and stochastic
/// regularization (train) or running statistics and no randomness (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { step: u64, seed: u64 },
    Eval,
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// One forward pass: a fresh tape plus access to the parameter store.
///
/// Parameters enter the tape lazily through [`Forward::param`]; repeated
/// requests for the same parameter return the same tape node, so layers that
/// share weights (detection-head convolutions applied per level) accumulate
/// gradients correctly.
pub struct Forward<'s> {
    pub tape: Tape,
    pub store: &'s mut ParamStore,
    pub mode: Mode,
    cache: HashMap<ParamId, TensorId>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            mode,
            cache: HashMap::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.cache.get(&id) {
            return *t;
        }
        let entry = self.store.entry(id);
        let needs_grad = entry.trainable && self.mode.is_train();
        let t = self.tape.leaf(entry.value.clone(), needs_grad);
        self.cache.insert(id, t);
        t
    }

    pub fn is_train(&self) -> bool {
        self.mode.is_train()
    }

    /// Tape node a parameter was materialized as during this forward, if
    /// it was used.
    pub fn param_node(&self, id: ParamId) -> Option<TensorId> {
        self.cache.get(&id).copied()
    }
}
