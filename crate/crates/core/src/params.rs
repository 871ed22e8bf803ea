//! Named parameter storage and the per-pass forward context.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; only meaningful for trainable entries.
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered store of named tensors: learnable weights plus fixed buffers
/// (running statistics, kernel-point layouts).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        id
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|p| p.grad = None);
    }

    /// Folds the outcome of one pass (gradients and running-stat updates) into the store.
    pub fn apply(&mut self, outcome: PassOutcome<T>) {
        for (id, g) in outcome.grads {
            let p = &mut self.entries[id.0];
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &v)| *a += v),
                slot @ None => *slot = Some(g),
            }
        }
        for (id, v) in outcome.buffer_updates {
            self.entries[id.0].value = v;
        }
    }
}

/// Whether layers run with batch statistics (and record gradients) or frozen ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass produced besides its output.
#[derive(Debug, Default)]
pub struct PassOutcome<T> {
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub buffer_updates: Vec<(ParamId, Tensor<T>)>,
    pub taps: Vec<(String, Tensor<T>)>,
}

/// State shared by all layers during one forward pass over one tape.
pub struct Forward<'a, T: Scalar> {
    tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    bound: RefCell<HashMap<ParamId, Var<'a, T>>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
    taps: Option<RefCell<Vec<(String, Tensor<T>)>>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            bound: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            taps: None,
        }
    }

    /// Enables capture of named intermediate values (see [`Forward::tap`]).
    pub fn with_taps(mut self) -> Self {
        self.taps = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Tape variable for a parameter; bound once per pass so shared weights share a leaf.
    pub fn param(&self, id: ParamId) -> Var<'a, T> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = if p.trainable && self.training() {
            self.tape.var(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'a, T> {
        self.tape.constant(value)
    }

    pub fn update_buffer(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn taps_enabled(&self) -> bool {
        self.taps.is_some()
    }

    /// Records a named intermediate when taps are enabled.
    pub fn tap(&self, name: &str, value: &Var<'a, T>) {
        if let Some(taps) = &self.taps {
            taps.borrow_mut().push((name.to_string(), value.to_tensor()));
        }
    }

    /// Collects gradients of bound trainable leaves and pending buffer updates.
    pub fn finish(self) -> PassOutcome<T> {
        let mut grads: Vec<(ParamId, Tensor<T>)> = self
            .bound
            .into_inner()
            .into_iter()
            .filter_map(|(id, v)| v.grad().map(|g| (id, g)))
            .collect();
        grads.sort_by_key(|(id, _)| *id);
        PassOutcome {
            grads,
            buffer_updates: self.buffer_updates.into_inner(),
            taps: self.taps.map(RefCell::into_inner).unwrap_or_default(),
        }
    }
}
