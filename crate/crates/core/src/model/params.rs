use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use std::cell::RefCell;
use std::collections::HashMap;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Context pathway (embeddings and layers).
    Context,
    /// Learned null-context embedding.
    Null,
    /// Timestep embedding MLP, shared by every group.
    Time,
    /// Generative layer `l`.
    Layer(usize),
    /// Input projection or velocity head of group `k`.
    Adapter(usize),
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub role: Role,
}

/// Flat, ordered parameter table.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<T>, trainable: bool, role: Role) -> usize {
        let id = self.params.len();
        assert!(
            self.by_name.insert(name.clone(), id).is_none(),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
            role,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.params[id].value
    }

    /// Replaces a value by name, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Input(format!("no parameter named {name}")))?;
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Binds parameters onto a tape on first use, so a forward pass records
/// only what it touches.
pub(crate) struct Binder<'t, 'm, T> {
    pub tape: &'t Tape<T>,
    store: &'m ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    grad: bool,
}

impl<'t, 'm, T: Real> Binder<'t, 'm, T> {
    pub fn new(tape: &'t Tape<T>, store: &'m ParamStore<T>, grad: bool) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            grad,
        }
    }

    pub fn get(&self, id: usize) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id].get_or_insert_with(|| {
            let p = &self.store.params[id];
            self.tape.leaf(p.value.clone(), self.grad && p.trainable)
        })
    }

    /// Parameter ids bound so far, ascending.
    pub fn touched(&self) -> Vec<usize> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| i))
            .collect()
    }

    pub fn bound(&self) -> Vec<(usize, Var<'t, T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }
}
