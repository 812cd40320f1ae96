//! Named parameter tensors and the per-forward binding of those tensors
//! onto a fresh [`Graph`].

use std::collections::HashMap;

use crate::graph::{Graph, Var};
use crate::tensor::{init_params, Init, Rng, Tensor};
use crate::error::Result;

/// Ordered collection of named tensors. Order is insertion order and is the
/// serialization order in checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn init(&mut self, name: &str, shape: &[usize], rng: &mut Rng, scheme: Init) -> Result<()> {
        let t = init_params(shape, rng, scheme)?;
        self.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Panics on unknown names; model code only asks for names it created.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }

    /// Entries whose name starts with `prefix`, in order.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone());
        }
        out
    }
}

/// Gradient buffers aligned with a [`ParamStore`]'s entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            bufs: vec![None; store.len()],
        }
    }

    pub fn get(&self, i: usize) -> Option<&[f64]> {
        self.bufs[i].as_deref()
    }

    pub fn set(&mut self, i: usize, buf: Vec<f64>) {
        self.bufs[i] = Some(buf);
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.iter().all(Option::is_none)
    }

    pub fn add(&mut self, other: &Grads) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            if let Some(src) = src {
                let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                for (a, b) in d.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }

    pub fn clear(&mut self) {
        self.bufs.iter_mut().for_each(|b| *b = None);
    }

    pub fn all_finite(&self) -> bool {
        self.bufs
            .iter()
            .flatten()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// A graph plus the lazy binding of store entries to graph leaves.
///
/// Entries are bound as trainable leaves unless the session is in inference
/// mode or the name matches a frozen prefix. Dropout is active only when a
/// dropout RNG is attached.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    frozen: Vec<String>,
    dropout_rng: Option<Rng>,
}

impl<'a> Session<'a> {
    /// Trainable session: parameters receive gradients.
    pub fn train(store: &'a ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
            frozen: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Inference session: parameters are constants, dropout is off.
    pub fn infer(store: &'a ParamStore) -> Self {
        Session {
            trainable: false,
            ..Session::train(store)
        }
    }

    pub fn with_dropout(mut self, rng: Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let t = self.store.entry(i).1.clone();
        let frozen = self.frozen.iter().any(|f| name.starts_with(f.as_str()));
        let v = if self.trainable && !frozen {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound[i] = Some(v);
        v
    }

    pub fn dropout_active(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Inverted dropout; identity when no dropout RNG is attached or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        self.g.mul_const(x, mask)
    }

    /// Gradients of every bound trainable entry after `backward`.
    pub fn grads(&self) -> Grads {
        let bufs = self
            .bound
            .iter()
            .map(|v| v.and_then(|v| self.g.grad(v).map(<[f64]>::to_vec)))
            .collect();
        Grads { bufs }
    }

    /// Linear layer on a vector: `W·x + c` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: &str, c: &str) -> Var {
        let (w, c) = (self.p(w), self.p(c));
        let y = self.g.matvec(w, x);
        self.g.add(y, c)
    }

    pub fn layer_norm(&mut self, x: Var, gain: &str, bias: &str) -> Var {
        let (g, b) = (self.p(gain), self.p(bias));
        self.g.layer_norm(x, g, b, crate::tensor::LN_EPS)
    }
}
