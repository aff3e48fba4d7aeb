//! A forward pass bound to a parameter store.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::attention::WindowShape;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::Layout;

/// Attention weights captured from one cross-attention call.
#[derive(Clone, Debug)]
pub struct AttentionRecord<F> {
    pub layer: usize,
    pub direction: String,
    pub window: WindowShape,
    /// `[clips, heads, queries, keys]`.
    pub weights: Tensor<F>,
    pub query_layout: Layout,
    pub key_layout: Layout,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub mhsa_calls: usize,
    pub layer_norm_calls: usize,
}

/// Gradients for trainable parameters, keyed by id.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<F> {
    grads: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Real> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<F>) {
        self.grads.insert(id, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<F>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` (micro-batch accumulation).
    pub fn accumulate(&mut self, other: &ParamGrads<F>) {
        for (&id, g) in &other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

pub struct Session<'s, F> {
    pub tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: HashMap<ParamId, Var>,
    recorder: Option<Vec<AttentionRecord<F>>>,
    pub counters: Counters,
    drop_path: Option<(f64, StreamRng)>,
}

impl<'s, F: Real> Session<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            recorder: None,
            counters: Counters::default(),
            drop_path: None,
        }
    }

    /// A session that keeps every cross-attention weight tensor.
    pub fn instrumented(store: &'s ParamStore<F>) -> Self {
        let mut s = Self::new(store);
        s.recorder = Some(Vec::new());
        s
    }

    /// Enables stochastic depth with the given drop rate.
    pub fn with_drop_path(mut self, rate: f64, rng: StreamRng) -> Self {
        if rate > 0.0 {
            self.drop_path = Some((rate, rng));
        }
        self
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    /// Leaf for a parameter; repeated calls return the same node so shared
    /// parameters accumulate gradient from every use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    pub fn record(&mut self, rec: AttentionRecord<F>) {
        if let Some(r) = self.recorder.as_mut() {
            r.push(rec);
        }
    }

    pub fn records(&self) -> &[AttentionRecord<F>] {
        self.recorder.as_deref().unwrap_or(&[])
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord<F>> {
        self.recorder.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Per-clip keep mask for a residual branch, already rescaled by
    /// 1/(1-rate). `None` when stochastic depth is off.
    pub fn drop_path_factors(&mut self, clips: usize) -> Option<Vec<F>> {
        let (rate, rng) = self.drop_path.as_mut()?;
        let keep = 1.0 - *rate;
        Some(
            (0..clips)
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        F::lit(1.0 / keep)
                    } else {
                        F::zero()
                    }
                })
                .collect(),
        )
    }

    /// Backward from a scalar loss; returns gradients for every trainable
    /// parameter bound in this session.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<F>> {
        let grads = self.tape.backward(loss)?;
        let mut out = ParamGrads::default();
        for (&id, &v) in &self.bound {
            if !self.store.get(id).trainable {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
            out.insert(id, g);
        }
        Ok(out)
    }

    pub fn scalar(&self, v: Var) -> Result<F> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::contract("expected a scalar node"));
        }
        Ok(t.item())
    }
}
