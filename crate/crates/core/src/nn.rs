//! Parameter storage and the small set of layers the network is assembled from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::tensor::{ConvGeom, Real, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub value: Tensor<T>,
    /// Buffers (e.g. running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Named parameters, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) {
        let prev = self
            .params
            .insert(name.to_string(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// True when any parameter name starts with `prefix`.
    pub fn has_group(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Creates parameters with deterministic initialization.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).unwrap();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect())
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Conv2d {
        let fan_in = cin * geom.kernel * geom.kernel;
        let w = self.normal(&[cout, cin, geom.kernel, geom.kernel], (2.0 / fan_in as f64).sqrt());
        self.store.insert(&format!("{name}.weight"), w, true);
        if bias {
            self.store
                .insert(&format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        }
        Conv2d {
            name: name.to_string(),
            geom,
            bias,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, kind: NormKind) -> Norm {
        self.store
            .insert(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true);
        self.store
            .insert(&format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        if kind == NormKind::Batch {
            self.store
                .insert(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), false);
            self.store
                .insert(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()), false);
        }
        Norm {
            name: name.to_string(),
            kind,
            groups: group_count(channels),
        }
    }

    pub fn conv_norm_act(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        norm: NormKind,
    ) -> ConvNormAct {
        ConvNormAct {
            conv: self.conv(&format!("{name}.conv"), cin, cout, geom, false),
            norm: self.norm(&format!("{name}.norm"), cout, norm),
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.normal(&[din, dout], (1.0 / din as f64).sqrt());
        self.store.insert(&format!("{name}.weight"), w, true);
        self.store
            .insert(&format!("{name}.bias"), Tensor::zeros(&[dout]), true);
        Linear {
            name: name.to_string(),
        }
    }
}

/// Largest of 4, 2, 1 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Group,
}

/// Forward context: binds parameters of a [`ParamStore`] to a [`Tape`].
pub struct Ctx<'t, T: Real> {
    pub tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
    pub train: bool,
    /// When false, parameters enter the tape as constants (no parameter gradients).
    pub track_params: bool,
    batch_stats: RefCell<Vec<(String, Vec<T>, Vec<T>)>>,
}

impl<'t, T: Real> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, train: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
            train,
            track_params: true,
            batch_stats: RefCell::new(Vec::new()),
        }
    }

    /// Inference context: evaluation-mode normalization, no parameter tracking.
    pub fn inference(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        let mut c = Self::new(tape, store, false);
        c.track_params = false;
        c
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn param(&self, name: &str) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = if self.track_params {
            self.tape.var(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Gradients of every parameter touched by this forward pass.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(k, _)| self.store.params.get(*k).is_some_and(|p| p.trainable))
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Batch statistics recorded by batch-norm layers in training mode, as
    /// `(layer name, mean, variance)`.
    pub fn take_batch_stats(&self) -> Vec<(String, Vec<T>, Vec<T>)> {
        std::mem::take(&mut *self.batch_stats.borrow_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl Conv2d {
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.param(&format!("{}.weight", self.name));
        let b = self.bias.then(|| ctx.param(&format!("{}.bias", self.name)));
        x.conv2d(w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub kind: NormKind,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl Norm {
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let gamma = ctx.param(&format!("{}.gamma", self.name));
        let beta = ctx.param(&format!("{}.beta", self.name));
        match self.kind {
            NormKind::Group => x.group_norm(gamma, beta, self.groups, NORM_EPS),
            NormKind::Batch if ctx.train => {
                let (y, m, v) = x.batch_norm_train(gamma, beta, NORM_EPS);
                ctx.batch_stats.borrow_mut().push((self.name.clone(), m, v));
                y
            }
            NormKind::Batch => {
                let store = ctx.store();
                let rm = store.get(&format!("{}.running_mean", self.name)).unwrap();
                let rv = store.get(&format!("{}.running_var", self.name)).unwrap();
                let g = gamma.value();
                let b = beta.value();
                let c = rm.numel();
                let mut scale = Tensor::zeros(&[c]);
                let mut shift = Tensor::zeros(&[c]);
                for i in 0..c {
                    let s = g.data()[i] / (rv.data()[i] + T::of(NORM_EPS)).sqrt();
                    scale.data_mut()[i] = s;
                    shift.data_mut()[i] = b.data()[i] - rm.data()[i] * s;
                }
                x.channel_affine(ctx.tape.constant(scale), ctx.tape.constant(shift))
            }
        }
    }
}

/// Folds recorded batch statistics into the running buffers.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(String, Vec<T>, Vec<T>)]) {
    let m = T::of(BN_MOMENTUM);
    for (name, mean, var) in stats {
        if let Some(rm) = store.get_mut(&format!("{name}.running_mean")) {
            for (r, &v) in rm.data_mut().iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
        if let Some(rv) = store.get_mut(&format!("{name}.running_var")) {
            for (r, &v) in rv.data_mut().iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvNormAct {
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.norm.forward(ctx, self.conv.forward(ctx, x)).relu()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
}

impl Linear {
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.param(&format!("{}.weight", self.name));
        let b = ctx.param(&format!("{}.bias", self.name));
        x.linear(w, b)
    }
}
