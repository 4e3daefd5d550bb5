use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Grads, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Declared parameter: hierarchical name, extents and initializer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn collect_params(&self, out: &mut Vec<ParamSpec>);

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Name-ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Materializes `specs`. A repeated name is accepted only when it
    /// redeclares the same shape (weight tying); anything else is an error.
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut store = Self::default();
        let mut declared: BTreeMap<&str, &ParamSpec> = BTreeMap::new();
        for spec in specs {
            if let Some(prev) = declared.insert(&spec.name, spec) {
                if prev.shape != spec.shape {
                    return Err(Error::DuplicateParam(spec.name.clone()));
                }
            }
        }
        // draw in name order so the stream does not depend on declaration order
        for (name, spec) in declared {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Uniform(b) => (0..n).map(|_| T::lit(rng.gen_range(-b..=b))).collect(),
            };
            store
                .tensors
                .insert(name.to_string(), Tensor::new(spec.shape.clone(), data)?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites every entry with `U(-scale, scale)` noise. Used to leave
    /// the identity-at-init regime before gradient checks.
    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = T::lit(rng.gen_range(-scale..=scale));
            }
        }
    }

    /// Verifies that names and shapes agree with `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self
                .get(&spec.name)
                .ok_or_else(|| Error::UnknownParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    lhs: t.shape().to_vec(),
                    rhs: spec.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// One recorded transposed-attention map, `[N, heads, d, d]`.
#[derive(Clone, Debug)]
pub struct AttentionMap<T> {
    pub layer: String,
    pub map: Tensor<T>,
}

/// Forward-pass context: binds parameters onto a tape on first use and
/// optionally records attention maps.
pub struct Ctx<'t, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    track: bool,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
    attention: Option<RefCell<Vec<AttentionMap<T>>>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// Parameters become gradient-tracking leaves.
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            track: true,
            bound: RefCell::new(BTreeMap::new()),
            attention: None,
        }
    }

    /// Parameters are constants; nothing downstream records backward state.
    pub fn inference(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(tape, store)
        }
    }

    pub fn record_attention(mut self) -> Self {
        self.attention = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.tape.leaf(t.clone(), self.track);
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub(crate) fn push_attention(&self, layer: &str, map: &Var<'t, T>) {
        if let Some(maps) = &self.attention {
            maps.borrow_mut().push(AttentionMap {
                layer: layer.to_string(),
                map: map.to_tensor(),
            });
        }
    }

    pub fn attention_maps(&self) -> Vec<AttentionMap<T>> {
        self.attention
            .as_ref()
            .map(|m| m.borrow().clone())
            .unwrap_or_default()
    }

    /// Gradients of every parameter touched in this forward pass, by name.
    /// Parameters the root does not depend on come back as zeros.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .by_id(var.id())
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
