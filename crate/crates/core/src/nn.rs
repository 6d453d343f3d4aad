//! Named parameter storage and the layer helpers built on [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Parameters keyed by dotted names, kept in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    map: BTreeMap<String, Rc<Tensor<S>>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.map.insert(name.into(), Rc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Rc<Tensor<S>>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))
    }

    /// Mutable access; clones the tensor first if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .map(Rc::make_mut)
            .ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), Rc::clone(v)))
                .collect(),
        }
    }

    /// Copy every entry of `other`, replacing same-named ones.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), Rc::clone(v));
        }
    }

    /// Rename entries `from.*` to `to.*`.
    pub fn rename_prefix(&self, from: &str, to: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| {
                    k.strip_prefix(from)
                        .map(|rest| (format!("{to}{rest}"), Rc::clone(v)))
                })
                .collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Rc::new(v.cast())))
                .collect(),
        }
    }

    /// Order-sensitive hash over names, shapes and value bits.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (k, v) in &self.map {
            k.hash(&mut h);
            v.shape().hash(&mut h);
            for x in v.data() {
                x.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Binds stored parameters into a graph on first use.
pub struct Binder<'g, S: Real> {
    graph: &'g Graph<S>,
    store: &'g ParamStore<S>,
    trainable: Box<dyn Fn(&str) -> bool + 'g>,
    bound: RefCell<BTreeMap<String, Var<'g, S>>>,
}

impl<'g, S: Real> Binder<'g, S> {
    /// Every parameter is a constant.
    pub fn frozen(graph: &'g Graph<S>, store: &'g ParamStore<S>) -> Self {
        Self::new(graph, store, |_| false)
    }

    pub fn new(
        graph: &'g Graph<S>,
        store: &'g ParamStore<S>,
        trainable: impl Fn(&str) -> bool + 'g,
    ) -> Self {
        Self {
            graph,
            store,
            trainable: Box::new(trainable),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore<S> {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'g, S>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = Rc::clone(self.store.get(name)?);
        let var = self.graph.leaf(value, (self.trainable)(name));
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Gradients of every bound trainable parameter, zero-filled when a
    /// parameter did not influence the root.
    pub fn gradients(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, var)| {
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(var.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn uniform<S: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..=bound)))
}

/// Weight `[din, dout]` (applied as `x·W`) and optional bias `[dout]`.
pub fn init_linear<S: Real, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    name: &str,
    din: usize,
    dout: usize,
    bias: bool,
) {
    let bound = 1.0 / (din as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(rng, vec![din, dout], bound));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros([dout]));
    }
}

pub fn init_conv<S: Real, R: Rng>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(rng, vec![cout, cin, k, k], bound));
    store.insert(format!("{name}.b"), Tensor::zeros([cout]));
}

pub fn init_norm<S: Real>(store: &mut ParamStore<S>, name: &str, channels: usize) {
    store.insert(format!("{name}.g"), Tensor::ones([channels]));
    store.insert(format!("{name}.b"), Tensor::zeros([channels]));
}

/// `x·W (+ b)` over the last axis of a rank-2 or rank-3 input.
pub fn linear<'g, S: Real>(b: &Binder<'g, S>, x: &Var<'g, S>, name: &str) -> Result<Var<'g, S>> {
    let y = x.matmul(&b.param(&format!("{name}.w"))?)?;
    let bias_name = format!("{name}.b");
    if !b.store().contains(&bias_name) {
        return Ok(y);
    }
    let bias = b.param(&bias_name)?;
    let mut shape = vec![1; y.shape().len()];
    *shape.last_mut().expect("rank >= 2") = bias.shape()[0];
    y.add(&bias.reshape(shape)?)
}

pub fn conv<'g, S: Real>(b: &Binder<'g, S>, x: &Var<'g, S>, name: &str) -> Result<Var<'g, S>> {
    let w = b.param(&format!("{name}.w"))?;
    let bias = b.param(&format!("{name}.b"))?;
    x.conv2d(&w, Some(&bias))
}

pub fn group_norm<'g, S: Real>(
    b: &Binder<'g, S>,
    x: &Var<'g, S>,
    name: &str,
    groups: usize,
) -> Result<Var<'g, S>> {
    let g = b.param(&format!("{name}.g"))?;
    let beta = b.param(&format!("{name}.b"))?;
    x.group_norm(groups, &g, &beta, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_is_sorted_and_digest_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("z.w", Tensor::ones([2]));
        s.insert("a.w", Tensor::zeros([3]));
        assert_eq!(s.names().collect::<Vec<_>>(), ["a.w", "z.w"]);
        let d0 = s.digest();
        s.get_mut("z.w").unwrap().data_mut()[1] = 2.0;
        assert_ne!(d0, s.digest());
        assert!(s.get("missing").is_err());
        assert_eq!(s.rename_prefix("a.", "b.").names().collect::<Vec<_>>(), ["b.w"]);
    }

    #[test]
    fn binder_reports_only_trainable_gradients() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_linear(&mut s, &mut rng, "frozen", 3, 2, true);
        init_linear(&mut s, &mut rng, "train", 2, 1, true);
        let g = Graph::new();
        let b = Binder::new(&g, &s, |n| n.starts_with("train"));
        let x = g.constant(Tensor::ones([4, 3]));
        let h = linear(&b, &x, "frozen").unwrap();
        let y = linear(&b, &h, "train").unwrap().sum_all();
        let grads = g.backward(&y).unwrap();
        let named = b.gradients(&grads);
        assert_eq!(named.keys().collect::<Vec<_>>(), ["train.b", "train.w"]);
        assert_eq!(named["train.b"].data(), &[4.0]);
    }
}
