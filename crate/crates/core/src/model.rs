//! Parameter storage and the assembled segmentation + association model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crosstube::{CrossTubeLink, EmbeddingHead};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Lazily binds store parameters as graph leaves, once per graph.
pub struct Bound<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Bound<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Bound {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Use already-created graph nodes (one per parameter, in store order).
    pub fn from_vars(store: &'s ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vars for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Bound {
            store,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.leaf(self.store.get(id).clone(), self.trainable))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients for every parameter, zeros for those the graph never touched.
    pub fn gradients(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(self.store.tensors.iter())
            .map(|(v, t)| {
                v.and_then(|v| g.grad(v).map(<[f64]>::to_vec))
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    }
}

/// Xavier-uniform weight `[fan_in, fan_out]`.
pub(crate) fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

/// A dense layer stored in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        LinearLayer { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound<'_>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = self.bias.map(|b| p.var(g, b));
        g.linear(x, w, b)
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), dims.0, dims.1, true, rng),
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), dims.1, dims.2, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub emb_dim: usize,
    pub num_stages: usize,
    pub patch: usize,
    pub channels: usize,
    /// Real categories, excluding the no-object slot.
    pub num_classes: usize,
    pub link_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_queries: 16,
            dim: 64,
            emb_dim: 32,
            num_stages: 3,
            patch: 4,
            channels: 3,
            num_classes: 4,
            link_heads: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.num_queries >= 1, "num_queries must be >= 1"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.emb_dim >= 1, "emb_dim must be >= 1"),
            (self.num_stages >= 1, "num_stages must be >= 1"),
            (self.patch >= 1, "patch must be >= 1"),
            (self.channels >= 1, "channels must be >= 1"),
            (self.num_classes >= 1, "num_classes must be >= 1"),
            (
                self.link_heads >= 1 && self.dim.is_multiple_of(self.link_heads),
                "link_heads must divide dim",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Decoder, cross-tube linking block and embedding head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub decoder: Decoder,
    pub link: CrossTubeLink,
    pub embed: EmbeddingHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let decoder = Decoder::new(&config, &mut params, &mut rng);
        let link = CrossTubeLink::new(&mut params, "link", config.dim, config.link_heads, &mut rng);
        let embed = EmbeddingHead::new(&mut params, "embed", config.dim, config.emb_dim, &mut rng);
        Ok(Model {
            config,
            params,
            decoder,
            link,
            embed,
        })
    }
}

impl Model {
    /// Association embeddings of `queries`, linked to `reference` queries of an
    /// earlier tube (or to themselves for the first one).
    pub fn linked_embeddings(&self, g: &mut Graph, p: &mut Bound<'_>, queries: Var, reference: Var) -> Result<Var> {
        let linked = self.link.forward(g, p, queries, reference)?;
        self.embed.embed(g, p, linked)
    }

    /// Value-only variant of [`Model::linked_embeddings`]; `reference = None`
    /// skips the linking block.
    pub fn embeddings(&self, queries: &Tensor, reference: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut p = Bound::new(&self.params, false);
        let q = g.constant(queries.clone());
        let e = match reference {
            Some(r) => {
                let r = g.constant(r.clone());
                self.linked_embeddings(&mut g, &mut p, q, r)?
            }
            None => self.embed.embed(&mut g, &mut p, q)?,
        };
        Ok(g.value(e).clone())
    }
}
