//! Staged networks and the auxiliary modules of the training graph.
//!
//! Parameters live in flat [`ParamStore`]s; modules only hold [`ParamId`]s.
//! Forward passes take the bound parameter tensors explicitly, so the same
//! module can run on plain values, on graph leaves, or on the unrolled
//! parameters produced inside the meta step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Parameter tensors indexed by `ParamId`; leaves of `graph` when given.
    pub fn bind(&self, graph: Option<&Graph>) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                let t = Tensor::from_vec(p.data.clone(), &p.shape).expect("parameter shape");
                match graph {
                    Some(g) => g.leaf(t),
                    None => t,
                }
            })
            .collect()
    }

    /// Bitwise equality, treating equal NaN payloads as equal.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers feeding a ReLU.
    He,
    /// `N(0, 1 / fan_in)`.
    Lecun,
    Zeros,
}

fn init_data(rng: &mut ChaCha8Rng, init: Init, fan_in: usize, len: usize) -> Vec<f64> {
    let std = match init {
        Init::He => libm::sqrt(2.0 / fan_in as f64),
        Init::Lecun => libm::sqrt(1.0 / fan_in as f64),
        Init::Zeros => return alloc::vec![0.0; len],
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Fully connected layer `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        let w = init_data(rng, init, fan_in, fan_in * fan_out);
        let weight = store.add(format!("{name}.weight"), alloc::vec![fan_in, fan_out], w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), alloc::vec![fan_out], alloc::vec![0.0; fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&params[self.weight.0])?;
        match self.bias {
            Some(b) => y.add_row(&params[b.0]),
            None => Ok(y),
        }
    }
}

/// Linear, ReLU, linear.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayer {
    pub hidden: Linear,
    pub out: Linear,
}

impl TwoLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        TwoLayer {
            hidden: Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1], Init::He, true),
            out: Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2], Init::Lecun, true),
        }
    }

    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.out.forward(params, &self.hidden.forward(params, x)?.relu())
    }
}

/// Architecture of one staged MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Feature width of each stage; its length is the number of stages.
    pub widths: Vec<usize>,
    #[serde(default = "default_layers_per_stage")]
    pub layers_per_stage: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

fn default_layers_per_stage() -> usize {
    1
}

impl NetworkSpec {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn final_width(&self) -> usize {
        *self.widths.last().expect("validated spec has stages")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::invalid("network spec", "at least one stage is required"));
        }
        if self.input_dim == 0 || self.embed_dim == 0 || self.layers_per_stage == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("network spec", "all widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("network spec", "need at least two classes"));
        }
        Ok(())
    }
}

/// Per-stage outputs of one network: features, raw embeddings and logits.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub features: Vec<Tensor>,
    pub embeddings: Vec<Tensor>,
    pub logits: Vec<Tensor>,
}

/// An L-stage MLP with refiners, projection heads and a classifier per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedNetwork {
    pub spec: NetworkSpec,
    pub stages: Vec<Vec<Linear>>,
    pub refiners: Vec<Linear>,
    pub projections: Vec<TwoLayer>,
    pub classifiers: Vec<Linear>,
}

impl StagedNetwork {
    /// Allocates the network's parameters in `store`, drawn from `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64, store: &mut ParamStore, name: &str) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = spec.final_width();
        let mut stages = Vec::with_capacity(spec.stages());
        let mut refiners = Vec::new();
        let mut projections = Vec::with_capacity(spec.stages());
        let mut classifiers = Vec::with_capacity(spec.stages());
        let mut width_in = spec.input_dim;
        for (l, &w) in spec.widths.iter().enumerate() {
            let mut block = Vec::with_capacity(spec.layers_per_stage);
            for k in 0..spec.layers_per_stage {
                let fan_in = if k == 0 { width_in } else { w };
                block.push(Linear::new(
                    store,
                    &mut rng,
                    &format!("{name}.stage{l}.{k}"),
                    fan_in,
                    w,
                    Init::He,
                    true,
                ));
            }
            stages.push(block);
            if l + 1 < spec.stages() {
                refiners.push(Linear::new(
                    store,
                    &mut rng,
                    &format!("{name}.refine{l}"),
                    w,
                    last,
                    Init::He,
                    true,
                ));
            }
            projections.push(TwoLayer::new(
                store,
                &mut rng,
                &format!("{name}.proj{l}"),
                [last, last, spec.embed_dim],
            ));
            classifiers.push(Linear::new(
                store,
                &mut rng,
                &format!("{name}.cls{l}"),
                last,
                spec.classes,
                Init::Lecun,
                true,
            ));
            width_in = w;
        }
        Ok(StagedNetwork {
            spec: spec.clone(),
            stages,
            refiners,
            projections,
            classifiers,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::shape("network input", &[x.shape(), &[self.spec.input_dim]]));
        }
        Ok(())
    }

    /// Full training-graph forward pass.
    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<StageOutputs> {
        self.check_input(x)?;
        let l_total = self.stages.len();
        let mut features = Vec::with_capacity(l_total);
        let mut h = x.clone();
        for (l, block) in self.stages.iter().enumerate() {
            for layer in block {
                h = layer.forward(params, &h)?.relu();
            }
            features.push(if l + 1 < l_total {
                self.refiners[l].forward(params, &h)?.relu()
            } else {
                h.clone()
            });
        }
        let embeddings = features
            .iter()
            .zip(&self.projections)
            .map(|(f, p)| p.forward(params, f))
            .collect::<Result<Vec<_>>>()?;
        let logits = features
            .iter()
            .zip(&self.classifiers)
            .map(|(f, c)| c.forward(params, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(StageOutputs {
            features,
            embeddings,
            logits,
        })
    }

    /// Final-stage features through the stages only.
    pub fn extract(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.stages {
            for layer in block {
                h = layer.forward(params, &h)?.relu();
            }
        }
        Ok(h)
    }

    /// Inference graph: stages followed by the final classifier.
    pub fn predict_logits(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let h = self.extract(params, x)?;
        self.classifiers[self.classifiers.len() - 1].forward(params, &h)
    }

    /// Copies only the inference-graph parameters into a standalone network.
    pub fn strip(&self, store: &ParamStore) -> InferenceNetwork {
        let mut params = ParamStore::new();
        let mut copy = |lin: &Linear| {
            let w = store.get(lin.weight);
            let weight = params.add(w.name.clone(), w.shape.clone(), w.data.clone());
            let bias = lin.bias.map(|b| {
                let b = store.get(b);
                params.add(b.name.clone(), b.shape.clone(), b.data.clone())
            });
            Linear {
                weight,
                bias,
                fan_in: lin.fan_in,
                fan_out: lin.fan_out,
            }
        };
        let stages = self
            .stages
            .iter()
            .map(|block| block.iter().map(&mut copy).collect())
            .collect();
        let classifier = copy(&self.classifiers[self.classifiers.len() - 1]);
        InferenceNetwork {
            input_dim: self.spec.input_dim,
            stages,
            classifier,
            params,
        }
    }
}

/// A deployed network: stages and final classifier only.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNetwork {
    pub input_dim: usize,
    pub stages: Vec<Vec<Linear>>,
    pub classifier: Linear,
    pub params: ParamStore,
}

impl InferenceNetwork {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(Error::shape("network input", &[x.shape(), &[self.input_dim]]));
        }
        let p = self.params.bind(None);
        let mut h = x.clone();
        for block in &self.stages {
            for layer in block {
                h = layer.forward(&p, &h)?.relu();
            }
        }
        self.classifier.forward(&p, &h)
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.cols();
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Produces per-sample branch weights from the concatenated stage features.
#[derive(Clone, Debug, PartialEq)]
pub struct GateModule {
    pub mlp: TwoLayer,
    pub branches: usize,
}

impl GateModule {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        feature_widths: &[usize],
        hidden: usize,
    ) -> Self {
        let input: usize = feature_widths.iter().sum();
        GateModule {
            mlp: TwoLayer::new(store, rng, name, [input, hidden, feature_widths.len()]),
            branches: feature_widths.len(),
        }
    }

    /// `[B, L]` weights, each row a probability vector.
    pub fn weights(&self, params: &[Tensor], features: &[Tensor]) -> Result<Tensor> {
        if features.len() != self.branches {
            return Err(Error::invalid(
                "gate input",
                format!("expected {} feature maps, got {}", self.branches, features.len()),
            ));
        }
        let refs: Vec<&Tensor> = features.iter().collect();
        let joined = Tensor::concat_cols(&refs)?;
        self.mlp.forward(params, &joined)?.softmax_rows()
    }
}

/// Projection pair for one (network a, layer la) / (network b, layer lb) match.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPair {
    pub a: usize,
    pub b: usize,
    pub la: usize,
    pub lb: usize,
    pub xi_a: ParamId,
    pub xi_b: ParamId,
}

/// Bias-free `d x d` projections for every unordered network pair and every layer pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaNetwork {
    pub pairs: Vec<MetaPair>,
    pub embed_dim: usize,
}

impl MetaNetwork {
    pub fn init(store: &mut ParamStore, seed: u64, networks: usize, stages: usize, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        let mut mat = |rng: &mut ChaCha8Rng, name: String| {
            let data = init_data(rng, Init::Lecun, embed_dim, embed_dim * embed_dim);
            store.add(name, alloc::vec![embed_dim, embed_dim], data)
        };
        for a in 0..networks {
            for b in a + 1..networks {
                for la in 0..stages {
                    for lb in 0..stages {
                        let xi_a = mat(&mut rng, format!("meta.{a}_{b}.{la}_{lb}.xi_a"));
                        let xi_b = mat(&mut rng, format!("meta.{a}_{b}.{la}_{lb}.xi_b"));
                        pairs.push(MetaPair {
                            a,
                            b,
                            la,
                            lb,
                            xi_a,
                            xi_b,
                        });
                    }
                }
            }
        }
        MetaNetwork { pairs, embed_dim }
    }

    pub fn find(&self, a: usize, b: usize, la: usize, lb: usize) -> Option<&MetaPair> {
        self.pairs
            .iter()
            .find(|p| p.a == a && p.b == b && p.la == la && p.lb == lb)
    }
}

/// Networks, gates and meta-network of a cohort together with their parameters.
///
/// `theta` holds every network parameter, `gate_params` the gate modules and
/// `meta_params` the meta-network projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub networks: Vec<StagedNetwork>,
    pub gates: Vec<GateModule>,
    pub meta: MetaNetwork,
    pub theta: ParamStore,
    pub gate_params: ParamStore,
    pub meta_params: ParamStore,
}

impl Cohort {
    /// One network per seed. The gate and meta-network draw from `aux_seed`.
    pub fn init(spec: &NetworkSpec, seeds: &[u64], aux_seed: u64, with_meta: bool) -> Result<Self> {
        spec.validate()?;
        if seeds.is_empty() {
            return Err(Error::invalid("cohort", "no network seeds"));
        }
        let mut theta = ParamStore::new();
        let networks = seeds
            .iter()
            .enumerate()
            .map(|(m, &s)| StagedNetwork::init(spec, s, &mut theta, &format!("net{m}")))
            .collect::<Result<Vec<_>>>()?;
        let mut gate_params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(aux_seed ^ 0x6a09_e667_f3bc_c908);
        let widths = alloc::vec![spec.final_width(); spec.stages()];
        let gates = (0..seeds.len())
            .map(|m| {
                GateModule::init(
                    &mut gate_params,
                    &mut rng,
                    &format!("gate{m}"),
                    &widths,
                    spec.final_width(),
                )
            })
            .collect();
        let mut meta_params = ParamStore::new();
        let meta = if with_meta {
            MetaNetwork::init(&mut meta_params, aux_seed, seeds.len(), spec.stages(), spec.embed_dim)
        } else {
            MetaNetwork {
                pairs: Vec::new(),
                embed_dim: spec.embed_dim,
            }
        };
        Ok(Cohort {
            networks,
            gates,
            meta,
            theta,
            gate_params,
            meta_params,
        })
    }

    pub fn size(&self) -> usize {
        self.networks.len()
    }

    pub fn stages(&self) -> usize {
        self.networks[0].stages.len()
    }

    /// Forward pass of every network on the same batch.
    pub fn forward(&self, theta: &[Tensor], x: &Tensor) -> Result<Vec<StageOutputs>> {
        self.networks.iter().map(|n| n.forward(theta, x)).collect()
    }
}
