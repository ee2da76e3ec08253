//! The hybrid Bi-LSTM/Bi-GRU network.
//!
//! Topology, in node order:
//!
//! ```text
//! input → bilstm → bilstm                                   (stem)
//!       → 4 × { bilstm ∥ bigru → multiply → batchnorm }     (fusion blocks)
//!       → bilstm → bigru → batchnorm                        (tail)
//!       → [dense, SELU] → dense, linear, width 1            (head)
//! ```
//!
//! Nodes are evaluated in stages. A stage is a run of consecutive nodes
//! that only read from earlier stages, so the two branches of a fusion
//! block run concurrently.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::data::{Imputer, ScalerParams, FEATURE_COLUMNS};
use crate::error::{Error, Result};
use crate::layers::{
    multiply_backward, multiply_forward, BatchNorm, BatchNormCache, Bidirectional,
    BidirectionalCache, Dense, DenseCache, Gru, Lstm, Mode,
};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_features: usize,
    pub stem_units: usize,
    pub block_units: [usize; 4],
    pub tail_units: usize,
    /// Width of the SELU hidden layer in the head; 0 omits it.
    pub dense_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Every recurrent layer at `units`.
    pub fn uniform(units: usize, dense_hidden: usize, seed: u64) -> Self {
        ModelConfig {
            input_features: FEATURE_COLUMNS.len(),
            stem_units: units,
            block_units: [units; 4],
            tail_units: units,
            dense_hidden,
            seed,
        }
    }

    /// Default laptop-sized network, about 50k parameters.
    pub fn desk() -> Self {
        Self::uniform(14, 16, 0)
    }

    /// Uniform width giving roughly the published total of 54.7M
    /// parameters. The published per-layer widths are unknown.
    pub fn paper_scale() -> Self {
        Self::uniform(PAPER_SCALE_UNITS, PAPER_SCALE_DENSE, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.input_features, self.stem_units, self.tail_units]
            .into_iter()
            .chain(self.block_units);
        if widths.into_iter().any(|w| w == 0) {
            return Err(Error::Usage(format!(
                "model widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

pub const PAPER_SCALE_UNITS: usize = 475;
pub const PAPER_SCALE_DENSE: usize = 64;

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    BiLstm,
    BiGru,
    Multiply,
    BatchNorm,
    Dense,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::BiLstm => "bilstm",
            LayerKind::BiGru => "bigru",
            LayerKind::Multiply => "multiply",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Dense => "dense",
        }
    }
}

/// Layer counts by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub bilstm: usize,
    pub bigru: usize,
    pub multiply: usize,
    pub batchnorm: usize,
    pub dense: usize,
}

impl Census {
    /// Whether the counts match the required topology.
    pub fn is_valid(&self) -> bool {
        (self.bilstm, self.bigru, self.multiply, self.batchnorm) == (7, 5, 4, 5) && self.dense >= 1
    }
}

impl fmt::Display for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bilstm={} bigru={} multiply={} batchnorm={}",
            self.bilstm, self.bigru, self.multiply, self.batchnorm
        )
    }
}

/// Where a node reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Port {
    Input,
    Node(usize),
}

// Layers live once in a Vec built at construction; boxing buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T: Scalar> {
    BiLstm(Bidirectional<T, Lstm>),
    BiGru(Bidirectional<T, Gru>),
    Multiply,
    BatchNorm(BatchNorm<T>),
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::BiLstm(_) => LayerKind::BiLstm,
            Layer::BiGru(_) => LayerKind::BiGru,
            Layer::Multiply => LayerKind::Multiply,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Dense(_) => LayerKind::Dense,
        }
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::BiLstm(l) => l.tensors(),
            Layer::BiGru(l) => l.tensors(),
            Layer::Multiply => Vec::new(),
            Layer::BatchNorm(l) => l.tensors(),
            Layer::Dense(l) => l.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::BiLstm(l) => l.tensors_mut(),
            Layer::BiGru(l) => l.tensors_mut(),
            Layer::Multiply => Vec::new(),
            Layer::BatchNorm(l) => l.tensors_mut(),
            Layer::Dense(l) => l.tensors_mut(),
        }
    }

    fn local_names(&self) -> Vec<String> {
        match self {
            Layer::BiLstm(l) => l.param_names(),
            Layer::BiGru(l) => l.param_names(),
            Layer::Multiply => Vec::new(),
            Layer::BatchNorm(l) => l.names().iter().map(|s| s.to_string()).collect(),
            Layer::Dense(l) => l.names().iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T: Scalar> {
    pub name: String,
    pub layer: Layer<T>,
    pub inputs: Vec<Port>,
    pub output_width: usize,
}

enum NodeCache<T: Scalar> {
    BiLstm(BidirectionalCache<T, Lstm>),
    BiGru(BidirectionalCache<T, Gru>),
    Multiply(Tensor<T>, Tensor<T>),
    BatchNorm(BatchNormCache<T>),
    Dense(DenseCache<T>),
}

struct ForwardCache<T: Scalar> {
    nodes: Vec<NodeCache<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

/// Gradients of a scalar loss, parameters in [`HybridModel::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

/// One row of the per-layer parameter breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: LayerKind,
    pub output_width: usize,
    pub params: usize,
}

pub struct HybridModel<T: Scalar> {
    config: ModelConfig,
    nodes: Vec<Node<T>>,
    /// `[start, end)` node ranges evaluated together.
    stages: Vec<(usize, usize)>,
    /// Preprocessing fitted on the training split, stored with checkpoints.
    pub scaler: Option<ScalerParams>,
    pub imputer: Option<Imputer>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Clone for HybridModel<T> {
    /// Clones parameters and metadata; a pending forward cache is dropped.
    fn clone(&self) -> Self {
        HybridModel {
            config: self.config.clone(),
            nodes: self.nodes.clone(),
            stages: self.stages.clone(),
            scaler: self.scaler.clone(),
            imputer: self.imputer.clone(),
            cache: None,
        }
    }
}

impl<T: Scalar> fmt::Debug for HybridModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridModel")
            .field("config", &self.config)
            .field("census", &self.census())
            .field("params", &self.num_scalars())
            .finish()
    }
}

impl<T: Scalar> PartialEq for HybridModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.nodes == other.nodes
            && self.scaler == other.scaler
            && self.imputer == other.imputer
    }
}

struct Builder<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn width(&self, port: Port, input: usize) -> usize {
        match port {
            Port::Input => input,
            Port::Node(i) => self.nodes[i].output_width,
        }
    }

    fn push(
        &mut self,
        name: String,
        layer: Layer<T>,
        inputs: Vec<Port>,
        output_width: usize,
    ) -> Port {
        self.nodes.push(Node {
            name,
            layer,
            inputs,
            output_width,
        });
        Port::Node(self.nodes.len() - 1)
    }

    fn bilstm(&mut self, name: String, from: Port, input: usize, units: usize) -> Port {
        let w = self.width(from, input);
        let l = Bidirectional::init(w, units, &mut self.rng);
        self.push(name, Layer::BiLstm(l), vec![from], 2 * units)
    }

    fn bigru(&mut self, name: String, from: Port, input: usize, units: usize) -> Port {
        let w = self.width(from, input);
        let l = Bidirectional::init(w, units, &mut self.rng);
        self.push(name, Layer::BiGru(l), vec![from], 2 * units)
    }

    fn batchnorm(&mut self, name: String, from: Port, input: usize) -> Port {
        let w = self.width(from, input);
        self.push(name, Layer::BatchNorm(BatchNorm::new(w)), vec![from], w)
    }

    fn dense(
        &mut self,
        name: String,
        from: Port,
        input: usize,
        out: usize,
        act: Activation,
    ) -> Port {
        let w = self.width(from, input);
        let l = Dense::init(w, out, act, &mut self.rng);
        self.push(name, Layer::Dense(l), vec![from], out)
    }
}

impl<T: Scalar> HybridModel<T> {
    /// Builds the network with weights drawn from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let f = config.input_features;
        let mut b = Builder {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let s = config.stem_units;
        let mut x = b.bilstm("stem.bilstm1".into(), Port::Input, f, s);
        x = b.bilstm("stem.bilstm2".into(), x, f, s);
        for (k, &u) in config.block_units.iter().enumerate() {
            let k = k + 1;
            let l = b.bilstm(format!("block{k}.bilstm"), x, f, u);
            let g = b.bigru(format!("block{k}.bigru"), x, f, u);
            let m = b.push(
                format!("block{k}.multiply"),
                Layer::Multiply,
                vec![l, g],
                2 * u,
            );
            x = b.batchnorm(format!("block{k}.batchnorm"), m, f);
        }
        let t = config.tail_units;
        x = b.bilstm("tail.bilstm".into(), x, f, t);
        x = b.bigru("tail.bigru".into(), x, f, t);
        x = b.batchnorm("tail.batchnorm".into(), x, f);
        if config.dense_hidden > 0 {
            x = b.dense(
                "head.hidden".into(),
                x,
                f,
                config.dense_hidden,
                Activation::Selu,
            );
        }
        b.dense("head.output".into(), x, f, 1, Activation::Linear);

        let model = HybridModel {
            config: config.clone(),
            stages: stages(&b.nodes),
            nodes: b.nodes,
            scaler: None,
            imputer: None,
            cache: None,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> Result<()> {
        let census = self.census();
        if !census.is_valid() {
            return Err(Error::Consistency(format!(
                "built model has census {census}"
            )));
        }
        for node in &self.nodes {
            if let Layer::Multiply = node.layer {
                let kinds: Vec<(LayerKind, usize)> = node
                    .inputs
                    .iter()
                    .filter_map(|p| match p {
                        Port::Node(i) => {
                            Some((self.nodes[*i].layer.kind(), self.nodes[*i].output_width))
                        }
                        Port::Input => None,
                    })
                    .collect();
                let ok = matches!(
                    kinds.as_slice(),
                    [(LayerKind::BiLstm, a), (LayerKind::BiGru, b)] if a == b
                );
                if !ok {
                    return Err(Error::Consistency(format!(
                        "{} must fuse one bilstm and one bigru of equal width",
                        node.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for n in &self.nodes {
            match n.layer.kind() {
                LayerKind::BiLstm => c.bilstm += 1,
                LayerKind::BiGru => c.bigru += 1,
                LayerKind::Multiply => c.multiply += 1,
                LayerKind::BatchNorm => c.batchnorm += 1,
                LayerKind::Dense => c.dense += 1,
            }
        }
        c
    }

    /// All parameter tensors in graph order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.nodes.iter().flat_map(|n| n.layer.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.nodes
            .iter_mut()
            .flat_map(|n| n.layer.tensors_mut())
            .collect()
    }

    /// Qualified names matching [`Self::tensors`], e.g. `block2.bigru.bwd.w_z`.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.layer
                    .local_names()
                    .into_iter()
                    .map(move |p| format!("{}.{p}", n.name))
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten_params(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let n = self.num_scalars();
        if flat.len() != n {
            return Err(Error::Dimension(format!(
                "expected {n} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        self.nodes.iter().filter_map(|n| match &n.layer {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Running means then running variances, per batchnorm in graph order.
    pub fn running_stats(&self) -> Vec<T> {
        self.batchnorms()
            .flat_map(|bn| {
                bn.running_mean
                    .data()
                    .iter()
                    .chain(bn.running_var.data())
                    .copied()
            })
            .collect()
    }

    pub fn set_running_stats(&mut self, stats: &[T]) -> Result<()> {
        let n = self.running_stats().len();
        if stats.len() != n {
            return Err(Error::Dimension(format!(
                "expected {n} running statistics, got {}",
                stats.len()
            )));
        }
        let mut offset = 0;
        for node in &mut self.nodes {
            if let Layer::BatchNorm(bn) = &mut node.layer {
                for t in [&mut bn.running_mean, &mut bn.running_var] {
                    let len = t.len();
                    t.data_mut().copy_from_slice(&stats[offset..offset + len]);
                    offset += len;
                }
            }
        }
        Ok(())
    }

    /// Momentum and epsilon of the first batchnorm layer.
    pub fn batchnorm_constants(&self) -> (T, T) {
        let bn = self
            .batchnorms()
            .next()
            .expect("model has batchnorm layers");
        (bn.momentum, bn.epsilon)
    }

    /// Sets momentum and epsilon of every batchnorm layer.
    pub fn set_batchnorm_constants(&mut self, momentum: T, epsilon: T) {
        for node in &mut self.nodes {
            if let Layer::BatchNorm(bn) = &mut node.layer {
                bn.momentum = momentum;
                bn.epsilon = epsilon;
            }
        }
    }

    pub fn layer_summary(&self) -> Vec<LayerSummary> {
        self.nodes
            .iter()
            .map(|n| LayerSummary {
                name: n.name.clone(),
                kind: n.layer.kind(),
                output_width: n.output_width,
                params: n.layer.tensors().iter().map(|t| t.len()).sum(),
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let f = self.config.input_features;
        if x.rank() != 3 || x.shape()[2] != f {
            return Err(Error::Dimension(format!(
                "model expects [batch, time, {f}] input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Train mode uses batch statistics, updates running statistics and
    /// keeps the activations for [`Self::backward`]. Infer mode is
    /// equivalent to [`Self::infer`] and discards any pending cache.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.cache = None;
        if mode == Mode::Infer {
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches: Vec<NodeCache<T>> = Vec::with_capacity(self.nodes.len());
        for &(start, end) in &self.stages {
            let results: Vec<Result<(Tensor<T>, NodeCache<T>)>> = {
                let outs = &outs;
                self.nodes[start..end]
                    .par_iter_mut()
                    .map(|node| train_node(node, x, outs))
                    .collect()
            };
            for r in results {
                let (out, cache) = r?;
                outs.push(out);
                caches.push(cache);
            }
        }
        let out = outs.pop().expect("model has nodes");
        self.cache = Some(ForwardCache {
            nodes: caches,
            input_shape: x.shape().to_vec(),
            output_shape: out.shape().to_vec(),
        });
        Ok(out)
    }

    /// Inference with running statistics. Never mutates the model, so a
    /// shared model may serve several threads.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for &(start, end) in &self.stages {
            let results: Vec<Result<Tensor<T>>> = {
                let outs = &outs;
                self.nodes[start..end]
                    .par_iter()
                    .map(|node| infer_node(node, x, outs))
                    .collect()
            };
            for r in results {
                outs.push(r?);
            }
        }
        Ok(outs.pop().expect("model has nodes"))
    }

    /// Back-propagates `grad_out` (gradient of the loss w.r.t. the last
    /// train-mode output) through the graph in reverse. Consumes the cache.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<ModelGradients<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward needs a preceding train-mode forward".into()))?;
        if grad_out.shape() != cache.output_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                cache.output_shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(grad_out.clone());
        let mut grad_input = Tensor::zeros(&cache.input_shape);
        let mut param_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); n];

        for &(start, end) in self.stages.iter().rev() {
            let upstream: Vec<Option<Tensor<T>>> =
                grads[start..end].iter_mut().map(Option::take).collect();
            let results: Vec<Result<NodeGrads<T>>> = self.nodes[start..end]
                .par_iter()
                .zip(&cache.nodes[start..end])
                .zip(upstream)
                .map(|((node, nc), g)| backward_node(node, nc, g))
                .collect();
            for (offset, r) in results.into_iter().enumerate() {
                let i = start + offset;
                let (input_grads, pg) = r?;
                param_grads[i] = pg;
                for (port, g) in self.nodes[i].inputs.iter().zip(input_grads) {
                    match *port {
                        Port::Input => grad_input.add_assign(&g)?,
                        Port::Node(j) => match &mut grads[j] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot => *slot = Some(g),
                        },
                    }
                }
            }
        }
        Ok(ModelGradients {
            params: param_grads.into_iter().flatten().collect(),
            input: grad_input,
        })
    }

    /// Whether a train-mode forward is waiting for its backward pass.
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn cast<U: Scalar>(&self) -> HybridModel<U> {
        let mut out = HybridModel::<U>::build(&self.config).expect("config already validated");
        let flat: Vec<U> = self
            .flatten_params()
            .into_iter()
            .map(|v| U::lit(v.as_f64()))
            .collect();
        out.set_flat_params(&flat).expect("same topology");
        let stats: Vec<U> = self
            .running_stats()
            .into_iter()
            .map(|v| U::lit(v.as_f64()))
            .collect();
        out.set_running_stats(&stats).expect("same topology");
        let (momentum, epsilon) = self.batchnorm_constants();
        out.set_batchnorm_constants(U::lit(momentum.as_f64()), U::lit(epsilon.as_f64()));
        out.scaler = self.scaler.clone();
        out.imputer = self.imputer.clone();
        out
    }
}

fn stages<T: Scalar>(nodes: &[Node<T>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, node) in nodes.iter().enumerate() {
        let reads_current = node
            .inputs
            .iter()
            .any(|p| matches!(*p, Port::Node(j) if j >= start));
        if reads_current {
            out.push((start, i));
            start = i;
        }
    }
    out.push((start, nodes.len()));
    out
}

fn port<'a, T: Scalar>(p: Port, x: &'a Tensor<T>, outs: &'a [Tensor<T>]) -> &'a Tensor<T> {
    match p {
        Port::Input => x,
        Port::Node(i) => &outs[i],
    }
}

fn train_node<T: Scalar>(
    node: &mut Node<T>,
    x: &Tensor<T>,
    outs: &[Tensor<T>],
) -> Result<(Tensor<T>, NodeCache<T>)> {
    let a = port(node.inputs[0], x, outs);
    Ok(match &mut node.layer {
        Layer::BiLstm(l) => {
            let (y, c) = l.forward(a)?;
            (y, NodeCache::BiLstm(c))
        }
        Layer::BiGru(l) => {
            let (y, c) = l.forward(a)?;
            (y, NodeCache::BiGru(c))
        }
        Layer::Multiply => {
            let b = port(node.inputs[1], x, outs);
            (
                multiply_forward(a, b)?,
                NodeCache::Multiply(a.clone(), b.clone()),
            )
        }
        Layer::BatchNorm(bn) => {
            let (y, c) = bn.forward(a, Mode::Train)?;
            (y, NodeCache::BatchNorm(c))
        }
        Layer::Dense(d) => {
            let (y, c) = d.forward(a)?;
            (y, NodeCache::Dense(c))
        }
    })
}

fn infer_node<T: Scalar>(node: &Node<T>, x: &Tensor<T>, outs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let a = port(node.inputs[0], x, outs);
    match &node.layer {
        Layer::BiLstm(l) => Ok(l.forward(a)?.0),
        Layer::BiGru(l) => Ok(l.forward(a)?.0),
        Layer::Multiply => multiply_forward(a, port(node.inputs[1], x, outs)),
        Layer::BatchNorm(bn) => bn.infer(a),
        Layer::Dense(d) => d.infer(a),
    }
}

/// Input gradients per port, then parameter gradients.
type NodeGrads<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

fn backward_node<T: Scalar>(
    node: &Node<T>,
    cache: &NodeCache<T>,
    grad: Option<Tensor<T>>,
) -> Result<NodeGrads<T>> {
    let grad =
        grad.ok_or_else(|| Error::Consistency(format!("{} received no gradient", node.name)))?;
    let owned = |ts: Vec<&Tensor<T>>| ts.into_iter().cloned().collect::<Vec<_>>();
    Ok(match (&node.layer, cache) {
        (Layer::BiLstm(l), NodeCache::BiLstm(c)) => {
            let (dx, g) = l.backward(c, &grad)?;
            (vec![dx], owned(g.tensors()))
        }
        (Layer::BiGru(l), NodeCache::BiGru(c)) => {
            let (dx, g) = l.backward(c, &grad)?;
            (vec![dx], owned(g.tensors()))
        }
        (Layer::Multiply, NodeCache::Multiply(a, b)) => {
            let (da, db) = multiply_backward(a, b, &grad)?;
            (vec![da, db], Vec::new())
        }
        (Layer::BatchNorm(bn), NodeCache::BatchNorm(c)) => {
            let (dx, dg, db) = bn.backward(c, &grad)?;
            (vec![dx], vec![dg, db])
        }
        (Layer::Dense(d), NodeCache::Dense(c)) => {
            let (dx, dw, db) = d.backward(c, &grad)?;
            (vec![dx], vec![dw, db])
        }
        _ => {
            return Err(Error::Consistency(format!(
                "{}: cache does not match layer",
                node.name
            )))
        }
    })
}

/// Parameters of one direction of an LSTM layer.
pub fn lstm_param_count(input: usize, hidden: usize) -> usize {
    4 * (input * hidden + hidden * hidden + hidden)
}

/// Parameters of one direction of a GRU layer.
pub fn gru_param_count(input: usize, hidden: usize) -> usize {
    3 * (hidden * (hidden + input) + hidden)
}

/// Learnable scale and shift only; running statistics are not parameters.
pub fn batchnorm_param_count(features: usize) -> usize {
    2 * features
}

pub fn dense_param_count(input: usize, output: usize) -> usize {
    output * (input + 1)
}

/// Closed-form parameter count of the network built from `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    let bilstm = |i, h| 2 * lstm_param_count(i, h);
    let bigru = |i, h| 2 * gru_param_count(i, h);
    let s = config.stem_units;
    let mut total = bilstm(config.input_features, s) + bilstm(2 * s, s);
    let mut width = 2 * s;
    for &u in &config.block_units {
        total += bilstm(width, u) + bigru(width, u) + batchnorm_param_count(2 * u);
        width = 2 * u;
    }
    let t = config.tail_units;
    total += bilstm(width, t) + bigru(2 * t, t) + batchnorm_param_count(2 * t);
    width = 2 * t;
    if config.dense_hidden > 0 {
        total += dense_param_count(width, config.dense_hidden);
        width = config.dense_hidden;
    }
    total + dense_param_count(width, 1)
}
