//! Feature extractor, class classifier, and domain classifier.
//!
//! The model factors as g = c . f: an extractor mapping inputs to K-dim
//! features, a class head over the features, and a domain head with the
//! same hidden layout but N output logits.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Architecture of the extractor and the two heads.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    #[serde(default = "default_extractor_hidden")]
    pub extractor_hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    pub num_classes: usize,
    pub num_domains: usize,
}

fn default_extractor_hidden() -> Vec<usize> {
    vec![64]
}

fn default_feature_dim() -> usize {
    32
}

fn default_head_hidden() -> Vec<usize> {
    vec![32]
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.num_domains == 0 {
            return Err(Error::invalid("widths must be >= 1".to_string()));
        }
        if self.feature_dim < 2 {
            return Err(Error::invalid(
                "feature_dim must be >= 2 (decomposition needs at least 2 dims)".to_string(),
            ));
        }
        if self.extractor_hidden.iter().any(|&w| w == 0) || self.head_hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable tensors, grouped by sub-network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: Vec<Layer>,
    pub class_head: Vec<Layer>,
    pub domain_head: Vec<Layer>,
}

/// Which head a forward pass should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Class,
    Domain,
}

impl ModelParams {
    /// Xavier-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
    /// Deterministic for a given rng state.
    pub fn init(config: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let extractor = init_stack(&layer_dims(
            config.input_dim,
            &config.extractor_hidden,
            config.feature_dim,
        ), rng)?;
        let class_head = init_stack(&layer_dims(
            config.feature_dim,
            &config.head_hidden,
            config.num_classes,
        ), rng)?;
        let domain_head = init_stack(&layer_dims(
            config.feature_dim,
            &config.head_hidden,
            config.num_domains,
        ), rng)?;
        Ok(ModelParams {
            extractor,
            class_head,
            domain_head,
        })
    }

    /// Flat view of all parameter tensors in a fixed, documented order:
    /// extractor layers first, then class head, then domain head, with
    /// weight before bias within each layer.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (group, layers) in [
            ("extractor", &self.extractor),
            ("class_head", &self.class_head),
            ("domain_head", &self.domain_head),
        ] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{}.{}.weight", group, i), &l.weight));
                out.push((format!("{}.{}.bias", group, i), &l.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layers in [
            &mut self.extractor,
            &mut self.class_head,
            &mut self.domain_head,
        ] {
            for l in layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Forward through the extractor without a graph.
    pub fn extract_plain(&self, x: &Tensor) -> Result<Tensor> {
        forward_plain(&self.extractor, x)
    }

    pub fn classify_plain(&self, z: &Tensor) -> Result<Tensor> {
        forward_plain(&self.class_head, z)
    }

    pub fn domain_classify_plain(&self, z: &Tensor) -> Result<Tensor> {
        forward_plain(&self.domain_head, z)
    }

    pub fn head_plain(&self, head: Head, z: &Tensor) -> Result<Tensor> {
        match head {
            Head::Class => self.classify_plain(z),
            Head::Domain => self.domain_classify_plain(z),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut prev = input;
    for &h in hidden {
        dims.push((prev, h));
        prev = h;
    }
    dims.push((prev, output));
    dims
}

fn init_stack(dims: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<Vec<Layer>> {
    dims.iter()
        .map(|&(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Ok(Layer {
                weight: Tensor::new(vec![fan_in, fan_out], data)?,
                bias: Tensor::zeros(vec![fan_out]),
            })
        })
        .collect()
}

fn forward_plain(layers: &[Layer], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        let mut out = h.matmul(&layer.weight)?;
        let w = out.cols();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v += layer.bias.data()[j % w];
        }
        if i + 1 < layers.len() {
            for v in out.data_mut() {
                *v = v.max(0.0);
            }
        }
        h = out;
    }
    Ok(h)
}

/// Node ids of one sub-network's parameters bound into a graph.
pub type LayerNodes = Vec<(NodeId, NodeId)>;

/// Parameter leaves of a model bound into one differentiation graph.
pub struct BoundModel {
    pub extractor: LayerNodes,
    pub class_head: LayerNodes,
    pub domain_head: LayerNodes,
}

impl BoundModel {
    /// Insert every parameter tensor as a graph leaf.
    pub fn bind(graph: &mut Graph, params: &ModelParams) -> Result<Self> {
        let bind_stack = |graph: &mut Graph, layers: &[Layer]| -> Result<LayerNodes> {
            layers
                .iter()
                .map(|l| {
                    let w = graph.leaf(l.weight.clone())?;
                    let b = graph.leaf(l.bias.clone())?;
                    Ok((w, b))
                })
                .collect()
        };
        Ok(BoundModel {
            extractor: bind_stack(graph, &params.extractor)?,
            class_head: bind_stack(graph, &params.class_head)?,
            domain_head: bind_stack(graph, &params.domain_head)?,
        })
    }

    pub fn extract(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        forward_stack(graph, &self.extractor, x)
    }

    pub fn classify(&self, graph: &mut Graph, z: NodeId) -> Result<NodeId> {
        forward_stack(graph, &self.class_head, z)
    }

    pub fn domain_classify(&self, graph: &mut Graph, z: NodeId) -> Result<NodeId> {
        forward_stack(graph, &self.domain_head, z)
    }

    pub fn head(&self, graph: &mut Graph, which: Head, z: NodeId) -> Result<NodeId> {
        match which {
            Head::Class => self.classify(graph, z),
            Head::Domain => self.domain_classify(graph, z),
        }
    }

    /// Parameter node ids in the same order as [`ModelParams::tensors_mut`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for layers in [&self.extractor, &self.class_head, &self.domain_head] {
            for &(w, b) in layers.iter() {
                out.push(w);
                out.push(b);
            }
        }
        out
    }
}

fn forward_stack(graph: &mut Graph, layers: &LayerNodes, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = graph.matmul(h, w)?;
        h = graph.add_bias(h, b)?;
        if i + 1 < layers.len() {
            h = graph.relu(h)?;
        }
    }
    Ok(h)
}
