//! Message-passing graph encoders with sum readout.
//!
//! Three layer types are available:
//!
//! * `TAG`: `H' = sum_{k=0..K} Â^k H W_k + b`
//! * `GCN`: `H' = Â H W + b`
//! * `GIN`: `H' = MLP(H + A H)` with a two-layer perceptron
//!
//! where `Â = D^-1/2 (A + I) D^-1/2`. Hidden layers are followed by relu; the
//! final layer is linear. The graph embedding is the sum of final node rows.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::MolGraph;
use crate::featurize::{graph_features, FeatureError, FeatureVocab};
use crate::ndiff::{SparseMatrix, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("cannot encode an empty molecule set")]
    EmptySet,
    #[error("graph has no atoms")]
    EmptyGraph,
    #[error("invalid encoder layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "TAG")]
    Tag,
    #[serde(rename = "GCN")]
    Gcn,
    #[serde(rename = "GIN")]
    Gin,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Tag => "TAG",
            Architecture::Gcn => "GCN",
            Architecture::Gin => "GIN",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TAG" => Ok(Architecture::Tag),
            "GCN" => Ok(Architecture::Gcn),
            "GIN" => Ok(Architecture::Gin),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

/// Shape description of an encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub arch: Architecture,
    /// Layer widths, input first: `dims.len() == layers + 1`.
    pub dims: Vec<usize>,
    /// Propagation hops per TAG layer.
    pub k_hops: usize,
}

impl EncoderSpec {
    pub fn new(
        arch: Architecture,
        input_dim: usize,
        hidden: usize,
        output: usize,
        layers: usize,
        k_hops: usize,
    ) -> Self {
        let mut dims = vec![input_dim];
        for _ in 1..layers {
            dims.push(hidden);
        }
        dims.push(output);
        EncoderSpec { arch, dims, k_hops }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least one layer")
    }

    /// Names and shapes of every weight tensor, in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for l in 0..self.layers() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            match self.arch {
                Architecture::Tag => {
                    for k in 0..=self.k_hops {
                        out.push((format!("layer{l}.hop{k}.weight"), (din, dout)));
                    }
                    out.push((format!("layer{l}.bias"), (1, dout)));
                }
                Architecture::Gcn => {
                    out.push((format!("layer{l}.weight"), (din, dout)));
                    out.push((format!("layer{l}.bias"), (1, dout)));
                }
                Architecture::Gin => {
                    out.push((format!("layer{l}.mlp0.weight"), (din, dout)));
                    out.push((format!("layer{l}.mlp0.bias"), (1, dout)));
                    out.push((format!("layer{l}.mlp1.weight"), (dout, dout)));
                    out.push((format!("layer{l}.mlp1.bias"), (1, dout)));
                }
            }
        }
        out
    }

    fn per_layer(&self) -> usize {
        match self.arch {
            Architecture::Tag => self.k_hops + 2,
            Architecture::Gcn => 2,
            Architecture::Gin => 4,
        }
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(EncoderError::InvalidLayout(format!("dims {:?}", self.dims)));
        }
        Ok(())
    }
}

/// Encoder weights laid out as [`EncoderSpec::tensor_layout`] describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub weights: Vec<Tensor>,
}

impl EncoderParams {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization; biases use
    /// the fan-in of their layer.
    pub fn init<R: Rng>(spec: EncoderSpec, rng: &mut R) -> Result<Self, EncoderError> {
        spec.validate()?;
        let mut weights = Vec::new();
        for l in 0..spec.layers() {
            let fan_in = spec.dims[l];
            for (_, (r, c)) in spec
                .tensor_layout()
                .into_iter()
                .skip(l * spec.per_layer())
                .take(spec.per_layer())
            {
                let fan = if r == 1 { fan_in } else { r };
                weights.push(Tensor::uniform_init(r, c, fan, rng));
            }
        }
        Ok(EncoderParams { spec, weights })
    }

    pub fn zeros(spec: EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        let weights = spec
            .tensor_layout()
            .into_iter()
            .map(|(_, (r, c))| Tensor::zeros(r, c))
            .collect();
        Ok(EncoderParams { spec, weights })
    }

    pub fn from_weights(spec: EncoderSpec, weights: Vec<Tensor>) -> Result<Self, EncoderError> {
        spec.validate()?;
        let layout = spec.tensor_layout();
        if layout.len() != weights.len() {
            return Err(EncoderError::InvalidLayout(format!(
                "expected {} tensors, got {}",
                layout.len(),
                weights.len()
            )));
        }
        for ((name, shape), w) in layout.iter().zip(&weights) {
            if *shape != w.shape() {
                return Err(EncoderError::InvalidLayout(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    w.shape()
                )));
            }
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(EncoderError::InvalidLayout("non-finite weight".into()));
        }
        Ok(EncoderParams { spec, weights })
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }
}

/// `D^-1/2 (A + I) D^-1/2` as dense matrix.
pub fn normalized_adjacency(g: &MolGraph) -> Tensor {
    let n = g.atoms.len();
    SparseMatrix::from_triplets(n, n, normalized_entries(g)).to_dense()
}

fn normalized_entries(g: &MolGraph) -> Vec<(usize, usize, f64)> {
    let n = g.atoms.len();
    let mut degree = vec![1.0f64; n];
    for b in &g.bonds {
        degree[b.a] += 1.0;
        degree[b.b] += 1.0;
    }
    let mut out = Vec::with_capacity(n + 2 * g.bonds.len());
    for (i, d) in degree.iter().enumerate() {
        out.push((i, i, 1.0 / d));
    }
    for b in &g.bonds {
        let w = 1.0 / (degree[b.a] * degree[b.b]).sqrt();
        out.push((b.a, b.b, w));
        out.push((b.b, b.a, w));
    }
    out
}

fn raw_entries(g: &MolGraph) -> Vec<(usize, usize, f64)> {
    g.bonds
        .iter()
        .flat_map(|b| [(b.a, b.b, 1.0), (b.b, b.a, 1.0)])
        .collect()
}

/// A featurized graph ready to be batched.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub features: Tensor,
    norm_adj: Vec<(usize, usize, f64)>,
    adj: Vec<(usize, usize, f64)>,
}

impl GraphInput {
    pub fn new(g: &MolGraph, vocab: &FeatureVocab) -> Result<Self, EncoderError> {
        if g.atoms.is_empty() {
            return Err(EncoderError::EmptyGraph);
        }
        Ok(GraphInput {
            features: graph_features(g, vocab)?,
            norm_adj: normalized_entries(g),
            adj: raw_entries(g),
        })
    }

    pub fn atom_count(&self) -> usize {
        self.features.rows()
    }
}

/// Several graphs stacked into one block-diagonal problem.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Tensor,
    /// Row offsets: graph `i` owns rows `offsets[i]..offsets[i + 1]`.
    pub offsets: Rc<Vec<usize>>,
    pub norm_adj: Rc<SparseMatrix>,
    pub adj: Rc<SparseMatrix>,
}

impl GraphBatch {
    pub fn new(graphs: &[&GraphInput]) -> Result<Self, EncoderError> {
        let Some(first) = graphs.first() else {
            return Err(EncoderError::EmptySet);
        };
        let d = first.features.cols();
        let mut offsets = vec![0usize];
        let mut data = Vec::new();
        let mut norm = Vec::new();
        let mut adj = Vec::new();
        for g in graphs {
            if g.features.cols() != d {
                return Err(EncoderError::DimMismatch {
                    expected: d,
                    actual: g.features.cols(),
                });
            }
            let base = *offsets.last().expect("non-empty");
            data.extend_from_slice(g.features.data());
            norm.extend(g.norm_adj.iter().map(|&(i, j, w)| (base + i, base + j, w)));
            adj.extend(g.adj.iter().map(|&(i, j, w)| (base + i, base + j, w)));
            offsets.push(base + g.atom_count());
        }
        let n = *offsets.last().expect("non-empty");
        Ok(GraphBatch {
            features: Tensor::new(n, d, data)?,
            offsets: Rc::new(offsets),
            norm_adj: Rc::new(SparseMatrix::from_triplets(n, n, norm)),
            adj: Rc::new(SparseMatrix::from_triplets(n, n, adj)),
        })
    }

    pub fn graph_count(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Records the encoder on `tape`. `weights` must follow the spec's layout.
/// Returns final-layer node embeddings and the per-graph sum readout.
pub fn forward<'t>(
    tape: &'t Tape,
    spec: &EncoderSpec,
    weights: &[Var<'t>],
    batch: &GraphBatch,
) -> Result<(Var<'t>, Var<'t>), EncoderError> {
    if batch.features.cols() != spec.input_dim() {
        return Err(EncoderError::DimMismatch {
            expected: spec.input_dim(),
            actual: batch.features.cols(),
        });
    }
    let per = spec.per_layer();
    let mut h = tape.constant(&batch.features);
    for l in 0..spec.layers() {
        let w = &weights[l * per..(l + 1) * per];
        let out = match spec.arch {
            Architecture::Tag => {
                let mut hop = h;
                let mut acc = hop.matmul(w[0])?;
                for wk in &w[1..=spec.k_hops] {
                    hop = hop.spmm(batch.norm_adj.clone())?;
                    acc = acc.add(hop.matmul(*wk)?)?;
                }
                acc.add_row(w[spec.k_hops + 1])?
            }
            Architecture::Gcn => h.spmm(batch.norm_adj.clone())?.matmul(w[0])?.add_row(w[1])?,
            Architecture::Gin => {
                let agg = h.add(h.spmm(batch.adj.clone())?)?;
                let hidden = agg.matmul(w[0])?.add_row(w[1])?.relu();
                hidden.matmul(w[2])?.add_row(w[3])?
            }
        };
        h = if l + 1 < spec.layers() { out.relu() } else { out };
    }
    let readout = h.segment_sum(batch.offsets.clone())?;
    Ok((h, readout))
}

/// Places encoder weights on the tape as differentiable leaves.
pub fn param_vars<'t>(tape: &'t Tape, params: &EncoderParams) -> Vec<Var<'t>> {
    params.weights.iter().map(|w| tape.param(w)).collect()
}

fn frozen(params: &EncoderParams, batch: &GraphBatch) -> Result<(Tensor, Tensor), EncoderError> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.weights.iter().map(|w| tape.constant(w)).collect();
    let (nodes, graphs) = forward(&tape, &params.spec, &vars, batch)?;
    Ok((nodes.value(), graphs.value()))
}

/// Graph embeddings (one row per input) without recording gradients.
pub fn encode_inputs(inputs: &[&GraphInput], params: &EncoderParams) -> Result<Tensor, EncoderError> {
    Ok(frozen(params, &GraphBatch::new(inputs)?)?.1)
}

/// Embedding of a single molecule.
pub fn encode_graph(g: &MolGraph, vocab: &FeatureVocab, params: &EncoderParams) -> Result<Vec<f64>, EncoderError> {
    let input = GraphInput::new(g, vocab)?;
    Ok(encode_inputs(&[&input], params)?.into_data())
}

/// Final-layer node embeddings of one molecule, one row per atom.
pub fn node_embeddings(g: &MolGraph, vocab: &FeatureVocab, params: &EncoderParams) -> Result<Tensor, EncoderError> {
    let input = GraphInput::new(g, vocab)?;
    Ok(frozen(params, &GraphBatch::new(&[&input])?)?.0)
}

/// Elementwise sum of the embeddings of every molecule in the set.
pub fn encode_molecule_set(
    graphs: &[MolGraph],
    vocab: &FeatureVocab,
    params: &EncoderParams,
) -> Result<Vec<f64>, EncoderError> {
    if graphs.is_empty() {
        return Err(EncoderError::EmptySet);
    }
    let inputs = graphs
        .iter()
        .map(|g| GraphInput::new(g, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&GraphInput> = inputs.iter().collect();
    let emb = encode_inputs(&refs, params)?;
    let mut out = vec![0.0; emb.cols()];
    for r in 0..emb.rows() {
        out.iter_mut().zip(emb.row(r)).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}
