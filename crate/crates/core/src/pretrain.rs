//! Reaction-aware pre-training with a yield-scaled margin loss, plus the
//! product-ranking and nearest-neighbour protocols used to evaluate it.
//!
//! For a minibatch of reactions with reactant embedding sums `R_i`, product
//! embedding sums `P_i` and yields `y_i`, the loss is
//!
//! ```text
//! L = 1 / (B (B - 1)) * sum_i sum_{j != i} max(f(R_i, P_i) - f(R_i, P_j) + y_i^alpha * gamma, 0)
//! ```
//!
//! with `f(R, P) = ||R - P||_2`. Only products are corrupted.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{to_smiles, MolGraph, ReactionRecord};
use crate::encoder::{
    encode_inputs, forward, param_vars, Architecture, EncoderError, EncoderParams, EncoderSpec, GraphBatch, GraphInput,
};
use crate::featurize::FeatureVocab;
use crate::ndiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("margin loss needs at least 2 reactions per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("no candidates to rank")]
    EmptyCandidates,
    #[error("target index {0} out of range")]
    BadTarget(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("dataset contains no reactions")]
    EmptyDataset,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// gamma
    pub margin: f64,
    /// alpha; 0 removes the yield from the margin
    pub yield_exponent: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub arch: Architecture,
    pub layers: usize,
    pub k_hops: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            margin: 6.0,
            yield_exponent: 2.0,
            batch_size: 32,
            epochs: 200,
            adam: AdamConfig::default(),
            arch: Architecture::Tag,
            layers: 2,
            k_hops: 3,
            hidden_dim: 64,
            embedding_dim: 64,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Large-scale settings: 2048-dim output, batch 4094, 20 epochs, lr 1e-4.
    pub fn full_scale() -> Self {
        PretrainConfig {
            batch_size: 4094,
            epochs: 20,
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            embedding_dim: 2048,
            hidden_dim: 2048,
            ..PretrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.to_string()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.yield_exponent >= 0.0) {
            return bad("yield exponent must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.layers == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 {
            return bad("layers and dimensions must be positive");
        }
        if !(self.adam.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    pub fn encoder_spec(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec::new(
            self.arch,
            input_dim,
            self.hidden_dim,
            self.embedding_dim,
            self.layers,
            self.k_hops,
        )
    }
}

/// `||R - P||_2`.
pub fn reaction_score(reactants: &[f64], products: &[f64]) -> Result<f64, PretrainError> {
    if reactants.len() != products.len() {
        return Err(PretrainError::DimMismatch(reactants.len(), products.len()));
    }
    Ok(reactants
        .iter()
        .zip(products)
        .map(|(r, p)| (r - p) * (r - p))
        .sum::<f64>()
        .sqrt())
}

/// Yield-scaled margin loss over `B x d` reactant sums and product sums.
pub fn margin_loss<'t>(
    reactants: Var<'t>,
    products: Var<'t>,
    yields: &[f64],
    margin: f64,
    yield_exponent: f64,
) -> Result<Var<'t>, PretrainError> {
    let (b, d) = reactants.shape();
    if products.shape() != (b, d) {
        return Err(PretrainError::DimMismatch(d, products.shape().1));
    }
    if yields.len() != b {
        return Err(PretrainError::DimMismatch(b, yields.len()));
    }
    if b < 2 {
        return Err(PretrainError::BatchTooSmall(b));
    }
    let tape = reactants.tape();
    let dist = reactants.pairwise_l2(products)?;
    // row i of (dist ∘ I) J is the positive distance f(R_i, P_i)
    let positive = dist
        .mul(tape.constant_owned(Tensor::identity(b)))?
        .matmul(tape.constant_owned(Tensor::filled(b, b, 1.0)))?;
    let mut margins = Tensor::zeros(b, b);
    let mut off_diag = Tensor::filled(b, b, 1.0);
    for i in 0..b {
        let m = yields[i].powf(yield_exponent) * margin;
        for j in 0..b {
            margins.set(i, j, m);
        }
        off_diag.set(i, i, 0.0);
    }
    let hinge = positive
        .sub(dist)?
        .add(tape.constant_owned(margins))?
        .relu()
        .mul(tape.constant_owned(off_diag))?;
    Ok(hinge.sum().scale(1.0 / (b * (b - 1)) as f64))
}

/// Molecules deduplicated by serialized SMILES, with reactions as index lists.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub inputs: Vec<GraphInput>,
    pub keys: Vec<String>,
    pub reactions: Vec<PreparedReaction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedReaction {
    pub reactants: Vec<usize>,
    pub products: Vec<usize>,
    pub yield_fraction: f64,
}

impl PreparedCorpus {
    pub fn new(reactions: &[ReactionRecord], vocab: &FeatureVocab) -> Result<Self, PretrainError> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut corpus = PreparedCorpus {
            inputs: Vec::new(),
            keys: Vec::new(),
            reactions: Vec::new(),
        };
        let mut intern = |g: &MolGraph, corpus: &mut PreparedCorpus| -> Result<usize, PretrainError> {
            let key = to_smiles(g);
            if let Some(&i) = index.get(&key) {
                return Ok(i);
            }
            corpus.inputs.push(GraphInput::new(g, vocab)?);
            corpus.keys.push(key.clone());
            index.insert(key, corpus.inputs.len() - 1);
            Ok(corpus.inputs.len() - 1)
        };
        for r in reactions {
            let reactants = r
                .reactants
                .iter()
                .map(|g| intern(g, &mut corpus))
                .collect::<Result<Vec<_>, _>>()?;
            let products = r
                .products
                .iter()
                .map(|g| intern(g, &mut corpus))
                .collect::<Result<Vec<_>, _>>()?;
            corpus.reactions.push(PreparedReaction {
                reactants,
                products,
                yield_fraction: r.yield_fraction,
            });
        }
        Ok(corpus)
    }

    /// Records reactant and product sums (`B x d` each) for the given
    /// reactions on `tape`.
    fn sums_on_tape<'t>(
        &self,
        tape: &'t Tape,
        spec: &EncoderSpec,
        weights: &[Var<'t>],
        batch: &[usize],
    ) -> Result<(Var<'t>, Var<'t>), PretrainError> {
        let mut local: BTreeMap<usize, usize> = BTreeMap::new();
        for &r in batch {
            let rx = &self.reactions[r];
            for &m in rx.reactants.iter().chain(&rx.products) {
                let next = local.len();
                local.entry(m).or_insert(next);
            }
        }
        let mut order = vec![0usize; local.len()];
        for (&m, &slot) in &local {
            order[slot] = m;
        }
        let inputs: Vec<&GraphInput> = order.iter().map(|&m| &self.inputs[m]).collect();
        let graph_batch = GraphBatch::new(&inputs)?;
        let (_, emb) = forward(tape, spec, weights, &graph_batch)?;

        let u = order.len();
        let mut pick_r = Tensor::zeros(batch.len(), u);
        let mut pick_p = Tensor::zeros(batch.len(), u);
        for (row, &r) in batch.iter().enumerate() {
            let rx = &self.reactions[r];
            for m in &rx.reactants {
                let c = local[m];
                pick_r.set(row, c, pick_r.get(row, c) + 1.0);
            }
            for m in &rx.products {
                let c = local[m];
                pick_p.set(row, c, pick_p.get(row, c) + 1.0);
            }
        }
        let r = tape.constant_owned(pick_r).matmul(emb)?;
        let p = tape.constant_owned(pick_p).matmul(emb)?;
        Ok((r, p))
    }

    fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        spec: &EncoderSpec,
        weights: &[Var<'t>],
        batch: &[usize],
        cfg: &PretrainConfig,
    ) -> Result<Var<'t>, PretrainError> {
        if batch.len() < 2 {
            return Err(PretrainError::BatchTooSmall(batch.len()));
        }
        let (r, p) = self.sums_on_tape(tape, spec, weights, batch)?;
        let yields: Vec<f64> = batch.iter().map(|&i| self.reactions[i].yield_fraction).collect();
        margin_loss(r, p, &yields, cfg.margin, cfg.yield_exponent)
    }
}

/// Margin loss of one batch of reactions under frozen `params`.
pub fn gtranse_batch_loss(
    batch: &[ReactionRecord],
    vocab: &FeatureVocab,
    params: &EncoderParams,
    cfg: &PretrainConfig,
) -> Result<f64, PretrainError> {
    if batch.len() < 2 {
        return Err(PretrainError::BatchTooSmall(batch.len()));
    }
    let corpus = PreparedCorpus::new(batch, vocab)?;
    let tape = Tape::new();
    let weights: Vec<Var<'_>> = params.weights.iter().map(|w| tape.constant(w)).collect();
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(corpus.batch_loss(&tape, &params.spec, &weights, &idx, cfg)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// `epoch<TAB>mean_loss` lines, one per epoch.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::new();
    for e in log {
        writeln!(out, "{}\t{}", e.epoch, e.mean_loss).expect("string write");
    }
    out
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<EpochLog>,
}

/// Seeded encoder initialization shared by training and baselines.
pub fn initial_params(cfg: &PretrainConfig, vocab: &FeatureVocab) -> Result<EncoderParams, PretrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(EncoderParams::init(cfg.encoder_spec(vocab.total_dim()), &mut rng)?)
}

/// Trains an encoder on `dataset` with Adam. Each epoch shuffles with the
/// seeded generator and splits into batches of `cfg.batch_size`; a trailing
/// batch of one reaction is dropped.
pub fn run_pretrain(
    dataset: &[ReactionRecord],
    vocab: &FeatureVocab,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome, PretrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    let corpus = PreparedCorpus::new(dataset, vocab)?;
    run_pretrain_prepared(&corpus, vocab, cfg)
}

pub fn run_pretrain_prepared(
    corpus: &PreparedCorpus,
    vocab: &FeatureVocab,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome, PretrainError> {
    cfg.validate()?;
    if corpus.reactions.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = EncoderParams::init(cfg.encoder_spec(vocab.total_dim()), &mut rng)?;
    let mut adam = AdamState::new(cfg.adam, &params.weights);
    let mut order: Vec<usize> = (0..corpus.reactions.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let vars = param_vars(&tape, &params);
            let loss = corpus.batch_loss(&tape, &params.spec, &vars, batch, cfg)?;
            total += loss.item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            adam_step(&mut params.weights, &g, &mut adam)?;
        }
        let mean_loss = if batches == 0 { 0.0 } else { total / batches as f64 };
        log.push(EpochLog { epoch, mean_loss });
    }
    Ok(PretrainOutcome { params, log })
}

/// Graph embeddings for every prepared molecule, encoded in parallel chunks.
pub fn embed_inputs(inputs: &[GraphInput], params: &EncoderParams) -> Result<Vec<Vec<f64>>, PretrainError> {
    let chunks: Vec<Result<Vec<Vec<f64>>, PretrainError>> = inputs
        .par_chunks(64)
        .map(|chunk| {
            let refs: Vec<&GraphInput> = chunk.iter().collect();
            Ok(encode_inputs(&refs, params)?.to_rows())
        })
        .collect();
    let mut out = Vec::with_capacity(inputs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Pessimistic rank of `candidates[target]` by L2 distance to `query`:
/// `1 + #closer + #other candidates tied with the target`.
pub fn rank_by_distance(query: &[f64], candidates: &[Vec<f64>], target: usize) -> Result<usize, PretrainError> {
    if candidates.is_empty() {
        return Err(PretrainError::EmptyCandidates);
    }
    if target >= candidates.len() {
        return Err(PretrainError::BadTarget(target));
    }
    let dists = candidates
        .iter()
        .map(|c| reaction_score(query, c))
        .collect::<Result<Vec<_>, _>>()?;
    let t = dists[target];
    let ahead = dists
        .iter()
        .enumerate()
        .filter(|&(i, &d)| d < t || (d == t && i != target))
        .count();
    Ok(1 + ahead)
}

/// Ranks the target product set among `candidates` for the given reactants.
pub fn rank_products(
    reactants: &[MolGraph],
    candidates: &[Vec<MolGraph>],
    target: usize,
    vocab: &FeatureVocab,
    params: &EncoderParams,
) -> Result<usize, PretrainError> {
    if candidates.is_empty() {
        return Err(PretrainError::EmptyCandidates);
    }
    let query = crate::encoder::encode_molecule_set(reactants, vocab, params)?;
    let cands = candidates
        .iter()
        .map(|c| crate::encoder::encode_molecule_set(c, vocab, params))
        .collect::<Result<Vec<_>, _>>()?;
    rank_by_distance(&query, &cands, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub ranks: Vec<usize>,
    pub mrr: f64,
    pub mr: f64,
    #[serde(rename = "hit@1")]
    pub hit_at_1: f64,
    #[serde(rename = "hit@3")]
    pub hit_at_3: f64,
    #[serde(rename = "hit@5")]
    pub hit_at_5: f64,
    #[serde(rename = "hit@10")]
    pub hit_at_10: f64,
}

pub fn ranking_metrics(ranks: &[usize]) -> Result<RankingResult, PretrainError> {
    if ranks.is_empty() {
        return Err(PretrainError::EmptyInput);
    }
    if ranks.contains(&0) {
        return Err(PretrainError::InvalidConfig("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let hit = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankingResult {
        ranks: ranks.to_vec(),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        mr: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        hit_at_1: hit(1),
        hit_at_3: hit(3),
        hit_at_5: hit(5),
        hit_at_10: hit(10),
    })
}

/// Ranks every reaction's product set against the deduplicated product sets
/// of the whole evaluation corpus.
pub fn evaluate_corpus(corpus: &PreparedCorpus, params: &EncoderParams) -> Result<RankingResult, PretrainError> {
    if corpus.reactions.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    let emb = embed_inputs(&corpus.inputs, params)?;
    let d = params.output_dim();
    let sum = |ids: &[usize]| {
        let mut out = vec![0.0; d];
        for &i in ids {
            out.iter_mut().zip(&emb[i]).for_each(|(o, v)| *o += v);
        }
        out
    };
    let mut pool_index: HashMap<String, usize> = HashMap::new();
    let mut pool: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::with_capacity(corpus.reactions.len());
    for rx in &corpus.reactions {
        let key = rx
            .products
            .iter()
            .map(|&i| corpus.keys[i].as_str())
            .collect::<Vec<_>>()
            .join(".");
        let slot = *pool_index.entry(key).or_insert_with(|| {
            pool.push(sum(&rx.products));
            pool.len() - 1
        });
        targets.push(slot);
    }
    let ranks = corpus
        .reactions
        .par_iter()
        .zip(targets.par_iter())
        .map(|(rx, &t)| rank_by_distance(&sum(&rx.reactants), &pool, t))
        .collect::<Result<Vec<_>, _>>()?;
    ranking_metrics(&ranks)
}

pub fn evaluate_ranking(
    reactions: &[ReactionRecord],
    vocab: &FeatureVocab,
    params: &EncoderParams,
) -> Result<RankingResult, PretrainError> {
    if reactions.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    evaluate_corpus(&PreparedCorpus::new(reactions, vocab)?, params)
}

/// `1 - u.v / (|u| |v|)`; defined as 1 when either vector is zero and as
/// exactly 0 for identical nonzero vectors.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 1.0;
    }
    if u == v {
        return 0.0;
    }
    1.0 - (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// The `k` references closest to `query` in cosine distance, ascending, ties
/// broken by reference index.
pub fn nearest_by_embedding(query: &[f64], references: &[Vec<f64>], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = references
        .iter()
        .enumerate()
        .map(|(i, r)| (i, cosine_distance(query, r)))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

pub fn nearest_molecules(
    query: &MolGraph,
    references: &[MolGraph],
    k: usize,
    vocab: &FeatureVocab,
    params: &EncoderParams,
) -> Result<Vec<(usize, f64)>, PretrainError> {
    let q = crate::encoder::encode_graph(query, vocab, params)?;
    let inputs = references
        .iter()
        .map(|g| GraphInput::new(g, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let refs = embed_inputs(&inputs, params)?;
    Ok(nearest_by_embedding(&q, &refs, k))
}
