//! Task metrics, the perturbation effect score and per-atom weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::MolGraph;
use crate::encoder::{node_embeddings, EncoderError, EncoderParams};
use crate::featurize::FeatureVocab;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("both classes must be present")]
    SingleClass,
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {0} is not 0 or 1")]
    LabelOutOfDomain(f64),
    #[error("perturbation level {0} is not 1, 2 or 3")]
    BadLevel(u8),
    #[error("prediction failed: {0}")]
    Predictor(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Mann-Whitney AUC: `(wins + ties / 2) / (n_pos * n_neg)`.
pub fn auc_roc(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(EvalError::LabelOutOfDomain(bad));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, &l)| (s, l == 1.0)).collect();
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sweep tie groups in ascending score order
    let mut negatives_below = 0usize;
    let mut twice_wins = 0u128;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let pos = pairs[i..j].iter().filter(|p| p.1).count();
        let neg = (j - i) - pos;
        twice_wins += (2 * pos * negatives_below + pos * neg) as u128;
        negatives_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<(), EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_pair(preds, labels)?;
    let sq: f64 = preds.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok((sq / preds.len() as f64).sqrt())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_pair(preds, labels)?;
    let abs: f64 = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum();
    Ok(abs / preds.len() as f64)
}

/// Original molecules with their properties, paired by index with perturbed
/// twins, each pair tagged with a similarity level.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub original: Vec<MolGraph>,
    pub property: Vec<f64>,
    pub perturbed: Vec<MolGraph>,
    pub perturbed_property: Vec<f64>,
    pub level: Vec<u8>,
}

impl PerturbationSet {
    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let n = self.original.len();
        for len in [
            self.property.len(),
            self.perturbed.len(),
            self.perturbed_property.len(),
            self.level.len(),
        ] {
            if len != n {
                return Err(EvalError::LengthMismatch(n, len));
            }
        }
        if let Some(&bad) = self.level.iter().find(|l| !(1..=3).contains(*l)) {
            return Err(EvalError::BadLevel(bad));
        }
        Ok(())
    }
}

/// `rmse(P, P') - rmse(Q, Q')` per level, where `P = predict(M)` and
/// `P' = predict(M')`.
pub fn effect_score<F>(pset: &PerturbationSet, mut predict: F) -> Result<BTreeMap<u8, f64>, EvalError>
where
    F: FnMut(&MolGraph) -> Result<f64, EvalError>,
{
    pset.validate()?;
    if pset.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut groups: BTreeMap<u8, [Vec<f64>; 4]> = BTreeMap::new();
    for i in 0..pset.len() {
        let p = predict(&pset.original[i])?;
        let p2 = predict(&pset.perturbed[i])?;
        let g = groups.entry(pset.level[i]).or_default();
        g[0].push(p);
        g[1].push(p2);
        g[2].push(pset.property[i]);
        g[3].push(pset.perturbed_property[i]);
    }
    groups
        .into_iter()
        .map(|(level, [p, p2, q, q2])| Ok((level, rmse(&p, &p2)? - rmse(&q, &q2)?)))
        .collect()
}

/// Per-atom mean of the last-layer node embedding, divided by the largest
/// magnitude among the atoms. A multi-atom graph whose atoms all share one
/// mean gets all-zero weights; a single atom keeps its sign.
pub fn atom_weights(g: &MolGraph, vocab: &FeatureVocab, params: &EncoderParams) -> Result<Vec<f64>, EvalError> {
    let nodes = node_embeddings(g, vocab, params)?;
    let means: Vec<f64> = (0..nodes.rows())
        .map(|r| nodes.row(r).iter().sum::<f64>() / nodes.cols() as f64)
        .collect();
    Ok(scale_weights(&means))
}

pub fn scale_weights(means: &[f64]) -> Vec<f64> {
    let peak = means.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let all_equal = means.len() > 1 && means.windows(2).all(|w| w[0] == w[1]);
    if peak == 0.0 || all_equal {
        return vec![0.0; means.len()];
    }
    means.iter().map(|v| (v / peak).clamp(-1.0, 1.0)).collect()
}

/// `atom_index,element,weight` rows with a header.
pub fn atom_weights_csv(g: &MolGraph, weights: &[f64]) -> String {
    let mut out = String::from("atom_index,element,weight\n");
    for (i, (a, w)) in g.atoms.iter().zip(weights).enumerate() {
        out.push_str(&format!("{i},{},{w}\n", a.element));
    }
    out
}

/// Named metric values for JSON reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}
