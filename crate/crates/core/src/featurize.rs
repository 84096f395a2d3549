//! Categorical atom vocabularies and one-hot feature matrices.
//!
//! Six properties are encoded per atom: element, aromatic flag, mass bucket,
//! parse-time hydrogen count, formal charge and atom class. Each property
//! gets a contiguous block of the feature row; optionally every block ends in
//! an UNK slot that absorbs values unseen while building the vocabulary.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{AtomRecord, MolGraph};
use crate::ndiff::Tensor;

pub const PROPERTY_COUNT: usize = 6;
pub const PROPERTY_NAMES: [&str; PROPERTY_COUNT] =
    ["element", "aromatic", "mass_bucket", "implicit_h", "charge", "class_id"];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("value {value} of property {property} is not in the vocabulary")]
    UnseenValue { property: &'static str, value: String },
}

/// Frozen value-to-index maps for the six atom properties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub element: Vec<String>,
    pub aromatic: Vec<bool>,
    pub mass_bucket: Vec<u32>,
    pub implicit_h: Vec<u8>,
    pub charge: Vec<i32>,
    pub class_id: Vec<u32>,
    /// Per-property UNK slot flags, in [`PROPERTY_NAMES`] order.
    pub unk: [bool; PROPERTY_COUNT],
}

fn position<T: PartialEq>(values: &[T], v: &T) -> Option<usize> {
    values.iter().position(|x| x == v)
}

impl FeatureVocab {
    /// Sizes of the six blocks, UNK slots included.
    pub fn block_sizes(&self) -> [usize; PROPERTY_COUNT] {
        let raw = [
            self.element.len(),
            self.aromatic.len(),
            self.mass_bucket.len(),
            self.implicit_h.len(),
            self.charge.len(),
            self.class_id.len(),
        ];
        let mut out = [0; PROPERTY_COUNT];
        for i in 0..PROPERTY_COUNT {
            out[i] = raw[i] + usize::from(self.unk[i]);
        }
        out
    }

    pub fn block_offsets(&self) -> [usize; PROPERTY_COUNT] {
        let sizes = self.block_sizes();
        let mut out = [0; PROPERTY_COUNT];
        for i in 1..PROPERTY_COUNT {
            out[i] = out[i - 1] + sizes[i - 1];
        }
        out
    }

    pub fn total_dim(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    /// Within-block indices for one atom.
    fn atom_slots(&self, atom: &AtomRecord) -> Result<[usize; PROPERTY_COUNT], FeatureError> {
        let found = [
            position(&self.element, &atom.element),
            position(&self.aromatic, &atom.aromatic),
            position(&self.mass_bucket, &atom.mass_bucket),
            position(&self.implicit_h, &atom.parsed_h),
            position(&self.charge, &atom.charge),
            position(&self.class_id, &atom.class_id),
        ];
        let values = || {
            [
                atom.element.clone(),
                atom.aromatic.to_string(),
                atom.mass_bucket.to_string(),
                atom.parsed_h.to_string(),
                atom.charge.to_string(),
                atom.class_id.to_string(),
            ]
        };
        let sizes = self.block_sizes();
        let mut out = [0; PROPERTY_COUNT];
        for i in 0..PROPERTY_COUNT {
            out[i] = match found[i] {
                Some(p) => p,
                None if self.unk[i] => sizes[i] - 1,
                None => {
                    return Err(FeatureError::UnseenValue {
                        property: PROPERTY_NAMES[i],
                        value: values()[i].clone(),
                    })
                }
            };
        }
        Ok(out)
    }
}

/// Collects every observed property value, sorted (lexically for elements,
/// numerically otherwise). `unk` appends an UNK slot to each block.
pub fn build_vocab<'a, I>(graphs: I, unk: bool) -> Result<FeatureVocab, FeatureError>
where
    I: IntoIterator<Item = &'a MolGraph>,
{
    let mut element = BTreeSet::new();
    let mut aromatic = BTreeSet::new();
    let mut mass = BTreeSet::new();
    let mut hydrogens = BTreeSet::new();
    let mut charge = BTreeSet::new();
    let mut class_id = BTreeSet::new();
    let mut any = false;
    for g in graphs {
        any = true;
        for a in &g.atoms {
            element.insert(a.element.clone());
            aromatic.insert(a.aromatic);
            mass.insert(a.mass_bucket);
            hydrogens.insert(a.parsed_h);
            charge.insert(a.charge);
            class_id.insert(a.class_id);
        }
    }
    if !any {
        return Err(FeatureError::EmptyCorpus);
    }
    Ok(FeatureVocab {
        element: element.into_iter().collect(),
        aromatic: aromatic.into_iter().collect(),
        mass_bucket: mass.into_iter().collect(),
        implicit_h: hydrogens.into_iter().collect(),
        charge: charge.into_iter().collect(),
        class_id: class_id.into_iter().collect(),
        unk: [unk; PROPERTY_COUNT],
    })
}

/// One row per atom; row `i` is the concatenation of the six one-hot blocks
/// of atom `i`.
pub fn graph_features(g: &MolGraph, vocab: &FeatureVocab) -> Result<Tensor, FeatureError> {
    let dim = vocab.total_dim();
    let offsets = vocab.block_offsets();
    let mut out = Tensor::zeros(g.atoms.len(), dim);
    for (r, atom) in g.atoms.iter().enumerate() {
        let slots = vocab.atom_slots(atom)?;
        for p in 0..PROPERTY_COUNT {
            out.set(r, offsets[p] + slots[p], 1.0);
        }
    }
    Ok(out)
}
