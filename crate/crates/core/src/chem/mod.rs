//! Molecular graphs, SMILES parsing and reaction records.

mod smiles;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use smiles::{parse_smiles, to_smiles};

/// Bond order tag. Stored for valence bookkeeping and serialization only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BondKind {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondKind {
    /// Contribution to the bond-order sum used for implicit hydrogens.
    pub fn order(self) -> f64 {
        match self {
            BondKind::Single => 1.0,
            BondKind::Double => 2.0,
            BondKind::Triple => 3.0,
            BondKind::Aromatic => 1.5,
        }
    }

    pub(crate) fn symbol(self) -> char {
        match self {
            BondKind::Single => '-',
            BondKind::Double => '=',
            BondKind::Triple => '#',
            BondKind::Aromatic => ':',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub kind: BondKind,
}

impl Bond {
    pub fn other(&self, atom: usize) -> Option<usize> {
        if self.a == atom {
            Some(self.b)
        } else if self.b == atom {
            Some(self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomRecord {
    pub element: String,
    pub aromatic: bool,
    /// Integer-rounded standard atomic weight, used as a category.
    pub mass_bucket: u32,
    /// Hydrogens still to be materialized as nodes.
    pub implicit_h: u8,
    /// Hydrogen count attached at parse time. Survives explicitization.
    pub parsed_h: u8,
    pub charge: i32,
    pub class_id: u32,
}

impl AtomRecord {
    pub fn hydrogen() -> Self {
        AtomRecord {
            element: "H".to_string(),
            aromatic: false,
            mass_bucket: 1,
            implicit_h: 0,
            parsed_h: 0,
            charge: 0,
            class_id: 0,
        }
    }
}

/// Undirected molecular graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolGraph {
    pub atoms: Vec<AtomRecord>,
    pub bonds: Vec<Bond>,
    pub source: String,
}

impl MolGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Neighbor lists in bond order.
    pub fn neighbors(&self) -> Vec<Vec<(usize, BondKind)>> {
        let mut out = vec![Vec::new(); self.atoms.len()];
        for bond in &self.bonds {
            out[bond.a].push((bond.b, bond.kind));
            out[bond.b].push((bond.a, bond.kind));
        }
        out
    }

    pub fn is_hydrogen_explicit(&self) -> bool {
        self.atoms.iter().all(|a| a.implicit_h == 0)
    }

    /// Total implicit hydrogens still pending on the graph.
    pub fn implicit_h_total(&self) -> usize {
        self.atoms.iter().map(|a| a.implicit_h as usize).sum()
    }

    /// Returns the graph with its atoms reordered so that old atom `i` lands at
    /// position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = vec![None; self.atoms.len()];
        for (old, atom) in self.atoms.iter().enumerate() {
            atoms[perm[old]] = Some(atom.clone());
        }
        MolGraph {
            atoms: atoms.into_iter().map(|a| a.expect("permutation")).collect(),
            bonds: self
                .bonds
                .iter()
                .map(|b| Bond {
                    a: perm[b.a],
                    b: perm[b.b],
                    kind: b.kind,
                })
                .collect(),
            source: self.source.clone(),
        }
    }
}

/// Replaces every pending implicit hydrogen with an explicit `H` node bonded to
/// its parent. Original atoms keep their positions; hydrogens are appended.
pub fn explicit_hydrogens(g: &MolGraph) -> MolGraph {
    let mut out = g.clone();
    for idx in 0..g.atoms.len() {
        let count = g.atoms[idx].implicit_h;
        for _ in 0..count {
            let h = out.atoms.len();
            out.atoms.push(AtomRecord::hydrogen());
            out.bonds.push(Bond {
                a: idx,
                b: h,
                kind: BondKind::Single,
            });
        }
        out.atoms[idx].implicit_h = 0;
    }
    out
}

/// Standard atomic weight bucket for the supported element table.
pub fn mass_bucket(element: &str) -> Option<u32> {
    let mass = match element {
        "H" => 1,
        "Li" => 7,
        "B" => 11,
        "C" => 12,
        "N" => 14,
        "O" => 16,
        "F" => 19,
        "Na" => 23,
        "Mg" => 24,
        "Al" => 27,
        "Si" => 28,
        "P" => 31,
        "S" => 32,
        "Cl" => 35,
        "K" => 39,
        "Ca" => 40,
        "Fe" => 56,
        "Cu" => 64,
        "Zn" => 65,
        "As" => 75,
        "Se" => 79,
        "Br" => 80,
        "Sn" => 119,
        "I" => 127,
        "Pt" => 195,
        "Hg" => 201,
        _ => return None,
    };
    Some(mass)
}

/// Default valences for implicit-hydrogen inference (organic subset only).
pub(crate) fn default_valences(element: &str) -> &'static [u32] {
    match element {
        "B" => &[3],
        "C" => &[4],
        "N" | "P" => &[3, 5],
        "O" => &[2],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => &[],
    }
}

/// Weisfeiler-Lehman style structure hash over atom properties and bond
/// kinds. Isomorphic graphs hash equally; atom order does not matter.
pub fn structure_hash(g: &MolGraph) -> u64 {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    let h = |x: &dyn Fn(&mut DefaultHasher)| {
        let mut s = DefaultHasher::new();
        x(&mut s);
        s.finish()
    };
    let nb = g.neighbors();
    let mut labels: Vec<u64> = g
        .atoms
        .iter()
        .map(|a| h(&|s| (&a.element, a.aromatic, a.implicit_h, a.charge, a.class_id).hash(s)))
        .collect();
    for _ in 0..g.atoms.len().max(1) {
        let next: Vec<u64> = (0..labels.len())
            .map(|i| {
                let mut around: Vec<(BondKind, u64)> = nb[i].iter().map(|&(j, k)| (k, labels[j])).collect();
                around.sort();
                h(&|s| (labels[i], &around).hash(s))
            })
            .collect();
        labels = next;
    }
    labels.sort_unstable();
    h(&|s| (labels.len(), g.bonds.len(), &labels).hash(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    EmptyInput,
    UnclosedRing,
    UnbalancedParen,
    UnknownElement,
    MalformedBracketAtom,
    UnexpectedCharacter,
    DanglingBond,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::EmptyInput => "empty input",
            ParseErrorKind::UnclosedRing => "unclosed ring bond",
            ParseErrorKind::UnbalancedParen => "unbalanced parenthesis",
            ParseErrorKind::UnknownElement => "unknown element",
            ParseErrorKind::MalformedBracketAtom => "malformed bracket atom",
            ParseErrorKind::UnexpectedCharacter => "unexpected character",
            ParseErrorKind::DanglingBond => "bond symbol without a following atom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset} in {smiles:?}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
    pub smiles: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionRecord {
    pub reactants: Vec<MolGraph>,
    pub products: Vec<MolGraph>,
    pub yield_fraction: f64,
}

#[derive(Debug, Error)]
pub enum ReactionError {
    #[error("expected 3 tab-separated columns, found {0}")]
    BadColumnCount(usize),
    #[error("yield {0} is outside [0, 1]")]
    YieldOutOfRange(f64),
    #[error("cannot parse yield {0:?}")]
    BadYield(String),
    #[error("empty molecule list in {0} column")]
    EmptySide(&'static str),
    #[error(transparent)]
    Smiles(#[from] ParseError),
}

fn parse_side(column: &str, side: &'static str) -> Result<Vec<MolGraph>, ReactionError> {
    let mut out = Vec::new();
    for part in column.split('.').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(explicit_hydrogens(&parse_smiles(part)?));
    }
    if out.is_empty() {
        return Err(ReactionError::EmptySide(side));
    }
    Ok(out)
}

/// Parses one `reactants<TAB>products<TAB>yield` row. Molecules come back
/// hydrogen-explicit.
pub fn parse_reaction_line(line: &str) -> Result<ReactionRecord, ReactionError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 {
        return Err(ReactionError::BadColumnCount(cols.len()));
    }
    let yield_text = cols[2].trim();
    let yield_fraction: f64 = yield_text
        .parse()
        .map_err(|_| ReactionError::BadYield(yield_text.to_string()))?;
    if !(0.0..=1.0).contains(&yield_fraction) {
        return Err(ReactionError::YieldOutOfRange(yield_fraction));
    }
    Ok(ReactionRecord {
        reactants: parse_side(cols[0], "reactant")?,
        products: parse_side(cols[1], "product")?,
        yield_fraction,
    })
}
