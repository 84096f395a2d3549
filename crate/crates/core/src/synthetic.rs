//! Seeded synthetic reaction corpora and property tasks built by joining
//! small fragments with single bonds.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chem::{explicit_hydrogens, parse_smiles};
use crate::chem::{parse_reaction_line, structure_hash, ReactionRecord};
use crate::distill::PropertyDataset;

/// Twenty fragments. Each is a valid molecule on its own, and the first and
/// last atom written carry at least one hydrogen so that writing two
/// fragments as `a-b` bonds them.
pub const FRAGMENTS: [&str; 20] = [
    "C",
    "CC",
    "CCC",
    "CC(C)C",
    "CCCC",
    "OC(C)C",
    "CCO",
    "NC(=O)C",
    "CCN",
    "c1ccccc1",
    "c1ccncc1",
    "C1CCCCC1",
    "C1CCOC1",
    "CC(=O)",
    "C(F)(F)",
    "C(Cl)",
    "C(=O)",
    "S",
    "c1ccc(C)cc1",
    "C#C",
];

/// Reaction corpus over [`FRAGMENTS`]. Every 2- and 3-subset of fragments is
/// a candidate template; candidates are shuffled and kept while their product
/// is structurally new, so no two reactions share a product. Yields are
/// uniform in `[0.3, 1.0)`.
pub fn reaction_lines(count: usize, seed: u64) -> Vec<String> {
    let n = FRAGMENTS.len();
    let mut templates: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            templates.push(vec![i, j]);
            for k in j + 1..n {
                templates.push(vec![i, j, k]);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    templates.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    for t in templates {
        if out.len() == count {
            break;
        }
        let mut parts: Vec<usize> = t.clone();
        parts.shuffle(&mut rng);
        let product: Vec<&str> = parts.iter().map(|&f| FRAGMENTS[f]).collect();
        let product = product.join("-");
        let graph = parse_smiles(&product).expect("fragment joins parse");
        if !seen.insert(structure_hash(&explicit_hydrogens(&graph))) {
            continue;
        }
        let reactants: Vec<&str> = t.iter().map(|&f| FRAGMENTS[f]).collect();
        let y: f64 = rng.gen_range(0.3..1.0);
        out.push(format!("{}\t{}\t{}", reactants.join("."), product, y));
    }
    out
}

pub fn reactions(count: usize, seed: u64) -> Vec<ReactionRecord> {
    reaction_lines(count, seed)
        .iter()
        .map(|l| parse_reaction_line(l).expect("generated line parses"))
        .collect()
}

/// Binary task over the products of [`reaction_lines`]: a molecule is
/// positive when it contains any fragment from `positive`.
pub fn property_task(count: usize, seed: u64, positive: &[usize]) -> (PropertyDataset, Vec<String>) {
    let mut graphs = Vec::new();
    let mut labels = Vec::new();
    let mut smiles = Vec::new();
    for line in reaction_lines(count, seed) {
        let mut cols = line.split('\t');
        let reactants = cols.next().expect("reactant column");
        let product = cols.next().expect("product column");
        let hit = reactants
            .split('.')
            .any(|r| positive.iter().any(|&p| FRAGMENTS[p] == r));
        graphs.push(explicit_hydrogens(
            &parse_smiles(product).expect("generated product parses"),
        ));
        labels.push(vec![Some(f64::from(hit))]);
        smiles.push(product.to_string());
    }
    (
        PropertyDataset {
            graphs,
            labels,
            task_names: vec!["contains_motif".into()],
        },
        smiles,
    )
}
