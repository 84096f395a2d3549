//! Loaders for reaction TSV files, property CSV files, split index files and
//! perturbation-pair CSV files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::chem::{
    explicit_hydrogens, parse_reaction_line, parse_smiles, MolGraph, ParseError, ReactionError, ReactionRecord,
};
use crate::distill::{PropertyDataset, Split};
use crate::evalkit::PerturbationSet;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Reaction {
        line: usize,
        #[source]
        source: ReactionError,
    },
    #[error("line {line}: {source}")]
    Smiles {
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

impl DataError {
    pub fn is_missing_file(&self) -> bool {
        matches!(self, DataError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound)
    }
}

pub fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn molecule(smiles: &str, line: usize) -> Result<MolGraph, DataError> {
    parse_smiles(smiles.trim())
        .map(|g| explicit_hydrogens(&g))
        .map_err(|source| DataError::Smiles { line, source })
}

/// One reaction per non-blank line; `#` starts a comment line. Line numbers
/// in errors are 1-based.
pub fn parse_reactions(text: &str) -> Result<Vec<ReactionRecord>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_reaction_line(line).map_err(|source| DataError::Reaction { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn load_reactions(path: &Path) -> Result<Vec<ReactionRecord>, DataError> {
    parse_reactions(&read_text(path)?)
}

/// Writes reactions back as TSV rows using the original SMILES text.
pub fn format_reactions(reactions: &[ReactionRecord]) -> String {
    let mut out = String::new();
    for r in reactions {
        let side = |gs: &[MolGraph]| gs.iter().map(|g| g.source.as_str()).collect::<Vec<_>>().join(".");
        writeln!(
            out,
            "{}\t{}\t{}",
            side(&r.reactants),
            side(&r.products),
            r.yield_fraction
        )
        .expect("string write");
    }
    out
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    DataError::Format {
        line,
        message: e.to_string(),
    }
}

/// Header `smiles,label[,label2,...]`; an empty cell is a missing label.
pub fn parse_property_csv(text: &str) -> Result<PropertyDataset, DataError> {
    let mut reader = csv_reader(text);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("smiles") {
        return Err(DataError::Format {
            line: 1,
            message: "expected header smiles,label[,...]".into(),
        });
    }
    let task_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut graphs = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec, i + 2);
        graphs.push(molecule(&rec[0], line)?);
        let row = rec
            .iter()
            .skip(1)
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).map_err(|_| DataError::Format {
                        line,
                        message: format!("label {cell:?} is not a number"),
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        labels.push(row);
    }
    if graphs.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(PropertyDataset {
        graphs,
        labels,
        task_names,
    })
}

pub fn load_property_csv(path: &Path) -> Result<PropertyDataset, DataError> {
    parse_property_csv(&read_text(path)?)
}

/// One non-negative index per line; blank lines are skipped.
pub fn parse_indices(text: &str) -> Result<Vec<usize>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| DataError::Format {
                line: i + 1,
                message: format!("{:?} is not an index", l.trim()),
            })
        })
        .collect()
}

pub fn format_indices(idx: &[usize]) -> String {
    idx.iter().map(|i| format!("{i}\n")).collect()
}

pub fn load_split(train: &Path, valid: &Path, test: &Path) -> Result<Split, DataError> {
    Ok(Split {
        train: parse_indices(&read_text(train)?)?,
        valid: parse_indices(&read_text(valid)?)?,
        test: parse_indices(&read_text(test)?)?,
    })
}

/// Columns `smiles,property,perturbed_smiles,perturbed_property,level`.
pub fn parse_perturbations(text: &str) -> Result<PerturbationSet, DataError> {
    let mut reader = csv_reader(text);
    let header = reader.headers().map_err(csv_error)?.clone();
    let expected = ["smiles", "property", "perturbed_smiles", "perturbed_property", "level"];
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(DataError::Format {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut set = PerturbationSet {
        original: Vec::new(),
        property: Vec::new(),
        perturbed: Vec::new(),
        perturbed_property: Vec::new(),
        level: Vec::new(),
    };
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec, i + 2);
        let number = |cell: &str| {
            cell.parse::<f64>().map_err(|_| DataError::Format {
                line,
                message: format!("{cell:?} is not a number"),
            })
        };
        set.original.push(molecule(&rec[0], line)?);
        set.property.push(number(&rec[1])?);
        set.perturbed.push(molecule(&rec[2], line)?);
        set.perturbed_property.push(number(&rec[3])?);
        let level: u8 = rec[4]
            .parse()
            .ok()
            .filter(|l| (1..=3).contains(l))
            .ok_or_else(|| DataError::Format {
                line,
                message: format!("level {:?} is not 1, 2 or 3", &rec[4]),
            })?;
        set.level.push(level);
    }
    if set.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(set)
}

pub fn load_perturbations(path: &Path) -> Result<PerturbationSet, DataError> {
    parse_perturbations(&read_text(path)?)
}
