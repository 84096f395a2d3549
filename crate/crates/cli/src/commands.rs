use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use molkd_core::checkpoint::{write_atomic, Kind};
use molkd_core::chem::explicit_hydrogens;
use molkd_core::data::{format_indices, load_perturbations, load_property_csv, load_reactions, load_split, read_text};
use molkd_core::distill::{finetune, FinetuneEpoch};
use molkd_core::evalkit::{atom_weights, atom_weights_csv, effect_score, scale_weights};
use molkd_core::pretrain::{evaluate_ranking, format_log, nearest_molecules, run_pretrain};
use molkd_core::{
    build_vocab, parse_smiles, Checkpoint, EncoderParams, EvalError, FeatureVocab, MolGraph, Predictor, Split,
};

use crate::config::Settings;
use crate::error::{against_vocab, CliError};

/// A finished command: files to place under the output directory and text
/// for standard output.
#[derive(Debug, Default)]
pub struct Output {
    pub files: Vec<(String, Vec<u8>)>,
    pub stdout: String,
}

impl Output {
    /// Every file is written through a temporary sibling and renamed, after
    /// all results have been computed.
    pub fn commit(&self, out: Option<&Path>) -> Result<(), CliError> {
        if self.files.is_empty() {
            return Ok(());
        }
        let dir = out.unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for (name, bytes) in &self.files {
            write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}

fn require_inputs(paths: &[&Path]) -> Result<(), CliError> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(CliError::MissingFile(p.to_path_buf())),
        None => Ok(()),
    }
}

fn metadata(settings: &Settings, command: &str) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("tool".into(), format!("molkd {}", env!("CARGO_PKG_VERSION")));
    m.insert("command".into(), command.into());
    for key in ["reactions", "data", "teacher"] {
        if let Some(v) = settings.raw(key) {
            m.insert(key.into(), v.into());
        }
    }
    m
}

fn molecule(smiles: &str) -> Result<MolGraph, CliError> {
    Ok(explicit_hydrogens(&parse_smiles(smiles.trim())?))
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

enum Encoder {
    Teacher(EncoderParams),
    Predictor(Box<Predictor>),
}

impl Encoder {
    fn params(&self) -> &EncoderParams {
        match self {
            Encoder::Teacher(p) => p,
            Encoder::Predictor(p) => &p.student,
        }
    }
}

fn load_encoder(path: &Path) -> Result<(Encoder, FeatureVocab), CliError> {
    let ckpt = Checkpoint::load(path)?;
    Ok(match ckpt.manifest.kind {
        Kind::Teacher => {
            let (p, v) = ckpt.into_teacher()?;
            (Encoder::Teacher(p), v)
        }
        Kind::Predictor => {
            let (p, v) = ckpt.into_predictor()?;
            (Encoder::Predictor(Box::new(p)), v)
        }
    })
}

pub fn pretrain(s: &Settings) -> Result<Output, CliError> {
    let reactions_path = s.require_path("reactions")?;
    require_inputs(&[&reactions_path])?;
    let cfg = s.pretrain_config()?;
    let reactions = load_reactions(&reactions_path)?;
    if reactions.is_empty() {
        return Err(molkd_core::PretrainError::EmptyDataset.into());
    }
    let unk = s.raw("unk").is_none() || s.flag("unk")?;
    let vocab = build_vocab(
        reactions.iter().flat_map(|r| r.reactants.iter().chain(&r.products)),
        unk,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = run_pretrain(&reactions, &vocab, &cfg)?;
    let ckpt = Checkpoint::teacher(&outcome.params, &vocab, s.to_json(), metadata(s, "pretrain"));
    let last = outcome.log.last().map_or(f64::NAN, |l| l.mean_loss);
    Ok(Output {
        files: vec![
            ("teacher.ckpt".into(), ckpt.to_bytes()?),
            ("pretrain_log.tsv".into(), format_log(&outcome.log).into_bytes()),
        ],
        stdout: format!(
            "trained {} epochs on {} reactions, final mean loss {last}\n",
            outcome.log.len(),
            reactions.len()
        ),
    })
}

pub fn format_finetune_log(log: &[FinetuneEpoch]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tvalid_metric\n");
    for e in log {
        out.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_loss, e.valid_metric));
    }
    out
}

pub fn finetune_cmd(s: &Settings) -> Result<Output, CliError> {
    let data_path = s.require_path("data")?;
    let teacher_path = s.require_path("teacher")?;
    let split_paths = [
        s.require_path("train")?,
        s.require_path("valid")?,
        s.require_path("test")?,
    ];
    require_inputs(&[
        &data_path,
        &teacher_path,
        &split_paths[0],
        &split_paths[1],
        &split_paths[2],
    ])?;
    let cfg = s.distill_config()?;
    let (teacher, vocab) = Checkpoint::load(&teacher_path)?.into_teacher()?;
    let data = load_property_csv(&data_path)?;
    let split = load_split(&split_paths[0], &split_paths[1], &split_paths[2])?;
    let outcome = finetune(&data, &split, &teacher, &vocab, &cfg).map_err(|e| against_vocab(e.into()))?;
    let ckpt = Checkpoint::predictor(&outcome.predictor, &vocab, s.to_json(), metadata(s, "finetune"));
    let report = json_line(&outcome.report);
    Ok(Output {
        files: vec![
            ("predictor.ckpt".into(), ckpt.to_bytes()?),
            (
                "finetune_log.tsv".into(),
                format_finetune_log(&outcome.log).into_bytes(),
            ),
            ("report.json".into(), report.clone().into_bytes()),
        ],
        stdout: report,
    })
}

pub fn rank_eval(s: &Settings) -> Result<Output, CliError> {
    let teacher_path = s.require_path("teacher")?;
    let reactions_path = s.require_path("reactions")?;
    require_inputs(&[&teacher_path, &reactions_path])?;
    let (params, vocab) = Checkpoint::load(&teacher_path)?.into_teacher()?;
    let reactions = load_reactions(&reactions_path)?;
    let result = evaluate_ranking(&reactions, &vocab, &params).map_err(|e| against_vocab(e.into()))?;
    let report = json_line(&result);
    Ok(Output {
        files: vec![("ranking.json".into(), report.clone().into_bytes())],
        stdout: report,
    })
}

/// One SMILES per line in the first tab-separated column; `#` lines and
/// blank lines are skipped.
pub fn parse_refs(text: &str) -> Result<Vec<(String, MolGraph)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let smiles = line.split('\t').next().unwrap_or_default().trim();
        let g = molecule(smiles).map_err(|e| CliError::Config(format!("refs line {}: {e}", i + 1)))?;
        out.push((smiles.to_string(), g));
    }
    if out.is_empty() {
        return Err(CliError::Config("reference file lists no molecules".into()));
    }
    Ok(out)
}

pub fn query(s: &Settings) -> Result<Output, CliError> {
    let ckpt_path = s.require_path("checkpoint")?;
    let refs_path = s.require_path("refs")?;
    require_inputs(&[&ckpt_path, &refs_path])?;
    let smiles = s
        .raw("smiles")
        .ok_or_else(|| CliError::Config("missing required setting \"smiles\"".into()))?;
    let k: usize = s.get_or("k", 5)?;
    let (encoder, vocab) = load_encoder(&ckpt_path)?;
    let q = molecule(smiles)?;
    let refs = parse_refs(&read_text(&refs_path)?)?;
    let graphs: Vec<MolGraph> = refs.iter().map(|r| r.1.clone()).collect();
    let hits = nearest_molecules(&q, &graphs, k, &vocab, encoder.params()).map_err(|e| against_vocab(e.into()))?;
    let mut tsv = String::from("rank\tindex\tsmiles\tcosine_distance\n");
    for (rank, (i, d)) in hits.iter().enumerate() {
        tsv.push_str(&format!("{}\t{i}\t{}\t{d}\n", rank + 1, refs[*i].0));
    }
    Ok(Output {
        files: vec![("neighbors.tsv".into(), tsv.clone().into_bytes())],
        stdout: tsv,
    })
}

pub fn robustness(s: &Settings) -> Result<Output, CliError> {
    let predictor_path = s.require_path("predictor")?;
    let pert_path = s.require_path("perturbations")?;
    require_inputs(&[&predictor_path, &pert_path])?;
    let task: usize = s.get_or("task_index", 0)?;
    let (predictor, vocab) = Checkpoint::load(&predictor_path)?.into_predictor()?;
    if task >= predictor.task_names.len() {
        return Err(CliError::Config(format!(
            "task_index {task} but the predictor has {} tasks",
            predictor.task_names.len()
        )));
    }
    let set = load_perturbations(&pert_path)?;
    let deltas = effect_score(&set, |g| {
        predictor
            .predict(g, &vocab)
            .map(|p| p[task])
            .map_err(|e| EvalError::Predictor(e.to_string()))
    })?;
    let levels: BTreeMap<String, f64> = deltas.into_iter().map(|(l, d)| (l.to_string(), d)).collect();
    let report = json_line(&serde_json::json!({
        "task": predictor.task_names[task],
        "effect_score": levels,
    }));
    Ok(Output {
        files: vec![("robustness.json".into(), report.clone().into_bytes())],
        stdout: report,
    })
}

pub fn interpret(s: &Settings) -> Result<Output, CliError> {
    let ckpt_path = s.require_path("checkpoint")?;
    require_inputs(&[&ckpt_path])?;
    let smiles = s
        .raw("smiles")
        .ok_or_else(|| CliError::Config("missing required setting \"smiles\"".into()))?;
    let (encoder, vocab) = load_encoder(&ckpt_path)?;
    let written = parse_smiles(smiles.trim())?;
    let g = explicit_hydrogens(&written);
    let all = atom_weights(&g, &vocab, encoder.params()).map_err(|e| against_vocab(e.into()))?;
    // hydrogens are appended after the written atoms; report the written ones
    let weights = scale_weights(&all[..written.atoms.len()]);
    let csv = atom_weights_csv(&written, &weights);
    Ok(Output {
        files: vec![("atom_weights.csv".into(), csv.clone().into_bytes())],
        stdout: csv,
    })
}

pub fn split(s: &Settings) -> Result<Output, CliError> {
    let n = match (s.get::<usize>("n")?, s.path("data")) {
        (Some(n), _) => n,
        (None, Some(p)) => {
            require_inputs(&[&p])?;
            load_property_csv(&p)?.len()
        }
        (None, None) => return Err(CliError::Config("split needs n or data".into())),
    };
    if n == 0 {
        return Err(CliError::Config("cannot split zero molecules".into()));
    }
    let seed: u64 = s.get_or("seed", 0)?;
    let Split { train, valid, test } = Split::random(n, seed);
    Ok(Output {
        files: vec![
            ("train.txt".into(), format_indices(&train).into_bytes()),
            ("valid.txt".into(), format_indices(&valid).into_bytes()),
            ("test.txt".into(), format_indices(&test).into_bytes()),
        ],
        stdout: format!("{} train, {} valid, {} test\n", train.len(), valid.len(), test.len()),
    })
}

pub fn output_dir(s: &Settings) -> Option<PathBuf> {
    s.path("out")
}
