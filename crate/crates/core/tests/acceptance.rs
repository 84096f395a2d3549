//! Acceptance run: one PASS/FAIL line per criterion. The distillation
//! comparison (criterion 9) only warns.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use molkd_core::checkpoint::Checkpoint;
use molkd_core::chem::{
    explicit_hydrogens, parse_reaction_line, parse_smiles, structure_hash, to_smiles, AtomRecord, Bond, BondKind,
    MolGraph, ParseErrorKind, ReactionError,
};
use molkd_core::distill::{
    combined_loss, finetune, infonce_kd_loss, supervised_loss, DistillConfig, Split, TaskKind, TeacherProjection,
};
use molkd_core::encoder::{
    encode_graph, encode_inputs, encode_molecule_set, Architecture, EncoderParams, EncoderSpec, GraphInput,
};
use molkd_core::evalkit::{auc_roc, effect_score, mae, rmse, PerturbationSet};
use molkd_core::featurize::{build_vocab, FeatureVocab};
use molkd_core::ndiff::{grad_check, Tape, Tensor};
use molkd_core::pretrain::{
    evaluate_ranking, format_log, gtranse_batch_loss, initial_params, margin_loss, rank_by_distance, rank_products,
    ranking_metrics, reaction_score, run_pretrain, PretrainConfig,
};
use molkd_core::synthetic;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed < budget
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(lo..hi)).collect())
        .collect()
}

fn vocab_for(reactions: &[molkd_core::chem::ReactionRecord]) -> FeatureVocab {
    build_vocab(
        reactions.iter().flat_map(|r| r.reactants.iter().chain(&r.products)),
        true,
    )
    .unwrap()
}

fn naive_margin_loss(r: &[Vec<f64>], p: &[Vec<f64>], y: &[f64], gamma: f64, alpha: f64) -> f64 {
    let b = r.len();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let pos = reaction_score(&r[i], &p[i]).unwrap();
            let neg = reaction_score(&r[i], &p[j]).unwrap();
            total += (pos - neg + y[i].powf(alpha) * gamma).max(0.0);
        }
    }
    total / (b * (b - 1)) as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let corpus = synthetic::reactions(120, 1);
    let vocab = vocab_for(&corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(2..=8);
        let dim = rng.gen_range(1..=16);
        let arch = [Architecture::Tag, Architecture::Gcn, Architecture::Gin][rng.gen_range(0..3)];
        let cfg = PretrainConfig {
            margin: rng.gen_range(0.5..8.0),
            yield_exponent: rng.gen_range(0.0..3.0),
            arch,
            hidden_dim: dim,
            embedding_dim: dim,
            seed: rng.gen(),
            ..PretrainConfig::default()
        };
        let params = initial_params(&cfg, &vocab).unwrap();
        let batch: Vec<_> = corpus.choose_multiple(&mut rng, b).cloned().collect();
        let got = gtranse_batch_loss(&batch, &vocab, &params, &cfg).unwrap();
        let r: Vec<Vec<f64>> = batch
            .iter()
            .map(|x| encode_molecule_set(&x.reactants, &vocab, &params).unwrap())
            .collect();
        let p: Vec<Vec<f64>> = batch
            .iter()
            .map(|x| encode_molecule_set(&x.products, &vocab, &params).unwrap())
            .collect();
        let y: Vec<f64> = batch.iter().map(|x| x.yield_fraction).collect();
        worst = worst.max((got - naive_margin_loss(&r, &p, &y, cfg.margin, cfg.yield_exponent)).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && within(elapsed, Duration::from_secs(10)),
        format!("margin loss vs double loop: max |diff| {worst:.2e} over 100 batches (tol 1e-12), {elapsed:.2?} (limit 10s)"),
    )
}

fn naive_infonce(s: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut total = 0.0;
    for i in 0..s.len() {
        let pos = (cos(&s[i], &t[i]) / tau).exp();
        let mut neg = 0.0;
        for j in 0..s.len() {
            if j != i {
                neg += (cos(&s[i], &t[j]) / tau).exp();
            }
        }
        total += -(pos / (pos + neg)).ln();
    }
    total / s.len() as f64
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=16);
        let tau = [0.05, 0.075, 0.1][rng.gen_range(0..3)];
        let s = random_rows(&mut rng, b, d, -1.0, 1.0);
        let t = random_rows(&mut rng, b, d, -1.0, 1.0);
        let tape = Tape::new();
        let sv = tape.constant_owned(Tensor::from_rows(&s).unwrap());
        let tv = tape.constant_owned(Tensor::from_rows(&t).unwrap());
        let got = infonce_kd_loss(sv, tv, tau).unwrap().item();
        worst = worst.max((got - naive_infonce(&s, &t, tau)).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && within(elapsed, Duration::from_secs(10)),
        format!(
            "InfoNCE vs direct formula: max |diff| {worst:.2e} over 100 batches (tol 1e-10), {elapsed:.2?} (limit 10s)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let tol = 1e-4;
    let mut worst = [0.0f64; 4];
    let mut skipped = 0usize;
    let mut errors = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for point in 0..20 {
        let b = rng.gen_range(2..=6);
        let d = rng.gen_range(2..=6);
        let tasks = rng.gen_range(1..=3);
        let tau = [0.05, 0.075, 0.1][point % 3];
        let beta = rng.gen_range(0.0..=1.0);
        let task = if point % 2 == 0 {
            TaskKind::Classification
        } else {
            TaskKind::Regression
        };

        // margin loss over stacked [R; P]
        let stacked = Tensor::from_rows(&random_rows(&mut rng, 2 * b, d, -2.0, 2.0)).unwrap();
        let yields: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let top = std::rc::Rc::new((0..b).collect::<Vec<_>>());
        let bottom = std::rc::Rc::new((b..2 * b).collect::<Vec<_>>());
        let margin = grad_check(
            |_, x| {
                let r = x.gather_rows(top.clone())?;
                let p = x.gather_rows(bottom.clone())?;
                Ok(margin_loss(r, p, &yields, 6.0, 2.0).unwrap())
            },
            &stacked,
            h,
        );

        // InfoNCE against projected teacher rows, w.r.t. student rows and projection weight
        let teacher_dim = rng.gen_range(2..=6);
        let student = Tensor::from_rows(&random_rows(&mut rng, b, d, -1.0, 1.0)).unwrap();
        let teacher = Tensor::from_rows(&random_rows(&mut rng, b, teacher_dim, -1.0, 1.0)).unwrap();
        let proj = TeacherProjection::init(teacher_dim, d, &mut rng);
        let kd_student = grad_check(
            |tape, x| {
                let t = TeacherProjection::apply(
                    tape.constant(&teacher),
                    tape.constant(&proj.weight),
                    tape.constant(&proj.bias),
                )?;
                Ok(infonce_kd_loss(x, t, tau).unwrap())
            },
            &student,
            h,
        );
        let kd_proj = grad_check(
            |tape, w| {
                let t = TeacherProjection::apply(tape.constant(&teacher), w, tape.constant(&proj.bias))?;
                Ok(infonce_kd_loss(tape.constant(&student), t, tau).unwrap())
            },
            &proj.weight,
            h,
        );

        // supervised loss with a random mask
        let preds = Tensor::from_rows(&random_rows(&mut rng, b, tasks, -3.0, 3.0)).unwrap();
        let labels = Tensor::new(
            b,
            tasks,
            (0..b * tasks)
                .map(|_| match task {
                    TaskKind::Classification => f64::from(rng.gen_bool(0.5)),
                    TaskKind::Regression => rng.gen_range(-2.0..2.0),
                })
                .collect(),
        )
        .unwrap();
        let mut mask_data: Vec<f64> = (0..b * tasks).map(|_| f64::from(rng.gen_bool(0.8))).collect();
        mask_data[0] = 1.0;
        let mask = Tensor::new(b, tasks, mask_data).unwrap();
        let sup = grad_check(|_, x| Ok(supervised_loss(x, &labels, &mask, task).unwrap()), &preds, h);

        // combined objective through a linear head on the student rows
        let head = Tensor::from_rows(&random_rows(&mut rng, d, tasks, -1.0, 1.0)).unwrap();
        let combined = grad_check(
            |tape, x| {
                let s = supervised_loss(x.matmul(tape.constant(&head))?, &labels, &mask, task).unwrap();
                let t = TeacherProjection::apply(
                    tape.constant(&teacher),
                    tape.constant(&proj.weight),
                    tape.constant(&proj.bias),
                )?;
                let k = infonce_kd_loss(x, t, tau).unwrap();
                Ok(combined_loss(s, k, beta).unwrap())
            },
            &student,
            h,
        );

        for (slot, report) in [(0, margin), (1, kd_student), (1, kd_proj), (2, sup), (3, combined)] {
            match report {
                Ok(r) => {
                    worst[slot] = worst[slot].max(r.max_rel_error);
                    skipped += r.skipped.len();
                }
                Err(e) => errors.push(e.to_string()),
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = errors.is_empty() && worst.iter().all(|&w| w < tol) && within(elapsed, Duration::from_secs(60));
    outcome(
        pass,
        format!(
            "grad checks at 20 points: max rel err margin {:.1e}, InfoNCE {:.1e}, supervised {:.1e}, combined {:.1e} (tol 1e-4, h 1e-5), {skipped} kink coords skipped, {} errors, {elapsed:.2?} (limit 60s)",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            errors.len()
        ),
    )
}

/// Sort-based oracle: the pessimistic rank is the number of candidates whose
/// distance does not exceed the target's.
fn oracle_rank(query: &[f64], cands: &[Vec<f64>], target: usize) -> usize {
    let mut d: Vec<(f64, usize)> = cands
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                query.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                i,
            )
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let t = d.iter().find(|x| x.1 == target).unwrap().0;
    d.iter().rposition(|x| x.0 <= t).unwrap() + 1
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0usize;
    let mut ties = 0usize;
    let mut ranks = Vec::new();
    for instance in 0..200 {
        let n = rng.gen_range(1..=50);
        let d = rng.gen_range(1..=4);
        // integer grid coordinates make equal distances common
        let mut cands: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-3..=3) as f64).collect())
            .collect();
        let target = rng.gen_range(0..n);
        if instance % 4 == 0 && n > 1 {
            let other = (target + 1) % n;
            cands[other] = cands[target].clone();
        }
        let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-3..=3) as f64).collect();
        let expected = oracle_rank(&query, &cands, target);
        let got = rank_by_distance(&query, &cands, target).unwrap();
        let tgt = cands[target].clone();
        if cands
            .iter()
            .enumerate()
            .any(|(i, c)| i != target && reaction_score(&query, c).unwrap() == reaction_score(&query, &tgt).unwrap())
        {
            ties += 1;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| cands[i].clone()).collect();
        let new_target = perm.iter().position(|&i| i == target).unwrap();
        let permuted = rank_by_distance(&query, &shuffled, new_target).unwrap();
        if got != expected || permuted != expected {
            mismatches += 1;
        }
        ranks.push(got);
    }

    // graph-level ranking with a duplicated product set
    let corpus = synthetic::reactions(30, 4);
    let vocab = vocab_for(&corpus);
    let params = initial_params(
        &PretrainConfig {
            embedding_dim: 8,
            hidden_dim: 8,
            ..PretrainConfig::default()
        },
        &vocab,
    )
    .unwrap();
    let mut candidates: Vec<Vec<MolGraph>> = corpus.iter().map(|r| r.products.clone()).collect();
    candidates.push(corpus[0].products.clone());
    let cand_emb: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| encode_molecule_set(c, &vocab, &params).unwrap())
        .collect();
    for (t, rx) in corpus.iter().enumerate() {
        let q = encode_molecule_set(&rx.reactants, &vocab, &params).unwrap();
        let got = rank_products(&rx.reactants, &candidates, t, &vocab, &params).unwrap();
        if got != oracle_rank(&q, &cand_emb, t) {
            mismatches += 1;
        }
    }

    let m = ranking_metrics(&ranks).unwrap();
    let n = ranks.len() as f64;
    let metric_ok = m.mrr == ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n
        && m.mr == ranks.iter().map(|&r| r as f64).sum::<f64>() / n
        && [(1, m.hit_at_1), (3, m.hit_at_3), (5, m.hit_at_5), (10, m.hit_at_10)]
            .iter()
            .all(|&(k, v)| v == ranks.iter().filter(|&&r| r <= k).count() as f64 / n);
    let ex = ranking_metrics(&[1, 2, 4]).unwrap();
    let example_ok = (ex.mrr - 0.583_333_333_333_333_3).abs() < 1e-12
        && (ex.mr - 2.333_333_333_333_333).abs() < 1e-12
        && (ex.hit_at_1 - 1.0 / 3.0).abs() < 1e-12
        && (ex.hit_at_3 - 2.0 / 3.0).abs() < 1e-12
        && (ex.hit_at_5 - 1.0).abs() < 1e-12
        && (ex.hit_at_10 - 1.0).abs() < 1e-12;
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && metric_ok && example_ok,
        format!(
            "ranking vs sort oracle: {mismatches} mismatches over 200 vector + 30 graph instances ({ties} with target ties), metrics exact {metric_ok}, [1,2,4] example {example_ok}, {elapsed:.2?}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut violations = 0usize;
    let loss = |r: &[Vec<f64>], p: &[Vec<f64>], y: &[f64]| {
        let tape = Tape::new();
        let rv = tape.constant_owned(Tensor::from_rows(r).unwrap());
        let pv = tape.constant_owned(Tensor::from_rows(p).unwrap());
        margin_loss(rv, pv, y, 6.0, 2.0).unwrap().item()
    };
    for _ in 0..1000 {
        let b = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=8);
        let scale = rng.gen_range(0.1..10.0);
        let r = random_rows(&mut rng, b, d, -scale, scale);
        let p = random_rows(&mut rng, b, d, -scale, scale);
        let y: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let i = rng.gen_range(0..b);
        let mut raised = y.clone();
        raised[i] = rng.gen_range(y[i]..=1.0);
        if loss(&r, &p, &raised) < loss(&r, &p, &y) {
            violations += 1;
        }
    }
    outcome(
        violations == 0,
        format!(
            "raising a yield never lowers the margin loss: {violations} violations over 1000 configurations, {:.2?}",
            start.elapsed()
        ),
    )
}

const CORPUS: [&str; 50] = [
    "C",
    "O",
    "N",
    "CC",
    "CCO",
    "C=C",
    "C#N",
    "CC(=O)O",
    "CC(=O)OCC",
    "OCCO",
    "c1ccccc1",
    "c1ccncc1",
    "c1cc[nH]c1",
    "c1ccoc1",
    "c1ccsc1",
    "Cc1ccccc1O",
    "c1ccc2ccccc2c1",
    "C1CCCCC1",
    "C1CC1",
    "C1CCOC1",
    "[OH-]",
    "[NH4+]",
    "[Na+].[Cl-]",
    "[13CH4]",
    "[2H]O[2H]",
    "C[N+](C)(C)C",
    "[O-]C(=O)C",
    "[Fe+2]",
    "[CH3:1]C",
    "[NH3+]CC([O-])=O",
    "F/C=C/F",
    "F/C=C\\F",
    "N[C@@H](C)C(=O)O",
    "C[C@H](N)O",
    "C%10CCCCC%10",
    "C%12CC%12",
    "CC(C)(C)C",
    "CC(C)CC(C)C",
    "ClC(Cl)Cl",
    "BrCCBr",
    "IC",
    "OB(O)O",
    "P(=O)(O)(O)O",
    "CS(=O)(=O)C",
    "CSC",
    "O=C=O",
    "C1=CC=CC=C1",
    "N#CC#N",
    "CC(=O)Nc1ccc(O)cc1",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
];

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let o = parse_smiles("O").unwrap();
    check(
        o.atoms.len() == 1 && o.atoms[0].implicit_h == 2 && o.atoms[0].charge == 0,
        "O",
    );
    let oh = parse_smiles("[OH-]").unwrap();
    check(
        oh.atoms.len() == 1 && oh.atoms[0].implicit_h == 1 && oh.atoms[0].charge == -1,
        "[OH-]",
    );
    let bz = parse_smiles("c1ccccc1").unwrap();
    let degrees_two = bz.neighbors().iter().all(|n| n.len() == 2);
    check(
        bz.atoms.len() == 6
            && bz.bonds.len() == 6
            && degrees_two
            && bz
                .atoms
                .iter()
                .all(|a| a.aromatic && a.element == "C" && a.implicit_h == 1),
        "benzene",
    );
    check(
        matches!(parse_smiles("C1CC"), Err(e) if e.kind == ParseErrorKind::UnclosedRing),
        "C1CC",
    );
    let ho = explicit_hydrogens(&o);
    check(
        ho.atoms.len() == 3 && ho.bonds.len() == 2 && ho.atoms[1].element == "H" && ho.atoms[2].element == "H",
        "explicit O",
    );
    let cco = explicit_hydrogens(&parse_smiles("CCO").unwrap());
    check(cco.atoms.len() == 9 && cco.bonds.len() == 8, "explicit CCO");
    check(explicit_hydrogens(&cco) == cco, "explicit idempotent");
    let rx = parse_reaction_line("CC(=O)O.CCO\tCC(=O)OCC.O\t0.9").unwrap();
    check(
        rx.reactants.len() == 2 && rx.products.len() == 2 && rx.yield_fraction == 0.9,
        "ester reaction",
    );
    let id = parse_reaction_line("C\tC\t1.0").unwrap();
    check(
        id.reactants.len() == 1 && id.products.len() == 1 && id.yield_fraction == 1.0,
        "identity reaction",
    );
    check(
        matches!(parse_reaction_line("C\tC\t1.5"), Err(ReactionError::YieldOutOfRange(_))),
        "yield out of range",
    );

    let mut round_trip_fail = 0;
    let mut conservation_fail = 0;
    for s in CORPUS {
        let g = parse_smiles(s).unwrap();
        let explicit = explicit_hydrogens(&g);
        if explicit.atoms.len() != g.atoms.len() + g.implicit_h_total() {
            conservation_fail += 1;
        }
        let back = parse_smiles(&to_smiles(&g)).unwrap();
        if structure_hash(&explicit_hydrogens(&back)) != structure_hash(&explicit)
            || back.atoms.len() != g.atoms.len()
            || back.bonds.len() != g.bonds.len()
        {
            round_trip_fail += 1;
        }
    }
    let pass = failures.is_empty() && round_trip_fail == 0 && conservation_fail == 0;
    outcome(
        pass,
        format!(
            "parser: {} example failures {:?}, round-trip failures {round_trip_fail}/50, hydrogen conservation failures {conservation_fail}/50, {:.2?}",
            failures.len(),
            failures,
            start.elapsed()
        ),
    )
}

fn random_graph(rng: &mut ChaCha8Rng) -> MolGraph {
    let elements = [("C", 12), ("N", 14), ("O", 16), ("S", 32)];
    let heavy = rng.gen_range(1..=10);
    let mut atoms = Vec::new();
    let mut bonds = Vec::new();
    let mut budget = 30 - heavy;
    for i in 0..heavy {
        let (e, m) = elements[rng.gen_range(0..elements.len())];
        let h = rng.gen_range(0..=3usize).min(budget);
        budget -= h;
        atoms.push(AtomRecord {
            element: e.to_string(),
            aromatic: rng.gen_bool(0.2),
            mass_bucket: m,
            implicit_h: h as u8,
            parsed_h: h as u8,
            charge: rng.gen_range(-1..=1),
            class_id: 0,
        });
        if i > 0 {
            bonds.push(Bond {
                a: rng.gen_range(0..i),
                b: i,
                kind: BondKind::Single,
            });
        }
    }
    if heavy > 3 && rng.gen_bool(0.5) {
        let a = rng.gen_range(0..heavy);
        let b = rng.gen_range(0..heavy);
        let exists = bonds.iter().any(|x| (x.a, x.b) == (a, b) || (x.a, x.b) == (b, a));
        if a != b && !exists {
            bonds.push(Bond {
                a,
                b,
                kind: BondKind::Double,
            });
        }
    }
    explicit_hydrogens(&MolGraph {
        atoms,
        bonds,
        source: String::new(),
    })
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let graphs: Vec<MolGraph> = (0..50).map(|_| random_graph(&mut rng)).collect();
    let max_atoms = graphs.iter().map(|g| g.atoms.len()).max().unwrap();
    let vocab = build_vocab(&graphs, true).unwrap();
    let mut perm_worst = 0.0f64;
    let mut batch_worst = 0.0f64;
    for (gi, g) in graphs.iter().enumerate() {
        let arch = [Architecture::Tag, Architecture::Gcn, Architecture::Gin][gi % 3];
        let spec = EncoderSpec::new(arch, vocab.total_dim(), 16, 12, 2, 3);
        let params = EncoderParams::init(spec, &mut rng).unwrap();
        let base = encode_graph(g, &vocab, &params).unwrap();
        let mut perm: Vec<usize> = (0..g.atoms.len()).collect();
        perm.shuffle(&mut rng);
        let moved = encode_graph(&g.permuted(&perm), &vocab, &params).unwrap();
        perm_worst = perm_worst.max(base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let others: Vec<&MolGraph> = graphs.choose_multiple(&mut rng, 4).collect();
        let slot = rng.gen_range(0..=others.len());
        let mut members: Vec<&MolGraph> = others;
        members.insert(slot, g);
        let inputs: Vec<GraphInput> = members.iter().map(|m| GraphInput::new(m, &vocab).unwrap()).collect();
        let refs: Vec<&GraphInput> = inputs.iter().collect();
        let batch = encode_inputs(&refs, &params).unwrap();
        batch_worst = batch_worst.max(
            base.iter()
                .zip(batch.row(slot))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    outcome(
        perm_worst < 1e-9 && batch_worst < 1e-10,
        format!(
            "encoder invariances on 50 graphs (max {max_atoms} atoms): permutation max diff {perm_worst:.2e} (tol 1e-9), batch max diff {batch_worst:.2e} (tol 1e-10), {:.2?}",
            start.elapsed()
        ),
    )
}

struct Pretrained {
    params: EncoderParams,
    vocab: FeatureVocab,
}

fn criterion_8() -> (Outcome, Pretrained) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let start = Instant::now();
        let corpus = synthetic::reactions(300, 7);
        let (train, held_out) = corpus.split_at(240);
        let vocab = vocab_for(&corpus);
        let cfg = PretrainConfig {
            seed: 7,
            ..PretrainConfig::default()
        };
        let random = evaluate_ranking(held_out, &vocab, &initial_params(&cfg, &vocab).unwrap()).unwrap();
        let trained = run_pretrain(train, &vocab, &cfg).unwrap();
        let result = evaluate_ranking(held_out, &vocab, &trained.params).unwrap();
        let first = trained.log[0].mean_loss;
        let last = trained.log.last().unwrap().mean_loss;
        let elapsed = start.elapsed();
        let pass = result.hit_at_1 >= 0.8
            && random.hit_at_1 <= 0.2
            && last < 0.2 * first
            && within(elapsed, Duration::from_secs(300));
        (
            outcome(
                pass,
                format!(
                    "synthetic pre-training (300 reactions, 20 fragments, 60 held-out candidates): trained Hit@1 {:.3} (need >= 0.8), random-init Hit@1 {:.3} (need <= 0.2), loss epoch 1 {first:.4} -> epoch 200 {last:.4} (need < 20%), {elapsed:.2?} single-threaded (limit 5 min)",
                    result.hit_at_1, random.hit_at_1
                ),
            ),
            Pretrained {
                params: trained.params,
                vocab,
            },
        )
    })
}

fn criterion_9(teacher: &Pretrained) -> Outcome {
    let start = Instant::now();
    // motifs invisible to single-atom features: isobutyl, cyclohexyl, oxolanyl
    let (data, _) = synthetic::property_task(300, 11, &[3, 11, 12]);
    let all = Split::random(data.len(), 5);
    let mut order: Vec<usize> = all.train.iter().chain(&all.valid).chain(&all.test).copied().collect();
    let split = Split {
        train: order.drain(..40).collect(),
        valid: order.drain(..40).collect(),
        test: order,
    };
    let mean_auc = |beta: f64| -> f64 {
        (0..10)
            .map(|seed| {
                let cfg = DistillConfig {
                    beta,
                    seed,
                    epochs: 30,
                    ..DistillConfig::default()
                };
                finetune(&data, &split, &teacher.params, &teacher.vocab, &cfg)
                    .unwrap()
                    .report
                    .auc_roc
                    .unwrap()
            })
            .sum::<f64>()
            / 10.0
    };
    let distilled = mean_auc(0.5);
    let supervised = mean_auc(1.0);
    let pass = distilled >= supervised;
    let detail = format!(
        "distillation direction: mean test AUC over 10 seeds, beta 0.5 {distilled:.4} vs beta 1 {supervised:.4}, {:.2?}",
        start.elapsed()
    );
    if !pass {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
        let _ = std::fs::write(dir.join("acceptance-warning-9.txt"), format!("{detail}\n"));
    }
    outcome(pass, detail)
}

fn brute_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut auc_mismatch = 0;
    let mut reg_worst = 0.0f64;
    for i in 0..100 {
        let n = rng.gen_range(2..=100);
        let scores: Vec<f64> = if i % 2 == 0 {
            (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect()
        } else {
            (0..n).map(|_| rng.gen::<f64>()).collect()
        };
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        if auc_roc(&scores, &labels).unwrap() != brute_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
        let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut sq = 0.0;
        let mut ab = 0.0;
        for k in 0..n {
            sq += (preds[k] - truth[k]).powi(2);
            ab += (preds[k] - truth[k]).abs();
        }
        reg_worst = reg_worst
            .max((rmse(&preds, &truth).unwrap() - (sq / n as f64).sqrt()).abs())
            .max((mae(&preds, &truth).unwrap() - ab / n as f64).abs());
    }

    let m = |s: &str| explicit_hydrogens(&parse_smiles(s).unwrap());
    let set = PerturbationSet {
        original: vec![m("CCO"), m("CCCO"), m("c1ccccc1"), m("CC(=O)O")],
        property: vec![0.2, 0.4, 1.5, -0.3],
        perturbed: vec![m("CCN"), m("CCCN"), m("c1ccncc1"), m("CC(=O)N")],
        perturbed_property: vec![0.1, 0.7, 1.1, -0.2],
        level: vec![1, 1, 2, 3],
    };
    let smiles_of = |g: &MolGraph| g.source.clone();
    let truth: BTreeMap<String, f64> = set
        .original
        .iter()
        .zip(&set.property)
        .chain(set.perturbed.iter().zip(&set.perturbed_property))
        .map(|(g, &p)| (smiles_of(g), p))
        .collect();
    let perfect = effect_score(&set, |g| Ok(truth[&smiles_of(g)])).unwrap();
    let constant = effect_score(&set, |_| Ok(0.5)).unwrap();
    let perfect_ok = perfect.values().all(|&d| d == 0.0);
    let constant_ok = constant.iter().all(|(level, &d)| {
        let (q, q2): (Vec<f64>, Vec<f64>) = (0..set.len())
            .filter(|&i| set.level[i] == *level)
            .map(|i| (set.property[i], set.perturbed_property[i]))
            .unzip();
        d == -rmse(&q, &q2).unwrap()
    });
    outcome(
        auc_mismatch == 0 && reg_worst <= 1e-12 && perfect_ok && constant_ok,
        format!(
            "metrics: AUC mismatches vs pairwise count {auc_mismatch}/100, RMSE/MAE max diff {reg_worst:.2e} (tol 1e-12), effect score perfect -> 0 {perfect_ok}, constant -> -L(Q,Q') {constant_ok}, {:.2?}",
            start.elapsed()
        ),
    )
}

fn criterion_11() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic::reactions(40, 3);
    let vocab = vocab_for(&corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut mismatches = 0;
    for i in 0..20 {
        let arch = [Architecture::Tag, Architecture::Gcn, Architecture::Gin][i % 3];
        let spec = EncoderSpec::new(
            arch,
            vocab.total_dim(),
            rng.gen_range(1..=24),
            rng.gen_range(1..=24),
            rng.gen_range(1..=3),
            rng.gen_range(0..=3),
        );
        let params = EncoderParams::init(spec, &mut rng).unwrap();
        let ckpt = Checkpoint::teacher(&params, &vocab, serde_json::json!({"model": i}), BTreeMap::new());
        let path = dir.path().join(format!("model{i}.ckpt"));
        ckpt.save(&path).unwrap();
        let written = std::fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let bitwise = params.weights.iter().zip(&loaded.tensors).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !bitwise || loaded.to_bytes().unwrap() != written || loaded.into_teacher().unwrap().0 != params {
            mismatches += 1;
        }
    }
    let cfg = PretrainConfig {
        epochs: 5,
        batch_size: 8,
        embedding_dim: 8,
        hidden_dim: 8,
        seed: 11,
        ..PretrainConfig::default()
    };
    let log_a = format_log(&run_pretrain(&corpus, &vocab, &cfg).unwrap().log);
    let log_b = format_log(&run_pretrain(&corpus, &vocab, &cfg).unwrap().log);
    let logs_equal = log_a.as_bytes() == log_b.as_bytes() && !log_a.is_empty();
    outcome(
        mismatches == 0 && logs_equal,
        format!(
            "persistence: {mismatches}/20 checkpoint round-trips not bitwise exact, seeded training logs byte-identical {logs_equal}, {:.2?}",
            start.elapsed()
        ),
    )
}

fn main() {
    let mut hard_failures = 0;
    let mut report = |id: u32, o: Outcome, soft: bool| {
        let tag = match (o.pass, soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => {
                hard_failures += 1;
                "FAIL"
            }
        };
        println!("criterion {id:>2} [{tag}] {}", o.detail);
    };
    report(1, criterion_1(), false);
    report(2, criterion_2(), false);
    report(3, criterion_3(), false);
    report(4, criterion_4(), false);
    report(5, criterion_5(), false);
    report(6, criterion_6(), false);
    report(7, criterion_7(), false);
    let (c8, teacher) = criterion_8();
    report(8, c8, false);
    report(9, criterion_9(&teacher), true);
    report(10, criterion_10(), false);
    report(11, criterion_11(), false);
    if hard_failures > 0 {
        println!("{hard_failures} criteria failed");
        std::process::exit(1);
    }
}
