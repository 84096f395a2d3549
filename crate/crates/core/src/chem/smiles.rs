use std::collections::{BTreeMap, HashSet};

use super::{default_valences, mass_bucket, AtomRecord, Bond, BondKind, MolGraph, ParseError, ParseErrorKind};

#[derive(Clone, Copy)]
enum PendingBond {
    Kind(BondKind),
    /// `/` or `\`: a single bond whose stereo meaning is discarded.
    Stereo,
}

struct RingOpen {
    atom: usize,
    bond: Option<PendingBond>,
    offset: usize,
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    atoms: Vec<AtomRecord>,
    bracketed: Vec<bool>,
    bonds: Vec<Bond>,
    seen: HashSet<(usize, usize)>,
}

impl<'a> Parser<'a> {
    fn err(&self, kind: ParseErrorKind, offset: usize) -> ParseError {
        ParseError {
            kind,
            offset,
            smiles: self.text.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn add_bond(&mut self, a: usize, b: usize, pending: Option<PendingBond>, offset: usize) -> Result<(), ParseError> {
        if a == b {
            return Err(self.err(ParseErrorKind::UnexpectedCharacter, offset));
        }
        let key = (a.min(b), a.max(b));
        if !self.seen.insert(key) {
            return Err(self.err(ParseErrorKind::UnexpectedCharacter, offset));
        }
        let kind = match pending {
            Some(PendingBond::Kind(k)) => k,
            Some(PendingBond::Stereo) => BondKind::Single,
            None => {
                if self.atoms[a].aromatic && self.atoms[b].aromatic {
                    BondKind::Aromatic
                } else {
                    BondKind::Single
                }
            }
        };
        self.bonds.push(Bond { a, b, kind });
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<AtomRecord, ParseError> {
        let start = self.pos;
        let c = self.bytes[self.pos];
        let (symbol, aromatic, len) = match c {
            b'C' if self.bytes.get(start + 1) == Some(&b'l') => ("Cl", false, 2),
            b'B' if self.bytes.get(start + 1) == Some(&b'r') => ("Br", false, 2),
            b'B' => ("B", false, 1),
            b'C' => ("C", false, 1),
            b'N' => ("N", false, 1),
            b'O' => ("O", false, 1),
            b'P' => ("P", false, 1),
            b'S' => ("S", false, 1),
            b'F' => ("F", false, 1),
            b'I' => ("I", false, 1),
            b'b' => ("B", true, 1),
            b'c' => ("C", true, 1),
            b'n' => ("N", true, 1),
            b'o' => ("O", true, 1),
            b'p' => ("P", true, 1),
            b's' => ("S", true, 1),
            _ => return Err(self.err(ParseErrorKind::UnknownElement, start)),
        };
        self.pos += len;
        Ok(AtomRecord {
            element: symbol.to_string(),
            aromatic,
            mass_bucket: mass_bucket(symbol).expect("organic subset is in the table"),
            implicit_h: 0,
            parsed_h: 0,
            charge: 0,
            class_id: 0,
        })
    }

    fn digits(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            self.text[start..self.pos].parse().ok()
        }
    }

    fn bracket_atom(&mut self) -> Result<AtomRecord, ParseError> {
        let open = self.pos;
        self.pos += 1;
        let malformed = |p: &Self, at: usize| p.err(ParseErrorKind::MalformedBracketAtom, at);

        // isotope, discarded
        self.digits();

        let sym_start = self.pos;
        let (symbol, aromatic) = match self.peek() {
            Some(c) if c.is_ascii_uppercase() => {
                let two = self
                    .bytes
                    .get(self.pos + 1)
                    .filter(|n| n.is_ascii_lowercase())
                    .map(|&n| {
                        let mut s = String::new();
                        s.push(c as char);
                        s.push(n as char);
                        s
                    });
                match two {
                    Some(s) if mass_bucket(&s).is_some() => {
                        self.pos += 2;
                        (s, false)
                    }
                    _ => {
                        let s = (c as char).to_string();
                        if mass_bucket(&s).is_none() {
                            return Err(self.err(ParseErrorKind::UnknownElement, sym_start));
                        }
                        self.pos += 1;
                        (s, false)
                    }
                }
            }
            Some(c) if c.is_ascii_lowercase() => {
                let rest = &self.bytes[self.pos..];
                let (sym, len) = if rest.starts_with(b"se") {
                    ("Se", 2)
                } else if rest.starts_with(b"as") {
                    ("As", 2)
                } else {
                    match c {
                        b'b' => ("B", 1),
                        b'c' => ("C", 1),
                        b'n' => ("N", 1),
                        b'o' => ("O", 1),
                        b'p' => ("P", 1),
                        b's' => ("S", 1),
                        _ => return Err(self.err(ParseErrorKind::UnknownElement, sym_start)),
                    }
                };
                self.pos += len;
                (sym.to_string(), true)
            }
            _ => return Err(malformed(self, sym_start)),
        };

        // chirality, discarded
        if self.peek() == Some(b'@') {
            self.pos += 1;
            if self.peek() == Some(b'@') {
                self.pos += 1;
            } else {
                let rest = &self.bytes[self.pos..];
                if ["TH", "AL", "SP", "TB", "OH"]
                    .iter()
                    .any(|t| rest.starts_with(t.as_bytes()))
                {
                    self.pos += 2;
                    if self.digits().is_none() {
                        return Err(malformed(self, self.pos));
                    }
                }
            }
        }

        let mut hydrogens = 0u32;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            hydrogens = self.digits().unwrap_or(1);
        }

        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.digits() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }

        let mut class_id = 0u32;
        if self.peek() == Some(b':') {
            self.pos += 1;
            class_id = match self.digits() {
                Some(n) => n,
                None => return Err(malformed(self, self.pos)),
            };
        }

        if self.peek() != Some(b']') {
            return Err(malformed(
                self,
                if self.pos >= self.bytes.len() { open } else { self.pos },
            ));
        }
        self.pos += 1;

        if hydrogens > u8::MAX as u32 {
            return Err(malformed(self, open));
        }
        let mass = mass_bucket(&symbol).expect("checked above");
        Ok(AtomRecord {
            element: symbol,
            aromatic,
            mass_bucket: mass,
            implicit_h: hydrogens as u8,
            parsed_h: hydrogens as u8,
            charge,
            class_id,
        })
    }

    fn ring_label(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        if self.bytes[self.pos] == b'%' {
            let d = &self.bytes[self.pos + 1..];
            if d.len() >= 2 && d[0].is_ascii_digit() && d[1].is_ascii_digit() {
                self.pos += 3;
                Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u32)
            } else {
                Err(self.err(ParseErrorKind::UnexpectedCharacter, start))
            }
        } else {
            self.pos += 1;
            Ok((self.bytes[start] - b'0') as u32)
        }
    }

    fn run(mut self) -> Result<MolGraph, ParseError> {
        let mut prev: Option<usize> = None;
        let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
        let mut pending: Option<(PendingBond, usize)> = None;
        let mut rings: BTreeMap<u32, RingOpen> = BTreeMap::new();

        while let Some(c) = self.peek() {
            let offset = self.pos;
            match c {
                b'[' | b'A'..=b'Z' | b'a'..=b'z' => {
                    let atom = if c == b'[' {
                        self.bracket_atom()?
                    } else {
                        self.organic_atom()?
                    };
                    let idx = self.atoms.len();
                    self.atoms.push(atom);
                    self.bracketed.push(c == b'[');
                    if let Some(p) = prev {
                        let bond = pending.take().map(|(b, _)| b);
                        self.add_bond(p, idx, bond, offset)?;
                    } else if let Some((_, at)) = pending {
                        return Err(self.err(ParseErrorKind::DanglingBond, at));
                    }
                    prev = Some(idx);
                }
                b'(' => {
                    if prev.is_none() {
                        return Err(self.err(ParseErrorKind::UnbalancedParen, offset));
                    }
                    if let Some((_, at)) = pending {
                        return Err(self.err(ParseErrorKind::DanglingBond, at));
                    }
                    branches.push((prev, offset));
                    self.pos += 1;
                }
                b')' => {
                    if let Some((_, at)) = pending {
                        return Err(self.err(ParseErrorKind::DanglingBond, at));
                    }
                    match branches.pop() {
                        Some((p, _)) => prev = p,
                        None => return Err(self.err(ParseErrorKind::UnbalancedParen, offset)),
                    }
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if pending.is_some() || prev.is_none() {
                        return Err(self.err(ParseErrorKind::DanglingBond, offset));
                    }
                    let bond = match c {
                        b'-' => PendingBond::Kind(BondKind::Single),
                        b'=' => PendingBond::Kind(BondKind::Double),
                        b'#' => PendingBond::Kind(BondKind::Triple),
                        b':' => PendingBond::Kind(BondKind::Aromatic),
                        _ => PendingBond::Stereo,
                    };
                    pending = Some((bond, offset));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(atom) = prev else {
                        return Err(self.err(ParseErrorKind::UnexpectedCharacter, offset));
                    };
                    let label = self.ring_label()?;
                    let bond = pending.take().map(|(b, _)| b);
                    match rings.remove(&label) {
                        Some(open) => {
                            let chosen = bond.or(open.bond);
                            self.add_bond(open.atom, atom, chosen, offset)?;
                        }
                        None => {
                            rings.insert(label, RingOpen { atom, bond, offset });
                        }
                    }
                }
                b'.' => {
                    if let Some((_, at)) = pending {
                        return Err(self.err(ParseErrorKind::DanglingBond, at));
                    }
                    prev = None;
                    self.pos += 1;
                }
                _ => return Err(self.err(ParseErrorKind::UnexpectedCharacter, offset)),
            }
        }

        if let Some((_, at)) = pending {
            return Err(self.err(ParseErrorKind::DanglingBond, at));
        }
        if let Some(&(_, at)) = branches.first() {
            return Err(self.err(ParseErrorKind::UnbalancedParen, at));
        }
        if let Some(open) = rings.values().min_by_key(|o| o.offset) {
            return Err(self.err(ParseErrorKind::UnclosedRing, open.offset));
        }

        self.fill_implicit_hydrogens();
        Ok(MolGraph {
            atoms: self.atoms,
            bonds: self.bonds,
            source: self.text.to_string(),
        })
    }

    fn fill_implicit_hydrogens(&mut self) {
        let mut order_sum = vec![0.0f64; self.atoms.len()];
        for b in &self.bonds {
            order_sum[b.a] += b.kind.order();
            order_sum[b.b] += b.kind.order();
        }
        for (i, atom) in self.atoms.iter_mut().enumerate() {
            if self.bracketed[i] {
                continue;
            }
            // aromatic heteroatoms carrying H must be written in brackets
            if atom.aromatic && atom.element != "C" && atom.element != "B" {
                continue;
            }
            let used = order_sum[i].ceil() as u32;
            let h = default_valences(&atom.element)
                .iter()
                .find(|&&v| v >= used)
                .map_or(0, |v| v - used);
            atom.implicit_h = h as u8;
            atom.parsed_h = h as u8;
        }
    }
}

/// Parses a SMILES string from the supported subset.
///
/// Organic-subset atoms get implicit hydrogens from the default valence
/// table; bracket atoms carry exactly the hydrogens they state. Stereo marks
/// and isotopes are consumed and dropped. Dot-separated components end up as
/// disconnected pieces of one graph.
pub fn parse_smiles(s: &str) -> Result<MolGraph, ParseError> {
    let text = s.trim();
    if text.is_empty() {
        return Err(ParseError {
            kind: ParseErrorKind::EmptyInput,
            offset: 0,
            smiles: s.to_string(),
        });
    }
    Parser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bracketed: Vec::new(),
        bonds: Vec::new(),
        seen: HashSet::new(),
    }
    .run()
}

fn atom_text(atom: &AtomRecord) -> String {
    let mut s = String::from("[");
    if atom.aromatic {
        s.push_str(&atom.element.to_ascii_lowercase());
    } else {
        s.push_str(&atom.element);
    }
    match atom.implicit_h {
        0 => {}
        1 => s.push('H'),
        n => s.push_str(&format!("H{n}")),
    }
    match atom.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("-{}", -c)),
    }
    if atom.class_id > 0 {
        s.push_str(&format!(":{}", atom.class_id));
    }
    s.push(']');
    s
}

fn ring_text(n: u32) -> String {
    if n < 10 {
        n.to_string()
    } else {
        format!("%{n:02}")
    }
}

struct Writer<'g> {
    g: &'g MolGraph,
    nb: Vec<Vec<(usize, BondKind)>>,
    visited: Vec<bool>,
    children: Vec<Vec<(usize, BondKind)>>,
    // (partner, bond, bond id); openings live on the earlier atom
    openings: Vec<Vec<(usize, BondKind)>>,
    closings: Vec<Vec<usize>>,
    used: HashSet<(usize, usize)>,
}

impl Writer<'_> {
    fn default_kind(&self, a: usize, b: usize) -> BondKind {
        if self.g.atoms[a].aromatic && self.g.atoms[b].aromatic {
            BondKind::Aromatic
        } else {
            BondKind::Single
        }
    }

    fn explore(&mut self, u: usize) {
        self.visited[u] = true;
        for k in 0..self.nb[u].len() {
            let (v, kind) = self.nb[u][k];
            let key = (u.min(v), u.max(v));
            if self.used.contains(&key) {
                continue;
            }
            self.used.insert(key);
            if self.visited[v] {
                self.openings[v].push((u, kind));
                self.closings[u].push(v);
            } else {
                self.children[u].push((v, kind));
                self.explore(v);
            }
        }
    }

    fn bond_text(&self, a: usize, b: usize, kind: BondKind) -> Option<char> {
        (kind != self.default_kind(a, b)).then(|| kind.symbol())
    }

    fn emit(&self, u: usize, out: &mut String, labels: &mut BTreeMap<(usize, usize), u32>) {
        out.push_str(&atom_text(&self.g.atoms[u]));
        for &(partner, kind) in &self.openings[u] {
            let mut n = 1;
            while labels.values().any(|&l| l == n) {
                n += 1;
            }
            labels.insert((u, partner), n);
            if let Some(c) = self.bond_text(u, partner, kind) {
                out.push(c);
            }
            out.push_str(&ring_text(n));
        }
        for &opener in &self.closings[u] {
            let n = labels.remove(&(opener, u)).expect("ring opened before closing");
            out.push_str(&ring_text(n));
        }
        let kids = &self.children[u];
        for (i, &(v, kind)) in kids.iter().enumerate() {
            let last = i + 1 == kids.len();
            if !last {
                out.push('(');
            }
            if let Some(c) = self.bond_text(u, v, kind) {
                out.push(c);
            }
            self.emit(v, out, labels);
            if !last {
                out.push(')');
            }
        }
    }
}

/// Writes a SMILES string for `g` using bracket atoms throughout, so pending
/// hydrogen counts, charges and classes survive a reparse exactly.
pub fn to_smiles(g: &MolGraph) -> String {
    let n = g.atoms.len();
    let mut w = Writer {
        g,
        nb: g.neighbors(),
        visited: vec![false; n],
        children: vec![Vec::new(); n],
        openings: vec![Vec::new(); n],
        closings: vec![Vec::new(); n],
        used: HashSet::new(),
    };
    let mut roots = Vec::new();
    for start in 0..n {
        if !w.visited[start] {
            roots.push(start);
            w.explore(start);
        }
    }
    let mut out = String::new();
    let mut labels = BTreeMap::new();
    for (i, &r) in roots.iter().enumerate() {
        if i > 0 {
            out.push('.');
        }
        w.emit(r, &mut out, &mut labels);
    }
    out
}
