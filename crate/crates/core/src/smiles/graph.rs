use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::elements::{default_valences, is_element, AROMATIC_BRACKET};
use super::token::{tokenize, Token, TokenKind};
use super::SmilesError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub(crate) fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    fn from_symbol(c: u8) -> Option<Self> {
        match c {
            b'-' => Some(BondOrder::Single),
            b'=' => Some(BondOrder::Double),
            b'#' => Some(BondOrder::Triple),
            b':' => Some(BondOrder::Aromatic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Atom {
    /// Capitalized element symbol, e.g. `"C"`, `"Cl"`, `"Se"`.
    pub element: String,
    pub aromatic: bool,
    pub charge: i32,
    /// Explicit hydrogen count. `Some` exactly for bracket atoms.
    pub h_count: Option<u32>,
}

impl Atom {
    pub fn organic(element: &str, aromatic: bool) -> Self {
        Atom {
            element: element.to_string(),
            aromatic,
            charge: 0,
            h_count: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolGraph {
    /// Adds a bond, refusing self-loops and duplicates.
    pub fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> bool {
        if a == b || a >= self.atoms.len() || b >= self.atoms.len() || self.bond_between(a, b).is_some() {
            return false;
        }
        self.bonds.push(Bond { a, b, order });
        true
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<BondOrder> {
        self.bonds
            .iter()
            .find(|bd| (bd.a == a && bd.b == b) || (bd.a == b && bd.b == a))
            .map(|bd| bd.order)
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, BondOrder)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for bd in &self.bonds {
            adj[bd.a].push((bd.b, bd.order));
            adj[bd.b].push((bd.a, bd.order));
        }
        adj
    }

    /// Connected components, each listed in ascending atom order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut out = Vec::new();
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(a) = stack.pop() {
                comp.push(a);
                for &(n, _) in &adj[a] {
                    if !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Attached hydrogens: the explicit count for bracket atoms, otherwise the
    /// smallest standard valence that accommodates the bonds.
    pub fn hydrogen_count(&self, atom: usize, adj: &[Vec<(usize, BondOrder)>]) -> u32 {
        let at = &self.atoms[atom];
        if let Some(h) = at.h_count {
            return h;
        }
        let mut used: u32 = adj[atom]
            .iter()
            .map(|&(_, o)| match o {
                BondOrder::Single | BondOrder::Aromatic => 1,
                BondOrder::Double => 2,
                BondOrder::Triple => 3,
            })
            .sum();
        if at.aromatic {
            used += 1;
        }
        default_valences(&at.element)
            .iter()
            .find(|&&v| v >= used)
            .map_or(0, |&v| v - used)
    }
}

/// Parses a SMILES string into a molecular graph.
pub fn parse(smiles: &str) -> Result<MolGraph, SmilesError> {
    let tokens = tokenize(smiles)?;
    let mut graph = MolGraph::default();
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondOrder, usize)> = None;
    let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, (usize, Option<BondOrder>, usize)> = BTreeMap::new();

    for tok in &tokens {
        let pos = tok.position;
        match tok.kind {
            TokenKind::Atom | TokenKind::BracketAtom => {
                let atom = if tok.kind == TokenKind::Atom {
                    organic_atom(&tok.text)
                } else {
                    bracket_atom(tok)?
                };
                graph.atoms.push(atom);
                let idx = graph.atoms.len() - 1;
                if let Some(p) = prev {
                    let order = pending.take().map(|(o, _)| o).unwrap_or_else(|| implicit(&graph, p, idx));
                    graph.add_bond(p, idx, order);
                } else if let Some((_, bpos)) = pending {
                    return Err(SmilesError::InvalidBond { position: bpos });
                }
                prev = Some(idx);
            }
            TokenKind::Bond => {
                let c = tok.text.as_bytes()[0];
                if c == b'/' || c == b'\\' {
                    return Err(SmilesError::StereoUnsupported { position: pos });
                }
                if pending.is_some() || prev.is_none() {
                    return Err(SmilesError::InvalidBond { position: pos });
                }
                pending = BondOrder::from_symbol(c).map(|o| (o, pos));
            }
            TokenKind::RingBond => {
                let Some(atom) = prev else {
                    return Err(SmilesError::InvalidBond { position: pos });
                };
                let digit: u32 = tok.text.trim_start_matches('%').parse().expect("lexer emits digits");
                let here = pending.take();
                match rings.remove(&digit) {
                    Some((partner, opened, _)) => {
                        let order = match (opened, here.map(|(o, _)| o)) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(SmilesError::InvalidBond { position: pos })
                            }
                            (Some(o), _) | (None, Some(o)) => o,
                            (None, None) => implicit(&graph, partner, atom),
                        };
                        if !graph.add_bond(partner, atom, order) {
                            return Err(SmilesError::InvalidBond { position: pos });
                        }
                    }
                    None => {
                        rings.insert(digit, (atom, here.map(|(o, _)| o), pos));
                    }
                }
            }
            TokenKind::BranchOpen => {
                if prev.is_none() || pending.is_some() {
                    return Err(SmilesError::UnexpectedCharacter { position: pos, ch: '(' });
                }
                branches.push((prev, pos));
            }
            TokenKind::BranchClose => {
                if let Some((_, bpos)) = pending {
                    return Err(SmilesError::InvalidBond { position: bpos });
                }
                match branches.pop() {
                    Some((atom, _)) => prev = atom,
                    None => return Err(SmilesError::UnmatchedBranchClose { position: pos }),
                }
            }
            TokenKind::Dot => {
                if let Some((_, bpos)) = pending {
                    return Err(SmilesError::InvalidBond { position: bpos });
                }
                prev = None;
            }
        }
    }

    if let Some((_, bpos)) = pending {
        return Err(SmilesError::InvalidBond { position: bpos });
    }
    if let Some(&(_, position)) = branches.first() {
        return Err(SmilesError::UnclosedBranch { position });
    }
    if let Some((&digit, _)) = rings.iter().next() {
        return Err(SmilesError::UnmatchedRingBond { digit });
    }
    Ok(graph)
}

fn implicit(graph: &MolGraph, a: usize, b: usize) -> BondOrder {
    if graph.atoms[a].aromatic && graph.atoms[b].aromatic {
        BondOrder::Aromatic
    } else {
        BondOrder::Single
    }
}

fn organic_atom(text: &str) -> Atom {
    let aromatic = text.as_bytes()[0].is_ascii_lowercase();
    Atom::organic(&capitalize(text), aromatic)
}

fn capitalize(s: &str) -> String {
    let mut out = s[..1].to_ascii_uppercase();
    out.push_str(&s[1..]);
    out
}

/// `[` symbol hcount? charge? `]`; isotopes and chirality are rejected.
fn bracket_atom(tok: &Token) -> Result<Atom, SmilesError> {
    let base = tok.position;
    let body = &tok.text.as_bytes()[1..tok.text.len() - 1];
    let invalid = |offset: usize| SmilesError::InvalidBracketAtom {
        position: base + 1 + offset,
    };
    if let Some(off) = body.iter().position(|&b| b == b'@') {
        return Err(SmilesError::StereoUnsupported {
            position: base + 1 + off,
        });
    }
    if body.first().is_some_and(u8::is_ascii_digit) {
        return Err(SmilesError::StereoUnsupported { position: base + 1 });
    }

    let mut i;
    let (element, aromatic) = {
        let first = *body.first().ok_or_else(|| invalid(0))?;
        if first.is_ascii_uppercase() {
            let two = body
                .get(1)
                .filter(|c| c.is_ascii_lowercase())
                .map(|&c| [first, c]);
            match two.map(|t| String::from_utf8_lossy(&t).into_owned()) {
                Some(sym) if is_element(&sym) => {
                    i = 2;
                    (sym, false)
                }
                _ => {
                    let sym = (first as char).to_string();
                    if !is_element(&sym) {
                        return Err(invalid(0));
                    }
                    i = 1;
                    (sym, false)
                }
            }
        } else if first.is_ascii_lowercase() {
            let two = body.get(1).map(|&c| capitalize(&String::from_utf8_lossy(&[first, c])));
            match two {
                Some(sym) if AROMATIC_BRACKET.contains(&sym.as_str()) => {
                    i = 2;
                    (sym, true)
                }
                _ => {
                    let sym = capitalize(&(first as char).to_string());
                    if !AROMATIC_BRACKET.contains(&sym.as_str()) {
                        return Err(invalid(0));
                    }
                    i = 1;
                    (sym, true)
                }
            }
        } else {
            return Err(invalid(0));
        }
    };

    let mut h_count = 0;
    if body.get(i) == Some(&b'H') {
        i += 1;
        h_count = 1;
        if let Some(d) = body.get(i).filter(|c| c.is_ascii_digit()) {
            h_count = u32::from(d - b'0');
            i += 1;
        }
    }

    let mut charge = 0i32;
    if let Some(&sign) = body.get(i).filter(|&&c| c == b'+' || c == b'-') {
        let unit = if sign == b'+' { 1 } else { -1 };
        i += 1;
        let digits: Vec<u8> = body[i..].iter().copied().take_while(u8::is_ascii_digit).collect();
        if !digits.is_empty() {
            let mag: i32 = std::str::from_utf8(&digits)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| invalid(i))?;
            charge = unit * mag;
            i += digits.len();
        } else {
            charge = unit;
            while body.get(i) == Some(&sign) {
                charge += unit;
                i += 1;
            }
        }
    }

    if i != body.len() {
        return Err(invalid(i));
    }
    Ok(Atom {
        element,
        aromatic,
        charge,
        h_count: Some(h_count),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(g: &MolGraph) -> Vec<(usize, usize)> {
        g.bonds.iter().map(|b| (b.a.min(b.b), b.a.max(b.b))).collect()
    }

    #[test]
    fn ethanol() {
        let g = parse("CCO").unwrap();
        let elems: Vec<_> = g.atoms.iter().map(|a| a.element.as_str()).collect();
        assert_eq!(elems, ["C", "C", "O"]);
        assert_eq!(pairs(&g), [(0, 1), (1, 2)]);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn ring_closure_forms_triangle() {
        let g = parse("C1CC1").unwrap();
        assert_eq!(g.atoms.len(), 3);
        let mut p = pairs(&g);
        p.sort();
        assert_eq!(p, [(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn unclosed_branch() {
        assert_eq!(parse("C(C"), Err(SmilesError::UnclosedBranch { position: 1 }));
    }

    #[test]
    fn unmatched_ring() {
        assert_eq!(parse("C1CC"), Err(SmilesError::UnmatchedRingBond { digit: 1 }));
    }

    #[test]
    fn stereo_rejected() {
        assert!(matches!(parse("F/C=C/F"), Err(SmilesError::StereoUnsupported { position: 1 })));
        assert!(matches!(parse("N[C@@H](C)C(=O)O"), Err(SmilesError::StereoUnsupported { .. })));
        assert!(matches!(parse("[13CH4]"), Err(SmilesError::StereoUnsupported { .. })));
    }

    #[test]
    fn aromatic_and_bracket_atoms() {
        let g = parse("c1cc[nH]c1").unwrap();
        assert!(g.atoms.iter().all(|a| a.aromatic));
        assert_eq!(g.atoms[3].h_count, Some(1));
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Aromatic));

        let g = parse("C(=O)[O-]").unwrap();
        assert_eq!(g.atoms[2].charge, -1);
        assert_eq!(g.bond_between(0, 1), Some(BondOrder::Double));

        let g = parse("[Na+].[Cl-]").unwrap();
        assert_eq!(g.atoms[0].element, "Na");
        assert!(g.bonds.is_empty());
        assert_eq!(parse("[Fe++]").unwrap().atoms[0].charge, 2);
        assert_eq!(parse("[Fe+3]").unwrap().atoms[0].charge, 3);
        assert_eq!(parse("[NH4+]").unwrap().atoms[0].h_count, Some(4));
        assert_eq!(parse("[se]1cccc1").unwrap().atoms[0].element, "Se");
    }

    #[test]
    fn ring_bond_orders() {
        let g = parse("C=1CCCCC1").unwrap();
        assert_eq!(g.bond_between(0, 5), Some(BondOrder::Double));
        let g = parse("C1CCCCC=1").unwrap();
        assert_eq!(g.bond_between(0, 5), Some(BondOrder::Double));
        assert!(matches!(parse("C=1CCCCC#1"), Err(SmilesError::InvalidBond { .. })));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(parse("C11"), Err(SmilesError::InvalidBond { .. })));
        assert!(matches!(parse("C12CCC12"), Err(SmilesError::InvalidBond { .. })));
        assert!(matches!(parse("CC="), Err(SmilesError::InvalidBond { .. })));
        assert!(matches!(parse("=CC"), Err(SmilesError::InvalidBond { .. })));
        assert!(matches!(parse("CC)"), Err(SmilesError::UnmatchedBranchClose { position: 2 })));
        assert!(matches!(parse("(C)"), Err(SmilesError::UnexpectedCharacter { .. })));
        assert!(matches!(parse("[Xx]"), Err(SmilesError::InvalidBracketAtom { .. })));
        assert!(matches!(parse("[C:1]"), Err(SmilesError::InvalidBracketAtom { .. })));
    }

    #[test]
    fn implicit_hydrogens() {
        let g = parse("CC(=O)O").unwrap();
        let adj = g.adjacency();
        let hs: Vec<u32> = (0..4).map(|i| g.hydrogen_count(i, &adj)).collect();
        assert_eq!(hs, [3, 0, 0, 1]);
        let g = parse("c1ccncc1").unwrap();
        let adj = g.adjacency();
        assert_eq!(g.hydrogen_count(0, &adj), 1);
        assert_eq!(g.hydrogen_count(3, &adj), 0);
    }
}
