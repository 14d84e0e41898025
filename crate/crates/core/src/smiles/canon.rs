//! Canonical SMILES via Morgan-style rank refinement.
//!
//! Atoms start ranked by (element, aromatic, charge, degree, hydrogens). Ranks
//! are refined by sorted neighbor (rank, bond order) lists until the number of
//! classes stops growing. Remaining ties are split at the lowest tied rank,
//! favouring the lower input index, and refinement is repeated until every
//! atom has its own rank. Writing is depth-first from the lowest-rank atom with
//! neighbors visited in rank order.
//!
//! For ties between atoms that are not automorphic (refinement failed to
//! separate them) the output can depend on input order.

use std::collections::{BTreeMap, HashSet};

use super::elements::{AROMATIC_ORGANIC, ORGANIC};
use super::graph::{parse, BondOrder, MolGraph};
use super::SmilesError;

pub fn canonicalize_str(smiles: &str) -> Result<String, SmilesError> {
    Ok(canonicalize(&parse(smiles)?))
}

/// Canonical SMILES of a graph. Fragments are written separately and joined
/// by `.` in sorted order.
pub fn canonicalize(graph: &MolGraph) -> String {
    let mut parts: Vec<String> = graph
        .components()
        .into_iter()
        .map(|comp| {
            let sub = subgraph(graph, &comp);
            let ranks = canonical_ranks(&sub);
            write_with_priority(&sub, &ranks)
        })
        .collect();
    parts.sort();
    parts.join(".")
}

fn subgraph(graph: &MolGraph, atoms: &[usize]) -> MolGraph {
    let mut index = vec![usize::MAX; graph.atoms.len()];
    for (new, &old) in atoms.iter().enumerate() {
        index[old] = new;
    }
    let mut sub = MolGraph {
        atoms: atoms.iter().map(|&a| graph.atoms[a].clone()).collect(),
        bonds: Vec::new(),
    };
    for bd in &graph.bonds {
        if index[bd.a] != usize::MAX {
            sub.add_bond(index[bd.a], index[bd.b], bd.order);
        }
    }
    sub
}

/// Distinct ranks `0..n` for every atom of the graph.
pub fn canonical_ranks(graph: &MolGraph) -> Vec<usize> {
    let adj = graph.adjacency();
    let initial: Vec<(String, bool, i32, usize, u32)> = graph
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            (
                a.element.clone(),
                a.aromatic,
                a.charge,
                adj[i].len(),
                graph.hydrogen_count(i, &adj),
            )
        })
        .collect();
    let mut ranks = dense_rank(&initial);
    let n = graph.atoms.len();
    loop {
        ranks = refine(ranks, &adj);
        let classes = class_count(&ranks);
        if classes == n {
            return ranks;
        }
        let tied = lowest_tied_rank(&ranks);
        let chosen = (0..n).find(|&i| ranks[i] == tied).expect("tied rank has members");
        let split: Vec<usize> = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| 2 * r + usize::from(r == tied && i != chosen))
            .collect();
        ranks = dense_rank(&split);
    }
}

fn refine(mut ranks: Vec<usize>, adj: &[Vec<(usize, BondOrder)>]) -> Vec<usize> {
    let mut classes = class_count(&ranks);
    loop {
        let keys: Vec<(usize, Vec<(usize, u8)>)> = (0..ranks.len())
            .map(|i| {
                let mut nb: Vec<(usize, u8)> = adj[i].iter().map(|&(n, o)| (ranks[n], o.code())).collect();
                nb.sort_unstable();
                (ranks[i], nb)
            })
            .collect();
        let next = dense_rank(&keys);
        let next_classes = class_count(&next);
        if next_classes == classes {
            return next;
        }
        ranks = next;
        classes = next_classes;
    }
}

fn dense_rank<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect()
}

fn class_count(ranks: &[usize]) -> usize {
    ranks.iter().collect::<HashSet<_>>().len()
}

fn lowest_tied_rank(ranks: &[usize]) -> usize {
    let mut counts = BTreeMap::new();
    for &r in ranks {
        *counts.entry(r).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .find(|&(_, c)| c > 1)
        .map(|(r, _)| r)
        .expect("called with ties present")
}

struct Traversal {
    children: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    /// Ring bonds opened at an atom: partner atoms, in discovery order.
    openings: Vec<Vec<usize>>,
    /// Ring bonds closed at an atom: partner atoms, in discovery order.
    closings: Vec<Vec<usize>>,
    roots: Vec<usize>,
}

/// Writes SMILES by depth-first traversal, always preferring the atom with
/// the smaller `priority`. Used for canonical output (priority = canonical
/// rank) and for generating alternative spellings of the same graph.
pub fn write_with_priority(graph: &MolGraph, priority: &[usize]) -> String {
    assert_eq!(priority.len(), graph.atoms.len(), "one priority per atom");
    let mut adj = graph.adjacency();
    for nb in &mut adj {
        nb.sort_by_key(|&(n, _)| priority[n]);
    }
    let n = graph.atoms.len();
    let mut tr = Traversal {
        children: vec![Vec::new(); n],
        parent: vec![None; n],
        openings: vec![Vec::new(); n],
        closings: vec![Vec::new(); n],
        roots: Vec::new(),
    };
    let mut visited = vec![false; n];
    let mut ring_edges = HashSet::new();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&a| priority[a]);
    for &start in &order {
        if !visited[start] {
            tr.roots.push(start);
            discover(start, &adj, &mut visited, &mut ring_edges, &mut tr);
        }
    }

    let mut out = String::new();
    let mut digits: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let mut free = Vec::<u32>::new();
    for (i, &root) in tr.roots.iter().enumerate() {
        if i > 0 {
            out.push('.');
        }
        emit(root, graph, &tr, &mut digits, &mut free, &mut out);
    }
    out
}

fn discover(
    start: usize,
    adj: &[Vec<(usize, BondOrder)>],
    visited: &mut [bool],
    ring_edges: &mut HashSet<(usize, usize)>,
    tr: &mut Traversal,
) {
    // explicit stack of (atom, next neighbor slot) to avoid deep recursion
    visited[start] = true;
    let mut stack = vec![(start, 0usize)];
    while let Some(&mut (atom, ref mut slot)) = stack.last_mut() {
        if *slot == adj[atom].len() {
            stack.pop();
            continue;
        }
        let (nb, _) = adj[atom][*slot];
        *slot += 1;
        if Some(nb) == tr.parent[atom] {
            continue;
        }
        if visited[nb] {
            let key = (atom.min(nb), atom.max(nb));
            if ring_edges.insert(key) {
                tr.openings[nb].push(atom);
                tr.closings[atom].push(nb);
            }
        } else {
            visited[nb] = true;
            tr.parent[nb] = Some(atom);
            tr.children[atom].push(nb);
            stack.push((nb, 0));
        }
    }
}

fn emit(
    atom: usize,
    graph: &MolGraph,
    tr: &Traversal,
    digits: &mut BTreeMap<(usize, usize), u32>,
    free: &mut Vec<u32>,
    out: &mut String,
) {
    out.push_str(&atom_text(graph, atom));
    let mut released = Vec::new();
    for &opener in &tr.closings[atom] {
        let d = digits.remove(&(opener, atom)).expect("ring opened before close");
        push_digit(out, d);
        released.push(d);
    }
    for &closer in &tr.openings[atom] {
        let d = take_digit(free, digits);
        out.push_str(bond_text(graph, atom, closer));
        push_digit(out, d);
        digits.insert((atom, closer), d);
    }
    free.extend(released);

    let kids = &tr.children[atom];
    for (i, &child) in kids.iter().enumerate() {
        let last = i + 1 == kids.len();
        if !last {
            out.push('(');
        }
        out.push_str(bond_text(graph, atom, child));
        emit(child, graph, tr, digits, free, out);
        if !last {
            out.push(')');
        }
    }
}

fn take_digit(free: &mut Vec<u32>, in_use: &BTreeMap<(usize, usize), u32>) -> u32 {
    free.sort_unstable();
    if !free.is_empty() {
        return free.remove(0);
    }
    (1..).find(|d| !in_use.values().any(|v| v == d)).expect("unbounded")
}

fn push_digit(out: &mut String, d: u32) {
    if d < 10 {
        out.push(char::from_digit(d, 10).expect("single digit"));
    } else {
        out.push_str(&format!("%{d:02}"));
    }
}

fn bond_text(graph: &MolGraph, a: usize, b: usize) -> &'static str {
    let both_aromatic = graph.atoms[a].aromatic && graph.atoms[b].aromatic;
    match graph.bond_between(a, b).expect("bond exists") {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

fn atom_text(graph: &MolGraph, atom: usize) -> String {
    let at = &graph.atoms[atom];
    let symbol = if at.aromatic {
        at.element.to_ascii_lowercase()
    } else {
        at.element.clone()
    };
    let bare_ok = if at.aromatic {
        AROMATIC_ORGANIC.contains(&at.element.as_str())
    } else {
        ORGANIC.contains(&at.element.as_str())
    };
    match at.h_count {
        None if at.charge == 0 && bare_ok => symbol,
        h => {
            let mut s = format!("[{symbol}");
            match h.unwrap_or(0) {
                0 => {}
                1 => s.push('H'),
                k => s.push_str(&format!("H{k}")),
            }
            match at.charge {
                0 => {}
                1 => s.push('+'),
                -1 => s.push('-'),
                c if c > 0 => s.push_str(&format!("+{c}")),
                c => s.push_str(&format!("-{}", -c)),
            }
            s.push(']');
            s
        }
    }
}
