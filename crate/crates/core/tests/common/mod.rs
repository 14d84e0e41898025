//! Shared generators and independent reference implementations.
#![allow(dead_code)]

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use molclip::data::SyntheticSpec;
use molclip::harness::TrainConfig;
use molclip::smiles::{Atom, BondOrder, MolGraph};

/// Small training setup used by the end-to-end checks.
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_p: 8,
        batch_k: 8,
        finetune_batch_p: 4,
        finetune_batch_k: 16,
        learning_rate: 0.003,
        eval_every: 50,
        embed_dim: 64,
        seed,
        ..TrainConfig::default()
    }
}

pub fn confounded_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_moas: 4,
        drugs_per_moa: 3,
        samples_per_drug: 40,
        frames: 16,
        frame_dim: 32,
        separability: 2.5,
        confounding: 0.2,
        ..SyntheticSpec::default()
    }
}

fn random_atom(rng: &mut ChaCha8Rng) -> Atom {
    match rng.random_range(0..12) {
        0..=3 => Atom::organic("C", false),
        4 => Atom::organic("N", false),
        5 => Atom::organic("O", false),
        6 => Atom::organic("S", false),
        7 => Atom::organic("Cl", false),
        8 => Atom::organic("C", true),
        9 => Atom::organic("N", true),
        10 => Atom {
            element: "N".into(),
            aromatic: false,
            charge: 1,
            h_count: Some(rng.random_range(0..4)),
        },
        _ => Atom {
            element: "O".into(),
            aromatic: false,
            charge: -1,
            h_count: Some(0),
        },
    }
}

fn random_order(rng: &mut ChaCha8Rng, a: &Atom, b: &Atom) -> BondOrder {
    if a.aromatic && b.aromatic && rng.random_bool(0.7) {
        return BondOrder::Aromatic;
    }
    match rng.random_range(0..10) {
        0..=6 => BondOrder::Single,
        7 | 8 => BondOrder::Double,
        _ => BondOrder::Triple,
    }
}

/// Random graph of 2 to `max_atoms` atoms: a random tree, up to two extra
/// ring bonds, and occasionally a missing tree edge (two fragments).
pub fn random_molecule(rng: &mut ChaCha8Rng, max_atoms: usize) -> MolGraph {
    let n = rng.random_range(2..=max_atoms);
    let mut g = MolGraph {
        atoms: (0..n).map(|_| random_atom(rng)).collect(),
        bonds: Vec::new(),
    };
    let split = if n > 3 && rng.random_bool(0.15) { Some(rng.random_range(1..n)) } else { None };
    for i in 1..n {
        if Some(i) == split {
            continue;
        }
        let parent = rng.random_range(0..i);
        let order = random_order(rng, &g.atoms[parent], &g.atoms[i]);
        g.add_bond(parent, i, order);
    }
    for _ in 0..rng.random_range(0..=2) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let order = random_order(rng, &g.atoms[a], &g.atoms[b]);
        g.add_bond(a, b, order);
    }
    g
}

/// The same graph with atoms renumbered by `perm` (old index `i` becomes
/// `perm[i]`).
pub fn renumber(rng: &mut ChaCha8Rng, g: &MolGraph, perm: &[usize]) -> MolGraph {
    let mut atoms = vec![Atom::organic("C", false); g.atoms.len()];
    for (i, a) in g.atoms.iter().enumerate() {
        atoms[perm[i]] = a.clone();
    }
    let mut out = MolGraph { atoms, bonds: Vec::new() };
    let mut bonds = g.bonds.clone();
    bonds.shuffle(rng);
    for b in bonds {
        out.add_bond(perm[b.a], perm[b.b], b.order);
    }
    out
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn bond_matrix(g: &MolGraph) -> Vec<Vec<Option<BondOrder>>> {
    let n = g.atoms.len();
    let mut m = vec![vec![None; n]; n];
    for b in &g.bonds {
        m[b.a][b.b] = Some(b.order);
        m[b.b][b.a] = Some(b.order);
    }
    m
}

/// Graph isomorphism by trying every atom permutation, pruned only by
/// partial consistency.
pub fn isomorphic(a: &MolGraph, b: &MolGraph) -> bool {
    let n = a.atoms.len();
    if n != b.atoms.len() || a.bonds.len() != b.bonds.len() {
        return false;
    }
    let (ma, mb) = (bond_matrix(a), bond_matrix(b));
    let mut map = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn extend(
        a: &MolGraph,
        b: &MolGraph,
        ma: &[Vec<Option<BondOrder>>],
        mb: &[Vec<Option<BondOrder>>],
        map: &mut Vec<usize>,
        used: &mut [bool],
    ) -> bool {
        let i = map.len();
        if i == a.atoms.len() {
            return true;
        }
        for j in 0..b.atoms.len() {
            if used[j] || a.atoms[i] != b.atoms[j] {
                continue;
            }
            if (0..i).any(|k| ma[i][k] != mb[j][map[k]]) {
                continue;
            }
            used[j] = true;
            map.push(j);
            if extend(a, b, ma, mb, map, used) {
                return true;
            }
            map.pop();
            used[j] = false;
        }
        false
    }
    extend(a, b, &ma, &mb, &mut map, &mut used)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Symmetric CLIP cross-entropy with the diagonal as targets: the mean of
/// the molecule-to-sequence and sequence-to-molecule losses.
pub fn vanilla_clip(s: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> f64 {
    let b = s.len();
    let logits: Vec<Vec<f64>> = s.iter().map(|si| v.iter().map(|vj| cosine(si, vj) / tau).collect()).collect();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        rows += log_sum_exp(&logits[i]) - logits[i][i];
        let col: Vec<f64> = (0..b).map(|m| logits[m][i]).collect();
        cols += log_sum_exp(&col) - logits[i][i];
    }
    (rows / b as f64 + cols / b as f64) / 2.0
}

pub struct OracleRetrieval {
    pub average_precision: Vec<f64>,
    pub cmc: Vec<f64>,
    pub map: f64,
}

/// Retrieval metrics by sorting the gallery on cosine similarity (ties by
/// index) and accumulating precision as exact fractions.
pub fn oracle_retrieval(
    queries: &[Vec<f64>],
    query_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
    max_rank: usize,
) -> OracleRetrieval {
    let mut aps = Vec::new();
    let mut exact_sum = Ratio::new(0i128, 1);
    let mut hit_counts = vec![0i64; max_rank];
    for (q, &ql) in queries.iter().zip(query_labels) {
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        order.sort_by(|&x, &y| {
            cosine(q, &gallery[y])
                .partial_cmp(&cosine(q, &gallery[x]))
                .unwrap()
                .then(x.cmp(&y))
        });
        let mut hits = 0i128;
        let mut sum = Ratio::new(0i128, 1);
        let mut first = None;
        for (pos, &gi) in order.iter().enumerate() {
            if gallery_labels[gi] == ql {
                hits += 1;
                sum += Ratio::new(hits, pos as i128 + 1);
                first.get_or_insert(pos);
            }
        }
        let ap = sum / Ratio::from_integer(hits);
        exact_sum += ap;
        aps.push(*ap.numer() as f64 / *ap.denom() as f64);
        for (k, c) in hit_counts.iter_mut().enumerate() {
            if first.unwrap() <= k {
                *c += 1;
            }
        }
    }
    let nq = queries.len() as i64;
    let m = exact_sum / Ratio::from_integer(nq as i128);
    let map_exact = *m.numer() as f64 / *m.denom() as f64;
    OracleRetrieval {
        cmc: hit_counts.iter().map(|&c| c as f64 / nq as f64).collect(),
        map: map_exact,
        average_precision: aps,
    }
}
