const POOL: &str = include_str!("../../data/smiles_pool.txt");

/// Built-in list of stereo-free canonical SMILES used by the synthetic data
/// generator, one molecule per drug.
pub fn builtin_pool() -> Vec<&'static str> {
    POOL.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect()
}
