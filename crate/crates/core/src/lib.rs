pub mod smiles;
pub mod numerics;
pub mod losses;
pub mod model;
pub mod kv;
pub mod data;
pub mod metrics;
pub mod harness;
