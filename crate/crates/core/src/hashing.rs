//! Content hashes for cache keys and manifests (SHA-256 over canonical JSON).

use std::io::Read;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BathSpec, CouplingSpec, RunConfig, SystemSpec};

pub type Hash32 = [u8; 32];

pub fn hash_json<T: Serialize>(value: &T) -> Hash32 {
    let bytes = serde_json::to_vec(value).expect("config types serialize to JSON");
    Sha256::digest(&bytes).into()
}

/// Key of a bath realization: its full spec, seed included.
pub fn bath_hash(bath: &BathSpec) -> Hash32 {
    hash_json(&("bath", bath))
}

/// Key of a spectral decomposition: exactly the fields that enter the
/// Hamiltonian.
pub fn hamiltonian_hash(system: &SystemSpec, bath: &BathSpec, coupling: &CouplingSpec) -> Hash32 {
    hash_json(&("hamiltonian", system, bath, coupling))
}

/// Hash of every physics field of a run (everything except output location
/// and cache policy).
pub fn physics_hash(config: &RunConfig) -> Hash32 {
    hash_json(&(
        "run",
        &config.system,
        &config.bath,
        &config.coupling,
        &config.initial,
        &config.evolve,
        &config.eth,
    ))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::full_scale_config;

    #[test]
    fn hamiltonian_hash_ignores_non_hamiltonian_fields() {
        let a = full_scale_config();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.initial.system_level = 3;
        b.evolve.t_max = 1.0;
        assert_eq!(
            hamiltonian_hash(&a.system, &a.bath, &a.coupling),
            hamiltonian_hash(&b.system, &b.bath, &b.coupling)
        );
        assert_ne!(physics_hash(&a), physics_hash(&b));
    }

    #[test]
    fn physics_edits_change_hash() {
        let a = full_scale_config();
        let mut b = a.clone();
        b.coupling.g = 0.006;
        assert_ne!(
            hamiltonian_hash(&a.system, &a.bath, &a.coupling),
            hamiltonian_hash(&b.system, &b.bath, &b.coupling)
        );
        let mut c = a.clone();
        c.bath.coupling_seed += 1;
        assert_ne!(bath_hash(&a.bath), bath_hash(&c.bath));
        let mut d = a.clone();
        d.cache = false;
        assert_eq!(physics_hash(&a), physics_hash(&d));
    }
}
