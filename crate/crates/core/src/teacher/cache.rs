//! Persisted map from sample id to teacher representation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::teacher::format::{
    read_envelope, write_envelope, PayloadKind, PayloadReader, PayloadWriter,
};

/// One teacher response: output logits plus, in white-box mode, an
/// intermediate-layer hint captured by the same forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRep {
    pub logits: Vec<f64>,
    pub hint: Option<Vec<f64>>,
}

/// In-memory cache of teacher representations keyed by sample id, with the
/// dimension metadata and teacher fingerprint needed to validate reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    num_classes: usize,
    hint_dim: Option<usize>,
    teacher_fingerprint: u64,
    entries: BTreeMap<u64, TeacherRep>,
}

impl TeacherCache {
    pub fn new(num_classes: usize, hint_dim: Option<usize>, teacher_fingerprint: u64) -> Self {
        TeacherCache {
            num_classes,
            hint_dim,
            teacher_fingerprint,
            entries: BTreeMap::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hint_dim(&self) -> Option<usize> {
        self.hint_dim
    }

    pub fn teacher_fingerprint(&self) -> u64 {
        self.teacher_fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: u64) -> Option<&TeacherRep> {
        self.entries.get(&sample_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    /// Insert a representation, enforcing the shared-dimension invariant.
    pub fn insert(&mut self, sample_id: u64, rep: TeacherRep) -> Result<()> {
        if rep.logits.len() != self.num_classes {
            return Err(Error::CacheCorrupt(format!(
                "dimension drift: entry has {} logits, cache expects {}",
                rep.logits.len(),
                self.num_classes
            )));
        }
        match (&rep.hint, self.hint_dim) {
            (None, None) => {}
            (Some(h), Some(d)) if h.len() == d => {}
            _ => {
                return Err(Error::CacheCorrupt(
                    "dimension drift: hint presence or size differs from cache metadata".into(),
                ))
            }
        }
        self.entries.insert(sample_id, rep);
        Ok(())
    }

    /// Write the cache to disk. Round-trips are bit-exact on all values
    /// (full binary precision).
    pub fn persist(&self, path: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(invalid("refusing to persist an empty teacher cache"));
        }
        let mut w = PayloadWriter::new();
        w.u32(self.num_classes as u32);
        w.u32(self.hint_dim.unwrap_or(0) as u32);
        w.u64(self.entries.len() as u64);
        w.u64(self.teacher_fingerprint);
        for (&id, rep) in &self.entries {
            w.u64(id);
            w.f64_slice(&rep.logits);
            if let Some(h) = &rep.hint {
                w.f64_slice(h);
            }
        }
        write_envelope(path, PayloadKind::TeacherCache, &w.finish())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = read_envelope(path, PayloadKind::TeacherCache)?;
        let ctx = "teacher cache";
        let mut r = PayloadReader::new(&payload, ctx);
        let num_classes = r.u32()? as usize;
        let hint_dim_raw = r.u32()? as usize;
        let hint_dim = if hint_dim_raw == 0 { None } else { Some(hint_dim_raw) };
        let count = r.u64()?;
        let teacher_fingerprint = r.u64()?;
        if num_classes < 2 {
            return Err(Error::CacheCorrupt(format!(
                "{ctx}: class count {num_classes} < 2"
            )));
        }
        let mut cache = TeacherCache::new(num_classes, hint_dim, teacher_fingerprint);
        for _ in 0..count {
            let id = r.u64()?;
            let logits = r.f64_vec(num_classes)?;
            let hint = match hint_dim {
                Some(d) => Some(r.f64_vec(d)?),
                None => None,
            };
            cache.insert(id, TeacherRep { logits, hint })?;
        }
        r.expect_end()?;
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cache() -> TeacherCache {
        let mut cache = TeacherCache::new(3, Some(2), 0xDEADBEEF);
        // values chosen to exercise full binary precision
        cache
            .insert(
                7,
                TeacherRep {
                    logits: vec![0.1 + 0.2, -1.0 / 3.0, f64::MIN_POSITIVE],
                    hint: Some(vec![std::f64::consts::PI, -0.0]),
                },
            )
            .unwrap();
        cache
            .insert(
                3,
                TeacherRep {
                    logits: vec![1e300, -1e-300, 42.0],
                    hint: Some(vec![0.0, 1.0]),
                },
            )
            .unwrap();
        cache
    }

    #[test]
    fn persist_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let cache = sample_cache();
        cache.persist(&path).unwrap();
        let loaded = TeacherCache::load(&path).unwrap();
        assert_eq!(cache, loaded);
        // re-persisting the loaded cache yields byte-identical files
        let path2 = dir.path().join("cache2.bin");
        loaded.persist(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        sample_cache().persist(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            TeacherCache::load(&path),
            Err(Error::CacheCorrupt(_))
        ));
    }

    #[test]
    fn empty_cache_refuses_to_persist() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TeacherCache::new(3, None, 1);
        assert!(cache.persist(&dir.path().join("x.bin")).is_err());
    }

    #[test]
    fn dimension_drift_rejected() {
        let mut cache = TeacherCache::new(3, None, 1);
        assert!(cache
            .insert(
                0,
                TeacherRep {
                    logits: vec![1.0, 2.0],
                    hint: None
                }
            )
            .is_err());
        assert!(cache
            .insert(
                0,
                TeacherRep {
                    logits: vec![1.0, 2.0, 3.0],
                    hint: Some(vec![1.0])
                }
            )
            .is_err());
    }
}
