//! Budget-gated, persistently cached interface to the teacher model.
//!
//! The oracle is the only path to teacher representations: a query that hits
//! the cache is free, a miss spends one unit of the hard call budget, and a
//! miss with the budget exhausted aborts with [`Error::BudgetExhausted`].

mod cache;
mod format;

pub use cache::{TeacherCache, TeacherRep};
pub use format::{fingerprint64, read_envelope, write_envelope, PayloadKind, PayloadReader, PayloadWriter};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{invalid, Error, Result};

/// Anything that can answer a forward pass. `want_hint` asks for the
/// intermediate-layer representation in the same call.
pub trait Teacher: Send + Sync {
    fn num_classes(&self) -> usize;
    /// Dimension of the intermediate hint, when the teacher can produce one.
    fn hint_dim(&self) -> Option<usize>;
    /// Hash of the teacher's weights; persisted caches must match it.
    fn fingerprint(&self) -> u64;
    fn forward(&self, sample_id: u64, features: &[f64], want_hint: bool) -> Result<TeacherRep>;
}

/// Wrapper that counts forward passes independently of the oracle's ledger —
/// the second witness of the budget invariant.
pub struct InstrumentedTeacher {
    inner: Arc<dyn Teacher>,
    forwards: AtomicU64,
}

impl InstrumentedTeacher {
    pub fn new(inner: Arc<dyn Teacher>) -> Self {
        InstrumentedTeacher {
            inner,
            forwards: AtomicU64::new(0),
        }
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::SeqCst)
    }
}

impl Teacher for InstrumentedTeacher {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn hint_dim(&self) -> Option<usize> {
        self.inner.hint_dim()
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }

    fn forward(&self, sample_id: u64, features: &[f64], want_hint: bool) -> Result<TeacherRep> {
        self.forwards.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(sample_id, features, want_hint)
    }
}

/// Teacher backed by a frozen representation table (a loaded cache), keyed by
/// sample id. Enables experiments and tests without a trained model.
pub struct LookupTeacher {
    table: TeacherCache,
}

impl LookupTeacher {
    pub fn from_cache(table: TeacherCache) -> Self {
        LookupTeacher { table }
    }
}

impl Teacher for LookupTeacher {
    fn num_classes(&self) -> usize {
        self.table.num_classes()
    }

    fn hint_dim(&self) -> Option<usize> {
        self.table.hint_dim()
    }

    fn fingerprint(&self) -> u64 {
        self.table.teacher_fingerprint()
    }

    fn forward(&self, sample_id: u64, _features: &[f64], want_hint: bool) -> Result<TeacherRep> {
        let rep = self
            .table
            .get(sample_id)
            .ok_or_else(|| invalid(format!("lookup teacher has no entry for sample {sample_id}")))?;
        Ok(TeacherRep {
            logits: rep.logits.clone(),
            hint: if want_hint { rep.hint.clone() } else { None },
        })
    }
}

/// Hard-budget accounting: the call limit, calls used, and a per-call log.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    limit: u64,
    used: u64,
    /// `(sample_id, call ordinal)` per cache miss, in call order.
    call_log: Vec<(u64, u64)>,
}

impl BudgetLedger {
    pub fn new(limit: u64) -> Result<Self> {
        if limit < 1 {
            return Err(invalid("budget limit must be at least 1"));
        }
        Ok(BudgetLedger {
            limit,
            used: 0,
            call_log: Vec::new(),
        })
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn remaining(&self) -> u64 {
        self.limit - self.used
    }

    pub fn call_log(&self) -> &[(u64, u64)] {
        &self.call_log
    }

    fn charge(&mut self, sample_id: u64) -> Result<()> {
        if self.used >= self.limit {
            return Err(Error::BudgetExhausted {
                used: self.used,
                limit: self.limit,
                sample_id,
            });
        }
        self.used += 1;
        self.call_log.push((sample_id, self.used));
        Ok(())
    }
}

/// The budget-gated cache front of a teacher. Queries are serialized (single
/// writer); a frozen, fully warmed cache may be read concurrently through
/// [`TeacherOracle::cache`].
pub struct TeacherOracle {
    teacher: Arc<dyn Teacher>,
    cache: TeacherCache,
    ledger: BudgetLedger,
    white_box: bool,
}

impl TeacherOracle {
    /// Fresh oracle with an empty cache. White-box mode is fixed here: it
    /// requires a teacher that produces hints, and every budgeted call then
    /// stores logits and hint together.
    pub fn new(teacher: Arc<dyn Teacher>, budget: u64, white_box: bool) -> Result<Self> {
        if white_box && teacher.hint_dim().is_none() {
            return Err(invalid(
                "white-box oracle requires a teacher with an intermediate tap",
            ));
        }
        let cache = TeacherCache::new(
            teacher.num_classes(),
            if white_box { teacher.hint_dim() } else { None },
            teacher.fingerprint(),
        );
        Ok(TeacherOracle {
            ledger: BudgetLedger::new(budget)?,
            teacher,
            cache,
            white_box,
        })
    }

    /// Oracle over a previously persisted cache. Hits on preloaded entries
    /// are free; only new misses spend budget. The cache must match the
    /// teacher's dimensions, and its fingerprint must match the teacher's
    /// unless `allow_mismatch` is set.
    pub fn from_cache(
        teacher: Arc<dyn Teacher>,
        cache: TeacherCache,
        budget: u64,
        allow_mismatch: bool,
    ) -> Result<Self> {
        if cache.num_classes() != teacher.num_classes() {
            return Err(Error::CacheCorrupt(format!(
                "cache built for {} classes, teacher has {}",
                cache.num_classes(),
                teacher.num_classes()
            )));
        }
        if cache.teacher_fingerprint() != teacher.fingerprint() && !allow_mismatch {
            return Err(Error::TeacherMismatch {
                cache: cache.teacher_fingerprint(),
                teacher: teacher.fingerprint(),
            });
        }
        let white_box = cache.hint_dim().is_some();
        if white_box && cache.hint_dim() != teacher.hint_dim() {
            return Err(Error::CacheCorrupt(format!(
                "cache hint dimension {:?} != teacher {:?}",
                cache.hint_dim(),
                teacher.hint_dim()
            )));
        }
        Ok(TeacherOracle {
            ledger: BudgetLedger::new(budget)?,
            teacher,
            cache,
            white_box,
        })
    }

    pub fn white_box(&self) -> bool {
        self.white_box
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn cache(&self) -> &TeacherCache {
        &self.cache
    }

    pub fn num_classes(&self) -> usize {
        self.cache.num_classes()
    }

    pub fn hint_dim(&self) -> Option<usize> {
        self.cache.hint_dim()
    }

    /// Teacher representation for one sample. Cache hit: returned as stored,
    /// ledger untouched. Miss: one budgeted forward pass, stored, charged.
    pub fn query(
        &mut self,
        sample_id: u64,
        features: &[f64],
        want_hint: bool,
    ) -> Result<TeacherRep> {
        if want_hint && !self.white_box {
            return Err(Error::HintUnavailable { sample_id });
        }
        if let Some(rep) = self.cache.get(sample_id) {
            return Ok(TeacherRep {
                logits: rep.logits.clone(),
                hint: if want_hint { rep.hint.clone() } else { None },
            });
        }
        self.ledger.charge(sample_id)?;
        let rep = self.teacher.forward(sample_id, features, self.white_box)?;
        self.cache.insert(sample_id, rep.clone())?;
        Ok(TeacherRep {
            logits: rep.logits,
            hint: if want_hint { rep.hint } else { None },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic toy teacher: logits are a fixed function of the features.
    struct ToyTeacher {
        classes: usize,
        hint: Option<usize>,
    }

    impl Teacher for ToyTeacher {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn hint_dim(&self) -> Option<usize> {
            self.hint
        }

        fn fingerprint(&self) -> u64 {
            0x0123_4567_89AB_CDEF
        }

        fn forward(&self, sample_id: u64, features: &[f64], want_hint: bool) -> Result<TeacherRep> {
            let logits = (0..self.classes)
                .map(|c| features.iter().sum::<f64>() + sample_id as f64 + c as f64)
                .collect();
            let hint = match (want_hint, self.hint) {
                (true, Some(d)) => Some(vec![sample_id as f64; d]),
                _ => None,
            };
            Ok(TeacherRep { logits, hint })
        }
    }

    fn oracle(budget: u64) -> TeacherOracle {
        TeacherOracle::new(
            Arc::new(ToyTeacher {
                classes: 3,
                hint: None,
            }),
            budget,
            false,
        )
        .unwrap()
    }

    #[test]
    fn hits_are_free_and_misses_charge() {
        let mut o = oracle(3);
        let x = [1.0, 2.0];
        for id in [10u64, 11, 12] {
            o.query(id, &x, false).unwrap();
        }
        assert_eq!(o.ledger().used(), 3);
        // fourth query on a cached id is served without a ledger change
        let rep = o.query(10, &x, false).unwrap();
        assert_eq!(o.ledger().used(), 3);
        assert_eq!(rep.logits.len(), 3);
    }

    #[test]
    fn exhausted_budget_is_a_hard_error() {
        let mut o = oracle(3);
        let x = [0.0];
        for id in [1u64, 2, 3] {
            o.query(id, &x, false).unwrap();
        }
        let err = o.query(4, &x, false).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { used: 3, limit: 3, .. }));
    }

    #[test]
    fn hint_request_without_white_box_fails_without_a_call() {
        let mut o = oracle(5);
        o.query(1, &[0.0], false).unwrap();
        let used_before = o.ledger().used();
        let err = o.query(1, &[0.0], true).unwrap_err();
        assert!(matches!(err, Error::HintUnavailable { .. }));
        assert_eq!(o.ledger().used(), used_before);
    }

    #[test]
    fn white_box_stores_hint_in_the_same_call() {
        let teacher = Arc::new(ToyTeacher {
            classes: 3,
            hint: Some(4),
        });
        let mut o = TeacherOracle::new(teacher, 2, true).unwrap();
        let rep = o.query(9, &[1.0], true).unwrap();
        assert_eq!(rep.hint.as_ref().unwrap().len(), 4);
        assert_eq!(o.ledger().used(), 1);
        // logits-only view of the same entry stays free
        let rep2 = o.query(9, &[1.0], false).unwrap();
        assert!(rep2.hint.is_none());
        assert_eq!(o.ledger().used(), 1);
    }

    #[test]
    fn white_box_requires_a_tapped_teacher() {
        let teacher = Arc::new(ToyTeacher {
            classes: 3,
            hint: None,
        });
        assert!(TeacherOracle::new(teacher, 2, true).is_err());
    }

    #[test]
    fn cache_class_count_gate_and_fingerprint_gate() {
        let teacher: Arc<dyn Teacher> = Arc::new(ToyTeacher {
            classes: 3,
            hint: None,
        });
        // class-count mismatch -> CacheCorrupt
        let wrong_c = TeacherCache::new(10, None, teacher.fingerprint());
        assert!(matches!(
            TeacherOracle::from_cache(teacher.clone(), wrong_c, 5, false),
            Err(Error::CacheCorrupt(_))
        ));
        // fingerprint mismatch -> TeacherMismatch, override accepted
        let mut stale = TeacherCache::new(3, None, 0xBAD);
        stale
            .insert(
                1,
                TeacherRep {
                    logits: vec![0.0, 1.0, 2.0],
                    hint: None,
                },
            )
            .unwrap();
        assert!(matches!(
            TeacherOracle::from_cache(teacher.clone(), stale.clone(), 5, false),
            Err(Error::TeacherMismatch { .. })
        ));
        let mut o = TeacherOracle::from_cache(teacher, stale, 5, true).unwrap();
        // preloaded entry is a free hit
        o.query(1, &[0.0], false).unwrap();
        assert_eq!(o.ledger().used(), 0);
    }

    #[test]
    fn instrumented_counter_agrees_with_ledger() {
        let instrumented = Arc::new(InstrumentedTeacher::new(Arc::new(ToyTeacher {
            classes: 3,
            hint: None,
        })));
        let mut o = TeacherOracle::new(instrumented.clone(), 10, false).unwrap();
        for id in 0..7u64 {
            o.query(id % 4, &[id as f64], false).unwrap();
        }
        assert_eq!(instrumented.forward_count(), 4);
        assert_eq!(o.ledger().used(), 4);
    }
}
