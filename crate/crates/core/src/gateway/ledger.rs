use serde::{Deserialize, Serialize};

use super::Purpose;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub purpose: Purpose,
    pub subject: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Token counts came from the local tokenizer rather than the provider.
    pub estimated: bool,
    pub attempts: u32,
    pub latency_ms: u64,
    pub cached: bool,
    pub ok: bool,
}

impl CallRecord {
    pub(crate) fn failed(purpose: Purpose, subject: &str, attempts: u32) -> Self {
        CallRecord {
            purpose,
            subject: subject.to_string(),
            prompt_tokens: 0,
            completion_tokens: 0,
            estimated: false,
            attempts,
            latency_ms: 0,
            cached: false,
            ok: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub diagnosis_calls: u64,
    pub transform_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub retries: u64,
    pub failures: u64,
}

/// Running counters plus the per-call records they summarize.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub diagnosis_calls: u64,
    pub transform_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub retries: u64,
    pub failures: u64,
    pub records: Vec<CallRecord>,
}

impl CallLedger {
    pub fn record(&mut self, rec: CallRecord) {
        if rec.ok {
            match rec.purpose {
                Purpose::Diagnosis => self.diagnosis_calls += 1,
                Purpose::Transform => self.transform_calls += 1,
            }
        } else {
            self.failures += 1;
        }
        self.prompt_tokens += rec.prompt_tokens;
        self.completion_tokens += rec.completion_tokens;
        self.retries += u64::from(rec.attempts.saturating_sub(1));
        self.records.push(rec);
    }

    /// Copy with records in a stable order (purpose, subject) so concurrent
    /// completion order does not leak into artifacts.
    pub fn snapshot(&self) -> CallLedger {
        let mut out = self.clone();
        out.records
            .sort_by(|a, b| (a.purpose, &a.subject).cmp(&(b.purpose, &b.subject)));
        out
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            diagnosis_calls: self.diagnosis_calls,
            transform_calls: self.transform_calls,
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
            retries: self.retries,
            failures: self.failures,
        }
    }

    /// Counters equal the sums over the per-call records.
    pub fn is_conserved(&self) -> bool {
        let mut fresh = CallLedger::default();
        for r in &self.records {
            fresh.record(r.clone());
        }
        fresh.summary() == self.summary()
    }

    pub fn transform_records(&self) -> impl Iterator<Item = &CallRecord> {
        self.records
            .iter()
            .filter(|r| r.purpose == Purpose::Transform)
    }
}

impl std::ops::Sub for LedgerSummary {
    type Output = LedgerSummary;

    fn sub(self, rhs: LedgerSummary) -> LedgerSummary {
        LedgerSummary {
            diagnosis_calls: self.diagnosis_calls - rhs.diagnosis_calls,
            transform_calls: self.transform_calls - rhs.transform_calls,
            prompt_tokens: self.prompt_tokens - rhs.prompt_tokens,
            completion_tokens: self.completion_tokens - rhs.completion_tokens,
            retries: self.retries - rhs.retries,
            failures: self.failures - rhs.failures,
        }
    }
}
