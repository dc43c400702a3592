//! Token counting used for chunking decisions and context budgeting.
//!
//! The default estimator is `ceil(chars / 4)`, clamped to a minimum of 1.
//! Deployments with a real tokenizer can plug one in via [`TokenCounter`];
//! everything downstream (chunk thresholds, context caps, cost imputation
//! under the mock backend) only needs a consistent, deterministic count.

/// Pluggable token counter.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// chars/4 heuristic, rounded up, never below 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharsPerToken;

impl TokenCounter for CharsPerToken {
    fn count(&self, text: &str) -> usize {
        approximate_tokens(text)
    }
}

/// Approximate token count: `ceil(len_chars / 4)`, minimum 1.
pub fn approximate_tokens(text: &str) -> usize {
    let chars = text.chars().count();
    (chars.div_ceil(4)).max(1)
}
