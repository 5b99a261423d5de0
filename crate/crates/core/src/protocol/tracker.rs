use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::store::ContentHash;

/// Bounded FIFO of recently pushed hashes. Hashes that fall out of the window
/// are handed back so the caller can unpin them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushTracker {
    pushed: VecDeque<ContentHash>,
    window: usize,
}

impl PushTracker {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "push window must be at least 1");
        Self {
            pushed: VecDeque::with_capacity(window + 1),
            window,
        }
    }

    /// Records a push and returns the evicted hashes, oldest first. Pushing a
    /// hash that is already tracked moves it to the newest position.
    pub fn track_push(&mut self, hash: ContentHash) -> Vec<ContentHash> {
        if let Some(pos) = self.pushed.iter().position(|h| *h == hash) {
            self.pushed.remove(pos);
        }
        self.pushed.push_back(hash);
        let overflow = self.pushed.len().saturating_sub(self.window);
        self.pushed.drain(..overflow).collect()
    }

    pub fn pushed(&self) -> impl Iterator<Item = &ContentHash> {
        self.pushed.iter()
    }

    pub fn len(&self) -> usize {
        self.pushed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pushed.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }
}
