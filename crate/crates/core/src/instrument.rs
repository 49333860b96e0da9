//! Process-wide allocation counters for meta-level objects.
//!
//! They exist so tests can check that a program without a declared behavior
//! never touches the meta machinery.

use std::sync::atomic::{AtomicU64, Ordering};

static META_EVENTS: AtomicU64 = AtomicU64::new(0);
static META_ITEMS: AtomicU64 = AtomicU64::new(0);

pub(crate) fn meta_event_created() {
    META_EVENTS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn meta_item_created() {
    META_ITEMS.fetch_add(1, Ordering::Relaxed);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counters {
    pub meta_events: u64,
    pub meta_items: u64,
}

impl Counters {
    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            meta_events: self.meta_events - earlier.meta_events,
            meta_items: self.meta_items - earlier.meta_items,
        }
    }
}

pub fn counters() -> Counters {
    Counters {
        meta_events: META_EVENTS.load(Ordering::SeqCst),
        meta_items: META_ITEMS.load(Ordering::SeqCst),
    }
}
