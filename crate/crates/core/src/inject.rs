//! Test hooks at the protocol's CAS sites.
//!
//! Each thread may install a callback that runs whenever it reaches a
//! [`Site`]. Tests use this to park a thread at a chosen step or to sprinkle
//! yields and sleeps into races. With no callback installed anywhere, a site
//! costs one relaxed load.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    /// Before placing an insert descriptor in an announcement list.
    InsFlagCas,
    /// Before a helper initialises the new node's successor.
    HelpInsertInit,
    /// Before a helper swaps the descriptor for the new node.
    HelpInsertSplice,
    /// Before flagging a predecessor for removal.
    DelFlagCas,
    /// Before marking a node being removed.
    MarkCas,
    /// Before unlinking a marked node.
    SpliceCas,
    /// After announcing a cursor copy, before resolving the successor.
    CursorCopyStart,
    /// Before the CAS that completes a cursor copy.
    CursorCopyCas,
    /// Before the CAS that publishes a new head of a key's latest list.
    LatestCas,
    /// Before a trie-node CAS during an update's ascent.
    TrieNodeCas,
    /// Before pushing a notification.
    NotifyPush,
    /// Between an update's activation and its ascent.
    Activated,
    /// Before linking a node into a skip-list level or swapping a leaf
    /// version in the augmented trie.
    LinkCas,
}

impl Site {
    pub const ALL: [Site; 13] = [
        Site::InsFlagCas,
        Site::HelpInsertInit,
        Site::HelpInsertSplice,
        Site::DelFlagCas,
        Site::MarkCas,
        Site::SpliceCas,
        Site::CursorCopyStart,
        Site::CursorCopyCas,
        Site::LatestCas,
        Site::TrieNodeCas,
        Site::NotifyPush,
        Site::Activated,
        Site::LinkCas,
    ];

    /// Sites inside the announcement lists proper.
    pub const LIST: [Site; 6] = [
        Site::InsFlagCas,
        Site::HelpInsertInit,
        Site::HelpInsertSplice,
        Site::DelFlagCas,
        Site::MarkCas,
        Site::SpliceCas,
    ];
}

type Hook = Box<dyn FnMut(Site)>;

static INSTALLED: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static HOOK: RefCell<Option<Hook>> = const { RefCell::new(None) };
}

#[inline]
pub fn point(site: Site) {
    if INSTALLED.load(Relaxed) != 0 {
        fire(site);
    }
}

#[cold]
fn fire(site: Site) {
    HOOK.with(|h| {
        // A hook that itself reaches a site (e.g. by calling into the
        // structure) is not re-entered.
        if let Ok(mut slot) = h.try_borrow_mut() {
            if let Some(f) = slot.as_mut() {
                f(site);
            }
        }
    });
}

/// Removes the calling thread's hook when dropped.
pub struct HookGuard(());

/// Installs `f` as the calling thread's hook, replacing any previous one.
pub fn install(f: impl FnMut(Site) + 'static) -> HookGuard {
    HOOK.with(|h| {
        let old = h.borrow_mut().replace(Box::new(f));
        if old.is_none() {
            INSTALLED.fetch_add(1, Relaxed);
        }
    });
    HookGuard(())
}

impl Drop for HookGuard {
    fn drop(&mut self) {
        HOOK.with(|h| {
            if h.borrow_mut().take().is_some() {
                INSTALLED.fetch_sub(1, Relaxed);
            }
        });
    }
}
