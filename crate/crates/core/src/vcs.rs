//! The central repository as seen by the CI server: a single line of
//! history, read through [`Repository`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{Change, Revision};
use crate::time::Instant;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum VcsError {
    #[error("repository unreachable: {0}")]
    Unreachable(String),
    #[error("unknown revision at seq {seq}")]
    UnknownRevision { seq: u64 },
    #[error("a change must touch at least one path")]
    EmptyPaths,
    #[error("commit at {at} precedes the previous change at {previous}")]
    TimestampRegression { at: Instant, previous: Instant },
}

/// Read access to a repository's history.
pub trait Repository {
    fn repo_id(&self) -> &str;

    /// The most recent revision; seq 0 for the empty repository.
    fn head(&self) -> Result<Revision, VcsError>;

    /// Every change after `since` up to head, ascending by seq.
    fn changes_since(&self, since: &Revision) -> Result<Vec<Change>, VcsError>;

    /// Brings the adapter's view up to date with its backing store.
    /// Adapters that observe changes directly need not do anything.
    fn refresh(&mut self, _now: Instant) -> Result<(), VcsError> {
        Ok(())
    }
}

impl<R: Repository + ?Sized> Repository for alloc::boxed::Box<R> {
    fn repo_id(&self) -> &str {
        (**self).repo_id()
    }

    fn head(&self) -> Result<Revision, VcsError> {
        (**self).head()
    }

    fn changes_since(&self, since: &Revision) -> Result<Vec<Change>, VcsError> {
        (**self).changes_since(since)
    }

    fn refresh(&mut self, now: Instant) -> Result<(), VcsError> {
        (**self).refresh(now)
    }
}

/// Deterministic repository kept in memory; the test double for developer
/// activity and the simulator's repository.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InMemoryRepo {
    repo_id: String,
    log: Vec<Change>,
}

impl InMemoryRepo {
    pub fn new(repo_id: impl Into<String>) -> Self {
        InMemoryRepo { repo_id: repo_id.into(), log: Vec::new() }
    }

    /// Records a new change and returns the new head.
    pub fn commit(&mut self, author: &str, paths: Vec<String>, at: Instant) -> Result<Revision, VcsError> {
        if paths.is_empty() {
            return Err(VcsError::EmptyPaths);
        }
        if let Some(last) = self.log.last() {
            if at < last.timestamp {
                return Err(VcsError::TimestampRegression { at, previous: last.timestamp });
            }
        }
        let seq = self.log.len() as u64 + 1;
        let id = commit_id(&self.repo_id, seq, author, &paths, at);
        let revision = Revision::new(id, seq);
        self.log.push(Change { revision: revision.clone(), author: author.into(), timestamp: at, changed_paths: paths });
        Ok(revision)
    }

    pub fn log(&self) -> &[Change] {
        &self.log
    }
}

impl Repository for InMemoryRepo {
    fn repo_id(&self) -> &str {
        &self.repo_id
    }

    fn head(&self) -> Result<Revision, VcsError> {
        Ok(self.log.last().map_or_else(Revision::initial, |c| c.revision.clone()))
    }

    fn changes_since(&self, since: &Revision) -> Result<Vec<Change>, VcsError> {
        let known = match since.seq {
            0 => since.id == Revision::EMPTY_ID,
            seq => self.log.get(seq as usize - 1).is_some_and(|c| c.revision == *since),
        };
        if !known {
            return Err(VcsError::UnknownRevision { seq: since.seq });
        }
        Ok(self.log[since.seq as usize..].to_vec())
    }
}

// FNV-1a; ids only need to be stable and distinct per commit.
fn commit_id(repo_id: &str, seq: u64, author: &str, paths: &[String], at: Instant) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes.iter().chain(&[0xff]) {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    };
    feed(repo_id.as_bytes());
    feed(&seq.to_le_bytes());
    feed(author.as_bytes());
    for p in paths {
        feed(p.as_bytes());
    }
    feed(&at.0.to_le_bytes());
    format!("{hash:016x}")
}
