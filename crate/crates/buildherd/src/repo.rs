//! Repository adapters for the server: a shareable in-memory repository
//! and a directory tree tracked by content hashes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use buildherd_core::model::{Change, Revision};
use buildherd_core::{InMemoryRepo, Instant, Repository, VcsError};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

/// An [`InMemoryRepo`] behind a lock, so tests and seeders can keep
/// committing while the server reads it.
#[derive(Clone, Debug)]
pub struct SharedMemoryRepo {
    repo_id: String,
    inner: Arc<RwLock<InMemoryRepo>>,
}

impl SharedMemoryRepo {
    pub fn new(repo_id: impl Into<String>) -> Self {
        let repo_id = repo_id.into();
        SharedMemoryRepo { inner: Arc::new(RwLock::new(InMemoryRepo::new(repo_id.clone()))), repo_id }
    }

    pub fn commit(&self, author: &str, paths: Vec<String>, at: Instant) -> Result<Revision, VcsError> {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).commit(author, paths, at)
    }
}

impl Repository for SharedMemoryRepo {
    fn repo_id(&self) -> &str {
        &self.repo_id
    }

    fn head(&self) -> Result<Revision, VcsError> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).head()
    }

    fn changes_since(&self, since: &Revision) -> Result<Vec<Change>, VcsError> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).changes_since(since)
    }
}

const MANIFEST_HEADER: &str = "buildherd-manifest v1 sha256";
const SNAPSHOT_AUTHOR: &str = "snapshot";

#[derive(Clone, Debug, PartialEq, Eq)]
struct ManifestEntry {
    seq: u64,
    tree_hash: String,
    at: Instant,
    files: BTreeMap<String, String>,
}

/// A directory tree whose revisions are content snapshots.
///
/// Every [`snapshot`](DirectoryRepo::snapshot) that finds the tree changed
/// appends a revision to the manifest file, so history survives restarts.
#[derive(Debug)]
pub struct DirectoryRepo {
    repo_id: String,
    root: PathBuf,
    manifest: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DirectoryRepo {
    /// Opens the repository, loading the manifest if it exists.
    pub fn open(repo_id: impl Into<String>, root: impl Into<PathBuf>, manifest: impl Into<PathBuf>) -> Result<Self, VcsError> {
        let manifest = manifest.into();
        let entries = if manifest.exists() { read_manifest(&manifest)? } else { Vec::new() };
        Ok(DirectoryRepo { repo_id: repo_id.into(), root: root.into(), manifest, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Hashes the tree and records a new revision if it changed since the
    /// last one. Returns the head.
    pub fn snapshot(&mut self, at: Instant) -> Result<Revision, VcsError> {
        let files = self.scan()?;
        let empty = BTreeMap::new();
        let previous = self.entries.last().map_or(&empty, |e| &e.files);
        if *previous == files {
            return self.head();
        }
        let at = self.entries.last().map_or(at, |e| e.at.max(at));
        let entry = ManifestEntry { seq: self.entries.len() as u64 + 1, tree_hash: tree_hash(&files), at, files };
        append_manifest(&self.manifest, &entry).map_err(|e| unreachable_io(&self.manifest, e))?;
        self.entries.push(entry);
        self.head()
    }

    fn scan(&self) -> Result<BTreeMap<String, String>, VcsError> {
        if !self.root.is_dir() {
            return Err(VcsError::Unreachable(format!("{} is not a readable directory", self.root.display())));
        }
        let manifest = fs::canonicalize(&self.manifest).ok();
        let mut files = BTreeMap::new();
        for entry in WalkDir::new(&self.root).sort_by_file_name() {
            let entry = entry.map_err(|e| VcsError::Unreachable(e.to_string()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            if manifest.is_some() && fs::canonicalize(entry.path()).ok() == manifest {
                continue;
            }
            let relative = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let path = relative.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            let content = fs::read(entry.path()).map_err(|e| unreachable_io(entry.path(), e))?;
            files.insert(path, hex::encode(Sha256::digest(&content)));
        }
        Ok(files)
    }

    fn revision(entry: &ManifestEntry) -> Revision {
        Revision::new(&entry.tree_hash[..16], entry.seq)
    }

    fn change(&self, index: usize) -> Change {
        let entry = &self.entries[index];
        let empty = BTreeMap::new();
        let before = if index == 0 { &empty } else { &self.entries[index - 1].files };
        let mut changed: Vec<String> = entry
            .files
            .iter()
            .filter(|(path, hash)| before.get(*path) != Some(*hash))
            .map(|(path, _)| path.clone())
            .collect();
        changed.extend(before.keys().filter(|path| !entry.files.contains_key(*path)).cloned());
        changed.sort();
        Change { revision: Self::revision(entry), author: SNAPSHOT_AUTHOR.into(), timestamp: entry.at, changed_paths: changed }
    }
}

impl Repository for DirectoryRepo {
    fn repo_id(&self) -> &str {
        &self.repo_id
    }

    fn head(&self) -> Result<Revision, VcsError> {
        if !self.root.is_dir() {
            return Err(VcsError::Unreachable(format!("{} is not a readable directory", self.root.display())));
        }
        Ok(self.entries.last().map_or_else(Revision::initial, Self::revision))
    }

    fn changes_since(&self, since: &Revision) -> Result<Vec<Change>, VcsError> {
        let head = self.head()?;
        let known = match since.seq {
            0 => true,
            seq if seq <= head.seq => Self::revision(&self.entries[seq as usize - 1]).id == since.id,
            _ => false,
        };
        if !known {
            return Err(VcsError::UnknownRevision { seq: since.seq });
        }
        Ok((since.seq as usize..self.entries.len()).map(|i| self.change(i)).collect())
    }

    fn refresh(&mut self, now: Instant) -> Result<(), VcsError> {
        self.snapshot(now).map(|_| ())
    }
}

fn tree_hash(files: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (path, hash) in files {
        hasher.update(path.as_bytes());
        hasher.update([0]);
        hasher.update(hash.as_bytes());
        hasher.update([b'\n']);
    }
    hex::encode(hasher.finalize())
}

fn unreachable_io(path: &Path, e: io::Error) -> VcsError {
    VcsError::Unreachable(format!("{}: {e}", path.display()))
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, VcsError> {
    let bad = |line: usize, what: &str| VcsError::Unreachable(format!("{}:{line}: {what}", path.display()));
    let file = File::open(path).map_err(|e| unreachable_io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    match lines.next() {
        Some((_, Ok(header))) if header == MANIFEST_HEADER => {}
        Some((_, Err(e))) => return Err(unreachable_io(path, e)),
        _ => return Err(bad(1, "missing manifest header")),
    }
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| unreachable_io(path, e))?;
        let n = n + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(file_line) = line.strip_prefix("  ") {
            let (name, hash) = file_line.rsplit_once(' ').ok_or_else(|| bad(n, "malformed file line"))?;
            let entry = entries.last_mut().ok_or_else(|| bad(n, "file line before any revision"))?;
            entry.files.insert(name.to_string(), hash.to_string());
            continue;
        }
        let mut fields = line.split(' ');
        let (Some(seq), Some(tree_hash), Some(at), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad(n, "malformed revision line"));
        };
        let seq: u64 = seq.parse().map_err(|_| bad(n, "bad seq"))?;
        let at: u64 = at.parse().map_err(|_| bad(n, "bad timestamp"))?;
        if seq != entries.len() as u64 + 1 || tree_hash.len() < 16 {
            return Err(bad(n, "revision out of sequence"));
        }
        entries.push(ManifestEntry { seq, tree_hash: tree_hash.to_string(), at: Instant(at), files: BTreeMap::new() });
    }
    Ok(entries)
}

fn append_manifest(path: &Path, entry: &ManifestEntry) -> io::Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut record = String::new();
    if fresh {
        record.push_str(MANIFEST_HEADER);
        record.push('\n');
    }
    record.push_str(&format!("{} {} {}\n", entry.seq, entry.tree_hash, entry.at.0));
    for (name, hash) in &entry.files {
        record.push_str(&format!("  {name} {hash}\n"));
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(record.as_bytes())?;
    file.sync_data()
}

/// Any repository the server can be configured with.
#[derive(Debug)]
pub enum RepoAdapter {
    Memory(SharedMemoryRepo),
    Directory(DirectoryRepo),
}

impl Repository for RepoAdapter {
    fn repo_id(&self) -> &str {
        match self {
            RepoAdapter::Memory(r) => r.repo_id(),
            RepoAdapter::Directory(r) => r.repo_id(),
        }
    }

    fn head(&self) -> Result<Revision, VcsError> {
        match self {
            RepoAdapter::Memory(r) => r.head(),
            RepoAdapter::Directory(r) => r.head(),
        }
    }

    fn changes_since(&self, since: &Revision) -> Result<Vec<Change>, VcsError> {
        match self {
            RepoAdapter::Memory(r) => r.changes_since(since),
            RepoAdapter::Directory(r) => r.changes_since(since),
        }
    }

    fn refresh(&mut self, now: Instant) -> Result<(), VcsError> {
        match self {
            RepoAdapter::Memory(r) => r.refresh(now),
            RepoAdapter::Directory(r) => r.refresh(now),
        }
    }
}
