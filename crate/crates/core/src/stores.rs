//! On-disk layout of a store directory:
//!
//! ```text
//! graph.sqlite       entity graph
//! frames.jsonl       {"dim": d} header, then one frame per line
//! utterances.jsonl   transcript utterances
//! captions.jsonl     caption windows
//! ```

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::extraction::{parse_captions_jsonl, Caption};
use crate::graph::GraphStore;
use crate::transcript::TranscriptStore;
use crate::visual::VisualIndex;

pub const GRAPH_FILE: &str = "graph.sqlite";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const UTTERANCES_FILE: &str = "utterances.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";

pub struct Stores {
    pub graph: GraphStore,
    /// Absent until frames are indexed.
    pub frames: Option<VisualIndex>,
    pub transcripts: TranscriptStore,
    dir: Option<PathBuf>,
}

impl Stores {
    pub fn in_memory(frame_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            graph: GraphStore::open_in_memory()?,
            frames: frame_dim.map(VisualIndex::in_memory).transpose()?,
            transcripts: TranscriptStore::in_memory(),
            dir: None,
        })
    }

    /// Opens a store directory, creating it if needed.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let frames_path = dir.join(FRAMES_FILE);
        Ok(Self {
            graph: GraphStore::open(dir.join(GRAPH_FILE))?,
            frames: if frames_path.exists() {
                Some(VisualIndex::open(&frames_path, None)?)
            } else {
                None
            },
            transcripts: TranscriptStore::open(dir.join(UTTERANCES_FILE))?,
            dir: Some(dir.to_path_buf()),
        })
    }

    /// Opens a directory that must already hold a store.
    pub fn open_existing(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.join(GRAPH_FILE).exists() && !dir.join(UTTERANCES_FILE).exists() {
            return Err(Error::validation(format!("{} is not a store directory", dir.display())));
        }
        Self::open(dir)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Opens (or creates with `dim`) the frame index.
    pub fn frames_or_create(&mut self, dim: usize) -> Result<&VisualIndex> {
        if self.frames.is_none() {
            self.frames = Some(match &self.dir {
                Some(d) => VisualIndex::open(d.join(FRAMES_FILE), Some(dim))?,
                None => VisualIndex::in_memory(dim)?,
            });
        }
        let frames = self.frames.as_ref().ok_or_else(|| Error::validation("frame index unavailable"))?;
        if frames.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: frames.dim(),
                got: dim,
            });
        }
        Ok(frames)
    }

    pub fn captions(&self) -> Result<Vec<Caption>> {
        match &self.dir {
            Some(d) if d.join(CAPTIONS_FILE).exists() => {
                let path = d.join(CAPTIONS_FILE);
                parse_captions_jsonl(File::open(&path)?, &path.display().to_string())
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Appends captions whose doc id is new; returns how many were added.
    pub fn add_captions(&self, captions: &[Caption]) -> Result<usize> {
        let dir = self.dir.as_ref().ok_or_else(|| Error::validation("captions need a store directory"))?;
        let existing: HashSet<String> = self.captions()?.into_iter().map(|c| c.doc_id).collect();
        let mut seen = HashSet::new();
        let mut buf = Vec::new();
        let mut added = 0;
        for c in captions {
            c.interval()?;
            if existing.contains(&c.doc_id) || !seen.insert(c.doc_id.clone()) {
                continue;
            }
            serde_json::to_writer(&mut buf, c)?;
            buf.push(b'\n');
            added += 1;
        }
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(CAPTIONS_FILE))?
            .write_all(&buf)?;
        Ok(added)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Stores::open_existing(dir.path().join("missing")).is_err());
        let mut s = Stores::open(dir.path()).unwrap();
        assert!(s.frames.is_none());
        s.frames_or_create(4).unwrap();
        let cap = Caption {
            doc_id: "d1".into(),
            day: 1,
            start_t: 100000,
            end_t: 100030,
            text: "cooking".into(),
        };
        assert_eq!(s.add_captions(&[cap.clone(), cap.clone()]).unwrap(), 1);
        assert_eq!(s.add_captions(&[cap]).unwrap(), 0);
        drop(s);
        let s = Stores::open_existing(dir.path()).unwrap();
        assert_eq!(s.frames.as_ref().unwrap().dim(), 4);
        assert_eq!(s.captions().unwrap().len(), 1);
        assert!(dir.path().join(GRAPH_FILE).exists());
    }
}
