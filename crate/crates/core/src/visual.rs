//! Frame index for visual search: exact cosine kNN over unit-norm frame
//! embeddings, restricted by attribute filters.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{decode_time, DayTime};

/// Allowed deviation of a stored embedding's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Frames kept per visual sub-task (1 FPS sampling, top 50).
pub const DEFAULT_K_TOTAL: usize = 50;

/// At most this many text queries per visual sub-task.
pub const MAX_QUERIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub when: DayTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    pub embedding: Vec<f32>,
}

/// Line format of the frames JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameLine {
    frame_id: String,
    day: u32,
    t: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location: Option<String>,
    embedding: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameFileHeader {
    dim: usize,
}

impl TryFrom<FrameLine> for FrameRecord {
    type Error = Error;

    fn try_from(l: FrameLine) -> Result<Self> {
        Ok(FrameRecord {
            frame_id: l.frame_id,
            when: DayTime::new(l.day, l.t)?,
            location: l.location,
            embedding: l.embedding,
        })
    }
}

impl From<&FrameRecord> for FrameLine {
    fn from(r: &FrameRecord) -> Self {
        FrameLine {
            frame_id: r.frame_id.clone(),
            day: r.when.day,
            t: r.when.time_hhmmss,
            location: r.location.clone(),
            embedding: r.embedding.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<u32>,
    /// Inclusive HHMMSS bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_range: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    /// Frames after this moment are excluded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<DayTime>,
}

impl FrameFilter {
    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.time_range {
            decode_time(lo)?;
            decode_time(hi)?;
            if lo > hi {
                return Err(Error::validation(format!("frame time range {lo}..{hi} is inverted")));
            }
        }
        Ok(())
    }

    pub fn accepts(&self, f: &FrameRecord) -> bool {
        if self.day.is_some_and(|d| d != f.when.day) {
            return false;
        }
        if let Some((lo, hi)) = self.time_range {
            if f.when.time_hhmmss < lo || f.when.time_hhmmss > hi {
                return false;
            }
        }
        if let Some(loc) = &self.location {
            match &f.location {
                Some(l) if l.trim().to_lowercase() == loc.trim().to_lowercase() => {}
                _ => return false,
            }
        }
        if self.before.is_some_and(|b| f.when > b) {
            return false;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHit {
    pub frame: FrameRecord,
    pub score: f64,
}

/// Ranking order: score descending, then `(when, frame_id)` ascending.
pub fn hit_order(a_score: f64, a: &FrameRecord, b_score: f64, b: &FrameRecord) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a.when.cmp(&b.when))
        .then_with(|| a.frame_id.cmp(&b.frame_id))
}

/// Cosine score of a stored unit embedding against an already-normalized
/// query, accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine_score(query_unit: &[f64], embedding: &[f32]) -> f64 {
    let dot: f64 = query_unit
        .iter()
        .zip(embedding)
        .map(|(q, e)| q * *e as f64)
        .sum();
    dot.clamp(-1.0, 1.0)
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

pub struct VisualIndex {
    dim: usize,
    frames: RwLock<Arc<Vec<FrameRecord>>>,
    // Guards the id set and the backing file together.
    writer: Mutex<(HashSet<String>, Option<File>)>,
    path: Option<PathBuf>,
}

impl VisualIndex {
    pub fn in_memory(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        Ok(Self {
            dim,
            frames: RwLock::new(Arc::new(Vec::new())),
            writer: Mutex::new((HashSet::new(), None)),
            path: None,
        })
    }

    /// Opens (or creates, when `dim` is given) a JSONL-backed index. The
    /// first line of the file is a `{"dim": d}` header.
    pub fn open(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let name = path.display().to_string();
        let (file_dim, frames) = if path.exists() {
            let mut lines = BufReader::new(File::open(&path)?).lines();
            let header = lines.next().transpose()?.ok_or_else(|| Error::Parse {
                path: name.clone(),
                line: 1,
                message: "missing {\"dim\": d} header".into(),
            })?;
            let header: FrameFileHeader = serde_json::from_str(&header).map_err(|e| Error::Parse {
                path: name.clone(),
                line: 1,
                message: e.to_string(),
            })?;
            let mut frames = Vec::new();
            for (i, line) in lines.enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parse_err = |message: String| Error::Parse {
                    path: name.clone(),
                    line: i + 2,
                    message,
                };
                let fl: FrameLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                frames.push(FrameRecord::try_from(fl).map_err(|e| parse_err(e.to_string()))?);
            }
            (header.dim, frames)
        } else {
            let d = dim.ok_or_else(|| Error::validation(format!("{name} does not exist and no dimension was given")))?;
            let mut f = File::create(&path)?;
            writeln!(f, "{}", serde_json::to_string(&FrameFileHeader { dim: d })?)?;
            (d, Vec::new())
        };
        if let Some(d) = dim {
            if d != file_dim {
                return Err(Error::DimensionMismatch {
                    expected: file_dim,
                    got: d,
                });
            }
        }
        let index = Self::in_memory(file_dim)?;
        index.load(frames)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        index.writer.lock().map_err(|_| Error::validation("frame writer lock poisoned"))?.1 = Some(file);
        Ok(Self { path: Some(path), ..index })
    }

    fn load(&self, frames: Vec<FrameRecord>) -> Result<()> {
        let mut w = self.writer.lock().map_err(|_| Error::validation("frame writer lock poisoned"))?;
        for f in &frames {
            self.check(f)?;
            if !w.0.insert(f.frame_id.clone()) {
                return Err(Error::DuplicateId(f.frame_id.clone()));
            }
        }
        let mut sorted = frames;
        sorted.sort_by(|a, b| (a.when, &a.frame_id).cmp(&(b.when, &b.frame_id)));
        *self.frames.write().map_err(|_| Error::validation("frame index lock poisoned"))? = Arc::new(sorted);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, frame_id: &str) -> bool {
        self.writer.lock().map(|w| w.0.contains(frame_id)).unwrap_or(false)
    }

    fn snapshot(&self) -> Arc<Vec<FrameRecord>> {
        self.frames
            .read()
            .map(|g| Arc::clone(&g))
            .unwrap_or_else(|p| Arc::clone(&p.into_inner()))
    }

    fn check(&self, f: &FrameRecord) -> Result<()> {
        if f.embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: f.embedding.len(),
            });
        }
        let norm = l2_norm(&f.embedding);
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized {
                id: f.frame_id.clone(),
                norm,
            });
        }
        Ok(())
    }

    /// Adds a batch atomically: if any record is invalid or a duplicate,
    /// nothing is added.
    pub fn add_frames(&self, records: Vec<FrameRecord>) -> Result<usize> {
        let mut w = self.writer.lock().map_err(|_| Error::validation("frame writer lock poisoned"))?;
        let mut batch_ids = HashSet::new();
        for r in &records {
            self.check(r)?;
            if w.0.contains(&r.frame_id) || !batch_ids.insert(r.frame_id.as_str()) {
                return Err(Error::DuplicateId(r.frame_id.clone()));
            }
        }
        if let Some(file) = w.1.as_mut() {
            let mut buf = Vec::new();
            for r in &records {
                serde_json::to_writer(&mut buf, &FrameLine::from(r))?;
                buf.push(b'\n');
            }
            file.write_all(&buf)?;
            file.flush()?;
        }
        for r in &records {
            w.0.insert(r.frame_id.clone());
        }
        let n = records.len();
        let mut next: Vec<FrameRecord> = self.snapshot().as_ref().clone();
        next.extend(records);
        next.sort_by(|a, b| (a.when, &a.frame_id).cmp(&(b.when, &b.frame_id)));
        *self.frames.write().map_err(|_| Error::validation("frame index lock poisoned"))? = Arc::new(next);
        Ok(n)
    }

    /// Reads frames in the JSONL line format (no header) from `input`.
    pub fn parse_frames_jsonl(input: impl std::io::Read, source_name: &str) -> Result<Vec<FrameRecord>> {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source_name.to_string(),
                line: i + 1,
                message,
            };
            let v: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
            if v.get("dim").is_some() && v.get("frame_id").is_none() {
                continue;
            }
            let fl: FrameLine = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
            out.push(FrameRecord::try_from(fl).map_err(|e| err(e.to_string()))?);
        }
        Ok(out)
    }

    fn unit_query(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let norm = l2_norm(query);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::validation("query vector has zero or non-finite norm"));
        }
        Ok(query.iter().map(|x| *x as f64 / norm).collect())
    }

    /// Exact top-`k` by cosine among frames passing `filter`.
    pub fn search(&self, query: &[f32], filter: &FrameFilter, k: usize) -> Result<Vec<FrameHit>> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        filter.validate()?;
        let q = self.unit_query(query)?;
        let frames = self.snapshot();
        let mut scored: Vec<(f64, usize)> = frames
            .iter()
            .enumerate()
            .filter(|(_, f)| filter.accepts(f))
            .map(|(i, f)| (cosine_score(&q, &f.embedding), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| hit_order(a.0, &frames[a.1], b.0, &frames[b.1]);
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, i)| FrameHit {
                frame: frames[i].clone(),
                score,
            })
            .collect())
    }

    /// Runs every query against every window and keeps each frame's best
    /// score. An empty `windows` slice searches with the default filter.
    pub fn multi_query_search(
        &self,
        queries: &[Vec<f32>],
        windows: &[FrameFilter],
        k_total: usize,
    ) -> Result<Vec<FrameHit>> {
        if queries.is_empty() {
            return Err(Error::validation("visual search needs at least one query"));
        }
        if queries.len() > MAX_QUERIES {
            return Err(Error::validation(format!(
                "visual search takes at most {MAX_QUERIES} queries, got {}",
                queries.len()
            )));
        }
        let default_window = [FrameFilter::default()];
        let windows = if windows.is_empty() { &default_window[..] } else { windows };
        let mut best: HashMap<String, FrameHit> = HashMap::new();
        for q in queries {
            for w in windows {
                for hit in self.search(q, w, k_total)? {
                    match best.get_mut(&hit.frame.frame_id) {
                        Some(existing) if existing.score >= hit.score => {}
                        Some(existing) => existing.score = hit.score,
                        None => {
                            best.insert(hit.frame.frame_id.clone(), hit);
                        }
                    }
                }
            }
        }
        let mut merged: Vec<FrameHit> = best.into_values().collect();
        merged.sort_by(|a, b| hit_order(a.score, &a.frame, b.score, &b.frame));
        merged.truncate(k_total);
        Ok(merged)
    }
}
