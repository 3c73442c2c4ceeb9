//! Brute-force reference implementations and random instance generators.
//! Nothing here calls the engine's own matching or scoring code.

use std::collections::HashMap;

use egoqa_core::graph::GraphQueryIntent;
use egoqa_core::{DayTime, EntityRef, EntityType, FrameFilter, FrameRecord, RelationEdge, RelationType, TimeInterval, Utterance};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn hhmmss(sec: u32) -> u32 {
    sec / 3600 * 10000 + sec / 60 % 60 * 100 + sec % 60
}

pub fn sec_of(code: u32) -> u32 {
    code / 10000 * 3600 + code / 100 % 100 * 60 + code % 100
}

// ------------------------------------------------------------------ graph

const IDS: &[&str] = &[
    "Alice", "alice ", "Jake", "Shure", "red cup", "big red cup", "cup", "Katrina's luggage",
    "luggage", "phone", "living room", "O'Neil",
];
const EVIDENCE: &[&str] = &["", "Got it.", "over here", "pass the red cup", "Where is my phone?"];
const NEEDLES: &[&str] = &["got", "CUP", "here", "zzz", "phone"];

pub fn random_edges(r: &mut impl Rng, n: usize) -> Vec<RelationEdge> {
    (0..n)
        .map(|_| {
            let day = r.gen_range(1..=5);
            let s = r.gen_range(8 * 3600..20 * 3600);
            let e = s + r.gen_range(0..600);
            RelationEdge::new(
                EntityRef::new(*IDS.choose(r).unwrap(), *EntityType::ALL.choose(r).unwrap()).unwrap(),
                EntityRef::new(*IDS.choose(r).unwrap(), *EntityType::ALL.choose(r).unwrap()).unwrap(),
                *RelationType::ALL.choose(r).unwrap(),
                TimeInterval::on_day(day, hhmmss(s), hhmmss(e)).unwrap(),
                *EVIDENCE.choose(r).unwrap(),
            )
        })
        .collect()
}

pub fn random_intent(r: &mut impl Rng) -> GraphQueryIntent {
    loop {
        let mut i = GraphQueryIntent::new(DayTime::new(r.gen_range(1..=6), hhmmss(r.gen_range(0..86400))).unwrap());
        if r.gen_bool(0.5) {
            i.day = Some(r.gen_range(1..=6));
        }
        if r.gen_bool(0.4) {
            let lo = r.gen_range(8 * 3600..20 * 3600);
            i.time_range = Some((hhmmss(lo), hhmmss(lo + r.gen_range(0..4 * 3600))));
        }
        let pick_id = |r: &mut dyn RngCore| {
            let ids = [IDS, &["cup big", "ALICE", "katrina's", "room"]].concat();
            ids[r.gen_range(0..ids.len())].to_string()
        };
        if r.gen_bool(0.5) {
            i.source_id = Some(pick_id(r));
        }
        if r.gen_bool(0.5) {
            i.target_id = Some(pick_id(r));
        }
        if r.gen_bool(0.3) {
            i.source_type = EntityType::ALL.choose(r).copied();
        }
        if r.gen_bool(0.3) {
            i.target_type = EntityType::ALL.choose(r).copied();
        }
        if r.gen_bool(0.5) {
            i.rel = RelationType::ALL.choose(r).copied();
        }
        if r.gen_bool(0.2) {
            i.evidence_substring = Some(NEEDLES.choose(r).unwrap().to_string());
        }
        if i.validate().is_ok() {
            return i;
        }
    }
}

fn longest_word(id: &str) -> String {
    let lower = id.trim().to_lowercase();
    let mut best = String::new();
    for w in lower.split_whitespace() {
        if w.chars().count() > best.chars().count() {
            best = w.to_string();
        }
    }
    best
}

/// Stage membership, stages numbered 0 (strict) to 4 (relation relaxed).
pub fn stage_matches(stage: usize, i: &GraphQueryIntent, e: &RelationEdge) -> bool {
    let day = e.interval.start.day;
    if day > i.query_time.day {
        return false;
    }
    if stage == 0 {
        if let Some((lo, hi)) = i.time_range {
            if e.interval.start.time_hhmmss < lo || e.interval.end.time_hhmmss > hi {
                return false;
            }
        }
    }
    if stage <= 1 && i.day.is_some_and(|d| d != day) {
        return false;
    }
    let id_ok = |want: &Option<String>, have: &str| match want {
        None => true,
        Some(w) if stage <= 2 => w.trim().to_lowercase() == have.trim().to_lowercase(),
        Some(w) => have.to_lowercase().contains(&longest_word(w)),
    };
    let use_source = !(stage == 4 && i.target_id.is_some());
    if use_source && !id_ok(&i.source_id, &e.source.id) {
        return false;
    }
    if !id_ok(&i.target_id, &e.target.id) {
        return false;
    }
    if stage < 4 {
        if i.rel.is_some_and(|r| r != e.rel) {
            return false;
        }
        if i.source_type.is_some_and(|t| t != e.source.etype) || i.target_type.is_some_and(|t| t != e.target.etype) {
            return false;
        }
    }
    match &i.evidence_substring {
        Some(n) => e.evidence.to_lowercase().contains(&n.to_lowercase()),
        None => true,
    }
}

/// Row ids of each stage's full candidate set, in `(day, start, id)` order.
pub fn stage_sets(edges: &[RelationEdge], i: &GraphQueryIntent) -> Vec<Vec<i64>> {
    let mut sorted: Vec<&RelationEdge> = edges.iter().collect();
    sorted.sort_by_key(|e| (e.interval.start.day, e.interval.start.time_hhmmss, e.row_id));
    (0..5)
        .map(|k| sorted.iter().filter(|e| stage_matches(k, i, e)).map(|e| e.row_id).collect())
        .collect()
}

// ----------------------------------------------------------------- frames

pub const LOCATIONS: &[&str] = &["kitchen", "yard", "Living Room"];

fn unit_f32(r: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-3 {
            continue;
        }
        return v.iter().map(|x| (x / n) as f32).collect();
    }
}

pub fn random_frames(r: &mut impl Rng, n: usize, d: usize) -> Vec<FrameRecord> {
    let mut out: Vec<FrameRecord> = Vec::with_capacity(n);
    for k in 0..n {
        let embedding = if k > 0 && r.gen_bool(0.1) {
            out[r.gen_range(0..k)].embedding.clone()
        } else {
            unit_f32(r, d)
        };
        let when = if k > 0 && r.gen_bool(0.05) {
            out[r.gen_range(0..k)].when
        } else {
            DayTime::new(r.gen_range(1..=3), hhmmss(r.gen_range(0..86400))).unwrap()
        };
        out.push(FrameRecord {
            frame_id: format!("f{:05}", r.gen_range(0..1_000_000) * 1000 + k),
            when,
            location: if r.gen_bool(0.8) { LOCATIONS.choose(r).map(|s| s.to_string()) } else { None },
            embedding,
        });
    }
    out
}

pub fn random_query(r: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let q: Vec<f32> = (0..d).map(|_| r.gen_range(-2.0f32..2.0)).collect();
        if q.iter().any(|x| x.abs() > 1e-3) {
            return q;
        }
    }
}

pub fn random_filter(r: &mut impl Rng) -> FrameFilter {
    let mut f = FrameFilter::default();
    if r.gen_bool(0.4) {
        f.day = Some(r.gen_range(1..=3));
    }
    if r.gen_bool(0.3) {
        let lo = r.gen_range(0..80000);
        f.time_range = Some((hhmmss(lo), hhmmss(lo + r.gen_range(0..86400 - lo))));
    }
    if r.gen_bool(0.3) {
        f.location = Some([" KITCHEN", "yard", "living room "].choose(r).unwrap().to_string());
    }
    if r.gen_bool(0.3) {
        f.before = Some(DayTime::new(r.gen_range(1..=3), hhmmss(r.gen_range(0..86400))).unwrap());
    }
    f
}

/// `(frame_id, score)` of the brute-force top `k`.
pub fn brute_knn(frames: &[FrameRecord], q: &[f32], f: &FrameFilter, k: usize) -> Vec<(String, f64)> {
    let norm = q.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let qu: Vec<f64> = q.iter().map(|x| *x as f64 / norm).collect();
    let mut scored: Vec<(f64, &FrameRecord)> = frames
        .iter()
        .filter(|fr| {
            f.day.is_none_or(|d| fr.when.day == d)
                && f.time_range.is_none_or(|(lo, hi)| lo <= fr.when.time_hhmmss && fr.when.time_hhmmss <= hi)
                && f.location.as_ref().is_none_or(|want| {
                    fr.location.as_ref().is_some_and(|l| l.trim().eq_ignore_ascii_case(want.trim()))
                })
                && f.before.is_none_or(|b| (fr.when.day, fr.when.time_hhmmss) <= (b.day, b.time_hhmmss))
        })
        .map(|fr| {
            let mut dot = 0.0;
            for (a, b) in qu.iter().zip(&fr.embedding) {
                dot += a * *b as f64;
            }
            (dot.clamp(-1.0, 1.0), fr)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then((a.1.when.day, a.1.when.time_hhmmss).cmp(&(b.1.when.day, b.1.when.time_hhmmss)))
            .then(a.1.frame_id.cmp(&b.1.frame_id))
    });
    scored.into_iter().take(k).map(|(s, fr)| (fr.frame_id.clone(), s)).collect()
}

// ------------------------------------------------------------- transcript

const WORDS: &[&str] = &["cup", "Phone", "whiteboard", "plan", "eggs", "the", "a", "marker", "Alice", "guitar", "kitchen", "is"];

pub fn random_utterances(r: &mut impl Rng, n: usize) -> Vec<Utterance> {
    (0..n)
        .map(|k| {
            let len = r.gen_range(1..12);
            let text = (0..len).map(|_| *WORDS.choose(r).unwrap()).collect::<Vec<_>>().join(" ");
            let day = r.gen_range(1..=3);
            let s = r.gen_range(0..86000);
            Utterance::new(
                format!("u{k:04}"),
                Some("Jake"),
                TimeInterval::on_day(day, hhmmss(s), hhmmss(s + r.gen_range(0..20))).unwrap(),
                text,
            )
        })
        .collect()
}

pub fn random_bm25_query(r: &mut impl Rng) -> String {
    let len = r.gen_range(1..5);
    (0..len).map(|_| *WORDS.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Textbook Okapi BM25 (k1 = 1.2, b = 0.75) with the `ln(1 + ...)` IDF,
/// corpus statistics over all utterances, candidates restricted to the
/// closed range. Returns `(utt_id, score)` best first.
pub fn brute_bm25(utts: &[Utterance], query: &str, range: Option<(DayTime, DayTime)>, k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let docs: Vec<Vec<String>> = utts
        .iter()
        .map(|u| u.text.split_whitespace().map(|w| w.to_lowercase()).collect())
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut terms: Vec<String> = Vec::new();
    for t in query.split_whitespace().map(|w| w.to_lowercase()) {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    let df: HashMap<&str, f64> = terms
        .iter()
        .map(|t| (t.as_str(), docs.iter().filter(|d| d.contains(t)).count() as f64))
        .collect();
    let mut out: Vec<(f64, &Utterance)> = Vec::new();
    for (u, d) in utts.iter().zip(&docs) {
        if let Some((from, to)) = range {
            if u.when.start > to || u.when.end < from {
                continue;
            }
        }
        let dl = d.len() as f64;
        let mut score = 0.0;
        for t in &terms {
            let tf = d.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = (1.0 + (n - df[t.as_str()] + 0.5) / (df[t.as_str()] + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        if score > 0.0 {
            out.push((score, u));
        }
    }
    out.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.when.start.cmp(&b.1.when.start))
            .then(a.1.utt_id.cmp(&b.1.utt_id))
    });
    out.into_iter().take(k).map(|(s, u)| (u.utt_id.clone(), s)).collect()
}

// ----------------------------------------------------------------- recall

pub fn brute_recall(selected: &[DayTime], targets: &[DayTime], w: u64) -> Option<f64> {
    if targets.is_empty() {
        return None;
    }
    let mut hit = 0usize;
    for t in targets {
        let ts = sec_of(t.time_hhmmss) as f64;
        if selected
            .iter()
            .any(|s| s.day == t.day && (sec_of(s.time_hhmmss) as f64 - ts).abs() <= w as f64 / 2.0)
        {
            hit += 1;
        }
    }
    Some(hit as f64 / targets.len() as f64)
}

pub fn random_times(r: &mut impl Rng, n: usize, cluster: Option<&[DayTime]>) -> Vec<DayTime> {
    (0..n)
        .map(|_| match cluster {
            Some(c) if !c.is_empty() && r.gen_bool(0.7) => {
                let base = c[r.gen_range(0..c.len())];
                let s = sec_of(base.time_hhmmss) as i64 + r.gen_range(-2000..=2000);
                DayTime::new(base.day, hhmmss(s.clamp(0, 86399) as u32)).unwrap()
            }
            _ => DayTime::new(r.gen_range(1..=3), hhmmss(r.gen_range(0..86400))).unwrap(),
        })
        .collect()
}
