use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use egoqa_core::model::{EntityRef, EntityType, RelationType};
use egoqa_core::{
    DayTime, FrameFilter, FrameRecord, GraphQueryIntent, GraphStore, RelationEdge, TimeInterval, TranscriptStore,
    Utterance, VisualIndex,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 64;
const PEOPLE: &[&str] = &["alice", "jake", "shure", "katrina", "lucia", "tasha"];
const THINGS: &[&str] = &["whiteboard", "marker", "cup", "laptop", "guitar", "flowers", "kitchen"];
const WORDS: &[&str] = &[
    "plan", "whiteboard", "marker", "coffee", "guitar", "dinner", "shopping", "flowers", "cake", "music", "tomorrow",
    "table", "kitchen", "cup", "box", "light", "camera", "song", "party", "list",
];

fn hhmmss(sec: u32) -> u32 {
    sec / 3600 * 10000 + sec % 3600 / 60 * 100 + sec % 60
}

fn unit(r: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f32> = (0..DIM).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn frames(r: &mut ChaCha8Rng, n: usize) -> Vec<FrameRecord> {
    (0..n)
        .map(|k| FrameRecord {
            frame_id: format!("f{k:06}"),
            when: DayTime::new(r.gen_range(1..=7), hhmmss(r.gen_range(0..86400))).unwrap(),
            location: Some(THINGS.choose(r).unwrap().to_string()),
            embedding: unit(r),
        })
        .collect()
}

fn utterances(r: &mut ChaCha8Rng, n: usize) -> Vec<Utterance> {
    (0..n)
        .map(|k| {
            let text = (0..r.gen_range(3..15)).map(|_| *WORDS.choose(r).unwrap()).collect::<Vec<_>>().join(" ");
            let s = r.gen_range(0..86000);
            let when = TimeInterval::on_day(r.gen_range(1..=7), hhmmss(s), hhmmss(s + 5)).unwrap();
            Utterance::new(format!("u{k:06}"), PEOPLE.choose(r).copied(), when, text)
        })
        .collect()
}

fn edges(r: &mut ChaCha8Rng, n: usize) -> Vec<RelationEdge> {
    (0..n)
        .map(|_| {
            let s = r.gen_range(8 * 3600..20 * 3600);
            let target = if r.gen_bool(0.5) {
                EntityRef::new(*PEOPLE.choose(r).unwrap(), EntityType::Person)
            } else {
                EntityRef::new(*THINGS.choose(r).unwrap(), EntityType::Object)
            };
            RelationEdge::new(
                EntityRef::new(*PEOPLE.choose(r).unwrap(), EntityType::Person).unwrap(),
                target.unwrap(),
                *RelationType::ALL.choose(r).unwrap(),
                TimeInterval::on_day(r.gen_range(1..=7), hhmmss(s), hhmmss(s + 60)).unwrap(),
                *WORDS.choose(r).unwrap(),
            )
        })
        .collect()
}

fn knn(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("knn");
    for n in [1_000usize, 10_000] {
        let index = VisualIndex::in_memory(DIM).unwrap();
        index.add_frames(frames(&mut r, n)).unwrap();
        let query: Vec<f32> = (0..DIM).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let filter = FrameFilter::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| index.search(black_box(&query), &filter, 10).unwrap())
        });
    }
    group.finish();
}

fn bm25(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("bm25");
    for n in [1_000usize, 10_000] {
        let store = TranscriptStore::in_memory();
        store.add_utterances(utterances(&mut r, n)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| store.bm25_search(black_box("whiteboard marker plan"), None, 10).unwrap())
        });
    }
    group.finish();
}

fn ladder(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let store = GraphStore::open_in_memory().unwrap();
    store.insert_edges(&edges(&mut r, 5_000)).unwrap();
    let mut exact = GraphQueryIntent::new(DayTime::new(7, 235959).unwrap());
    exact.day = Some(3);
    exact.source_id = Some("alice".into());
    exact.target_id = Some("whiteboard".into());
    exact.rel = Some(RelationType::ALL[0]);
    exact.time_range = Some((90000, 120000));
    let mut fallback = exact.clone();
    fallback.source_id = Some("nobody".into());
    fallback.target_id = Some("nothing".into());

    let mut group = c.benchmark_group("ladder");
    group.bench_function("first_stage", |b| b.iter(|| store.run_ladder(black_box(&exact), 50).unwrap()));
    group.bench_function("exhausted", |b| b.iter(|| store.run_ladder(black_box(&fallback), 50).unwrap()));
    group.finish();
}

criterion_group!(benches, knn, bm25, ladder);
criterion_main!(benches);
