#!/usr/bin/env python3
"""Regenerates the fixture corpus and QA fixtures.

Everything is derived from a fixed seed. The expected graph statistics in
corpus/manifest.json are computed here, independently of the Rust code:
membership by half-open interval intersection, citation clustering by
adjacency, and exact-tuple dedup.

    python3 fixtures/gen_fixtures.py
"""

import json
import math
import random
from collections import Counter
from pathlib import Path

ROOT = Path(__file__).resolve().parent
SEED = 20240611
DIM = 8

PEOPLE = ["Jake", "Alice", "Shure", "Katrina", "Lucia", "Tasha"]
OBJECTS = ["whiteboard", "marker", "phone", "microwave", "Katrina's luggage", "red cup", "guitar", "laptop", "eggs", "fridge"]
LOCATIONS = ["kitchen", "living room", "yard", "bedroom"]
ENTITY_TYPES = ["Person", "Object", "Location"]
RELS = ["TALKS_TO", "INTERACTS_WITH", "MENTIONS", "USES"]

# Each object has a direction in embedding space; frames of a document lean
# towards its main object.
TOPIC_AXIS = {o: i % DIM for i, o in enumerate(OBJECTS)}


def hms(code):
    return code // 10000, code // 100 % 100, code % 100


def secs(code):
    h, m, s = hms(code)
    return h * 3600 + m * 60 + s


def code(sec):
    return sec // 3600 * 10000 + sec // 60 % 60 * 100 + sec % 60


def span(s, e):
    a, b = secs(s), secs(e)
    return a, max(b, a + 1)


def intersects(day_a, a, day_b, b):
    if day_a != day_b:
        return False
    (a0, a1), (b0, b1) = span(*a), span(*b)
    return a0 < b1 and b0 < a1


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [round(x / n, 7) for x in v]


def canon_type(t):
    for e in ENTITY_TYPES:
        if t.strip().lower() == e.lower():
            return e
    return None


def canon_rel(r):
    r = r.strip().replace("-", "_").upper()
    return r if r in RELS else None


# ---------------------------------------------------------------- corpus

def build_corpus(rng):
    starts = {
        1: [93000, 93030, 101500, 120000, 120030, 183000, 204500],
        2: [90000, 113000, 154930, 155000, 155030, 160500, 210000],
        3: [80000, 80030, 100000, 103000, 110000, 113000],
    }
    captions, utterances, docs = [], [], []
    uid = 0

    def new_utt(day, s, e, speaker, text):
        nonlocal uid
        uid += 1
        u = {"utt_id": f"u{uid:04d}", "speaker": speaker, "day": day, "start_t": s, "end_t": e, "text": text}
        utterances.append(u)
        return u

    lines = [
        "Can you pass me the {o}?",
        "I left the {o} near the {l}.",
        "We should use the {o} for the plan.",
        "Has anyone seen the {o}?",
        "Let me check the {o} first.",
        "The {o} is in the {l} now.",
    ]
    for day, day_starts in starts.items():
        for n, start in enumerate(day_starts):
            doc_id = f"D{day}-{n + 1:02d}"
            end = code(secs(start) + 30)
            main = rng.choice(OBJECTS)
            loc = rng.choice(LOCATIONS)
            fig = day == 2 and start == 155000
            if fig:
                main, loc = "whiteboard", "living room"
            caption = {"doc_id": doc_id, "day": day, "start_t": start, "end_t": end,
                       "text": f"The camera wearer is in the {loc}; the {main} is in view."}
            captions.append(caption)

            doc_utts = []
            if fig:
                doc_utts.append(new_utt(day, 155005, 155009, "Alice", "Let's put the plan on the whiteboard."))
                doc_utts.append(new_utt(day, 155021, 155022, "Shure", "Got it."))
                doc_utts.append(new_utt(day, 155026, 155028, "Shure", "I'll grab a marker."))
            else:
                for _ in range(rng.randint(0, 3)):
                    s = code(secs(start) + rng.randint(0, 26))
                    e = code(secs(s) + rng.randint(0, 4))
                    text = rng.choice(lines).format(o=rng.choice([main] + OBJECTS), l=rng.choice(LOCATIONS))
                    doc_utts.append(new_utt(day, s, e, rng.choice(PEOPLE), text))
            # An utterance starting exactly where this window ends.
            if rng.random() < 0.3:
                new_utt(day, end, code(secs(end) + 2), rng.choice(PEOPLE), f"Over here, near the {loc}.")
            docs.append({"caption": caption, "main": main, "loc": loc, "fig": fig})

    # A few utterances outside every window.
    for day in (1, 2, 3):
        new_utt(day, 70000, 70003, "Jake", "Good morning, everyone.")
    return captions, utterances, docs


def doc_members(caption, utterances):
    window = (caption["start_t"], caption["end_t"])
    members = [u for u in utterances if intersects(u["day"], (u["start_t"], u["end_t"]), caption["day"], window)]
    return sorted(members, key=lambda u: (u["start_t"], u["utt_id"]))


def node(i, t):
    return {"id": i, "type": t}


def random_edge(rng, main, loc):
    rel = rng.choice(RELS)
    src = node(rng.choice(PEOPLE), "Person")
    if rel == "TALKS_TO":
        tgt = node(rng.choice([p for p in PEOPLE if p != src["id"]]), "Person")
    elif rel == "USES":
        tgt = node(main if rng.random() < 0.6 else rng.choice(OBJECTS), "Object")
    elif rel == "MENTIONS":
        tgt = rng.choice([node(main, "Object"), node(loc, "Location"), node(rng.choice(PEOPLE), "Person")])
    else:
        tgt = rng.choice([node(main, "Object"), node(rng.choice(PEOPLE), "Person")])
    spelled = rng.choice([rel, rel.lower(), rel.lower().replace("_", "-")])
    return {"source": src, "target": tgt, "type": spelled}


def build_extraction(rng, docs, utterances):
    entries, expected = [], []
    for d in docs:
        cap = d["caption"]
        members = doc_members(cap, utterances)
        if d["fig"]:
            rels = [
                {"source": node("Shure", "Person"), "target": node("Alice", "Person"), "type": "TALKS_TO"},
                {"source": node("Alice", "Person"), "target": node("whiteboard", "Object"), "type": "USES"},
                {"source": node("Shure", "Person"), "target": node("marker", "Object"), "type": "MENTIONS"},
            ]
        else:
            rels = [random_edge(rng, d["main"], d["loc"]) for _ in range(rng.randint(1, 3))]
            if rng.random() < 0.4:
                rels.append(dict(rels[0]))  # repeated relationship
        # Malformed items the extractor must drop.
        if rng.random() < 0.5:
            rels.append({"source": node("Jake", "Person"), "target": node("cat", "Animal"), "type": "USES"})
        if rng.random() < 0.5:
            rels.append({"source": node("Alice", "Person"), "target": node("Jake", "Person"), "type": "LIKES"})
        if rng.random() < 0.2:
            rels.append({"source": node("Jake", "Person"), "type": "USES"})

        nodes = []
        for r in rels:
            for end in ("source", "target"):
                if end in r and r[end] not in nodes and rng.random() < 0.8:
                    nodes.append(r[end])
        if rng.random() < 0.3:
            nodes.append(node("rabbit", "Animal"))

        # Valid, de-duplicated relationships in order: the edge indices the
        # annotator refers to.
        valid = []
        for r in rels:
            if "source" not in r or "target" not in r:
                continue
            st, tt, rel = canon_type(r["source"]["type"]), canon_type(r["target"]["type"]), canon_rel(r["type"])
            if not (st and tt and rel):
                continue
            key = (r["source"]["id"], st, r["target"]["id"], tt, rel)
            if key not in valid:
                valid.append(key)

        annotations = []
        member_ids = [u["utt_id"] for u in members]
        for i, _ in enumerate(valid):
            if d["fig"]:
                cited = {0: [member_ids[1]], 1: [member_ids[0]], 2: [member_ids[2]]}[i]
            elif member_ids and rng.random() < 0.75:
                cited = rng.sample(member_ids, rng.randint(1, len(member_ids)))
            else:
                cited = []
            if rng.random() < 0.15:
                cited = cited + ["u9999"]
            annotations.append({"edge": i, "utterance_ids": cited})
        if rng.random() < 0.2:
            annotations.append({"edge": len(valid) + 3, "utterance_ids": member_ids[:1]})

        entries.append({"kind": "extract", "key": cap["doc_id"], "response": {"nodes": nodes, "relationships": rels}})
        entries.append({"kind": "annotate", "key": cap["doc_id"], "response": {"annotations": annotations}})

        # Expected stored edges.
        by_id = {u["utt_id"]: u for u in members}
        pos = {u["utt_id"]: k for k, u in enumerate(members)}
        cites = {a["edge"]: a["utterance_ids"] for a in annotations if a["edge"] < len(valid)}
        for i, (sid, st, tid, tt, rel) in enumerate(valid):
            good = sorted({pos[c] for c in cites.get(i, []) if c in pos})
            if not good or not members:
                expected.append((sid, st, tid, tt, rel, cap["day"], cap["start_t"], cap["end_t"], ""))
                continue
            runs = [[good[0]]]
            for p in good[1:]:
                if p == runs[-1][-1] + 1:
                    runs[-1].append(p)
                else:
                    runs.append([p])
            for run in runs:
                us = [members[p] for p in run]
                expected.append((sid, st, tid, tt, rel, cap["day"],
                                 min(u["start_t"] for u in us), max(u["end_t"] for u in us),
                                 " ".join(u["text"].strip() for u in us)))
    unique = list(dict.fromkeys(expected))
    manifest = {
        "documents": len(docs),
        "stats": {
            "total_edges": len(unique),
            "edges_per_day": {str(k): v for k, v in sorted(Counter(e[5] for e in unique).items())},
            "edges_per_rel": dict(sorted(Counter(e[4] for e in unique).items())),
            "source_type_counts": dict(sorted(Counter(e[1] for e in unique).items())),
            "target_type_counts": dict(sorted(Counter(e[3] for e in unique).items())),
        },
    }
    return entries, manifest


def build_frames(rng, docs):
    frames = []
    for d in docs:
        cap = d["caption"]
        axis = TOPIC_AXIS[d["main"]]
        for k in range(0, 30, 2):
            v = [rng.gauss(0, 0.15) for _ in range(DIM)]
            v[axis] += 1.0
            frames.append({"frame_id": f"{cap['doc_id']}-f{k:02d}", "day": cap["day"],
                           "t": code(secs(cap["start_t"]) + k), "location": d["loc"], "embedding": unit(v)})
    return frames


# -------------------------------------------------------------------- QA

def axis_vector(obj):
    v = [0.0] * DIM
    v[TOPIC_AXIS[obj]] = 1.0
    return v


def build_qa():
    fig_plan = {"steps": [
        {"description": "Find frames of someone writing on the whiteboard on day 2", "tool": "visual",
         "args": {"queries": ["whiteboard writing"], "windows": [{"day": 2}]}},
        {"description": "Look up who Shure talked to around the whiteboard session", "tool": "eg",
         "args": {"sql": "SELECT * FROM entity_graph_table WHERE day = 2 AND start_t >= 155000 AND end_t <= 160700 "
                         "AND source_id = 'Shure' AND rel_type = 'TALKS_TO'"}},
        {"description": "Search the transcript for the whiteboard plan discussion", "tool": "audio",
         "args": {"task": "whiteboard plan", "from": "D2 15:00:00", "to": "D2 16:30:00"}},
        {"description": "List every conversation Shure started", "tool": "eg",
         "args": {"source_id": "shure", "rel": "talks-to"}},
        {"description": "Check who stood next to Shure after the plan was written", "tool": "visual",
         "args": {"windows": [{"day": 2, "t_ge": 155000, "t_le": 160000}]}},
    ]}
    items, entries = [], []
    u = lambda p, c: {"prompt_tokens": p, "completion_tokens": c, "image_count": 0, "estimated": False}

    fig = {"qid": "fig5", "question": "Who did Shure talk to right after the plan went on the whiteboard?",
           "candidates": ["Jake", "Alice", "Katrina", "Lucia"], "gold": 1, "category": "RelationMap",
           "query_time": "D3 12:00:00", "target_times": ["D2 15:50:21"]}
    items.append(fig)
    entries += [
        {"kind": "plan", "key": "fig5", "response": fig_plan, "usage": u(412, 180)},
        {"kind": "embed_text", "key": "whiteboard writing", "response": axis_vector("whiteboard"), "usage": u(3, 0)},
        {"kind": "rewrite_visual", "key": "fig5#5", "response": {"queries": ["people at the whiteboard", "marker"]},
         "usage": u(96, 14)},
        {"kind": "embed_text", "key": "people at the whiteboard", "response": axis_vector("whiteboard"), "usage": u(4, 0)},
        {"kind": "embed_text", "key": "marker", "response": axis_vector("marker"), "usage": u(1, 0)},
        {"kind": "analyze", "key": "fig5#1", "usage": u(1650, 72),
         "response": {"summary": "Whiteboard frames cluster around 15:50 on day 2.", "timestamps": ["D2 15:50:04", "D2 15:50:20"], "edges": []}},
        {"kind": "analyze", "key": "fig5#2", "usage": u(820, 64),
         "response": "Shure answered Alice with \"Got it.\" at D2 15:50:21, right after the plan was written."},
        {"kind": "analyze", "key": "fig5#3", "usage": u(904, 51),
         "response": {"summary": "Alice proposes putting the plan on the whiteboard; Shure agrees.", "timestamps": ["D2 15:50:05", "15:50:21"]}},
        {"kind": "transcript_llm_search", "key": "fig5#3@D2", "usage": u(2210, 48),
         "response": {"summary": "Alice suggests writing the plan on the whiteboard; Shure replies \"Got it.\"",
                      "timestamps": ["D2 15:50:05", "D2 15:50:21"]}},
        {"kind": "analyze", "key": "fig5#4", "usage": u(760, 40),
         "response": {"summary": "Shure's only recorded conversation partner is Alice.", "timestamps": [], "edges": [1, 999999]}},
        {"kind": "analyze", "key": "fig5#5", "usage": u(1702, 33),
         "response": {"summary": "Alice stands beside Shure at the whiteboard.", "timestamps": [{"day": 2, "t": 155024}]}},
        {"kind": "grade", "key": "fig5#1", "response": "incomplete", "usage": u(300, 1)},
        {"kind": "grade", "key": "fig5#2", "response": "not yet", "usage": u(340, 2)},
        {"kind": "grade", "key": "fig5#3", "response": "Incomplete.", "usage": u(380, 1)},
        {"kind": "grade", "key": "fig5#4", "response": {"verdict": "incomplete"}, "usage": u(410, 3)},
        {"kind": "answer", "key": "fig5", "response": "B", "usage": u(520, 1)},
    ]

    # Nine more questions on the default planner; answers are scripted.
    rest = [
        ("q02", "EntityLog", "Where was the microwave when Jake checked it?", ["kitchen", "yard", "bedroom", "living room"], 0, "D2 12:00:00", ["D1 10:15:10"], "A"),
        ("q03", "EntityLog", "Which object did Lucia use most in the kitchen?", ["guitar", "eggs", "laptop", "marker"], 1, "D3 09:00:00", ["D2 09:00:12"], "The answer is (C) because the laptop is mentioned."),
        ("q04", "EventRecall", "What happened right before the whiteboard discussion?", ["cooking", "a phone call", "unpacking", "a meeting"], 3, "D2 23:00:00", ["D2 15:49:40"], "D"),
        ("q05", "EventRecall", "What did everyone do after breakfast on day three?", ["played guitar", "left", "cleaned", "slept"], 2, "D3 12:00:00", ["D3 08:00:20", "D3 10:00:05"], "I would say C."),
        ("q06", "HabitInsight", "What does Katrina usually carry around?", ["her luggage", "a cup", "a phone", "a laptop"], 0, "D3 12:00:00", ["D1 12:00:15"], "{\"answer\": \"A\"}"),
        ("q07", "HabitInsight", "How does Tasha usually start conversations?", ["greeting", "joking", "asking", "pointing"], 2, "D3 12:00:00", ["D2 11:30:10"], "no idea at all"),
        ("q08", "RelationMap", "Who talks with Alice most frequently?", ["Shure", "Jake", "Tasha", "Lucia"], 0, "D3 12:00:00", ["D2 15:50:21", "D1 09:30:10"], "A"),
        ("q09", "TaskMaster", "What still needs buying for the dinner party?", ["eggs", "cups", "markers", "chairs"], 0, "D3 11:30:00", ["D3 11:00:10"], "B"),
        ("q10", "TaskMaster", "What should be packed before leaving tomorrow?", ["guitar", "laptop", "luggage", "fridge"], 2, "D3 12:00:00", ["D3 11:30:20"], "C"),
    ]
    choices = {"fig5": 1}
    for qid, cat, q, cands, gold, qt, targets, reply in rest:
        items.append({"qid": qid, "question": q, "candidates": cands, "gold": gold, "category": cat,
                      "query_time": qt, "target_times": targets})
        entries.append({"kind": "answer", "key": qid, "response": reply})
        choices[qid] = parsed_choice(reply)
    # q04 stops after the first step.
    entries.append({"kind": "grade", "key": "q04#1", "response": "complete"})

    correct = {i["qid"]: choices[i["qid"]] == i["gold"] for i in items}
    per_cat = {}
    for i in items:
        c = per_cat.setdefault(i["category"], [0, 0])
        c[0] += correct[i["qid"]]
        c[1] += 1
    expected = {
        "choices": choices,
        "correct": sum(correct.values()),
        "total": len(items),
        "overall_percent": round(100 * sum(correct.values()) / len(items), 1),
        "per_category_percent": {k: round(100 * a / b, 1) for k, (a, b) in sorted(per_cat.items())},
        "fig5": {"subtasks": 5, "tools": ["Visual", "EntityGraph", "Audio", "EntityGraph", "Visual"], "answer": "B"},
    }
    return items, {"strict": False, "entries": entries}, expected


def parsed_choice(reply):
    """Hand-written expectation for each scripted answer reply."""
    return {"A": 0, "The answer is (C) because the laptop is mentioned.": 2, "D": 3, "I would say C.": 2,
            "{\"answer\": \"A\"}": 0, "no idea at all": 0, "B": 1, "C": 2}[reply]


def write_jsonl(path, rows, header=None):
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for r in rows:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")


def main():
    rng = random.Random(SEED)
    corpus = ROOT / "corpus"
    qa = ROOT / "qa"
    corpus.mkdir(exist_ok=True)
    qa.mkdir(exist_ok=True)

    captions, utterances, docs = build_corpus(rng)
    entries, manifest = build_extraction(rng, docs, utterances)
    frames = build_frames(rng, docs)
    write_jsonl(corpus / "captions.jsonl", captions)
    write_jsonl(corpus / "utterances.jsonl", sorted(utterances, key=lambda u: (u["day"], u["start_t"], u["utt_id"])))
    write_jsonl(corpus / "frames.jsonl", frames, header={"dim": DIM})
    (corpus / "extraction_script.json").write_text(json.dumps({"strict": False, "entries": entries}, indent=1) + "\n")
    (corpus / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    items, script, expected = build_qa()
    (qa / "benchmark.json").write_text(json.dumps(items, indent=1) + "\n")
    (qa / "script.json").write_text(json.dumps(script, indent=1) + "\n")
    (qa / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    print(f"{len(captions)} captions, {len(utterances)} utterances, {len(frames)} frames, "
          f"{manifest['stats']['total_edges']} expected edges, {len(items)} questions")


if __name__ == "__main__":
    main()
