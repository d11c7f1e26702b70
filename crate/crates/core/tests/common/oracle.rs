//! Independent reference implementations used by the oracle tests.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use contexty_core::retrieval::{cluster_reference, memory_reference, parse_references, ReferenceKind};
use contexty_core::tree::{MemoryTree, PlacementConfig};
use contexty_core::{BranchId, GroupName, MemoryId, MemoryItem, Provenance, RelevanceJudgment, Source, Timestamp};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

pub const NOW: Timestamp = Timestamp(1_700_000_000_000);

pub const DAY: i64 = 86_400_000;
pub const VOCAB: &[&str] = &[
    "tokyo", "Hotel", "budget", "RUST", "cache", "flight", "kyoto", "ramen", "borrow", "lifetime", "é", "東京", "x7", "2024", "Überblick", "data",
];
pub const SEPS: &[&str] = &[" ", ", ", "-", "(", ")", "!", "\n", "...", "  ", "/", "_"];

pub fn words(rng: &mut ChaCha8Rng, count: std::ops::Range<usize>) -> String {
    let n = if count.is_empty() { count.start } else { rng.gen_range(count) };
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(SEPS[rng.gen_range(0..SEPS.len())]);
        }
        s.push_str(VOCAB[rng.gen_range(0..VOCAB.len())]);
    }
    s
}

pub fn oracle_tokens(text: &str) -> BTreeSet<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"[\p{Alphabetic}\p{N}]+").unwrap());
    re.find_iter(text).map(|m| m.as_str().to_lowercase()).collect()
}

pub fn random_memory(rng: &mut ChaCha8Rng, i: usize, now: Timestamp) -> MemoryItem {
    let source = [Source::Snippet, Source::Observation, Source::Chat][rng.gen_range(0..3)];
    let age_ms = match rng.gen_range(0..6) {
        0 => 0,
        1 => 30 * DAY,
        2 => 30 * DAY + rng.gen_range(1..DAY * 20),
        3 => -rng.gen_range(1..DAY),
        _ => rng.gen_range(0..30 * DAY),
    };
    let mut m = MemoryItem::new(format!("mem_{i:06}"), source, words(rng, 0..4), Timestamp(now.0 - age_ms));
    m.summary = words(rng, 0..6);
    m.context_sentence = words(rng, 0..4);
    m.tags = (0..rng.gen_range(0..3)).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())].to_string()).collect();
    if rng.gen_bool(0.3) {
        m.raw_text = Some(words(rng, 5..6));
    }
    if source == Source::Snippet && rng.gen_bool(0.4) {
        m.user_memo = Some(words(rng, 2..3));
    }
    m.provenance = Provenance::new(words(rng, 1..2), words(rng, 2..3), rng.gen_bool(0.3).then_some("https://tokyo.example/rust"));
    m
}

/// Direct evaluation of overlap + tag boost + recency + source boost.
pub fn oracle_score(m: &MemoryItem, query: &str, now: Timestamp, source_boost: f64) -> f64 {
    let q = oracle_tokens(query);
    let mut text = vec![m.title.clone(), m.summary.clone(), m.context_sentence.clone()];
    text.extend(m.user_memo.clone());
    text.extend(m.raw_text.clone());
    text.extend(m.tags.clone());
    text.push(m.provenance.app_name.clone());
    text.push(m.provenance.window_title.clone());
    text.extend(m.provenance.url.clone());
    let mt = oracle_tokens(&text.join(" "));
    let overlap = q.iter().filter(|t| mt.contains(*t)).count() as f64 / q.len() as f64;
    let ql = query.to_lowercase();
    let tag = if m.tags.iter().any(|t| !t.trim().is_empty() && ql.contains(&t.trim().to_lowercase())) {
        0.2
    } else {
        0.0
    };
    let age_days = (now.0 - m.captured_at.0).max(0) as f64 / DAY as f64;
    let recency = if age_days >= 30.0 { 0.0 } else { 0.15 * (30.0 - age_days) / 30.0 };
    let boost = if m.source == Source::Snippet { source_boost } else { 0.0 };
    overlap + tag + recency + boost
}

pub fn namer(_: &MemoryItem) -> GroupName {
    GroupName::new("fresh", "")
}

/// Builds a tree with `branches` branches and some unassigned memories.
/// Returns it with the branches in creation order.
pub fn build(rng: &mut ChaCha8Rng, branches: usize) -> (MemoryTree, Vec<BranchId>) {
    let mut tree = MemoryTree::new("p");
    let mut order = Vec::new();
    let mut n = 0;
    for _ in 0..branches {
        let id = MemoryId::from(format!("mem_{n:06}"));
        n += 1;
        let d = tree
            .insert_memory(MemoryItem::new(id.clone(), Source::Observation, "x", NOW), &[], &PlacementConfig::default(), NOW, namer)
            .unwrap();
        let b = d.created_branch.unwrap();
        order.push(b.clone());
        for _ in 0..rng.gen_range(0..3) {
            let extra = MemoryId::from(format!("mem_{n:06}"));
            n += 1;
            let j = [RelevanceJudgment::new(id.clone(), 1.0)];
            tree.insert_memory(MemoryItem::new(extra, Source::Snippet, "y", NOW), &j, &PlacementConfig::default(), NOW, namer)
                .unwrap();
        }
    }
    let ids: Vec<MemoryId> = tree.memories().map(|m| m.id.clone()).collect();
    for id in ids {
        if rng.gen_bool(0.1) {
            tree.move_memory(&id, None).unwrap();
        }
    }
    (tree, order)
}

/// argmax of summed scores; ties by highest single score, then newest branch.
pub fn placement_oracle(tree: &MemoryTree, order: &[BranchId], judgments: &[RelevanceJudgment]) -> Option<BranchId> {
    let mut sum: BTreeMap<&BranchId, f64> = BTreeMap::new();
    let mut peak: BTreeMap<&BranchId, f64> = BTreeMap::new();
    for j in judgments {
        let Some(b) = order.iter().find(|b| tree.members(b).iter().any(|m| m.id == j.related_id)) else {
            continue;
        };
        *sum.entry(b).or_default() += j.score;
        let p = peak.entry(b).or_default();
        *p = p.max(j.score);
    }
    let mut best: Option<(&BranchId, f64, f64, usize)> = None;
    for (b, s) in &sum {
        let rank = order.iter().position(|o| o == *b).unwrap();
        let cand = (*b, *s, peak[b], rank);
        best = match best {
            None => Some(cand),
            Some(cur) => {
                let better = (cand.1, cand.2, cand.3) > (cur.1, cur.2, cur.3);
                Some(if better { cand } else { cur })
            }
        };
    }
    best.filter(|b| b.1 > 0.0).map(|b| b.0.clone())
}

pub const LABEL_CHARS: &[char] = &['a', 'Z', ' ', '(', ')', '\n', 'é', '東', ':', '-', '[', '9', '\t', '.'];

pub fn label(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..14);
    (0..n).map(|_| LABEL_CHARS[rng.gen_range(0..LABEL_CHARS.len())]).collect()
}

pub fn hints(rendered: &str) -> Vec<&str> {
    rendered
        .lines()
        .filter_map(|l| l.trim().strip_prefix("(reference as: "))
        .map(|h| h.strip_suffix(')').expect("hint closes"))
        .collect()
}

pub type Expected = (ReferenceKind, String, String);

pub fn valid_tag(rng: &mut ChaCha8Rng, n: usize) -> (String, Expected) {
    let raw = label(rng);
    let id = format!("{}_{n:04}", ["mem", "br", "x.y", "a:b"][rng.gen_range(0..4)]);
    let text = if rng.gen_bool(0.3) { cluster_reference(&raw, &id) } else { memory_reference(&raw, &id) };
    let parsed = parse_references(&text);
    assert_eq!(parsed.len(), 1, "{text:?}");
    let p = &parsed[0];
    (text, (p.kind, p.label.clone(), p.ref_id.clone()))
}

pub fn malformed(rng: &mut ChaCha8Rng, n: usize) -> String {
    match rng.gen_range(0..7) {
        0 => format!("(((Broken Label(mem_{n}"),
        1 => format!("(((bad id(mem {n}))))"),
        2 => format!("((two parens(mem_{n}))))"),
        3 => "(((no id()))))".to_string(),
        4 => format!("(((a)b(mem_{n}))))"),
        5 => format!("(((cluster: (br_{n}))))"),
        _ => format!("(((short close(mem_{n})))"),
    }
}

/// Noise that can never contain an opener of its own.
pub fn noise(rng: &mut ChaCha8Rng) -> String {
    let alphabet = ['a', 'b', ' ', ')', '(', 'x', '_', '1', 'é'];
    let mut s = String::new();
    let mut run = 0;
    for _ in 0..rng.gen_range(0..20) {
        let c = alphabet[rng.gen_range(0..alphabet.len())];
        run = if c == '(' { run + 1 } else { 0 };
        if run < 3 {
            s.push(c);
        }
    }
    s
}

