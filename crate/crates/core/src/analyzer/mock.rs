//! Deterministic offline provider.
//!
//! Rules:
//! - content analysis ranks non-stopword tokens by frequency (ties by first
//!   occurrence); the title is the top 1-3 in Title Case, the tags the top
//!   3-5, padded from a fixed list when the input is too short;
//! - relatedness is the Jaccard index of (tokens of title, content and
//!   context) plus lowercased tags; items under [`MOCK_MIN_SCORE`] are left
//!   out, tags are suggested from 0.5 and the context from 0.9;
//! - a group is named after the first two title tokens of its newest item;
//! - reorganization buckets items by their first tag, at most eight groups;
//! - chat echoes the reference hint of every MENTION entry.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Value};

use super::{ChatRequest, JsonRequest, Module, Provider, Result, MAX_SUMMARY_CHARS, MAX_TITLE_CHARS};
use crate::error::AnalyzerError;
use crate::retrieval::tokenize_seq;
use crate::tree::MAX_REORG_GROUPS;

/// Relatedness below this is treated as no relation.
pub const MOCK_MIN_SCORE: f64 = 0.1;
const SUGGEST_TAGS_AT: f64 = 0.5;
const SUGGEST_CONTEXT_AT: f64 = 0.9;
const PAD_TAGS: [&str; 3] = ["capture", "note", "context"];

pub const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "have", "i", "in", "is", "it",
    "its", "me", "my", "of", "on", "or", "our", "so", "that", "the", "their", "this", "to", "was", "we", "were", "what",
    "which", "with", "you", "your",
];

fn is_stopword(t: &str) -> bool {
    STOPWORDS.binary_search(&t).is_ok()
}

fn content_tokens(text: &str) -> Vec<String> {
    tokenize_seq(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Tokens ordered by descending frequency, ties broken by first occurrence.
fn ranked_tokens(text: &str) -> Vec<String> {
    let toks = content_tokens(text);
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, t) in toks.iter().enumerate() {
        stats.entry(t.as_str()).or_insert((0, i)).0 += 1;
    }
    let mut v: Vec<(&str, (usize, usize))> = stats.into_iter().collect();
    v.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    v.into_iter().map(|(t, _)| t.to_string()).collect()
}

fn title_case(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn str_field<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

fn tags_of(v: &Value) -> Vec<String> {
    v.get("tags")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default()
}

/// Feature set used for relatedness: content tokens plus lowercased tags.
pub(crate) fn relatedness_features(title: &str, content: &str, context: &str, tags: &[String]) -> BTreeSet<String> {
    let mut f: BTreeSet<String> = content_tokens(&format!("{title}\n{content}\n{context}")).into_iter().collect();
    f.extend(tags.iter().map(|t| t.trim().to_lowercase()).filter(|t| !t.is_empty()));
    f
}

fn item_features(v: &Value) -> BTreeSet<String> {
    relatedness_features(str_field(v, "title"), str_field(v, "content"), str_field(v, "context"), &tags_of(v))
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn truncate_chars(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

fn analyze(input: &Value) -> Value {
    let text = str_field(input, "text");
    let app = str_field(input, "appName");
    let window = str_field(input, "windowTitle");
    let url = str_field(input, "url");
    let basis = if text.trim().is_empty() {
        format!("{window} {app} {url}")
    } else {
        text.to_string()
    };
    let ranked = ranked_tokens(&basis);

    let mut title = String::new();
    for t in ranked.iter().take(3) {
        let next = if title.is_empty() {
            title_case(t)
        } else {
            format!("{title} {}", title_case(t))
        };
        if next.chars().count() > MAX_TITLE_CHARS {
            break;
        }
        title = next;
    }
    if title.is_empty() {
        title = ranked
            .first()
            .map(|t| truncate_chars(&title_case(t), MAX_TITLE_CHARS))
            .unwrap_or_else(|| "Untitled Capture".to_string());
    }

    let mut tags: Vec<String> = ranked.iter().take(5).cloned().collect();
    for pad in PAD_TAGS {
        if tags.len() >= 3 {
            break;
        }
        if !tags.iter().any(|t| t == pad) {
            tags.push(pad.to_string());
        }
    }

    let content = if text.trim().is_empty() {
        format!("Screenshot of {window} in {app}").trim().to_string()
    } else {
        truncate_chars(&text.split_whitespace().collect::<Vec<_>>().join(" "), 280)
    };
    let context = if app.is_empty() {
        format!("User captured content about {title}")
    } else if window.is_empty() {
        format!("User is in {app}")
    } else {
        format!("User is in {app} looking at {window}")
    };
    json!({ "title": title, "content": content, "context": context, "tags": tags })
}

fn relate(input: &Value, min_score: f64) -> Value {
    let new_item = &input["newItem"];
    let new_features = item_features(new_item);
    let new_tags = tags_of(new_item);
    let new_context = str_field(new_item, "context");
    let mut related = Vec::new();
    for e in input["existingItems"].as_array().into_iter().flatten() {
        let score = jaccard(&new_features, &item_features(e));
        if score < min_score {
            continue;
        }
        let mut j = json!({ "id": str_field(e, "id"), "score": score });
        if score >= SUGGEST_TAGS_AT {
            let have: BTreeSet<String> = tags_of(e).iter().map(|t| t.to_lowercase()).collect();
            let missing: Vec<&String> = new_tags.iter().filter(|t| !have.contains(&t.to_lowercase())).collect();
            if !missing.is_empty() {
                j["suggestTags"] = json!(missing);
            }
        }
        if score >= SUGGEST_CONTEXT_AT && !new_context.is_empty() && new_context != str_field(e, "context") {
            j["suggestContext"] = json!(new_context);
        }
        related.push(j);
    }
    json!({ "related": related })
}

/// Name from the newest item's first two title tokens.
pub(crate) fn mock_group_name(newest_title: &str) -> String {
    let toks = tokenize_seq(newest_title);
    match toks.as_slice() {
        [] => "Untitled Group".to_string(),
        [one] => format!("{} Notes", title_case(one)),
        [a, b, ..] => format!("{} {}", title_case(a), title_case(b)),
    }
}

fn name_group(input: &Value) -> Value {
    let items = input["items"].as_array().cloned().unwrap_or_default();
    let newest = items.last().map(|i| str_field(i, "title")).unwrap_or("");
    let mut tag_counts: BTreeMap<String, usize> = BTreeMap::new();
    for i in &items {
        for t in tags_of(i) {
            *tag_counts.entry(t.to_lowercase()).or_default() += 1;
        }
    }
    let mut tags: Vec<(String, usize)> = tag_counts.into_iter().collect();
    tags.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: Vec<String> = tags.into_iter().take(3).map(|(t, _)| t).collect();
    let summary = if top.is_empty() {
        format!("A group of {} items.", items.len())
    } else {
        format!("Items about {}.", top.join(", "))
    };
    json!({ "name": mock_group_name(newest), "summary": summary })
}

fn first_tag_key(v: &Value) -> String {
    tags_of(v)
        .into_iter()
        .map(|t| t.trim().to_lowercase())
        .find(|t| !t.is_empty())
        .unwrap_or_else(|| "other".to_string())
}

fn plan_reorg(input: &Value) -> Value {
    let mut order: Vec<String> = Vec::new();
    let mut buckets: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    let mut place = |key: String, id: &str, is_branch: bool| {
        if !buckets.contains_key(&key) {
            order.push(key.clone());
        }
        let b = buckets.entry(key).or_default();
        if is_branch { &mut b.1 } else { &mut b.0 }.push(id.to_string());
    };
    for m in input["memories"].as_array().into_iter().flatten() {
        place(first_tag_key(m), str_field(m, "id"), false);
    }
    for b in input["branches"].as_array().into_iter().flatten() {
        place(first_tag_key(b), str_field(b, "id"), true);
    }
    let mut groups: Vec<Value> = Vec::new();
    for (i, key) in order.iter().enumerate() {
        let (mems, brs) = &buckets[key];
        if i < MAX_REORG_GROUPS {
            groups.push(json!({ "name": title_case(key), "memoryIds": mems, "branchIds": brs }));
        } else {
            let last = groups.last_mut().expect("at least one group");
            last["memoryIds"].as_array_mut().expect("array").extend(mems.iter().map(|m| json!(m)));
            last["branchIds"].as_array_mut().expect("array").extend(brs.iter().map(|b| json!(b)));
        }
    }
    json!({ "groups": groups })
}

fn summarize(input: &Value) -> Value {
    let mut latest_any: Option<(u64, &str)> = None;
    let mut latest_snippet: Option<(u64, &str)> = None;
    let mut active_clusters = Vec::new();
    let clusters = input["clusters"].as_array().into_iter().flatten();
    let mut all_memories: Vec<&Value> = Vec::new();
    for c in clusters {
        let mems = c["memories"].as_array().map(|a| a.iter().collect::<Vec<_>>()).unwrap_or_default();
        if !mems.is_empty() {
            active_clusters.push(str_field(c, "name"));
        }
        all_memories.extend(mems);
    }
    all_memories.extend(input["unclustered"].as_array().into_iter().flatten());
    for m in all_memories {
        let seq = m["sequenceNumber"].as_u64().unwrap_or(0);
        let entry = (seq, str_field(m, "title"));
        if latest_any.is_none_or(|(s, _)| seq > s) {
            latest_any = Some(entry);
        }
        if str_field(m, "source") == "snippet" && latest_snippet.is_none_or(|(s, _)| seq > s) {
            latest_snippet = Some(entry);
        }
    }
    let focus = latest_snippet.or(latest_any).map(|(_, t)| t).unwrap_or("recent work");
    let mut summary = format!("Focused on {focus}");
    if !active_clusters.is_empty() {
        let names: Vec<&str> = active_clusters.into_iter().take(2).collect();
        summary.push_str(&format!(" across {}", names.join(" and ")));
    }
    summary.push('.');
    json!({ "summary": truncate_chars(&summary, MAX_SUMMARY_CHARS) })
}

struct BlockEntry {
    mention: bool,
    label: String,
    hint: String,
}

fn parse_block(block: &str) -> Vec<BlockEntry> {
    let mut out: Vec<BlockEntry> = Vec::new();
    for line in block.lines() {
        if let Some(rest) = line.strip_prefix("- [") {
            let marker = rest.split(']').next().unwrap_or("");
            out.push(BlockEntry {
                mention: marker.ends_with("|MENTION"),
                label: String::new(),
                hint: String::new(),
            });
            continue;
        }
        let Some(cur) = out.last_mut() else { continue };
        let body = line.trim_start();
        if let Some(v) = body.strip_prefix("title: ").or_else(|| body.strip_prefix("name: ")) {
            cur.label = v.to_string();
        } else if let Some(v) = body.strip_prefix("(reference as: ") {
            cur.hint = v.strip_suffix(')').unwrap_or(v).to_string();
        }
    }
    out
}

fn chat_reply(req: &ChatRequest) -> String {
    let entries = parse_block(&req.context_block);
    let question: String = req.user_message.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut reply = format!("Regarding \"{}\":", truncate_chars(&question, 80));
    let hints: Vec<&str> = entries.iter().filter(|e| e.mention && !e.hint.is_empty()).map(|e| e.hint.as_str()).collect();
    let others: Vec<&str> = entries.iter().filter(|e| !e.mention && !e.label.is_empty()).map(|e| e.label.as_str()).collect();
    if hints.is_empty() && others.is_empty() {
        reply.push_str(" I have no stored context for this yet.");
    }
    if !hints.is_empty() {
        reply.push_str(&format!(" Based on {}.", hints.join(", ")));
    }
    if !others.is_empty() {
        reply.push_str(&format!(" Related notes: {}.", others.join("; ")));
    }
    reply
}

/// Offline provider following the rules in the module docs. Counts calls
/// per module and can be told to fail a module.
pub struct MockProvider {
    calls: [AtomicUsize; 6],
    min_score: f64,
    failures: Mutex<BTreeMap<Module, AnalyzerError>>,
}

impl Default for MockProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl MockProvider {
    pub fn new() -> Self {
        Self {
            calls: Default::default(),
            min_score: MOCK_MIN_SCORE,
            failures: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_min_score(mut self, min_score: f64) -> Self {
        self.min_score = min_score;
        self
    }

    fn slot(module: Module) -> usize {
        Module::ALL.iter().position(|m| *m == module).expect("known module")
    }

    pub fn calls(&self, module: Module) -> usize {
        self.calls[Self::slot(module)].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }

    /// Makes every later call to `module` fail with `error`.
    pub fn fail(&self, module: Module, error: AnalyzerError) {
        self.failures.lock().expect("mock lock").insert(module, error);
    }

    pub fn clear_failures(&self) {
        self.failures.lock().expect("mock lock").clear();
    }

    fn enter(&self, module: Module) -> Result<()> {
        self.calls[Self::slot(module)].fetch_add(1, Ordering::SeqCst);
        match self.failures.lock().expect("mock lock").get(&module) {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete_json(&self, request: &JsonRequest<'_>) -> Result<Value> {
        self.enter(request.module)?;
        let input = &request.input;
        Ok(match request.module {
            Module::ContentAnalysis => analyze(input),
            Module::PlacementEvolution => relate(input, self.min_score),
            Module::GroupNaming => name_group(input),
            Module::Reorganization => plan_reorg(input),
            Module::ContextUnderstanding => summarize(input),
            Module::Chat => return Err(AnalyzerError::Argument("chat is not a structured module".into())),
        })
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        self.enter(Module::Chat)?;
        Ok(chat_reply(request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_are_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn analysis_of_short_text() {
        let v = analyze(&json!({ "text": "budget for Japan trip" }));
        assert_eq!(v["title"], "Budget Japan Trip");
        assert_eq!(v["tags"], json!(["budget", "japan", "trip"]));
    }

    #[test]
    fn frequency_beats_position() {
        let v = analyze(&json!({ "text": "alpha beta beta gamma gamma gamma" }));
        assert_eq!(v["title"], "Gamma Beta Alpha");
    }

    #[test]
    fn short_input_is_padded_to_three_tags() {
        let v = analyze(&json!({ "text": "hotels" }));
        assert_eq!(v["tags"], json!(["hotels", "capture", "note"]));
        let v = analyze(&json!({ "text": "capture" }));
        assert_eq!(v["tags"], json!(["capture", "note", "context"]));
    }

    #[test]
    fn long_tokens_are_cut_to_title_limit() {
        let v = analyze(&json!({ "text": "supercalifragilisticexpialidocious" }));
        assert_eq!(v["title"].as_str().unwrap().chars().count(), MAX_TITLE_CHARS);
    }

    #[test]
    fn group_name_rule() {
        assert_eq!(mock_group_name("tokyo hotel search"), "Tokyo Hotel");
        assert_eq!(mock_group_name("Budget"), "Budget Notes");
        assert_eq!(mock_group_name("!!"), "Untitled Group");
    }

    #[test]
    fn reorg_caps_at_eight_groups() {
        let mems: Vec<Value> = (0..10).map(|i| json!({ "id": format!("m{i}"), "tags": [format!("t{i}")] })).collect();
        let v = plan_reorg(&json!({ "memories": mems, "branches": [] }));
        let groups = v["groups"].as_array().unwrap();
        assert_eq!(groups.len(), 8);
        assert_eq!(groups[7]["memoryIds"], json!(["m7", "m8", "m9"]));
    }

    #[test]
    fn chat_echoes_mentions_only_as_tags() {
        let block = "Memory Context:\n- [SNIPPET|MENTION] id=m1\n  title: Trip Budget\n  (reference as: (((Trip Budget(m1)))))\n- [OBSERVATION] id=m2\n  title: Hotels\n  (reference as: (((Hotels(m2)))))\n";
        let req = ChatRequest {
            system_prompt: String::new(),
            history: vec![],
            context_block: block.into(),
            user_message: "which hotel?".into(),
        };
        let r = chat_reply(&req);
        assert!(r.contains("(((Trip Budget(m1))))"));
        assert!(!r.contains("(((Hotels(m2))))"));
        assert!(r.contains("Hotels"));
    }
}
