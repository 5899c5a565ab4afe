//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails outside the documented gaps (see KNOWN_GAPS).

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{Duration as Minutes, NaiveDate};
use clap::Parser;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use qualcode_cli::{execute, Cli};
use qualcode_core::codebook::{Approach, Codebook};
use qualcode_core::corpus::{Dataset, DatasetMetadata, Message, MessageId, SpeakerRole};
use qualcode_core::evaluation::{concept_group, final_report, AnnotationStore};
use qualcode_core::fixtures;
use qualcode_core::gateway::template::{
    chunk_template, item_template, topic_template, verb_template, CODING_NOTES, CONVERSATION, DOCUMENTS, KEYWORDS,
    MESSAGES_LENGTH, RESEARCH_QUESTION,
};
use qualcode_core::gateway::{render_prompt, Bindings, ChatRequest, Gateway, MockBackend, MockPayload, Sampling};
use qualcode_core::grammar::{parse_chunk_response, parse_item_response, parse_topic_response, ParseError};
use qualcode_core::pipelines::{base_bindings, item_bindings, presented_messages, render_conversation, CarryState};
use qualcode_core::runner::{aggregate, codebook_path, responses_path, Responses, ResponsesFile};
use qualcode_core::segmenter::{attach_context, gap_boundaries, segment, SegmentationConfig, SegmentationMethod};
use qualcode_core::topic::{cluster, embed, run_topic, Embedder, TopicConfig};

type Outcome = Result<String, String>;

/// Criteria that cannot pass as stated, with the exact divergence the check
/// must report. Anything else failing, or these diverging differently, fails
/// the run.
const KNOWN_GAPS: &[(u32, &str)] = &[(
    3,
    "item: extra [\"feedback solicitation\"]; verb: extra [\"request specific feedback\", \"solicit feedback\"]",
)];

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 8] = [
        (1, "fixture code counts", Duration::from_secs(1), fixture_counts),
        (2, "fixture flag counts", Duration::from_secs(60), fixture_flags),
        (3, "concept grouping for \"feedback\"", Duration::from_secs(1), feedback_group),
        (4, "oversize cluster flag", Duration::from_secs(60), oversize_cluster),
        (5, "segmentation properties", Duration::from_secs(10), segmentation),
        (6, "response grammar round-trips", Duration::from_secs(30), grammar_round_trips),
        (7, "mock run determinism", Duration::from_secs(60), determinism),
        (8, "prompt fidelity", Duration::from_secs(1), prompt_fidelity),
    ];
    let mut ok = true;
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:?}, limit {limit:?}")),
            other => other,
        };
        match &outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{:.0?}]", took),
            Err(detail) => {
                let known = KNOWN_GAPS.iter().find(|(k, _)| *k == n);
                match known {
                    Some((_, expected)) if detail == expected => {
                        println!("FAIL criterion {n} ({name}): {detail} [{:.0?}] (known gap, see ledger)", took)
                    }
                    _ => {
                        ok = false;
                        println!("FAIL criterion {n} ({name}): {detail} [{:.0?}]", took)
                    }
                }
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn cli(args: &[&str]) -> Result<String, String> {
    let parsed = Cli::try_parse_from(std::iter::once("qualcode").chain(args.iter().copied())).map_err(err)?;
    execute(parsed).map_err(|e| format!("{e:#}"))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

// 1

fn fixture_counts() -> Outcome {
    let ds = fixtures::dataset().map_err(err)?;
    let counts: Vec<usize> = fixtures::codebooks(&ds).map_err(err)?.iter().map(Codebook::len).collect();
    ensure(ds.len() == 127, || format!("dataset has {} messages", ds.len()))?;
    ensure(counts == [23, 48, 240, 271], || format!("counts {counts:?}"))?;
    Ok("23 / 48 / 240 / 271".into())
}

// 2

const FLAG_TABLE: [(Approach, usize, usize, usize); 4] = [
    (Approach::Topic, 23, 2, 2),
    (Approach::Chunk, 48, 1, 3),
    (Approach::Item, 240, 2, 5),
    (Approach::Verb, 271, 0, 7),
];

fn fixture_flags() -> Outcome {
    let ds = fixtures::dataset().map_err(err)?;
    let cbs = fixtures::codebooks(&ds).map_err(err)?;
    let mut store = AnnotationStore::new().with_codebooks(cbs.iter());
    fixtures::load_annotations(&mut store).map_err(err)?;
    let refs: Vec<&Codebook> = cbs.iter().collect();
    let report = final_report(&refs, &store).map_err(err)?;
    for (approach, codes, g, ob) in FLAG_TABLE {
        let row = report.row(approach).ok_or_else(|| format!("no row for {approach}"))?;
        ensure((row.codes, row.groundedness, row.overly_broad) == (codes, g, ob), || {
            format!("{approach}: got {}", row.triple())
        })?;
    }
    let verb = report.row(Approach::Verb).unwrap();
    let pct = verb.percent(qualcode_core::evaluation::Flag::OverlyBroad);
    ensure(pct == "2.58%", || format!("verb overly broad renders as {pct}"))?;

    // same numbers through the command line
    let dir = tempfile::tempdir().map_err(err)?;
    let wd = path(dir.path());
    cli(&["fixtures", "load", wd])?;
    let json: serde_json::Value =
        serde_json::from_str(&cli(&["--workdir", wd, "report", "--final", "--format", "json"])?).map_err(err)?;
    let rows = json["rows"].as_array().ok_or("report has no rows")?;
    for ((approach, codes, g, ob), row) in FLAG_TABLE.iter().zip(rows) {
        let got = (row["codes"].as_u64(), row["groundedness"].as_u64(), row["overly_broad"].as_u64());
        ensure(got == (Some(*codes as u64), Some(*g as u64), Some(*ob as u64)), || {
            format!("cli {approach}: got {got:?}")
        })?;
    }
    let table = cli(&["--workdir", wd, "report", "--final"])?;
    ensure(table.contains("2.58%") && !table.contains("DRAFT"), || "cli table lacks final 2.58%".into())?;
    Ok("G 2/1/2/0, OB 2/3/5/7, verb OB 2.58% (library and cli)".into())
}

// 3

fn feedback_group() -> Outcome {
    let expected: [(&str, &[&str]); 5] = [
        ("topic", &["iterative development based on user feedback", "user feedback and communication"]),
        (
            "chunk",
            &[
                "community feedback",
                "community feedback loop",
                "encouragement of user feedback",
                "user feedback",
                "user feedback and suggestions",
            ],
        ),
        (
            "item",
            &[
                "comparative feedback",
                "positive feedback",
                "user feedback",
                "user feedback request",
                "user feedback response",
                "user feedback solicitation",
            ],
        ),
        (
            "verb",
            &[
                "acknowledge feedback",
                "address feedback process",
                "consider user feedback",
                "encourage community feedback",
                "invite feedback",
                "plan to gather feedback",
                "provide feedback",
                "provide positive feedback",
                "provide specific feedback",
                "solicit user feedback",
            ],
        ),
        (
            "human",
            &[
                "appreciation of feedback",
                "community feedback",
                "eliciting feedback",
                "encouraging feedback",
                "invite for feedback",
                "justified feedback",
                "positive feedback",
                "prompting user feedback",
                "reaction to feedback",
                "response to feedback",
                "soliciting feedback",
                "taking feedback",
                "user experience feedback",
            ],
        ),
    ];
    let ds = fixtures::dataset().map_err(err)?;
    let mut sources: Vec<(String, Vec<String>)> = fixtures::codebooks(&ds)
        .map_err(err)?
        .iter()
        .map(|cb| (cb.approach.as_str().to_string(), cb.codes.iter().map(|c| c.display_label.clone()).collect()))
        .collect();
    sources.push(("human".into(), fixtures::human_labels().map_err(err)?));
    let group = concept_group("feedback", &sources);

    let mut problems = Vec::new();
    let mut sizes = Vec::new();
    for (source, want) in expected {
        let got: BTreeSet<&str> = group.get(source).unwrap_or_default().iter().map(String::as_str).collect();
        let want: BTreeSet<&str> = want.iter().copied().collect();
        sizes.push(got.len().to_string());
        let extra: Vec<&&str> = got.difference(&want).collect();
        let missing: Vec<&&str> = want.difference(&got).collect();
        let mut parts = Vec::new();
        if !extra.is_empty() {
            parts.push(format!("extra {extra:?}"));
        }
        if !missing.is_empty() {
            parts.push(format!("missing {missing:?}"));
        }
        if !parts.is_empty() {
            problems.push(format!("{source}: {}", parts.join(", ")));
        }
    }
    if problems.is_empty() {
        Ok(format!("sizes {}", sizes.join(" / ")))
    } else {
        Err(problems.join("; "))
    }
}

// 4

fn corpus(contents: Vec<String>) -> Result<Dataset, String> {
    let mut t = NaiveDate::from_ymd_opt(2017, 10, 20).unwrap().and_hms_opt(9, 0, 0).unwrap();
    let messages = contents
        .into_iter()
        .enumerate()
        .map(|(i, content)| {
            t += Minutes::minutes(2);
            Message {
                id: MessageId::new(1, i as u32 + 1),
                speaker_role: if i % 4 == 0 { SpeakerRole::Designer } else { SpeakerRole::User },
                speaker_alias: None,
                timestamp: t,
                content,
                media_markers: vec![],
            }
        })
        .collect();
    let meta = DatasetMetadata { research_question: "How did the community emerge?".into(), ..Default::default() };
    Dataset::new(messages, meta).map_err(err)
}

/// `theme` near-duplicates about one topic, interleaved with unrelated
/// messages that share no token with anything else.
fn themed_corpus(theme: usize, total: usize) -> Result<Dataset, String> {
    let mut contents: Vec<String> = (0..total).map(|i| format!("unrelated{i} remark{i} aside{i}")).collect();
    let step = total / theme;
    for k in 0..theme {
        contents[k * step] = format!("please prioritize the multimeter feature in the next update variant{k}");
    }
    corpus(contents)
}

fn oversize_cluster() -> Outcome {
    let mut found = Vec::new();
    for (theme, should_flag) in [(34usize, true), (31, false)] {
        let ds = themed_corpus(theme, 127)?;
        let messages: Vec<&Message> = ds.messages().iter().collect();
        let matrix = embed(&messages, &Embedder::Tfidf).map_err(err)?;
        let clusters = cluster(&matrix, 0.9, 0.25).map_err(err)?;
        let largest = clusters.iter().max_by_key(|c| c.member_ids.len()).ok_or("no clusters")?;
        ensure(largest.member_ids.len() == theme, || format!("largest cluster has {} members", largest.member_ids.len()))?;
        let flagged: Vec<usize> = clusters.iter().filter(|c| c.oversize_flag).map(|c| c.member_ids.len()).collect();
        let want: Vec<usize> = if should_flag { vec![theme] } else { vec![] };
        ensure(flagged == want, || format!("{theme}-member corpus flags {flagged:?}"))?;

        // the flag survives a full labeled run
        let gw = Gateway::new(Arc::new(MockBackend::new(7)), Sampling::default());
        let run = run_topic(&ds, &Embedder::Tfidf, &TopicConfig::default(), &gw).map_err(err)?;
        let run_flags: Vec<usize> = run.clusters.iter().filter(|c| c.oversize_flag).map(|c| c.member_ids.len()).collect();
        ensure(run_flags == want, || format!("topic run flags {run_flags:?}"))?;
        found.push(format!("{theme}/127 {}", if should_flag { "flagged" } else { "not flagged" }));
    }
    Ok(found.join(", "))
}

// 5

fn random_dataset(gaps: &[i64]) -> Dataset {
    let base = NaiveDate::from_ymd_opt(2017, 10, 20).unwrap().and_hms_opt(9, 0, 0).unwrap();
    let mut t = base;
    let messages = gaps
        .iter()
        .enumerate()
        .map(|(i, gap)| {
            t += Minutes::minutes(*gap);
            Message {
                id: MessageId::new(1, i as u32),
                speaker_role: SpeakerRole::User,
                speaker_alias: None,
                timestamp: t,
                content: format!("message {i}"),
                media_markers: vec![],
            }
        })
        .collect();
    Dataset::new(messages, DatasetMetadata { research_question: "rq".into(), ..Default::default() }).unwrap()
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn segmentation() -> Outcome {
    // (a) the eight-day silence between 2-57 and 2-58. The gap rule is
    // checked on its own (min_chunk 1, and the raw cut list); with the default
    // min_chunk, backward runt merging can swallow a one-message chunk when
    // min_gap is small, so that combination is checked from the default
    // min_gap upward.
    let ds = fixtures::dataset().map_err(err)?;
    let (before, after) = (MessageId::new(2, 57), MessageId::new(2, 58));
    let after_pos = ds.position(after).ok_or("2-58 missing")?;
    let minutes: Vec<f64> = ds.messages().iter().map(|m| m.timestamp.and_utc().timestamp() as f64 / 60.0).collect();
    let eight_days = 8 * 24 * 60;
    let mut gaps: Vec<i64> = (0..=eight_days / 30).map(|k| (k * 30).max(1)).collect();
    gaps.extend([1, 2, 59, 61, 179, 181, eight_days - 1, eight_days]);
    let default_min_chunk = SegmentationConfig::default().min_chunk_size;
    let default_min_gap = SegmentationConfig::default().min_gap_minutes;
    let mut checked = 0;
    for &min_gap in &gaps {
        ensure(gap_boundaries(&minutes, min_gap as f64).contains(&after_pos), || {
            format!("gap rule has no cut before 2-58 at min_gap {min_gap}")
        })?;
        let min_chunks: &[usize] =
            if min_gap >= default_min_gap { &[1, default_min_chunk] } else { &[1] };
        for &min_chunk in min_chunks {
            let config = SegmentationConfig {
                method: SegmentationMethod::GapThreshold,
                min_gap_minutes: min_gap,
                min_chunk_size: min_chunk,
                ..SegmentationConfig::default()
            };
            let chunks = segment(&ds, &config).map_err(err)?;
            let split = chunks
                .windows(2)
                .any(|w| w[0].core_ids.last() == Some(&before) && w[1].core_ids.first() == Some(&after));
            ensure(split, || format!("no boundary at min_gap {min_gap} min, min_chunk {min_chunk}"))?;
            checked += 1;
        }
    }

    // (b) partition over random datasets, both methods
    let strategy = (
        prop::collection::vec(prop_oneof![3 => 1i64..30, 1 => 30i64..3000], 1..100),
        1i64..600,
        5i64..240,
        1usize..6,
        any::<bool>(),
    );
    runner(1000)
        .run(&strategy, |(gaps, min_gap, bandwidth, min_chunk, activity)| {
            let ds = random_dataset(&gaps);
            let config = SegmentationConfig {
                method: if activity { SegmentationMethod::SmoothedActivity } else { SegmentationMethod::GapThreshold },
                min_gap_minutes: min_gap,
                kernel_bandwidth_minutes: bandwidth,
                min_chunk_size: min_chunk,
            };
            let chunks = segment(&ds, &config).unwrap();
            let flat: Vec<MessageId> = chunks.iter().flat_map(|c| c.core_ids.clone()).collect();
            let all: Vec<MessageId> = ds.messages().iter().map(|m| m.id).collect();
            prop_assert_eq!(flat, all);
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.index, i);
                prop_assert!(!c.core_ids.is_empty());
            }
            Ok(())
        })
        .map_err(|e| format!("partition: {e}"))?;

    // (c) three context messages per side, fewer only where the neighbour is short
    let context_ok = |ds: &Dataset, config: &SegmentationConfig| -> Result<(), String> {
        let chunks = attach_context(&segment(ds, config).map_err(err)?, 3);
        for (i, c) in chunks.iter().enumerate() {
            let lead = if i == 0 { 0 } else { chunks[i - 1].core_ids.len().min(3) };
            let trail = chunks.get(i + 1).map_or(0, |n| n.core_ids.len().min(3));
            ensure(c.leading_context_ids.len() == lead && c.trailing_context_ids.len() == trail, || {
                format!("chunk {i}: context {}+{}, want {lead}+{trail}", c.leading_context_ids.len(), c.trailing_context_ids.len())
            })?;
            if lead > 0 {
                let prev = &chunks[i - 1].core_ids;
                ensure(c.leading_context_ids[..] == prev[prev.len() - lead..], || format!("chunk {i}: wrong leading ids"))?;
            }
            if trail > 0 {
                let next = &chunks[i + 1].core_ids;
                ensure(c.trailing_context_ids[..] == next[..trail], || format!("chunk {i}: wrong trailing ids"))?;
            }
        }
        Ok(())
    };
    context_ok(&ds, &SegmentationConfig::default())?;
    runner(1000)
        .run(&(prop::collection::vec(prop_oneof![3 => 1i64..30, 1 => 30i64..3000], 1..100), 1usize..6), |(gaps, min_chunk)| {
            let config = SegmentationConfig { min_chunk_size: min_chunk, ..SegmentationConfig::default() };
            context_ok(&random_dataset(&gaps), &config).map_err(TestCaseError::fail)
        })
        .map_err(|e| format!("context: {e}"))?;
    Ok(format!("boundary holds for {checked} settings up to 8 days; 1000 partitions; context min(3, available)"))
}

// 6

fn grammar_round_trips() -> Outcome {
    let ds = fixtures::dataset().map_err(err)?;
    let chunks = attach_context(&segment(&ds, &SegmentationConfig::default()).map_err(err)?, 3);
    let sampling = Sampling::default();
    let base = base_bindings(&ds).map_err(err)?;
    let (topic_t, chunk_t) = (topic_template(), chunk_template());
    let item_templates = [item_template(), verb_template()];
    let (mut topics, mut chunk_entries, mut items, mut rejections) = (0, 0, 0, 0);
    for seed in 0..1000u64 {
        let mock = MockBackend::new(seed);
        let chunk = &chunks[seed as usize % chunks.len()];
        let presented = presented_messages(chunk, &ds).map_err(err)?;

        let docs: Vec<String> = presented.iter().map(|(m, _)| format!("\n- \"{}\"", m.content)).collect();
        let topic = base.clone().with(DOCUMENTS, docs.concat()).with(KEYWORDS, "update, feedback, version");
        let prompt = render_prompt(&topic_t, &topic).map_err(err)?.0;
        match mock.payload(&ChatRequest::from_prompt(&prompt, &sampling)) {
            MockPayload::Topic(p) => {
                let back = parse_topic_response(&MockPayload::Topic(p.clone()).render()).map_err(err)?;
                ensure(back == p, || format!("topic seed {seed}: {back:?} != {p:?}"))?;
                topics += 1;
            }
            other => return Err(format!("topic prompt produced {other:?}")),
        }

        let conv = base.clone().with(CONVERSATION, render_conversation(&presented, false));
        let prompt = render_prompt(&chunk_t, &conv).map_err(err)?.0;
        match mock.payload(&ChatRequest::from_prompt(&prompt, &sampling)) {
            MockPayload::Chunk(p) => {
                let (back, warnings) = parse_chunk_response(&MockPayload::Chunk(p.clone()).render()).map_err(err)?;
                ensure(back == p && warnings.is_empty(), || format!("chunk seed {seed}: {warnings:?}"))?;
                chunk_entries += 1;
            }
            other => return Err(format!("chunk prompt produced {other:?}")),
        }

        let bindings = item_bindings(chunk, &ds, &CarryState::default()).map_err(err)?;
        for template in &item_templates {
            let prompt = render_prompt(template, &bindings).map_err(err)?.0;
            let payload = mock.payload(&ChatRequest::from_prompt(&prompt, &sampling));
            let MockPayload::Item { response, .. } = &payload else {
                return Err(format!("item prompt produced {payload:?}"));
            };
            let n = response.tags_per_message.len();
            ensure(n == presented.len(), || format!("seed {seed}: {n} tag lines for {} messages", presented.len()))?;
            let raw = payload.render();
            let back = parse_item_response(&raw, n).map_err(err)?;
            ensure(&back == response, || format!("item seed {seed}: {back:?} != {response:?}"))?;
            items += 1;
            for expected in [n + 1, n.saturating_sub(1)].into_iter().filter(|e| *e > 0) {
                match parse_item_response(&raw, expected) {
                    Err(ParseError::TagCountMismatch { got, expected: e }) if got == n && e == expected => rejections += 1,
                    other => return Err(format!("seed {seed}: expected {expected} tags, got {other:?}")),
                }
            }
        }
    }
    Ok(format!(
        "{topics} topic, {chunk_entries} chunk, {items} item/verb round-trips; {rejections} tag-count mismatches rejected"
    ))
}

// 7

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let wd = path(dir.path());
    cli(&["fixtures", "load", wd, "--no-annotations"])?;
    let runs = [dir.path().join("run-a"), dir.path().join("run-b")];
    for out in &runs {
        cli(&["--workdir", wd, "run", "--approach", "all", "--backend", "mock", "--seed", "7", "--out", path(out)])?;
    }
    let ds = fixtures::dataset().map_err(err)?;
    let mut counts = Vec::new();
    for approach in Approach::ALL {
        let a = std::fs::read(runs[0].join(codebook_path(approach))).map_err(err)?;
        let b = std::fs::read(runs[1].join(codebook_path(approach))).map_err(err)?;
        ensure(a == b, || format!("{approach} codebooks differ between runs"))?;
        let written = Codebook::from_json(std::str::from_utf8(&a).map_err(err)?).map_err(err)?;
        counts.push(format!("{approach} {}", written.len()));

        // merge must not care about the order chunk results come back in
        let responses = ResponsesFile::load(&runs[0].join(responses_path(approach))).map_err(err)?;
        for shuffle_seed in 0..5u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed);
            let mut shuffled = responses.clone();
            match &mut shuffled.responses {
                Responses::Chunk { results } => results.shuffle(&mut rng),
                Responses::Item { results } => results.shuffle(&mut rng),
                Responses::Topic(run) => run.instances.shuffle(&mut rng),
            }
            ensure(aggregate(&shuffled, &ds) == written, || format!("{approach}: shuffled merge differs"))?;
        }
    }
    Ok(format!("byte-identical codebooks ({}); shuffled merges equal", counts.join(", ")))
}

// 8

const TOPIC_SYSTEM: &str = "You are an expert in thematic analysis with grounded theory, working on open coding. You identified a topic from the input quotes. Each quote is independent from another. #{ResearchQuestion} #{CodingNotes} Always follow the output format: === Thought: {What is the most common theme among the input quotes? Do not over-interpret the data.} Label: {A single label that faithfully describes the topic} ===";
const TOPIC_USER: &str = "Quotes: {Documents} Keywords: {Keywords}";
const CHUNK_SYSTEM: &str = "Hi ChatGPT, I want to analyze the following interaction in one of Physics Lab's online message groups. Please give me a codebook to analyze factors within this interaction that could contribute to the research. #{ResearchQuestion} #{CodingNotes} For each code, try to find 3 quotes. Always follow the output format: === ## Label: A label of code 1 Definition: A definition of code 1 - \"Example quote 1\" - \"Example quote 2\" ## ...";
const CHUNK_USER: &str = "{Conversation}";
const ITEM_SYSTEM: &str = "You are an expert in thematic analysis with grounded theory, working on open coding. Your goal is to identify multiple low-level tags for each message. When writing tags, balance between specifics and generalizability across messages. ${ResearchQuestion} ${CodingNotes} Always follow the output format: === Thoughts: {A paragraph of plans and guiding questions about analyzing the conversation from multiple theoretical angles} Tags for each message (${Messages.length} in total): 1. tag 1; tag 2; tag 3... ... ${Messages.length}. tag 4; tag 5; tag 6... Summary: {A somehow detailed summary of the conversation, including previous ones} Notes: {Notes and hypotheses about the conversation until now}";
const ITEM_USER: &str = "{Conversation}";

const MARKERS: [(&str, &str); 6] = [
    (RESEARCH_QUESTION, "<research question>"),
    (CODING_NOTES, "<coding notes>"),
    (MESSAGES_LENGTH, "<message count>"),
    (DOCUMENTS, "<documents>"),
    (KEYWORDS, "<keywords>"),
    (CONVERSATION, "<conversation>"),
];

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Plain string replacement of every sigil form, independent of the
/// template engine.
fn fill(text: &str) -> String {
    let mut out = text.to_string();
    for (name, marker) in MARKERS {
        for sigil in ["#", "$", ""] {
            out = out.replace(&format!("{sigil}{{{name}}}"), marker);
        }
    }
    out
}

/// The two edits applied by hand: the instruction before the output format,
/// and "Tags"/"tag" renamed inside the output template only.
fn verb_edits(item: &str) -> String {
    let marker = "Always follow the output format:";
    let (role, format) = item.split_once(marker).expect("output format");
    let format: Vec<&str> = format
        .split(' ')
        .map(|w| match w {
            "Tags" => "Interpretations",
            "tag" => "phrase",
            w => w,
        })
        .collect();
    format!("{role}Always use verb phrases. {marker}{}", format.join(" "))
}

fn prompt_fidelity() -> Outcome {
    let bindings = MARKERS.iter().fold(Bindings::new(), |b, (name, marker)| b.with(*name, *marker));
    let render = |t| -> Result<(String, String), String> {
        let (p, _) = render_prompt(&t, &bindings).map_err(err)?;
        Ok((collapse(&p.system), collapse(&p.user)))
    };
    let item_expected = collapse(&fill(ITEM_SYSTEM));
    let cases = [
        ("topic", topic_template(), collapse(&fill(TOPIC_SYSTEM)), fill(TOPIC_USER)),
        ("chunk", chunk_template(), collapse(&fill(CHUNK_SYSTEM)), fill(CHUNK_USER)),
        ("item", item_template(), item_expected.clone(), fill(ITEM_USER)),
        ("verb", verb_template(), verb_edits(&item_expected), fill(ITEM_USER)),
    ];
    for (name, template, system, user) in cases {
        let (got_system, got_user) = render(template)?;
        ensure(got_system == system, || format!("{name} system prompt:\n  got  {got_system}\n  want {system}"))?;
        ensure(got_user == user, || format!("{name} user prompt: got {got_user:?}, want {user:?}"))?;
    }

    // undoing exactly the two edits gives back the item-level prompt
    let (item, _) = render(item_template())?;
    let (verb, _) = render(verb_template())?;
    let undone = verb
        .replacen("Always use verb phrases. ", "", 1)
        .split(' ')
        .map(|w| match w {
            "Interpretations" => "Tags",
            "phrase" => "tag",
            w => w,
        })
        .collect::<Vec<_>>()
        .join(" ");
    ensure(verb != item && undone == item, || "verb variant differs by more than the two edits".into())?;
    let changed = verb.split(' ').filter(|w| *w == "Interpretations" || *w == "phrase").count();
    ensure(changed == 7, || format!("{changed} renamed words in the output template"))?;
    Ok("four templates match after whitespace collapse; verb variant = item + 2 edits".into())
}
