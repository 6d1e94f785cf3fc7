//! Generative data augmentation: a chat-completion client for remote
//! generators, a deterministic offline mock, sentence-boundary splitting of
//! long generations, and ratio-controlled mixing into the original
//! dataset.
//!
//! Generated samples are incorporated without quality filtering; schema
//! validation only rejects records that are structurally unusable (unknown
//! label, empty text, text over the length cap).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Example, LabelSet, Provenance, NUM_LABELS};

/// Default system prompt sent to the generator.
pub const DEFAULT_PROMPT: &str = "Generate short texts with their corresponding sentiment labels. \
The sentiment labels include Anger, Fear, Joy, Sadness, and Surprise. \
The texts are in English and have a maximum length of 256 characters.";

/// Character cap for generated texts.
pub const DEFAULT_MAX_CHARS: usize = 256;

/// Target label probabilities for the mock generator, matching the
/// generated-pool class distribution.
pub const GENERATED_LABEL_PROBABILITIES: [f64; NUM_LABELS] = [0.190, 0.650, 0.306, 0.418, 0.397];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("generation count must be at least 1")]
    ZeroCount,
    #[error("invalid mix ratio {0:?}: expected a fraction in [0, 1] such as 0, 1/3, 2/3 or 1")]
    BadRatio(String),
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("endpoint returned status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("http error: {0}")]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// What gets asked of a generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub count: usize,
    pub max_chars: usize,
}

impl GenerationRequest {
    pub fn new(count: usize) -> Result<Self, AugmentError> {
        if count == 0 {
            return Err(AugmentError::ZeroCount);
        }
        Ok(Self {
            prompt: DEFAULT_PROMPT.to_string(),
            count,
            max_chars: DEFAULT_MAX_CHARS,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenerationSource {
    Remote(String),
    Mock,
}

/// Validated generated records, in a fixed order.
#[derive(Clone, Debug)]
pub struct GeneratedBatch {
    pub records: Vec<(String, LabelSet)>,
    pub source: GenerationSource,
}

impl GeneratedBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Converts to a dataset with ids `gen-0`, `gen-1`, ...
    pub fn to_dataset(&self) -> Dataset {
        let examples = self
            .records
            .iter()
            .enumerate()
            .map(|(i, (text, labels))| Example {
                id: format!("gen-{i}"),
                text: text.clone(),
                labels: *labels,
            })
            .collect();
        Dataset::new(examples, Provenance::Generated).expect("generated ids are unique")
    }

    /// Reads a pool back from the canonical JSON-lines dataset format.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            records: ds
                .examples
                .iter()
                .map(|ex| (ex.text.clone(), ex.labels))
                .collect(),
            source: GenerationSource::Mock,
        }
    }
}

/// Why records were dropped during schema validation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RejectCounts {
    pub malformed: usize,
    pub unknown_label: usize,
    pub empty_text: usize,
    pub too_long: usize,
}

impl RejectCounts {
    pub fn total(&self) -> usize {
        self.malformed + self.unknown_label + self.empty_text + self.too_long
    }
}

/// Raw generator output before validation.
#[derive(Deserialize)]
struct RawRecord {
    text: String,
    labels: Vec<String>,
}

fn validate_record(
    raw: &RawRecord,
    max_chars: usize,
    rejects: &mut RejectCounts,
) -> Option<(String, LabelSet)> {
    let text = raw.text.trim();
    if text.is_empty() {
        rejects.empty_text += 1;
        return None;
    }
    if text.chars().count() > max_chars {
        rejects.too_long += 1;
        return None;
    }
    match LabelSet::from_names(&raw.labels) {
        Ok(labels) => Some((text.to_string(), labels)),
        Err(_) => {
            rejects.unknown_label += 1;
            None
        }
    }
}

// ---- remote client ----

/// Chat-completion endpoint configuration. Credentials come from the
/// environment, never from config files.
#[derive(Clone, Debug)]
pub struct EndpointConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub concurrency: usize,
    pub max_retries: usize,
    pub retry_backoff_ms: u64,
}

pub const ENV_URL: &str = "EMOTEXT_GEN_URL";
pub const ENV_API_KEY: &str = "EMOTEXT_GEN_API_KEY";
pub const ENV_MODEL: &str = "EMOTEXT_GEN_MODEL";

impl EndpointConfig {
    pub fn from_env() -> Result<Self, AugmentError> {
        let url = std::env::var(ENV_URL).map_err(|_| AugmentError::MissingEnv(ENV_URL))?;
        Ok(Self {
            url,
            api_key: std::env::var(ENV_API_KEY).ok(),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".to_string()),
            concurrency: 4,
            max_retries: 3,
            retry_backoff_ms: 500,
        })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    response_format: ResponseFormat,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ResponseFormat {
    #[serde(rename = "type")]
    kind: &'static str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

const USER_INSTRUCTION: &str =
    "Produce one example as a JSON object with a \"text\" field and a \"labels\" array.";

fn request_one(
    client: &reqwest::blocking::Client,
    req: &GenerationRequest,
    endpoint: &EndpointConfig,
) -> Result<String, AugmentError> {
    let body = ChatRequest {
        model: &endpoint.model,
        messages: [
            ChatMessage {
                role: "system",
                content: &req.prompt,
            },
            ChatMessage {
                role: "user",
                content: USER_INSTRUCTION,
            },
        ],
        response_format: ResponseFormat {
            kind: "json_object",
        },
    };
    log::debug!(
        "generator request to {}: {}",
        endpoint.url,
        serde_json::to_string(&body).unwrap_or_default()
    );
    let mut attempt = 0usize;
    loop {
        attempt += 1;
        let mut http = client.post(&endpoint.url).json(&body);
        if let Some(key) = &endpoint.api_key {
            http = http.bearer_auth(key);
        }
        let outcome = http.send().and_then(|resp| {
            let status = resp.status();
            resp.text().map(|text| (status, text))
        });
        match outcome {
            Ok((status, text)) if status.is_success() => {
                log::debug!("generator response: {text}");
                return Ok(text);
            }
            Ok((status, text)) => {
                log::warn!("generator attempt {attempt}: status {status}");
                if attempt > endpoint.max_retries {
                    return Err(AugmentError::HttpStatus {
                        status: status.as_u16(),
                        body: text,
                    });
                }
            }
            Err(err) => {
                log::warn!("generator attempt {attempt}: {err}");
                if attempt > endpoint.max_retries {
                    return Err(AugmentError::RetriesExhausted {
                        attempts: attempt,
                        last: err.to_string(),
                    });
                }
            }
        }
        std::thread::sleep(std::time::Duration::from_millis(
            endpoint.retry_backoff_ms * attempt as u64,
        ));
    }
}

fn parse_payload(payload: &str, max_chars: usize, rejects: &mut RejectCounts) -> Option<(String, LabelSet)> {
    let chat: ChatResponse = match serde_json::from_str(payload) {
        Ok(c) => c,
        Err(_) => {
            rejects.malformed += 1;
            return None;
        }
    };
    let content = match chat.choices.first() {
        Some(choice) => &choice.message.content,
        None => {
            rejects.malformed += 1;
            return None;
        }
    };
    match serde_json::from_str::<RawRecord>(content) {
        Ok(raw) => validate_record(&raw, max_chars, rejects),
        Err(_) => {
            rejects.malformed += 1;
            return None;
        }
    }
}

/// Requests `req.count` records from a chat-completion endpoint with
/// bounded parallelism. Malformed or schema-violating records are dropped
/// and tallied; transport failures are retried with backoff and only then
/// propagated.
pub fn generate_remote(
    req: &GenerationRequest,
    endpoint: &EndpointConfig,
) -> Result<(GeneratedBatch, RejectCounts), AugmentError> {
    if req.count == 0 {
        return Err(AugmentError::ZeroCount);
    }
    let workers = endpoint.concurrency.clamp(1, req.count);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<String, AugmentError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let client = reqwest::blocking::Client::new();
                loop {
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= req.count {
                        break;
                    }
                    let outcome = request_one(&client, req, endpoint);
                    let failed = outcome.is_err();
                    results.lock().unwrap().push((idx, outcome));
                    if failed {
                        break;
                    }
                }
            });
        }
    });
    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(idx, _)| *idx);
    let mut rejects = RejectCounts::default();
    let mut records = Vec::with_capacity(req.count);
    for (_, outcome) in collected {
        let payload = outcome?;
        if let Some(rec) = parse_payload(&payload, req.max_chars, &mut rejects) {
            records.push(rec);
        }
    }
    Ok((
        GeneratedBatch {
            records,
            source: GenerationSource::Remote(endpoint.url.clone()),
        },
        rejects,
    ))
}

// ---- mock generator ----

const MOCK_OPENERS: [&str; 6] = [
    "honestly",
    "today",
    "last night",
    "out of nowhere",
    "this morning",
    "after everything",
];

const MOCK_LEXICONS: [&[&str]; NUM_LABELS] = [
    &["furious", "outraged", "fed up", "so angry", "livid"],
    &["terrified", "really scared", "panicking", "full of dread", "shaking"],
    &["overjoyed", "delighted", "so happy", "thrilled", "grinning"],
    &["heartbroken", "miserable", "in tears", "devastated", "so sad"],
    &["stunned", "astonished", "caught off guard", "speechless", "amazed"],
];

const MOCK_TOPICS: [&str; 8] = [
    "the news", "my exam", "the meeting", "that message", "the storm", "the trip", "my family",
    "the match",
];

const MOCK_CLOSERS: [&str; 5] = [
    "I still cannot process it.",
    "Nothing prepared me for this.",
    "It keeps replaying in my head.",
    "I had to tell someone.",
    "What a day it has been.",
];

/// Offline stand-in for a remote generator: template texts with
/// label-conditioned phrasing, label sets sampled toward `target`
/// probabilities. Pure function of (req, seed).
pub fn generate_mock_with(
    req: &GenerationRequest,
    seed: u64,
    target: [f64; NUM_LABELS],
) -> Result<(GeneratedBatch, RejectCounts), AugmentError> {
    if req.count == 0 {
        return Err(AugmentError::ZeroCount);
    }
    let thresholds: [u32; NUM_LABELS] =
        std::array::from_fn(|l| (target[l] * u32::MAX as f64) as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejects = RejectCounts::default();
    let mut records = Vec::with_capacity(req.count);
    while records.len() < req.count {
        let mut labels = LabelSet::EMPTY;
        for l in 0..NUM_LABELS {
            if rng.next_u32() < thresholds[l] {
                labels = labels.with(l);
            }
        }
        let mut text = String::new();
        let opener = MOCK_OPENERS[(rng.next_u32() as usize) % MOCK_OPENERS.len()];
        let topic = MOCK_TOPICS[(rng.next_u32() as usize) % MOCK_TOPICS.len()];
        text.push_str(opener);
        if labels.is_empty() {
            text.push_str(&format!(" {topic} happened and that is all there is to say."));
        } else {
            text.push_str(" I was");
            let active: Vec<usize> = (0..NUM_LABELS).filter(|&l| labels.contains(l)).collect();
            for (k, &l) in active.iter().enumerate() {
                let phrase = MOCK_LEXICONS[l][(rng.next_u32() as usize) % MOCK_LEXICONS[l].len()];
                if k > 0 {
                    text.push_str(" and");
                }
                text.push(' ');
                text.push_str(phrase);
            }
            text.push_str(&format!(" about {topic}."));
        }
        // a second or third sentence sometimes, so the splitting stage has
        // realistic long inputs
        let extra = (rng.next_u32() % 4) as usize; // 0..=3
        for _ in 0..extra.saturating_sub(1) {
            let closer = MOCK_CLOSERS[(rng.next_u32() as usize) % MOCK_CLOSERS.len()];
            text.push(' ');
            text.push_str(closer);
        }
        let raw = RawRecord {
            text,
            labels: labels.names().iter().map(|s| s.to_string()).collect(),
        };
        if let Some(rec) = validate_record(&raw, req.max_chars, &mut rejects) {
            records.push(rec);
        }
    }
    Ok((
        GeneratedBatch {
            records,
            source: GenerationSource::Mock,
        },
        rejects,
    ))
}

pub fn generate_mock(
    req: &GenerationRequest,
    seed: u64,
) -> Result<(GeneratedBatch, RejectCounts), AugmentError> {
    generate_mock_with(req, seed, GENERATED_LABEL_PROBABILITIES)
}

// ---- splitting ----

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if matches!(bytes[i], b'.' | b'!' | b'?') {
            // consume the punctuation run
            while i + 1 < bytes.len() && matches!(bytes[i + 1], b'.' | b'!' | b'?') {
                i += 1;
            }
            let segment = text[start..=i].trim();
            if !segment.is_empty() {
                out.push(segment);
            }
            start = i + 1;
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Splits texts longer than 1.5 × `target_len` characters at sentence
/// boundaries into two or three parts of near-equal length; each part
/// inherits the parent's full label set. Shorter texts and texts without a
/// sentence boundary pass through unchanged.
pub fn split_generated(batch: &GeneratedBatch, target_len: usize) -> GeneratedBatch {
    let threshold = target_len + target_len / 2;
    let mut records = Vec::with_capacity(batch.records.len());
    for (text, labels) in &batch.records {
        let chars = text.chars().count();
        if chars <= threshold {
            records.push((text.clone(), *labels));
            continue;
        }
        let sents = sentences(text);
        let want = ((chars as f64 / target_len as f64).round() as usize).clamp(2, 3);
        let parts = want.min(sents.len());
        if parts < 2 {
            records.push((text.clone(), *labels));
            continue;
        }
        for group in balanced_partition(&sents, parts) {
            records.push((group, *labels));
        }
    }
    GeneratedBatch {
        records,
        source: batch.source.clone(),
    }
}

/// Splits the sentence list into `parts` contiguous groups whose joined
/// lengths are as equal as possible (brute force over cut positions; texts
/// here have a handful of sentences at most).
fn balanced_partition(sents: &[&str], parts: usize) -> Vec<String> {
    let n = sents.len();
    let lens: Vec<usize> = sents.iter().map(|s| s.chars().count() + 1).collect();
    let group_len = |a: usize, b: usize| -> i64 { lens[a..b].iter().sum::<usize>() as i64 };
    let spread = |cuts: &[usize]| -> i64 {
        let mut bounds = vec![0usize];
        bounds.extend_from_slice(cuts);
        bounds.push(n);
        let sizes: Vec<i64> = bounds.windows(2).map(|w| group_len(w[0], w[1])).collect();
        sizes.iter().max().unwrap() - sizes.iter().min().unwrap()
    };
    let best_cuts: Vec<usize> = if parts == 2 {
        (1..n)
            .min_by_key(|&i| spread(&[i]))
            .map(|i| vec![i])
            .unwrap_or_default()
    } else {
        let mut best: Option<(i64, Vec<usize>)> = None;
        for i in 1..n - 1 {
            for j in i + 1..n {
                let cost = spread(&[i, j]);
                if best.as_ref().map(|(c, _)| cost < *c).unwrap_or(true) {
                    best = Some((cost, vec![i, j]));
                }
            }
        }
        best.map(|(_, cuts)| cuts).unwrap_or_default()
    };
    let mut bounds = vec![0usize];
    bounds.extend_from_slice(&best_cuts);
    bounds.push(n);
    bounds
        .windows(2)
        .map(|w| sents[w[0]..w[1]].join(" "))
        .collect()
}

// ---- mixing ----

/// Exact rational mix ratio in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRatio {
    pub numerator: u32,
    pub denominator: u32,
}

impl MixRatio {
    pub const ZERO: MixRatio = MixRatio {
        numerator: 0,
        denominator: 1,
    };
    pub const ONE_THIRD: MixRatio = MixRatio {
        numerator: 1,
        denominator: 3,
    };
    pub const TWO_THIRDS: MixRatio = MixRatio {
        numerator: 2,
        denominator: 3,
    };
    pub const FULL: MixRatio = MixRatio {
        numerator: 1,
        denominator: 1,
    };

    pub fn parse(text: &str) -> Result<Self, AugmentError> {
        let bad = || AugmentError::BadRatio(text.to_string());
        let ratio = if let Some((num, den)) = text.split_once('/') {
            let numerator: u32 = num.trim().parse().map_err(|_| bad())?;
            let denominator: u32 = den.trim().parse().map_err(|_| bad())?;
            if denominator == 0 {
                return Err(bad());
            }
            MixRatio {
                numerator,
                denominator,
            }
        } else {
            match text.trim() {
                "0" => MixRatio::ZERO,
                "1" => MixRatio::FULL,
                "0.33" | "0.333" => MixRatio::ONE_THIRD,
                "0.66" | "0.666" | "0.67" => MixRatio::TWO_THIRDS,
                _ => return Err(bad()),
            }
        };
        if ratio.numerator > ratio.denominator {
            return Err(bad());
        }
        Ok(ratio)
    }

    /// round-half-up of ratio · pool.
    pub fn take_count(&self, pool: usize) -> usize {
        let num = pool as u64 * self.numerator as u64;
        let den = self.denominator as u64;
        ((2 * num + den) / (2 * den)) as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    pub fn label(&self) -> String {
        if self.numerator == 0 {
            "0".into()
        } else if self.numerator == self.denominator {
            "1".into()
        } else {
            format!("{}/{}", self.numerator, self.denominator)
        }
    }
}

/// Appends the first round(ratio·|pool|) pool records to the original
/// dataset. Deterministic given the pool order; nested for increasing
/// ratios.
pub fn mix(original: &Dataset, pool: &GeneratedBatch, ratio: MixRatio) -> Result<Dataset, AugmentError> {
    if ratio.numerator > ratio.denominator {
        return Err(AugmentError::BadRatio(ratio.label()));
    }
    let take = ratio.take_count(pool.len());
    if take == 0 {
        return Ok(original.clone());
    }
    let mut examples = original.examples.clone();
    for (i, (text, labels)) in pool.records.iter().take(take).enumerate() {
        examples.push(Example {
            id: format!("gen-{i}"),
            text: text.clone(),
            labels: *labels,
        });
    }
    Ok(Dataset::new(examples, Provenance::Mixed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_distribution, LABEL_NAMES};

    fn req(count: usize) -> GenerationRequest {
        GenerationRequest::new(count).unwrap()
    }

    #[test]
    fn mock_is_deterministic() {
        let (a, _) = generate_mock(&req(50), 9).unwrap();
        let (b, _) = generate_mock(&req(50), 9).unwrap();
        assert_eq!(a.records, b.records);
        let (c, _) = generate_mock(&req(50), 10).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn mock_respects_length_cap() {
        let (batch, rejects) = generate_mock(&req(500), 3).unwrap();
        assert_eq!(batch.len(), 500);
        assert_eq!(rejects.total(), 0);
        for (text, _) in &batch.records {
            assert!(text.chars().count() <= DEFAULT_MAX_CHARS);
            assert!(!text.is_empty());
        }
    }

    #[test]
    fn mock_distribution_tracks_target() {
        // statistical check against the generated-pool distribution;
        // deterministic because the seed is pinned
        let (batch, _) = generate_mock(&req(11_684), 17).unwrap();
        let ds = batch.to_dataset();
        let dist = label_distribution(&ds).unwrap();
        for (l, &(_, pct)) in dist.per_label.iter().enumerate() {
            let target = GENERATED_LABEL_PROBABILITIES[l] * 100.0;
            assert!(
                (pct - target).abs() <= 1.5,
                "{}: {pct:.2}% vs target {target:.1}%",
                LABEL_NAMES[l]
            );
        }
    }

    #[test]
    fn validation_rejects_exactly_the_three_bad_shapes() {
        let mut rejects = RejectCounts::default();
        let ok = RawRecord {
            text: "all good here.".into(),
            labels: vec!["Joy".into()],
        };
        assert!(validate_record(&ok, 256, &mut rejects).is_some());

        let unknown = RawRecord {
            text: "meh".into(),
            labels: vec!["Disgust".into()],
        };
        assert!(validate_record(&unknown, 256, &mut rejects).is_none());

        let empty = RawRecord {
            text: "   ".into(),
            labels: vec![],
        };
        assert!(validate_record(&empty, 256, &mut rejects).is_none());

        let long = RawRecord {
            text: "x".repeat(257),
            labels: vec!["Fear".into()],
        };
        assert!(validate_record(&long, 256, &mut rejects).is_none());

        assert_eq!(
            rejects,
            RejectCounts {
                malformed: 0,
                unknown_label: 1,
                empty_text: 1,
                too_long: 1
            }
        );
    }

    #[test]
    fn split_leaves_short_texts_alone() {
        let batch = GeneratedBatch {
            records: vec![("a short one.".into(), LabelSet::EMPTY)],
            source: GenerationSource::Mock,
        };
        let out = split_generated(&batch, 78);
        assert_eq!(out.records, batch.records);
    }

    #[test]
    fn split_three_sentences_into_three_parts() {
        // ~240 characters across three sentences with a 78-char target
        let s1 = format!("{} one.", "aaaa ".repeat(15).trim());
        let s2 = format!("{} two.", "bbbb ".repeat(15).trim());
        let s3 = format!("{} three.", "cccc ".repeat(14).trim());
        let text = format!("{s1} {s2} {s3}");
        assert!(text.len() > 225 && text.len() < 255, "len {}", text.len());
        let labels = LabelSet::from_names(["Joy", "Fear"]).unwrap();
        let batch = GeneratedBatch {
            records: vec![(text.clone(), labels)],
            source: GenerationSource::Mock,
        };
        let out = split_generated(&batch, 78);
        assert_eq!(out.records.len(), 3, "{:?}", out.records);
        for (part, part_labels) in &out.records {
            assert!(!part.is_empty());
            assert_eq!(*part_labels, labels, "parts inherit the full label set");
        }
        // conservation of non-whitespace characters
        let non_ws = |s: &str| s.chars().filter(|c| !c.is_whitespace()).count();
        let total: usize = out.records.iter().map(|(p, _)| non_ws(p)).sum();
        assert_eq!(total, non_ws(&text));
    }

    #[test]
    fn split_unbreakable_long_text_passes_through() {
        let text = "word ".repeat(40).trim().to_string(); // long, no boundary
        let batch = GeneratedBatch {
            records: vec![(text.clone(), LabelSet::EMPTY)],
            source: GenerationSource::Mock,
        };
        let out = split_generated(&batch, 78);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].0, text);
    }

    #[test]
    fn ratio_parsing_and_rounding() {
        assert_eq!(MixRatio::parse("0").unwrap(), MixRatio::ZERO);
        assert_eq!(MixRatio::parse("1/3").unwrap(), MixRatio::ONE_THIRD);
        assert_eq!(MixRatio::parse("2/3").unwrap(), MixRatio::TWO_THIRDS);
        assert_eq!(MixRatio::parse("1").unwrap(), MixRatio::FULL);
        assert!(MixRatio::parse("4/3").is_err());
        assert!(MixRatio::parse("-1").is_err());
        assert!(MixRatio::parse("7").is_err());

        // round-half-up over an 11,684 pool
        assert_eq!(MixRatio::ZERO.take_count(11_684), 0);
        assert_eq!(MixRatio::ONE_THIRD.take_count(11_684), 3_895);
        assert_eq!(MixRatio::TWO_THIRDS.take_count(11_684), 7_789);
        assert_eq!(MixRatio::FULL.take_count(11_684), 11_684);
        // exact half rounds up
        assert_eq!(
            MixRatio {
                numerator: 1,
                denominator: 2
            }
            .take_count(5),
            3
        );
    }

    fn tiny_original(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| Example {
                    id: format!("orig{i}"),
                    text: format!("original text {i}"),
                    labels: LabelSet::EMPTY,
                })
                .collect(),
            Provenance::Original,
        )
        .unwrap()
    }

    #[test]
    fn mix_sizes_and_nesting() {
        let original = tiny_original(10);
        let (pool, _) = generate_mock(&req(30), 4).unwrap();
        let zero = mix(&original, &pool, MixRatio::ZERO).unwrap();
        assert_eq!(zero.len(), 10);
        assert_eq!(zero.provenance, Provenance::Original);
        let third = mix(&original, &pool, MixRatio::ONE_THIRD).unwrap();
        assert_eq!(third.len(), 20);
        assert_eq!(third.provenance, Provenance::Mixed);
        let full = mix(&original, &pool, MixRatio::FULL).unwrap();
        assert_eq!(full.len(), 40);
        // prefix-superset: every example of the 1/3 mix appears at the same
        // position in the full mix
        for (a, b) in third.examples.iter().zip(full.examples.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mix_distribution_is_weighted_combination() {
        let mut original = tiny_original(8);
        for (i, ex) in original.examples.iter_mut().enumerate() {
            if i % 2 == 0 {
                ex.labels = LabelSet::from_names(["Joy"]).unwrap();
            }
        }
        let (pool, _) = generate_mock(&req(12), 6).unwrap();
        let mixed = mix(&original, &pool, MixRatio::FULL).unwrap();
        let dist_orig = label_distribution(&original).unwrap();
        let dist_pool = label_distribution(&pool.to_dataset()).unwrap();
        let dist_mix = label_distribution(&mixed).unwrap();
        for l in 0..NUM_LABELS {
            assert_eq!(
                dist_mix.per_label[l].0,
                dist_orig.per_label[l].0 + dist_pool.per_label[l].0,
                "label {l} frequency is additive"
            );
        }
    }

    #[test]
    fn zero_count_rejected() {
        assert!(GenerationRequest::new(0).is_err());
    }
}
