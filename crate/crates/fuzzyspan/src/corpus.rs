//! Synthetic span-extraction corpora. A span starts at a type-specific
//! `open` trigger, ends at the matching `close` trigger, and is announced
//! by an `announce` trigger immediately before the open, so every span
//! decision is decidable from a small backward context window. Isolated
//! decoy triggers (opens with no announce, closes with no nearby open)
//! force boundary decisions to actually use that context, and punish
//! attention that ranges wider than the cue radius.
//!
//! Token layout: 0 is reserved; type t owns `announce = 1 + 3t`,
//! `open = 2 + 3t`, `close = 3 + 3t`; content tokens fill the rest of the
//! vocabulary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::boundary::SpanAnnotation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub spans: Vec<SpanAnnotation>,
    pub split: Split,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let mut seen = std::collections::HashSet::new();
        for span in &self.spans {
            span.validate(n)?;
            if !seen.insert((span.start, span.end, span.type_id)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate span ({}, {}, {})",
                    span.start, span.end, span.type_id
                )));
            }
        }
        Ok(())
    }
}

/// All ranges are inclusive `(lo, hi)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_sentences: usize,
    pub seq_len_range: (usize, usize),
    pub type_count: usize,
    pub span_len_range: (usize, usize),
    pub spans_per_sentence: (usize, usize),
    /// Isolated trigger tokens planted far from any real span.
    pub decoys_per_sentence: (usize, usize),
    pub jitter_prob: f64,
    pub jitter_radius: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            num_sentences: 360,
            seq_len_range: (44, 56),
            type_count: 2,
            span_len_range: (2, 5),
            spans_per_sentence: (2, 3),
            decoys_per_sentence: (2, 3),
            jitter_prob: 0.0,
            jitter_radius: 2,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    /// First token id available for content (after reserved + triggers).
    pub fn content_base(&self) -> usize {
        1 + 3 * self.type_count
    }

    pub fn announce_token(&self, type_id: usize) -> usize {
        1 + 3 * type_id
    }

    pub fn open_token(&self, type_id: usize) -> usize {
        2 + 3 * type_id
    }

    pub fn close_token(&self, type_id: usize) -> usize {
        3 + 3 * type_id
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sentences == 0 || self.type_count == 0 {
            return Err(Error::InvalidConfig(
                "num_sentences and type_count must be positive".into(),
            ));
        }
        if self.vocab_size < self.content_base() + 4 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} leaves no room for content tokens after {} reserved ids",
                self.vocab_size,
                self.content_base()
            )));
        }
        for (name, (lo, hi)) in [
            ("seq_len_range", self.seq_len_range),
            ("span_len_range", self.span_len_range),
            ("spans_per_sentence", self.spans_per_sentence),
            ("decoys_per_sentence", self.decoys_per_sentence),
        ] {
            if lo > hi {
                return Err(Error::InvalidConfig(format!("{name} is inverted: ({lo}, {hi})")));
            }
        }
        // A span needs the open and close triggers inside it, so length 2 is
        // the minimum that keeps both boundary tokens distinct.
        if self.span_len_range.0 < 2 {
            return Err(Error::InvalidConfig(
                "span_len_range minimum must be at least 2".into(),
            ));
        }
        if self.spans_per_sentence.0 == 0 {
            return Err(Error::InvalidConfig(
                "spans_per_sentence minimum must be positive".into(),
            ));
        }
        // The announce trigger sits before the span, so a span needs len + 1
        // cells plus headroom to place it at all.
        if self.seq_len_range.0 < self.span_len_range.1 + 2 {
            return Err(Error::InvalidConfig(format!(
                "sentences of length {} cannot hold a span of length {} plus its cues",
                self.seq_len_range.0, self.span_len_range.1
            )));
        }
        if !(0.0..=1.0).contains(&self.jitter_prob) {
            return Err(Error::InvalidConfig(format!(
                "jitter_prob must lie in [0, 1], got {}",
                self.jitter_prob
            )));
        }
        if self.jitter_radius == 0 {
            return Err(Error::InvalidConfig("jitter_radius must be positive".into()));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.random_range(range.0..=range.1)
}

/// Cells covered by a span's cue pattern: announce through close.
fn span_cells(span: &SpanAnnotation) -> (usize, usize) {
    (span.start - 1, span.end)
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn build_sentence(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<SpanAnnotation>)> {
    let n = sample(rng, spec.seq_len_range);
    let want_spans = sample(rng, spec.spans_per_sentence);
    let want_decoys = sample(rng, spec.decoys_per_sentence);
    let mut spans: Vec<SpanAnnotation> = Vec::with_capacity(want_spans);
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for _ in 0..want_spans {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let len = sample(rng, spec.span_len_range);
            if n < len + 1 {
                continue;
            }
            let start = rng.random_range(1..=n - len);
            let span = SpanAnnotation::new(start, start + len - 1, rng.random_range(0..spec.type_count));
            let cell = span_cells(&span);
            // An empty cell between neighbouring cue blocks keeps the
            // patterns separable.
            let padded = (cell.0.saturating_sub(1), cell.1 + 1);
            if cells.iter().all(|c| !overlaps(*c, padded)) {
                cells.push(cell);
                spans.push(span);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleCorpus(format!(
                "could not place {want_spans} spans in a sentence of length {n}"
            )));
        }
    }
    // Decoys stay at least one span-cap away from every cue cell and from
    // each other, so no decoy acquires an announce or a matching partner
    // within the cue radius and the extraction rule never fires on one.
    let decoy_gap = spec.span_len_range.1 + 2;
    let mut decoys: Vec<(usize, usize)> = Vec::new();
    for _ in 0..want_decoys {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let pos = rng.random_range(0..n);
            let zone = (pos.saturating_sub(decoy_gap), pos + decoy_gap);
            if cells.iter().all(|c| !overlaps(*c, zone))
                && decoys.iter().all(|&(p, _)| !overlaps(zone, (p, p)))
            {
                // Decoys borrow a type present in the sentence when they
                // can, so sentence-level trigger counts separate nothing.
                let type_id = if !spans.is_empty() && rng.random_bool(0.8) {
                    spans[rng.random_range(0..spans.len())].type_id
                } else {
                    rng.random_range(0..spec.type_count)
                };
                let token = if rng.random_bool(0.5) {
                    spec.open_token(type_id)
                } else {
                    spec.close_token(type_id)
                };
                decoys.push((pos, token));
                break;
            }
        }
        // Decoys are noise; giving up on one is not an error.
    }
    let mut tokens: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.content_base()..spec.vocab_size))
        .collect();
    for span in &spans {
        tokens[span.start - 1] = spec.announce_token(span.type_id);
        tokens[span.start] = spec.open_token(span.type_id);
        tokens[span.end] = spec.close_token(span.type_id);
    }
    for &(pos, token) in &decoys {
        tokens[pos] = token;
    }
    spans.sort_by_key(|s| (s.start, s.end, s.type_id));
    Ok((tokens, spans))
}

fn jitter_span(
    span: &SpanAnnotation,
    n: usize,
    prob: f64,
    radius: usize,
    rng: &mut ChaCha8Rng,
) -> SpanAnnotation {
    let shift = |rng: &mut ChaCha8Rng| {
        let mag = rng.random_range(1..=radius) as isize;
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    let mut start = span.start;
    if rng.random_bool(prob) {
        let moved = start as isize + shift(rng);
        start = moved.clamp(0, span.end as isize) as usize;
    }
    let mut end = span.end;
    if rng.random_bool(prob) {
        let moved = end as isize + shift(rng);
        end = moved.clamp(start as isize, n as isize - 1) as usize;
    }
    SpanAnnotation::new(start, end, span.type_id)
}

/// Deterministic corpus generation. The split layout is 80/10/10 by
/// position; jitter perturbs training annotations only (dev and test keep
/// clean references) and draws from its own RNG stream, so corpora
/// differing only in jitter settings share identical tokens and reference
/// spans.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    jitter_rng.set_stream(1);
    let n = spec.num_sentences;
    let train_end = n * 8 / 10;
    let dev_end = n * 9 / 10;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (tokens, mut spans) = build_sentence(spec, &mut rng)?;
        let split = if i < train_end.max(1) {
            Split::Train
        } else if i < dev_end {
            Split::Dev
        } else {
            Split::Test
        };
        if spec.jitter_prob > 0.0 && split == Split::Train {
            spans = spans
                .iter()
                .map(|s| jitter_span(s, tokens.len(), spec.jitter_prob, spec.jitter_radius, &mut jitter_rng))
                .collect();
            spans.sort_by_key(|s| (s.start, s.end, s.type_id));
            spans.dedup_by_key(|s| (s.start, s.end, s.type_id));
        }
        let ex = Example { tokens, spans, split };
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Recovers spans from the trigger patterns alone: an `open(t)` announced
/// at the position before it starts a span, which ends at the nearest
/// following `close(t)` within the span cap. On an unjittered corpus this
/// reproduces the annotations exactly, which is the guarantee that span
/// decisions need only local context.
pub fn extract_by_cues(tokens: &[usize], spec: &CorpusSpec) -> Vec<SpanAnnotation> {
    let mut found = Vec::new();
    for (p, &tok) in tokens.iter().enumerate() {
        for type_id in 0..spec.type_count {
            if tok != spec.open_token(type_id)
                || p == 0
                || tokens[p - 1] != spec.announce_token(type_id)
            {
                continue;
            }
            let cap = spec.span_len_range.1;
            for q in p + 1..tokens.len().min(p + cap) {
                if tokens[q] == spec.close_token(type_id) {
                    found.push(SpanAnnotation::new(p, q, type_id));
                    break;
                }
            }
        }
    }
    found.sort_by_key(|s| (s.start, s.end, s.type_id));
    found
}

/// Nested deterministic subsets of the train split. Returns one
/// `(fraction, examples)` row per requested fraction, smallest first; a
/// smaller subset is always a prefix of every larger one under the shared
/// shuffle.
pub fn split_low_resource(
    examples: &[Example],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<(f64, Vec<Example>)>> {
    let train: Vec<&Example> = examples.iter().filter(|e| e.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("no train examples to subset".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fractions = fractions.to_vec();
    fractions.sort_by(|a, b| a.partial_cmp(b).expect("finite fractions"));
    let mut out = Vec::with_capacity(fractions.len());
    for f in fractions {
        if !(0.0..=1.0).contains(&f) || f <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fraction must lie in (0, 1], got {f}"
            )));
        }
        let take = (f * train.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::InvalidArgument(format!(
                "fraction {f} rounds to zero of {} train examples",
                train.len()
            )));
        }
        let subset = order[..take.min(train.len())]
            .iter()
            .map(|&i| train[i].clone())
            .collect();
        out.push((f, subset));
    }
    Ok(out)
}

/// Newline-delimited JSON, one example per line.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut file, ex)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            num_sentences: 60,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut s = spec();
        s.vocab_size = 9;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.seq_len_range = (4, 48);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.span_len_range = (3, 2);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.span_len_range = (1, 4);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.jitter_prob = 1.5;
        assert!(s.validate().is_err());
        assert!(spec().validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&spec()).unwrap();
        let mut s = spec();
        s.seed = 8;
        let b = generate(&s).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn splits_follow_eighty_ten_ten() {
        let examples = generate(&spec()).unwrap();
        let count = |sp: Split| examples.iter().filter(|e| e.split == sp).count();
        assert_eq!(count(Split::Train), 48);
        assert_eq!(count(Split::Dev), 6);
        assert_eq!(count(Split::Test), 6);
    }

    #[test]
    fn spans_carry_their_cue_pattern_and_stay_in_bounds() {
        let s = spec();
        let examples = generate(&s).unwrap();
        let mut total = 0;
        for ex in &examples {
            for span in &ex.spans {
                assert!(span.start >= 1);
                assert!(span.end < ex.tokens.len());
                let len = span.end - span.start + 1;
                assert!(len >= s.span_len_range.0 && len <= s.span_len_range.1);
                assert_eq!(ex.tokens[span.start - 1], s.announce_token(span.type_id));
                assert_eq!(ex.tokens[span.start], s.open_token(span.type_id));
                assert_eq!(ex.tokens[span.end], s.close_token(span.type_id));
                for p in span.start + 1..span.end {
                    assert!(ex.tokens[p] >= s.content_base(), "trigger inside span");
                }
                total += 1;
            }
        }
        assert!(total > 0);
    }

    #[test]
    fn decoys_exist_and_never_satisfy_the_cue_rule() {
        let s = spec();
        let examples = generate(&s).unwrap();
        let mut decoy_opens = 0;
        let mut decoy_closes = 0;
        for ex in &examples {
            let in_span = |p: usize| {
                ex.spans
                    .iter()
                    .any(|sp| p + 1 >= sp.start && p <= sp.end)
            };
            for (p, &tok) in ex.tokens.iter().enumerate() {
                for t in 0..s.type_count {
                    if tok == s.open_token(t) && !in_span(p) {
                        decoy_opens += 1;
                        assert!(p == 0 || ex.tokens[p - 1] != s.announce_token(t));
                    }
                    if tok == s.close_token(t) && !in_span(p) {
                        decoy_closes += 1;
                        let lo = p.saturating_sub(s.span_len_range.1 - 1);
                        assert!((lo..p).all(|q| ex.tokens[q] != s.open_token(t)));
                    }
                }
            }
        }
        assert!(decoy_opens > 20, "only {decoy_opens} decoy opens");
        assert!(decoy_closes > 20, "only {decoy_closes} decoy closes");
    }

    #[test]
    fn cue_extraction_recovers_annotations_exactly() {
        let s = spec();
        for ex in generate(&s).unwrap() {
            let found = extract_by_cues(&ex.tokens, &s);
            assert_eq!(found, ex.spans, "cue mismatch in {:?}", ex.tokens);
        }
    }

    #[test]
    fn zero_jitter_equals_base_annotations() {
        let mut s = spec();
        s.jitter_prob = 0.0;
        let base = generate(&s).unwrap();
        s.jitter_prob = 0.5;
        let jittered = generate(&s).unwrap();
        // Tokens and evaluation references are shared; only training
        // annotations may move.
        for (a, b) in base.iter().zip(&jittered) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.split, b.split);
            if a.split != Split::Train {
                assert_eq!(a.spans, b.spans);
            }
        }
        assert!(base.iter().zip(&jittered).any(|(a, b)| a.spans != b.spans));
    }

    #[test]
    fn full_jitter_radius_one_moves_every_unclamped_boundary() {
        let mut s = spec();
        s.jitter_prob = 0.0;
        let base = generate(&s).unwrap();
        s.jitter_prob = 1.0;
        s.jitter_radius = 1;
        let jittered = generate(&s).unwrap();
        let mut moved = 0;
        let mut checked = 0;
        for (a, b) in base.iter().zip(&jittered) {
            if a.split != Split::Train || a.spans.len() != b.spans.len() {
                continue;
            }
            let n = a.tokens.len();
            for (ra, rb) in a.spans.iter().zip(&b.spans) {
                assert_eq!(ra.type_id, rb.type_id);
                let ds = ra.start.abs_diff(rb.start);
                let de = ra.end.abs_diff(rb.end);
                assert!(ds <= 1 && de <= 1, "shift beyond radius");
                // A boundary that did not move must have been clamped.
                if ds == 0 {
                    assert!(ra.start == 0 || ra.start == ra.end);
                } else {
                    moved += 1;
                }
                if de == 0 {
                    assert!(ra.end == n - 1 || ra.end <= rb.start);
                } else {
                    moved += 1;
                }
                checked += 2;
            }
        }
        assert!(checked > 50);
        assert!(moved as f64 > 0.7 * checked as f64);
    }

    #[test]
    fn infeasible_spec_errors() {
        let mut s = spec();
        s.seq_len_range = (8, 8);
        s.spans_per_sentence = (4, 4);
        s.span_len_range = (5, 5);
        // 4 spans of 7 cells each cannot fit in 8 tokens.
        assert!(matches!(generate(&s), Err(Error::InfeasibleCorpus(_))));
    }

    #[test]
    fn low_resource_subsets_are_nested_and_sized() {
        let examples = generate(&CorpusSpec { num_sentences: 125, ..spec() }).unwrap();
        let rows = split_low_resource(&examples, &[1.0, 0.25, 0.05], 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].0, 0.05);
        assert_eq!(rows[0].1.len(), 5);
        assert_eq!(rows[1].1.len(), 25);
        assert_eq!(rows[2].1.len(), 100);
        for (small, large) in rows.iter().zip(rows.iter().skip(1)) {
            for ex in &small.1 {
                assert!(large.1.contains(ex), "nesting violated");
            }
        }
        assert!(rows[2].1.iter().all(|e| e.split == Split::Train));
    }

    #[test]
    fn low_resource_is_seeded_and_rejects_empty() {
        let examples = generate(&CorpusSpec { num_sentences: 125, ..spec() }).unwrap();
        let a = split_low_resource(&examples, &[0.05], 3).unwrap();
        let b = split_low_resource(&examples, &[0.05], 3).unwrap();
        let c = split_low_resource(&examples, &[0.05], 4).unwrap();
        assert_eq!(a[0].1, b[0].1);
        assert_ne!(a[0].1, c[0].1);
        assert_eq!(a[0].1.len(), c[0].1.len());
        assert!(split_low_resource(&examples, &[0.001], 3).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_wire_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let examples = generate(&spec()).unwrap();
        write_jsonl(&path, &examples).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(examples, back);
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        assert!(v["tokens"].is_array());
        assert!(v["spans"].is_array());
        assert_eq!(v["split"], "train");
        if let Some(span) = v["spans"].as_array().unwrap().first() {
            assert!(span["start"].is_u64());
            assert!(span["end"].is_u64());
            assert!(span["type"].is_u64());
        }
    }
}
