//! Datasets, tokenization, vocabulary, JSONL loading, deterministic splits,
//! and a synthetic confounded-corpus generator.
//!
//! Every operation here is a pure function of its inputs plus an explicit
//! seed, so all of it is safe to call concurrently.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One training triplet: token sequence, target label, protected label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub target: usize,
    pub protected: usize,
    /// Posterior probability of the protected class when an upstream
    /// inference model supplied one; `protected` is then derived from it.
    pub protected_posterior: Option<f64>,
}

/// A labelled corpus with declared class counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub k_y: usize,
    pub k_z: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, k_y: usize, k_z: usize, name: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            examples,
            k_y,
            k_z,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::validation(format!("dataset '{}' is empty", self.name)));
        }
        if self.k_y < 2 || self.k_z < 2 {
            return Err(Error::validation("k_y and k_z must both be >= 2"));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.tokens.is_empty() {
                return Err(Error::validation(format!("example {i} has no tokens")));
            }
            if ex.target >= self.k_y {
                return Err(Error::validation(format!(
                    "example {i}: target {} out of range for k_y={}",
                    ex.target, self.k_y
                )));
            }
            if ex.protected >= self.k_z {
                return Err(Error::validation(format!(
                    "example {i}: protected {} out of range for k_z={}",
                    ex.protected, self.k_z
                )));
            }
        }
        Ok(())
    }

    /// Counts per (target, protected) cell.
    pub fn cell_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for ex in &self.examples {
            *counts.entry((ex.target, ex.protected)).or_insert(0) += 1;
        }
        counts
    }

    /// Content hash over the examples, used by run manifests and to check
    /// that two models were evaluated on the same split.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for ex in &self.examples {
            for tok in &ex.tokens {
                hasher.update(tok.as_bytes());
                hasher.update([0u8]);
            }
            hasher.update(ex.target.to_le_bytes());
            hasher.update(ex.protected.to_le_bytes());
            hasher.update([1u8]);
        }
        hex::encode(hasher.finalize())
    }
}

/// Lowercased whitespace tokenization with punctuation split off as
/// standalone tokens. Deterministic; empty input yields an empty sequence.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token <-> id bijection with reserved PAD and UNK ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
    pub pad_id: usize,
    pub unk_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary over every token with corpus frequency >= `min_freq`.
    /// Ids are dense and deterministic: PAD, UNK, then tokens in descending
    /// frequency with ties broken lexicographically.
    pub fn build(dataset: &Dataset, min_freq: usize) -> Result<Vocabulary> {
        if dataset.examples.is_empty() {
            return Err(Error::validation("cannot build a vocabulary from an empty dataset"));
        }
        if min_freq < 1 {
            return Err(Error::validation("min_freq must be >= 1"));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for ex in &dataset.examples {
            for tok in &ex.tokens {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Vocabulary::from_tokens(id_to_token, 0, 1))
    }

    /// Reconstructs the lookup table after deserialization or construction.
    pub fn from_tokens(id_to_token: Vec<String>, pad_id: usize, unk_id: usize) -> Vocabulary {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
            pad_id,
            unk_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Encodes a token sequence to ids: OOV -> unk, truncate to `max_len`,
    /// pad with pad_id. Returns the ids and the true (pre-padding) length.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> (Vec<usize>, usize) {
        assert!(max_len >= 1, "max_len must be >= 1");
        let len = tokens.len().min(max_len);
        let mut ids = Vec::with_capacity(max_len);
        for tok in tokens.iter().take(len) {
            ids.push(self.token_id(tok).unwrap_or(self.unk_id));
        }
        ids.resize(max_len, self.pad_id);
        (ids, len)
    }

    /// Inverse of `encode` up to UNK substitution; stops at padding.
    pub fn decode(&self, ids: &[usize], len: usize) -> Vec<String> {
        ids.iter()
            .take(len)
            .map(|&id| self.id_to_token[id].clone())
            .collect()
    }

    /// Stable hash of the id->token table; stored in checkpoints so that
    /// evaluation refuses mismatched preprocessing.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.id_to_token {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update(self.pad_id.to_le_bytes());
        hasher.update(self.unk_id.to_le_bytes());
        hex::encode(hasher.finalize())
    }
}

/// A model-ready example: fixed-width id buffer plus true length.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub len: usize,
    pub target: usize,
    pub protected: usize,
}

/// Encodes a whole dataset against a vocabulary.
pub fn encode_dataset(dataset: &Dataset, vocab: &Vocabulary, max_len: usize) -> Vec<EncodedExample> {
    dataset
        .examples
        .iter()
        .map(|ex| {
            let (ids, len) = vocab.encode(&ex.tokens, max_len);
            EncodedExample {
                ids,
                len,
                target: ex.target,
                protected: ex.protected,
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct JsonlRecord {
    text: String,
    target: usize,
    protected: Option<usize>,
    protected_posterior: Option<f64>,
}

/// Loads a JSONL dataset. Each line holds one record
/// `{"text", "target", "protected"? , "protected_posterior"?}` with exactly
/// one of `protected` / `protected_posterior` present; a leading `{"_meta"}`
/// record (written by the generator) is skipped. Records carrying only a
/// posterior get `protected = 1` iff posterior >= `posterior_threshold`.
pub fn load_jsonl(path: &Path, k_y: usize, k_z: usize, posterior_threshold: f64) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(format!("invalid JSON: {e}")))?;
        if value.get("_meta").is_some() {
            continue;
        }
        let record: JsonlRecord =
            serde_json::from_value(value).map_err(|e| parse_err(format!("bad record: {e}")))?;

        let tokens = tokenize(&record.text);
        if tokens.is_empty() {
            return Err(parse_err("text tokenizes to nothing".to_string()));
        }
        if record.target >= k_y {
            return Err(parse_err(format!(
                "target {} out of range for k_y={k_y}",
                record.target
            )));
        }
        let (protected, posterior) = match (record.protected, record.protected_posterior) {
            (Some(_), Some(_)) => {
                return Err(parse_err(
                    "record has both `protected` and `protected_posterior`".to_string(),
                ))
            }
            (None, None) => {
                return Err(parse_err(
                    "record has neither `protected` nor `protected_posterior`".to_string(),
                ))
            }
            (Some(p), None) => (p, None),
            (None, Some(post)) => {
                if !(0.0..=1.0).contains(&post) {
                    return Err(parse_err(format!("protected_posterior {post} not in [0,1]")));
                }
                if k_z != 2 {
                    return Err(parse_err(format!(
                        "protected_posterior thresholding requires k_z=2, got k_z={k_z}"
                    )));
                }
                (usize::from(post >= posterior_threshold), Some(post))
            }
        };
        if protected >= k_z {
            return Err(parse_err(format!(
                "protected {protected} out of range for k_z={k_z}"
            )));
        }
        examples.push(Example {
            tokens,
            target: record.target,
            protected,
            protected_posterior: posterior,
        });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(examples, k_y, k_z, name)
}

/// Writes a dataset in the JSONL schema, with an optional `_meta` record
/// on line 1 (the generator stores its spec echo and seed there).
pub fn save_jsonl(dataset: &Dataset, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
    let mut out = Vec::new();
    if let Some(meta) = meta {
        let line = serde_json::json!({ "_meta": meta });
        out.extend_from_slice(serde_json::to_string(&line).unwrap().as_bytes());
        out.push(b'\n');
    }
    for ex in &dataset.examples {
        let rec = serde_json::json!({
            "text": ex.tokens.join(" "),
            "target": ex.target,
            "protected": ex.protected,
        });
        out.extend_from_slice(serde_json::to_string(&rec).unwrap().as_bytes());
        out.push(b'\n');
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Result of a deterministic split; `stratified` is false when the dataset
/// was too small to stratify and a plain shuffled split was used instead.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub stratified: bool,
}

/// Largest-remainder allocation of `n` items across the given ratios.
fn largest_remainder(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let quotas: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // bigger remainder first; ties go to the earlier split (train, dev, test)
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Splits a dataset into train/dev/test, stratified by (target, protected)
/// cell. Within each cell, counts come from largest-remainder rounding and
/// any empty split of a cell with >= 3 members is topped up from the fullest
/// split, so every such cell appears in every split. Falls back to an
/// unstratified shuffled split (flagged) when some cell has < 3 members.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitOutcome> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::validation("split ratios must all be positive"));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split ratios must sum to 1, got {}",
            a + b + c
        )));
    }
    dataset.validate()?;

    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        cells.entry((ex.target, ex.protected)).or_default().push(i);
    }
    let stratified = cells.values().all(|v| v.len() >= 3);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    if stratified {
        for indices in cells.values() {
            let mut idx = indices.clone();
            idx.shuffle(&mut rng);
            let mut counts = largest_remainder(idx.len(), ratios);
            // guarantee every split sees the cell
            for s in 1..3 {
                while counts[s] == 0 {
                    let donor = (0..3).max_by_key(|&d| (counts[d], usize::MAX - d)).unwrap();
                    counts[donor] -= 1;
                    counts[s] += 1;
                }
            }
            let mut start = 0;
            for (s, &cnt) in counts.iter().enumerate() {
                parts[s].extend_from_slice(&idx[start..start + cnt]);
                start += cnt;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), ratios);
        let mut start = 0;
        for (s, &cnt) in counts.iter().enumerate() {
            parts[s].extend_from_slice(&idx[start..start + cnt]);
            start += cnt;
        }
    }

    let build = |name: &str, indices: &[usize]| -> Result<Dataset> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        Dataset::new(
            sorted.iter().map(|&i| dataset.examples[i].clone()).collect(),
            dataset.k_y,
            dataset.k_z,
            format!("{}-{}", dataset.name, name),
        )
    };
    Ok(SplitOutcome {
        train: build("train", &parts[0])?,
        dev: build("dev", &parts[1])?,
        test: build("test", &parts[2])?,
        stratified,
    })
}

/// Parameters of the synthetic confounded corpus. The generator plants a
/// causal target signal (toxicity-marker tokens) and a spurious protected
/// signal (dialect-marker tokens) whose correlation with the target is
/// controlled by `q1 - q0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    /// Tokens per example.
    pub length: usize,
    pub n_neutral: usize,
    pub n_toxmark: usize,
    pub n_dialmark: usize,
    /// Toxicity markers planted in each target=1 example.
    pub k_tox: usize,
    /// Dialect markers planted in each protected=1 example.
    pub k_dial: usize,
    /// Base rate of protected = 1.
    pub p_z: f64,
    /// P(target=1 | protected=1).
    pub q1: f64,
    /// P(target=1 | protected=0).
    pub q0: f64,
    /// Probability of dropping each planted marker.
    pub marker_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_examples: 1000,
            length: 12,
            n_neutral: 100,
            n_toxmark: 12,
            n_dialmark: 12,
            k_tox: 2,
            k_dial: 2,
            p_z: 0.5,
            q1: 0.9,
            q0: 0.1,
            marker_noise: 0.0,
            seed: 2020,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                Err(Error::validation(format!("{name} = {v} is not in [0,1]")))
            } else {
                Ok(())
            }
        };
        prob("p_z", self.p_z)?;
        prob("q1", self.q1)?;
        prob("q0", self.q0)?;
        if !(0.0..1.0).contains(&self.marker_noise) {
            return Err(Error::validation(format!(
                "marker_noise = {} is not in [0,1)",
                self.marker_noise
            )));
        }
        if self.n_examples == 0 {
            return Err(Error::validation("n_examples must be > 0"));
        }
        if self.k_tox + self.k_dial > self.length {
            return Err(Error::validation(format!(
                "k_tox + k_dial = {} exceeds length = {}",
                self.k_tox + self.k_dial,
                self.length
            )));
        }
        if self.k_tox > self.n_toxmark {
            return Err(Error::validation("k_tox exceeds n_toxmark"));
        }
        if self.k_dial > self.n_dialmark {
            return Err(Error::validation("k_dial exceeds n_dialmark"));
        }
        if self.n_neutral == 0 {
            return Err(Error::validation("n_neutral must be > 0"));
        }
        Ok(())
    }

    pub fn toxic_marker(&self, i: usize) -> String {
        format!("tox{i}")
    }

    pub fn dialect_marker(&self, i: usize) -> String {
        format!("dia{i}")
    }

    pub fn neutral_token(&self, i: usize) -> String {
        format!("neu{i}")
    }
}

/// Generates the synthetic corpus. For each example: draw z ~ Bern(p_z),
/// draw y ~ Bern(q_z); plant k_tox toxicity markers when y=1 and k_dial
/// dialect markers when z=1 (each kept with probability 1 - marker_noise,
/// markers sampled without replacement from disjoint vocabularies), fill
/// the rest with uniform neutral tokens, then shuffle the token order.
/// Byte-identical output for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_examples);

    for _ in 0..spec.n_examples {
        let z = usize::from(rng.random::<f64>() < spec.p_z);
        let q = if z == 1 { spec.q1 } else { spec.q0 };
        let y = usize::from(rng.random::<f64>() < q);

        let mut tokens: Vec<String> = Vec::with_capacity(spec.length);
        if y == 1 {
            for i in rand::seq::index::sample(&mut rng, spec.n_toxmark, spec.k_tox) {
                if rng.random::<f64>() >= spec.marker_noise {
                    tokens.push(spec.toxic_marker(i));
                }
            }
        }
        if z == 1 {
            for i in rand::seq::index::sample(&mut rng, spec.n_dialmark, spec.k_dial) {
                if rng.random::<f64>() >= spec.marker_noise {
                    tokens.push(spec.dialect_marker(i));
                }
            }
        }
        while tokens.len() < spec.length {
            tokens.push(spec.neutral_token(rng.random_range(0..spec.n_neutral)));
        }
        tokens.shuffle(&mut rng);
        examples.push(Example {
            tokens,
            target: y,
            protected: z,
            protected_posterior: None,
        });
    }
    Dataset::new(examples, 2, 2, format!("synthetic-{}", spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_whitespace() {
        assert_eq!(tokenize("I am hungry"), vec!["i", "am", "hungry"]);
        assert_eq!(tokenize("need dat shower"), vec!["need", "dat", "shower"]);
    }

    #[test]
    fn tokenize_punctuation_standalone() {
        assert_eq!(tokenize("hatin on someone,"), vec!["hatin", "on", "someone", ","]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("  \t \n"), Vec::<String>::new());
    }

    fn tiny_dataset(texts: &[&str]) -> Dataset {
        let examples = texts
            .iter()
            .map(|t| Example {
                tokens: tokenize(t),
                target: 0,
                protected: 0,
                protected_posterior: None,
            })
            .collect();
        Dataset::new(examples, 2, 2, "tiny").unwrap()
    }

    #[test]
    fn vocab_min_freq_one() {
        let ds = tiny_dataset(&["a a b"]);
        let vocab = Vocabulary::build(&ds, 1).unwrap();
        assert_eq!(vocab.len(), 4); // PAD, UNK, a, b
        assert_eq!(vocab.token(0), Some(PAD_TOKEN));
        assert_eq!(vocab.token(1), Some(UNK_TOKEN));
        assert_eq!(vocab.token_id("a"), Some(2));
        assert_eq!(vocab.token_id("b"), Some(3));
    }

    #[test]
    fn vocab_min_freq_two_maps_tail_to_unk() {
        let ds = tiny_dataset(&["a a b"]);
        let vocab = Vocabulary::build(&ds, 2).unwrap();
        assert_eq!(vocab.len(), 3); // PAD, UNK, a
        let (ids, len) = vocab.encode(&tokenize("a b"), 4);
        assert_eq!(len, 2);
        assert_eq!(ids[0], vocab.token_id("a").unwrap());
        assert_eq!(ids[1], vocab.unk_id);
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let ds = tiny_dataset(&["b a c a b c"]);
        let vocab = Vocabulary::build(&ds, 1).unwrap();
        assert_eq!(vocab.token_id("a"), Some(2));
        assert_eq!(vocab.token_id("b"), Some(3));
        assert_eq!(vocab.token_id("c"), Some(4));
    }

    #[test]
    fn encode_pads_and_truncates() {
        let ds = tiny_dataset(&["a b"]);
        let vocab = Vocabulary::build(&ds, 1).unwrap();
        let (ids, len) = vocab.encode(&tokenize("a b"), 4);
        assert_eq!(len, 2);
        assert_eq!(ids, vec![2, 3, vocab.pad_id, vocab.pad_id]);

        let long: Vec<String> = (0..50).map(|_| "a".to_string()).collect();
        let (ids, len) = vocab.encode(&long, 32);
        assert_eq!(ids.len(), 32);
        assert_eq!(len, 32);
    }

    #[test]
    fn synthetic_markers_all_in_vocab() {
        // every planted marker token appears often enough for the cutoff;
        // checked with an independent frequency count over the corpus
        let spec = SyntheticSpec {
            n_examples: 1000,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mut freq: HashMap<String, usize> = HashMap::new();
        for ex in &ds.examples {
            for t in &ex.tokens {
                *freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let vocab = Vocabulary::build(&ds, 2).unwrap();
        for i in 0..spec.n_toxmark {
            let m = spec.toxic_marker(i);
            assert!(freq[&m] >= 2, "marker {m} too rare: {}", freq[&m]);
            assert!(vocab.token_id(&m).is_some());
        }
        for i in 0..spec.n_dialmark {
            let m = spec.dialect_marker(i);
            assert!(freq[&m] >= 2, "marker {m} too rare: {}", freq[&m]);
            assert!(vocab.token_id(&m).is_some());
        }
    }

    #[test]
    fn jsonl_posterior_thresholding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"text\": \"x y\", \"target\": 0, \"protected_posterior\": 0.85}\n",
                "{\"text\": \"x y\", \"target\": 0, \"protected_posterior\": 0.80}\n",
                "{\"text\": \"x y\", \"target\": 0, \"protected_posterior\": 0.79}\n",
            ),
        )
        .unwrap();
        let ds = load_jsonl(&path, 2, 2, 0.8).unwrap();
        assert_eq!(ds.examples[0].protected, 1);
        assert_eq!(ds.examples[1].protected, 1, "threshold is inclusive");
        assert_eq!(ds.examples[2].protected, 0);
    }

    #[test]
    fn jsonl_rejects_bad_lines_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"text\": \"x\", \"target\": 0, \"protected\": 0}\n",
                "{\"text\": \"x\", \"target\": 0}\n",
            ),
        )
        .unwrap();
        let err = load_jsonl(&path, 2, 2, 0.8).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "{\"text\": \"x\", \"target\": 5, \"protected\": 0}\n").unwrap();
        assert!(load_jsonl(&path, 2, 2, 0.8).is_err());

        assert!(load_jsonl(Path::new("/nonexistent/nope.jsonl"), 2, 2, 0.8).is_err());
    }

    #[test]
    fn jsonl_skips_meta_line_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let spec = SyntheticSpec {
            n_examples: 50,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        save_jsonl(&ds, &path, Some(serde_json::json!({"seed": spec.seed}))).unwrap();
        let loaded = load_jsonl(&path, 2, 2, 0.8).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.examples.iter().zip(&loaded.examples) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.target, b.target);
            assert_eq!(a.protected, b.protected);
        }
    }

    #[test]
    fn split_sizes_largest_remainder() {
        // ten examples in a single (target, protected) cell
        let ds = tiny_dataset(&["a"; 10]);
        let out = split(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert!(out.stratified);
        assert_eq!(out.train.len(), 8);
        assert_eq!(out.dev.len(), 1);
        assert_eq!(out.test.len(), 1);
    }

    #[test]
    fn split_deterministic_and_partition() {
        let spec = SyntheticSpec {
            n_examples: 200,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let s1 = split(&ds, (0.8, 0.1, 0.1), 42).unwrap();
        let s2 = split(&ds, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(s1.train.content_hash(), s2.train.content_hash());
        assert_eq!(s1.dev.content_hash(), s2.dev.content_hash());
        assert_eq!(s1.test.content_hash(), s2.test.content_hash());

        // pairwise disjoint cover (token seqs can repeat, so count multiset)
        assert_eq!(s1.train.len() + s1.dev.len() + s1.test.len(), ds.len());
        let mut all: Vec<String> = Vec::new();
        for part in [&s1.train, &s1.dev, &s1.test] {
            for ex in &part.examples {
                all.push(format!("{}|{}|{}", ex.tokens.join(" "), ex.target, ex.protected));
            }
        }
        all.sort();
        let mut orig: Vec<String> = ds
            .examples
            .iter()
            .map(|ex| format!("{}|{}|{}", ex.tokens.join(" "), ex.target, ex.protected))
            .collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_small_cells_present_in_every_split() {
        let mut examples = Vec::new();
        // one cell with exactly 3 members, another with 30
        for i in 0..33 {
            examples.push(Example {
                tokens: vec![format!("t{i}")],
                target: usize::from(i < 3),
                protected: 0,
                protected_posterior: None,
            });
        }
        let ds = Dataset::new(examples, 2, 2, "cells").unwrap();
        let out = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert!(out.stratified);
        for part in [&out.train, &out.dev, &out.test] {
            assert!(part.examples.iter().any(|e| e.target == 1), "cell missing from a split");
        }
    }

    #[test]
    fn split_proportions_hold_per_cell() {
        let spec = SyntheticSpec {
            n_examples: 1000,
            q1: 0.5,
            q0: 0.5,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let out = split(&ds, (0.8, 0.1, 0.1), 11).unwrap();
        let full = ds.cell_counts();
        for (part, ratio) in [(&out.train, 0.8), (&out.dev, 0.1), (&out.test, 0.1)] {
            let counts = part.cell_counts();
            for (cell, &n_full) in &full {
                let n_part = *counts.get(cell).unwrap_or(&0);
                let got = n_part as f64 / part.len() as f64;
                let want = n_full as f64 / ds.len() as f64;
                assert!(
                    (got - want).abs() <= 0.02,
                    "cell {cell:?} proportion {got:.3} vs {want:.3} in ratio-{ratio} split"
                );
            }
        }
    }

    #[test]
    fn split_too_small_falls_back() {
        let mut examples = Vec::new();
        for i in 0..8 {
            examples.push(Example {
                tokens: vec![format!("t{i}")],
                target: usize::from(i == 0), // a 1-member cell
                protected: 0,
                protected_posterior: None,
            });
        }
        let ds = Dataset::new(examples, 2, 2, "small").unwrap();
        let out = split(&ds, (0.5, 0.25, 0.25), 1).unwrap();
        assert!(!out.stratified);
        assert_eq!(out.train.len() + out.dev.len() + out.test.len(), 8);
    }

    #[test]
    fn synthetic_determinism() {
        let spec = SyntheticSpec {
            n_examples: 300,
            marker_noise: 0.3,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.examples, b.examples);
        let different = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.examples, different.examples);
    }

    #[test]
    fn synthetic_independence_when_q_equal() {
        let spec = SyntheticSpec {
            n_examples: 10_000,
            q1: 0.5,
            q0: 0.5,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let n = ds.len() as f64;
        let (mut my, mut mz, mut myz) = (0.0, 0.0, 0.0);
        for ex in &ds.examples {
            my += ex.target as f64;
            mz += ex.protected as f64;
            myz += (ex.target * ex.protected) as f64;
        }
        my /= n;
        mz /= n;
        myz /= n;
        let corr = (myz - my * mz) / (my * (1.0 - my) * mz * (1.0 - mz)).sqrt();
        assert!(corr.abs() <= 0.03, "corr(y,z) = {corr}");
    }

    #[test]
    fn synthetic_conditional_rate() {
        let spec = SyntheticSpec {
            n_examples: 10_000,
            q1: 0.9,
            q0: 0.1,
            p_z: 0.5,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let (mut n1, mut y1) = (0usize, 0usize);
        for ex in &ds.examples {
            if ex.protected == 1 {
                n1 += 1;
                y1 += ex.target;
            }
        }
        let rate = y1 as f64 / n1 as f64;
        assert!((0.88..=0.92).contains(&rate), "P(y=1|z=1) = {rate}");
    }

    #[test]
    fn synthetic_planted_signals_separable() {
        // with no marker noise the planted rules recover both labels exactly
        let spec = SyntheticSpec {
            n_examples: 2000,
            marker_noise: 0.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for ex in &ds.examples {
            let any_tox = ex.tokens.iter().any(|t| t.starts_with("tox"));
            let any_dial = ex.tokens.iter().any(|t| t.starts_with("dia"));
            assert_eq!(usize::from(any_tox), ex.target);
            assert_eq!(usize::from(any_dial), ex.protected);
            if ex.target == 1 {
                let k = ex.tokens.iter().filter(|t| t.starts_with("tox")).count();
                assert_eq!(k, spec.k_tox);
            }
            assert_eq!(ex.tokens.len(), spec.length);
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let err = generate_synthetic(&SyntheticSpec {
            q1: 1.5,
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("q1"), "message was: {err}");

        assert!(SyntheticSpec {
            k_tox: 10,
            k_dial: 10,
            length: 12,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-c]{1,3}", 1..12)) {
            let ds = tiny_dataset(&["a b c aa bb cc aaa bbb ccc ab bc ca abc bca cab"]);
            let vocab = Vocabulary::build(&ds, 1).unwrap();
            let tokens: Vec<String> = words;
            let (ids, len) = vocab.encode(&tokens, 16);
            let decoded = vocab.decode(&ids, len);
            prop_assert_eq!(decoded.len(), tokens.len().min(16));
            for (orig, dec) in tokens.iter().zip(&decoded) {
                if vocab.token_id(orig).is_some() {
                    prop_assert_eq!(orig, dec);
                } else {
                    prop_assert_eq!(dec.as_str(), UNK_TOKEN);
                }
            }
        }

        #[test]
        fn tokenize_never_emits_empty_tokens(text in ".{0,80}") {
            for tok in tokenize(&text) {
                prop_assert!(!tok.is_empty());
            }
        }
    }
}
