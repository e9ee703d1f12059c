//! Vocabulary, tokenization, CSV ingestion and the seeded synthetic corpus.
//! This is the only module that ever sees text.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{AttentionMask, TokenBatch, CLS, NUM_RESERVED, PAD, SEP, UNK};

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` lines, reserved tokens first.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Parse { line: n + 1, msg: "expected token<TAB>id".into() })?;
            let id: usize = id.parse().map_err(|_| Error::Parse { line: n + 1, msg: format!("bad id {id:?}") })?;
            ensure!(id == n, InvalidArgument, "vocabulary ids must be dense; line {} has id {id}", n + 1);
            tokens.push(tok.to_string());
        }
        ensure!(tokens.len() > NUM_RESERVED, InvalidArgument, "vocabulary file holds no content tokens");
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            ensure!(tokens[i] == *r, InvalidArgument, "reserved id {i} must be {r}, found {:?}", tokens[i]);
        }
        Self::from_tokens(tokens)
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Most frequent lowercase whitespace tokens, ties broken lexicographically,
/// after the reserved ids. `cap` bounds the total size.
pub fn build_vocab<'a, I>(lines: I, cap: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    ensure!(cap > NUM_RESERVED, InvalidArgument, "vocabulary cap {cap} leaves no room past the reserved ids");
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in lines {
        for tok in tokenize(line) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    for r in RESERVED_TOKENS {
        counts.remove(&r.to_lowercase());
        counts.remove(r);
    }
    ensure!(!counts.is_empty(), InvalidArgument, "cannot build a vocabulary from an empty corpus");
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(cap - NUM_RESERVED).map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Content ids for `text` (no special tokens).
pub fn content_ids(text: &str, vocab: &Vocab) -> Vec<usize> {
    tokenize(text).map(|t| vocab.id(&t)).collect()
}

/// `[CLS] content [SEP]` padded with `[PAD]` to exactly `max_len` ids.
pub fn wrap_ids(content: &[usize], max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    ensure!(max_len >= 3, InvalidArgument, "max_len must be >= 3, got {max_len}");
    let keep = content.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(&content[..keep]);
    ids.push(SEP);
    ids.resize(max_len, PAD);
    let mask = ids.iter().map(|&t| t != PAD).collect();
    Ok((ids, mask))
}

pub fn encode_text(text: &str, vocab: &Vocab, max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    wrap_ids(&content_ids(text, vocab), max_len)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub label: usize,
    pub token_ids: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Wraps examples into a padded token batch. Rows are padded to the longest
/// wrapped example, capped at `max_len`.
pub fn make_batch(examples: &[&Example], max_len: usize) -> Result<(TokenBatch, AttentionMask)> {
    let seq = examples.iter().map(|e| (e.token_ids.len() + 2).min(max_len)).max().unwrap_or(3).max(3);
    let mut ids = Vec::with_capacity(examples.len() * seq);
    for e in examples {
        ensure!(
            e.token_ids.iter().all(|&t| t >= NUM_RESERVED || t == UNK),
            InvalidArgument,
            "reserved id inside example content"
        );
        ids.extend(wrap_ids(&e.token_ids, max_len)?.0.into_iter().take(seq));
    }
    let tokens = TokenBatch::new(examples.len(), seq, ids)?;
    let mask = tokens.attention_mask()?;
    Ok((tokens, mask))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextRecord {
    pub label: usize,
    pub text: String,
}

/// Reads `label,text` rows; commas inside text must be double-quoted.
pub fn read_labeled_csv(path: &Path, num_classes: Option<usize>) -> Result<Vec<TextRecord>> {
    let file = std::fs::File::open(path)?;
    read_labeled_csv_from(file, num_classes)
}

pub fn read_labeled_csv_from<R: std::io::Read>(reader: R, num_classes: Option<usize>) -> Result<Vec<TextRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(false).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != 2 {
            return Err(Error::Parse { line, msg: format!("expected 2 fields, found {}", rec.len()) });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| Error::Parse { line, msg: format!("bad label {:?}", &rec[0]) })?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(Error::Parse { line, msg: format!("label {label} out of range for {c} classes") });
            }
        }
        out.push(TextRecord { label, text: rec[1].to_string() });
    }
    Ok(out)
}

pub fn write_labeled_csv<W: Write>(writer: W, records: &[TextRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for r in records {
        w.write_record([r.label.to_string().as_str(), r.text.as_str()]).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministically moves `fraction` of the records (rounded) into a
/// validation split. Remaining train records keep their original order.
pub fn split_validation(records: Vec<TextRecord>, fraction: f64, seed: u64) -> (Vec<TextRecord>, Vec<TextRecord>) {
    let n = records.len();
    let n_valid = ((n as f64) * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chosen: BTreeSet<usize> = idx[..n_valid].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_valid);
    let mut valid = Vec::with_capacity(n_valid);
    for (i, r) in records.into_iter().enumerate() {
        if chosen.contains(&i) {
            valid.push(r);
        } else {
            train.push(r);
        }
    }
    (train, valid)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextCorpus {
    pub train: Vec<TextRecord>,
    pub valid: Vec<TextRecord>,
    pub test: Vec<TextRecord>,
}

/// Loads train/test CSVs; without a validation file, 10% of train is held out.
pub fn load_csv_dataset(
    train: &Path,
    valid: Option<&Path>,
    test: &Path,
    num_classes: usize,
    seed: u64,
) -> Result<TextCorpus> {
    let train_records = read_labeled_csv(train, Some(num_classes))?;
    let test = read_labeled_csv(test, Some(num_classes))?;
    let (train, valid) = match valid {
        Some(p) => (train_records, read_labeled_csv(p, Some(num_classes))?),
        None => split_validation(train_records, 0.1, seed),
    };
    Ok(TextCorpus { train, valid, test })
}

impl TextCorpus {
    pub fn build_vocab(&self, cap: usize) -> Result<Vocab> {
        build_vocab(self.train.iter().map(|r| r.text.as_str()), cap)
    }

    pub fn encode(&self, vocab: &Vocab) -> [DatasetSplit; 3] {
        [
            encode_split(SplitName::Train, &self.train, vocab),
            encode_split(SplitName::Valid, &self.valid, vocab),
            encode_split(SplitName::Test, &self.test, vocab),
        ]
    }
}

pub fn encode_split(name: SplitName, records: &[TextRecord], vocab: &Vocab) -> DatasetSplit {
    DatasetSplit {
        name,
        examples: records.iter().map(|r| Example { label: r.label, token_ids: content_ids(&r.text, vocab) }).collect(),
    }
}

/// Seeded generator for keyword-driven topic sentences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub keyword_pools: Vec<Vec<String>>,
    pub filler_pool: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a sentence carries one keyword of another class.
    pub distractor_prob: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Desk corpus: `num_classes` topics of 12 keywords, 240 fillers,
    /// 4–12 words per sentence, 2000/500/500 examples.
    pub fn desk(num_classes: usize, seed: u64) -> Self {
        let keyword_pools = (0..num_classes).map(|c| (0..12).map(|j| format!("topic{c}word{j}")).collect()).collect();
        let filler_pool = (0..240).map(|j| format!("filler{j}")).collect();
        Self {
            num_classes,
            keyword_pools,
            filler_pool,
            min_words: 4,
            max_words: 12,
            distractor_prob: 0.5,
            train: 2000,
            valid: 500,
            test: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 1, Config, "num_classes must be >= 1");
        ensure!(self.keyword_pools.len() == self.num_classes, Config, "need one keyword pool per class");
        ensure!(self.keyword_pools.iter().all(|p| !p.is_empty()), Config, "keyword pools must be non-empty");
        ensure!(!self.filler_pool.is_empty(), Config, "filler pool must be non-empty");
        ensure!(self.min_words >= 3 && self.min_words <= self.max_words, Config, "need 3 <= min_words <= max_words");
        ensure!((0.0..=1.0).contains(&self.distractor_prob), Config, "distractor_prob must lie in [0, 1]");
        let mut seen = BTreeSet::new();
        for w in self.keyword_pools.iter().flatten().chain(&self.filler_pool) {
            let w = w.to_lowercase();
            ensure!(!w.contains(char::is_whitespace) && !w.is_empty(), Config, "pool word {w:?} must be one token");
            if !seen.insert(w.clone()) {
                return Err(Error::Config(format!("word {w:?} appears in more than one pool")));
            }
        }
        Ok(())
    }

    fn sentence(&self, label: usize, rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(self.min_words..=self.max_words);
        let own = rng.gen_range(2..=3usize).min(len);
        let mut words: Vec<&str> = (0..own).map(|_| self.keyword_pools[label].choose(rng).unwrap().as_str()).collect();
        if self.num_classes > 1 && words.len() < len && rng.gen_bool(self.distractor_prob) {
            let other = (label + rng.gen_range(1..self.num_classes)) % self.num_classes;
            words.push(self.keyword_pools[other].choose(rng).unwrap());
        }
        while words.len() < len {
            words.push(self.filler_pool.choose(rng).unwrap());
        }
        words.shuffle(rng);
        words.join(" ")
    }

    pub fn generate(&self) -> Result<TextCorpus> {
        generate_synthetic(self)
    }
}

/// Every sentence holds two or three keywords of its class, optionally one
/// keyword of another class, and fillers.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TextCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |n: usize| -> Vec<TextRecord> {
        (0..n)
            .map(|i| {
                let label = i % spec.num_classes;
                TextRecord { label, text: spec.sentence(label, &mut rng) }
            })
            .collect::<Vec<_>>()
    };
    let mut train = make(spec.train);
    let valid = make(spec.valid);
    let test = make(spec.test);
    train.shuffle(&mut rng);
    Ok(TextCorpus { train, valid, test })
}
