//! Corpus materialization and split loading, all through the audit log.

use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use asdfd_core::corpus::{encode_split, read_labeled_csv_from, split_validation, write_labeled_csv, DatasetSplit, SplitName, TextCorpus, Vocab};

use crate::audit;
use crate::config::{CorpusSource, RunConfig};

pub const VOCAB_FILE: &str = "vocab.tsv";

pub fn split_path(out: &Path, split: SplitName) -> PathBuf {
    let name = match split {
        SplitName::Train => "train",
        SplitName::Valid => "valid",
        SplitName::Test => "test",
    };
    out.join("data").join(format!("{name}.csv"))
}

fn read_csv(path: &Path, num_classes: usize) -> anyhow::Result<Vec<asdfd_core::corpus::TextRecord>> {
    let f = audit::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_labeled_csv_from(f, Some(num_classes)).with_context(|| format!("reading {}", path.display()))
}

/// The corpus named by the config: generated, or read from CSV files.
pub fn load_corpus(cfg: &RunConfig) -> anyhow::Result<TextCorpus> {
    match &cfg.corpus {
        CorpusSource::Synthetic(s) => Ok(s.spec().generate()?),
        CorpusSource::Csv(c) => {
            let train = read_csv(&c.train, c.num_classes)?;
            let test = read_csv(&c.test, c.num_classes)?;
            let (train, valid) = match &c.valid {
                Some(p) => (train, read_csv(p, c.num_classes)?),
                None => split_validation(train, 0.1, cfg.seed),
            };
            Ok(TextCorpus { train, valid, test })
        }
    }
}

pub fn num_classes(cfg: &RunConfig) -> usize {
    match &cfg.corpus {
        CorpusSource::Synthetic(s) => s.num_classes,
        CorpusSource::Csv(c) => c.num_classes,
    }
}

/// Writes the three splits under `out/data/`.
pub fn write_corpus(out: &Path, corpus: &TextCorpus) -> anyhow::Result<()> {
    for (split, recs) in [(SplitName::Train, &corpus.train), (SplitName::Valid, &corpus.valid), (SplitName::Test, &corpus.test)] {
        let path = split_path(out, split);
        write_labeled_csv(audit::create(&path)?, recs).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> anyhow::Result<()> {
    vocab.write_to(audit::create(path)?)?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> anyhow::Result<Vocab> {
    let f = audit::open(path).with_context(|| format!("opening vocabulary {}", path.display()))?;
    Vocab::read_from(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// One split previously written by `teacher-train`, encoded with `vocab`.
pub fn load_split(out: &Path, split: SplitName, vocab: &Vocab, num_classes: usize) -> anyhow::Result<DatasetSplit> {
    let recs = read_csv(&split_path(out, split), num_classes)?;
    Ok(encode_split(split, &recs, vocab))
}
