use std::fs;
use std::path::Path;

use super::filter::{filter_corpus, FilterSpec, FilterStats};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::checkpoint::Reader;

pub type Pair = (Vec<usize>, Vec<usize>);

/// Sentence pairs of one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainDataset {
    domain_id: String,
    pairs: Vec<Pair>,
}

impl DomainDataset {
    pub fn new(domain_id: impl Into<String>, pairs: Vec<Pair>) -> Result<Self> {
        let domain_id = domain_id.into();
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Data(format!("{domain_id}: pair {i} has an empty side")));
        }
        Ok(Self { domain_id, pairs })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every id is below `vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        let bad = self
            .pairs
            .iter()
            .flat_map(|(s, t)| s.iter().chain(t))
            .find(|&&id| id >= vocab_size);
        match bad {
            Some(id) => Err(Error::Data(format!("{}: token {id} outside vocabulary {vocab_size}", self.domain_id))),
            None => Ok(()),
        }
    }

    /// Concatenates several domains into one mixed dataset.
    pub fn concat(id: &str, parts: &[&DomainDataset]) -> Result<Self> {
        let pairs = parts.iter().flat_map(|d| d.pairs.iter().cloned()).collect();
        Self::new(id, pairs)
    }

    pub fn max_src_len(&self) -> usize {
        self.pairs.iter().map(|p| p.0.len()).max().unwrap_or(0)
    }

    pub fn max_tgt_len(&self) -> usize {
        self.pairs.iter().map(|p| p.1.len()).max().unwrap_or(0)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"DOSSDATA";
const CACHE_VERSION: u16 = 1;

/// Cache layout: magic, u16 version, u16-prefixed domain id, u32 pair count,
/// then per pair u32 source length, u32 target length and the ids as u32.
pub fn encode_dataset(d: &DomainDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.domain_id.len() as u16).to_le_bytes());
    buf.extend_from_slice(d.domain_id.as_bytes());
    buf.extend_from_slice(&(d.pairs.len() as u32).to_le_bytes());
    for (s, t) in &d.pairs {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for &id in s.iter().chain(t) {
            buf.extend_from_slice(&(id as u32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<DomainDataset> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != CACHE_MAGIC {
        return Err(Error::format(path, "bad dataset magic"));
    }
    if r.u16()? != CACHE_VERSION {
        return Err(Error::format(path, "unsupported dataset version"));
    }
    let id_len = r.u16()? as usize;
    let id = r.string(id_len)?;
    let n = r.u32()? as usize;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let ls = r.u32()? as usize;
        let lt = r.u32()? as usize;
        let s = (0..ls).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let t = (0..lt).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        pairs.push((s, t));
    }
    r.finish()?;
    DomainDataset::new(id, pairs).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_dataset(d: &DomainDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}

/// Reads two aligned newline-delimited UTF-8 files, filters them and encodes
/// them with whitespace tokenisation. Blank lines on either side are dropped
/// before filtering.
pub fn read_parallel_text(
    domain_id: &str,
    src_path: &Path,
    tgt_path: &Path,
    vocab: &Vocab,
    filter: &FilterSpec,
) -> Result<(DomainDataset, FilterStats)> {
    let src = fs::read_to_string(src_path).map_err(|e| Error::io(src_path, e))?;
    let tgt = fs::read_to_string(tgt_path).map_err(|e| Error::io(tgt_path, e))?;
    let (src_lines, tgt_lines): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src_lines.len(),
            tgt_path.display(),
            tgt_lines.len()
        )));
    }
    let pairs: Vec<Pair> = src_lines
        .iter()
        .zip(&tgt_lines)
        .map(|(s, t)| (vocab.encode(s), vocab.encode(t)))
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .collect();
    let (kept, stats) = filter_corpus(pairs, filter)?;
    Ok((DomainDataset::new(domain_id, kept)?, stats))
}

/// Vocabulary over every whitespace token of the given files, in first-seen order.
pub fn vocab_from_files(paths: &[&Path]) -> Result<Vocab> {
    let mut words = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(*path, e))?;
        for w in text.split_whitespace() {
            if seen.insert(w.to_string()) {
                words.push(w.to_string());
            }
        }
    }
    Vocab::from_words(words)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let d = DomainDataset::new("emea", vec![(vec![4, 5], vec![6]), (vec![7], vec![8, 9, 10])]).unwrap();
        let bytes = encode_dataset(&d);
        assert_eq!(decode_dataset(&bytes, Path::new("c")).unwrap(), d);
        assert!(decode_dataset(&bytes[..bytes.len() - 2], Path::new("c")).is_err());
    }

    #[test]
    fn empty_side_rejected() {
        assert!(DomainDataset::new("x", vec![(vec![], vec![4])]).is_err());
    }

    #[test]
    fn parallel_text_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.de"), dir.path().join("a.en"));
        fs::write(&s, "das haus\nein sehr sehr sehr langer satz\n\nklein\n").unwrap();
        fs::write(&t, "the house\nlong\nx\nsmall\n").unwrap();
        let vocab = vocab_from_files(&[&s, &t]).unwrap();
        let (d, stats) = read_parallel_text("test", &s, &t, &vocab, &FilterSpec::default()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(stats.dropped_ratio, 1);
        assert_eq!(vocab.decode(&d.pairs()[0].1), "the house");
        fs::write(&t, "one\n").unwrap();
        assert!(read_parallel_text("test", &s, &t, &vocab, &FilterSpec::default()).is_err());
    }
}
