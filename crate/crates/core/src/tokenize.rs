//! Byte-pair-encoded wordpieces and lexicon phone labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ctc::{LabelSequence, BLANK};
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const BLANK_PIECE: &str = "<blank>";
const VOCAB_HEADER: &str = "#hmctc-wordpieces v1";

/// Classic BPE merge list plus the piece inventory (id 0 is the CTC blank).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordpieceVocab {
    merges: Vec<(String, String)>,
    pieces: Vec<String>,
    ids: HashMap<String, usize>,
    target_size: usize,
}

fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            let merged = format!("{a}{b}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Pieces every word of `corpus` can start from: each character, and each
/// word-final character with the end-of-word marker.
fn base_alphabet<'a>(words: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    let mut base = BTreeSet::new();
    for w in words {
        for (i, c) in w.chars().enumerate() {
            base.insert(c.to_string());
            if i + 1 == w.chars().count() {
                base.insert(format!("{c}{END_OF_WORD}"));
            }
        }
    }
    base
}

/// Learns merges from a word-frequency table until the vocabulary holds
/// `target_size` entries (blank included) or no adjacent pair occurs twice.
///
/// Ties on pair frequency go to the lexicographically smallest pair.
pub fn learn_bpe(corpus: &BTreeMap<String, usize>, target_size: usize) -> Result<WordpieceVocab> {
    if corpus.keys().any(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
        return Err(Error::config("vocab.corpus", "words must be non-empty and whitespace-free"));
    }
    let base = base_alphabet(corpus.keys().map(String::as_str));
    if target_size < base.len() + 1 {
        return Err(Error::config(
            "vocab.size",
            format!(
                "target size {target_size} is below the character inventory ({} base pieces + blank)",
                base.len()
            ),
        ));
    }
    let mut pieces: Vec<String> = std::iter::once(BLANK_PIECE.to_owned()).chain(base).collect();
    let mut known: BTreeSet<String> = pieces.iter().cloned().collect();
    let mut words: Vec<(Vec<String>, usize)> = corpus
        .iter()
        .map(|(w, &n)| (split_word(w), n))
        .collect();
    let mut merges = Vec::new();

    while pieces.len() < target_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += freq;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first maximum wins ties.
        let best = counts
            .iter()
            .fold(None::<((&str, &str), usize)>, |acc, (&pair, &n)| match acc {
                Some((_, m)) if m >= n => acc,
                _ => Some((pair, n)),
            });
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_owned(), b.to_owned());
        for (symbols, _) in &mut words {
            apply_merge(symbols, &a, &b);
        }
        let merged = format!("{a}{b}");
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
        merges.push((a, b));
    }
    Ok(WordpieceVocab::from_parts(merges, pieces, target_size))
}

impl WordpieceVocab {
    fn from_parts(merges: Vec<(String, String)>, pieces: Vec<String>, target_size: usize) -> Self {
        let ids = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self {
            merges,
            pieces,
            ids,
            target_size,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.ids.get(piece).copied()
    }

    pub fn encode(&self, word: &str) -> Result<Vec<usize>> {
        let mut symbols = split_word(word);
        for (sym, ch) in symbols.iter().zip(word.chars()) {
            if !self.ids.contains_key(sym) {
                return Err(Error::UnknownCharacter {
                    word: word.to_owned(),
                    ch,
                });
            }
        }
        for (a, b) in &self.merges {
            apply_merge(&mut symbols, a, b);
        }
        symbols
            .iter()
            .map(|s| {
                self.id(s).ok_or_else(|| Error::Validation(format!("piece {s:?} missing from vocabulary")))
            })
            .collect()
    }

    /// Encodes a word sequence into one CTC target.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<LabelSequence> {
        let mut ids = Vec::new();
        for w in words {
            ids.extend(self.encode(w.as_ref())?);
        }
        LabelSequence::new(ids)
    }

    /// Joins pieces into words, closing a word at each end-of-word marker.
    /// Blank and unknown ids are skipped; an unterminated tail becomes a final word.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut words = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if id == BLANK {
                continue;
            }
            let Some(piece) = self.piece(id) else { continue };
            if let Some(stem) = piece.strip_suffix(END_OF_WORD) {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            } else {
                current.push_str(piece);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{VOCAB_HEADER}").unwrap();
        writeln!(out, "#target_size {}", self.target_size).unwrap();
        writeln!(out, "#merges {}", self.merges.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}").unwrap();
        }
        writeln!(out, "#pieces {}", self.pieces.len()).unwrap();
        for (i, p) in self.pieces.iter().enumerate() {
            writeln!(out, "{p}\t{i}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err("missing vocabulary header".into());
        }
        let mut count_line = |tag: &str| -> std::result::Result<usize, String> {
            let line = lines.next().ok_or_else(|| format!("missing {tag}"))?;
            line.strip_prefix(tag)
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| format!("malformed line {line:?}, expected {tag}"))
        };
        let target_size = count_line("#target_size")?;
        let n_merges = count_line("#merges")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or("truncated merge list")?;
            let (a, b) = line.split_once(' ').ok_or_else(|| format!("malformed merge {line:?}"))?;
            merges.push((a.to_owned(), b.to_owned()));
        }
        let line = lines.next().ok_or("missing #pieces")?;
        let n_pieces: usize = line
            .strip_prefix("#pieces")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| format!("malformed line {line:?}"))?;
        let mut pieces = Vec::with_capacity(n_pieces);
        for expected in 0..n_pieces {
            let line = lines.next().ok_or("truncated piece list")?;
            let (p, id) = line.split_once('\t').ok_or_else(|| format!("malformed piece {line:?}"))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(format!("piece ids must be dense, got {id} at {expected}"));
            }
            pieces.push(p.to_owned());
        }
        if pieces.first().map(String::as_str) != Some(BLANK_PIECE) {
            return Err("piece 0 must be the blank".into());
        }
        Ok(Self::from_parts(merges, pieces, target_size))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|m| Error::format(path, m))
    }
}

/// Word frequencies over a set of transcripts.
pub fn word_counts<'a, I, S>(transcripts: I) -> BTreeMap<String, usize>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts = BTreeMap::new();
    for t in transcripts {
        for w in t {
            *counts.entry(w.as_ref().to_owned()).or_default() += 1;
        }
    }
    counts
}

/// Pronunciation dictionary over a dense phone inventory (id 0 is the blank).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    phones: Vec<String>,
    phone_ids: HashMap<String, usize>,
    entries: BTreeMap<String, Vec<usize>>,
}

impl Lexicon {
    /// Builds a lexicon; the phone inventory is the sorted set of phones used.
    pub fn new(entries: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let inventory: BTreeSet<&str> = entries.values().flatten().map(String::as_str).collect();
        let phones: Vec<String> = std::iter::once("_".to_owned())
            .chain(inventory.into_iter().map(str::to_owned))
            .collect();
        let phone_ids: HashMap<String, usize> = phones.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let mut map = BTreeMap::new();
        for (word, pron) in entries {
            if pron.is_empty() {
                return Err(Error::Validation(format!("empty pronunciation for {word:?}")));
            }
            map.insert(word.clone(), pron.iter().map(|p| phone_ids[p.as_str()]).collect());
        }
        Ok(Self {
            phones,
            phone_ids,
            entries: map,
        })
    }

    /// Inventory size including the blank.
    pub fn num_phones(&self) -> usize {
        self.phones.len()
    }

    pub fn phone_name(&self, id: usize) -> Option<&str> {
        self.phones.get(id).map(String::as_str)
    }

    pub fn phone_id(&self, name: &str) -> Option<usize> {
        self.phone_ids.get(name).copied()
    }

    pub fn pronunciation(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (word, pron) in &self.entries {
            let names: Vec<&str> = pron.iter().map(|&p| self.phones[p].as_str()).collect();
            writeln!(out, "{word}\t{}", names.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected `word<TAB>phones`", n + 1))?;
            let phones: Vec<String> = pron.split_whitespace().map(str::to_owned).collect();
            if phones.is_empty() {
                return Err(format!("line {}: empty pronunciation for {word:?}", n + 1));
            }
            entries.insert(word.to_owned(), phones);
        }
        Self::new(&entries).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|m| Error::format(path, m))
    }
}

/// Canonical phone sequence of a transcript, without word-boundary symbols.
pub fn phones_for<S: AsRef<str>>(transcript: &[S], lexicon: &Lexicon) -> Result<LabelSequence> {
    let mut ids = Vec::new();
    for w in transcript {
        let pron = lexicon
            .pronunciation(w.as_ref())
            .ok_or_else(|| Error::OutOfLexicon(w.as_ref().to_owned()))?;
        ids.extend_from_slice(pron);
    }
    LabelSequence::new(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(items: &[(&str, usize)]) -> BTreeMap<String, usize> {
        items.iter().map(|(w, n)| (w.to_string(), *n)).collect()
    }

    fn pieces_of(vocab: &WordpieceVocab, word: &str) -> Vec<String> {
        vocab
            .encode(word)
            .unwrap()
            .iter()
            .map(|&i| vocab.piece(i).unwrap().to_owned())
            .collect()
    }

    #[test]
    fn hand_traced_low() {
        // pair counts for {"low": 3}: (l,o)=3, (o,w</w>)=3 -> lexicographic tie-break picks (l,o)
        let c = corpus(&[("low", 3)]);
        let v6 = learn_bpe(&c, 6).unwrap();
        assert_eq!(v6.merges(), &[("l".to_owned(), "o".to_owned())]);
        assert_eq!(pieces_of(&v6, "low"), ["lo", "w</w>"]);
        let v7 = learn_bpe(&c, 7).unwrap();
        assert_eq!(v7.merges()[1], ("lo".to_owned(), "w</w>".to_owned()));
        assert_eq!(pieces_of(&v7, "low"), ["low</w>"]);
        // nothing left to merge
        assert_eq!(learn_bpe(&c, 50).unwrap().len(), 7);
    }

    #[test]
    fn single_character_corpus() {
        let v = learn_bpe(&corpus(&[("a", 10)]), 10).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.piece(0), Some(BLANK_PIECE));
        assert!(v.id("a").is_some() && v.id("a</w>").is_some());
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("a").unwrap(), vec![v.id("a</w>").unwrap()]);
    }

    #[test]
    fn target_below_inventory_is_config_error() {
        let err = learn_bpe(&corpus(&[("abc", 1)]), 3).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn unknown_character_reported() {
        let v = learn_bpe(&corpus(&[("ab", 2)]), 10).unwrap();
        match v.encode("az") {
            Err(Error::UnknownCharacter { ch, .. }) => assert_eq!(ch, 'z'),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn text_roundtrip() {
        let v = learn_bpe(&corpus(&[("lower", 4), ("lowest", 2), ("newer", 3)]), 20).unwrap();
        let back = WordpieceVocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn decode_joins_at_markers() {
        let v = learn_bpe(&corpus(&[("for", 5), ("the", 9), ("last", 2)]), 30).unwrap();
        let words = ["for", "the", "last"];
        let ids = v.encode_words(&words).unwrap();
        assert_eq!(v.decode(ids.ids()), words);
    }

    fn fig_lexicon() -> Lexicon {
        let mut e = BTreeMap::new();
        e.insert("the".to_owned(), vec!["dh".to_owned(), "ah".to_owned()]);
        e.insert("for".to_owned(), vec!["f".to_owned(), "er".to_owned()]);
        e.insert(
            "last".to_owned(),
            ["l", "ae", "s", "t"].iter().map(|s| s.to_string()).collect(),
        );
        Lexicon::new(&e).unwrap()
    }

    fn names(lex: &Lexicon, z: &LabelSequence) -> Vec<String> {
        z.ids().iter().map(|&i| lex.phone_name(i).unwrap().to_owned()).collect()
    }

    #[test]
    fn phones_for_examples() {
        let lex = fig_lexicon();
        assert_eq!(names(&lex, &phones_for(&["the"], &lex).unwrap()), ["dh", "ah"]);
        assert!(phones_for::<&str>(&[], &lex).unwrap().is_empty());
        assert_eq!(
            names(&lex, &phones_for(&["for", "the", "last"], &lex).unwrap()),
            ["f", "er", "dh", "ah", "l", "ae", "s", "t"]
        );
        assert!(matches!(phones_for(&["cat"], &lex), Err(Error::OutOfLexicon(w)) if w == "cat"));
    }

    #[test]
    fn lexicon_text_roundtrip() {
        let lex = fig_lexicon();
        assert_eq!(Lexicon::from_text(&lex.to_text()).unwrap(), lex);
        assert_eq!(lex.phone_name(0), Some("_"));
        assert!(Lexicon::from_text("word\t\n").is_err());
    }
}
