//! Utterance ingestion, normalization, dedup capping, length bucketing,
//! stratified subsampling, and the seeded synthetic task.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::numeric::{named_rng, Tensor};
use crate::tokenize::{phones_for, Lexicon, WordpieceVocab};

pub const DEDUPE_CAP: usize = 300;
pub const NUM_BUCKETS: usize = 5;
pub const PAPER_BATCH_SIZES: [usize; NUM_BUCKETS] = [128, 104, 80, 56, 32];
/// Desk-scale override, same linear shape as the paper-scale sizes.
pub const DESK_BATCH_SIZES: [usize; NUM_BUCKETS] = [32, 26, 20, 14, 8];
const DEGENERATE_STD: f64 = 1e-8;

const FEATURE_MAGIC: &[u8; 8] = b"HMCTCFEA";
const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// `[T, d]` frames.
    pub features: Tensor,
    pub words: Vec<String>,
    pub subword: Option<LabelSequence>,
    pub phones: Option<LabelSequence>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }
}

/// Per speaker and feature dimension: subtract the mean, divide by the
/// standard deviation. Dimensions with std below 1e-8 are only centered.
pub fn normalize_per_speaker(utterances: &mut [Utterance]) {
    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, u) in utterances.iter().enumerate() {
        by_speaker.entry(u.speaker.clone()).or_default().push(i);
    }
    for members in by_speaker.values() {
        let d = utterances[members[0]].features.cols();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for &i in members {
            let f = &utterances[i].features;
            for r in 0..f.rows() {
                for (s, v) in sum.iter_mut().zip(f.row(r)) {
                    *s += v;
                }
            }
            count += f.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; d];
        for &i in members {
            let f = &utterances[i].features;
            for r in 0..f.rows() {
                for ((s, v), m) in sq.iter_mut().zip(f.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        for &i in members {
            let f = &mut utterances[i].features;
            for r in 0..f.rows() {
                for ((v, m), s) in f.row_mut(r).iter_mut().zip(&mean).zip(&std) {
                    *v -= m;
                    if *s >= DEGENERATE_STD {
                        *v /= s;
                    }
                }
            }
        }
    }
}

/// Keeps at most `cap` utterances per distinct transcript, first occurrences first.
pub fn dedupe_cap(utterances: Vec<Utterance>, cap: usize) -> Vec<Utterance> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    utterances
        .into_iter()
        .filter(|u| {
            let n = seen.entry(u.transcript()).or_default();
            *n += 1;
            *n <= cap
        })
        .collect()
}

/// Length buckets: four interior boundaries at the 20/40/60/80th percentiles
/// (nearest rank) and one batch size per bucket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketPlan {
    pub boundaries: [usize; NUM_BUCKETS - 1],
    pub batch_sizes: [usize; NUM_BUCKETS],
}

fn nearest_rank(sorted: &[usize], percent: usize) -> usize {
    let rank = (percent * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

pub fn plan_buckets(lengths: &[usize], batch_sizes: [usize; NUM_BUCKETS]) -> Result<BucketPlan> {
    if lengths.len() < NUM_BUCKETS {
        return Err(Error::Data(format!(
            "bucketing needs at least {NUM_BUCKETS} utterances, got {}",
            lengths.len()
        )));
    }
    if batch_sizes.contains(&0) {
        return Err(Error::config("data.batch_sizes", "batch sizes must be positive"));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let boundaries = [20, 40, 60, 80].map(|p| nearest_rank(&sorted, p));
    Ok(BucketPlan {
        boundaries,
        batch_sizes,
    })
}

impl BucketPlan {
    pub fn bucket_of(&self, len: usize) -> usize {
        self.boundaries.iter().position(|&b| len <= b).unwrap_or(NUM_BUCKETS - 1)
    }

    pub fn assign(&self, lengths: &[usize]) -> Vec<usize> {
        lengths.iter().map(|&l| self.bucket_of(l)).collect()
    }

    /// One epoch of batches over `indices`. Utterances are shuffled within
    /// each bucket, chunked, and the batch order is shuffled.
    pub fn batches(&self, indices: &[usize], lengths: &[usize], rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut members: [Vec<usize>; NUM_BUCKETS] = Default::default();
        for &i in indices {
            members[self.bucket_of(lengths[i])].push(i);
        }
        let mut out = Vec::new();
        for (bucket, mut m) in members.into_iter().enumerate() {
            m.shuffle(rng);
            out.extend(m.chunks(self.batch_sizes[bucket]).map(<[usize]>::to_vec));
        }
        out.shuffle(rng);
        out
    }
}

/// Stratified sample of `⌊frac·|bucket|⌋` utterances from every bucket.
/// Returned indices keep corpus order.
pub fn subsample_fraction(assignment: &[usize], frac: f64, seed: u64) -> Result<Vec<usize>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::config("data.fraction", format!("{frac} is not in (0, 1]")));
    }
    let mut rng = named_rng(seed, "data.subsample");
    let mut keep = Vec::new();
    for bucket in 0..NUM_BUCKETS {
        let members: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == bucket).collect();
        let n = (frac * members.len() as f64 + 1e-9).floor() as usize;
        keep.extend(members.choose_multiple(&mut rng, n).copied());
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Attaches subword and phone targets. Utterances with words outside the
/// lexicon or vocabulary are dropped and reported.
pub fn attach_labels(
    utterances: Vec<Utterance>,
    vocab: Option<&WordpieceVocab>,
    lexicon: Option<&Lexicon>,
) -> Result<(Vec<Utterance>, Vec<(String, Error)>)> {
    let mut kept = Vec::with_capacity(utterances.len());
    let mut skipped = Vec::new();
    for mut u in utterances {
        let labels = (|| -> Result<_> {
            let sub = vocab.map(|v| v.encode_words(&u.words)).transpose()?;
            let ph = lexicon.map(|l| phones_for(&u.words, l)).transpose()?;
            Ok((sub, ph))
        })();
        match labels {
            Ok((sub, ph)) => {
                u.subword = sub;
                u.phones = ph;
                kept.push(u);
            }
            Err(e @ (Error::OutOfLexicon(_) | Error::UnknownCharacter { .. })) => {
                log::warn!("skipping utterance {}: {e}", u.id);
                skipped.push((u.id.clone(), e));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((kept, skipped))
}

/// Writes utterance features in the binary record format.
pub fn encode_features(utterances: &[Utterance]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(utterances.len() as u64).to_le_bytes());
    for u in utterances {
        for s in [&u.id, &u.speaker] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(u.features.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(u.features.cols() as u64).to_le_bytes());
        for v in u.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Feature records as `(id, speaker, features)`.
pub fn decode_features(bytes: &[u8]) -> std::result::Result<Vec<(String, String, Tensor)>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| format!("truncated at byte {pos}"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != FEATURE_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut out = Vec::new();
    for _ in 0..count {
        let mut strings = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            strings.push(std::str::from_utf8(take(n)?).map_err(|e| e.to_string())?.to_owned());
        }
        let t = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if t == 0 {
            return Err(format!("utterance {} has no frames", strings[0]));
        }
        let n = t.checked_mul(d).and_then(|n| n.checked_mul(8)).ok_or("size overflow")?;
        let data = take(n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let speaker = strings.pop().unwrap();
        let id = strings.pop().unwrap();
        out.push((id, speaker, Tensor::new(vec![t, d], data).map_err(|e| e.to_string())?));
    }
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok(out)
}

pub fn transcripts_to_text(utterances: &[Utterance]) -> String {
    let mut out = String::new();
    for u in utterances {
        writeln!(out, "{}\t{}", u.id, u.transcript()).unwrap();
    }
    out
}

pub fn transcripts_from_text(text: &str) -> std::result::Result<BTreeMap<String, Vec<String>>, String> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, words) = line.split_once('\t').ok_or_else(|| format!("line {}: expected `id<TAB>words`", n + 1))?;
        map.insert(id.to_owned(), words.split_whitespace().map(str::to_owned).collect());
    }
    Ok(map)
}

fn split_paths(dir: &Path, split: &str) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("{split}.feats")),
        dir.join(format!("{split}.txt")),
        dir.join(format!("{split}.spans")),
    ]
}

/// Writes `{split}.feats`, `{split}.txt`, and, if given, `{split}.spans`.
pub fn save_split(dir: &Path, split: &str, utterances: &[Utterance], spans: Option<&[WordSpans]>) -> Result<()> {
    let [feats, txt, spans_path] = split_paths(dir, split);
    fs::write(&feats, encode_features(utterances)).map_err(|e| Error::io(&feats, e))?;
    fs::write(&txt, transcripts_to_text(utterances)).map_err(|e| Error::io(&txt, e))?;
    if let Some(spans) = spans {
        let mut out = String::new();
        for (u, s) in utterances.iter().zip(spans) {
            let cells: Vec<String> = s.iter().map(|(a, b)| format!("{a}:{b}")).collect();
            writeln!(out, "{}\t{}", u.id, cells.join(" ")).unwrap();
        }
        fs::write(&spans_path, out).map_err(|e| Error::io(&spans_path, e))?;
    }
    Ok(())
}

/// Loads a split; every feature record must have a transcript.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    let [feats, txt, _] = split_paths(dir, split);
    let bytes = fs::read(&feats).map_err(|e| Error::io(&feats, e))?;
    let records = decode_features(&bytes).map_err(|m| Error::format(&feats, m))?;
    let text = fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
    let mut transcripts = transcripts_from_text(&text).map_err(|m| Error::format(&txt, m))?;
    records
        .into_iter()
        .map(|(id, speaker, features)| {
            let words = transcripts
                .remove(&id)
                .ok_or_else(|| Error::format(&txt, format!("no transcript for utterance {id}")))?;
            Ok(Utterance {
                id,
                speaker,
                features,
                words,
                subword: None,
                phones: None,
            })
        })
        .collect()
}

/// Half-open frame ranges, one per word, in original (unpaired) frames.
pub type WordSpans = Vec<(usize, usize)>;

pub fn load_spans(dir: &Path, split: &str) -> Result<Option<BTreeMap<String, WordSpans>>> {
    let [_, _, path] = split_paths(dir, split);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (id, cells) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(&path, format!("malformed line {line:?}")))?;
        let spans = cells
            .split_whitespace()
            .map(|c| {
                let (a, b) = c.split_once(':')?;
                Some((a.parse().ok()?, b.parse().ok()?))
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(&path, format!("malformed spans for {id}")))?;
        map.insert(id.to_owned(), spans);
    }
    Ok(Some(map))
}

/// Seeded surrogate task: words are phone strings, each phone emits a fixed
/// template vector per frame plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_phones: usize,
    pub num_words: usize,
    /// Inclusive range of phones per word.
    pub word_phones: (usize, usize),
    /// Inclusive range of words per utterance.
    pub utterance_words: (usize, usize),
    /// Zipf exponent of word frequencies.
    pub zipf: f64,
    pub feature_dim: usize,
    /// Inclusive range of frames per phone.
    pub duration: (usize, usize),
    pub noise: f64,
    pub speakers: usize,
    /// Scale of the per-speaker feature offset (removed by normalization).
    pub speaker_shift: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_phones: 40,
            num_words: 200,
            word_phones: (2, 5),
            utterance_words: (2, 8),
            zipf: 1.0,
            feature_dim: 12,
            duration: (3, 5),
            noise: 0.5,
            speakers: 20,
            speaker_shift: 0.5,
            train: 3000,
            dev: 300,
            test: 300,
            seed: 1,
        }
    }
}

const ARPABET: [&str; 40] = [
    "aa", "ae", "ah", "ao", "aw", "ax", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh", "ih", "iy", "jh", "k",
    "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
];

fn range_ok(field: &str, (lo, hi): (usize, usize)) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(Error::config(field, format!("range ({lo}, {hi}) must satisfy 1 <= lo <= hi")));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_phones < 2 {
            return Err(Error::config("synthetic.num_phones", "need at least 2 phones"));
        }
        if self.num_words == 0 {
            return Err(Error::config("synthetic.num_words", "need at least 1 word"));
        }
        range_ok("synthetic.word_phones", self.word_phones)?;
        range_ok("synthetic.utterance_words", self.utterance_words)?;
        range_ok("synthetic.duration", self.duration)?;
        if self.feature_dim == 0 {
            return Err(Error::config("synthetic.feature_dim", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("synthetic.noise", "must be finite and non-negative"));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return Err(Error::config("synthetic.zipf", "must be finite and non-negative"));
        }
        if self.speakers == 0 {
            return Err(Error::config("synthetic.speakers", "need at least 1 speaker"));
        }
        if self.train < NUM_BUCKETS {
            return Err(Error::config("synthetic.train", format!("need at least {NUM_BUCKETS} utterances")));
        }
        let (lo, hi) = self.word_phones;
        let capacity = (lo..=hi).fold(0f64, |acc, n| acc + (self.num_phones as f64).powi(n as i32));
        if capacity < 2.0 * self.num_words as f64 {
            return Err(Error::config(
                "synthetic.num_words",
                "too many words for the phone inventory and word length range",
            ));
        }
        Ok(())
    }

    pub fn phone_names(&self) -> Vec<String> {
        (0..self.num_phones)
            .map(|k| ARPABET.get(k).map_or_else(|| format!("q{k}"), |s| (*s).to_owned()))
            .collect()
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller on (0, 1] to avoid ln(0)
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generated train/dev/test splits, their word spans, and the lexicon.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub lexicon: Lexicon,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub train_spans: Vec<WordSpans>,
    pub dev_spans: Vec<WordSpans>,
    pub test_spans: Vec<WordSpans>,
}

/// Generates the synthetic task. Fully determined by the spec, including its seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let names = spec.phone_names();
    let mut rng = named_rng(spec.seed, "synthetic.lexicon");
    let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut order = Vec::with_capacity(spec.num_words);
    while order.len() < spec.num_words {
        let n = rng.gen_range(spec.word_phones.0..=spec.word_phones.1);
        let pron: Vec<String> = (0..n).map(|_| names[rng.gen_range(0..names.len())].clone()).collect();
        let spelling = pron.concat();
        if entries.contains_key(&spelling) {
            continue;
        }
        entries.insert(spelling.clone(), pron);
        order.push(spelling);
    }
    let lexicon = Lexicon::new(&entries)?;

    let mut rng = named_rng(spec.seed, "synthetic.templates");
    let templates: Vec<Vec<f64>> = (0..names.len())
        .map(|_| (0..spec.feature_dim).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let shifts: Vec<Vec<f64>> = (0..spec.speakers)
        .map(|_| (0..spec.feature_dim).map(|_| spec.speaker_shift * gaussian(&mut rng)).collect())
        .collect();
    let weights: Vec<f64> = (1..=spec.num_words).map(|r| (r as f64).powf(-spec.zipf)).collect();
    let dist = rand::distributions::WeightedIndex::new(&weights)
        .map_err(|e| Error::config("synthetic.zipf", e.to_string()))?;

    let make_split = |split: &str, count: usize| -> (Vec<Utterance>, Vec<WordSpans>) {
        let mut rng = named_rng(spec.seed, &format!("synthetic.{split}"));
        let mut utts = Vec::with_capacity(count);
        let mut all_spans = Vec::with_capacity(count);
        for k in 0..count {
            let n_words = rng.gen_range(spec.utterance_words.0..=spec.utterance_words.1);
            let words: Vec<String> = (0..n_words).map(|_| order[rng.sample(&dist)].clone()).collect();
            let speaker = rng.gen_range(0..spec.speakers);
            let mut data = Vec::new();
            let mut spans = Vec::with_capacity(n_words);
            let mut frame = 0usize;
            for w in &words {
                let start = frame;
                for &p in lexicon.pronunciation(w).expect("generated word is in the lexicon") {
                    let dur = rng.gen_range(spec.duration.0..=spec.duration.1);
                    for _ in 0..dur {
                        for (j, t) in templates[p - 1].iter().enumerate() {
                            data.push(t + shifts[speaker][j] + spec.noise * gaussian(&mut rng));
                        }
                    }
                    frame += dur;
                }
                spans.push((start, frame));
            }
            let features = Tensor::new(vec![frame, spec.feature_dim], data).expect("synthetic frame layout");
            utts.push(Utterance {
                id: format!("{split}-{k:05}"),
                speaker: format!("spk{speaker:03}"),
                features,
                words,
                subword: None,
                phones: None,
            });
            all_spans.push(spans);
        }
        (utts, all_spans)
    };
    let (train, train_spans) = make_split("train", spec.train);
    let (dev, dev_spans) = make_split("dev", spec.dev);
    let (test, test_spans) = make_split("test", spec.test);
    Ok(SyntheticData {
        lexicon,
        train,
        dev,
        test,
        train_spans,
        dev_spans,
        test_spans,
    })
}

/// Writes a synthetic dataset: splits, span sidecars, lexicon and the resolved spec.
pub fn save_synthetic(dir: &Path, spec: &SyntheticSpec, data: &SyntheticData) -> Result<()> {
    save_split(dir, "train", &data.train, Some(&data.train_spans))?;
    save_split(dir, "dev", &data.dev, Some(&data.dev_spans))?;
    save_split(dir, "test", &data.test, Some(&data.test_spans))?;
    data.lexicon.save(&dir.join("lexicon.txt"))?;
    let spec_path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(spec)?;
    fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, speaker: &str, rows: &[Vec<f64>], words: &str) -> Utterance {
        Utterance {
            id: id.into(),
            speaker: speaker.into(),
            features: Tensor::from_rows(rows).unwrap(),
            words: words.split_whitespace().map(str::to_owned).collect(),
            subword: None,
            phones: None,
        }
    }

    #[test]
    fn constant_dimension_becomes_zero() {
        let mut u = vec![utt("a", "s", &[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 6.0]], "x")];
        normalize_per_speaker(&mut u);
        assert!(u[0].features.data().iter().step_by(2).all(|&v| v == 0.0));
        let col: Vec<f64> = (0..3).map(|r| u[0].features.get(r, 1)).collect();
        let mean = col.iter().sum::<f64>() / 3.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_speakers_normalize_identically() {
        let rows = vec![vec![1.0, -2.0], vec![4.0, 0.5], vec![2.0, 7.0]];
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] + 10.0, r[1] - 3.0]).collect();
        let mut u = vec![utt("a", "s1", &rows, "x"), utt("b", "s2", &shifted, "x")];
        normalize_per_speaker(&mut u);
        for (a, b) in u[0].features.data().iter().zip(u[1].features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dedupe_examples() {
        let many: Vec<Utterance> = (0..400).map(|k| utt(&k.to_string(), "s", &[vec![0.0]], "uh-huh")).collect();
        let kept = dedupe_cap(many, DEDUPE_CAP);
        assert_eq!(kept.len(), 300);
        assert_eq!(kept.last().unwrap().id, "299");
        let distinct: Vec<Utterance> = (0..5).map(|k| utt(&k.to_string(), "s", &[vec![0.0]], &format!("w{k}"))).collect();
        assert_eq!(dedupe_cap(distinct.clone(), DEDUPE_CAP), distinct);
        let mut mixed = distinct.clone();
        mixed.extend(distinct.clone());
        assert_eq!(dedupe_cap(mixed, 1), distinct);
    }

    #[test]
    fn percentile_boundaries() {
        let lens: Vec<usize> = (1..=100).collect();
        let plan = plan_buckets(&lens, PAPER_BATCH_SIZES).unwrap();
        assert_eq!(plan.boundaries, [20, 40, 60, 80]);
        assert_eq!(plan.bucket_of(20), 0);
        assert_eq!(plan.bucket_of(21), 1);
        assert_eq!(plan.bucket_of(100), 4);
        let equal = plan_buckets(&[7; 9], PAPER_BATCH_SIZES).unwrap();
        assert!(equal.assign(&[7; 9]).iter().all(|&b| b == 0));
        assert!(plan_buckets(&[1, 2, 3, 4], PAPER_BATCH_SIZES).is_err());
    }

    #[test]
    fn batches_stay_in_one_bucket() {
        let lens: Vec<usize> = (0..500).map(|k| 1 + (k * 37) % 211).collect();
        let plan = plan_buckets(&lens, [16, 13, 10, 7, 4]).unwrap();
        let idx: Vec<usize> = (0..lens.len()).collect();
        let mut rng = named_rng(3, "test");
        let batches = plan.batches(&idx, &lens, &mut rng);
        let mut seen = vec![false; lens.len()];
        for b in &batches {
            let bucket = plan.bucket_of(lens[b[0]]);
            assert!(b.len() <= plan.batch_sizes[bucket]);
            for &i in b {
                assert_eq!(plan.bucket_of(lens[i]), bucket);
                assert!(!std::mem::replace(&mut seen[i], true));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn stratified_counts() {
        let mut assignment = Vec::new();
        for (b, n) in [100, 80, 60, 40, 20].into_iter().enumerate() {
            assignment.extend(std::iter::repeat(b).take(n));
        }
        let keep = subsample_fraction(&assignment, 0.5, 9).unwrap();
        let mut counts = [0; 5];
        for &i in &keep {
            counts[assignment[i]] += 1;
        }
        assert_eq!(counts, [50, 40, 30, 20, 10]);
        assert_eq!(subsample_fraction(&assignment, 1.0, 9).unwrap(), (0..300).collect::<Vec<_>>());
        assert!(subsample_fraction(&assignment, 0.0, 9).is_err());
        assert!(subsample_fraction(&assignment, 1.5, 9).is_err());
    }

    #[test]
    fn noise_free_features_are_templates() {
        let spec = SyntheticSpec {
            noise: 0.0,
            speaker_shift: 0.0,
            duration: (2, 2),
            train: 6,
            dev: 1,
            test: 1,
            num_words: 10,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        for u in &data.train {
            let phones = phones_for(&u.words, &data.lexicon).unwrap();
            assert_eq!(u.frames(), 2 * phones.len());
            for (k, &p) in phones.ids().iter().enumerate() {
                assert_eq!(u.features.row(2 * k), u.features.row(2 * k + 1));
                let other = phones.ids().iter().position(|&q| q == p).unwrap();
                assert_eq!(u.features.row(2 * k), u.features.row(2 * other));
            }
        }
    }

    #[test]
    fn feature_roundtrip() {
        let spec = SyntheticSpec {
            train: 5,
            dev: 2,
            test: 2,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let back = decode_features(&encode_features(&data.train)).unwrap();
        for ((id, spk, f), u) in back.iter().zip(&data.train) {
            assert_eq!((id, spk, f), (&u.id, &u.speaker, &u.features));
        }
    }
}
