//! Synthetic aligned corpus: a lexicon maps every character to a short
//! template of speech clusters, utterances are emitted from templates with
//! random unit durations and substitution noise, and the generator keeps
//! the exact segment ends as the alignment.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tokens::{TokenId, VocabSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

const MAX_TEMPLATE_LEN: usize = 4;
const MIN_TEMPLATE_LEN: usize = 2;
const MAX_REPEAT: u32 = 3;
const TEMPLATE_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    seed: u64,
    vocab: VocabSpec,
    templates: Vec<Vec<TokenId>>,
}

impl Lexicon {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    /// Template for a text token id.
    pub fn template(&self, text_id: TokenId) -> Result<&[TokenId]> {
        let ix = self.vocab.text_index(text_id)?;
        Ok(&self.templates[ix as usize])
    }

    pub fn templates(&self) -> &[Vec<TokenId>] {
        &self.templates
    }

    /// Maps a run-collapsed segment back to the character whose template it
    /// spells, if any. Used as an alignment oracle in tests.
    pub fn lookup(&self, units: &[TokenId]) -> Option<TokenId> {
        self.templates
            .iter()
            .position(|t| t.as_slice() == units)
            .map(|ix| self.vocab.n_speech() + ix as u32)
    }
}

fn is_prefix_related(a: &[TokenId], b: &[TokenId]) -> bool {
    let n = a.len().min(b.len());
    a[..n] == b[..n]
}

/// Draws one template of 2-4 distinct clusters per character.
///
/// Templates are redrawn a bounded number of times so that no template is a
/// prefix of another; with very small cluster sets the last draw is kept.
pub fn gen_lexicon(seed: u64, vocab: VocabSpec) -> Lexicon {
    let mut rng = rng_for(seed, &[0x1e71c0]);
    let n_speech = vocab.n_speech() as usize;
    let max_len = MAX_TEMPLATE_LEN.min(n_speech);
    let mut templates: Vec<Vec<TokenId>> = Vec::with_capacity(vocab.n_text() as usize);
    for _ in 0..vocab.n_text() {
        let mut draw = Vec::new();
        for _ in 0..TEMPLATE_ATTEMPTS {
            let len = rng.gen_range(MIN_TEMPLATE_LEN..=max_len);
            draw = index::sample(&mut rng, n_speech, len).into_iter().map(|u| u as TokenId).collect();
            if !templates.iter().any(|t| is_prefix_related(t, &draw)) {
                break;
            }
        }
        templates.push(draw);
    }
    Lexicon { seed, vocab, templates }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speech: Vec<TokenId>,
    pub text: Vec<TokenId>,
    /// Index of the last speech frame of each text token's segment.
    pub boundaries: Vec<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.speech.len()
    }

    pub fn num_text(&self) -> usize {
        self.text.len()
    }

    /// Frame ranges of the segments, in text order.
    pub fn segments(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.boundaries.iter().map(|b| b + 1));
        starts.zip(self.boundaries.iter()).map(|(s, &e)| s..e + 1)
    }

    /// Structural invariants only.
    pub fn check_structure(&self) -> Result<()> {
        let (t, l) = (self.speech.len(), self.text.len());
        if l == 0 {
            return Err(Error::utterance(&self.id, "empty text"));
        }
        if t < l {
            return Err(Error::utterance(&self.id, format!("{t} frames for {l} text tokens")));
        }
        if self.boundaries.len() != l {
            return Err(Error::utterance(
                &self.id,
                format!("{} boundaries for {l} text tokens", self.boundaries.len()),
            ));
        }
        if let Some(w) = self.boundaries.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::utterance(
                &self.id,
                format!("boundaries not strictly increasing ({} then {})", w[0], w[1]),
            ));
        }
        if self.boundaries[l - 1] != t - 1 {
            return Err(Error::utterance(
                &self.id,
                format!("final boundary {} is not the last frame {}", self.boundaries[l - 1], t - 1),
            ));
        }
        Ok(())
    }

    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        self.check_structure()?;
        if let Some(&bad) = self.speech.iter().find(|&&s| !vocab.is_speech(s)) {
            return Err(Error::VocabMismatch(format!("utterance {}: speech id {bad} outside speech range", self.id)));
        }
        if let Some(&bad) = self.text.iter().find(|&&s| !vocab.is_text(s)) {
            return Err(Error::VocabMismatch(format!("utterance {}: text id {bad} outside text range", self.id)));
        }
        Ok(())
    }
}

/// Emits one utterance: each template unit repeats 1-3 times, and each frame
/// is replaced by a uniformly drawn cluster with probability `p_sub`.
///
/// Durations and noise come from separate streams, so the same seed with
/// `p_sub = 0` yields the noiseless version of the same utterance.
pub fn synth_utterance(
    lexicon: &Lexicon,
    seed: u64,
    id: impl Into<String>,
    text: &[TokenId],
    p_sub: f64,
) -> Result<Utterance> {
    let id = id.into();
    if text.is_empty() {
        return Err(Error::utterance(&id, "empty text"));
    }
    if !(0.0..0.5).contains(&p_sub) {
        return Err(Error::Config(format!("p_sub must lie in [0, 0.5), got {p_sub}")));
    }
    let n_speech = lexicon.vocab.n_speech();
    let mut durations = rng_for(seed, &[1]);
    let mut noise = rng_for(seed, &[2]);
    let mut speech = Vec::new();
    let mut boundaries = Vec::with_capacity(text.len());
    for &y in text {
        for &unit in lexicon.template(y)? {
            for _ in 0..durations.gen_range(1..=MAX_REPEAT) {
                let roll: f64 = noise.gen();
                let replacement = noise.gen_range(0..n_speech);
                speech.push(if roll < p_sub { replacement } else { unit });
            }
        }
        boundaries.push(speech.len() - 1);
    }
    Ok(Utterance { id, speech, text: text.to_vec(), boundaries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Inclusive text-length range.
    pub len_range: [usize; 2],
    pub seed: u64,
    pub p_sub: f64,
    pub vocab: VocabSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
            len_range: [3, 12],
            seed: 1,
            p_sub: 0.05,
            vocab: VocabSpec::new(64, 20).expect("default vocab"),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("corpus counts must be positive".into()));
        }
        let [lo, hi] = self.len_range;
        if lo < 1 || hi > 64 || lo > hi {
            return Err(Error::Config(format!("len_range [{lo}, {hi}] must lie within [1, 64]")));
        }
        if !(0.0..0.5).contains(&self.p_sub) {
            return Err(Error::Config(format!("p_sub must lie in [0, 0.5), got {}", self.p_sub)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab: VocabSpec,
    #[serde(default)]
    pub lexicon_seed: Option<u64>,
    #[serde(default)]
    pub config: Option<CorpusConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn vocab(&self) -> VocabSpec {
        self.manifest.vocab
    }

    /// Lexicon the corpus was generated from, when the manifest records it.
    pub fn lexicon(&self) -> Option<Lexicon> {
        self.manifest.lexicon_seed.map(|s| gen_lexicon(s, self.manifest.vocab))
    }
}

pub fn gen_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let lexicon = gen_lexicon(config.seed, config.vocab);
    let n_text = config.vocab.n_text();
    let [lo, hi] = config.len_range;
    let make = |ix: usize, id: String| -> Result<Utterance> {
        let mut rng = rng_for(config.seed, &[0x7e47, ix as u64]);
        let len = rng.gen_range(lo..=hi);
        let text: Vec<TokenId> = (0..len).map(|_| config.vocab.n_speech() + rng.gen_range(0..n_text)).collect();
        synth_utterance(&lexicon, derive_seed(config.seed, &[0x5e9c, ix as u64]), id, &text, config.p_sub)
    };
    let train = (0..config.n_train).map(|i| make(i, format!("train-{i:06}"))).collect::<Result<_>>()?;
    let test = (0..config.n_test)
        .map(|i| make(config.n_train + i, format!("test-{i:06}")))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            vocab: config.vocab,
            lexicon_seed: Some(lexicon.seed()),
            config: Some(config.clone()),
        },
        train,
        test,
    })
}

fn write_lines(path: &Path, utts: &[Utterance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for u in utts {
        let line = serde_json::to_string(u).expect("utterance serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `train.jsonl` and `test.jsonl` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&corpus.manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let train_path = dir.join(TRAIN_FILE);
    let test_path = dir.join(TEST_FILE);
    write_lines(&train_path, &corpus.train)?;
    write_lines(&test_path, &corpus.test)?;
    Ok(vec![manifest_path, train_path, test_path])
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), line: e.line(), msg: e.to_string() })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    if let Some(cfg) = &manifest.config {
        if cfg.vocab != manifest.vocab {
            return Err(Error::VocabMismatch("manifest config vocab differs from manifest vocab".into()));
        }
    }
    Ok(manifest)
}

/// Streams validated utterances from one corpus file.
pub struct UtteranceReader<R> {
    path: PathBuf,
    lines: std::io::Lines<R>,
    line_no: usize,
    vocab: VocabSpec,
}

impl UtteranceReader<BufReader<fs::File>> {
    pub fn open(path: &Path, vocab: VocabSpec) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(path.to_path_buf(), BufReader::new(file), vocab))
    }
}

impl<R: BufRead> UtteranceReader<R> {
    pub fn new(path: PathBuf, reader: R, vocab: VocabSpec) -> Self {
        Self { path, lines: reader.lines(), line_no: 0, vocab }
    }
}

impl<R: BufRead> Iterator for UtteranceReader<R> {
    type Item = Result<Utterance>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = self.lines.next()?;
        self.line_no += 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(Error::io(&self.path, e))),
        };
        let parsed = serde_json::from_str::<Utterance>(&line).map_err(|e| Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            msg: e.to_string(),
        });
        Some(parsed.and_then(|u| u.validate(&self.vocab).map(|_| u)))
    }
}

pub fn load_utterances(path: &Path, vocab: VocabSpec) -> Result<Vec<Utterance>> {
    UtteranceReader::open(path, vocab)?.collect()
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let train = load_utterances(&dir.join(TRAIN_FILE), manifest.vocab)?;
    let test = load_utterances(&dir.join(TEST_FILE), manifest.vocab)?;
    let mut seen = HashSet::new();
    for u in train.iter().chain(&test) {
        if !seen.insert(u.id.as_str()) {
            return Err(Error::utterance(&u.id, "duplicate utterance id"));
        }
    }
    Ok(Corpus { manifest, train, test })
}

/// Segment-wise lexicon decode of a noiseless utterance.
pub fn oracle_transcript(lexicon: &Lexicon, utt: &Utterance) -> Option<Vec<TokenId>> {
    utt.segments()
        .map(|seg| {
            let mut units: Vec<TokenId> = utt.speech[seg].to_vec();
            units.dedup();
            lexicon.lookup(&units)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(s: u32, t: u32) -> VocabSpec {
        VocabSpec::new(s, t).unwrap()
    }

    #[test]
    fn lexicon_is_deterministic() {
        assert_eq!(gen_lexicon(7, vocab(64, 20)), gen_lexicon(7, vocab(64, 20)));
    }

    #[test]
    fn lexicon_seed_changes_templates() {
        let a = gen_lexicon(7, vocab(64, 20));
        let b = gen_lexicon(8, vocab(64, 20));
        assert!(a.templates().iter().zip(b.templates()).any(|(x, y)| x != y));
    }

    #[test]
    fn lexicon_templates_are_legal() {
        for v in [vocab(64, 20), vocab(4, 20), vocab(2, 2)] {
            let lex = gen_lexicon(3, v);
            assert_eq!(lex.templates().len(), v.n_text() as usize);
            for t in lex.templates() {
                assert!((2..=4).contains(&t.len()));
                assert!(t.iter().all(|&u| v.is_speech(u)));
                let distinct: HashSet<_> = t.iter().collect();
                assert_eq!(distinct.len(), t.len());
            }
        }
    }

    #[test]
    fn noiseless_utterance_follows_templates() {
        let v = vocab(64, 20);
        let lex = gen_lexicon(7, v);
        let text = [v.text_id(0).unwrap(), v.text_id(5).unwrap(), v.text_id(0).unwrap()];
        let u = synth_utterance(&lex, 11, "u", &text, 0.0).unwrap();
        u.validate(&v).unwrap();
        let total: usize = text.iter().map(|&y| lex.template(y).unwrap().len()).sum();
        assert!((total..=3 * total).contains(&u.num_frames()));
        assert_eq!(oracle_transcript(&lex, &u).unwrap(), text.to_vec());
        let covered: usize = u.segments().map(|s| s.len()).sum();
        assert_eq!(covered, u.num_frames());
    }

    #[test]
    fn synth_is_deterministic() {
        let v = vocab(64, 20);
        let lex = gen_lexicon(7, v);
        let text = [v.text_id(1).unwrap(), v.text_id(2).unwrap()];
        assert_eq!(
            synth_utterance(&lex, 3, "a", &text, 0.1).unwrap(),
            synth_utterance(&lex, 3, "a", &text, 0.1).unwrap()
        );
    }

    #[test]
    fn synth_rejects_unknown_text_and_bad_noise() {
        let v = vocab(64, 20);
        let lex = gen_lexicon(7, v);
        assert!(matches!(synth_utterance(&lex, 1, "a", &[3], 0.0), Err(Error::UnknownTextId(3))));
        assert!(synth_utterance(&lex, 1, "a", &[64], 0.5).is_err());
        assert!(synth_utterance(&lex, 1, "a", &[], 0.0).is_err());
    }

    #[test]
    fn substitution_rate_matches_p_sub() {
        let v = vocab(64, 20);
        let lex = gen_lexicon(7, v);
        let (mut differ, mut total) = (0usize, 0usize);
        let mut rng = rng_for(99, &[]);
        for i in 0..1000u64 {
            let text: Vec<TokenId> = (0..5).map(|_| 64 + rng.gen_range(0..20)).collect();
            let clean = synth_utterance(&lex, i, "c", &text, 0.0).unwrap();
            let noisy = synth_utterance(&lex, i, "n", &text, 0.05).unwrap();
            assert_eq!(clean.boundaries, noisy.boundaries);
            differ += clean.speech.iter().zip(&noisy.speech).filter(|(a, b)| a != b).count();
            total += clean.num_frames();
        }
        let frac = differ as f64 / total as f64;
        assert!((frac - 0.05).abs() <= 0.04, "substitution fraction {frac}");
    }

    fn small_config() -> CorpusConfig {
        CorpusConfig { n_train: 40, n_test: 10, ..CorpusConfig::default() }
    }

    #[test]
    fn corpus_ids_are_unique_and_counts_match() {
        let c = gen_corpus(&CorpusConfig { n_train: 2000, n_test: 200, ..CorpusConfig::default() }).unwrap();
        let ids: HashSet<_> = c.train.iter().chain(&c.test).map(|u| u.id.clone()).collect();
        assert_eq!(ids.len(), 2200);
    }

    #[test]
    fn corpus_texts_respect_len_range() {
        let c = gen_corpus(&small_config()).unwrap();
        assert!(c.train.iter().chain(&c.test).all(|u| (3..=12).contains(&u.num_text())));
    }

    #[test]
    fn corpus_files_are_byte_identical_and_round_trip() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let corpus = gen_corpus(&small_config()).unwrap();
        write_corpus(&corpus, a.path()).unwrap();
        write_corpus(&gen_corpus(&small_config()).unwrap(), b.path()).unwrap();
        for f in [MANIFEST_FILE, TRAIN_FILE, TEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(load_corpus(a.path()).unwrap(), corpus);
    }

    #[test]
    fn non_monotone_boundaries_name_the_utterance() {
        let line = r#"{"id":"bad-7","speech":[0,1,2,3,4,5],"text":[64,65],"boundaries":[5,3]}"#;
        let r = UtteranceReader::new("x.jsonl".into(), line.as_bytes(), vocab(64, 20));
        let err = r.collect::<Result<Vec<_>>>().unwrap_err();
        assert!(matches!(&err, Error::InvalidUtterance { id, .. } if id == "bad-7"), "{err}");
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let data = "{\"id\":\"a\",\"speech\":[0,1],\"text\":[64],\"boundaries\":[1]}\n{\"id\":\"b\",\"speech\":[0,";
        let r = UtteranceReader::new("x.jsonl".into(), data.as_bytes(), vocab(64, 20));
        let err = r.collect::<Result<Vec<_>>>().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn out_of_vocab_ids_are_a_vocab_mismatch() {
        let line = r#"{"id":"v","speech":[0,99],"text":[64],"boundaries":[1]}"#;
        let r = UtteranceReader::new("x.jsonl".into(), line.as_bytes(), vocab(64, 20));
        assert!(matches!(r.collect::<Result<Vec<_>>>(), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn manifest_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_corpus(&small_config()).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let s = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&p, s).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::FormatVersion { found: 9, .. })));
    }
}
