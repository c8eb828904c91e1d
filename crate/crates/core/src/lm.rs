//! Word-level n-gram language model with interpolated Kneser-Ney smoothing,
//! ARPA import/export, backoff scoring, and perplexity.
//!
//! All probabilities are log10 to match the ARPA convention. Smoothing uses a
//! single fixed discount with continuation counts below the top order and a
//! uniform base distribution over vocab + unk, so conditionals normalize to 1
//! exactly (up to rounding) for every context.

use crate::ctc::TokenSet;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Dummy log10 probability for entries that exist only to carry a backoff
/// weight (sentence-begin), following common toolchain output.
const LOG10_DUMMY: f64 = -99.0;

pub type Result<T> = std::result::Result<T, LmError>;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("discount must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("order must be >= 1, got {0}")]
    BadOrder(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("word '{0}' cannot be spelled with the token set")]
    Unspellable(String),
    #[error("empty lexicon")]
    EmptyLexicon,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    lp: f64,
    bow: f64,
}

/// Backoff n-gram model over words.
#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// tables[n-1]: n-gram word ids -> (log10 prob, log10 backoff)
    tables: Vec<BTreeMap<Vec<u32>, Entry>>,
}

impl NGramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Words the model can emit: everything except sentence-begin and unk.
    pub fn scored_vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(|s| s.as_str()).filter(|w| *w != BOS && *w != UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn id_or_unk(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(self.index[UNK])
    }

    /// Interpolated Kneser-Ney training with a single fixed discount.
    pub fn train(sentences: &[String], order: usize, discount: f64) -> Result<NGramLm> {
        if order == 0 {
            return Err(LmError::BadOrder(order));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(LmError::BadDiscount(discount));
        }
        let tokenized: Vec<Vec<String>> = sentences
            .iter()
            .map(|s| s.split_whitespace().map(|w| w.to_string()).collect())
            .filter(|ws: &Vec<String>| !ws.is_empty())
            .collect();
        if tokenized.is_empty() {
            return Err(LmError::EmptyCorpus);
        }

        let mut vocab: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
        let mut index: HashMap<String, u32> =
            vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut id_of = |w: &str, vocab: &mut Vec<String>| -> u32 {
            if let Some(&i) = index.get(w) {
                return i;
            }
            let i = vocab.len() as u32;
            vocab.push(w.to_string());
            index.insert(w.to_string(), i);
            i
        };

        // Raw counts: all windows of each padded sentence, all orders.
        let mut raw: Vec<BTreeMap<Vec<u32>, u64>> = vec![BTreeMap::new(); order];
        for words in &tokenized {
            let mut ids = Vec::with_capacity(words.len() + 2);
            ids.push(0u32); // <s>
            for w in words {
                ids.push(id_of(w, &mut vocab));
            }
            ids.push(1u32); // </s>
            for n in 1..=order {
                for win in ids.windows(n) {
                    if *win.last().unwrap() == 0 {
                        continue; // nothing predicts <s>
                    }
                    *raw[n - 1].entry(win.to_vec()).or_insert(0) += 1;
                }
            }
        }
        let index = index; // freeze

        // Adjusted counts: raw at the top order; continuation counts below
        // (grams starting with <s> keep raw counts since they cannot be
        // extended to the left).
        let mut adjusted: Vec<BTreeMap<Vec<u32>, u64>> = Vec::with_capacity(order);
        for n in 1..=order {
            if n == order {
                adjusted.push(raw[n - 1].clone());
                continue;
            }
            let mut adj: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
            for (gram, &c) in &raw[n - 1] {
                if gram[0] == 0 {
                    adj.insert(gram.clone(), c);
                }
            }
            for gram in raw[n].keys() {
                let suffix = gram[1..].to_vec();
                if suffix[0] != 0 {
                    *adj.entry(suffix).or_insert(0) += 1;
                }
            }
            adjusted.push(adj);
        }

        // Per-context totals and distinct-continuation counts.
        let context_stats = |table: &BTreeMap<Vec<u32>, u64>| -> BTreeMap<Vec<u32>, (u64, u64)> {
            let mut stats: BTreeMap<Vec<u32>, (u64, u64)> = BTreeMap::new();
            for (gram, &c) in table {
                let ctx = gram[..gram.len() - 1].to_vec();
                let e = stats.entry(ctx).or_insert((0, 0));
                e.0 += c;
                e.1 += 1;
            }
            stats
        };

        let mut tables: Vec<BTreeMap<Vec<u32>, Entry>> = vec![BTreeMap::new(); order];

        // Unigrams: discounted continuation mass over a uniform base.
        let uni_stats = context_stats(&adjusted[0]);
        let (uni_total, uni_distinct) = uni_stats[&Vec::new()];
        let lambda_uni = discount * uni_distinct as f64 / uni_total as f64;
        // scored vocab = all words except <s> and <unk>
        let scored = vocab.iter().filter(|w| *w != BOS && *w != UNK).count();
        let base = 1.0 / (scored + 1) as f64;
        for (gram, &c) in &adjusted[0] {
            let p = (c as f64 - discount).max(0.0) / uni_total as f64 + lambda_uni * base;
            tables[0].insert(gram.clone(), Entry { lp: p.log10(), bow: 0.0 });
        }
        tables[0].insert(vec![index[UNK]], Entry { lp: (lambda_uni * base).log10(), bow: 0.0 });
        tables[0].insert(vec![index[BOS]], Entry { lp: LOG10_DUMMY, bow: 0.0 });

        // Higher orders, bottom-up; lower-order interpolated probs are
        // already in tables (every suffix of a listed gram is listed).
        for n in 2..=order {
            let stats = context_stats(&adjusted[n - 1]);
            for (gram, &c) in &adjusted[n - 1] {
                let ctx = &gram[..gram.len() - 1];
                let (total, distinct) = stats[ctx];
                let lambda = discount * distinct as f64 / total as f64;
                let lower = tables[n - 2][&gram[1..].to_vec()].lp;
                let p = (c as f64 - discount).max(0.0) / total as f64
                    + lambda * 10f64.powf(lower);
                tables[n - 1].insert(gram.clone(), Entry { lp: p.log10(), bow: 0.0 });
            }
            // Attach backoff weights to the context grams one order down.
            for (ctx, &(total, distinct)) in &stats {
                let lambda = discount * distinct as f64 / total as f64;
                let e = tables[n - 2]
                    .get_mut(ctx)
                    .unwrap_or_else(|| panic!("context {ctx:?} missing at order {}", n - 1));
                e.bow = lambda.log10();
            }
        }

        Ok(NGramLm { order, vocab, index, tables })
    }

    /// log10 P(word | context); standard longest-match backoff. Total: OOV
    /// words map to unk.
    pub fn score(&self, word: &str, context: &[&str]) -> f64 {
        let w = self.id_or_unk(word);
        let ctx: Vec<u32> = context.iter().map(|c| self.id_or_unk(c)).collect();
        let start = ctx.len().saturating_sub(self.order - 1);
        self.score_ids(&ctx[start..], w)
    }

    pub fn score_ids(&self, ctx: &[u32], w: u32) -> f64 {
        if !ctx.is_empty() {
            let mut gram = ctx.to_vec();
            gram.push(w);
            if let Some(e) = self.tables[ctx.len()].get(&gram) {
                return e.lp;
            }
            let bow = self.tables[ctx.len() - 1].get(ctx).map_or(0.0, |e| e.bow);
            return bow + self.score_ids(&ctx[1..], w);
        }
        match self.tables[0].get(&vec![w]) {
            Some(e) => e.lp,
            None => self.tables[0][&vec![self.index[UNK]]].lp,
        }
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn bos_id(&self) -> u32 {
        self.index[BOS]
    }

    /// Corpus perplexity, 10^(-mean log10 P), sentence-end included. The
    /// OOV-excluded variant skips OOV prediction terms but keeps them in the
    /// conditioning context.
    pub fn perplexity(&self, sentences: &[String]) -> Perplexity {
        let mut sum_incl = 0.0;
        let mut sum_excl = 0.0;
        let mut n_incl = 0usize;
        let mut n_excl = 0usize;
        let mut n_oov = 0usize;
        for sentence in sentences {
            let words: Vec<&str> = sentence.split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            let mut ctx: Vec<&str> = vec![BOS];
            for (i, w) in words.iter().chain(std::iter::once(&EOS)).enumerate() {
                let lp = self.score(w, &ctx);
                sum_incl += lp;
                n_incl += 1;
                let oov = !self.contains(w);
                if oov {
                    n_oov += 1;
                } else {
                    sum_excl += lp;
                    n_excl += 1;
                }
                let _ = i;
                ctx.push(w);
            }
        }
        let pp = |sum: f64, n: usize| {
            if n == 0 {
                f64::NAN
            } else {
                10f64.powf(-sum / n as f64)
            }
        };
        Perplexity {
            including_oov: pp(sum_incl, n_incl),
            excluding_oov: pp(sum_excl, n_excl),
            tokens: n_incl,
            oov: n_oov,
        }
    }

    /// Canonical ARPA text: \data\ header, per-order sections with entries
    /// sorted by words, backoff column for all orders below the top.
    pub fn to_arpa(&self) -> String {
        let mut out = String::new();
        out.push_str("\\data\\\n");
        for n in 1..=self.order {
            let _ = writeln!(out, "ngram {}={}", n, self.tables[n - 1].len());
        }
        for n in 1..=self.order {
            let _ = writeln!(out, "\n\\{n}-grams:");
            let mut entries: Vec<(Vec<&str>, &Entry)> = self.tables[n - 1]
                .iter()
                .map(|(gram, e)| {
                    (gram.iter().map(|&i| self.vocab[i as usize].as_str()).collect(), e)
                })
                .collect();
            entries.sort();
            for (words, e) in entries {
                if n < self.order {
                    let _ = writeln!(out, "{}\t{}\t{}", e.lp, words.join(" "), e.bow);
                } else {
                    let _ = writeln!(out, "{}\t{}", e.lp, words.join(" "));
                }
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn write_arpa(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_arpa())?;
        Ok(())
    }

    pub fn read_arpa(path: &Path) -> Result<NGramLm> {
        let text = std::fs::read_to_string(path)?;
        Self::from_arpa(&text)
    }

    pub fn from_arpa(text: &str) -> Result<NGramLm> {
        let err = |line: usize, msg: String| LmError::Parse { line: line + 1, msg };
        let mut lines = text.lines().enumerate();

        // header
        let mut expected: Vec<usize> = Vec::new();
        for (i, line) in lines.by_ref() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if t == "\\data\\" {
                break;
            }
            return Err(err(i, format!("expected \\data\\ header, got '{t}'")));
        }
        let mut section_start = None;
        for (i, line) in lines.by_ref() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix("ngram ") {
                let (n, count) = rest
                    .split_once('=')
                    .ok_or_else(|| err(i, format!("malformed count line '{t}'")))?;
                let n: usize = n
                    .trim()
                    .parse()
                    .map_err(|_| err(i, format!("bad order in '{t}'")))?;
                let count: usize = count
                    .trim()
                    .parse()
                    .map_err(|_| err(i, format!("bad count in '{t}'")))?;
                if n != expected.len() + 1 {
                    return Err(err(i, format!("out-of-order header 'ngram {n}='")));
                }
                expected.push(count);
            } else {
                section_start = Some((i, t.to_string()));
                break;
            }
        }
        if expected.is_empty() {
            return Err(LmError::Parse { line: 0, msg: "no ngram counts in header".into() });
        }
        let order = expected.len();

        let mut vocab: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut tables: Vec<BTreeMap<Vec<u32>, Entry>> = vec![BTreeMap::new(); order];
        let mut current: Option<usize> = None;

        let mut handle = |i: usize,
                          t: &str,
                          current: &mut Option<usize>,
                          vocab: &mut Vec<String>,
                          index: &mut HashMap<String, u32>,
                          tables: &mut Vec<BTreeMap<Vec<u32>, Entry>>|
         -> Result<bool> {
            if t.is_empty() {
                return Ok(false);
            }
            if t == "\\end\\" {
                return Ok(true);
            }
            if let Some(rest) = t.strip_prefix('\\') {
                if let Some(n) = rest.strip_suffix("-grams:") {
                    let n: usize =
                        n.parse().map_err(|_| err(i, format!("bad section '{t}'")))?;
                    if n == 0 || n > order {
                        return Err(err(i, format!("section \\{n}-grams: outside header range")));
                    }
                    *current = Some(n);
                    return Ok(false);
                }
                return Err(err(i, format!("unrecognized directive '{t}'")));
            }
            let n = current.ok_or_else(|| err(i, "entry before any section".into()))?;
            let fields: Vec<&str> = t.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(err(
                    i,
                    format!("expected {} or {} fields for a {n}-gram, got {}", n + 1, n + 2, fields.len()),
                ));
            }
            let lp: f64 = fields[0]
                .parse()
                .map_err(|_| err(i, format!("bad log-prob '{}'", fields[0])))?;
            let bow: f64 = if fields.len() == n + 2 {
                fields[n + 1]
                    .parse()
                    .map_err(|_| err(i, format!("bad backoff '{}'", fields[n + 1])))?
            } else {
                0.0
            };
            let gram: Vec<u32> = fields[1..=n]
                .iter()
                .map(|w| {
                    *index.entry((*w).to_string()).or_insert_with(|| {
                        vocab.push((*w).to_string());
                        (vocab.len() - 1) as u32
                    })
                })
                .collect();
            tables[n - 1].insert(gram, Entry { lp, bow });
            Ok(false)
        };

        let mut ended = false;
        if let Some((i, t)) = section_start {
            ended = handle(i, &t, &mut current, &mut vocab, &mut index, &mut tables)?;
        }
        if !ended {
            for (i, line) in lines {
                if handle(i, line.trim(), &mut current, &mut vocab, &mut index, &mut tables)? {
                    ended = true;
                    break;
                }
            }
        }
        if !ended {
            return Err(LmError::Parse { line: text.lines().count(), msg: "missing \\end\\".into() });
        }
        for (n, &want) in expected.iter().enumerate() {
            let got = tables[n].len();
            if got != want {
                return Err(LmError::Parse {
                    line: 0,
                    msg: format!("header says {want} {}-grams, found {got}", n + 1),
                });
            }
        }
        for w in [BOS, EOS, UNK] {
            if !index.contains_key(w) {
                let id = vocab.len() as u32;
                vocab.push(w.to_string());
                index.insert(w.to_string(), id);
                tables[0].insert(vec![id], Entry { lp: LOG10_DUMMY, bow: 0.0 });
            }
        }
        Ok(NGramLm { order, vocab, index, tables })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Perplexity {
    pub including_oov: f64,
    pub excluding_oov: f64,
    pub tokens: usize,
    pub oov: usize,
}

/// Word -> character-token spelling. Spellings hold plain character tokens;
/// the word-boundary token is the separator convention handled by the decoder.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    words: Vec<String>,
    spellings: Vec<Vec<u32>>,
}

impl Lexicon {
    pub fn from_words<'a>(
        words: impl IntoIterator<Item = &'a str>,
        tokens: &TokenSet,
    ) -> Result<Lexicon> {
        let mut lex = Lexicon::default();
        for w in words {
            if w.is_empty() {
                return Err(LmError::Unspellable(String::new()));
            }
            let spelling: Option<Vec<u32>> = w
                .chars()
                .map(|c| tokens.id_of(c.to_ascii_lowercase()))
                .collect();
            let spelling = spelling.ok_or_else(|| LmError::Unspellable(w.to_string()))?;
            lex.words.push(w.to_string());
            lex.spellings.push(spelling);
        }
        if lex.words.is_empty() {
            return Err(LmError::EmptyLexicon);
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[u32])> {
        self.words.iter().map(|w| w.as_str()).zip(self.spellings.iter().map(|s| s.as_slice()))
    }

    pub fn write(&self, path: &Path, tokens: &TokenSet) -> Result<()> {
        let mut out = String::new();
        for (w, sp) in self.entries() {
            let spelled: Vec<String> =
                sp.iter().map(|&id| tokens.char_of(id).to_string()).collect();
            let _ = writeln!(out, "{w}\t{}", spelled.join(" "));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path, tokens: &TokenSet) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path)?;
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let (word, spelling) = t.split_once(char::is_whitespace).ok_or(LmError::Parse {
                line: i + 1,
                msg: format!("expected 'word<TAB>spelling', got '{t}'"),
            })?;
            let ids: Option<Vec<u32>> = spelling
                .split_whitespace()
                .map(|tok| {
                    let mut chars = tok.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => tokens.id_of(c),
                        _ => None,
                    }
                })
                .collect();
            let ids = ids.ok_or_else(|| LmError::Parse {
                line: i + 1,
                msg: format!("unknown token in spelling of '{word}'"),
            })?;
            if ids.is_empty() {
                return Err(LmError::Parse { line: i + 1, msg: format!("empty spelling for '{word}'") });
            }
            lex.words.push(word.to_string());
            lex.spellings.push(ids);
        }
        if lex.words.is_empty() {
            return Err(LmError::EmptyLexicon);
        }
        Ok(lex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_corpus() -> Vec<String> {
        vec!["the cat sat".into(), "the cat ran".into(), "a dog sat".into()]
    }

    fn prob(lm: &NGramLm, w: &str, ctx: &[&str]) -> f64 {
        10f64.powf(lm.score(w, ctx))
    }

    /// Interpolated KN on the 3-sentence corpus, bigram order, D = 0.75,
    /// hand-computed from the definitions:
    ///   adjusted unigram counts (distinct raw predecessors):
    ///     the 1, cat 1, sat 2, ran 1, a 1, dog 1, </s> 2; total 9, distinct 7
    ///   lambda_uni = 0.75 * 7 / 9 = 7/12; base = 1/8 (7 words + unk)
    ///   P1(w) = max(adj - 0.75, 0)/9 + (7/12)(1/8)
    ///   bigram: P(w|v) = max(c - 0.75, 0)/c(v.) + 0.75 n1+(v.)/c(v.) P1(w)
    #[test]
    fn hand_computed_bigram_fixture() {
        let lm = NGramLm::train(&toy_corpus(), 2, 0.75).unwrap();
        let p1_sat = 1.25 / 9.0 + (7.0 / 12.0) / 8.0; // 0.2118055...
        let p1_the = 0.25 / 9.0 + (7.0 / 12.0) / 8.0; // 0.1006944...
        let p1_unk = (7.0 / 12.0) / 8.0; // 0.0729166...
        let cases: Vec<(&str, Vec<&str>, f64)> = vec![
            ("the", vec![], p1_the),
            ("sat", vec![], p1_sat),
            ("the", vec![BOS], 1.25 / 3.0 + 0.5 * p1_the),
            ("a", vec![BOS], 0.25 / 3.0 + 0.5 * p1_the),
            ("cat", vec!["the"], 1.25 / 2.0 + 0.375 * p1_the),
            ("sat", vec!["cat"], 0.25 / 2.0 + 0.75 * p1_sat),
            ("ran", vec!["cat"], 0.25 / 2.0 + 0.75 * p1_the),
            ("sat", vec!["dog"], 0.25 / 1.0 + 0.75 * p1_sat),
            // backoff through an unseen bigram: bow(the) = 0.375
            ("dog", vec!["the"], 0.375 * p1_the),
            // unseen context word backs off straight to the unigram
            ("the", vec!["zzz"], p1_the),
            ("xyzzy", vec!["cat"], 0.75 * p1_unk),
        ];
        for (w, ctx, want) in cases {
            let got = prob(&lm, w, &ctx);
            assert!(
                (got - want).abs() < 1e-12,
                "P({w}|{ctx:?}) = {got}, want {want}"
            );
        }
    }

    /// Order-4 spot checks on the same corpus (continuation counts at orders
    /// 2..3 are all 1 here, so the chains reduce to hand arithmetic).
    #[test]
    fn hand_computed_order4_queries() {
        let lm = NGramLm::train(&toy_corpus(), 4, 0.75).unwrap();
        let p1_sat = 1.25 / 9.0 + (7.0 / 12.0) / 8.0;
        let p2 = 0.25 / 2.0 + 0.75 * p1_sat; // P(sat|cat)
        let p3 = 0.25 / 2.0 + 0.75 * p2; // P(sat|the cat)
        let p4 = 0.25 / 2.0 + 0.75 * p3; // P(sat|<s> the cat)
        assert!((prob(&lm, "sat", &["the", "cat"]) - p3).abs() < 1e-12);
        assert!((prob(&lm, "sat", &[BOS, "the", "cat"]) - p4).abs() < 1e-12);
    }

    #[test]
    fn single_sentence_unigram_dominates_and_unk_positive() {
        let lm = NGramLm::train(&["a a a".into()], 1, 0.75).unwrap();
        let pa = prob(&lm, "a", &[]);
        let pend = prob(&lm, EOS, &[]);
        let punk = prob(&lm, "never-seen", &[]);
        assert!((pa - (1.25 / 3.0 + 0.5 / 3.0)).abs() < 1e-12);
        assert!(pa > pend && pend > punk);
        assert!(punk > 0.0);
        assert!((punk - 0.5 / 3.0).abs() < 1e-12);
    }

    fn normalization_sum(lm: &NGramLm, ctx: &[&str]) -> f64 {
        let words: Vec<&str> = lm.scored_vocab().collect();
        let mut sum: f64 = words.iter().map(|w| 10f64.powf(lm.score(w, ctx))).sum();
        sum += 10f64.powf(lm.score("##oov##", ctx));
        sum
    }

    #[test]
    fn conditionals_normalize_for_random_contexts() {
        let corpus: Vec<String> = vec![
            "the cat sat on the mat".into(),
            "a dog ran to the cat".into(),
            "the dog sat".into(),
            "a cat ran".into(),
            "the mat sat on a dog".into(),
        ];
        let lm = NGramLm::train(&corpus, 4, 0.75).unwrap();
        let words: Vec<&str> = lm.scored_vocab().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let len = rng.gen_range(0..=3);
            let mut ctx: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        "zz-unseen"
                    } else {
                        words[rng.gen_range(0..words.len())]
                    }
                })
                .collect();
            if rng.gen_bool(0.3) {
                ctx.insert(0, BOS);
            }
            let sum = normalization_sum(&lm, &ctx);
            assert!((sum - 1.0).abs() < 1e-4, "context {ctx:?} sums to {sum}");
        }
    }

    #[test]
    fn arpa_round_trip_is_byte_identical_and_score_preserving() {
        let lm = NGramLm::train(&toy_corpus(), 4, 0.75).unwrap();
        let first = lm.to_arpa();
        let reread = NGramLm::from_arpa(&first).unwrap();
        let second = reread.to_arpa();
        assert_eq!(first, second);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let words: Vec<&str> = lm.scored_vocab().collect();
        for _ in 0..1000 {
            let len = rng.gen_range(0..=3);
            let ctx: Vec<&str> =
                (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
            let w = words[rng.gen_range(0..words.len())];
            assert_eq!(lm.score(w, &ctx), reread.score(w, &ctx));
        }
    }

    #[test]
    fn arpa_header_counts_match_sections() {
        let lm = NGramLm::train(&toy_corpus(), 3, 0.75).unwrap();
        let text = lm.to_arpa();
        for n in 1..=3 {
            let declared: usize = text
                .lines()
                .find_map(|l| l.strip_prefix(&format!("ngram {n}="))?.parse().ok())
                .unwrap();
            assert_eq!(declared, lm.tables[n - 1].len());
        }
    }

    #[test]
    fn hand_written_unigram_arpa_loads_and_scores() {
        let text = "\\data\\\nngram 1=3\n\n\\1-grams:\n-0.5\ta\n-0.3\tb\n-1.0\t<unk>\n\n\\end\\\n";
        let lm = NGramLm::from_arpa(text).unwrap();
        assert_eq!(lm.order(), 1);
        assert!((lm.score("a", &[]) - -0.5).abs() < 1e-12);
        assert!((lm.score("b", &["a"]) - -0.3).abs() < 1e-12);
        assert!((lm.score("zzz", &[]) - -1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_arpa_reports_line_numbers() {
        let text = "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.5\ta\nnot-a-number\tb\n\n\\end\\\n";
        let err = NGramLm::from_arpa(text).unwrap_err();
        assert!(matches!(err, LmError::Parse { line: 6, .. }), "{err}");
        let text2 = "\\data\\\nngram 1=5\n\n\\1-grams:\n-0.5\ta\n\n\\end\\\n";
        let err2 = NGramLm::from_arpa(text2).unwrap_err();
        assert!(err2.to_string().contains("header says 5"), "{err2}");
    }

    #[test]
    fn perplexity_bounds_and_uniform_scorer() {
        let lm = NGramLm::train(&["a a a".into()], 2, 0.75).unwrap();
        let pp = lm.perplexity(&["a a a".into()]);
        assert!(pp.including_oov >= 1.0);
        assert!(pp.including_oov < 3.0);

        // Uniform independent-word scorer over k = 4 symbols has PP = k.
        let text = "\\data\\\nngram 1=4\n\n\\1-grams:\n-0.6020599913279624\tx\n-0.6020599913279624\ty\n-0.6020599913279624\tz\n-0.6020599913279624\t</s>\n\n\\end\\\n";
        let uniform = NGramLm::from_arpa(text).unwrap();
        let pp = uniform.perplexity(&["x y z x y".into(), "z z".into()]);
        assert!((pp.including_oov - 4.0).abs() < 1e-9, "{}", pp.including_oov);
    }

    #[test]
    fn train_perplexity_below_held_out() {
        // Zipf-ish sampling; the memorized split must score better than
        // held-out text from the same distribution.
        let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut sample = |n: usize| -> Vec<String> {
            (0..n)
                .map(|_| {
                    let len = rng.gen_range(3..=6);
                    (0..len)
                        .map(|_| {
                            let mut idx = 0;
                            while idx + 1 < words.len() && rng.gen_bool(0.45) {
                                idx += 1;
                            }
                            words[idx]
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect()
        };
        let train = sample(400);
        let held_out = sample(100);
        let lm = NGramLm::train(&train, 4, 0.75).unwrap();
        let pp_train = lm.perplexity(&train[..100].to_vec());
        let pp_held = lm.perplexity(&held_out);
        assert!(
            pp_train.including_oov <= pp_held.including_oov,
            "train {} vs held-out {}",
            pp_train.including_oov,
            pp_held.including_oov
        );
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(NGramLm::train(&[], 2, 0.75), Err(LmError::EmptyCorpus)));
        assert!(matches!(
            NGramLm::train(&["  ".into()], 2, 0.75),
            Err(LmError::EmptyCorpus)
        ));
    }

    #[test]
    fn lexicon_round_trip_and_validation() {
        let tokens = TokenSet::default();
        let lex = Lexicon::from_words(["cat", "dog's"], &tokens).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lexicon.txt");
        lex.write(&path, &tokens).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "cat\tc a t\ndog's\td o g ' s\n");
        let back = Lexicon::read(&path, &tokens).unwrap();
        assert_eq!(back.len(), 2);
        let (w, sp) = back.entries().next().unwrap();
        assert_eq!(w, "cat");
        assert_eq!(sp.len(), 3);
        assert!(matches!(
            Lexicon::from_words(["bad word"], &tokens),
            Err(LmError::Unspellable(_))
        ));
    }
}
