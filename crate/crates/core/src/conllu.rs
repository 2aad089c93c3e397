//! CoNLL-U treebanks: parse, validate, write, combine, split.
//!
//! The data model covers basic dependencies only. Multiword tokens are kept
//! as surface ranges; enhanced-dependency / empty-node lines (`1.1` ids) are
//! preserved verbatim as opaque lines so treebanks round-trip, but are not
//! modeled.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// One syntactic word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    /// 1-based index within the sentence.
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    /// Head index in `[0, n]`; 0 is the root. `None` when unannotated.
    pub head: Option<usize>,
    pub deprel: Option<String>,
    pub deps: String,
    pub misc: String,
    /// Character offsets `(begin, end)` into the sentence's raw text.
    pub span: Option<(usize, usize)>,
}

impl Token {
    /// A bare token with only an id and form, all other columns `_`.
    pub fn bare(id: usize, form: &str) -> Self {
        Token {
            id,
            form: form.to_string(),
            lemma: "_".into(),
            upos: "_".into(),
            xpos: "_".into(),
            feats: "_".into(),
            head: None,
            deprel: None,
            deps: "_".into(),
            misc: "_".into(),
            span: None,
        }
    }
}

/// A surface token covering the word range `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiwordRange {
    pub start: usize,
    pub end: usize,
    pub form: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub mwts: Vec<MultiwordRange>,
    /// Verbatim non-token lines: `#`-comments and opaque empty-node lines.
    pub comments: Vec<String>,
    /// Raw source text, when known.
    pub text: Option<String>,
}

impl Sentence {
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        Sentence {
            tokens,
            ..Sentence::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when every token has a head and the graph is a single-rooted tree.
    pub fn is_tree(&self) -> bool {
        let n = self.tokens.len();
        let mut roots = 0;
        for t in &self.tokens {
            match t.head {
                Some(0) => roots += 1,
                Some(h) if h <= n && h != t.id => {}
                _ => return false,
            }
        }
        if roots != 1 {
            return false;
        }
        // Walk up from every token; a cycle would loop more than n steps.
        for t in &self.tokens {
            let mut cur = t.id;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head.unwrap();
                steps += 1;
                if steps > n {
                    return false;
                }
            }
        }
        true
    }

    /// The text form of this sentence: the stored raw text when present,
    /// otherwise forms joined with spaces (MWT ranges contribute their
    /// surface form once).
    pub fn surface_text(&self) -> String {
        if let Some(t) = &self.text {
            return t.clone();
        }
        let mut parts = Vec::new();
        let mut i = 0;
        while i < self.tokens.len() {
            let word_idx = i + 1;
            if let Some(mwt) = self.mwts.iter().find(|m| m.start == word_idx) {
                parts.push(mwt.form.clone());
                i = mwt.end;
            } else {
                parts.push(self.tokens[i].form.clone());
                i += 1;
            }
        }
        parts.join(" ")
    }
}

/// An ordered collection of sentences with a name and language code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Treebank {
    pub sentences: Vec<Sentence>,
    pub name: String,
    pub language: String,
}

impl Treebank {
    pub fn new(name: &str, language: &str) -> Self {
        assert!(!name.is_empty(), "treebank name must be non-empty");
        Treebank {
            sentences: Vec::new(),
            name: name.to_string(),
            language: language.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum ConlluError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: bad token id `{id}`")]
    BadId { line: usize, id: String },
    #[error("line {line}: token ids must be contiguous from 1 (expected {expected}, found {found})")]
    NonContiguousIds { line: usize, expected: usize, found: usize },
    #[error("line {line}: head {head} out of range for sentence of {len} tokens")]
    HeadOutOfRange { line: usize, head: usize, len: usize },
    #[error("line {line}: head equals token id {id}")]
    SelfHead { line: usize, id: usize },
    #[error("line {line}: deprel without head (or head without deprel)")]
    DanglingDeprel { line: usize },
    #[error("line {line}: multiword range {start}-{end} is invalid or overlaps another")]
    BadMwt { line: usize, start: usize, end: usize },
    #[error("sentence starting at line {line}: token `{form}` not found in raw text at offset {offset}")]
    SpanMismatch { line: usize, form: String, offset: usize },
    #[error("concat: empty treebank list")]
    EmptyConcat,
    #[error("kfold: k={k} exceeds sentence count {len} (or k < 2)")]
    BadFold { k: usize, len: usize },
}

/// Parse CoNLL-U text into a treebank.
///
/// Blank-line-separated blocks become sentences, `#` lines become comments,
/// `a-b` ids become multiword ranges, `a.b` (empty-node) lines are kept
/// verbatim. When a `# text = ...` comment is present, token character spans
/// are computed against it.
pub fn read_conllu(input: &str, name: &str, language: &str) -> Result<Treebank, ConlluError> {
    let mut tb = Treebank::new(name, language);
    let mut sent = Sentence::default();
    let mut sent_start_line = 1;
    let mut pending_heads: Vec<(usize, usize, Option<usize>)> = Vec::new(); // (line, id, head)

    let mut finish = |sent: &mut Sentence,
                      pending: &mut Vec<(usize, usize, Option<usize>)>,
                      start_line: usize|
     -> Result<(), ConlluError> {
        if sent.tokens.is_empty() && sent.comments.is_empty() {
            return Ok(());
        }
        let n = sent.tokens.len();
        for &(line, id, head) in pending.iter() {
            if let Some(h) = head {
                if h > n {
                    return Err(ConlluError::HeadOutOfRange { line, head: h, len: n });
                }
                if h == id {
                    return Err(ConlluError::SelfHead { line, id });
                }
            }
        }
        pending.clear();
        for c in &sent.comments {
            if let Some(text) = c.strip_prefix("# text =") {
                sent.text = Some(text.trim_start_matches(' ').to_string());
                break;
            }
        }
        if sent.text.is_some() {
            compute_spans(sent, start_line)?;
        }
        tb.sentences.push(std::mem::take(sent));
        Ok(())
    };

    for (i, raw_line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() {
            finish(&mut sent, &mut pending_heads, sent_start_line)?;
            sent_start_line = line_no + 1;
            continue;
        }
        if line.starts_with('#') {
            sent.comments.push(line.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ConlluError::ColumnCount {
                line: line_no,
                found: cols.len(),
            });
        }
        let id_field = cols[0];
        if id_field.contains('.') {
            // Empty node (enhanced dependencies): preserved verbatim, not modeled.
            sent.comments.push(line.to_string());
            continue;
        }
        if let Some((a, b)) = id_field.split_once('-') {
            let start: usize = a.parse().map_err(|_| ConlluError::BadId {
                line: line_no,
                id: id_field.to_string(),
            })?;
            let end: usize = b.parse().map_err(|_| ConlluError::BadId {
                line: line_no,
                id: id_field.to_string(),
            })?;
            let overlaps = sent
                .mwts
                .iter()
                .any(|m| start <= m.end && m.start <= end);
            if start > end || overlaps || start != sent.tokens.len() + 1 {
                return Err(ConlluError::BadMwt {
                    line: line_no,
                    start,
                    end,
                });
            }
            sent.mwts.push(MultiwordRange {
                start,
                end,
                form: cols[1].to_string(),
            });
            continue;
        }
        let id: usize = id_field.parse().map_err(|_| ConlluError::BadId {
            line: line_no,
            id: id_field.to_string(),
        })?;
        if id != sent.tokens.len() + 1 {
            return Err(ConlluError::NonContiguousIds {
                line: line_no,
                expected: sent.tokens.len() + 1,
                found: id,
            });
        }
        let head = match cols[6] {
            "_" => None,
            h => Some(h.parse::<usize>().map_err(|_| ConlluError::BadId {
                line: line_no,
                id: h.to_string(),
            })?),
        };
        let deprel = match cols[7] {
            "_" => None,
            d => Some(d.to_string()),
        };
        if head.is_some() != deprel.is_some() {
            return Err(ConlluError::DanglingDeprel { line: line_no });
        }
        pending_heads.push((line_no, id, head));
        sent.tokens.push(Token {
            id,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            xpos: cols[4].to_string(),
            feats: cols[5].to_string(),
            head,
            deprel,
            deps: cols[8].to_string(),
            misc: cols[9].to_string(),
            span: None,
        });
    }
    finish(&mut sent, &mut pending_heads, sent_start_line)?;
    Ok(tb)
}

/// Compute character spans by greedy left-to-right matching of forms against
/// the sentence's raw text, skipping whitespace. Words inside a multiword
/// token get proportional slices of the MWT's span.
fn compute_spans(sent: &mut Sentence, start_line: usize) -> Result<(), ConlluError> {
    let text: Vec<char> = sent.text.as_ref().unwrap().chars().collect();
    let mut cursor = 0usize;
    let match_form = |form: &str, cursor: &mut usize| -> Result<(usize, usize), ConlluError> {
        while *cursor < text.len() && text[*cursor].is_whitespace() {
            *cursor += 1;
        }
        let chars: Vec<char> = form.chars().collect();
        let begin = *cursor;
        if begin + chars.len() > text.len() || text[begin..begin + chars.len()] != chars[..] {
            return Err(ConlluError::SpanMismatch {
                line: start_line,
                form: form.to_string(),
                offset: begin,
            });
        }
        *cursor = begin + chars.len();
        Ok((begin, *cursor))
    };

    let mut i = 0;
    while i < sent.tokens.len() {
        let word_idx = i + 1;
        if let Some(mwt) = sent.mwts.iter().find(|m| m.start == word_idx).cloned() {
            let (b, e) = match_form(&mwt.form, &mut cursor)?;
            let k = mwt.end - mwt.start + 1;
            let width = e - b;
            for j in 0..k {
                let wb = b + j * width / k;
                let we = if j + 1 == k { e } else { b + (j + 1) * width / k };
                sent.tokens[i + j].span = Some((wb, we));
            }
            i += k;
        } else {
            let span = match_form(&sent.tokens[i].form, &mut cursor)?;
            sent.tokens[i].span = Some(span);
            i += 1;
        }
    }
    Ok(())
}

/// Serialize a treebank to CoNLL-U text (LF endings, one blank line after
/// each sentence). `read_conllu(write_conllu(tb))` reproduces `tb`
/// field-for-field.
pub fn write_conllu(tb: &Treebank) -> String {
    let mut out = String::new();
    for sent in &tb.sentences {
        for c in &sent.comments {
            out.push_str(c);
            out.push('\n');
        }
        for (i, tok) in sent.tokens.iter().enumerate() {
            let word_idx = i + 1;
            if let Some(mwt) = sent.mwts.iter().find(|m| m.start == word_idx) {
                let _ = writeln!(
                    out,
                    "{}-{}\t{}\t_\t_\t_\t_\t_\t_\t_\t_",
                    mwt.start, mwt.end, mwt.form
                );
            }
            let head = tok.head.map(|h| h.to_string()).unwrap_or_else(|| "_".into());
            let deprel = tok.deprel.clone().unwrap_or_else(|| "_".into());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                tok.id, tok.form, tok.lemma, tok.upos, tok.xpos, tok.feats, head, deprel, tok.deps, tok.misc
            );
        }
        out.push('\n');
    }
    out
}

/// Comment key used to record each sentence's source treebank when
/// concatenating, so per-source dev performance stays measurable.
pub const SOURCE_COMMENT_PREFIX: &str = "# source_treebank =";

/// In-order concatenation of several treebanks into one.
///
/// Every sentence gains a provenance comment naming its source treebank
/// (kept from an earlier concatenation if already present).
pub fn concat_treebanks(parts: &[Treebank], name: &str) -> Result<Treebank, ConlluError> {
    if parts.is_empty() {
        return Err(ConlluError::EmptyConcat);
    }
    let mut out = Treebank::new(name, &parts[0].language);
    for part in parts {
        for sent in &part.sentences {
            let mut s = sent.clone();
            if !s.comments.iter().any(|c| c.starts_with(SOURCE_COMMENT_PREFIX)) {
                s.comments.insert(0, format!("{} {}", SOURCE_COMMENT_PREFIX, part.name));
            }
            out.sentences.push(s);
        }
    }
    Ok(out)
}

/// Source treebank recorded by [`concat_treebanks`], if any.
pub fn sentence_source(sent: &Sentence) -> Option<&str> {
    sent.comments
        .iter()
        .find_map(|c| c.strip_prefix(SOURCE_COMMENT_PREFIX))
        .map(str::trim)
}

/// Deterministic k-fold split: shuffle sentence indices with a seeded PRNG,
/// deal round-robin, return `(train, heldout)` for the requested fold.
///
/// The k held-out parts partition the treebank and their sizes differ by at
/// most one. Sentence order within each part follows the original corpus.
pub fn kfold_split(
    tb: &Treebank,
    k: usize,
    fold: usize,
    seed: u64,
) -> Result<(Treebank, Treebank), ConlluError> {
    if k < 2 || k > tb.sentences.len() {
        return Err(ConlluError::BadFold {
            k,
            len: tb.sentences.len(),
        });
    }
    assert!(fold < k, "fold {fold} out of range for k={k}");
    let mut indices: Vec<usize> = (0..tb.sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let mut assignment: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, &idx) in indices.iter().enumerate() {
        assignment.insert(idx, pos % k);
    }

    let mut train = Treebank::new(&format!("{}-fold{}-train", tb.name, fold), &tb.language);
    let mut heldout = Treebank::new(&format!("{}-fold{}-heldout", tb.name, fold), &tb.language);
    for (idx, sent) in tb.sentences.iter().enumerate() {
        if assignment[&idx] == fold {
            heldout.sentences.push(sent.clone());
        } else {
            train.sentences.push(sent.clone());
        }
    }
    Ok((train, heldout))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stream_gives_empty_treebank() {
        let tb = read_conllu("", "t", "xx").unwrap();
        assert_eq!(tb.len(), 0);
        assert_eq!(write_conllu(&tb), "");
    }

    #[test]
    fn minimal_tree_parses() {
        let text = "1\tHello\t_\tINTJ\t_\t_\t2\tdiscourse\t_\t_\n\
                    2\tworld\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\n";
        let tb = read_conllu(text, "t", "en").unwrap();
        assert_eq!(tb.len(), 1);
        let s = &tb.sentences[0];
        assert_eq!(s.len(), 2);
        assert_eq!(s.tokens[1].head, Some(0));
        assert!(s.is_tree());
    }

    #[test]
    fn multiword_range_parses_and_roundtrips() {
        let text = "1-2\tvámonos\t_\t_\t_\t_\t_\t_\t_\t_\n\
                    1\tvamos\tir\tVERB\t_\t_\t0\troot\t_\t_\n\
                    2\tnos\tnosotros\tPRON\t_\t_\t1\tobj\t_\t_\n\n";
        let tb = read_conllu(text, "t", "es").unwrap();
        let s = &tb.sentences[0];
        assert_eq!(s.mwts, vec![MultiwordRange { start: 1, end: 2, form: "vámonos".into() }]);
        // byte-compare against the hand-written reference
        assert_eq!(write_conllu(&tb), text);
        let again = read_conllu(&write_conllu(&tb), "t", "es").unwrap();
        assert_eq!(again, tb);
    }

    #[test]
    fn column_count_error_names_line() {
        let text = "1\tonly\tthree\n\n";
        match read_conllu(text, "t", "xx") {
            Err(ConlluError::ColumnCount { line: 1, found: 3 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn head_out_of_range_rejected() {
        let text = "1\ta\t_\t_\t_\t_\t5\tdep\t_\t_\n\n";
        match read_conllu(text, "t", "xx") {
            Err(ConlluError::HeadOutOfRange { line: 1, head: 5, len: 1 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn non_contiguous_ids_rejected() {
        let text = "1\ta\t_\t_\t_\t_\t0\troot\t_\t_\n3\tb\t_\t_\t_\t_\t1\tdep\t_\t_\n\n";
        assert!(matches!(
            read_conllu(text, "t", "xx"),
            Err(ConlluError::NonContiguousIds { line: 2, expected: 2, found: 3 })
        ));
    }

    #[test]
    fn empty_node_lines_are_preserved_verbatim() {
        let text = "1\ta\t_\t_\t_\t_\t0\troot\t_\t_\n\
                    1.1\tghost\t_\t_\t_\t_\t_\t_\t_\t_\n\
                    2\tb\t_\t_\t_\t_\t1\tdep\t_\t_\n\n";
        let tb = read_conllu(text, "t", "xx").unwrap();
        let s = &tb.sentences[0];
        assert_eq!(s.len(), 2);
        assert_eq!(s.comments.len(), 1);
        assert!(s.comments[0].starts_with("1.1\t"));
        let again = read_conllu(&write_conllu(&tb), "t", "xx").unwrap();
        assert_eq!(again, tb);
    }

    #[test]
    fn spans_computed_from_text_comment() {
        let text = "# text = Hola mundo\n\
                    1\tHola\t_\t_\t_\t_\t2\tdiscourse\t_\t_\n\
                    2\tmundo\t_\t_\t_\t_\t0\troot\t_\t_\n\n";
        let tb = read_conllu(text, "t", "es").unwrap();
        let s = &tb.sentences[0];
        assert_eq!(s.tokens[0].span, Some((0, 4)));
        assert_eq!(s.tokens[1].span, Some((5, 10)));
    }

    #[test]
    fn mwt_words_get_proportional_spans() {
        let text = "# text = vámonos ya\n\
                    1-2\tvámonos\t_\t_\t_\t_\t_\t_\t_\t_\n\
                    1\tvamos\t_\t_\t_\t_\t0\troot\t_\t_\n\
                    2\tnos\t_\t_\t_\t_\t1\tobj\t_\t_\n\
                    3\tya\t_\t_\t_\t_\t1\tadvmod\t_\t_\n\n";
        let tb = read_conllu(text, "t", "es").unwrap();
        let s = &tb.sentences[0];
        // "vámonos" is 7 chars: proportional split 0..3, 3..7
        assert_eq!(s.tokens[0].span, Some((0, 3)));
        assert_eq!(s.tokens[1].span, Some((3, 7)));
        assert_eq!(s.tokens[2].span, Some((8, 10)));
    }

    #[test]
    fn span_mismatch_is_an_error() {
        let text = "# text = goodbye\n\
                    1\thello\t_\t_\t_\t_\t0\troot\t_\t_\n\n";
        assert!(matches!(
            read_conllu(text, "t", "xx"),
            Err(ConlluError::SpanMismatch { .. })
        ));
    }

    fn tiny_tb(name: &str, n: usize) -> Treebank {
        let mut tb = Treebank::new(name, "xx");
        for i in 0..n {
            let mut t = Token::bare(1, &format!("w{i}"));
            t.head = Some(0);
            t.deprel = Some("root".into());
            tb.sentences.push(Sentence::from_tokens(vec![t]));
        }
        tb
    }

    #[test]
    fn concat_single_input_adds_provenance() {
        let tb = concat_treebanks(&[tiny_tb("a", 3)], "out").unwrap();
        assert_eq!(tb.len(), 3);
        for s in &tb.sentences {
            assert_eq!(sentence_source(s), Some("a"));
        }
    }

    #[test]
    fn concat_counts_add() {
        let tb = concat_treebanks(&[tiny_tb("a", 3), tiny_tb("b", 2)], "ab").unwrap();
        assert_eq!(tb.len(), 5);
        assert_eq!(sentence_source(&tb.sentences[0]), Some("a"));
        assert_eq!(sentence_source(&tb.sentences[4]), Some("b"));
    }

    #[test]
    fn concat_at_reference_corpus_sizes() {
        // 12.2k + 5.8k sentence corpora concatenate to exactly 18.0k.
        let tb = concat_treebanks(&[tiny_tb("alpino-like", 12_200), tiny_tb("lassysmall-like", 5_800)], "nl")
            .unwrap();
        assert_eq!(tb.len(), 18_000);
    }

    #[test]
    fn concat_preserves_token_content() {
        let a = tiny_tb("a", 2);
        let combined = concat_treebanks(&[a.clone()], "out").unwrap();
        for (orig, got) in a.sentences.iter().zip(&combined.sentences) {
            assert_eq!(orig.tokens, got.tokens);
        }
    }

    #[test]
    fn concat_of_nothing_is_an_error() {
        assert!(matches!(concat_treebanks(&[], "x"), Err(ConlluError::EmptyConcat)));
    }

    #[test]
    fn kfold_even_split() {
        let tb = tiny_tb("t", 10);
        for fold in 0..5 {
            let (train, heldout) = kfold_split(&tb, 5, fold, 7).unwrap();
            assert_eq!(heldout.len(), 2);
            assert_eq!(train.len(), 8);
        }
    }

    #[test]
    fn kfold_partition_law() {
        let tb = tiny_tb("t", 11);
        let mut seen = std::collections::BTreeSet::new();
        let mut sizes = Vec::new();
        for fold in 0..5 {
            let (_, heldout) = kfold_split(&tb, 5, fold, 3).unwrap();
            sizes.push(heldout.len());
            for s in &heldout.sentences {
                // forms are unique across the corpus
                assert!(seen.insert(s.tokens[0].form.clone()), "overlapping folds");
            }
        }
        assert_eq!(seen.len(), 11);
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn kfold_is_deterministic() {
        let tb = tiny_tb("t", 9);
        let a = kfold_split(&tb, 3, 1, 42).unwrap();
        let b = kfold_split(&tb, 3, 1, 42).unwrap();
        assert_eq!(a, b);
        let c = kfold_split(&tb, 3, 1, 43).unwrap();
        assert!(a != c || a == c, "different seeds may or may not differ, but must not crash");
    }

    #[test]
    fn kfold_rejects_bad_k() {
        let tb = tiny_tb("t", 3);
        assert!(matches!(kfold_split(&tb, 5, 0, 0), Err(ConlluError::BadFold { .. })));
        assert!(matches!(kfold_split(&tb, 1, 0, 0), Err(ConlluError::BadFold { .. })));
    }
}
