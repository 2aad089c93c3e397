//! Word representations: static tables, fine-tuned token tables, character
//! encoders, and the bidirectional language model that supplies contextual
//! vectors.
//!
//! The word vector fed to the tagger and parser is an elementwise sum of the
//! enabled components: a fine-tuned token embedding, a fixed pretrained
//! embedding, an LSTM-encoded character representation, and (optionally) a
//! projected contextual vector from the LM. The LM is trained once on raw
//! text and is frozen afterwards; downstream training never updates it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{init_orthogonal, init_xavier, Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding file is empty")]
    EmptyFile,
    #[error("embedding line {line}: expected {expected} values, found {found}")]
    DimMismatch { line: usize, expected: usize, found: usize },
    #[error("embedding line {line}: cannot parse value")]
    BadValue { line: usize },
    #[error("keep fraction {0} outside (0, 1]")]
    BadKeepFraction(f64),
    #[error("LM training corpus is empty")]
    EmptyCorpus,
    #[error("sampled-softmax window must be >= 1")]
    BadWindow,
}

// ---------------------------------------------------------------------------
// Static (frozen) embeddings
// ---------------------------------------------------------------------------

/// A frozen pretrained embedding table, ordered by frequency rank.
///
/// Lookups of unknown words return a designated all-zero row. The table never
/// receives gradients: its values are fed into graphs as constants.
#[derive(Clone, Debug)]
pub struct StaticEmbeddings {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    vectors: Vec<f64>, // |V| x dim, row-major
    dim: usize,
    zero: Vec<f64>,
    pub frozen: bool,
}

impl StaticEmbeddings {
    pub fn from_pairs(pairs: Vec<(String, Vec<f64>)>) -> Result<Self, EmbedError> {
        if pairs.is_empty() {
            return Err(EmbedError::EmptyFile);
        }
        let dim = pairs[0].1.len();
        let mut words = Vec::with_capacity(pairs.len());
        let mut index = BTreeMap::new();
        let mut vectors = Vec::with_capacity(pairs.len() * dim);
        for (line, (w, v)) in pairs.into_iter().enumerate() {
            if v.len() != dim {
                return Err(EmbedError::DimMismatch {
                    line: line + 1,
                    expected: dim,
                    found: v.len(),
                });
            }
            index.entry(w.clone()).or_insert(words.len());
            words.push(w);
            vectors.extend_from_slice(&v);
        }
        Ok(StaticEmbeddings {
            words,
            index,
            vectors,
            dim,
            zero: vec![0.0; dim],
            frozen: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in frequency-rank order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn rank(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// The vector for `word`; unknown words get the zero row.
    pub fn lookup(&self, word: &str) -> &[f64] {
        match self.index.get(word) {
            Some(&i) => &self.vectors[i * self.dim..(i + 1) * self.dim],
            None => &self.zero,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Apply a linear map (d×d, row-major) to every row, producing the table
    /// in the mapped space.
    pub fn mapped(&self, q: &[f64], out_dim: usize) -> StaticEmbeddings {
        assert_eq!(q.len(), out_dim * self.dim, "map shape mismatch");
        let mut vectors = Vec::with_capacity(self.words.len() * out_dim);
        for i in 0..self.words.len() {
            let row = self.row(i);
            for r in 0..out_dim {
                let v: f64 = (0..self.dim).map(|c| q[r * self.dim + c] * row[c]).sum();
                vectors.push(v);
            }
        }
        StaticEmbeddings {
            words: self.words.clone(),
            index: self.index.clone(),
            vectors,
            dim: out_dim,
            zero: vec![0.0; out_dim],
            frozen: true,
        }
    }

    /// Merge two tables; where both contain a word, `priority` wins.
    pub fn merged(priority: &StaticEmbeddings, other: &StaticEmbeddings) -> StaticEmbeddings {
        assert_eq!(priority.dim, other.dim, "merged: dim mismatch");
        let mut pairs: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, w) in priority.words.iter().enumerate() {
            pairs.push((w.clone(), priority.row(i).to_vec()));
        }
        for (i, w) in other.words.iter().enumerate() {
            if !priority.contains(w) {
                pairs.push((w.clone(), other.row(i).to_vec()));
            }
        }
        StaticEmbeddings::from_pairs(pairs).expect("merged tables are non-empty")
    }
}

/// Load embeddings from text: an optional `count dim` header, then
/// `word v1 ... vd` lines ordered by frequency rank. Only the top
/// `keep_fraction` of words is retained (rounded up).
pub fn load_embeddings(text: &str, keep_fraction: f64) -> Result<StaticEmbeddings, EmbedError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(EmbedError::BadKeepFraction(keep_fraction));
    }
    let mut pairs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut expected_dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let first = parts.next().expect("non-empty line");
        let rest: Vec<&str> = parts.collect();
        if i == 0 && rest.len() == 1 {
            // `count dim` header
            if first.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                expected_dim = Some(rest[0].parse().unwrap());
                continue;
            }
        }
        let values: Result<Vec<f64>, _> = rest.iter().map(|v| v.parse::<f64>()).collect();
        let values = values.map_err(|_| EmbedError::BadValue { line: i + 1 })?;
        if let Some(d) = expected_dim {
            if values.len() != d {
                return Err(EmbedError::DimMismatch {
                    line: i + 1,
                    expected: d,
                    found: values.len(),
                });
            }
        } else {
            expected_dim = Some(values.len());
        }
        pairs.push((first.to_string(), values));
    }
    if pairs.is_empty() {
        return Err(EmbedError::EmptyFile);
    }
    let keep = ((pairs.len() as f64) * keep_fraction).ceil() as usize;
    pairs.truncate(keep.max(1));
    StaticEmbeddings::from_pairs(pairs)
}

// ---------------------------------------------------------------------------
// Trainable token vocabulary
// ---------------------------------------------------------------------------

pub const UNK_WORD: &str = "<unk>";

/// Vocabulary for the fine-tuned token table: words at or above the training
/// frequency cutoff, plus `<unk>` at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    freq: BTreeMap<String, usize>,
    pub min_freq: usize,
}

impl TokenVocab {
    pub fn build<'a, I: Iterator<Item = &'a str>>(tokens: I, min_freq: usize) -> TokenVocab {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *freq.entry(t.to_string()).or_insert(0) += 1;
        }
        let mut words = vec![UNK_WORD.to_string()];
        let mut index = BTreeMap::new();
        index.insert(UNK_WORD.to_string(), 0);
        for (w, &c) in &freq {
            if c >= min_freq && w != UNK_WORD {
                index.insert(w.clone(), words.len());
                words.push(w.clone());
            }
        }
        TokenVocab { words, index, freq, min_freq }
    }

    pub fn from_words(words: Vec<String>, freq: BTreeMap<String, usize>, min_freq: usize) -> TokenVocab {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            index.insert(w.clone(), i);
        }
        TokenVocab { words, index, freq, min_freq }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn freqs(&self) -> &BTreeMap<String, usize> {
        &self.freq
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    /// Training-time lookup: words whose training frequency is 1 are
    /// stochastically replaced by `<unk>` so the UNK vector gets trained.
    pub fn id_train<R: Rng>(&self, word: &str, unk_prob: f64, rng: &mut R) -> usize {
        let id = self.id(word);
        if id != 0 && self.freq.get(word).copied().unwrap_or(0) <= 1 && rng.gen::<f64>() < unk_prob {
            return 0;
        }
        id
    }
}

/// Character vocabulary with `<unk>` at index 0. A "character" is a unit
/// chosen by the caller (a char, or a whitespace-separated syllable).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    units: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const UNK_CHAR: &str = "<unk>";

impl CharVocab {
    pub fn build<'a, I: Iterator<Item = &'a str>>(units: I) -> CharVocab {
        let mut index = BTreeMap::new();
        let mut list = vec![UNK_CHAR.to_string()];
        index.insert(UNK_CHAR.to_string(), 0);
        let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
        for u in units {
            seen.entry(u).or_insert(());
        }
        for (u, ()) in seen {
            if u != UNK_CHAR {
                index.insert(u.to_string(), list.len());
                list.push(u.to_string());
            }
        }
        CharVocab { units: list, index }
    }

    pub fn from_units(units: Vec<String>) -> CharVocab {
        let mut index = BTreeMap::new();
        for (i, u) in units.iter().enumerate() {
            index.insert(u.clone(), i);
        }
        CharVocab { units, index }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    /// Unknown units map to `<unk>`, never an error.
    pub fn id(&self, unit: &str) -> usize {
        self.index.get(unit).copied().unwrap_or(0)
    }

    pub fn word_ids(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.id(&c.to_string())).collect()
    }
}

// ---------------------------------------------------------------------------
// LSTM / MLP building blocks
// ---------------------------------------------------------------------------

/// Parameter ids for one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_ih = store.add(&format!("{prefix}.w_ih"), init_xavier(&[4 * hidden, in_dim], rng));
        // Recurrent matrix: four stacked orthogonal h×h gate blocks.
        let mut whh = Tensor::zeros(&[4 * hidden, hidden]);
        for gate in 0..4 {
            let q = init_orthogonal(hidden, rng);
            for r in 0..hidden {
                for c in 0..hidden {
                    whh.data_mut()[(gate * hidden + r) * hidden + c] = q.at2(r, c);
                }
            }
        }
        let w_hh = store.add(&format!("{prefix}.w_hh"), whh);
        let b = store.add(&format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]));
        LstmParams { w_ih, w_hh, b, hidden }
    }

    pub fn lookup(store: &ParamStore, prefix: &str, hidden: usize) -> Self {
        LstmParams {
            w_ih: store.get(&format!("{prefix}.w_ih")).expect("missing lstm w_ih"),
            w_hh: store.get(&format!("{prefix}.w_hh")).expect("missing lstm w_hh"),
            b: store.get(&format!("{prefix}.b")).expect("missing lstm b"),
            hidden,
        }
    }

    /// Run over a sequence; `reverse` consumes the inputs right-to-left but
    /// returns states in input order.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, inputs: &[NodeId], reverse: bool) -> Vec<NodeId> {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.b);
        let mut h = g.input(Tensor::zeros(&[self.hidden]));
        let mut c = g.input(Tensor::zeros(&[self.hidden]));
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        let mut out = vec![None; inputs.len()];
        for i in order {
            let (h2, c2) = g.lstm_step(w_ih, w_hh, b, inputs[i], h, c);
            h = h2;
            c = c2;
            out[i] = Some(h);
        }
        out.into_iter().map(|o| o.unwrap()).collect()
    }
}

/// A bidirectional LSTM layer: forward and backward states concatenated.
#[derive(Clone, Copy, Debug)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        BiLstmParams {
            fwd: LstmParams::init(store, &format!("{prefix}.fwd"), in_dim, hidden, rng),
            bwd: LstmParams::init(store, &format!("{prefix}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn lookup(store: &ParamStore, prefix: &str, hidden: usize) -> Self {
        BiLstmParams {
            fwd: LstmParams::lookup(store, &format!("{prefix}.fwd"), hidden),
            bwd: LstmParams::lookup(store, &format!("{prefix}.bwd"), hidden),
        }
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, inputs: &[NodeId]) -> Vec<NodeId> {
        let f = self.fwd.run(g, store, inputs, false);
        let b = self.bwd.run(g, store, inputs, true);
        f.into_iter().zip(b).map(|(x, y)| g.concat(&[x, y])).collect()
    }
}

/// One-layer MLP: ReLU(Wx + b).
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl MlpParams {
    pub fn init(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpParams {
            w: store.add(&format!("{prefix}.w"), init_xavier(&[out_dim, in_dim], rng)),
            b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Self {
        MlpParams {
            w: store.get(&format!("{prefix}.w")).expect("missing mlp w"),
            b: store.get(&format!("{prefix}.b")).expect("missing mlp b"),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let a = g.affine(w, x, b);
        g.relu(a)
    }
}

// ---------------------------------------------------------------------------
// Character encoder (for the tagger/parser word representation)
// ---------------------------------------------------------------------------

/// Single-layer character BiLSTM whose final states are projected to the
/// word dimension.
#[derive(Clone, Debug)]
pub struct CharEncoder {
    pub vocab: CharVocab,
    pub emb: ParamId,
    pub bilstm: BiLstmParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub char_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl CharEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab: CharVocab,
        char_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let emb = store.add(&format!("{prefix}.char_emb"), init_xavier(&[vocab.len(), char_dim], rng));
        let bilstm = BiLstmParams::init(store, &format!("{prefix}.char_bilstm"), char_dim, hidden, rng);
        let proj_w = store.add(&format!("{prefix}.char_proj.w"), init_xavier(&[out_dim, 2 * hidden], rng));
        let proj_b = store.add(&format!("{prefix}.char_proj.b"), Tensor::zeros(&[out_dim]));
        CharEncoder { vocab, emb, bilstm, proj_w, proj_b, char_dim, hidden, out_dim }
    }

    pub fn lookup(store: &ParamStore, prefix: &str, vocab: CharVocab, char_dim: usize, hidden: usize, out_dim: usize) -> Self {
        CharEncoder {
            vocab,
            emb: store.get(&format!("{prefix}.char_emb")).expect("missing char_emb"),
            bilstm: BiLstmParams::lookup(store, &format!("{prefix}.char_bilstm"), hidden),
            proj_w: store.get(&format!("{prefix}.char_proj.w")).expect("missing char proj"),
            proj_b: store.get(&format!("{prefix}.char_proj.b")).expect("missing char proj"),
            char_dim,
            hidden,
            out_dim,
        }
    }

    /// Encode one word: final forward state ⊕ final backward state, projected.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, word: &str) -> NodeId {
        let emb = g.param(store, self.emb);
        let ids = self.vocab.word_ids(word);
        let inputs: Vec<NodeId> = if ids.is_empty() {
            vec![g.input(Tensor::zeros(&[self.char_dim]))]
        } else {
            ids.iter().map(|&i| g.lookup(emb, i)).collect()
        };
        let fwd = self.bilstm.fwd.run(g, store, &inputs, false);
        let bwd = self.bilstm.bwd.run(g, store, &inputs, true);
        let last_f = *fwd.last().unwrap();
        let first_b = bwd[0];
        let cat = g.concat(&[last_f, first_b]);
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        g.affine(w, cat, b)
    }
}

// ---------------------------------------------------------------------------
// Bidirectional language model (contextual vectors)
// ---------------------------------------------------------------------------

/// Which LM layers feed the contextual vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmMode {
    /// The character-CNN output alone (duplicated to the state width).
    Layer0,
    /// Unweighted sum of layers 0, 1, 2.
    Sum012,
}

impl LmMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LmMode::Layer0 => "layer0",
            LmMode::Sum012 => "sum012",
        }
    }

    pub fn parse(s: &str) -> Option<LmMode> {
        match s {
            "layer0" => Some(LmMode::Layer0),
            "sum012" => Some(LmMode::Sum012),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BiLmConfig {
    pub char_dim: usize,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Sampled-softmax window of frequency ranks around the target; `None`
    /// uses the full vocabulary.
    pub softmax_window: Option<usize>,
}

impl Default for BiLmConfig {
    fn default() -> Self {
        BiLmConfig {
            char_dim: 16,
            filter_widths: vec![1, 2, 3],
            filters_per_width: 32,
            layers: 2,
            epochs: 30,
            lr: 2e-3,
            seed: 1,
            softmax_window: None,
        }
    }
}

/// A trained bidirectional LM over words whose inputs come from a character
/// CNN. Frozen once trained; `contextualize` is pure.
pub struct BiLMModel {
    pub store: ParamStore,
    pub config: BiLmConfig,
    /// Words in frequency-rank order (most frequent first).
    pub word_vocab: Vec<String>,
    word_index: BTreeMap<String, usize>,
    pub char_vocab: CharVocab,
    /// Total CNN output dim; also the per-direction LSTM width.
    pub cnn_dim: usize,
    pub default_mode: LmMode,
}

/// Per-layer LM states for one sentence. All vectors have the width of one
/// LSTM direction (`cnn_dim`); the combined representation per layer is the
/// forward/backward concatenation.
pub struct LmStates {
    /// Char-CNN outputs ṽ_i per token.
    pub v: Vec<Vec<f64>>,
    /// fwd[layer][pos]: forward state after consuming token `pos`.
    pub fwd: Vec<Vec<Vec<f64>>>,
    /// bwd[layer][pos]: backward state after consuming token `pos`.
    pub bwd: Vec<Vec<Vec<f64>>>,
}

struct LmParamIds {
    char_emb: ParamId,
    convs: Vec<(ParamId, ParamId, usize)>, // (weight, bias, width)
    bos: ParamId,
    eos: ParamId,
    fwd: Vec<LstmParams>,
    bwd: Vec<LstmParams>,
    out_w: ParamId,
    out_b: ParamId,
}

impl BiLMModel {
    fn param_ids(&self) -> LmParamIds {
        let s = &self.store;
        let m = self.cnn_dim;
        LmParamIds {
            char_emb: s.get("lm.char_emb").unwrap(),
            convs: self
                .config
                .filter_widths
                .iter()
                .map(|&w| {
                    (
                        s.get(&format!("lm.conv{w}.w")).unwrap(),
                        s.get(&format!("lm.conv{w}.b")).unwrap(),
                        w,
                    )
                })
                .collect(),
            bos: s.get("lm.bos").unwrap(),
            eos: s.get("lm.eos").unwrap(),
            fwd: (0..self.config.layers)
                .map(|l| LstmParams::lookup(s, &format!("lm.fwd{l}"), m))
                .collect(),
            bwd: (0..self.config.layers)
                .map(|l| LstmParams::lookup(s, &format!("lm.bwd{l}"), m))
                .collect(),
            out_w: s.get("lm.out.w").unwrap(),
            out_b: s.get("lm.out.b").unwrap(),
        }
    }

    pub fn word_rank(&self, word: &str) -> Option<usize> {
        self.word_index.get(word).copied()
    }

    /// Char-CNN representation of a word: per-width conv + max-pool,
    /// concatenated, then tanh.
    fn char_cnn(&self, g: &mut Graph, ids: &LmParamIds, word: &str) -> NodeId {
        let emb = g.param(&self.store, ids.char_emb);
        let unit_ids = self.char_vocab.word_ids(word);
        let rows: Vec<NodeId> = if unit_ids.is_empty() {
            vec![g.input(Tensor::zeros(&[self.config.char_dim]))]
        } else {
            unit_ids.iter().map(|&i| g.lookup(emb, i)).collect()
        };
        let seq = g.stack_rows(&rows);
        let pooled: Vec<NodeId> = ids
            .convs
            .iter()
            .map(|&(w, b, width)| {
                let wn = g.param(&self.store, w);
                let bn = g.param(&self.store, b);
                g.conv1d_maxpool(seq, wn, bn, width)
            })
            .collect();
        let cat = g.concat(&pooled);
        g.tanh(cat)
    }

    /// Run the full LM over a sentence, returning all layer states.
    pub fn states(&self, words: &[String]) -> LmStates {
        let mut g = Graph::new();
        let ids = self.param_ids();
        let n = words.len();
        let v_nodes: Vec<NodeId> = words.iter().map(|w| self.char_cnn(&mut g, &ids, w)).collect();
        let bos = g.param(&self.store, ids.bos);
        let eos = g.param(&self.store, ids.eos);

        // Forward: consume [bos, v_1..v_n]; state t is "after token t".
        let mut fwd_states: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut layer_in: Vec<NodeId> = std::iter::once(bos).chain(v_nodes.iter().copied()).collect();
        for lstm in &ids.fwd {
            let states = lstm.run(&mut g, &self.store, &layer_in, false);
            fwd_states.push(states[1..].iter().map(|&s| g.value(s).data().to_vec()).collect());
            layer_in = states;
        }
        // Backward: consume [eos, v_n..v_1].
        let mut bwd_states: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut layer_in: Vec<NodeId> = std::iter::once(eos)
            .chain(v_nodes.iter().rev().copied())
            .collect();
        for lstm in &ids.bwd {
            let states = lstm.run(&mut g, &self.store, &layer_in, false);
            let mut per_pos: Vec<Vec<f64>> = states[1..].iter().map(|&s| g.value(s).data().to_vec()).collect();
            per_pos.reverse(); // back to sentence order
            bwd_states.push(per_pos);
            layer_in = states;
        }
        let _ = n;
        LmStates {
            v: v_nodes.iter().map(|&v| g.value(v).data().to_vec()).collect(),
            fwd: fwd_states,
            bwd: bwd_states,
        }
    }

    /// Contextual vector per token (width `2 * cnn_dim`), fixed — no
    /// gradients ever flow back into the LM.
    pub fn contextualize(&self, words: &[String], mode: LmMode) -> Vec<Vec<f64>> {
        let st = self.states(words);
        let n = words.len();
        let m = self.cnn_dim;
        (0..n)
            .map(|i| {
                // layer 0: ṽ_i duplicated to match the fwd⊕bwd width
                let mut rep: Vec<f64> = st.v[i].iter().chain(st.v[i].iter()).copied().collect();
                if mode == LmMode::Sum012 {
                    for l in 0..self.config.layers {
                        for k in 0..m {
                            rep[k] += st.fwd[l][i][k];
                            rep[m + k] += st.bwd[l][i][k];
                        }
                    }
                }
                rep
            })
            .collect()
    }

    pub fn rep_dim(&self) -> usize {
        2 * self.cnn_dim
    }
}

/// Train the bidirectional LM on token sequences with the joint
/// forward+backward negative log-likelihood.
pub fn train_bilm(corpus: &[Vec<String>], config: BiLmConfig) -> Result<BiLMModel, EmbedError> {
    use rand::SeedableRng;

    let sentences: Vec<&Vec<String>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    if sentences.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    if config.softmax_window == Some(0) {
        return Err(EmbedError::BadWindow);
    }

    // Frequency-ranked vocabulary: count desc, then lexicographic.
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &sentences {
        for w in s.iter() {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let word_vocab: Vec<String> = ranked.iter().map(|(w, _)| w.to_string()).collect();
    let word_index: BTreeMap<String, usize> = word_vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i))
        .collect();

    let char_vocab = CharVocab::build(
        sentences
            .iter()
            .flat_map(|s| s.iter())
            .flat_map(|w| w.chars().map(|c| c.to_string()))
            .collect::<Vec<_>>()
            .iter()
            .map(|s| s.as_str()),
    );

    let m: usize = config.filter_widths.len() * config.filters_per_width;
    let v = word_vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    store.add("lm.char_emb", init_xavier(&[char_vocab.len(), config.char_dim], &mut rng));
    for &w in &config.filter_widths {
        store.add(
            &format!("lm.conv{w}.w"),
            init_xavier(&[config.filters_per_width, w * config.char_dim], &mut rng),
        );
        store.add(&format!("lm.conv{w}.b"), Tensor::zeros(&[config.filters_per_width]));
    }
    store.add("lm.bos", init_xavier(&[m], &mut rng));
    store.add("lm.eos", init_xavier(&[m], &mut rng));
    for l in 0..config.layers {
        LstmParams::init(&mut store, &format!("lm.fwd{l}"), m, m, &mut rng);
        LstmParams::init(&mut store, &format!("lm.bwd{l}"), m, m, &mut rng);
    }
    store.add("lm.out.w", init_xavier(&[v, m], &mut rng));
    store.add("lm.out.b", Tensor::zeros(&[v]));

    let mut model = BiLMModel {
        store,
        config: config.clone(),
        word_vocab,
        word_index,
        char_vocab,
        cnn_dim: m,
        default_mode: LmMode::Sum012,
    };

    let adam = crate::autodiff::AdamConfig {
        lr: config.lr,
        ..Default::default()
    };
    for _epoch in 0..config.epochs {
        for sent in &sentences {
            let loss = lm_sentence_pass(&mut model, sent, true);
            let _ = loss;
            crate::autodiff::adam_step(&mut model.store, &adam);
        }
    }
    Ok(model)
}

/// One LM pass over a sentence. With `train`, runs backward and leaves grads
/// in the store; returns the summed forward+backward NLL and the number of
/// predictions (for perplexity).
fn lm_sentence_pass(model: &mut BiLMModel, words: &[String], train: bool) -> (f64, usize) {
    let mut g = Graph::new();
    let ids = model.param_ids();
    let n = words.len();
    let targets: Vec<usize> = words.iter().map(|w| model.word_index[w]).collect();

    let v_nodes: Vec<NodeId> = words.iter().map(|w| model.char_cnn(&mut g, &ids, w)).collect();
    let bos = g.param(&model.store, ids.bos);
    let eos = g.param(&model.store, ids.eos);

    // Forward direction: predict w_i from the state after w_{i-1}.
    let mut layer_in: Vec<NodeId> = std::iter::once(bos).chain(v_nodes.iter().copied()).collect();
    for lstm in &ids.fwd {
        layer_in = lstm.run(&mut g, &model.store, &layer_in, false);
    }
    let fwd_top = layer_in;
    // Backward direction: predict w_i from the state after w_{i+1}.
    let mut layer_in: Vec<NodeId> = std::iter::once(eos)
        .chain(v_nodes.iter().rev().copied())
        .collect();
    for lstm in &ids.bwd {
        layer_in = lstm.run(&mut g, &model.store, &layer_in, false);
    }
    let bwd_top = layer_in;

    let mut losses = Vec::with_capacity(2 * n);
    for i in 0..n {
        let fwd_state = fwd_top[i]; // after consuming w_{i-1} (index 0 = bos)
        let bwd_state = bwd_top[n - 1 - i]; // after consuming w_{i+1}
        for state in [fwd_state, bwd_state] {
            let loss = lm_prediction_loss(&mut g, model, &ids, state, targets[i]);
            losses.push(loss);
        }
    }
    let total = if losses.len() == 1 {
        losses[0]
    } else {
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = g.add(acc, l);
        }
        acc
    };
    let nll = g.value(total).item();
    if train {
        let mean = g.scale(total, 1.0 / losses.len() as f64);
        g.backward(mean);
        g.flush_grads(&mut model.store);
    }
    (nll, losses.len())
}

/// Cross-entropy over either the full vocabulary or the sampled-softmax
/// window of frequency ranks around the target.
fn lm_prediction_loss(
    g: &mut Graph,
    model: &BiLMModel,
    ids: &LmParamIds,
    state: NodeId,
    target: usize,
) -> NodeId {
    let v = model.word_vocab.len();
    let (lo, hi) = match model.config.softmax_window {
        Some(w) if w < v => {
            let half = w / 2;
            let lo = target.saturating_sub(half).min(v - w);
            (lo, lo + w)
        }
        _ => (0, v),
    };
    let out_w = g.param(&model.store, ids.out_w);
    let out_b = g.param(&model.store, ids.out_b);
    let w_win = g.slice_rows(out_w, lo, hi);
    let b_win = g.slice(out_b, lo, hi);
    let logits = g.affine(w_win, state, b_win);
    g.softmax_cross_entropy(logits, target - lo)
}

/// Forward-direction perplexity of the model on a corpus:
/// exp(mean NLL per forward prediction).
pub fn bilm_forward_perplexity(model: &BiLMModel, corpus: &[Vec<String>]) -> f64 {
    let ids = model.param_ids();
    let mut nll = 0.0;
    let mut count = 0usize;
    for sent in corpus {
        if sent.is_empty() {
            continue;
        }
        let known: Vec<String> = sent.clone();
        let mut g = Graph::new();
        let v_nodes: Vec<NodeId> = known.iter().map(|w| model.char_cnn(&mut g, &ids, w)).collect();
        let bos = g.param(&model.store, ids.bos);
        let mut layer_in: Vec<NodeId> = std::iter::once(bos).chain(v_nodes.iter().copied()).collect();
        for lstm in &ids.fwd {
            layer_in = lstm.run(&mut g, &model.store, &layer_in, false);
        }
        for (i, w) in known.iter().enumerate() {
            let Some(&target) = model.word_index.get(w) else { continue };
            let loss = lm_prediction_loss(&mut g, model, &ids, layer_in[i], target);
            nll += g.value(loss).item();
            count += 1;
        }
    }
    (nll / count.max(1) as f64).exp()
}

/// Mean joint (forward+backward) NLL per prediction on a corpus.
pub fn bilm_mean_nll(model: &mut BiLMModel, corpus: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for sent in corpus {
        if sent.is_empty() {
            continue;
        }
        let (nll, n) = lm_sentence_pass(model, sent, false);
        total += nll;
        count += n;
    }
    total / count.max(1) as f64
}

// ---------------------------------------------------------------------------
// Word-representation composition
// ---------------------------------------------------------------------------

/// A trained LM plus the layer-combination mode chosen for a treebank.
#[derive(Clone, Copy)]
pub struct LmResource<'a> {
    pub model: &'a BiLMModel,
    pub mode: LmMode,
}

impl<'a> LmResource<'a> {
    pub fn contextualize(&self, words: &[String]) -> Vec<Vec<f64>> {
        self.model.contextualize(words, self.mode)
    }
}

/// Which components the summed word representation uses.
#[derive(Clone, Debug, PartialEq)]
pub struct WordReprConfig {
    pub dim: usize,
    pub use_token_table: bool,
    pub use_static: bool,
    pub use_char: bool,
    pub use_lm: bool,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub word_min_freq: usize,
    pub singleton_unk_prob: f64,
    pub lm_dropout: f64,
}

impl Default for WordReprConfig {
    fn default() -> Self {
        WordReprConfig {
            dim: 50,
            use_token_table: true,
            use_static: true,
            use_char: true,
            use_lm: false,
            char_dim: 16,
            char_hidden: 25,
            word_min_freq: 2,
            singleton_unk_prob: 0.5,
            lm_dropout: 0.33,
        }
    }
}

/// The trainable parts of the word representation, owned by a tagger or
/// parser model's parameter store.
#[derive(Clone, Debug)]
pub struct WordRepr {
    pub config: WordReprConfig,
    pub token_vocab: Option<TokenVocab>,
    pub token_table: Option<ParamId>,
    pub char_encoder: Option<CharEncoder>,
    /// W^(ELMo): projects the contextual vector to the word dimension.
    pub lm_proj: Option<ParamId>,
}

impl WordRepr {
    pub fn init<'a, I>(
        store: &mut ParamStore,
        prefix: &str,
        config: WordReprConfig,
        train_tokens: I,
        lm_rep_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self
    where
        I: Iterator<Item = &'a str> + Clone,
    {
        let token_vocab = config
            .use_token_table
            .then(|| TokenVocab::build(train_tokens.clone(), config.word_min_freq));
        let token_table = token_vocab.as_ref().map(|v| {
            store.add(
                &format!("{prefix}.token_table"),
                init_xavier(&[v.len(), config.dim], rng),
            )
        });
        let char_encoder = config.use_char.then(|| {
            let cv = CharVocab::build(
                train_tokens
                    .clone()
                    .flat_map(|w| w.chars().map(|c| c.to_string()))
                    .collect::<Vec<_>>()
                    .iter()
                    .map(|s| s.as_str()),
            );
            CharEncoder::init(
                store,
                &format!("{prefix}.char"),
                cv,
                config.char_dim,
                config.char_hidden,
                config.dim,
                rng,
            )
        });
        let lm_proj = config.use_lm.then(|| {
            let rep = lm_rep_dim.expect("use_lm requires the LM representation dim");
            store.add(&format!("{prefix}.elmo_proj"), init_xavier(&[config.dim, rep], rng))
        });
        WordRepr { config, token_vocab, token_table, char_encoder, lm_proj }
    }

    /// Per-token summed representation. `contextual` must be given iff the
    /// config enables the LM component; dropout applies to the projected
    /// contextual vector only, at train time only.
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        static_emb: Option<&StaticEmbeddings>,
        contextual: Option<&[Vec<f64>]>,
        words: &[String],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Vec<NodeId> {
        let d = self.config.dim;
        assert_eq!(
            self.config.use_lm,
            contextual.is_some(),
            "contextual vectors must be supplied exactly when the LM component is enabled"
        );
        if let Some(ctx) = contextual {
            assert_eq!(ctx.len(), words.len(), "one contextual vector per token");
        }
        let table = self.token_table.map(|id| g.param(store, id));
        let proj = self.lm_proj.map(|id| g.param(store, id));

        words
            .iter()
            .enumerate()
            .map(|(i, word)| {
                let mut parts: Vec<NodeId> = Vec::new();
                if let (Some(table), Some(vocab)) = (table, &self.token_vocab) {
                    let id = if train {
                        vocab.id_train(word, self.config.singleton_unk_prob, rng)
                    } else {
                        vocab.id(word)
                    };
                    parts.push(g.lookup(table, id));
                }
                if self.config.use_static {
                    let emb = static_emb.expect("config.use_static requires a static table");
                    assert_eq!(emb.dim(), d, "static embedding dim {} != word dim {}", emb.dim(), d);
                    parts.push(g.input(Tensor::vector(emb.lookup(word).to_vec())));
                }
                if let Some(enc) = &self.char_encoder {
                    parts.push(enc.encode(g, store, word));
                }
                if let (Some(proj), Some(ctx)) = (proj, contextual) {
                    let c = g.input(Tensor::vector(ctx[i].clone()));
                    let projected = g.matvec(proj, c);
                    let dropped = g.dropout(projected, self.config.lm_dropout, train, rng);
                    parts.push(dropped);
                }
                assert!(!parts.is_empty(), "word representation has no enabled components");
                let mut acc = parts[0];
                for &p in &parts[1..] {
                    acc = g.add(acc, p);
                }
                acc
            })
            .collect()
    }
}

// --- persistence helpers used by the tagger/parser model files ------------

impl WordReprConfig {
    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("dim={}", self.dim),
            format!("use_token_table={}", self.use_token_table),
            format!("use_static={}", self.use_static),
            format!("use_char={}", self.use_char),
            format!("use_lm={}", self.use_lm),
            format!("char_dim={}", self.char_dim),
            format!("char_hidden={}", self.char_hidden),
            format!("word_min_freq={}", self.word_min_freq),
            format!("singleton_unk_prob={}", self.singleton_unk_prob),
            format!("lm_dropout={}", self.lm_dropout),
        ]
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Option<WordReprConfig> {
        Some(WordReprConfig {
            dim: map.get("dim")?.parse().ok()?,
            use_token_table: map.get("use_token_table")?.parse().ok()?,
            use_static: map.get("use_static")?.parse().ok()?,
            use_char: map.get("use_char")?.parse().ok()?,
            use_lm: map.get("use_lm")?.parse().ok()?,
            char_dim: map.get("char_dim")?.parse().ok()?,
            char_hidden: map.get("char_hidden")?.parse().ok()?,
            word_min_freq: map.get("word_min_freq")?.parse().ok()?,
            singleton_unk_prob: map.get("singleton_unk_prob")?.parse().ok()?,
            lm_dropout: map.get("lm_dropout")?.parse().ok()?,
        })
    }
}

impl TokenVocab {
    /// `freq word` lines in index order (word may contain spaces).
    pub fn to_lines(&self) -> Vec<String> {
        self.words
            .iter()
            .map(|w| format!("{} {}", self.freq.get(w).copied().unwrap_or(0), w))
            .collect()
    }

    pub fn from_lines(lines: &[String], min_freq: usize) -> TokenVocab {
        let mut words = Vec::with_capacity(lines.len());
        let mut freq = BTreeMap::new();
        for l in lines {
            let (f, w) = l.split_once(' ').unwrap_or(("0", l.as_str()));
            let count: usize = f.parse().unwrap_or(0);
            if count > 0 {
                freq.insert(w.to_string(), count);
            }
            words.push(w.to_string());
        }
        TokenVocab::from_words(words, freq, min_freq)
    }
}

impl CharVocab {
    pub fn to_lines(&self) -> Vec<String> {
        self.units.clone()
    }

    pub fn from_lines(lines: &[String]) -> CharVocab {
        CharVocab::from_units(lines.to_vec())
    }
}

/// Reconstruct a [`WordRepr`] from a loaded store + sections.
pub fn word_repr_from_parts(
    config: WordReprConfig,
    prefix: &str,
    store: &ParamStore,
    token_vocab: Option<TokenVocab>,
    char_vocab: Option<CharVocab>,
) -> WordRepr {
    let token_table = config
        .use_token_table
        .then(|| store.get(&format!("{prefix}.token_table")).expect("missing token_table"));
    let char_encoder = config.use_char.then(|| {
        CharEncoder::lookup(
            store,
            &format!("{prefix}.char"),
            char_vocab.clone().expect("missing char vocab"),
            config.char_dim,
            config.char_hidden,
            config.dim,
        )
    });
    let lm_proj = config
        .use_lm
        .then(|| store.get(&format!("{prefix}.elmo_proj")).expect("missing elmo_proj"));
    WordRepr {
        config,
        token_vocab,
        token_table,
        char_encoder,
        lm_proj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn load_keeps_top_fraction() {
        let mut text = String::new();
        for i in 0..10 {
            text.push_str(&format!("w{i} 0.1 0.2\n"));
        }
        let e = load_embeddings(&text, 0.1).unwrap();
        assert_eq!(e.len(), 1);
        assert!(e.contains("w0"));
        assert!(!e.contains("w1"));
    }

    #[test]
    fn load_keep_all_is_identity() {
        let text = "a 1 2\nb 3 4\n";
        let e = load_embeddings(text, 1.0).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.lookup("a"), &[1.0, 2.0]);
        assert_eq!(e.lookup("b"), &[3.0, 4.0]);
    }

    #[test]
    fn load_with_header() {
        let mut text = String::from("20 5\n");
        for i in 0..20 {
            text.push_str(&format!("w{i} 1 2 3 4 5\n"));
        }
        let e = load_embeddings(&text, 0.5).unwrap();
        assert_eq!(e.len(), 10);
        assert_eq!(e.dim(), 5);
    }

    #[test]
    fn unknown_word_gets_zero_row() {
        let e = load_embeddings("a 1 2\n", 1.0).unwrap();
        assert_eq!(e.lookup("zzz"), &[0.0, 0.0]);
    }

    #[test]
    fn inconsistent_dim_is_an_error() {
        let text = "a 1 2\nb 3\n";
        assert!(matches!(
            load_embeddings(text, 1.0),
            Err(EmbedError::DimMismatch { line: 2, expected: 2, found: 1 })
        ));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(load_embeddings("", 1.0), Err(EmbedError::EmptyFile)));
    }

    #[test]
    fn token_vocab_applies_cutoff() {
        let toks = ["a", "a", "b", "c", "c", "c"];
        let v = TokenVocab::build(toks.iter().copied(), 2);
        assert_eq!(v.id("a"), v.index["a"]);
        assert_eq!(v.id("b"), 0); // below cutoff → UNK
        assert_ne!(v.id("c"), 0);
        assert_eq!(v.id("zzz"), 0);
    }

    #[test]
    fn singleton_stochastic_unk() {
        let toks = ["rare", "common", "common"];
        let v = TokenVocab::build(toks.iter().copied(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut unked = 0;
        for _ in 0..1000 {
            if v.id_train("rare", 0.5, &mut rng) == 0 {
                unked += 1;
            }
        }
        assert!((400..600).contains(&unked), "unked {unked} of 1000");
        // frequent words are never replaced
        for _ in 0..100 {
            assert_ne!(v.id_train("common", 0.5, &mut rng), 0);
        }
    }

    fn toy_corpus() -> Vec<Vec<String>> {
        let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
        vec![words("a b a b a b"), words("a b a b")]
    }

    fn tiny_lm_config() -> BiLmConfig {
        BiLmConfig {
            char_dim: 8,
            filter_widths: vec![1, 2],
            filters_per_width: 8,
            layers: 2,
            epochs: 60,
            lr: 5e-3,
            seed: 11,
            softmax_window: None,
        }
    }

    #[test]
    fn periodic_corpus_becomes_predictable() {
        let model = train_bilm(&toy_corpus(), tiny_lm_config()).unwrap();
        let ppl = bilm_forward_perplexity(&model, &toy_corpus());
        assert!(ppl <= 1.05, "perplexity {ppl}");
    }

    #[test]
    fn sampled_softmax_with_big_window_is_exact() {
        let corpus = toy_corpus();
        let cfg = BiLmConfig { epochs: 2, ..tiny_lm_config() };
        let full = train_bilm(&corpus, cfg.clone()).unwrap();
        let windowed = train_bilm(
            &corpus,
            BiLmConfig {
                softmax_window: Some(10_000),
                ..cfg
            },
        )
        .unwrap();
        let mut full = full;
        let mut windowed = windowed;
        let a = bilm_mean_nll(&mut full, &corpus);
        let b = bilm_mean_nll(&mut windowed, &corpus);
        assert_eq!(a.to_bits(), b.to_bits(), "window >= |V| must match full softmax bit-for-bit");
    }

    #[test]
    fn small_window_restricts_candidates() {
        let corpus = vec![
            "e d c b a".split(' ').map(str::to_string).collect::<Vec<_>>(),
            "a b c d e f g h".split(' ').map(str::to_string).collect::<Vec<_>>(),
        ];
        let cfg = BiLmConfig {
            epochs: 1,
            softmax_window: Some(3),
            ..tiny_lm_config()
        };
        let model = train_bilm(&corpus, cfg).unwrap();
        assert_eq!(model.word_vocab.len(), 8);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            train_bilm(&[], tiny_lm_config()),
            Err(EmbedError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bilm(&[vec![]], tiny_lm_config()),
            Err(EmbedError::EmptyCorpus)
        ));
    }

    #[test]
    fn zero_window_rejected() {
        let cfg = BiLmConfig {
            softmax_window: Some(0),
            ..tiny_lm_config()
        };
        assert!(matches!(train_bilm(&toy_corpus(), cfg), Err(EmbedError::BadWindow)));
    }

    #[test]
    fn layer0_mode_is_char_cnn_output_duplicated() {
        let cfg = BiLmConfig { epochs: 1, ..tiny_lm_config() };
        let model = train_bilm(&toy_corpus(), cfg).unwrap();
        let words: Vec<String> = vec!["a".into(), "b".into()];
        let st = model.states(&words);
        let reps = model.contextualize(&words, LmMode::Layer0);
        let m = model.cnn_dim;
        for i in 0..2 {
            assert_eq!(&reps[i][..m], st.v[i].as_slice());
            assert_eq!(&reps[i][m..], st.v[i].as_slice());
        }
    }

    #[test]
    fn sum012_includes_all_layers() {
        let cfg = BiLmConfig { epochs: 1, ..tiny_lm_config() };
        let model = train_bilm(&toy_corpus(), cfg).unwrap();
        let words: Vec<String> = vec!["a".into(), "b".into(), "a".into()];
        let st = model.states(&words);
        let reps = model.contextualize(&words, LmMode::Sum012);
        let m = model.cnn_dim;
        for i in 0..3 {
            for k in 0..m {
                let want = st.v[i][k] + st.fwd[0][i][k] + st.fwd[1][i][k];
                assert!((reps[i][k] - want).abs() < 1e-12);
                let want_b = st.v[i][k] + st.bwd[0][i][k] + st.bwd[1][i][k];
                assert!((reps[i][m + k] - want_b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_word_different_context_differs() {
        let model = train_bilm(&toy_corpus(), tiny_lm_config()).unwrap();
        let s1: Vec<String> = vec!["a".into(), "b".into()];
        let s2: Vec<String> = vec!["b".into(), "a".into()];
        let r1 = model.contextualize(&s1, LmMode::Sum012);
        let r2 = model.contextualize(&s2, LmMode::Sum012);
        // "a" at position 0 in s1 vs position 1 in s2
        let (x, y) = (&r1[0], &r2[1]);
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cosine = dot / (nx * ny);
        assert!(cosine < 1.0 - 1e-9, "contextual vectors must differ, cos={cosine}");
    }

    #[test]
    fn causality_of_directional_states() {
        let cfg = BiLmConfig { epochs: 1, ..tiny_lm_config() };
        let model = train_bilm(&toy_corpus(), cfg).unwrap();
        let s1: Vec<String> = vec!["a".into(), "b".into(), "a".into(), "b".into()];
        let mut s2 = s1.clone();
        s2[2] = "b".into(); // perturb token index 2
        let st1 = model.states(&s1);
        let st2 = model.states(&s2);
        for l in 0..2 {
            // forward states before the perturbed position are unchanged
            for i in 0..2 {
                assert_eq!(st1.fwd[l][i], st2.fwd[l][i], "fwd layer {l} pos {i}");
            }
            // backward states after it are unchanged
            assert_eq!(st1.bwd[l][3], st2.bwd[l][3], "bwd layer {l} pos 3");
            // and the states at/“past” the perturbation differ
            assert_ne!(st1.fwd[l][2], st2.fwd[l][2]);
        }
    }

    #[test]
    fn compose_sums_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = WordReprConfig {
            dim: 2,
            use_token_table: false,
            use_static: true,
            use_char: false,
            use_lm: false,
            ..WordReprConfig::default()
        };
        let mut store = ParamStore::new();
        let repr = WordRepr::init(&mut store, "m", cfg, std::iter::empty(), None, &mut rng);
        let emb = StaticEmbeddings::from_pairs(vec![
            ("w".into(), vec![1.0, 0.0]),
            ("p".into(), vec![0.0, 1.0]),
        ])
        .unwrap();
        let mut g = Graph::new();
        let words: Vec<String> = vec!["w".into(), "p".into(), "zzz".into()];
        let reps = repr.compose(&mut g, &store, Some(&emb), None, &words, false, &mut rng);
        assert_eq!(g.value(reps[0]).data(), &[1.0, 0.0]);
        assert_eq!(g.value(reps[1]).data(), &[0.0, 1.0]);
        assert_eq!(g.value(reps[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_lm_projection_equals_plain_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = WordReprConfig {
            dim: 3,
            use_token_table: true,
            use_static: false,
            use_char: false,
            use_lm: true,
            ..WordReprConfig::default()
        };
        let mut store = ParamStore::new();
        let toks = ["x", "x", "y", "y"];
        let repr = WordRepr::init(&mut store, "m", cfg, toks.iter().copied(), Some(4), &mut rng);
        // zero out the projection
        let proj = repr.lm_proj.unwrap();
        for v in store.value_mut(proj).data_mut() {
            *v = 0.0;
        }
        let words: Vec<String> = vec!["x".into(), "y".into()];
        let ctx = vec![vec![5.0; 4], vec![-3.0; 4]];

        let mut g = Graph::new();
        let with_lm = repr.compose(&mut g, &store, None, Some(&ctx), &words, false, &mut rng);

        let plain_cfg = WordReprConfig {
            use_lm: false,
            ..repr.config.clone()
        };
        let plain = WordRepr {
            config: plain_cfg,
            token_vocab: repr.token_vocab.clone(),
            token_table: repr.token_table,
            char_encoder: None,
            lm_proj: None,
        };
        let mut g2 = Graph::new();
        let without = plain.compose(&mut g2, &store, None, None, &words, false, &mut rng);
        for (a, b) in with_lm.iter().zip(&without) {
            assert_eq!(g.value(*a).data(), g2.value(*b).data());
        }
    }
}
