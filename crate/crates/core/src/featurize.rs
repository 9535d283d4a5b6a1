//! String views of a drug turned into fixed-length vectors.
//!
//! Each view (SMILES, InChI) is tokenized at character level, embedded by
//! its own skip-gram model trained with negative sampling, and mean-pooled
//! into one vector per drug.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{logistic, Matrix};

const INCHI_PREFIX: &str = "InChI=";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Smiles,
    Inchi,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Smiles => "smiles",
            Scheme::Inchi => "inchi",
        }
    }
}

/// Character tokens. SMILES merges the two-letter halogens `Cl` and `Br`;
/// InChI drops the leading `InChI=` first.
pub fn tokenize(text: &str, scheme: Scheme) -> Result<Vec<String>> {
    let body = match scheme {
        Scheme::Smiles => text,
        Scheme::Inchi => text.strip_prefix(INCHI_PREFIX).unwrap_or(text),
    };
    if body.is_empty() {
        return Err(Error::Input(format!("empty {} string", scheme.name())));
    }
    let chars: Vec<char> = body.chars().collect();
    let mut tokens = Vec::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        let merged = scheme == Scheme::Smiles
            && i + 1 < chars.len()
            && matches!((chars[i], chars[i + 1]), ('C', 'l') | ('B', 'r'));
        if merged {
            tokens.push(chars[i..i + 2].iter().collect());
            i += 2;
        } else {
            tokens.push(chars[i].to_string());
            i += 1;
        }
    }
    Ok(tokens)
}

/// Token → id map with corpus frequencies; ids follow first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        let mut vocab = Self::default();
        for seq in corpus {
            for tok in seq {
                let id = match vocab.index.get(tok) {
                    Some(&id) => id,
                    None => {
                        vocab.tokens.push(tok.clone());
                        vocab.counts.push(0);
                        vocab.index.insert(tok.clone(), vocab.tokens.len() - 1);
                        vocab.tokens.len() - 1
                    }
                };
                vocab.counts[id] += 1;
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<TokenSequence> {
        let ids = tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::Lookup(format!("token `{t}` not in vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence { ids })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

/// One `dim`-length vector per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Matrix,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn vector(&self, id: usize) -> Option<&[f64]> {
        (id < self.vocab_size()).then(|| self.vectors.row(id))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negative_samples: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

/// Trained skip-gram weights: the input table used downstream, the context
/// (output) vectors, and the mean negative-sampling loss of every epoch.
#[derive(Debug, Clone)]
pub struct SkipGramModel {
    pub table: EmbeddingTable,
    pub context: Matrix,
    pub epoch_losses: Vec<f64>,
}

impl SkipGramModel {
    /// Score the model assigns to `context` appearing near `center`.
    pub fn pair_score(&self, center: usize, context: usize) -> f64 {
        crate::numerics::dot(self.table.vectors.row(center), self.context.row(context))
    }
}

/// Seeded initial input table, `U(-0.5/dim, 0.5/dim)`.
pub fn init_table(vocab_size: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 / dim as f64;
    let values = (0..vocab_size * dim).map(|_| rng.random_range(-half..half)).collect();
    EmbeddingTable {
        vectors: Matrix::from_vec(vocab_size.max(1), dim, values).expect("finite init"),
    }
}

/// Skip-gram with negative sampling, trained by SGD with a linearly decaying
/// learning rate. Negatives are drawn from the unigram distribution raised to
/// the 0.75 power.
pub fn train_skipgram(corpus: &[TokenSequence], vocab: &Vocab, cfg: &SkipGramConfig) -> Result<SkipGramModel> {
    if corpus.is_empty() {
        return Err(Error::Input("empty skip-gram corpus".into()));
    }
    if cfg.dim < 2 || cfg.window < 1 {
        return Err(Error::Config(format!(
            "skip-gram needs dim ≥ 2 and window ≥ 1 (got {} / {})",
            cfg.dim, cfg.window
        )));
    }
    let v = vocab.len();
    if v < 2 {
        return Err(Error::Input(format!(
            "vocabulary of size {v} leaves nothing to sample negatives from"
        )));
    }
    if let Some(bad) = corpus.iter().flat_map(|s| &s.ids).find(|&&id| id >= v) {
        return Err(Error::Lookup(format!("token id {bad} ≥ vocabulary size {v}")));
    }

    let dim = cfg.dim;
    let mut input = init_table(v, dim, cfg.seed).vectors;
    let mut context = Matrix::zeros(v, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let weights: Vec<f64> = vocab.counts().iter().map(|&c| (c as f64).powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::Input(e.to_string()))?;

    let total_steps = (cfg.epochs * corpus.iter().map(|s| s.ids.len()).sum::<usize>()).max(1) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut grad_in = vec![0.0; dim];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for &s in &order {
            let ids = &corpus[s].ids;
            for (pos, &center) in ids.iter().enumerate() {
                let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
                step += 1;
                let lo = pos.saturating_sub(cfg.window);
                let hi = (pos + cfg.window).min(ids.len() - 1);
                for (ctx_pos, &target) in ids.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == pos {
                        continue;
                    }
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    pairs += 1;
                    for n in 0..=cfg.negative_samples {
                        let (word, label) = if n == 0 {
                            (target, 1.0)
                        } else {
                            let w = noise.sample(&mut rng);
                            if w == target {
                                continue;
                            }
                            (w, 0.0)
                        };
                        let score: f64 = input
                            .row(center)
                            .iter()
                            .zip(context.row(word))
                            .map(|(a, b)| a * b)
                            .sum();
                        let p = logistic(score);
                        loss -= if label == 1.0 {
                            p.max(1e-12).ln()
                        } else {
                            (1.0 - p).max(1e-12).ln()
                        };
                        let g = (label - p) * lr;
                        let cols = context.cols();
                        let in_row = &input.values()[center * dim..(center + 1) * dim];
                        let ctx_row = &mut context.values_mut()[word * cols..(word + 1) * cols];
                        for d in 0..dim {
                            grad_in[d] += g * ctx_row[d];
                            ctx_row[d] += g * in_row[d];
                        }
                    }
                    let in_row = &mut input.values_mut()[center * dim..(center + 1) * dim];
                    for (w, g) in in_row.iter_mut().zip(&grad_in) {
                        *w += g;
                    }
                }
            }
        }
        epoch_losses.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }

    if !input.is_finite() || !context.is_finite() {
        return Err(Error::Numeric { index: 0 });
    }
    Ok(SkipGramModel {
        table: EmbeddingTable { vectors: input },
        context,
        epoch_losses,
    })
}

/// Arithmetic mean of the token vectors.
pub fn pool_embedding(seq: &TokenSequence, table: &EmbeddingTable) -> Result<Vec<f64>> {
    if seq.ids.is_empty() {
        return Err(Error::Input("cannot pool an empty token sequence".into()));
    }
    let mut out = vec![0.0; table.dim()];
    for &id in &seq.ids {
        let v = table
            .vector(id)
            .ok_or_else(|| Error::Lookup(format!("token id {id} not in embedding table")))?;
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = seq.ids.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FeatureConfig {
    pub skipgram: SkipGramConfig,
}

impl FeatureConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            skipgram: SkipGramConfig {
                seed,
                ..SkipGramConfig::default()
            },
        }
    }

    fn view_config(&self, scheme: Scheme) -> SkipGramConfig {
        let offset = match scheme {
            Scheme::Smiles => 0,
            Scheme::Inchi => 1,
        };
        SkipGramConfig {
            seed: self.skipgram.seed.wrapping_add(offset * 7919),
            ..self.skipgram.clone()
        }
    }
}

/// Per-drug SMILES-view and InChI-view vectors (one row per drug).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewVectors {
    pub smiles: Matrix,
    pub inchi: Matrix,
}

impl ViewVectors {
    pub fn num_drugs(&self) -> usize {
        self.smiles.rows()
    }

    pub fn dim(&self) -> usize {
        self.smiles.cols()
    }
}

struct ViewInput {
    vocab: Vocab,
    sequences: Vec<TokenSequence>,
}

fn prepare_view(texts: Vec<&str>, scheme: Scheme) -> Result<ViewInput> {
    let tokens = texts
        .iter()
        .map(|t| tokenize(t, scheme))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::build(&tokens);
    let sequences = tokens.iter().map(|t| vocab.encode(t)).collect::<Result<Vec<_>>>()?;
    Ok(ViewInput { vocab, sequences })
}

fn cache_key(scheme: Scheme, texts: &[&str], cfg: &SkipGramConfig) -> String {
    let mut h = Sha256::new();
    h.update(scheme.name().as_bytes());
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for t in texts {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(&h.finalize()[..12])
}

fn write_table(path: &Path, vocab: &Vocab, table: &EmbeddingTable) -> Result<()> {
    let mut out = String::new();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        out.push_str(tok);
        for v in table.vectors.row(id) {
            write!(out, "\t{v}").expect("write to string");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_table(path: &Path, vocab: &Vocab, dim: usize) -> Result<Option<EmbeddingTable>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(None);
    };
    let mut values = Vec::with_capacity(vocab.len() * dim);
    let mut lines = 0;
    for (id, line) in text.lines().enumerate() {
        let mut fields = line.split('\t');
        let tok = fields.next().unwrap_or_default();
        if vocab.tokens().get(id).map(String::as_str) != Some(tok) {
            return Ok(None);
        }
        for f in fields {
            values.push(f.parse::<f64>().map_err(|_| Error::Parse {
                file: path.display().to_string(),
                message: format!("`{f}` is not a number"),
            })?);
        }
        lines += 1;
    }
    if lines != vocab.len() || values.len() != vocab.len() * dim {
        return Ok(None);
    }
    Ok(Some(EmbeddingTable {
        vectors: Matrix::from_vec(vocab.len(), dim, values)?,
    }))
}

fn embed_view(texts: Vec<&str>, scheme: Scheme, cfg: &SkipGramConfig, cache: Option<&Path>) -> Result<Matrix> {
    let cache_path = cache.map(|dir| dir.join(format!("{}-{}.tsv", scheme.name(), cache_key(scheme, &texts, cfg))));
    let view = prepare_view(texts, scheme)?;
    let cached = match &cache_path {
        Some(p) => read_table(p, &view.vocab, cfg.dim)?,
        None => None,
    };
    let table = match cached {
        Some(t) => t,
        None => {
            let table = train_skipgram(&view.sequences, &view.vocab, cfg)?.table;
            if let Some(p) = &cache_path {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir)?;
                }
                write_table(p, &view.vocab, &table)?;
            }
            table
        }
    };
    let rows = view
        .sequences
        .iter()
        .map(|s| pool_embedding(s, &table))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Trains one skip-gram model per view and pools every drug's strings.
pub fn featurize_all(dataset: &Dataset, cfg: &FeatureConfig) -> Result<ViewVectors> {
    featurize_all_cached(dataset, cfg, None)
}

/// [`featurize_all`] with an optional on-disk cache of the embedding tables,
/// keyed by a hash of the view's strings and the skip-gram settings.
pub fn featurize_all_cached(dataset: &Dataset, cfg: &FeatureConfig, cache: Option<&Path>) -> Result<ViewVectors> {
    let smiles_texts: Vec<&str> = dataset.texts.iter().map(|t| t.smiles.as_str()).collect();
    let inchi_texts: Vec<&str> = dataset.texts.iter().map(|t| t.inchi.as_str()).collect();
    let smiles_cfg = cfg.view_config(Scheme::Smiles);
    let inchi_cfg = cfg.view_config(Scheme::Inchi);
    let (smiles, inchi) = rayon::join(
        || embed_view(smiles_texts, Scheme::Smiles, &smiles_cfg, cache),
        || embed_view(inchi_texts, Scheme::Inchi, &inchi_cfg, cache),
    );
    Ok(ViewVectors {
        smiles: smiles?,
        inchi: inchi?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::numerics::cosine;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("CCO", Scheme::Smiles).unwrap(), toks(&["C", "C", "O"]));
        assert_eq!(tokenize("CCl", Scheme::Smiles).unwrap(), toks(&["C", "Cl"]));
        assert_eq!(tokenize("BrC(Br)", Scheme::Smiles).unwrap(), toks(&["Br", "C", "(", "Br", ")"]));
        let inchi = tokenize("InChI=1S/CH4/h1H4", Scheme::Inchi).unwrap();
        assert_eq!(inchi[0], "1");
        assert_eq!(inchi.concat(), "1S/CH4/h1H4");
        assert!(matches!(tokenize("", Scheme::Smiles), Err(Error::Input(_))));
        assert!(matches!(tokenize("InChI=", Scheme::Inchi), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn smiles_tokens_concatenate_to_input(s in "[CcNnOoSFlBr()=#123\\[\\]H+@-]{1,40}") {
            let t = tokenize(&s, Scheme::Smiles).unwrap();
            prop_assert_eq!(t.concat(), s);
        }
    }

    fn corpus_of(lines: &[(&str, usize)]) -> (Vocab, Vec<TokenSequence>) {
        let raw: Vec<Vec<String>> = lines
            .iter()
            .flat_map(|(l, n)| std::iter::repeat_n(l.split(' ').map(String::from).collect(), *n))
            .collect();
        let vocab = Vocab::build(&raw);
        let seqs = raw.iter().map(|r| vocab.encode(r).unwrap()).collect();
        (vocab, seqs)
    }

    #[test]
    fn skipgram_learns_cooccurrence() {
        let (vocab, seqs) = corpus_of(&[("A B", 200), ("C D", 200)]);
        let cfg = SkipGramConfig {
            dim: 8,
            seed: 3,
            ..SkipGramConfig::default()
        };
        let model = train_skipgram(&seqs, &vocab, &cfg).unwrap();
        let (a, b, c) = (vocab.id("A").unwrap(), vocab.id("B").unwrap(), vocab.id("C").unwrap());
        assert!(model.pair_score(a, b) > model.pair_score(a, c));
    }

    #[test]
    fn skipgram_zero_epochs_is_init_and_deterministic() {
        let (vocab, seqs) = corpus_of(&[("A B C", 10)]);
        let cfg = SkipGramConfig {
            dim: 4,
            epochs: 0,
            seed: 9,
            ..SkipGramConfig::default()
        };
        let model = train_skipgram(&seqs, &vocab, &cfg).unwrap();
        assert_eq!(model.table, init_table(3, 4, 9));
        assert!(model.epoch_losses.is_empty());

        let cfg = SkipGramConfig { epochs: 3, ..cfg };
        let a = train_skipgram(&seqs, &vocab, &cfg).unwrap();
        let b = train_skipgram(&seqs, &vocab, &cfg).unwrap();
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn skipgram_rejects_degenerate_vocab() {
        let (vocab, seqs) = corpus_of(&[("A A", 5)]);
        assert!(train_skipgram(&seqs, &vocab, &SkipGramConfig::default()).is_err());
        let (vocab, seqs) = corpus_of(&[("A B", 5)]);
        let bad = SkipGramConfig {
            dim: 1,
            ..SkipGramConfig::default()
        };
        assert!(train_skipgram(&seqs, &vocab, &bad).is_err());
        assert!(train_skipgram(&[], &vocab, &SkipGramConfig::default()).is_err());
    }

    #[test]
    fn skipgram_loss_decreases_on_synthetic_corpus() {
        let mut first = 0.0;
        let mut last = 0.0;
        for seed in 0..5 {
            let s = synth_generate(100, 80, 0.01, 8, seed).unwrap();
            let texts: Vec<&str> = s.dataset.texts.iter().map(|t| t.smiles.as_str()).collect();
            let view = prepare_view(texts, Scheme::Smiles).unwrap();
            let cfg = SkipGramConfig {
                seed,
                ..SkipGramConfig::default()
            };
            let m = train_skipgram(&view.sequences, &view.vocab, &cfg).unwrap();
            first += m.epoch_losses[0];
            last += m.epoch_losses[cfg.epochs - 1];
        }
        assert!(last < first, "first {first} last {last}");
    }

    #[test]
    fn pooling_examples() {
        let table = EmbeddingTable {
            vectors: Matrix::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0], vec![0.25, 0.5]]).unwrap(),
        };
        assert_eq!(pool_embedding(&TokenSequence { ids: vec![2] }, &table).unwrap(), vec![0.25, 0.5]);
        assert_eq!(pool_embedding(&TokenSequence { ids: vec![0, 1] }, &table).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            pool_embedding(&TokenSequence { ids: vec![3] }, &table),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn pooling_matches_summation_oracle() {
        let table = init_table(10, 6, 17);
        let ids = vec![3, 7, 1, 7, 9];
        let pooled = pool_embedding(&TokenSequence { ids: ids.clone() }, &table).unwrap();
        for d in 0..6 {
            let mut acc = 0.0;
            for &id in &ids {
                acc += table.vectors.get(id, d);
            }
            assert!((pooled[d] - acc / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_smiles_give_identical_views() {
        let mut s = synth_generate(30, 20, 0.05, 4, 2).unwrap();
        s.dataset.texts[1].smiles = s.dataset.texts[0].smiles.clone();
        let cfg = FeatureConfig {
            skipgram: SkipGramConfig {
                dim: 8,
                epochs: 2,
                ..SkipGramConfig::default()
            },
        };
        let v = featurize_all(&s.dataset, &cfg).unwrap();
        assert_eq!(v.smiles.row(0), v.smiles.row(1));
        assert_eq!(v.num_drugs(), 30);
        assert_eq!(v, featurize_all(&s.dataset, &cfg).unwrap());
    }

    #[test]
    fn cache_reproduces_fresh_features() {
        let s = synth_generate(30, 20, 0.05, 4, 2).unwrap();
        let cfg = FeatureConfig {
            skipgram: SkipGramConfig {
                dim: 8,
                epochs: 2,
                ..SkipGramConfig::default()
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let fresh = featurize_all(&s.dataset, &cfg).unwrap();
        let first = featurize_all_cached(&s.dataset, &cfg, Some(dir.path())).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
        let second = featurize_all_cached(&s.dataset, &cfg, Some(dir.path())).unwrap();
        assert_eq!(fresh, first);
        assert_eq!(first, second);
    }

    #[test]
    fn same_cluster_views_are_closer() {
        let s = synth_generate(100, 80, 0.01, 8, 4).unwrap();
        let v = featurize_all(&s.dataset, &FeatureConfig::with_seed(4)).unwrap();
        let c = &s.truth.drug_clusters;
        for m in [&v.smiles, &v.inchi] {
            let (mut same, mut sn, mut cross, mut cn) = (0.0, 0, 0.0, 0);
            for i in 0..100 {
                for j in (i + 1)..100 {
                    let cs = cosine(m.row(i), m.row(j));
                    if c[i] == c[j] {
                        same += cs;
                        sn += 1;
                    } else {
                        cross += cs;
                        cn += 1;
                    }
                }
            }
            assert!(same / sn as f64 > cross / cn as f64);
        }
    }
}
