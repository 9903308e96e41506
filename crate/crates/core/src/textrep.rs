//! Tokenization and the three sentence representations: binary word-unigram
//! vectors, binary trigram vectors and averaged word embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Character trigrams over the lowercased, whitespace-collapsed text.
/// Texts shorter than three characters give a single pseudo-trigram;
/// an empty text gives none.
pub fn char_trigrams(text: &str) -> Vec<String> {
    let normalized: Vec<char> = text
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .collect();
    match normalized.len() {
        0 => Vec::new(),
        1 | 2 => vec![normalized.iter().collect()],
        _ => normalized.windows(3).map(|w| w.iter().collect()).collect(),
    }
}

/// Word trigrams over `tokenize(text)`, joined by a single space. Fewer than
/// three tokens collapse into one pseudo-trigram.
pub fn word_trigrams(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    match tokens.len() {
        0 => Vec::new(),
        1 | 2 => vec![tokens.join(" ")],
        _ => tokens.windows(3).map(|w| w.join(" ")).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    WordUnigram,
    CharTrigram,
    WordTrigram,
}

impl VocabKind {
    pub fn tokens(self, text: &str) -> Vec<String> {
        match self {
            VocabKind::WordUnigram => tokenize(text),
            VocabKind::CharTrigram => char_trigrams(text),
            VocabKind::WordTrigram => word_trigrams(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    kind: VocabKind,
    tokens: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl Vocab {
    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    /// Number of dimensions `m`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index_of.get(token).copied()
    }

    /// Tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content hash over the kind and the ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}\n", self.kind));
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..16])
    }
}

/// Builds a vocabulary in first-occurrence order.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], kind: VocabKind) -> Result<Vocab> {
    let mut tokens = Vec::new();
    let mut index_of = HashMap::new();
    for text in texts {
        for token in kind.tokens(text.as_ref()) {
            if !index_of.contains_key(&token) {
                index_of.insert(token.clone(), tokens.len());
                tokens.push(token);
            }
        }
    }
    if tokens.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    Ok(Vocab {
        kind,
        tokens,
        index_of,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBinaryVec {
    dims: usize,
    on_indices: Vec<usize>,
}

impl SparseBinaryVec {
    /// Builds from arbitrary indices; duplicates are merged.
    pub fn new(dims: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= dims {
                return Err(Error::Dimension(format!("index {last} outside {dims} dims")));
            }
        }
        Ok(SparseBinaryVec {
            dims,
            on_indices: indices,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn on_indices(&self) -> &[usize] {
        &self.on_indices
    }

    /// Number of set coordinates, the l1 norm.
    pub fn count(&self) -> usize {
        self.on_indices.len()
    }

    /// Size of the intersection of the two supports.
    pub fn overlap(&self, other: &SparseBinaryVec) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.on_indices, &other.on_indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dims];
        for &i in &self.on_indices {
            out[i] = 1.0;
        }
        out
    }
}

/// Presence vector of the vocabulary tokens found in `text`.
pub fn indicator_vector(text: &str, vocab: &Vocab) -> SparseBinaryVec {
    let mut on: Vec<usize> = vocab
        .kind
        .tokens(text)
        .iter()
        .filter_map(|t| vocab.index_of(t))
        .collect();
    on.sort_unstable();
    on.dedup();
    SparseBinaryVec {
        dims: vocab.len(),
        on_indices: on,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseVec(pub Vec<f64>);

impl DenseVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    fingerprint: String,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` pairs. The first occurrence of a
    /// token wins.
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut dim = None;
        let mut vectors = HashMap::new();
        let mut hasher = Sha256::new();
        for (token, vector) in entries {
            let d = *dim.get_or_insert(vector.len());
            if d == 0 || vector.len() != d {
                return Err(Error::Dimension(format!(
                    "embedding for `{token}` has {} components, expected {d}",
                    vector.len()
                )));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dimension(format!("embedding for `{token}` is not finite")));
            }
            if vectors.contains_key(&token) {
                continue;
            }
            hasher.update(token.as_bytes());
            for v in &vector {
                hasher.update(v.to_le_bytes());
            }
            vectors.insert(token, vector);
        }
        let dim = dim.ok_or(Error::EmptyVocabulary)?;
        Ok(EmbeddingTable {
            dim,
            vectors,
            fingerprint: hex::encode(&hasher.finalize()[..16]),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Reads a whitespace-separated embedding text file, with an optional
/// `count dim` header line.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), path)
}

pub fn read_embeddings(reader: impl BufRead, origin: &Path) -> Result<EmbeddingTable> {
    let mut entries = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let line = line.map_err(|e| Error::io(origin, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if entries.is_empty()
            && dim.is_none()
            && fields.len() == 2
            && fields.iter().all(|f| f.parse::<usize>().is_ok())
        {
            // header: count dim
            continue;
        }
        let token = fields[0].to_string();
        let vector = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("non-numeric component `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = *dim.get_or_insert(vector.len());
        if d == 0 {
            return Err(err("embedding line has no components".into()));
        }
        if vector.len() != d {
            return Err(err(format!(
                "dimension mismatch: {} components, expected {d}",
                vector.len()
            )));
        }
        entries.push((token, vector));
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: "empty embedding file".into(),
        });
    }
    EmbeddingTable::from_entries(entries)
}

/// Mean of the embeddings of in-table tokens; the zero vector when none are.
pub fn mean_embedding(text: &str, table: &EmbeddingTable) -> DenseVec {
    let mut sum = vec![0.0; table.dim];
    let mut n = 0usize;
    for token in tokenize(text) {
        if let Some(v) = table.get(&token) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            n += 1;
        }
    }
    if n > 0 {
        let n = n as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    DenseVec(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn abc() -> Vocab {
        build_vocab(&["a b", "b c"], VocabKind::WordUnigram).unwrap()
    }

    fn table(text: &str) -> Result<EmbeddingTable> {
        read_embeddings(Cursor::new(text), Path::new("emb.txt"))
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("How do I renew my visa?"), ["how", "do", "i", "renew", "my", "visa"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("QP-card  (Qatar)"), ["qp", "card", "qatar"]);
    }

    #[test]
    fn trigrams() {
        assert_eq!(char_trigrams("abcd"), ["abc", "bcd"]);
        assert_eq!(char_trigrams("ab"), ["ab"]);
        assert_eq!(char_trigrams("a  b"), ["a b"]);
        assert_eq!(char_trigrams(" AB\tc "), ["ab ", "b c"]);
        assert!(char_trigrams("   ").is_empty());
        assert_eq!(word_trigrams("a b c d"), ["a b c", "b c d"]);
        assert_eq!(word_trigrams("a, b"), ["a b"]);
    }

    #[test]
    fn vocab_construction() {
        let v = abc();
        assert_eq!(v.len(), 3);
        assert_eq!(v.index_of("a"), Some(0));
        assert_eq!(v.index_of("b"), Some(1));
        assert_eq!(v.index_of("c"), Some(2));
        assert_eq!(abc(), v);
        assert_eq!(abc().fingerprint(), v.fingerprint());

        let tri = build_vocab(&["xy"], VocabKind::CharTrigram).unwrap();
        assert_eq!(tri.len(), 1);
        assert_eq!(tri.index_of("xy"), Some(0));

        assert!(matches!(build_vocab(&["?!", ""], VocabKind::WordUnigram), Err(Error::EmptyVocabulary)));
    }

    #[test]
    fn indicators() {
        let v = abc();
        let x = indicator_vector("b a b", &v);
        assert_eq!(x.on_indices(), [0, 1]);
        assert_eq!(x.dims(), 3);
        assert!(indicator_vector("z z z", &v).on_indices().is_empty());
        assert_eq!(indicator_vector("a b c", &v).on_indices(), [0, 1, 2]);
    }

    #[test]
    fn embedding_files() {
        let t = table("a 1.0 2.0\nb 3.0 4.0").unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("b"), Some(&[3.0, 4.0][..]));

        let err = table("a 1.0 2.0\nb 3.0").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let t = table("2 2\na 1.0 2.0\nb 3.0 4.0\n").unwrap();
        assert_eq!((t.dim(), t.len()), (2, 2));

        assert!(table("a 1.0 x").is_err());
        assert!(table("").is_err());

        let t = table("a 1 1\na 2 2").unwrap();
        assert_eq!(t.get("a"), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn mean_embeddings() {
        let t = table("a 1 0\nb 0 1").unwrap();
        assert_eq!(mean_embedding("a b", &t).0, [0.5, 0.5]);
        assert_eq!(mean_embedding("a a", &t).0, [1.0, 0.0]);
        assert_eq!(mean_embedding("zzz", &t).0, [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn trigram_count(s in "[a-z ]{0,30}") {
            let n = s.split_whitespace().collect::<Vec<_>>().join(" ").chars().count();
            let grams = char_trigrams(&s);
            if n == 0 {
                prop_assert!(grams.is_empty());
            } else {
                prop_assert_eq!(grams.len(), std::cmp::max(1, n.saturating_sub(2)));
            }
        }

        #[test]
        fn indicator_indices_sorted_and_bounded(corpus in prop::collection::vec("[a-e ]{1,12}", 1..6), probe in "[a-g ]{0,20}") {
            if let Ok(v) = build_vocab(&corpus, VocabKind::WordUnigram) {
                let x = indicator_vector(&probe, &v);
                prop_assert!(x.on_indices().windows(2).all(|w| w[0] < w[1]));
                prop_assert!(x.on_indices().iter().all(|&i| i < v.len()));
            }
        }

        #[test]
        fn permuted_corpus_same_token_set(mut corpus in prop::collection::vec("[a-f ]{1,10}", 1..6)) {
            if let Ok(v1) = build_vocab(&corpus, VocabKind::CharTrigram) {
                corpus.reverse();
                let v2 = build_vocab(&corpus, VocabKind::CharTrigram).unwrap();
                let mut a = v1.tokens().to_vec();
                let mut b = v2.tokens().to_vec();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn mean_embedding_has_table_dim(text in "[a-d ]{0,20}") {
            let t = table("a 1 2 3\nb -1 0 4\nc 0.5 0.5 0.5").unwrap();
            let v = mean_embedding(&text, &t);
            prop_assert_eq!(v.0.len(), 3);
            prop_assert!(v.0.iter().all(|x| x.is_finite()));
        }
    }
}
