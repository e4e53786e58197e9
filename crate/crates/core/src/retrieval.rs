//! Retrieval over the memory: per-chunk best keys (A_x), top-n entries for
//! link prediction, the nearest labeled example d_0, the diversity operation
//! producing the diverse chunk database, and the KNN baseline retriever.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::model::{Label, SentenceRecord};
use crate::rkvm::{split_chunks, Memory};

/// One retrieved key-value pair a_i = k_i (+) v_i.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedPair {
    pub key_text: Vec<String>,
    pub value: Label,
    /// key_text joined, one space, then the label rendering; no trailing
    /// whitespace.
    pub rendered: String,
    pub similarity: f64,
}

impl RetrievedPair {
    fn new(key_text: Vec<String>, value: Label, similarity: f64) -> Self {
        let rendered = format!("{} {}", key_text.join(" "), value.rendered());
        RetrievedPair { key_text, value, rendered, similarity }
    }
}

/// Where a document candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    NearestExample,
    Single(usize),
    OrderedPair(usize, usize),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::NearestExample => f.write_str("nearest-example"),
            Provenance::Single(i) => write!(f, "single({i})"),
            Provenance::OrderedPair(i, k) => write!(f, "ordered-pair({i},{k})"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "nearest-example" {
            return Ok(Provenance::NearestExample);
        }
        if let Some(body) = s.strip_prefix("single(").and_then(|r| r.strip_suffix(')')) {
            return body.parse().map(Provenance::Single).map_err(|e| e.to_string());
        }
        if let Some(body) = s.strip_prefix("ordered-pair(").and_then(|r| r.strip_suffix(')')) {
            let (i, k) = body.split_once(',').ok_or("missing comma")?;
            return Ok(Provenance::OrderedPair(
                i.trim().parse().map_err(|_| "bad index")?,
                k.trim().parse().map_err(|_| "bad index")?,
            ));
        }
        Err(format!("unrecognized provenance {s:?}"))
    }
}

impl Serialize for Provenance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One document d_j of the diverse chunk database. Candidate 0 is always the
/// nearest example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentCandidate {
    #[serde(rename = "j")]
    pub id: usize,
    pub text: String,
    pub provenance: Provenance,
}

/// Whether diversify may emit ordered-pair documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityMode {
    /// Singles plus ordered pairs, with the singles-only fallback above cap.
    Full,
    /// Singles only (the no-diversity ablation).
    SinglesOnly,
}

/// Splits x into chunks of length m and retrieves the best key per chunk, in
/// chunk order. |result| = number of chunks.
pub fn retrieve_pairs(
    memory: &Memory,
    x: &SentenceRecord,
    m: usize,
    embedder: &Embedder,
) -> Result<Vec<RetrievedPair>> {
    if !memory.task.is_noise_intensive() {
        return Err(Error::InvalidConfig(
            "per-chunk retrieval applies to noise-intensive tasks only".into(),
        ));
    }
    if memory.chunk_len != Some(m) {
        return Err(Error::InvalidConfig(format!(
            "memory was built with chunk_len {:?}, retrieval asked for {m}",
            memory.chunk_len
        )));
    }
    memory.verify_fingerprint(embedder)?;
    let words = x.words();
    let chunks = split_chunks(&words, m, &x.id)?;
    let chunk_texts: Vec<String> = chunks.iter().map(|c| c.joined()).collect();
    let chunk_refs: Vec<&str> = chunk_texts.iter().map(String::as_str).collect();
    let chunk_embs = embedder.embed(&chunk_refs)?;
    let mut pairs = Vec::with_capacity(chunks.len());
    for emb in &chunk_embs {
        let (entry, similarity) = memory.lookup_best_key(emb)?;
        pairs.push(RetrievedPair::new(entry.key_text.clone(), entry.value.clone(), similarity));
    }
    Ok(pairs)
}

/// Embeds x.text (the entity pair) and returns the n most similar entries,
/// descending, ties by insertion index. Used for link prediction.
pub fn retrieve_top_n(
    memory: &Memory,
    x: &SentenceRecord,
    n: usize,
    embedder: &Embedder,
) -> Result<Vec<RetrievedPair>> {
    if memory.entries.is_empty() {
        return Err(Error::EmptyMemory);
    }
    memory.verify_fingerprint(embedder)?;
    let probe = embedder.embed_one(&x.text)?;
    let mut scored: Vec<(usize, f64)> = memory
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| Ok((i, probe.cosine(&e.key_embedding)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity").then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(i, sim)| {
            let e = &memory.entries[i];
            RetrievedPair::new(e.key_text.clone(), e.value.clone(), sim)
        })
        .collect())
}

/// The training record most similar to x, excluding x itself (by id); ties
/// by dataset order.
pub fn nearest_example<'a>(
    dataset: &'a [SentenceRecord],
    x: &SentenceRecord,
    embedder: &Embedder,
) -> Result<(&'a SentenceRecord, f64)> {
    let probe = embedder.embed_one(&x.text)?;
    let mut best: Option<(&SentenceRecord, f64)> = None;
    for record in dataset {
        if record.id == x.id {
            continue;
        }
        let sim = probe.cosine(&embedder.embed_one(&record.text)?)?;
        match best {
            Some((_, s)) if sim <= s => {}
            _ => best = Some((record, sim)),
        }
    }
    best.ok_or(Error::NoCandidate)
}

/// The diversity operation: d_0, then singles in order, then all ordered
/// pairs (i, k), i != k, in lexicographic order. Above `cap` retrieved
/// pairs, or in singles-only mode, pairs are dropped.
pub fn diversify(
    a_x: &[RetrievedPair],
    d0: &SentenceRecord,
    cap: usize,
    mode: DiversityMode,
) -> Result<Vec<DocumentCandidate>> {
    if a_x.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    let v = a_x.len();
    let include_pairs = mode == DiversityMode::Full && v <= cap;
    let mut docs = Vec::with_capacity(if include_pairs { 1 + v + v * (v - 1) } else { 1 + v });
    docs.push(DocumentCandidate {
        id: 0,
        text: format!("{} {}", d0.text, d0.label.rendered()),
        provenance: Provenance::NearestExample,
    });
    for (i, pair) in a_x.iter().enumerate() {
        docs.push(DocumentCandidate {
            id: docs.len(),
            text: pair.rendered.clone(),
            provenance: Provenance::Single(i),
        });
    }
    if include_pairs {
        for i in 0..v {
            for k in 0..v {
                if i == k {
                    continue;
                }
                docs.push(DocumentCandidate {
                    id: docs.len(),
                    text: format!("{} {}", a_x[i].rendered, a_x[k].rendered),
                    provenance: Provenance::OrderedPair(i, k),
                });
            }
        }
    }
    Ok(docs)
}

/// The n dataset records most similar to x, descending, ties by dataset
/// order; x itself (by id) is excluded. Returns fewer than n when the
/// dataset is small.
pub fn knn_baseline<'a>(
    dataset: &'a [SentenceRecord],
    x: &SentenceRecord,
    n: usize,
    embedder: &Embedder,
) -> Result<Vec<(&'a SentenceRecord, f64)>> {
    let probe = embedder.embed_one(&x.text)?;
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (i, record) in dataset.iter().enumerate() {
        if record.id == x.id {
            continue;
        }
        scored.push((i, probe.cosine(&embedder.embed_one(&record.text)?)?));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity").then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(n).map(|(i, sim)| (&dataset[i], sim)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbedderConfig;
    use crate::model::{Split, TaskKind};
    use crate::rkvm::build_memory;

    fn embedder(dim: usize) -> Embedder {
        Embedder::new(EmbedderConfig::local_hash(dim)).unwrap()
    }

    fn record(id: &str, text: &str, label: &str) -> SentenceRecord {
        SentenceRecord {
            id: id.into(),
            text: text.into(),
            label: Label::bare(label),
            head_entity: None,
            tail_entity: None,
            split: Split::Train,
        }
    }

    fn pair(key: &str, label: &str, sim: f64) -> RetrievedPair {
        RetrievedPair::new(
            key.split_whitespace().map(str::to_owned).collect(),
            Label::bare(label),
            sim,
        )
    }

    #[test]
    fn rendered_concatenation_has_single_separator() {
        let p = pair("alpha beta", "REL", 0.5);
        assert_eq!(p.rendered, "alpha beta REL");
    }

    #[test]
    fn chunk_count_determines_pair_count() {
        let e = embedder(64);
        let source = record("s1", "one two three four five six seven eight nine", "L");
        let memory = build_memory(&[source], TaskKind::TextClassification, 3, &e).unwrap();
        let x = record("x1", "alpha beta gamma delta epsilon zeta eta", "L");
        let pairs = retrieve_pairs(&memory, &x, 3, &e).unwrap();
        assert_eq!(pairs.len(), 3);
    }

    #[test]
    fn memory_source_chunks_retrieve_themselves() {
        let e = embedder(128);
        let source = record("s1", "infusion of prostacyclin attenuates hepatic injury here", "L");
        let memory = build_memory(&[source.clone()], TaskKind::TextClassification, 4, &e).unwrap();
        let pairs = retrieve_pairs(&memory, &source, 4, &e).unwrap();
        let key_texts: Vec<String> =
            memory.entries.iter().map(|entry| entry.key_joined()).collect();
        for p in &pairs {
            if key_texts.contains(&p.key_text.join(" ")) {
                assert!((p.similarity - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrong_chunk_len_is_rejected() {
        let e = embedder(32);
        let source = record("s1", "one two three four five six", "L");
        let memory = build_memory(&[source], TaskKind::TextClassification, 3, &e).unwrap();
        let x = record("x1", "alpha beta gamma", "L");
        assert!(matches!(retrieve_pairs(&memory, &x, 2, &e), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn diversify_two_pairs_gives_the_five_document_database() {
        let a_x = vec![pair("k0 w", "A", 0.9), pair("k1 w", "B", 0.8)];
        let d0 = record("near", "the nearest sentence", "NEAR");
        let docs = diversify(&a_x, &d0, 4, DiversityMode::Full).unwrap();
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        assert_eq!(
            texts,
            vec![
                "the nearest sentence NEAR",
                "k0 w A",
                "k1 w B",
                "k0 w A k1 w B",
                "k1 w B k0 w A",
            ]
        );
        assert_eq!(docs.len(), 5);
        assert_eq!(docs[0].provenance, Provenance::NearestExample);
        assert_eq!(docs[3].provenance, Provenance::OrderedPair(0, 1));
        assert_eq!(docs[4].provenance, Provenance::OrderedPair(1, 0));
        for (j, d) in docs.iter().enumerate() {
            assert_eq!(d.id, j);
        }
    }

    #[test]
    fn diversify_single_pair_gives_two_documents() {
        let a_x = vec![pair("only key", "A", 1.0)];
        let d0 = record("near", "base", "N");
        let docs = diversify(&a_x, &d0, 4, DiversityMode::Full).unwrap();
        assert_eq!(docs.len(), 2);
    }

    #[test]
    fn diversify_count_follows_the_permutation_formula() {
        let d0 = record("near", "base", "N");
        for v in 1..=4 {
            let a_x: Vec<_> = (0..v).map(|i| pair(&format!("k{i} w"), "L", 0.5)).collect();
            let docs = diversify(&a_x, &d0, 4, DiversityMode::Full).unwrap();
            assert_eq!(docs.len(), 1 + v + v * (v - 1));
        }
    }

    #[test]
    fn diversify_falls_back_to_singles_above_cap() {
        let d0 = record("near", "base", "N");
        let a_x: Vec<_> = (0..5).map(|i| pair(&format!("k{i} w"), "L", 0.5)).collect();
        let docs = diversify(&a_x, &d0, 4, DiversityMode::Full).unwrap();
        assert_eq!(docs.len(), 6);
        assert!(docs.iter().all(|d| !matches!(d.provenance, Provenance::OrderedPair(..))));
    }

    #[test]
    fn singles_only_mode_never_emits_pairs() {
        let d0 = record("near", "base", "N");
        let a_x: Vec<_> = (0..3).map(|i| pair(&format!("k{i} w"), "L", 0.5)).collect();
        let docs = diversify(&a_x, &d0, 10, DiversityMode::SinglesOnly).unwrap();
        assert_eq!(docs.len(), 4);
        assert!(docs.iter().all(|d| !matches!(d.provenance, Provenance::OrderedPair(..))));
    }

    #[test]
    fn diversify_rejects_empty_retrieval() {
        let d0 = record("near", "base", "N");
        assert!(matches!(
            diversify(&[], &d0, 4, DiversityMode::Full),
            Err(Error::EmptyRetrieval)
        ));
    }

    #[test]
    fn nearest_example_finds_duplicate_text() {
        let e = embedder(96);
        let dataset = vec![
            record("r1", "zymosan induced a dose related response", "A"),
            record("r2", "infusion of prostacyclin attenuates injury", "B"),
        ];
        let x = record("x", "infusion of prostacyclin attenuates injury", "?");
        let (found, sim) = nearest_example(&dataset, &x, &e).unwrap();
        assert_eq!(found.id, "r2");
        assert!((sim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nearest_example_excludes_x_itself() {
        let e = embedder(32);
        let x = record("x", "only sentence here", "L");
        let dataset = vec![x.clone()];
        assert!(matches!(nearest_example(&dataset, &x, &e), Err(Error::NoCandidate)));
    }

    #[test]
    fn knn_returns_exact_text_first() {
        let e = embedder(96);
        let dataset = vec![
            record("r1", "completely different words entirely", "A"),
            record("r2", "the quick brown fox jumps", "B"),
            record("r3", "another unrelated sentence again", "C"),
        ];
        let x = record("x", "the quick brown fox jumps", "?");
        let top = knn_baseline(&dataset, &x, 1, &e).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].0.id, "r2");
    }

    #[test]
    fn knn_caps_at_dataset_size() {
        let e = embedder(32);
        let dataset =
            vec![record("r1", "alpha beta gamma", "A"), record("r2", "delta epsilon zeta", "B")];
        let x = record("x", "alpha beta", "?");
        let top = knn_baseline(&dataset, &x, 10, &e).unwrap();
        assert_eq!(top.len(), 2);
        assert!(top[0].1 >= top[1].1);
    }

    #[test]
    fn top_n_self_key_ranks_first() {
        let e = embedder(64);
        let mut r1 = record("r1", "unused", "treats");
        r1.head_entity = Some("prostacyclin".into());
        r1.tail_entity = Some("hemorrhage".into());
        let mut r2 = record("r2", "unused", "causes");
        r2.head_entity = Some("zymosan".into());
        r2.tail_entity = Some("response".into());
        let memory = build_memory(&[r1, r2], TaskKind::LinkPrediction, 1, &e).unwrap();
        let x = record("x", "prostacyclin hemorrhage", "?");
        let top = retrieve_top_n(&memory, &x, 1, &e).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].key_text.join(" "), "prostacyclin hemorrhage");
        assert!((top[0].similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn top_n_returns_all_when_memory_is_small() {
        let e = embedder(64);
        let mut r1 = record("r1", "unused", "treats");
        r1.head_entity = Some("aspirin".into());
        r1.tail_entity = Some("fever".into());
        let memory = build_memory(&[r1], TaskKind::LinkPrediction, 1, &e).unwrap();
        let x = record("x", "aspirin fever", "?");
        assert_eq!(retrieve_top_n(&memory, &x, 10, &e).unwrap().len(), 1);
    }

    #[test]
    fn provenance_round_trips_through_strings() {
        for p in [Provenance::NearestExample, Provenance::Single(3), Provenance::OrderedPair(1, 4)]
        {
            let s = p.to_string();
            assert_eq!(s.parse::<Provenance>().unwrap(), p);
        }
        let doc = DocumentCandidate {
            id: 2,
            text: "k v".into(),
            provenance: Provenance::OrderedPair(0, 1),
        };
        let json = serde_json::to_string(&doc).unwrap();
        assert!(json.contains("\"j\":2"));
        assert!(json.contains("\"ordered-pair(0,1)\""));
        let back: DocumentCandidate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
    }
}
