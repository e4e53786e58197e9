//! The relational key-value memory M: chunk splitting, label-chunk
//! similarity, top-2 key selection for noise-intensive tasks, and entity-pair
//! keys for link prediction.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{read_embedding_record, write_embedding_record, Embedder, Embedding};
use crate::error::{Error, Result};
use crate::model::{Chunk, Label, SentenceRecord, TaskKind};

const MEMORY_FORMAT_VERSION: u32 = 1;

/// One (chunk-key, label-value) entry of the memory.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValuePair {
    pub key_text: Vec<String>,
    pub value: Label,
    pub key_embedding: Embedding,
    pub source_id: String,
}

impl KeyValuePair {
    pub fn key_joined(&self) -> String {
        self.key_text.join(" ")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    key_text: Vec<String>,
    value: Label,
    source_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemoryHeader {
    version: u32,
    task: TaskKind,
    chunk_len: Option<usize>,
    dim: usize,
    embedder_fingerprint: String,
    entry_count: usize,
}

/// The built memory. Immutable after construction; lookups are exact scans.
#[derive(Debug, Clone)]
pub struct Memory {
    pub entries: Vec<KeyValuePair>,
    pub task: TaskKind,
    /// Chunk length m used at build time; None for link prediction.
    pub chunk_len: Option<usize>,
    pub dim: usize,
    pub embedder_fingerprint: String,
}

/// Splits into ceil(w/m) chunks; all but the last have exactly m words and
/// concatenating them in order reproduces the input.
pub fn split_chunks(words: &[&str], m: usize, source_id: &str) -> Result<Vec<Chunk>> {
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    if m == 0 {
        return Err(Error::InvalidConfig("chunk length m must be at least 1".into()));
    }
    Ok(words
        .chunks(m)
        .enumerate()
        .map(|(index, piece)| Chunk {
            words: piece.iter().map(|w| w.to_string()).collect(),
            source_id: source_id.to_string(),
            index,
        })
        .collect())
}

/// Builds the memory from labeled records. Noise-intensive tasks contribute
/// the two chunks most similar to the label description (ties to the lower
/// chunk index, best first); link prediction contributes one entity-pair key
/// per record.
pub fn build_memory(
    dataset: &[SentenceRecord],
    task: TaskKind,
    m: usize,
    embedder: &Embedder,
) -> Result<Memory> {
    let mut entries = Vec::new();
    for record in dataset {
        record.validate(task)?;
        if task.is_noise_intensive() {
            let words = record.words();
            let chunks = split_chunks(&words, m, &record.id)?;
            let label_emb = embedder.embed_one(&record.label.description_text)?;
            let chunk_texts: Vec<String> = chunks.iter().map(Chunk::joined).collect();
            let chunk_refs: Vec<&str> = chunk_texts.iter().map(String::as_str).collect();
            let chunk_embs = embedder.embed(&chunk_refs)?;
            let mut ranked: Vec<(usize, f64)> = chunk_embs
                .iter()
                .enumerate()
                .map(|(i, e)| Ok((i, label_emb.cosine(e)?)))
                .collect::<Result<_>>()?;
            ranked.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).expect("finite similarity").then(a.0.cmp(&b.0))
            });
            for &(i, _) in ranked.iter().take(2) {
                entries.push(KeyValuePair {
                    key_text: chunks[i].words.clone(),
                    value: record.label.clone(),
                    key_embedding: chunk_embs[i].clone(),
                    source_id: record.id.clone(),
                });
            }
        } else {
            let head = record.head_entity.as_deref().expect("validated");
            let tail = record.tail_entity.as_deref().expect("validated");
            let key_joined = format!("{head} {tail}");
            let key_words: Vec<String> =
                key_joined.split_whitespace().map(str::to_owned).collect();
            let key_embedding = embedder.embed_one(&key_joined)?;
            entries.push(KeyValuePair {
                key_text: key_words,
                value: record.label.clone(),
                key_embedding,
                source_id: record.id.clone(),
            });
        }
    }
    Ok(Memory {
        entries,
        task,
        chunk_len: task.is_noise_intensive().then_some(m),
        dim: embedder.config().dim,
        embedder_fingerprint: embedder.fingerprint(),
    })
}

impl Memory {
    /// Index and similarity of the entry maximizing cosine with the probe;
    /// ties go to the lowest insertion index.
    pub fn lookup_best_key_index(&self, probe: &Embedding) -> Result<(usize, f64)> {
        if self.entries.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, entry) in self.entries.iter().enumerate() {
            let sim = probe.cosine(&entry.key_embedding)?;
            match best {
                Some((_, s)) if sim <= s => {}
                _ => best = Some((i, sim)),
            }
        }
        Ok(best.expect("non-empty memory"))
    }

    /// The best-matching entry itself.
    pub fn lookup_best_key(&self, probe: &Embedding) -> Result<(&KeyValuePair, f64)> {
        let (i, sim) = self.lookup_best_key_index(probe)?;
        Ok((&self.entries[i], sim))
    }

    /// Fails unless the embedder that will produce probes matches the one
    /// that built this memory.
    pub fn verify_fingerprint(&self, embedder: &Embedder) -> Result<()> {
        let actual = embedder.fingerprint();
        if self.embedder_fingerprint != actual {
            return Err(Error::FingerprintMismatch {
                expected: self.embedder_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Serializes to the on-disk layout: a length-prefixed JSON header, then
    /// per entry a length-prefixed JSON meta record followed by a binary
    /// embedding record. Deterministic for a fixed memory.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = MemoryHeader {
            version: MEMORY_FORMAT_VERSION,
            task: self.task,
            chunk_len: self.chunk_len,
            dim: self.dim,
            embedder_fingerprint: self.embedder_fingerprint.clone(),
            entry_count: self.entries.len(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for entry in &self.entries {
            let meta = EntryMeta {
                key_text: entry.key_text.clone(),
                value: entry.value.clone(),
                source_id: entry.source_id.clone(),
            };
            let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
            buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
            buf.extend_from_slice(&meta_json);
            let key: [u8; 32] = Sha256::digest(entry.key_joined().as_bytes()).into();
            write_embedding_record(&mut buf, &key, &entry.key_embedding);
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes())
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn from_bytes(bytes: &[u8], path_for_errors: &str) -> Result<Self> {
        let fmt_err = |message: String| Error::FormatError {
            path: path_for_errors.to_string(),
            message,
        };
        if bytes.len() < 4 {
            return Err(fmt_err("file shorter than header length".into()));
        }
        let header_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if 4 + header_len > bytes.len() {
            return Err(fmt_err("truncated header".into()));
        }
        let header: MemoryHeader = serde_json::from_slice(&bytes[4..4 + header_len])
            .map_err(|e| fmt_err(format!("header is not valid JSON: {e}")))?;
        if header.version != MEMORY_FORMAT_VERSION {
            return Err(fmt_err(format!("unsupported format version {}", header.version)));
        }
        let mut pos = 4 + header_len;
        let mut entries = Vec::with_capacity(header.entry_count);
        for _ in 0..header.entry_count {
            if pos + 4 > bytes.len() {
                return Err(fmt_err("truncated entry meta length".into()));
            }
            let meta_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + meta_len > bytes.len() {
                return Err(fmt_err("truncated entry meta".into()));
            }
            let meta: EntryMeta = serde_json::from_slice(&bytes[pos..pos + meta_len])
                .map_err(|e| fmt_err(format!("entry meta is not valid JSON: {e}")))?;
            pos += meta_len;
            let (_, emb, next) = read_embedding_record(bytes, pos, path_for_errors)?;
            pos = next;
            if emb.dim() != header.dim {
                return Err(fmt_err("entry embedding dim disagrees with header".into()));
            }
            entries.push(KeyValuePair {
                key_text: meta.key_text,
                value: meta.value,
                key_embedding: emb,
                source_id: meta.source_id,
            });
        }
        if pos != bytes.len() {
            return Err(fmt_err("trailing bytes after last entry".into()));
        }
        Ok(Memory {
            entries,
            task: header.task,
            chunk_len: header.chunk_len,
            dim: header.dim,
            embedder_fingerprint: header.embedder_fingerprint,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        Memory::from_bytes(&bytes, &path.display().to_string())
    }
}
