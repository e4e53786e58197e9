//! The encoder function E(.): a deterministic local hash embedder, a remote
//! service client, and a content-addressed on-disk cache.
//!
//! The local backend hashes character trigrams of the joined text into dim
//! signed buckets and L2-normalizes, so lexically overlapping strings get
//! similar vectors without any model weights. Remote vectors are normalized
//! on receipt regardless of provider behavior.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math;
use crate::sem::Semaphore;

/// 8-byte magic header of the embedding cache file.
pub const CACHE_MAGIC: &[u8; 8] = b"BMRAGEMB";

const REMOTE_RETRIES: usize = 3;
const RETRY_BASE_DELAY_MS: u64 = 50;

/// A fixed-length L2-normalized vector. Coordinates are stored as f32; all
/// similarity math promotes to f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    /// Wraps raw values, normalizing to unit norm. Zero vectors are rejected
    /// here; the embedder substitutes e1 before construction.
    pub fn from_values(mut values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { left: 0, right: 1 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalInstability { context: "non-finite embedding".into() });
        }
        if math::l2_norm(&values) == 0.0 {
            return Err(Error::NumericalInstability { context: "zero embedding".into() });
        }
        math::l2_normalize(&mut values);
        Ok(Embedding { values })
    }

    /// The unit basis vector e1, used as the zero-vector fallback.
    pub fn unit_basis(dim: usize) -> Self {
        let mut values = vec![0.0f32; dim.max(1)];
        values[0] = 1.0;
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Coordinates promoted to f64 for scorer math.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Cosine similarity computed in f64.
    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        math::cosine(&self.to_f64(), &other.to_f64())
    }
}

/// Which encoder produces the vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderBackend {
    LocalHash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub backend: EmbedderBackend,
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent_requests: usize,
}

fn default_max_concurrent() -> usize {
    4
}

impl EmbedderConfig {
    pub fn local_hash(dim: usize) -> Self {
        EmbedderConfig {
            backend: EmbedderBackend::LocalHash,
            dim,
            endpoint: None,
            cache_path: None,
            max_concurrent_requests: default_max_concurrent(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("embedder dim must be positive".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(Error::InvalidConfig("max_concurrent_requests must be positive".into()));
        }
        if self.backend == EmbedderBackend::Remote && self.endpoint.is_none() {
            return Err(Error::InvalidConfig("remote embedder requires an endpoint".into()));
        }
        Ok(())
    }

    /// Stable id of the vector-producing function, independent of cache
    /// location and concurrency settings.
    fn backend_id(&self) -> String {
        match self.backend {
            EmbedderBackend::LocalHash => "local-hash".into(),
            EmbedderBackend::Remote => {
                format!("remote|{}", self.endpoint.as_deref().unwrap_or(""))
            }
        }
    }

    /// Hex SHA-256 over the semantic fields; recorded in every artifact that
    /// stores vectors so mismatched configurations are rejected on load.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.backend_id().as_bytes());
        h.update([0x1f]);
        h.update((self.dim as u32).to_le_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cache_key(backend_id: &str, dim: usize, text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0x1f]);
    h.update((dim as u32).to_le_bytes());
    h.update([0x1f]);
    h.update(text.as_bytes());
    h.finalize().into()
}

/// The encoder handle. Cheap to share behind a reference; all interior
/// state is synchronized.
pub struct Embedder {
    cfg: EmbedderConfig,
    backend_id: String,
    memo: Mutex<BTreeMap<[u8; 32], Embedding>>,
    zero_replacements: AtomicUsize,
    client: OnceLock<reqwest::blocking::Client>,
    sem: Semaphore,
}

impl Embedder {
    /// Builds the embedder, loading the cache file when configured and present.
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let backend_id = cfg.backend_id();
        let e = Embedder {
            sem: Semaphore::new(cfg.max_concurrent_requests),
            backend_id,
            memo: Mutex::new(BTreeMap::new()),
            zero_replacements: AtomicUsize::new(0),
            client: OnceLock::new(),
            cfg,
        };
        if let Some(path) = e.cfg.cache_path.clone() {
            if path.exists() {
                e.load_cache(&path)?;
            }
        }
        Ok(e)
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    /// Number of inputs that produced a zero vector and were replaced by e1.
    pub fn zero_replacements(&self) -> usize {
        self.zero_replacements.load(Ordering::SeqCst)
    }

    /// Embeds a batch, order-preserving. Results are memoized in memory and,
    /// when a cache path is configured, appended to the cache file.
    pub fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        for t in texts {
            if t.split_whitespace().next().is_none() {
                return Err(Error::EmptyText);
            }
        }
        let keys: Vec<[u8; 32]> =
            texts.iter().map(|t| cache_key(&self.backend_id, self.cfg.dim, t)).collect();

        let mut out: Vec<Option<Embedding>> = vec![None; texts.len()];
        let mut missing: Vec<usize> = Vec::new();
        {
            let memo = self.memo.lock().unwrap();
            for (i, key) in keys.iter().enumerate() {
                match memo.get(key) {
                    Some(e) => out[i] = Some(e.clone()),
                    None => missing.push(i),
                }
            }
        }
        if !missing.is_empty() {
            // Duplicate texts inside one batch compute once.
            let mut unique: BTreeMap<[u8; 32], usize> = BTreeMap::new();
            for &i in &missing {
                unique.entry(keys[i]).or_insert(i);
            }
            let reps: Vec<usize> = unique.values().copied().collect();
            let computed = match self.cfg.backend {
                EmbedderBackend::LocalHash => reps
                    .iter()
                    .map(|&i| Ok(self.local_hash_one(texts[i])))
                    .collect::<Result<Vec<_>>>()?,
                EmbedderBackend::Remote => self.remote_embed(&reps, texts)?,
            };
            let mut fresh: Vec<([u8; 32], Embedding)> = Vec::with_capacity(reps.len());
            for (&i, emb) in reps.iter().zip(computed) {
                fresh.push((keys[i], emb));
            }
            {
                let mut memo = self.memo.lock().unwrap();
                for (key, emb) in &fresh {
                    memo.insert(*key, emb.clone());
                }
            }
            if let Some(path) = self.cfg.cache_path.clone() {
                self.append_cache(&path, &fresh)?;
            }
            let memo = self.memo.lock().unwrap();
            for &i in &missing {
                out[i] = Some(memo.get(&keys[i]).expect("just inserted").clone());
            }
        }
        Ok(out.into_iter().map(|e| e.expect("all slots filled")).collect())
    }

    /// Convenience single-text embed.
    pub fn embed_one(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed(&[text])?.pop().expect("one input, one output"))
    }

    /// Hashed character-trigram embedding of the (whitespace-joined) text.
    /// Depends only on the text, never on call order.
    fn local_hash_one(&self, text: &str) -> Embedding {
        let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
        let dim = self.cfg.dim;
        let mut acc = vec![0.0f64; dim];
        let chars: Vec<char> = joined.chars().collect();
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a64(&buf[..len]);
            let bucket = ((h >> 1) % dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        math::l2_normalize(&mut acc);
        let values: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        if math::l2_norm(&values) == 0.0 {
            self.zero_replacements.fetch_add(1, Ordering::SeqCst);
            return Embedding::unit_basis(dim);
        }
        Embedding { values }
    }

    /// Fetches the missing texts from the remote service, one request per
    /// text, bounded by max_concurrent_requests in-flight calls.
    fn remote_embed(&self, indices: &[usize], texts: &[&str]) -> Result<Vec<Embedding>> {
        let endpoint = self.cfg.endpoint.as_deref().expect("validated");
        let results: Mutex<Vec<Option<Result<Embedding>>>> =
            Mutex::new((0..indices.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_concurrent_requests.min(indices.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    if slot >= indices.len() {
                        break;
                    }
                    let r = self.remote_embed_one(endpoint, texts[indices[slot]]);
                    results.lock().unwrap()[slot] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("worker filled every slot"))
            .collect()
    }

    fn remote_embed_one(&self, endpoint: &str, text: &str) -> Result<Embedding> {
        #[derive(Serialize)]
        struct Req<'a> {
            texts: Vec<&'a str>,
        }
        #[derive(Deserialize)]
        struct Resp {
            vectors: Vec<Vec<f32>>,
        }
        let client = self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(30))
                .build()
                .expect("client construction cannot fail with static options")
        });
        let mut last_err = String::new();
        for attempt in 0..REMOTE_RETRIES {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(
                    RETRY_BASE_DELAY_MS << (attempt - 1),
                ));
            }
            let _permit = self.sem.acquire();
            let sent = client.post(endpoint).json(&Req { texts: vec![text] }).send();
            match sent {
                Ok(resp) if resp.status().is_success() => {
                    let body: Resp = resp.json().map_err(|e| {
                        Error::BackendUnavailable(format!("embedding response malformed: {e}"))
                    })?;
                    let v = body.vectors.into_iter().next().ok_or_else(|| {
                        Error::BackendUnavailable("embedding response had no vectors".into())
                    })?;
                    if v.len() != self.cfg.dim {
                        return Err(Error::DimensionMismatch { left: v.len(), right: self.cfg.dim });
                    }
                    return match Embedding::from_values(v) {
                        Ok(e) => Ok(e),
                        Err(Error::NumericalInstability { .. }) => {
                            self.zero_replacements.fetch_add(1, Ordering::SeqCst);
                            Ok(Embedding::unit_basis(self.cfg.dim))
                        }
                        Err(e) => Err(e),
                    };
                }
                Ok(resp) => last_err = format!("status {}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::BackendUnavailable(format!(
            "embedding endpoint {endpoint} failed after {REMOTE_RETRIES} attempts: {last_err}"
        )))
    }

    fn load_cache(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        let fmt_err = |message: &str| Error::FormatError {
            path: path.display().to_string(),
            message: message.into(),
        };
        if bytes.len() < 8 || &bytes[..8] != CACHE_MAGIC {
            return Err(fmt_err("missing BMRAGEMB magic header"));
        }
        let mut memo = self.memo.lock().unwrap();
        let mut pos = 8;
        while pos < bytes.len() {
            if pos + 4 > bytes.len() {
                return Err(fmt_err("truncated record length"));
            }
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + len > bytes.len() {
                return Err(fmt_err("truncated record payload"));
            }
            let payload = &bytes[pos..pos + len];
            pos += len;
            if payload.len() < 36 {
                return Err(fmt_err("record shorter than key + dim"));
            }
            let key: [u8; 32] = payload[..32].try_into().unwrap();
            let dim = u32::from_le_bytes(payload[32..36].try_into().unwrap()) as usize;
            if payload.len() != 36 + 4 * dim {
                return Err(fmt_err("record length disagrees with dim"));
            }
            if dim != self.cfg.dim {
                // Entries for other dims belong to other configurations.
                continue;
            }
            let values: Vec<f32> = payload[36..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            memo.insert(key, Embedding { values });
        }
        Ok(())
    }

    fn append_cache(&self, path: &Path, fresh: &[([u8; 32], Embedding)]) -> Result<()> {
        let io_err = |e| Error::io(path.display().to_string(), e);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io_err)?;
            }
        }
        let write_magic = !path.exists()
            || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        let mut buf = Vec::new();
        if write_magic {
            buf.extend_from_slice(CACHE_MAGIC);
        }
        for (key, emb) in fresh {
            let payload_len = 36 + 4 * emb.dim();
            buf.extend_from_slice(&(payload_len as u32).to_le_bytes());
            buf.extend_from_slice(key);
            buf.extend_from_slice(&(emb.dim() as u32).to_le_bytes());
            for v in emb.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&buf).map_err(io_err)?;
        Ok(())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes embedding records in the cache layout (without magic); reused
/// by the memory file writer.
pub(crate) fn write_embedding_record(buf: &mut Vec<u8>, key: &[u8; 32], emb: &Embedding) {
    let payload_len = 36 + 4 * emb.dim();
    buf.extend_from_slice(&(payload_len as u32).to_le_bytes());
    buf.extend_from_slice(key);
    buf.extend_from_slice(&(emb.dim() as u32).to_le_bytes());
    for v in emb.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses one embedding record at `pos`, returning (key, embedding, next pos).
pub(crate) fn read_embedding_record(
    bytes: &[u8],
    pos: usize,
    path_for_errors: &str,
) -> Result<([u8; 32], Embedding, usize)> {
    let fmt_err = |message: &str| Error::FormatError {
        path: path_for_errors.to_string(),
        message: message.into(),
    };
    if pos + 4 > bytes.len() {
        return Err(fmt_err("truncated record length"));
    }
    let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    let start = pos + 4;
    if start + len > bytes.len() {
        return Err(fmt_err("truncated record payload"));
    }
    let payload = &bytes[start..start + len];
    if payload.len() < 36 {
        return Err(fmt_err("record shorter than key + dim"));
    }
    let key: [u8; 32] = payload[..32].try_into().unwrap();
    let dim = u32::from_le_bytes(payload[32..36].try_into().unwrap()) as usize;
    if payload.len() != 36 + 4 * dim {
        return Err(fmt_err("record length disagrees with dim"));
    }
    let values: Vec<f32> =
        payload[36..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((key, Embedding { values }, start + len))
}
