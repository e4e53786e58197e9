//! The tailored chunk scorer: a trainable square projection W applied to
//! both sides of a cosine similarity, a temperature softmax turning the
//! similarities into the retrieval distribution P_T, and gradient-descent
//! training against language-model likelihoods.
//!
//! With W = identity the scorer reduces to raw cosine ranking, which is also
//! the raw-cosine ablation, so the untrained and ablated paths coincide by
//! construction.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, Embedding};
use crate::error::{Error, Result};
use crate::extraction::{assemble_prompt, PromptTemplate};
use crate::llm::LmScoringBackend;
use crate::math;
use crate::model::SentenceRecord;
use crate::retrieval::{
    diversify, nearest_example, retrieve_pairs, retrieve_top_n, DiversityMode, DocumentCandidate,
};
use crate::rkvm::Memory;

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// How the training loss compares P_T with the LM likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Absolute difference of the two maxima (the default).
    PaperMaxAbsdiff,
    /// KL divergence from the normalized likelihoods to P_T; denser
    /// gradients than max matching.
    FullKl,
}

/// Trainable parameters: dense dim x dim projection (row-major) plus the
/// softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub projection: Vec<f64>,
    pub eta: f64,
    pub dim: usize,
}

impl ScorerParams {
    /// Identity projection, so a fresh scorer ranks by raw cosine.
    pub fn identity(dim: usize, eta: f64) -> Self {
        ScorerParams { projection: math::identity(dim), eta, dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.projection.len() != self.dim * self.dim {
            return Err(Error::InvalidConfig(format!(
                "projection has {} entries, expected {}",
                self.projection.len(),
                self.dim * self.dim
            )));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig("eta must be positive and finite".into()));
        }
        if self.projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalInstability { context: "scorer projection".into() });
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.projection == math::identity::<f64>(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 0.01,
            epochs: 50,
            seed: 0,
            loss_mode: LossMode::PaperMaxAbsdiff,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Whether selection uses the trained projection or raw cosine (the
/// trained-scorer ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Trained,
    RawCosine,
}

/// cos(W x, W d_j) for every document, in f64.
pub fn projected_similarities(
    x_emb: &Embedding,
    doc_embs: &[Embedding],
    params: &ScorerParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    if x_emb.dim() != params.dim {
        return Err(Error::DimensionMismatch { left: x_emb.dim(), right: params.dim });
    }
    let x = x_emb.to_f64();
    let a = math::mat_vec(&params.projection, &x);
    let mut sims = Vec::with_capacity(doc_embs.len());
    for d in doc_embs {
        if d.dim() != params.dim {
            return Err(Error::DimensionMismatch { left: d.dim(), right: params.dim });
        }
        let b = math::mat_vec(&params.projection, &d.to_f64());
        sims.push(math::cosine(&a, &b)?);
    }
    Ok(sims)
}

/// The retrieval distribution P_T(. | x): temperature softmax over the
/// projected similarities. Sums to 1 within 1e-9.
pub fn score_documents(
    x_emb: &Embedding,
    doc_embs: &[Embedding],
    params: &ScorerParams,
) -> Result<Vec<f64>> {
    if doc_embs.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    let sims = projected_similarities(x_emb, doc_embs, params)?;
    math::softmax_with_temperature(&sims, params.eta)
}

/// LM likelihoods of the ground truth y conditioned on each candidate
/// document. A document whose prompt overflows the context scores 0 and is
/// flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct LmLikelihoods {
    pub values: Vec<f64>,
    pub overflowed: Vec<usize>,
}

pub fn lm_likelihoods(
    x: &SentenceRecord,
    docs: &[DocumentCandidate],
    y: &str,
    llm: &LmScoringBackend,
    template: &PromptTemplate,
) -> Result<LmLikelihoods> {
    if y.trim().is_empty() {
        return Err(Error::InvalidPrompt("empty ground-truth target".into()));
    }
    let mut values = Vec::with_capacity(docs.len());
    let mut overflowed = Vec::new();
    for (j, doc) in docs.iter().enumerate() {
        let prompt = assemble_prompt(template, doc, x)?;
        match llm.score_continuation(&prompt, y) {
            Ok(p) => values.push(p),
            Err(Error::ContextOverflow { .. }) => {
                values.push(0.0);
                overflowed.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LmLikelihoods { values, overflowed })
}

/// The training loss between the retrieval distribution and the LM
/// likelihoods.
pub fn loss(pt: &[f64], plm: &[f64], mode: LossMode) -> Result<f64> {
    if pt.len() != plm.len() {
        return Err(Error::DimensionMismatch { left: pt.len(), right: plm.len() });
    }
    if pt.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    match mode {
        LossMode::PaperMaxAbsdiff => {
            let max_pt = pt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let max_plm = plm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok((max_pt - max_plm).abs())
        }
        LossMode::FullKl => {
            let total: f64 = plm.iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateSupervision(
                    "all LM likelihoods are zero; cannot normalize".into(),
                ));
            }
            let mut kl = 0.0;
            for (&p, &raw) in pt.iter().zip(plm) {
                let q = raw / total;
                if q > 0.0 {
                    kl += q * (q / p).ln();
                }
            }
            // Rounding can leave a tiny negative residue at q = p.
            Ok(kl.max(0.0))
        }
    }
}

/// Loss and its analytic gradient with respect to every entry of W, for one
/// sentence. Exposed so finite-difference checks can drive it directly.
pub fn loss_and_grad(
    x: &[f64],
    docs: &[Vec<f64>],
    plm: &[f64],
    params: &ScorerParams,
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    let dim = params.dim;
    if x.len() != dim {
        return Err(Error::DimensionMismatch { left: x.len(), right: dim });
    }
    if docs.len() != plm.len() || docs.is_empty() {
        return Err(Error::DimensionMismatch { left: docs.len(), right: plm.len() });
    }
    let w = &params.projection;
    let a = math::mat_vec(w, x);
    let na = math::l2_norm(&a);
    if na == 0.0 {
        return Err(Error::NumericalInstability { context: "projected input is zero".into() });
    }
    let mut bs = Vec::with_capacity(docs.len());
    let mut sims = Vec::with_capacity(docs.len());
    for d in docs {
        if d.len() != dim {
            return Err(Error::DimensionMismatch { left: d.len(), right: dim });
        }
        let b = math::mat_vec(w, d);
        let nb = math::l2_norm(&b);
        if nb == 0.0 {
            return Err(Error::NumericalInstability { context: "projected document is zero".into() });
        }
        sims.push(math::dot(&a, &b) / (na * nb));
        bs.push((b, nb));
    }
    let p = math::softmax_with_temperature(&sims, params.eta)?;
    let loss_value = loss(&p, plm, mode)?;

    // dL/dp per mode.
    let mut g = vec![0.0; p.len()];
    match mode {
        LossMode::PaperMaxAbsdiff => {
            let j_star = argmax(&p);
            let max_plm = plm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let diff = p[j_star] - max_plm;
            if diff != 0.0 {
                g[j_star] = diff.signum();
            }
        }
        LossMode::FullKl => {
            let total: f64 = plm.iter().sum();
            for (j, (&raw, &pj)) in plm.iter().zip(&p).enumerate() {
                let q = raw / total;
                g[j] = -q / pj;
            }
        }
    }

    // Through the softmax: dL/ds_k = (1/eta) p_k (g_k - sum_j g_j p_j).
    let weighted: f64 = g.iter().zip(&p).map(|(&gj, &pj)| gj * pj).sum();
    let c: Vec<f64> = g
        .iter()
        .zip(&p)
        .map(|(&gk, &pk)| pk * (gk - weighted) / params.eta)
        .collect();

    // Through the cosines: ds_j/da and ds_j/db_j, then outer products with x
    // and d_j accumulate into dW.
    let mut da = vec![0.0; dim];
    let mut grad = vec![0.0; dim * dim];
    for (j, ((b, nb), d)) in bs.iter().zip(docs).enumerate() {
        let cj = c[j];
        if cj == 0.0 {
            continue;
        }
        let sj = sims[j];
        for r in 0..dim {
            da[r] += cj * (b[r] / (na * nb) - sj * a[r] / (na * na));
        }
        for r in 0..dim {
            let db_r = cj * (a[r] / (na * nb) - sj * b[r] / (nb * nb));
            let row = &mut grad[r * dim..(r + 1) * dim];
            for (slot, &dc) in row.iter_mut().zip(d) {
                *slot += db_r * dc;
            }
        }
    }
    for r in 0..dim {
        let row = &mut grad[r * dim..(r + 1) * dim];
        for (slot, &xc) in row.iter_mut().zip(x) {
            *slot += da[r] * xc;
        }
    }
    Ok((loss_value, grad))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Candidate-construction settings shared by training, inference, and
/// serving.
#[derive(Debug, Clone, Copy)]
pub struct CandidateConfig {
    pub diversity_cap: usize,
    pub mode: DiversityMode,
    /// Top-n retrieval width for link prediction.
    pub top_n: usize,
}

/// Builds the diverse chunk database for x: per-chunk retrieval (or top-n
/// for link prediction), nearest example d_0, then the diversity operation.
pub fn build_candidates(
    x: &SentenceRecord,
    memory: &Memory,
    d0_pool: &[SentenceRecord],
    embedder: &Embedder,
    cc: &CandidateConfig,
) -> Result<Vec<DocumentCandidate>> {
    let a_x = if memory.task.is_noise_intensive() {
        let m = memory.chunk_len.ok_or_else(|| {
            Error::InvalidConfig("noise-intensive memory lacks a chunk length".into())
        })?;
        retrieve_pairs(memory, x, m, embedder)?
    } else {
        retrieve_top_n(memory, x, cc.top_n, embedder)?
    };
    let (d0, _) = nearest_example(d0_pool, x, embedder)?;
    diversify(&a_x, d0, cc.diversity_cap, cc.mode)
}

/// One sentence's precomputed training inputs.
struct TrainInstance {
    x: Vec<f64>,
    docs: Vec<Vec<f64>>,
    plm: Vec<f64>,
}

/// Per-epoch mean loss trace plus the final parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    /// (epoch, mean per-sentence loss at the parameters the epoch started
    /// and stepped through).
    pub trace: Vec<(usize, f64)>,
}

/// Trains W by plain gradient descent. Deterministic given (seed, config,
/// backend): shuffles are seeded and all accumulation is sequential.
#[allow(clippy::too_many_arguments)]
pub fn train_scorer(
    train_set: &[SentenceRecord],
    memory: &Memory,
    cfg: &TrainConfig,
    eta: f64,
    embedder: &Embedder,
    llm: &LmScoringBackend,
    template: &PromptTemplate,
    cc: &CandidateConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    memory.verify_fingerprint(embedder)?;
    let dim = memory.dim;
    let mut params = ScorerParams::identity(dim, eta);
    params.validate()?;

    // LM likelihoods do not depend on W, so everything per-sentence is
    // computed once up front.
    let mut instances = Vec::with_capacity(train_set.len());
    for x in train_set {
        let docs = build_candidates(x, memory, train_set, embedder, cc)?;
        let y = x.label.rendered().to_string();
        let plm = lm_likelihoods(x, &docs, &y, llm, template)?;
        let doc_texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let doc_embs = embedder.embed(&doc_texts)?;
        instances.push(TrainInstance {
            x: embedder.embed_one(&x.text)?.to_f64(),
            docs: doc_embs.iter().map(Embedding::to_f64).collect(),
            plm: plm.values,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_sum = vec![0.0; dim * dim];
            let mut batch_loss = 0.0;
            for &i in batch {
                let inst = &instances[i];
                let (l, g) =
                    loss_and_grad(&inst.x, &inst.docs, &inst.plm, &params, cfg.loss_mode)?;
                batch_loss += l;
                for (acc, gv) in grad_sum.iter_mut().zip(&g) {
                    *acc += gv;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            if grad_sum.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalInstability {
                    context: format!("gradient in epoch {epoch}, batch {batch_index}"),
                });
            }
            for (w, g) in params.projection.iter_mut().zip(&grad_sum) {
                *w -= cfg.learning_rate * scale * g;
            }
            if params.projection.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalInstability {
                    context: format!("parameters after epoch {epoch}, batch {batch_index}"),
                });
            }
            loss_sum += batch_loss;
        }
        trace.push((epoch, loss_sum / instances.len() as f64));
    }
    Ok(TrainOutcome { params, trace })
}

/// The document with the highest retrieval score; ties go to the lowest j.
/// Softmax is order-preserving, so the argmax is taken over the raw
/// similarities and never depends on eta.
pub fn select_document<'a>(
    x: &SentenceRecord,
    docs: &'a [DocumentCandidate],
    params: &ScorerParams,
    embedder: &Embedder,
    mode: SelectionMode,
) -> Result<&'a DocumentCandidate> {
    if docs.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    let x_emb = embedder.embed_one(&x.text)?;
    let doc_texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let doc_embs = embedder.embed(&doc_texts)?;
    let sims = match mode {
        SelectionMode::Trained => projected_similarities(&x_emb, &doc_embs, params)?,
        SelectionMode::RawCosine => doc_embs
            .iter()
            .map(|d| x_emb.cosine(d))
            .collect::<Result<Vec<f64>>>()?,
    };
    Ok(&docs[argmax(&sims)])
}

/// On-disk checkpoint: JSON header plus the row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerCheckpoint {
    pub params: ScorerParams,
    pub loss_mode: LossMode,
    pub embedder_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dim: usize,
    eta: f64,
    loss_mode: LossMode,
    embedder_fingerprint: String,
}

impl ScorerCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_FORMAT_VERSION,
            dim: self.params.dim,
            eta: self.params.eta,
            loss_mode: self.loss_mode,
            embedder_fingerprint: self.embedder_fingerprint.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for v in &self.params.projection {
            buf.extend_from_slice(&v.to_le_bytes());
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
        let header: CheckpointHeader = serde_json::from_slice(&bytes[4..4 + header_len])
            .map_err(|e| fmt_err(format!("header is not valid JSON: {e}")))?;
        if header.version != CHECKPOINT_FORMAT_VERSION {
            return Err(fmt_err(format!("unsupported format version {}", header.version)));
        }
        let body = &bytes[4 + header_len..];
        let expected = header.dim * header.dim * 8;
        if body.len() != expected {
            return Err(fmt_err(format!(
                "matrix body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let projection: Vec<f64> =
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let params = ScorerParams { projection, eta: header.eta, dim: header.dim };
        params.validate()?;
        Ok(ScorerCheckpoint {
            params,
            loss_mode: header.loss_mode,
            embedder_fingerprint: header.embedder_fingerprint,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        ScorerCheckpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Loss trace as CSV with an "epoch,mean_loss" header.
pub fn trace_to_csv(trace: &[(usize, f64)]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in trace {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    out
}
