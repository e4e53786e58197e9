//! Read-only HTTP service over built artifacts: document retrieval with
//! scores, and end-to-end extraction.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use chunkrag_core::{
    build_candidates, parse_output, score_documents, select_document, Error, Label, Memory,
    ScorerCheckpoint, SentenceRecord, Split,
};
use serde::Deserialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::pipeline::{load_inputs, LoadedInputs};
use crate::CliError;

pub struct ServeState {
    li: LoadedInputs,
    memory: Memory,
    checkpoint: ScorerCheckpoint,
    train: Vec<SentenceRecord>,
    labels: Vec<Label>,
}

/// Loads every artifact up front; failures name the missing paths.
pub fn load_state(cfg: RunConfig) -> Result<ServeState, CliError> {
    let missing: Vec<String> = [cfg.memory_path(), cfg.scorer_path()]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "cannot serve: missing artifacts: {}",
            missing.join(", ")
        )));
    }
    let li = load_inputs(cfg)?;
    let memory = Memory::load(&li.cfg.memory_path())
        .map_err(|e| CliError::Config(format!("memory artifact unreadable: {e}")))?;
    memory
        .verify_fingerprint(&li.embedder)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let checkpoint = ScorerCheckpoint::load(&li.cfg.scorer_path())
        .map_err(|e| CliError::Config(format!("scorer artifact unreadable: {e}")))?;
    if checkpoint.embedder_fingerprint != li.embedder.fingerprint() {
        return Err(CliError::Config(
            "scorer checkpoint was trained under a different embedder".into(),
        ));
    }
    let train = li.ingested.of_split(Split::Train);
    let labels = li.parse_labels();
    Ok(ServeState { li, memory, checkpoint, train, labels })
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/extract", post(extract))
        .with_state(state)
}

/// Binds, announces the bound address on stdout, and serves until killed.
pub fn run(cfg: RunConfig, port: u16) -> Result<(), CliError> {
    let state = Arc::new(load_state(cfg)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start async runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind port {port}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::Runtime(format!("cannot read bound address: {e}")))?;
        println!("listening on {addr}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Runtime(format!("server failed: {e}")))
    })
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::BackendUnavailable(_) | Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

fn query_record(text: String, head: Option<String>, tail: Option<String>) -> SentenceRecord {
    SentenceRecord {
        id: "query".into(),
        text,
        label: Label::bare("query"),
        head_entity: head,
        tail_entity: tail,
        split: Split::Test,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    text: String,
}

async fn retrieve(State(st): State<Arc<ServeState>>, body: String) -> Response {
    let out = tokio::task::spawn_blocking(move || retrieve_sync(&st, &body)).await;
    out.unwrap_or_else(|e| {
        error_response(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}"))
    })
}

fn retrieve_sync(st: &ServeState, body: &str) -> Response {
    let req: RetrieveRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => {
            return error_response(StatusCode::BAD_REQUEST, format!("invalid request body: {e}"))
        }
    };
    if req.text.trim().is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "text must be non-empty".into());
    }
    let x = query_record(req.text, None, None);
    let docs = match build_candidates(&x, &st.memory, &st.train, &st.li.embedder, &st.li.candidate_config()) {
        Ok(d) => d,
        Err(e) => return error_response(status_for(&e), e.to_string()),
    };
    let scored = (|| -> chunkrag_core::Result<Vec<serde_json::Value>> {
        let x_emb = st.li.embedder.embed_one(&x.text)?;
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let doc_embs = st.li.embedder.embed(&texts)?;
        let p = score_documents(&x_emb, &doc_embs, &st.checkpoint.params)?;
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|&a, &b| {
            p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        Ok(order
            .into_iter()
            .map(|j| {
                json!({
                    "j": docs[j].id,
                    "text": docs[j].text,
                    "provenance": docs[j].provenance,
                    "p_t": p[j],
                })
            })
            .collect())
    })();
    match scored {
        Ok(documents) => (StatusCode::OK, Json(json!({ "documents": documents }))).into_response(),
        Err(e) => error_response(status_for(&e), e.to_string()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractRequest {
    text: String,
    #[serde(default)]
    head: Option<String>,
    #[serde(default)]
    tail: Option<String>,
}

async fn extract(State(st): State<Arc<ServeState>>, body: String) -> Response {
    let out = tokio::task::spawn_blocking(move || extract_sync(&st, &body)).await;
    out.unwrap_or_else(|e| {
        error_response(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}"))
    })
}

fn extract_sync(st: &ServeState, body: &str) -> Response {
    let req: ExtractRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => {
            return error_response(StatusCode::BAD_REQUEST, format!("invalid request body: {e}"))
        }
    };
    if req.text.trim().is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "text must be non-empty".into());
    }
    let x = query_record(req.text, req.head, req.tail);
    if let Err(e) = x.validate(st.li.cfg.task) {
        return error_response(StatusCode::BAD_REQUEST, e.to_string());
    }
    let result = (|| -> chunkrag_core::Result<chunkrag_core::ExtractionOutput> {
        let docs =
            build_candidates(&x, &st.memory, &st.train, &st.li.embedder, &st.li.candidate_config())?;
        let chosen = select_document(
            &x,
            &docs,
            &st.checkpoint.params,
            &st.li.embedder,
            st.li.selection_mode(),
        )?;
        let prompt = chunkrag_core::assemble_prompt(&st.li.template, chosen, &x)?;
        let raw = st.li.cfg.llm.generate(&prompt)?;
        Ok(parse_output(&raw, st.li.cfg.task, &st.labels))
    })();
    match result {
        Ok(output) => (StatusCode::OK, Json(output)).into_response(),
        Err(e) => error_response(status_for(&e), e.to_string()),
    }
}
