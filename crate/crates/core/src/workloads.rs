//! Deterministic synthetic workloads for the five agent prompt patterns and
//! the header-length sweep.
//!
//! Every pattern opens with a shared header of `header_len` tokens. After it:
//!
//! - `agent_meta`: per-request agent metadata (unique, distinct lengths) ∥
//!   marker ∥ shared body. Metadata and body use a boundary-silent
//!   vocabulary, so without the marker the body's chunk boundaries sit at a
//!   per-request phase set by the metadata length.
//! - `sysvar`: shared system prompt (70% of `body_len`) ∥ per-request variable
//!   slot whose length is one of `variant_pool` values ∥ marker ∥ shared tail.
//! - `compact`: one session; shared system block ∥ marker ∥ a rolling history
//!   window that loses its leading 10% and gains a new 10% each turn.
//! - `rerank`: fixed prefix ∥ eight shared 256-token documents, each preceded
//!   by a marker, in one of `variant_pool` orders ∥ short unique query. Orders
//!   keep the top half fixed and permute the lower-ranked half.
//! - `tool_variants`: fixed prefix ∥ one of `variant_pool` tool-schema blocks
//!   ∥ marker ∥ shared tail ∥ short unique query.
//!
//! Tokens are uniform random `u32` unless stated otherwise.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chunker::{default_gear_table, MARKER_LEN};
use crate::engine::{replay, EngineError, ServeConfig};
use crate::model::{Request, Segment, SegmentKind, Token, TokenSeq, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    AgentMeta,
    Sysvar,
    Compact,
    Rerank,
    ToolVariants,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::AgentMeta,
        Pattern::Sysvar,
        Pattern::Compact,
        Pattern::Rerank,
        Pattern::ToolVariants,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::AgentMeta => "agent_meta",
            Pattern::Sysvar => "sysvar",
            Pattern::Compact => "compact",
            Pattern::Rerank => "rerank",
            Pattern::ToolVariants => "tool_variants",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| WorkloadError::UnknownPattern(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("unknown pattern `{0}` (expected agent_meta, sysvar, compact, rerank or tool_variants)")]
    UnknownPattern(String),
    #[error("n_req must be at least 2, got {0}")]
    TooFewRequests(usize),
    #[error("body_len {body_len} is shorter than the {MARKER_LEN}-token marker")]
    BodyTooShort { body_len: usize },
    #[error("header_len must be at least 1")]
    EmptyHeader,
    #[error("variant_pool must be at least 1")]
    EmptyVariantPool,
    #[error("header sweep supports agent_meta and sysvar, not {0}")]
    SweepPattern(Pattern),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternParams {
    pub pattern: Pattern,
    pub n_req: usize,
    pub body_len: usize,
    pub header_len: usize,
    pub variant_pool: usize,
    pub seed: u64,
    pub markers: bool,
}

impl PatternParams {
    pub fn new(pattern: Pattern, seed: u64) -> Self {
        Self {
            pattern,
            n_req: 80,
            body_len: 2500,
            header_len: 50,
            variant_pool: 8,
            seed,
            markers: true,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.n_req < 2 {
            return Err(WorkloadError::TooFewRequests(self.n_req));
        }
        if self.body_len < MARKER_LEN {
            return Err(WorkloadError::BodyTooShort {
                body_len: self.body_len,
            });
        }
        if self.header_len < 1 {
            return Err(WorkloadError::EmptyHeader);
        }
        if self.variant_pool < 1 {
            return Err(WorkloadError::EmptyVariantPool);
        }
        Ok(())
    }
}

pub const RERANK_DOCS: usize = 8;
pub const RERANK_DOC_LEN: usize = 256;
const QUERY_LEN: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> TokenSeq {
    (0..n).map(|_| rng.random()).collect()
}

/// Tokens whose Gear entry is odd. The rolling hash stays odd across any run
/// of them, so the mask test never fires and only size clamps or pins cut.
pub fn is_boundary_silent(token: Token) -> bool {
    default_gear_table().get(token) & 1 == 1
}

fn silent(rng: &mut ChaCha8Rng, n: usize) -> TokenSeq {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t: Token = rng.random();
        if is_boundary_silent(t) {
            out.push(t);
        }
    }
    out
}

fn shared(kind: SegmentKind, tokens: TokenSeq, id: &str) -> Segment {
    Segment::shared(kind, tokens, id)
}

pub fn generate(params: &PatternParams) -> Result<Trace, WorkloadError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(params.pattern.stream());
    let header = shared(SegmentKind::Header, uniform(&mut rng, params.header_len), "header");
    let requests = match params.pattern {
        Pattern::AgentMeta => agent_meta(params, &mut rng, header),
        Pattern::Sysvar => sysvar(params, &mut rng, header),
        Pattern::Compact => compact(params, &mut rng, header),
        Pattern::Rerank => rerank(params, &mut rng, header),
        Pattern::ToolVariants => tool_variants(params, &mut rng, header),
    };
    let requests = if params.markers {
        requests
    } else {
        requests.iter().map(Request::without_markers).collect()
    };
    Ok(Trace::new(requests))
}

fn session(params: &PatternParams, i: usize) -> String {
    format!("{}-{i:04}", params.pattern)
}

fn agent_meta(params: &PatternParams, rng: &mut ChaCha8Rng, header: Segment) -> Vec<Request> {
    let body = shared(SegmentKind::Body, silent(rng, params.body_len), "body");
    let mut meta_lens: Vec<usize> = (8..8 + params.n_req).collect();
    meta_lens.shuffle(rng);
    meta_lens
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let meta = Segment::new(SegmentKind::Other, silent(rng, m));
            Request::new(session(params, i), 0, vec![header.clone(), meta, Segment::marker(), body.clone()])
        })
        .collect()
}

fn sysvar(params: &PatternParams, rng: &mut ChaCha8Rng, header: Segment) -> Vec<Request> {
    let sys_len = params.body_len * 7 / 10;
    let system = shared(SegmentKind::System, uniform(rng, sys_len), "system");
    let tail = shared(SegmentKind::Body, uniform(rng, params.body_len - sys_len), "tail");
    (0..params.n_req)
        .map(|i| {
            let slot_len = 4 + 4 * rng.random_range(0..params.variant_pool);
            let slot = Segment::new(SegmentKind::Other, uniform(rng, slot_len));
            Request::new(
                session(params, i),
                0,
                vec![header.clone(), system.clone(), slot, Segment::marker(), tail.clone()],
            )
        })
        .collect()
}

fn compact(params: &PatternParams, rng: &mut ChaCha8Rng, header: Segment) -> Vec<Request> {
    let system = shared(SegmentKind::System, uniform(rng, params.body_len), "system");
    let window = (params.body_len / 40).max(10);
    let step = (window / 10).max(1);
    let mut history = uniform(rng, window);
    let sid = session(params, 0);
    let mut out = Vec::with_capacity(params.n_req);
    for t in 0..params.n_req {
        if t > 0 {
            history.drain(..step);
            history.extend(uniform(rng, step));
        }
        out.push(Request::new(
            sid.clone(),
            t as u64,
            vec![
                header.clone(),
                system.clone(),
                Segment::marker(),
                Segment::new(SegmentKind::History, history.clone()),
            ],
        ));
    }
    out
}

/// `pool` distinct document orders; order 0 is the identity and every order
/// keeps the top half in place.
fn rerank_orders(rng: &mut ChaCha8Rng, pool: usize) -> Vec<Vec<usize>> {
    let half = RERANK_DOCS / 2;
    let mut orders: Vec<Vec<usize>> = vec![(0..RERANK_DOCS).collect()];
    // 4! = 24 lower-half orders; beyond that repeats are allowed.
    let distinct = (1..=RERANK_DOCS - half).product::<usize>();
    while orders.len() < pool {
        let mut o: Vec<usize> = (0..RERANK_DOCS).collect();
        o[half..].shuffle(rng);
        if orders.len() >= distinct || !orders.contains(&o) {
            orders.push(o);
        }
    }
    orders.truncate(pool);
    orders
}

fn rerank(params: &PatternParams, rng: &mut ChaCha8Rng, header: Segment) -> Vec<Request> {
    let prefix = shared(SegmentKind::System, uniform(rng, params.body_len), "prefix");
    let docs: Vec<Segment> = (0..RERANK_DOCS)
        .map(|d| shared(SegmentKind::Doc, uniform(rng, RERANK_DOC_LEN), &format!("doc-{d}")))
        .collect();
    let orders = rerank_orders(rng, params.variant_pool);
    (0..params.n_req)
        .map(|i| {
            let order = &orders[rng.random_range(0..orders.len())];
            let mut segs = vec![header.clone(), prefix.clone()];
            for &d in order {
                segs.push(Segment::marker());
                segs.push(docs[d].clone());
            }
            segs.push(Segment::new(SegmentKind::Other, uniform(rng, QUERY_LEN)));
            Request::new(session(params, i), 0, segs)
        })
        .collect()
}

fn tool_variants(params: &PatternParams, rng: &mut ChaCha8Rng, header: Segment) -> Vec<Request> {
    let prefix = shared(SegmentKind::System, uniform(rng, params.body_len), "prefix");
    let tools: Vec<Segment> = (0..params.variant_pool)
        .map(|v| shared(SegmentKind::Tool, uniform(rng, 200 + 50 * v), &format!("tool-{v}")))
        .collect();
    let tail = shared(SegmentKind::Body, uniform(rng, params.body_len / 5), "tail");
    (0..params.n_req)
        .map(|i| {
            let tool = tools[rng.random_range(0..tools.len())].clone();
            let query = Segment::new(SegmentKind::Other, uniform(rng, QUERY_LEN));
            Request::new(
                session(params, i),
                0,
                vec![header.clone(), prefix.clone(), tool, Segment::marker(), tail.clone(), query],
            )
        })
        .collect()
}

pub const DEFAULT_SWEEP: [usize; 4] = [50, 250, 1000, 2000];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub header_len: usize,
    pub tprefix: f64,
    pub pic_unique: f64,
    pub total: f64,
}

pub const SWEEP_CSV_HEADER: &str = "header_len,tprefix,pic_unique,total";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.header_len, r.tprefix, r.pic_unique, r.total));
    }
    out
}

/// One fresh engine run per header length.
pub fn header_sweep(base: &PatternParams, header_lens: &[usize], config: &ServeConfig) -> Result<Vec<SweepRow>, WorkloadError> {
    if !matches!(base.pattern, Pattern::AgentMeta | Pattern::Sysvar) {
        return Err(WorkloadError::SweepPattern(base.pattern));
    }
    header_lens
        .iter()
        .map(|&h| {
            let params = PatternParams {
                header_len: h,
                ..base.clone()
            };
            let trace = generate(&params)?;
            let row = replay(&trace, config, base.pattern.as_str())?
                .aggregate
                .expect("n_req >= 2");
            Ok(SweepRow {
                header_len: h,
                tprefix: row.tprefix,
                pic_unique: row.pic_unique,
                total: row.total,
            })
        })
        .collect()
}
