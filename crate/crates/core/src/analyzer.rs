//! Offline trace analysis: prefix / PIC-cacheable / novel decomposition, the
//! three-strategy recoverability comparison and the mask-exponent sweep.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chunker::{cdc_chunk, fingerprint, fixed_block_chunk, sliding_fingerprints, ChunkerParams};
use crate::engine::marker_pins;
use crate::model::{flatten, Request, Segment, SegmentKind, Token, TokenSeq, Trace};
use crate::prefix_cache::RadixTree;

pub const DECOMPOSE_WINDOW: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyzerError {
    #[error("mask exponent {0} outside [1, 20]")]
    MaskExponent(u32),
    #[error("unknown scope `{0}` (expected within_session or cross_session)")]
    UnknownScope(String),
    #[error("block and window sizes must be positive")]
    ZeroSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    WithinSession,
    CrossSession,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::WithinSession => "within_session",
            Scope::CrossSession => "cross_session",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = AnalyzerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "within_session" => Ok(Scope::WithinSession),
            "cross_session" => Ok(Scope::CrossSession),
            other => Err(AnalyzerError::UnknownScope(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnDecomposition {
    pub session_id: String,
    pub turn: u64,
    pub len: usize,
    pub prefix: usize,
    pub pic_cacheable: usize,
    pub novel: usize,
}

impl TurnDecomposition {
    pub fn fractions(&self) -> Fractions {
        if self.len == 0 {
            return Fractions::default();
        }
        let n = self.len as f64;
        Fractions {
            prefix: self.prefix as f64 / n,
            pic_cacheable: self.pic_cacheable as f64 / n,
            novel: self.novel as f64 / n,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Fractions {
    pub prefix: f64,
    pub pic_cacheable: f64,
    pub novel: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: Fractions,
    pub p95: Fractions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub scope: Scope,
    pub turns: Vec<TurnDecomposition>,
    /// Token-weighted over the whole trace.
    pub aggregate: Fractions,
    /// Over per-turn fractions, nearest rank.
    pub percentiles: Percentiles,
}

impl DecompositionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,session_id,turn,len,prefix,pic_cacheable,novel\n");
        for t in &self.turns {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.scope, t.session_id, t.turn, t.len, t.prefix, t.pic_cacheable, t.novel
            ));
        }
        out
    }
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn percentile_of(turns: &[TurnDecomposition], q: f64) -> Fractions {
    let pick = |f: fn(&Fractions) -> f64| {
        let mut v: Vec<f64> = turns.iter().map(|t| f(&t.fractions())).collect();
        v.sort_by(f64::total_cmp);
        nearest_rank(&v, q)
    };
    Fractions {
        prefix: pick(|f| f.prefix),
        pic_cacheable: pick(|f| f.pic_cacheable),
        novel: pick(|f| f.novel),
    }
}

#[derive(Default)]
struct ScopeState {
    previous: Option<TokenSeq>,
    windows: HashSet<u64>,
}

/// Splits every turn into exact-prefix, PIC-cacheable and novel tokens.
///
/// Prefix is the longest common prefix with the session's previous turn
/// (`WithinSession`) or with any earlier request (`CrossSession`). A remaining
/// token is PIC-cacheable when some 64-token window containing it has a
/// fingerprint seen earlier in scope, at any offset.
pub fn decompose(trace: &Trace, scope: Scope) -> DecompositionReport {
    let mut sessions: HashMap<&str, ScopeState> = HashMap::new();
    let mut global = ScopeState::default();
    let mut tree = RadixTree::new();
    let mut turns = Vec::with_capacity(trace.len());

    for (i, req) in trace.requests.iter().enumerate() {
        let (tokens, _) = flatten(req);
        let state = match scope {
            Scope::WithinSession => sessions.entry(req.session_id.as_str()).or_default(),
            Scope::CrossSession => &mut global,
        };
        let prefix = match scope {
            Scope::WithinSession => state
                .previous
                .as_deref()
                .map(|p| p.iter().zip(&tokens).take_while(|(a, b)| a == b).count())
                .unwrap_or(0),
            Scope::CrossSession => tree.match_prefix(&tokens).len,
        };

        let fps = sliding_fingerprints(&tokens, DECOMPOSE_WINDOW);
        let mut covered = vec![false; tokens.len()];
        let mut run_end = 0;
        for &(off, fp) in &fps {
            if state.windows.contains(&fp) {
                let from = off.max(run_end);
                covered[from..off + DECOMPOSE_WINDOW].iter_mut().for_each(|c| *c = true);
                run_end = off + DECOMPOSE_WINDOW;
            }
        }
        let pic = covered[prefix..].iter().filter(|&&c| c).count();
        turns.push(TurnDecomposition {
            session_id: req.session_id.clone(),
            turn: req.turn_index,
            len: tokens.len(),
            prefix,
            pic_cacheable: pic,
            novel: tokens.len() - prefix - pic,
        });

        state.windows.extend(fps.iter().map(|&(_, fp)| fp));
        if scope == Scope::CrossSession {
            tree.insert(&tokens, i as u64);
        }
        state.previous = Some(tokens);
    }

    let total: usize = turns.iter().map(|t| t.len).sum();
    let aggregate = if total == 0 {
        Fractions::default()
    } else {
        let n = total as f64;
        Fractions {
            prefix: turns.iter().map(|t| t.prefix).sum::<usize>() as f64 / n,
            pic_cacheable: turns.iter().map(|t| t.pic_cacheable).sum::<usize>() as f64 / n,
            novel: turns.iter().map(|t| t.novel).sum::<usize>() as f64 / n,
        }
    };
    let percentiles = Percentiles {
        p50: percentile_of(&turns, 0.50),
        p95: percentile_of(&turns, 0.95),
    };
    DecompositionReport {
        scope,
        turns,
        aggregate,
        percentiles,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StrategyOptions {
    pub block: usize,
    pub subwindow: usize,
    /// Key fixed blocks on content only, ignoring offset (ablation).
    pub fixed_content_key: bool,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self {
            block: 128,
            subwindow: 128,
            fixed_content_key: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Recovered {
    pub fixed_block: usize,
    pub cdc: usize,
    pub cdc_fallback: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyReport {
    pub total_tokens: usize,
    pub recovered: Recovered,
    pub fixed_block: f64,
    pub cdc: f64,
    pub cdc_fallback: f64,
    /// `cdc_fallback / fixed_block`; `None` when fixed-block recovers nothing.
    pub ratio: Option<f64>,
}

impl StrategyReport {
    fn new(total_tokens: usize, recovered: Recovered) -> Self {
        let f = |n: usize| if total_tokens == 0 { 0.0 } else { n as f64 / total_tokens as f64 };
        let fixed_block = f(recovered.fixed_block);
        let cdc_fallback = f(recovered.cdc_fallback);
        Self {
            total_tokens,
            recovered,
            fixed_block,
            cdc: f(recovered.cdc),
            cdc_fallback,
            ratio: (fixed_block > 0.0).then(|| cdc_fallback / fixed_block),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,recovered_tokens,total_tokens,fraction\n");
        for (name, n, f) in [
            ("fixed_block", self.recovered.fixed_block, self.fixed_block),
            ("cdc", self.recovered.cdc, self.cdc),
            ("cdc_fallback", self.recovered.cdc_fallback, self.cdc_fallback),
        ] {
            out.push_str(&format!("{name},{n},{},{f:.6}\n", self.total_tokens));
        }
        out
    }
}

fn request_tokens_and_pins(req: &Request) -> (TokenSeq, Vec<usize>) {
    let (tokens, _) = flatten(req);
    let pins = marker_pins(&req.marker_spans(), 0);
    (tokens, pins)
}

/// CDC chunk and fallback legs. Returns (chunk-recovered, fallback-recovered).
fn cdc_legs(
    trace: &Trace,
    params: &ChunkerParams,
    subwindow: usize,
    with_fallback: bool,
) -> (usize, usize) {
    let mut chunks_seen: HashSet<u64> = HashSet::new();
    let mut windows_seen: HashSet<u64> = HashSet::new();
    let (mut cdc, mut fallback) = (0, 0);
    for req in &trace.requests {
        let (tokens, pins) = request_tokens_and_pins(req);
        let chunks = cdc_chunk(&tokens, params, &pins);
        let mut new_windows = Vec::new();
        for c in &chunks {
            let span = &tokens[c.start..c.end()];
            let windows: Vec<u64> = span.chunks_exact(subwindow).map(fingerprint).collect();
            if chunks_seen.contains(&c.fingerprint) {
                cdc += c.len;
                fallback += c.len;
            } else if with_fallback {
                fallback += windows.iter().filter(|w| windows_seen.contains(w)).count() * subwindow;
            }
            new_windows.extend(windows);
        }
        chunks_seen.extend(chunks.iter().map(|c| c.fingerprint));
        windows_seen.extend(new_windows);
    }
    (cdc, fallback)
}

fn fixed_leg(trace: &Trace, options: &StrategyOptions) -> usize {
    let mut seen: HashSet<(u64, usize)> = HashSet::new();
    let mut recovered = 0;
    for req in &trace.requests {
        let (tokens, _) = flatten(req);
        let keys: Vec<((u64, usize), usize)> = fixed_block_chunk(&tokens, options.block)
            .iter()
            .map(|b| {
                let offset = if options.fixed_content_key { 0 } else { b.start };
                ((b.fingerprint, offset), b.len)
            })
            .collect();
        recovered += keys.iter().filter(|(k, _)| seen.contains(k)).map(|(_, n)| n).sum::<usize>();
        seen.extend(keys.into_iter().map(|(k, _)| k));
    }
    recovered
}

/// Token-weighted recovery of fixed-block, CDC and CDC-with-fallback
/// deduplication. A token is recovered when its block, chunk or sub-window
/// fingerprint was emitted by an earlier request.
pub fn compare_strategies(
    trace: &Trace,
    params: &ChunkerParams,
    options: &StrategyOptions,
) -> Result<StrategyReport, AnalyzerError> {
    if options.block == 0 || options.subwindow == 0 {
        return Err(AnalyzerError::ZeroSize);
    }
    let total = trace.total_tokens();
    let fixed_block = fixed_leg(trace, options);
    let (cdc, cdc_fallback) = cdc_legs(trace, params, options.subwindow, true);
    Ok(StrategyReport::new(
        total,
        Recovered {
            fixed_block,
            cdc,
            cdc_fallback,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskPoint {
    pub k: u32,
    pub recovered_tokens: usize,
    pub recovery: f64,
}

pub fn mask_sweep_csv(points: &[MaskPoint]) -> String {
    let mut out = String::from("k,recovered_tokens,recovery\n");
    for p in points {
        out.push_str(&format!("{},{},{:.6}\n", p.k, p.recovered_tokens, p.recovery));
    }
    out
}

/// The CDC leg of [`compare_strategies`] for each mask exponent, all other
/// chunker parameters held fixed.
pub fn mask_sweep(trace: &Trace, k_values: &[u32], params: &ChunkerParams) -> Result<Vec<MaskPoint>, AnalyzerError> {
    if let Some(&k) = k_values.iter().find(|&&k| !(1..=20).contains(&k)) {
        return Err(AnalyzerError::MaskExponent(k));
    }
    let total = trace.total_tokens();
    Ok(k_values
        .iter()
        .map(|&k| {
            let p = ChunkerParams {
                mask_exponent: k,
                ..params.clone()
            };
            let (cdc, _) = cdc_legs(trace, &p, 1, false);
            MaskPoint {
                k,
                recovered_tokens: cdc,
                recovery: if total == 0 { 0.0 } else { cdc as f64 / total as f64 },
            }
        })
        .collect())
}

/// Marker-free corpus: each request is a fresh random 1..=`max_offset` token
/// lead-in followed by the same shared content.
pub fn shifted_corpus(n_req: usize, content_len: usize, max_offset: usize, seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content: TokenSeq = (0..content_len).map(|_| rng.random()).collect();
    let requests = (0..n_req)
        .map(|i| {
            let off = rng.random_range(1..=max_offset);
            let lead: TokenSeq = (0..off).map(|_| rng.random::<Token>()).collect();
            Request::new(
                format!("shifted-{i:04}"),
                0,
                vec![
                    Segment::new(SegmentKind::Other, lead),
                    Segment::shared(SegmentKind::Doc, content.clone(), "content"),
                ],
            )
        })
        .collect();
    Trace::new(requests)
}
