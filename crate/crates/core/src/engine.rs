//! The per-request serve path and trace replay.
//!
//! For each request:
//!
//! 1. exact-prefix match against every earlier request (radix tree);
//! 2. content-defined chunking of the unmatched tail, with boundaries pinned
//!    around marker segments;
//! 3. per chunk at absolute position `p`: tokens below the carve-out threshold
//!    are always prefilled; a registry hit is reused with `delta = p - p_src`;
//!    a miss is prefilled (optionally after probing 128-token sub-windows) and
//!    registered at `p`;
//! 4. the whole request is inserted into the radix tree.
//!
//! Observer mode records what would be reused. Live mode also materializes
//! every reused chunk and checks its keys against a fresh prefill; a mismatch
//! is a hard error. Both modes produce identical accounting.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::chunker::{cdc_chunk, ChunkerParams};
use crate::kv_registry::{
    fresh_kr, materialize, max_row_rel_l2, rotate_rows, Registry, SyntheticKvParams,
};
use crate::model::{flatten, Request, Token, Trace};
use crate::prefix_cache::{Handle, RadixTree};
use crate::rotary::{Precision, RotarySpec};

/// Environment variable that selects live mode when set to `1`.
pub const LIVE_ENV: &str = "IRMINSUL_SIM_LIVE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Observer,
    Live,
}

impl Mode {
    /// Live when `IRMINSUL_SIM_LIVE=1`, observer otherwise.
    pub fn from_env() -> Self {
        match std::env::var(LIVE_ENV) {
            Ok(v) if v == "1" => Mode::Live,
            _ => Mode::Observer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub mode: Mode,
    pub carveout_threshold: usize,
    pub s1_enabled: bool,
    pub s1_window: usize,
    pub chunker: ChunkerParams,
    pub rotary: RotarySpec,
    pub kv: SyntheticKvParams,
    /// Storage and output precision of `k_r`.
    pub precision: Precision,
    /// Rotation used to materialize hits. `None` means `rotary`; anything else
    /// simulates a serving stack that rotates with the wrong spec.
    pub materialize_rotary: Option<RotarySpec>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Observer,
            carveout_threshold: 32,
            s1_enabled: false,
            s1_window: 128,
            chunker: ChunkerParams::default(),
            rotary: RotarySpec::default(),
            kv: SyntheticKvParams::default(),
            precision: Precision::F64,
            materialize_rotary: None,
        }
    }
}

impl ServeConfig {
    pub fn live() -> Self {
        Self {
            mode: Mode::Live,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceClass {
    PrefixHit,
    PicHit,
    S1Hit,
    CarveoutPrefill,
    NovelPrefill,
}

impl fmt::Display for ServiceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceClass::PrefixHit => "prefix_hit",
            ServiceClass::PicHit => "pic_hit",
            ServiceClass::S1Hit => "s1_hit",
            ServiceClass::CarveoutPrefill => "carveout_prefill",
            ServiceClass::NovelPrefill => "novel_prefill",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub prefix_hit: usize,
    pub pic_hit: usize,
    pub s1_hit: usize,
    pub carveout_prefill: usize,
    pub novel_prefill: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.prefix_hit + self.pic_hit + self.s1_hit + self.carveout_prefill + self.novel_prefill
    }

    fn add(&mut self, class: ServiceClass, n: usize) {
        match class {
            ServiceClass::PrefixHit => self.prefix_hit += n,
            ServiceClass::PicHit => self.pic_hit += n,
            ServiceClass::S1Hit => self.s1_hit += n,
            ServiceClass::CarveoutPrefill => self.carveout_prefill += n,
            ServiceClass::NovelPrefill => self.novel_prefill += n,
        }
    }
}

/// One classified span of a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentEvent {
    pub start: usize,
    pub len: usize,
    pub class: ServiceClass,
    #[serde(serialize_with = "hex_opt")]
    pub fingerprint: Option<u64>,
    pub delta: Option<i64>,
}

fn hex_opt<S: serde::Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_str(&format!("{x:016x}")),
        None => s.serialize_none(),
    }
}

/// Where each span's KV comes from, in live mode.
#[derive(Debug, Clone)]
pub enum KvSlice {
    /// Served by the exact-prefix cache from the witness request's KV.
    Prefix { witness: Option<Handle>, len: usize },
    /// Computed by ordinary prefill.
    Prefill { start: usize, len: usize },
    /// Reused latent rows (shared) plus re-rotated key rows.
    Reused {
        start: usize,
        len: usize,
        c_kv: Arc<[f64]>,
        /// Row offset into `c_kv`.
        row_offset: usize,
        k_r: Vec<f64>,
        delta: i64,
    },
}

#[derive(Debug, Clone)]
pub struct ServeResult {
    pub request_index: u64,
    pub len: usize,
    pub counts: ClassCounts,
    pub events: Vec<SegmentEvent>,
    /// Multiplies a delta rotation spends on reused rows (counted in both modes).
    pub rotation_multiplies: u64,
    /// Live mode only.
    pub kv: Option<Vec<KvSlice>>,
}

impl ServeResult {
    fn frac(&self, n: usize) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            n as f64 / self.len as f64
        }
    }

    pub fn tprefix(&self) -> f64 {
        self.frac(self.counts.prefix_hit)
    }

    pub fn pic_unique(&self) -> f64 {
        self.frac(self.counts.pic_hit)
    }

    pub fn s1_fraction(&self) -> f64 {
        self.frac(self.counts.s1_hit)
    }

    pub fn total_cached(&self) -> f64 {
        self.frac(self.counts.prefix_hit + self.counts.pic_hit + self.counts.s1_hit)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("request {request} has no tokens")]
    EmptyRequest { request: u64 },
    #[error(
        "request {request}: reused span at {start}..{end} (delta {delta}) has k_r rel-L2 {error:.3e} \
         against fresh prefill, above {tolerance:.1e}; is the rotary base right?"
    )]
    RotationMismatch {
        request: u64,
        start: usize,
        end: usize,
        delta: i64,
        error: f64,
        tolerance: f64,
    },
}

#[derive(Debug, Clone)]
pub struct EngineState {
    pub tree: RadixTree,
    pub registry: Registry,
    pub requests_served: u64,
}

impl EngineState {
    pub fn new(config: &ServeConfig) -> Self {
        Self {
            tree: RadixTree::new(),
            registry: Registry::new(config.kv.clone(), config.precision),
            requests_served: 0,
        }
    }
}

/// A reused window inside a chunk that missed as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct S1Hit {
    /// Offset of the window inside the chunk.
    pub offset: usize,
    pub len: usize,
    pub fingerprint: u64,
    /// Fingerprint of the registered chunk holding the window.
    pub source_chunk: u64,
    pub source_offset: usize,
    pub delta: i64,
}

/// Probes non-overlapping `window`-token sub-windows of a missed chunk against
/// the registry's sub-window index. Chunks shorter than `window` are not
/// probed.
pub fn s1_probe(chunk: &[Token], chunk_start: usize, registry: &Registry, window: usize) -> Vec<S1Hit> {
    let mut hits = Vec::new();
    let mut off = 0;
    while off + window <= chunk.len() {
        let fp = crate::chunker::fingerprint(&chunk[off..off + window]);
        if let Some(r) = registry.lookup_subwindow(fp) {
            hits.push(S1Hit {
                offset: off,
                len: window,
                fingerprint: fp,
                source_chunk: r.chunk,
                source_offset: r.offset,
                delta: (chunk_start + off) as i64 - r.p_src as i64,
            });
        }
        off += window;
    }
    hits
}

/// Boundary pins, relative to the tail, that isolate every marker segment as
/// its own chunk: one after the token preceding the marker and one at the
/// marker's final token.
pub fn marker_pins(spans: &[(usize, usize)], tail_start: usize) -> Vec<usize> {
    let mut pins = Vec::new();
    for &(s, e) in spans {
        if s > tail_start {
            pins.push(s - 1 - tail_start);
        }
        if e > tail_start {
            pins.push(e - 1 - tail_start);
        }
    }
    pins
}

struct Recorder {
    counts: ClassCounts,
    events: Vec<SegmentEvent>,
    kv: Option<Vec<KvSlice>>,
}

impl Recorder {
    fn push(&mut self, start: usize, len: usize, class: ServiceClass, fingerprint: Option<u64>, delta: Option<i64>) {
        if len == 0 {
            return;
        }
        self.counts.add(class, len);
        self.events.push(SegmentEvent {
            start,
            len,
            class,
            fingerprint,
            delta,
        });
    }

    fn prefill(&mut self, start: usize, len: usize, class: ServiceClass, fingerprint: Option<u64>) {
        if len == 0 {
            return;
        }
        self.push(start, len, class, fingerprint, None);
        if let Some(kv) = &mut self.kv {
            kv.push(KvSlice::Prefill { start, len });
        }
    }
}

/// Serves one request against the engine state.
pub fn serve(state: &mut EngineState, request: &Request, config: &ServeConfig) -> Result<ServeResult, EngineError> {
    let request_index = state.requests_served;
    let (tokens, _) = flatten(request);
    if tokens.is_empty() {
        return Err(EngineError::EmptyRequest {
            request: request_index,
        });
    }
    let live = config.mode == Mode::Live;
    let mut rec = Recorder {
        counts: ClassCounts::default(),
        events: Vec::new(),
        kv: live.then(Vec::new),
    };
    let mut rotation_multiplies = 0u64;
    let kr_dim = config.kv.kr_dim as u64;
    let mat_spec = config.materialize_rotary.as_ref().unwrap_or(&config.rotary);
    if live {
        state.registry.pool_mut().begin_request();
    }

    let prefix = state.tree.match_prefix(&tokens);
    rec.push(0, prefix.len, ServiceClass::PrefixHit, None, None);
    if let (Some(kv), true) = (&mut rec.kv, prefix.len > 0) {
        kv.push(KvSlice::Prefix {
            witness: prefix.witness,
            len: prefix.len,
        });
    }

    let tail_start = prefix.len;
    let tail = &tokens[tail_start..];
    let pins = marker_pins(&request.marker_spans(), tail_start);

    for chunk in cdc_chunk(tail, &config.chunker, &pins) {
        let p = tail_start + chunk.start;
        let end = p + chunk.len;
        let span = &tokens[p..end];

        if p < config.carveout_threshold {
            let carve_end = end.min(config.carveout_threshold);
            rec.prefill(p, carve_end - p, ServiceClass::CarveoutPrefill, Some(chunk.fingerprint));
            rec.prefill(carve_end, end - carve_end, ServiceClass::NovelPrefill, Some(chunk.fingerprint));
            continue;
        }

        if let Some(entry) = state.registry.lookup(chunk.fingerprint) {
            let delta = p as i64 - entry.p_src as i64;
            rec.push(p, chunk.len, ServiceClass::PicHit, Some(chunk.fingerprint), Some(delta));
            rotation_multiplies += chunk.len as u64 * kr_dim;
            if live {
                let m = materialize(entry, p as u64, mat_spec, config.precision);
                verify(request_index, p, span, &m.k_r, delta, config)?;
                if let Some(kv) = &mut rec.kv {
                    kv.push(KvSlice::Reused {
                        start: p,
                        len: chunk.len,
                        c_kv: m.c_kv,
                        row_offset: 0,
                        k_r: m.k_r,
                        delta,
                    });
                }
            }
            continue;
        }

        let hits = if config.s1_enabled {
            s1_probe(span, p, &state.registry, config.s1_window)
        } else {
            Vec::new()
        };
        let mut cursor = 0;
        for hit in &hits {
            rec.prefill(p + cursor, hit.offset - cursor, ServiceClass::NovelPrefill, None);
            let wp = p + hit.offset;
            rec.push(wp, hit.len, ServiceClass::S1Hit, Some(hit.fingerprint), Some(hit.delta));
            rotation_multiplies += hit.len as u64 * kr_dim;
            if live {
                let entry = state
                    .registry
                    .lookup(hit.source_chunk)
                    .expect("sub-window index points at a registered chunk");
                let k_r = rotate_rows(entry, hit.source_offset, hit.len, hit.delta, mat_spec, config.precision);
                verify(request_index, wp, &span[hit.offset..hit.offset + hit.len], &k_r, hit.delta, config)?;
                if let Some(kv) = &mut rec.kv {
                    kv.push(KvSlice::Reused {
                        start: wp,
                        len: hit.len,
                        c_kv: entry.c_kv.clone(),
                        row_offset: hit.source_offset,
                        k_r,
                        delta: hit.delta,
                    });
                }
            }
            cursor = hit.offset + hit.len;
        }
        rec.prefill(p + cursor, chunk.len - cursor, ServiceClass::NovelPrefill, Some(chunk.fingerprint));
        state
            .registry
            .insert(chunk.fingerprint, span, p as u64, &config.rotary, Some(config.s1_window));
    }

    state.tree.insert(&tokens, request_index);
    state.requests_served += 1;
    debug_assert_eq!(rec.counts.total(), tokens.len());

    Ok(ServeResult {
        request_index,
        len: tokens.len(),
        counts: rec.counts,
        events: rec.events,
        rotation_multiplies,
        kv: rec.kv,
    })
}

fn verify(request: u64, start: usize, tokens: &[Token], k_r: &[f64], delta: i64, config: &ServeConfig) -> Result<(), EngineError> {
    let fresh = fresh_kr(tokens, start as u64, &config.kv, &config.rotary);
    let error = max_row_rel_l2(k_r, &fresh, config.kv.kr_dim);
    let tolerance = config.precision.tolerance();
    if error <= tolerance {
        Ok(())
    } else {
        Err(EngineError::RotationMismatch {
            request,
            start,
            end: start + tokens.len(),
            delta,
            error,
            tolerance,
        })
    }
}

/// Per-pattern summary, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub pattern: String,
    pub model_tag: String,
    pub tprefix: f64,
    pub pic_unique: f64,
    pub s1: f64,
    pub total: f64,
    pub n_req: usize,
}

pub const AGGREGATE_CSV_HEADER: &str = "pattern,model_tag,tprefix,pic_unique,total,n_req";

impl AggregateRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{}",
            self.pattern, self.model_tag, self.tprefix, self.pic_unique, self.total, self.n_req
        )
    }
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = format!("{AGGREGATE_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Requests skipped at the head of a trace when averaging: the first request
/// meets empty caches and is 0% cached by construction.
pub const DEFAULT_WARMUP: usize = 1;

/// Means of per-request fractions over `results[warmup..]`. If nothing is
/// left after the warm-up, every result is used. `None` for an empty slice.
pub fn aggregate(results: &[ServeResult], pattern: &str, model_tag: &str, warmup: usize) -> Option<AggregateRow> {
    if results.is_empty() {
        return None;
    }
    let skip = if warmup >= results.len() { 0 } else { warmup };
    let body = &results[skip..];
    let n = body.len() as f64;
    let mean = |f: fn(&ServeResult) -> f64| body.iter().map(f).sum::<f64>() / n;
    Some(AggregateRow {
        pattern: pattern.to_string(),
        model_tag: model_tag.to_string(),
        tprefix: mean(ServeResult::tprefix),
        pic_unique: mean(ServeResult::pic_unique),
        s1: mean(ServeResult::s1_fraction),
        total: mean(ServeResult::total_cached),
        n_req: results.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TraceReport {
    pub results: Vec<ServeResult>,
    pub aggregate: Option<AggregateRow>,
}

/// Serves a whole trace in order. Live-mode KV outputs are verified during
/// serving and then dropped from the stored results.
pub fn run_trace(
    state: &mut EngineState,
    trace: &Trace,
    config: &ServeConfig,
    pattern: &str,
) -> Result<TraceReport, EngineError> {
    let mut results = Vec::with_capacity(trace.len());
    for req in &trace.requests {
        let mut r = serve(state, req, config)?;
        r.kv = None;
        results.push(r);
    }
    let aggregate = aggregate(&results, pattern, "synthetic", DEFAULT_WARMUP);
    Ok(TraceReport { results, aggregate })
}

/// Fresh state, whole trace.
pub fn replay(trace: &Trace, config: &ServeConfig, pattern: &str) -> Result<TraceReport, EngineError> {
    let mut state = EngineState::new(config);
    run_trace(&mut state, trace, config, pattern)
}

#[derive(Serialize)]
struct EventLogLine<'a> {
    request: u64,
    session_id: &'a str,
    turn: u64,
    len: usize,
    counts: &'a ClassCounts,
    events: &'a [SegmentEvent],
}

/// One JSON line per request.
pub fn event_log_jsonl(trace: &Trace, results: &[ServeResult]) -> String {
    let mut out = String::new();
    for (req, r) in trace.requests.iter().zip(results) {
        let line = EventLogLine {
            request: r.request_index,
            session_id: &req.session_id,
            turn: req.turn_index,
            len: r.len,
            counts: &r.counts,
            events: &r.events,
        };
        out.push_str(&serde_json::to_string(&line).expect("event log serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::canonical_marker;
    use crate::model::{Segment, SegmentKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<Token> {
        (0..n).map(|_| rng.random()).collect()
    }

    fn req(i: u64, segs: Vec<Segment>) -> Request {
        Request::new(format!("s{i}"), 0, segs)
    }

    fn body(t: Vec<Token>) -> Segment {
        Segment::new(SegmentKind::Body, t)
    }

    fn check_closure(r: &ServeResult) {
        assert_eq!(r.counts.total(), r.len);
        let mut pos = 0;
        for e in &r.events {
            assert_eq!(e.start, pos);
            pos += e.len;
            if matches!(e.class, ServiceClass::PicHit | ServiceClass::S1Hit) {
                assert!(e.start >= 32);
            }
        }
        assert_eq!(pos, r.len);
    }

    #[test]
    fn cold_request_carves_out_and_prefills() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = ServeConfig::default();
        let mut state = EngineState::new(&config);
        let r = serve(&mut state, &req(0, vec![body(random(&mut rng, 500))]), &config).unwrap();
        assert_eq!(r.counts.prefix_hit, 0);
        assert_eq!(r.counts.pic_hit, 0);
        assert_eq!(r.counts.carveout_prefill, 32);
        assert_eq!(r.counts.novel_prefill, 468);
        check_closure(&r);
    }

    #[test]
    fn replay_is_full_prefix_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = ServeConfig::default();
        let mut state = EngineState::new(&config);
        let q = req(0, vec![body(random(&mut rng, 700))]);
        serve(&mut state, &q, &config).unwrap();
        let r = serve(&mut state, &q, &config).unwrap();
        assert_eq!(r.tprefix(), 1.0);
        assert_eq!(r.events.len(), 1);
    }

    #[test]
    fn empty_request_is_rejected() {
        let config = ServeConfig::default();
        let mut state = EngineState::new(&config);
        assert_eq!(
            serve(&mut state, &req(0, vec![]), &config).unwrap_err(),
            EngineError::EmptyRequest { request: 0 }
        );
    }

    #[test]
    fn shifted_shared_body_is_reused_with_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shared = random(&mut rng, 2500);
        let config = ServeConfig::live();
        let mut state = EngineState::new(&config);
        let a = req(0, vec![body(random(&mut rng, 50)), Segment::marker(), body(shared.clone())]);
        let b = req(1, vec![body(random(&mut rng, 80)), Segment::marker(), body(shared)]);
        serve(&mut state, &a, &config).unwrap();
        let r = serve(&mut state, &b, &config).unwrap();
        check_closure(&r);
        assert!(r.pic_unique() >= 0.9, "{}", r.pic_unique());
        assert!(r.tprefix() <= 0.05);
        let deltas: Vec<i64> = r.events.iter().filter_map(|e| e.delta).collect();
        assert!(deltas.iter().all(|&d| d == 30), "{deltas:?}");
        assert_eq!(r.rotation_multiplies, r.counts.pic_hit as u64 * 64);
        let kv = r.kv.as_ref().unwrap();
        let reused: usize = kv
            .iter()
            .map(|s| match s {
                KvSlice::Reused { len, .. } => *len,
                _ => 0,
            })
            .sum();
        assert_eq!(reused, r.counts.pic_hit);
    }

    #[test]
    fn marker_is_its_own_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = ServeConfig::default();
        let mut state = EngineState::new(&config);
        let q = req(0, vec![body(random(&mut rng, 90)), Segment::marker(), body(random(&mut rng, 300))]);
        let r = serve(&mut state, &q, &config).unwrap();
        let marker_fp = crate::chunker::fingerprint(canonical_marker());
        assert!(r
            .events
            .iter()
            .any(|e| e.start == 90 && e.len == 64 && e.fingerprint == Some(marker_fp)));
    }

    #[test]
    fn live_tripwire_fires_on_wrong_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shared = random(&mut rng, 1500);
        let config = ServeConfig {
            rotary: RotarySpec::with_theta(3.2e7),
            materialize_rotary: Some(RotarySpec::with_theta(1e4)),
            ..ServeConfig::live()
        };
        let mut state = EngineState::new(&config);
        let a = req(0, vec![body(random(&mut rng, 40)), Segment::marker(), body(shared.clone())]);
        let b = req(1, vec![body(random(&mut rng, 340)), Segment::marker(), body(shared.clone())]);
        serve(&mut state, &a, &config).unwrap();
        match serve(&mut state, &b, &config) {
            Err(EngineError::RotationMismatch { delta, error, .. }) => {
                assert_eq!(delta, 300);
                assert!(error > 0.5);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }

        // Observer mode does not rotate, so it does not notice.
        let observer = ServeConfig {
            mode: Mode::Observer,
            ..config
        };
        let mut state = EngineState::new(&observer);
        serve(&mut state, &a, &observer).unwrap();
        assert!(serve(&mut state, &b, &observer).is_ok());
    }

    #[test]
    fn bf16_live_mode_passes_verification() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shared = random(&mut rng, 2000);
        let config = ServeConfig {
            precision: Precision::Bf16e,
            ..ServeConfig::live()
        };
        let mut state = EngineState::new(&config);
        for i in 0..4 {
            let q = req(i, vec![body(random(&mut rng, 40 + 300 * i as usize)), Segment::marker(), body(shared.clone())]);
            let r = serve(&mut state, &q, &config).unwrap();
            check_closure(&r);
        }
    }

    #[test]
    fn s1_probe_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = ServeConfig::default();
        let mut reg = Registry::new(config.kv.clone(), Precision::F64);
        let short = random(&mut rng, 100);
        assert!(s1_probe(&short, 500, &reg, 128).is_empty());

        // A chunk whose middle window was registered at another offset.
        let src = random(&mut rng, 384);
        reg.insert(crate::chunker::fingerprint(&src), &src, 1000, &config.rotary, Some(128));
        let mut probe = random(&mut rng, 128);
        probe.extend_from_slice(&src[128..256]);
        probe.extend(random(&mut rng, 128));
        let hits = s1_probe(&probe, 4000, &reg, 128);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].offset, 128);
        assert_eq!(hits[0].source_offset, 128);
        assert_eq!(hits[0].delta, (4000 + 128) - (1000 + 128));

        let novel = random(&mut rng, 512);
        assert!(s1_probe(&novel, 64, &reg, 128).is_empty());
    }

    #[test]
    fn s1_recovers_windows_inside_a_missed_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let config = ServeConfig {
            s1_enabled: true,
            chunker: ChunkerParams {
                mask_exponent: 20,
                ..ChunkerParams::default()
            },
            ..ServeConfig::live()
        };
        let mut state = EngineState::new(&config);
        let shared = random(&mut rng, 1024);
        // Chunks clamp at 512 from the marker; request b edits the last token
        // of each clamped chunk so every chunk misses but windows still hit.
        let a = req(0, vec![body(random(&mut rng, 64)), Segment::marker(), body(shared.clone())]);
        let mut edited = shared.clone();
        edited[511] ^= 1;
        edited[1023] ^= 1;
        let b = req(1, vec![body(random(&mut rng, 96)), Segment::marker(), body(edited)]);
        serve(&mut state, &a, &config).unwrap();
        let r = serve(&mut state, &b, &config).unwrap();
        check_closure(&r);
        assert_eq!(r.counts.pic_hit, 64); // the marker
        assert_eq!(r.counts.s1_hit, 6 * 128);
        assert!(r.total_cached() > r.tprefix() + r.pic_unique());
    }

    #[test]
    fn observer_and_live_accounting_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shared = random(&mut rng, 1200);
        let trace = Trace::new(
            (0..6)
                .map(|i| req(i, vec![body(random(&mut rng, 33 + 17 * i as usize)), Segment::marker(), body(shared.clone())]))
                .collect(),
        );
        let obs = replay(&trace, &ServeConfig::default(), "t").unwrap();
        let live = replay(&trace, &ServeConfig::live(), "t").unwrap();
        assert_eq!(
            aggregate_csv(&[obs.aggregate.clone().unwrap()]),
            aggregate_csv(&[live.aggregate.clone().unwrap()])
        );
        for (a, b) in obs.results.iter().zip(&live.results) {
            assert_eq!(a.counts, b.counts);
            assert_eq!(a.events, b.events);
        }
        assert_eq!(event_log_jsonl(&trace, &obs.results), event_log_jsonl(&trace, &live.results));
    }

    #[test]
    fn empty_trace_gives_empty_aggregate() {
        let r = replay(&Trace::default(), &ServeConfig::default(), "none").unwrap();
        assert!(r.results.is_empty());
        assert!(r.aggregate.is_none());
    }

    #[test]
    fn aggregate_skips_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = req(0, vec![body(random(&mut rng, 300))]);
        let trace = Trace::new(vec![q.clone(), q.clone(), q]);
        let rep = replay(&trace, &ServeConfig::default(), "p").unwrap();
        let row = rep.aggregate.unwrap();
        assert_eq!(row.tprefix, 1.0);
        assert_eq!(row.n_req, 3);
        assert_eq!(row.csv_line(), "p,synthetic,1.000000,0.000000,1.000000,3");
        let all = aggregate(&rep.results, "p", "m", 0).unwrap();
        assert!((all.tprefix - 2.0 / 3.0).abs() < 1e-12);
        let single = aggregate(&rep.results[..1], "p", "m", 1).unwrap();
        assert_eq!(single.tprefix, 0.0);
    }

    #[test]
    fn event_log_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trace = Trace::new(vec![req(0, vec![body(random(&mut rng, 40))])]);
        let rep = replay(&trace, &ServeConfig::default(), "p").unwrap();
        let log = event_log_jsonl(&trace, &rep.results);
        let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(v["len"], 40);
        assert_eq!(v["events"][0]["class"], "carveout_prefill");
        assert_eq!(v["events"][1]["class"], "novel_prefill");
        assert!(v["events"][0]["fingerprint"].is_string());
    }

    #[test]
    fn carveout_threshold_override() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let config = ServeConfig {
            carveout_threshold: 0,
            ..ServeConfig::default()
        };
        let mut state = EngineState::new(&config);
        let r = serve(&mut state, &req(0, vec![body(random(&mut rng, 100))]), &config).unwrap();
        assert_eq!(r.counts.carveout_prefill, 0);
        assert_eq!(r.counts.novel_prefill, 100);
    }
}
