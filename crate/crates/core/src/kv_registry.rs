//! Content-hash KV registry and split latent pool.
//!
//! A synthetic KV oracle stands in for model prefill: every token maps to a
//! fixed unit-norm latent row (`c_kv`) and a fixed pre-rotation key row
//! (`kr_raw`), both independent of position. Prefill at position `p` stores
//! `R(p) kr_raw` as the registry's `kr_base`, exactly as a serving stack's pool
//! would hold it, so reuse at another position must go through the delta
//! rotation to be correct.
//!
//! Latent rows live in a [`SplitPool`] keyed by chunk fingerprint, one copy
//! per distinct content no matter how many requests reference it.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chunker::{fingerprint, SplitMix64};
use crate::model::Token;
use crate::rotary::{rel_l2, Precision, RotarySpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticKvParams {
    pub seed: u64,
    pub ckv_dim: usize,
    pub kr_dim: usize,
}

impl Default for SyntheticKvParams {
    fn default() -> Self {
        Self {
            seed: 0,
            ckv_dim: 512,
            kr_dim: 64,
        }
    }
}

fn token_rng(token: Token, seed: u64, stream: u64) -> ChaCha8Rng {
    let mut mix = SplitMix64::new(seed ^ (token as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    let mut rng = ChaCha8Rng::seed_from_u64(mix.next_u64());
    rng.set_stream(stream);
    rng
}

fn unit_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    row.iter_mut().for_each(|x| *x /= norm);
    row
}

/// The position-free latent row for `token`.
pub fn synth_ckv(token: Token, params: &SyntheticKvParams) -> Vec<f64> {
    unit_row(&mut token_rng(token, params.seed, 0), params.ckv_dim)
}

/// The pre-rotation key row for `token`.
pub fn synth_kr_raw(token: Token, params: &SyntheticKvParams) -> Vec<f64> {
    unit_row(&mut token_rng(token, params.seed, 1), params.kr_dim)
}

/// `(c_kv row, kr_raw row)` for a token. The index within the chunk is
/// accepted for interface symmetry with a real prefill but does not enter the
/// rows: both are functions of `(token, seed)` only.
pub fn synth_kv(token: Token, _index_in_chunk: usize, params: &SyntheticKvParams) -> (Vec<f64>, Vec<f64>) {
    (synth_ckv(token, params), synth_kr_raw(token, params))
}

/// `k_r` rows a fresh prefill would produce for `tokens` placed at `start`.
pub fn fresh_kr(tokens: &[Token], start: u64, params: &SyntheticKvParams, spec: &RotarySpec) -> Vec<f64> {
    let dim = params.kr_dim;
    let mut out = vec![0.0; tokens.len() * dim];
    for (i, &tok) in tokens.iter().enumerate() {
        let raw = synth_kr_raw(tok, params);
        spec.rotate_into(&raw, (start + i as u64) as i64, &mut out[i * dim..(i + 1) * dim]);
    }
    out
}

/// Shared latent store plus the current request's materialized `k_r` buffer.
#[derive(Debug, Clone, Default)]
pub struct SplitPool {
    ckv: HashMap<u64, Arc<[f64]>>,
    request_kr: Vec<f64>,
}

impl SplitPool {
    /// Returns the shared latent rows for `fp`, creating them on first use.
    fn intern(&mut self, fp: u64, make: impl FnOnce() -> Vec<f64>) -> Arc<[f64]> {
        self.ckv
            .entry(fp)
            .or_insert_with(|| make().into())
            .clone()
    }

    pub fn contains(&self, fp: u64) -> bool {
        self.ckv.contains_key(&fp)
    }

    pub fn distinct_contents(&self) -> usize {
        self.ckv.len()
    }

    /// Bytes held by the shared latent store (f64 storage).
    pub fn ckv_bytes(&self) -> usize {
        self.ckv.values().map(|v| v.len() * 8).sum()
    }

    pub fn begin_request(&mut self) {
        self.request_kr.clear();
    }

    pub fn request_kr_bytes(&self) -> usize {
        self.request_kr.len() * 8
    }
}

#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub fingerprint: u64,
    pub len: usize,
    pub p_src: u64,
    pub insert_epoch: u64,
    /// `len x ckv_dim`, row-major, shared with the pool.
    pub c_kv: Arc<[f64]>,
    /// `len x kr_dim`, row `i` is `R(p_src + i) kr_raw`, stored at the
    /// registry's precision.
    pub kr_base: Vec<f64>,
}

/// Where a 128-token sub-window lives inside a registered chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubWindowRef {
    pub chunk: u64,
    pub offset: usize,
    pub len: usize,
    /// Absolute position of the window's first token when inserted.
    pub p_src: u64,
}

/// A registry hit re-targeted to a destination position.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub c_kv: Arc<[f64]>,
    pub k_r: Vec<f64>,
    pub delta: i64,
    /// Multiplies spent on the rotation, `rows x kr_dim`.
    pub multiplies: u64,
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: HashMap<u64, RegistryEntry>,
    subwindows: HashMap<u64, SubWindowRef>,
    pool: SplitPool,
    epoch: u64,
    kv: SyntheticKvParams,
    storage: Precision,
}

impl Registry {
    pub fn new(kv: SyntheticKvParams, storage: Precision) -> Self {
        Self {
            entries: HashMap::new(),
            subwindows: HashMap::new(),
            pool: SplitPool::default(),
            epoch: 0,
            kv,
            storage,
        }
    }

    pub fn kv_params(&self) -> &SyntheticKvParams {
        &self.kv
    }

    pub fn storage(&self) -> Precision {
        self.storage
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pool(&self) -> &SplitPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut SplitPool {
        &mut self.pool
    }

    pub fn lookup(&self, fp: u64) -> Option<&RegistryEntry> {
        self.entries.get(&fp)
    }

    pub fn lookup_subwindow(&self, fp: u64) -> Option<SubWindowRef> {
        self.subwindows.get(&fp).copied()
    }

    /// Prefills `tokens` at `p_src` and registers them under `fp`. A repeat
    /// fingerprint keeps the first entry. When `subwindow` is set, the chunk's
    /// aligned non-overlapping windows of that size are indexed too.
    pub fn insert(
        &mut self,
        fp: u64,
        tokens: &[Token],
        p_src: u64,
        spec: &RotarySpec,
        subwindow: Option<usize>,
    ) -> &RegistryEntry {
        if self.entries.contains_key(&fp) {
            return &self.entries[&fp];
        }
        let kv = self.kv.clone();
        let c_kv = self.pool.intern(fp, || {
            let mut rows = Vec::with_capacity(tokens.len() * kv.ckv_dim);
            for &tok in tokens {
                rows.extend(synth_ckv(tok, &kv));
            }
            rows
        });
        let mut kr_base = fresh_kr(tokens, p_src, &kv, spec);
        self.storage.quantize(&mut kr_base);

        if let Some(w) = subwindow {
            let mut off = 0;
            while off + w <= tokens.len() {
                self.subwindows
                    .entry(fingerprint(&tokens[off..off + w]))
                    .or_insert(SubWindowRef {
                        chunk: fp,
                        offset: off,
                        len: w,
                        p_src: p_src + off as u64,
                    });
                off += w;
            }
        }

        self.epoch += 1;
        self.entries.insert(
            fp,
            RegistryEntry {
                fingerprint: fp,
                len: tokens.len(),
                p_src,
                insert_epoch: self.epoch,
                c_kv,
                kr_base,
            },
        );
        &self.entries[&fp]
    }

    /// CSV `fingerprint_hex,p_src,chunk_len,insert_epoch`, in insertion order.
    pub fn dump_csv(&self) -> String {
        let mut rows: Vec<&RegistryEntry> = self.entries.values().collect();
        rows.sort_by_key(|e| e.insert_epoch);
        let mut out = String::from("fingerprint_hex,p_src,chunk_len,insert_epoch\n");
        for e in rows {
            out.push_str(&format!(
                "{:016x},{},{},{}\n",
                e.fingerprint, e.p_src, e.len, e.insert_epoch
            ));
        }
        out
    }
}

/// Rotates rows `[row_start, row_start + rows)` of `entry.kr_base` by
/// `delta` and rounds to `precision`.
pub fn rotate_rows(
    entry: &RegistryEntry,
    row_start: usize,
    rows: usize,
    delta: i64,
    spec: &RotarySpec,
    precision: Precision,
) -> Vec<f64> {
    let dim = spec.dim();
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        let src = &entry.kr_base[(row_start + r) * dim..(row_start + r + 1) * dim];
        spec.rotate_into(src, delta, &mut out[r * dim..(r + 1) * dim]);
    }
    precision.quantize(&mut out);
    out
}

/// Re-targets `entry` to `p_dest`: latent rows verbatim, every key row
/// rotated by the same `delta = p_dest - p_src`.
pub fn materialize(entry: &RegistryEntry, p_dest: u64, spec: &RotarySpec, precision: Precision) -> Materialized {
    let delta = p_dest as i64 - entry.p_src as i64;
    Materialized {
        c_kv: entry.c_kv.clone(),
        k_r: rotate_rows(entry, 0, entry.len, delta, spec, precision),
        delta,
        multiplies: (entry.len * spec.dim()) as u64,
    }
}

/// Reuse without position correction: the stored rows as they are.
pub fn naive_reuse(entry: &RegistryEntry, _p_dest: u64) -> (Arc<[f64]>, Vec<f64>) {
    (entry.c_kv.clone(), entry.kr_base.clone())
}

/// Worst per-row rel-L2 between two `rows x dim` key blocks.
pub fn max_row_rel_l2(got: &[f64], want: &[f64], dim: usize) -> f64 {
    got.chunks(dim)
        .zip(want.chunks(dim))
        .map(|(g, w)| rel_l2(g, w))
        .fold(0.0, f64::max)
}

impl Registry {
    /// Materializes into the pool's per-request buffer as well.
    pub fn materialize_for_request(&mut self, fp: u64, p_dest: u64, spec: &RotarySpec, precision: Precision) -> Option<Materialized> {
        let m = materialize(self.entries.get(&fp)?, p_dest, spec, precision);
        self.pool.request_kr.extend_from_slice(&m.k_r);
        Some(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spec() -> RotarySpec {
        RotarySpec::with_theta(1e4)
    }

    fn chunk(seed: u64, n: usize) -> Vec<Token> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random()).collect()
    }

    #[test]
    fn synth_rows_are_deterministic_unit_norm() {
        let p = SyntheticKvParams::default();
        let (c1, k1) = synth_kv(42, 0, &p);
        let (c2, k2) = synth_kv(42, 9, &p);
        assert_eq!(c1, c2);
        assert_eq!(k1, k2);
        assert_eq!(c1.len(), 512);
        assert_eq!(k1.len(), 64);
        for row in [&c1, &k1] {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
        let other = SyntheticKvParams { seed: 1, ..p };
        assert_ne!(synth_ckv(42, &other), c1);
    }

    #[test]
    fn distinct_tokens_are_nearly_orthogonal() {
        let p = SyntheticKvParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let a: u32 = rng.random();
            let b: u32 = rng.random();
            if a == b {
                continue;
            }
            let ra = synth_ckv(a, &p);
            let rb = synth_ckv(b, &p);
            let cos: f64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
            worst = worst.max(cos.abs());
        }
        assert!(worst <= 0.2, "{worst}");
    }

    #[test]
    fn insert_lookup_and_first_writer_wins() {
        let mut reg = Registry::new(SyntheticKvParams::default(), Precision::F64);
        let toks = chunk(1, 40);
        let fp = fingerprint(&toks);
        reg.insert(fp, &toks, 100, &spec(), None);
        assert_eq!(reg.lookup(fp).unwrap().p_src, 100);
        reg.insert(fp, &toks, 900, &spec(), None);
        let e = reg.lookup(fp).unwrap();
        assert_eq!((e.p_src, e.insert_epoch), (100, 1));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn shared_pool_holds_one_copy_per_fingerprint() {
        let mut reg = Registry::new(SyntheticKvParams::default(), Precision::F64);
        let toks = chunk(2, 50);
        let fp = fingerprint(&toks);
        // Two sessions place the same content at different positions.
        reg.insert(fp, &toks, 64, &spec(), None);
        reg.insert(fp, &toks, 4000, &spec(), None);
        assert_eq!(reg.pool().distinct_contents(), 1);
        assert_eq!(reg.pool().ckv_bytes(), 50 * 512 * 8);
        let other = chunk(3, 10);
        reg.insert(fingerprint(&other), &other, 0, &spec(), None);
        assert_eq!(reg.pool().ckv_bytes(), 60 * 512 * 8);
    }

    #[test]
    fn kr_base_is_position_entangled() {
        let p = SyntheticKvParams::default();
        let mut reg = Registry::new(p.clone(), Precision::F64);
        let toks = chunk(4, 8);
        let e = reg.insert(fingerprint(&toks), &toks, 300, &spec(), None).clone();
        for (i, &t) in toks.iter().enumerate() {
            let want = spec().rotate_f64(&synth_kr_raw(t, &p), 300 + i as i64);
            assert_eq!(&e.kr_base[i * 64..(i + 1) * 64], &want[..]);
        }
    }

    #[test]
    fn materialize_at_source_is_exact() {
        let mut reg = Registry::new(SyntheticKvParams::default(), Precision::F64);
        let toks = chunk(5, 33);
        let e = reg.insert(fingerprint(&toks), &toks, 77, &spec(), None).clone();
        let m = materialize(&e, 77, &spec(), Precision::F64);
        assert_eq!(m.k_r, e.kr_base);
        assert_eq!(m.delta, 0);
        assert!(Arc::ptr_eq(&m.c_kv, &e.c_kv));
        assert_eq!(m.multiplies, 33 * 64);
    }

    #[test]
    fn materialize_matches_fresh_prefill() {
        let p = SyntheticKvParams::default();
        for (precision, tol) in [(Precision::F64, 1e-9), (Precision::Bf16e, 5e-3)] {
            let mut reg = Registry::new(p.clone(), precision);
            let toks = chunk(6, 200);
            let e = reg.insert(fingerprint(&toks), &toks, 512, &spec(), None).clone();
            for dest in [512 + 1024, 3, 20_000] {
                let m = materialize(&e, dest, &spec(), precision);
                let fresh = fresh_kr(&toks, dest, &p, &spec());
                let err = max_row_rel_l2(&m.k_r, &fresh, 64);
                assert!(err <= tol, "{precision:?} dest {dest}: {err}");
            }
        }
    }

    #[test]
    fn naive_reuse_is_worse_and_degrades_with_shift() {
        let p = SyntheticKvParams::default();
        let mut reg = Registry::new(p.clone(), Precision::F64);
        let toks = chunk(7, 256);
        let e = reg.insert(fingerprint(&toks), &toks, 100, &spec(), None).clone();

        let (c, k) = naive_reuse(&e, 100);
        let m = materialize(&e, 100, &spec(), Precision::F64);
        assert_eq!((c.as_ref(), &k), (m.c_kv.as_ref(), &m.k_r));

        let mean_err = |dest: u64, k: &[f64]| {
            let fresh = fresh_kr(&toks, dest, &p, &spec());
            k.chunks(64)
                .zip(fresh.chunks(64))
                .map(|(a, b)| rel_l2(a, b))
                .sum::<f64>()
                / toks.len() as f64
        };
        let dest = 100 + 2048;
        let (_, naive) = naive_reuse(&e, dest);
        let pic = materialize(&e, dest, &spec(), Precision::F64);
        assert!(mean_err(dest, &naive) > mean_err(dest, &pic.k_r));

        let errs: Vec<f64> = [64u64, 256, 1024, 4096]
            .iter()
            .map(|d| mean_err(100 + d, &naive_reuse(&e, 100 + d).1))
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] >= w[0] * 0.9, "{errs:?}");
        }
        assert!(errs[3] > errs[0], "{errs:?}");
    }

    #[test]
    fn subwindows_index_aligned_windows() {
        let mut reg = Registry::new(SyntheticKvParams::default(), Precision::F64);
        let toks = chunk(8, 300);
        let fp = fingerprint(&toks);
        reg.insert(fp, &toks, 1000, &spec(), Some(128));
        let w1 = reg.lookup_subwindow(fingerprint(&toks[128..256])).unwrap();
        assert_eq!(
            w1,
            SubWindowRef {
                chunk: fp,
                offset: 128,
                len: 128,
                p_src: 1128
            }
        );
        assert!(reg.lookup_subwindow(fingerprint(&toks[256..300])).is_none());
        assert!(reg.lookup_subwindow(fingerprint(&toks[1..129])).is_none());
    }

    #[test]
    fn dump_csv_lists_entries_in_insert_order() {
        let mut reg = Registry::new(SyntheticKvParams::default(), Precision::F64);
        let a = chunk(9, 10);
        let b = chunk(10, 20);
        reg.insert(fingerprint(&a), &a, 5, &spec(), None);
        reg.insert(fingerprint(&b), &b, 50, &spec(), None);
        let csv = reg.dump_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fingerprint_hex,p_src,chunk_len,insert_epoch");
        assert_eq!(lines[1], format!("{:016x},5,10,1", fingerprint(&a)));
        assert_eq!(lines[2], format!("{:016x},50,20,2", fingerprint(&b)));
    }

    #[test]
    fn request_buffer_tracks_materialized_rows() {
        let mut reg = Registry::new(SyntheticKvParams::default(), Precision::F64);
        let a = chunk(11, 10);
        let fp = fingerprint(&a);
        reg.insert(fp, &a, 40, &spec(), None);
        reg.pool_mut().begin_request();
        reg.materialize_for_request(fp, 90, &spec(), Precision::F64).unwrap();
        assert_eq!(reg.pool().request_kr_bytes(), 10 * 64 * 8);
        reg.pool_mut().begin_request();
        assert_eq!(reg.pool().request_kr_bytes(), 0);
        assert!(reg.materialize_for_request(1, 0, &spec(), Precision::F64).is_none());
    }
}
