//! Content-defined chunking over token streams.
//!
//! The rolling state is a Gear hash, `h = (h << 1) + gear[token mod 65536]`,
//! reset to zero at every emitted boundary. A boundary follows token `t` when
//! the chunk has reached `min_size` and the low `k` bits of `h` are zero, when
//! the chunk reaches `max_size`, or when `t` is a pinned offset (the final
//! token of a marker). Because the state restarts at each boundary, the
//! partition of any stretch that begins at a boundary is a pure function of
//! its content.
//!
//! Chunks are fingerprinted with XXH64 (seed 0) over the little-endian bytes
//! of their token IDs.

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::model::Token;
use crate::xxh64::xxh64;

pub const GEAR_TABLE_LEN: usize = 1 << 16;
pub const DEFAULT_GEAR_SEED: u64 = 0x4952_4D49_4E53_554C;
pub const MARKER_LEN: usize = 64;

/// The splitmix64 generator. Output `i` (0-based) is the `i+1`-th call to
/// [`SplitMix64::next_u64`] after seeding.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Clone)]
pub struct GearTable {
    entries: Box<[u64]>,
}

impl GearTable {
    #[inline]
    pub fn get(&self, token: Token) -> u64 {
        self.entries[(token as usize) & (GEAR_TABLE_LEN - 1)]
    }

    pub fn entries(&self) -> &[u64] {
        &self.entries
    }
}

impl fmt::Debug for GearTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GearTable")
            .field("entry0", &format_args!("{:#018x}", self.entries[0]))
            .finish()
    }
}

/// `entry[i]` is the `i`-th splitmix64 output for `seed`.
pub fn build_gear_table(seed: u64) -> GearTable {
    let mut rng = SplitMix64::new(seed);
    let entries: Vec<u64> = (0..GEAR_TABLE_LEN).map(|_| rng.next_u64()).collect();
    GearTable {
        entries: entries.into_boxed_slice(),
    }
}

/// The table for [`DEFAULT_GEAR_SEED`], built once.
pub fn default_gear_table() -> &'static GearTable {
    static TABLE: OnceLock<GearTable> = OnceLock::new();
    TABLE.get_or_init(|| build_gear_table(DEFAULT_GEAR_SEED))
}

/// The canonical 64-token boundary marker: splitmix64 outputs 65536..65600
/// of the default gear seed (the stream right after the gear table), high
/// 32 bits of each.
pub fn canonical_marker() -> &'static [Token] {
    static MARKER: OnceLock<Vec<Token>> = OnceLock::new();
    MARKER.get_or_init(|| {
        let mut rng = SplitMix64::new(DEFAULT_GEAR_SEED);
        for _ in 0..GEAR_TABLE_LEN {
            rng.next_u64();
        }
        (0..MARKER_LEN).map(|_| (rng.next_u64() >> 32) as Token).collect()
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkerError {
    #[error("mask exponent {0} outside [1, 20]")]
    MaskExponent(u32),
    #[error("need 1 <= min_size < max_size, got min {min} max {max}")]
    SizeBounds { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkerParams {
    pub mask_exponent: u32,
    pub min_size: usize,
    pub max_size: usize,
    pub gear_seed: u64,
    pub marker_pinned: bool,
}

impl Default for ChunkerParams {
    fn default() -> Self {
        Self {
            mask_exponent: 7,
            min_size: 32,
            max_size: 512,
            gear_seed: DEFAULT_GEAR_SEED,
            marker_pinned: true,
        }
    }
}

impl ChunkerParams {
    pub fn with_mask_exponent(mut self, k: u32) -> Self {
        self.mask_exponent = k;
        self
    }

    pub fn validate(&self) -> Result<(), ChunkerError> {
        if !(1..=20).contains(&self.mask_exponent) {
            return Err(ChunkerError::MaskExponent(self.mask_exponent));
        }
        if self.min_size == 0 || self.min_size >= self.max_size {
            return Err(ChunkerError::SizeBounds {
                min: self.min_size,
                max: self.max_size,
            });
        }
        Ok(())
    }

    #[inline]
    fn mask(&self) -> u64 {
        (1u64 << self.mask_exponent) - 1
    }
}

/// Why a chunk ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Forced {
    /// The rolling-hash mask test fired.
    None,
    MaxClamp,
    Marker,
    StreamEnd,
}

impl Forced {
    pub fn as_str(self) -> &'static str {
        match self {
            Forced::None => "none",
            Forced::MaxClamp => "max_clamp",
            Forced::Marker => "marker",
            Forced::StreamEnd => "stream_end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub start: usize,
    pub len: usize,
    pub fingerprint: u64,
    pub forced: Forced,
}

impl Chunk {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// XXH64 (seed 0) over the little-endian 4-byte encoding of each token.
pub fn fingerprint(tokens: &[Token]) -> u64 {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    xxh64(&bytes, 0)
}

/// Content-defined chunking. `pins` are offsets after which a boundary is
/// forced; they are honored only when `params.marker_pinned` is set.
///
/// Chunk starts are relative to `tokens`.
pub fn cdc_chunk(tokens: &[Token], params: &ChunkerParams, pins: &[usize]) -> Vec<Chunk> {
    let owned;
    let table = if params.gear_seed == DEFAULT_GEAR_SEED {
        default_gear_table()
    } else {
        owned = build_gear_table(params.gear_seed);
        &owned
    };
    cdc_chunk_with_table(tokens, params, pins, table)
}

pub fn cdc_chunk_with_table(
    tokens: &[Token],
    params: &ChunkerParams,
    pins: &[usize],
    table: &GearTable,
) -> Vec<Chunk> {
    let mut pinned = vec![false; tokens.len()];
    if params.marker_pinned {
        for &p in pins {
            if p < tokens.len() {
                pinned[p] = true;
            }
        }
    }

    let mask = params.mask();
    let mut chunks = Vec::new();
    let mut start = 0usize;
    let mut h = 0u64;
    for (t, &tok) in tokens.iter().enumerate() {
        h = (h << 1).wrapping_add(table.get(tok));
        let len = t + 1 - start;
        let forced = if pinned[t] {
            Some(Forced::Marker)
        } else if len >= params.max_size {
            Some(Forced::MaxClamp)
        } else if len >= params.min_size && h & mask == 0 {
            Some(Forced::None)
        } else {
            None
        };
        if let Some(forced) = forced {
            chunks.push(Chunk {
                start,
                len,
                fingerprint: fingerprint(&tokens[start..=t]),
                forced,
            });
            start = t + 1;
            h = 0;
        }
    }
    if start < tokens.len() {
        chunks.push(Chunk {
            start,
            len: tokens.len() - start,
            fingerprint: fingerprint(&tokens[start..]),
            forced: Forced::StreamEnd,
        });
    }
    chunks
}

/// Offset-aligned blocks of `block` tokens; the last partial block is marked
/// `StreamEnd`.
pub fn fixed_block_chunk(tokens: &[Token], block: usize) -> Vec<Chunk> {
    assert!(block >= 1, "block size must be positive");
    tokens
        .chunks(block)
        .enumerate()
        .map(|(i, span)| Chunk {
            start: i * block,
            len: span.len(),
            fingerprint: fingerprint(span),
            forced: if span.len() < block {
                Forced::StreamEnd
            } else {
                Forced::None
            },
        })
        .collect()
}

/// One fingerprint per window start `0..=len-window`.
pub fn sliding_fingerprints(tokens: &[Token], window: usize) -> Vec<(usize, u64)> {
    assert!(window >= 1, "window must be positive");
    tokens
        .windows(window)
        .enumerate()
        .map(|(off, w)| (off, fingerprint(w)))
        .collect()
}

/// CSV dump: `start,len,fingerprint_hex,forced`.
pub fn chunks_to_csv(chunks: &[Chunk]) -> String {
    let mut out = String::from("start,len,fingerprint_hex,forced\n");
    for c in chunks {
        out.push_str(&format!(
            "{},{},{:016x},{}\n",
            c.start,
            c.len,
            c.fingerprint,
            c.forced.as_str()
        ));
    }
    out
}
