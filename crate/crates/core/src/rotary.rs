//! Rotary position embedding for the decoupled `k_r` key slice.
//!
//! Pairing is half-split: element `j` rotates with element `j + dim/2` by the
//! angle `p * inv_freq[j]`, where `inv_freq[j] = theta^(-2j/dim)`. Because
//! rotations compose additively in angle, a key stored at `p_src` is moved to
//! `p` by rotating it once more by `delta = p - p_src`.
//!
//! All trig runs in f64. A [`Precision`] tag only controls how results are
//! rounded for storage.

use thiserror::Error;

/// The rotary bases the probes know about.
pub const CANDIDATE_THETAS: [f64; 3] = [1e4, 5e4, 3.2e7];

/// Probe positions used by [`detect_spec`].
pub const PROBE_POSITIONS: [u64; 3] = [0, 1, 1024];

/// Exclusive upper bound on simulated positions.
pub const MAX_POSITION: u64 = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum RotaryError {
    #[error("rotary dimension {0} must be even and positive")]
    OddDim(usize),
    #[error("rotary base must be positive and finite, got {0}")]
    BadTheta(f64),
    #[error("vector has {got} elements, spec expects {expected}")]
    DimMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
    /// bf16 emulated in f64 storage.
    Bf16e,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
            Precision::Bf16e => "bf16e",
        }
    }

    /// Rounds `x` in place to this precision.
    pub fn quantize(self, x: &mut [f64]) {
        match self {
            Precision::F64 => {}
            Precision::F32 => x.iter_mut().for_each(|v| *v = *v as f32 as f64),
            Precision::Bf16e => x.iter_mut().for_each(|v| *v = bf16_round(*v)),
        }
    }

    /// rel-L2 tolerance for a delta-rotated key against an f64 fresh key.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-9,
            Precision::F32 => 1e-6,
            Precision::Bf16e => 5e-3,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            "bf16" | "bf16e" => Ok(Precision::Bf16e),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotarySpec {
    theta: f64,
    dim: usize,
    inv_freq: Vec<f64>,
    attention_scaling: f64,
}

impl RotarySpec {
    pub fn new(theta: f64, dim: usize, attention_scaling: f64) -> Result<Self, RotaryError> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(RotaryError::OddDim(dim));
        }
        if !(theta.is_finite() && theta > 0.0) {
            return Err(RotaryError::BadTheta(theta));
        }
        let inv_freq = (0..dim / 2)
            .map(|j| theta.powf(-((2 * j) as f64) / dim as f64))
            .collect();
        Ok(Self {
            theta,
            dim,
            inv_freq,
            attention_scaling,
        })
    }

    /// `theta` with the default 64-dim key and unit scaling.
    pub fn with_theta(theta: f64) -> Self {
        Self::new(theta, 64, 1.0).expect("64 is even")
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inv_freq(&self) -> &[f64] {
        &self.inv_freq
    }

    pub fn attention_scaling(&self) -> f64 {
        self.attention_scaling
    }

    /// Rotates `v` by the signed position `pos` into `out`, in f64.
    pub fn rotate_into(&self, v: &[f64], pos: i64, out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        let half = self.dim / 2;
        let p = pos as f64;
        for (j, &f) in self.inv_freq.iter().enumerate() {
            let (s, c) = (p * f).sin_cos();
            let (a, b) = (v[j], v[j + half]);
            out[j] = a * c - b * s;
            out[j + half] = a * s + b * c;
        }
    }

    /// f64 rotation by a signed position.
    pub fn rotate_f64(&self, v: &[f64], pos: i64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.rotate_into(v, pos, &mut out);
        out
    }
}

impl Default for RotarySpec {
    fn default() -> Self {
        Self::with_theta(1e4)
    }
}

/// `make_spec` in the operation list; see [`RotarySpec::new`].
pub fn make_spec(theta: f64, dim: usize, scaling: f64) -> Result<RotarySpec, RotaryError> {
    RotarySpec::new(theta, dim, scaling)
}

/// A `k_r` row with its storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct KrVector {
    pub values: Vec<f64>,
    pub precision: Precision,
}

impl KrVector {
    /// Wraps `values`, rounding them to `precision`.
    pub fn new(mut values: Vec<f64>, precision: Precision) -> Self {
        precision.quantize(&mut values);
        Self { values, precision }
    }

    pub fn f64(values: Vec<f64>) -> Self {
        Self {
            values,
            precision: Precision::F64,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn check_dim(v: &KrVector, spec: &RotarySpec) -> Result<(), RotaryError> {
    if v.dim() != spec.dim() {
        return Err(RotaryError::DimMismatch {
            expected: spec.dim(),
            got: v.dim(),
        });
    }
    Ok(())
}

/// `R(p) v`, computed in f64 and rounded to `v`'s precision.
pub fn rotate(v: &KrVector, p: u64, spec: &RotarySpec) -> Result<KrVector, RotaryError> {
    debug_assert!(p < MAX_POSITION);
    delta_rotate(v, p as i64, spec)
}

/// `R(delta) v`; negative deltas rotate backwards.
pub fn delta_rotate(v: &KrVector, delta: i64, spec: &RotarySpec) -> Result<KrVector, RotaryError> {
    check_dim(v, spec)?;
    Ok(KrVector::new(spec.rotate_f64(&v.values, delta), v.precision))
}

/// Applies every delta in turn at f64 working precision and rounds once, to
/// `v`'s precision, at the end.
pub fn chained_delta_rotate(
    v: &KrVector,
    deltas: &[i64],
    spec: &RotarySpec,
) -> Result<KrVector, RotaryError> {
    check_dim(v, spec)?;
    let mut cur = v.values.clone();
    let mut next = vec![0.0; spec.dim()];
    for &d in deltas {
        spec.rotate_into(&cur, d, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(KrVector::new(cur, v.precision))
}

/// Rounds to the nearest bf16 value (8-bit exponent, 7 stored mantissa bits),
/// ties to even. Handles subnormals, overflow to infinity, and passes NaN and
/// infinities through.
pub fn bf16_round(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    // Exponent of the leading bit, clamped to the smallest normal exponent so
    // subnormals share its quantum.
    let exp = ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let exp = if exp == -1023 {
        // f64 subnormal: far below the bf16 range, quantum is 2^-133.
        -126
    } else {
        exp.max(-126)
    };
    let quantum = 2f64.powi(exp - 7);
    let r = (x / quantum).round_ties_even() * quantum;
    if r.abs() > BF16_MAX {
        f64::INFINITY.copysign(x)
    } else {
        r
    }
}

/// Largest finite bf16 value, (2 - 2^-7) * 2^127.
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

pub fn round_bf16(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| bf16_round(v)).collect()
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / ||b||`.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let denom = l2(b);
    if denom == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / denom
    }
}

/// Tolerance for [`detect_spec`].
pub const DETECT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SpecVerdict {
    pub ok: bool,
    /// Worst rel-L2 over the probe positions against the declared spec.
    pub max_error: f64,
    /// The candidate base that best explains the probe.
    pub best_fit_theta: f64,
    pub best_fit_error: f64,
}

fn probe_error<F>(spec: &RotarySpec, base: &[f64], probe: &mut F) -> f64
where
    F: FnMut(u64) -> Vec<f64>,
{
    PROBE_POSITIONS
        .iter()
        .map(|&p| {
            let mut expected = spec.rotate_f64(base, p as i64);
            expected
                .iter_mut()
                .for_each(|x| *x *= spec.attention_scaling());
            rel_l2(&probe(p), &expected)
        })
        .fold(0.0, f64::max)
}

/// Checks a system-under-test's rotation against the declared spec.
///
/// `probe(p)` must return the system's rotated copy of `base` at position
/// `p`. Position 0 is the identity for every base, so the verdict hinges on
/// positions 1 and 1024.
pub fn detect_spec<F>(declared: &RotarySpec, base: &[f64], mut probe: F) -> SpecVerdict
where
    F: FnMut(u64) -> Vec<f64>,
{
    let max_error = probe_error(declared, base, &mut probe);
    let (best_fit_theta, best_fit_error) = CANDIDATE_THETAS
        .iter()
        .map(|&theta| {
            let cand = RotarySpec::new(theta, declared.dim(), declared.attention_scaling())
                .expect("declared dim is valid");
            (theta, probe_error(&cand, base, &mut probe))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("candidate set is non-empty");
    SpecVerdict {
        ok: max_error <= DETECT_TOLERANCE,
        max_error,
        best_fit_theta,
        best_fit_error,
    }
}
