//! Threshold-free ROC over synthetic key vectors: within-block pairs at
//! different positions are positives, cross-block pairs are negatives, scored
//! by cosine similarity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::rotary::RotarySpec;

pub const INVARIANT_DIM: usize = 512;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum RocError {
    #[error("need at least 2 blocks, got {0}")]
    TooFewBlocks(usize),
    #[error("need at least 2 positions, got {0}")]
    TooFewPositions(usize),
    #[error("position {position} is outside the {window}-token window")]
    PositionOutOfWindow { position: u64, window: u64 },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error("AUC needs both classes (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("unknown component `{0}` (expected invariant or rotated)")]
    UnknownComponent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Position-free latent vectors.
    Invariant,
    /// Rotary key vectors, rotated to their placement position.
    Rotated,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Invariant => "invariant",
            Component::Rotated => "rotated",
        })
    }
}

impl FromStr for Component {
    type Err = RocError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "invariant" => Ok(Component::Invariant),
            "rotated" => Ok(Component::Rotated),
            other => Err(RocError::UnknownComponent(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RocConfig {
    pub n_blocks: usize,
    pub positions: Vec<u64>,
    pub window: u64,
    pub noise_sigma: f64,
    pub component: Component,
    pub spec: RotarySpec,
    pub seed: u64,
}

impl RocConfig {
    pub fn new(component: Component, noise_sigma: f64, seed: u64) -> Self {
        Self {
            n_blocks: 500,
            positions: vec![0, 512, 1024, 2048, 3584],
            window: 4096,
            noise_sigma,
            component,
            spec: RotarySpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), RocError> {
        if self.n_blocks < 2 {
            return Err(RocError::TooFewBlocks(self.n_blocks));
        }
        if self.positions.len() < 2 {
            return Err(RocError::TooFewPositions(self.positions.len()));
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= self.window) {
            return Err(RocError::PositionOutOfWindow {
                position: p,
                window: self.window,
            });
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(RocError::BadNoise(self.noise_sigma));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.component {
            Component::Invariant => INVARIANT_DIM,
            Component::Rotated => self.spec.dim(),
        }
    }
}

/// One scored pair: `(block, position index)` for each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub positive: bool,
}

#[derive(Debug, Clone)]
pub struct RocSamples {
    /// `placements[block][position index]`.
    pub placements: Vec<Vec<Vec<f64>>>,
    pub pairs: Vec<Pair>,
}

impl RocSamples {
    pub fn vector(&self, at: (usize, usize)) -> &[f64] {
        &self.placements[at.0][at.1]
    }
}

fn base_vector(config: &RocConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match config.component {
        Component::Invariant => (0..INVARIANT_DIM).map(|_| rng.sample(StandardNormal)).collect(),
        Component::Rotated => {
            // Unit energy per frequency pair, random phase.
            let half = config.spec.dim() / 2;
            let mut v = vec![0.0; 2 * half];
            for j in 0..half {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                v[j] = phi.cos();
                v[j + half] = phi.sin();
            }
            v
        }
    }
}

/// Builds every placement vector and the labeled pair list. Block `b` draws
/// from its own stream, so blocks are independent of generation order.
pub fn gen_pairs(config: &RocConfig) -> Result<RocSamples, RocError> {
    config.validate()?;
    let dim = config.dim();
    let placements: Vec<Vec<Vec<f64>>> = (0..config.n_blocks)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(b as u64 + 1);
            let base = base_vector(config, &mut rng);
            config
                .positions
                .iter()
                .map(|&p| {
                    let mut v = match config.component {
                        Component::Invariant => base.clone(),
                        Component::Rotated => {
                            let mut out = vec![0.0; dim];
                            config.spec.rotate_into(&base, p as i64, &mut out);
                            out
                        }
                    };
                    if config.noise_sigma > 0.0 {
                        for x in &mut v {
                            *x += config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    v
                })
                .collect()
        })
        .collect();

    let n_pos = config.positions.len();
    let mut pairs = Vec::new();
    for b in 0..config.n_blocks {
        for i in 0..n_pos {
            for j in i + 1..n_pos {
                pairs.push(Pair {
                    a: (b, i),
                    b: (b, j),
                    positive: true,
                });
            }
        }
    }
    let positives = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..positives {
        let b1 = rng.random_range(0..config.n_blocks);
        let mut b2 = rng.random_range(0..config.n_blocks - 1);
        if b2 >= b1 {
            b2 += 1;
        }
        pairs.push(Pair {
            a: (b1, rng.random_range(0..n_pos)),
            b: (b2, rng.random_range(0..n_pos)),
            positive: false,
        });
    }
    Ok(RocSamples { placements, pairs })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mann–Whitney AUC: P(score_pos > score_neg) + ½·P(tie), via mid-ranks.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64, RocError> {
    let positives = scores.iter().filter(|s| s.1).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(RocError::SingleClass { positives, negatives });
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `HISTOGRAM_BINS + 1` edges over [-1, 1].
    pub edges: Vec<f64>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl Histogram {
    fn new(scores: &[(f64, bool)]) -> Self {
        let width = 2.0 / HISTOGRAM_BINS as f64;
        let mut positive = vec![0; HISTOGRAM_BINS];
        let mut negative = vec![0; HISTOGRAM_BINS];
        for &(s, label) in scores {
            let bin = (((s + 1.0) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            if label {
                positive[bin] += 1;
            } else {
                negative[bin] += 1;
            }
        }
        Self {
            edges: (0..=HISTOGRAM_BINS).map(|i| -1.0 + i as f64 * width).collect(),
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocResult {
    pub component: Component,
    pub noise_sigma: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub histogram: Histogram,
}

pub fn score_pairs(samples: &RocSamples) -> Vec<(f64, bool)> {
    samples
        .pairs
        .iter()
        .map(|p| (cosine(samples.vector(p.a), samples.vector(p.b)), p.positive))
        .collect()
}

pub fn run_roc(config: &RocConfig) -> Result<RocResult, RocError> {
    let samples = gen_pairs(config)?;
    let scores = score_pairs(&samples);
    let n_pos = scores.iter().filter(|s| s.1).count();
    Ok(RocResult {
        component: config.component,
        noise_sigma: config.noise_sigma,
        auc: auc(&scores)?,
        n_pos,
        n_neg: scores.len() - n_pos,
        histogram: Histogram::new(&scores),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
        let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    fn small(component: Component, noise: f64) -> RocConfig {
        RocConfig {
            n_blocks: 60,
            ..RocConfig::new(component, noise, 3)
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]).unwrap(), 1.0);
        assert_eq!(auc(&[(0.5, true), (0.5, false), (0.5, true), (0.5, false)]).unwrap(), 0.5);
        assert_eq!(auc(&[(0.9, true), (0.4, true), (0.6, false), (0.1, false)]).unwrap(), 0.75);
        assert_eq!(
            auc(&[(0.9, true), (0.4, true)]).unwrap_err(),
            RocError::SingleClass {
                positives: 2,
                negatives: 0
            }
        );
        assert!(auc(&[]).is_err());
    }

    #[test]
    fn pair_counts() {
        let c = RocConfig {
            n_blocks: 2,
            ..RocConfig::new(Component::Invariant, 0.1, 1)
        };
        let s = gen_pairs(&c).unwrap();
        assert_eq!(s.pairs.iter().filter(|p| p.positive).count(), 20);
        assert_eq!(s.pairs.iter().filter(|p| !p.positive).count(), 20);
        assert!(s.pairs.iter().filter(|p| !p.positive).all(|p| p.a.0 != p.b.0));
    }

    #[test]
    fn config_validation() {
        let base = RocConfig::new(Component::Invariant, 0.1, 1);
        assert_eq!(
            RocConfig { n_blocks: 1, ..base.clone() }.validate().unwrap_err(),
            RocError::TooFewBlocks(1)
        );
        assert_eq!(
            RocConfig {
                positions: vec![0, 4096],
                ..base.clone()
            }
            .validate()
            .unwrap_err(),
            RocError::PositionOutOfWindow {
                position: 4096,
                window: 4096
            }
        );
        assert!(RocConfig { noise_sigma: -1.0, ..base }.validate().is_err());
        assert!("bogus".parse::<Component>().is_err());
    }

    #[test]
    fn noiseless_invariant_positives_are_identical() {
        let s = gen_pairs(&small(Component::Invariant, 0.0)).unwrap();
        for (score, label) in score_pairs(&s) {
            if label {
                assert!((score - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_rotated_cosine_matches_closed_form() {
        let c = small(Component::Rotated, 0.0);
        let s = gen_pairs(&c).unwrap();
        let inv = c.spec.inv_freq();
        for p in s.pairs.iter().filter(|p| p.positive) {
            let delta = c.positions[p.b.1] as f64 - c.positions[p.a.1] as f64;
            let want = inv.iter().map(|w| (delta * w).cos()).sum::<f64>() / inv.len() as f64;
            let got = cosine(s.vector(p.a), s.vector(p.b));
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn invariant_beats_rotated() {
        for noise in [0.05, 0.1, 0.3] {
            let inv = run_roc(&small(Component::Invariant, noise)).unwrap().auc;
            let rot = run_roc(&small(Component::Rotated, noise)).unwrap().auc;
            assert!(inv > rot, "noise {noise}: {inv} vs {rot}");
        }
    }

    #[test]
    fn huge_noise_washes_out() {
        let r = run_roc(&small(Component::Invariant, 1e4)).unwrap();
        assert!((r.auc - 0.5).abs() <= 0.05, "{}", r.auc);
    }

    #[test]
    fn histogram_counts_every_score() {
        let r = run_roc(&small(Component::Rotated, 0.1)).unwrap();
        assert_eq!(r.histogram.positive.iter().sum::<usize>(), r.n_pos);
        assert_eq!(r.histogram.negative.iter().sum::<usize>(), r.n_neg);
        assert_eq!(r.histogram.edges.len(), HISTOGRAM_BINS + 1);
    }

    #[test]
    fn deterministic() {
        let a = run_roc(&small(Component::Rotated, 0.1)).unwrap();
        let b = run_roc(&small(Component::Rotated, 0.1)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn matches_brute_force(scores in prop::collection::vec((0u8..10, any::<bool>()), 2..100)) {
            let scores: Vec<(f64, bool)> = scores.into_iter().map(|(s, l)| (s as f64 / 10.0, l)).collect();
            let pos = scores.iter().filter(|s| s.1).count();
            prop_assume!(pos > 0 && pos < scores.len());
            let a = auc(&scores).unwrap();
            prop_assert!((a - brute_auc(&scores)).abs() < 1e-12);
            let swapped: Vec<(f64, bool)> = scores.iter().map(|&(s, l)| (s, !l)).collect();
            prop_assert!((auc(&swapped).unwrap() - (1.0 - a)).abs() < 1e-12);
            let mapped: Vec<(f64, bool)> = scores.iter().map(|&(s, l)| ((3.0 * s).exp() - 7.0, l)).collect();
            prop_assert!((auc(&mapped).unwrap() - a).abs() < 1e-12);
        }
    }
}
