//! Scalar brute-force reference for part nearest neighbor pairing.

use bnta_core::pairing::{compute_part_distances, select_pairs, AdaptationSet};
use bnta_core::rng;
use bnta_core::{Float, Tensor};
use rand::Rng;

/// Pairs as `(i, j, part, distance)`, found by rescanning every unused pair
/// for the smallest minimum-over-stripes distance. Row-major scan order
/// with a strict comparison resolves ties to the smallest `(i, j)`.
pub fn brute_force(emb: &[Vec<Vec<Float>>], k: usize) -> Vec<(usize, usize, usize, Float)> {
    let n = emb.len();
    let h = emb[0].len();
    let dist = |i: usize, j: usize, part: usize| -> Float {
        let mut sq = 0.0;
        for c in 0..emb[i][part].len() {
            let d = emb[i][part][c] - emb[j][part][c];
            sq += d * d;
        }
        sq.sqrt()
    };
    let mut used = vec![false; n];
    let mut out = Vec::new();
    while out.len() < k {
        let mut best: Option<(usize, usize, usize, Float)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if used[i] || used[j] {
                    continue;
                }
                let mut part = 0;
                let mut d = dist(i, j, 0);
                for p in 1..h {
                    let dp = dist(i, j, p);
                    if dp < d {
                        d = dp;
                        part = p;
                    }
                }
                if best.is_none_or(|b| d < b.3) {
                    best = Some((i, j, part, d));
                }
            }
        }
        let Some(b) = best else { break };
        used[b.0] = true;
        used[b.1] = true;
        out.push(b);
    }
    out
}

pub struct OracleInstance {
    pub nested: Vec<Vec<Vec<Float>>>,
    pub tensor: Tensor,
    pub k: usize,
}

/// Random instance with `N <= 64`, `H <= 6`. Every third instance uses a
/// coarse integer grid so equal distances occur.
pub fn sample(seed: u64) -> OracleInstance {
    let mut r = rng::substream(seed, "pairing-oracle", 0);
    let n = r.random_range(2..=64);
    let h = r.random_range(1..=6);
    let c = r.random_range(1..=8);
    let coarse = seed % 3 == 0;
    let nested: Vec<Vec<Vec<Float>>> = (0..n)
        .map(|_| {
            (0..h)
                .map(|_| {
                    (0..c)
                        .map(|_| {
                            if coarse {
                                Float::from(r.random_range(0..3u8))
                            } else {
                                r.random_range(-1.0..1.0)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let flat: Vec<Float> = nested.iter().flatten().flatten().copied().collect();
    let tensor = Tensor::new(&[n, h, c], flat).unwrap();
    let k = r.random_range(1..=n / 2);
    OracleInstance { nested, tensor, k }
}

pub struct OracleVerdict {
    pub matches_oracle: bool,
    pub non_overlapping: bool,
    pub monotone: bool,
}

impl OracleVerdict {
    pub fn ok(&self) -> bool {
        self.matches_oracle && self.non_overlapping && self.monotone
    }
}

pub fn judge(inst: &OracleInstance) -> OracleVerdict {
    let set: AdaptationSet = select_pairs(&compute_part_distances(&inst.tensor).unwrap(), inst.k).unwrap();
    let got: Vec<(usize, usize, usize, Float)> = set.pairs.iter().map(|p| (p.i, p.j, p.part, p.distance)).collect();
    let expected = brute_force(&inst.nested, inst.k);
    let mut seen = vec![false; inst.nested.len()];
    let non_overlapping = set.pairs.iter().all(|p| {
        let fresh = !seen[p.i] && !seen[p.j] && p.i != p.j;
        seen[p.i] = true;
        seen[p.j] = true;
        fresh
    });
    let monotone = set.pairs.windows(2).all(|w| w[0].distance <= w[1].distance);
    OracleVerdict {
        matches_oracle: got == expected,
        non_overlapping,
        monotone,
    }
}
