//! Part nearest neighbor pairing over unlabeled images.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Float};
use crate::tensor::Tensor;

/// Per-stripe distances between all images, reduced over stripes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairingWorkspace {
    images: usize,
    stripes: usize,
    /// `[H, N, N]`, diagonal `+inf`.
    distances: Vec<Float>,
    /// `[N, N]` minimum over stripes.
    min_distance: Vec<Float>,
    /// `[N, N]` stripe attaining the minimum (smallest index on ties).
    min_part: Vec<usize>,
}

impl PairingWorkspace {
    pub fn images(&self) -> usize {
        self.images
    }

    pub fn stripes(&self) -> usize {
        self.stripes
    }

    pub fn part_distance(&self, part: usize, i: usize, j: usize) -> Float {
        self.distances[(part * self.images + i) * self.images + j]
    }

    pub fn min_distance(&self, i: usize, j: usize) -> Float {
        self.min_distance[i * self.images + j]
    }

    pub fn min_part(&self, i: usize, j: usize) -> usize {
        self.min_part[i * self.images + j]
    }
}

/// Euclidean distances between every image pair for every stripe, from
/// `[N, H, C_l]` part embeddings.
pub fn compute_part_distances(embeddings: &Tensor) -> Result<PairingWorkspace> {
    let [n, h, c] = embeddings.shape()[..] else {
        return Err(Error::contract(
            "compute_part_distances",
            format!("expected [N, H, C_l] embeddings, got {:?}", embeddings.shape()),
        ));
    };
    if n < 2 {
        return Err(Error::contract(
            "compute_part_distances",
            format!("need at least 2 images, got {n}"),
        ));
    }
    if h == 0 {
        return Err(Error::contract("compute_part_distances", "no stripes"));
    }
    let data = embeddings.data();
    let vector = |img: usize, part: usize| &data[(img * h + part) * c..(img * h + part + 1) * c];
    let mut distances = vec![Float::INFINITY; h * n * n];
    for part in 0..h {
        for i in 0..n {
            for j in (i + 1)..n {
                let sq: Float = vector(i, part)
                    .iter()
                    .zip(vector(j, part))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let d = math::sqrt(sq);
                distances[(part * n + i) * n + j] = d;
                distances[(part * n + j) * n + i] = d;
            }
        }
    }
    let mut min_distance = vec![Float::INFINITY; n * n];
    let mut min_part = vec![0usize; n * n];
    for cell in 0..n * n {
        for part in 0..h {
            let d = distances[part * n * n + cell];
            if d < min_distance[cell] {
                min_distance[cell] = d;
                min_part[cell] = part;
            }
        }
    }
    Ok(PairingWorkspace {
        images: n,
        stripes: h,
        distances,
        min_distance,
        min_part,
    })
}

/// One selected pair: images `i < j` matched on stripe `part`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub i: usize,
    pub j: usize,
    pub part: usize,
    pub distance: Float,
}

/// Non-overlapping pairs in ascending distance order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSet {
    pub pairs: Vec<ImagePair>,
    /// Number of images the pairs were drawn from.
    pub images: usize,
    /// Pairs requested.
    pub requested: usize,
}

impl AdaptationSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Requested pairs that could not be formed.
    pub fn shortfall(&self) -> usize {
        self.requested.saturating_sub(self.pairs.len())
    }

    /// One JSON object per line: `i`, `j`, `n`, `distance`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&format!(
                "{{\"i\":{},\"j\":{},\"n\":{},\"distance\":{:?}}}\n",
                p.i, p.j, p.part, p.distance
            ));
        }
        out
    }
}

/// `min(128, N / 2)`.
pub fn default_k(images: usize) -> usize {
    (images / 2).min(128)
}

/// Greedy matching: repeatedly take the smallest remaining reduced distance
/// whose images are both unused. Ties go to the smaller `i`, then `j`.
pub fn select_pairs(workspace: &PairingWorkspace, k: usize) -> Result<AdaptationSet> {
    let n = workspace.images;
    if k == 0 || k > n / 2 {
        return Err(Error::Config(format!(
            "pair count {k} out of range 1..={} for {n} images",
            n / 2
        )));
    }
    let mut candidates: Vec<(Float, usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| (workspace.min_distance(i, j), i, j))
        .filter(|(d, _, _)| d.is_finite())
        .collect();
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used = vec![false; n];
    let mut pairs = Vec::with_capacity(k);
    for (distance, i, j) in candidates {
        if pairs.len() == k {
            break;
        }
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        pairs.push(ImagePair {
            i,
            j,
            part: workspace.min_part(i, j),
            distance,
        });
    }
    if pairs.len() < k {
        log::warn!("pairing: only {} of {k} pairs could be formed", pairs.len());
    }
    Ok(AdaptationSet {
        pairs,
        images: n,
        requested: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_part_distance() {
        let e = Tensor::new(&[2, 1, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let w = compute_part_distances(&e).unwrap();
        assert_eq!(w.min_distance(0, 1), 5.0);
        assert_eq!(w.min_part(0, 1), 0);
        assert_eq!(w.min_distance(0, 0), Float::INFINITY);
    }

    #[test]
    fn minimum_over_parts() {
        // part 0 distance 7, part 1 distance 2
        let e = Tensor::new(&[2, 2, 1], vec![0.0, 0.0, 7.0, 2.0]).unwrap();
        let w = compute_part_distances(&e).unwrap();
        assert_eq!(w.min_distance(1, 0), 2.0);
        assert_eq!(w.min_part(0, 1), 1);
    }

    #[test]
    fn line_points_pair_up() {
        let e = Tensor::new(&[4, 1, 1], vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let w = compute_part_distances(&e).unwrap();
        let set = select_pairs(&w, 2).unwrap();
        let mut ids: Vec<(usize, usize)> = set.pairs.iter().map(|p| (p.i, p.j)).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![(0, 1), (2, 3)]);
        assert!(set.pairs[0].distance <= set.pairs[1].distance);
        assert_eq!(set.shortfall(), 0);
    }

    #[test]
    fn k_rule() {
        assert_eq!(default_k(900), 128);
        assert_eq!(default_k(316), 128);
        assert_eq!(default_k(60), 30);
        assert_eq!(default_k(2), 1);
    }

    #[test]
    fn range_and_size_errors() {
        let e = Tensor::new(&[1, 1, 1], vec![0.0]).unwrap();
        assert!(matches!(compute_part_distances(&e), Err(Error::Contract { .. })));
        let e = Tensor::new(&[4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let w = compute_part_distances(&e).unwrap();
        assert!(matches!(select_pairs(&w, 3), Err(Error::Config(_))));
        assert!(matches!(select_pairs(&w, 0), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_lines() {
        let e = Tensor::new(&[4, 1, 1], vec![0.0, 0.5, 10.0, 10.25]).unwrap();
        let set = select_pairs(&compute_part_distances(&e).unwrap(), 2).unwrap();
        let text = set.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "{\"i\":2,\"j\":3,\"n\":0,\"distance\":0.25}");
    }
}
