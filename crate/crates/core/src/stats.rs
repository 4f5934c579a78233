//! Closed-form dispersion statistics over attention maps.
//!
//! A concentrated map has low entropy, high peak mass and a single hot
//! component; a diffuse or fragmented one has the opposite. The mean
//! normalized entropy of a stack is a training-free quality predictor.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{AttentionStack, NORMALIZATION_TOL};
use crate::error::{bail, Result};

/// Default fragmentation threshold as a fraction of the map maximum.
pub const DEFAULT_FRAGMENT_THRESHOLD: f64 = 0.5;

fn check_distribution(map: &[f32]) -> Result<()> {
    if map.is_empty() {
        bail!(Argument, "empty map");
    }
    if let Some(bad) = map.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        bail!(Domain, "map value {bad} is negative or non-finite");
    }
    let sum: f64 = map.iter().map(|&v| v as f64).sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        bail!(Domain, "map sums to {sum}, expected 1");
    }
    Ok(())
}

/// Shannon entropy in nats, `-Σ p ln p` with `0 ln 0 = 0`.
pub fn spatial_entropy(map: &[f32]) -> Result<f64> {
    check_distribution(map)?;
    Ok(map
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let p = p as f64;
            -p * p.ln()
        })
        .sum())
}

/// Total mass of the `k` largest cells.
pub fn peak_mass(map: &[f32], k: usize) -> Result<f64> {
    check_distribution(map)?;
    if k == 0 || k > map.len() {
        bail!(Argument, "k = {k} outside 1..={}", map.len());
    }
    let mut sorted: Vec<f32> = map.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().map(|&v| v as f64).sum())
}

/// Number of 4-connected components among cells above `threshold · max`.
pub fn fragmentation(map: &[f32], height: usize, width: usize, threshold: f64) -> Result<usize> {
    check_distribution(map)?;
    if map.len() != height * width {
        bail!(Shape, "map has {} cells, expected {height}x{width}", map.len());
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!(Argument, "threshold {threshold} outside (0, 1)");
    }
    let max = map.iter().copied().fold(0.0f32, f32::max) as f64;
    let hot: Vec<bool> = map.iter().map(|&v| v as f64 > threshold * max).collect();
    let mut seen = vec![false; map.len()];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..map.len() {
        if !hot[start] || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if hot[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
        }
    }
    Ok(components)
}

/// Mean over blocks and real tokens of `spatial_entropy / ln(H·W)`.
///
/// In `[0, 1]`; higher means more dispersed.
pub fn dispersion_score(stack: &AttentionStack) -> Result<f64> {
    if !stack.is_normalized() {
        bail!(Domain, "dispersion requires a normalized stack");
    }
    if stack.real_tokens() == 0 {
        bail!(Domain, "stack has no real tokens");
    }
    let shape = stack.shape();
    let max_entropy = (shape.cells() as f64).ln();
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..shape.n_blocks {
        for (t, &real) in stack.token_mask().iter().enumerate() {
            if !real {
                continue;
            }
            let h = spatial_entropy(stack.slice(b, t))?;
            total += if max_entropy > 0.0 { h / max_entropy } else { 0.0 };
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

/// All statistics of one (block, token) map.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MapStats {
    pub block: usize,
    pub token: usize,
    pub entropy: f64,
    pub normalized_entropy: f64,
    pub peak_mass_1: f64,
    pub peak_mass_5pct: f64,
    pub fragments: usize,
}

/// Per-(block, real token) statistics for a normalized stack.
pub fn stack_stats(stack: &AttentionStack, threshold: f64) -> Result<Vec<MapStats>> {
    if !stack.is_normalized() {
        bail!(Domain, "statistics require a normalized stack");
    }
    let shape = stack.shape();
    let cells = shape.cells();
    let top = (cells / 20).max(1);
    let mut out = Vec::new();
    for b in 0..shape.n_blocks {
        for (t, &real) in stack.token_mask().iter().enumerate() {
            if !real {
                continue;
            }
            let map = stack.slice(b, t);
            let entropy = spatial_entropy(map)?;
            out.push(MapStats {
                block: b,
                token: t,
                entropy,
                normalized_entropy: if cells > 1 { entropy / (cells as f64).ln() } else { 0.0 },
                peak_mass_1: peak_mass(map, 1)?,
                peak_mass_5pct: peak_mass(map, top)?,
                fragments: fragmentation(map, shape.height, shape.width, threshold)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{StackMeta, StackShape};
    use crate::error::Error;
    use proptest::prelude::*;

    fn delta(n: usize, at: usize) -> Vec<f32> {
        let mut m = vec![0.0; n];
        m[at] = 1.0;
        m
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(spatial_entropy(&delta(16, 3)).unwrap(), 0.0);
        let uniform = vec![1.0 / 16.0; 16];
        assert!((spatial_entropy(&uniform).unwrap() - 16f64.ln()).abs() < 1e-6);
        // -(0.5 ln 0.5 + 0.25 ln 0.25 + 2 · 0.125 ln 0.125), summed by hand
        let oracle = 0.5 * 2f64.ln() + 0.25 * 4f64.ln() + 2.0 * 0.125 * 8f64.ln();
        let h = spatial_entropy(&[0.5, 0.25, 0.125, 0.125]).unwrap();
        assert!((h - oracle).abs() < 1e-7);
        assert!((h - 1.2130).abs() < 1e-4);
        assert!(matches!(spatial_entropy(&[0.5, 0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn peak_mass_examples() {
        assert_eq!(peak_mass(&delta(9, 4), 1).unwrap(), 1.0);
        assert!((peak_mass(&[0.25; 4], 1).unwrap() - 0.25).abs() < 1e-9);
        assert_eq!(peak_mass(&[0.125, 0.5, 0.125, 0.25], 2).unwrap(), 0.75);
        assert!(peak_mass(&[0.25; 4], 0).is_err());
        assert!(peak_mass(&[0.25; 4], 5).is_err());
        assert!((peak_mass(&[0.125, 0.5, 0.125, 0.25], 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fragmentation_examples() {
        let mut blob = vec![0.0f32; 16];
        for i in [5, 6, 9, 10] {
            blob[i] = 0.25;
        }
        assert_eq!(fragmentation(&blob, 4, 4, 0.5).unwrap(), 1);

        let mut two = vec![0.0f32; 16];
        for i in [0, 1, 14, 15] {
            two[i] = 0.25;
        }
        assert_eq!(fragmentation(&two, 4, 4, 0.5).unwrap(), 2);

        // checkerboard: 8 cells, no two 4-adjacent
        let checker: Vec<f32> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 0.125 } else { 0.0 }).collect();
        assert_eq!(fragmentation(&checker, 4, 4, 0.5).unwrap(), 8);
    }

    fn stack_of(maps: Vec<Vec<f32>>, h: usize, w: usize) -> AttentionStack {
        let shape = StackShape::new(1, maps.len(), h, w);
        let mut meta = StackMeta::anonymous(shape);
        meta.normalized = true;
        AttentionStack::new(meta, shape, maps.concat()).unwrap()
    }

    #[test]
    fn dispersion_extremes() {
        let deltas = stack_of(vec![delta(16, 0), delta(16, 7)], 4, 4);
        assert_eq!(dispersion_score(&deltas).unwrap(), 0.0);
        let uniform = stack_of(vec![vec![1.0 / 16.0; 16]; 2], 4, 4);
        assert!((dispersion_score(&uniform).unwrap() - 1.0).abs() < 1e-6);

        let shape = StackShape::new(1, 1, 2, 2);
        let mut meta = StackMeta::anonymous(shape);
        meta.token_mask = vec![false];
        meta.normalized = true;
        let empty = AttentionStack::new(meta, shape, vec![0.0; 4]).unwrap();
        assert!(matches!(dispersion_score(&empty), Err(Error::Domain(_))));
    }

    fn distribution() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f32..1.0, 2..40).prop_map(|mut v| {
            v[0] += 0.01;
            let s: f32 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        })
    }

    proptest! {
        #[test]
        fn statistics_are_permutation_invariant(map in distribution(), seed in any::<u64>(), k in 1usize..40) {
            let mut shuffled = map.clone();
            crate::rng::Rng::new(seed).shuffle(&mut shuffled);
            let (a, b) = (spatial_entropy(&map), spatial_entropy(&shuffled));
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!(a >= -1e-12 && a <= (map.len() as f64).ln() + 1e-9);
            }
            let k = k.min(map.len());
            if let (Ok(a), Ok(b)) = (peak_mass(&map, k), peak_mass(&shuffled, k)) {
                prop_assert!((a - b).abs() < 1e-9);
                if k > 1 {
                    prop_assert!(peak_mass(&map, k - 1).unwrap() <= a);
                }
            }
        }

        #[test]
        fn dispersion_is_in_unit_interval(maps in prop::collection::vec(distribution(), 1..4)) {
            let n = maps[0].len();
            let maps: Vec<Vec<f32>> = maps.into_iter().map(|mut m| { m.resize(n, 0.0); m }).collect();
            let shape = StackShape::new(1, maps.len(), 1, n);
            let mut meta = StackMeta::anonymous(shape);
            meta.normalized = false;
            let stack = AttentionStack::new(meta, shape, maps.concat()).unwrap().normalize().unwrap();
            let d = dispersion_score(&stack).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
