//! Latin hypercube designs on the unit cube.

use rand::seq::SliceRandom;
use rand::Rng;

/// `n` points in `[0, 1]^dim`, one per stratum in every coordinate, jittered
/// uniformly inside each stratum.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for d in 0..dim {
        perm.shuffle(rng);
        for (i, p) in points.iter_mut().enumerate() {
            p[d] = (perm[i] as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    points
}

/// Smallest pairwise Euclidean distance of a design.
pub fn min_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d2);
        }
    }
    best.sqrt()
}

/// Best of `candidates` Latin hypercube designs by the maximin criterion.
pub fn maximin_latin_hypercube<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    candidates: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut best = latin_hypercube(n, dim, rng);
    let mut best_d = min_distance(&best);
    for _ in 1..candidates {
        let c = latin_hypercube(n, dim, rng);
        let d = min_distance(&c);
        if d > best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Mixes a base seed with two indices into an independent stream seed (splitmix64).
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a unit-cube design onto the box `[lo, hi]`.
pub fn scale_to_box(points: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(d, &u)| lo[d] + u * (hi[d] - lo[d]))
                .collect()
        })
        .collect()
}
