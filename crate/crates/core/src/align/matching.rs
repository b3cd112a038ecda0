//! Descriptor matching: cosine similarity, mutual nearest neighbors, and a
//! keep-if-at-least-tau threshold.

use super::descriptor::Descriptor;
use super::ransac::RansacConfig;
use crate::error::{CdError, CdResult};
use rayon::prelude::*;

/// A retained correspondence between two descriptor lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub similarity: f64,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
}

/// Matches `d1` against `d2`: cosine similarity over all pairs, keep pairs
/// that are mutual nearest neighbors with similarity at least `cfg.tau`,
/// strongest first.
pub fn match_descriptors(
    d1: &[Descriptor],
    d2: &[Descriptor],
    cfg: &RansacConfig,
) -> CdResult<Vec<Match>> {
    cfg.validate()?;
    if d1.is_empty() || d2.is_empty() {
        return Err(CdError::Degenerate(
            "cannot match empty descriptor lists".into(),
        ));
    }
    let dim = d1[0].v.len();
    if d1.iter().chain(d2).any(|d| d.v.len() != dim) {
        return Err(CdError::ShapeMismatch(
            "descriptor dimensions differ".into(),
        ));
    }

    // descriptors are unit vectors, so cosine similarity is the dot product
    let best_for_1: Vec<(usize, f64)> = d1
        .par_iter()
        .map(|a| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, b) in d2.iter().enumerate() {
                let s = dot(&a.v, &b.v);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best
        })
        .collect();
    let best_for_2: Vec<usize> = d2
        .par_iter()
        .map(|b| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, a) in d1.iter().enumerate() {
                let s = dot(&a.v, &b.v);
                if s > best.1 {
                    best = (i, s);
                }
            }
            best.0
        })
        .collect();

    let mut matches: Vec<Match> = best_for_1
        .iter()
        .enumerate()
        .filter(|&(i, &(j, s))| s >= cfg.tau && best_for_2[j] == i)
        .map(|(i, &(j, s))| Match {
            i,
            j,
            similarity: s,
        })
        .collect();
    matches.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then(a.i.cmp(&b.i))
    });
    Ok(matches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::harris::Keypoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(v: Vec<f32>) -> Descriptor {
        let norm: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        Descriptor {
            keypoint: Keypoint {
                x: 0.0,
                y: 0.0,
                score: 1.0,
            },
            v: v.iter().map(|&x| (x as f64 / norm) as f32).collect(),
        }
    }

    fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Descriptor {
        desc((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    fn cfg_with_tau(tau: f64) -> RansacConfig {
        RansacConfig {
            tau,
            ..RansacConfig::default()
        }
    }

    #[test]
    fn identical_sets_pair_up_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d1: Vec<Descriptor> = (0..6).map(|_| random_unit(16, &mut rng)).collect();
        let matches = match_descriptors(&d1, &d1, &cfg_with_tau(0.85)).unwrap();
        assert_eq!(matches.len(), 6);
        for m in &matches {
            assert_eq!(m.i, m.j);
            assert!(m.similarity > 0.999_999, "sim {}", m.similarity);
        }
    }

    #[test]
    fn near_one_tau_can_empty_the_set_without_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d1: Vec<Descriptor> = (0..5).map(|_| random_unit(16, &mut rng)).collect();
        let d2: Vec<Descriptor> = (0..5).map(|_| random_unit(16, &mut rng)).collect();
        let matches = match_descriptors(&d1, &d2, &cfg_with_tau(0.999)).unwrap();
        assert!(matches.iter().all(|m| m.similarity >= 0.999));
    }

    #[test]
    fn orthogonal_basis_permutation_is_recovered() {
        let e = |i: usize| {
            let mut v = vec![0.0f32; 3];
            v[i] = 1.0;
            desc(v)
        };
        let d1 = vec![e(0), e(1), e(2)];
        let d2 = vec![e(2), e(0), e(1)]; // d2[j] = d1[perm[j]]
        let matches = match_descriptors(&d1, &d2, &cfg_with_tau(0.85)).unwrap();
        assert_eq!(matches.len(), 3);
        for m in &matches {
            let expected_j = match m.i {
                0 => 1,
                1 => 2,
                2 => 0,
                _ => unreachable!(),
            };
            assert_eq!(m.j, expected_j);
            assert!((m.similarity - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matching_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d1: Vec<Descriptor> = (0..12).map(|_| random_unit(8, &mut rng)).collect();
        let d2: Vec<Descriptor> = (0..9).map(|_| random_unit(8, &mut rng)).collect();
        let cfg = cfg_with_tau(0.1);
        let fwd = match_descriptors(&d1, &d2, &cfg).unwrap();
        let rev = match_descriptors(&d2, &d1, &cfg).unwrap();
        let mut fwd_pairs: Vec<(usize, usize)> = fwd.iter().map(|m| (m.i, m.j)).collect();
        let mut rev_pairs: Vec<(usize, usize)> = rev.iter().map(|m| (m.j, m.i)).collect();
        fwd_pairs.sort_unstable();
        rev_pairs.sort_unstable();
        assert_eq!(fwd_pairs, rev_pairs);
    }

    #[test]
    fn results_sorted_by_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d1: Vec<Descriptor> = (0..15).map(|_| random_unit(8, &mut rng)).collect();
        let matches = match_descriptors(&d1, &d1, &cfg_with_tau(0.5)).unwrap();
        for w in matches.windows(2) {
            assert!(w[0].similarity >= w[1].similarity);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d1: Vec<Descriptor> = (0..3).map(|_| random_unit(8, &mut rng)).collect();
        assert!(match_descriptors(&d1, &[], &cfg_with_tau(0.85)).is_err());
        assert!(match_descriptors(&[], &d1, &cfg_with_tau(0.85)).is_err());
        let d3 = vec![random_unit(16, &mut rng)];
        assert!(match_descriptors(&d1, &d3, &cfg_with_tau(0.85)).is_err());
    }
}
