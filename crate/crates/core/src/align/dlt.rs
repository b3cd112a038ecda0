//! Direct linear transform: a homography from point correspondences.

use crate::error::{CdError, CdResult};
use crate::raster::Homography;
use nalgebra::{Matrix3, SMatrix, SVector};

/// A correspondence as `(source point, destination point)`.
pub type PointPair = ((f64, f64), (f64, f64));

/// Hartley conditioning: translate the centroid to the origin and scale the
/// mean distance to sqrt(2). Returns the transformed points and the 3x3
/// matrix that performs the transform.
fn normalize(points: impl Iterator<Item = (f64, f64)> + Clone) -> CdResult<(Vec<(f64, f64)>, Matrix3<f64>)> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points
        .clone()
        .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-9 {
        return Err(CdError::Degenerate(
            "correspondence points are coincident".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let transformed = points.map(|(x, y)| (s * (x - cx), s * (y - cy))).collect();
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    Ok((transformed, t))
}

/// Estimates the homography mapping source points onto destination points.
///
/// Needs at least 4 pairs with no 3 source points collinear. The solution
/// is the null direction of the stacked constraint system, found through an
/// eigendecomposition of its normal matrix; this also covers the minimal
/// 4-pair case exactly.
pub fn dlt_homography(pairs: &[PointPair]) -> CdResult<Homography<f64>> {
    if pairs.len() < 4 {
        return Err(CdError::Degenerate(format!(
            "homography needs at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    for &((sx, sy), (dx, dy)) in pairs {
        if !(sx.is_finite() && sy.is_finite() && dx.is_finite() && dy.is_finite()) {
            return Err(CdError::Degenerate(
                "non-finite correspondence coordinate".into(),
            ));
        }
    }

    let (src, t1) = normalize(pairs.iter().map(|p| p.0))?;
    let (dst, t2) = normalize(pairs.iter().map(|p| p.1))?;

    // M = A^T A for the 2n x 9 DLT system; its smallest eigenvector is the
    // least-squares null direction.
    let mut m = SMatrix::<f64, 9, 9>::zeros();
    let mut accumulate = |row: [f64; 9]| {
        let r = SVector::<f64, 9>::from_row_slice(&row);
        m += r * r.transpose();
    };
    for (&(x, y), &(u, v)) in src.iter().zip(&dst) {
        accumulate([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        accumulate([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }

    let eig = m.symmetric_eigen();
    // eigenvalues are unordered; find the two smallest by hand
    let mut min_i = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let mut second = f64::INFINITY;
    let mut max_ev = 0.0f64;
    for i in 0..9 {
        max_ev = max_ev.max(eig.eigenvalues[i]);
        if i != min_i {
            second = second.min(eig.eigenvalues[i]);
        }
    }
    // rank < 8 means the null space is not unique: degenerate geometry
    if second <= max_ev * 1e-12 {
        return Err(CdError::Degenerate(
            "correspondences do not constrain a unique homography".into(),
        ));
    }

    let h = eig.eigenvectors.column(min_i);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t2_inv = t2
        .try_inverse()
        .expect("normalization transform is invertible by construction");
    let denorm = t2_inv * hn * t1;

    Homography::new([
        denorm[(0, 0)],
        denorm[(0, 1)],
        denorm[(0, 2)],
        denorm[(1, 0)],
        denorm[(1, 1)],
        denorm[(1, 2)],
        denorm[(2, 0)],
        denorm[(2, 1)],
        denorm[(2, 2)],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_points(h: &Homography<f64>, pts: &[(f64, f64)]) -> Vec<PointPair> {
        pts.iter()
            .map(|&(x, y)| ((x, y), h.apply(x, y).unwrap()))
            .collect()
    }

    fn max_rel_entry_diff(a: &Homography<f64>, b: &Homography<f64>) -> f64 {
        a.entries()
            .iter()
            .zip(b.entries())
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-12))
            .fold(0.0, f64::max)
    }

    const SQUARE: [(f64, f64); 4] = [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)];

    #[test]
    fn identity_from_fixed_points() {
        let pairs: Vec<PointPair> = SQUARE.iter().map(|&p| (p, p)).collect();
        let h = dlt_homography(&pairs).unwrap();
        for (e, id) in h.entries().iter().zip(Homography::<f64>::identity().entries()) {
            assert!((e - id).abs() < 1e-9, "entry {e} vs {id}");
        }
    }

    #[test]
    fn translation_from_fixed_points() {
        let pairs: Vec<PointPair> = SQUARE
            .iter()
            .map(|&(x, y)| ((x, y), (x + 5.0, y - 3.0)))
            .collect();
        let h = dlt_homography(&pairs).unwrap();
        let expect = Homography::<f64>::translation(5.0, -3.0);
        for (e, t) in h.entries().iter().zip(expect.entries()) {
            assert!((e - t).abs() < 1e-8, "entry {e} vs {t}");
        }
    }

    #[test]
    fn recovers_known_mild_perspective_from_8_points() {
        // corner displacement stays under 10% of the 100 px extent
        let h_true = Homography::<f64>::new([
            1.04, 0.03, -4.0, -0.02, 0.97, 6.0, 1.5e-4, -8e-5, 1.0,
        ])
        .unwrap();
        let pts = [
            (0.0, 0.0),
            (100.0, 0.0),
            (100.0, 100.0),
            (0.0, 100.0),
            (50.0, 20.0),
            (25.0, 75.0),
            (80.0, 55.0),
            (10.0, 40.0),
        ];
        let pairs = map_points(&h_true, &pts);
        let h_est = dlt_homography(&pairs).unwrap();
        assert!(max_rel_entry_diff(&h_est, &h_true) < 1e-6);

        // forward residual below a millionth of a pixel on every input pair
        for ((sx, sy), (dx, dy)) in pairs {
            let (px, py) = h_est.apply(sx, sy).unwrap();
            let err = ((px - dx).powi(2) + (py - dy).powi(2)).sqrt();
            assert!(err < 1e-6, "residual {err}");
        }
    }

    #[test]
    fn rejects_too_few_and_degenerate_configurations() {
        let three: Vec<PointPair> = SQUARE[..3].iter().map(|&p| (p, p)).collect();
        assert!(dlt_homography(&three).is_err());

        // three of four source points collinear
        let collinear = [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0), (5.0, 50.0)];
        let pairs: Vec<PointPair> = collinear.iter().map(|&p| (p, p)).collect();
        assert!(matches!(
            dlt_homography(&pairs).unwrap_err(),
            CdError::Degenerate(_)
        ));

        let coincident: Vec<PointPair> = (0..4).map(|_| ((3.0, 4.0), (3.0, 4.0))).collect();
        assert!(dlt_homography(&coincident).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn synthesize_and_recover(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // a mild perspective: identity plus small random perturbations
            let h_true = Homography::<f64>::new([
                1.0 + rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-8.0..8.0),
                rng.random_range(-0.05..0.05),
                1.0 + rng.random_range(-0.05..0.05),
                rng.random_range(-8.0..8.0),
                rng.random_range(-1e-4..1e-4),
                rng.random_range(-1e-4..1e-4),
                1.0,
            ]).unwrap();
            let n = rng.random_range(4usize..12);
            let mut pts: Vec<(f64, f64)> = Vec::new();
            while pts.len() < n {
                let p = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
                // keep source triples well away from collinear
                let ok = pts.len() < 2
                    || pts.iter().enumerate().all(|(i, &a)| {
                        pts[i + 1..].iter().all(|&b| {
                            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                            cross.abs() > 100.0
                        })
                    });
                if ok {
                    pts.push(p);
                }
            }
            let pairs = map_points(&h_true, &pts);
            let h_est = dlt_homography(&pairs).unwrap();
            prop_assert!(max_rel_entry_diff(&h_est, &h_true) < 1e-6);
        }
    }
}
