use crate::error::{CdError, CdResult};
use crate::scalar::Scalar;
use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// 3x3 projective transform, row-major, canonically scaled so `m[8] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography<S: Scalar> {
    m: [S; 9],
}

impl<S: Scalar> Homography<S> {
    pub fn identity() -> Self {
        let mut m = [S::zero(); 9];
        m[0] = S::one();
        m[4] = S::one();
        m[8] = S::one();
        Self { m }
    }

    /// Builds from raw entries, rescaling to the canonical `m[8] = 1` form.
    pub fn new(m: [S; 9]) -> CdResult<Self> {
        let w = m[8].to64();
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.to64().abs()));
        if !w.is_finite() || w.abs() < 1e-12 * scale.max(1.0) {
            return Err(CdError::Geometry(
                "homography cannot be normalized: m[8] is ~0".into(),
            ));
        }
        let mut out = [S::zero(); 9];
        for (o, v) in out.iter_mut().zip(m.iter()) {
            *o = S::from64(v.to64() / w);
        }
        out[8] = S::one();
        let det = det3(&out);
        if det.abs() <= 1e-12 {
            return Err(CdError::SingularHomography { det });
        }
        Ok(Self { m: out })
    }

    /// Pure translation by `(tx, ty)`.
    pub fn translation(tx: f64, ty: f64) -> Self {
        let mut h = Self::identity();
        h.m[2] = S::from64(tx);
        h.m[5] = S::from64(ty);
        h
    }

    pub fn entries(&self) -> &[S; 9] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    /// Maps a point through the transform.
    ///
    /// Errors when the point lies on the line sent to infinity
    /// (denominator below 1e-12).
    pub fn apply(&self, x: f64, y: f64) -> CdResult<(f64, f64)> {
        let m = &self.m;
        let denom = m[6].to64() * x + m[7].to64() * y + m[8].to64();
        if denom.abs() <= 1e-12 {
            return Err(CdError::PointAtInfinity { denom });
        }
        let xp = (m[0].to64() * x + m[1].to64() * y + m[2].to64()) / denom;
        let yp = (m[3].to64() * x + m[4].to64() * y + m[5].to64()) / denom;
        Ok((xp, yp))
    }

    /// Inverse transform, recanonicalized.
    pub fn inverse(&self) -> CdResult<Self> {
        let m: Vec<f64> = self.m.iter().map(|v| v.to64()).collect();
        let det = det3(&self.m);
        if det.abs() <= 1e-12 {
            return Err(CdError::SingularHomography { det });
        }
        // adjugate / det, written out for the 3x3 case
        let inv = [
            (m[4] * m[8] - m[5] * m[7]) / det,
            (m[2] * m[7] - m[1] * m[8]) / det,
            (m[1] * m[5] - m[2] * m[4]) / det,
            (m[5] * m[6] - m[3] * m[8]) / det,
            (m[0] * m[8] - m[2] * m[6]) / det,
            (m[2] * m[3] - m[0] * m[5]) / det,
            (m[3] * m[7] - m[4] * m[6]) / det,
            (m[1] * m[6] - m[0] * m[7]) / det,
            (m[0] * m[4] - m[1] * m[3]) / det,
        ];
        Self::new(inv.map(S::from64))
    }

    /// Matrix product `self * rhs`: applies `rhs` first, then `self`.
    pub fn compose(&self, rhs: &Self) -> CdResult<Self> {
        let a: Vec<f64> = self.m.iter().map(|v| v.to64()).collect();
        let b: Vec<f64> = rhs.m.iter().map(|v| v.to64()).collect();
        let mut c = [0.0f64; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a[i * 3 + k] * b[k * 3 + j];
                }
                c[i * 3 + j] = acc;
            }
        }
        Self::new(c.map(S::from64))
    }

    pub fn cast<T: Scalar>(&self) -> Homography<T> {
        Homography {
            m: self.m.map(|v| T::from64(v.to64())),
        }
    }
}

/// Free-function form of [`Homography::apply`].
pub fn apply_homography_point<S: Scalar>(h: &Homography<S>, x: f64, y: f64) -> CdResult<(f64, f64)> {
    h.apply(x, y)
}

fn det3<S: Scalar>(m: &[S; 9]) -> f64 {
    let v: Vec<f64> = m.iter().map(|e| e.to64()).collect();
    v[0] * (v[4] * v[8] - v[5] * v[7]) - v[1] * (v[3] * v[8] - v[5] * v[6])
        + v[2] * (v[3] * v[7] - v[4] * v[6])
}

impl<S: Scalar> Serialize for Homography<S> {
    fn serialize<Sz: Serializer>(&self, serializer: Sz) -> Result<Sz::Ok, Sz::Error> {
        let mut seq = serializer.serialize_seq(Some(9))?;
        for v in &self.m {
            seq.serialize_element(&v.to64())?;
        }
        seq.end()
    }
}

impl<'de, S: Scalar> Deserialize<'de> for Homography<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V<S>(std::marker::PhantomData<S>);
        impl<'de, S: Scalar> Visitor<'de> for V<S> {
            type Value = Homography<S>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "an array of 9 numbers, row-major")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let mut m = [S::zero(); 9];
                for (i, slot) in m.iter_mut().enumerate() {
                    let v: f64 = seq
                        .next_element()?
                        .ok_or_else(|| serde::de::Error::invalid_length(i, &self))?;
                    *slot = S::from64(v);
                }
                if seq.next_element::<f64>()?.is_some() {
                    return Err(serde::de::Error::invalid_length(10, &self));
                }
                Homography::new(m).map_err(serde::de::Error::custom)
            }
        }
        deserializer.deserialize_seq(V(std::marker::PhantomData))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn apply_identity_and_translation() {
        let h = Homography::<f64>::identity();
        assert_eq!(h.apply(10.0, 20.0).unwrap(), (10.0, 20.0));

        let t = Homography::<f64>::translation(3.0, -1.0);
        assert_eq!(t.apply(0.0, 0.0).unwrap(), (3.0, -1.0));
    }

    #[test]
    fn apply_perspective_division() {
        let mut m = Homography::<f64>::identity().m;
        m[6] = 0.001;
        let h = Homography::new(m).unwrap();
        let (x, y) = h.apply(100.0, 0.0).unwrap();
        assert!((x - 100.0 / 1.1).abs() < 1e-9);
        assert!(y.abs() < 1e-12);
    }

    #[test]
    fn point_at_infinity_is_an_error() {
        let mut m = Homography::<f64>::identity().m;
        m[6] = -0.01;
        let h = Homography::new(m).unwrap();
        assert!(matches!(
            h.apply(100.0, 0.0),
            Err(CdError::PointAtInfinity { .. })
        ));
    }

    #[test]
    fn construction_canonicalizes_scale() {
        let h = Homography::<f64>::new([2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(h.entries(), Homography::<f64>::identity().entries());
    }

    #[test]
    fn singular_matrix_rejected() {
        let r = Homography::<f64>::new([1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0]);
        assert!(matches!(r, Err(CdError::SingularHomography { .. })));
    }

    #[test]
    fn json_round_trip_is_nine_numbers() {
        let h = Homography::<f64>::translation(5.0, -3.0);
        let js = serde_json::to_string(&h).unwrap();
        assert_eq!(js, "[1.0,0.0,5.0,0.0,1.0,-3.0,0.0,0.0,1.0]");
        let back: Homography<f64> = serde_json::from_str(&js).unwrap();
        assert_eq!(back, h);
        assert!(serde_json::from_str::<Homography<f64>>("[1,0,0,0,1,0,0,0]").is_err());
    }

    fn mild_h(tx: f64, ty: f64, px: f64, py: f64, s: f64) -> Homography<f64> {
        Homography::new([s, 0.02, tx, -0.015, s, ty, px, py, 1.0]).unwrap()
    }

    proptest! {
        #[test]
        fn composition_matches_sequential_application(
            tx in -10.0f64..10.0, ty in -10.0f64..10.0,
            px in -1e-4f64..1e-4, py in -1e-4f64..1e-4,
            x in -50.0f64..50.0, y in -50.0f64..50.0,
        ) {
            let a = mild_h(tx, ty, px, py, 1.05);
            let b = mild_h(-ty, tx, py, px, 0.95);
            let ab = a.compose(&b).unwrap();
            let (bx, by) = b.apply(x, y).unwrap();
            let (ex, ey) = a.apply(bx, by).unwrap();
            let (gx, gy) = ab.apply(x, y).unwrap();
            prop_assert!((gx - ex).abs() < 1e-9 && (gy - ey).abs() < 1e-9);
        }

        #[test]
        fn inverse_round_trips_points(
            tx in -10.0f64..10.0, ty in -10.0f64..10.0,
            px in -1e-4f64..1e-4, py in -1e-4f64..1e-4,
            x in -50.0f64..50.0, y in -50.0f64..50.0,
        ) {
            let h = mild_h(tx, ty, px, py, 1.0);
            let hi = h.inverse().unwrap();
            let (fx, fy) = h.apply(x, y).unwrap();
            let (bx, by) = hi.apply(fx, fy).unwrap();
            prop_assert!((bx - x).abs() < 1e-8 && (by - y).abs() < 1e-8);
        }
    }
}
