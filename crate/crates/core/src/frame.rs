//! Per-residue rigid frames built from backbone atoms.

use thiserror::Error;

use crate::tensor::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("degenerate backbone: N, CA, C are collinear within tolerance")]
    DegenerateBackbone,
}

/// A rigid transform T = (R, t); `apply` maps local coordinates to global.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame<F> {
    pub r: [[F; 3]; 3],
    pub t: [F; 3],
}

impl<F: Scalar> Frame<F> {
    pub fn identity() -> Self {
        let o = F::one();
        let z = F::zero();
        Frame {
            r: [[o, z, z], [z, o, z], [z, z, o]],
            t: [z, z, z],
        }
    }

    /// T ∘ p = R p + t
    pub fn apply(&self, p: [F; 3]) -> [F; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }

    /// T⁻¹ ∘ p = Rᵀ (p − t)
    pub fn apply_inverse(&self, p: [F; 3]) -> [F; 3] {
        let r = &self.r;
        let d = [p[0] - self.t[0], p[1] - self.t[1], p[2] - self.t[2]];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// self ∘ other: (R₁R₂, R₁t₂ + t₁)
    pub fn compose(&self, other: &Frame<F>) -> Frame<F> {
        let mut r = [[F::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] = r[i][j] + self.r[i][k] * other.r[k][j];
                }
            }
        }
        let t = self.apply(other.t);
        Frame { r, t }
    }

    /// Max absolute deviation of RᵀR from the identity.
    pub fn orthonormality_error(&self) -> F {
        let r = &self.r;
        let mut worst = F::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = F::zero();
                for k in 0..3 {
                    dot = dot + r[k][i] * r[k][j];
                }
                let target = if i == j { F::one() } else { F::zero() };
                let dev = (dot - target).abs();
                if dev > worst {
                    worst = dev;
                }
            }
        }
        worst
    }

    pub fn det(&self) -> F {
        let r = &self.r;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn cast<G: Scalar>(&self) -> Frame<G> {
        let c = |x: F| G::from_f64(x.as_f64());
        Frame {
            r: [
                [c(self.r[0][0]), c(self.r[0][1]), c(self.r[0][2])],
                [c(self.r[1][0]), c(self.r[1][1]), c(self.r[1][2])],
                [c(self.r[2][0]), c(self.r[2][1]), c(self.r[2][2])],
            ],
            t: [c(self.t[0]), c(self.t[1]), c(self.t[2])],
        }
    }
}

fn sub<F: Scalar>(a: [F; 3], b: [F; 3]) -> [F; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot<F: Scalar>(a: [F; 3], b: [F; 3]) -> F {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm<F: Scalar>(a: [F; 3]) -> F {
    dot(a, a).sqrt()
}

fn cross<F: Scalar>(a: [F; 3], b: [F; 3]) -> [F; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Gram-Schmidt rigid construction from backbone atoms: e1 along C−CA, e2
/// the orthogonalized N−CA direction, e3 their cross product, t = CA.
/// Collinear inputs (within 1e-6) are rejected.
pub fn frames_from_backbone<F: Scalar>(
    n: [F; 3],
    ca: [F; 3],
    c: [F; 3],
) -> Result<Frame<F>, FrameError> {
    let tol = F::from_f64(1e-6);
    let v1 = sub(c, ca);
    let n1 = norm(v1);
    if n1 < tol {
        return Err(FrameError::DegenerateBackbone);
    }
    let e1 = [v1[0] / n1, v1[1] / n1, v1[2] / n1];
    let u = sub(n, ca);
    let proj = dot(u, e1);
    let v2 = [u[0] - proj * e1[0], u[1] - proj * e1[1], u[2] - proj * e1[2]];
    let n2 = norm(v2);
    if n2 < tol {
        return Err(FrameError::DegenerateBackbone);
    }
    let e2 = [v2[0] / n2, v2[1] / n2, v2[2] / n2];
    let e3 = cross(e1, e2);
    Ok(Frame {
        r: [
            [e1[0], e2[0], e3[0]],
            [e1[1], e2[1], e3[1]],
            [e1[2], e2[2], e3[2]],
        ],
        t: ca,
    })
}

/// A uniformly random rotation-only frame (useful for invariance tests).
pub fn random_rigid_motion<F: Scalar>(rng: &mut impl rand::Rng, translation_scale: f64) -> Frame<F> {
    // Random rotation via Gram-Schmidt of two Gaussian-ish vectors built
    // from uniform samples; adequate for invariance checks.
    loop {
        let mut v = [[0.0f64; 3]; 2];
        for row in v.iter_mut() {
            for x in row.iter_mut() {
                *x = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
        let t = [
            (rng.random::<f64>() * 2.0 - 1.0) * translation_scale,
            (rng.random::<f64>() * 2.0 - 1.0) * translation_scale,
            (rng.random::<f64>() * 2.0 - 1.0) * translation_scale,
        ];
        let a = v[0].map(F::from_f64);
        let b = v[1].map(F::from_f64);
        let na = norm(a);
        if na.as_f64() < 1e-3 {
            continue;
        }
        let e1 = [a[0] / na, a[1] / na, a[2] / na];
        let p = dot(b, e1);
        let b2 = [b[0] - p * e1[0], b[1] - p * e1[1], b[2] - p * e1[2]];
        let nb = norm(b2);
        if nb.as_f64() < 1e-3 {
            continue;
        }
        let e2 = [b2[0] / nb, b2[1] / nb, b2[2] / nb];
        let e3 = cross(e1, e2);
        return Frame {
            r: [
                [e1[0], e2[0], e3[0]],
                [e1[1], e2[1], e3[1]],
                [e1[2], e2[2], e3[2]],
            ],
            t: t.map(F::from_f64),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn axis_aligned_backbone_gives_identity() {
        let f =
            frames_from_backbone::<f64>([0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert!(f.orthonormality_error() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((f.r[i][j] - want).abs() < 1e-12);
            }
            assert_eq!(f.t[i], 0.0);
        }
    }

    #[test]
    fn collinear_backbone_is_degenerate() {
        let err =
            frames_from_backbone::<f64>([2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap_err();
        assert_eq!(err, FrameError::DegenerateBackbone);
    }

    #[test]
    fn construction_is_equivariant_under_rigid_motion() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = [0.3, 1.2, -0.4];
            let ca = [0.1, -0.2, 0.5];
            let c = [1.4, 0.3, 0.2];
            let f = frames_from_backbone::<f64>(n, ca, c).unwrap();
            let g: Frame<f64> = random_rigid_motion(&mut rng, 5.0);
            let fg = frames_from_backbone::<f64>(g.apply(n), g.apply(ca), g.apply(c)).unwrap();
            let expect = g.compose(&f);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((fg.r[i][j] - expect.r[i][j]).abs() < 1e-9);
                }
                assert!((fg.t[i] - expect.t[i]).abs() < 1e-9);
            }
            assert!(fg.orthonormality_error() < 1e-9);
            assert!((fg.det() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let f: Frame<f64> = random_rigid_motion(&mut rng, 2.0);
        let p = [0.4, -1.1, 2.2];
        let q = f.apply_inverse(f.apply(p));
        for i in 0..3 {
            assert!((q[i] - p[i]).abs() < 1e-12);
        }
    }
}
