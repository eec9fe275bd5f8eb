//! Rotation representations, camera projection, joint extraction and the
//! alignment/linear-algebra primitives behind the evaluation metrics.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Weak-perspective camera: scale plus image-plane translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl CameraParams {
    pub fn new(scale: f64, translation: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("camera scale must be > 0, got {scale}")));
        }
        Ok(CameraParams { scale, translation })
    }

    pub fn identity() -> Self {
        CameraParams {
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }
}

/// Gram-Schmidt map from the 6D rotation representation (the first two
/// columns of the target matrix, column-major order) to a rotation matrix.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Matrix3<f64>> {
    let m = crate::nn::graph::rot6d_forward(r)?;
    Ok(Matrix3::from_row_slice(&m))
}

/// First two columns of a rotation matrix, flattened column-major.
pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let rtr = r.transpose() * r;
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((rtr[(i, j)] - target).abs());
        }
    }
    dev <= tol && (r.determinant() - 1.0).abs() <= tol.max(1e-9)
}

/// Angle in radians between two rotations.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let tr = (a.transpose() * b).trace();
    (((tr - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// p2d = scale * (R p)_xy + translation.
pub fn project_weak_perspective(
    points: &[[f64; 3]],
    rotation: &Matrix3<f64>,
    camera: &CameraParams,
) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| {
            let v = rotation * Vector3::new(p[0], p[1], p[2]);
            [
                camera.scale * v[0] + camera.translation[0],
                camera.scale * v[1] + camera.translation[1],
            ]
        })
        .collect()
}

/// Joint positions as means of fixed vertex-index groups (one ring per joint).
pub fn joints_from_mesh(vertices: &[[f64; 3]], rings: &[Vec<usize>]) -> Vec<[f64; 3]> {
    rings
        .iter()
        .map(|ring| {
            let mut acc = [0.0; 3];
            for &i in ring {
                acc[0] += vertices[i][0];
                acc[1] += vertices[i][1];
                acc[2] += vertices[i][2];
            }
            let n = ring.len() as f64;
            [acc[0] / n, acc[1] / n, acc[2] / n]
        })
        .collect()
}

/// Optimal similarity transform (rotation + scale + translation) aligning
/// `pred` to `gt` in the least-squares sense, via SVD of the centered
/// cross-covariance with reflection correction. Returns the transformed
/// points.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "procrustes: {} vs {} points",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    if n < 3 {
        return Err(Error::DegeneratePoints(format!("need >= 3 points, got {n}")));
    }
    let nf = n as f64;
    let mut cp = Vector3::zeros();
    let mut cg = Vector3::zeros();
    for i in 0..n {
        cp += Vector3::from_column_slice(&pred[i]);
        cg += Vector3::from_column_slice(&gt[i]);
    }
    cp /= nf;
    cg /= nf;

    // Cross-covariance H = sum g~ p~^T and pred spread for the scale.
    let mut h = Matrix3::zeros();
    let mut pred_ss = 0.0;
    for i in 0..n {
        let p = Vector3::from_column_slice(&pred[i]) - cp;
        let g = Vector3::from_column_slice(&gt[i]) - cg;
        h += g * p.transpose();
        pred_ss += p.dot(&p);
    }
    if pred_ss < 1e-30 {
        return Err(Error::DegeneratePoints("zero spread in prediction".into()));
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegeneratePoints("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::DegeneratePoints("svd failed".into()))?;
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let sing = Vector3::new(svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]);
    let trace_sd = sing[0] * d[(0, 0)] + sing[1] * d[(1, 1)] + sing[2] * d[(2, 2)];
    let scale = trace_sd / pred_ss;
    let t = cg - scale * (r * cp);

    Ok(pred
        .iter()
        .map(|p| {
            let v = scale * (r * Vector3::from_column_slice(p)) + t;
            [v[0], v[1], v[2]]
        })
        .collect())
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Slightly negative eigenvalues (>= -1e-10) are clamped to zero.
pub fn matrix_sqrt_psd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::Shape("matrix_sqrt_psd needs a square matrix".into()));
    }
    let mut max_asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((sigma[(i, j)] - sigma[(j, i)]).abs());
        }
    }
    if max_asym > 1e-9 {
        return Err(Error::Shape(format!(
            "matrix not symmetric (max asymmetry {max_asym:.3e})"
        )));
    }
    let eig = sigma.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-10 {
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    let mut scaled = q.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[(i, j)] *= vals[j];
        }
    }
    Ok(&scaled * q.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        loop {
            let r6 = [
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ];
            if let Ok(r) = rot6d_to_matrix(&r6) {
                return r;
            }
        }
    }

    #[test]
    fn rot6d_identity_basis_gives_identity() {
        let r = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((r - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn rot6d_recovers_rotation_from_its_first_two_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let rec = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
            assert!((rec - r).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rot6d_output_is_orthonormal_and_matches_qr_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let r6: [f64; 6] = std::array::from_fn(|_| rng.random::<f64>() * 4.0 - 2.0);
            let r = match rot6d_to_matrix(&r6) {
                Ok(r) => r,
                Err(_) => continue,
            };
            assert!(is_rotation(&r, 1e-12));

            // QR of the 3x2 matrix [r1 r2] spans the same first two columns
            // up to column signs.
            let m = nalgebra::Matrix3x2::from_columns(&[
                Vector3::new(r6[0], r6[1], r6[2]),
                Vector3::new(r6[3], r6[4], r6[5]),
            ]);
            let qr = m.qr();
            let q = qr.q();
            for col in 0..2 {
                let a = r.column(col);
                let b = q.column(col);
                let dot = a.dot(&b);
                let diff = if dot >= 0.0 { (a - b).norm() } else { (a + b).norm() };
                assert!(diff < 1e-9, "column {col} differs by {diff}");
            }
        }
    }

    #[test]
    fn rot6d_rejects_degenerate_inputs() {
        assert!(matches!(
            rot6d_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn projection_identity_drops_z() {
        let pts = vec![[0.3, -0.2, 0.9], [1.0, 2.0, -3.0]];
        let p = project_weak_perspective(&pts, &Matrix3::identity(), &CameraParams::identity());
        assert_eq!(p[0], [0.3, -0.2]);
        assert_eq!(p[1], [1.0, 2.0]);
    }

    #[test]
    fn projection_scale_doubles_centered_coordinates() {
        let pts = vec![[0.5, -1.5, 0.2]];
        let cam = CameraParams::new(2.0, [0.0, 0.0]).unwrap();
        let p = project_weak_perspective(&pts, &Matrix3::identity(), &cam);
        assert_eq!(p[0], [1.0, -3.0]);
    }

    #[test]
    fn projection_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(&mut rng);
        let cam = CameraParams::new(1.3, [0.2, -0.4]).unwrap();
        let pts: Vec<[f64; 3]> =
            (0..8).map(|_| std::array::from_fn(|_| rng.random::<f64>() - 0.5)).collect();
        let p = project_weak_perspective(&pts, &r, &cam);
        for (i, pt) in pts.iter().enumerate() {
            let mut x = 0.0;
            let mut y = 0.0;
            for k in 0..3 {
                x += r[(0, k)] * pt[k];
                y += r[(1, k)] * pt[k];
            }
            assert!((p[i][0] - (1.3 * x + 0.2)).abs() < 1e-12);
            assert!((p[i][1] - (1.3 * y - 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn joints_are_group_means_and_translate_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let verts: Vec<[f64; 3]> =
            (0..9).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
        let rings = vec![vec![0, 1, 2], vec![3, 4, 5, 6], vec![7, 8]];
        let joints = joints_from_mesh(&verts, &rings);
        for (ring, joint) in rings.iter().zip(&joints) {
            for axis in 0..3 {
                let mean =
                    ring.iter().map(|&i| verts[i][axis]).sum::<f64>() / ring.len() as f64;
                assert!((joint[axis] - mean).abs() < 1e-12);
            }
        }
        let shifted: Vec<[f64; 3]> =
            verts.iter().map(|v| [v[0] + 1.0, v[1] - 2.0, v[2] + 0.5]).collect();
        let joints2 = joints_from_mesh(&shifted, &rings);
        for (a, b) in joints.iter().zip(&joints2) {
            assert!((b[0] - a[0] - 1.0).abs() < 1e-12);
            assert!((b[1] - a[1] + 2.0).abs() < 1e-12);
            assert!((b[2] - a[2] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn procrustes_exactly_recovers_similarity_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let gt: Vec<[f64; 3]> =
                (0..12).map(|_| std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0)).collect();
            let r = random_rotation(&mut rng);
            let s = 0.2 + rng.random::<f64>() * 3.0;
            let t = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            let pred: Vec<[f64; 3]> = gt
                .iter()
                .map(|p| {
                    let v = s * (r * Vector3::from_column_slice(p)) + t;
                    [v[0], v[1], v[2]]
                })
                .collect();
            let aligned = procrustes_align(&pred, &gt).unwrap();
            let resid: f64 = aligned
                .iter()
                .zip(&gt)
                .map(|(a, g)| {
                    (a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2) + (a[2] - g[2]).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            assert!(resid < 1e-9, "residual {resid}");
        }
    }

    #[test]
    fn procrustes_identity_case_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt: Vec<[f64; 3]> =
            (0..5).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
        let aligned = procrustes_align(&gt, &gt).unwrap();
        for (a, g) in aligned.iter().zip(&gt) {
            for k in 0..3 {
                assert!((a[k] - g[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn procrustes_beats_random_similarity_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt: Vec<[f64; 3]> =
            (0..12).map(|_| std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0)).collect();
        let pred: Vec<[f64; 3]> =
            (0..12).map(|_| std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0)).collect();
        let aligned = procrustes_align(&pred, &gt).unwrap();
        let ss = |pts: &[[f64; 3]]| -> f64 {
            pts.iter()
                .zip(&gt)
                .map(|(a, g)| {
                    (a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2) + (a[2] - g[2]).powi(2)
                })
                .sum()
        };
        let best = ss(&aligned);
        for _ in 0..100_000 {
            let r = random_rotation(&mut rng);
            let s = 0.1 + rng.random::<f64>() * 3.0;
            let t = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let cand: Vec<[f64; 3]> = pred
                .iter()
                .map(|p| {
                    let v = s * (r * Vector3::from_column_slice(p)) + t;
                    [v[0], v[1], v[2]]
                })
                .collect();
            assert!(ss(&cand) >= best - 1e-9);
        }
    }

    #[test]
    fn procrustes_rejects_degenerate_configurations() {
        let pts = vec![[0.0, 0.0, 0.0]; 5];
        let gt: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(procrustes_align(&pts, &gt).is_err());
        assert!(procrustes_align(&gt[..2], &gt[..2]).is_err());
    }

    #[test]
    fn matrix_sqrt_diagonal_and_identity() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        let s = matrix_sqrt_psd(&i3).unwrap();
        assert!((&s - &i3).abs().max() < 1e-12);

        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn matrix_sqrt_squares_back_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let sigma = &a * a.transpose();
        let s = matrix_sqrt_psd(&sigma).unwrap();
        assert!(((&s * &s) - sigma).abs().max() < 1e-8);
    }

    #[test]
    fn matrix_sqrt_rejects_negative_definite() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(matrix_sqrt_psd(&d), Err(Error::NotPsd(_))));
    }

    #[test]
    fn camera_scale_must_be_positive() {
        assert!(CameraParams::new(0.0, [0.0, 0.0]).is_err());
        assert!(CameraParams::new(-1.0, [0.0, 0.0]).is_err());
    }
}
