//! Synthetic articulated-body data: forward kinematics over a fixed hinge
//! skeleton, canonicalization, and 2D keypoint observations with occlusion.

pub mod dataset;
pub mod skeleton;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{is_rotation, joints_from_mesh, project_weak_perspective, CameraParams};
use skeleton::Skeleton;

/// Coordinates written for occluded keypoints.
pub const OCCLUDED_SENTINEL: f64 = 0.0;

/// Pose, shape and global orientation of one body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    /// One hinge angle per non-root joint, radians.
    pub pose: Vec<f64>,
    /// Limb-length, girth and height multipliers.
    pub shape: [f64; 3],
    pub root_rotation: Matrix3<f64>,
}

impl BodyParams {
    pub fn rest(skeleton: &Skeleton) -> Self {
        BodyParams {
            pose: vec![0.0; skeleton.angle_count()],
            shape: [1.0; 3],
            root_rotation: Matrix3::identity(),
        }
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        if self.pose.len() != skeleton.angle_count() {
            return Err(Error::InvalidParams(format!(
                "expected {} pose angles, got {}",
                skeleton.angle_count(),
                self.pose.len()
            )));
        }
        for (i, a) in self.pose.iter().enumerate() {
            if !a.is_finite() || a.abs() > std::f64::consts::PI {
                return Err(Error::InvalidParams(format!(
                    "angle {i} = {a} outside [-pi, pi]"
                )));
            }
        }
        for (i, s) in self.shape.iter().enumerate() {
            if !s.is_finite() || !(0.5..=1.5).contains(s) {
                return Err(Error::InvalidParams(format!(
                    "shape factor {i} = {s} outside [0.5, 1.5]"
                )));
            }
        }
        if !is_rotation(&self.root_rotation, 1e-6) {
            return Err(Error::InvalidParams(
                "root_rotation is not a proper rotation".into(),
            ));
        }
        Ok(())
    }
}

/// Zero-translation, camera-facing body: V x 3 vertex coordinates in
/// body-height units with the root-part centroid at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalMesh {
    pub vertices: Vec<[f64; 3]>,
}

impl CanonicalMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }
}

/// 2D keypoints with visibility flags; occluded entries hold the sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub keypoints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Observation {
    pub fn keypoint_count(&self) -> usize {
        self.keypoints.len()
    }
}

fn axis_rotation(axis: &[f64; 3], angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    Matrix3::new(
        t * x * x + c,
        t * x * y - s * z,
        t * x * z + s * y,
        t * x * y + s * z,
        t * y * y + c,
        t * y * z - s * x,
        t * x * z - s * y,
        t * y * z + s * x,
        t * z * z + c,
    )
}

fn recenter_on_root_part(vertices: &mut [[f64; 3]], skeleton: &Skeleton) {
    let root = skeleton.root_part();
    let n = root.len() as f64;
    let mut c = [0.0; 3];
    for v in &vertices[root] {
        for k in 0..3 {
            c[k] += v[k];
        }
    }
    for k in 0..3 {
        c[k] /= n;
    }
    for v in vertices.iter_mut() {
        for k in 0..3 {
            v[k] -= c[k];
        }
    }
}

/// Deterministic forward kinematics over the hinge chain; produces the
/// canonical (identity root orientation) mesh with the root-part centroid
/// at the origin.
pub fn synth_body(params: &BodyParams, skeleton: &Skeleton) -> Result<CanonicalMesh> {
    params.validate(skeleton)?;
    let nj = skeleton.joint_count();
    let mut pos = vec![Vector3::<f64>::zeros(); nj];
    let mut rot = vec![Matrix3::<f64>::identity(); nj];
    for j in 1..nj {
        let joint = &skeleton.joints[j];
        let parent = joint.parent.expect("non-root joint has a parent");
        let off = joint.offset.apply(&params.shape);
        pos[j] = pos[parent] + rot[parent] * Vector3::from_column_slice(&off);
        let axis = joint.axis.expect("non-root joint has a hinge axis");
        rot[j] = rot[parent] * axis_rotation(&axis, params.pose[j - 1]);
    }

    let rings = skeleton.rings_per_segment;
    let mut vertices = Vec::with_capacity(skeleton.vertex_count());
    for seg in &skeleton.segments {
        let frame_pos = pos[seg.frame];
        let frame_rot = rot[seg.frame];
        let p0 = seg.p0.apply(&params.shape);
        let p1 = seg.p1.apply(&params.shape);
        let radius = seg.radius * params.shape[1];
        for r in 0..rings {
            let f = skeleton.ring_fraction(r);
            let center = [
                p0[0] + f * (p1[0] - p0[0]),
                p0[1] + f * (p1[1] - p0[1]),
                p0[2] + f * (p1[2] - p0[2]),
            ];
            for &(cu, sv) in skeleton.ring_dirs() {
                let local = Vector3::new(
                    center[0] + radius * (cu * seg.ring_u[0] + sv * seg.ring_v[0]),
                    center[1] + radius * (cu * seg.ring_u[1] + sv * seg.ring_v[1]),
                    center[2] + radius * (cu * seg.ring_u[2] + sv * seg.ring_v[2]),
                );
                let v = frame_pos + frame_rot * local;
                vertices.push([v[0], v[1], v[2]]);
            }
        }
    }
    recenter_on_root_part(&mut vertices, skeleton);
    Ok(CanonicalMesh { vertices })
}

/// Undo a global rotation and re-center on the root part:
/// R^T applied to all vertices, then the root-part centroid subtracted.
pub fn canonicalize(
    vertices: &[[f64; 3]],
    root_rotation: &Matrix3<f64>,
    skeleton: &Skeleton,
) -> Result<CanonicalMesh> {
    if !is_rotation(root_rotation, 1e-6) {
        return Err(Error::InvalidRotation(
            "root rotation is not orthonormal with det +1".into(),
        ));
    }
    let rt = root_rotation.transpose();
    let mut out: Vec<[f64; 3]> = vertices
        .iter()
        .map(|v| {
            let r = rt * Vector3::new(v[0], v[1], v[2]);
            [r[0], r[1], r[2]]
        })
        .collect();
    recenter_on_root_part(&mut out, skeleton);
    Ok(CanonicalMesh { vertices: out })
}

/// Project the mesh joints through the global rotation and weak-perspective
/// camera; keypoints listed in `occlusion` are hidden behind the sentinel.
pub fn render_observation(
    canonical: &CanonicalMesh,
    root_rotation: &Matrix3<f64>,
    camera: &CameraParams,
    occlusion: &[usize],
    skeleton: &Skeleton,
) -> Observation {
    let joints = joints_from_mesh(&canonical.vertices, skeleton.keypoint_rings());
    let projected = project_weak_perspective(&joints, root_rotation, camera);
    let k = projected.len();
    let mut keypoints = projected;
    let mut visible = vec![true; k];
    for &i in occlusion {
        if i < k {
            keypoints[i] = [OCCLUDED_SENTINEL, OCCLUDED_SENTINEL];
            visible[i] = false;
        }
    }
    Observation { keypoints, visible }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(skeleton: &Skeleton, rng: &mut impl Rng) -> BodyParams {
        let pose = skeleton.joints[1..]
            .iter()
            .map(|j| {
                let (lo, hi) = j.angle_range;
                lo + rng.random::<f64>() * (hi - lo)
            })
            .collect();
        let shape = std::array::from_fn(|_| 0.8 + rng.random::<f64>() * 0.4);
        BodyParams {
            pose,
            shape,
            root_rotation: Matrix3::identity(),
        }
    }

    /// Independent forward kinematics built on nalgebra isometries.
    fn fk_oracle(params: &BodyParams, sk: &Skeleton) -> Vec<[f64; 3]> {
        use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion};
        let nj = sk.joint_count();
        let mut world = vec![Isometry3::identity(); nj];
        for j in 1..nj {
            let joint = &sk.joints[j];
            let parent = joint.parent.unwrap();
            let off = joint.offset.apply(&params.shape);
            let axis = Unit::new_normalize(Vector3::from_column_slice(&joint.axis.unwrap()));
            let local = Isometry3::from_parts(
                Translation3::new(off[0], off[1], off[2]),
                UnitQuaternion::from_axis_angle(&axis, params.pose[j - 1]),
            );
            world[j] = world[parent] * local;
        }
        let mut verts = Vec::new();
        for seg in &sk.segments {
            let p0 = seg.p0.apply(&params.shape);
            let p1 = seg.p1.apply(&params.shape);
            let radius = seg.radius * params.shape[1];
            for r in 0..sk.rings_per_segment {
                let f = sk.ring_fraction(r);
                for &(cu, sv) in sk.ring_dirs() {
                    let local = nalgebra::Point3::new(
                        p0[0] + f * (p1[0] - p0[0])
                            + radius * (cu * seg.ring_u[0] + sv * seg.ring_v[0]),
                        p0[1] + f * (p1[1] - p0[1])
                            + radius * (cu * seg.ring_u[1] + sv * seg.ring_v[1]),
                        p0[2] + f * (p1[2] - p0[2])
                            + radius * (cu * seg.ring_u[2] + sv * seg.ring_v[2]),
                    );
                    let w = world[seg.frame] * local;
                    verts.push([w[0], w[1], w[2]]);
                }
            }
        }
        recenter_on_root_part(&mut verts, sk);
        verts
    }

    #[test]
    fn zero_pose_unit_shape_reproduces_the_rest_template() {
        let sk = Skeleton::default_body();
        let mesh = synth_body(&BodyParams::rest(&sk), &sk).unwrap();
        assert_eq!(mesh.vertex_count(), 216);
        // Straight-line reconstruction: joint walk plus ring offsets, no
        // rotation math at all, recentered on the root part.
        let mut expected = Vec::new();
        for seg in &sk.segments {
            let base = sk.rest_joint_position(seg.frame);
            let p0 = seg.p0.apply(&[1.0; 3]);
            let p1 = seg.p1.apply(&[1.0; 3]);
            for r in 0..sk.rings_per_segment {
                let f = sk.ring_fraction(r);
                for &(cu, sv) in sk.ring_dirs() {
                    let mut v = [0.0; 3];
                    for k in 0..3 {
                        v[k] = base[k]
                            + p0[k]
                            + f * (p1[k] - p0[k])
                            + seg.radius * (cu * seg.ring_u[k] + sv * seg.ring_v[k]);
                    }
                    expected.push(v);
                }
            }
        }
        recenter_on_root_part(&mut expected, &sk);
        for (idx, (a, e)) in mesh.vertices.iter().zip(&expected).enumerate() {
            for k in 0..3 {
                assert!((a[k] - e[k]).abs() < 1e-12, "vertex {idx} axis {k}");
            }
        }
    }

    #[test]
    fn negated_pose_mirrors_across_the_sagittal_plane() {
        let sk = Skeleton::default_body();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut params = random_pose(&sk, &mut rng);
            params.shape = [1.0; 3];
            let mesh = synth_body(&params, &sk).unwrap();

            let mut mirrored = params.clone();
            for a in &mut mirrored.pose {
                *a = -*a;
            }
            // Mirrored pose vector must be re-indexed through the joint map:
            // the left shoulder's negated angle drives the right shoulder.
            let mut remapped = mirrored.pose.clone();
            for j in 1..sk.joint_count() {
                remapped[sk.mirror_joints[j] - 1] = mirrored.pose[j - 1];
            }
            mirrored.pose = remapped;
            let mesh_m = synth_body(&mirrored, &sk).unwrap();

            let map = sk.mirror_vertex_map();
            for v in 0..sk.vertex_count() {
                let a = mesh.vertices[v];
                let b = mesh_m.vertices[map[v]];
                assert!((a[0] + b[0]).abs() < 1e-12);
                assert!((a[1] - b[1]).abs() < 1e-12);
                assert!((a[2] - b[2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fk_matches_independent_isometry_oracle() {
        let sk = Skeleton::default_body();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let params = random_pose(&sk, &mut rng);
            let mesh = synth_body(&params, &sk).unwrap();
            let oracle = fk_oracle(&params, &sk);
            for (a, b) in mesh.vertices.iter().zip(&oracle) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn synth_body_is_scale_equivariant() {
        let sk = Skeleton::default_body();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = random_pose(&sk, &mut rng);
        params.shape = [0.9, 1.0, 1.1];
        let base = synth_body(&params, &sk).unwrap();
        let c = 1.3;
        let mut scaled = params.clone();
        for s in &mut scaled.shape {
            *s *= c;
        }
        let mesh = synth_body(&scaled, &sk).unwrap();
        for (a, b) in base.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] * c - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn synth_body_root_part_is_centered() {
        let sk = Skeleton::default_body();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mesh = synth_body(&random_pose(&sk, &mut rng), &sk).unwrap();
        let root = sk.root_part();
        let mut c = [0.0; 3];
        for v in &mesh.vertices[root.clone()] {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        for k in 0..3 {
            assert!((c[k] / root.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let sk = Skeleton::default_body();
        let mut p = BodyParams::rest(&sk);
        p.pose[3] = 4.0;
        assert!(matches!(synth_body(&p, &sk), Err(Error::InvalidParams(_))));
        let mut p = BodyParams::rest(&sk);
        p.shape[1] = 0.2;
        assert!(matches!(synth_body(&p, &sk), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn canonicalize_identity_on_centered_mesh() {
        let sk = Skeleton::default_body();
        let mesh = synth_body(&BodyParams::rest(&sk), &sk).unwrap();
        let out = canonicalize(&mesh.vertices, &Matrix3::identity(), &sk).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&out.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canonicalize_inverts_a_rotation_exactly() {
        let sk = Skeleton::default_body();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mesh = synth_body(&random_pose(&sk, &mut rng), &sk).unwrap();
        let r = axis_rotation(&[0.0, 1.0, 0.0], 0.6)
            * axis_rotation(&[1.0, 0.0, 0.0], -0.2);
        let rotated: Vec<[f64; 3]> = mesh
            .vertices
            .iter()
            .map(|v| {
                let w = r * Vector3::new(v[0], v[1], v[2]);
                [w[0], w[1], w[2]]
            })
            .collect();
        let rec = canonicalize(&rotated, &r, &sk).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&rec.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canonicalize_recovers_from_arbitrary_rigid_transform() {
        let sk = Skeleton::default_body();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mesh = synth_body(&random_pose(&sk, &mut rng), &sk).unwrap();
        let r = axis_rotation(&[0.0, 0.0, 1.0], 1.1) * axis_rotation(&[0.0, 1.0, 0.0], -0.8);
        let t = Vector3::new(0.4, -1.2, 2.5);
        let moved: Vec<[f64; 3]> = mesh
            .vertices
            .iter()
            .map(|v| {
                let w = r * Vector3::new(v[0], v[1], v[2]) + t;
                [w[0], w[1], w[2]]
            })
            .collect();
        let rec = canonicalize(&moved, &r, &sk).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&rec.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn canonicalize_rejects_non_orthonormal_matrices() {
        let sk = Skeleton::default_body();
        let mesh = synth_body(&BodyParams::rest(&sk), &sk).unwrap();
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            canonicalize(&mesh.vertices, &bad, &sk),
            Err(Error::InvalidRotation(_))
        ));
    }

    #[test]
    fn observation_identity_camera_drops_z() {
        let sk = Skeleton::default_body();
        let mesh = synth_body(&BodyParams::rest(&sk), &sk).unwrap();
        let obs = render_observation(
            &mesh,
            &Matrix3::identity(),
            &CameraParams::identity(),
            &[],
            &sk,
        );
        let joints = joints_from_mesh(&mesh.vertices, sk.keypoint_rings());
        assert_eq!(obs.keypoint_count(), 12);
        for (kp, j) in obs.keypoints.iter().zip(&joints) {
            assert_eq!(kp[0], j[0]);
            assert_eq!(kp[1], j[1]);
        }
        assert!(obs.visible.iter().all(|&v| v));
    }

    #[test]
    fn full_occlusion_hides_everything() {
        let sk = Skeleton::default_body();
        let mesh = synth_body(&BodyParams::rest(&sk), &sk).unwrap();
        let all: Vec<usize> = (0..12).collect();
        let obs = render_observation(
            &mesh,
            &Matrix3::identity(),
            &CameraParams::identity(),
            &all,
            &sk,
        );
        assert!(obs.visible.iter().all(|&v| !v));
        assert!(obs
            .keypoints
            .iter()
            .all(|kp| kp[0] == OCCLUDED_SENTINEL && kp[1] == OCCLUDED_SENTINEL));
    }

    #[test]
    fn depth_reflected_arm_yields_identical_observations() {
        // Shoulder and elbow hinges lie in the image plane, so negating both
        // angles flips the arm in depth while every projected joint stays put.
        let sk = Skeleton::default_body();
        let mut up = BodyParams::rest(&sk);
        up.pose[3] = 0.9; // l_shoulder
        up.pose[4] = 0.5; // l_elbow
        let mut down = BodyParams::rest(&sk);
        down.pose[3] = -0.9;
        down.pose[4] = -0.5;

        let mesh_up = synth_body(&up, &sk).unwrap();
        let mesh_down = synth_body(&down, &sk).unwrap();
        let diff: f64 = mesh_up
            .vertices
            .iter()
            .zip(&mesh_down.vertices)
            .map(|(a, b)| {
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum();
        assert!(diff > 0.1, "meshes must genuinely differ, got {diff}");

        let cam = CameraParams::identity();
        let obs_up = render_observation(&mesh_up, &Matrix3::identity(), &cam, &[], &sk);
        let obs_down = render_observation(&mesh_down, &Matrix3::identity(), &cam, &[], &sk);
        for (a, b) in obs_up.keypoints.iter().zip(&obs_down.keypoints) {
            assert!((a[0] - b[0]).abs() < 1e-12);
            assert!((a[1] - b[1]).abs() < 1e-12);
        }
    }
}
