//! Fixed articulated-body template: a 12-joint hinge chain with cylindrical
//! vertex rings on each bone segment. All lengths are normalized so the rest
//! height of the unit-shape body is exactly 1 (coordinates are in body-height
//! units).
//!
//! Joint chain: root -> waist (z-lean) -> { pelvis (y-twist) -> hips -> knees,
//! spine (z-lean) -> shoulders -> elbows }. Every segment sits at least two
//! independent hinge axes deep, so each vertex part varies with full rank
//! across a posed dataset. Hinge axes satisfy the sagittal-mirror condition
//! (mirror image of axis = axis of the mirrored joint), which makes pose
//! negation equivalent to mirroring the mesh.

/// Vertices per ring. Ring offsets are exact constants so that the three
/// radial directions cancel exactly and every ring mean lies on the bone axis.
pub const RING_VERTS: usize = 3;

/// (cos, sin) pairs at 90, 210 and 330 degrees.
const RING_DIRS: [(f64, f64); RING_VERTS] = [
    (0.0, 1.0),
    (-0.8660254037844386, -0.5),
    (0.8660254037844386, -0.5),
];

/// Which shape factor scales a template length.
/// Factor order matches `BodyParams::shape`: limb, girth, height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Limb,
    Girth,
    Height,
}

impl Factor {
    fn apply(self, shape: &[f64; 3]) -> f64 {
        match self {
            Factor::Limb => shape[0],
            Factor::Girth => shape[1],
            Factor::Height => shape[2],
        }
    }
}

/// A template vector with one shape factor per component.
#[derive(Debug, Clone, Copy)]
pub struct ScaledVec {
    pub v: [f64; 3],
    pub f: [Factor; 3],
}

impl ScaledVec {
    pub fn apply(&self, shape: &[f64; 3]) -> [f64; 3] {
        [
            self.v[0] * self.f[0].apply(shape),
            self.v[1] * self.f[1].apply(shape),
            self.v[2] * self.f[2].apply(shape),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Rest offset from the parent joint.
    pub offset: ScaledVec,
    /// Hinge axis (unit, in the parent frame); None for the root.
    pub axis: Option<[f64; 3]>,
    /// Sampling range for the hinge angle, radians.
    pub angle_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: &'static str,
    /// Joint whose cumulative rotation carries this segment.
    pub frame: usize,
    /// Ring axis endpoints in the frame joint's local coordinates.
    pub p0: ScaledVec,
    pub p1: ScaledVec,
    pub radius: f64,
    /// In-plane ring directions (unit vectors, local frame).
    pub ring_u: [f64; 3],
    pub ring_v: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
    pub segments: Vec<Segment>,
    pub rings_per_segment: usize,
    keypoint_rings: Vec<Vec<usize>>,
    /// joint j of the template maps to mirror_joints[j] under an x-flip.
    pub mirror_joints: Vec<usize>,
    mirror_vertices: Vec<usize>,
}

/// All raw lengths below are divided by this so rest height is exactly 1.
const RAW_HEIGHT: f64 = 1.26;

const fn h(x: f64) -> f64 {
    x / RAW_HEIGHT
}

fn sv(v: [f64; 3], f: [Factor; 3]) -> ScaledVec {
    ScaledVec {
        v: [h(v[0]), h(v[1]), h(v[2])],
        f,
    }
}

use Factor::{Girth, Height, Limb};

impl Skeleton {
    /// The default template: V = 36 * rings_per_segment vertices (216 with 6).
    pub fn default_body() -> Self {
        Self::with_rings(6)
    }

    pub fn with_rings(rings_per_segment: usize) -> Self {
        assert!(rings_per_segment >= 2, "need at least 2 rings per segment");
        let joints = vec![
            Joint {
                name: "root",
                parent: None,
                offset: sv([0.0; 3], [Height; 3]),
                axis: None,
                angle_range: (0.0, 0.0),
            },
            Joint {
                name: "waist",
                parent: Some(0),
                offset: sv([0.0; 3], [Height; 3]),
                axis: Some([0.0, 0.0, 1.0]),
                angle_range: (-0.3, 0.3),
            },
            Joint {
                name: "pelvis",
                parent: Some(1),
                offset: sv([0.0, -0.04, 0.0], [Girth, Height, Height]),
                axis: Some([0.0, 1.0, 0.0]),
                angle_range: (-0.5, 0.5),
            },
            Joint {
                name: "spine",
                parent: Some(1),
                offset: sv([0.0, 0.12, 0.0], [Girth, Height, Height]),
                axis: Some([0.0, 0.0, 1.0]),
                angle_range: (-0.3, 0.3),
            },
            Joint {
                name: "l_shoulder",
                parent: Some(3),
                offset: sv([0.16, 0.24, 0.0], [Girth, Height, Height]),
                axis: Some([0.0, 1.0, 0.0]),
                angle_range: (-1.2, 1.2),
            },
            Joint {
                name: "l_elbow",
                parent: Some(4),
                offset: sv([0.26, 0.0, 0.0], [Limb; 3]),
                axis: Some([0.0, 1.0, 0.0]),
                angle_range: (-1.8, 1.8),
            },
            Joint {
                name: "r_shoulder",
                parent: Some(3),
                offset: sv([-0.16, 0.24, 0.0], [Girth, Height, Height]),
                axis: Some([0.0, 1.0, 0.0]),
                angle_range: (-1.2, 1.2),
            },
            Joint {
                name: "r_elbow",
                parent: Some(6),
                offset: sv([-0.26, 0.0, 0.0], [Limb; 3]),
                axis: Some([0.0, 1.0, 0.0]),
                angle_range: (-1.8, 1.8),
            },
            Joint {
                name: "l_hip",
                parent: Some(2),
                offset: sv([0.09, -0.02, 0.0], [Girth, Height, Height]),
                axis: Some([1.0, 0.0, 0.0]),
                angle_range: (-1.0, 1.0),
            },
            Joint {
                name: "l_knee",
                parent: Some(8),
                offset: sv([0.0, -0.30, 0.0], [Limb; 3]),
                axis: Some([1.0, 0.0, 0.0]),
                angle_range: (-1.5, 1.5),
            },
            Joint {
                name: "r_hip",
                parent: Some(2),
                offset: sv([-0.09, -0.02, 0.0], [Girth, Height, Height]),
                axis: Some([-1.0, 0.0, 0.0]),
                angle_range: (-1.0, 1.0),
            },
            Joint {
                name: "r_knee",
                parent: Some(10),
                offset: sv([0.0, -0.30, 0.0], [Limb; 3]),
                axis: Some([-1.0, 0.0, 0.0]),
                angle_range: (-1.5, 1.5),
            },
        ];

        // Ring planes: vertical bones use (x, z), horizontal bones (y, z).
        let xz = ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let yz = ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        let vertical = |name, frame, p0: [f64; 3], p1: [f64; 3], r: f64, f: Factor| Segment {
            name,
            frame,
            p0: sv(p0, [Girth, f, f]),
            p1: sv(p1, [Girth, f, f]),
            radius: h(r),
            ring_u: xz.0,
            ring_v: xz.1,
        };
        let horizontal = |name, frame, p0: [f64; 3], p1: [f64; 3], r: f64| Segment {
            name,
            frame,
            p0: sv(p0, [Limb; 3]),
            p1: sv(p1, [Limb; 3]),
            radius: h(r),
            ring_u: yz.0,
            ring_v: yz.1,
        };
        let segments = vec![
            vertical("pelvis", 2, [0.0, -0.05, 0.0], [0.0, 0.13, 0.0], 0.07, Height),
            vertical("lower_torso", 3, [0.0, -0.09, 0.0], [0.0, 0.0, 0.0], 0.10, Height),
            vertical("upper_torso", 3, [0.0, 0.0, 0.0], [0.0, 0.22, 0.0], 0.11, Height),
            vertical("head", 3, [0.0, 0.26, 0.0], [0.0, 0.46, 0.0], 0.065, Height),
            horizontal("l_upper_arm", 4, [0.0; 3], [0.26, 0.0, 0.0], 0.045),
            horizontal("l_forearm", 5, [0.0; 3], [0.28, 0.0, 0.0], 0.04),
            horizontal("r_upper_arm", 6, [0.0; 3], [-0.26, 0.0, 0.0], 0.045),
            horizontal("r_forearm", 7, [0.0; 3], [-0.28, 0.0, 0.0], 0.04),
            vertical("l_thigh", 8, [0.0; 3], [0.0, -0.30, 0.0], 0.065, Limb),
            vertical("l_shin", 9, [0.0; 3], [0.0, -0.32, 0.0], 0.05, Limb),
            vertical("r_thigh", 10, [0.0; 3], [0.0, -0.30, 0.0], 0.065, Limb),
            vertical("r_shin", 11, [0.0; 3], [0.0, -0.32, 0.0], 0.05, Limb),
        ];
        let mirror_joints = vec![0, 1, 2, 3, 6, 7, 4, 5, 10, 11, 8, 9];
        let mirror_segments = [0, 1, 2, 3, 6, 7, 4, 5, 10, 11, 8, 9];

        let mut sk = Skeleton {
            joints,
            segments,
            rings_per_segment,
            keypoint_rings: Vec::new(),
            mirror_joints,
            mirror_vertices: Vec::new(),
        };
        sk.keypoint_rings = sk.compute_keypoint_rings();
        sk.mirror_vertices = sk.compute_mirror_vertices(&mirror_segments);
        sk
    }

    pub fn vertex_count(&self) -> usize {
        self.segments.len() * self.rings_per_segment * RING_VERTS
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Hinge angles, one per non-root joint.
    pub fn angle_count(&self) -> usize {
        self.joints.len() - 1
    }

    /// Fraction along the segment axis for ring i (centered bins).
    pub fn ring_fraction(&self, ring: usize) -> f64 {
        (2 * ring + 1) as f64 / (2 * self.rings_per_segment) as f64
    }

    pub fn ring_dirs(&self) -> &'static [(f64, f64); RING_VERTS] {
        &RING_DIRS
    }

    /// Vertex indices of the root segment; its centroid defines the canonical
    /// translation.
    pub fn root_part(&self) -> std::ops::Range<usize> {
        0..self.rings_per_segment * RING_VERTS
    }

    pub fn segment_of_vertex(&self, v: usize) -> usize {
        v / (self.rings_per_segment * RING_VERTS)
    }

    /// Two segments count as adjacent bones when their frame joints are at
    /// most two edges apart in the kinematic tree.
    pub fn segments_adjacent(&self, a: usize, b: usize) -> bool {
        if a == b {
            return true;
        }
        let fa = self.segments[a].frame;
        let fb = self.segments[b].frame;
        self.joint_distance(fa, fb) <= 2
    }

    fn joint_distance(&self, a: usize, b: usize) -> usize {
        let path_to_root = |mut j: usize| {
            let mut path = vec![j];
            while let Some(p) = self.joints[j].parent {
                path.push(p);
                j = p;
            }
            path
        };
        let pa = path_to_root(a);
        let pb = path_to_root(b);
        // Distance through the lowest common ancestor.
        let mut best = usize::MAX;
        for (i, x) in pa.iter().enumerate() {
            if let Some(j) = pb.iter().position(|y| y == x) {
                best = best.min(i + j);
            }
        }
        best
    }

    /// Rest position of a joint (unit shape), by walking offsets.
    pub fn rest_joint_position(&self, j: usize) -> [f64; 3] {
        let shape = [1.0; 3];
        let mut pos = [0.0; 3];
        let mut cur = j;
        loop {
            let off = self.joints[cur].offset.apply(&shape);
            for k in 0..3 {
                pos[k] += off[k];
            }
            match self.joints[cur].parent {
                Some(p) => cur = p,
                None => break,
            }
        }
        pos
    }

    /// Per-joint keypoint rings: the ring whose rest center is nearest the
    /// joint, ties to the lowest vertex index.
    pub fn keypoint_rings(&self) -> &[Vec<usize>] {
        &self.keypoint_rings
    }

    fn compute_keypoint_rings(&self) -> Vec<Vec<usize>> {
        let shape = [1.0; 3];
        let rv = RING_VERTS;
        let mut out = Vec::with_capacity(self.joints.len());
        for j in 0..self.joints.len() {
            let jp = self.rest_joint_position(j);
            let mut best = (f64::INFINITY, 0usize);
            for (s, seg) in self.segments.iter().enumerate() {
                let base = self.rest_joint_position(seg.frame);
                let p0 = seg.p0.apply(&shape);
                let p1 = seg.p1.apply(&shape);
                for r in 0..self.rings_per_segment {
                    let f = self.ring_fraction(r);
                    let mut d2 = 0.0;
                    for k in 0..3 {
                        let c = base[k] + p0[k] + f * (p1[k] - p0[k]);
                        d2 += (c - jp[k]) * (c - jp[k]);
                    }
                    if d2 < best.0 - 1e-15 {
                        best = (d2, (s * self.rings_per_segment + r) * rv);
                    }
                }
            }
            out.push((best.1..best.1 + rv).collect());
        }
        out
    }

    /// Vertex index map under the sagittal mirror (x -> -x).
    pub fn mirror_vertex_map(&self) -> &[usize] {
        &self.mirror_vertices
    }

    fn compute_mirror_vertices(&self, mirror_segments: &[usize; 12]) -> Vec<usize> {
        let rv = RING_VERTS;
        let per_seg = self.rings_per_segment * rv;
        let mut map = vec![0usize; self.vertex_count()];
        for (s, seg) in self.segments.iter().enumerate() {
            let ms = mirror_segments[s];
            for r in 0..self.rings_per_segment {
                for k in 0..rv {
                    let src = s * per_seg + r * rv + k;
                    // Ring plane (x,z): angles 90/210/330 swap 210<->330 under
                    // an x-flip. Ring plane (y,z) has no x component.
                    let mk = if seg.ring_u[0] != 0.0 {
                        match k {
                            0 => 0,
                            1 => 2,
                            _ => 1,
                        }
                    } else {
                        k
                    };
                    map[src] = ms * per_seg + r * rv + mk;
                }
            }
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_has_expected_sizes() {
        let sk = Skeleton::default_body();
        assert_eq!(sk.vertex_count(), 216);
        assert_eq!(sk.joint_count(), 12);
        assert_eq!(sk.angle_count(), 11);
        assert_eq!(sk.keypoint_rings().len(), 12);
        for ring in sk.keypoint_rings() {
            assert_eq!(ring.len(), RING_VERTS);
        }
    }

    #[test]
    fn rest_height_is_normalized_to_one() {
        let sk = Skeleton::default_body();
        let head_top = sk.rest_joint_position(3)[1] + sk.segments[3].p1.apply(&[1.0; 3])[1];
        let foot = sk.rest_joint_position(9)[1] + sk.segments[9].p1.apply(&[1.0; 3])[1];
        assert!((head_top - foot - 1.0).abs() < 1e-12, "height {}", head_top - foot);
    }

    #[test]
    fn template_is_left_right_symmetric() {
        let sk = Skeleton::default_body();
        for (j, &mj) in sk.mirror_joints.iter().enumerate() {
            let a = sk.joints[j].offset.v;
            let b = sk.joints[mj].offset.v;
            assert_eq!(a[0], -b[0]);
            assert_eq!(a[1], b[1]);
            assert_eq!(a[2], b[2]);
            // Mirror condition on hinge axes: a_sigma = (-ax, ay, az).
            if let (Some(aa), Some(ab)) = (sk.joints[j].axis, sk.joints[mj].axis) {
                assert_eq!(aa[0], -ab[0]);
                assert_eq!(aa[1], ab[1]);
                assert_eq!(aa[2], ab[2]);
            }
        }
    }

    #[test]
    fn mirror_vertex_map_is_an_involution() {
        let sk = Skeleton::default_body();
        let map = sk.mirror_vertex_map();
        for v in 0..sk.vertex_count() {
            assert_eq!(map[map[v]], v);
        }
    }

    #[test]
    fn ring_directions_cancel_exactly() {
        let (mut cx, mut sx) = (0.0, 0.0);
        for (c, s) in RING_DIRS {
            cx += c;
            sx += s;
        }
        assert_eq!(cx, 0.0);
        assert_eq!(sx, 0.0);
    }

    #[test]
    fn every_joint_is_at_least_two_hinges_deep_through_its_segments() {
        // Covariance rank of every vertex part depends on the segment frame
        // having either two up-chain hinge axes or a shape-scaled frame
        // position; the chain guarantees it structurally.
        let sk = Skeleton::default_body();
        for seg in &sk.segments {
            let mut hinges = 0;
            let mut j = seg.frame;
            loop {
                if sk.joints[j].axis.is_some() {
                    hinges += 1;
                }
                match sk.joints[j].parent {
                    Some(p) => j = p,
                    None => break,
                }
            }
            assert!(hinges >= 2, "segment {} has {} hinges up-chain", seg.name, hinges);
        }
    }
}
