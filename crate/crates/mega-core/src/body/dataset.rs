//! Dataset records and the MEGADATA text format.
//!
//! Layout: header `MEGADATA v1 V=<int> K=<int> N_records=<int>`, then three
//! lines per record (pose/shape/rotation/camera, vertices, observation).
//! Reals are written with 9 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::skeleton::Skeleton;
use crate::body::{render_observation, synth_body, BodyParams, CanonicalMesh, Observation};
use crate::error::{Error, Result};
use crate::geom::CameraParams;

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub params: BodyParams,
    pub canonical: CanonicalMesh,
    pub camera: CameraParams,
    pub observation: Observation,
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Draw i.i.d. records. Parameter distributions: hinge angles uniform in
/// each joint's range, shapes uniform in [0.8, 1.2], root rotation a yaw in
/// [-pi/4, pi/4] composed with small pitch/roll in [-0.15, 0.15], camera
/// scale in [0.9, 1.1] with translation in [-0.1, 0.1]^2, and per-keypoint
/// occlusion Bernoulli(occlusion_rate).
pub fn make_dataset(
    skeleton: &Skeleton,
    count: usize,
    occlusion_rate: f64,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&occlusion_rate) {
        return Err(Error::Config(format!(
            "occlusion_rate {occlusion_rate} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let pose: Vec<f64> = skeleton.joints[1..]
            .iter()
            .map(|j| {
                let (lo, hi) = j.angle_range;
                lo + rng.random::<f64>() * (hi - lo)
            })
            .collect();
        let shape: [f64; 3] = std::array::from_fn(|_| 0.8 + rng.random::<f64>() * 0.4);
        let yaw = (rng.random::<f64>() - 0.5) * std::f64::consts::FRAC_PI_2;
        let pitch = (rng.random::<f64>() - 0.5) * 0.3;
        let roll = (rng.random::<f64>() - 0.5) * 0.3;
        let root_rotation = rot_y(yaw) * rot_x(pitch) * rot_z(roll);
        let params = BodyParams {
            pose,
            shape,
            root_rotation,
        };
        let canonical = synth_body(&params, skeleton)?;
        let camera = CameraParams::new(
            0.9 + rng.random::<f64>() * 0.2,
            [
                (rng.random::<f64>() - 0.5) * 0.2,
                (rng.random::<f64>() - 0.5) * 0.2,
            ],
        )?;
        let occlusion: Vec<usize> = (0..skeleton.joint_count())
            .filter(|_| rng.random::<f64>() < occlusion_rate)
            .collect();
        let observation =
            render_observation(&canonical, &params.root_rotation, &camera, &occlusion, skeleton);
        records.push(DatasetRecord {
            params,
            canonical,
            camera,
            observation,
        });
    }
    Ok(records)
}

fn fmt(v: f64) -> String {
    format!("{:.8e}", v)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("cannot write an empty dataset".into()))?;
    let v = first.canonical.vertex_count();
    let k = first.observation.keypoint_count();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| -> Result<()> {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))
    };
    emit(format!("MEGADATA v1 V={v} K={k} N_records={}", records.len()))?;
    for rec in records {
        let mut meta: Vec<String> = rec.params.pose.iter().map(|a| fmt(*a)).collect();
        meta.extend(rec.params.shape.iter().map(|s| fmt(*s)));
        for i in 0..3 {
            for j in 0..3 {
                meta.push(fmt(rec.params.root_rotation[(i, j)]));
            }
        }
        meta.push(fmt(rec.camera.scale));
        meta.push(fmt(rec.camera.translation[0]));
        meta.push(fmt(rec.camera.translation[1]));
        emit(meta.join(" "))?;

        let verts: Vec<String> = rec
            .canonical
            .vertices
            .iter()
            .flat_map(|p| p.iter().map(|c| fmt(*c)))
            .collect();
        emit(verts.join(" "))?;

        let mut obs = Vec::with_capacity(3 * k);
        for i in 0..k {
            obs.push(fmt(rec.observation.keypoints[i][0]));
            obs.push(fmt(rec.observation.keypoints[i][1]));
            obs.push(if rec.observation.visible[i] { "1" } else { "0" }.to_string());
        }
        emit(obs.join(" "))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let corrupt = |reason: &str| Error::CorruptDataset {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| corrupt("empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let mut v = None;
    let mut k = None;
    let mut n = None;
    let mut words = header.split_whitespace();
    if words.next() != Some("MEGADATA") || words.next() != Some("v1") {
        return Err(corrupt("bad magic, expected `MEGADATA v1`"));
    }
    for w in words {
        let (key, val) = w.split_once('=').ok_or_else(|| corrupt("bad header field"))?;
        let val: usize = val.parse().map_err(|_| corrupt("bad header integer"))?;
        match key {
            "V" => v = Some(val),
            "K" => k = Some(val),
            "N_records" => n = Some(val),
            _ => return Err(corrupt("unknown header field")),
        }
    }
    let (v, k, n) = match (v, k, n) {
        (Some(v), Some(k), Some(n)) => (v, k, n),
        _ => return Err(corrupt("missing V/K/N_records")),
    };

    let mut next_values = |expected: usize, what: &str| -> Result<Vec<f64>> {
        let line = lines
            .next()
            .ok_or_else(|| corrupt(&format!("truncated before {what}")))?
            .map_err(|e| Error::io(path, e))?;
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(|t| t.parse::<f64>()).collect();
        let vals = vals.map_err(|_| corrupt(&format!("non-numeric value in {what}")))?;
        if vals.len() != expected {
            return Err(corrupt(&format!(
                "{what}: expected {expected} values, got {}",
                vals.len()
            )));
        }
        Ok(vals)
    };

    let n_pose = 11;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let meta = next_values(n_pose + 3 + 9 + 3, "record metadata")?;
        let pose = meta[0..n_pose].to_vec();
        let shape = [meta[n_pose], meta[n_pose + 1], meta[n_pose + 2]];
        let root_rotation = Matrix3::from_row_slice(&meta[n_pose + 3..n_pose + 12]);
        let camera = CameraParams::new(
            meta[n_pose + 12],
            [meta[n_pose + 13], meta[n_pose + 14]],
        )?;

        let vert_vals = next_values(3 * v, "vertices")?;
        let vertices = vert_vals
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();

        let obs_vals = next_values(3 * k, "observation")?;
        let mut keypoints = Vec::with_capacity(k);
        let mut visible = Vec::with_capacity(k);
        for c in obs_vals.chunks_exact(3) {
            keypoints.push([c[0], c[1]]);
            visible.push(c[2] != 0.0);
        }

        records.push(DatasetRecord {
            params: BodyParams {
                pose,
                shape,
                root_rotation,
            },
            canonical: CanonicalMesh { vertices },
            camera,
            observation: Observation { keypoints, visible },
        });
    }
    Ok(records)
}
