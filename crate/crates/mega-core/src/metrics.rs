//! Evaluation metrics: PVE / MPJPE / PA-MPJPE in body-height units x 1000,
//! best-of-Q tables, average pairwise distance, Frechet distance between
//! latent Gaussians, per-vertex standard deviation and mean-mesh analysis.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::body::CanonicalMesh;
use crate::error::{Error, Result};
use crate::geom::{joints_from_mesh, matrix_sqrt_psd, procrustes_align};

/// Scale from body-height units to the reported metric unit.
pub const METRIC_SCALE: f64 = 1000.0;

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// (PVE, MPJPE, PA-MPJPE) for one prediction.
///
/// PVE is the mean vertex distance. The joint metrics are quadratic-mean
/// (RMS) joint distances: MPJPE after root-joint translation alignment,
/// PA-MPJPE after the optimal similarity alignment. The quadratic mean is
/// what the Procrustes objective minimizes, so PA-MPJPE <= MPJPE holds for
/// every input pair, not just statistically.
pub fn mesh_errors(
    pred: &CanonicalMesh,
    gt: &CanonicalMesh,
    joint_rings: &[Vec<usize>],
) -> Result<(f64, f64, f64)> {
    if pred.vertex_count() != gt.vertex_count() {
        return Err(Error::Shape(format!(
            "vertex counts {} vs {}",
            pred.vertex_count(),
            gt.vertex_count()
        )));
    }
    let v = pred.vertex_count() as f64;
    let pve = pred
        .vertices
        .iter()
        .zip(&gt.vertices)
        .map(|(a, b)| dist3(a, b))
        .sum::<f64>()
        / v;

    let jp = joints_from_mesh(&pred.vertices, joint_rings);
    let jg = joints_from_mesh(&gt.vertices, joint_rings);
    let offset = [
        jg[0][0] - jp[0][0],
        jg[0][1] - jp[0][1],
        jg[0][2] - jp[0][2],
    ];
    let k = jp.len() as f64;
    let mpjpe = (jp
        .iter()
        .zip(&jg)
        .map(|(a, b)| {
            let d = dist3(
                &[a[0] + offset[0], a[1] + offset[1], a[2] + offset[2]],
                b,
            );
            d * d
        })
        .sum::<f64>()
        / k)
        .sqrt();

    let aligned = procrustes_align(&jp, &jg)?;
    let pa = (aligned
        .iter()
        .zip(&jg)
        .map(|(a, b)| {
            let d = dist3(a, b);
            d * d
        })
        .sum::<f64>()
        / k)
        .sqrt();

    Ok((pve * METRIC_SCALE, mpjpe * METRIC_SCALE, pa * METRIC_SCALE))
}

/// Per-item minimum over the first q samples, for each q in `q_list`, plus
/// the relative improvement (%) from the first to the last q.
pub struct BestOfQ {
    pub q_list: Vec<usize>,
    /// `table[item][qi]` = min over the first q_list[qi] samples.
    pub table: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub improvement_percent: f64,
}

pub fn best_of_q(errors_per_item: &[Vec<f64>], q_list: &[usize]) -> Result<BestOfQ> {
    if errors_per_item.is_empty() || q_list.is_empty() {
        return Err(Error::Config("best_of_q needs items and a q list".into()));
    }
    let q_max = *q_list.iter().max().unwrap();
    for (i, errs) in errors_per_item.iter().enumerate() {
        if errs.len() < q_max {
            return Err(Error::Config(format!(
                "item {i} has {} samples, need {q_max}",
                errs.len()
            )));
        }
    }
    if q_list.iter().any(|&q| q == 0) {
        return Err(Error::Config("q values must be >= 1".into()));
    }
    let table: Vec<Vec<f64>> = errors_per_item
        .iter()
        .map(|errs| {
            q_list
                .iter()
                .map(|&q| errs[..q].iter().cloned().fold(f64::INFINITY, f64::min))
                .collect()
        })
        .collect();
    let n = table.len() as f64;
    let means: Vec<f64> = (0..q_list.len())
        .map(|qi| table.iter().map(|row| row[qi]).sum::<f64>() / n)
        .collect();
    let first = means[0];
    let last = *means.last().unwrap();
    let improvement_percent = if first == 0.0 {
        0.0
    } else {
        (first - last) / first * 100.0
    };
    Ok(BestOfQ {
        q_list: q_list.to_vec(),
        table,
        means,
        improvement_percent,
    })
}

/// Average pairwise joint distance over all unordered sample pairs,
/// in metric units.
pub fn apd(samples: &[CanonicalMesh], joint_rings: &[Vec<usize>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let joints: Vec<Vec<[f64; 3]>> = samples
        .iter()
        .map(|m| joints_from_mesh(&m.vertices, joint_rings))
        .collect();
    let k = joint_rings.len() as f64;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..joints.len() {
        for b in (a + 1)..joints.len() {
            total += joints[a]
                .iter()
                .zip(&joints[b])
                .map(|(x, y)| dist3(x, y))
                .sum::<f64>()
                / k;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64 * METRIC_SCALE)
}

/// Frechet distance between Gaussian fits of two latent sets (rows are
/// samples). Uses the symmetric form
/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)
/// with sample covariances (1/(n-1)).
pub fn fid(latents_a: &[Vec<f64>], latents_b: &[Vec<f64>]) -> Result<f64> {
    let d = latents_a
        .first()
        .ok_or(Error::InsufficientSamples { needed: 2, got: 0 })?
        .len();
    for set in [latents_a, latents_b] {
        if set.len() <= d {
            return Err(Error::Config(format!(
                "need more than d = {d} samples for a full-rank covariance, got {}",
                set.len()
            )));
        }
        if set.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged latent rows".into()));
        }
    }
    let stats = |set: &[Vec<f64>]| -> (Vec<f64>, DMatrix<f64>) {
        let n = set.len();
        let mut mean = vec![0.0; d];
        for row in set {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = DMatrix::zeros(d, d);
        for row in set {
            for i in 0..d {
                let ci = row[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += ci * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        (mean, cov)
    };
    let (mu_a, sig_a) = stats(latents_a);
    let (mu_b, sig_b) = stats(latents_b);
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let root_a = matrix_sqrt_psd(&sig_a)?;
    let inner = &root_a * &sig_b * &root_a;
    // Symmetrize away rounding before the second root.
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?;
    let trace_term = sig_a.trace() + sig_b.trace() - 2.0 * cross.trace();
    Ok(mean_term + trace_term)
}

/// Per-vertex standard deviation across samples: sqrt of the mean over the
/// three coordinates of the per-coordinate population variance. Returns the
/// per-vertex values and their mean, in metric units.
pub fn vertex_sd(samples: &[CanonicalMesh]) -> Result<(Vec<f64>, f64)> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let v = samples[0].vertex_count();
    for s in samples {
        if s.vertex_count() != v {
            return Err(Error::Shape("vertex count mismatch across samples".into()));
        }
    }
    let q = samples.len() as f64;
    let mut out = Vec::with_capacity(v);
    for vi in 0..v {
        let mut mean = [0.0; 3];
        for s in samples {
            for k in 0..3 {
                mean[k] += s.vertices[vi][k];
            }
        }
        for m in &mut mean {
            *m /= q;
        }
        let mut var = 0.0;
        for s in samples {
            for k in 0..3 {
                let d = s.vertices[vi][k] - mean[k];
                var += d * d;
            }
        }
        out.push((var / (3.0 * q)).sqrt() * METRIC_SCALE);
    }
    let mean_sd = out.iter().sum::<f64>() / v as f64;
    Ok((out, mean_sd))
}

/// Vertex-wise average of samples.
pub fn mean_mesh(samples: &[CanonicalMesh]) -> Result<CanonicalMesh> {
    let first = samples.first().ok_or(Error::InsufficientSamples {
        needed: 1,
        got: 0,
    })?;
    let v = first.vertex_count();
    let mut vertices = vec![[0.0; 3]; v];
    for s in samples {
        if s.vertex_count() != v {
            return Err(Error::Shape("vertex count mismatch across samples".into()));
        }
        for (acc, src) in vertices.iter_mut().zip(&s.vertices) {
            for k in 0..3 {
                acc[k] += src[k];
            }
        }
    }
    let q = samples.len() as f64;
    for acc in &mut vertices {
        for k in 0..3 {
            acc[k] /= q;
        }
    }
    Ok(CanonicalMesh { vertices })
}

/// Mean per-vertex Euclidean distance, in metric units.
pub fn mesh_distance(a: &CanonicalMesh, b: &CanonicalMesh) -> Result<f64> {
    if a.vertex_count() != b.vertex_count() {
        return Err(Error::Shape("vertex count mismatch".into()));
    }
    Ok(a.vertices
        .iter()
        .zip(&b.vertices)
        .map(|(x, y)| dist3(x, y))
        .sum::<f64>()
        / a.vertex_count() as f64
        * METRIC_SCALE)
}

/// Per-item rows plus summary, serialized as CSV with the fixed column set.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rows: Vec<ItemMetrics>,
    pub best_q_list: Vec<usize>,
    pub improvement_percent: f64,
    /// Optional aggregate diagnostics.
    pub apd: Option<f64>,
    pub fid: Option<f64>,
    pub dist_to_det: Vec<(usize, f64)>,
    pub mean_vertex_sd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ItemMetrics {
    pub item: usize,
    pub pve: f64,
    pub mpjpe: f64,
    pub pampjpe: f64,
    /// Best-of-q PVE at q in the report's `best_q_list`.
    pub best: Vec<f64>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("item,pve,mpjpe,pampjpe,best1,best5,best10,best25\n");
        let cell = |v: f64| format!("{:.6}", v);
        let mut sums = vec![0.0; 3 + self.best_q_list.len()];
        for row in &self.rows {
            let mut fields = vec![row.item.to_string()];
            for (i, v) in [row.pve, row.mpjpe, row.pampjpe]
                .into_iter()
                .chain(row.best.iter().cloned())
                .enumerate()
            {
                sums[i] += v;
                fields.push(cell(v));
            }
            let _ = writeln!(out, "{}", fields.join(","));
        }
        let n = self.rows.len().max(1) as f64;
        let mut fields = vec!["mean".to_string()];
        for s in &sums {
            fields.push(cell(s / n));
        }
        let _ = writeln!(out, "{}", fields.join(","));
        out
    }
}
