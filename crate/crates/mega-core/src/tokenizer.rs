//! Per-part linear mesh tokenizer: the mesh is split into N contiguous
//! vertex groups, each group is projected onto an orthonormal PCA basis of
//! rank L, and the latent is vector-quantized against a shared codebook of S
//! entries. The fitted model is frozen; encode/decode are pure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::skeleton::Skeleton;
use crate::body::CanonicalMesh;
use crate::error::{Error, Result};

/// N codebook indices in [0, S).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub indices: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PartModel {
    /// Flattened-coordinate mean, length 3 * part_size.
    pub mean: Vec<f64>,
    /// Orthonormal basis, (3 * part_size) x L, row-major.
    pub basis: Vec<f64>,
}

/// Frozen tokenizer: vertex partition, per-part PCA bases, shared codebook.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    pub v: usize,
    pub n_parts: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub parts: Vec<PartModel>,
    /// S x L, row-major.
    pub codebook: Vec<f64>,
}

/// Contiguous vertex groups of size V/N, ordered along the bones.
pub fn partition(v: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || v % n != 0 {
        return Err(Error::Config(format!(
            "V = {v} is not divisible into N = {n} parts"
        )));
    }
    let size = v / n;
    Ok((0..n)
        .map(|p| (p * size..(p + 1) * size).collect())
        .collect())
}

fn part_size(model: &TokenizerModel) -> usize {
    model.v / model.n_parts
}

fn flatten_part(mesh: &CanonicalMesh, part: usize, size: usize, out: &mut [f64]) {
    let start = part * size;
    for i in 0..size {
        let v = mesh.vertices[start + i];
        out[3 * i] = v[0];
        out[3 * i + 1] = v[1];
        out[3 * i + 2] = v[2];
    }
}

/// Latent of one part: B^T (x - mean).
fn project(pm: &PartModel, flat: &[f64], l: usize) -> Vec<f64> {
    let d = flat.len();
    let mut z = vec![0.0; l];
    for (i, zi) in z.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..d {
            acc += pm.basis[j * l + i] * (flat[j] - pm.mean[j]);
        }
        *zi = acc;
    }
    z
}

/// All part latents of a mesh, concatenated (the N*L-dim FID feature).
pub fn mesh_latents(model: &TokenizerModel, mesh: &CanonicalMesh) -> Vec<f64> {
    let size = part_size(model);
    let mut flat = vec![0.0; 3 * size];
    let mut out = Vec::with_capacity(model.n_parts * model.latent_dim);
    for p in 0..model.n_parts {
        flatten_part(mesh, p, size, &mut flat);
        out.extend(project(&model.parts[p], &flat, model.latent_dim));
    }
    out
}

/// PCA per part (mean-centered, rank L) and a shared k-means codebook over
/// all per-part latents. Deterministic per seed; the returned model is
/// frozen thereafter.
pub fn fit_tokenizer(
    dataset: &[CanonicalMesh],
    skeleton: &Skeleton,
    n_parts: usize,
    latent_dim: usize,
    codebook_size: usize,
    seed: u64,
) -> Result<TokenizerModel> {
    let v = skeleton.vertex_count();
    if dataset.len() < codebook_size {
        return Err(Error::Fit(format!(
            "need at least S = {codebook_size} meshes, got {}",
            dataset.len()
        )));
    }
    for m in dataset {
        if m.vertex_count() != v {
            return Err(Error::Shape(format!(
                "mesh has {} vertices, template has {v}",
                m.vertex_count()
            )));
        }
    }
    partition(v, n_parts)?; // validates divisibility
    let size = v / n_parts;
    let d = 3 * size;
    if latent_dim > d {
        return Err(Error::Config(format!(
            "latent dim {latent_dim} exceeds part dimension {d}"
        )));
    }

    let n_meshes = dataset.len();
    let mut parts = Vec::with_capacity(n_parts);
    let mut latents = vec![0.0; n_meshes * n_parts * latent_dim];
    let mut flat = vec![0.0; d];
    for p in 0..n_parts {
        // Mean over the dataset.
        let mut mean = vec![0.0; d];
        for mesh in dataset {
            flatten_part(mesh, p, size, &mut flat);
            for (m, x) in mean.iter_mut().zip(&flat) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n_meshes as f64;
        }
        // Covariance (1/n) of centered coordinates.
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for mesh in dataset {
            flatten_part(mesh, p, size, &mut flat);
            for x in 0..d {
                let cx = flat[x] - mean[x];
                for y in x..d {
                    cov[(x, y)] += cx * (flat[y] - mean[y]);
                }
            }
        }
        for x in 0..d {
            for y in x..d {
                let val = cov[(x, y)] / n_meshes as f64;
                cov[(x, y)] = val;
                cov[(y, x)] = val;
            }
        }
        let eig = cov.symmetric_eigen();
        // Indices of the L largest eigenvalues, deterministic order.
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let rank_eps = 1e-12;
        if eig.eigenvalues[order[latent_dim - 1]] <= rank_eps {
            return Err(Error::Fit(format!(
                "part {p}: covariance rank below {latent_dim} \
                 (eigenvalue {:.3e})",
                eig.eigenvalues[order[latent_dim - 1]]
            )));
        }
        let mut basis = vec![0.0; d * latent_dim];
        for (col, &ei) in order[..latent_dim].iter().enumerate() {
            // Deterministic sign: largest-magnitude component positive.
            let mut pivot = 0;
            for r in 1..d {
                if eig.eigenvectors[(r, ei)].abs() > eig.eigenvectors[(pivot, ei)].abs() {
                    pivot = r;
                }
            }
            let sign = if eig.eigenvectors[(pivot, ei)] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                basis[r * latent_dim + col] = sign * eig.eigenvectors[(r, ei)];
            }
        }
        let pm = PartModel { mean, basis };
        for (mi, mesh) in dataset.iter().enumerate() {
            flatten_part(mesh, p, size, &mut flat);
            let z = project(&pm, &flat, latent_dim);
            let off = (mi * n_parts + p) * latent_dim;
            latents[off..off + latent_dim].copy_from_slice(&z);
        }
        parts.push(pm);
    }

    let codebook = kmeans(&latents, latent_dim, codebook_size, 100, seed)?;
    Ok(TokenizerModel {
        v,
        n_parts,
        latent_dim,
        codebook_size,
        parts,
        codebook,
    })
}

/// Lloyd's algorithm with seeded k-means++ init and a fixed iteration cap.
/// Empty clusters keep their previous center.
fn kmeans(points: &[f64], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    if n < k {
        return Err(Error::Fit(format!("k-means: {n} points for {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centers = vec![0.0; k * dim];
    let first = rng.random_range(0..n);
    centers[..dim].copy_from_slice(point(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(point(i), &centers[..dim])).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let (head, tail) = centers.split_at_mut(c * dim);
        tail[..dim].copy_from_slice(point(chosen));
        let _ = head;
        for i in 0..n {
            let d = dist2(point(i), &centers[c * dim..(c + 1) * dim]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let p = point(i);
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = dist2(p, &centers[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
    }
    Ok(centers)
}

/// Nearest codebook row in Euclidean distance, ties to the lowest index.
fn nearest_code(model: &TokenizerModel, z: &[f64]) -> u32 {
    let l = model.latent_dim;
    let mut best = (f64::INFINITY, 0u32);
    for c in 0..model.codebook_size {
        let row = &model.codebook[c * l..(c + 1) * l];
        let mut d = 0.0;
        for (a, b) in z.iter().zip(row) {
            d += (a - b) * (a - b);
        }
        if d < best.0 {
            best = (d, c as u32);
        }
    }
    best.1
}

pub fn encode_mesh(model: &TokenizerModel, mesh: &CanonicalMesh) -> Result<TokenSequence> {
    if mesh.vertex_count() != model.v {
        return Err(Error::Shape(format!(
            "mesh has {} vertices, tokenizer expects {}",
            mesh.vertex_count(),
            model.v
        )));
    }
    let size = part_size(model);
    let mut flat = vec![0.0; 3 * size];
    let mut indices = Vec::with_capacity(model.n_parts);
    for p in 0..model.n_parts {
        flatten_part(mesh, p, size, &mut flat);
        let z = project(&model.parts[p], &flat, model.latent_dim);
        indices.push(nearest_code(model, &z));
    }
    Ok(TokenSequence { indices })
}

/// Per part, vertices = B * codebook[index] + mean.
pub fn decode_tokens(model: &TokenizerModel, tokens: &TokenSequence) -> Result<CanonicalMesh> {
    if tokens.len() != model.n_parts {
        return Err(Error::Shape(format!(
            "{} tokens for {} parts",
            tokens.len(),
            model.n_parts
        )));
    }
    let l = model.latent_dim;
    let size = part_size(model);
    let mut vertices = vec![[0.0; 3]; model.v];
    for (p, &idx) in tokens.indices.iter().enumerate() {
        if idx as usize >= model.codebook_size {
            return Err(Error::InvalidToken {
                index: idx,
                size: model.codebook_size as u32,
            });
        }
        let code = &model.codebook[idx as usize * l..(idx as usize + 1) * l];
        let pm = &model.parts[p];
        for i in 0..size {
            let mut coord = [0.0; 3];
            for (k, c) in coord.iter_mut().enumerate() {
                let row = 3 * i + k;
                let mut acc = pm.mean[row];
                for (j, &z) in code.iter().enumerate() {
                    acc += pm.basis[row * l + j] * z;
                }
                *c = acc;
            }
            vertices[p * size + i] = coord;
        }
    }
    Ok(CanonicalMesh { vertices })
}

/// Smallest pairwise distance between codebook rows.
pub fn min_codebook_gap(model: &TokenizerModel) -> f64 {
    let l = model.latent_dim;
    let mut best = f64::INFINITY;
    for a in 0..model.codebook_size {
        for b in (a + 1)..model.codebook_size {
            let ra = &model.codebook[a * l..(a + 1) * l];
            let rb = &model.codebook[b * l..(b + 1) * l];
            let d: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

const MAGIC: &[u8; 4] = b"MTOK";
const VERSION: u32 = 1;

pub fn save_tokenizer(path: &Path, model: &TokenizerModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    for v in [
        VERSION,
        model.n_parts as u32,
        model.latent_dim as u32,
        model.codebook_size as u32,
        model.v as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    let parts = partition(model.v, model.n_parts)?;
    for part in &parts {
        for &i in part {
            w.write_all(&(i as u32).to_le_bytes()).map_err(io_err)?;
        }
    }
    for pm in &model.parts {
        for v in pm.basis.iter().chain(&pm.mean) {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    for v in &model.codebook {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerModel> {
    let corrupt = |reason: &str| Error::CorruptTokenizer {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("short read on magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| corrupt("short read"))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let n_parts = read_u32(&mut r)? as usize;
    let latent_dim = read_u32(&mut r)? as usize;
    let codebook_size = read_u32(&mut r)? as usize;
    let v = read_u32(&mut r)? as usize;
    if n_parts == 0 || v == 0 || v % n_parts != 0 {
        return Err(corrupt("inconsistent dimensions"));
    }
    let mut indices = vec![0u32; v];
    for i in indices.iter_mut() {
        *i = read_u32(&mut r)?;
    }
    let expected = partition(v, n_parts)?;
    let flat_expected: Vec<u32> = expected.iter().flatten().map(|&i| i as u32).collect();
    if indices != flat_expected {
        return Err(corrupt("partition is not the contiguous cover"));
    }

    let read_f64s = |r: &mut BufReader<File>, n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf).map_err(|_| corrupt("short read on reals"))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let d = 3 * (v / n_parts);
    let mut parts = Vec::with_capacity(n_parts);
    for _ in 0..n_parts {
        let basis = read_f64s(&mut r, d * latent_dim)?;
        let mean = read_f64s(&mut r, d)?;
        parts.push(PartModel { mean, basis });
    }
    let codebook = read_f64s(&mut r, codebook_size * latent_dim)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(TokenizerModel {
        v,
        n_parts,
        latent_dim,
        codebook_size,
        parts,
        codebook,
    })
}
