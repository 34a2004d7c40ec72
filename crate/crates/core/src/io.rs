//! File formats and analysis exports.
//!
//! Datasets are JSON Lines (a manifest header line, then one sample per
//! line). Checkpoints are a single file holding a compact JSON manifest
//! line followed by a little-endian IEEE-754 binary32 parameter blob whose
//! SHA-256 lives in the manifest. All writes go to a temp file in the
//! destination directory and are renamed into place.

use crate::dynamics::ControlProblem;
use crate::error::{Result, TrcError};
use crate::model::{ParamStore, ParamTensor, TrcConfig};
use crate::oracle::{OracleConfig, Sample};
use crate::train::{Evaluation, MetricsRecord, Normalizer, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Write `bytes` atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    {
        let file = fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ── Dataset files ───────────────────────────────────────────────────

/// First line of a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub problem: ControlProblem,
    pub oracle_config: OracleConfig,
    pub seed: u64,
    pub sample_count: usize,
    pub failure_count: usize,
    pub normalization: Normalizer,
}

pub fn write_dataset(
    path: &Path,
    problem: &ControlProblem,
    oracle_config: &OracleConfig,
    seed: u64,
    failure_count: usize,
    samples: &[Sample],
) -> Result<()> {
    let normalization = Normalizer::fit(samples, problem.d_x, problem.d_u)?;
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        problem: problem.clone(),
        oracle_config: oracle_config.clone(),
        seed,
        sample_count: samples.len(),
        failure_count,
        normalization,
    };
    atomic_write(path, |w| {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for s in samples {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let file = fs::File::open(path)
        .map_err(|e| TrcError::Format(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| TrcError::Format("dataset file is empty".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| TrcError::Format(format!("bad dataset header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(TrcError::Format(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }
    let mut samples = Vec::with_capacity(header.sample_count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| TrcError::Format(format!("bad sample on line {}: {e}", i + 2)))?;
        if s.x0.len() != header.problem.d_x
            || s.u_star.len() != header.problem.horizon * header.problem.d_u
        {
            return Err(TrcError::Format(format!("sample on line {} has wrong dimensions", i + 2)));
        }
        if !s.x0.iter().chain(&s.u_star).all(|v| v.is_finite()) || !s.j_star.is_finite() {
            return Err(TrcError::Format(format!("non-finite values on line {}", i + 2)));
        }
        let d_u = header.problem.d_u;
        for (j, &u) in s.u_star.iter().enumerate() {
            let (lo, hi) = (header.problem.u_min[j % d_u], header.problem.u_max[j % d_u]);
            if u < lo - 1e-9 || u > hi + 1e-9 {
                return Err(TrcError::Format(format!(
                    "control {u} outside [{lo}, {hi}] on line {}",
                    i + 2
                )));
            }
        }
        samples.push(s);
    }
    if samples.len() != header.sample_count {
        return Err(TrcError::Format(format!(
            "dataset declares {} samples but contains {}",
            header.sample_count,
            samples.len()
        )));
    }
    Ok((header, samples))
}

// ── Checkpoint files ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub problem: ControlProblem,
    pub trc_config: TrcConfig,
    pub train_config: TrainConfig,
    pub normalizer: Normalizer,
    pub params: Vec<ParamDescriptor>,
    pub blob_len: usize,
    pub blob_sha256: String,
}

/// Serialize parameters to the 32-bit storage encoding.
fn params_to_blob(params: &ParamStore) -> (Vec<ParamDescriptor>, Vec<u8>) {
    let mut descriptors = Vec::with_capacity(params.tensors.len());
    let mut blob = Vec::new();
    for t in &params.tensors {
        descriptors.push(ParamDescriptor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len(),
            dtype: "f32".into(),
        });
        for &v in &t.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (descriptors, blob)
}

pub fn write_checkpoint(
    path: &Path,
    problem: &ControlProblem,
    trc_config: &TrcConfig,
    train_config: &TrainConfig,
    normalizer: &Normalizer,
    params: &ParamStore,
) -> Result<()> {
    let (descriptors, blob) = params_to_blob(params);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        problem: problem.clone(),
        trc_config: trc_config.clone(),
        train_config: train_config.clone(),
        normalizer: normalizer.clone(),
        params: descriptors,
        blob_len: blob.len(),
        blob_sha256: hex_digest(&blob),
    };
    atomic_write(path, |w| {
        serde_json::to_writer(&mut *w, &manifest)?;
        w.write_all(b"\n")?;
        w.write_all(&blob)?;
        Ok(())
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let file = fs::File::open(path)
        .map_err(|e| TrcError::Format(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut manifest_line = String::new();
    reader.read_line(&mut manifest_line)?;
    let manifest: CheckpointManifest = serde_json::from_str(manifest_line.trim_end())
        .map_err(|e| TrcError::Format(format!("bad checkpoint manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(TrcError::Format(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let mut blob = Vec::with_capacity(manifest.blob_len);
    reader.read_to_end(&mut blob)?;
    if blob.len() != manifest.blob_len {
        return Err(TrcError::Format(format!(
            "checkpoint blob is {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    if hex_digest(&blob) != manifest.blob_sha256 {
        return Err(TrcError::Format("checkpoint blob checksum mismatch".into()));
    }
    let mut store = ParamStore::default();
    let mut expected_offset = 0usize;
    for d in &manifest.params {
        if d.dtype != "f32" {
            return Err(TrcError::Format(format!("unsupported dtype {} for {}", d.dtype, d.name)));
        }
        if d.offset != expected_offset {
            return Err(TrcError::Format(format!(
                "descriptor {} offset {} is not contiguous (expected {})",
                d.name, d.offset, expected_offset
            )));
        }
        let numel: usize = d.shape.iter().product();
        let end = d.offset + numel * 4;
        if end > blob.len() {
            return Err(TrcError::Format(format!("descriptor {} overruns the blob", d.name)));
        }
        let data: Vec<f64> = blob[d.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.tensors.push(ParamTensor { name: d.name.clone(), shape: d.shape.clone(), data });
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(TrcError::Format("checkpoint blob has trailing bytes".into()));
    }
    Ok((manifest, store))
}

// ── PCA ─────────────────────────────────────────────────────────────

/// Top-2 principal components of mean-centered points (rows), via a Jacobi
/// eigendecomposition of the covariance matrix. Component signs are fixed
/// by making each component's largest-magnitude entry positive.
pub struct Pca2d {
    pub projections: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i][i]).collect();
    (eig, v)
}

pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca2d> {
    let n = points.len();
    if n < 2 {
        return Err(TrcError::Contract(format!("pca_2d needs at least 2 points, got {n}")));
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i][j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (eig, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
    let total: f64 = eig.iter().map(|&e| e.max(0.0)).sum();
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for c in 0..2 {
        let col = order[c.min(d - 1)];
        let mut comp: Vec<f64> = (0..d).map(|r| vecs[r][col]).collect();
        // Deterministic sign: the largest-magnitude entry is positive.
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.abs().partial_cmp(&y.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if comp[lead] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        explained[c] = if total > 0.0 { eig[col].max(0.0) / total } else { 0.0 };
        components[c] = comp;
    }
    if d < 2 {
        components[1] = vec![0.0; d];
        explained[1] = 0.0;
    }
    let projections = points
        .iter()
        .map(|p| {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            [
                c.iter().zip(&components[0]).map(|(a, b)| a * b).sum(),
                c.iter().zip(&components[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(Pca2d { projections, explained_variance: explained, components })
}

// ── Report and CSV exports ──────────────────────────────────────────

/// Write `refinement.csv`: one row per (sample, iteration).
pub fn write_refinement_csv(path: &Path, ev: &Evaluation) -> Result<()> {
    atomic_write(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["sample_id", "iteration", "cost", "residual_norm", "u_mean", "u_std", "u_min", "u_max"])
            .map_err(|e| TrcError::Format(e.to_string()))?;
        for r in &ev.refinement_rows {
            csv.write_record([
                r.sample_id.to_string(),
                r.iteration.to_string(),
                format!("{}", r.cost),
                format!("{}", r.residual_norm),
                format!("{}", r.u_mean),
                format!("{}", r.u_std),
                format!("{}", r.u_min),
                format!("{}", r.u_max),
            ])
            .map_err(|e| TrcError::Format(e.to_string()))?;
        }
        csv.flush()?;
        Ok(())
    })
}

/// Write `latents.csv` with one PCA projection per (sample, iteration).
/// The projection is fitted on the pooled z_H snapshots across all
/// iterations so iterations share one plane.
pub fn write_latents_csv(path: &Path, ev: &Evaluation) -> Result<()> {
    if ev.latents.is_empty() {
        return Err(TrcError::Contract("no latent snapshots to export".into()));
    }
    let points: Vec<Vec<f64>> = ev.latents.iter().map(|l| l.z.clone()).collect();
    let pca = pca_2d(&points)?;
    atomic_write(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["sample_id", "iteration", "pc1", "pc2", "final_cost"])
            .map_err(|e| TrcError::Format(e.to_string()))?;
        for (l, proj) in ev.latents.iter().zip(&pca.projections) {
            csv.write_record([
                l.sample_id.to_string(),
                l.iteration.to_string(),
                format!("{}", proj[0]),
                format!("{}", proj[1]),
                format!("{}", l.final_cost),
            ])
            .map_err(|e| TrcError::Format(e.to_string()))?;
        }
        csv.flush()?;
        Ok(())
    })
}

/// Write `training_metrics.csv`, one row per epoch.
pub fn write_metrics_csv(path: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    atomic_write(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "epoch",
            "control_loss",
            "improvement_metric",
            "total_loss",
            "learning_rate",
            "val_control_loss",
            "skipped_steps",
            "mean_normalized_cost_per_iter",
        ])
        .map_err(|e| TrcError::Format(e.to_string()))?;
        for m in metrics {
            let curve = m
                .mean_cost_per_iter
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(";");
            csv.write_record([
                m.epoch.to_string(),
                format!("{}", m.control_loss),
                format!("{}", m.improvement_metric),
                format!("{}", m.total_loss),
                format!("{}", m.learning_rate),
                format!("{}", m.val_control_loss),
                m.skipped_steps.to_string(),
                curve,
            ])
            .map_err(|e| TrcError::Format(e.to_string()))?;
        }
        csv.flush()?;
        Ok(())
    })
}

/// Write the evaluation summary JSON.
pub fn write_report_json(path: &Path, ev: &Evaluation) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, &ev.report)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate;
    use crate::model::init_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn small_dataset() -> (ControlProblem, Vec<Sample>) {
        let problem = ControlProblem::vdp();
        let samples: Vec<Sample> = (0..4)
            .map(|i| {
                let x0 = vec![0.2 * i as f64 - 0.3, 0.1 * i as f64];
                let u: Vec<f64> = (0..100).map(|j| 0.5 * ((i + j) as f64 * 0.2).sin()).collect();
                let traj = simulate(&problem, &x0, &u).unwrap();
                Sample { x0, x_target: vec![0.0, 0.0], u_star: u, j_star: traj.cost }
            })
            .collect();
        (problem, samples)
    }

    #[test]
    fn dataset_round_trips_byte_identically() {
        let (problem, samples) = small_dataset();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_dataset(&p1, &problem, &OracleConfig::default(), 42, 1, &samples).unwrap();
        let (hdr, loaded) = read_dataset(&p1).unwrap();
        assert_eq!(hdr.sample_count, 4);
        assert_eq!(hdr.failure_count, 1);
        write_dataset(&p2, &hdr.problem, &hdr.oracle_config, hdr.seed, hdr.failure_count, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn dataset_count_mismatch_is_rejected() {
        let (problem, samples) = small_dataset();
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        write_dataset(&p, &problem, &OracleConfig::default(), 1, 0, &samples).unwrap();
        let contents = fs::read_to_string(&p).unwrap();
        let truncated: Vec<&str> = contents.lines().take(3).collect();
        fs::write(&p, truncated.join("\n")).unwrap();
        assert!(matches!(read_dataset(&p), Err(TrcError::Format(_))));
    }

    #[test]
    fn checkpoint_round_trips_and_verifies() {
        let problem = ControlProblem::vdp();
        let mut cfg = TrcConfig::defaults(&problem);
        cfg.d_z = 16;
        cfg.d_h = 8;
        cfg.blocks = 1;
        cfg.heads = 2;
        let params = init_params(&cfg, 9);
        let norm = Normalizer {
            x_mean: vec![0.0; 2],
            x_std: vec![1.0; 2],
            u_mean: vec![0.0],
            u_std: vec![1.0],
        };
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("model.ckpt");
        let p2 = dir.path().join("model2.ckpt");
        write_checkpoint(&p1, &problem, &cfg, &TrainConfig::default(), &norm, &params).unwrap();
        let (manifest, loaded) = read_checkpoint(&p1).unwrap();
        assert_eq!(manifest.params.len(), params.tensors.len());
        // Reload is within the 32-bit round trip of the original.
        for (a, b) in params.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(a.name, b.name);
            for (&x, &y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= x.abs().max(1e-12) * 1e-6);
            }
        }
        // Write-read-write is byte-identical.
        write_checkpoint(&p2, &manifest.problem, &manifest.trc_config, &manifest.train_config, &manifest.normalizer, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_checksum_detects_corruption() {
        let problem = ControlProblem::vdp();
        let mut cfg = TrcConfig::defaults(&problem);
        cfg.d_z = 8;
        cfg.d_h = 8;
        cfg.blocks = 1;
        cfg.heads = 2;
        let params = init_params(&cfg, 10);
        let norm = Normalizer { x_mean: vec![0.0; 2], x_std: vec![1.0; 2], u_mean: vec![0.0], u_std: vec![1.0] };
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        write_checkpoint(&p, &problem, &cfg, &TrainConfig::default(), &norm, &params).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(TrcError::Format(_))));
    }

    #[test]
    fn pca_collinear_points_explained_by_first_component() {
        let points: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 2.0, i as f64 * -1.0, 0.0]).collect();
        let pca = pca_2d(&points).unwrap();
        assert!(pca.explained_variance[0] > 1.0 - 1e-12);
        assert!(pca.explained_variance[1].abs() < 1e-12);
    }

    #[test]
    fn pca_rejects_single_point() {
        assert!(matches!(pca_2d(&[vec![1.0, 2.0]]), Err(TrcError::Contract(_))));
    }

    #[test]
    fn pca_invariant_under_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = pca_2d(&points).unwrap();
        let mut reordered = points.clone();
        reordered.reverse();
        let b = pca_2d(&reordered).unwrap();
        for (pa, pb) in a.projections.iter().zip(b.projections.iter().rev()) {
            assert!((pa[0] - pb[0]).abs() < 1e-9 && (pa[1] - pb[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_reconstruction_error_equals_discarded_eigenvalues() {
        // Independent oracle: the full eigendecomposition. The mean squared
        // reconstruction error from 2 components must equal the sum of the
        // discarded eigenvalues.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let d = 6;
        let n = points.len();
        let mut mean = vec![0.0; d];
        for p in &points {
            for (m, &v) in mean.iter_mut().zip(p) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for p in &points {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += c[i] * c[j] / n as f64;
                }
            }
        }
        let (eig, _) = jacobi_eigen(cov);
        let mut sorted = eig.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let discarded: f64 = sorted[2..].iter().sum();

        let pca = pca_2d(&points).unwrap();
        let mut mse = 0.0;
        for (p, proj) in points.iter().zip(&pca.projections) {
            let mut err = 0.0;
            for i in 0..d {
                let centered = p[i] - mean[i];
                let rec = proj[0] * pca.components[0][i] + proj[1] * pca.components[1][i];
                err += (centered - rec) * (centered - rec);
            }
            mse += err / n as f64;
        }
        assert!((mse - discarded).abs() < 1e-8, "mse {mse} vs discarded {discarded}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn dataset_write_read_preserves_samples(seed in 0u64..500) {
            let problem = ControlProblem::vdp();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<Sample> = (0..3).map(|_| Sample {
                x0: vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                x_target: vec![0.0, 0.0],
                u_star: (0..100).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                j_star: rng.gen_range(0.0..100.0),
            }).collect();
            let dir = tempdir().unwrap();
            let p = dir.path().join("d.jsonl");
            write_dataset(&p, &problem, &OracleConfig::default(), seed, 0, &samples).unwrap();
            let (_, loaded) = read_dataset(&p).unwrap();
            prop_assert_eq!(samples.len(), loaded.len());
            for (a, b) in samples.iter().zip(&loaded) {
                prop_assert!(a.u_star.iter().zip(&b.u_star).all(|(x, y)| x.to_bits() == y.to_bits()));
                prop_assert_eq!(a.j_star.to_bits(), b.j_star.to_bits());
            }
        }
    }
}
