//! Multi-view datasets, disk formats, and synthetic generators.
//!
//! A dataset is a set of named feature blocks over the same n samples,
//! optionally with ground-truth labels. On disk a dataset is a manifest
//! `{"views": {"<name>": "<csv path>"}, "labels": "<csv path>"}` whose
//! paths resolve relative to the manifest file; feature CSVs are headerless
//! rows of floats, label CSVs one integer per line. Floats are written with
//! Rust's shortest round-trip formatting, so save/load is bitwise exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge_list_csv, to_dot};
use crate::linalg::ensure_finite;
use crate::metrics::MetricsReport;
use crate::train::TrainResult;
use crate::view::{StructureSpec, ViewStructure};

/// Named feature blocks over a common sample set.
#[derive(Debug, Clone)]
pub struct Dataset {
    views: Vec<(String, Array2<f64>)>,
    labels: Option<Vec<usize>>,
    n: usize,
}

impl Dataset {
    /// Validates that views are non-empty, uniquely named, finite, and agree
    /// on the sample count; labels (when present) must cover every sample.
    pub fn new(views: Vec<(String, Array2<f64>)>, labels: Option<Vec<usize>>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidArgument {
                name: "views",
                reason: "a dataset needs at least one view".into(),
            });
        }
        let n = views[0].1.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument {
                name: "views",
                reason: format!("view `{}` has no samples", views[0].0),
            });
        }
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for (name, m) in &views {
            if name.is_empty() {
                return Err(Error::InvalidArgument {
                    name: "views",
                    reason: "view names must be non-empty".into(),
                });
            }
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::InvalidArgument {
                    name: "views",
                    reason: format!("duplicate view name `{name}`"),
                });
            }
            if m.nrows() != n {
                return Err(Error::SampleCountMismatch {
                    view: name.clone(),
                    expected: n,
                    found: m.nrows(),
                });
            }
            if m.ncols() == 0 {
                return Err(Error::InvalidArgument {
                    name: "views",
                    reason: format!("view `{name}` has no feature columns"),
                });
            }
            ensure_finite("dataset view", m)?;
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidArgument {
                    name: "labels",
                    reason: format!("{} labels for {n} samples", l.len()),
                });
            }
        }
        Ok(Dataset { views, labels, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn view_names(&self) -> Vec<&str> {
        self.views.iter().map(|(name, _)| name.as_str()).collect()
    }

    pub fn view_position(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|(v, _)| v == name)
    }

    pub fn view_at(&self, idx: usize) -> (&str, &Array2<f64>) {
        let (name, m) = &self.views[idx];
        (name.as_str(), m)
    }

    pub fn view(&self, name: &str) -> Option<&Array2<f64>> {
        self.view_position(name).map(|i| &self.views[i].1)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

/// On-disk index of a dataset. View paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub views: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn parse_matrix_csv(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                reason: format!("`{}` is not a number", tok.trim()),
            })?;
            row.push(v);
        }
        if rows.is_empty() {
            width = row.len();
        } else if row.len() != width {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                reason: format!("{} columns, expected {width}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: "file contains no rows".into(),
        });
    }
    let n = rows.len();
    Ok(Array2::from_shape_fn((n, width), |(i, j)| rows[i][j]))
}

/// Parses one integer label per line and renumbers them densely in order
/// of first appearance.
fn parse_labels_csv(text: &str, path: &Path) -> Result<Vec<usize>> {
    let mut map: HashMap<i64, usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let raw: i64 = line.trim().parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            reason: format!("`{}` is not an integer label", line.trim()),
        })?;
        let next = map.len();
        out.push(*map.entry(raw).or_insert(next));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: "label file contains no rows".into(),
        });
    }
    Ok(out)
}

/// Loads a dataset from a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = read_file(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.views.is_empty() {
        return Err(Error::InvalidArgument {
            name: "manifest",
            reason: "manifest lists no views".into(),
        });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));

    let mut views = Vec::new();
    let mut expected: Option<usize> = None;
    for (name, rel) in &manifest.views {
        let path = base.join(rel);
        let m = parse_matrix_csv(&read_file(&path)?, &path)?;
        if let Some(n) = expected {
            if m.nrows() != n {
                return Err(Error::SampleCountMismatch {
                    view: name.clone(),
                    expected: n,
                    found: m.nrows(),
                });
            }
        } else {
            expected = Some(m.nrows());
        }
        views.push((name.clone(), m));
    }

    let labels = match &manifest.labels {
        Some(rel) => {
            let path = base.join(rel);
            let l = parse_labels_csv(&read_file(&path)?, &path)?;
            if l.len() != expected.unwrap_or(0) {
                return Err(Error::SampleCountMismatch {
                    view: "labels".into(),
                    expected: expected.unwrap_or(0),
                    found: l.len(),
                });
            }
            Some(l)
        }
        None => None,
    };

    Dataset::new(views, labels)
}

/// Loads a label file: one integer per line, renumbered densely in order
/// of first appearance.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels_csv(&read_file(path)?, path)
}

/// Loads a structure description from a JSON file.
pub fn load_structure(path: &Path) -> Result<StructureSpec> {
    StructureSpec::from_json(&read_file(path)?).map_err(|e| match e {
        Error::Json { reason, .. } => Error::Json {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}

fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", m[[i, j]]).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Writes a dataset (and its structure description) into a directory:
/// `view_<name>.csv` per view, `labels.csv` when labels exist,
/// `manifest.json`, and `structure.json`.
pub fn save_dataset(dataset: &Dataset, structure: &StructureSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;

    let mut manifest = Manifest {
        views: BTreeMap::new(),
        labels: None,
    };
    for idx in 0..dataset.view_count() {
        let (name, m) = dataset.view_at(idx);
        if name.contains('/') || name.contains('\\') || name.contains("..") {
            return Err(Error::InvalidArgument {
                name: "views",
                reason: format!("view name `{name}` is not a safe file stem"),
            });
        }
        let file = format!("view_{name}.csv");
        write_file(&dir.join(&file), &matrix_to_csv(m))?;
        manifest.views.insert(name.to_string(), file);
    }
    if let Some(labels) = dataset.labels() {
        let mut text = String::new();
        for l in labels {
            writeln!(text, "{l}").expect("string write");
        }
        write_file(&dir.join("labels.csv"), &text)?;
        manifest.labels = Some("labels.csv".into());
    }
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &(manifest_json + "\n"))?;
    write_file(&dir.join("structure.json"), &(structure.to_json() + "\n"))?;
    Ok(())
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws `k` cluster centers at hypercube corners `scale * (±1, .., ±1)`
/// whose sign patterns are pairwise at Hamming distance `target_dist` or
/// more, shuffled so each call places the clusters differently. Two centers
/// then disagree in sign on several coordinates, each by a `2 * scale`
/// margin, and that margin survives any monotone squashing of the
/// coordinates. The greedy selection relaxes the distance only when `k`
/// exceeds what the dimension allows; `k <= 2^dims` is required.
fn sign_pattern_centers(
    rng: &mut ChaCha12Rng,
    k: usize,
    dims: usize,
    scale: f64,
    target_dist: usize,
) -> Vec<Vec<f64>> {
    assert!(
        dims < usize::BITS as usize && k <= 1 << dims,
        "need k <= 2^dims distinct sign patterns"
    );
    let mut patterns: Vec<usize> = (0..1 << dims).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    'search: for min_dist in (1..=target_dist.max(1)).rev() {
        // A greedy pass can get stuck in a maximal-but-small packing, so
        // retry a few shuffles before relaxing the distance. Distance 1
        // only requires distinctness and always succeeds.
        let attempts = if min_dist == 1 { 1 } else { 24 };
        for _ in 0..attempts {
            for i in (1..patterns.len()).rev() {
                let j = rng.random_range(0..=i);
                patterns.swap(i, j);
            }
            chosen.clear();
            for &p in &patterns {
                let far_enough = chosen
                    .iter()
                    .all(|&q| (p ^ q).count_ones() as usize >= min_dist);
                if far_enough {
                    chosen.push(p);
                    if chosen.len() == k {
                        break 'search;
                    }
                }
            }
        }
    }
    chosen
        .iter()
        .map(|&p| {
            (0..dims)
                .map(|d| if p >> d & 1 == 1 { scale } else { -scale })
                .collect()
        })
        .collect()
}

/// Draws `k` centers in `dims` dimensions, resampling until every pair is
/// at least `min_dist` apart; the draw scale inflates every 200 failures so
/// the loop always terminates.
fn spread_centers(
    rng: &mut ChaCha12Rng,
    k: usize,
    dims: usize,
    scale0: f64,
    min_dist: f64,
) -> Vec<Vec<f64>> {
    let mut scale = scale0;
    let mut attempts = 0usize;
    loop {
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dims).map(|_| scale * normal(rng)).collect())
            .collect();
        let mut ok = true;
        'pairs: for i in 0..k {
            for j in (i + 1)..k {
                let dist_sq: f64 = centers[i]
                    .iter()
                    .zip(&centers[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist_sq.sqrt() < min_dist {
                    ok = false;
                    break 'pairs;
                }
            }
        }
        if ok {
            return centers;
        }
        attempts += 1;
        if attempts % 200 == 0 {
            scale *= 1.5;
        }
    }
}

/// Gaussian blobs with a flat view structure: k clusters of
/// `n_per_cluster` samples each, drawn independently per view around
/// well-separated centers (minimum center distance `separation · noise`).
/// Fully determined by `seed`.
pub fn synth_blobs(
    n_per_cluster: usize,
    k: usize,
    views: usize,
    dims: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, ViewStructure)> {
    if n_per_cluster == 0 || k == 0 || views == 0 || dims == 0 {
        return Err(Error::InvalidArgument {
            name: "synth_blobs",
            reason: "n_per_cluster, k, views, and dims must all be positive".into(),
        });
    }
    if !(separation > 0.0) || !(noise > 0.0) || !separation.is_finite() || !noise.is_finite() {
        return Err(Error::InvalidArgument {
            name: "synth_blobs",
            reason: "separation and noise must be finite and positive".into(),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = n_per_cluster * k;
    let labels: Vec<usize> = (0..n).map(|i| i / n_per_cluster).collect();

    let mut view_list = Vec::with_capacity(views);
    for v in 0..views {
        let centers = spread_centers(
            &mut rng,
            k,
            dims,
            2.0 * separation * noise,
            separation * noise,
        );
        let mut x = Array2::zeros((n, dims));
        for i in 0..n {
            for d in 0..dims {
                x[[i, d]] = centers[labels[i]][d] + noise * normal(&mut rng);
            }
        }
        view_list.push((format!("v{v}"), x));
    }

    let names: Vec<String> = (0..views).map(|v| format!("v{v}")).collect();
    let dataset = Dataset::new(view_list, Some(labels))?;
    let structure = StructureSpec::flat(&names).validate(&dataset)?;
    Ok((dataset, structure))
}

const LAYERED_CLUSTER_DIMS: usize = 8;
const LAYERED_CONF_DIMS: usize = 3;

/// Grouped views with a shared nuisance signal, for exercising the
/// two-layer agglomeration and the learnable data space.
///
/// Each leaf carries 8 cluster-bearing dimensions (sign-pattern centers,
/// unit noise) and 3 confounder dimensions: a per-sample
/// latent vector, shared by every leaf but mixed through a leaf-specific
/// random matrix. `overlap` in [0, 1] balances the two blocks; at high
/// overlap the confounder dominates plain distances and drags unrelated
/// samples together, while the cluster signal survives in the rescaled
/// space. Labels cycle `i mod k`. Fully determined by `seed`.
pub fn synth_layered(
    n: usize,
    k: usize,
    groups: &[usize],
    overlap: f64,
    seed: u64,
) -> Result<(Dataset, ViewStructure)> {
    if k < 2 || n < 2 * k {
        return Err(Error::InvalidArgument {
            name: "synth_layered",
            reason: format!("need k >= 2 and n >= 2k, got n = {n}, k = {k}"),
        });
    }
    if groups.is_empty() || groups.iter().any(|&g| g == 0) {
        return Err(Error::InvalidArgument {
            name: "synth_layered",
            reason: "groups must be non-empty and positive".into(),
        });
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument {
            name: "synth_layered",
            reason: format!("overlap = {overlap} must lie in [0, 1)"),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();

    // The shared nuisance latent, one vector per sample.
    let u_scale = 5.0;
    let u: Vec<[f64; LAYERED_CONF_DIMS]> = (0..n)
        .map(|_| std::array::from_fn(|_| u_scale * normal(&mut rng)))
        .collect();

    let mut view_list = Vec::new();
    let mut spec_groups: Vec<(String, Vec<String>)> = Vec::new();
    for (g, &size) in groups.iter().enumerate() {
        let mut members = Vec::new();
        for v in 0..size {
            let name = format!("g{g}_v{v}");
            members.push(name.clone());

            let centers = sign_pattern_centers(&mut rng, k, LAYERED_CLUSTER_DIMS, 3.5, 4);
            let mix: [[f64; LAYERED_CONF_DIMS]; LAYERED_CONF_DIMS] = std::array::from_fn(|_| {
                std::array::from_fn(|_| normal(&mut rng) / (LAYERED_CONF_DIMS as f64).sqrt())
            });

            let dims = LAYERED_CLUSTER_DIMS + LAYERED_CONF_DIMS;
            let mut x = Array2::zeros((n, dims));
            for i in 0..n {
                for d in 0..LAYERED_CLUSTER_DIMS {
                    let val = centers[labels[i]][d] + normal(&mut rng);
                    x[[i, d]] = (1.0 - overlap) * val;
                }
                for d in 0..LAYERED_CONF_DIMS {
                    let mixed: f64 = (0..LAYERED_CONF_DIMS)
                        .map(|e| mix[d][e] * u[i][e])
                        .sum();
                    x[[i, LAYERED_CLUSTER_DIMS + d]] =
                        overlap * (mixed + 0.5 * normal(&mut rng));
                }
            }
            view_list.push((name, x));
        }
        spec_groups.push((format!("g{g}"), members));
    }

    let dataset = Dataset::new(view_list, Some(labels))?;
    let structure = StructureSpec::two_layer(&spec_groups).validate(&dataset)?;
    Ok((dataset, structure))
}

/// Writes the artifacts of a training run into a directory: `labels.csv`,
/// `trace.csv`, `graph.dot`, `graph_edges.csv`, `run_config.json`, and
/// `metrics.json` when a report is supplied.
pub fn save_results(
    result: &TrainResult,
    report: Option<&MetricsReport>,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;

    let mut labels = String::new();
    for l in &result.labels {
        writeln!(labels, "{l}").expect("string write");
    }
    write_file(&out_dir.join("labels.csv"), &labels)?;

    let mut trace = String::from(
        "iteration,lambda,components,eigval_sum,loss_sc,loss_gc,loss_cac,loss_total\n",
    );
    for row in &result.trace {
        writeln!(
            trace,
            "{},{},{},{},{},{},{},{}",
            row.iteration,
            row.lambda,
            row.components,
            row.eigval_sum,
            row.losses.sc,
            row.losses.gc,
            row.losses.cac,
            row.losses.total
        )
        .expect("string write");
    }
    write_file(&out_dir.join("trace.csv"), &trace)?;

    write_file(&out_dir.join("graph.dot"), &to_dot(&result.s_c))?;
    write_file(&out_dir.join("graph_edges.csv"), &edge_list_csv(&result.s_c))?;

    let config_json =
        serde_json::to_string_pretty(&result.config).expect("config serializes");
    write_file(&out_dir.join("run_config.json"), &(config_json + "\n"))?;

    if let Some(m) = report {
        let metrics_json = serde_json::to_string_pretty(m).expect("metrics serialize");
        write_file(&out_dir.join("metrics.json"), &(metrics_json + "\n"))?;
    }
    Ok(())
}
