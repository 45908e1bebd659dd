//! Seeded synthetic labelled datasets with a known semantic/noise split of the
//! coordinates.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dist_sq, Matrix};
use crate::rng::{self, tag};

/// Partition of the coordinates `0..d` into semantic and noise directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubspaceSpec {
    d: usize,
    sem_dims: Vec<usize>,
    noise_dims: Vec<usize>,
}

impl SubspaceSpec {
    /// Semantic coordinates are `sem_dims`; the noise coordinates are the rest.
    pub fn new(d: usize, sem_dims: &[usize]) -> Result<Self> {
        if sem_dims.is_empty() {
            return Err(Error::invalid("sem_dims is empty"));
        }
        let mut sem = sem_dims.to_vec();
        sem.sort_unstable();
        sem.dedup();
        if sem.len() != sem_dims.len() {
            return Err(Error::invalid("sem_dims has duplicates"));
        }
        if let Some(&bad) = sem.iter().find(|&&i| i >= d) {
            return Err(Error::invalid(format!("semantic index {bad} outside 0..{d}")));
        }
        let noise = (0..d).filter(|i| sem.binary_search(i).is_err()).collect();
        Ok(Self {
            d,
            sem_dims: sem,
            noise_dims: noise,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn sem_dims(&self) -> &[usize] {
        &self.sem_dims
    }

    pub fn noise_dims(&self) -> &[usize] {
        &self.noise_dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    /// Generator parameters in insertion order.
    pub params: Vec<(String, String)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x0: Matrix,
    pub labels: Vec<usize>,
    pub spec: SubspaceSpec,
    /// `k × d`; zero on every noise coordinate.
    pub class_means: Matrix,
    /// Smallest pairwise class-mean distance.
    pub delta_min: f64,
    /// Largest pairwise class-mean distance.
    pub delta_max: f64,
    pub meta: DatasetMeta,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.rows()
    }

    /// Rows `idx` as `(x0, labels)`.
    pub fn subset(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (self.x0.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

fn pairwise_extremes(means: &Matrix) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for a in 0..means.rows() {
        for b in a + 1..means.rows() {
            let d = dist_sq(means.row(a), means.row(b)).sqrt();
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    (lo, hi)
}

/// Vertices of a regular simplex with `k` points on the unit sphere of
/// `R^{k-1}`, via the Helmert basis of the complement of the all-ones vector.
pub fn simplex_vertices(k: usize) -> Matrix {
    let scale = (1.0 - 1.0 / k as f64).sqrt();
    let mut v = Matrix::zeros(k, k - 1);
    for j in 1..k {
        let c = 1.0 / ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            v[(i, j - 1)] = c / scale;
        }
        v[(j, j - 1)] = -(j as f64) * c / scale;
    }
    v
}

/// Edge length of the unit-circumradius regular simplex on `k` points.
pub fn simplex_edge(k: usize) -> f64 {
    (2.0 * k as f64 / (k - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub sem_dims: Vec<usize>,
    pub mean_scale: f64,
    /// Within-class standard deviation on the semantic coordinates.
    pub within_std: f64,
    /// Standard deviation on the noise coordinates; `within_std` when `None`.
    pub noise_std: Option<f64>,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            n: 1200,
            d: 8,
            k: 3,
            sem_dims: vec![0, 1],
            mean_scale: 1.0,
            within_std: 0.3,
            noise_std: None,
            seed: 0,
        }
    }
}

impl MixtureConfig {
    pub fn generate(&self) -> Result<SyntheticDataset> {
        let &Self { n, d, k, mean_scale, within_std, seed, .. } = self;
        let noise_std = self.noise_std.unwrap_or(within_std);
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
        }
        let spec = SubspaceSpec::new(d, &self.sem_dims)?;
        if k - 1 > spec.sem_dims().len() {
            return Err(Error::invalid(format!(
                "{k} simplex vertices need {} semantic dimensions, have {}",
                k - 1,
                spec.sem_dims().len()
            )));
        }
        if n < 10 * k {
            return Err(Error::invalid(format!("n = {n} is below 10 per class")));
        }
        for (what, v) in [("mean_scale", mean_scale), ("within_std", within_std), ("noise_std", noise_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain {
                    what,
                    value: v,
                    domain: "[0, inf)",
                });
            }
        }

        let simplex = simplex_vertices(k);
        let mut class_means = Matrix::zeros(k, d);
        for c in 0..k {
            for (j, &dim) in spec.sem_dims().iter().take(k - 1).enumerate() {
                class_means[(c, dim)] = mean_scale * simplex[(c, j)];
            }
        }
        let mut std = vec![noise_std; d];
        for &s in spec.sem_dims() {
            std[s] = within_std;
        }
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut r = rng::substream(seed, tag::DATA, i as u64);
                let mean = class_means.row(labels[i]);
                (0..d).map(|j| mean[j] + std[j] * rng::normal(&mut r)).collect::<Vec<_>>()
            })
            .collect();
        let (delta_min, delta_max) = pairwise_extremes(&class_means);
        let sem = self.sem_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        Ok(SyntheticDataset {
            x0: Matrix::from_vec(n, d, rows)?,
            labels,
            spec,
            class_means,
            delta_min,
            delta_max,
            meta: DatasetMeta {
                generator: "gaussian_mixture".into(),
                params: vec![
                    ("n".into(), n.to_string()),
                    ("d".into(), d.to_string()),
                    ("k".into(), k.to_string()),
                    ("sem_dims".into(), sem),
                    ("mean_scale".into(), mean_scale.to_string()),
                    ("within_std".into(), within_std.to_string()),
                    ("noise_std".into(), noise_std.to_string()),
                ],
                seed,
            },
        })
    }
}

/// Balanced mixture of `k` isotropic Gaussians whose means sit at
/// `mean_scale` times the vertices of a regular simplex spanning the first
/// `k - 1` semantic coordinates.
pub fn gaussian_mixture(
    n: usize,
    d: usize,
    k: usize,
    sem_dims: &[usize],
    mean_scale: f64,
    within_std: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    MixtureConfig {
        n,
        d,
        k,
        sem_dims: sem_dims.to_vec(),
        mean_scale,
        within_std,
        noise_std: None,
        seed,
    }
    .generate()
}

/// Two interleaved unit half-circles, the second shifted by `(1, -0.5)`, with
/// isotropic Gaussian noise. Angles are evenly spaced on `[0, π]`.
pub fn two_moons(n: usize, noise_std: f64, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::invalid(format!("two_moons needs a positive even n, got {n}")));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Domain {
            what: "noise_std",
            value: noise_std,
            domain: "[0, inf)",
        });
    }
    let half = n / 2;
    let angle = |j: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * j as f64 / (half - 1) as f64
        }
    };
    let mut x0 = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (class, j) = (i / half, i % half);
        let (s, c) = angle(j).sin_cos();
        let (x, y) = if class == 0 { (c, s) } else { (1.0 - c, 0.5 - s) };
        let mut r = rng::substream(seed, tag::DATA, i as u64);
        x0[(i, 0)] = x + noise_std * rng::normal(&mut r);
        x0[(i, 1)] = y + noise_std * rng::normal(&mut r);
        labels.push(class);
    }
    let arc = 2.0 / std::f64::consts::PI;
    let class_means = Matrix::from_rows(&[vec![0.0, arc], vec![1.0, 0.5 - arc]])?;
    let (delta_min, delta_max) = pairwise_extremes(&class_means);
    Ok(SyntheticDataset {
        x0,
        labels,
        spec: SubspaceSpec::new(2, &[0, 1])?,
        class_means,
        delta_min,
        delta_max,
        meta: DatasetMeta {
            generator: "two_moons".into(),
            params: vec![("n".into(), n.to_string()), ("noise_std".into(), noise_std.to_string())],
            seed,
        },
    })
}

/// Path of the metadata file written next to a dataset CSV.
pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes `label,dim0..` rows to `path` and the metadata sidecar to
/// [`meta_path`].
pub fn save_dataset(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("dim{j}")).collect();
    writeln!(w, "label,{}", header.join(","))?;
    for (row, label) in ds.x0.iter_rows().zip(&ds.labels) {
        writeln!(w, "{label},{}", join(row))?;
    }
    w.flush()?;

    let mut m = std::io::BufWriter::new(fs::File::create(meta_path(path))?);
    writeln!(m, "generator={}", ds.meta.generator)?;
    writeln!(m, "seed={}", ds.meta.seed)?;
    for (k, v) in &ds.meta.params {
        writeln!(m, "param.{k}={v}")?;
    }
    writeln!(m, "d={}", ds.spec.d())?;
    let sem: Vec<String> = ds.spec.sem_dims().iter().map(usize::to_string).collect();
    writeln!(m, "sem_dims={}", sem.join(","))?;
    for c in 0..ds.n_classes() {
        writeln!(m, "class_mean.{c}={}", join(ds.class_means.row(c)))?;
    }
    m.flush()?;
    Ok(())
}

fn parse_f64s(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("`{v}`: {e}"),
            })
        })
        .collect()
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let meta_text = fs::read_to_string(meta_path(path))?;
    let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut params = Vec::new();
    for (i, line) in meta_text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        if let Some(p) = k.strip_prefix("param.") {
            params.push((p.to_string(), v.to_string()));
        }
        kv.insert(k.to_string(), (i + 1, v.to_string()));
    }
    let get = |k: &str| {
        kv.get(k).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("metadata lacks `{k}`"),
        })
    };
    let num = |k: &str| -> Result<usize> {
        let (line, v) = get(k)?;
        v.parse().map_err(|e| Error::Parse {
            line: *line,
            message: format!("{k}: {e}"),
        })
    };
    let d = num("d")?;
    let (sem_line, sem) = get("sem_dims")?;
    let sem: Vec<usize> = sem
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|e| Error::Parse {
                line: *sem_line,
                message: format!("sem_dims: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    let (seed_line, seed) = get("seed")?;
    let seed = seed.parse().map_err(|e| Error::Parse {
        line: *seed_line,
        message: format!("seed: {e}"),
    })?;
    let mut means = Vec::new();
    while let Some((line, v)) = kv.get(&format!("class_mean.{}", means.len())) {
        let row = parse_f64s(v, *line)?;
        if row.len() != d {
            return Err(Error::Parse {
                line: *line,
                message: format!("class mean has {} entries, expected {d}", row.len()),
            });
        }
        means.push(row);
    }
    if means.len() < 2 {
        return Err(Error::Parse {
            line: 0,
            message: "metadata lists fewer than 2 class means".into(),
        });
    }
    let class_means = Matrix::from_rows(&means)?;

    let reader = BufReader::new(fs::File::open(path)?);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            continue;
        }
        let (label, rest) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "missing values".into(),
        })?;
        let label: usize = label.parse().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("label: {e}"),
        })?;
        if label >= means.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("label {label} has no class mean"),
            });
        }
        let row = parse_f64s(rest, i + 1)?;
        if row.len() != d {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("{} values, expected {d}", row.len()),
            });
        }
        labels.push(label);
        data.extend(row);
    }
    let (delta_min, delta_max) = pairwise_extremes(&class_means);
    Ok(SyntheticDataset {
        x0: Matrix::from_vec(labels.len(), d, data)?,
        labels,
        spec: SubspaceSpec::new(d, &sem)?,
        class_means,
        delta_min,
        delta_max,
        meta: DatasetMeta {
            generator: get("generator")?.1.clone(),
            params,
            seed,
        },
    })
}
