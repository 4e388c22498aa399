//! End-to-end comparison of FBP, TV, Noise2Inverse and Sparse2Inverse.
//!
//! A run simulates noisy sparse-view data for every configured angle count,
//! reconstructs it with every configured method and scores the results
//! against the ground truth. Each (angle count, method) pair is a cell; a
//! failing cell is recorded and the others still run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::io::{montage, read_grid, save_image, save_sinogram, write_png, Dtype};
use crate::neural::{save_checkpoint, Descriptor};
use crate::noise::{apply_noise, calibrate_scale, NoiseModel};
use crate::phantom::{generate_phantoms, PhantomKind, PhantomSpec};
use crate::split::{make_partition, SubsetSelection};
use crate::tomo::{fbp, radon, Filter, Geometry, Image, Sinogram};
use crate::train::{infer, mean, train, Method, Reference, TrainConfig, CURVE_HEADER};
use crate::tv::{calibrated_lambda_scale, default_lambda_grid, tv_grid_search, TvConfig, TvType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodKind {
    Fbp,
    Tv,
    Noise2Inverse,
    Sparse2Inverse,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] =
        [MethodKind::Fbp, MethodKind::Tv, MethodKind::Noise2Inverse, MethodKind::Sparse2Inverse];

    fn learned(self) -> Option<Method> {
        match self {
            MethodKind::Noise2Inverse => Some(Method::Noise2Inverse),
            MethodKind::Sparse2Inverse => Some(Method::Sparse2Inverse),
            _ => None,
        }
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fbp" => Ok(MethodKind::Fbp),
            "tv" => Ok(MethodKind::Tv),
            other => match other.parse::<Method>()? {
                Method::Noise2Inverse => Ok(MethodKind::Noise2Inverse),
                Method::Sparse2Inverse => Ok(MethodKind::Sparse2Inverse),
            },
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.learned() {
            Some(m) => m.fmt(f),
            None => f.write_str(if *self == MethodKind::Fbp { "fbp" } else { "tv" }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Generated {
        spec: PhantomSpec,
        count: usize,
    },
    /// Directory of TOM1 images, see [`ingest_dataset`].
    Ingested {
        dir: PathBuf,
        size: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub angle_counts: Vec<usize>,
    pub photon_count: f64,
    pub methods: Vec<MethodKind>,
    pub k: usize,
    pub p: usize,
    pub epochs: usize,
    /// Overrides both learning rates when set.
    pub learning_rate: Option<f64>,
    pub lr_s2i: f64,
    pub lr_n2i: f64,
    pub eval_every: usize,
    pub batch: usize,
    pub seed: u64,
    pub filter: Filter,
    pub descriptor: Descriptor,
    /// Absolute lambdas; `None` uses the calibrated default grid per image.
    pub tv_lambdas: Option<Vec<f64>>,
    pub tv_iters: usize,
    pub tv_type: TvType,
    pub out: PathBuf,
    /// Write raw grids, PNGs and checkpoints next to the CSVs.
    pub write_artifacts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Generated { spec: PhantomSpec::default(), count: 4 },
            angle_counts: vec![16, 32, 64],
            photon_count: 1000.0,
            methods: MethodKind::ALL.to_vec(),
            k: 4,
            p: 1,
            epochs: 500,
            learning_rate: None,
            lr_s2i: 1e-3,
            lr_n2i: 5e-4,
            eval_every: 10,
            batch: 1,
            seed: 0,
            filter: Filter::RamLak,
            descriptor: Descriptor::default(),
            tv_lambdas: None,
            tv_iters: 500,
            tv_type: TvType::Isotropic,
            out: PathBuf::from("out"),
            write_artifacts: true,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse '{s}'"))))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse '{value}'")))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting. Keys mirror the CLI flags with
    /// dashes or underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "angles" => self.angle_counts = parse_list(k, value)?,
            "photons" | "photon_count" => self.photon_count = parse_one(k, value)?,
            "methods" => self.methods = parse_list(k, value)?,
            "splits" | "k" => self.k = parse_one(k, value)?,
            "subset_size" | "p" => self.p = parse_one(k, value)?,
            "epochs" => self.epochs = parse_one(k, value)?,
            "lr" => self.learning_rate = Some(parse_one(k, value)?),
            "lr_s2i" => self.lr_s2i = parse_one(k, value)?,
            "lr_n2i" => self.lr_n2i = parse_one(k, value)?,
            "eval_every" => self.eval_every = parse_one(k, value)?,
            "batch" => self.batch = parse_one(k, value)?,
            "seed" => self.seed = parse_one(k, value)?,
            "filter" => self.filter = value.trim().parse()?,
            "widths" => self.descriptor.widths = parse_list(k, value)?,
            "convs_per_level" => self.descriptor.convs_per_level = parse_one(k, value)?,
            "tv_lambdas" => self.tv_lambdas = Some(parse_list(k, value)?),
            "tv_iters" => self.tv_iters = parse_one(k, value)?,
            "tv_type" => self.tv_type = value.trim().parse()?,
            "out" => self.out = PathBuf::from(value.trim()),
            "artifacts" => self.write_artifacts = parse_one(k, value)?,
            "dataset" => {
                let size = match &self.dataset {
                    Dataset::Generated { spec, .. } => Some(spec.size),
                    Dataset::Ingested { size, .. } => *size,
                };
                self.dataset = Dataset::Ingested { dir: PathBuf::from(value.trim()), size };
            }
            "images" | "size" | "phantom" | "phantom_seed" | "ellipses" => {
                let Dataset::Generated { spec, count } = &mut self.dataset else {
                    if k == "size" {
                        if let Dataset::Ingested { size, .. } = &mut self.dataset {
                            *size = Some(parse_one(k, value)?);
                        }
                        return Ok(());
                    }
                    return invalid(format!("{k} only applies to generated phantoms"));
                };
                match k {
                    "images" => *count = parse_one(k, value)?,
                    "size" => spec.size = parse_one(k, value)?,
                    "phantom" => spec.kind = value.trim().parse::<PhantomKind>()?,
                    "phantom_seed" => spec.seed = parse_one(k, value)?,
                    _ => {
                        let v: Vec<usize> = parse_list(k, value)?;
                        let [lo, hi] = v[..] else {
                            return invalid("ellipses expects 'min,max'");
                        };
                        spec.ellipse_count = (lo, hi);
                    }
                }
            }
            other => return invalid(format!("unknown setting '{other}'")),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("line {}: expected key = value", n + 1),
                });
            };
            self.set(key, value)
                .map_err(|e| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {e}", n + 1) })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.angle_counts.is_empty() || self.methods.is_empty() {
            return invalid("need at least one angle count and one method");
        }
        if let Some(&bad) = self.angle_counts.iter().find(|&&a| a < self.k) {
            return invalid(format!("angle count {bad} is smaller than k = {}", self.k));
        }
        if !(self.photon_count > 0.0 && self.photon_count.is_finite()) {
            return invalid("photon count must be positive");
        }
        if self.tv_iters == 0 {
            return invalid("tv_iters must be positive");
        }
        if let Some(l) = &self.tv_lambdas {
            if l.is_empty() || l.iter().any(|v| v.is_nan() || *v < 0.0) {
                return invalid("tv lambdas must be a nonempty list of nonnegative values");
            }
        }
        match &self.dataset {
            Dataset::Generated { count, .. } if *count == 0 => return invalid("need at least one image"),
            Dataset::Ingested { dir, .. } if !dir.is_dir() => {
                return invalid(format!("dataset directory {} does not exist", dir.display()))
            }
            _ => {}
        }
        for m in &self.methods {
            if let Some(method) = m.learned() {
                self.train_config(method).validate()?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        let lr = self.learning_rate.unwrap_or(match method {
            Method::Sparse2Inverse => self.lr_s2i,
            Method::Noise2Inverse => self.lr_n2i,
        });
        TrainConfig {
            method,
            epochs: self.epochs,
            learning_rate: lr,
            k: self.k,
            p: self.p,
            seed: self.seed,
            eval_every: self.eval_every,
            batch: self.batch,
            filter: self.filter,
            descriptor: self.descriptor.clone(),
        }
    }

    fn load_images(&self) -> Result<Vec<Image>> {
        match &self.dataset {
            Dataset::Generated { spec, count } => generate_phantoms(spec, *count),
            Dataset::Ingested { dir, size } => ingest_dataset(dir, *size),
        }
    }
}

/// Loads every `*.tom` image in `dir` sorted by file name and rescales the
/// set to [0, 1] with one global min / max.
pub fn ingest_dataset(dir: &Path, expected_size: Option<usize>) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "tom"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return invalid(format!("no .tom files in {}", dir.display()));
    }
    let mut images = Vec::with_capacity(paths.len());
    for path in &paths {
        let g = read_grid(path)?;
        let want = match (expected_size, images.first()) {
            (Some(s), _) => Some((s, s)),
            (None, Some(first)) => Some(Image::shape(first)),
            (None, None) => None,
        };
        if let Some(shape) = want {
            if (g.rows, g.cols) != shape {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("size {}x{} differs from {}x{}", g.rows, g.cols, shape.0, shape.1),
                });
            }
        }
        let img = Image::from_vec(g.rows, g.cols, g.data)
            .map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
        if !img.is_finite() {
            return Err(Error::Format { path: path.clone(), reason: "non-finite pixel".into() });
        }
        images.push(img);
    }
    let lo = images.iter().map(|i| i.min_max().0).fold(f64::INFINITY, f64::min);
    let hi = images.iter().map(|i| i.min_max().1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(images.into_iter().map(|im| im.map(|v| (v - lo) / span)).collect())
}

/// Checkpoint policy of a result row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// No training or parameter selection involved.
    None,
    /// Chosen with the ground truth (best SSIM epoch, or best lambda).
    Oracle,
    /// Last training epoch.
    Final,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::None => "none",
            Selection::Oracle => "oracle-selected",
            Selection::Final => "final-epoch",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: MethodKind,
    pub angles: usize,
    pub selection: Selection,
    pub ssim: f64,
    pub psnr: f64,
    pub per_image_ssim: Vec<f64>,
    pub per_image_psnr: Vec<f64>,
    /// Training epoch or TV lambda behind the row, free text without commas.
    pub detail: String,
    /// `ok` or the error of a failed cell.
    pub status: String,
}

pub const RESULTS_HEADER: &str = "method,angles,photon_count,k,p,seed,checkpoint,ssim,psnr,detail,status";

#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    /// Training curves keyed by (method, angles).
    pub curves: BTreeMap<(MethodKind, usize), Vec<CurvePoint>>,
    pub results_csv: String,
}

impl ExperimentReport {
    pub fn row(&self, method: MethodKind, angles: usize, selection: Selection) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.angles == angles && r.selection == selection)
    }

    /// Best (oracle-selected) row, or the only row for FBP.
    pub fn best(&self, method: MethodKind, angles: usize) -> Option<&ResultRow> {
        self.row(method, angles, Selection::Oracle).or_else(|| self.row(method, angles, Selection::None))
    }
}

fn sanitize(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn noise_seed(seed: u64, angles: usize, image: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((angles as u64) << 32) ^ image as u64
}

struct CellOutput {
    rows: Vec<ResultRow>,
    curve: Option<Vec<CurvePoint>>,
    curve_csv: Option<String>,
    recon: Option<Vec<Image>>,
}

struct AngleData {
    geom: Geometry,
    noisy: Vec<Sinogram>,
}

fn run_cell(
    cfg: &ExperimentConfig,
    method: MethodKind,
    data: &AngleData,
    truth: &[Image],
    reference: &Reference<'_>,
) -> Result<CellOutput> {
    let angles = data.geom.n_angles();
    let row = |selection, s: Vec<f64>, p: Vec<f64>, detail: String| ResultRow {
        method,
        angles,
        selection,
        ssim: mean(&s),
        psnr: mean(&p),
        per_image_ssim: s,
        per_image_psnr: p,
        detail,
        status: "ok".into(),
    };
    match method {
        MethodKind::Fbp => {
            let recon = data.noisy.iter().map(|y| fbp(y, &data.geom, cfg.filter)).collect::<Result<Vec<_>>>()?;
            let (s, p) = reference.score(&recon)?;
            Ok(CellOutput {
                rows: vec![row(Selection::None, s, p, cfg.filter.to_string())],
                curve: None,
                curve_csv: None,
                recon: Some(recon),
            })
        }
        MethodKind::Tv => {
            let base = TvConfig { iterations: cfg.tv_iters, tv_type: cfg.tv_type, ..TvConfig::default() };
            let (mut s, mut p, mut recon, mut lambdas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (y, x) in data.noisy.iter().zip(truth) {
                let grid = match &cfg.tv_lambdas {
                    Some(l) => l.clone(),
                    None => default_lambda_grid(calibrated_lambda_scale(y, &data.geom)?),
                };
                let search = tv_grid_search(y, &data.geom, x, &grid, &base, Some(reference.data_range))?;
                s.push(search.best_by_ssim().ssim);
                p.push(search.best_by_psnr().psnr);
                lambdas.push(format!("{:.4e}/{:.4e}", search.best_by_ssim().lambda, search.best_by_psnr().lambda));
                recon.push(search.best_by_ssim().image.clone());
            }
            let detail = format!("lambda(ssim/psnr)={}", lambdas.join(" "));
            Ok(CellOutput {
                rows: vec![row(Selection::Oracle, s, p, detail)],
                curve: None,
                curve_csv: None,
                recon: Some(recon),
            })
        }
        MethodKind::Noise2Inverse | MethodKind::Sparse2Inverse => {
            let method_t = method.learned().expect("learned method");
            let tc = cfg.train_config(method_t);
            let outcome = train(&tc, &data.geom, &data.noisy, Some(reference), |_| {})?;
            let partition = make_partition(angles, tc.k)?;
            let selection = SubsetSelection::new(&partition, tc.p)?;
            let best = outcome.best.as_ref().ok_or_else(|| Error::InvalidState("no evaluation epoch".into()))?;
            let recon_with = |params| {
                data.noisy
                    .iter()
                    .map(|y| infer(params, y, &partition, &selection, &data.geom, tc.filter))
                    .collect::<Result<Vec<_>>>()
            };
            let best_recon = recon_with(&best.params)?;
            let (bs, bp) = reference.score(&best_recon)?;
            let (fs, fp) = reference.score(&recon_with(&outcome.final_params)?)?;
            let mut curve_csv = String::from(CURVE_HEADER);
            curve_csv.push('\n');
            for r in &outcome.records {
                curve_csv.push_str(&r.csv_row());
                curve_csv.push('\n');
            }
            let curve = outcome
                .records
                .iter()
                .map(|r| CurvePoint { epoch: r.epoch, loss: r.train_loss, ssim: r.ssim, psnr: r.psnr })
                .collect();
            if cfg.write_artifacts {
                let stem = format!("checkpoint_{method}_{angles}");
                save_checkpoint(&best.params, &cfg.out.join(format!("{stem}_best.ckpt")))?;
                save_checkpoint(&outcome.final_params, &cfg.out.join(format!("{stem}_final.ckpt")))?;
            }
            Ok(CellOutput {
                rows: vec![
                    row(Selection::Oracle, bs, bp, format!("epoch={}", best.epoch)),
                    row(Selection::Final, fs, fp, format!("epoch={}", tc.epochs)),
                ],
                curve: Some(curve),
                curve_csv: Some(curve_csv),
                recon: Some(best_recon),
            })
        }
    }
}

/// Runs every (angle count, method) cell and writes the outputs to
/// `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let truth = cfg.load_images()?;
    let reference = Reference::new(&truth)?;
    let (h, w) = truth[0].shape();

    let mut angle_data = Vec::new();
    let mut clean_all = Vec::new();
    for &angles in &cfg.angle_counts {
        let geom = Geometry::new(h, w, angles)?;
        let clean = truth.iter().map(|x| radon(x, &geom, &geom.all_angle_ids())).collect::<Result<Vec<_>>>()?;
        clean_all.push((geom, clean));
    }
    // One attenuation scale for the whole dataset so every angle count sees
    // the same dose per ray.
    let peak = clean_all.iter().flat_map(|(_, c)| c.iter().map(Sinogram::max_value)).fold(0.0, f64::max);
    let scale = calibrate_scale(peak);
    for (geom, clean) in clean_all {
        let angles = geom.n_angles();
        let noisy = clean
            .iter()
            .enumerate()
            .map(|(i, c)| {
                apply_noise(c, &NoiseModel::new(cfg.photon_count, noise_seed(cfg.seed, angles, i)).with_scale(scale))
            })
            .collect::<Result<Vec<_>>>()?;
        angle_data.push(AngleData { geom, noisy });
    }

    let cells: Vec<(usize, MethodKind)> =
        (0..angle_data.len()).flat_map(|a| cfg.methods.iter().map(move |&m| (a, m))).collect();
    let outputs: Vec<Result<CellOutput>> =
        cells.par_iter().map(|&(a, m)| run_cell(cfg, m, &angle_data[a], &truth, &reference)).collect();

    let mut rows = Vec::new();
    let mut curves = BTreeMap::new();
    for (&(a, method), out) in cells.iter().zip(outputs) {
        let angles = angle_data[a].geom.n_angles();
        match out {
            Ok(cell) => {
                if let Some(csv) = &cell.curve_csv {
                    fs::write(cfg.out.join(format!("curves_{method}_{angles}.csv")), csv)?;
                }
                if let Some(c) = cell.curve {
                    curves.insert((method, angles), c);
                }
                if cfg.write_artifacts {
                    if let Some(recon) = &cell.recon {
                        write_png(&cfg.out.join(format!("recon_{method}_{angles}.png")), &montage(recon)?)?;
                        for (i, img) in recon.iter().enumerate() {
                            save_image(&cfg.out.join(format!("recon_{method}_{angles}_{i}.tom")), img, Dtype::F64)?;
                        }
                    }
                }
                rows.extend(cell.rows);
            }
            Err(e) => rows.push(ResultRow {
                method,
                angles,
                selection: Selection::None,
                ssim: f64::NAN,
                psnr: f64::NAN,
                per_image_ssim: Vec::new(),
                per_image_psnr: Vec::new(),
                detail: String::new(),
                status: sanitize(&format!("error: {e}")),
            }),
        }
    }
    if cfg.write_artifacts {
        write_png(&cfg.out.join("truth.png"), &montage(&truth)?)?;
        for (i, x) in truth.iter().enumerate() {
            save_image(&cfg.out.join(format!("truth_{i}.tom")), x, Dtype::F64)?;
        }
        for d in &angle_data {
            for (i, y) in d.noisy.iter().enumerate() {
                save_sinogram(&cfg.out.join(format!("sinogram_{}_{i}.tom", d.geom.n_angles())), y, Dtype::F64)?;
            }
        }
    }

    let mut csv = String::from(RESULTS_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{:.4},{},{}\n",
            r.method,
            r.angles,
            cfg.photon_count,
            cfg.k,
            cfg.p,
            cfg.seed,
            r.selection,
            r.ssim,
            r.psnr,
            sanitize(&r.detail),
            r.status
        ));
    }
    fs::write(cfg.out.join("results.csv"), &csv)?;
    Ok(ExperimentReport { rows, curves, results_csv: csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: Dataset::Generated { spec: PhantomSpec { size: 32, ..PhantomSpec::default() }, count: 2 },
            angle_counts: vec![8, 16],
            epochs: 3,
            eval_every: 1,
            tv_iters: 20,
            tv_lambdas: Some(vec![0.1, 1.0]),
            descriptor: Descriptor { widths: vec![4, 8], ..Descriptor::default() },
            out: out.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(m.to_string().parse::<MethodKind>().unwrap(), m);
        }
        assert!("unet".parse::<MethodKind>().is_err());
    }

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# desk run\nangles = 16, 32\nphotons=3000\nmethods=fbp,s2i\nsplits=4\nsubset-size=2\nepochs=7\nlr=0.01\nseed=9\ntv_lambdas=0.1,0.2\nsize=32\n").unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.angle_counts, vec![16, 32]);
        assert_eq!(cfg.photon_count, 3000.0);
        assert_eq!(cfg.methods, vec![MethodKind::Fbp, MethodKind::Sparse2Inverse]);
        assert_eq!((cfg.k, cfg.p, cfg.epochs, cfg.seed), (4, 2, 7, 9));
        assert_eq!(cfg.train_config(Method::Noise2Inverse).learning_rate, 0.01);
        assert_eq!(cfg.tv_lambdas, Some(vec![0.1, 0.2]));
        fs::write(&path, "angles=16\nbogus=1\n").unwrap();
        let err = ExperimentConfig::from_file(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        fs::write(&path, "angles 16\n").unwrap();
        assert!(ExperimentConfig::from_file(&path).is_err());
    }

    #[test]
    fn validation() {
        let ok = ExperimentConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ExperimentConfig { angle_counts: vec![2], ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { p: 4, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { tv_lambdas: Some(vec![]), ..ok.clone() }.validate().is_err());
        let missing = Dataset::Ingested { dir: PathBuf::from("/nonexistent/dir"), size: None };
        assert!(ExperimentConfig { dataset: missing, ..ok }.validate().is_err());
    }

    #[test]
    fn ingest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_dataset(dir.path(), None).is_err());
        let xs = generate_phantoms(&PhantomSpec { size: 16, ..PhantomSpec::default() }, 3).unwrap();
        for (i, x) in xs.iter().enumerate() {
            save_image(&dir.path().join(format!("img_{i}.tom")), x, Dtype::F64).unwrap();
        }
        let lo = xs.iter().map(|i| i.min_max().0).fold(f64::INFINITY, f64::min);
        let hi = xs.iter().map(|i| i.min_max().1).fold(f64::NEG_INFINITY, f64::max);
        let back = ingest_dataset(dir.path(), Some(16)).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(&a.map(|v| (v - lo) / (hi - lo)), b);
        }
        assert!(ingest_dataset(dir.path(), Some(32)).is_err());
        save_image(&dir.path().join("img_9.tom"), &Image::zeros(8, 8), Dtype::F32).unwrap();
        let err = ingest_dataset(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("img_9.tom"), "{err}");
        fs::write(dir.path().join("img_9.tom"), b"TOM1junk").unwrap();
        let err = ingest_dataset(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("img_9.tom"), "{err}");
    }

    #[test]
    fn small_run_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&quick(a.path())).unwrap();
        let rb = run_experiment(&quick(b.path())).unwrap();
        assert_eq!(fs::read(a.path().join("results.csv")).unwrap(), fs::read(b.path().join("results.csv")).unwrap());
        // fbp + tv + 2 rows for each learned method, per angle count
        assert_eq!(ra.rows.len(), 2 * 6);
        assert!(ra.rows.iter().all(|r| r.status == "ok"));
        assert_eq!(ra.results_csv, rb.results_csv);
        for name in
            ["recon_s2i_16.png", "curves_n2i_8.csv", "checkpoint_s2i_8_best.ckpt", "truth_1.tom", "sinogram_16_0.tom"]
        {
            assert!(a.path().join(name).is_file(), "{name} missing");
        }
        let curve = fs::read_to_string(a.path().join("curves_s2i_16.csv")).unwrap();
        assert!(curve.starts_with(CURVE_HEADER));
        assert_eq!(curve.lines().count(), 4);
    }

    #[test]
    fn fbp_improves_with_angles() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            dataset: Dataset::Generated { spec: PhantomSpec::default(), count: 3 },
            methods: vec![MethodKind::Fbp],
            write_artifacts: false,
            out: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.results_csv.lines().count(), 1 + 3);
        let psnr: Vec<f64> = [16, 32, 64].iter().map(|&a| report.best(MethodKind::Fbp, a).unwrap().psnr).collect();
        assert!(psnr[0] <= psnr[1] && psnr[1] <= psnr[2], "{psnr:?}");
    }

    #[test]
    fn failing_cell_does_not_stop_the_run() {
        let dir = tempfile::tempdir().unwrap();
        // k = 4 > 3 angles is caught by validation, so break TV instead.
        let cfg = ExperimentConfig {
            methods: vec![MethodKind::Fbp, MethodKind::Tv],
            tv_lambdas: Some(vec![f64::INFINITY]),
            write_artifacts: false,
            ..quick(dir.path())
        };
        let report = run_experiment(&cfg).unwrap();
        assert!(report.rows.iter().filter(|r| r.method == MethodKind::Fbp).all(|r| r.status == "ok"));
        assert!(report.rows.iter().filter(|r| r.method == MethodKind::Tv).all(|r| r.status.starts_with("error")));
    }
}
