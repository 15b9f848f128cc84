//! Synthetic dataset generation, on-disk layout and train/test splitting.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! trial_<load>/img_<k>.ppm
//! trial_<load>/records.csv
//! ```
//!
//! Each CSV row holds the global sample index, the `T×4` tendon window
//! (oldest first), the `n×3` marker positions and the load label. Reals are
//! written in shortest round-trip form, so parsing recovers them exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::render::{read_ppm, render, write_ppm, Camera, RenderOptions};
use crate::sim::{backbone_samples, marker_positions, trajectory, LoadCondition, Point3, RobotSpec, TendonDisplacement};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.csv";

/// Backbone samples used to draw the robot body.
const STROKE_SAMPLES: usize = 41;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub profile: String,
    pub robot: RobotSpec,
    pub camera: Camera,
    /// Per-frame noise seeds are derived from the dataset seed; the `seed`
    /// field here is ignored.
    pub render: RenderOptions,
    pub loads: Vec<LoadCondition>,
    pub cycles: usize,
    pub steps_per_cycle: usize,
    pub window: usize,
    pub split_ratio: f64,
}

impl DataConfig {
    /// 64×64 images, five markers, four trials of 5×176 = 880 samples.
    pub fn desk() -> Self {
        let robot = RobotSpec::default();
        Self {
            profile: "desk".into(),
            camera: Camera::side_on(robot.length, 64, 64),
            robot,
            render: RenderOptions::default(),
            loads: LoadCondition::ALL.to_vec(),
            cycles: 5,
            steps_per_cycle: 176,
            window: 10,
            split_ratio: 0.8,
        }
    }

    /// Full-resolution 640×480 frames with a proportionally wider stroke.
    pub fn paper() -> Self {
        let d = Self::desk();
        Self {
            profile: "paper".into(),
            camera: Camera::side_on(d.robot.length, 640, 480),
            render: RenderOptions {
                stroke_radius: 8.0,
                marker_radius: 10.0,
                ..d.render
            },
            ..d
        }
    }

    /// 8×8 images, two markers, 24 samples per trial.
    pub fn tiny() -> Self {
        let robot = RobotSpec::uniform(100.0, 5.0, 80.0, 2).expect("valid tiny robot");
        Self {
            profile: "tiny".into(),
            camera: Camera::side_on(robot.length, 8, 8),
            robot,
            render: RenderOptions {
                stroke_radius: 1.0,
                marker_radius: 1.0,
                ..RenderOptions::default()
            },
            loads: LoadCondition::ALL.to_vec(),
            cycles: 2,
            steps_per_cycle: 12,
            window: 3,
            split_ratio: 0.8,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.render.validate()?;
        if self.loads.is_empty() {
            return Err(Error::Config("no load conditions".into()));
        }
        let mut seen = self.loads.clone();
        seen.sort_by_key(|l| l.as_str());
        seen.dedup();
        if seen.len() != self.loads.len() {
            return Err(Error::Config("duplicate load condition".into()));
        }
        if self.cycles == 0 || self.steps_per_cycle == 0 || self.window == 0 {
            return Err(Error::Config("cycles, steps per cycle and window must be positive".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0, 1)", self.split_ratio)));
        }
        Ok(())
    }

    pub fn samples_per_trial(&self) -> usize {
        self.cycles * self.steps_per_cycle
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub load: LoadCondition,
    pub trajectory_seed: u64,
    /// Global index of the first sample of this trial.
    pub first_index: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DataConfig,
    pub seed: u64,
    pub sample_count: usize,
    pub trials: Vec<TrialInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Global index, unique across trials.
    pub index: usize,
    pub load: LoadCondition,
    /// Tendon history, oldest first; the last entry is the current step.
    pub window: Vec<TendonDisplacement>,
    pub image: PathBuf,
    pub points: Vec<Point3>,
}

impl Sample {
    pub fn current(&self) -> &TendonDisplacement {
        self.window.last().expect("non-empty window")
    }

    pub fn load_image(&self) -> Result<Tensor> {
        read_ppm(&self.image)
    }
}

/// SplitMix64 finalizer, used to derive independent child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn frame_seed(seed: u64, trial: usize, k: usize) -> u64 {
    mix(mix(seed ^ mix(trial as u64)) ^ k as u64)
}

pub fn trial_dir_name(load: LoadCondition) -> String {
    format!("trial_{}", load.as_str())
}

pub fn image_name(k: usize) -> String {
    format!("img_{k}.ppm")
}

/// Tendon window ending at step `k`, left-padded with step 0.
pub fn window_at(steps: &[TendonDisplacement], k: usize, len: usize) -> Vec<TendonDisplacement> {
    (0..len).map(|j| steps[(k + j + 1).saturating_sub(len)]).collect()
}

/// Plan the trials described by `config` for a dataset `seed`.
pub fn plan(config: &DataConfig, seed: u64) -> Result<DatasetManifest> {
    config.validate()?;
    let per = config.samples_per_trial();
    let trials: Vec<TrialInfo> = config
        .loads
        .iter()
        .enumerate()
        .map(|(i, &load)| TrialInfo {
            load,
            trajectory_seed: mix(seed.wrapping_add(i as u64)),
            first_index: i * per,
            samples: per,
        })
        .collect();
    Ok(DatasetManifest {
        config: config.clone(),
        seed,
        sample_count: per * trials.len(),
        trials,
    })
}

/// Generate a dataset into `out`. Trials are written in parallel.
pub fn generate(config: &DataConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    let manifest = plan(config, seed)?;
    write_dataset(&manifest, out)?;
    Ok(manifest)
}

/// Rebuild the dataset described by an existing manifest.
pub fn regenerate(manifest_path: &Path, out: &Path) -> Result<DatasetManifest> {
    let manifest = read_manifest(manifest_path)?;
    write_dataset(&manifest, out)?;
    Ok(manifest)
}

fn write_dataset(manifest: &DatasetManifest, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .trials
            .iter()
            .enumerate()
            .map(|(t, trial)| s.spawn(move || write_trial(manifest, t, trial, out)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("trial writer panicked")).collect()
    });
    results.into_iter().collect::<Result<()>>()?;
    let path = out.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn write_trial(manifest: &DatasetManifest, t: usize, trial: &TrialInfo, out: &Path) -> Result<()> {
    let cfg = &manifest.config;
    let dir = out.join(trial_dir_name(trial.load));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let steps = trajectory(cfg.cycles, cfg.steps_per_cycle, trial.trajectory_seed, &cfg.robot, trial.load)?;
    let qs: Vec<TendonDisplacement> = steps.iter().map(|s| s.q).collect();
    let force = trial.load.load();
    let mut samples = Vec::with_capacity(qs.len());
    for (k, q) in qs.iter().enumerate() {
        let index = trial.first_index + k;
        let wrap = |e| Error::Sample {
            index,
            source: Box::new(e),
        };
        let points = marker_positions(q, &force, &cfg.robot).map_err(wrap)?;
        let body = backbone_samples(q, &force, &cfg.robot, STROKE_SAMPLES).map_err(wrap)?;
        let opts = RenderOptions {
            seed: frame_seed(manifest.seed, t, k),
            ..cfg.render.clone()
        };
        let img = render(&points, &body, &cfg.camera, &opts).map_err(wrap)?;
        let image = dir.join(image_name(k));
        write_ppm(&image, &img).map_err(wrap)?;
        samples.push(Sample {
            index,
            load: trial.load,
            window: window_at(&qs, k, cfg.window),
            image,
            points,
        });
    }
    write_records(&dir.join(RECORDS), &samples)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Serialize samples as CSV. Image paths are implied by the row position.
pub fn write_records(path: &Path, samples: &[Sample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("no samples to write".into()));
    };
    let (t, n) = (first.window.len(), first.points.len());
    let mut s = String::from("index");
    for j in 0..t {
        for c in 1..=4 {
            write!(s, ",q{j}_{c}").unwrap();
        }
    }
    for i in 1..=n {
        for a in ["x", "y", "z"] {
            write!(s, ",p{i}_{a}").unwrap();
        }
    }
    s.push_str(",load\n");
    for smp in samples {
        if smp.window.len() != t || smp.points.len() != n {
            return Err(Error::Contract(format!("sample {} has a different layout", smp.index)));
        }
        write!(s, "{}", smp.index).unwrap();
        for v in smp.window.iter().flatten().chain(smp.points.iter().flatten()) {
            write!(s, ",{v}").unwrap();
        }
        writeln!(s, ",{}", smp.load).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parse a records file; images are resolved as `img_<row>.ppm` beside it.
pub fn read_records(path: &Path, window: usize, points: usize) -> Result<Vec<Sample>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let expected = 1 + 4 * window + 3 * points + 1;
    let perr = |line: usize, msg: String| Error::Parse {
        file: file.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.split(',').count() == expected => {}
        Some((_, h)) => {
            return Err(perr(1, format!("header has {} columns, expected {expected}", h.split(',').count())));
        }
        None => return Err(perr(1, "empty file".into())),
    }
    let mut out = Vec::new();
    for (row, (i, line)) in lines.enumerate() {
        let ln = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(perr(ln, format!("row {row} has {} fields, expected {expected}", fields.len())));
        }
        let index = fields[0].parse::<usize>().map_err(|_| perr(ln, format!("bad index {:?}", fields[0])))?;
        let reals = fields[1..expected - 1]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| perr(ln, format!("bad number {f:?} in row {row}"))))
            .collect::<Result<Vec<f64>>>()?;
        let load: LoadCondition = fields[expected - 1]
            .parse()
            .map_err(|_| perr(ln, format!("bad load label {:?}", fields[expected - 1])))?;
        let (q, p) = reals.split_at(4 * window);
        out.push(Sample {
            index,
            load,
            window: q.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            image: dir.join(image_name(row)),
            points: p.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        });
    }
    Ok(out)
}

/// A generated dataset opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// All samples in global index order.
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_manifest(&root.join(MANIFEST))?;
        let cfg = &manifest.config;
        let mut samples = Vec::with_capacity(manifest.sample_count);
        for trial in &manifest.trials {
            let path = root.join(trial_dir_name(trial.load)).join(RECORDS);
            let rows = read_records(&path, cfg.window, cfg.robot.marker_count())?;
            if rows.len() != trial.samples {
                return Err(Error::Contract(format!(
                    "{} holds {} samples, manifest says {}",
                    path.display(),
                    rows.len(),
                    trial.samples
                )));
            }
            samples.extend(rows);
        }
        for (i, s) in samples.iter().enumerate() {
            if s.index != i {
                return Err(Error::Contract(format!("sample index {} found at position {i}", s.index)));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn config(&self) -> &DataConfig {
        &self.manifest.config
    }

    /// Global indices of the samples recorded under `load`.
    pub fn trial_indices(&self, load: LoadCondition) -> Vec<usize> {
        self.samples.iter().filter(|s| s.load == load).map(|s| s.index).collect()
    }

    /// Seeded split over all samples using the manifest ratio.
    pub fn split(&self, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        split(self.len(), self.config().split_ratio, seed)
    }
}

/// Seeded shuffled split of `0..n` into `⌈n·ratio⌉` training indices and
/// the remainder, each returned in ascending order.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} outside (0, 1)")));
    }
    // Guard against 880·0.8 = 704.0000000000001 rounding up.
    let n_train = ((n as f64 * ratio) - 1e-9).ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx.split_off(n_train);
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}

/// Summary of the stored-vs-recomputed ground-truth audit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub checked: usize,
    pub mismatched: Vec<usize>,
    /// Largest absolute coordinate deviation found.
    pub max_deviation: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatched.is_empty()
    }
}

/// Recompute every sample's markers from its stored tendon state and load,
/// and confirm that each image file decodes at the configured resolution.
pub fn audit(ds: &Dataset) -> Result<AuditReport> {
    let cfg = ds.config();
    let mut report = AuditReport {
        checked: 0,
        mismatched: Vec::new(),
        max_deviation: 0.0,
    };
    for s in &ds.samples {
        let p = marker_positions(s.current(), &s.load.load(), &cfg.robot)?;
        let mut dev = 0.0f64;
        for (a, b) in p.iter().flatten().zip(s.points.iter().flatten()) {
            dev = dev.max((a - b).abs());
        }
        let img = s.load_image().map_err(|e| Error::Sample {
            index: s.index,
            source: Box::new(e),
        })?;
        let shape_ok = img.shape() == [cfg.camera.height, cfg.camera.width, 3];
        report.max_deviation = report.max_deviation.max(dev);
        if dev != 0.0 || !shape_ok {
            report.mismatched.push(s.index);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// SHA-256 over every file under `root`, visited in sorted relative-path
/// order, hashing each path followed by its contents.
pub fn digest(root: &Path) -> Result<String> {
    fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                collect(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    collect(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).expect("under root");
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_trial_size() {
        let c = DataConfig::desk();
        assert_eq!(c.samples_per_trial(), 880);
        assert_eq!(plan(&c, 1).unwrap().sample_count, 4 * 880);
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split(880, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (704, 176));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..880).collect::<Vec<_>>());
        assert_eq!(split(880, 0.8, 3).unwrap(), (tr.clone(), te));
        assert_ne!(split(880, 0.8, 4).unwrap().0, tr);
        assert_eq!(split(10, 0.25, 0).unwrap().0.len(), 3);
        assert!(split(0, 0.8, 0).is_err());
        assert!(split(10, 1.0, 0).is_err());
    }

    #[test]
    fn window_padding() {
        let steps: Vec<TendonDisplacement> = (0..5).map(|i| [i as f64; 4]).collect();
        let w = window_at(&steps, 1, 4);
        assert_eq!(w.iter().map(|q| q[0]).collect::<Vec<_>>(), [0.0, 0.0, 0.0, 1.0]);
        let w = window_at(&steps, 4, 3);
        assert_eq!(w.iter().map(|q| q[0]).collect::<Vec<_>>(), [2.0, 3.0, 4.0]);
    }

    #[test]
    fn frame_seeds_distinct() {
        let mut s: Vec<u64> = (0..4).flat_map(|t| (0..100).map(move |k| frame_seed(7, t, k))).collect();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 400);
    }
}
