//! Datasets on disk: `gen-data` writes one dfc-xyz file per cloud, a
//! `manifest.csv` (`file,label,split`) and a `dataset.txt` with the task
//! metadata. Segmentation clouds carry per-point labels inside their files,
//! so their manifest label is `-`.

use std::path::Path;

use deformconv_core::pointcloud::{load_xyz, save_xyz, synth_dataset, Dataset, PointCloud, Task};

use crate::config::{DataSource, RawConfig, SynthSpec};
use crate::error::{ensure_dir, CliError, CliResult};

pub const MANIFEST: &str = "manifest.csv";
pub const METADATA: &str = "dataset.txt";

/// Train and test splits.
pub struct Splits {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
}

impl Splits {
    pub fn task(&self) -> Task {
        self.train.task
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.train.clouds[0].feature_dim()
    }
}

fn synth_splits(spec: &SynthSpec) -> CliResult<Splits> {
    if spec.train == 0 || spec.train == spec.clouds {
        return Err(CliError::config("data.train must leave at least one cloud in each split"));
    }
    let all = synth_dataset::<f64>(spec.kind, spec.clouds, spec.points, spec.noise, spec.seed)?;
    let (train, test) = all.split_at(spec.train);
    Ok(Splits { train, test })
}

pub fn load(source: &DataSource) -> CliResult<Splits> {
    match source {
        DataSource::Synth(spec) => synth_splits(spec),
        DataSource::Dir(dir) => load_dir(dir),
    }
}

fn load_dir(dir: &Path) -> CliResult<Splits> {
    let meta_path = dir.join(METADATA);
    let meta = RawConfig::load(&meta_path).map_err(|e| CliError::data(e.to_string()))?;
    let data_err = |e: CliError| CliError::data(e.to_string());
    let task: Task = meta
        .get::<String>("task")
        .map_err(data_err)?
        .ok_or_else(|| CliError::data(format!("{}: missing `task`", meta_path.display())))?
        .parse()
        .map_err(|e| CliError::data(format!("{}: {e}", meta_path.display())))?;
    let num_classes: usize = meta
        .get("num_classes")
        .map_err(data_err)?
        .ok_or_else(|| CliError::data(format!("{}: missing `num_classes`", meta_path.display())))?;

    let manifest = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| CliError::io(&manifest, e))?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let (file, label, split) = match (rec.get(0), rec.get(1), rec.get(2)) {
            (Some(f), Some(l), Some(s)) => (f, l, s),
            _ => return Err(CliError::data(format!("{}: row {} needs 3 columns", manifest.display(), row + 2))),
        };
        let cloud: PointCloud<f64> = load_xyz(dir.join(file))?;
        if task == Task::Classification {
            let want: usize = label
                .parse()
                .map_err(|_| CliError::data(format!("{}: row {}: bad label `{label}`", manifest.display(), row + 2)))?;
            if cloud.labels().map(|l| l[0]) != Some(want) {
                return Err(CliError::data(format!("{file}: labels disagree with the manifest")));
            }
        }
        match split {
            "train" => train.push(cloud),
            "test" => test.push(cloud),
            other => return Err(CliError::data(format!("{}: row {}: unknown split `{other}`", manifest.display(), row + 2))),
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(CliError::data(format!("{}: both splits need at least one cloud", manifest.display())));
    }
    Ok(Splits {
        train: Dataset::new(train, num_classes, task)?,
        test: Dataset::new(test, num_classes, task)?,
    })
}

/// Writes a synthetic dataset as files plus manifest under `dir`.
pub fn write_dir(spec: &SynthSpec, dir: &Path) -> CliResult<usize> {
    let splits = synth_splits(spec)?;
    ensure_dir(&dir.to_path_buf())?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| CliError::io(&manifest, e))?;
    w.write_record(["file", "label", "split"])?;
    let mut n = 0;
    for (split, data) in [("train", &splits.train), ("test", &splits.test)] {
        for (i, cloud) in data.clouds.iter().enumerate() {
            let file = format!("cloud_{n:05}.xyz");
            save_xyz(cloud, dir.join(&file))?;
            let label = match data.task {
                Task::Classification => data.cloud_label(i).to_string(),
                Task::Segmentation => "-".to_string(),
            };
            w.write_record([file.as_str(), label.as_str(), split])?;
            n += 1;
        }
    }
    w.flush().map_err(|e| CliError::io(&manifest, e))?;
    let meta = format!(
        "kind = {}\ntask = {}\nnum_classes = {}\nfeature_dim = {}\nclouds = {}\npoints = {}\nnoise = {}\nseed = {}\n",
        spec.kind.as_str(),
        spec.kind.task().as_str(),
        spec.kind.num_classes(),
        splits.feature_dim(),
        spec.clouds,
        spec.points,
        spec.noise,
        spec.seed
    );
    let meta_path = dir.join(METADATA);
    std::fs::write(&meta_path, meta).map_err(|e| CliError::io(&meta_path, e))?;
    Ok(n)
}
