//! The six subcommands. Each reads a [`RunConfig`] and writes its outputs
//! under `out_dir`; apart from bench timings, every output is a pure function
//! of the configuration, the seed and the input files.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deformconv_core::baselines::{subvoxel_discrimination, voxelize_to_cloud, VoxelizedCloud};
use deformconv_core::deform::{forward, oracle_forward, AnchorGrid, DeformableFilter};
use deformconv_core::matrix::Matrix;
use deformconv_core::nn::{
    evaluate_prepared, metrics_from_predictions, predict, train as train_stack, EpochLog, LayerStack,
    MetricsReport, Prepared, TrainConfig,
};
use deformconv_core::pointcloud::{Dataset, PointCloud, Task};
use deformconv_core::rng::{normal, seeded, uniform, SeededRng};
use deformconv_core::spatial::self_neighbors;

use crate::checkpoint;
use crate::config::{DataSource, LayerDesc, ModelSpec, RunConfig};
use crate::data::{self, Splits};
use crate::error::{ensure_dir, CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.dfc";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const COMPARE_FILE: &str = "compare.csv";

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

fn flush(w: &mut csv::Writer<std::fs::File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<usize> {
    let spec = match &cfg.data {
        DataSource::Synth(s) => s,
        DataSource::Dir(_) => return Err(CliError::config("gen-data needs a synthetic spec, not data.path")),
    };
    let n = data::write_dir(spec, &cfg.out_dir)?;
    println!("wrote {n} clouds and {} to {}", data::MANIFEST, cfg.out_dir.display());
    Ok(n)
}

/// Builds the configured stack for `splits` and checks that its head fits the task.
pub fn build_stack(model: &ModelSpec, splits: &Splits, rng: &mut SeededRng) -> CliResult<LayerStack<f64>> {
    let stack = model.builder(splits.feature_dim())?.build(rng)?;
    check_stack(&stack, splits).map_err(CliError::Config)?;
    Ok(stack)
}

fn check_stack(stack: &LayerStack<f64>, splits: &Splits) -> Result<(), String> {
    if stack.in_dim() != splits.feature_dim() {
        return Err(format!(
            "stack `in_dim` is {} but the data has {} feature channels",
            stack.in_dim(),
            splits.feature_dim()
        ));
    }
    if stack.task() != splits.task() {
        return Err(format!(
            "stack is a {} model (global pooling {}) but the data is labelled for {}",
            stack.task().as_str(),
            if stack.task() == Task::Classification { "present" } else { "absent" },
            splits.task().as_str()
        ));
    }
    if stack.out_dim() != splits.num_classes() {
        return Err(format!(
            "stack emits {} logits but the data has {} classes",
            stack.out_dim(),
            splits.num_classes()
        ));
    }
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
    }
}

/// Trains `stack` in place, reporting each epoch to `on_epoch`. `rng` is the
/// generator that initialized the stack; shuffling continues its stream.
fn fit(
    stack: &mut LayerStack<f64>,
    splits: &Splits,
    cfg: &RunConfig,
    rng: &mut SeededRng,
    on_epoch: impl FnMut(&EpochLog),
) -> CliResult<Vec<EpochLog>> {
    let hood = stack.neighborhood();
    let tr = Prepared::new(&splits.train, hood)?;
    let te = Prepared::new(&splits.test, hood)?;
    let (_, logs) = train_stack(stack, &tr, &te, &train_config(cfg), rng, on_epoch)?;
    Ok(logs)
}

pub struct TrainOutcome {
    pub stack: LayerStack<f64>,
    pub logs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let splits = data::load(&cfg.data)?;
    let mut rng = seeded(cfg.seed);
    let mut stack = build_stack(&cfg.model, &splits, &mut rng)?;
    ensure_dir(&cfg.out_dir)?;
    let log = cfg.out_dir.join(TRAIN_LOG);
    let mut w = csv_writer(&log)?;
    w.write_record(["epoch", "loss", "accuracy", "miou"])?;
    flush(&mut w, &log)?;
    let mut write_err = None;
    let logs = fit(&mut stack, &splits, cfg, &mut rng, |row| {
        println!(
            "epoch {:>3}  loss {:.6}  accuracy {:.4}  miou {:.4}",
            row.epoch, row.loss, row.accuracy, row.miou
        );
        let rec = [row.epoch.to_string(), row.loss.to_string(), row.accuracy.to_string(), row.miou.to_string()];
        if let Err(e) = w.write_record(&rec).and_then(|_| w.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&log, e));
    }
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&stack, &ckpt)?;
    println!("wrote {} and {}", ckpt.display(), log.display());
    Ok(TrainOutcome {
        stack,
        logs,
        checkpoint: ckpt,
        log,
    })
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
}

pub fn eval(cfg: &RunConfig) -> CliResult<Vec<(String, MetricsReport)>> {
    let stack = checkpoint::load(&checkpoint_path(cfg))?;
    let splits = data::load(&cfg.data)?;
    check_stack(&stack, &splits).map_err(|m| CliError::data(format!("checkpoint does not fit the data: {m}")))?;
    let hood = stack.neighborhood();
    let mut reports = Vec::new();
    for (name, set) in [("train", &splits.train), ("test", &splits.test)] {
        let p = Prepared::new(set, hood)?;
        reports.push((name.to_string(), evaluate_prepared(&stack, set, &p.tables)?));
    }
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(EVAL_FILE);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["split".to_string(), "count".into(), "accuracy".into(), "miou".into()];
    header.extend((0..splits.num_classes()).map(|c| format!("iou_{c}")));
    w.write_record(&header)?;
    for (name, m) in &reports {
        println!("{name:<5}  n={:<7} accuracy {:.4}  miou {:.4}", m.count, m.accuracy, m.miou);
        let mut rec = vec![name.clone(), m.count.to_string(), m.accuracy.to_string(), m.miou.to_string()];
        rec.extend(m.per_class_iou.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        w.write_record(&rec)?;
    }
    flush(&mut w, &path)?;
    Ok(reports)
}

/// One timed configuration of the benchmark.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub m: usize,
    pub cap: usize,
    pub k: usize,
    pub fast_ns_per_point: f64,
    pub oracle_ns_per_point: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ns(reps: usize, mut f: impl FnMut() -> CliResult<Matrix<f64>>) -> CliResult<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        samples.push(t.elapsed().as_nanos() as f64);
    }
    Ok(median(samples))
}

/// Times the fast path against the oracle on one random cloud of `m` points.
/// Outputs are compared before timing.
pub fn bench_one(m: usize, k: usize, cap: usize, channels: usize, reps: usize, density: f64, seed: u64) -> CliResult<BenchRow> {
    let mut rng = seeded(seed);
    let side = (m as f64 / density).cbrt();
    let positions: Vec<[f64; 3]> = (0..m).map(|_| std::array::from_fn(|_| uniform(&mut rng, 0.0, side))).collect();
    let feats = (0..m * channels).map(|_| normal(&mut rng, 1.0)).collect();
    let cloud = PointCloud::new(positions, Matrix::from_vec(m, channels, feats)?, None)?;
    let grid = AnchorGrid::cubic(k, 0.2)?;
    let nb = self_neighbors(cloud.positions(), grid.support_radius(), cap)?;
    let filter = DeformableFilter::random(grid, channels, channels, true, 1.0, &mut rng)?;

    let fast = forward(&cloud, &nb, &filter)?;
    let slow = oracle_forward(&cloud, &nb, &filter)?;
    let diff = fast.rel_diff(&slow)?;
    if !(diff <= 1e-12) {
        return Err(CliError::data(format!("fast path disagrees with the oracle at M={m}, k={k}: {diff:e}")));
    }
    let f = time_ns(reps, || Ok(forward(&cloud, &nb, &filter)?))?;
    let o = time_ns(reps, || Ok(oracle_forward(&cloud, &nb, &filter)?))?;
    Ok(BenchRow {
        m,
        cap,
        k,
        fast_ns_per_point: f / m as f64,
        oracle_ns_per_point: o / m as f64,
    })
}

pub fn bench(cfg: &RunConfig) -> CliResult<Vec<BenchRow>> {
    let b = &cfg.bench;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(BENCH_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["op", "M", "K", "k", "ns_per_point"])?;
    let mut rows = Vec::new();
    for &m in &b.sizes {
        for &k in &b.ks {
            let row = bench_one(m, k, b.cap, b.channels, b.reps, b.density, cfg.seed)?;
            println!(
                "M={m:<8} K={:<3} k={k}  fast {:>12.1} ns/pt  oracle {:>12.1} ns/pt  speedup {:.1}x",
                row.cap,
                row.fast_ns_per_point,
                row.oracle_ns_per_point,
                row.oracle_ns_per_point / row.fast_ns_per_point
            );
            for (op, ns) in [("fast", row.fast_ns_per_point), ("oracle", row.oracle_ns_per_point)] {
                w.write_record([op.to_string(), m.to_string(), row.cap.to_string(), k.to_string(), format!("{ns:.1}")])?;
            }
            flush(&mut w, &path)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn filters_file(layer: usize) -> String {
    format!("filters_layer{layer}.csv")
}

/// Writes one row `i,j,l,x,y,z,w_0_0,...` per anchor of a deformable layer.
pub fn export_filters(cfg: &RunConfig) -> CliResult<PathBuf> {
    let stack = checkpoint::load(&checkpoint_path(cfg))?;
    let idx = cfg.export_layer;
    let layer = stack
        .layers()
        .get(idx)
        .ok_or_else(|| CliError::config(format!("export.layer = {idx}, but the stack has {} layers", stack.layers().len())))?;
    let filter = match layer {
        deformconv_core::nn::Layer::Deform(f) => f,
        other => {
            return Err(CliError::config(format!(
                "export.layer = {idx} is a {} layer, not a deformable convolution",
                other.name()
            )))
        }
    };
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(filters_file(idx));
    write_filter_csv(filter, &path)?;
    println!("wrote {} anchors to {}", filter.grid().len(), path.display());
    Ok(path)
}

pub fn write_filter_csv(filter: &DeformableFilter<f64>, path: &Path) -> CliResult<()> {
    let (din, dout) = (filter.in_dim(), filter.out_dim());
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["i", "j", "l", "x", "y", "z"].map(String::from).to_vec();
    for c in 0..din {
        header.extend((0..dout).map(|d| format!("w_{c}_{d}")));
    }
    w.write_record(&header)?;
    let grid = filter.grid();
    for a in 0..grid.len() {
        let lat = grid.lattice(a);
        let pos = grid.position(a);
        let mut rec: Vec<String> = lat.iter().map(i64::to_string).collect();
        rec.extend(pos.iter().map(|v| format!("{v:.16e}")));
        rec.extend(filter.anchor_weights(a).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    flush(&mut w, path)
}

/// Reads an exported filter back into a weight tensor laid out like
/// [`DeformableFilter::weights`].
pub fn read_filter_csv(path: &Path, grid: &AnchorGrid<f64>, din: usize, dout: usize) -> CliResult<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut weights = vec![0.0; grid.len() * din * dout];
    let mut seen = 0;
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> CliResult<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::data(format!("{}: bad field {i} on row {}", path.display(), seen + 2)))
        };
        let lat = [parse(0)? as i64, parse(1)? as i64, parse(2)? as i64];
        let a = grid
            .index_of(lat)
            .ok_or_else(|| CliError::data(format!("{}: anchor {lat:?} is not on the grid", path.display())))?;
        for e in 0..din * dout {
            weights[a * din * dout + e] = parse(6 + e)?;
        }
        seen += 1;
    }
    if seen != grid.len() {
        return Err(CliError::data(format!("{}: {seen} rows for {} anchors", path.display(), grid.len())));
    }
    Ok(weights)
}

/// Final held-out metrics of one method in the baseline comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: &'static str,
    pub accuracy: f64,
    pub miou: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub voxel_path_diff: f64,
    pub deform_path_diff: f64,
}

fn pcc_model(model: &ModelSpec, hidden: &[usize]) -> ModelSpec {
    let layers = model
        .layers
        .iter()
        .map(|l| match l {
            LayerDesc::Deform { out, .. } | LayerDesc::Separable { out, .. } => LayerDesc::Pcc {
                out: *out,
                hidden: hidden.to_vec(),
            },
            other => other.clone(),
        })
        .collect();
    ModelSpec {
        radius: Some(model.neighborhood().map_or(0.0, |h| h.radius)),
        cap: model.cap,
        layers,
    }
}

fn voxelize_split(set: &Dataset<f64>, pitch: f64) -> CliResult<(Dataset<f64>, Vec<VoxelizedCloud<f64>>)> {
    let vox: Vec<VoxelizedCloud<f64>> = set
        .clouds
        .iter()
        .map(|c| voxelize_to_cloud(c, pitch))
        .collect::<Result<_, _>>()?;
    let ds = Dataset::new(vox.iter().map(|v| v.cloud.clone()).collect(), set.num_classes, set.task)?;
    Ok((ds, vox))
}

/// Scores voxel-trained predictions on the original points.
fn voxel_metrics(stack: &LayerStack<f64>, original: &Dataset<f64>, vox: &[VoxelizedCloud<f64>]) -> CliResult<MetricsReport> {
    let hood = stack.neighborhood();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (i, (orig, v)) in original.clouds.iter().zip(vox).enumerate() {
        let nb = self_neighbors(v.cloud.positions(), hood.radius, hood.cap)?;
        let p = predict(stack, &v.cloud, &nb)?;
        match original.task {
            Task::Segmentation => {
                pred.extend(v.point_to_cell.iter().map(|&c| p[c]));
                truth.extend_from_slice(orig.labels().expect("labelled"));
            }
            Task::Classification => {
                pred.push(p[0]);
                truth.push(original.cloud_label(i));
            }
        }
    }
    Ok(metrics_from_predictions(&pred, &truth, original.num_classes)?)
}

pub fn compare_baselines(cfg: &RunConfig) -> CliResult<CompareReport> {
    let splits = data::load(&cfg.data)?;
    let pitch = cfg.compare.pitch;
    let mut rows = Vec::new();
    let quiet = |_: &EpochLog| {};

    let mut rng = seeded(cfg.seed);
    let mut deform = build_stack(&cfg.model, &splits, &mut rng)?;
    let logs = fit(&mut deform, &splits, cfg, &mut rng, quiet)?;
    let last = |logs: &[EpochLog], s: &LayerStack<f64>, set: &Dataset<f64>| -> CliResult<(f64, f64)> {
        match logs.last() {
            Some(l) => Ok((l.accuracy, l.miou)),
            None => {
                let p = Prepared::new(set, s.neighborhood())?;
                let m = evaluate_prepared(s, set, &p.tables)?;
                Ok((m.accuracy, m.miou))
            }
        }
    };
    let (acc, miou) = last(&logs, &deform, &splits.test)?;
    rows.push(CompareRow {
        method: "deform",
        accuracy: acc,
        miou,
        params: deform.num_params(),
    });

    let mut rng = seeded(cfg.seed);
    let mut pcc = build_stack(&pcc_model(&cfg.model, &cfg.compare.hidden), &splits, &mut rng)?;
    let logs = fit(&mut pcc, &splits, cfg, &mut rng, quiet)?;
    let (acc, miou) = last(&logs, &pcc, &splits.test)?;
    rows.push(CompareRow {
        method: "pcc",
        accuracy: acc,
        miou,
        params: pcc.num_params(),
    });

    let (vtrain, _) = voxelize_split(&splits.train, pitch)?;
    let (vtest, vox_test) = voxelize_split(&splits.test, pitch)?;
    let vsplits = Splits {
        train: vtrain,
        test: vtest,
    };
    let mut rng = seeded(cfg.seed);
    let mut voxel = build_stack(&cfg.model, &vsplits, &mut rng)?;
    fit(&mut voxel, &vsplits, cfg, &mut rng, quiet)?;
    let m = voxel_metrics(&voxel, &splits.test, &vox_test)?;
    rows.push(CompareRow {
        method: "voxel",
        accuracy: m.accuracy,
        miou: m.miou,
        params: voxel.num_params(),
    });

    let d = subvoxel_discrimination(pitch, cfg.compare.displacement, cfg.seed)?;
    let report = CompareReport {
        rows,
        voxel_path_diff: d.voxel_path_diff,
        deform_path_diff: d.deform_path_diff,
    };

    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(COMPARE_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["method", "accuracy", "miou", "params", "voxel_path_diff", "deform_path_diff"])?;
    for r in &report.rows {
        println!("{:<7} accuracy {:.4}  miou {:.4}  params {}", r.method, r.accuracy, r.miou, r.params);
        w.write_record([
            r.method.to_string(),
            r.accuracy.to_string(),
            r.miou.to_string(),
            r.params.to_string(),
            format!("{:e}", report.voxel_path_diff),
            format!("{:e}", report.deform_path_diff),
        ])?;
    }
    flush(&mut w, &path)?;
    println!(
        "sub-voxel move: voxel path diff {:e}, deform path diff {:e}",
        report.voxel_path_diff, report.deform_path_diff
    );
    let _ = std::io::stdout().flush();
    Ok(report)
}
