//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use slicerec_core::evaluation::{
    partition, run_comparison, EvalVolume, Method, TrainedModel,
};
use slicerec_core::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use slicerec_core::model::{
    axial_attention, forward, param_count, slice_mask, Mode, ModelConfig, ModelState,
};
use slicerec_core::orientation::{euler_to_cubochoric, EulerAngles};
use slicerec_core::recovery::{project, RecoveryInput};
use slicerec_core::rng::rng_from_seed;
use slicerec_core::synthgen::{generate, size_distribution_report, GenSpec};
use slicerec_core::tensor::Tensor;
use slicerec_core::training::{prepare_pool, train, AugmentSpec};
use slicerec_core::volume::{denormalize_channels, normalize_channels, ChannelStats, GrainMap};

use crate::config::{GenEntry, RunConfig};
use crate::formats::VolumeFile;
use crate::CliError;

use rand::Rng;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

/// The reference generation settings: nine training volumes (grain sizes
/// 2, 2.5, 3 without twins; twin rates 0..=5 at grain size 2.3) plus four
/// validation volumes per setting.
pub fn reference_preset(base_seed: u64) -> (Vec<GenEntry>, Vec<GenEntry>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut seed = base_seed;
    let mut next_seed = || {
        seed = seed.wrapping_add(1);
        seed
    };
    let mut add = |name: String, size: f64, twins: f64, shape: [usize; 3], bucket: &mut Vec<GenEntry>, s: u64| {
        bucket.push(GenEntry {
            name,
            spec: GenSpec::new(shape, size, twins, s),
        });
    };
    for (label, size) in [("size2", 2.0), ("size2p5", 2.5), ("size3", 3.0)] {
        let s = next_seed();
        add(format!("train_{label}"), size, 0.0, [192, 192, 192], &mut train, s);
        for v in 0..4 {
            let s = next_seed();
            add(format!("val_{label}_{v}"), size, 0.0, [64, 192, 64], &mut val, s);
        }
    }
    for twins in 0..=5u32 {
        let s = next_seed();
        add(
            format!("train_twins{twins}"),
            2.3,
            twins as f64,
            [192, 192, 192],
            &mut train,
            s,
        );
        for v in 0..4 {
            let s = next_seed();
            add(
                format!("val_twins{twins}_{v}"),
                2.3,
                twins as f64,
                [64, 192, 64],
                &mut val,
                s,
            );
        }
    }
    (train, val)
}

fn write_generated(entry: &GenEntry, out: &Path) -> Result<PathBuf, CliError> {
    let (values, ids) = generate(&entry.spec)
        .map_err(|e| CliError::Runtime(format!("generation of {} failed: {e}", entry.name)))?;
    let boundaries = slicerec_core::volume::extract_boundaries(&ids);
    let path = out.join(format!("{}.vol", entry.name));
    VolumeFile::new(values)
        .with_ids(ids.clone())
        .with_boundaries(boundaries)
        .save(&path)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    match size_distribution_report(&ids) {
        Ok(report) => {
            let mut csv = String::from("normal_quantile,log_normalized_diameter\n");
            for row in &report.rows {
                csv.push_str(&format!(
                    "{:.17},{:.17}\n",
                    row.normal_quantile, row.log_normalized_diameter
                ));
            }
            let sizes_path = out.join(format!("{}_sizes.csv", entry.name));
            fs::write(&sizes_path, csv)
                .map_err(|e| CliError::Runtime(format!("writing {}: {e}", sizes_path.display())))?;
        }
        Err(e) => eprintln!("note: no size report for {}: {e}", entry.name),
    }
    Ok(path)
}

pub fn cmd_gen(config: &RunConfig, out: &Path, preset: Option<&str>) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let entries: Vec<GenEntry> = match preset {
        Some("reference") => {
            let (train, val) = reference_preset(config.seed);
            train.into_iter().chain(val).collect()
        }
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown preset '{other}'; available: reference"
            )))
        }
        None => config
            .gen
            .as_ref()
            .ok_or_else(|| {
                CliError::Usage("gen needs a 'gen' config section or --preset".into())
            })?
            .volumes
            .clone(),
    };
    if entries.is_empty() {
        return Err(CliError::Usage("no volumes to generate".into()));
    }
    for entry in &entries {
        let path = write_generated(entry, out)?;
        println!(
            "generated {} ({:?}, grain size {}, twin rate {})",
            path.display(),
            entry.spec.shape,
            entry.spec.mean_grain_size,
            entry.spec.mean_twins_per_grain
        );
    }
    Ok(())
}

fn load_volume_with_ids(path: &Path) -> Result<(VolumeFile, GrainMap), CliError> {
    let vf = VolumeFile::load(path)
        .map_err(|e| CliError::Runtime(format!("loading {}: {e}", path.display())))?;
    let ids = vf
        .ids
        .clone()
        .ok_or_else(|| {
            CliError::Usage(format!("{} has no grain ID section", path.display()))
        })?;
    Ok((vf, ids))
}

pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let model_config = config
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage("train needs a 'model' config section".into()))?;
    let section = config
        .train
        .as_ref()
        .ok_or_else(|| CliError::Usage("train needs a 'train' config section".into()))?;
    let augment = section.augment.clone().unwrap_or_default();

    let mut volumes = Vec::new();
    for path in &section.volumes {
        let (vf, ids) = load_volume_with_ids(path)?;
        volumes.push((vf.values, ids));
    }
    let (pool, stats) =
        prepare_pool(&volumes).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut state = ModelState::init(model_config, config.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "training {} parameters for {} steps on {} volumes",
        state.num_params(),
        section.config.total_steps,
        pool.len()
    );
    let out_owned = out.to_path_buf();
    let stats_copy = stats;
    let trace = train(&pool, &mut state, &section.config, &augment, |step, st| {
        let path = out_owned.join(format!("checkpoint_step{step}.bin"));
        if let Ok(f) = File::create(&path) {
            let mut w = BufWriter::new(f);
            let _ = save_checkpoint(&mut w, st, Some(&stats_copy));
        }
    })
    .map_err(|e| CliError::Runtime(format!("training failed: {e}")))?;

    let ckpt_path = out.join("checkpoint.bin");
    let mut w = BufWriter::new(
        File::create(&ckpt_path)
            .map_err(|e| CliError::Runtime(format!("writing checkpoint: {e}")))?,
    );
    save_checkpoint(&mut w, &state, Some(&stats))
        .map_err(|e| CliError::Runtime(format!("writing checkpoint: {e}")))?;
    w.flush()
        .map_err(|e| CliError::Runtime(format!("writing checkpoint: {e}")))?;

    let mut csv = String::from("step,lr,loss\n");
    for row in &trace {
        csv.push_str(&format!("{},{:.17},{:.17}\n", row.step, row.lr, row.loss));
    }
    let trace_path = out.join("loss_trace.csv");
    fs::write(&trace_path, csv)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", trace_path.display())))?;
    println!(
        "saved {} and {} ({} steps)",
        ckpt_path.display(),
        trace_path.display(),
        trace.len()
    );
    Ok(())
}

fn load_trained(path: &Path) -> Result<(Checkpoint, ChannelStats), CliError> {
    let mut r = BufReader::new(
        File::open(path)
            .map_err(|e| CliError::Runtime(format!("opening {}: {e}", path.display())))?,
    );
    let ckpt = load_checkpoint(&mut r)
        .map_err(|e| CliError::Usage(format!("loading {}: {e}", path.display())))?;
    let stats = ckpt.stats.ok_or_else(|| {
        CliError::Usage(format!(
            "{} has no normalization statistics; retrain to produce them",
            path.display()
        ))
    })?;
    Ok((ckpt, stats))
}

/// Tile starts covering `dim` with `window`-sized tiles; the final tile
/// shifts left to fit, so tiles may overlap near the high edge.
fn tile_starts(dim: usize, window: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|i| i * window).take_while(|s| s + window <= dim).collect();
    if starts.last().map(|&s| s + window < dim).unwrap_or(true) && dim >= window {
        let last = dim - window;
        if starts.last() != Some(&last) {
            starts.push(last);
        }
    }
    starts
}

pub fn cmd_recover(
    checkpoint: &Path,
    volume: &Path,
    slice_index: usize,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let (ckpt, stats) = load_trained(checkpoint)?;
    let (vf, ids) = load_volume_with_ids(volume)?;
    let model_config = ckpt.state.config().clone();
    let crop = model_config.crop_shape;
    let dims = vf.values.shape();
    if slice_index == 0 || slice_index + 1 >= dims[1] {
        return Err(CliError::Usage(format!(
            "slice {slice_index} has no neighbors on both sides in a volume with {} slices",
            dims[1]
        )));
    }
    if dims[0] < crop[0] || dims[1] < crop[1] || dims[2] < crop[2] {
        return Err(CliError::Usage(format!(
            "volume {dims:?} is smaller than the model crop {crop:?}"
        )));
    }
    // window along the slicing axis: keep the target inside the 5 central
    // positions of the crop
    let start1 = slice_index
        .saturating_sub(crop[1] / 2)
        .min(dims[1] - crop[1])
        .max(slice_index + 1 + crop[1] - 1 - crop[1]);
    let start1 = start1.min(slice_index - 1).min(dims[1] - crop[1]);
    let m = slice_index - start1;
    if !(1..crop[1] - 1).contains(&m) {
        return Err(CliError::Usage(format!(
            "cannot position slice {slice_index} inside a {crop:?} window"
        )));
    }

    // dictionary over the whole volume
    let (_, dictionary) =
        slicerec_core::volume::average_orientations(&ids, &vf.values)
            .map_err(|e| CliError::Runtime(e.to_string()))?;

    let (normed, _) = normalize_channels(&vf.values, Some(&stats))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let bound = ckpt
        .state
        .bind(false)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut recovered = vec![0u32; dims[0] * dims[2]];
    for &t0 in &tile_starts(dims[0], crop[0]) {
        for &t2 in &tile_starts(dims[2], crop[2]) {
            // assemble the masked, normalized crop
            let mut data = Vec::with_capacity(crop[0] * crop[1] * crop[2] * 3);
            for i in 0..crop[0] {
                for j in 0..crop[1] {
                    for k in 0..crop[2] {
                        let v = normed.get([t0 + i, start1 + j, t2 + k]);
                        data.extend_from_slice(&v);
                    }
                }
            }
            let gt = Tensor::from_vec(&[crop[0], crop[1], crop[2], 3], data)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let masked = gt
                .mul(&slice_mask(crop, 3, m))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let pred = forward(&bound, &model_config, &masked, &mut Mode::Eval)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let pred_slice = pred
                .index_axis(1, m)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let pred_denorm: Vec<f64> = pred_slice
                .data()
                .chunks(3)
                .flat_map(|v| stats.invert([v[0], v[1], v[2]]))
                .collect();

            let mut prev_ids = Vec::with_capacity(crop[0] * crop[2]);
            let mut next_ids = Vec::with_capacity(crop[0] * crop[2]);
            for i in 0..crop[0] {
                for k in 0..crop[2] {
                    prev_ids.push(ids.get([t0 + i, slice_index - 1, t2 + k]));
                    next_ids.push(ids.get([t0 + i, slice_index + 1, t2 + k]));
                }
            }
            let mut observed: Vec<u32> =
                prev_ids.iter().chain(next_ids.iter()).cloned().collect();
            observed.sort_unstable();
            observed.dedup();
            let input = RecoveryInput {
                rows: crop[0],
                cols: crop[2],
                pred_slice: pred_denorm,
                prev_ids,
                next_ids,
                dictionary: observed.iter().map(|id| (*id, dictionary[id])).collect(),
            };
            let tile = project(&input).map_err(|e| CliError::Runtime(e.to_string()))?;
            for i in 0..crop[0] {
                for k in 0..crop[2] {
                    recovered[(t0 + i) * dims[2] + (t2 + k)] = tile[i * crop[2] + k];
                }
            }
        }
    }

    let truth = ids.slice(1, slice_index);
    let matches = recovered
        .iter()
        .zip(&truth)
        .filter(|(a, b)| a == b)
        .count();
    println!(
        "recovered slice {}: overall accuracy {:.4} against the stored slice",
        slice_index,
        matches as f64 / truth.len() as f64
    );

    let path = out.join(format!("recovered_slice_{slice_index}.csv"));
    let mut w = BufWriter::new(
        File::create(&path)
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?,
    );
    for i in 0..dims[0] {
        let row: Vec<String> = (0..dims[2])
            .map(|k| recovered[i * dims[2] + k].to_string())
            .collect();
        writeln!(w, "{}", row.join(","))
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let section = config
        .eval
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs an 'eval' config section".into()))?;
    let trained = match checkpoint {
        Some(p) => Some(load_trained(p)?),
        None => None,
    };
    if section.methods.contains(&Method::Transformer) && trained.is_none() {
        return Err(CliError::Usage(
            "evaluating the transformer needs --checkpoint".into(),
        ));
    }
    let segment_shape = section
        .segment_shape
        .or_else(|| trained.as_ref().map(|(c, _)| c.state.config().crop_shape))
        .unwrap_or([64, 7, 64]);

    let mut volumes = Vec::new();
    for path in &section.volumes {
        let (vf, ids) = load_volume_with_ids(path)?;
        volumes.push(
            EvalVolume::new(vf.values, ids).map_err(|e| CliError::Runtime(e.to_string()))?,
        );
    }
    let samples = partition(&volumes, segment_shape, config.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "evaluating {} samples from {} volumes with {:?}",
        samples.len(),
        volumes.len(),
        section.methods.iter().map(|m| m.name()).collect::<Vec<_>>()
    );

    let tm = trained
        .as_ref()
        .map(|(ckpt, stats)| TrainedModel {
            state: &ckpt.state,
            stats,
        });
    let report = run_comparison(
        &volumes,
        &samples,
        tm.as_ref(),
        &section.methods,
        config.seed,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    fs::write(out.join("scores.csv"), report.scores_csv())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out.join("summary.csv"), report.summary_csv())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out.join("report.json"), json)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    for m in &report.methods {
        println!(
            "{:>14}: overall {:.4} +- {:.4}, boundary {:.4} +- {:.4}",
            m.method.name(),
            m.overall_mean,
            m.overall_std,
            m.boundary_mean,
            m.boundary_std
        );
    }
    println!("wrote scores.csv, summary.csv, report.json to {}", out.display());
    Ok(())
}

#[derive(serde::Serialize)]
pub struct BenchRow {
    pub side: usize,
    pub full_seconds: f64,
    pub axial_seconds: f64,
    pub ratio: f64,
    pub full_score_bytes: u64,
    pub axial_score_bytes: u64,
}

/// Times full attention over the flattened voxel sequence against axial
/// attention along the three axes, on cubes of growing side length.
pub fn bench_attention(
    sizes: &[usize],
    dim: usize,
    heads: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, CliError> {
    if sizes.is_empty() {
        return Err(CliError::Usage("no sizes to benchmark".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::new();
    for &s in sizes {
        let n = s * s * s;
        let data: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::from_vec(
                    &[dim, dim],
                    (0..dim * dim).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let cube = Tensor::from_vec(&[s, s, s, dim], data.clone())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let flat = Tensor::from_vec(&[n, dim], data).map_err(|e| CliError::Runtime(e.to_string()))?;

        let time_median = |f: &dyn Fn() -> Result<(), CliError>| -> Result<f64, CliError> {
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                f()?;
                times.push(t0.elapsed().as_secs_f64());
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Ok(times[times.len() / 2])
        };

        let full_seconds = time_median(&|| {
            axial_attention(&flat, 0, &w[0], &w[1], &w[2], &w[3], heads)
                .map(|_| ())
                .map_err(|e| CliError::Runtime(e.to_string()))
        })?;
        let axial_seconds = time_median(&|| {
            let mut x = cube.clone();
            for axis in 0..3 {
                x = axial_attention(&x, axis, &w[0], &w[1], &w[2], &w[3], heads)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            Ok(())
        })?;
        rows.push(BenchRow {
            side: s,
            full_seconds,
            axial_seconds,
            ratio: full_seconds / axial_seconds,
            full_score_bytes: (heads * n * n * 8) as u64,
            axial_score_bytes: (heads * s * s * s * s * 8) as u64,
        });
    }
    Ok(rows)
}

pub fn cmd_bench_attention(
    sizes: &[usize],
    dim: usize,
    heads: usize,
    reps: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let rows = bench_attention(sizes, dim, heads, reps, seed)?;
    println!("side  full(s)      axial(s)     ratio    full-scores  axial-scores");
    for r in &rows {
        println!(
            "{:<5} {:<12.6} {:<12.6} {:<8.2} {:<12} {}",
            r.side, r.full_seconds, r.axial_seconds, r.ratio, r.full_score_bytes, r.axial_score_bytes
        );
    }
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = out.join("bench_attention.json");
    fs::write(&path, json).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_import_csv(
    input: &Path,
    degrees: bool,
    out_file: &Path,
) -> Result<(), CliError> {
    let file = File::open(input)
        .map_err(|e| CliError::Runtime(format!("opening {}: {e}", input.display())))?;
    let mut rows: Vec<([usize; 3], [f64; 3])> = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(CliError::Usage(format!(
                "{}:{}: expected 6 fields (x,y,z,phi1,Phi,phi2), got {}",
                input.display(),
                ln + 1,
                fields.len()
            )));
        }
        // tolerate a single header line
        if ln == 0 && fields[0].parse::<usize>().is_err() {
            continue;
        }
        let parse_idx = |s: &str| -> Result<usize, CliError> {
            s.parse().map_err(|_| {
                CliError::Usage(format!("{}:{}: bad index '{s}'", input.display(), ln + 1))
            })
        };
        let parse_angle = |s: &str| -> Result<f64, CliError> {
            s.parse().map_err(|_| {
                CliError::Usage(format!("{}:{}: bad angle '{s}'", input.display(), ln + 1))
            })
        };
        let coord = [parse_idx(fields[0])?, parse_idx(fields[1])?, parse_idx(fields[2])?];
        let mut angles = [
            parse_angle(fields[3])?,
            parse_angle(fields[4])?,
            parse_angle(fields[5])?,
        ];
        if degrees {
            for a in angles.iter_mut() {
                *a = a.to_radians();
            }
        }
        rows.push((coord, angles));
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no data rows", input.display())));
    }
    let dims = rows.iter().fold([0usize; 3], |mut acc, (c, _)| {
        for i in 0..3 {
            acc[i] = acc[i].max(c[i] + 1);
        }
        acc
    });
    let n = dims[0] * dims[1] * dims[2];
    if rows.len() != n {
        return Err(CliError::Usage(format!(
            "{} rows do not fill a {dims:?} volume ({n} voxels)",
            rows.len()
        )));
    }
    let mut data = vec![f64::NAN; n * 3];
    for (c, angles) in rows {
        let f = (c[0] * dims[1] + c[1]) * dims[2] + c[2];
        if !data[f * 3].is_nan() {
            return Err(CliError::Usage(format!("duplicate voxel {c:?}")));
        }
        let e = EulerAngles::new(angles[0], angles[1], angles[2]);
        let cubo = euler_to_cubochoric(&e);
        data[f * 3..f * 3 + 3].copy_from_slice(&cubo.as_array());
    }
    if data.iter().any(|v| v.is_nan()) {
        return Err(CliError::Usage("volume has missing voxels".into()));
    }
    let values = slicerec_core::volume::OrientationVolume::from_raw(dims, data)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out_dir(parent)?;
        }
    }
    VolumeFile::new(values)
        .save(out_file)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", out_file.display())))?;
    println!("imported {dims:?} volume to {}", out_file.display());
    Ok(())
}

pub fn cmd_export_png(
    volume: &Path,
    slice_index: usize,
    axis: usize,
    out_file: &Path,
) -> Result<(), CliError> {
    if axis > 2 {
        return Err(CliError::Usage(format!("axis must be 0, 1, or 2, got {axis}")));
    }
    let vf = VolumeFile::load(volume)
        .map_err(|e| CliError::Runtime(format!("loading {}: {e}", volume.display())))?;
    let dims = vf.values.shape();
    if slice_index >= dims[axis] {
        return Err(CliError::Usage(format!(
            "slice {slice_index} out of range for axis {axis} of {dims:?}"
        )));
    }
    let (rows, cols) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    let mut pixels = vec![[0.0f64; 3]; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = match axis {
                0 => [slice_index, r, c],
                1 => [r, slice_index, c],
                _ => [r, c, slice_index],
            };
            pixels[r * cols + c] = vf.values.get(v);
        }
    }
    // per-channel min-max scaling to 0..255 over this slice
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pixels {
        for ch in 0..3 {
            lo[ch] = lo[ch].min(p[ch]);
            hi[ch] = hi[ch].max(p[ch]);
        }
    }
    let mut img = image::RgbImage::new(cols as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            let p = pixels[r * cols + c];
            let mut rgb = [0u8; 3];
            for ch in 0..3 {
                let span = hi[ch] - lo[ch];
                rgb[ch] = if span == 0.0 {
                    128
                } else {
                    ((p[ch] - lo[ch]) / span * 255.0).round().clamp(0.0, 255.0) as u8
                };
            }
            img.put_pixel(c as u32, r as u32, image::Rgb(rgb));
        }
    }
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out_dir(parent)?;
        }
    }
    img.save(out_file)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", out_file.display())))?;
    println!("wrote {} ({rows}x{cols})", out_file.display());
    Ok(())
}

pub fn cmd_param_count(config: &RunConfig) -> Result<(), CliError> {
    let model_config = config.model.clone().unwrap_or_default();
    model_config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{}", param_count(&model_config));
    Ok(())
}
