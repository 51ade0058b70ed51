use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use triplanar::fusion::{fuse, per_view_masks, segment_axial_only, segment_view, segment_volume, Fuser, ViewModels};
use triplanar::metrics::{aggregate, auc, evaluate, format_table, roc_curve, write_roc_csv, AggregateRow, MetricReport};
use triplanar::models::{build_san, build_view_unets, Model, ModelName};
use triplanar::phantom::{make_dataset, LabeledVolume, Manifest};
use triplanar::training::{train_model, train_san, view_dataset, HyperParams, TrainOptions};
use triplanar::volume::{read_volume, volume_paths, Axis, SliceShapeTable, Volume};

use crate::config::{Cli, Command, RunConfig};
use crate::UsageError;

/// Subdirectory of a model's run directory holding the final weights.
const FINAL: &str = "final";
/// Prediction variants written by `segment --manifest`, named as in the aggregate table.
const UNET: &str = "unet";
const FUSED: &str = "unet+san";

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(UsageError(format!("config file {} not found", path.display())).into());
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    cfg.merge(&cli);
    let default_out = match cli.command {
        Command::Phantom(_) => "data",
        Command::Train(_) => "run",
        Command::Segment(_) => "segmentation",
        Command::Evaluate(_) => "evaluation",
    };
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    match cli.command {
        Command::Phantom(_) => phantom(&cfg, &out),
        Command::Train(_) => train(&cfg, &out),
        Command::Segment(_) => segment(&cfg, &out),
        Command::Evaluate(_) => evaluate_cmd(&cfg, &out),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)
}

fn load_manifest(path: Option<&PathBuf>) -> Result<(PathBuf, Manifest)> {
    let path = path.ok_or_else(|| usage("--manifest is required"))?;
    let path = if path.is_dir() {
        path.join(triplanar::phantom::MANIFEST_FILE)
    } else {
        path.clone()
    };
    if !path.exists() {
        return Err(usage(format!("manifest {} not found", path.display())));
    }
    let manifest = Manifest::load(&path)?;
    Ok((path, manifest))
}

fn load_split(manifest_path: &Path, entries: &[String]) -> Result<Vec<LabeledVolume>> {
    Manifest::resolve(manifest_path, entries)
        .map(|dir| LabeledVolume::load(&dir).with_context(|| format!("loading {}", dir.display())))
        .collect()
}

fn phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = &cfg.phantom;
    if p.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let summary = make_dataset(p.n, &p.range, cfg.seed, p.train_ratio, out)?;
    write_json(&out.join("config.json"), cfg)?;
    println!(
        "{} ({} train / {} test)",
        summary.manifest_path.display(),
        summary.manifest.train.len(),
        summary.manifest.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    /// Wall-clock training seconds per model.
    training_seconds: BTreeMap<String, f64>,
    /// Mean inference seconds per slice, measured on one volume.
    inference_seconds_per_slice: BTreeMap<String, f64>,
    /// Full pipeline seconds for that volume.
    segmentation_seconds_per_volume: f64,
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t = &cfg.train;
    let (manifest_path, manifest) = load_manifest(t.manifest.as_ref())?;
    if manifest.train.is_empty() {
        return Err(usage("the manifest has no training volumes"));
    }
    prepare_out(out, cfg)?;
    let volumes = load_split(&manifest_path, &manifest.train)?;
    let dims = t.working_dims.unwrap_or_else(|| volumes[0].image.dims());
    let table = SliceShapeTable::for_dims(dims);
    let specs = build_view_unets(&table, &t.unet)?;
    let mut training_seconds = BTreeMap::new();
    let mut models = Vec::new();

    for (i, (spec, axis)) in specs.into_iter().zip(Axis::ALL).enumerate() {
        log::info!("training {} on {axis} slices {:?}", spec.name, spec.spatial_shape());
        let dir = out.join(spec.name.as_str());
        let data = view_dataset(&volumes, axis, spec.spatial_shape())?;
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.clone()),
            keep_checkpoints: t.keep_checkpoints,
            validation: None,
        };
        let (weights, history) = train_model(&spec, &data, &t.hyper, cfg.seed.wrapping_add(i as u64), &opts)?;
        let model = Model::new(spec, weights)?;
        model.save(&dir.join(FINAL))?;
        write_json(&dir.join(FINAL).join("history.json"), &history)?;
        training_seconds.insert(model.spec().name.to_string(), history.total_seconds());
        models.push(model);
    }

    let mut it = models.into_iter();
    let views = ViewModels::new(it.next().unwrap(), it.next().unwrap(), it.next().unwrap())?;
    let san_spec = build_san((dims[0], dims[1]), &t.san)?;
    let san_hp = HyperParams {
        n_epoch: t.san_n_epoch.unwrap_or(t.hyper.n_epoch),
        ..t.hyper
    };
    let dir = out.join(ModelName::San.as_str());
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.clone()),
        keep_checkpoints: t.keep_checkpoints,
        validation: None,
    };
    log::info!("training SAN on frozen per-view outputs");
    let started = Instant::now();
    let (weights, history) = train_san(&views, &volumes, &san_spec, &san_hp, cfg.seed.wrapping_add(3), &opts)?;
    // Includes producing the per-view masks it trains on.
    training_seconds.insert(ModelName::San.to_string(), started.elapsed().as_secs_f64());
    let san = Model::new(san_spec, weights)?;
    san.save(&dir.join(FINAL))?;
    write_json(&dir.join(FINAL).join("history.json"), &history)?;

    let probe = match manifest.test.first() {
        Some(_) => load_split(&manifest_path, &manifest.test[..1])?.remove(0),
        None => volumes.into_iter().next().unwrap(),
    };
    let timing = Timing {
        training_seconds,
        inference_seconds_per_slice: inference_timing(&probe.image, &views, &san)?,
        segmentation_seconds_per_volume: {
            let started = Instant::now();
            segment_volume(&probe.image, &views, Fuser::San(&san), triplanar::fusion::DEFAULT_THRESHOLD)?;
            started.elapsed().as_secs_f64()
        },
    };
    write_json(&out.join("timing.json"), &timing)?;
    println!("{}", out.display());
    Ok(())
}

fn inference_timing(volume: &Volume, views: &ViewModels, san: &Model) -> Result<BTreeMap<String, f64>> {
    let mut per_slice = BTreeMap::new();
    for axis in Axis::ALL {
        let started = Instant::now();
        segment_view(volume, views.get(axis))?;
        let n = volume.dims()[axis.stack_dim()] as f64;
        per_slice.insert(ModelName::for_axis(axis).to_string(), started.elapsed().as_secs_f64() / n);
    }
    let masks = per_view_masks(volume, views, triplanar::fusion::DEFAULT_THRESHOLD)?;
    let started = Instant::now();
    fuse(&masks, Fuser::San(san))?;
    per_slice.insert(
        ModelName::San.to_string(),
        started.elapsed().as_secs_f64() / volume.dims()[Axis::Axial.stack_dim()] as f64,
    );
    Ok(per_slice)
}

fn load_model(run: &Path, name: ModelName) -> Result<Model> {
    let dir = run.join(name.as_str()).join(FINAL);
    if !dir.join("spec.json").exists() {
        return Err(usage(format!("no trained {name} weights under {}", dir.display())));
    }
    Ok(Model::load(&dir)?)
}

fn load_volume(stem: &Path) -> Result<Volume> {
    let (raw, sidecar) = volume_paths(stem);
    if !raw.exists() || !sidecar.exists() {
        return Err(usage(format!("volume {} not found", stem.display())));
    }
    Ok(read_volume(stem)?)
}

fn segment(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.segment;
    let run = s.run.as_ref().ok_or_else(|| usage("--run is required"))?;
    let axial = load_model(run, ModelName::Mx)?;
    let fusion = if s.axial_only {
        None
    } else {
        let views = ViewModels::new(
            axial.clone(),
            load_model(run, ModelName::My)?,
            load_model(run, ModelName::Mz)?,
        )?;
        Some((views, load_model(run, ModelName::San)?))
    };

    let inputs: Vec<(PathBuf, Volume)> = match (&s.input, &s.manifest) {
        (Some(stem), None) => vec![(out.to_path_buf(), load_volume(stem)?)],
        (None, Some(path)) => {
            let (manifest_path, manifest) = load_manifest(Some(path))?;
            if manifest.test.is_empty() {
                return Err(usage("the manifest has no test volumes"));
            }
            load_split(&manifest_path, &manifest.test)?
                .into_iter()
                .zip(&manifest.test)
                .map(|(lv, entry)| (out.join(entry_name(entry)), lv.image))
                .collect()
        }
        _ => return Err(usage("give exactly one of --input or --manifest")),
    };
    prepare_out(out, cfg)?;
    let batch = s.manifest.is_some();
    for (dir, volume) in &inputs {
        let axial_dir = if batch { dir.join(UNET) } else { dir.clone() };
        if batch || s.axial_only {
            segment_axial_only(volume, &axial, s.threshold)?.save(&axial_dir)?;
        }
        if let Some((views, san)) = &fusion {
            let fused_dir = if batch { dir.join(FUSED) } else { dir.clone() };
            segment_volume(volume, views, Fuser::San(san), s.threshold)?.save(&fused_dir)?;
        }
        println!("{}", dir.display());
    }
    Ok(())
}

fn entry_name(entry: &str) -> String {
    Path::new(entry)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.replace('/', "_"))
}

/// Probability volume of a segmentation directory, or a volume stem.
fn load_prediction(path: &Path) -> Result<Volume> {
    if path.join("summary.json").exists() {
        load_volume(&path.join("prob"))
    } else {
        load_volume(path)
    }
}

#[derive(Serialize)]
struct VolumeReport<'a> {
    volume: String,
    model: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn evaluate_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = &cfg.evaluate;
    match (&e.pred, &e.manifest) {
        (Some(pred), None) => {
            let truth = e.truth.as_ref().ok_or_else(|| usage("--truth is required with --pred"))?;
            let prob = load_prediction(pred)?;
            let truth = load_volume(truth)?;
            let report = evaluate(&prob, &truth, e.threshold, e.n_thresholds)?;
            prepare_out(out, cfg)?;
            write_json(&out.join("report.json"), &report)?;
            write_roc_csv(&report.roc, &out.join("roc.csv"))?;
            let row = aggregate("prediction", std::slice::from_ref(&report))?;
            print!("{}", format_table(&[row]));
            Ok(())
        }
        (None, Some(manifest)) => {
            let predictions = e.predictions.as_ref().ok_or_else(|| usage("--predictions is required"))?;
            let (manifest_path, manifest) = load_manifest(Some(manifest))?;
            let truths = load_split(&manifest_path, &manifest.test)?;
            let mut rows: Vec<AggregateRow> = Vec::new();
            let mut per_volume = Vec::new();
            prepare_out(out, cfg)?;
            for model in [UNET, FUSED] {
                let mut reports = Vec::new();
                let mut pooled: (Vec<f32>, Vec<f32>) = (Vec::new(), Vec::new());
                for (entry, lv) in manifest.test.iter().zip(&truths) {
                    let dir = predictions.join(entry_name(entry)).join(model);
                    if !dir.join("summary.json").exists() {
                        continue;
                    }
                    let prob = load_prediction(&dir)?;
                    reports.push((entry_name(entry), evaluate(&prob, &lv.wall_mask, e.threshold, e.n_thresholds)?));
                    pooled.0.extend_from_slice(prob.data());
                    pooled.1.extend_from_slice(lv.wall_mask.data());
                }
                if reports.is_empty() {
                    continue;
                }
                let only: Vec<MetricReport> = reports.iter().map(|(_, r)| r.clone()).collect();
                rows.push(aggregate(model, &only)?);
                // Voxels of all test volumes together, as one curve per model.
                let roc = roc_curve(&pooled.0, &pooled.1, e.n_thresholds)?;
                log::info!("{model}: pooled AUC {:.4}", auc(&roc)?);
                write_roc_csv(&roc, &out.join(format!("roc_{model}.csv")))?;
                per_volume.push((model, reports));
            }
            if rows.is_empty() {
                return Err(usage(format!("no predictions found under {}", predictions.display())));
            }
            let flat: Vec<VolumeReport> = per_volume
                .iter()
                .flat_map(|(model, reports)| {
                    reports.iter().map(move |(volume, report)| VolumeReport {
                        volume: volume.clone(),
                        model,
                        report,
                    })
                })
                .collect();
            write_json(&out.join("report.json"), &flat)?;
            write_json(&out.join("aggregate.json"), &rows)?;
            print!("{}", format_table(&rows));
            Ok(())
        }
        _ => Err(usage("give either --pred with --truth, or --manifest with --predictions")),
    }
}
