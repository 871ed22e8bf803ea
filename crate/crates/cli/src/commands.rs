use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lunit::checkpoint;
use lunit::data_io::{self, Format};
use lunit::experiment::{self, AblationVariant, ExperimentConfig};
use lunit::geometry::{centroid, dist2, PointCloud};
use lunit::laplace::{mean_curvature_flow, median};
use lunit::networks::Task;
use lunit::training::{evaluate, MetricReport};
use lunit::Scalar;

use crate::config;
use crate::error::CliError;
use crate::output::{fresh_file, metric_table, prepare_dir, Manifest};
use crate::ConfigArgs;

/// Distance to the analytic part boundary below which a point counts as boundary.
const BOUNDARY_BAND: f64 = 0.05;

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let base = config::load(args.config.as_deref(), args.task.into())?;
    let mut cfg = config::apply_overrides(&base, &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn headline(task: Task, r: &MetricReport) -> (&'static str, f64) {
    match task {
        Task::Classification => ("oa", r.oa),
        Task::Segmentation => ("miou", r.miou),
    }
}

pub fn train<T: Scalar>(args: &ConfigArgs, out: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    let dir = prepare_dir(out)?;
    fs::write(dir.join("config.toml"), config::to_toml(&cfg)?)?;
    let mut log = BufWriter::new(File::create(dir.join("log.jsonl"))?);
    let run = experiment::run::<T>(&cfg, Some(&mut log))?;
    drop(log);

    checkpoint::save(run.network.store(), &dir.join("final.ckpt"))?;
    let best_epoch = match &run.outcome.best {
        Some((epoch, store)) => {
            checkpoint::save(store, &dir.join("best.ckpt"))?;
            *epoch
        }
        None => {
            checkpoint::save(run.network.store(), &dir.join("best.ckpt"))?;
            cfg.train.epochs
        }
    };
    let mut manifest = Manifest::new("train", Some(&cfg), threads)
        .with("params", run.network.num_params())
        .with("best_epoch", best_epoch);
    if let Some(r) = &run.outcome.final_report {
        fs::write(dir.join("metrics.txt"), metric_table(r))?;
        let (name, value) = headline(cfg.network.task, r);
        println!("final test {name} {value:.4} (oa {:.4}, best epoch {best_epoch})", r.oa);
        manifest = manifest.with(&format!("final_{name}"), format!("{value:.6}"));
    }
    manifest.write(&dir.join("manifest.toml"))?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn eval<T: Scalar>(
    args: &ConfigArgs,
    ckpt: &Path,
    voting: Option<usize>,
    out: Option<&Path>,
    threads: usize,
) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    let dir = out.map(prepare_dir).transpose()?;
    let data = data_io::generate_synthetic::<T>(&cfg.data)?;
    let mut net = experiment::build_network(&cfg, &data)?;
    checkpoint::load(net.store_mut(), ckpt)?;
    let rounds = voting.unwrap_or(cfg.train.voting_rounds);
    let ev = evaluate(
        &net,
        &data.test,
        rounds,
        &cfg.train.augment,
        &data.category_parts,
        cfg.train.seed,
    )?;
    print!("{}", metric_table(&ev.report));
    if let Some(dir) = dir {
        fs::write(dir.join("metrics.txt"), metric_table(&ev.report))?;
        Manifest::new("eval", Some(&cfg), threads)
            .with("checkpoint", ckpt.display())
            .with("voting_rounds", rounds)
            .write(&dir.join("manifest.toml"))?;
    }
    Ok(())
}

fn radial_std(points: &[[f64; 3]]) -> f64 {
    let c = centroid(points);
    let r: Vec<f64> = points.iter().map(|p| dist2(p, &c).sqrt()).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt()
}

fn format_for(path: &Path, explicit: Option<&str>) -> Result<Format, CliError> {
    match explicit {
        Some(f) => f.parse().map_err(|e: lunit::Error| CliError::Usage(e.to_string())),
        None => Ok(Format::from_path(path)?),
    }
}

pub fn flow(
    input: &Path,
    output: &Path,
    step: f64,
    iterations: usize,
    k: usize,
    format: Option<&str>,
    threads: usize,
) -> Result<(), CliError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(CliError::Usage(format!("--step must be positive, got {step}")));
    }
    let out_format = format_for(output, format)?;
    let manifest_path = PathBuf::from(format!("{}.manifest.toml", output.display()));
    fresh_file(output)?;
    fresh_file(&manifest_path)?;

    let cloud: PointCloud<f64> = data_io::load_cloud(input, Format::from_path(input)?)?;
    let before = radial_std(&cloud.positions);
    let moved = mean_curvature_flow(&cloud.positions, k.min(cloud.len()), step, iterations)?;
    let mut smoothed = cloud.clone();
    if cloud.feature_width() >= 3 {
        for i in 0..cloud.len() {
            if cloud.features.row(i)[..3] == cloud.positions[i] {
                smoothed.features.row_mut(i)[..3].copy_from_slice(&moved[i]);
            }
        }
    }
    smoothed.positions = moved;
    let after = radial_std(&smoothed.positions);

    let comments = vec![
        format!("lunit flow step={step} iterations={iterations} k={k}"),
        format!("source {}", input.display()),
    ];
    data_io::save_cloud(&smoothed, output, out_format, None, &comments)?;
    let reduction = if before > 0.0 { 1.0 - after / before } else { 0.0 };
    Manifest::new("flow", None, threads)
        .with("input", input.display())
        .with("step", step)
        .with("iterations", iterations)
        .with("k", k)
        .with("radial_std_before", format!("{before:.6e}"))
        .with("radial_std_after", format!("{after:.6e}"))
        .write(&manifest_path)?;
    println!(
        "radial std {before:.6} -> {after:.6} ({:.1}% reduction) after {iterations} iterations",
        100.0 * reduction
    );
    Ok(())
}

pub struct CurvatureArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: Option<&'a Path>,
    pub stage: usize,
    pub output_dir: &'a Path,
    pub format: &'a str,
}

pub fn curvature<T: Scalar>(args: &ConfigArgs, ca: &CurvatureArgs<'_>, threads: usize) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    let out_format: Format = ca.format.parse().map_err(|e: lunit::Error| CliError::Usage(e.to_string()))?;
    let data = data_io::generate_synthetic::<T>(&cfg.data)?;
    let mut net = experiment::build_network(&cfg, &data)?;
    if !net.lu_names().iter().any(|(_, level)| *level == ca.stage) {
        return Err(CliError::config(format!(
            "stage {} has no Laplacian Unit (lu_per_stage {}, lu_stages {})",
            ca.stage, cfg.network.lu_per_stage, cfg.network.lu_stages
        )));
    }
    checkpoint::load(net.store_mut(), ca.checkpoint)?;

    let (cloud, boundary) = match ca.input {
        Some(p) => {
            let c: PointCloud<T> = data_io::load_cloud(p, Format::from_path(p)?)?;
            (data_io::normalize_unit_ball(&c)?, None)
        }
        None => {
            let s = &data.test[0];
            (s.cloud.clone(), s.boundary_distance.clone())
        }
    };
    if cfg.network.task == Task::Segmentation && cloud.object_class.is_none() && cfg.network.num_object_classes > 0 {
        return Err(CliError::config(
            "segmentation networks with object classes need a synthetic sample (omit --input)",
        ));
    }
    if cloud.feature_width() != cfg.network.input_features {
        return Err(CliError::config(format!(
            "input has {} feature columns but the network expects {}",
            cloud.feature_width(),
            cfg.network.input_features
        )));
    }

    let dir = prepare_dir(ca.output_dir)?;
    let (report, positions) = net.curvature(&cloud, ca.stage)?;
    report.write_table(BufWriter::new(File::create(dir.join("curvature.tsv"))?))?;
    let level_cloud = PointCloud::from_positions(positions)?;
    let ext = match out_format {
        Format::Xyz => "xyz",
        Format::Ply => "ply",
        Format::Csv => "csv",
    };
    for (name, field) in [("h_in", &report.h_in), ("h_out", &report.h_out), ("h_delta", &report.h_delta)] {
        let comments = vec![format!("lunit curvature {name} stage={}", ca.stage)];
        data_io::save_cloud(
            &level_cloud,
            &dir.join(format!("{name}.{ext}")),
            out_format,
            Some(field),
            &comments,
        )?;
    }

    let med = |v: &[T]| median(v).and_then(|m| m.to_f64()).unwrap_or(f64::NAN);
    let mut manifest = Manifest::new("curvature", Some(&cfg), threads)
        .with("checkpoint", ca.checkpoint.display())
        .with("stage", ca.stage)
        .with("median_h_in", med(&report.h_in))
        .with("median_h_out", med(&report.h_out))
        .with("median_h_delta", med(&report.h_delta));
    println!(
        "median h_in {:.4e}  h_out {:.4e}  h_delta {:.4e}  ({} points)",
        med(&report.h_in),
        med(&report.h_out),
        med(&report.h_delta),
        report.len()
    );
    // boundary distances are per input point, so they only line up at level 0
    if let (Some(b), 0) = (boundary, ca.stage) {
        let (mut band, mut interior) = (Vec::new(), Vec::new());
        for (d, &h) in b.iter().zip(&report.h_delta) {
            if d.to_f64().unwrap_or(f64::INFINITY) <= BOUNDARY_BAND {
                band.push(h);
            } else {
                interior.push(h);
            }
        }
        println!(
            "h_delta median: boundary band {:.4e} ({} pts), interior {:.4e} ({} pts)",
            med(&band),
            band.len(),
            med(&interior),
            interior.len()
        );
        manifest = manifest
            .with("boundary_median_h_delta", med(&band))
            .with("interior_median_h_delta", med(&interior));
    }
    manifest.write(&dir.join("manifest.toml"))?;
    Ok(())
}

fn parse_seeds(raw: Option<&str>, default: u64) -> Result<Vec<u64>, CliError> {
    let Some(raw) = raw else {
        return Ok(vec![default]);
    };
    let seeds = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| CliError::Usage(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    Ok(seeds)
}

pub fn ablate<T: Scalar>(
    args: &ConfigArgs,
    out: &Path,
    grid: &str,
    seeds: Option<&str>,
    threads: usize,
) -> Result<(), CliError> {
    let base = resolve(args)?;
    let variants = AblationVariant::grid(grid)?;
    let seeds = parse_seeds(seeds, base.train.seed)?;
    let cells: Vec<(usize, u64, ExperimentConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| {
            let base = &base;
            seeds.iter().map(move |&s| {
                let mut c = v.apply(base);
                c.train.seed = s;
                (vi, s, c)
            })
        })
        .collect();
    for (_, _, c) in &cells {
        c.validate()?;
    }
    let dir = prepare_dir(out)?;
    let task = base.network.task;

    // cells are independent; a shared cursor hands them to worker threads
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<f64, CliError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((vi, seed, cfg)) = cells.get(i) else { break };
                log::info!("ablation cell {} seed {seed}", variants[*vi].name);
                let r = experiment::run::<T>(cfg, None)
                    .map_err(CliError::from)
                    .and_then(|run| {
                        run.outcome
                            .final_report
                            .map(|r| headline(task, &r).1)
                            .ok_or_else(|| CliError::config("run produced no test evaluation"))
                    });
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut metrics = Vec::with_capacity(cells.len());
    for r in results {
        metrics.push(r.expect("every cell ran")?);
    }

    let metric_name = match task {
        Task::Classification => "oa",
        Task::Segmentation => "miou",
    };
    let mut cells_tsv = format!("variant\tseed\t{metric_name}\n");
    for ((vi, seed, _), m) in cells.iter().zip(&metrics) {
        cells_tsv.push_str(&format!("{}\t{seed}\t{m:.6}\n", variants[*vi].name));
    }
    let means: Vec<f64> = (0..variants.len())
        .map(|vi| {
            let vals: Vec<f64> = cells
                .iter()
                .zip(&metrics)
                .filter(|((v, _, _), _)| *v == vi)
                .map(|(_, m)| *m)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let yn = |b: bool| if b { "yes" } else { "no" };
    let mut table = format!("variant\tM\tT\tfusion\tk\t{metric_name}\tdiff\n");
    for (v, m) in variants.iter().zip(&means) {
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{m:.6}\t{:+.6}\n",
            v.name,
            yn(v.use_m),
            yn(v.use_t),
            v.fusion,
            v.k,
            m - means[0]
        ));
    }
    fs::write(dir.join("table.txt"), &table)?;
    fs::write(dir.join("cells.tsv"), cells_tsv)?;
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    Manifest::new("ablate", Some(&base), threads)
        .with("grid", grid)
        .with("seeds", seed_list.join(","))
        .write(&dir.join("manifest.toml"))?;
    print!("{table}");
    Ok(())
}

pub fn gencfg(task: Task, output: Option<&Path>) -> Result<(), CliError> {
    let text = config::to_toml(&ExperimentConfig::for_task(task))?;
    match output {
        Some(p) => {
            fresh_file(p)?;
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
