//! The five subcommands, generic over the floating-point width.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ran_core::diffnum::Scalar;
use ran_core::eval::{evaluate, export_features, features_csv, features_svg, report_csv};
use ran_core::ingest::{parse_trajectory_file, synth_domain, write_scene};
use ran_core::model::ModelParams;
use ran_core::train::{log_csv, predict, train};
use ran_core::traj::{
    assign_domain, build_observation_windows, build_windows, ObservationWindow, SceneTable,
};
use ran_core::{Error, Result};

use crate::config::{DomainSpec, RunConfig};

fn load_table(spec: &DomainSpec) -> Result<SceneTable> {
    match spec {
        DomainSpec::File { path, unit_scale } => {
            let file = File::open(path).map_err(|e| {
                Error::Config(format!("cannot open {}: {e}", path.display()))
            })?;
            parse_trajectory_file(BufReader::new(file), *unit_scale)
        }
        DomainSpec::Synth(synth) => synth_domain(synth),
    }
}

/// Training windows of every configured source, domain ids stamped by
/// position in the config.
fn source_windows(config: &RunConfig) -> Result<Vec<Vec<ObservationWindow>>> {
    let dims = config.train.dims;
    let mut domains = Vec::new();
    for (i, spec) in config.sources.iter().enumerate() {
        let table = load_table(spec)?;
        let mut windows = build_windows(&table, dims.t_obs, dims.t_pred, config.stride);
        assign_domain(&mut windows, i);
        if windows.is_empty() {
            return Err(Error::Config(format!(
                "source.{i} yields no windows of {}+{} steps",
                dims.t_obs, dims.t_pred
            )));
        }
        domains.push(windows);
    }
    Ok(domains)
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out).map_err(Error::Io)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::Io)
}

pub fn cmd_train<S: Scalar>(config: &RunConfig) -> Result<()> {
    if config.sources.len() < 2 {
        return Err(Error::Config(format!(
            "need ≥2 source domains, config has {}",
            config.sources.len()
        )));
    }
    let domains = source_windows(config)?;
    let result = train::<S>(&domains, &config.train)?;
    ensure_out_dir(config)?;
    let ckpt = config.out.join("model.ckpt");
    let log = config.out.join("train_log.csv");
    result.params.save(&ckpt)?;
    write_text(&log, &log_csv(&result.log))?;
    let last = result.log.last().expect("≥1 epoch");
    println!(
        "trained {} epochs (final total loss {}); wrote {} and {}",
        result.log.len(),
        last.total,
        ckpt.display(),
        log.display()
    );
    Ok(())
}

pub fn cmd_eval<S: Scalar>(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let spec = config
        .test
        .as_ref()
        .ok_or_else(|| Error::Config("config has no test domain (test.* keys)".into()))?;
    let params = ModelParams::<S>::load(checkpoint, config.train.dims)?;
    let dims = config.train.dims;
    let table = load_table(spec)?;
    let windows = build_windows(&table, dims.t_obs, dims.t_pred, config.stride);
    let report = evaluate(&params, &windows, "test")?;
    ensure_out_dir(config)?;
    let path = config.out.join("metrics.csv");
    write_text(&path, &report_csv(&report))?;
    println!(
        "test windows {}: ADE {} FDE {}; wrote {}",
        report.n_windows,
        report.ade,
        report.fde,
        path.display()
    );
    Ok(())
}

pub fn cmd_predict<S: Scalar>(
    config: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: Option<PathBuf>,
) -> Result<()> {
    let params = ModelParams::<S>::load(checkpoint, config.train.dims)?;
    let dims = config.train.dims;
    let file = File::open(input)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", input.display())))?;
    let table = parse_trajectory_file(BufReader::new(file), 1.0)?;
    let windows = build_observation_windows(&table, dims.t_obs, config.stride);

    let mut csv = String::from("window_id,head,t,x,y\n");
    for (window_id, w) in windows.iter().enumerate() {
        let preds = predict(&params, w)?;
        for (head, traj) in preds.trajectories.iter().enumerate() {
            for (t, [x, y]) in traj.iter().enumerate() {
                csv.push_str(&format!("{window_id},{head},{t},{x},{y}\n"));
            }
        }
    }
    let path = match output {
        Some(p) => p,
        None => {
            ensure_out_dir(config)?;
            config.out.join("predictions.csv")
        }
    };
    write_text(&path, &csv)?;
    println!(
        "predicted {} windows × {} heads; wrote {}",
        windows.len(),
        dims.k,
        path.display()
    );
    Ok(())
}

pub fn cmd_synth(config: &RunConfig) -> Result<()> {
    let mut jobs: Vec<(String, &ran_core::ingest::SynthDomainConfig)> = Vec::new();
    for (i, spec) in config.sources.iter().enumerate() {
        if let DomainSpec::Synth(s) = spec {
            jobs.push((format!("source_{i}.txt"), s));
        }
    }
    if let Some(DomainSpec::Synth(s)) = &config.test {
        jobs.push(("test.txt".into(), s));
    }
    if jobs.is_empty() {
        return Err(Error::Config(
            "no synthetic domains configured (*.synth.* keys)".into(),
        ));
    }
    ensure_out_dir(config)?;
    for (name, synth) in jobs {
        let table = synth_domain(synth)?;
        let path = config.out.join(&name);
        write_scene(&table, &path)?;
        println!("wrote {} ({} records)", path.display(), table.records().len());
    }
    Ok(())
}

pub fn cmd_export_features<S: Scalar>(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let mut domains = source_windows(config)?;
    if let Some(spec) = &config.test {
        let dims = config.train.dims;
        let table = load_table(spec)?;
        let mut windows = build_windows(&table, dims.t_obs, dims.t_pred, config.stride);
        assign_domain(&mut windows, domains.len());
        domains.push(windows);
    }
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "feature export needs ≥2 domains configured, got {}",
            domains.len()
        )));
    }
    let params = ModelParams::<S>::load(checkpoint, config.train.dims)?;
    let dump = export_features(&params, &domains)?;
    ensure_out_dir(config)?;
    let csv_path = config.out.join("features.csv");
    let svg_path = config.out.join("features.svg");
    write_text(&csv_path, &features_csv(&dump))?;
    write_text(&svg_path, &features_svg(&dump)?)?;
    println!(
        "exported {} feature rows from {} domains; wrote {} and {}",
        dump.rows.len(),
        domains.len(),
        csv_path.display(),
        svg_path.display()
    );
    Ok(())
}
