use std::fs;
use std::path::{Path, PathBuf};

use pcjscc::baseline::{baseline_sweep, BaselineRow};
use pcjscc::checkpoint::{load_trained, load_trainer, save_trained, save_trainer};
use pcjscc::geometry::{generate_dataset, load_dataset, write_dataset, DatasetSpec, PointCloud};
use pcjscc::training::{
    ablate_latent_head, ablate_refinement, evaluate, hybrid_experiment, EvalConfig, Trainer,
};
use serde::Serialize;

use crate::config::{
    load, require_dir, require_file, resolve, runtime, AblateJob, BaselineJob, CliError, SweepJob,
    TrainJob,
};
use crate::output::{plot, write_csv, write_manifest, Series};
use crate::Overrides;

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(runtime)
}

fn dataset(dir: &Path, limit: Option<usize>) -> Result<Vec<PointCloud>, CliError> {
    require_dir(dir, "dataset")?;
    let (_, mut clouds) = load_dataset(dir)?;
    if let Some(n) = limit {
        clouds.truncate(n);
    }
    if clouds.is_empty() {
        return Err(CliError::Config(format!(
            "dataset {} holds no clouds",
            dir.display()
        )));
    }
    Ok(clouds)
}

fn apply_eval_overrides(eval: &mut EvalConfig, o: &Overrides) {
    if let Some(s) = o.seed {
        eval.seed = s;
    }
    if let Some(w) = o.workers {
        eval.workers = w;
    }
}

pub fn gen_data(config: &Path, out: &Path, o: &Overrides) -> Result<(), CliError> {
    let mut job = load::<DatasetSpec>(config)?;
    if let Some(s) = o.seed {
        job.value.seed = s;
    }
    job.value.validate()?;
    let clouds = generate_dataset(&job.value)?;
    let manifest = write_dataset(out, &job.value, &clouds)?;
    eprintln!("wrote {} clouds to {}", manifest.files.len(), out.display());
    write_manifest(
        out,
        "gen-data",
        &job.raw,
        o,
        &job.value,
        &[out.join(pcjscc::geometry::MANIFEST_FILE)],
    )
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    learning_rate: f64,
    power_ratio: f64,
    seconds: f64,
}

pub fn train(config: &Path, out: &Path, o: &Overrides, resume: bool) -> Result<(), CliError> {
    let mut job = load::<TrainJob>(config)?;
    if let Some(s) = o.seed {
        job.value.train.seed = s;
    }
    job.value.train.validate()?;
    let data = dataset(&resolve(config, &job.value.dataset), None)?;
    prepare_out(out)?;
    let state_path = out.join("trainer.json");
    let mut trainer = if resume && state_path.exists() {
        let t = load_trainer(&state_path)?;
        if t.config != job.value.train {
            return Err(CliError::Config(
                "the trainer checkpoint was written with a different configuration".into(),
            ));
        }
        eprintln!("resuming after epoch {}", t.epochs_done());
        t
    } else {
        Trainer::new(job.value.train.clone())?
    };
    while !trainer.finished() {
        let r = trainer.run_epoch(&data)?;
        eprintln!(
            "epoch {:>3}  loss {:.6}  lr {:.2e}  power {:.3}  {:.1}s",
            r.epoch, r.loss, r.learning_rate, r.power_ratio, r.seconds
        );
        save_trainer(&state_path, &trainer)?;
    }
    let trained = trainer.finish();
    let model_path = out.join("model.json");
    save_trained(&model_path, &trained)?;
    let rows: Vec<EpochRow> = trained
        .log
        .records
        .iter()
        .map(|r| EpochRow {
            epoch: r.epoch,
            loss: r.loss,
            learning_rate: r.learning_rate,
            power_ratio: r.power_ratio,
            seconds: r.seconds,
        })
        .collect();
    let log_path = out.join("train_log.csv");
    write_csv(&log_path, &rows)?;
    let mut outputs = vec![model_path, log_path];
    let curve = Series {
        label: "mean Chamfer".into(),
        points: rows.iter().map(|r| (r.epoch as f64, r.loss)).collect(),
    };
    outputs.extend(plot(
        &out.join("loss.svg"),
        "Training loss",
        "epoch",
        "Chamfer",
        &[curve],
    ));
    write_manifest(out, "train", &job.raw, o, &job.value, &outputs)
}

#[derive(Serialize)]
struct SweepCsvRow {
    snr_db: f64,
    d1_db: f64,
    d2_db: Option<f64>,
    chamfer: Option<f64>,
    scheme: &'static str,
    /// Real channel dimension per cloud.
    n: usize,
    trials: usize,
}

fn baseline_rows(rows: &[BaselineRow]) -> Vec<SweepCsvRow> {
    rows.iter()
        .map(|r| SweepCsvRow {
            snr_db: r.snr_db,
            d1_db: r.d1_db,
            d2_db: None,
            chamfer: None,
            scheme: "digital",
            n: (2.0 * r.mean_uses).round() as usize,
            trials: 1,
        })
        .collect()
}

fn d1_series(rows: &[SweepCsvRow]) -> Vec<Series> {
    let mut schemes: Vec<&str> = rows.iter().map(|r| r.scheme).collect();
    schemes.dedup();
    schemes
        .into_iter()
        .map(|s| Series {
            label: s.into(),
            points: rows
                .iter()
                .filter(|r| r.scheme == s)
                .map(|r| (r.snr_db, r.d1_db))
                .collect(),
        })
        .collect()
}

pub fn eval_sweep(config: &Path, out: &Path, o: &Overrides) -> Result<(), CliError> {
    let mut job = load::<SweepJob>(config)?;
    apply_eval_overrides(&mut job.value.eval, o);
    job.value.eval.validate()?;
    if let Some(b) = &job.value.baseline {
        b.validate()?;
    }
    let model_path = resolve(config, &job.value.model);
    require_file(&model_path, "model")?;
    let data = dataset(&resolve(config, &job.value.dataset), job.value.limit)?;
    let trained = load_trained(&model_path)?;
    prepare_out(out)?;
    let eval = &job.value.eval;
    let mut rows: Vec<SweepCsvRow> = evaluate(&trained.model, &trained.normalizer, &data, eval)?
        .into_iter()
        .map(|r| SweepCsvRow {
            snr_db: r.snr_db,
            d1_db: r.d1_db,
            d2_db: Some(r.d2_db),
            chamfer: Some(r.chamfer),
            scheme: "sept",
            n: trained.model.config.latent_dim,
            trials: r.trials,
        })
        .collect();
    if let Some(b) = &job.value.baseline {
        rows.extend(baseline_rows(&baseline_sweep(
            &data,
            &eval.snr_db,
            b,
            &eval.metrics,
        )?));
    }
    let csv_path = out.join("sweep.csv");
    write_csv(&csv_path, &rows)?;
    let mut outputs = vec![csv_path];
    outputs.extend(plot(
        &out.join("sweep.svg"),
        "D1 versus channel SNR",
        "SNR (dB)",
        "D1 PSNR (dB)",
        &d1_series(&rows),
    ));
    write_manifest(out, "eval-sweep", &job.raw, o, &job.value, &outputs)
}

#[derive(Serialize)]
struct BaselineCsvRow {
    snr_db: f64,
    d1_db: f64,
    failures: usize,
    samples: usize,
    mean_bits: f64,
    mean_uses: f64,
    threshold_db: f64,
}

pub fn baseline(config: &Path, out: &Path, o: &Overrides) -> Result<(), CliError> {
    let job = load::<BaselineJob>(config)?;
    job.value.baseline.validate()?;
    job.value.metrics.validate()?;
    if job.value.snr_db.is_empty() || job.value.snr_db.iter().any(|s| s.is_nan()) {
        return Err(CliError::Config(
            "snr_db must be a nonempty list of numbers".into(),
        ));
    }
    let data = dataset(&resolve(config, &job.value.dataset), job.value.limit)?;
    prepare_out(out)?;
    let cfg = &job.value.baseline;
    let rows = baseline_sweep(&data, &job.value.snr_db, cfg, &job.value.metrics)?;
    let csv_rows: Vec<BaselineCsvRow> = rows
        .iter()
        .map(|r| BaselineCsvRow {
            snr_db: r.snr_db,
            d1_db: r.d1_db,
            failures: r.failures,
            samples: r.samples,
            mean_bits: r.mean_bits,
            mean_uses: r.mean_uses,
            threshold_db: cfg.link.threshold_db(),
        })
        .collect();
    let csv_path = out.join("baseline.csv");
    write_csv(&csv_path, &csv_rows)?;
    let mut outputs = vec![csv_path];
    let curve = Series {
        label: "digital".into(),
        points: rows.iter().map(|r| (r.snr_db, r.d1_db)).collect(),
    };
    outputs.extend(plot(
        &out.join("baseline.svg"),
        "Digital baseline D1",
        "SNR (dB)",
        "D1 PSNR (dB)",
        &[curve],
    ));
    write_manifest(out, "baseline", &job.raw, o, &job.value, &outputs)
}

#[derive(Serialize)]
struct HeadRow {
    snr_db: f64,
    head: &'static str,
    d1_db: f64,
}

pub fn ablate(config: &Path, out: &Path, o: &Overrides) -> Result<(), CliError> {
    let mut job = load::<AblateJob>(config)?;
    if let Some(s) = o.seed {
        job.value.train.seed = s;
    }
    apply_eval_overrides(&mut job.value.eval, o);
    job.value.train.validate()?;
    job.value.eval.validate()?;
    let j = &job.value;
    let train_data = dataset(&resolve(config, &j.dataset), None)?;
    let eval_data = dataset(&resolve(config, &j.eval_dataset), j.limit)?;
    prepare_out(out)?;
    let (table, maxpool, projection) =
        ablate_latent_head(&j.train, &train_data, &eval_data, &j.eval)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for (name, trained) in [("maxpool.json", &maxpool), ("projection.json", &projection)] {
        let p = out.join(name);
        save_trained(&p, trained)?;
        outputs.push(p);
    }
    let heads: Vec<HeadRow> = table
        .iter()
        .flat_map(|r| {
            [
                HeadRow {
                    snr_db: r.snr_db,
                    head: "max_pool",
                    d1_db: r.maxpool_d1_db,
                },
                HeadRow {
                    snr_db: r.snr_db,
                    head: "projection",
                    d1_db: r.projection_d1_db,
                },
            ]
        })
        .collect();
    let heads_path = out.join("heads.csv");
    write_csv(&heads_path, &heads)?;
    outputs.push(heads_path);
    let refinement = ablate_refinement(
        &maxpool.model,
        &maxpool.normalizer,
        &eval_data,
        j.refinement_snr_db,
        &j.eval,
    )?;
    let refinement_path = out.join("refinement.csv");
    write_csv(&refinement_path, &[refinement])?;
    outputs.push(refinement_path);
    let hybrid = hybrid_experiment(
        &maxpool.model,
        &maxpool.normalizer,
        &eval_data,
        j.hybrid_snr_db,
        j.quant_bits,
        &j.eval,
    )?;
    let hybrid_path = out.join("hybrid.csv");
    write_csv(&hybrid_path, &[hybrid])?;
    outputs.push(hybrid_path);
    let series: Vec<Series> = ["max_pool", "projection"]
        .iter()
        .map(|h| Series {
            label: h.to_string(),
            points: heads
                .iter()
                .filter(|r| r.head == *h)
                .map(|r| (r.snr_db, r.d1_db))
                .collect(),
        })
        .collect();
    outputs.extend(plot(
        &out.join("heads.svg"),
        "Latent head ablation",
        "SNR (dB)",
        "D1 PSNR (dB)",
        &series,
    ));
    write_manifest(out, "ablate", &job.raw, o, &job.value, &outputs)
}
