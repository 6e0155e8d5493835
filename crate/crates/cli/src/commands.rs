use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dtg_core::checkpoint;
use dtg_core::datamodel::{
    load_dataset, split_folds, write_dataset, DataPaths, PatientRecord, Schema,
};
use dtg_core::evaluation::{cross_validate, evaluate as eval_report, twin_summary, EvalReport};
use dtg_core::nbm::{event_locations, generate as gen_samples, model_fingerprint};
use dtg_core::networks::NbmModel;
use dtg_core::samples::SampleSet;
use dtg_core::synth::gen_cohort;
use dtg_core::training::{
    gradcheck_fixture, gradient_suite, train as train_model, write_telemetry, TrainError,
};

use crate::config::RunConfig;
use crate::CliError;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    Ok(&cfg.out)
}

/// Which side of the configured fold a command works on.
enum Side {
    Train,
    Held,
}

fn select_fold(
    cfg: &RunConfig,
    records: Vec<PatientRecord>,
    side: Side,
) -> Result<Vec<PatientRecord>, CliError> {
    let Some(fold) = cfg.fold else {
        return Ok(records);
    };
    if fold >= cfg.folds {
        return Err(CliError::Config(format!(
            "fold {fold} is out of range for {} folds",
            cfg.folds
        )));
    }
    let folds = split_folds(&records, cfg.folds, cfg.seed()?)?;
    Ok(records
        .into_iter()
        .zip(folds)
        .filter(|(_, f)| match side {
            Side::Train => *f != fold,
            Side::Held => *f == fold,
        })
        .map(|(r, _)| r)
        .collect())
}

fn load_records(
    cfg: &RunConfig,
    schema: &Schema,
    side: Side,
) -> Result<Vec<PatientRecord>, CliError> {
    let records = load_dataset(&cfg.data_paths()?, schema)?;
    select_fold(cfg, records, side)
}

fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.model
        .clone()
        .unwrap_or_else(|| cfg.out.join("model.dtg"))
}

fn load_model(cfg: &RunConfig) -> Result<NbmModel, CliError> {
    let path = cfg.existing("model", &cfg.model)?;
    Ok(checkpoint::load(path)?)
}

fn check_finite(set: &SampleSet) -> Result<(), CliError> {
    match set
        .patients
        .iter()
        .find(|p| p.draws.iter().any(|v| !v.is_finite()))
    {
        Some(p) => Err(CliError::Numeric(format!(
            "non-finite twin draw for patient {}",
            p.id
        ))),
        None => Ok(()),
    }
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.ou_spec();
    let tte = cfg.tte_spec();
    let cohort = gen_cohort(&spec, tte.as_ref(), cfg.synth_patients, cfg.seed()?)?;
    let schema = spec.schema(tte.is_some());
    let out = out_dir(cfg)?;
    let paths = DataPaths {
        longitudinal: out.join("longitudinal.csv"),
        context: (schema.n_context() > 0).then(|| out.join("context.csv")),
        tte: tte.is_some().then(|| out.join("tte.csv")),
    };
    write_dataset(&cohort.records, &schema, &paths)?;
    write_text(
        &out.join("schema.json"),
        &serde_json::to_string_pretty(&schema).expect("schema serializes"),
    )?;
    cfg.echo("synth")?;
    println!(
        "wrote {} patients to {}",
        cohort.records.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let schema = cfg.load_schema()?;
    let records = load_records(cfg, &schema, Side::Train)?;
    let net = cfg.net_config(&schema);
    let tc = cfg.train_config()?;
    let out = out_dir(cfg)?;
    cfg.echo("train")?;
    let outcome = match train_model(&records, &schema, &net, &tc) {
        Ok(o) => o,
        Err(e @ TrainError::NonFinite { .. }) => {
            if let TrainError::NonFinite {
                epoch,
                batch,
                terms,
                patients,
            } = &e
            {
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "batch": batch,
                    "terms": terms,
                    "patients": patients,
                });
                write_text(
                    &out.join("nan_dump.json"),
                    &serde_json::to_string_pretty(&dump).expect("dump serializes"),
                )?;
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let path = model_path(cfg);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    checkpoint::save(&outcome.model, &path)?;
    write_telemetry(&outcome.telemetry, &out.join("telemetry.csv"))?;
    println!(
        "trained on {} patients; kept epoch {:?}; model {} at {}",
        records.len(),
        outcome.best_epoch,
        model_fingerprint(&outcome.model),
        path.display()
    );
    Ok(())
}

fn schema_for(cfg: &RunConfig, model: &NbmModel) -> Result<Schema, CliError> {
    if cfg.schema.is_some() {
        let schema = cfg.load_schema()?;
        if schema != model.schema {
            return Err(CliError::Config(
                "the schema file does not match the model's schema".into(),
            ));
        }
    }
    Ok(model.schema.clone())
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let schema = schema_for(cfg, &model)?;
    let records = load_records(cfg, &schema, Side::Held)?;
    let opts = cfg.generate_options()?;
    let out = out_dir(cfg)?;
    cfg.echo("generate")?;
    let set = gen_samples(&model, &records, &opts)?;
    check_finite(&set)?;
    let path = out.join("samples.csv");
    set.write_csv(&path)?;
    println!(
        "wrote {} patients x {} samples to {}",
        set.patients.len(),
        set.n_samples,
        path.display()
    );
    Ok(())
}

fn write_report(report: &EvalReport, out: &Path) -> Result<(), CliError> {
    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?.to_path_buf();
    let model = match &cfg.model {
        Some(_) => Some(load_model(cfg)?),
        None => None,
    };
    let schema = match &model {
        Some(m) => schema_for(cfg, m)?,
        None => cfg.load_schema()?,
    };
    let eval = cfg.eval_config();
    cfg.echo("evaluate")?;

    if model.is_none() && cfg.samples_file.is_none() {
        let records = load_dataset(&cfg.data_paths()?, &schema)?;
        let cv = cross_validate(
            &records,
            &schema,
            &cfg.net_config(&schema),
            &cfg.train_config()?,
            &cfg.generate_options()?,
            &eval,
            cfg.folds,
        )?;
        check_finite(&cv.samples)?;
        cv.samples.write_csv(&out.join("samples.csv"))?;
        let path = out.join("folds.csv");
        let mut w = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        writeln!(w, "patient_id,fold").map_err(io_err(&path))?;
        for (r, f) in records.iter().zip(&cv.folds) {
            writeln!(w, "{},{f}", r.id).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        write_report(&cv.report, &out)?;
        println!(
            "cross-validated {} patients over {} folds",
            records.len(),
            cfg.folds
        );
        return Ok(());
    }

    let records = load_records(cfg, &schema, Side::Held)?;
    let set = match &cfg.samples_file {
        Some(_) => SampleSet::read_csv(cfg.existing("samples_file", &cfg.samples_file)?)?,
        None => {
            let m = model.as_ref().expect("model or samples file present");
            let set = gen_samples(m, &records, &cfg.generate_options()?)?;
            check_finite(&set)?;
            set.write_csv(&out.join("samples.csv"))?;
            set
        }
    };
    let locations = match &model {
        Some(m) => (0..schema.tte_outcomes.len())
            .map(|k| event_locations(m, &records, k))
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    let report = eval_report(&set, &records, &schema, &locations, &eval);
    write_report(&report, &out)?;
    println!("evaluated {} patients", records.len());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let schema = Schema::new(Vec::new(), Vec::new(), Vec::new());
    let net = cfg.net_config(&schema);
    let (model, records) = gradcheck_fixture(&net, cfg.seed()?)?;
    let suite = gradient_suite(&model, &records, GRAD_STEP)?;
    let out = out_dir(cfg)?;
    cfg.echo("gradcheck")?;
    let mut table = String::from("component,checked,max_rel_error,result\n");
    println!(
        "{:<34} {:>8} {:>14}  result",
        "component", "checked", "max rel err"
    );
    let mut failed = Vec::new();
    for e in &suite {
        let ok = e.report.passed(GRAD_TOLERANCE);
        let verdict = if ok { "pass" } else { "FAIL" };
        println!(
            "{:<34} {:>8} {:>14.3e}  {verdict}",
            e.component, e.report.checked, e.report.max_rel_error
        );
        table.push_str(&format!(
            "{},{},{},{verdict}\n",
            e.component, e.report.checked, e.report.max_rel_error
        ));
        if !ok {
            failed.push(e.component.clone());
        }
    }
    write_text(&out.join("gradcheck.csv"), &table)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

pub fn twin_record(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let schema = schema_for(cfg, &model)?;
    let records = load_records(cfg, &schema, Side::Held)?;
    let set = gen_samples(&model, &records, &cfg.generate_options()?)?;
    check_finite(&set)?;
    let out = out_dir(cfg)?;
    cfg.echo("twin-record")?;
    let path = out.join("twin_record.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    let header: Vec<String> = set.times.iter().map(|t| format!("t={t}")).collect();
    writeln!(w, "patient_id,variable,{}", header.join(",")).map_err(io_err(&path))?;
    for (p, ps) in set.patients.iter().enumerate() {
        for (j, row) in twin_summary(&set, p).iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|(m, s)| format!("{m:.4} ± {s:.4}"))
                .collect();
            writeln!(w, "{},{},{}", ps.id, set.variables[j], cells.join(","))
                .map_err(io_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    println!(
        "wrote twin records for {} patients to {}",
        set.patients.len(),
        path.display()
    );
    Ok(())
}
