use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::TimeDelta;
use spinn_core::autodiff::GradCheckOptions;
use spinn_core::cee::{
    cee_predict, detect_episodes, episode_windows, export_equation, read_equations,
    write_equations, write_predictions, CalibratedEquation, MIN_EPISODE_HOURS,
};
use spinn_core::datapipe::{
    clean, ingest, make_windows, split, write_manifest, DataError, ManifestRow, PipelineConfig,
    TimeSeriesFrame,
};
use spinn_core::models::Checkpoint;
use spinn_core::physics::{flow_depth, scour_depth, BridgeAttributes, EquationVariant};
use spinn_core::synth::{generate, Noise, SynthSpec};
use spinn_core::training::{
    load_bridge_datasets, loss_grad_check, run_experiment, write_report, write_runs,
    ExperimentSpec, LossCheckCase, RunResult, TrainError,
};
use spinn_core::{Architecture, ERefMode, Method, Scope};

use crate::{
    Cli, CliError, Command, GradcheckArgs, PredictArgs, PreprocessArgs, RunBundle, RunManifest,
    SynthArgs, TrainArgs,
};

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn io_failed(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::failed(format!("{}: {e}", path.display()))
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let occupied = match std::fs::read_dir(dir) {
            Ok(mut it) => it.next().is_some(),
            Err(_) => true,
        };
        if occupied && !force {
            return Err(CliError::overwrite(dir));
        }
    }
    std::fs::create_dir_all(dir).map_err(io_failed(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(io_failed(path))
}

fn parse_e_ref(s: &str) -> Result<ERefMode, CliError> {
    ERefMode::from_label(s).ok_or_else(|| {
        CliError::input(format!(
            "unknown reference mode {s:?}; use as_built or first_step"
        ))
    })
}

fn read_bridges(path: &Path) -> Result<BTreeMap<String, BridgeAttributes>, CliError> {
    let list = BridgeAttributes::read_csv(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(list.into_iter().map(|b| (b.id.clone(), b)).collect())
}

fn read_frame(path: &Path) -> Result<TimeSeriesFrame, CliError> {
    match ingest(path) {
        Ok(f) if f.is_empty() => Err(CliError::input(format!(
            "{}: input is empty",
            path.display()
        ))),
        Ok(f) => Ok(f),
        Err(e) => Err(CliError::input(format!("{}: {e}", path.display()))),
    }
}

fn finish(mut manifest: RunManifest, started: Instant, path: &Path) -> Result<(), CliError> {
    manifest.wall_clock = started.elapsed();
    manifest.write(path).map_err(io_failed(path))
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.hours == 0 {
        return Err(CliError::input("--hours must be at least 1"));
    }
    prepare_dir(&a.out_dir, a.force)?;
    let mut spec = SynthSpec::standard(a.hours, a.seed);
    spec.bridge.id = a.bridge_id.clone();
    if a.noise_free {
        spec.noise = Noise::default();
    }
    let frame = generate(&spec, a.hours).map_err(CliError::input)?;

    let data = a.out_dir.join(format!("{}.csv", a.bridge_id));
    frame.write_csv(create(&data)?).map_err(CliError::failed)?;
    let bridges = a.out_dir.join("bridges.csv");
    BridgeAttributes::write_csv(std::slice::from_ref(&spec.bridge), create(&bridges)?)
        .map_err(CliError::failed)?;
    let truth = a.out_dir.join("truth.csv");
    let eq = CalibratedEquation::from_params(a.bridge_id.clone(), EquationVariant::Td, &spec.truth);
    write_equations(&[eq], create(&truth)?).map_err(CliError::failed)?;
    let floods = a.out_dir.join("floods.csv");
    let mut w = create(&floods)?;
    let mut text = String::from("start,start_hour,duration_h,peak_q_m3s\n");
    for f in &spec.floods {
        let t = spec.start + TimeDelta::hours(f.start as i64);
        let _ = writeln!(
            text,
            "{},{},{},{:?}",
            t.format("%Y-%m-%dT%H:%M:%SZ"),
            f.start,
            f.duration,
            f.peak_q
        );
    }
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(io_failed(&floods))?;

    let config = format!(
        "hours = {}\nseed = {}\nbridge_id = {}\nnoise_free = {}\n",
        a.hours, a.seed, a.bridge_id, a.noise_free
    );
    let mut m = RunManifest::new("synth", &config);
    m.seeds = vec![a.seed];
    for p in [&data, &bridges, &truth, &floods] {
        m.add_output(p, &a.out_dir).map_err(io_failed(p))?;
    }
    finish(m, started, &a.out_dir.join("manifest.txt"))?;
    println!(
        "wrote {} hours for bridge {} ({} floods) to {}",
        a.hours,
        a.bridge_id,
        spec.floods.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mode = parse_e_ref(&a.e_ref)?;
    if a.m_in == 0 || a.m_out == 0 {
        return Err(CliError::input("--m-in and --m-out must be positive"));
    }
    let attrs = read_bridges(&a.bridge_attrs)?;
    let mut frames = Vec::new();
    for path in &a.input {
        let frame = read_frame(path)?;
        if !attrs.contains_key(&frame.bridge_id) {
            return Err(CliError::input(format!(
                "{}: bridge {} is not in {}",
                path.display(),
                frame.bridge_id,
                a.bridge_attrs.display()
            )));
        }
        frames.push(frame);
    }
    prepare_dir(&a.out, a.force)?;

    let cfg = PipelineConfig::default();
    let total = a.m_in + a.m_out;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let mut spans_text = String::from("bridge,span_start,span_end,hours,windows\n");
    for frame in &frames {
        let attr = &attrs[&frame.bridge_id];
        let c = clean(frame, &cfg);
        let cleaned = a.out.join(format!("{}.clean.csv", frame.bridge_id));
        c.frame
            .write_csv(create(&cleaned)?)
            .map_err(CliError::failed)?;
        outputs.push(cleaned);
        let pairs = make_windows(
            &c.frame,
            &c.spans,
            a.m_in,
            a.m_out,
            mode,
            attr.as_built_elevation,
        )
        .map_err(CliError::input)?;
        for span in &c.spans {
            let (t0, t1) = (
                c.frame.timestamps[span.start],
                c.frame.timestamps[span.end - 1],
            );
            let windows = pairs
                .iter()
                .filter(|p| p.start >= t0 && p.start <= t1)
                .count();
            let _ = writeln!(
                spans_text,
                "{},{},{},{},{}",
                frame.bridge_id,
                t0.format("%Y-%m-%d %H:%M"),
                t1.format("%Y-%m-%d %H:%M"),
                span.len(),
                windows
            );
        }
        match split(pairs, a.split_seed) {
            Ok(s) => rows.extend(ManifestRow::from_split(&frame.bridge_id, &s, total)),
            Err(DataError::TooFewSequences(n)) => {
                eprintln!(
                    "bridge {}: {n} sequences, too few to split",
                    frame.bridge_id
                )
            }
            Err(e) => return Err(CliError::input(e)),
        }
    }
    let spans = a.out.join("spans.csv");
    let mut w = create(&spans)?;
    w.write_all(spans_text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(io_failed(&spans))?;
    let sequences = a.out.join("sequences.csv");
    write_manifest(&rows, create(&sequences)?).map_err(CliError::failed)?;
    outputs.push(spans);
    outputs.push(sequences);

    let config = format!(
        "m_in = {}\nm_out = {}\ne_ref = {}\nsplit_seed = {}\n",
        a.m_in,
        a.m_out,
        mode.label(),
        a.split_seed
    );
    let mut m = RunManifest::new("preprocess", &config);
    m.seeds = vec![a.split_seed];
    for p in a.input.iter().chain([&a.bridge_attrs]) {
        m.add_input(p).map_err(io_failed(p))?;
    }
    for p in &outputs {
        m.add_output(p, &a.out).map_err(io_failed(p))?;
    }
    finish(m, started, &a.out.join("manifest.txt"))?;
    for r in &rows {
        println!("{} {}: {} sequences", r.bridge, r.kind, r.sequences);
    }
    Ok(())
}

fn spec_error(path: &Path, e: TrainError) -> CliError {
    match e {
        TrainError::UnknownKey { line, key } => CliError::input(format!(
            "{}: unknown key {key:?} on line {line}",
            path.display()
        )),
        e => CliError::input(format!("{}: {e}", path.display())),
    }
}

fn run_name(r: &RunResult) -> String {
    format!(
        "{}_{}_{}_seed{}",
        r.architecture.label(),
        r.method.label(),
        r.training_set,
        r.seed
    )
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let text = std::fs::read_to_string(&a.experiment_spec)
        .map_err(|e| CliError::input(format!("{}: {e}", a.experiment_spec.display())))?;
    let spec = ExperimentSpec::parse(&text).map_err(|e| spec_error(&a.experiment_spec, e))?;
    spec.validate()
        .map_err(|e| spec_error(&a.experiment_spec, e))?;
    if a.jobs == 0 {
        return Err(CliError::input("--jobs must be at least 1"));
    }
    let base = a
        .experiment_spec
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let root: PathBuf = match (&spec.data_root, &a.data_root) {
        (Some(p), _) => base.join(p),
        (None, Some(p)) => p.clone(),
        (None, None) => base.clone(),
    };
    let attrs_path = spec
        .bridge_attrs
        .as_ref()
        .map_or_else(|| root.join("bridges.csv"), |p| base.join(p));
    let datasets = load_bridge_datasets(&root, &attrs_path, &spec.bridges, &spec.pipeline)
        .map_err(|e| match e {
            TrainError::MissingBridges(ids) => CliError::input(format!(
                "no data or attributes under {} for bridges: {}",
                root.display(),
                ids.join(", ")
            )),
            e => CliError::input(e),
        })?;
    prepare_dir(&a.out_dir, a.force)?;

    let report = run_experiment(&spec, &datasets, a.jobs).map_err(|e| match e {
        TrainError::Config(_) | TrainError::Spec { .. } | TrainError::Data(_) => CliError::input(e),
        e => CliError::failed(e),
    })?;

    let out = &a.out_dir;
    let mut outputs = Vec::new();
    let canonical = spec.to_text();
    let spec_out = out.join("spec.txt");
    std::fs::write(&spec_out, &canonical).map_err(io_failed(&spec_out))?;
    outputs.push(spec_out);
    let report_path = out.join("report.csv");
    write_report(&report.rows, create(&report_path)?).map_err(CliError::failed)?;
    outputs.push(report_path);
    let runs_path = out.join("runs.csv");
    write_runs(&report.runs, create(&runs_path)?).map_err(CliError::failed)?;
    outputs.push(runs_path);

    let mut history = String::from("run,epoch,train_data,train_physics,train_total,val_data\n");
    for r in &report.runs {
        let name = run_name(r);
        for h in &r.outcome.history {
            let _ = writeln!(
                history,
                "{name},{},{:?},{:?},{:?},{:?}",
                h.epoch, h.train.mse_data, h.train.mse_phy, h.train.total, h.val_data
            );
        }
    }
    let history_path = out.join("history.csv");
    std::fs::write(&history_path, history).map_err(io_failed(&history_path))?;
    outputs.push(history_path);

    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(io_failed(&ck_dir))?;
    let eq_dir = out.join("equations");
    let as_built: BTreeMap<&str, f64> = datasets
        .iter()
        .map(|d| (d.attributes.id.as_str(), d.attributes.as_built_elevation))
        .collect();
    for r in &report.runs {
        let name = run_name(r);
        let bundle = RunBundle {
            model: r.outcome.model.clone(),
            scaler: r.scaler.clone(),
            method: r.method,
            e_ref: spec.e_ref,
            as_built_elevation: match r.scope {
                Scope::SiteSpecific => as_built.get(r.training_set.as_str()).copied(),
                Scope::General => None,
            },
            training_set: r.training_set.clone(),
            seed: r.seed,
            best_epoch: r.outcome.best_epoch,
            latent: r.outcome.latent,
        };
        let path = ck_dir.join(format!("{name}.ckpt"));
        bundle
            .to_checkpoint()
            .save(&path)
            .map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?;
        outputs.push(path);
        if r.outcome.latent.is_some() {
            std::fs::create_dir_all(&eq_dir).map_err(io_failed(&eq_dir))?;
            let eq = export_equation(
                r.training_set.clone(),
                r.outcome.latent.as_ref(),
                spec.m_in,
                spec.m_out,
                spec.p1_mode,
            )
            .map_err(CliError::failed)?;
            let path = eq_dir.join(format!("{name}.csv"));
            write_equations(&[eq], create(&path)?).map_err(CliError::failed)?;
            outputs.push(path);
        }
    }

    let mut m = RunManifest::new("train", &canonical);
    m.seeds = spec.seeds.clone();
    m.add_input(&a.experiment_spec)
        .map_err(io_failed(&a.experiment_spec))?;
    m.add_input(&attrs_path).map_err(io_failed(&attrs_path))?;
    for id in &spec.bridges {
        let p = root.join(format!("{id}.csv"));
        m.add_input(&p).map_err(io_failed(&p))?;
    }
    for p in &outputs {
        m.add_output(p, out).map_err(io_failed(p))?;
    }
    finish(m, started, &out.join("manifest.txt"))?;
    for row in &report.rows {
        println!(
            "{} {} {} {} ({}): MSE {} MAPE {} RMSE {}",
            row.test_set,
            row.base_model.display_name(),
            row.method_label(),
            row.physics_label(),
            row.training_set,
            row.mse,
            row.mape,
            row.rmse
        );
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let frame = read_frame(&a.input)?;
    let bridge_id = a.bridge.clone().unwrap_or_else(|| frame.bridge_id.clone());
    let attrs = match &a.bridge_attrs {
        Some(p) => Some(read_bridges(p)?),
        None => None,
    };
    let attr = attrs.as_ref().and_then(|m| m.get(&bridge_id));
    let cleaned = clean(&frame, &PipelineConfig::default());
    let (text, config) = match (&a.checkpoint, &a.equation) {
        (Some(ck), _) => predict_checkpoint(ck, &cleaned.frame, attr)?,
        (None, Some(eq)) => {
            let attr = attr.ok_or_else(|| {
                CliError::input(format!(
                    "equation mode needs --bridge-attrs with an entry for bridge {bridge_id}"
                ))
            })?;
            predict_equation(eq, &a, &bridge_id, &cleaned, attr)?
        }
        (None, None) => return Err(CliError::input("pass --checkpoint or --equation")),
    };
    std::fs::write(&a.out, text).map_err(io_failed(&a.out))?;

    let mut m = RunManifest::new("predict", &config);
    for p in [
        &a.checkpoint,
        &a.equation,
        &Some(a.input.clone()),
        &a.bridge_attrs,
    ]
    .into_iter()
    .flatten()
    {
        m.add_input(p).map_err(io_failed(p))?;
    }
    let base = a.out.parent().unwrap_or(Path::new(""));
    m.add_output(&a.out, base).map_err(io_failed(&a.out))?;
    let mut manifest_path = a.out.clone().into_os_string();
    manifest_path.push(".manifest.txt");
    finish(m, started, Path::new(&manifest_path))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn predict_checkpoint(
    path: &Path,
    frame: &TimeSeriesFrame,
    attr: Option<&BridgeAttributes>,
) -> Result<(String, String), CliError> {
    let ck =
        Checkpoint::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let bundle = RunBundle::from_checkpoint(&ck)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let c = bundle.model.config().clone();
    if frame.len() < c.m_in {
        return Err(CliError::input(format!(
            "input covers {} hours; the checkpoint needs at least {}",
            frame.len(),
            c.m_in
        )));
    }
    let e_ref = match bundle.e_ref {
        ERefMode::AsBuilt => attr
            .map(|b| b.as_built_elevation)
            .or(bundle.as_built_elevation)
            .ok_or_else(|| {
                CliError::input("as-built reference unknown; pass --bridge-attrs for this bridge")
            })?,
        ERefMode::FirstStep => {
            frame.e_bed[0].ok_or_else(|| CliError::input("first bed elevation is missing"))?
        }
    };
    let mut x = Vec::with_capacity(c.m_in * 3);
    for i in 0..c.m_in {
        let (Some(b), Some(s), Some(q)) = (frame.e_bed[i], frame.e_stage[i], frame.q[i]) else {
            return Err(CliError::input(format!(
                "input hour {} ({}) has a missing value",
                i, frame.timestamps[i]
            )));
        };
        x.extend([scour_depth(e_ref, b), flow_depth(s, e_ref), q]);
    }
    let y = bundle
        .model
        .predict(&bundle.scaler.apply(&x), 1)
        .map_err(CliError::failed)?;
    let last = frame.timestamps[c.m_in - 1];
    let mut text = String::from("timestamp,forecast_scour_m,observed_scour_m\n");
    for (k, v) in y.iter().enumerate() {
        let t = last + TimeDelta::hours(k as i64 + 1);
        let observed = frame
            .e_bed
            .get(c.m_in + k)
            .copied()
            .flatten()
            .map(|b| format!("{:?}", scour_depth(e_ref, b)))
            .unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{:?},{observed}",
            t.format("%Y-%m-%dT%H:%M:%SZ"),
            bundle.scaler.unscale_scour(*v)
        );
    }
    let config = format!(
        "mode = checkpoint\ne_ref = {}\ne_ref_m = {e_ref:?}\n",
        bundle.e_ref.label()
    );
    Ok((text, config))
}

fn predict_equation(
    path: &Path,
    a: &PredictArgs,
    bridge_id: &str,
    cleaned: &spinn_core::datapipe::Cleaned,
    attr: &BridgeAttributes,
) -> Result<(String, String), CliError> {
    let file = File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let eqs =
        read_equations(file).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let eq = eqs
        .iter()
        .find(|e| e.bridge == bridge_id)
        .or_else(|| eqs.iter().find(|e| e.bridge.eq_ignore_ascii_case("all")))
        .ok_or_else(|| {
            CliError::input(format!(
                "{} has no equation for bridge {bridge_id} or All",
                path.display()
            ))
        })?;
    let mode = match &a.e_ref {
        Some(s) => parse_e_ref(s)?,
        None if eq.variant == EquationVariant::Hec18 => ERefMode::AsBuilt,
        None => ERefMode::FirstStep,
    };
    if a.window == 0 {
        return Err(CliError::input("--window must be positive"));
    }
    let episodes = detect_episodes(
        &cleaned.frame,
        &cleaned.spans,
        mode,
        attr.as_built_elevation,
        MIN_EPISODE_HOURS,
    );
    let windows = episode_windows(
        &cleaned.frame,
        &cleaned.spans,
        &episodes,
        a.window,
        a.stride,
        mode,
        attr.as_built_elevation,
    );
    let points = cee_predict(eq, attr, &windows).map_err(CliError::input)?;
    let mut buf = Vec::new();
    write_predictions(&points, &cleaned.frame.timestamps, &mut buf).map_err(CliError::failed)?;
    let config = format!(
        "mode = equation\nbridge = {bridge_id}\nvariant = {}\ne_ref = {}\nwindow = {}\nstride = {}\n",
        eq.variant.label(),
        mode.label(),
        a.window,
        a.stride
    );
    Ok((String::from_utf8(buf).expect("UTF-8 CSV"), config))
}

fn parse_method(s: &str) -> Option<Method> {
    Method::from_label(s).or_else(|| Method::from_label(&format!("spinn_{}", s.to_lowercase())))
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let architecture = Architecture::from_label(&a.arch)
        .ok_or_else(|| CliError::input(format!("unknown architecture {:?}", a.arch)))?;
    let method = parse_method(&a.variant)
        .ok_or_else(|| CliError::input(format!("unknown variant {:?}", a.variant)))?;
    let report = loss_grad_check(
        LossCheckCase {
            architecture,
            method,
            seed: a.seed,
        },
        GradCheckOptions {
            analytic_scale: a.corrupt_gradient,
            ..GradCheckOptions::default()
        },
    )
    .map_err(CliError::failed)?;
    for (name, err) in &report.per_param {
        let verdict = if *err < a.tolerance { "ok" } else { "FAIL" };
        println!("{name:<24} {err:.3e} {verdict}");
    }
    println!(
        "{} {} seed {}: max relative error {:.3e} over {} entries",
        architecture.label(),
        method.label(),
        a.seed,
        report.max_rel_error,
        report.points
    );
    if report.passes(a.tolerance) {
        Ok(())
    } else {
        Err(CliError::failed(format!(
            "gradient check failed: {:.3e} >= {:e}",
            report.max_rel_error, a.tolerance
        )))
    }
}
