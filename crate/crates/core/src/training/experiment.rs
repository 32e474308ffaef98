use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    evaluate, train, AdamConfig, LossReduction, Method, Metrics, Scope, TrainConfig, TrainData,
    TrainError, TrainOutcome,
};
use crate::datapipe::{
    clean, fit_scaler, ingest, make_windows, split, Cleaned, ERefMode, PipelineConfig, Scaler,
    Split,
};
use crate::models::{Architecture, Forecaster, ModelConfig};
use crate::physics::{
    constrain, BridgeAttributes, EquationVariant, MaskMode, P1Mode, PhysicsParams,
};

/// Keys accepted in an experiment spec, in canonical order.
pub const SPEC_KEYS: [&str; 26] = [
    "name",
    "variant",
    "architecture",
    "scope",
    "bridges",
    "seeds",
    "epochs",
    "batch_size",
    "learning_rate",
    "m_in",
    "m_out",
    "hidden",
    "cnn_channels",
    "cnn_kernel",
    "cnn_padding",
    "e_ref",
    "mask",
    "p1_mode",
    "loss_reduction",
    "split_seed",
    "outlier_window",
    "outlier_k",
    "smooth_window",
    "max_gap",
    "data_root",
    "bridge_attrs",
];

/// One experiment: a training method and scope over a set of bridges, base
/// models and seeds.
///
/// Text form is one `key = value` per line; `#` starts a comment and lists
/// are comma separated. `variant`, `architecture` and `bridges` are
/// required.
///
/// ```text
/// name = td-site
/// variant = spinn_td
/// architecture = nlinear, lstm
/// scope = site_specific
/// bridges = 539, 742
/// seeds = 1, 2, 3, 4, 5
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub method: Method,
    pub architectures: Vec<Architecture>,
    pub scope: Scope,
    pub bridges: Vec<String>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub m_in: usize,
    pub m_out: usize,
    pub hidden: usize,
    pub cnn_channels: (usize, usize),
    pub cnn_kernel: usize,
    pub cnn_padding: usize,
    pub e_ref: ERefMode,
    pub mask_mode: MaskMode,
    pub p1_mode: P1Mode,
    pub reduction: LossReduction,
    pub split_seed: u64,
    pub pipeline: PipelineConfig,
    pub data_root: Option<PathBuf>,
    pub bridge_attrs: Option<PathBuf>,
}

/// The reference elevation each method uses unless overridden.
fn default_e_ref(method: Method) -> ERefMode {
    match method {
        Method::Spinn(EquationVariant::Td | EquationVariant::Gtd) => ERefMode::FirstStep,
        _ => ERefMode::AsBuilt,
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect();
    items.filter(|v| !v.is_empty())
}

impl ExperimentSpec {
    /// Spec with defaults for every optional key.
    pub fn new(method: Method, architectures: Vec<Architecture>, bridges: Vec<String>) -> Self {
        let m = ModelConfig::new(Architecture::NLinear);
        Self {
            name: "experiment".into(),
            method,
            architectures,
            scope: Scope::SiteSpecific,
            bridges,
            seeds: vec![0, 1, 2, 3, 4],
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-3,
            m_in: m.m_in,
            m_out: m.m_out,
            hidden: m.hidden,
            cnn_channels: m.cnn_channels,
            cnn_kernel: m.cnn_kernel,
            cnn_padding: m.cnn_padding,
            e_ref: default_e_ref(method),
            mask_mode: MaskMode::default(),
            p1_mode: P1Mode::default(),
            reduction: LossReduction::default(),
            split_seed: 0,
            pipeline: PipelineConfig::default(),
            data_root: None,
            bridge_attrs: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| TrainError::Spec {
                line,
                detail: format!("expected key = value, got {content:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !SPEC_KEYS.contains(&k) {
                return Err(TrainError::UnknownKey {
                    line,
                    key: k.into(),
                });
            }
            if entries.insert(k, (line, v)).is_some() {
                return Err(TrainError::Spec {
                    line,
                    detail: format!("duplicate key {k}"),
                });
            }
        }
        let required = |k: &str| {
            entries.get(k).copied().ok_or_else(|| TrainError::Spec {
                line: 0,
                detail: format!("missing required key {k}"),
            })
        };
        let bad = |line: usize, k: &str, v: &str| TrainError::Spec {
            line,
            detail: format!("invalid value {v:?} for {k}"),
        };
        let (l, v) = required("variant")?;
        let method = Method::from_label(v).ok_or_else(|| bad(l, "variant", v))?;
        let (l, v) = required("architecture")?;
        let architectures =
            list(v, Architecture::from_label).ok_or_else(|| bad(l, "architecture", v))?;
        let (l, v) = required("bridges")?;
        let bridges = list(v, |s| Some(s.to_string())).ok_or_else(|| bad(l, "bridges", v))?;
        let mut spec = Self::new(method, architectures, bridges);

        for (&k, &(l, v)) in &entries {
            fn num<T: std::str::FromStr>(v: &str) -> Option<T> {
                v.parse().ok()
            }
            let ok = match k {
                "variant" | "architecture" | "bridges" => true,
                "name" => {
                    spec.name = v.to_string();
                    !v.is_empty()
                }
                "scope" => Scope::from_label(v).map(|s| spec.scope = s).is_some(),
                "seeds" => list(v, num).map(|s| spec.seeds = s).is_some(),
                "epochs" => num(v).map(|x| spec.epochs = x).is_some(),
                "batch_size" => num(v).map(|x| spec.batch_size = x).is_some(),
                "learning_rate" => num(v).map(|x| spec.learning_rate = x).is_some(),
                "m_in" => num(v).map(|x| spec.m_in = x).is_some(),
                "m_out" => num(v).map(|x| spec.m_out = x).is_some(),
                "hidden" => num(v).map(|x| spec.hidden = x).is_some(),
                "cnn_channels" => match list(v, num).as_deref() {
                    Some(&[a, b]) => {
                        spec.cnn_channels = (a, b);
                        true
                    }
                    _ => false,
                },
                "cnn_kernel" => num(v).map(|x| spec.cnn_kernel = x).is_some(),
                "cnn_padding" => num(v).map(|x| spec.cnn_padding = x).is_some(),
                "e_ref" => ERefMode::from_label(v).map(|x| spec.e_ref = x).is_some(),
                "mask" => match v {
                    "per_sequence" => {
                        spec.mask_mode = MaskMode::PerSequence;
                        true
                    }
                    "per_timestep" => {
                        spec.mask_mode = MaskMode::PerTimestep;
                        true
                    }
                    _ => false,
                },
                "p1_mode" => match v {
                    "tanh" => {
                        spec.p1_mode = P1Mode::Tanh;
                        true
                    }
                    "unconstrained" => {
                        spec.p1_mode = P1Mode::Unconstrained;
                        true
                    }
                    _ => false,
                },
                "loss_reduction" => LossReduction::from_label(v)
                    .map(|x| spec.reduction = x)
                    .is_some(),
                "split_seed" => num(v).map(|x| spec.split_seed = x).is_some(),
                "outlier_window" => num(v).map(|x| spec.pipeline.outlier_window = x).is_some(),
                "outlier_k" => {
                    if v == "none" {
                        spec.pipeline.outlier_k = None;
                        true
                    } else {
                        num(v).map(|x| spec.pipeline.outlier_k = Some(x)).is_some()
                    }
                }
                "smooth_window" => num(v).map(|x| spec.pipeline.smooth_window = x).is_some(),
                "max_gap" => num(v).map(|x| spec.pipeline.max_gap = x).is_some(),
                "data_root" => {
                    spec.data_root = Some(PathBuf::from(v));
                    !v.is_empty()
                }
                "bridge_attrs" => {
                    spec.bridge_attrs = Some(PathBuf::from(v));
                    !v.is_empty()
                }
                _ => unreachable!("keys are checked against SPEC_KEYS"),
            };
            if !ok {
                return Err(bad(l, k, v));
            }
        }
        spec.validate().map_err(|e| TrainError::Spec {
            line: 0,
            detail: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.train_config(0).validate()?;
        for &a in &self.architectures {
            self.model_config(a).validate()?;
        }
        if self.seeds.is_empty() || self.bridges.is_empty() || self.architectures.is_empty() {
            return Err(TrainError::Config(
                "seeds, bridges and architecture must be non-empty".into(),
            ));
        }
        let unique: BTreeSet<&String> = self.bridges.iter().collect();
        if unique.len() != self.bridges.len() {
            return Err(TrainError::Config("bridges must be distinct".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal spec.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("name", self.name.clone());
        put("variant", self.method.label().into());
        put(
            "architecture",
            join(
                self.architectures
                    .iter()
                    .map(|a| a.label().to_string())
                    .collect(),
            ),
        );
        put("scope", self.scope.label().into());
        put("bridges", join(self.bridges.clone()));
        put(
            "seeds",
            join(self.seeds.iter().map(u64::to_string).collect()),
        );
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("m_in", self.m_in.to_string());
        put("m_out", self.m_out.to_string());
        put("hidden", self.hidden.to_string());
        put(
            "cnn_channels",
            format!("{}, {}", self.cnn_channels.0, self.cnn_channels.1),
        );
        put("cnn_kernel", self.cnn_kernel.to_string());
        put("cnn_padding", self.cnn_padding.to_string());
        put("e_ref", self.e_ref.label().into());
        put(
            "mask",
            match self.mask_mode {
                MaskMode::PerSequence => "per_sequence",
                MaskMode::PerTimestep => "per_timestep",
            }
            .into(),
        );
        put(
            "p1_mode",
            match self.p1_mode {
                P1Mode::Tanh => "tanh",
                P1Mode::Unconstrained => "unconstrained",
            }
            .into(),
        );
        put("loss_reduction", self.reduction.label().into());
        put("split_seed", self.split_seed.to_string());
        put("outlier_window", self.pipeline.outlier_window.to_string());
        put(
            "outlier_k",
            self.pipeline
                .outlier_k
                .map_or("none".into(), |k| format!("{k:?}")),
        );
        put("smooth_window", self.pipeline.smooth_window.to_string());
        put("max_gap", self.pipeline.max_gap.to_string());
        if let Some(p) = &self.data_root {
            put("data_root", p.display().to_string());
        }
        if let Some(p) = &self.bridge_attrs {
            put("bridge_attrs", p.display().to_string());
        }
        s
    }

    pub fn model_config(&self, architecture: Architecture) -> ModelConfig {
        ModelConfig {
            architecture,
            m_in: self.m_in,
            m_out: self.m_out,
            n_features: crate::datapipe::N_FEATURES,
            hidden: self.hidden,
            cnn_channels: self.cnn_channels,
            cnn_kernel: self.cnn_kernel,
            cnn_padding: self.cnn_padding,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
            seed,
            method: self.method,
            scope: self.scope,
            mask_mode: self.mask_mode,
            p1_mode: self.p1_mode,
            reduction: self.reduction,
        }
    }
}

/// A bridge's attributes and its cleaned record.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeDataset {
    pub attributes: BridgeAttributes,
    pub cleaned: Cleaned,
}

impl BridgeDataset {
    pub fn windows_split(&self, spec: &ExperimentSpec) -> Result<Split, TrainError> {
        let pairs = make_windows(
            &self.cleaned.frame,
            &self.cleaned.spans,
            spec.m_in,
            spec.m_out,
            spec.e_ref,
            self.attributes.as_built_elevation,
        )?;
        Ok(split(pairs, spec.split_seed)?)
    }
}

/// Loads `<root>/<id>.csv` for each id plus the attribute table, and runs
/// the cleaning pipeline. Every missing id is reported at once.
pub fn load_bridge_datasets(
    root: &Path,
    attrs_path: &Path,
    ids: &[String],
    pipeline: &PipelineConfig,
) -> Result<Vec<BridgeDataset>, TrainError> {
    let attrs: BTreeMap<String, BridgeAttributes> = if attrs_path.exists() {
        BridgeAttributes::read_csv(attrs_path)?
            .into_iter()
            .map(|b| (b.id.clone(), b))
            .collect()
    } else {
        BTreeMap::new()
    };
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !attrs.contains_key(*id) || !root.join(format!("{id}.csv")).is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(TrainError::MissingBridges(missing));
    }
    ids.iter()
        .map(|id| {
            let raw = ingest(root.join(format!("{id}.csv")))?;
            Ok(BridgeDataset {
                attributes: attrs[id].clone(),
                cleaned: clean(&raw, pipeline),
            })
        })
        .collect()
}

/// One trained model and its evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub architecture: Architecture,
    pub method: Method,
    pub scope: Scope,
    /// Bridge id, or `All` for the general scope.
    pub training_set: String,
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub scaler: Scaler,
    /// Test metrics per evaluated bridge.
    pub evaluations: Vec<(String, Metrics)>,
    pub calibrated: Option<PhysicsParams>,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

/// Report row laid out like the overall-performance table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub test_set: String,
    pub base_model: Architecture,
    pub method: Method,
    pub scope: Scope,
    pub training_set: String,
    pub runs: usize,
    pub mse: Summary,
    pub mape: Summary,
    pub rmse: Summary,
}

impl ReportRow {
    pub fn method_label(&self) -> &'static str {
        match (self.method, self.scope) {
            (Method::Pure, Scope::SiteSpecific) => "Pure NN",
            (Method::Pure, Scope::General) => "Pure NN (General)",
            (Method::Spinn(_), _) => "SPINN",
        }
    }

    pub fn physics_label(&self) -> &'static str {
        self.method.variant().map_or("N/A", EquationVariant::label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub runs: Vec<RunResult>,
    pub rows: Vec<ReportRow>,
}

/// Groups runs by (test set, base model, training set) and summarizes each
/// metric over seeds.
pub fn aggregate(runs: &[RunResult]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, Architecture, String), (Method, Scope, Vec<Metrics>)> =
        BTreeMap::new();
    for r in runs {
        for (bridge, m) in &r.evaluations {
            groups
                .entry((bridge.clone(), r.architecture, r.training_set.clone()))
                .or_insert_with(|| (r.method, r.scope, Vec::new()))
                .2
                .push(*m);
        }
    }
    groups
        .into_iter()
        .map(
            |((test_set, base_model, training_set), (method, scope, ms))| {
                let col =
                    |f: fn(&Metrics) -> f64| Summary::of(&ms.iter().map(f).collect::<Vec<_>>());
                ReportRow {
                    test_set,
                    base_model,
                    method,
                    scope,
                    training_set,
                    runs: ms.len(),
                    mse: col(|m| m.mse),
                    mape: col(|m| m.mape),
                    rmse: col(|m| m.rmse),
                }
            },
        )
        .collect()
}

struct Job {
    architecture: Architecture,
    seed: u64,
    group: usize,
}

struct Prepared {
    training_set: String,
    train: Vec<crate::datapipe::SequencePair>,
    val: Vec<crate::datapipe::SequencePair>,
    scaler: Scaler,
    tests: Vec<(String, Vec<crate::datapipe::SequencePair>)>,
}

fn prepare(spec: &ExperimentSpec, datasets: &[BridgeDataset]) -> Result<Vec<Prepared>, TrainError> {
    let splits: Vec<(String, Split)> = datasets
        .iter()
        .map(|d| Ok((d.attributes.id.clone(), d.windows_split(spec)?)))
        .collect::<Result<_, TrainError>>()?;
    let groups: Vec<Prepared> = match spec.scope {
        Scope::SiteSpecific => splits
            .into_iter()
            .map(|(id, s)| {
                let scaler = fit_scaler(&s.train)?;
                Ok(Prepared {
                    training_set: id.clone(),
                    train: s.train,
                    val: s.val,
                    scaler,
                    tests: vec![(id, s.test)],
                })
            })
            .collect::<Result<_, TrainError>>()?,
        Scope::General => {
            let mut train = Vec::new();
            let mut val = Vec::new();
            let mut tests = Vec::new();
            for (id, s) in splits {
                train.extend(s.train);
                val.extend(s.val);
                tests.push((id, s.test));
            }
            let scaler = fit_scaler(&train)?;
            vec![Prepared {
                training_set: "All".into(),
                train,
                val,
                scaler,
                tests,
            }]
        }
    };
    Ok(groups)
}

/// Trains and evaluates every (base model, training set, seed) cell of the
/// experiment. Runs are spread over `jobs` threads; results keep a fixed
/// order regardless of scheduling.
pub fn run_experiment(
    spec: &ExperimentSpec,
    datasets: &[BridgeDataset],
    jobs: usize,
) -> Result<ExperimentReport, TrainError> {
    spec.validate()?;
    let have: BTreeSet<&str> = datasets.iter().map(|d| d.attributes.id.as_str()).collect();
    let missing: Vec<String> = spec
        .bridges
        .iter()
        .filter(|b| !have.contains(b.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(TrainError::MissingBridges(missing));
    }
    let selected: Vec<BridgeDataset> = spec
        .bridges
        .iter()
        .map(|b| {
            datasets
                .iter()
                .find(|d| &d.attributes.id == b)
                .cloned()
                .expect("checked above")
        })
        .collect();
    let bridges: BTreeMap<String, BridgeAttributes> = selected
        .iter()
        .map(|d| (d.attributes.id.clone(), d.attributes.clone()))
        .collect();
    let groups = prepare(spec, &selected)?;
    let mut job_list = Vec::new();
    for &architecture in &spec.architectures {
        for group in 0..groups.len() {
            for &seed in &spec.seeds {
                job_list.push(Job {
                    architecture,
                    seed,
                    group,
                });
            }
        }
    }
    let run_one = |job: &Job| -> Result<RunResult, TrainError> {
        let g = &groups[job.group];
        let config = spec.train_config(job.seed);
        let model = Forecaster::new(spec.model_config(job.architecture), job.seed)?;
        let data = TrainData {
            train: &g.train,
            val: &g.val,
            scaler: &g.scaler,
            bridges: &bridges,
        };
        let outcome = train(model, &data, &config)?;
        let evaluations = g
            .tests
            .iter()
            .map(|(id, test)| Ok((id.clone(), evaluate(&outcome.model, &g.scaler, test)?)))
            .collect::<Result<_, TrainError>>()?;
        let calibrated = outcome
            .latent
            .map(|l| constrain(&l, spec.m_in, spec.m_out, spec.p1_mode));
        Ok(RunResult {
            architecture: job.architecture,
            method: spec.method,
            scope: spec.scope,
            training_set: g.training_set.clone(),
            seed: job.seed,
            outcome,
            scaler: g.scaler.clone(),
            evaluations,
            calibrated,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    let runs: Vec<RunResult> =
        pool.install(|| job_list.par_iter().map(run_one).collect::<Result<_, _>>())?;
    let rows = aggregate(&runs);
    Ok(ExperimentReport {
        spec: spec.clone(),
        runs,
        rows,
    })
}

/// Summary table: one row per (test set, base model, training set).
pub fn write_report(rows: &[ReportRow], writer: impl Write) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "test_set",
        "base_model",
        "method",
        "physics_loss",
        "training_set",
        "runs",
        "test_mse_m2",
        "test_mape_pct",
        "test_rmse_m",
    ])?;
    for r in rows {
        w.write_record([
            r.test_set.clone(),
            r.base_model.display_name().to_string(),
            r.method_label().to_string(),
            r.physics_label().to_string(),
            r.training_set.clone(),
            r.runs.to_string(),
            r.mse.to_string(),
            r.mape.to_string(),
            r.rmse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run detail at full precision, including calibrated coefficients.
pub fn write_runs(runs: &[RunResult], writer: impl Write) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "test_set",
        "base_model",
        "method",
        "training_set",
        "seed",
        "best_epoch",
        "mse_m2",
        "mape_pct",
        "rmse_m",
        "p1",
        "p2",
        "p3",
        "t_l_hours",
        "alpha",
        "beta",
    ])?;
    for r in runs {
        let cal = r.calibrated.map(|c| {
            let v = r.method.variant();
            let show = |on: bool, x: f64| if on { format!("{x:?}") } else { "N/A".into() };
            let td = v == Some(EquationVariant::Td);
            let gtd = v == Some(EquationVariant::Gtd);
            [
                show(true, c.p1),
                show(!gtd, c.p2),
                show(td, c.p3),
                show(td || gtd, c.t_l),
                show(gtd, c.alpha),
                show(gtd, c.beta),
            ]
        });
        let cal = cal.unwrap_or_else(|| std::array::from_fn(|_| "N/A".to_string()));
        for (bridge, m) in &r.evaluations {
            let mut rec = vec![
                bridge.clone(),
                r.architecture.display_name().to_string(),
                r.method.label().to_string(),
                r.training_set.clone(),
                r.seed.to_string(),
                r.outcome.best_epoch.to_string(),
                format!("{:?}", m.mse),
                format!("{:?}", m.mape),
                format!("{:?}", m.rmse),
            ];
            rec.extend(cal.iter().cloned());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
