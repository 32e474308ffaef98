use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spinn_cli::RunBundle;
use spinn_core::cee::read_equations;
use spinn_core::models::Checkpoint;

fn spinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinn"))
        .args(args)
        .env_remove("SPINN_DATA_ROOT")
        .output()
        .expect("spawn spinn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, hours: usize, seed: u64, extra: &[&str]) {
    let h = hours.to_string();
    let sd = seed.to_string();
    let mut args = vec!["synth", "--out-dir", s(dir), "--hours", &h, "--seed", &sd];
    args.extend_from_slice(extra);
    let o = spinn(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn preprocess_reports_window_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 1200, 3, &[]);
    let out = tmp.path().join("pre");
    let o = spinn(&[
        "preprocess",
        "--input",
        s(&data.join("synth.csv")),
        "--bridge-attrs",
        s(&data.join("bridges.csv")),
        "--out",
        s(&out),
        "--m-in",
        "24",
        "--m-out",
        "12",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let spans = read_csv(&out.join("spans.csv"));
    assert_eq!(
        spans[0],
        ["bridge", "span_start", "span_end", "hours", "windows"]
    );
    let mut total = 0;
    for row in &spans[1..] {
        let hours: usize = row[3].parse().unwrap();
        let windows: usize = row[4].parse().unwrap();
        assert_eq!(windows, (hours + 1).saturating_sub(36));
        total += windows;
    }
    let seqs = read_csv(&out.join("sequences.csv"));
    let counted: usize = seqs[1..]
        .iter()
        .map(|r| r[4].parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, total);
    assert!(out.join("synth.clean.csv").is_file());
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = preprocess"));
    assert!(manifest.contains("output = spans.csv sha256:"));
}

#[test]
fn preprocess_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 100, 0, &[]);
    let bad = tmp.path().join("synth.csv");
    std::fs::write(&bad, "timestamp,e_bed_m,q_m3s\n2020-01-01T00:00:00Z,1,2\n").unwrap();
    let attrs = data.join("bridges.csv");
    let o = spinn(&[
        "preprocess",
        "--input",
        s(&bad),
        "--bridge-attrs",
        s(&attrs),
        "--out",
        s(&tmp.path().join("o1")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("e_stage_m"), "{}", stderr(&o));

    std::fs::write(&bad, "").unwrap();
    let o = spinn(&[
        "preprocess",
        "--input",
        s(&bad),
        "--bridge-attrs",
        s(&attrs),
        "--out",
        s(&tmp.path().join("o2")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn write_spec(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMOKE: &str = "\
name = smoke
architecture = nlinear
bridges = synth
seeds = 0
epochs = 5
m_in = 168
m_out = 168
";

#[test]
fn train_writes_report_checkpoints_and_equations() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 1500, 1, &[]);
    let pure = write_spec(tmp.path(), "pure.txt", &format!("{SMOKE}variant = pure\n"));
    let out = tmp.path().join("pure_out");
    let o = spinn(&["train", "--experiment-spec", s(&pure), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_csv(&out.join("report.csv"));
    assert_eq!(report.len(), 2);
    assert_eq!(
        &report[1][..6],
        ["synth", "NLinear", "Pure NN", "N/A", "synth", "1"]
    );
    assert!(!out.join("equations").exists());

    let again = spinn(&["train", "--experiment-spec", s(&pure), "--out-dir", s(&out)]);
    assert_eq!(code(&again), 3);
    let forced = spinn(&[
        "train",
        "--experiment-spec",
        s(&pure),
        "--out-dir",
        s(&out),
        "--force",
    ]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));

    let td = write_spec(
        tmp.path(),
        "td.txt",
        &format!("{SMOKE}variant = spinn_td\n"),
    );
    let out = tmp.path().join("td_out");
    let o = spinn(&["train", "--experiment-spec", s(&td), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eq_path = out.join("equations/nlinear_spinn_td_synth_seed0.csv");
    let eqs = read_equations(std::fs::File::open(&eq_path).unwrap()).unwrap();
    let e = &eqs[0];
    assert!(e.p2.is_some() && e.p3.is_some() && e.t_l.is_some());
    assert!(e.alpha.is_none() && e.beta.is_none());

    let ck = Checkpoint::load(out.join("checkpoints/nlinear_spinn_td_synth_seed0.ckpt")).unwrap();
    let bundle = RunBundle::from_checkpoint(&ck).unwrap();
    assert_eq!(bundle.as_built_elevation, Some(100.0));
    assert_eq!(bundle.e_ref.label(), "first_step");
    assert!(bundle.latent.is_some());
    assert_eq!(
        RunBundle::from_checkpoint(&bundle.to_checkpoint()).unwrap(),
        bundle
    );
}

#[test]
fn train_spec_errors() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 600, 1, &[]);
    let bad = write_spec(
        tmp.path(),
        "bad.txt",
        &format!("{SMOKE}variant = pure\nlearning_rat = 0.1\n"),
    );
    let o = spinn(&[
        "train",
        "--experiment-spec",
        s(&bad),
        "--out-dir",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    let missing = write_spec(
        tmp.path(),
        "missing.txt",
        &SMOKE
            .replace("bridges = synth", "bridges = synth, nowhere")
            .replace("name", "variant = pure\nname"),
    );
    let o = spinn(&[
        "train",
        "--experiment-spec",
        s(&missing),
        "--out-dir",
        s(&tmp.path().join("y")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn data_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 600, 2, &[]);
    let specs = tmp.path().join("specs");
    std::fs::create_dir_all(&specs).unwrap();
    let spec = write_spec(
        &specs,
        "s.txt",
        &(SMOKE
            .replace(
                "m_in = 168\nm_out = 168",
                "m_in = 24\nm_out = 12\nepochs = 1",
            )
            .replace("epochs = 5\n", "")
            + "variant = pure\n"),
    );
    let o = spinn(&[
        "train",
        "--experiment-spec",
        s(&spec),
        "--out-dir",
        s(&tmp.path().join("a")),
    ]);
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_spinn"))
        .args([
            "train",
            "--experiment-spec",
            s(&spec),
            "--out-dir",
            s(&tmp.path().join("b")),
        ])
        .env("SPINN_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn predict_from_checkpoint_and_equation() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 1500, 1, &[]);
    let spec = write_spec(
        tmp.path(),
        "pure.txt",
        &format!("{SMOKE}variant = pure\nepochs = 1\n").replace("epochs = 5\n", ""),
    );
    let out = tmp.path().join("run");
    assert_eq!(
        code(&spinn(&[
            "train",
            "--experiment-spec",
            s(&spec),
            "--out-dir",
            s(&out)
        ])),
        0
    );
    let ck = out.join("checkpoints/nlinear_pure_synth_seed0.ckpt");

    // 336 hours of input around the first flood
    let full = std::fs::read_to_string(tmp.path().join("synth.csv")).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    let window = tmp.path().join("synth_window.csv");
    std::fs::write(
        &window,
        format!("{}\n{}\n", lines[0], lines[101..437].join("\n")),
    )
    .unwrap();
    let pred = tmp.path().join("forecast.csv");
    let o = spinn(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&window),
        "--out",
        s(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&pred);
    assert_eq!(
        rows[0],
        ["timestamp", "forecast_scour_m", "observed_scour_m"]
    );
    assert_eq!(rows.len(), 169);
    assert!(rows[1..]
        .iter()
        .all(|r| r[1].parse::<f64>().unwrap().is_finite() && !r[2].is_empty()));
    assert!(Path::new(&format!("{}.manifest.txt", s(&pred))).is_file());

    let short = tmp.path().join("synth_short.csv");
    std::fs::write(
        &short,
        format!("{}\n{}\n", lines[0], lines[1..100].join("\n")),
    )
    .unwrap();
    let o = spinn(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&short),
        "--out",
        s(&tmp.path().join("p2.csv")),
    ]);
    assert_eq!(code(&o), 2);

    let cee = tmp.path().join("cee.csv");
    let o = spinn(&[
        "predict",
        "--equation",
        s(&tmp.path().join("truth.csv")),
        "--input",
        s(&tmp.path().join("synth.csv")),
        "--bridge-attrs",
        s(&tmp.path().join("bridges.csv")),
        "--window",
        "48",
        "--stride",
        "6",
        "--out",
        s(&cee),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&cee);
    assert_eq!(
        rows[0],
        ["timestamp", "mean_m", "lo95_m", "hi95_m", "count"]
    );
    assert!(rows.len() > 10);
    for r in &rows[1..] {
        let (m, lo, hi): (f64, f64, f64) = (
            r[1].parse().unwrap(),
            r[2].parse().unwrap(),
            r[3].parse().unwrap(),
        );
        assert!(lo <= m && m <= hi);
    }

    let o = spinn(&[
        "predict",
        "--equation",
        s(&tmp.path().join("truth.csv")),
        "--input",
        s(&tmp.path().join("synth.csv")),
        "--bridge",
        "elsewhere",
        "--bridge-attrs",
        s(&tmp.path().join("bridges.csv")),
        "--out",
        s(&tmp.path().join("p3.csv")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(
        code(&spinn(&[
            "gradcheck",
            "--arch",
            "nlinear",
            "--variant",
            "pure"
        ])),
        0
    );
    let o = spinn(&[
        "gradcheck",
        "--arch",
        "lstm",
        "--variant",
        "spinn_td",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("latent.raw_tl"));
    let o = spinn(&[
        "gradcheck",
        "--arch",
        "cnn",
        "--variant",
        "gtd",
        "--corrupt-gradient",
        "1.01",
    ]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&spinn(&["gradcheck", "--arch", "transformer"])), 2);
}

#[test]
fn commands_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("a"), 800, 5, &[]);
    synth(&tmp.path().join("b"), 800, 5, &[]);
    for f in ["synth.csv", "bridges.csv", "truth.csv", "floods.csv"] {
        assert_eq!(
            std::fs::read(tmp.path().join("a").join(f)).unwrap(),
            std::fs::read(tmp.path().join("b").join(f)).unwrap()
        );
    }
}
