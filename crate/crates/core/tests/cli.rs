use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cavitybus"))
}

fn scratch(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &PathBuf, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (status.code().unwrap_or(-1), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

fn repo_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// CSV contents with the trailing wall-time column removed.
fn without_wall_time(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .map(|l| {
            let mut cells: Vec<String> = l.split(',').map(str::to_string).collect();
            cells.pop();
            cells
        })
        .collect()
}

const SMALL: &str = r#"
[system]
delta_omega = "2 MHz"
chi_qq = "300 MHz"
chi_rr = 0

[protocol]
n = 2
angles = [0, 0, 0]
nbar = 2
initial = "uniform"

[simulation]
cutoff = 30
"#;

const CIRCUIT: &str = r#"
[circuit]
e_j = ["27.0 GHz", "20.1 GHz"]
e_c = ["0.3 GHz", "0.3 GHz"]
g = ["101 MHz", "127 MHz"]
omega_r = "9.16 GHz"
"#;

#[test]
fn missing_field_is_a_config_error() {
    let d = scratch("missing");
    let cfg = write_config(&d, &CIRCUIT.replace("e_c = [\"0.3 GHz\", \"0.3 GHz\"]\n", ""));
    let (code, _, err) = run(bin().arg("params").arg(&cfg));
    assert_eq!(code, 2);
    assert!(err.contains("circuit.e_c"), "{err}");
}

#[test]
fn params_reports_cross_kerrs() {
    let (code, out, _) = run(bin().arg("params").arg(repo_config("circuit_two_transmons.toml")));
    assert_eq!(code, 0);
    assert!(out.contains("1.499"), "{out}");
    assert!(out.contains("2.982"), "{out}");
}

#[test]
fn uncoupled_circuit_has_no_cross_kerr() {
    let d = scratch("uncoupled");
    let cfg = write_config(&d, &CIRCUIT.replace("[\"101 MHz\", \"127 MHz\"]", "[0, 0]"));
    let (code, out, err) = run(bin().arg("params").arg(&cfg));
    assert_eq!(code, 0, "{err}");
    for line in out.lines().skip(1) {
        let name = line.split_whitespace().next().unwrap();
        if name.ends_with('r') {
            assert_eq!(line.split_whitespace().last(), Some("0"), "{line}");
        }
    }
}

#[test]
fn schedule_counts() {
    let d = scratch("schedule");
    for (n, want) in [(2, "5 3 4"), (3, "12 7 13"), (4, "28 15 37")] {
        let angles = vec!["0"; (1 << n) - 1].join(", ");
        let text = SMALL.replace("n = 2", &format!("n = {n}")).replace("[0, 0, 0]", &format!("[{angles}]"));
        let cfg = write_config(&d, &text.replace("initial = \"uniform\"\n", ""));
        let (code, out, err) = run(bin().arg("schedule").arg(&cfg));
        assert_eq!(code, 0, "{err}");
        assert_eq!(out.lines().last(), Some(want), "n = {n}");
    }
}

#[test]
fn golden_three_qubit_schedule() {
    let d = scratch("golden");
    let cfg = write_config(
        &d,
        &SMALL.replace("n = 2", "n = 3").replace("[0, 0, 0]", "[\"pi/2\", \"pi/3\", \"pi/4\", \"pi/5\", \"pi/6\", \"pi/7\", \"pi/8\"]"),
    );
    let out = d.join("schedule.txt");
    let (code, _, err) = run(bin().arg("schedule").arg(&cfg).arg("--out").arg(&out));
    assert_eq!(code, 0, "{err}");
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/schedule_n3.txt");
    if std::env::var_os("CAVITYBUS_BLESS").is_some() {
        fs::copy(&out, &golden).unwrap();
    }
    assert_eq!(fs::read_to_string(out).unwrap(), fs::read_to_string(golden).unwrap());
}

#[test]
fn identity_angles_leave_qubits_alone() {
    let d = scratch("identity");
    let cfg = write_config(&d, SMALL);
    let (code, _, err) = run(bin().arg("simulate").arg(&cfg).arg("--out").arg(d.join("out")));
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(d.join("out/results.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][2], "F_q");
    let fq: f64 = rows[1][2].parse().unwrap();
    assert!((fq - 1.0).abs() < 1e-6, "{fq}");
    assert!(d.join("out/config.toml").exists());
    assert!(d.join("out/qubits_step_x.csv").exists());
}

#[test]
fn simulate_is_deterministic() {
    let d = scratch("determinism");
    let cfg = write_config(&d, &SMALL.replace("[0, 0, 0]", "[\"pi/2\", \"pi\", \"pi/3\"]"));
    let mut outputs = Vec::new();
    for k in 0..2 {
        let o = d.join(format!("out{k}"));
        assert_eq!(run(bin().arg("simulate").arg(&cfg).arg("--out").arg(&o)).0, 0);
        outputs.push(without_wall_time(&fs::read_to_string(o.join("results.csv")).unwrap()));
        outputs.push(vec![vec![fs::read_to_string(o.join("qubits_step_x.csv")).unwrap()]]);
    }
    assert_eq!(outputs[0], outputs[2]);
    assert_eq!(outputs[1], outputs[3]);
}

#[test]
fn one_point_sweep_matches_simulate() {
    let d = scratch("sweep_single");
    let cfg = write_config(&d, &SMALL.replace("[0, 0, 0]", "[\"pi/2\", \"pi\", \"pi\"]"));
    assert_eq!(run(bin().arg("simulate").arg(&cfg).arg("--out").arg(d.join("sim"))).0, 0);
    let sweep = d.join("sweep.csv");
    let (code, _, err) = run(bin().arg("sweep").arg(&cfg).args(["--vary", "protocol.nbar=2:2:1", "--out"]).arg(&sweep));
    assert_eq!(code, 0, "{err}");
    let a = without_wall_time(&fs::read_to_string(d.join("sim/results.csv")).unwrap());
    let b = without_wall_time(&fs::read_to_string(sweep).unwrap());
    assert_eq!(a, b);
}

#[test]
fn sweep_output_ignores_thread_count() {
    let d = scratch("sweep_parallel");
    let cfg = write_config(&d, &SMALL.replace("[0, 0, 0]", "[\"pi/2\", \"pi\", \"pi\"]"));
    let mut tables = Vec::new();
    for k in [1, 2] {
        let out = d.join(format!("p{k}.csv"));
        let (code, _, err) = run(bin()
            .arg("sweep")
            .arg(&cfg)
            .args(["--vary", "system.delta_omega=1:3:3", "--parallel", &k.to_string(), "--out"])
            .arg(&out));
        assert_eq!(code, 0, "{err}");
        tables.push(without_wall_time(&fs::read_to_string(out).unwrap()));
    }
    assert_eq!(tables[0].len(), 4);
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn sweep_rejects_unknown_key() {
    let d = scratch("sweep_unknown");
    let cfg = write_config(&d, SMALL);
    let (code, _, err) =
        run(bin().arg("sweep").arg(&cfg).args(["--vary", "system.bogus=1:2:2", "--out"]).arg(d.join("x.csv")));
    assert_eq!(code, 2, "{err}");
}

#[test]
fn verify_catches_wrong_dispersive_formula() {
    let (code, out, _) = run(bin().args(["verify", "--only", "1", "--tamper-chi-formula"]));
    assert_eq!(code, 1);
    assert!(out.contains("dispersive identity"), "{out}");
}

#[test]
fn verify_subset_passes() {
    let (code, out, _) = run(bin().args(["verify", "--only", "1,10"]));
    assert_eq!(code, 0, "{out}");
}
