use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedmac::cli::{load_fed_config, load_theory_config, FedSummary};
use fedmac::metrics::read_history_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedmac"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

const TINY: &str = r#"
seeds = [1]

[dataset]
source = "synthetic"
n_clients = 6
input_dim = 5
num_classes = 3
min_samples = 20
max_samples = 40
seed = 4

[model]
kind = "mlr"

[hyper]
T = 3
R = 2
S = 3
batch_size = 5
eta_p = 0.05
eta = 10.0

[[runs]]
label = "fedmac"
strategy = { kind = "fedmac" }
hyper = { gamma = 1e-3 }

[[runs]]
label = "fedavg"
strategy = { kind = "fedavg" }

[output]
dir = "out"
"#;

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn shipped_configs_parse() {
    let syn = load_fed_config(&configs().join("synthetic.toml")).unwrap();
    assert_eq!(syn.runs.len(), 3);
    assert_eq!(syn.runs[0].2.rounds, 400);
    assert_eq!((syn.runs[2].2.eta, syn.runs[2].2.eta_p), (0.02, 0.01));
    assert_eq!(syn.runs[0].2.eta_p, 0.01);
    let (sweep, seeds, _) = load_theory_config(&configs().join("theory-f1-vs-f2.toml")).unwrap();
    assert_eq!((sweep.n_i, sweep.s, sweep.trials), (256, 8, 50));
    assert_eq!(seeds, vec![0]);
}

fn write_idx(dir: &Path, images: &str, labels: &str, n: usize) {
    let mut img = vec![0u8, 0, 8, 3];
    for v in [n as u32, 2, 2] {
        img.extend(v.to_be_bytes());
    }
    img.extend((0..4 * n).map(|i| (i * 37 % 256) as u8));
    let mut lab = vec![0u8, 0, 8, 1];
    lab.extend((n as u32).to_be_bytes());
    lab.extend((0..n).map(|i| (i % 10) as u8));
    std::fs::write(dir.join(images), img).unwrap();
    std::fs::write(dir.join(labels), lab).unwrap();
}

#[test]
fn mnist_configs_load_when_files_exist() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_idx(&data, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60);
    write_idx(&data, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 20);
    for name in ["mnist-shards.toml", "sparse-mnist.toml"] {
        std::fs::copy(configs().join(name), dir.path().join(name)).unwrap();
        let plan = load_fed_config(&dir.path().join(name)).unwrap();
        assert_eq!(plan.seeds, vec![0, 1, 2]);
        assert!(plan.runs.iter().all(|r| r.2.local_rounds == 20 && r.2.clients_per_round == 10));
    }
    let plan = load_fed_config(&dir.path().join("mnist-shards.toml")).unwrap();
    assert_eq!(plan.runs.len(), 5);
    assert_eq!((plan.runs[0].2.beta, plan.runs[0].2.lambda, plan.runs[0].2.eta), (1.0, 1e-4, 3000.0));
    let sparse = load_fed_config(&dir.path().join("sparse-mnist.toml")).unwrap();
    let gw: Vec<f64> = sparse.runs[..3].iter().map(|r| r.2.gamma_w).collect();
    assert_eq!(gw, vec![1e-8, 2e-8, 3e-8]);
    assert!(sparse.runs.iter().all(|r| r.2.gamma == 3e-4));
}

#[test]
fn missing_dataset_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(configs().join("mnist-shards.toml"), dir.path().join("m.toml")).unwrap();
    let out = run(&["fed", "--config", dir.path().join("m.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = run(&["fed", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        TINY.replace("T = 3", "T = 3\nbogus = 1"),
        TINY.replace("seeds = [1]", "seeds = []"),
        TINY.replace("S = 3", "S = 7"),
        TINY.replace("label = \"fedavg\"", "label = \"fedmac\""),
        TINY.replace("eta_p = 0.05", "eta_p = -1.0"),
        "not toml [".to_string(),
    ];
    for (k, text) in cases.iter().enumerate() {
        let p = dir.path().join(format!("bad{k}.toml"));
        std::fs::write(&p, text).unwrap();
        let out = run(&["fed", "--config", p.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "case {k}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn empty_measurement_grid_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.toml");
    std::fs::write(&p, "[sweep]\nn_i = 32\ns = 2\nn_d_grid = []\ntrials = 2\n").unwrap();
    let out = run(&["theory", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.toml");
    std::fs::write(&p, TINY.replace("eta_p = 0.05", "eta_p = 1e308")).unwrap();
    let out = run(&["fed", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn one_csv_per_run_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = run(&["fed", "--config", cfg.to_str().unwrap(), "--seeds", "3,4,5", "--threads", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let res = dir.path().join("out");
    for label in ["fedmac", "fedavg"] {
        for seed in [3, 4, 5] {
            let h = read_history_csv(&res.join(format!("{label}_seed{seed}.csv"))).unwrap();
            assert_eq!(h.len(), 4);
            assert_eq!(h.last().unwrap().round, 3);
        }
    }
    let summary: FedSummary =
        serde_json::from_str(&std::fs::read_to_string(res.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.runs.len(), 2);
    assert_eq!(summary.runs[0].seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![3, 4, 5]);
    assert!(summary.runs[0].pm.is_some());
    assert!(summary.runs[1].pm.is_none());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out_dir = dir.path().join(format!("r{k}"));
        let out = run(&[
            "fed",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(out.status.success());
        let files: Vec<Vec<u8>> = ["fedmac_seed1.csv", "fedavg_seed1.csv", "summary.json"]
            .iter()
            .map(|f| std::fs::read(out_dir.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn compare_renders_table_and_checks_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(run(&["fed", "--config", cfg.to_str().unwrap()]).status.success());
    let summary = dir.path().join("out/summary.json");
    let out = run(&["compare", summary.to_str().unwrap()]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("| run |"));
    assert!(lines[2].starts_with("| fedmac |"));
    assert!(lines[3].starts_with("| fedavg |") && lines[3].contains("| – |"));

    let text = std::fs::read_to_string(&summary).unwrap();
    let stale = dir.path().join("stale.json");
    std::fs::write(&stale, text.replace("fedmac-metrics/1", "fedmac-metrics/0")).unwrap();
    let out = run(&["compare", stale.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn theory_writes_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.toml");
    std::fs::write(
        &p,
        "seeds = [2, 3]\n[sweep]\nn_i = 32\ns = 2\ngamma = 0.5\nzetas = [0.0, 1.0]\nn_d_grid = [8, 16, 24]\ntrials = 10\n[output]\ndir = \"th\"\n",
    )
    .unwrap();
    let out = run(&["theory", "--config", p.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 8);
    assert!(dir.path().join("th/sweep_seed2.csv").is_file());
    assert!(dir.path().join("th/sweep_seed3.csv").is_file());
}
