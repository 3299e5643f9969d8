use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
version = 1
seed = 3

[data]
validation_per_group = 10
test_per_group = 40

[[data.toy.classes]]
count = 200
modes = [
  { center = [-3.0, 0.0], std = 0.6, proportion = 0.9 },
  { center = [2.0, 4.0], std = 0.6, proportion = 0.1 },
]

[[data.toy.classes]]
count = 200
modes = [
  { center = [3.0, 0.0], std = 0.6, proportion = 0.9 },
  { center = [-2.0, -4.0], std = 0.6, proportion = 0.1 },
]

[denoiser]
hidden = [32, 32]
activation = "relu"

[train.denoiser]
epochs = 15
batch_size = 64
lr = 0.003
optimizer = "adam"

[train.classifier]
epochs = 2
batch_size = 32
lr = 0.01

[train.retrain]
epochs = 2
batch_size = 32
lr = 0.01
alpha = 1.0
mix_ratio = 0.5

[guidance]
gamma = 1.0
omega = 10.0
criterion = "entropy"
clip_x0 = 8.0

[plan]
level = "group"
pool = "class"

[metrics]
samples_per_class = 40

[sweep]
gammas = [1.0]
omegas = [10.0]
criterion = "entropy"

[ablate]
samples_per_class = 4
dropout_p = 0.25
omega = 10.0
retrain = false
"#;

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn fbgs(&self, args: &[&str]) -> Output {
        let cfg = self.dir.path().join("small.toml");
        Command::new(env!("CARGO_BIN_EXE_fbgs"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(self.out())
            .args(args)
            .env_remove("FBGS_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.fbgs(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.out().join(rel)).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn data_rows(text: &str) -> usize {
    text.lines().filter(|l| !l.starts_with('#')).count() - 1
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_exact_counts() {
    let env = Env::new();
    env.ok(&["gen-data"]);
    assert_eq!(data_rows(&env.read("data/train.csv")), 400);
    assert_eq!(data_rows(&env.read("data/validation.csv")), 40);
    assert_eq!(data_rows(&env.read("data/test.csv")), 160);
    let train = env.read("data/train.csv");
    let groups: Vec<usize> = train.lines().skip(2).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let count = |g| groups.iter().filter(|&&x| x == g).count();
    assert_eq!([count(0), count(1), count(2), count(3)], [180, 20, 180, 20]);
}

#[test]
fn stages_chain_and_sampling_is_reproducible() {
    let env = Env::new();
    env.ok(&["gen-data"]);
    env.ok(&["train-diffusion"]);
    env.ok(&["train-classifier"]);
    assert!(env.out().join("models/stats.json").exists());
    env.ok(&["sample", "--omega", "0", "--criterion", "none", "--per-class", "10", "--name", "a"]);
    env.ok(&["sample", "--omega", "0", "--criterion", "none", "--per-class", "10", "--name", "b", "--jobs", "3"]);
    let a = env.read("samples/a.csv");
    assert_eq!(a, env.read("samples/b.csv"));
    assert_eq!(data_rows(&a), 20);

    env.ok(&["sample"]);
    assert!(env.out().join("plan.json").exists());
    env.ok(&["retrain"]);
    let line = env.ok(&["evaluate"]);
    assert!(line.starts_with("overall "), "{line}");
    let eval = json(&env.out().join("evaluation.json"));
    let overall = eval["stratified"]["overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overall));
}

#[test]
fn evaluate_scores_oracle_predictions() {
    let env = Env::new();
    env.ok(&["gen-data"]);
    let test = env.read("data/test.csv");
    let labels: Vec<&str> = test.lines().skip(2).map(|l| l.split(',').nth(2).unwrap()).collect();
    let mut preds = format!("# fbgs-predictions v1 n={}\nprediction\n", labels.len());
    for l in &labels {
        preds.push_str(l);
        preds.push('\n');
    }
    let path = env.dir.path().join("oracle.csv");
    fs::write(&path, preds).unwrap();
    env.ok(&["evaluate", "--predictions", path.to_str().unwrap()]);
    let eval = json(&env.out().join("evaluation.json"));
    assert_eq!(eval["stratified"]["overall"].as_f64(), Some(1.0));
    assert_eq!(eval["worst_group"].as_f64(), Some(1.0));
}

#[test]
fn exit_codes_follow_error_kind() {
    let env = Env::new();
    assert_eq!(code(&env.fbgs(&["train-diffusion"])), 2);

    env.ok(&["gen-data"]);
    let train = env.out().join("data/train.csv");
    let text = fs::read_to_string(&train).unwrap();
    fs::write(&train, text.replacen("v1", "v9", 1)).unwrap();
    assert_eq!(code(&env.fbgs(&["train-diffusion"])), 3);

    let preds = env.dir.path().join("short.csv");
    fs::write(&preds, "# fbgs-predictions v1 n=2\nprediction\n0\n1\n").unwrap();
    env.ok(&["gen-data", "--force"]);
    assert_eq!(code(&env.fbgs(&["evaluate", "--predictions", preds.to_str().unwrap()])), 3);

    assert_eq!(code(&env.fbgs(&["sample", "--gamma", "-1"])), 4);
    assert_eq!(code(&env.fbgs(&["sample", "--criterion", "margin"])), 4);
    assert_eq!(code(&env.fbgs(&["--jobs", "0", "gen-data"])), 4);
    assert_eq!(code(&env.fbgs(&["no-such-command"])), 4);

    let bad = env.dir.path().join("bad.toml");
    fs::write(&bad, SMALL.replace("omega = 10.0\ncriterion", "omega = -10.0\ncriterion")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fbgs")).arg("--config").arg(&bad).arg("show-config").output().unwrap();
    assert_eq!(code(&o), 4);
    let o = Command::new(env!("CARGO_BIN_EXE_fbgs")).args(["--config", "/nonexistent/x.toml", "show-config"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn show_config_round_trips() {
    let env = Env::new();
    let printed = env.ok(&["show-config", "--seed", "9"]);
    assert!(printed.contains("seed = 9"));
    let path = env.dir.path().join("printed.toml");
    fs::write(&path, &printed).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_fbgs")).arg("--config").arg(&path).arg("show-config").output().unwrap();
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), printed);
}

#[test]
fn run_sweep_and_ablate() {
    let env = Env::new();
    let line = env.ok(&["run"]);
    assert!(line.contains("worst group"), "{line}");
    for rel in ["report.json", "figures/samples.svg", "predictions/before.csv", "predictions/after.csv", "samples/unguided.csv"] {
        assert!(env.out().join(rel).exists(), "{rel}");
    }
    let report = json(&env.out().join("report.json"));
    assert_eq!(report["version"].as_u64(), Some(1));
    let figure = env.read("figures/samples.svg");
    assert!(figure.contains("data-fbgs-plot=\"1\""));

    // A one-cell sweep at the run's guidance reproduces its guided samples.
    env.ok(&["sweep"]);
    assert_eq!(env.read("sweep/cell_g1.0_w10.0.csv"), env.read("samples/guided.csv"));
    let summary = env.read("sweep/summary.csv");
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(2).unwrap().ends_with(",true"));

    env.ok(&["ablate"]);
    let rows = json(&env.out().join("ablate/ablation.json"));
    let names: Vec<&str> = rows["rows"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["cond-only", "+instance", "+dropout", "+Loss", "+Hardness", "+Entropy"]);

    let before = fs::read(env.out().join("report.json")).unwrap();
    env.ok(&["run"]);
    assert_eq!(fs::read(env.out().join("report.json")).unwrap(), before);
}
